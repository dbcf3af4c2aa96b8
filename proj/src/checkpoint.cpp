#include "protos/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "binary_io.hpp"
#include "protos/errors.hpp"

namespace protos {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr int kArchiveSchema = 1;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr))
        throw std::runtime_error("sha256 failed");
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

std::string sha256_hex(std::span<const float> values) {
    std::ostringstream bytes;
    detail::write_floats_le(bytes, values);
    const std::string s = bytes.str();
    return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

const NamedTensor* TensorArchive::find(const std::string& name) const {
    auto it = std::lower_bound(tensors.begin(), tensors.end(), name,
                               [](const NamedTensor& t, const std::string& n) { return t.name < n; });
    return (it != tensors.end() && it->name == name) ? &*it : nullptr;
}

void write_tensor_archive(const fs::path& dir, std::vector<NamedTensor> tensors, const json& metadata) {
    std::sort(tensors.begin(), tensors.end(), [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
    fs::path tmp = dir;
    tmp += ".partial";
    fs::remove_all(tmp);
    fs::create_directories(tmp);

    json entries = json::array();
    {
        std::ofstream blob(tmp / "params.bin", std::ios::binary);
        if (!blob) throw IoError("cannot write " + (tmp / "params.bin").string());
        std::uint64_t offset = 0;
        for (const auto& t : tensors) {
            std::size_t count = 1;
            for (int s : t.shape) count *= static_cast<std::size_t>(s);
            if (count != t.values.size()) throw RejectedInput("tensor " + t.name + " does not match its shape");
            detail::write_floats_le(blob, t.values);
            entries.push_back({{"name", t.name},
                               {"shape", t.shape},
                               {"dtype", "float32"},
                               {"offset", offset},
                               {"nbytes", t.values.size() * sizeof(float)},
                               {"sha256", sha256_hex(std::span<const float>(t.values))}});
            offset += t.values.size() * sizeof(float);
        }
        if (!blob) throw IoError("write failed: params.bin");
    }
    json manifest = {{"schema_version", kArchiveSchema}, {"tensors", entries}, {"metadata", metadata}};
    {
        std::ofstream out(tmp / "manifest.json");
        out << manifest.dump(2) << '\n';
        if (!out) throw IoError("write failed: manifest.json");
    }
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

TensorArchive read_tensor_archive(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("missing checkpoint manifest in " + dir.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }
    if (manifest.value("schema_version", 0) != kArchiveSchema) throw FormatError("unsupported checkpoint schema");

    std::ifstream blob(dir / "params.bin", std::ios::binary);
    if (!blob) throw IoError("missing params.bin in " + dir.string());
    TensorArchive archive;
    archive.metadata = manifest.value("metadata", json::object());
    for (const auto& e : manifest.at("tensors")) {
        NamedTensor t;
        t.name = e.at("name").get<std::string>();
        t.shape = e.at("shape").get<std::vector<int>>();
        if (e.at("dtype") != "float32") throw FormatError("unsupported dtype for " + t.name);
        std::size_t count = 1;
        for (int s : t.shape) count *= static_cast<std::size_t>(s);
        if (e.at("nbytes").get<std::uint64_t>() != count * sizeof(float)) throw FormatError("bad size for " + t.name);
        t.values.resize(count);
        blob.seekg(static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
        detail::read_floats_le(blob, t.values);
        if (sha256_hex(std::span<const float>(t.values)) != e.at("sha256").get<std::string>())
            throw FormatError("digest mismatch for tensor " + t.name);
        archive.tensors.push_back(std::move(t));
    }
    std::sort(archive.tensors.begin(), archive.tensors.end(),
              [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
    return archive;
}

}  // namespace protos

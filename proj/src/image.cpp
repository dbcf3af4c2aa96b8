#include "protos/image.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "protos/errors.hpp"

namespace protos {

namespace {

std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::vector<std::uint8_t> write_memory(png_image& desc, const void* buffer) {
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&desc, nullptr, &size, 0, buffer, 0, nullptr)) {
        throw IoError(std::string("png encode failed: ") + desc.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&desc, out.data(), &size, 0, buffer, 0, nullptr)) {
        throw IoError(std::string("png encode failed: ") + desc.message);
    }
    out.resize(size);
    return out;
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path, png_image& desc, png_uint_32 format) {
    desc.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&desc, path.c_str())) {
        throw IoError("cannot read png " + path.string() + ": " + desc.message);
    }
    desc.format = format;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(desc));
    if (!png_image_finish_read(&desc, nullptr, buffer.data(), 0, nullptr)) {
        throw IoError("cannot decode png " + path.string() + ": " + desc.message);
    }
    return buffer;
}

}  // namespace

void quantize_8bit(Image& image) {
    for (float& v : image.data) v = static_cast<float>(to_byte(v)) / 255.0f;
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    if (image.channels != 3) throw RejectedInput("encode_png expects 3 channels");
    std::vector<std::uint8_t> bytes(image.data.size());
    std::transform(image.data.begin(), image.data.end(), bytes.begin(), to_byte);
    png_image desc{};
    desc.version = PNG_IMAGE_VERSION;
    desc.width = static_cast<png_uint_32>(image.width);
    desc.height = static_cast<png_uint_32>(image.height);
    desc.format = PNG_FORMAT_RGB;
    return write_memory(desc, bytes.data());
}

std::vector<std::uint8_t> encode_png(const LabelMap& labels) {
    png_image desc{};
    desc.version = PNG_IMAGE_VERSION;
    desc.width = static_cast<png_uint_32>(labels.width);
    desc.height = static_cast<png_uint_32>(labels.height);
    desc.format = PNG_FORMAT_GRAY;
    return write_memory(desc, labels.data.data());
}

void write_png(const Image& image, const std::filesystem::path& path) { write_bytes(encode_png(image), path); }

void write_png(const LabelMap& labels, const std::filesystem::path& path) { write_bytes(encode_png(labels), path); }

Image read_png_rgb(const std::filesystem::path& path) {
    png_image desc{};
    auto buffer = read_file(path, desc, PNG_FORMAT_RGB);
    Image image(static_cast<int>(desc.height), static_cast<int>(desc.width), 3);
    for (std::size_t i = 0; i < buffer.size(); ++i) image.data[i] = static_cast<float>(buffer[i]) / 255.0f;
    png_image_free(&desc);
    return image;
}

LabelMap read_png_labels(const std::filesystem::path& path) {
    png_image desc{};
    auto buffer = read_file(path, desc, PNG_FORMAT_GRAY);
    LabelMap labels(static_cast<int>(desc.height), static_cast<int>(desc.width));
    labels.data = std::move(buffer);
    png_image_free(&desc);
    return labels;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

}  // namespace protos

#include "protos/embeddings.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "protos/errors.hpp"

namespace protos {

namespace {

constexpr std::array<char, 4> kGridMagic{'P', 'G', 'R', 'D'};
constexpr std::uint16_t kGridVersion = 1;

MatrixRM orthonormal_rows(int rows, int cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd gaussian(cols, rows);
    for (int c = 0; c < rows; ++c)
        for (int r = 0; r < cols; ++r) gaussian(r, c) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(cols, rows);
    // Fix the sign ambiguity of QR so the basis depends only on the seed.
    Eigen::MatrixXd r = qr.matrixQR().topRows(rows).triangularView<Eigen::Upper>();
    for (int c = 0; c < rows; ++c)
        if (r(c, c) < 0) q.col(c) = -q.col(c);
    return q.transpose().cast<float>();
}

}  // namespace

void PatchGrid::validate() const {
    if (rows < 1 || cols < 1 || dim < 1) throw RejectedInput("patch grid extents must be positive");
    if (values.size() != static_cast<std::size_t>(rows) * cols * dim)
        throw RejectedInput("patch grid payload does not match rows*cols*dim");
    for (float v : values)
        if (!std::isfinite(v)) throw RejectedInput("patch grid contains non-finite values");
}

ToyBackbone::ToyBackbone(const ToyBackboneConfig& cfg) : cfg_(cfg) {
    if (cfg.patch_size < 1 || cfg.channels < 1 || cfg.out_dim < 1) throw RejectedInput("invalid toy backbone config");
    const int in_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
    if (cfg.out_dim > in_dim) throw RejectedInput("out_dim must not exceed patch_size^2 * channels");
    projection_ = orthonormal_rows(cfg.out_dim, in_dim, cfg.seed);
}

PatchGrid ToyBackbone::embed(const Image& image) const {
    const int s = cfg_.patch_size;
    if (image.channels != cfg_.channels) throw RejectedInput("image channel count does not match backbone");
    if (image.height < s || image.width < s || image.height % s != 0 || image.width % s != 0)
        throw RejectedInput("image dimensions must be positive multiples of the patch size");

    PatchGrid grid(image.height / s, image.width / s, cfg_.out_dim);
    const int in_dim = s * s * cfg_.channels;
    VectorF patch(in_dim);
    for (int pr = 0; pr < grid.rows; ++pr) {
        for (int pc = 0; pc < grid.cols; ++pc) {
            int k = 0;
            for (int dy = 0; dy < s; ++dy)
                for (int dx = 0; dx < s; ++dx)
                    for (int c = 0; c < cfg_.channels; ++c) patch[k++] = image.at(pr * s + dy, pc * s + dx, c);
            Eigen::Map<VectorF> out(grid.cell(pr * grid.cols + pc), cfg_.out_dim);
            out.noalias() = projection_ * patch;
            if (cfg_.normalize) {
                // Plain loops: Eigen's vectorized reductions over a Map depend on the buffer's alignment.
                double sum = 0.0, sq = 0.0;
                for (float v : out) sum += v;
                const double mean = sum / cfg_.out_dim;
                for (float v : out) sq += (v - mean) * (v - mean);
                const double scale = 1.0 / std::sqrt(sq / cfg_.out_dim + 1e-6);
                for (float& v : out) v = static_cast<float>((v - mean) * scale);
            }
        }
    }
    return grid;
}

PatchGrid toy_embed(const Image& image, const ToyBackboneConfig& cfg) { return ToyBackbone(cfg).embed(image); }

void save_patch_grid(const PatchGrid& grid, const std::filesystem::path& path) {
    grid.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kGridMagic.data(), kGridMagic.size());
    detail::write_le<std::uint16_t>(out, kGridVersion);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(grid.rows));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(grid.cols));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(grid.dim));
    detail::write_floats_le(out, grid.values);
    if (!out) throw IoError("write failed: " + path.string());
}

PatchGrid load_patch_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (in.gcount() != 4 || magic != kGridMagic) throw FormatError("not a patch grid file (bad magic)");
    if (detail::read_le<std::uint16_t>(in) != kGridVersion) throw FormatError("unsupported patch grid version");
    const auto rows = detail::read_le<std::uint32_t>(in);
    const auto cols = detail::read_le<std::uint32_t>(in);
    const auto dim = detail::read_le<std::uint32_t>(in);
    if (rows == 0 || cols == 0 || dim == 0 || rows > (1u << 16) || cols > (1u << 16) || dim > (1u << 20))
        throw FormatError("implausible patch grid shape header");
    PatchGrid grid(static_cast<int>(rows), static_cast<int>(cols), static_cast<int>(dim));
    detail::read_floats_le(in, grid.values);
    return grid;
}

}  // namespace protos

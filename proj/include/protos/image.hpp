#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace protos {

/// Row-major H x W x C float image with values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c = 3, float fill = 0.0f)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

    bool operator==(const Image&) const = default;
};

/// Single-channel label image (0 = no label).
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const LabelMap&) const = default;
};

/// Round every value to the nearest multiple of 1/255 so 8-bit storage is lossless.
void quantize_8bit(Image& image);

std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> encode_png(const LabelMap& labels);

void write_png(const Image& image, const std::filesystem::path& path);
void write_png(const LabelMap& labels, const std::filesystem::path& path);
Image read_png_rgb(const std::filesystem::path& path);
LabelMap read_png_labels(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);

}  // namespace protos

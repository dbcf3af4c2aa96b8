#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>

#include "protos/errors.hpp"

namespace protos::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    } else {
        return v;
    }
}

template <typename T>
void write_le(std::ostream& out, T v) {
    v = to_little(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw IoError("unexpected end of file");
    return to_little(v);
}

inline void write_floats_le(std::ostream& out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (float v : values) write_le(out, v);
    }
}

inline void read_floats_le(std::istream& in, std::span<float> values) {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    if (in.gcount() != static_cast<std::streamsize>(values.size_bytes())) throw IoError("truncated float payload");
    if constexpr (std::endian::native == std::endian::big) {
        for (float& v : values) v = to_little(v);
    }
}

}  // namespace protos::detail

#pragma once

// Little-endian primitive encoding shared by the binary file formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>

#include "evmorph/error.hpp"

namespace evmorph::io {

template <typename T>
    requires std::is_arithmetic_v<T>
void write_le(std::ostream& out, T value) {
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes.begin(), bytes.end());
    }
    out.write(bytes.data(), sizeof(T));
}

/// Reads a little-endian value; `what` names the field in the error message.
template <typename T>
    requires std::is_arithmetic_v<T>
T read_le(std::istream& in, std::string_view what) {
    const auto offset = static_cast<std::size_t>(in.tellg());
    std::array<char, sizeof(T)> bytes;
    if (!in.read(bytes.data(), sizeof(T))) {
        throw ParseError("truncated input while reading " + std::string(what), offset);
    }
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes.begin(), bytes.end());
    }
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

inline void write_magic(std::ostream& out, std::string_view magic) {
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    if (!in.read(got.data(), static_cast<std::streamsize>(magic.size())) || got != magic) {
        throw ParseError("bad magic, expected " + std::string(magic), 0);
    }
}

}  // namespace evmorph::io

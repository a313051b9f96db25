#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "kvprompt/tensor.hpp"

// Tensor blob format (little-endian, independent of host byte order):
//   magic "KVT1" | dtype u8 (0 = f32, 1 = f64) | rank u64 | dims u64... | payload
// Values only; gradient state is a runtime property and is not serialized.

namespace kvp {

inline constexpr char kTensorMagic[4] = {'K', 'V', 'T', '1'};

template <class T>
constexpr std::uint8_t dtype_code() {
    if constexpr (std::is_same_v<T, float>) {
        return 0;
    } else {
        return 1;
    }
}

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(buf, 8);
}

inline std::uint64_t read_u64_le(std::istream& is, std::size_t& offset) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw ParseError("tensor blob truncated at byte offset " + std::to_string(offset));
    offset += 8;
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

template <class T>
void write_scalar_le(std::ostream& os, T v) {
    if constexpr (std::is_same_v<T, float>) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        char buf[4];
        for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        os.write(buf, 4);
    } else {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        os.write(buf, 8);
    }
}

template <class T>
T read_scalar_le(std::istream& is, std::size_t& offset) {
    constexpr std::size_t w = sizeof(T);
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), w);
    if (!is) throw ParseError("tensor blob truncated at byte offset " + std::to_string(offset));
    offset += w;
    if constexpr (std::is_same_v<T, float>) {
        std::uint32_t bits = 0;
        for (std::size_t i = 0; i < w; ++i) bits |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
        return std::bit_cast<float>(bits);
    } else {
        std::uint64_t bits = 0;
        for (std::size_t i = 0; i < w; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return std::bit_cast<double>(bits);
    }
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    os.write(kTensorMagic, 4);
    const std::uint8_t dt = dtype_code<T>();
    os.write(reinterpret_cast<const char*>(&dt), 1);
    detail::write_u64_le(os, t.shape.size());
    for (std::size_t d : t.shape) detail::write_u64_le(os, d);
    for (T v : t.data) detail::write_scalar_le(os, v);
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
    std::size_t offset = 0;
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw ParseError("bad tensor magic at byte offset 0: expected \"KVT1\"");
    }
    offset += 4;
    std::uint8_t dt = 0;
    is.read(reinterpret_cast<char*>(&dt), 1);
    if (!is) throw ParseError("tensor blob truncated at byte offset 4");
    offset += 1;
    if (dt != dtype_code<T>()) {
        throw ParseError("tensor dtype code " + std::to_string(dt) + " does not match run precision (expected " +
                         std::to_string(dtype_code<T>()) + ")");
    }
    const std::uint64_t rank = detail::read_u64_le(is, offset);
    if (rank > 8) throw ParseError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_u64_le(is, offset);
    Tensor<T> t(shape);
    for (T& v : t.data) v = detail::read_scalar_le<T>(is, offset);
    return t;
}

template <class T>
std::string tensor_to_bytes(const Tensor<T>& t) {
    std::ostringstream ss(std::ios::binary);
    write_tensor(ss, t);
    return ss.str();
}

template <class T>
Tensor<T> tensor_from_bytes(const std::string& bytes) {
    std::istringstream ss(bytes, std::ios::binary);
    return read_tensor<T>(ss);
}

}  // namespace kvp

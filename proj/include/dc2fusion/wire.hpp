#pragma once

// Little-endian binary readers/writers shared by the checkpoint and volume
// file formats. Explicit byte shuffling keeps the formats platform-independent.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "dc2fusion/common.hpp"

namespace dc2f::wire {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline std::uint8_t get_u8(std::istream& is, const char* what) {
    int c = is.get();
    if (c == EOF) throw DataError(std::string("truncated payload: ") + what);
    return static_cast<std::uint8_t>(c);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError(std::string("truncated payload: ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint64_t lo = get_u32(is, what);
    std::uint64_t hi = get_u32(is, what);
    return lo | (hi << 32);
}

inline float get_f32(std::istream& is, const char* what) {
    std::uint32_t bits = get_u32(is, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline double get_f64(std::istream& is, const char* what) {
    std::uint64_t bits = get_u64(is, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
    char b[4];
    if (!is.read(b, 4)) throw DataError(std::string("truncated payload: ") + what);
    if (std::memcmp(b, magic, 4) != 0) throw DataError(std::string("bad magic: ") + what);
}

}  // namespace dc2f::wire

#pragma once

// Little-endian primitive I/O shared by the on-disk formats.

#include "tokendial/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace tokendial::binio {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw Error(ErrorCode::format, std::string("corrupt header: truncated while reading ") + what);
    }
}

inline void put_u16(std::ostream& os, std::uint16_t v) { put_bytes(os, &v, 2); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_bytes(os, &v, 4); }
inline void put_f32(std::ostream& os, float v) { put_bytes(os, &v, 4); }

inline std::uint16_t get_u16(std::istream& is, const char* what) {
    std::uint16_t v;
    get_bytes(is, &v, 2, what);
    return v;
}
inline std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    get_bytes(is, &v, 4, what);
    return v;
}
inline float get_f32(std::istream& is, const char* what) {
    float v;
    get_bytes(is, &v, 4, what);
    return v;
}

inline void put_magic(std::ostream& os, std::string_view magic) { put_bytes(os, magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic) {
    char buf[4];
    get_bytes(is, buf, 4, "magic");
    if (std::memcmp(buf, magic.data(), 4) != 0) {
        throw Error(ErrorCode::format, "corrupt header: expected magic " + std::string(magic));
    }
}

// u32 length + raw bytes.
inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    put_bytes(os, s.data(), s.size());
}

inline std::string get_string(std::istream& is, const char* what, std::size_t limit = 1u << 24) {
    std::uint32_t n = get_u32(is, what);
    if (n > limit) throw Error(ErrorCode::format, std::string("corrupt header: oversized ") + what);
    std::string s(n, '\0');
    get_bytes(is, s.data(), n, what);
    return s;
}

}  // namespace tokendial::binio

#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace cseg {

// Little-endian primitive IO, independent of host byte order.

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}
inline void write_u16(std::ostream& os, std::uint16_t v) {
    os.put(static_cast<char>(v & 0xff));
    os.put(static_cast<char>((v >> 8) & 0xff));
}
inline void write_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline std::uint8_t read_u8(std::istream& is) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error("binio: unexpected end of file");
    return static_cast<std::uint8_t>(c);
}
inline std::uint16_t read_u16(std::istream& is) {
    const std::uint16_t lo = read_u8(is);
    const std::uint16_t hi = read_u8(is);
    return static_cast<std::uint16_t>(lo | (hi << 8));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(read_u8(is)) << (8 * i);
    return v;
}
inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void write_bytes(std::ostream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}
inline void read_bytes(std::istream& is, void* data, std::size_t n) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw std::runtime_error("binio: unexpected end of file");
}

inline std::string read_string(std::istream& is, std::size_t n) {
    std::string s(n, '\0');
    read_bytes(is, s.data(), n);
    return s;
}

}  // namespace cseg

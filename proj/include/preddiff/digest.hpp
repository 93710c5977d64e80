#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "preddiff/errors.hpp"

namespace preddiff {

// FNV-1a 64-bit content digest; used by run manifests to pin input and
// output file contents.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

inline std::string fnv1a64_hex(const void* bytes, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(bytes, n);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

inline std::string file_digest_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open for digest: " + path);
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64_hex(bytes.data(), bytes.size());
}

}  // namespace preddiff

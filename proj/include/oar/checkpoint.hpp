#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "oar/params.hpp"

namespace oar {

// Checkpoint container, version 1. Little-endian throughout:
//   magic "OARC", u32 version, u32 parameter count,
//   then per parameter: u32 name length, UTF-8 name bytes,
//   u32 rank, u32 dims[rank], f32 values[product(dims)].
// Round-trips bit-exactly.
namespace ckpt {

constexpr char kMagic[4] = {'O', 'A', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated while reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    std::uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace ckpt

inline void save_params(std::ostream& os, const ParamSet<float>& ps) {
    os.write(ckpt::kMagic, 4);
    ckpt::put_u32(os, ckpt::kVersion);
    ckpt::put_u32(os, static_cast<std::uint32_t>(ps.size()));
    for (const auto& p : ps.params()) {
        ckpt::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        ckpt::put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
        for (int d : p.value.shape) ckpt::put_u32(os, static_cast<std::uint32_t>(d));
        for (float v : p.value.data) ckpt::put_f32(os, v);
    }
    if (!os) throw IoError("checkpoint write failed");
}

inline ParamSet<float> load_params(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, ckpt::kMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic");
    }
    const std::uint32_t version = ckpt::get_u32(is);
    if (version != ckpt::kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = ckpt::get_u32(is);
    ParamSet<float> ps;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = ckpt::get_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError("checkpoint truncated in parameter name");
        const std::uint32_t rank = ckpt::get_u32(is);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(ckpt::get_u32(is));
        TensorT<float> t(shape);
        for (auto& v : t.data) v = ckpt::get_f32(is);
        ps.add(name, std::move(t));
    }
    return ps;
}

inline void save_params_file(const std::string& path, const ParamSet<float>& ps) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    save_params(f, ps);
}

inline ParamSet<float> load_params_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    return load_params(f);
}

}  // namespace oar

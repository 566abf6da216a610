#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "reflecta/error.hpp"
#include "reflecta/nnet/network.hpp"

namespace reflecta::nnet {

// Layout, all integers and floats little-endian:
//   8 bytes magic "RFLNET01"
//   u32 config length, config JSON text
//   u32 tensor count, then per tensor: u32 rank, rank x u32 dims, float32 data
// Tensors are stored as w0, b0, w1, b1, ... in layer order.

namespace detail {

inline constexpr char kNetMagic[8] = {'R', 'F', 'L', 'N', 'E', 'T', '0', '1'};

inline void put_u32(std::ostream& os, std::uint32_t v)
{
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is)
{
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw FormatError("network file truncated");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& os, float f)
{
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(os, u);
}

inline float get_f32(std::istream& is)
{
    const std::uint32_t u = get_u32(is);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

template <class It>
void put_tensor(std::ostream& os, const std::vector<std::uint32_t>& dims, It begin, It end)
{
    put_u32(os, std::uint32_t(dims.size()));
    for (auto d : dims)
        put_u32(os, d);
    for (It it = begin; it != end; ++it)
        put_f32(os, float(*it));
}

} // namespace detail

template <class Real>
void save_network(const Network<Real>& net, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot write network file " + path.string());
    os.write(detail::kNetMagic, 8);
    const std::string cfg = to_json(net.config()).dump();
    detail::put_u32(os, std::uint32_t(cfg.size()));
    os.write(cfg.data(), std::streamsize(cfg.size()));
    detail::put_u32(os, std::uint32_t(2 * net.params().size()));
    for (const auto& p : net.params()) {
        detail::put_tensor(os, {std::uint32_t(p.w.n), std::uint32_t(p.w.c), std::uint32_t(p.w.h), std::uint32_t(p.w.w)},
                           p.w.data.begin(), p.w.data.end());
        detail::put_tensor(os, {std::uint32_t(p.b.size())}, p.b.begin(), p.b.end());
    }
    if (!os)
        throw IoError("failed writing network file " + path.string());
}

template <class Real = float>
Network<Real> load_network(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open network file " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kNetMagic, 8) != 0)
        throw FormatError(path.string() + ": not a network file");
    const std::uint32_t len = detail::get_u32(is);
    std::string cfg(len, '\0');
    if (!is.read(cfg.data(), len))
        throw FormatError(path.string() + ": truncated config");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad config JSON: " + e.what());
    }
    Network<Real> net(network_config_from_json(j));
    if (detail::get_u32(is) != 2 * net.params().size())
        throw FormatError(path.string() + ": tensor count does not match config");
    auto read_dims = [&](std::vector<std::uint32_t> want) {
        const std::uint32_t rank = detail::get_u32(is);
        if (rank != want.size())
            throw FormatError(path.string() + ": tensor rank mismatch");
        for (auto d : want)
            if (detail::get_u32(is) != d)
                throw FormatError(path.string() + ": tensor shape does not match config");
    };
    for (auto& p : net.params()) {
        read_dims({std::uint32_t(p.w.n), std::uint32_t(p.w.c), std::uint32_t(p.w.h), std::uint32_t(p.w.w)});
        for (auto& v : p.w.data)
            v = Real(detail::get_f32(is));
        read_dims({std::uint32_t(p.b.size())});
        for (auto& v : p.b)
            v = Real(detail::get_f32(is));
    }
    return net;
}

} // namespace reflecta::nnet

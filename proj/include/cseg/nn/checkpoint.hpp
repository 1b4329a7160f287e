#pragma once

#include <fstream>
#include <map>
#include <string>

#include "cseg/core/binio.hpp"
#include "cseg/nn/network.hpp"

namespace cseg {

// Checkpoint container ("CSCK"), version 1, little-endian throughout:
//   magic "CSCK" | u16 version | u32 config_len | config JSON (UTF-8)
//   | u32 param_count | for each parameter:
//       u16 name_len | name | u8 rank | u32 extent[rank] | f32 value[numel]
// Values are stored as 32-bit floats regardless of the in-memory scalar type.

inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename S>
void save_checkpoint(const Network<S>& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "checkpoint: cannot open " + path + " for writing");
    os.write("CSCK", 4);
    write_u16(os, kCheckpointVersion);
    const std::string cfg = nlohmann::json(net.config).dump();
    write_u32(os, static_cast<std::uint32_t>(cfg.size()));
    write_bytes(os, cfg.data(), cfg.size());
    write_u32(os, static_cast<std::uint32_t>(net.params.size()));
    for (const auto& p : net.params) {
        write_u16(os, static_cast<std::uint16_t>(p.name.size()));
        write_bytes(os, p.name.data(), p.name.size());
        write_u8(os, static_cast<std::uint8_t>(p.tensor.rank()));
        for (std::size_t i = 0; i < p.tensor.rank(); ++i)
            write_u32(os, static_cast<std::uint32_t>(p.tensor.dim(i)));
        for (const S v : p.tensor.values()) write_f32(os, static_cast<float>(v));
    }
    check(static_cast<bool>(os), "checkpoint: write to " + path + " failed");
}

/// Read just the embedded configuration (cheap header inspection).
inline NetworkConfig read_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(static_cast<bool>(is), "checkpoint: cannot open " + path);
    check(read_string(is, 4) == "CSCK", "checkpoint: " + path + " has the wrong magic");
    const std::uint16_t version = read_u16(is);
    check(version == kCheckpointVersion,
          "checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t len = read_u32(is);
    return nlohmann::json::parse(read_string(is, len)).get<NetworkConfig>();
}

template <typename S>
Network<S> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(static_cast<bool>(is), "checkpoint: cannot open " + path);
    check(read_string(is, 4) == "CSCK", "checkpoint: " + path + " has the wrong magic");
    const std::uint16_t version = read_u16(is);
    check(version == kCheckpointVersion,
          "checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t cfg_len = read_u32(is);
    const NetworkConfig cfg =
        nlohmann::json::parse(read_string(is, cfg_len)).get<NetworkConfig>();
    Network<S> net = build_network<S>(cfg);

    std::map<std::string, Tensor<S>> by_name;
    for (auto& p : net.params) by_name.emplace(p.name, p.tensor);

    const std::uint32_t n = read_u32(is);
    check(n == net.params.size(), "checkpoint: " + path + " stores " + std::to_string(n) +
                                      " parameters, the configuration defines " +
                                      std::to_string(net.params.size()));
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint16_t name_len = read_u16(is);
        const std::string name = read_string(is, name_len);
        auto it = by_name.find(name);
        check(it != by_name.end(), "checkpoint: unknown parameter " + name);
        const std::uint8_t rank = read_u8(is);
        Shape shape(rank);
        for (auto& e : shape) e = read_u32(is);
        check(shape == it->second.shape(),
              "checkpoint: parameter " + name + " has shape " + shape_str(shape) +
                  ", expected " + shape_str(it->second.shape()));
        for (auto& v : it->second.values()) v = static_cast<S>(read_f32(is));
        by_name.erase(it);
    }
    check(by_name.empty(), "checkpoint: missing parameters (first: " +
                               (by_name.empty() ? std::string() : by_name.begin()->first) + ")");
    return net;
}

}  // namespace cseg

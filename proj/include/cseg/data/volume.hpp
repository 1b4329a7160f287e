#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cseg/core/binio.hpp"
#include "cseg/core/tensor.hpp"

namespace cseg {

using Dims3 = std::array<std::size_t, 3>;

inline std::size_t dims_voxels(const Dims3& d) { return d[0] * d[1] * d[2]; }

inline std::string dims_str(const Dims3& d) {
    return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

/// Multi-channel scalar field on a voxel grid; data is channel-major,
/// row-major within a channel.
struct Volume {
    std::size_t channels = 0;
    Dims3 dims{};
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::vector<float> data;

    Volume() = default;
    Volume(std::size_t c, Dims3 d, float fill = 0.0f)
        : channels(c), dims(d), data(c * dims_voxels(d), fill) {
        check(c >= 1 && d[0] >= 1 && d[1] >= 1 && d[2] >= 1,
              "volume: extents must be positive");
    }

    std::size_t voxels() const { return dims_voxels(dims); }
    std::size_t index(std::size_t c, std::size_t d, std::size_t h, std::size_t w) const {
        return ((c * dims[0] + d) * dims[1] + h) * dims[2] + w;
    }
    float& at(std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
        return data[index(c, d, h, w)];
    }
    float at(std::size_t c, std::size_t d, std::size_t h, std::size_t w) const {
        return data[index(c, d, h, w)];
    }

    void validate() const {
        check(channels >= 1, "volume: needs at least one channel");
        check(data.size() == channels * voxels(), "volume: data size does not match extents");
        for (const float v : data)
            check(std::isfinite(v), "volume: non-finite value encountered");
    }
};

/// Voxelwise segmentation labels restricted to {0, 1, 2, 4}:
/// 1 = necrotic / non-enhancing core, 2 = edema, 4 = enhancing tumor.
struct LabelMap {
    Dims3 dims{};
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    explicit LabelMap(Dims3 d, std::uint8_t fill = 0) : dims(d), data(dims_voxels(d), fill) {}

    std::size_t voxels() const { return dims_voxels(dims); }
    std::uint8_t& at(std::size_t d, std::size_t h, std::size_t w) {
        return data[(d * dims[1] + h) * dims[2] + w];
    }
    std::uint8_t at(std::size_t d, std::size_t h, std::size_t w) const {
        return data[(d * dims[1] + h) * dims[2] + w];
    }

    void validate() const {
        check(data.size() == voxels(), "labels: data size does not match extents");
        for (const std::uint8_t v : data)
            check(v == 0 || v == 1 || v == 2 || v == 4,
                  "labels: invalid value " + std::to_string(int(v)) +
                      " (allowed: 0, 1, 2, 4)");
    }
};

/// The three nested binary regions: whole tumor ⊇ tumor core ⊇ enhancing
/// tumor, stored as 0/1 bytes.
struct RegionMasks {
    Dims3 dims{};
    std::vector<std::uint8_t> wt, tc, et;

    RegionMasks() = default;
    explicit RegionMasks(Dims3 d)
        : dims(d), wt(dims_voxels(d), 0), tc(dims_voxels(d), 0), et(dims_voxels(d), 0) {}

    std::size_t voxels() const { return dims_voxels(dims); }

    bool nested() const {
        for (std::size_t i = 0; i < wt.size(); ++i)
            if (et[i] > tc[i] || tc[i] > wt[i]) return false;
        return true;
    }

    void validate() const {
        check(wt.size() == voxels() && tc.size() == voxels() && et.size() == voxels(),
              "regions: mask sizes do not match extents");
        for (std::size_t i = 0; i < wt.size(); ++i) {
            check(wt[i] <= 1 && tc[i] <= 1 && et[i] <= 1, "regions: masks must be binary");
            check(et[i] <= tc[i] && tc[i] <= wt[i],
                  "regions: nesting violated (need ET within TC within WT)");
        }
    }
};

// ---------------------------------------------------------------------------
// Label hierarchy encoding.
// ---------------------------------------------------------------------------

/// wt = (label in {1,2,4}); tc = (label in {1,4}); et = (label == 4).
inline RegionMasks encode_labels(const LabelMap& labels) {
    labels.validate();
    RegionMasks m(labels.dims);
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        const std::uint8_t l = labels.data[i];
        m.wt[i] = l != 0;
        m.tc[i] = l == 1 || l == 4;
        m.et[i] = l == 4;
    }
    return m;
}

/// Hierarchical gating: voxels below threshold on WT are background; then a
/// sub-threshold TC means edema (2); then a sub-threshold ET means necrotic
/// core (1); the rest is enhancing tumor (4).
inline LabelMap decode_regions(const Volume& probs, float threshold = 0.5f) {
    check(probs.channels == 3, "decode: expected 3 probability channels, got " +
                                   std::to_string(probs.channels));
    LabelMap out(probs.dims);
    const std::size_t n = probs.voxels();
    const float* wt = probs.data.data();
    const float* tc = wt + n;
    const float* et = tc + n;
    for (std::size_t i = 0; i < n; ++i) {
        if (wt[i] < threshold)
            out.data[i] = 0;
        else if (tc[i] < threshold)
            out.data[i] = 2;
        else if (et[i] < threshold)
            out.data[i] = 1;
        else
            out.data[i] = 4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tensor bridging.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> volume_to_tensor(const Volume& v) {
    std::vector<S> data(v.data.begin(), v.data.end());
    return Tensor<S>::leaf({1, v.channels, v.dims[0], v.dims[1], v.dims[2]}, std::move(data),
                           false);
}

template <typename S>
Tensor<S> masks_to_tensor(const RegionMasks& m) {
    std::vector<S> data;
    data.reserve(3 * m.voxels());
    for (const auto* src : {&m.wt, &m.tc, &m.et})
        for (const std::uint8_t b : *src) data.push_back(static_cast<S>(b));
    return Tensor<S>::leaf({1, 3, m.dims[0], m.dims[1], m.dims[2]}, std::move(data), false);
}

/// Convert a [1,C,D,H,W] tensor back into a Volume.
template <typename S>
Volume tensor_to_volume(const Tensor<S>& t) {
    check(t.rank() == 5 && t.dim(0) == 1,
          "tensor_to_volume: expected 1xCxDxHxW, got " + shape_str(t.shape()));
    Volume v(t.dim(1), {t.dim(2), t.dim(3), t.dim(4)});
    for (std::size_t i = 0; i < v.data.size(); ++i)
        v.data[i] = static_cast<float>(t.data()[i]);
    return v;
}

// ---------------------------------------------------------------------------
// Bit-exact volume container ("CSEG", version 1, little-endian):
//   magic "CSEG" | u16 version | u8 dtype (0 = f32, 1 = u8) | u16 channels
//   | 3 x u32 dims | 3 x f32 spacing | raw data, row-major, channel-major.
// Label maps use dtype 1 with a single channel.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kVolumeFormatVersion = 1;

namespace detail {

inline void write_volume_header(std::ostream& os, std::uint8_t dtype, std::uint16_t channels,
                                const Dims3& dims, const std::array<float, 3>& spacing) {
    os.write("CSEG", 4);
    write_u16(os, kVolumeFormatVersion);
    write_u8(os, dtype);
    write_u16(os, channels);
    for (const std::size_t d : dims) write_u32(os, static_cast<std::uint32_t>(d));
    for (const float s : spacing) write_f32(os, s);
}

struct VolumeHeader {
    std::uint8_t dtype;
    std::uint16_t channels;
    Dims3 dims;
    std::array<float, 3> spacing;
};

inline VolumeHeader read_volume_header(std::istream& is, const std::string& path) {
    check(read_string(is, 4) == "CSEG", "volume: " + path + " has the wrong magic");
    const std::uint16_t version = read_u16(is);
    check(version == kVolumeFormatVersion,
          "volume: " + path + " uses unsupported format version " + std::to_string(version));
    VolumeHeader h{};
    h.dtype = read_u8(is);
    check(h.dtype == 0 || h.dtype == 1,
          "volume: " + path + " has unknown dtype code " + std::to_string(int(h.dtype)));
    h.channels = read_u16(is);
    for (auto& d : h.dims) d = read_u32(is);
    for (auto& s : h.spacing) s = read_f32(is);
    check(h.channels >= 1 && h.dims[0] >= 1 && h.dims[1] >= 1 && h.dims[2] >= 1,
          "volume: " + path + " declares empty extents");
    return h;
}

}  // namespace detail

inline void save_volume(const Volume& v, const std::string& path) {
    v.validate();
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "volume: cannot open " + path + " for writing");
    detail::write_volume_header(os, 0, static_cast<std::uint16_t>(v.channels), v.dims,
                                v.spacing);
    for (const float x : v.data) write_f32(os, x);
    check(static_cast<bool>(os), "volume: write to " + path + " failed");
}

inline Volume load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(static_cast<bool>(is), "volume: cannot open " + path);
    const auto h = detail::read_volume_header(is, path);
    check(h.dtype == 0, "volume: " + path + " stores labels, not scalar data");
    Volume v(h.channels, h.dims);
    v.spacing = h.spacing;
    for (auto& x : v.data) x = read_f32(is);
    v.validate();
    return v;
}

inline void save_labels(const LabelMap& l, const std::string& path) {
    l.validate();
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "labels: cannot open " + path + " for writing");
    detail::write_volume_header(os, 1, 1, l.dims, {1.0f, 1.0f, 1.0f});
    write_bytes(os, l.data.data(), l.data.size());
    check(static_cast<bool>(os), "labels: write to " + path + " failed");
}

inline LabelMap load_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(static_cast<bool>(is), "labels: cannot open " + path);
    const auto h = detail::read_volume_header(is, path);
    check(h.dtype == 1 && h.channels == 1,
          "labels: " + path + " is not a single-channel label map");
    LabelMap l(h.dims);
    read_bytes(is, l.data.data(), l.data.size());
    l.validate();
    return l;
}

}  // namespace cseg

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cseg/core/rng.hpp"
#include "cseg/data/volume.hpp"

namespace cseg {

// ---------------------------------------------------------------------------
// Intensity normalization.
// ---------------------------------------------------------------------------

/// Per-channel standardization using the statistics of the *nonzero* voxels
/// (the brain region; exact zeros are background air). The resulting affine
/// map (v - mean) / sd is applied to every voxel of the channel, including
/// the zeros, so background stays constant at -mean/sd within a channel.
/// The spread is the population standard deviation (divide by the count).
inline Volume normalize(const Volume& image) {
    image.validate();
    Volume out = image;
    const std::size_t n = image.voxels();
    for (std::size_t c = 0; c < image.channels; ++c) {
        const float* src = image.data.data() + c * n;
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (src[i] != 0.0f) {
                sum += src[i];
                ++count;
            }
        check(count >= 2, "normalize: channel " + std::to_string(c) +
                              " has fewer than two nonzero voxels");
        const double mean = sum / double(count);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (src[i] != 0.0f) {
                const double d = src[i] - mean;
                ss += d * d;
            }
        const double sd = std::sqrt(ss / double(count));
        check(sd > 0.0, "normalize: channel " + std::to_string(c) +
                            " has zero spread over its nonzero voxels");
        float* dst = out.data.data() + c * n;
        for (std::size_t i = 0; i < n; ++i)
            dst[i] = static_cast<float>((src[i] - mean) / sd);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cropping. A window is an offset + extents box; crops of images, labels and
// masks share it so they stay aligned, and `uncrop` places a window back
// into the full grid.
// ---------------------------------------------------------------------------

struct CropWindow {
    Dims3 offset{};
    Dims3 dims{};
};

inline void check_window(const Dims3& full, const CropWindow& win) {
    for (int a = 0; a < 3; ++a) {
        check(win.dims[a] >= 1, "crop: window extents must be positive");
        check(win.offset[a] + win.dims[a] <= full[a],
              "crop: window " + dims_str(win.dims) + " at offset " + dims_str(win.offset) +
                  " exceeds volume " + dims_str(full));
    }
}

namespace detail {

template <typename T>
void copy_window(const T* src, const Dims3& full, const CropWindow& win, T* dst) {
    for (std::size_t d = 0; d < win.dims[0]; ++d)
        for (std::size_t h = 0; h < win.dims[1]; ++h) {
            const T* s = src + ((d + win.offset[0]) * full[1] + (h + win.offset[1])) * full[2] +
                          win.offset[2];
            std::copy(s, s + win.dims[2], dst);
            dst += win.dims[2];
        }
}

template <typename T>
void paste_window(const T* src, const Dims3& full, const CropWindow& win, T* dst) {
    for (std::size_t d = 0; d < win.dims[0]; ++d)
        for (std::size_t h = 0; h < win.dims[1]; ++h) {
            T* t = dst + ((d + win.offset[0]) * full[1] + (h + win.offset[1])) * full[2] +
                   win.offset[2];
            std::copy(src, src + win.dims[2], t);
            src += win.dims[2];
        }
}

}  // namespace detail

inline Volume crop(const Volume& v, const CropWindow& win) {
    check_window(v.dims, win);
    Volume out(v.channels, win.dims);
    out.spacing = v.spacing;
    const std::size_t full_n = v.voxels();
    const std::size_t crop_n = out.voxels();
    for (std::size_t c = 0; c < v.channels; ++c)
        detail::copy_window(v.data.data() + c * full_n, v.dims, win,
                            out.data.data() + c * crop_n);
    return out;
}

inline LabelMap crop(const LabelMap& l, const CropWindow& win) {
    check_window(l.dims, win);
    LabelMap out(win.dims);
    detail::copy_window(l.data.data(), l.dims, win, out.data.data());
    return out;
}

inline RegionMasks crop(const RegionMasks& m, const CropWindow& win) {
    check_window(m.dims, win);
    RegionMasks out(win.dims);
    detail::copy_window(m.wt.data(), m.dims, win, out.wt.data());
    detail::copy_window(m.tc.data(), m.dims, win, out.tc.data());
    detail::copy_window(m.et.data(), m.dims, win, out.et.data());
    return out;
}

/// Place a cropped volume back into a full-size grid, filling the outside
/// with `fill`.
inline Volume uncrop(const Volume& v, const CropWindow& win, const Dims3& full_dims,
                     float fill = 0.0f) {
    check(win.dims == v.dims, "uncrop: window extents do not match the volume");
    check_window(full_dims, win);
    Volume out(v.channels, full_dims, fill);
    out.spacing = v.spacing;
    const std::size_t full_n = out.voxels();
    const std::size_t crop_n = v.voxels();
    for (std::size_t c = 0; c < v.channels; ++c)
        detail::paste_window(v.data.data() + c * crop_n, full_dims, win,
                             out.data.data() + c * full_n);
    return out;
}

inline LabelMap uncrop(const LabelMap& l, const CropWindow& win, const Dims3& full_dims,
                       std::uint8_t fill = 0) {
    check(win.dims == l.dims, "uncrop: window extents do not match the label map");
    check_window(full_dims, win);
    LabelMap out(full_dims, fill);
    detail::paste_window(l.data.data(), full_dims, win, out.data.data());
    return out;
}

/// Uniformly random window position; draws one offset per axis in the fixed
/// order depth, height, width.
inline CropWindow random_crop_window(const Dims3& full, const Dims3& crop_dims, Rng& rng) {
    CropWindow win;
    win.dims = crop_dims;
    for (int a = 0; a < 3; ++a) {
        check(crop_dims[a] >= 1 && crop_dims[a] <= full[a],
              "crop: window " + dims_str(crop_dims) + " does not fit in volume " +
                  dims_str(full));
        win.offset[a] = rng.uniform_index(full[a] - crop_dims[a] + 1);
    }
    return win;
}

namespace detail {

struct BBox {
    Dims3 lo{}, hi{};  // inclusive
    bool empty = true;
};

inline BBox mask_bbox(const std::vector<std::uint8_t>& mask, const Dims3& dims) {
    BBox b;
    b.lo = {dims[0], dims[1], dims[2]};
    b.hi = {0, 0, 0};
    std::size_t i = 0;
    for (std::size_t d = 0; d < dims[0]; ++d)
        for (std::size_t h = 0; h < dims[1]; ++h)
            for (std::size_t w = 0; w < dims[2]; ++w, ++i)
                if (mask[i]) {
                    b.empty = false;
                    const Dims3 p{d, h, w};
                    for (int a = 0; a < 3; ++a) {
                        b.lo[a] = std::min(b.lo[a], p[a]);
                        b.hi[a] = std::max(b.hi[a], p[a]);
                    }
                }
    return b;
}

inline CropWindow window_around(const BBox& b, const Dims3& full, const Dims3& crop_dims) {
    CropWindow win;
    win.dims = crop_dims;
    for (int a = 0; a < 3; ++a) {
        const std::size_t center = (b.lo[a] + b.hi[a]) / 2;
        const std::size_t half = crop_dims[a] / 2;
        std::size_t off = center > half ? center - half : 0;
        off = std::min(off, full[a] - crop_dims[a]);
        win.offset[a] = off;
    }
    return win;
}

}  // namespace detail

/// Window centered on the bounding box of the foreground mask (clamped to
/// stay inside the volume). With an empty mask the center falls back to the
/// bounding box of the brain (any-channel-nonzero voxels of `image`), and if
/// that is empty too, to the volume center.
inline CropWindow tumor_centered_window(const std::vector<std::uint8_t>& foreground,
                                        const Dims3& dims, const Dims3& crop_dims,
                                        const Volume* image = nullptr) {
    for (int a = 0; a < 3; ++a)
        check(crop_dims[a] >= 1 && crop_dims[a] <= dims[a],
              "crop: window " + dims_str(crop_dims) + " does not fit in volume " +
                  dims_str(dims));
    check(foreground.size() == dims_voxels(dims),
          "crop: foreground mask size does not match extents");
    detail::BBox b = detail::mask_bbox(foreground, dims);
    if (b.empty && image != nullptr) {
        check(image->dims == dims, "crop: image extents do not match the mask");
        std::vector<std::uint8_t> brain(image->voxels(), 0);
        const std::size_t n = image->voxels();
        for (std::size_t c = 0; c < image->channels; ++c) {
            const float* src = image->data.data() + c * n;
            for (std::size_t i = 0; i < n; ++i)
                if (src[i] != 0.0f) brain[i] = 1;
        }
        b = detail::mask_bbox(brain, dims);
    }
    if (b.empty) {
        for (int a = 0; a < 3; ++a) {
            b.lo[a] = (dims[a] - 1) / 2;
            b.hi[a] = b.lo[a];
        }
        b.empty = false;
    }
    return detail::window_around(b, dims, crop_dims);
}

// ---------------------------------------------------------------------------
// Training-time augmentation.
// ---------------------------------------------------------------------------

struct Augmented {
    Volume image;
    RegionMasks masks;
};

namespace detail {

template <typename T>
void flip_channel(T* data, const Dims3& dims, int axis) {
    const std::size_t nd = dims[0], nh = dims[1], nw = dims[2];
    if (axis == 0) {
        for (std::size_t d = 0; d < nd / 2; ++d)
            for (std::size_t h = 0; h < nh; ++h)
                for (std::size_t w = 0; w < nw; ++w)
                    std::swap(data[(d * nh + h) * nw + w],
                              data[((nd - 1 - d) * nh + h) * nw + w]);
    } else if (axis == 1) {
        for (std::size_t d = 0; d < nd; ++d)
            for (std::size_t h = 0; h < nh / 2; ++h)
                for (std::size_t w = 0; w < nw; ++w)
                    std::swap(data[(d * nh + h) * nw + w],
                              data[(d * nh + (nh - 1 - h)) * nw + w]);
    } else {
        for (std::size_t d = 0; d < nd; ++d)
            for (std::size_t h = 0; h < nh; ++h)
                for (std::size_t w = 0; w < nw / 2; ++w)
                    std::swap(data[(d * nh + h) * nw + w],
                              data[(d * nh + h) * nw + (nw - 1 - w)]);
    }
}

}  // namespace detail

/// Random intensity jitter plus random axis flips.
///
/// Draw order is fixed so a seeded stream reproduces byte-identical output:
/// for each image channel in order, an additive shift uniform in
/// [-0.1 s_c, +0.1 s_c] (s_c = the channel's population standard deviation
/// over all voxels) and then a multiplicative scale uniform in [0.9, 1.1];
/// afterwards one fair coin per axis (depth, height, width) decides a
/// mirror flip applied identically to every image channel and every mask.
/// Per channel the intensity map is v -> (v + shift) * scale.
inline Augmented augment(const Volume& image, const RegionMasks& masks, Rng& rng) {
    check(image.dims == masks.dims, "augment: image and mask extents differ");
    Augmented out{image, masks};
    const std::size_t n = image.voxels();
    for (std::size_t c = 0; c < image.channels; ++c) {
        float* ch = out.image.data.data() + c * n;
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += ch[i];
        const double mean = sum / double(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = ch[i] - mean;
            ss += d * d;
        }
        const double sd = std::sqrt(ss / double(n));
        const double shift = rng.uniform(-0.1 * sd, 0.1 * sd);
        const double scale = rng.uniform(0.9, 1.1);
        for (std::size_t i = 0; i < n; ++i)
            ch[i] = static_cast<float>((ch[i] + shift) * scale);
    }
    for (int axis = 0; axis < 3; ++axis) {
        if (!rng.bernoulli(0.5)) continue;
        for (std::size_t c = 0; c < image.channels; ++c)
            detail::flip_channel(out.image.data.data() + c * n, image.dims, axis);
        detail::flip_channel(out.masks.wt.data(), image.dims, axis);
        detail::flip_channel(out.masks.tc.data(), image.dims, axis);
        detail::flip_channel(out.masks.et.data(), image.dims, axis);
    }
    return out;
}

}  // namespace cseg

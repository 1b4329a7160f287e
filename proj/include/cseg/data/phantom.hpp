#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "cseg/core/rng.hpp"
#include "cseg/data/volume.hpp"

namespace cseg {

/// Geometry of a synthetic tumor: three concentric spheres with radii in
/// voxels. wt_radius bounds the whole lesion (outer shell becomes edema,
/// label 2), tc_radius the core, and et_radius the enhancing center
/// (label 4); the shell between et and tc is necrotic core (label 1).
/// All radii zero yields a healthy phantom.
struct TumorSpec {
    std::array<double, 3> center{};  // voxel coordinates (d, h, w)
    double wt_radius = 0.0;
    double tc_radius = 0.0;
    double et_radius = 0.0;

    void validate() const {
        check(wt_radius >= tc_radius && tc_radius >= et_radius && et_radius >= 0.0,
              "phantom: tumor radii must satisfy wt >= tc >= et >= 0");
    }
};

struct PhantomCase {
    Volume image;  // 4 channels, contrast analogs of T1 / T1c / T2 / FLAIR
    LabelMap labels;
};

namespace detail {

/// Per-channel mean intensity for healthy tissue and multipliers for each
/// tumor compartment, loosely mimicking MRI contrast: the enhancing center
/// lights up channel 1 (the contrast-enhanced analog), edema lights up
/// channels 2 and 3 (the fluid-sensitive analogs), and the necrotic core is
/// dark on channel 0.
inline constexpr std::array<float, 4> kBaseIntensity{500.0f, 480.0f, 420.0f, 450.0f};

inline constexpr std::array<std::array<float, 4>, 3> kTumorContrast{{
    {0.70f, 0.75f, 1.15f, 1.10f},  // label 1: necrotic / non-enhancing core
    {0.90f, 0.95f, 1.35f, 1.40f},  // label 2: edema
    {0.95f, 1.50f, 1.20f, 1.20f},  // label 4: enhancing tumor
}};

inline constexpr float kNoiseSd = 25.0f;

inline int contrast_row(std::uint8_t label) { return label == 4 ? 2 : int(label) - 1; }

}  // namespace detail

/// Deterministic synthetic case: an ellipsoidal "brain" (semi-axes 0.42 of
/// each extent, zero intensity outside) carrying concentric tumor spheres.
/// Intensities are per-channel bases scaled by compartment contrast plus
/// Gaussian noise inside the brain only. The same seed always produces
/// byte-identical output.
inline PhantomCase generate_phantom(std::uint64_t seed, const Dims3& dims,
                                    const TumorSpec& tumor) {
    check(dims[0] >= 16 && dims[1] >= 16 && dims[2] >= 16,
          "phantom: extents must be at least 16 voxels per axis, got " + dims_str(dims));
    tumor.validate();

    std::array<double, 3> brain_center, brain_axes;
    for (int a = 0; a < 3; ++a) {
        brain_center[a] = (double(dims[a]) - 1.0) / 2.0;
        brain_axes[a] = 0.42 * double(dims[a]);
    }
    if (tumor.wt_radius > 0.0)
        for (int a = 0; a < 3; ++a)
            check(tumor.center[a] - tumor.wt_radius >= 0.0 &&
                      tumor.center[a] + tumor.wt_radius <= double(dims[a]) - 1.0,
                  "phantom: tumor sphere leaves the volume along axis " + std::to_string(a));

    PhantomCase out{Volume(4, dims), LabelMap(dims)};
    const std::size_t n = out.labels.voxels();

    // Labels and the brain mask first, so an oversized tumor is rejected
    // before any intensities are drawn.
    std::vector<std::uint8_t> brain(n, 0);
    std::size_t i = 0;
    for (std::size_t d = 0; d < dims[0]; ++d)
        for (std::size_t h = 0; h < dims[1]; ++h)
            for (std::size_t w = 0; w < dims[2]; ++w, ++i) {
                const std::array<double, 3> p{double(d), double(h), double(w)};
                double e = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const double t = (p[a] - brain_center[a]) / brain_axes[a];
                    e += t * t;
                }
                brain[i] = e <= 1.0;
                double r2 = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const double t = p[a] - tumor.center[a];
                    r2 += t * t;
                }
                std::uint8_t label = 0;
                if (tumor.wt_radius > 0.0 && r2 <= tumor.wt_radius * tumor.wt_radius) {
                    if (r2 <= tumor.et_radius * tumor.et_radius)
                        label = 4;
                    else if (r2 <= tumor.tc_radius * tumor.tc_radius)
                        label = 1;
                    else
                        label = 2;
                }
                check(label == 0 || brain[i],
                      "phantom: tumor extends outside the brain region");
                out.labels.data[i] = label;
            }

    // Intensities: one noise stream, consumed channel-major then voxel-major,
    // and only for voxels inside the brain.
    Rng noise = substream(seed, "phantom/noise");
    for (std::size_t c = 0; c < 4; ++c) {
        float* ch = out.image.data.data() + c * n;
        for (std::size_t v = 0; v < n; ++v) {
            if (!brain[v]) continue;
            const std::uint8_t label = out.labels.data[v];
            float mean = detail::kBaseIntensity[c];
            if (label != 0) mean *= detail::kTumorContrast[detail::contrast_row(label)][c];
            ch[v] = mean + float(noise.normal()) * detail::kNoiseSd;
        }
    }
    return out;
}

/// Random tumor geometry for dataset generation. The center stays within
/// 0.12 of each extent from the volume middle and the outer radius within
/// 0.14 of the smallest extent; the worst-case normalized ellipsoid
/// coordinate is then ((0.12 + 0.14) / 0.42)^2 + 2 (0.12 / 0.42)^2 = 0.55,
/// so the sphere always fits inside the brain.
inline TumorSpec random_tumor_spec(Rng& rng, const Dims3& dims) {
    const double min_dim = double(std::min({dims[0], dims[1], dims[2]}));
    TumorSpec spec;
    spec.wt_radius = rng.uniform(0.10, 0.14) * min_dim;
    for (int a = 0; a < 3; ++a) {
        const double mid = (double(dims[a]) - 1.0) / 2.0;
        const double span = 0.12 * double(dims[a]);
        spec.center[a] = rng.uniform(mid - span, mid + span);
    }
    spec.tc_radius = spec.wt_radius * rng.uniform(0.55, 0.80);
    spec.et_radius = spec.tc_radius * rng.uniform(0.45, 0.80);
    return spec;
}

}  // namespace cseg

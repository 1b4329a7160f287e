#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cseg/data/pipeline.hpp"
#include "cseg/data/volume.hpp"
#include "cseg/nn/network.hpp"
#include "cseg/train/trainer.hpp"

namespace cseg {

struct CascadeOptions {
    /// Probability level that turns a region channel into a binary decision,
    /// both for centering the second-stage window and for decoding labels.
    float wt_threshold = 0.5f;
};

/// One model's segmentation of one case at the case's full resolution. The
/// stored probabilities always decode to the stored label map, so either
/// representation can be shipped.
struct CasePrediction {
    LabelMap label_map;
    Volume probabilities;   // 3 region channels
    int stage1_model = -1;  // index into the first-stage model list
    int stage2_model = -1;  // index into the second-stage list; -1 when unused
    std::string stage;      // "stage1" or "stage2"
};

/// Full-volume probability inference for a case whose extents need not match
/// the network's configured input: the brain-centered window of the overlap
/// extents is pasted onto a zero canvas of the configured size, the network
/// runs once, and the probabilities are mapped back (zero — "no tumor" —
/// outside the visible window). Intensity statistics are taken from the
/// visible window's nonzero voxels.
template <typename S>
Volume infer_probabilities(const Network<S>& net, const Volume& image) {
    check(image.channels == net.config.in_channels,
          "infer: case has " + std::to_string(image.channels) + " channels, model expects " +
              std::to_string(net.config.in_channels));
    const Dims3 want = net.config.input_dims;
    if (image.dims == want) return predict_probabilities(net, image);

    Dims3 inner;
    for (int a = 0; a < 3; ++a) inner[a] = std::min(image.dims[a], want[a]);
    const std::vector<std::uint8_t> no_tumor(image.voxels(), 0);
    const CropWindow src = tumor_centered_window(no_tumor, image.dims, inner, &image);
    CropWindow dst;
    dst.dims = inner;
    for (int a = 0; a < 3; ++a) dst.offset[a] = (want[a] - inner[a]) / 2;

    Volume canvas(image.channels, want, 0.0f);
    canvas.spacing = image.spacing;
    const Volume visible = crop(image, src);
    for (std::size_t c = 0; c < image.channels; ++c)
        detail::paste_window(visible.data.data() + c * visible.voxels(), want, dst,
                             canvas.data.data() + c * canvas.voxels());

    const Volume probs_canvas = predict_probabilities(net, canvas);
    return uncrop(crop(probs_canvas, dst), src, image.dims, 0.0f);
}

namespace detail {

/// The second stage's input for one window: its crop of the first-stage
/// probabilities stacked on top of the same crop of the normalized image.
inline Volume stage2_window_input(const Volume& probs, const Volume& norm,
                                  const CropWindow& win) {
    const Volume probs_crop = crop(probs, win);
    const Volume norm_crop = crop(norm, win);
    Volume stacked(probs_crop.channels + norm_crop.channels, win.dims);
    stacked.spacing = norm.spacing;
    std::copy(probs_crop.data.begin(), probs_crop.data.end(), stacked.data.begin());
    std::copy(norm_crop.data.begin(), norm_crop.data.end(),
              stacked.data.begin() + std::ptrdiff_t(probs_crop.data.size()));
    return stacked;
}

}  // namespace detail

/// Run the two-stage cascade: each first-stage model segments the case; its
/// probabilities pick a tumor-centered window, and each second-stage model
/// re-segments the 7-channel window (3 probability channels + the normalized
/// image). Inside the window the second stage wins; outside it the
/// first-stage probabilities are kept, since the window deliberately
/// concentrates on the detected tumor and discarding the rest would erase
/// first-stage findings at the edges. With M first-stage and K second-stage
/// models the result holds M*K predictions (M when K = 0, each first-stage
/// output standing alone).
template <typename S>
std::vector<CasePrediction> run_cascade(const std::vector<Network<S>>& stage1_models,
                                        const std::vector<Network<S>>& stage2_models,
                                        const Volume& image, const CascadeOptions& opts = {}) {
    check(!stage1_models.empty(), "cascade: need at least one first-stage model");
    image.validate();
    const Volume norm = normalize(image);

    std::vector<CasePrediction> out;
    out.reserve(stage1_models.size() * std::max<std::size_t>(1, stage2_models.size()));
    for (std::size_t m1 = 0; m1 < stage1_models.size(); ++m1) {
        const Volume probs1 = infer_probabilities(stage1_models[m1], image);
        if (stage2_models.empty()) {
            CasePrediction p;
            p.label_map = decode_regions(probs1, opts.wt_threshold);
            p.probabilities = probs1;
            p.stage1_model = int(m1);
            p.stage = "stage1";
            out.push_back(std::move(p));
            continue;
        }

        std::vector<std::uint8_t> wt(probs1.voxels());
        for (std::size_t i = 0; i < wt.size(); ++i)
            wt[i] = probs1.data[i] >= opts.wt_threshold;

        for (std::size_t m2 = 0; m2 < stage2_models.size(); ++m2) {
            const Network<S>& s2 = stage2_models[m2];
            check(s2.config.in_channels == 3 + image.channels,
                  "cascade: second-stage model expects " +
                      std::to_string(s2.config.in_channels) + " channels but the stacked " +
                      "input has " + std::to_string(3 + image.channels));
            const CropWindow win =
                tumor_centered_window(wt, image.dims, s2.config.input_dims, &image);
            const Volume stacked = detail::stage2_window_input(probs1, norm, win);

            Rng rng(0);  // the deterministic pass draws nothing
            const StageOutput<S> so =
                forward(s2, volume_to_tensor<S>(stacked), /*training=*/false, rng);
            const Volume probs2 = tensor_to_volume(so.probabilities);

            Volume merged = probs1;
            for (std::size_t c = 0; c < 3; ++c)
                detail::paste_window(probs2.data.data() + c * probs2.voxels(), merged.dims,
                                     win, merged.data.data() + c * merged.voxels());

            CasePrediction p;
            p.label_map = decode_regions(merged, opts.wt_threshold);
            p.probabilities = std::move(merged);
            p.stage1_model = int(m1);
            p.stage2_model = int(m2);
            p.stage = "stage2";
            out.push_back(std::move(p));
        }
    }
    return out;
}

/// Enhancing-tumor sanity rule: a prediction with fewer than min_et_voxels
/// enhancing voxels almost certainly hallucinated them, so they are demoted
/// to the core's non-enhancing constituent (label 1). The enhancing
/// probability channel is zeroed in the same stroke, keeping the stored
/// probabilities consistent with the stored labels. A prediction with no
/// enhancing voxels at all is returned untouched.
inline CasePrediction postprocess_et(CasePrediction pred, std::size_t min_et_voxels = 500) {
    std::size_t et = 0;
    for (const std::uint8_t v : pred.label_map.data) et += v == 4;
    if (et == 0 || et >= min_et_voxels) return pred;

    for (auto& v : pred.label_map.data)
        if (v == 4) v = 1;
    if (pred.probabilities.channels == 3) {
        const std::size_t n = pred.probabilities.voxels();
        std::fill(pred.probabilities.data.begin() + std::ptrdiff_t(2 * n),
                  pred.probabilities.data.begin() + std::ptrdiff_t(3 * n), 0.0f);
    }
    return pred;
}

/// Per-category probabilities reconstructed from the nested region channels:
/// p(enhancing) = et, p(core, non-enhancing) = tc - et, p(edema) = wt - tc,
/// p(background) = 1 - wt, clamped at zero and renormalized. The model emits
/// region probabilities only, so category probabilities — which ensembling
/// averages — have to be derived.
inline std::array<double, 4> category_probabilities(double wt, double tc, double et) {
    std::array<double, 4> p{std::max(1.0 - wt, 0.0), std::max(tc - et, 0.0),
                            std::max(wt - tc, 0.0), std::max(et, 0.0)};
    const double sum = p[0] + p[1] + p[2] + p[3];
    if (sum <= 0.0) return {1.0, 0.0, 0.0, 0.0};
    for (double& x : p) x /= sum;
    return p;
}

/// Voxelwise ensemble of label maps: the label {0,1,2,4} with the most votes
/// wins. Ties among the top vote-getters fall back to the average category
/// probabilities reconstructed from the predictions' region channels; an
/// exact probability tie resolves to the smallest label. The result is
/// independent of the order of the predictions.
inline LabelMap majority_vote(const std::vector<CasePrediction>& preds) {
    check(!preds.empty(), "vote: no predictions to combine");
    const Dims3 dims = preds.front().label_map.dims;
    const std::size_t n = dims_voxels(dims);
    for (const auto& p : preds) {
        check(p.label_map.dims == dims, "vote: prediction extents differ: " +
                                            dims_str(p.label_map.dims) + " vs " +
                                            dims_str(dims));
        check(p.probabilities.channels == 3 && p.probabilities.dims == dims,
              "vote: prediction probabilities must carry 3 channels at the case extents");
    }

    static constexpr std::uint8_t kLabels[4] = {0, 1, 2, 4};
    auto label_index = [](std::uint8_t v) -> std::size_t { return v == 4 ? 3 : v; };

    LabelMap out(dims);
    for (std::size_t i = 0; i < n; ++i) {
        std::array<std::size_t, 4> votes{};
        for (const auto& p : preds) ++votes[label_index(p.label_map.data[i])];
        const std::size_t top = *std::max_element(votes.begin(), votes.end());

        std::size_t winner = 5;  // sentinel: not yet chosen
        std::array<double, 4> avg{};
        bool tie = false;
        for (std::size_t c = 0; c < 4; ++c) {
            if (votes[c] != top) continue;
            if (winner == 5) {
                winner = c;
            } else {
                if (!tie) {
                    // First tie at this voxel: average the region channels
                    // once and derive category probabilities.
                    double wt = 0, tc = 0, et = 0;
                    for (const auto& p : preds) {
                        wt += p.probabilities.data[i];
                        tc += p.probabilities.data[n + i];
                        et += p.probabilities.data[2 * n + i];
                    }
                    avg = category_probabilities(wt / double(preds.size()),
                                                 tc / double(preds.size()),
                                                 et / double(preds.size()));
                    tie = true;
                }
                if (avg[c] > avg[winner]) winner = c;
            }
        }
        out.data[i] = kLabels[winner];
    }
    return out;
}

/// One line-delimited record tying a saved prediction file to its case and
/// the models that produced it.
inline std::string prediction_record(const std::string& case_id, const CasePrediction& pred,
                                     const std::string& path) {
    nlohmann::json j{{"case", case_id},
                     {"stage", pred.stage},
                     {"stage1_model", pred.stage1_model},
                     {"stage2_model", pred.stage2_model},
                     {"path", path}};
    return j.dump();
}

namespace detail {

/// 8-bit binary PGM of one axial slice (fixed depth index) of channel 0,
/// values scaled from [0, 1].
inline void write_pgm_slice(const Volume& v, std::size_t depth, const std::string& path) {
    check(depth < v.dims[0], "pgm: slice index out of range");
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "pgm: cannot open " + path);
    os << "P5\n" << v.dims[2] << " " << v.dims[1] << "\n255\n";
    for (std::size_t h = 0; h < v.dims[1]; ++h)
        for (std::size_t w = 0; w < v.dims[2]; ++w) {
            const float x = std::clamp(v.at(0, depth, h, w), 0.0f, 1.0f);
            os.put(char(std::uint8_t(std::lround(x * 255.0f))));
        }
    check(static_cast<bool>(os), "pgm: write failed for " + path);
}

}  // namespace detail

struct AttentionExport {
    std::vector<std::string> volume_paths;  // one per gate, coarsest first
    std::vector<std::string> slice_paths;   // matching axial mid-slice previews
};

/// Run a gated model on one input window and write every decoder level's
/// attention coefficients: a single-channel volume per gate (values strictly
/// inside (0,1)) plus a mid-slice PGM preview. Gates are numbered in forward
/// order, so the last one has the input's full resolution; each volume's
/// spacing is scaled so all of them span the same physical extent.
template <typename S>
AttentionExport export_attention_maps(const Network<S>& net, const Volume& input,
                                      const std::string& out_dir,
                                      const std::string& basename = "attention") {
    check(net.config.use_attention_gates,
          "attention export: the model carries no attention gates");
    check(input.channels == net.config.in_channels && input.dims == net.config.input_dims,
          "attention export: input is " + std::to_string(input.channels) + "x" +
              dims_str(input.dims) + " but the model is configured for " +
              std::to_string(net.config.in_channels) + "x" + dims_str(net.config.input_dims));

    Rng rng(0);  // the deterministic pass draws nothing
    const StageOutput<S> out = forward(net, volume_to_tensor<S>(input), /*training=*/false,
                                       rng, /*capture_attention=*/true);
    check(!out.attention.empty(), "attention export: the forward pass captured no maps");

    std::filesystem::create_directories(out_dir);
    AttentionExport files;
    for (std::size_t k = 0; k < out.attention.size(); ++k) {
        Volume alpha = tensor_to_volume(out.attention[k]);
        for (int a = 0; a < 3; ++a)
            alpha.spacing[a] =
                input.spacing[a] * float(input.dims[a]) / float(alpha.dims[a]);
        const std::string stem = out_dir + "/" + basename + "_gate" + std::to_string(k);
        save_volume(alpha, stem + ".cseg");
        detail::write_pgm_slice(alpha, alpha.dims[0] / 2, stem + "_midslice.pgm");
        files.volume_paths.push_back(stem + ".cseg");
        files.slice_paths.push_back(stem + "_midslice.pgm");
    }
    return files;
}

}  // namespace cseg

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cseg/core/rng.hpp"
#include "cseg/data/pipeline.hpp"
#include "cseg/data/volume.hpp"
#include "cseg/nn/checkpoint.hpp"
#include "cseg/nn/network.hpp"
#include "cseg/train/loss.hpp"
#include "cseg/train/optim.hpp"

namespace cseg {

/// One training example: a (possibly multi-source) image volume with its
/// region masks, tagged with the patient it came from and, for second-stage
/// data, which first-stage model produced its probability channels.
struct TrainSample {
    Volume image;
    RegionMasks target;
    std::string patient_id;
    int source_model = -1;  // -1: not derived from a first-stage model

    void validate() const {
        image.validate();
        target.validate();
        check(image.dims == target.dims,
              "sample: image " + dims_str(image.dims) + " vs target " +
                  dims_str(target.dims) + (patient_id.empty() ? "" : " for " + patient_id));
    }
};

/// An uncropped case as it comes from disk or the phantom generator.
struct RawCase {
    Volume image;  // 4 channels, unnormalized
    LabelMap labels;
    std::string patient_id;
};

struct TrainConfig {
    std::size_t epochs = 1;
    /// First epoch to run (exclusive with nothing — epochs is still the total
    /// count). Nonzero resumes a run whose weights were restored from the
    /// snapshot written after epoch start_epoch - 1: the schedule position
    /// and every random substream are keyed on the absolute epoch index, so
    /// the next step's loss matches an uninterrupted run exactly. Optimizer
    /// moment estimates are not part of snapshots and restart cold.
    std::size_t start_epoch = 0;
    /// Optimizer steps per epoch; 0 means one pass over the dataset.
    std::size_t steps_per_epoch = 0;
    double lr0 = 1e-4;
    /// Schedule length N of lr0 * (1 - e/N)^0.9; epochs must not exceed it.
    std::size_t decay_epochs = 300;
    /// Spatial size of the random training crop; all-zero means "train on
    /// the full volume" (used when samples are pre-cropped).
    Dims3 crop_dims{0, 0, 0};
    bool augment = true;
    LossConfig loss;
    std::uint64_t seed = 0;
    /// JSONL file receiving one record per step; empty disables logging.
    std::string log_path;
    /// Directory for weight snapshots; empty disables them. A snapshot is
    /// written after each epoch listed in checkpoint_epochs and always after
    /// the final epoch (as "final.csck").
    std::string checkpoint_dir;
    std::vector<std::size_t> checkpoint_epochs;
};

struct StepRecord {
    std::size_t epoch = 0, step = 0;
    double dice = 0.0, l2 = 0.0, kl = 0.0, total = 0.0, lr = 0.0;
};

struct EpochStats {
    double dice = 0.0, l2 = 0.0, kl = 0.0, total = 0.0, lr = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> epochs;
    std::vector<std::string> checkpoints;
};

namespace detail {

inline std::string jsonl_step(const StepRecord& r, double wall_ms) {
    nlohmann::json j{{"epoch", r.epoch}, {"step", r.step},   {"l_dice", r.dice},
                     {"l_l2", r.l2},     {"l_kl", r.kl},     {"l_total", r.total},
                     {"lr", r.lr},       {"wall_ms", wall_ms}};
    return j.dump();
}

}  // namespace detail

/// Optimize one stage on the given dataset.
///
/// Each epoch visits the dataset in a freshly seeded shuffle order; every
/// step crops (when configured), augments (when enabled), runs a training
/// forward pass, and applies one Adam update at the epoch's scheduled
/// learning rate. All randomness comes from named substreams of cfg.seed,
/// so a fixed seed reproduces the loss trajectory exactly. A non-finite
/// loss aborts with a diagnostic. The optional on_step hook observes every
/// step's components.
template <typename S>
TrainResult train_stage(Network<S>& net, const std::vector<TrainSample>& dataset,
                        const TrainConfig& cfg,
                        const std::function<void(const StepRecord&)>& on_step = {}) {
    check(!dataset.empty(), "train: dataset is empty");
    cfg.loss.validate();
    check(cfg.epochs >= 1, "train: needs at least one epoch");
    check(cfg.start_epoch < cfg.epochs,
          "train: resume epoch " + std::to_string(cfg.start_epoch) +
              " leaves none of the " + std::to_string(cfg.epochs) + " epochs to run");
    check(cfg.epochs <= cfg.decay_epochs,
          "train: " + std::to_string(cfg.epochs) + " epochs exceed the decay schedule of " +
              std::to_string(cfg.decay_epochs));
    const bool cropping = cfg.crop_dims != Dims3{0, 0, 0};
    for (const auto& s : dataset) {
        s.validate();
        check(s.image.channels == net.config.in_channels,
              "train: sample has " + std::to_string(s.image.channels) +
                  " channels, network expects " + std::to_string(net.config.in_channels));
        const Dims3 want = cropping ? cfg.crop_dims : s.image.dims;
        check(want == net.config.input_dims,
              "train: sample feeds " + dims_str(want) + " but the network is configured for " +
                  dims_str(net.config.input_dims));
        if (cropping)
            for (int a = 0; a < 3; ++a)
                check(cfg.crop_dims[a] <= s.image.dims[a],
                      "train: crop " + dims_str(cfg.crop_dims) + " does not fit sample " +
                          dims_str(s.image.dims));
    }

    OptimState<S> opt = OptimState<S>::attach(net.params);
    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::app);
        check(static_cast<bool>(log), "train: cannot open log " + cfg.log_path);
    }

    TrainResult result;
    const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : dataset.size();

    for (std::size_t epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = poly_lr(epoch, cfg.lr0, cfg.decay_epochs);
        // The order is rebuilt from identity every epoch so that one epoch's
        // visit sequence depends only on its own substream; a resumed run
        // replays it without the preceding epochs' draws.
        std::vector<std::size_t> order(dataset.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = substream(cfg.seed, "shuffle/" + std::to_string(epoch));
        shuffle_rng.shuffle(order.begin(), order.end());

        EpochStats stats;
        stats.lr = lr;
        for (std::size_t step = 0; step < steps; ++step) {
            const TrainSample& sample = dataset[order[step % dataset.size()]];
            const std::string tag = std::to_string(epoch) + "/" + std::to_string(step);
            Rng data_rng = substream(cfg.seed, "data/" + tag);

            Volume image = sample.image;
            RegionMasks target = sample.target;
            if (cropping) {
                const CropWindow win = random_crop_window(image.dims, cfg.crop_dims, data_rng);
                image = crop(image, win);
                target = crop(target, win);
            }
            if (cfg.augment) {
                Augmented aug = augment(image, target, data_rng);
                image = std::move(aug.image);
                target = std::move(aug.masks);
            }

            const auto t0 = std::chrono::steady_clock::now();
            Rng fwd_rng = substream(cfg.seed, "fwd/" + tag);
            const Tensor<S> x = volume_to_tensor<S>(image);
            const Tensor<S> y = masks_to_tensor<S>(target);
            const StageOutput<S> out = forward(net, x, /*training=*/true, fwd_rng);
            const LossBreakdown<S> loss = total_loss(out, y, x, cfg.loss);

            if (!std::isfinite(loss.total_value))
                throw std::runtime_error(
                    "train: aborted on non-finite loss at epoch " + std::to_string(epoch) +
                    " step " + std::to_string(step) + " (dice=" + std::to_string(loss.dice_value) +
                    ", l2=" + std::to_string(loss.l2_value) +
                    ", kl=" + std::to_string(loss.kl_value) + ")");

            zero_grads(net.params);
            loss.total.backward();
            adam_step(net.params, opt, lr);
            const auto t1 = std::chrono::steady_clock::now();

            StepRecord rec{epoch,          step,          loss.dice_value, loss.l2_value,
                           loss.kl_value,  loss.total_value, lr};
            if (log.is_open())
                log << detail::jsonl_step(
                           rec, std::chrono::duration<double, std::milli>(t1 - t0).count())
                    << "\n";
            if (on_step) on_step(rec);
            stats.dice += rec.dice;
            stats.l2 += rec.l2;
            stats.kl += rec.kl;
            stats.total += rec.total;
        }
        stats.dice /= double(steps);
        stats.l2 /= double(steps);
        stats.kl /= double(steps);
        stats.total /= double(steps);
        result.epochs.push_back(stats);
        if (log.is_open()) log.flush();

        if (!cfg.checkpoint_dir.empty()) {
            const bool requested =
                std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(), epoch) !=
                cfg.checkpoint_epochs.end();
            const bool last = epoch + 1 == cfg.epochs;
            if (requested) {
                const std::string path =
                    cfg.checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".csck";
                save_checkpoint(net, path);
                result.checkpoints.push_back(path);
            }
            if (last) {
                const std::string path = cfg.checkpoint_dir + "/final.csck";
                save_checkpoint(net, path);
                result.checkpoints.push_back(path);
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Second-stage data: every (first-stage model, case) pair becomes one
// 7-channel sample.
// ---------------------------------------------------------------------------

/// Deterministic first-stage inference on a full raw case: normalize, run
/// the network, return the probability volume (3 channels).
template <typename S>
Volume predict_probabilities(const Network<S>& net, const Volume& raw_image) {
    const Volume norm = normalize(raw_image);
    check(norm.channels == net.config.in_channels && norm.dims == net.config.input_dims,
          "infer: case is " + std::to_string(norm.channels) + "x" + dims_str(norm.dims) +
              " but the network is configured for " +
              std::to_string(net.config.in_channels) + "x" +
              dims_str(net.config.input_dims));
    Rng rng(0);  // dropout and sampling are disabled outside training
    const StageOutput<S> out =
        forward(net, volume_to_tensor<S>(norm), /*training=*/false, rng);
    Volume probs = tensor_to_volume(out.probabilities);
    probs.spacing = raw_image.spacing;
    return probs;
}

/// Assemble the expanded second-stage dataset: for each first-stage model
/// and each case, predict probabilities, center a window on the predicted
/// whole tumor (brain box when empty), and stack [probabilities, normalized
/// image] into a 7-channel sample paired with the same window of the truth.
/// Yields models x cases samples that inherit the case's patient id.
template <typename S>
std::vector<TrainSample> build_expanded_dataset(const std::vector<Network<S>>& stage1_models,
                                                const std::vector<RawCase>& cases,
                                                const Dims3& window_dims,
                                                float wt_threshold = 0.5f) {
    check(!stage1_models.empty(), "expand: need at least one first-stage model");
    check(!cases.empty(), "expand: need at least one case");

    std::vector<TrainSample> out;
    out.reserve(stage1_models.size() * cases.size());
    for (std::size_t m = 0; m < stage1_models.size(); ++m) {
        for (const RawCase& c : cases) {
            const Volume probs = predict_probabilities(stage1_models[m], c.image);
            const Volume norm = normalize(c.image);

            std::vector<std::uint8_t> wt(probs.voxels(), 0);
            for (std::size_t i = 0; i < wt.size(); ++i)
                wt[i] = probs.data[i] >= wt_threshold;
            // Brain fallback must look at the raw image: normalization maps
            // background zeros to a nonzero constant.
            const CropWindow win =
                tumor_centered_window(wt, probs.dims, window_dims, &c.image);

            const Volume probs_crop = crop(probs, win);
            const Volume norm_crop = crop(norm, win);
            TrainSample s;
            s.image = Volume(probs_crop.channels + norm_crop.channels, win.dims);
            s.image.spacing = c.image.spacing;
            std::copy(probs_crop.data.begin(), probs_crop.data.end(), s.image.data.begin());
            std::copy(norm_crop.data.begin(), norm_crop.data.end(),
                      s.image.data.begin() + std::ptrdiff_t(probs_crop.data.size()));
            s.target = crop(encode_labels(c.labels), win);
            s.patient_id = c.patient_id;
            s.source_model = int(m);
            out.push_back(std::move(s));
        }
    }
    return out;
}

/// Load first-stage networks from weight snapshots, verifying each one is a
/// 4-channel first-stage configuration.
template <typename S>
std::vector<Network<S>> load_stage1_models(const std::vector<std::string>& paths) {
    std::vector<Network<S>> models;
    models.reserve(paths.size());
    for (const auto& p : paths) {
        Network<S> net = load_checkpoint<S>(p);
        check(net.config.in_channels == 4 && !net.config.use_attention_gates,
              "expand: " + p + " is not a first-stage model");
        models.push_back(std::move(net));
    }
    return models;
}

/// Split sample indices into train/validation sets by patient: every sample
/// of a patient lands on the same side. val_fraction applies to the patient
/// count (rounded to nearest, at most all patients).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_patient(
    const std::vector<TrainSample>& dataset, double val_fraction, std::uint64_t seed) {
    check(val_fraction >= 0.0 && val_fraction <= 1.0,
          "split: validation fraction must lie in [0, 1]");
    std::vector<std::string> patients;
    std::map<std::string, std::vector<std::size_t>> by_patient;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        auto [it, fresh] = by_patient.try_emplace(dataset[i].patient_id);
        if (fresh) patients.push_back(dataset[i].patient_id);
        it->second.push_back(i);
    }
    Rng rng = substream(seed, "split");
    rng.shuffle(patients.begin(), patients.end());
    const std::size_t n_val =
        std::min(patients.size(), std::size_t(std::llround(val_fraction * patients.size())));

    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
    for (std::size_t p = 0; p < patients.size(); ++p) {
        auto& side = p < n_val ? out.second : out.first;
        for (const std::size_t idx : by_patient[patients[p]]) side.push_back(idx);
    }
    std::sort(out.first.begin(), out.first.end());
    std::sort(out.second.begin(), out.second.end());
    return out;
}

}  // namespace cseg

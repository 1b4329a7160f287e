#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "cseg/core/ops.hpp"
#include "cseg/core/tensor.hpp"
#include "cseg/data/volume.hpp"
#include "cseg/nn/network.hpp"

namespace cseg {

/// Weights and constants of the composite training objective
///   L = L_dice + w_l2 * L_l2 + w_kl * L_kl.
struct LossConfig {
    double w_l2 = 0.1;
    double w_kl = 0.1;
    double dice_epsilon = 1e-5;
    /// Divisor N of the variational penalty; 0 means "use the spatial voxel
    /// count of the input crop".
    std::size_t voxel_count_n = 0;

    void validate() const {
        check(w_l2 >= 0.0 && w_kl >= 0.0, "loss: weights must be nonnegative");
        check(dice_epsilon > 0.0, "loss: dice_epsilon must be positive");
    }
};

/// Soft dice loss over probability maps: per channel
///   1 - (2 sum(p*t) + eps) / (sum(p^2) + sum(t^2) + eps),
/// averaged uniformly over the channels (axis 1). The smoothing eps appears
/// in numerator and denominator so a perfectly empty channel costs 0.
template <typename S>
Tensor<S> soft_dice_loss(const Tensor<S>& p_pred, const Tensor<S>& p_true,
                         double eps = 1e-5) {
    check(p_pred.shape() == p_true.shape(),
          "dice: prediction " + shape_str(p_pred.shape()) + " vs target " +
              shape_str(p_true.shape()));
    check(p_pred.rank() >= 2, "dice: expected a channel axis at position 1");
    check(eps > 0.0, "dice: eps must be positive");
    for (const S v : p_true.values())
        check(v == S(0) || v == S(1), "dice: targets must be binary");

    Tensor<S> inter = channel_sums(hadamard(p_pred, p_true));
    Tensor<S> pp = channel_sums(hadamard(p_pred, p_pred));
    Tensor<S> tt = channel_sums(hadamard(p_true, p_true));
    Tensor<S> num = add_scalar(scale(inter, S(2)), static_cast<S>(eps));
    Tensor<S> den = add_scalar(add(pp, tt), static_cast<S>(eps));
    return mean_all(rsub_scalar(S(1), divide(num, den)));
}

/// Squared-error reconstruction penalty: the plain sum of squared
/// differences (no averaging).
template <typename S>
Tensor<S> l2_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    check(pred.shape() == target.shape(),
          "l2: prediction " + shape_str(pred.shape()) + " vs target " +
              shape_str(target.shape()));
    Tensor<S> diff = sub(pred, target);
    return sum_all(hadamard(diff, diff));
}

/// Variational penalty (1/N) * sum(mu^2 + sigma^2 - log sigma^2 - 1), the
/// KL divergence of N(mu, sigma^2) from the standard normal up to the 1/N
/// normalization, where N is the spatial voxel count of the input crop.
template <typename S>
Tensor<S> kl_loss(const Tensor<S>& mu, const Tensor<S>& sigma, std::size_t n_voxels) {
    check(mu.shape() == sigma.shape(), "kl: mu " + shape_str(mu.shape()) + " vs sigma " +
                                           shape_str(sigma.shape()));
    check(n_voxels > 0, "kl: voxel count must be positive");
    for (const S s : sigma.values()) check(s > S(0), "kl: sigma must be positive");

    Tensor<S> mu2 = hadamard(mu, mu);
    Tensor<S> sig2 = hadamard(sigma, sigma);
    Tensor<S> term = sub(add(mu2, sig2), add_scalar(log_elem(sig2), S(1)));
    return scale(sum_all(term), static_cast<S>(1.0 / double(n_voxels)));
}

/// The assembled objective plus its components. Component tensors are left
/// invalid when the stage output has no variational branch; their logged
/// values are then zero.
template <typename S>
struct LossBreakdown {
    Tensor<S> total, dice, l2, kl;
    double dice_value = 0.0, l2_value = 0.0, kl_value = 0.0, total_value = 0.0;
};

/// Build the training objective from a stage's outputs. Only terms with a
/// strictly positive weight enter the total's graph, so with w_l2 = w_kl = 0
/// a backward pass never reaches the variational branch and its parameter
/// gradients stay zero; the component values are still reported for logs.
template <typename S>
LossBreakdown<S> total_loss(const StageOutput<S>& outputs, const Tensor<S>& target,
                            const Tensor<S>& input, const LossConfig& cfg) {
    cfg.validate();
    check(input.rank() == 5, "loss: input must be NxCxDxHxW");

    LossBreakdown<S> out;
    out.dice = soft_dice_loss(outputs.probabilities, target, cfg.dice_epsilon);
    out.dice_value = double(out.dice.scalar());
    out.total = out.dice;

    const bool has_vae = outputs.reconstruction.valid();
    check(has_vae || (cfg.w_l2 == 0.0 && cfg.w_kl == 0.0),
          "loss: weights request the variational terms but the outputs carry none");
    if (has_vae) {
        const std::size_t n = cfg.voxel_count_n ? cfg.voxel_count_n
                                                : input.dim(2) * input.dim(3) * input.dim(4);
        out.l2 = l2_loss(outputs.reconstruction, input);
        out.kl = kl_loss(outputs.mu, outputs.sigma, n);
        out.l2_value = double(out.l2.scalar());
        out.kl_value = double(out.kl.scalar());
        if (cfg.w_l2 > 0.0)
            out.total = add(out.total, scale(out.l2, static_cast<S>(cfg.w_l2)));
        if (cfg.w_kl > 0.0)
            out.total = add(out.total, scale(out.kl, static_cast<S>(cfg.w_kl)));
    }
    out.total_value = double(out.total.scalar());
    return out;
}

/// Convenience overload for whole-volume inputs.
template <typename S>
LossBreakdown<S> total_loss(const StageOutput<S>& outputs, const RegionMasks& target,
                            const Volume& input, const LossConfig& cfg) {
    return total_loss(outputs, masks_to_tensor<S>(target), volume_to_tensor<S>(input), cfg);
}

}  // namespace cseg

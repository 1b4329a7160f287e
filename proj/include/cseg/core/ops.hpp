#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "cseg/core/rng.hpp"
#include "cseg/core/tensor.hpp"

namespace cseg {

/// Geometry of a 3-D convolution. Output extent per axis follows
/// floor((in + 2*pad - kernel)/stride) + 1.
struct ConvSpec {
    std::array<std::size_t, 3> kernel{3, 3, 3};
    std::array<std::size_t, 3> stride{1, 1, 1};
    std::array<std::size_t, 3> padding{1, 1, 1};
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;

    static ConvSpec k3(std::size_t cin, std::size_t cout, std::size_t stride_all = 1) {
        return ConvSpec{{3, 3, 3}, {stride_all, stride_all, stride_all}, {1, 1, 1}, cin, cout};
    }
    static ConvSpec k1(std::size_t cin, std::size_t cout, std::size_t stride_all = 1) {
        return ConvSpec{{1, 1, 1}, {stride_all, stride_all, stride_all}, {0, 0, 0}, cin, cout};
    }
};

inline std::array<std::size_t, 3> conv_output_dims(const ConvSpec& spec,
                                                   const std::array<std::size_t, 3>& in) {
    static const char* axis_name[3] = {"depth", "height", "width"};
    std::array<std::size_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
        const std::size_t padded = in[a] + 2 * spec.padding[a];
        check(padded >= spec.kernel[a],
              std::string("conv3d: padded ") + axis_name[a] + " extent " +
                  std::to_string(padded) + " is smaller than kernel " +
                  std::to_string(spec.kernel[a]));
        out[a] = (padded - spec.kernel[a]) / spec.stride[a] + 1;
        check(out[a] >= 1, std::string("conv3d: empty output on ") + axis_name[a]);
    }
    return out;
}

namespace detail {

template <typename S>
inline void require_rank5(const Tensor<S>& t, const char* who) {
    check(t.rank() == 5, std::string(who) + ": expected NxCxDxHxW tensor, got shape " +
                             shape_str(t.shape()));
}

inline void clip_range(long origin, std::size_t kernel, std::size_t in_extent,
                       std::size_t& lo, std::size_t& hi) {
    // Valid kernel taps k with 0 <= origin + k < in_extent.
    lo = origin < 0 ? static_cast<std::size_t>(-origin) : 0;
    const long h = static_cast<long>(in_extent) - origin;
    hi = h < 0 ? 0 : std::min<std::size_t>(kernel, static_cast<std::size_t>(h));
}

}  // namespace detail

/// 3-D cross-correlation. weights are [Cout, Cin, kd, kh, kw]; bias is [Cout]
/// or an empty (default-constructed) tensor for a bias-free path.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& weights, const Tensor<S>& bias,
                 const ConvSpec& spec) {
    detail::require_rank5(x, "conv3d");
    check(weights.rank() == 5, "conv3d: weights must be Cout x Cin x kd x kh x kw");
    check(x.dim(1) == spec.in_channels,
          "conv3d: input channel axis has " + std::to_string(x.dim(1)) +
              " channels, spec expects " + std::to_string(spec.in_channels));
    const Shape want_w{spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1],
                       spec.kernel[2]};
    check(weights.shape() == want_w, "conv3d: weight shape " + shape_str(weights.shape()) +
                                         " does not match spec " + shape_str(want_w));
    const bool has_bias = bias.valid();
    if (has_bias)
        check(bias.shape() == Shape{spec.out_channels},
              "conv3d: bias shape " + shape_str(bias.shape()) + " must be " +
                  std::to_string(spec.out_channels));

    const std::size_t N = x.dim(0), Cin = spec.in_channels, Cout = spec.out_channels;
    const std::array<std::size_t, 3> in{x.dim(2), x.dim(3), x.dim(4)};
    const auto out = conv_output_dims(spec, in);
    const std::size_t in_hw = in[1] * in[2], in_vol = in[0] * in_hw;
    const std::size_t out_vol = out[0] * out[1] * out[2];
    const std::size_t kvol = spec.kernel[0] * spec.kernel[1] * spec.kernel[2];

    Tensor<S> y(Shape{N, Cout, out[0], out[1], out[2]});
    const S* xv = x.data();
    const S* wv = weights.data();
    S* yv = y.data();

    const bool pointwise = kvol == 1 && spec.stride == std::array<std::size_t, 3>{1, 1, 1};
    if (pointwise) {
        // 1x1x1 stride-1 convs are channel-mixing matmuls over the voxel axis.
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Cout; ++co) {
                S* yr = yv + (n * Cout + co) * in_vol;
                const S b = has_bias ? bias.data()[co] : S(0);
                std::fill(yr, yr + in_vol, b);
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                    const S w = wv[co * Cin + ci];
                    const S* xr = xv + (n * Cin + ci) * in_vol;
                    for (std::size_t v = 0; v < in_vol; ++v) yr[v] += w * xr[v];
                }
            }
    } else {
        const long sd = static_cast<long>(spec.stride[0]), sh = static_cast<long>(spec.stride[1]),
                   sw = static_cast<long>(spec.stride[2]);
        const long pd = static_cast<long>(spec.padding[0]), ph = static_cast<long>(spec.padding[1]),
                   pw = static_cast<long>(spec.padding[2]);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Cout; ++co) {
                const S* wc = wv + co * Cin * kvol;
                const S b = has_bias ? bias.data()[co] : S(0);
                S* yr = yv + (n * Cout + co) * out_vol;
                for (std::size_t od = 0; od < out[0]; ++od) {
                    const long d0 = static_cast<long>(od) * sd - pd;
                    std::size_t kd_lo, kd_hi;
                    detail::clip_range(d0, spec.kernel[0], in[0], kd_lo, kd_hi);
                    for (std::size_t oh = 0; oh < out[1]; ++oh) {
                        const long h0 = static_cast<long>(oh) * sh - ph;
                        std::size_t kh_lo, kh_hi;
                        detail::clip_range(h0, spec.kernel[1], in[1], kh_lo, kh_hi);
                        for (std::size_t ow = 0; ow < out[2]; ++ow) {
                            const long w0 = static_cast<long>(ow) * sw - pw;
                            std::size_t kw_lo, kw_hi;
                            detail::clip_range(w0, spec.kernel[2], in[2], kw_lo, kw_hi);
                            S acc = b;
                            for (std::size_t ci = 0; ci < Cin; ++ci) {
                                const S* xc = xv + (n * Cin + ci) * in_vol;
                                const S* wk = wc + ci * kvol;
                                for (std::size_t kd = kd_lo; kd < kd_hi; ++kd) {
                                    const std::size_t id = static_cast<std::size_t>(d0 + static_cast<long>(kd));
                                    for (std::size_t kh = kh_lo; kh < kh_hi; ++kh) {
                                        const std::size_t ih = static_cast<std::size_t>(h0 + static_cast<long>(kh));
                                        const S* xrow = xc + id * in_hw + ih * in[2] + static_cast<std::size_t>(w0);
                                        const S* wrow = wk + (kd * spec.kernel[1] + kh) * spec.kernel[2];
                                        for (std::size_t kw = kw_lo; kw < kw_hi; ++kw)
                                            acc += xrow[kw] * wrow[kw];
                                    }
                                }
                            }
                            yr[(od * out[1] + oh) * out[2] + ow] = acc;
                        }
                    }
                }
            }
    }

    auto xn = x.node();
    auto wn = weights.node();
    auto bn = has_bias ? bias.node() : nullptr;
    auto yn = y.node();
    yn->parents = {xn, wn};
    if (bn) yn->parents.push_back(bn);
    const ConvSpec sp = spec;
    const std::array<std::size_t, 3> ind = in, outd = out;
    yn->backprop = [xn, wn, bn, sp, ind, outd, N, Cin, Cout, in_vol, in_hw, out_vol,
                    kvol](TensorNode<S>& node) {
        const S* gy = node.grad.data();
        S* gx = nullptr;
        S* gw = nullptr;
        S* gb = nullptr;
        if (xn->active) { xn->ensure_grad(); gx = xn->grad.data(); }
        if (wn->active) { wn->ensure_grad(); gw = wn->grad.data(); }
        if (bn && bn->active) { bn->ensure_grad(); gb = bn->grad.data(); }
        if (!gx && !gw && !gb) return;
        const S* xv = xn->value.data();
        const S* wv = wn->value.data();

        const bool pointwise =
            kvol == 1 && sp.stride == std::array<std::size_t, 3>{1, 1, 1};
        if (pointwise) {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t co = 0; co < Cout; ++co) {
                    const S* gr = gy + (n * Cout + co) * in_vol;
                    if (gb) {
                        S acc = 0;
                        for (std::size_t v = 0; v < in_vol; ++v) acc += gr[v];
                        gb[co] += acc;
                    }
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        const S* xr = xv + (n * Cin + ci) * in_vol;
                        if (gw) {
                            S acc = 0;
                            for (std::size_t v = 0; v < in_vol; ++v) acc += gr[v] * xr[v];
                            gw[co * Cin + ci] += acc;
                        }
                        if (gx) {
                            const S w = wv[co * Cin + ci];
                            S* gxr = gx + (n * Cin + ci) * in_vol;
                            for (std::size_t v = 0; v < in_vol; ++v) gxr[v] += w * gr[v];
                        }
                    }
                }
            return;
        }

        const long sd = static_cast<long>(sp.stride[0]), sh = static_cast<long>(sp.stride[1]),
                   sw = static_cast<long>(sp.stride[2]);
        const long pd = static_cast<long>(sp.padding[0]), ph = static_cast<long>(sp.padding[1]),
                   pw = static_cast<long>(sp.padding[2]);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Cout; ++co) {
                const S* wc = wv + co * Cin * kvol;
                S* gwc = gw ? gw + co * Cin * kvol : nullptr;
                const S* gr = gy + (n * Cout + co) * out_vol;
                for (std::size_t od = 0; od < outd[0]; ++od) {
                    const long d0 = static_cast<long>(od) * sd - pd;
                    std::size_t kd_lo, kd_hi;
                    detail::clip_range(d0, sp.kernel[0], ind[0], kd_lo, kd_hi);
                    for (std::size_t oh = 0; oh < outd[1]; ++oh) {
                        const long h0 = static_cast<long>(oh) * sh - ph;
                        std::size_t kh_lo, kh_hi;
                        detail::clip_range(h0, sp.kernel[1], ind[1], kh_lo, kh_hi);
                        for (std::size_t ow = 0; ow < outd[2]; ++ow) {
                            const S g = gr[(od * outd[1] + oh) * outd[2] + ow];
                            if (g == S(0)) continue;
                            const long w0 = static_cast<long>(ow) * sw - pw;
                            std::size_t kw_lo, kw_hi;
                            detail::clip_range(w0, sp.kernel[2], ind[2], kw_lo, kw_hi);
                            if (gb) gb[co] += g;
                            for (std::size_t ci = 0; ci < Cin; ++ci) {
                                const std::size_t xoff = (n * Cin + ci) * in_vol;
                                const S* wk = wc + ci * kvol;
                                S* gwk = gwc ? gwc + ci * kvol : nullptr;
                                for (std::size_t kd = kd_lo; kd < kd_hi; ++kd) {
                                    const std::size_t id = static_cast<std::size_t>(d0 + static_cast<long>(kd));
                                    for (std::size_t kh = kh_lo; kh < kh_hi; ++kh) {
                                        const std::size_t ih = static_cast<std::size_t>(h0 + static_cast<long>(kh));
                                        const std::size_t row = xoff + id * in_hw + ih * ind[2] + static_cast<std::size_t>(w0);
                                        const std::size_t wrow = (kd * sp.kernel[1] + kh) * sp.kernel[2];
                                        for (std::size_t kw = kw_lo; kw < kw_hi; ++kw) {
                                            if (gx) gx[row + kw] += g * wk[wrow + kw];
                                            if (gwk) gwk[wrow + kw] += g * xn->value[row + kw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
    };
    return y;
}

/// Per (sample, group) zero-mean unit-variance normalization followed by a
/// per-channel affine map. Population variance; channels must divide evenly
/// into groups.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, std::size_t groups, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-5)) {
    detail::require_rank5(x, "group_norm");
    const std::size_t N = x.dim(0), C = x.dim(1);
    check(groups >= 1, "group_norm: groups must be >= 1");
    check(C % groups == 0, "group_norm: channel count " + std::to_string(C) +
                               " not divisible by groups " + std::to_string(groups));
    check(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "group_norm: affine parameters must have shape [" + std::to_string(C) + "]");
    const std::size_t spatial = x.dim(2) * x.dim(3) * x.dim(4);
    const std::size_t cpg = C / groups;
    const std::size_t K = cpg * spatial;  // elements per (sample, group), contiguous

    Tensor<S> y(x.shape());
    std::vector<S> mean(N * groups), inv_std(N * groups);
    const S* xv = x.data();
    S* yv = y.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = (n * C + g * cpg) * spatial;
            S m = 0;
            for (std::size_t i = 0; i < K; ++i) m += xv[off + i];
            m /= static_cast<S>(K);
            S v = 0;
            for (std::size_t i = 0; i < K; ++i) {
                const S d = xv[off + i] - m;
                v += d * d;
            }
            v /= static_cast<S>(K);
            const S s = S(1) / std::sqrt(v + eps);
            mean[n * groups + g] = m;
            inv_std[n * groups + g] = s;
            for (std::size_t c = 0; c < cpg; ++c) {
                const S ga = gamma.data()[g * cpg + c];
                const S be = beta.data()[g * cpg + c];
                for (std::size_t i = 0; i < spatial; ++i) {
                    const std::size_t j = off + c * spatial + i;
                    yv[j] = ga * (xv[j] - m) * s + be;
                }
            }
        }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto yn = y.node();
    yn->parents = {xn, gn, bn};
    yn->backprop = [xn, gn, bn, mean = std::move(mean), inv_std = std::move(inv_std), N, C,
                    groups, cpg, spatial, K](TensorNode<S>& node) {
        const S* gy = node.grad.data();
        const S* xv = xn->value.data();
        S* gx = nullptr;
        S* gg = nullptr;
        S* gb = nullptr;
        if (xn->active) { xn->ensure_grad(); gx = xn->grad.data(); }
        if (gn->active) { gn->ensure_grad(); gg = gn->grad.data(); }
        if (bn->active) { bn->ensure_grad(); gb = bn->grad.data(); }
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t g = 0; g < groups; ++g) {
                const std::size_t off = (n * C + g * cpg) * spatial;
                const S m = mean[n * groups + g];
                const S s = inv_std[n * groups + g];
                if (gg || gb) {
                    for (std::size_t c = 0; c < cpg; ++c) {
                        S acc_g = 0, acc_b = 0;
                        for (std::size_t i = 0; i < spatial; ++i) {
                            const std::size_t j = off + c * spatial + i;
                            acc_g += gy[j] * (xv[j] - m) * s;
                            acc_b += gy[j];
                        }
                        if (gg) gg[g * cpg + c] += acc_g;
                        if (gb) gb[g * cpg + c] += acc_b;
                    }
                }
                if (gx) {
                    S sum1 = 0, sum2 = 0;
                    for (std::size_t c = 0; c < cpg; ++c) {
                        const S ga = gn->value[g * cpg + c];
                        for (std::size_t i = 0; i < spatial; ++i) {
                            const std::size_t j = off + c * spatial + i;
                            const S dxh = gy[j] * ga;
                            sum1 += dxh;
                            sum2 += dxh * (xv[j] - m) * s;
                        }
                    }
                    const S invK = S(1) / static_cast<S>(K);
                    for (std::size_t c = 0; c < cpg; ++c) {
                        const S ga = gn->value[g * cpg + c];
                        for (std::size_t i = 0; i < spatial; ++i) {
                            const std::size_t j = off + c * spatial + i;
                            const S xh = (xv[j] - m) * s;
                            gx[j] += s * (gy[j] * ga - (sum1 + xh * sum2) * invK);
                        }
                    }
                }
            }
    };
    return y;
}

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> elementwise_unary(const Tensor<S>& x, Fwd f, Bwd dfdx_from_xy) {
    Tensor<S> y(x.shape());
    const S* xv = x.data();
    S* yv = y.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) yv[i] = f(xv[i]);
    auto xn = x.node();
    auto yn = y.node();
    yn->parents = {xn};
    yn->backprop = [xn, dfdx_from_xy](TensorNode<S>& node) {
        if (!xn->active) return;
        xn->ensure_grad();
        S* gx = xn->grad.data();
        const S* gy = node.grad.data();
        const S* xv = xn->value.data();
        const S* yv = node.value.data();
        for (std::size_t i = 0; i < node.value.size(); ++i)
            gx[i] += gy[i] * dfdx_from_xy(xv[i], yv[i]);
    };
    return y;
}

}  // namespace detail

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    return detail::elementwise_unary(
        x, [](S v) { return v > S(0) ? v : S(0); },
        [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

/// Logistic sigmoid, clamped into the open unit interval at representation
/// precision so saturated outputs still satisfy 0 < y < 1.
template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    return detail::elementwise_unary(
        x,
        [](S v) {
            static constexpr S lo = std::numeric_limits<S>::min();
            static constexpr S hi = S(1) - std::numeric_limits<S>::epsilon() / S(2);
            const S s = S(1) / (S(1) + std::exp(-v));
            return std::min(hi, std::max(lo, s));
        },
        [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> exp_elem(const Tensor<S>& x) {
    return detail::elementwise_unary(x, [](S v) { return std::exp(v); },
                                     [](S, S y) { return y; });
}

/// Elementwise clamp into [lo, hi]. The gradient passes through unchanged
/// where the input lies inside the range and is zero where the bound is
/// active, so inputs that never touch a bound are bitwise unaffected in both
/// the forward and backward pass.
template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
    check(lo < hi, "clamp: bounds must satisfy lo < hi");
    return detail::elementwise_unary(
        x, [lo, hi](S v) { return std::min(hi, std::max(lo, v)); },
        [lo, hi](S v, S) { return v > lo && v < hi ? S(1) : S(0); });
}

template <typename S>
Tensor<S> log_elem(const Tensor<S>& x) {
    for (const S v : x.values())
        check(v > S(0), "log: non-positive input " + std::to_string(static_cast<double>(v)));
    return detail::elementwise_unary(x, [](S v) { return std::log(v); },
                                     [](S v, S) { return S(1) / v; });
}

/// y = mul * x + add, elementwise with scalar coefficients.
template <typename S>
Tensor<S> affine(const Tensor<S>& x, S mul, S add) {
    return detail::elementwise_unary(x, [mul, add](S v) { return mul * v + add; },
                                     [mul](S, S) { return mul; });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) { return affine(x, c, S(0)); }

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) { return affine(x, S(1), c); }

/// c - x.
template <typename S>
Tensor<S> rsub_scalar(S c, const Tensor<S>& x) { return affine(x, S(-1), c); }

namespace detail {

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* who) {
    if (a.shape() == b.shape()) return;
    const std::size_t r = std::min(a.rank(), b.rank());
    for (std::size_t i = 0; i < r; ++i)
        if (a.dim(i) != b.dim(i))
            throw std::invalid_argument(std::string(who) + ": shape mismatch on axis " +
                                        std::to_string(i) + " (" + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()) + ")");
    throw std::invalid_argument(std::string(who) + ": rank mismatch (" +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()) + ")");
}

template <typename S, typename Fwd>
Tensor<S> elementwise_binary(const Tensor<S>& a, const Tensor<S>& b, const char* who, Fwd f,
                             std::function<void(TensorNode<S>&, TensorNode<S>&, TensorNode<S>&)> bwd) {
    require_same_shape(a, b, who);
    Tensor<S> y(a.shape());
    const S* av = a.data();
    const S* bv = b.data();
    S* yv = y.data();
    for (std::size_t i = 0; i < y.numel(); ++i) yv[i] = f(av[i], bv[i]);
    auto an = a.node();
    auto bn = b.node();
    auto yn = y.node();
    yn->parents = {an, bn};
    yn->backprop = [an, bn, bwd](TensorNode<S>& node) { bwd(node, *an, *bn); };
    return y;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary<S>(
        a, b, "add", [](S x, S y) { return x + y; },
        [](TensorNode<S>& node, TensorNode<S>& an, TensorNode<S>& bn) {
            const S* gy = node.grad.data();
            const std::size_t n = node.value.size();
            if (an.active) {
                an.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an.grad[i] += gy[i];
            }
            if (bn.active) {
                bn.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn.grad[i] += gy[i];
            }
        });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary<S>(
        a, b, "sub", [](S x, S y) { return x - y; },
        [](TensorNode<S>& node, TensorNode<S>& an, TensorNode<S>& bn) {
            const S* gy = node.grad.data();
            const std::size_t n = node.value.size();
            if (an.active) {
                an.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an.grad[i] += gy[i];
            }
            if (bn.active) {
                bn.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn.grad[i] -= gy[i];
            }
        });
}

template <typename S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
    for (const S v : b.values()) check(v != S(0), "divide: zero denominator");
    return detail::elementwise_binary<S>(
        a, b, "divide", [](S x, S y) { return x / y; },
        [](TensorNode<S>& node, TensorNode<S>& an, TensorNode<S>& bn) {
            const S* gy = node.grad.data();
            const std::size_t n = node.value.size();
            if (an.active) {
                an.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an.grad[i] += gy[i] / bn.value[i];
            }
            if (bn.active) {
                bn.ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    bn.grad[i] -= gy[i] * an.value[i] / (bn.value[i] * bn.value[i]);
            }
        });
}

/// Elementwise product. Same shapes, or one operand may carry a single
/// channel (axis 1 extent 1, other extents equal) which is broadcast across
/// the other's channels.
template <typename S>
Tensor<S> hadamard(const Tensor<S>& a, const Tensor<S>& b) {
    const bool a_bcast = a.rank() >= 2 && b.rank() == a.rank() && a.dim(1) == 1 && b.dim(1) != 1;
    const bool b_bcast = b.rank() >= 2 && a.rank() == b.rank() && b.dim(1) == 1 && a.dim(1) != 1;
    if (!a_bcast && !b_bcast) {
        return detail::elementwise_binary<S>(
            a, b, "hadamard", [](S x, S y) { return x * y; },
            [](TensorNode<S>& node, TensorNode<S>& an, TensorNode<S>& bn) {
                const S* gy = node.grad.data();
                const std::size_t n = node.value.size();
                if (an.active) {
                    an.ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) an.grad[i] += gy[i] * bn.value[i];
                }
                if (bn.active) {
                    bn.ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) bn.grad[i] += gy[i] * an.value[i];
                }
            });
    }
    const Tensor<S>& full = a_bcast ? b : a;   // [N, C, ...]
    const Tensor<S>& single = a_bcast ? a : b;  // [N, 1, ...]
    for (std::size_t i = 0; i < full.rank(); ++i)
        if (i != 1)
            check(full.dim(i) == single.dim(i),
                  "hadamard: broadcast shape mismatch on axis " + std::to_string(i) + " (" +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()) + ")");
    const std::size_t N = full.dim(0), C = full.dim(1);
    std::size_t rest = 1;
    for (std::size_t i = 2; i < full.rank(); ++i) rest *= full.dim(i);

    Tensor<S> y(full.shape());
    const S* fv = full.data();
    const S* sv = single.data();
    S* yv = y.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t fo = (n * C + c) * rest;
            const std::size_t so = n * rest;
            for (std::size_t i = 0; i < rest; ++i) yv[fo + i] = fv[fo + i] * sv[so + i];
        }
    auto fn = full.node();
    auto sn = single.node();
    auto yn = y.node();
    yn->parents = {fn, sn};
    yn->backprop = [fn, sn, N, C, rest](TensorNode<S>& node) {
        const S* gy = node.grad.data();
        S* gf = nullptr;
        S* gs = nullptr;
        if (fn->active) { fn->ensure_grad(); gf = fn->grad.data(); }
        if (sn->active) { sn->ensure_grad(); gs = sn->grad.data(); }
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t fo = (n * C + c) * rest;
                const std::size_t so = n * rest;
                for (std::size_t i = 0; i < rest; ++i) {
                    if (gf) gf[fo + i] += gy[fo + i] * sn->value[so + i];
                    if (gs) gs[so + i] += gy[fo + i] * fn->value[fo + i];
                }
            }
    };
    return y;
}

/// y[n,g] = bias[g] + sum_f x[n,f] * weights[g,f].
template <typename S>
Tensor<S> fully_connected(const Tensor<S>& x, const Tensor<S>& weights, const Tensor<S>& bias) {
    check(x.rank() == 2, "fully_connected: input must be NxF, got " + shape_str(x.shape()));
    check(weights.rank() == 2, "fully_connected: weights must be GxF");
    const std::size_t N = x.dim(0), F = x.dim(1), G = weights.dim(0);
    check(weights.dim(1) == F, "fully_connected: weight feature axis " +
                                   std::to_string(weights.dim(1)) + " does not match input " +
                                   std::to_string(F));
    check(bias.shape() == Shape{G}, "fully_connected: bias must have shape [" +
                                        std::to_string(G) + "]");
    Tensor<S> y(Shape{N, G});
    const S* xv = x.data();
    const S* wv = weights.data();
    S* yv = y.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t g = 0; g < G; ++g) {
            S acc = bias.data()[g];
            const S* xr = xv + n * F;
            const S* wr = wv + g * F;
            for (std::size_t f = 0; f < F; ++f) acc += xr[f] * wr[f];
            yv[n * G + g] = acc;
        }
    auto xn = x.node();
    auto wn = weights.node();
    auto bn = bias.node();
    auto yn = y.node();
    yn->parents = {xn, wn, bn};
    yn->backprop = [xn, wn, bn, N, F, G](TensorNode<S>& node) {
        const S* gy = node.grad.data();
        S* gx = nullptr;
        S* gw = nullptr;
        S* gb = nullptr;
        if (xn->active) { xn->ensure_grad(); gx = xn->grad.data(); }
        if (wn->active) { wn->ensure_grad(); gw = wn->grad.data(); }
        if (bn->active) { bn->ensure_grad(); gb = bn->grad.data(); }
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t g = 0; g < G; ++g) {
                const S gv = gy[n * G + g];
                if (gb) gb[g] += gv;
                for (std::size_t f = 0; f < F; ++f) {
                    if (gx) gx[n * F + f] += gv * wn->value[g * F + f];
                    if (gw) gw[g * F + f] += gv * xn->value[n * F + f];
                }
            }
    };
    return y;
}

/// Inverted dropout. Identity when training is false; otherwise kept units
/// are scaled by 1/(1-rate). Mask draws come from `rng` in flat index order.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, bool training, Rng& rng) {
    check(rate >= 0.0 && rate < 1.0,
          "dropout: rate must lie in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    std::vector<S> mask(x.numel());
    const S keep_scale = S(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = rng.uniform() < rate ? S(0) : keep_scale;
    Tensor<S> y(x.shape());
    const S* xv = x.data();
    S* yv = y.data();
    for (std::size_t i = 0; i < y.numel(); ++i) yv[i] = xv[i] * mask[i];
    auto xn = x.node();
    auto yn = y.node();
    yn->parents = {xn};
    yn->backprop = [xn, mask = std::move(mask)](TensorNode<S>& node) {
        if (!xn->active) return;
        xn->ensure_grad();
        const S* gy = node.grad.data();
        for (std::size_t i = 0; i < node.value.size(); ++i) xn->grad[i] += gy[i] * mask[i];
    };
    return y;
}

namespace detail {

struct LerpTap {
    std::size_t i0, i1;
    double w1;
};

// Corner-aligned sampling: output index o on an axis of input extent m maps
// to source coordinate o*(m-1)/(2m-1). The first and last output samples are
// pinned to the input corners so they reproduce input values bit-exactly.
inline std::vector<LerpTap> upsample_taps(std::size_t in_extent) {
    const std::size_t out = 2 * in_extent;
    std::vector<LerpTap> taps(out);
    const double scl =
        in_extent > 1 ? static_cast<double>(in_extent - 1) / static_cast<double>(out - 1) : 0.0;
    for (std::size_t o = 0; o < out; ++o) {
        if (o == 0 || o == out - 1) {
            const std::size_t i = o == 0 ? 0 : in_extent - 1;
            taps[o] = {i, i, 0.0};
            continue;
        }
        const double src = static_cast<double>(o) * scl;
        std::size_t i0 = static_cast<std::size_t>(src);
        if (i0 >= in_extent - 1) i0 = in_extent - 1;
        const std::size_t i1 = std::min(i0 + 1, in_extent - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace detail

/// Trilinear interpolation doubling each spatial extent (corner-aligned).
/// Computed as nested 1-D lerps a + t*(b-a), which reproduces constant
/// inputs and the corner samples bit-exactly.
template <typename S>
Tensor<S> trilinear_upsample2x(const Tensor<S>& x) {
    detail::require_rank5(x, "trilinear_upsample2x");
    const std::size_t N = x.dim(0), C = x.dim(1);
    const std::size_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const auto td = detail::upsample_taps(D);
    const auto th = detail::upsample_taps(H);
    const auto tw = detail::upsample_taps(W);
    Tensor<S> y(Shape{N, C, 2 * D, 2 * H, 2 * W});
    const S* xv = x.data();
    S* yv = y.data();
    const std::size_t in_vol = D * H * W, out_vol = 8 * in_vol;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const S* xc = xv + nc * in_vol;
        S* yc = yv + nc * out_vol;
        for (std::size_t od = 0; od < 2 * D; ++od) {
            const auto& d = td[od];
            for (std::size_t oh = 0; oh < 2 * H; ++oh) {
                const auto& h = th[oh];
                const S* r00 = xc + (d.i0 * H + h.i0) * W;
                const S* r01 = xc + (d.i0 * H + h.i1) * W;
                const S* r10 = xc + (d.i1 * H + h.i0) * W;
                const S* r11 = xc + (d.i1 * H + h.i1) * W;
                for (std::size_t ow = 0; ow < 2 * W; ++ow) {
                    const auto& w = tw[ow];
                    const S tww = static_cast<S>(w.w1);
                    const S twh = static_cast<S>(h.w1);
                    const S twd = static_cast<S>(d.w1);
                    const S c00 = r00[w.i0] + tww * (r00[w.i1] - r00[w.i0]);
                    const S c01 = r01[w.i0] + tww * (r01[w.i1] - r01[w.i0]);
                    const S c10 = r10[w.i0] + tww * (r10[w.i1] - r10[w.i0]);
                    const S c11 = r11[w.i0] + tww * (r11[w.i1] - r11[w.i0]);
                    const S c0 = c00 + twh * (c01 - c00);
                    const S c1 = c10 + twh * (c11 - c10);
                    yc[(od * 2 * H + oh) * 2 * W + ow] = c0 + twd * (c1 - c0);
                }
            }
        }
    }
    auto xn = x.node();
    auto yn = y.node();
    yn->parents = {xn};
    yn->backprop = [xn, td, th, tw, N, C, D, H, W, in_vol, out_vol](TensorNode<S>& node) {
        if (!xn->active) return;
        xn->ensure_grad();
        S* gx = xn->grad.data();
        const S* gy = node.grad.data();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            S* gxc = gx + nc * in_vol;
            const S* gyc = gy + nc * out_vol;
            for (std::size_t od = 0; od < 2 * D; ++od) {
                const auto& d = td[od];
                for (std::size_t oh = 0; oh < 2 * H; ++oh) {
                    const auto& h = th[oh];
                    for (std::size_t ow = 0; ow < 2 * W; ++ow) {
                        const auto& w = tw[ow];
                        const S g = gyc[(od * 2 * H + oh) * 2 * W + ow];
                        if (g == S(0)) continue;
                        for (int cd = 0; cd < 2; ++cd) {
                            const std::size_t id = cd ? d.i1 : d.i0;
                            const double wd = cd ? d.w1 : 1.0 - d.w1;
                            if (wd == 0.0) continue;
                            for (int ch = 0; ch < 2; ++ch) {
                                const std::size_t ih = ch ? h.i1 : h.i0;
                                const double wh = ch ? h.w1 : 1.0 - h.w1;
                                if (wh == 0.0) continue;
                                S* row = gxc + (id * H + ih) * W;
                                const double wdh = wd * wh;
                                if (w.w1 != 0.0) row[w.i1] += static_cast<S>(wdh * w.w1) * g;
                                if (w.w1 != 1.0)
                                    row[w.i0] += static_cast<S>(wdh * (1.0 - w.w1)) * g;
                            }
                        }
                    }
                }
            }
        }
    };
    return y;
}

/// Concatenate along the channel axis (axis 1).
template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts) {
    check(!parts.empty(), "concat_channels: empty input list");
    const Shape& s0 = parts.front().shape();
    check(s0.size() >= 2, "concat_channels: inputs need a channel axis");
    std::size_t C = 0;
    for (const auto& p : parts) {
        check(p.rank() == s0.size(), "concat_channels: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != 1)
                check(p.dim(i) == s0[i],
                      "concat_channels: shape mismatch on axis " + std::to_string(i));
        C += p.dim(1);
    }
    Shape out = s0;
    out[1] = C;
    std::size_t rest = 1;
    for (std::size_t i = 2; i < s0.size(); ++i) rest *= s0[i];
    const std::size_t N = s0[0];
    Tensor<S> y(out);
    S* yv = y.data();
    std::vector<std::size_t> offsets;
    std::size_t coff = 0;
    for (const auto& p : parts) {
        offsets.push_back(coff);
        const std::size_t pc = p.dim(1);
        for (std::size_t n = 0; n < N; ++n)
            std::copy(p.data() + n * pc * rest, p.data() + (n + 1) * pc * rest,
                      yv + (n * C + coff) * rest);
        coff += pc;
    }
    auto yn = y.node();
    std::vector<std::shared_ptr<TensorNode<S>>> pnodes;
    std::vector<std::size_t> pcs;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        pcs.push_back(p.dim(1));
    }
    yn->parents = pnodes;
    yn->backprop = [pnodes, pcs, offsets, N, C, rest](TensorNode<S>& node) {
        const S* gy = node.grad.data();
        for (std::size_t k = 0; k < pnodes.size(); ++k) {
            if (!pnodes[k]->active) continue;
            pnodes[k]->ensure_grad();
            S* gp = pnodes[k]->grad.data();
            for (std::size_t n = 0; n < N; ++n) {
                const S* src = gy + (n * C + offsets[k]) * rest;
                S* dst = gp + n * pcs[k] * rest;
                for (std::size_t i = 0; i < pcs[k] * rest; ++i) dst[i] += src[i];
            }
        }
    };
    return y;
}

/// Slice columns [start, start+count) of an NxF matrix.
template <typename S>
Tensor<S> slice_features(const Tensor<S>& x, std::size_t start, std::size_t count) {
    check(x.rank() == 2, "slice_features: input must be NxF");
    const std::size_t N = x.dim(0), F = x.dim(1);
    check(start + count <= F, "slice_features: range [" + std::to_string(start) + ", " +
                                  std::to_string(start + count) + ") exceeds feature axis " +
                                  std::to_string(F));
    Tensor<S> y(Shape{N, count});
    for (std::size_t n = 0; n < N; ++n)
        std::copy(x.data() + n * F + start, x.data() + n * F + start + count,
                  y.data() + n * count);
    auto xn = x.node();
    auto yn = y.node();
    yn->parents = {xn};
    yn->backprop = [xn, start, count, N, F](TensorNode<S>& node) {
        if (!xn->active) return;
        xn->ensure_grad();
        const S* gy = node.grad.data();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < count; ++i)
                xn->grad[n * F + start + i] += gy[n * count + i];
    };
    return y;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    check(shape_numel(new_shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Tensor<S> y(std::move(new_shape), x.values());
    auto xn = x.node();
    auto yn = y.node();
    yn->parents = {xn};
    yn->backprop = [xn](TensorNode<S>& node) {
        if (!xn->active) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < node.value.size(); ++i) xn->grad[i] += node.grad[i];
    };
    return y;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    S acc = 0;
    for (const S v : x.values()) acc += v;
    Tensor<S> y(Shape{1}, std::vector<S>{acc});
    auto xn = x.node();
    auto yn = y.node();
    yn->parents = {xn};
    yn->backprop = [xn](TensorNode<S>& node) {
        if (!xn->active) return;
        xn->ensure_grad();
        const S g = node.grad[0];
        for (auto& v : xn->grad) v += g;
    };
    return y;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return scale(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

/// Reduce an [N, C, ...] tensor to per-channel sums of shape [C].
template <typename S>
Tensor<S> channel_sums(const Tensor<S>& x) {
    check(x.rank() >= 2, "channel_sums: input needs a channel axis");
    const std::size_t N = x.dim(0), C = x.dim(1);
    std::size_t rest = 1;
    for (std::size_t i = 2; i < x.rank(); ++i) rest *= x.dim(i);
    Tensor<S> y(Shape{C});
    const S* xv = x.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            S acc = 0;
            const S* row = xv + (n * C + c) * rest;
            for (std::size_t i = 0; i < rest; ++i) acc += row[i];
            y.data()[c] += acc;
        }
    auto xn = x.node();
    auto yn = y.node();
    yn->parents = {xn};
    yn->backprop = [xn, N, C, rest](TensorNode<S>& node) {
        if (!xn->active) return;
        xn->ensure_grad();
        S* gx = xn->grad.data();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const S g = node.grad[c];
                S* row = gx + (n * C + c) * rest;
                for (std::size_t i = 0; i < rest; ++i) row[i] += g;
            }
    };
    return y;
}

}  // namespace cseg

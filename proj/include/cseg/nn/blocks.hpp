#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "cseg/core/ops.hpp"
#include "cseg/core/rng.hpp"
#include "cseg/core/tensor.hpp"

namespace cseg {

/// Group count used by every normalization layer: 8 groups when the channel
/// count divides evenly, otherwise one channel per group when that divides,
/// otherwise a single group.
inline std::size_t gn_groups(std::size_t channels) {
    const std::size_t preferred = std::min<std::size_t>(8, channels);
    return channels % preferred == 0 ? preferred : 1;
}

/// A named trainable tensor, as exposed by each block for registration,
/// initialization and serialization.
template <typename S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
    // Fan-in of the op consuming the tensor; 0 marks bias/affine parameters
    // that initialize to a constant instead of a random draw.
    std::size_t fan_in = 0;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

// ---------------------------------------------------------------------------
// Convolution + normalization layers
// ---------------------------------------------------------------------------

template <typename S>
struct ConvLayer {
    ConvSpec spec;
    Tensor<S> w;
    Tensor<S> b;  // empty when the layer has no bias term
    /// Emission layers (the ones whose raw output feeds a sigmoid or exp)
    /// register with fan_in 0 so fan-scaled initialization leaves them at
    /// zero; otherwise their logits start far outside the useful range and
    /// the activation saturates before training begins.
    bool zero_init = false;

    ConvLayer() = default;
    ConvLayer(ConvSpec s, bool with_bias) : spec(s) {
        const Shape ws{s.out_channels, s.in_channels, s.kernel[0], s.kernel[1], s.kernel[2]};
        w = Tensor<S>::leaf(ws, std::vector<S>(shape_numel(ws), S(0)), true);
        if (with_bias)
            b = Tensor<S>::leaf({s.out_channels}, std::vector<S>(s.out_channels, S(0)), true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return conv3d(x, w, b, spec); }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        const std::size_t fan =
            zero_init ? 0
                      : spec.in_channels * spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
        out.push_back({prefix + "/w", w, fan});
        if (b.valid()) out.push_back({prefix + "/b", b, 0});
    }
};

template <typename S>
struct NormLayer {
    std::size_t groups = 1;
    Tensor<S> gamma;
    Tensor<S> beta;

    NormLayer() = default;
    explicit NormLayer(std::size_t channels) : groups(gn_groups(channels)) {
        gamma = Tensor<S>::leaf({channels}, std::vector<S>(channels, S(1)), true);
        beta = Tensor<S>::leaf({channels}, std::vector<S>(channels, S(0)), true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return group_norm(x, groups, gamma, beta); }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        out.push_back({prefix + "/gamma", gamma, 0});
        out.push_back({prefix + "/beta", beta, 0});
    }
};

// ---------------------------------------------------------------------------
// Residual block: x + conv(relu(norm(conv(relu(norm(x)))))), pre-activation
// ordering, channel-preserving.
// ---------------------------------------------------------------------------

template <typename S>
struct ResBlockParams {
    std::size_t channels = 0;
    NormLayer<S> n1, n2;
    ConvLayer<S> c1, c2;

    ResBlockParams() = default;
    explicit ResBlockParams(std::size_t ch)
        : channels(ch),
          n1(ch),
          n2(ch),
          c1(ConvSpec::k3(ch, ch), true),
          c2(ConvSpec::k3(ch, ch), true) {}

    void collect(const std::string& prefix, ParamList<S>& out) const {
        n1.collect(prefix + "/n1", out);
        c1.collect(prefix + "/c1", out);
        n2.collect(prefix + "/n2", out);
        c2.collect(prefix + "/c2", out);
    }
};

template <typename S>
Tensor<S> res_block_forward(const Tensor<S>& x, const ResBlockParams<S>& p) {
    check(x.rank() == 5 && x.dim(1) == p.channels,
          "res_block: input has " + std::to_string(x.rank() == 5 ? x.dim(1) : 0) +
              " channels, block expects " + std::to_string(p.channels));
    Tensor<S> h = p.c1.forward(relu(p.n1.forward(x)));
    h = p.c2.forward(relu(p.n2.forward(h)));
    return add(x, h);
}

// ---------------------------------------------------------------------------
// Downsample: 3x3x3 conv, stride 2, pad 1; halves each spatial extent and
// doubles the channel count. Requires even extents.
// ---------------------------------------------------------------------------

template <typename S>
struct DownsampleParams {
    std::size_t in_channels = 0;
    ConvLayer<S> conv;

    DownsampleParams() = default;
    explicit DownsampleParams(std::size_t cin)
        : in_channels(cin), conv(ConvSpec::k3(cin, 2 * cin, 2), true) {}

    void collect(const std::string& prefix, ParamList<S>& out) const {
        conv.collect(prefix, out);
    }
};

template <typename S>
Tensor<S> downsample(const Tensor<S>& x, const DownsampleParams<S>& p) {
    check(x.rank() == 5 && x.dim(1) == p.in_channels, "downsample: channel mismatch");
    for (int a = 2; a < 5; ++a)
        check(x.dim(a) % 2 == 0, "downsample: spatial axis " + std::to_string(a - 2) +
                                     " has odd extent " + std::to_string(x.dim(a)));
    return p.conv.forward(x);
}

// ---------------------------------------------------------------------------
// Upsample block: 1x1x1 conv halving channels, then trilinear x2.
// ---------------------------------------------------------------------------

template <typename S>
struct UpsampleBlockParams {
    std::size_t in_channels = 0;
    ConvLayer<S> conv;

    UpsampleBlockParams() = default;
    explicit UpsampleBlockParams(std::size_t cin) : in_channels(cin) {
        check(cin % 2 == 0 && cin >= 2,
              "upsample_block: channel count " + std::to_string(cin) + " must be even");
        conv = ConvLayer<S>(ConvSpec::k1(cin, cin / 2), true);
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        conv.collect(prefix, out);
    }
};

template <typename S>
Tensor<S> upsample_block(const Tensor<S>& x, const UpsampleBlockParams<S>& p) {
    check(x.rank() == 5 && x.dim(1) == p.in_channels, "upsample_block: channel mismatch");
    return trilinear_upsample2x(p.conv.forward(x));
}

// ---------------------------------------------------------------------------
// Attention gate. Query q = W_int( relu(W_x x + W_g g + b_g) ) + b_Wint is
// formed at the coarse scale: W_x is a bias-free 1x1x1 stride-2 conv on the
// fine features, W_g a 1x1x1 conv (carrying the single gating bias) on the
// coarse gating signal. alpha = upsample(sigmoid(q)) has one channel and is
// broadcast-multiplied onto the fine features.
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionGateParams {
    std::size_t fine_channels = 0;   // F_l
    std::size_t inter_channels = 0;  // F_int = F_l / 2
    ConvLayer<S> wx;                 // F_l -> F_int, stride 2, no bias
    ConvLayer<S> wg;                 // 2*F_l -> F_int, bias b_g
    ConvLayer<S> wint;               // F_int -> 1, bias b_Wint

    AttentionGateParams() = default;
    explicit AttentionGateParams(std::size_t f_l)
        : fine_channels(f_l), inter_channels(f_l / 2) {
        check(f_l >= 2, "attention_gate: need at least 2 fine channels, got " +
                            std::to_string(f_l));
        wx = ConvLayer<S>(ConvSpec::k1(f_l, inter_channels, 2), false);
        wg = ConvLayer<S>(ConvSpec::k1(2 * f_l, inter_channels), true);
        wint = ConvLayer<S>(ConvSpec::k1(inter_channels, 1), true);
        wint.zero_init = true;  // the gate opens at 1/2 everywhere initially
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        wx.collect(prefix + "/wx", out);
        wg.collect(prefix + "/wg", out);
        wint.collect(prefix + "/wint", out);
    }
};

template <typename S>
struct GateOut {
    Tensor<S> x_hat;  // gated fine features, same shape as x_l
    Tensor<S> alpha;  // attention coefficients, [N,1,D,H,W], all in (0,1)
};

template <typename S>
GateOut<S> attention_gate(const Tensor<S>& x_l, const Tensor<S>& g,
                          const AttentionGateParams<S>& p) {
    check(x_l.rank() == 5 && g.rank() == 5, "attention_gate: inputs must be NxCxDxHxW");
    check(x_l.dim(1) == p.fine_channels, "attention_gate: fine channel mismatch");
    check(g.dim(1) == 2 * p.fine_channels,
          "attention_gate: gating signal must carry twice the fine channels, got " +
              std::to_string(g.dim(1)));
    check(x_l.dim(0) == g.dim(0), "attention_gate: batch mismatch");
    for (int a = 2; a < 5; ++a) {
        check(x_l.dim(a) % 2 == 0, "attention_gate: odd fine extent on spatial axis " +
                                       std::to_string(a - 2));
        check(g.dim(a) * 2 == x_l.dim(a),
              "attention_gate: gating extents must be exactly half on spatial axis " +
                  std::to_string(a - 2));
    }
    Tensor<S> q = add(p.wx.forward(x_l), p.wg.forward(g));
    q = p.wint.forward(relu(q));
    Tensor<S> alpha = trilinear_upsample2x(sigmoid(q));
    return {hadamard(x_l, alpha), alpha};
}

// ---------------------------------------------------------------------------
// VAE head. From the encoder endpoint: stride-2 reduction conv to 16
// channels, flatten, fully connected to (mu, log sigma^2), reparameterized
// sample, fully connected restore, ReLU, reshape, 1x1x1 conv back to the
// endpoint channel count, trilinear x2, then a skip-free mirror of the
// decoder down to an image-shaped reconstruction.
// ---------------------------------------------------------------------------

template <typename S>
struct VaeHeadParams {
    std::size_t endpoint_channels = 0;
    std::array<std::size_t, 3> endpoint_spatial{};
    std::size_t latent_dim = 0;
    std::size_t image_channels = 0;
    std::size_t reduced_features = 0;  // 16 * prod(endpoint_spatial / 2)

    ConvLayer<S> reduce;       // endpoint_channels -> 16, stride 2
    Tensor<S> fc_latent_w;     // [2*latent, reduced_features]
    Tensor<S> fc_latent_b;     // [2*latent]
    Tensor<S> fc_restore_w;    // [reduced_features, latent]
    Tensor<S> fc_restore_b;    // [reduced_features]
    ConvLayer<S> expand;       // 16 -> endpoint_channels, 1x1x1
    std::vector<UpsampleBlockParams<S>> ups;
    std::vector<ResBlockParams<S>> blocks;
    ConvLayer<S> out_conv;     // base channels -> image_channels, 1x1x1

    static constexpr std::size_t kReducedChannels = 16;

    VaeHeadParams() = default;
    VaeHeadParams(std::size_t endpoint_ch, std::array<std::size_t, 3> spatial,
                  std::size_t latent, std::size_t levels, std::size_t img_ch)
        : endpoint_channels(endpoint_ch),
          endpoint_spatial(spatial),
          latent_dim(latent),
          image_channels(img_ch) {
        check(latent >= 1, "vae_head: latent dimension must be positive");
        check(levels >= 1, "vae_head: need at least one level");
        for (int a = 0; a < 3; ++a)
            check(spatial[a] % 2 == 0, "vae_head: endpoint spatial axis " + std::to_string(a) +
                                           " has odd extent " + std::to_string(spatial[a]));
        check(endpoint_ch % (1u << (levels - 1)) == 0,
              "vae_head: endpoint channels not divisible across decoder levels");
        reduced_features =
            kReducedChannels * (spatial[0] / 2) * (spatial[1] / 2) * (spatial[2] / 2);
        reduce = ConvLayer<S>(ConvSpec::k3(endpoint_ch, kReducedChannels, 2), true);
        fc_latent_w = Tensor<S>::leaf({2 * latent, reduced_features},
                                      std::vector<S>(2 * latent * reduced_features, S(0)), true);
        fc_latent_b = Tensor<S>::leaf({2 * latent}, std::vector<S>(2 * latent, S(0)), true);
        fc_restore_w = Tensor<S>::leaf({reduced_features, latent},
                                       std::vector<S>(reduced_features * latent, S(0)), true);
        fc_restore_b =
            Tensor<S>::leaf({reduced_features}, std::vector<S>(reduced_features, S(0)), true);
        expand = ConvLayer<S>(ConvSpec::k1(kReducedChannels, endpoint_ch), true);
        std::size_t ch = endpoint_ch;
        for (std::size_t l = 0; l + 1 < levels; ++l) {
            ups.emplace_back(ch);
            ch /= 2;
            blocks.emplace_back(ch);
        }
        out_conv = ConvLayer<S>(ConvSpec::k1(ch, img_ch), true);
        out_conv.zero_init = true;  // reconstruction starts flat at zero
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        reduce.collect(prefix + "/reduce", out);
        // Zero start (fan 0) keeps the initial statistics at mu = 0 and
        // log-variance 0, i.e. sigma = 1; a fan-scaled draw here would send
        // exp(logvar / 2) to astronomically large values.
        out.push_back({prefix + "/fc_lat/w", fc_latent_w, 0});
        out.push_back({prefix + "/fc_lat/b", fc_latent_b, 0});
        out.push_back({prefix + "/fc_res/w", fc_restore_w, latent_dim});
        out.push_back({prefix + "/fc_res/b", fc_restore_b, 0});
        expand.collect(prefix + "/expand", out);
        for (std::size_t l = 0; l < ups.size(); ++l) {
            ups[l].collect(prefix + "/up" + std::to_string(l), out);
            blocks[l].collect(prefix + "/res" + std::to_string(l), out);
        }
        out_conv.collect(prefix + "/out", out);
    }
};

template <typename S>
struct VaeOut {
    Tensor<S> recon;   // [N, image_channels, full D,H,W]
    Tensor<S> mu;      // [N, latent]
    Tensor<S> sigma;   // [N, latent], strictly positive
    Tensor<S> logvar;  // [N, latent]
    Tensor<S> z;       // [N, latent], the (possibly sampled) code
};

/// sample=true draws z = mu + sigma * eps with eps ~ N(0, I) from `rng`
/// (reparameterized, so gradients flow into mu and sigma); sample=false
/// uses z = mu.
template <typename S>
VaeOut<S> vae_head(const Tensor<S>& endpoint, const VaeHeadParams<S>& p, Rng& rng,
                   bool sample) {
    check(endpoint.rank() == 5, "vae_head: endpoint must be NxCxDxHxW");
    check(endpoint.dim(1) == p.endpoint_channels &&
              endpoint.dim(2) == p.endpoint_spatial[0] &&
              endpoint.dim(3) == p.endpoint_spatial[1] &&
              endpoint.dim(4) == p.endpoint_spatial[2],
          "vae_head: endpoint shape " + shape_str(endpoint.shape()) +
              " does not match configured head");
    const std::size_t N = endpoint.dim(0);

    Tensor<S> r = p.reduce.forward(endpoint);
    Tensor<S> flat = reshape(r, {N, p.reduced_features});
    Tensor<S> stats = fully_connected(flat, p.fc_latent_w, p.fc_latent_b);
    Tensor<S> mu = slice_features(stats, 0, p.latent_dim);
    // The log-variance is clamped before exponentiation so that a diverging
    // training trajectory saturates instead of overflowing sigma (or
    // underflowing sigma^2 to an exact zero) in 32-bit arithmetic. The bound
    // is far outside the range healthy runs occupy, which the clamp leaves
    // bitwise untouched.
    Tensor<S> logvar = clamp(slice_features(stats, p.latent_dim, p.latent_dim),
                             S(-kLogVarBound), S(kLogVarBound));
    Tensor<S> sigma = exp_elem(scale(logvar, S(0.5)));

    Tensor<S> z = mu;
    if (sample) {
        std::vector<S> eps(N * p.latent_dim);
        for (auto& e : eps) e = static_cast<S>(rng.normal());
        Tensor<S> noise = Tensor<S>::leaf({N, p.latent_dim}, std::move(eps), false);
        z = add(mu, hadamard(sigma, noise));
    }

    Tensor<S> back = relu(fully_connected(z, p.fc_restore_w, p.fc_restore_b));
    Tensor<S> vol = reshape(back, {N, VaeHeadParams<S>::kReducedChannels,
                                   p.endpoint_spatial[0] / 2, p.endpoint_spatial[1] / 2,
                                   p.endpoint_spatial[2] / 2});
    Tensor<S> h = trilinear_upsample2x(p.expand.forward(vol));
    for (std::size_t l = 0; l < p.ups.size(); ++l) {
        h = upsample_block(h, p.ups[l]);
        h = res_block_forward(h, p.blocks[l]);
    }
    return {p.out_conv.forward(h), mu, sigma, logvar, z};
}

}  // namespace cseg

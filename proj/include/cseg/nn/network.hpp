#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cseg/nn/blocks.hpp"

namespace cseg {

/// Scale-independent description of one cascade stage.
struct NetworkConfig {
    std::size_t in_channels = 4;
    std::size_t out_channels = 3;  // WT, TC, ET probability maps
    std::size_t base_filters = 32;
    std::size_t levels = 4;
    std::vector<std::size_t> blocks_per_level{1, 2, 2, 4};  // encoder residual blocks
    std::size_t latent_dim = 128;
    std::array<std::size_t, 3> input_dims{160, 192, 128};
    double dropout_rate = 0.2;
    bool use_attention_gates = false;
    // 0 = reconstruct all in_channels; nonzero overrides (the second stage
    // may be configured to rebuild only the raw image channels).
    std::size_t vae_channels = 0;

    std::size_t endpoint_channels() const { return base_filters << (levels - 1); }
    std::array<std::size_t, 3> endpoint_spatial() const {
        const std::size_t f = std::size_t(1) << (levels - 1);
        return {input_dims[0] / f, input_dims[1] / f, input_dims[2] / f};
    }
    std::size_t reconstruction_channels() const {
        return vae_channels == 0 ? in_channels : vae_channels;
    }

    /// Throws listing the violated requirement.
    void validate() const {
        check(in_channels >= 1, "config: in_channels must be >= 1");
        check(out_channels >= 1, "config: out_channels must be >= 1");
        check(base_filters >= 1, "config: base_filters must be >= 1");
        check(levels >= 2, "config: levels must be >= 2");
        check(blocks_per_level.size() == levels,
              "config: blocks_per_level has " + std::to_string(blocks_per_level.size()) +
                  " entries for " + std::to_string(levels) + " levels");
        for (const std::size_t b : blocks_per_level)
            check(b >= 1, "config: every level needs at least one block");
        check(latent_dim >= 1, "config: latent_dim must be >= 1");
        check(dropout_rate >= 0.0 && dropout_rate < 1.0,
              "config: dropout_rate must lie in [0,1)");
        const std::size_t f = std::size_t(1) << (levels - 1);
        for (int a = 0; a < 3; ++a)
            check(input_dims[a] % f == 0,
                  "config: input extent " + std::to_string(input_dims[a]) +
                      " on axis " + std::to_string(a) + " is not divisible by 2^(levels-1) = " +
                      std::to_string(f));
        const auto es = endpoint_spatial();
        for (int a = 0; a < 3; ++a)
            check(es[a] % 2 == 0, "config: encoder endpoint extent " + std::to_string(es[a]) +
                                      " on axis " + std::to_string(a) +
                                      " must be even for the variational head");
        if (use_attention_gates)
            check(base_filters % 2 == 0 && base_filters >= 2,
                  "config: attention gates need an even base filter count >= 2");
    }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels},
                       {"out_channels", c.out_channels},
                       {"base_filters", c.base_filters},
                       {"levels", c.levels},
                       {"blocks_per_level", c.blocks_per_level},
                       {"latent_dim", c.latent_dim},
                       {"input_dims", c.input_dims},
                       {"dropout_rate", c.dropout_rate},
                       {"use_attention_gates", c.use_attention_gates},
                       {"vae_channels", c.vae_channels}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("out_channels").get_to(c.out_channels);
    j.at("base_filters").get_to(c.base_filters);
    j.at("levels").get_to(c.levels);
    j.at("blocks_per_level").get_to(c.blocks_per_level);
    j.at("latent_dim").get_to(c.latent_dim);
    j.at("input_dims").get_to(c.input_dims);
    j.at("dropout_rate").get_to(c.dropout_rate);
    j.at("use_attention_gates").get_to(c.use_attention_gates);
    c.vae_channels = j.value("vae_channels", std::size_t(0));
}

/// Pure shape arithmetic for a configuration — no buffers are allocated, so
/// full-resolution geometry can be inspected cheaply.
struct ShapeTrace {
    std::vector<std::array<std::size_t, 4>> encoder_levels;  // {C, D, H, W} per level
    std::array<std::size_t, 4> endpoint{};
    std::array<std::size_t, 4> output{};
    std::array<std::size_t, 4> reconstruction{};
    std::size_t attention_gates = 0;
    std::size_t parameter_count = 0;
};

namespace detail {

inline std::size_t res_block_param_count(std::size_t c) {
    return 2 * (2 * c) + 2 * (27 * c * c + c);
}

}  // namespace detail

inline ShapeTrace trace_shapes(const NetworkConfig& cfg) {
    cfg.validate();
    ShapeTrace t;
    std::size_t c = cfg.base_filters;
    std::array<std::size_t, 3> sp = cfg.input_dims;
    std::size_t params = cfg.in_channels * c * 27 + c;  // stem
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        params += cfg.blocks_per_level[l] * detail::res_block_param_count(c);
        t.encoder_levels.push_back({c, sp[0], sp[1], sp[2]});
        if (l + 1 < cfg.levels) {
            params += 27 * c * (2 * c) + 2 * c;  // downsample
            c *= 2;
            for (auto& e : sp) e /= 2;
        }
    }
    t.endpoint = t.encoder_levels.back();
    for (std::size_t l = cfg.levels - 1; l-- > 0;) {
        const std::size_t fine = cfg.base_filters << l;
        params += (2 * fine) * fine + fine;  // upsample 1x1x1 conv
        params += detail::res_block_param_count(fine);
        if (cfg.use_attention_gates) {
            const std::size_t inter = fine / 2;
            params += fine * inter;                  // W_x (no bias)
            params += (2 * fine) * inter + inter;    // W_g + b_g
            params += inter + 1;                     // W_int + b_Wint
            ++t.attention_gates;
        }
    }
    params += cfg.base_filters * cfg.out_channels + cfg.out_channels;  // head
    t.output = {cfg.out_channels, cfg.input_dims[0], cfg.input_dims[1], cfg.input_dims[2]};

    // Variational head.
    const auto es = cfg.endpoint_spatial();
    const std::size_t ce = cfg.endpoint_channels();
    const std::size_t fred = 16 * (es[0] / 2) * (es[1] / 2) * (es[2] / 2);
    params += 27 * ce * 16 + 16;                                // reduce conv
    params += 2 * cfg.latent_dim * fred + 2 * cfg.latent_dim;   // fc to (mu, logvar)
    params += fred * cfg.latent_dim + fred;                     // fc restore
    params += 16 * ce + ce;                                     // expand conv
    for (std::size_t l = cfg.levels - 1; l-- > 0;) {
        const std::size_t fine = cfg.base_filters << l;
        params += (2 * fine) * fine + fine;
        params += detail::res_block_param_count(fine);
    }
    const std::size_t rc = cfg.reconstruction_channels();
    params += cfg.base_filters * rc + rc;
    t.reconstruction = {rc, cfg.input_dims[0], cfg.input_dims[1], cfg.input_dims[2]};
    t.parameter_count = params;
    return t;
}

// ---------------------------------------------------------------------------
// Network: one cascade stage.
// ---------------------------------------------------------------------------

template <typename S>
struct Network {
    NetworkConfig config;
    ConvLayer<S> stem;
    std::vector<std::vector<ResBlockParams<S>>> enc_blocks;  // [level][block]
    std::vector<DownsampleParams<S>> downs;                  // between levels
    std::vector<UpsampleBlockParams<S>> dec_ups;             // index = fine level
    std::vector<ResBlockParams<S>> dec_blocks;               // index = fine level
    std::vector<AttentionGateParams<S>> gates;               // index = fine level
    ConvLayer<S> head;
    VaeHeadParams<S> vae;
    ParamList<S> params;  // every trainable tensor, stable order, unique names
};

/// Assemble the blocks for a validated configuration. Parameters are left at
/// their structural defaults; call initialize_parameters for random weights.
template <typename S>
Network<S> build_network(const NetworkConfig& cfg) {
    cfg.validate();
    Network<S> net;
    net.config = cfg;
    net.stem = ConvLayer<S>(ConvSpec::k3(cfg.in_channels, cfg.base_filters), true);
    std::size_t c = cfg.base_filters;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        net.enc_blocks.emplace_back();
        for (std::size_t b = 0; b < cfg.blocks_per_level[l]; ++b)
            net.enc_blocks.back().emplace_back(c);
        if (l + 1 < cfg.levels) {
            net.downs.emplace_back(c);
            c *= 2;
        }
    }
    net.dec_ups.resize(cfg.levels - 1);
    net.dec_blocks.resize(cfg.levels - 1);
    if (cfg.use_attention_gates) net.gates.resize(cfg.levels - 1);
    for (std::size_t l = 0; l < cfg.levels - 1; ++l) {
        const std::size_t fine = cfg.base_filters << l;
        net.dec_ups[l] = UpsampleBlockParams<S>(2 * fine);
        net.dec_blocks[l] = ResBlockParams<S>(fine);
        if (cfg.use_attention_gates) net.gates[l] = AttentionGateParams<S>(fine);
    }
    net.head = ConvLayer<S>(ConvSpec::k1(cfg.base_filters, cfg.out_channels), true);
    net.head.zero_init = true;  // probabilities start at 1/2, not saturated
    net.vae = VaeHeadParams<S>(cfg.endpoint_channels(), cfg.endpoint_spatial(),
                               cfg.latent_dim, cfg.levels, cfg.reconstruction_channels());

    net.stem.collect("stem", net.params);
    for (std::size_t l = 0; l < cfg.levels; ++l)
        for (std::size_t b = 0; b < net.enc_blocks[l].size(); ++b)
            net.enc_blocks[l][b].collect(
                "enc/l" + std::to_string(l) + "/b" + std::to_string(b), net.params);
    for (std::size_t l = 0; l < net.downs.size(); ++l)
        net.downs[l].collect("down/l" + std::to_string(l), net.params);
    for (std::size_t l = 0; l < cfg.levels - 1; ++l) {
        const std::string p = "dec/l" + std::to_string(l);
        net.dec_ups[l].collect(p + "/up", net.params);
        net.dec_blocks[l].collect(p + "/res", net.params);
        if (cfg.use_attention_gates) net.gates[l].collect(p + "/gate", net.params);
    }
    net.head.collect("head", net.params);
    net.vae.collect("vae", net.params);

    std::map<std::string, int> seen;
    for (const auto& p : net.params)
        check(++seen[p.name] == 1, "network: duplicate parameter name " + p.name);
    return net;
}

/// First cascade stage: plain additive skips, no gating.
template <typename S>
Network<S> build_stage1(const NetworkConfig& cfg) {
    check(!cfg.use_attention_gates, "stage 1 does not use attention gates");
    return build_network<S>(cfg);
}

/// Second cascade stage: seven input channels (three probability maps plus
/// four image channels), attention gate on every skip.
template <typename S>
Network<S> build_stage2(const NetworkConfig& cfg) {
    check(cfg.use_attention_gates, "stage 2 requires attention gates");
    check(cfg.in_channels == 7,
          "stage 2 consumes 7 channels (3 probability maps + 4 image channels), got " +
              std::to_string(cfg.in_channels));
    return build_network<S>(cfg);
}

/// He-style fan-in initialization: conv and fully connected weights are drawn
/// from N(0, 2/fan_in) on a per-parameter named substream (so values do not
/// depend on registration order). Parameters registered with fan_in 0 keep
/// their constructed values: biases zero, GN affine (1, 0), and the
/// zero-started emission layers (probability head, gate projection, latent
/// statistics, reconstruction output).
template <typename S>
void initialize_parameters(Network<S>& net, std::uint64_t seed) {
    for (auto& p : net.params) {
        if (p.fan_in == 0) continue;
        Rng r = substream(seed, "init/" + p.name);
        const double sd = std::sqrt(2.0 / static_cast<double>(p.fan_in));
        for (auto& v : p.tensor.values()) v = static_cast<S>(r.normal() * sd);
    }
}

template <typename S>
struct StageOutput {
    Tensor<S> probabilities;           // [N, out_channels, D, H, W], in (0,1)
    Tensor<S> reconstruction;          // training only
    Tensor<S> mu, sigma, logvar;       // training only
    std::vector<Tensor<S>> attention;  // per decoder level when captured
};

/// Run one stage. training=true enables dropout and the sampled variational
/// branch; training=false is deterministic and skips both. Attention maps
/// (one per decoder level, finest last) are stored when capture_attention
/// is set and the network has gates.
template <typename S>
StageOutput<S> forward(const Network<S>& net, const Tensor<S>& input, bool training, Rng& rng,
                       bool capture_attention = false) {
    const NetworkConfig& cfg = net.config;
    check(input.rank() == 5, "forward: input must be NxCxDxHxW");
    check(input.dim(1) == cfg.in_channels && input.dim(2) == cfg.input_dims[0] &&
              input.dim(3) == cfg.input_dims[1] && input.dim(4) == cfg.input_dims[2],
          "forward: input shape " + shape_str(input.shape()) +
              " does not match configured " + std::to_string(cfg.in_channels) + "x" +
              std::to_string(cfg.input_dims[0]) + "x" + std::to_string(cfg.input_dims[1]) +
              "x" + std::to_string(cfg.input_dims[2]));

    Tensor<S> x = net.stem.forward(input);
    x = dropout(x, cfg.dropout_rate, training, rng);

    std::vector<Tensor<S>> skips;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        for (const auto& blk : net.enc_blocks[l]) x = res_block_forward(x, blk);
        skips.push_back(x);
        if (l + 1 < cfg.levels) x = downsample(x, net.downs[l]);
    }
    const Tensor<S> endpoint = skips.back();

    StageOutput<S> out;
    Tensor<S> h = endpoint;
    std::vector<Tensor<S>> attention;
    for (std::size_t l = cfg.levels - 1; l-- > 0;) {
        Tensor<S> up = upsample_block(h, net.dec_ups[l]);
        Tensor<S> skip = skips[l];
        if (cfg.use_attention_gates) {
            auto gated = attention_gate(skips[l], h, net.gates[l]);
            skip = gated.x_hat;
            if (capture_attention) attention.push_back(gated.alpha);
        }
        h = add(up, skip);
        h = res_block_forward(h, net.dec_blocks[l]);
    }
    out.probabilities = sigmoid(net.head.forward(h));
    if (capture_attention) out.attention = std::move(attention);

    if (training) {
        auto v = vae_head(endpoint, net.vae, rng, /*sample=*/true);
        out.reconstruction = v.recon;
        out.mu = v.mu;
        out.sigma = v.sigma;
        out.logvar = v.logvar;
    }
    return out;
}

}  // namespace cseg

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "cseg/nn/blocks.hpp"
#include "support/gradcheck.hpp"

using namespace cseg;
using cseg::testing::gradient_check;
using cseg::testing::random_leaf;
using D = Tensor<double>;

namespace {

// Fill every parameter with small random values so gradients flow through
// all paths (weights scaled by fan-in, affine/bias terms perturbed around
// their defaults).
void randomize(ParamList<double>& params, Rng& rng) {
    for (auto& p : params) {
        const bool is_gamma = p.name.size() >= 5 && p.name.rfind("gamma") == p.name.size() - 5;
        for (auto& v : p.tensor.values()) {
            if (p.fan_in > 0)
                v = rng.normal() * std::sqrt(2.0 / static_cast<double>(p.fan_in));
            else if (is_gamma)
                v = rng.uniform(0.8, 1.2);
            else
                v = rng.uniform(-0.2, 0.2);
        }
    }
}

std::vector<D> tensors_of(const ParamList<double>& params) {
    std::vector<D> out;
    for (const auto& p : params) out.push_back(p.tensor);
    return out;
}

D weighted_sum(const D& t, const D& w) { return sum_all(hadamard(t, w)); }

}  // namespace

TEST_CASE("gn_groups: 8 when divisible, per-channel or single group otherwise") {
    REQUIRE(gn_groups(32) == 8);
    REQUIRE(gn_groups(16) == 8);
    REQUIRE(gn_groups(8) == 8);
    REQUIRE(gn_groups(4) == 4);
    REQUIRE(gn_groups(2) == 2);
    REQUIRE(gn_groups(1) == 1);
    REQUIRE(gn_groups(12) == 1);  // 12 % 8 != 0
    REQUIRE(gn_groups(3) == 3);
}

TEST_CASE("res_block: zero conv weights give the identity, at several shapes") {
    for (const Shape& s : {Shape{1, 2, 4, 4, 4}, Shape{2, 4, 2, 2, 2}, Shape{1, 8, 2, 4, 2}}) {
        ResBlockParams<double> p(s[1]);  // conv weights default to zero
        Rng r(5);
        D x = random_leaf(r, s, -2.0, 2.0, false);
        D y = res_block_forward(x, p);
        REQUIRE(y.shape() == x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
    }
}

TEST_CASE("res_block: shape preserved with random parameters") {
    ResBlockParams<double> p(4);
    ParamList<double> params;
    p.collect("rb", params);
    Rng r(31);
    randomize(params, r);
    D x = random_leaf(r, {1, 4, 8, 8, 8}, -1.0, 1.0, false);
    D y = res_block_forward(x, p);
    REQUIRE(y.shape() == Shape{1, 4, 8, 8, 8});

    D bad = random_leaf(r, {1, 3, 8, 8, 8}, -1.0, 1.0, false);
    REQUIRE_THROWS_AS(res_block_forward(bad, p), std::invalid_argument);
}

TEST_CASE("res_block: parameter inventory") {
    const std::size_t C = 4;
    ResBlockParams<double> p(C);
    ParamList<double> params;
    p.collect("rb", params);
    std::set<std::string> names;
    std::size_t total = 0;
    for (const auto& np : params) {
        names.insert(np.name);
        total += np.tensor.numel();
    }
    REQUIRE(names.size() == params.size());  // unique names
    // Two GN affine pairs (2C each) and two 3x3x3 convs (27*C*C + C each).
    REQUIRE(total == 2 * (2 * C) + 2 * (27 * C * C + C));
}

TEST_CASE("res_block: gradients match finite differences") {
    for (std::uint64_t seed : {3u, 4u, 9u}) {
        ResBlockParams<double> p(2);
        ParamList<double> params;
        p.collect("rb", params);
        Rng r(seed);
        randomize(params, r);
        D x = random_leaf(r, {1, 2, 4, 4, 4}, -1.0, 1.0);
        D h = random_leaf(r, {1, 2, 4, 4, 4}, -1.0, 1.0, false);
        std::vector<D> leaves = tensors_of(params);
        leaves.push_back(x);
        Rng pick = substream(seed, "pick");
        auto res = gradient_check([&] { return weighted_sum(res_block_forward(x, p), h); },
                                  leaves, pick);
        INFO(res.worst);
        REQUIRE(res.ok);
    }
}

TEST_CASE("downsample: halves extents, doubles channels, rejects odd extents") {
    DownsampleParams<double> p(4);
    ParamList<double> params;
    p.collect("ds", params);
    Rng r(7);
    randomize(params, r);
    D x = random_leaf(r, {1, 4, 8, 8, 8}, -1.0, 1.0, false);
    D y = downsample(x, p);
    REQUIRE(y.shape() == Shape{1, 8, 4, 4, 4});

    D odd = random_leaf(r, {1, 4, 7, 8, 8}, -1.0, 1.0, false);
    REQUIRE_THROWS_AS(downsample(odd, p), std::invalid_argument);

    // Full-resolution first-stage geometry, checked through the same shape
    // rule that sizes the runtime buffers.
    const auto out = conv_output_dims(ConvSpec::k3(32, 64, 2), {160, 192, 128});
    REQUIRE(out == std::array<std::size_t, 3>{80, 96, 64});
    REQUIRE(DownsampleParams<double>(32).conv.spec.out_channels == 64);
}

TEST_CASE("downsample: gradients match finite differences") {
    for (std::uint64_t seed : {1u, 2u, 8u}) {
        DownsampleParams<double> p(2);
        ParamList<double> params;
        p.collect("ds", params);
        Rng r(seed * 17);
        randomize(params, r);
        D x = random_leaf(r, {1, 2, 4, 4, 4}, -1.0, 1.0);
        D h = random_leaf(r, {1, 4, 2, 2, 2}, -1.0, 1.0, false);
        std::vector<D> leaves = tensors_of(params);
        leaves.push_back(x);
        Rng pick = substream(seed, "pick");
        auto res =
            gradient_check([&] { return weighted_sum(downsample(x, p), h); }, leaves, pick);
        INFO(res.worst);
        REQUIRE(res.ok);
    }
}

TEST_CASE("upsample_block: halves channels then doubles extents") {
    UpsampleBlockParams<double> p(8);
    ParamList<double> params;
    p.collect("up", params);
    Rng r(9);
    randomize(params, r);
    D x = random_leaf(r, {1, 8, 4, 4, 4}, -1.0, 1.0, false);
    D y = upsample_block(x, p);
    REQUIRE(y.shape() == Shape{1, 4, 8, 8, 8});

    REQUIRE_THROWS_AS(UpsampleBlockParams<double>(5), std::invalid_argument);

    // Bottom-of-decoder geometry at full scale.
    UpsampleBlockParams<double> pp(256);
    ParamList<double> pparams;
    pp.collect("up", pparams);
    Rng rr(10);
    randomize(pparams, rr);
    Tensor<float> xf(Shape{1, 256, 20, 24, 16}, 0.25f);
    UpsampleBlockParams<float> ppf(256);
    Tensor<float> yf = upsample_block(xf, ppf);
    REQUIRE(yf.shape() == Shape{1, 128, 40, 48, 32});
}

TEST_CASE("upsample_block: gradients match finite differences") {
    for (std::uint64_t seed : {5u, 6u, 12u}) {
        UpsampleBlockParams<double> p(4);
        ParamList<double> params;
        p.collect("up", params);
        Rng r(seed * 29);
        randomize(params, r);
        D x = random_leaf(r, {1, 4, 2, 3, 2}, -1.0, 1.0);
        D h = random_leaf(r, {1, 2, 4, 6, 4}, -1.0, 1.0, false);
        std::vector<D> leaves = tensors_of(params);
        leaves.push_back(x);
        Rng pick = substream(seed, "pick");
        auto res = gradient_check([&] { return weighted_sum(upsample_block(x, p), h); },
                                  leaves, pick);
        INFO(res.worst);
        REQUIRE(res.ok);
    }
}

TEST_CASE("attention_gate: zeroed query head gives alpha = 0.5 exactly") {
    AttentionGateParams<double> p(4);
    ParamList<double> params;
    p.collect("ag", params);
    Rng r(3);
    randomize(params, r);
    // Zero the final 1x1x1 conv and its bias: q = 0 -> sigmoid = 0.5.
    for (auto& v : p.wint.w.values()) v = 0.0;
    p.wint.b.values()[0] = 0.0;
    D x = random_leaf(r, {1, 4, 4, 4, 4}, -2.0, 2.0, false);
    D g = random_leaf(r, {1, 8, 2, 2, 2}, -2.0, 2.0, false);
    auto out = attention_gate(x, g, p);
    REQUIRE(out.alpha.shape() == Shape{1, 1, 4, 4, 4});
    REQUIRE(out.x_hat.shape() == x.shape());
    for (const double a : out.alpha.values()) REQUIRE(a == 0.5);
    for (std::size_t i = 0; i < x.numel(); ++i)
        REQUIRE(out.x_hat.data()[i] == 0.5 * x.data()[i]);
}

TEST_CASE("attention_gate: coefficients stay inside (0,1); saturating bias passes input") {
    AttentionGateParams<double> p(4);
    ParamList<double> params;
    p.collect("ag", params);
    Rng r(41);
    randomize(params, r);
    D x = random_leaf(r, {2, 4, 4, 4, 4}, -2.0, 2.0, false);
    D g = random_leaf(r, {2, 8, 2, 2, 2}, -2.0, 2.0, false);
    auto out = attention_gate(x, g, p);
    for (const double a : out.alpha.values()) {
        REQUIRE(a > 0.0);
        REQUIRE(a < 1.0);
    }

    p.wint.b.values()[0] = 50.0;  // saturate the gate open
    auto sat = attention_gate(x, g, p);
    for (std::size_t i = 0; i < x.numel(); ++i)
        REQUIRE_THAT(sat.x_hat.data()[i], Catch::Matchers::WithinAbs(x.data()[i], 1e-6));
}

TEST_CASE("attention_gate: wiring and preconditions") {
    AttentionGateParams<double> p(4);
    REQUIRE(p.inter_channels == 2);
    REQUIRE_FALSE(p.wx.b.valid());  // the fine-feature path carries no bias
    REQUIRE(p.wg.b.valid());
    REQUIRE(p.wx.spec.stride == std::array<std::size_t, 3>{2, 2, 2});

    ParamList<double> params;
    p.collect("ag", params);
    std::set<std::string> names;
    for (const auto& np : params) names.insert(np.name);
    REQUIRE(names.size() == params.size());
    // wx: 2*4 weights; wg: 2*8 + bias(2); wint: 2 + bias(1).
    std::size_t total = 0;
    for (const auto& np : params) total += np.tensor.numel();
    REQUIRE(total == 8 + (16 + 2) + (2 + 1));

    Rng r(2);
    D x = random_leaf(r, {1, 4, 4, 4, 4}, -1.0, 1.0, false);
    D gbad_ch = random_leaf(r, {1, 4, 2, 2, 2}, -1.0, 1.0, false);
    REQUIRE_THROWS_AS(attention_gate(x, gbad_ch, p), std::invalid_argument);
    D gbad_sp = random_leaf(r, {1, 8, 4, 4, 4}, -1.0, 1.0, false);
    REQUIRE_THROWS_AS(attention_gate(x, gbad_sp, p), std::invalid_argument);
    REQUIRE_THROWS_AS(AttentionGateParams<double>(1), std::invalid_argument);
}

TEST_CASE("attention_gate: gradients through x_l, g and every gate parameter") {
    for (std::uint64_t seed : {2u, 5u, 11u}) {
        AttentionGateParams<double> p(4);
        ParamList<double> params;
        p.collect("ag", params);
        Rng r(seed * 13);
        randomize(params, r);
        D x = random_leaf(r, {1, 4, 4, 4, 4}, -1.0, 1.0);
        D g = random_leaf(r, {1, 8, 2, 2, 2}, -1.0, 1.0);
        D h = random_leaf(r, {1, 4, 4, 4, 4}, -1.0, 1.0, false);
        std::vector<D> leaves = tensors_of(params);
        leaves.push_back(x);
        leaves.push_back(g);
        Rng pick = substream(seed, "pick");
        auto res = gradient_check(
            [&] { return weighted_sum(attention_gate(x, g, p).x_hat, h); }, leaves, pick);
        INFO(res.worst);
        REQUIRE(res.ok);
    }
}

TEST_CASE("vae_head: zero parameters give mu = 0 and sigma = 1 exactly") {
    VaeHeadParams<double> p(4, {2, 2, 2}, 3, 2, 2);
    D endpoint(Shape{1, 4, 2, 2, 2}, 0.7);
    Rng r(1);
    auto out = vae_head(endpoint, p, r, false);
    for (const double m : out.mu.values()) REQUIRE(m == 0.0);
    for (const double s : out.sigma.values()) REQUIRE(s == 1.0);  // exp(0)
    for (const double lv : out.logvar.values()) REQUIRE(lv == 0.0);
}

TEST_CASE("vae_head: without sampling the code is mu, independent of sigma") {
    VaeHeadParams<double> p(4, {2, 2, 2}, 3, 2, 2);
    ParamList<double> params;
    p.collect("vae", params);
    Rng r(15);
    randomize(params, r);
    // Zero the latent projection weights so mu comes purely from the bias,
    // which we pin to zero; leave the log-variance biases in place.
    for (auto& v : p.fc_latent_w.values()) v = 0.0;
    for (std::size_t i = 0; i < 3; ++i) p.fc_latent_b.values()[i] = 0.0;
    for (std::size_t i = 3; i < 6; ++i) p.fc_latent_b.values()[i] = 1.3;

    D endpoint = random_leaf(r, {1, 4, 2, 2, 2}, -1.0, 1.0, false);
    Rng s1(9);
    auto out1 = vae_head(endpoint, p, s1, false);
    for (const double zv : out1.z.values()) REQUIRE(zv == 0.0);

    // Changing sigma must not change the deterministic reconstruction.
    for (std::size_t i = 3; i < 6; ++i) p.fc_latent_b.values()[i] = -0.7;
    Rng s2(1234);
    auto out2 = vae_head(endpoint, p, s2, false);
    REQUIRE(out1.recon.numel() == out2.recon.numel());
    for (std::size_t i = 0; i < out1.recon.numel(); ++i)
        REQUIRE(out1.recon.data()[i] == out2.recon.data()[i]);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(out2.sigma.data()[i] != out1.sigma.data()[i]);
}

TEST_CASE("vae_head: sampling is seed-deterministic and matches sigma^2 in variance") {
    VaeHeadParams<double> p(2, {2, 2, 2}, 2, 1, 1);
    // Zero weights: mu = 0; set sigma = (1, 2) through the log-variance bias.
    p.fc_latent_b.values()[2] = 0.0;
    p.fc_latent_b.values()[3] = std::log(4.0);
    D endpoint(Shape{1, 2, 2, 2, 2}, 0.3);

    Rng ra(77), rb(77), rc(78);
    auto oa = vae_head(endpoint, p, ra, true);
    auto ob = vae_head(endpoint, p, rb, true);
    auto oc = vae_head(endpoint, p, rc, true);
    for (std::size_t i = 0; i < oa.z.numel(); ++i) REQUIRE(oa.z.data()[i] == ob.z.data()[i]);
    bool any_diff = false;
    for (std::size_t i = 0; i < oa.z.numel(); ++i)
        any_diff = any_diff || oa.z.data()[i] != oc.z.data()[i];
    REQUIRE(any_diff);

    const int n = 10000;
    Rng stream(4242);
    double s0 = 0, q0 = 0, s1 = 0, q1 = 0;
    for (int i = 0; i < n; ++i) {
        auto o = vae_head(endpoint, p, stream, true);
        const double z0 = o.z.data()[0], z1 = o.z.data()[1];
        s0 += z0;
        q0 += z0 * z0;
        s1 += z1;
        q1 += z1 * z1;
    }
    const double var0 = q0 / n - (s0 / n) * (s0 / n);
    const double var1 = q1 / n - (s1 / n) * (s1 / n);
    REQUIRE(std::fabs(var0 - 1.0) < 0.05);  // sigma^2 = 1 within 5%
    REQUIRE(std::fabs(var1 - 4.0) < 0.20);  // sigma^2 = 4 within 5%
}

TEST_CASE("vae_head: reconstruction shape mirrors the decoder at small scale") {
    VaeHeadParams<double> p(32, {2, 2, 2}, 8, 4, 4);
    ParamList<double> params;
    p.collect("vae", params);
    Rng r(21);
    randomize(params, r);
    D endpoint = random_leaf(r, {1, 32, 2, 2, 2}, -1.0, 1.0, false);
    Rng s(3);
    auto out = vae_head(endpoint, p, s, true);
    REQUIRE(out.recon.shape() == Shape{1, 4, 16, 16, 16});
    REQUIRE(out.mu.shape() == Shape{1, 8});
    REQUIRE(out.sigma.shape() == Shape{1, 8});
    for (const double sv : out.sigma.values()) REQUIRE(sv > 0.0);
}

TEST_CASE("vae_head: configuration errors") {
    D endpoint(Shape{1, 4, 2, 2, 2}, 0.0);
    VaeHeadParams<double> p(4, {2, 2, 2}, 3, 2, 2);
    D wrong(Shape{1, 4, 4, 2, 2}, 0.0);
    Rng r(1);
    REQUIRE_THROWS_AS(vae_head(wrong, p, r, false), std::invalid_argument);
    REQUIRE_THROWS_AS(VaeHeadParams<double>(4, {3, 2, 2}, 3, 2, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(VaeHeadParams<double>(4, {2, 2, 2}, 3, 4, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(VaeHeadParams<double>(4, {2, 2, 2}, 0, 2, 2), std::invalid_argument);
}

TEST_CASE("vae_head: gradients (including the reparameterized sample path)") {
    for (std::uint64_t seed : {4u, 10u}) {
        VaeHeadParams<double> p(4, {2, 2, 2}, 3, 2, 2);
        ParamList<double> params;
        p.collect("vae", params);
        Rng r(seed * 37);
        randomize(params, r);
        D endpoint = random_leaf(r, {1, 4, 2, 2, 2}, -1.0, 1.0);
        D h = random_leaf(r, {1, 2, 4, 4, 4}, -1.0, 1.0, false);
        D hm = random_leaf(r, {1, 3}, 0.5, 1.0, false);
        std::vector<D> leaves = tensors_of(params);
        leaves.push_back(endpoint);
        Rng pick = substream(seed, "pick");
        auto res = gradient_check(
            [&] {
                Rng noise(900 + seed);  // identical draws on every evaluation
                auto out = vae_head(endpoint, p, noise, true);
                D loss = weighted_sum(out.recon, h);
                loss = add(loss, weighted_sum(out.sigma, hm));
                return add(loss, weighted_sum(out.mu, hm));
            },
            leaves, pick);
        INFO(res.worst);
        REQUIRE(res.ok);
    }
}

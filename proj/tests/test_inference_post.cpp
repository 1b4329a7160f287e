#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cseg/data/phantom.hpp"
#include "cseg/infer/cascade.hpp"

using namespace cseg;

namespace {

NetworkConfig stage1_cfg() {
    NetworkConfig cfg;
    cfg.in_channels = 4;
    cfg.out_channels = 3;
    cfg.base_filters = 2;
    cfg.levels = 2;
    cfg.blocks_per_level = {1, 1};
    cfg.latent_dim = 4;
    cfg.input_dims = {16, 16, 16};
    cfg.dropout_rate = 0.0;
    return cfg;
}

NetworkConfig stage2_cfg(Dims3 dims = {8, 8, 8}) {
    NetworkConfig cfg = stage1_cfg();
    cfg.in_channels = 7;
    cfg.use_attention_gates = true;
    cfg.input_dims = dims;
    return cfg;
}

template <typename Net>
void bump_head(Net& net, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : net.params)
        if (p.name.rfind("head", 0) == 0 || p.name.find("wint") != std::string::npos)
            for (auto& v : p.tensor.values()) v += float(rng.uniform(-0.3, 0.3));
}

std::vector<Network<float>> make_stage1(std::size_t count) {
    std::vector<Network<float>> nets;
    for (std::size_t i = 0; i < count; ++i) {
        nets.push_back(build_stage1<float>(stage1_cfg()));
        initialize_parameters(nets.back(), 10 + i);
        bump_head(nets.back(), 50 + i);
    }
    return nets;
}

std::vector<Network<float>> make_stage2(std::size_t count, Dims3 dims = {8, 8, 8}) {
    std::vector<Network<float>> nets;
    for (std::size_t i = 0; i < count; ++i) {
        nets.push_back(build_stage2<float>(stage2_cfg(dims)));
        initialize_parameters(nets.back(), 20 + i);
        bump_head(nets.back(), 70 + i);
    }
    return nets;
}

Volume phantom_image(std::uint64_t seed, Dims3 dims = {16, 16, 16}) {
    TumorSpec spec;
    spec.center = {double(dims[0]) / 2.0, double(dims[1]) / 2.0, double(dims[2]) / 2.0};
    spec.wt_radius = 0.28 * double(dims[0]);
    spec.tc_radius = 0.18 * double(dims[0]);
    spec.et_radius = 0.10 * double(dims[0]);
    return generate_phantom(seed, dims, spec).image;
}

Volume random_input(Rng& rng, std::size_t channels, Dims3 dims) {
    Volume v(channels, dims);
    for (auto& x : v.data) x = float(rng.uniform(-1.5, 1.5));
    return v;
}

struct TempDir {
    std::string path;
    explicit TempDir(const std::string& name) : path("/tmp/cseg_infer_" + name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

/// A hand-built prediction whose probabilities decode to its label map.
CasePrediction synthetic_prediction(const LabelMap& labels) {
    CasePrediction p;
    p.label_map = labels;
    p.probabilities = Volume(3, labels.dims);
    const std::size_t n = labels.voxels();
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t v = labels.data[i];
        p.probabilities.data[i] = v != 0 ? 0.9f : 0.1f;
        p.probabilities.data[n + i] = v == 1 || v == 4 ? 0.9f : 0.1f;
        p.probabilities.data[2 * n + i] = v == 4 ? 0.9f : 0.1f;
    }
    p.stage = "stage1";
    p.stage1_model = 0;
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cascade orchestration.
// ---------------------------------------------------------------------------

TEST_CASE("one first-stage and five second-stage models yield five predictions") {
    const auto s1 = make_stage1(1);
    const auto s2 = make_stage2(5);
    const Volume image = phantom_image(1);

    const auto preds = run_cascade(s1, s2, image);

    REQUIRE(preds.size() == 5);
    for (std::size_t k = 0; k < preds.size(); ++k) {
        const auto& p = preds[k];
        CHECK(p.stage == "stage2");
        CHECK(p.stage1_model == 0);
        CHECK(p.stage2_model == int(k));
        CHECK(p.label_map.dims == image.dims);
        CHECK(p.probabilities.channels == 3);
        CHECK(p.probabilities.dims == image.dims);
        p.label_map.validate();  // labels confined to {0,1,2,4}
        CHECK(encode_labels(p.label_map).nested());
        // The stored probabilities decode back to the stored labels.
        const LabelMap decoded = decode_regions(p.probabilities, 0.5f);
        CHECK(decoded.data == p.label_map.data);
    }
}

TEST_CASE("three by five model grids yield fifteen predictions covering every pair") {
    const auto s1 = make_stage1(3);
    const auto s2 = make_stage2(5);
    const Volume image = phantom_image(2);

    const auto preds = run_cascade(s1, s2, image);

    REQUIRE(preds.size() == 15);
    std::set<std::pair<int, int>> pairs;
    for (const auto& p : preds) pairs.insert({p.stage1_model, p.stage2_model});
    CHECK(pairs.size() == 15);
}

TEST_CASE("an empty second-stage list returns the first-stage predictions alone") {
    const auto s1 = make_stage1(2);
    const Volume image = phantom_image(3);

    const auto preds = run_cascade(s1, {}, image);

    REQUIRE(preds.size() == 2);
    for (std::size_t k = 0; k < preds.size(); ++k) {
        CHECK(preds[k].stage == "stage1");
        CHECK(preds[k].stage1_model == int(k));
        CHECK(preds[k].stage2_model == -1);
        const LabelMap decoded = decode_regions(preds[k].probabilities, 0.5f);
        CHECK(decoded.data == preds[k].label_map.data);
    }
}

TEST_CASE("cascade output is deterministic for fixed models and input") {
    const auto s1 = make_stage1(1);
    const auto s2 = make_stage2(2);
    const Volume image = phantom_image(4);

    const auto a = run_cascade(s1, s2, image);
    const auto b = run_cascade(s1, s2, image);

    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].label_map.data == b[k].label_map.data);
        CHECK(a[k].probabilities.data == b[k].probabilities.data);
    }
}

TEST_CASE("outside the refinement window the first-stage prediction survives") {
    const auto s1 = make_stage1(1);
    const auto s2 = make_stage2(1);
    const Volume image = phantom_image(5);

    const auto base = run_cascade(s1, {}, image);     // pure first stage
    const auto refined = run_cascade(s1, s2, image);  // second stage pasted in
    REQUIRE(base.size() == 1);
    REQUIRE(refined.size() == 1);

    // Recover the refinement window exactly as the cascade found it.
    const Volume& probs1 = base.front().probabilities;
    std::vector<std::uint8_t> wt(probs1.voxels());
    for (std::size_t i = 0; i < wt.size(); ++i) wt[i] = probs1.data[i] >= 0.5f;
    const CropWindow win = tumor_centered_window(wt, image.dims, {8, 8, 8}, &image);

    auto inside = [&](std::size_t d, std::size_t h, std::size_t w) {
        return d >= win.offset[0] && d < win.offset[0] + win.dims[0] && h >= win.offset[1] &&
               h < win.offset[1] + win.dims[1] && w >= win.offset[2] &&
               w < win.offset[2] + win.dims[2];
    };

    const std::size_t n = image.voxels();
    bool changed_inside = false;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t d = 0; d < 16; ++d)
            for (std::size_t h = 0; h < 16; ++h)
                for (std::size_t w = 0; w < 16; ++w) {
                    const std::size_t i = c * n + (d * 16 + h) * 16 + w;
                    if (inside(d, h, w)) {
                        changed_inside |= refined.front().probabilities.data[i] !=
                                          base.front().probabilities.data[i];
                    } else {
                        REQUIRE(refined.front().probabilities.data[i] ==
                                base.front().probabilities.data[i]);
                    }
                }
    CHECK(changed_inside);  // the window really was re-segmented
}

TEST_CASE("a case smaller or larger than the model still comes back at full extents") {
    const auto s1 = make_stage1(1);

    SECTION("smaller case is padded onto the model's canvas") {
        const Volume small = crop(phantom_image(6), CropWindow{{2, 2, 2}, {12, 12, 12}});
        const auto preds = run_cascade(s1, {}, small);
        REQUIRE(preds.size() == 1);
        CHECK(preds.front().label_map.dims == Dims3{12, 12, 12});
        CHECK(preds.front().probabilities.dims == Dims3{12, 12, 12});
        const auto again = run_cascade(s1, {}, small);
        CHECK(preds.front().probabilities.data == again.front().probabilities.data);
    }
    SECTION("larger case keeps a zero-probability margin outside the visible window") {
        const Volume big = phantom_image(7, {20, 20, 20});
        const auto preds = run_cascade(s1, {}, big);
        REQUIRE(preds.size() == 1);
        CHECK(preds.front().label_map.dims == Dims3{20, 20, 20});
        // The corner lies outside any centered 16-voxel window.
        CHECK(preds.front().probabilities.at(0, 0, 0, 0) == 0.0f);
        CHECK(preds.front().probabilities.at(2, 19, 19, 19) == 0.0f);
        CHECK(preds.front().label_map.at(0, 0, 0) == 0);
        const LabelMap decoded = decode_regions(preds.front().probabilities, 0.5f);
        CHECK(decoded.data == preds.front().label_map.data);
    }
}

TEST_CASE("the cascade rejects inconsistent model and image shapes") {
    const auto s1 = make_stage1(1);
    const Volume image = phantom_image(8);

    CHECK_THROWS_WITH(run_cascade(std::vector<Network<float>>{}, {}, image),
                      Catch::Matchers::ContainsSubstring("first-stage"));

    Rng noise(9);
    Volume three_ch = random_input(noise, 3, {16, 16, 16});
    CHECK_THROWS_WITH(run_cascade(s1, {}, three_ch),
                      Catch::Matchers::ContainsSubstring("channels"));

    // A gated model that expects six channels cannot consume the 3+4 stack.
    NetworkConfig bad = stage2_cfg();
    bad.in_channels = 6;
    std::vector<Network<float>> s2{build_network<float>(bad)};
    initialize_parameters(s2.front(), 1);
    CHECK_THROWS_WITH(run_cascade(s1, s2, image),
                      Catch::Matchers::ContainsSubstring("second-stage"));

    // A refinement window bigger than the case cannot be centered anywhere.
    std::vector<Network<float>> wide{build_stage2<float>(stage2_cfg({32, 32, 32}))};
    initialize_parameters(wide.front(), 2);
    CHECK_THROWS(run_cascade(s1, wide, image));
}

// ---------------------------------------------------------------------------
// Enhancing-tumor postprocessing.
// ---------------------------------------------------------------------------

TEST_CASE("sparse enhancing predictions are demoted to the non-enhancing core") {
    LabelMap labels({8, 8, 8});
    for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = i < 499 ? 4 : 1;
    const CasePrediction pred = synthetic_prediction(labels);

    const CasePrediction post = postprocess_et(pred);  // default threshold 500

    std::size_t fours = 0, ones = 0;
    for (const std::uint8_t v : post.label_map.data) {
        fours += v == 4;
        ones += v == 1;
    }
    CHECK(fours == 0);
    CHECK(ones == 512);
    // Region memberships above the enhancing level are untouched.
    const RegionMasks before = encode_labels(pred.label_map);
    const RegionMasks after = encode_labels(post.label_map);
    CHECK(before.wt == after.wt);
    CHECK(before.tc == after.tc);
    // The adjusted probabilities still decode to the adjusted labels.
    CHECK(decode_regions(post.probabilities, 0.5f).data == post.label_map.data);
}

TEST_CASE("the demotion threshold is exclusive at exactly the minimum count") {
    LabelMap labels({8, 8, 8});
    for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = i < 500 ? 4 : 1;
    const CasePrediction pred = synthetic_prediction(labels);

    const CasePrediction post = postprocess_et(pred);
    CHECK(post.label_map.data == pred.label_map.data);
    CHECK(post.probabilities.data == pred.probabilities.data);
}

TEST_CASE("postprocessing is vacuous without enhancing voxels and is idempotent") {
    LabelMap labels({4, 4, 4});
    for (std::size_t i = 0; i < labels.data.size(); ++i)
        labels.data[i] = i % 3 == 0 ? 2 : (i % 3 == 1 ? 1 : 0);
    const CasePrediction pred = synthetic_prediction(labels);

    const CasePrediction post = postprocess_et(pred);
    CHECK(post.label_map.data == pred.label_map.data);
    CHECK(post.probabilities.data == pred.probabilities.data);

    // Idempotence on a prediction that does get demoted.
    LabelMap few({4, 4, 4});
    few.data[0] = few.data[1] = 4;
    few.data[2] = 1;
    const CasePrediction once = postprocess_et(synthetic_prediction(few), 5);
    const CasePrediction twice = postprocess_et(once, 5);
    CHECK(once.label_map.data == twice.label_map.data);
    CHECK(once.probabilities.data == twice.probabilities.data);
}

TEST_CASE("the minimum enhancing count scales for small volumes") {
    LabelMap labels({4, 4, 4});
    for (std::size_t i = 0; i < 4; ++i) labels.data[i] = 4;
    for (std::size_t i = 4; i < 10; ++i) labels.data[i] = 1;

    const CasePrediction kept = postprocess_et(synthetic_prediction(labels), 4);
    std::size_t fours = 0;
    for (const std::uint8_t v : kept.label_map.data) fours += v == 4;
    CHECK(fours == 4);  // 4 >= 4: untouched

    const CasePrediction demoted = postprocess_et(synthetic_prediction(labels), 5);
    fours = 0;
    for (const std::uint8_t v : demoted.label_map.data) fours += v == 4;
    CHECK(fours == 0);  // 4 < 5: rewritten
}

// ---------------------------------------------------------------------------
// Ensembling.
// ---------------------------------------------------------------------------

namespace {

/// Draw per-voxel probabilities that decode to the requested label.
void set_consistent_probs(CasePrediction& p, std::size_t i, std::uint8_t label, Rng& rng) {
    const std::size_t n = p.label_map.voxels();
    auto lo = [&] { return float(rng.uniform(0.02, 0.48)); };
    auto hi = [&] { return float(rng.uniform(0.52, 0.98)); };
    p.label_map.data[i] = label;
    p.probabilities.data[i] = label != 0 ? hi() : lo();
    p.probabilities.data[n + i] = label == 1 || label == 4 ? hi() : lo();
    p.probabilities.data[2 * n + i] = label == 4 ? hi() : lo();
}

/// Independent voxel-level reimplementation of the voting rule.
std::uint8_t oracle_vote(const std::vector<CasePrediction>& preds, std::size_t i) {
    const std::uint8_t labels[4] = {0, 1, 2, 4};
    const std::size_t n = preds.front().label_map.voxels();
    std::array<int, 4> votes{};
    for (const auto& p : preds) {
        const std::uint8_t v = p.label_map.data[i];
        ++votes[v == 4 ? 3 : v];
    }
    const int top = *std::max_element(votes.begin(), votes.end());
    std::vector<std::size_t> tied;
    for (std::size_t c = 0; c < 4; ++c)
        if (votes[c] == top) tied.push_back(c);
    if (tied.size() == 1) return labels[tied.front()];

    double wt = 0, tc = 0, et = 0;
    for (const auto& p : preds) {
        wt += p.probabilities.data[i];
        tc += p.probabilities.data[n + i];
        et += p.probabilities.data[2 * n + i];
    }
    wt /= double(preds.size());
    tc /= double(preds.size());
    et /= double(preds.size());
    const double cat[4] = {std::max(1.0 - wt, 0.0), std::max(tc - et, 0.0),
                           std::max(wt - tc, 0.0), std::max(et, 0.0)};
    std::size_t best = tied.front();
    for (const std::size_t c : tied)
        if (cat[c] > cat[best]) best = c;
    return labels[best];
}

}  // namespace

TEST_CASE("a single prediction votes for itself and copies survive any multiplicity") {
    Rng rng(31);
    CasePrediction p;
    p.label_map = LabelMap({4, 4, 4});
    p.probabilities = Volume(3, {4, 4, 4});
    const std::uint8_t labels[4] = {0, 1, 2, 4};
    for (std::size_t i = 0; i < p.label_map.voxels(); ++i)
        set_consistent_probs(p, i, labels[rng.uniform_index(4)], rng);

    CHECK(majority_vote({p}).data == p.label_map.data);
    for (std::size_t k : {2, 3, 5}) {
        std::vector<CasePrediction> copies(k, p);
        CHECK(majority_vote(copies).data == p.label_map.data);
    }
}

TEST_CASE("a strict majority wins regardless of probabilities") {
    Rng rng(37);
    std::vector<CasePrediction> preds(3);
    for (auto& p : preds) {
        p.label_map = LabelMap({1, 1, 1});
        p.probabilities = Volume(3, {1, 1, 1});
    }
    set_consistent_probs(preds[0], 0, 4, rng);
    set_consistent_probs(preds[1], 0, 4, rng);
    set_consistent_probs(preds[2], 0, 2, rng);

    CHECK(majority_vote(preds).data[0] == 4);
}

TEST_CASE("a two-way tie follows the higher reconstructed category probability") {
    // One vote for edema, one for enhancing tumor; the averaged channels
    // strongly favor the enhancing interpretation.
    std::vector<CasePrediction> preds(2);
    for (auto& p : preds) {
        p.label_map = LabelMap({1, 1, 1});
        p.probabilities = Volume(3, {1, 1, 1});
    }
    preds[0].label_map.data[0] = 2;
    preds[0].probabilities.data = {0.90f, 0.20f, 0.10f};  // wt, tc, et
    preds[1].label_map.data[0] = 4;
    preds[1].probabilities.data = {0.95f, 0.90f, 0.85f};

    CHECK(majority_vote(preds).data[0] == 4);

    // Flipping the balance flips the outcome.
    preds[1].probabilities.data = {0.95f, 0.52f, 0.52f};
    // avg: wt 0.925, tc 0.36, et 0.31 -> edema 0.565 beats enhancing 0.31.
    CHECK(majority_vote(preds).data[0] == 2);
}

TEST_CASE("voting matches an exhaustive per-voxel oracle for up to three models") {
    Rng rng(41);
    const std::uint8_t labels[4] = {0, 1, 2, 4};

    for (std::size_t models = 1; models <= 3; ++models) {
        // One voxel per vote pattern: voxel i assigns model m the label at
        // digit m of i written in base 4.
        std::size_t patterns = 1;
        for (std::size_t m = 0; m < models; ++m) patterns *= 4;
        const Dims3 dims{patterns, 1, 1};

        std::vector<CasePrediction> preds(models);
        for (auto& p : preds) {
            p.label_map = LabelMap(dims);
            p.probabilities = Volume(3, dims);
        }
        for (std::size_t i = 0; i < patterns; ++i) {
            std::size_t code = i;
            for (std::size_t m = 0; m < models; ++m) {
                set_consistent_probs(preds[m], i, labels[code % 4], rng);
                code /= 4;
            }
        }

        const LabelMap voted = majority_vote(preds);
        for (std::size_t i = 0; i < patterns; ++i) {
            INFO("models " << models << " pattern " << i);
            REQUIRE(voted.data[i] == oracle_vote(preds, i));
        }
    }
}

TEST_CASE("voting is invariant under permutations of the prediction list") {
    Rng rng(43);
    const std::uint8_t labels[4] = {0, 1, 2, 4};
    std::vector<CasePrediction> preds(4);
    for (auto& p : preds) {
        p.label_map = LabelMap({3, 3, 3});
        p.probabilities = Volume(3, {3, 3, 3});
        for (std::size_t i = 0; i < p.label_map.voxels(); ++i)
            set_consistent_probs(p, i, labels[rng.uniform_index(4)], rng);
    }
    const LabelMap base = majority_vote(preds);

    std::vector<std::size_t> order{0, 1, 2, 3};
    for (int trial = 0; trial < 10; ++trial) {
        rng.shuffle(order.begin(), order.end());
        std::vector<CasePrediction> shuffled;
        for (const std::size_t k : order) shuffled.push_back(preds[k]);
        CHECK(majority_vote(shuffled).data == base.data);
    }
}

TEST_CASE("voting rejects empty and inconsistent inputs") {
    CHECK_THROWS_WITH(majority_vote({}), Catch::Matchers::ContainsSubstring("no predictions"));

    Rng rng(47);
    CasePrediction a, b;
    a.label_map = LabelMap({2, 2, 2});
    a.probabilities = Volume(3, {2, 2, 2});
    b.label_map = LabelMap({2, 2, 3});
    b.probabilities = Volume(3, {2, 2, 3});
    set_consistent_probs(a, 0, 2, rng);
    set_consistent_probs(b, 0, 2, rng);
    CHECK_THROWS_WITH(majority_vote({a, b}),
                      Catch::Matchers::ContainsSubstring("extents differ"));

    CasePrediction c = a;
    c.probabilities = Volume(1, {2, 2, 2});
    CHECK_THROWS_WITH(majority_vote({c}), Catch::Matchers::ContainsSubstring("3 channels"));
}

TEST_CASE("reconstructed category probabilities form a distribution") {
    Rng rng(53);
    for (int trial = 0; trial < 100; ++trial) {
        const double wt = rng.uniform(0.0, 1.0);
        const double tc = rng.uniform(0.0, 1.0);
        const double et = rng.uniform(0.0, 1.0);
        const auto p = category_probabilities(wt, tc, et);
        double sum = 0;
        for (const double x : p) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    }
    // Nested channels decompose exactly.
    const auto p = category_probabilities(0.8, 0.5, 0.2);
    CHECK(p[0] == Catch::Approx(0.2).margin(1e-12));  // background
    CHECK(p[1] == Catch::Approx(0.3).margin(1e-12));  // non-enhancing core
    CHECK(p[2] == Catch::Approx(0.3).margin(1e-12));  // edema
    CHECK(p[3] == Catch::Approx(0.2).margin(1e-12));  // enhancing
}

// ---------------------------------------------------------------------------
// Attention export.
// ---------------------------------------------------------------------------

namespace {

NetworkConfig gated4_cfg() {
    NetworkConfig cfg;
    cfg.in_channels = 7;
    cfg.out_channels = 3;
    cfg.base_filters = 2;
    cfg.levels = 4;
    cfg.blocks_per_level = {1, 1, 1, 1};
    cfg.latent_dim = 4;
    cfg.input_dims = {16, 16, 16};
    cfg.dropout_rate = 0.0;
    cfg.use_attention_gates = true;
    return cfg;
}

}  // namespace

TEST_CASE("attention export writes one volume and one preview per gate") {
    TempDir dir("attn");
    auto net = build_stage2<float>(gated4_cfg());
    initialize_parameters(net, 61);
    bump_head(net, 62);
    Rng rng(63);
    const Volume input = random_input(rng, 7, {16, 16, 16});

    const AttentionExport files = export_attention_maps(net, input, dir.path, "case0");

    REQUIRE(files.volume_paths.size() == 3);  // one per decoder level
    REQUIRE(files.slice_paths.size() == 3);

    const Dims3 expect_dims[3] = {{4, 4, 4}, {8, 8, 8}, {16, 16, 16}};
    for (std::size_t k = 0; k < 3; ++k) {
        const Volume alpha = load_volume(files.volume_paths[k]);
        CHECK(alpha.channels == 1);
        CHECK(alpha.dims == expect_dims[k]);  // coarsest first, finest last
        for (const float a : alpha.data) {
            REQUIRE(a > 0.0f);
            REQUIRE(a < 1.0f);
        }
        // Each level spans the same physical extent.
        CHECK(alpha.spacing[0] == float(16.0 / double(expect_dims[k][0])));
    }

    // The finest map matches the input resolution exactly.
    CHECK(load_volume(files.volume_paths[2]).dims == input.dims);

    // The preview is a valid binary PGM of the mid slice.
    std::ifstream pgm(files.slice_paths[2], std::ios::binary);
    REQUIRE(pgm.good());
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    pgm >> magic >> w >> h >> maxval;
    CHECK(magic == "P5");
    CHECK(w == 16);
    CHECK(h == 16);
    CHECK(maxval == 255);
    pgm.get();  // single whitespace after the header
    std::vector<char> pixels(w * h);
    pgm.read(pixels.data(), std::streamsize(pixels.size()));
    CHECK(pgm.gcount() == std::streamsize(w * h));
}

TEST_CASE("attention export refuses ungated models and mismatched inputs") {
    TempDir dir("attn_bad");
    auto plain = build_stage1<float>(stage1_cfg());
    initialize_parameters(plain, 71);
    Rng rng(72);
    CHECK_THROWS_WITH(
        export_attention_maps(plain, random_input(rng, 4, {16, 16, 16}), dir.path),
        Catch::Matchers::ContainsSubstring("no attention gates"));

    auto gated = build_stage2<float>(gated4_cfg());
    initialize_parameters(gated, 73);
    CHECK_THROWS_WITH(
        export_attention_maps(gated, random_input(rng, 4, {16, 16, 16}), dir.path),
        Catch::Matchers::ContainsSubstring("configured for"));
    CHECK_THROWS_WITH(
        export_attention_maps(gated, random_input(rng, 7, {8, 8, 8}), dir.path),
        Catch::Matchers::ContainsSubstring("configured for"));
}

// ---------------------------------------------------------------------------
// Prediction records.
// ---------------------------------------------------------------------------

TEST_CASE("prediction records serialize the case, models, and path on one line") {
    CasePrediction p;
    p.stage = "stage2";
    p.stage1_model = 1;
    p.stage2_model = 3;
    const std::string line = prediction_record("case-7", p, "out/case-7_s1-1_s2-3.cseg");

    CHECK(line.find('\n') == std::string::npos);
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("case") == "case-7");
    CHECK(j.at("stage") == "stage2");
    CHECK(j.at("stage1_model") == 1);
    CHECK(j.at("stage2_model") == 3);
    CHECK(j.at("path") == "out/case-7_s1-1_s2-3.cseg");
}

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cseg/data/phantom.hpp"
#include "cseg/eval/metrics.hpp"
#include "cseg/infer/cascade.hpp"

// Command implementations behind the `cseg` executable. Each cmd_* function
// performs one subcommand end to end: it validates its configuration struct,
// does the work, writes its artifacts plus a fully resolved run_config.ini
// echo into the output directory, and throws std::runtime_error with an
// actionable message on any failure. The executable is a thin flag-parsing
// shell around these functions, which keeps every behavior exercisable
// in-process by the test suite.

namespace cseg::cli {

inline constexpr int kSchemaVersion = 1;

/// Running a model whose input exceeds this many voxels per forward pass is
/// refused unless the caller explicitly accepts the memory cost; the
/// full-scale preset needs multiple gigabytes of activations.
inline constexpr std::size_t kLargeRunVoxels = std::size_t(1) << 18;

// ---------------------------------------------------------------------------
// Formatting and parsing helpers.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string fmt_dims(const Dims3& d) {
    return std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]);
}

inline std::string fmt_spacing(const std::array<float, 3>& s) {
    return fmt_double(s[0]) + "," + fmt_double(s[1]) + "," + fmt_double(s[2]);
}

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

/// Quote an echo value that forms a single flag argument but contains
/// commas (extents, spacings), so the echoed file can be fed back through
/// --config without being split into list items.
inline std::string quoted(const std::string& s) { return "\"" + s + "\""; }

inline std::string pad3(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%03zu", i);
    return buf;
}

inline std::string shape4_str(const std::array<std::size_t, 4>& s) {
    return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
           "x" + std::to_string(s[3]);
}

}  // namespace detail

/// Parse "D,H,W" into extents; used for flags like --dims.
inline Dims3 parse_dims(const std::string& s) {
    const auto parts = detail::split_commas(s);
    check(parts.size() == 3, "expected three comma-separated extents, got '" + s + "'");
    Dims3 d{};
    for (int a = 0; a < 3; ++a) {
        try {
            d[a] = std::stoull(parts[a]);
        } catch (const std::exception&) {
            throw std::runtime_error("invalid extent '" + parts[a] + "' in '" + s + "'");
        }
        check(d[a] > 0, "extents must be positive in '" + s + "'");
    }
    return d;
}

/// Parse "sd,sh,sw" into voxel spacing; used for flags like --spacing.
inline std::array<float, 3> parse_spacing(const std::string& s) {
    const auto parts = detail::split_commas(s);
    check(parts.size() == 3, "expected three comma-separated spacings, got '" + s + "'");
    std::array<float, 3> sp{};
    for (int a = 0; a < 3; ++a) {
        try {
            sp[a] = std::stof(parts[a]);
        } catch (const std::exception&) {
            throw std::runtime_error("invalid spacing '" + parts[a] + "' in '" + s + "'");
        }
        check(sp[a] > 0.0f, "spacings must be positive in '" + s + "'");
    }
    return sp;
}

// ---------------------------------------------------------------------------
// Network scale presets.
// ---------------------------------------------------------------------------

struct Preset {
    NetworkConfig stage1, stage2;
};

/// Named network scales. "micro" and "tiny" fit desk machines and the test
/// suite; "full" is the full-scale geometry (first stage 4x160x192x128 with
/// 32 base filters, second stage 7x128x128x128 with attention gates) and is
/// guarded by --allow-large.
inline Preset preset(const std::string& name) {
    Preset p;
    p.stage1.in_channels = 4;
    p.stage1.out_channels = 3;
    p.stage1.dropout_rate = 0.2;
    p.stage2 = p.stage1;
    p.stage2.in_channels = 7;
    p.stage2.use_attention_gates = true;
    if (name == "micro") {
        p.stage1.base_filters = 2;
        p.stage1.levels = 2;
        p.stage1.blocks_per_level = {1, 1};
        p.stage1.latent_dim = 4;
        p.stage1.input_dims = {16, 16, 16};
        p.stage1.dropout_rate = 0.0;
        p.stage2.base_filters = 2;
        p.stage2.levels = 2;
        p.stage2.blocks_per_level = {1, 1};
        p.stage2.latent_dim = 4;
        p.stage2.input_dims = {8, 8, 8};
        p.stage2.dropout_rate = 0.0;
    } else if (name == "tiny") {
        p.stage1.base_filters = 4;
        p.stage1.levels = 4;
        p.stage1.blocks_per_level = {1, 2, 2, 4};
        p.stage1.latent_dim = 8;
        p.stage1.input_dims = {16, 16, 16};
        p.stage1.dropout_rate = 0.0;
        p.stage2.base_filters = 4;
        p.stage2.levels = 3;
        p.stage2.blocks_per_level = {1, 2, 2};
        p.stage2.latent_dim = 8;
        // The refinement window matches the first stage's field of view so
        // that typical tumors fit inside it whole, mirroring the full-scale
        // window-to-volume ratio.
        p.stage2.input_dims = {16, 16, 16};
        p.stage2.dropout_rate = 0.0;
    } else if (name == "full") {
        p.stage1.base_filters = 32;
        p.stage1.levels = 4;
        p.stage1.blocks_per_level = {1, 2, 2, 4};
        p.stage1.latent_dim = 128;
        p.stage1.input_dims = {160, 192, 128};
        p.stage2.base_filters = 32;
        p.stage2.levels = 4;
        p.stage2.blocks_per_level = {1, 2, 2, 4};
        p.stage2.latent_dim = 128;
        p.stage2.input_dims = {128, 128, 128};
    } else {
        throw std::runtime_error("unknown preset '" + name +
                                 "' (available: micro, tiny, full)");
    }
    return p;
}

namespace detail {

inline void guard_large(const NetworkConfig& cfg, bool allow_large) {
    if (dims_voxels(cfg.input_dims) <= kLargeRunVoxels || allow_large) return;
    throw std::runtime_error(
        "a " + std::to_string(cfg.in_channels) + "x" + dims_str(cfg.input_dims) +
        " input needs a full-scale memory budget; pass --allow-large to proceed anyway");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run configuration echo.
// ---------------------------------------------------------------------------

/// Write the fully resolved settings of a run (defaults included) into
/// <dir>/run_config.ini so every artifact directory documents how it was
/// produced. Schema: top-level lines for `schema_version` and any other
/// global flags (currently `seed`), then one `[<command>]` section whose keys
/// mirror the command's flags; multi-value flags are comma-separated. The
/// file is a valid --config input: feeding it back reproduces the run, which
/// is why global flags must sit above the section — a config key inside the
/// command section never reaches an app-level option.
inline void write_run_config(const std::string& dir, const std::string& command,
                             const std::vector<std::pair<std::string, std::string>>& kvs) {
    const std::string path = dir + "/run_config.ini";
    std::ofstream os(path);
    check(static_cast<bool>(os), "cannot write " + path);
    os << "# cseg run configuration: every setting resolved for this run, defaults\n"
          "# included. Global flags first, then one [<command>] section whose keys\n"
          "# mirror the command's flags (multi-value flags comma-separated).\n";
    os << "schema_version = " << kSchemaVersion << "\n";
    for (const auto& [k, v] : kvs)
        if (k == "seed") os << k << " = " << v << "\n";
    os << "\n[" << command << "]\n";
    for (const auto& [k, v] : kvs)
        if (k != "seed") os << k << " = " << (v.empty() ? "\"\"" : v) << "\n";
    check(static_cast<bool>(os), "write to " + path + " failed");
}

// ---------------------------------------------------------------------------
// Dataset manifests and prediction indexes.
// ---------------------------------------------------------------------------

/// One case of a dataset directory: file names are relative to the directory
/// holding manifest.json.
struct ManifestEntry {
    std::string id, image, labels;
};

inline void write_manifest(const std::string& dir, const std::vector<ManifestEntry>& cases) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["cases"] = nlohmann::json::array();
    for (const auto& c : cases)
        j["cases"].push_back({{"id", c.id}, {"image", c.image}, {"labels", c.labels}});
    const std::string path = dir + "/manifest.json";
    std::ofstream os(path);
    check(static_cast<bool>(os), "cannot write " + path);
    os << j.dump(2) << "\n";
    check(static_cast<bool>(os), "write to " + path + " failed");
}

inline std::vector<ManifestEntry> read_manifest(const std::string& dir) {
    const std::string path = dir + "/manifest.json";
    std::ifstream is(path);
    check(static_cast<bool>(is), "cannot open " + path +
                                     " (expected a dataset directory with a manifest)");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error(path + " is not valid JSON: " + e.what());
    }
    check(j.value("schema_version", 0) == kSchemaVersion,
          path + " has schema_version " + j.value("schema_version", nlohmann::json()).dump() +
              ", this build reads " + std::to_string(kSchemaVersion));
    std::vector<ManifestEntry> out;
    for (const auto& c : j.at("cases"))
        out.push_back({c.at("id").get<std::string>(), c.at("image").get<std::string>(),
                       c.at("labels").get<std::string>()});
    return out;
}

inline std::vector<RawCase> load_cases(const std::string& dir) {
    std::vector<RawCase> cases;
    for (const auto& e : read_manifest(dir)) {
        RawCase c;
        c.image = load_volume(dir + "/" + e.image);
        c.labels = load_labels(dir + "/" + e.labels);
        c.patient_id = e.id;
        check(c.image.dims == c.labels.dims,
              "case " + e.id + ": image " + dims_str(c.image.dims) + " vs labels " +
                  dims_str(c.labels.dims));
        cases.push_back(std::move(c));
    }
    return cases;
}

/// One entry of a prediction directory's index.json. `probs` is empty when
/// the directory only carries label maps (e.g. a dataset manifest read as an
/// index for evaluation).
struct IndexEntry {
    std::string id, labels, probs;
};

inline void write_index(const std::string& dir, const std::vector<IndexEntry>& cases) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["cases"] = nlohmann::json::array();
    for (const auto& c : cases)
        j["cases"].push_back({{"id", c.id}, {"labels", c.labels}, {"probs", c.probs}});
    const std::string path = dir + "/index.json";
    std::ofstream os(path);
    check(static_cast<bool>(os), "cannot write " + path);
    os << j.dump(2) << "\n";
    check(static_cast<bool>(os), "write to " + path + " failed");
}

/// Read a prediction directory's index; a dataset directory (manifest.json
/// only) is accepted too, so ground truth can be fed wherever predictions
/// are, e.g. evaluate --pred <truth> --truth <truth>.
inline std::vector<IndexEntry> read_index(const std::string& dir) {
    const std::string path = dir + "/index.json";
    std::ifstream is(path);
    if (!is) {
        std::vector<IndexEntry> out;
        for (const auto& e : read_manifest(dir)) out.push_back({e.id, e.labels, ""});
        return out;
    }
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error(path + " is not valid JSON: " + e.what());
    }
    check(j.value("schema_version", 0) == kSchemaVersion,
          path + " has schema_version " + j.value("schema_version", nlohmann::json()).dump() +
              ", this build reads " + std::to_string(kSchemaVersion));
    std::vector<IndexEntry> out;
    for (const auto& c : j.at("cases"))
        out.push_back({c.at("id").get<std::string>(), c.at("labels").get<std::string>(),
                       c.value("probs", "")});
    return out;
}

// ---------------------------------------------------------------------------
// gen-phantoms
// ---------------------------------------------------------------------------

struct GenPhantomsConfig {
    std::string out;
    std::size_t count = 10;
    std::uint64_t seed = 0;
    Dims3 dims{16, 16, 16};
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
};

/// Write `count` synthetic cases (4-channel image + labels, CSEG format) and
/// a manifest listing exactly the files present. Case geometry varies per
/// case on named substreams of the seed, so the same seed always reproduces
/// the same bytes and count 0 still succeeds with an empty manifest.
inline std::vector<ManifestEntry> cmd_gen_phantoms(const GenPhantomsConfig& cfg,
                                                   std::ostream& out = std::cout) {
    check(!cfg.out.empty(), "gen-phantoms: --out is required");
    std::filesystem::create_directories(cfg.out);

    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < cfg.count; ++i) {
        Rng rng = substream(cfg.seed, "phantom/" + std::to_string(i));
        const double dmin = double(*std::min_element(cfg.dims.begin(), cfg.dims.end()));
        TumorSpec spec;
        for (int a = 0; a < 3; ++a)
            spec.center[a] = double(cfg.dims[a]) * (0.5 + rng.uniform(-0.08, 0.08));
        spec.wt_radius = dmin * rng.uniform(0.20, 0.28);
        spec.tc_radius = spec.wt_radius * rng.uniform(0.55, 0.75);
        spec.et_radius = spec.tc_radius * rng.uniform(0.45, 0.70);

        PhantomCase pc = generate_phantom(rng.next_u64(), cfg.dims, spec);
        pc.image.spacing = cfg.spacing;
        const std::string id = "case_" + detail::pad3(i);
        ManifestEntry e{id, id + "_image.cseg", id + "_labels.cseg"};
        save_volume(pc.image, cfg.out + "/" + e.image);
        save_labels(pc.labels, cfg.out + "/" + e.labels);
        entries.push_back(std::move(e));
    }
    write_manifest(cfg.out, entries);
    write_run_config(cfg.out, "gen-phantoms",
                     {{"out", cfg.out},
                      {"count", std::to_string(cfg.count)},
                      {"seed", std::to_string(cfg.seed)},
                      {"dims", detail::quoted(detail::fmt_dims(cfg.dims))},
                      {"spacing", detail::quoted(detail::fmt_spacing(cfg.spacing))}});
    out << "wrote " << entries.size() << " cases to " << cfg.out << "\n";
    return entries;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainCliConfig {
    int stage = 1;
    std::string data, out;
    std::string preset_name = "tiny";
    std::vector<std::string> stage1_models;  // second stage only
    std::string resume;                      // snapshot to continue from
    std::size_t epochs = 20;
    std::size_t steps_per_epoch = 0;  // 0: one pass over the dataset
    std::size_t decay_epochs = 0;     // 0: equal to epochs
    double lr0 = 1e-4;
    bool augment = true;
    double val_fraction = 0.0;
    std::size_t checkpoint_every = 0;  // 0: only the final snapshot
    std::uint64_t seed = 0;
    float wt_threshold = 0.5f;
    bool allow_large = false;
    bool dry_run = false;
};

struct TrainCliSummary {
    TrainResult result;
    std::size_t samples = 0, train_samples = 0, val_samples = 0;
    std::string final_checkpoint;
};

namespace detail {

inline void print_shape_trace(const NetworkConfig& cfg, std::ostream& out) {
    const ShapeTrace t = trace_shapes(cfg);
    out << "input:  " << cfg.in_channels << "x" << dims_str(cfg.input_dims) << "\n";
    for (std::size_t l = 0; l < t.encoder_levels.size(); ++l)
        out << "encoder level " << l << ": " << shape4_str(t.encoder_levels[l]) << "\n";
    out << "endpoint: " << shape4_str(t.endpoint) << "\n";
    out << "output: " << shape4_str(t.output) << "\n";
    out << "reconstruction: " << shape4_str(t.reconstruction) << "\n";
    out << "attention gates: " << t.attention_gates << "\n";
    out << "parameters: " << t.parameter_count << "\n";
}

inline std::size_t resume_start_epoch(const std::string& path) {
    const std::string stem = std::filesystem::path(path).stem().string();
    if (stem == "final")
        throw std::runtime_error("train: " + path +
                                 " is a finished run's snapshot; nothing to resume");
    const std::string prefix = "epoch_";
    check(stem.rfind(prefix, 0) == 0,
          "train: cannot infer the resume epoch from " + path +
              " (expected epoch_<n>.csck)");
    try {
        return std::stoull(stem.substr(prefix.size())) + 1;
    } catch (const std::exception&) {
        throw std::runtime_error("train: cannot infer the resume epoch from " + path +
                                 " (expected epoch_<n>.csck)");
    }
}

}  // namespace detail

/// Train one stage. Stage 1 consumes the dataset directly (normalized image,
/// encoded region masks); stage 2 first expands it, pairing every first-stage
/// snapshot with every case. Writes snapshots, a JSONL step log, and the
/// resolved configuration into --out.
inline TrainCliSummary cmd_train(const TrainCliConfig& cli, std::ostream& out = std::cout) {
    check(cli.stage == 1 || cli.stage == 2,
          "train: stage must be 1 or 2, got " + std::to_string(cli.stage));
    const Preset p = preset(cli.preset_name);
    const NetworkConfig ncfg = cli.stage == 1 ? p.stage1 : p.stage2;

    TrainCliSummary summary;
    if (cli.dry_run) {  // pure shape arithmetic: no buffers, no guard needed
        out << "preset '" << cli.preset_name << "' stage " << cli.stage << "\n";
        detail::print_shape_trace(ncfg, out);
        return summary;
    }
    detail::guard_large(ncfg, cli.allow_large);
    check(!cli.data.empty(), "train: --data is required");
    check(!cli.out.empty(), "train: --out is required");
    std::filesystem::create_directories(cli.out);

    const std::vector<RawCase> cases = load_cases(cli.data);
    check(!cases.empty(), "train: " + cli.data + " lists no cases");

    std::vector<TrainSample> dataset;
    if (cli.stage == 1) {
        for (const RawCase& c : cases) {
            c.labels.validate();
            TrainSample s;
            s.image = normalize(c.image);
            s.target = encode_labels(c.labels);
            s.patient_id = c.patient_id;
            dataset.push_back(std::move(s));
            for (int a = 0; a < 3; ++a)
                check(c.image.dims[a] >= ncfg.input_dims[a],
                      "train: case " + c.patient_id + " is " + dims_str(c.image.dims) +
                          ", smaller than the training crop " + dims_str(ncfg.input_dims));
        }
    } else {
        check(!cli.stage1_models.empty(),
              "train: second-stage training needs --stage1-model snapshots");
        const auto models = load_stage1_models<float>(cli.stage1_models);
        dataset = build_expanded_dataset(models, cases, ncfg.input_dims, cli.wt_threshold);
        out << "expanded dataset: " << dataset.size() << " samples (" << models.size()
            << " models x " << cases.size() << " cases)\n";
    }
    summary.samples = dataset.size();

    std::vector<TrainSample> train_set;
    if (cli.val_fraction > 0.0) {
        const auto [train_idx, val_idx] = split_by_patient(dataset, cli.val_fraction, cli.seed);
        check(!train_idx.empty(), "train: the validation fraction leaves no training data");
        for (const std::size_t i : train_idx) train_set.push_back(dataset[i]);
        summary.train_samples = train_idx.size();
        summary.val_samples = val_idx.size();
        out << "split: " << train_idx.size() << " training / " << val_idx.size()
            << " held-out samples\n";
    } else {
        train_set = std::move(dataset);
        summary.train_samples = train_set.size();
    }

    TrainConfig tc;
    tc.epochs = cli.epochs;
    tc.steps_per_epoch = cli.steps_per_epoch;
    tc.lr0 = cli.lr0;
    tc.decay_epochs = cli.decay_epochs ? cli.decay_epochs : cli.epochs;
    tc.augment = cli.augment;
    tc.seed = cli.seed;
    tc.log_path = cli.out + "/train_log.jsonl";
    tc.checkpoint_dir = cli.out;
    if (cli.checkpoint_every)
        for (std::size_t e = cli.checkpoint_every - 1; e + 1 < cli.epochs;
             e += cli.checkpoint_every)
            tc.checkpoint_epochs.push_back(e);
    if (cli.stage == 1) tc.crop_dims = ncfg.input_dims;  // stage-2 samples are pre-cropped

    Network<float> net =
        cli.stage == 1 ? build_stage1<float>(ncfg) : build_stage2<float>(ncfg);
    if (!cli.resume.empty()) {
        Network<float> restored = load_checkpoint<float>(cli.resume);
        check(nlohmann::json(restored.config) == nlohmann::json(ncfg),
              "train: " + cli.resume + " was trained with a different configuration");
        net = std::move(restored);
        tc.start_epoch = detail::resume_start_epoch(cli.resume);
        out << "resuming at epoch " << tc.start_epoch << " from " << cli.resume << "\n";
    } else {
        initialize_parameters(net, cli.seed);
    }

    const std::size_t report_every = std::max<std::size_t>(1, cli.epochs / 10);
    summary.result = train_stage(
        net, train_set, tc, [&](const StepRecord& r) {
            if (r.step == 0 && (r.epoch % report_every == 0 || r.epoch + 1 == cli.epochs))
                out << "epoch " << r.epoch << ": dice " << r.dice << "  l2 " << r.l2
                    << "  kl " << r.kl << "  lr " << r.lr << "\n";
        });
    summary.final_checkpoint = cli.out + "/final.csck";

    std::vector<std::pair<std::string, std::string>> echo{
        {"stage", std::to_string(cli.stage)},
        {"data", cli.data},
        {"out", cli.out},
        {"preset", cli.preset_name},
        {"resume", cli.resume},
        {"epochs", std::to_string(cli.epochs)},
        {"steps-per-epoch", std::to_string(cli.steps_per_epoch)},
        {"decay-epochs", std::to_string(tc.decay_epochs)},
        {"lr0", detail::fmt_double(cli.lr0)},
        {"augment", cli.augment ? "true" : "false"},
        {"val-fraction", detail::fmt_double(cli.val_fraction)},
        {"checkpoint-every", std::to_string(cli.checkpoint_every)},
        {"seed", std::to_string(cli.seed)},
        {"wt-threshold", detail::fmt_double(cli.wt_threshold)},
        {"allow-large", cli.allow_large ? "true" : "false"},
        {"samples", std::to_string(summary.samples)},
        {"train-samples", std::to_string(summary.train_samples)},
        {"val-samples", std::to_string(summary.val_samples)}};
    // List-valued flags are omitted when unset: an empty item would not
    // round-trip through --config.
    if (!cli.stage1_models.empty())
        echo.insert(echo.begin() + 5,
                    {"stage1-model", detail::join(cli.stage1_models, ",")});
    write_run_config(cli.out, "train", echo);
    out << "final loss: total " << summary.result.epochs.back().total << " (dice "
        << summary.result.epochs.back().dice << ")\n";
    return summary;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferConfig {
    std::vector<std::string> stage1_models, stage2_models;
    std::string data, out;
    float wt_threshold = 0.5f;
    bool allow_large = false;
};

struct InferSummary {
    std::size_t cases = 0, predictions = 0;
};

/// Segment every case of a dataset with every model combination. Each
/// prediction lands as a probability volume plus its decoded label map;
/// predictions.jsonl records which models produced each file and index.json
/// lists every prediction for downstream commands.
inline InferSummary cmd_infer(const InferConfig& cfg, std::ostream& out = std::cout) {
    check(!cfg.stage1_models.empty(), "infer: need at least one --stage1-model snapshot");
    check(!cfg.data.empty(), "infer: --data is required");
    check(!cfg.out.empty(), "infer: --out is required");

    const auto s1 = load_stage1_models<float>(cfg.stage1_models);
    std::vector<Network<float>> s2;
    for (const auto& path : cfg.stage2_models) {
        Network<float> net = load_checkpoint<float>(path);
        check(net.config.use_attention_gates && net.config.in_channels == 7,
              "infer: " + path + " is not a second-stage model");
        s2.push_back(std::move(net));
    }
    for (const auto& m : s1) detail::guard_large(m.config, cfg.allow_large);
    for (const auto& m : s2) detail::guard_large(m.config, cfg.allow_large);

    const std::vector<RawCase> cases = load_cases(cfg.data);
    std::filesystem::create_directories(cfg.out);
    std::ofstream records(cfg.out + "/predictions.jsonl");
    check(static_cast<bool>(records), "infer: cannot write " + cfg.out + "/predictions.jsonl");

    InferSummary summary;
    std::vector<IndexEntry> index;
    for (const RawCase& c : cases) {
        auto preds = run_cascade(s1, s2, c.image, CascadeOptions{cfg.wt_threshold});
        for (std::size_t k = 0; k < preds.size(); ++k) {
            CasePrediction& p = preds[k];
            p.probabilities.spacing = c.image.spacing;
            const std::string base = c.patient_id + "_p" + std::to_string(k);
            IndexEntry e{base, base + "_labels.cseg", base + "_probs.cseg"};
            save_labels(p.label_map, cfg.out + "/" + e.labels);
            save_volume(p.probabilities, cfg.out + "/" + e.probs);
            records << prediction_record(c.patient_id, p, e.probs) << "\n";
            index.push_back(std::move(e));
            ++summary.predictions;
        }
        ++summary.cases;
    }
    check(static_cast<bool>(records), "infer: write to predictions.jsonl failed");
    records.close();
    write_index(cfg.out, index);
    std::vector<std::pair<std::string, std::string>> echo{
        {"stage1-model", detail::join(cfg.stage1_models, ",")},
        {"data", cfg.data},
        {"out", cfg.out},
        {"wt-threshold", detail::fmt_double(cfg.wt_threshold)},
        {"allow-large", cfg.allow_large ? "true" : "false"}};
    if (!cfg.stage2_models.empty())
        echo.insert(echo.begin() + 1,
                    {"stage2-model", detail::join(cfg.stage2_models, ",")});
    write_run_config(cfg.out, "infer", echo);
    out << summary.cases << " cases -> " << summary.predictions << " predictions in "
        << cfg.out << "\n";
    return summary;
}

// ---------------------------------------------------------------------------
// ensemble
// ---------------------------------------------------------------------------

struct EnsembleConfig {
    std::string pred, out;
};

namespace detail {

inline std::string labels_path_for(const std::string& probs_path) {
    const std::string suffix = "_probs.cseg";
    check(probs_path.size() > suffix.size() &&
              probs_path.compare(probs_path.size() - suffix.size(), suffix.size(), suffix) == 0,
          "ensemble: prediction record path '" + probs_path + "' does not end with " + suffix);
    return probs_path.substr(0, probs_path.size() - suffix.size()) + "_labels.cseg";
}

}  // namespace detail

/// Fuse all predictions of each case (as recorded in predictions.jsonl) into
/// one label map by voxelwise voting; the written probability volume is the
/// member average. A single-member ensemble passes its prediction through
/// byte-identically.
inline std::vector<IndexEntry> cmd_ensemble(const EnsembleConfig& cfg,
                                            std::ostream& out = std::cout) {
    check(!cfg.pred.empty(), "ensemble: --pred is required");
    check(!cfg.out.empty(), "ensemble: --out is required");
    const std::string records_path = cfg.pred + "/predictions.jsonl";
    std::ifstream records(records_path);
    check(static_cast<bool>(records),
          "ensemble: cannot open " + records_path + " (run infer first)");

    std::vector<std::string> case_order;
    std::map<std::string, std::vector<std::string>> probs_by_case;
    std::string line;
    while (std::getline(records, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(records_path + " has a corrupt record: " + e.what());
        }
        const std::string case_id = j.at("case").get<std::string>();
        auto [it, fresh] = probs_by_case.try_emplace(case_id);
        if (fresh) case_order.push_back(case_id);
        it->second.push_back(j.at("path").get<std::string>());
    }
    check(!case_order.empty(), records_path + " holds no prediction records");

    std::filesystem::create_directories(cfg.out);
    std::vector<IndexEntry> index;
    for (const std::string& case_id : case_order) {
        std::vector<CasePrediction> members;
        for (const std::string& rel : probs_by_case[case_id]) {
            CasePrediction m;
            m.probabilities = load_volume(cfg.pred + "/" + rel);
            m.label_map = load_labels(cfg.pred + "/" + detail::labels_path_for(rel));
            members.push_back(std::move(m));
        }
        const LabelMap voted = majority_vote(members);

        Volume mean = members.front().probabilities;
        for (std::size_t k = 1; k < members.size(); ++k)
            for (std::size_t i = 0; i < mean.data.size(); ++i)
                mean.data[i] += members[k].probabilities.data[i];
        for (auto& v : mean.data) v /= float(members.size());

        IndexEntry e{case_id, case_id + "_labels.cseg", case_id + "_probs.cseg"};
        save_labels(voted, cfg.out + "/" + e.labels);
        save_volume(mean, cfg.out + "/" + e.probs);
        out << case_id << ": fused " << members.size() << " predictions\n";
        index.push_back(std::move(e));
    }
    write_index(cfg.out, index);
    write_run_config(cfg.out, "ensemble", {{"pred", cfg.pred}, {"out", cfg.out}});
    return index;
}

// ---------------------------------------------------------------------------
// postprocess
// ---------------------------------------------------------------------------

struct PostprocessConfig {
    std::string pred, out;
    std::size_t min_et_voxels = 500;
};

/// Apply the enhancing-tumor sanity rule to every indexed prediction and
/// write the results under the same file names.
inline std::vector<IndexEntry> cmd_postprocess(const PostprocessConfig& cfg,
                                               std::ostream& out = std::cout) {
    check(!cfg.pred.empty(), "postprocess: --pred is required");
    check(!cfg.out.empty(), "postprocess: --out is required");
    const auto entries = read_index(cfg.pred);
    check(!entries.empty(), "postprocess: " + cfg.pred + " indexes no predictions");
    std::filesystem::create_directories(cfg.out);

    std::vector<IndexEntry> index;
    for (const auto& e : entries) {
        check(!e.probs.empty(),
              "postprocess: " + e.id + " has no probability volume (a dataset manifest " +
                  "cannot be postprocessed)");
        CasePrediction p;
        p.label_map = load_labels(cfg.pred + "/" + e.labels);
        p.probabilities = load_volume(cfg.pred + "/" + e.probs);
        const CasePrediction post = postprocess_et(std::move(p), cfg.min_et_voxels);

        std::size_t et = 0;
        for (const std::uint8_t v : post.label_map.data) et += v == 4;
        if (et == 0) out << e.id << ": enhancing region absent or demoted\n";

        save_labels(post.label_map, cfg.out + "/" + e.labels);
        save_volume(post.probabilities, cfg.out + "/" + e.probs);
        index.push_back(e);
    }
    write_index(cfg.out, index);
    write_run_config(cfg.out, "postprocess",
                     {{"pred", cfg.pred},
                      {"out", cfg.out},
                      {"min-et-voxels", std::to_string(cfg.min_et_voxels)}});
    return index;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateConfig {
    std::string pred, truth, out;
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
};

/// Score every ground-truth case against the prediction directory's entry of
/// the same id: region Dice, HD95, sensitivity, specificity per case plus
/// mean/sd rows, written as metrics.csv and printed as a table.
inline Aggregate cmd_evaluate(const EvaluateConfig& cfg, std::ostream& out = std::cout) {
    check(!cfg.pred.empty(), "evaluate: --pred is required");
    check(!cfg.truth.empty(), "evaluate: --truth is required");
    check(!cfg.out.empty(), "evaluate: --out is required");

    const auto truth_entries = read_manifest(cfg.truth);
    check(!truth_entries.empty(), "evaluate: " + cfg.truth + " lists no cases");
    std::map<std::string, IndexEntry> by_id;
    for (const auto& e : read_index(cfg.pred)) by_id[e.id] = e;

    std::vector<RegionReport> reports;
    for (const auto& t : truth_entries) {
        const auto it = by_id.find(t.id);
        if (it == by_id.end()) {
            std::string have;
            for (const auto& [id, _] : by_id) {
                if (!have.empty()) have += ", ";
                if (have.size() > 60) {
                    have += "...";
                    break;
                }
                have += id;
            }
            throw std::runtime_error("evaluate: " + cfg.pred + " has no prediction for case '" +
                                     t.id + "' (available: " + have + ")");
        }
        const LabelMap pred = load_labels(cfg.pred + "/" + it->second.labels);
        const LabelMap truth = load_labels(cfg.truth + "/" + t.labels);
        reports.push_back(evaluate_case(pred, truth, cfg.spacing, t.id));
    }

    const Aggregate agg = aggregate(reports);
    std::filesystem::create_directories(cfg.out);
    const std::string csv_path = cfg.out + "/metrics.csv";
    std::ofstream csv(csv_path);
    check(static_cast<bool>(csv), "evaluate: cannot write " + csv_path);
    csv << metrics_csv(reports);
    check(static_cast<bool>(csv), "evaluate: write to " + csv_path + " failed");
    write_run_config(cfg.out, "evaluate",
                     {{"pred", cfg.pred},
                      {"truth", cfg.truth},
                      {"out", cfg.out},
                      {"spacing", detail::quoted(detail::fmt_spacing(cfg.spacing))}});
    out << metrics_table(agg);
    return agg;
}

// ---------------------------------------------------------------------------
// export-attention
// ---------------------------------------------------------------------------

struct ExportAttentionConfig {
    std::string stage1_model, stage2_model;
    std::string data, out;
    std::string case_id;  // empty: every case in the dataset
    float wt_threshold = 0.5f;
    bool allow_large = false;
};

/// Recreate the cascade's second-stage input window for each selected case
/// and write every attention gate's coefficient volume plus a mid-slice
/// preview, prefixed with the case id.
inline std::vector<AttentionExport> cmd_export_attention(const ExportAttentionConfig& cfg,
                                                         std::ostream& out = std::cout) {
    check(!cfg.stage1_model.empty(), "attention: --stage1-model is required");
    check(!cfg.stage2_model.empty(), "attention: --stage2-model is required");
    check(!cfg.data.empty(), "attention: --data is required");
    check(!cfg.out.empty(), "attention: --out is required");

    const auto s1 = load_stage1_models<float>({cfg.stage1_model});
    Network<float> s2 = load_checkpoint<float>(cfg.stage2_model);
    check(s2.config.use_attention_gates && s2.config.in_channels == 7,
          "attention: " + cfg.stage2_model + " is not a second-stage model");
    detail::guard_large(s1.front().config, cfg.allow_large);
    detail::guard_large(s2.config, cfg.allow_large);

    std::vector<RawCase> cases = load_cases(cfg.data);
    if (!cfg.case_id.empty()) {
        std::vector<RawCase> picked;
        for (auto& c : cases)
            if (c.patient_id == cfg.case_id) picked.push_back(std::move(c));
        check(!picked.empty(),
              "attention: " + cfg.data + " has no case '" + cfg.case_id + "'");
        cases = std::move(picked);
    }

    std::vector<AttentionExport> exports;
    for (const RawCase& c : cases) {
        const Volume norm = normalize(c.image);
        const Volume probs = infer_probabilities(s1.front(), c.image);
        std::vector<std::uint8_t> wt(probs.voxels());
        for (std::size_t i = 0; i < wt.size(); ++i)
            wt[i] = probs.data[i] >= cfg.wt_threshold;
        const CropWindow win =
            tumor_centered_window(wt, c.image.dims, s2.config.input_dims, &c.image);
        const Volume input = cseg::detail::stage2_window_input(probs, norm, win);
        exports.push_back(export_attention_maps(s2, input, cfg.out, c.patient_id));
        out << c.patient_id << ": " << exports.back().volume_paths.size()
            << " attention maps\n";
    }
    write_run_config(cfg.out, "export-attention",
                     {{"stage1-model", cfg.stage1_model},
                      {"stage2-model", cfg.stage2_model},
                      {"data", cfg.data},
                      {"out", cfg.out},
                      {"case", cfg.case_id},
                      {"wt-threshold", detail::fmt_double(cfg.wt_threshold)},
                      {"allow-large", cfg.allow_large ? "true" : "false"}});
    return exports;
}

}  // namespace cseg::cli

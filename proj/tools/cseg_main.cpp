#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cseg/cli/commands.hpp"

// `cseg`: the command-line surface over the segmentation toolkit. Every
// subcommand is a thin flag-collection shell around one cli::cmd_* function;
// a configuration file (INI key-value, see --config) can preset any flag,
// with explicitly passed flags taking precedence. Subcommands exit 0 on
// success and nonzero with a diagnostic on stderr otherwise.

int main(int argc, char** argv) {
    using namespace cseg;

    CLI::App app{"cseg: two-stage cascaded brain-tumor segmentation toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "",
                   "key-value run configuration (INI; sections named after subcommands); "
                   "explicitly passed flags take precedence");

    std::uint64_t seed = 0;
    app.add_option("--seed", seed,
                   "run seed; every stochastic site draws from its own named substream")
        ->capture_default_str();
    int schema_version = cli::kSchemaVersion;
    app.add_option("--schema_version", schema_version,
                   "configuration schema version (checked when set from --config)")
        ->capture_default_str();
    auto check_schema = [&] {
        check(schema_version == cli::kSchemaVersion,
              "configuration has schema_version " + std::to_string(schema_version) +
                  ", this build reads " + std::to_string(cli::kSchemaVersion));
    };

    // ---- gen-phantoms ----
    cli::GenPhantomsConfig gen;
    std::string gen_dims = "16,16,16", gen_spacing = "1,1,1";
    auto* sub_gen = app.add_subcommand(
        "gen-phantoms", "write a synthetic dataset (4-channel cases + labels + manifest)");
    sub_gen->fallthrough();
    sub_gen->add_option("--out", gen.out, "dataset directory to create")->required();
    sub_gen->add_option("--count", gen.count, "number of cases")->capture_default_str();
    sub_gen->add_option("--dims", gen_dims, "case extents D,H,W")->capture_default_str();
    sub_gen->add_option("--spacing", gen_spacing, "voxel spacing in mm, d,h,w")
        ->capture_default_str();
    sub_gen->callback([&] {
        check_schema();
        gen.seed = seed;
        gen.dims = cli::parse_dims(gen_dims);
        gen.spacing = cli::parse_spacing(gen_spacing);
        cli::cmd_gen_phantoms(gen);
    });

    // ---- train ----
    cli::TrainCliConfig train;
    auto* sub_train =
        app.add_subcommand("train", "train one cascade stage on a dataset directory");
    sub_train->fallthrough();
    sub_train->add_option("--stage", train.stage, "cascade stage to train (1 or 2)")
        ->capture_default_str();
    sub_train->add_option("--data", train.data, "dataset directory (with manifest.json)");
    sub_train->add_option("--out", train.out, "output directory for snapshots and logs");
    sub_train
        ->add_option("--preset", train.preset_name,
                     "network scale: micro, tiny, or full (full needs --allow-large)")
        ->capture_default_str();
    sub_train
        ->add_option("--stage1-model", train.stage1_models,
                     "first-stage snapshot(s) whose outputs feed stage-2 training")
        ->delimiter(',');
    sub_train->add_option("--resume", train.resume,
                          "epoch_<n>.csck snapshot to continue from");
    sub_train->add_option("--epochs", train.epochs, "total epochs")->capture_default_str();
    sub_train
        ->add_option("--steps-per-epoch", train.steps_per_epoch,
                     "optimizer steps per epoch (0: one pass over the dataset)")
        ->capture_default_str();
    sub_train
        ->add_option("--decay-epochs", train.decay_epochs,
                     "length of the polynomial decay schedule (0: same as --epochs)")
        ->capture_default_str();
    sub_train->add_option("--lr0", train.lr0, "initial learning rate")->capture_default_str();
    sub_train->add_flag("--augment,!--no-augment", train.augment, "random flips and scaling")
        ->capture_default_str();
    sub_train
        ->add_option("--val-fraction", train.val_fraction,
                     "fraction of patients held out of training")
        ->capture_default_str();
    sub_train
        ->add_option("--checkpoint-every", train.checkpoint_every,
                     "also snapshot every K epochs (0: only final.csck)")
        ->capture_default_str();
    sub_train
        ->add_option("--wt-threshold", train.wt_threshold,
                     "whole-tumor probability threshold for stage-2 windows")
        ->capture_default_str();
    sub_train->add_flag("--allow-large", train.allow_large,
                        "accept the memory cost of full-scale inputs");
    sub_train->add_flag("--dry-run", train.dry_run,
                        "print the network's shape trace and exit without training");
    sub_train->callback([&] {
        check_schema();
        train.seed = seed;
        cli::cmd_train(train);
    });

    // ---- infer ----
    cli::InferConfig infer;
    auto* sub_infer = app.add_subcommand(
        "infer", "segment every case with every model combination of the cascade");
    sub_infer->fallthrough();
    sub_infer
        ->add_option("--stage1-model", infer.stage1_models, "first-stage snapshot(s)")
        ->required()
        ->delimiter(',');
    sub_infer
        ->add_option("--stage2-model", infer.stage2_models,
                     "second-stage snapshot(s); omit to keep first-stage output")
        ->delimiter(',');
    sub_infer->add_option("--data", infer.data, "dataset directory")->required();
    sub_infer->add_option("--out", infer.out, "prediction directory to create")->required();
    sub_infer
        ->add_option("--wt-threshold", infer.wt_threshold,
                     "whole-tumor probability threshold (windows and label decoding)")
        ->capture_default_str();
    sub_infer->add_flag("--allow-large", infer.allow_large,
                        "accept the memory cost of full-scale inputs");
    sub_infer->callback([&] {
        check_schema();
        cli::cmd_infer(infer);
    });

    // ---- ensemble ----
    cli::EnsembleConfig ens;
    auto* sub_ens = app.add_subcommand(
        "ensemble", "fuse all predictions of each case by voxelwise majority vote");
    sub_ens->fallthrough();
    sub_ens->add_option("--pred", ens.pred, "prediction directory written by infer")
        ->required();
    sub_ens->add_option("--out", ens.out, "output directory for the fused predictions")
        ->required();
    sub_ens->callback([&] {
        check_schema();
        cli::cmd_ensemble(ens);
    });

    // ---- postprocess ----
    cli::PostprocessConfig post;
    auto* sub_post = app.add_subcommand(
        "postprocess", "demote implausibly small enhancing-tumor predictions");
    sub_post->fallthrough();
    sub_post->add_option("--pred", post.pred, "prediction directory (indexed)")->required();
    sub_post->add_option("--out", post.out, "output directory")->required();
    sub_post
        ->add_option("--min-et-voxels", post.min_et_voxels,
                     "demote the enhancing region when it has fewer voxels than this")
        ->capture_default_str();
    sub_post->callback([&] {
        check_schema();
        cli::cmd_postprocess(post);
    });

    // ---- evaluate ----
    cli::EvaluateConfig eval;
    std::string eval_spacing = "1,1,1";
    auto* sub_eval = app.add_subcommand(
        "evaluate", "score predictions against ground truth (Dice, HD95, sens/spec)");
    sub_eval->fallthrough();
    sub_eval->add_option("--pred", eval.pred, "prediction directory")->required();
    sub_eval->add_option("--truth", eval.truth, "dataset directory with ground truth")
        ->required();
    sub_eval->add_option("--out", eval.out, "output directory for metrics.csv")->required();
    sub_eval->add_option("--spacing", eval_spacing, "voxel spacing in mm, d,h,w")
        ->capture_default_str();
    sub_eval->callback([&] {
        check_schema();
        eval.spacing = cli::parse_spacing(eval_spacing);
        cli::cmd_evaluate(eval);
    });

    // ---- export-attention ----
    cli::ExportAttentionConfig attn;
    auto* sub_attn = app.add_subcommand(
        "export-attention",
        "write the second stage's attention coefficients for inspection");
    sub_attn->fallthrough();
    sub_attn->add_option("--stage1-model", attn.stage1_model, "first-stage snapshot")
        ->required();
    sub_attn->add_option("--stage2-model", attn.stage2_model, "gated second-stage snapshot")
        ->required();
    sub_attn->add_option("--data", attn.data, "dataset directory")->required();
    sub_attn->add_option("--out", attn.out, "output directory")->required();
    sub_attn->add_option("--case", attn.case_id, "restrict to one case id");
    sub_attn
        ->add_option("--wt-threshold", attn.wt_threshold,
                     "whole-tumor probability threshold for the window")
        ->capture_default_str();
    sub_attn->add_flag("--allow-large", attn.allow_large,
                       "accept the memory cost of full-scale inputs");
    sub_attn->callback([&] {
        check_schema();
        cli::cmd_export_attention(attn);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

// clearseg: open-vocabulary dense segmentation with CLIP-family image
// encoders and a configurable rewrite of the final transformer block.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clearseg/errors.hpp"
#include "clearseg/log.hpp"
#include "clearseg/runner.hpp"

namespace {

using clearseg::RunConfig;

struct SurgeryFlags {
    std::string preset = "vanilla";
    std::string attn;
    bool no_residual = false;
    bool no_ffn = false;
    float alpha = 1.0f;
    float beta = 0.0f;
    CLI::Option* attn_opt = nullptr;
    CLI::Option* alpha_opt = nullptr;
    CLI::Option* beta_opt = nullptr;

    void add_to(CLI::App* app) {
        app->add_option("--surgery", preset, "Preset: vanilla, maskclip, sclip, clearclip")
            ->check(CLI::IsMember({"vanilla", "maskclip", "sclip", "clearclip"}));
        attn_opt = app->add_option("--attn", attn, "Attention mode for the last block")
                       ->check(CLI::IsMember({"qk", "qq", "kk", "vv", "identity", "qqkk"}));
        app->add_flag("--no-residual", no_residual, "Drop the residual path in the last block");
        app->add_flag("--no-ffn", no_ffn, "Drop the FFN in the last block");
        alpha_opt = app->add_option("--alpha", alpha, "Scale on the attention branch in the last block");
        beta_opt = app->add_option("--beta", beta, "Fraction of highest-mean residual channels to zero");
    }

    void apply(RunConfig& run) const {
        run.surgery = clearseg::preset_surgery(preset);
        if (attn_opt->count() > 0) run.surgery.attn_mode = clearseg::attn_mode_from_name(attn);
        if (no_residual) run.surgery.keep_residual = false;
        if (no_ffn) run.surgery.keep_ffn = false;
        if (alpha_opt->count() > 0) run.surgery.alpha = alpha;
        if (beta_opt->count() > 0) run.surgery.beta = beta;
    }
};

struct CommonFlags {
    RunConfig run;
    std::string gelu;
    CLI::Option* gelu_opt = nullptr;

    void add_model(CLI::App* app, bool need_text) {
        app->add_option("--checkpoint", run.checkpoint, "Visual-tower safetensors archive")->required();
        if (need_text)
            app->add_option("--text-emb", run.text_emb,
                            "Class text-embedding archive (+ .labels.json sidecar)")
                ->required();
        app->add_option("--key-map", run.key_map_path, "JSON remap {expected_key: archive_key}");
        gelu_opt = app->add_option("--gelu", gelu, "Override the checkpoint's gelu variant")
                       ->check(CLI::IsMember({"quick", "exact"}));
    }

    void add_run(CLI::App* app) {
        app->add_option("--out", run.out_dir, "Output directory (default .)");
        app->add_option("--jobs", run.jobs, "Images processed in parallel (default 1)");
        app->add_option("--shorter-side", run.seg.shorter_side, "Resize target for the short image side (default 448)");
        app->add_option("--crop", run.seg.crop, "Sliding-window size (default 336)");
        app->add_option("--stride", run.seg.stride, "Sliding-window stride (default 112)");
    }

    void finish() {
        if (gelu_opt && gelu_opt->count() > 0)
            run.gelu_override = gelu == "quick" ? clearseg::GeluVariant::quick : clearseg::GeluVariant::exact;
    }
};

std::vector<clearseg::AttnMode> parse_attn_list(const std::vector<std::string>& names) {
    std::vector<clearseg::AttnMode> modes;
    for (const auto& n : names) modes.push_back(clearseg::attn_mode_from_name(n));
    return modes;
}

std::vector<bool> parse_bool_list(const std::vector<std::string>& values, const char* flag) {
    std::vector<bool> out;
    for (const auto& v : values) {
        if (v == "1" || v == "on" || v == "true") out.push_back(true);
        else if (v == "0" || v == "off" || v == "false") out.push_back(false);
        else throw clearseg::input_error("config", std::string(flag) + ": expected on/off, got '" + v + "'");
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Open-vocabulary segmentation with surgered CLIP encoders"};
    app.require_subcommand(1);

    // segment
    auto* seg_cmd = app.add_subcommand("segment", "Write label maps for images");
    CommonFlags seg_flags;
    SurgeryFlags seg_surgery;
    std::vector<std::string> seg_images;
    seg_flags.add_model(seg_cmd, true);
    seg_surgery.add_to(seg_cmd);
    seg_flags.add_run(seg_cmd);
    seg_cmd->add_flag("--dump-logits", seg_flags.run.dump_logits, "Also write per-image logit archives");
    seg_cmd->add_option("images", seg_images, "Input images (PNG or JPEG)")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Segment and score against ground truth");
    CommonFlags eval_flags;
    SurgeryFlags eval_surgery;
    std::vector<std::string> eval_images, eval_gts;
    eval_flags.add_model(eval_cmd, true);
    eval_surgery.add_to(eval_cmd);
    eval_flags.add_run(eval_cmd);
    eval_cmd->add_option("--ignore-index", eval_flags.run.ignore_index, "Ground-truth ignore value (default 255)");
    eval_cmd->add_option("--images", eval_images, "Input images")->required();
    eval_cmd->add_option("--gts", eval_gts, "Ground-truth label PNGs, same order")->required();

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "Per-layer branch statistics");
    CommonFlags stats_flags;
    SurgeryFlags stats_surgery;
    std::vector<std::string> stats_images;
    stats_flags.add_model(stats_cmd, false);
    stats_surgery.add_to(stats_cmd);
    stats_flags.add_run(stats_cmd);
    stats_cmd->add_flag("--include-cls", stats_flags.run.include_class_token,
                        "Include the class token in the statistics");
    stats_cmd->add_option("images", stats_images, "Input images")->required();

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Sweep surgery settings and score each");
    CommonFlags ablate_flags;
    SurgeryFlags ablate_surgery;
    std::vector<std::string> ablate_images, ablate_gts;
    std::vector<std::string> grid_attn = {"qq"}, grid_residual = {"on", "off"}, grid_ffn = {"on", "off"};
    std::vector<float> grid_alpha = {1.0f}, grid_beta = {0.0f};
    ablate_flags.add_model(ablate_cmd, true);
    ablate_surgery.add_to(ablate_cmd);
    ablate_flags.add_run(ablate_cmd);
    ablate_cmd->add_option("--ignore-index", ablate_flags.run.ignore_index, "Ground-truth ignore value (default 255)");
    ablate_cmd->add_option("--grid-attn", grid_attn, "Attention modes to sweep")->delimiter(',');
    ablate_cmd->add_option("--grid-residual", grid_residual, "Residual settings to sweep (on/off)")->delimiter(',');
    ablate_cmd->add_option("--grid-ffn", grid_ffn, "FFN settings to sweep (on/off)")->delimiter(',');
    ablate_cmd->add_option("--grid-alpha", grid_alpha, "Alpha values to sweep")->delimiter(',');
    ablate_cmd->add_option("--grid-beta", grid_beta, "Beta values to sweep")->delimiter(',');
    ablate_cmd->add_option("--images", ablate_images, "Input images")->required();
    ablate_cmd->add_option("--gts", ablate_gts, "Ground-truth label PNGs, same order")->required();

    // gen-fixture
    auto* fix_cmd = app.add_subcommand("gen-fixture", "Write a deterministic synthetic checkpoint/text/image bundle");
    clearseg::FixtureSpec fixture;
    std::string fixture_out = "fixture";
    std::string fixture_gelu = "quick";
    fix_cmd->add_option("--seed", fixture.seed, "PRNG seed (default 7)");
    fix_cmd->add_option("--out", fixture_out, "Output directory (default ./fixture)");
    fix_cmd->add_option("--width", fixture.config.width, "Token width (default 16)");
    fix_cmd->add_option("--layers", fixture.config.layers, "Transformer depth (default 3)");
    fix_cmd->add_option("--heads", fixture.config.heads, "Attention heads (default 2)");
    fix_cmd->add_option("--patch", fixture.config.patch_size, "Patch size (default 4)");
    fix_cmd->add_option("--image-size", fixture.config.image_size, "Native image size (default 16)");
    fix_cmd->add_option("--embed-dim", fixture.config.embed_dim, "Joint embedding dim (default 8)");
    fix_cmd->add_option("--classes", fixture.num_classes, "Synthetic text classes (default 2)");
    fix_cmd->add_option("--fixture-image-h", fixture.image_height, "Test image height (default 32)");
    fix_cmd->add_option("--fixture-image-w", fixture.image_width, "Test image width (default 32)");
    fix_cmd->add_option("--gelu", fixture_gelu, "Gelu variant stored in the fixture")
        ->check(CLI::IsMember({"quick", "exact"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2; // usage problems are input errors
    }

    try {
        if (seg_cmd->parsed()) {
            seg_flags.finish();
            seg_surgery.apply(seg_flags.run);
            clearseg::run_segment(seg_flags.run, seg_images);
        } else if (eval_cmd->parsed()) {
            eval_flags.finish();
            eval_surgery.apply(eval_flags.run);
            clearseg::run_eval(eval_flags.run, eval_images, eval_gts);
        } else if (stats_cmd->parsed()) {
            stats_flags.finish();
            stats_surgery.apply(stats_flags.run);
            clearseg::run_stats(stats_flags.run, stats_images);
        } else if (ablate_cmd->parsed()) {
            ablate_flags.finish();
            ablate_surgery.apply(ablate_flags.run);
            clearseg::AblateGrid grid;
            grid.attn = parse_attn_list(grid_attn);
            grid.residual = parse_bool_list(grid_residual, "--grid-residual");
            grid.ffn = parse_bool_list(grid_ffn, "--grid-ffn");
            grid.alpha = grid_alpha;
            grid.beta = grid_beta;
            clearseg::run_ablate(ablate_flags.run, ablate_images, ablate_gts, grid);
        } else if (fix_cmd->parsed()) {
            fixture.config.gelu_variant =
                fixture_gelu == "exact" ? clearseg::GeluVariant::exact : clearseg::GeluVariant::quick;
            clearseg::write_fixture_bundle(fixture_out, fixture);
        }
    } catch (const clearseg::error& e) {
        clearseg::log_error(e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        clearseg::log_error(e.what());
        return 1;
    }
    return 0;
}

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clearseg/encoder.hpp"
#include "clearseg/seg.hpp"

namespace clearseg {

inline constexpr int kSchemaVersion = 1;

// Resolved invocation: every run_* entry point validates paths before any
// compute starts.
struct RunConfig {
    std::string checkpoint;
    std::string text_emb;
    std::string key_map_path; // optional JSON {expected_key: archive_key}
    std::string out_dir = ".";
    SurgeryConfig surgery;    // preset default: vanilla
    SegParams seg;
    int jobs = 1;
    int ignore_index = 255;
    bool dump_logits = false;
    bool include_class_token = false;
    std::optional<GeluVariant> gelu_override;
};

// vanilla | maskclip | sclip | clearclip
SurgeryConfig preset_surgery(const std::string& name);

// Label PNG + manifest.json per invocation; optional per-image logit archive.
void run_segment(const RunConfig& config, const std::vector<std::string>& images);

// Predictions rescaled to ground-truth size, per-image rows in eval.csv plus
// an aggregate report.json.
void run_eval(const RunConfig& config, const std::vector<std::string>& images,
              const std::vector<std::string>& truths);

// Per-layer branch statistics averaged over the images, written to stats.csv.
void run_stats(const RunConfig& config, const std::vector<std::string>& images);

struct AblateGrid {
    std::vector<AttnMode> attn = {AttnMode::qq};
    std::vector<bool> residual = {true, false};
    std::vector<bool> ffn = {true, false};
    std::vector<float> alpha = {1.0f};
    std::vector<float> beta = {0.0f};
};

// mIoU for every grid point, one ablate.csv row per configuration, flushed
// as soon as it is computed.
void run_ablate(const RunConfig& config, const std::vector<std::string>& images,
                const std::vector<std::string>& truths, const AblateGrid& grid);

struct FixtureSpec {
    uint64_t seed = 7;
    VitConfig config{16, 4, 16, 3, 2, 8, GeluVariant::quick}; // 16px tiny tower
    int num_classes = 2;
    int64_t image_height = 32;
    int64_t image_width = 32;
};

// Writes checkpoint.safetensors, text.safetensors (+ labels sidecar) and
// image.png into out_dir; byte-identical for the same spec.
void write_fixture_bundle(const std::string& out_dir, const FixtureSpec& spec);

} // namespace clearseg

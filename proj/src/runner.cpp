#include "clearseg/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <thread>

#include <json.hpp>

#include "clearseg/errors.hpp"
#include "clearseg/image.hpp"
#include "clearseg/log.hpp"
#include "clearseg/safetensors.hpp"
#include "clearseg/stats.hpp"

namespace clearseg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void write_text_atomic(const std::string& path, const std::string& body) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw input_error("output", "cannot write " + tmp);
        out << body;
        if (!out) throw input_error("output", "short write to " + tmp);
    }
    fs::rename(tmp, path);
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw input_error("config", std::string(what) + " path is required");
    if (!fs::exists(path)) throw input_error("config", std::string(what) + " not found: " + path);
}

std::map<std::string, std::string> load_key_map(const std::string& path) {
    std::map<std::string, std::string> key_map;
    if (path.empty()) return key_map;
    require_file(path, "key map");
    std::ifstream in(path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw input_error("config", path + ": " + e.what());
    }
    if (!j.is_object()) throw input_error("config", path + ": key map must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it.value().is_string())
            throw input_error("config", path + ": key map values must be strings");
        key_map[it.key()] = it.value().get<std::string>();
    }
    return key_map;
}

struct LoadedModel {
    VitConfig config;
    Encoder encoder;
    TextEmbeddings text;
};

LoadedModel load_model(const RunConfig& run, bool need_text) {
    require_file(run.checkpoint, "checkpoint");
    auto [config, weights] = load_checkpoint(run.checkpoint, load_key_map(run.key_map_path));
    if (run.gelu_override) config.gelu_variant = *run.gelu_override;
    log_info("checkpoint " + run.checkpoint + ": width " + std::to_string(config.width) + ", " +
             std::to_string(config.layers) + " layers, " + std::to_string(config.heads) + " heads, patch " +
             std::to_string(config.patch_size) + ", embed " + std::to_string(config.embed_dim));
    TextEmbeddings text;
    if (need_text) {
        require_file(run.text_emb, "text embeddings");
        text = load_text_embeddings(run.text_emb);
        if (text.rows.dim(1) != config.embed_dim)
            throw input_error("config", "text embedding dim " + std::to_string(text.rows.dim(1)) +
                                            " does not match checkpoint embed dim " + std::to_string(config.embed_dim));
        if (text.rows.dim(0) > 255)
            throw input_error("config", "more than 255 classes cannot be written as 8-bit label maps");
        log_info("text embeddings: " + std::to_string(text.rows.dim(0)) + " classes");
    }
    return LoadedModel{config, Encoder(config, weights), std::move(text)};
}

void validate_common(const RunConfig& run) {
    if (run.jobs < 1) throw input_error("config", "--jobs must be at least 1");
    if (run.seg.shorter_side < 1 || run.seg.crop < 1 || run.seg.stride < 1)
        throw input_error("config", "shorter-side, crop and stride must be positive");
    if (!(run.surgery.alpha > 0.0f) || !std::isfinite(run.surgery.alpha))
        throw input_error("config", "--alpha must be positive and finite");
    if (!(run.surgery.beta >= 0.0f && run.surgery.beta <= 1.0f))
        throw input_error("config", "--beta must be in [0,1]");
}

void require_images(const std::vector<std::string>& images) {
    if (images.empty()) throw input_error("config", "no input images given");
    for (const auto& p : images) require_file(p, "image");
}

// Runs fn(0..n-1) on `jobs` threads. Results must be written to per-index
// slots; the lowest-index failure is rethrown so runs fail identically no
// matter the scheduling.
void parallel_for(int jobs, size_t n, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    const int workers = static_cast<int>(std::min<size_t>(static_cast<size_t>(jobs), n));
    std::vector<std::exception_ptr> failures(n);
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                failures[i] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(workers));
        for (int wi = 0; wi < workers; ++wi)
            pool.emplace_back([&] {
                while (true) {
                    const size_t i = next.fetch_add(1);
                    if (i >= n) return;
                    try {
                        fn(i);
                    } catch (...) {
                        failures[i] = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
    }
    for (size_t i = 0; i < n; ++i)
        if (failures[i]) std::rethrow_exception(failures[i]);
}

json surgery_json(const SurgeryConfig& s) {
    return json{{"attn", attn_mode_name(s.attn_mode)},
                {"residual", s.keep_residual},
                {"ffn", s.keep_ffn},
                {"alpha", s.alpha},
                {"beta", s.beta}};
}

json params_json(const SegParams& p) {
    return json{{"shorter_side", p.shorter_side}, {"crop", p.crop}, {"stride", p.stride}};
}

std::string output_stem(const std::string& image_path) {
    return fs::path(image_path).stem().string();
}

void check_unique_stems(const std::vector<std::string>& images) {
    std::map<std::string, std::string> seen;
    for (const auto& p : images) {
        const std::string stem = output_stem(p);
        auto [it, inserted] = seen.emplace(stem, p);
        if (!inserted)
            throw input_error("config", "images " + it->second + " and " + p +
                                            " would both write outputs named '" + stem + "'");
    }
}

// Label maps resized to the requested shape by bilinearly resampling the
// logits and re-taking the argmax.
LabelMap prediction_at(const SegmentationResult& seg, int64_t h, int64_t w) {
    LabelMap map;
    map.height = h;
    map.width = w;
    if (h == seg.height && w == seg.width) {
        map.values = seg.labels;
        return map;
    }
    map.values = argmax_labels(resize_logits(seg.logits, h, w));
    return map;
}

struct EvalOutcome {
    std::vector<LabelMap> predictions;
    std::vector<LabelMap> truths;
    std::vector<double> per_image_miou;
};

EvalOutcome eval_pairs(const LoadedModel& model, const RunConfig& run,
                       const std::vector<std::string>& images, const std::vector<std::string>& truths) {
    const int num_classes = static_cast<int>(model.text.rows.dim(0));
    EvalOutcome out;
    out.predictions.resize(images.size());
    out.truths.resize(images.size());
    out.per_image_miou.assign(images.size(), 0.0);
    parallel_for(run.jobs, images.size(), [&](size_t i) {
        const ImageU8 gt_png = load_label_png(truths[i]);
        LabelMap truth;
        truth.height = gt_png.height;
        truth.width = gt_png.width;
        truth.values.assign(gt_png.pixels.begin(), gt_png.pixels.end());
        const ImageU8 image = load_image(images[i]);
        const SegmentationResult seg = segment_image(image, model.encoder, model.text, run.surgery, run.seg);
        out.predictions[i] = prediction_at(seg, truth.height, truth.width);
        out.truths[i] = std::move(truth);
        const MIoUReport one = compute_miou({out.predictions[i]}, {out.truths[i]},
                                            num_classes, run.ignore_index);
        out.per_image_miou[i] = one.miou;
        log_info("eval " + images[i] + ": mIoU " + fmt_real(one.miou));
    });
    return out;
}

} // namespace

SurgeryConfig preset_surgery(const std::string& name) {
    SurgeryConfig s;
    if (name == "vanilla") {
        s.attn_mode = AttnMode::qk;
        s.keep_residual = true;
        s.keep_ffn = true;
    } else if (name == "maskclip") {
        s.attn_mode = AttnMode::identity;
        s.keep_residual = false;
        s.keep_ffn = false;
    } else if (name == "sclip") {
        s.attn_mode = AttnMode::qq_plus_kk;
        s.keep_residual = true;
        s.keep_ffn = true;
    } else if (name == "clearclip") {
        s.attn_mode = AttnMode::qq;
        s.keep_residual = false;
        s.keep_ffn = false;
    } else {
        throw input_error("config", "unknown surgery preset '" + name + "'");
    }
    s.alpha = 1.0f;
    s.beta = 0.0f;
    return s;
}

void run_segment(const RunConfig& run, const std::vector<std::string>& images) {
    validate_common(run);
    require_images(images);
    check_unique_stems(images);
    const LoadedModel model = load_model(run, true);
    fs::create_directories(run.out_dir);

    struct Entry {
        std::string label_path, logits_path;
        int64_t grid_h = 0, grid_w = 0;
        size_t windows = 0;
        double seconds = 0.0;
    };
    std::vector<Entry> entries(images.size());
    parallel_for(run.jobs, images.size(), [&](size_t i) {
        const auto t0 = std::chrono::steady_clock::now();
        const ImageU8 image = load_image(images[i]);
        const SegmentationResult seg = segment_image(image, model.encoder, model.text, run.surgery, run.seg);
        Entry& e = entries[i];
        e.grid_h = seg.height / model.config.patch_size;
        e.grid_w = seg.width / model.config.patch_size;
        e.windows = plan_windows(seg.height, seg.width, run.seg.crop, run.seg.stride).windows.size();

        ImageU8 label_img;
        label_img.height = seg.height;
        label_img.width = seg.width;
        label_img.channels = 1;
        label_img.pixels.resize(static_cast<size_t>(seg.height * seg.width));
        for (size_t p = 0; p < label_img.pixels.size(); ++p)
            label_img.pixels[p] = static_cast<uint8_t>(seg.labels[p]);
        e.label_path = (fs::path(run.out_dir) / (output_stem(images[i]) + "_label.png")).string();
        write_png(e.label_path, label_img);

        if (run.dump_logits) {
            TensorArchive dump;
            dump.tensors.emplace("logits", seg.logits);
            e.logits_path = (fs::path(run.out_dir) / (output_stem(images[i]) + "_logits.safetensors")).string();
            write_safetensors(e.logits_path, dump);
        }
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log_info("segment " + images[i] + " -> " + e.label_path + " (" + fmt_real(e.seconds) + "s)");
    });

    json manifest{{"schema_version", kSchemaVersion},
                  {"command", "segment"},
                  {"checkpoint", run.checkpoint},
                  {"text_emb", run.text_emb},
                  {"surgery", surgery_json(run.surgery)},
                  {"params", params_json(run.seg)},
                  {"classes", model.text.class_names}};
    json jimages = json::array();
    for (size_t i = 0; i < images.size(); ++i) {
        const Entry& e = entries[i];
        json je{{"input", images[i]},
                {"label_png", e.label_path},
                {"grid", {e.grid_h, e.grid_w}},
                {"windows", e.windows},
                {"seconds", e.seconds}};
        if (run.dump_logits) je["logits"] = e.logits_path;
        jimages.push_back(je);
    }
    manifest["images"] = jimages;
    write_text_atomic((fs::path(run.out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

void run_eval(const RunConfig& run, const std::vector<std::string>& images,
              const std::vector<std::string>& truths) {
    validate_common(run);
    require_images(images);
    if (images.size() != truths.size())
        throw input_error("config", std::to_string(images.size()) + " images vs " +
                                        std::to_string(truths.size()) + " ground-truth maps");
    for (const auto& p : truths) require_file(p, "ground truth");
    const LoadedModel model = load_model(run, true);
    fs::create_directories(run.out_dir);

    const EvalOutcome outcome = eval_pairs(model, run, images, truths);
    const int num_classes = static_cast<int>(model.text.rows.dim(0));
    const MIoUReport report = compute_miou(outcome.predictions, outcome.truths, num_classes, run.ignore_index);

    std::string csv = "schema_version,image,miou\n";
    for (size_t i = 0; i < images.size(); ++i)
        csv += std::to_string(kSchemaVersion) + "," + images[i] + "," + fmt_real(outcome.per_image_miou[i]) + "\n";
    write_text_atomic((fs::path(run.out_dir) / "eval.csv").string(), csv);

    json per_class = json::array();
    for (int c = 0; c < num_classes; ++c)
        per_class.push_back(json{{"class", model.text.class_names[static_cast<size_t>(c)]},
                                 {"iou", report.valid[static_cast<size_t>(c)] ? json(report.iou[static_cast<size_t>(c)]) : json()},
                                 {"present", static_cast<bool>(report.valid[static_cast<size_t>(c)])}});
    json jreport{{"schema_version", kSchemaVersion},
                 {"command", "eval"},
                 {"checkpoint", run.checkpoint},
                 {"text_emb", run.text_emb},
                 {"surgery", surgery_json(run.surgery)},
                 {"params", params_json(run.seg)},
                 {"images", images.size()},
                 {"ignored_pixels", report.ignored_pixels},
                 {"miou", report.miou},
                 {"per_class", per_class}};
    write_text_atomic((fs::path(run.out_dir) / "report.json").string(), jreport.dump(2) + "\n");
    log_info("eval: mIoU " + fmt_real(report.miou) + " over " + std::to_string(images.size()) + " images");
}

void run_stats(const RunConfig& run, const std::vector<std::string>& images) {
    validate_common(run);
    require_images(images);
    const LoadedModel model = load_model(run, false);
    fs::create_directories(run.out_dir);

    std::vector<std::vector<StatsRecord>> per_image(images.size());
    parallel_for(run.jobs, images.size(), [&](size_t i) {
        const ImageU8 image = load_image(images[i]);
        const Tensor pixels = preprocess_image(image, run.seg.shorter_side, model.config.patch_size,
                                               run.seg.mean, run.seg.std);
        // whole-image single pass; stats do not window
        const EncodeResult enc = model.encoder.encode_dense(pixels, &run.surgery, true);
        per_image[i] = layer_report(enc.traces, run.include_class_token);
        log_info("stats " + images[i] + ": " + std::to_string(per_image[i].size()) + " records");
    });

    const size_t rows = per_image.front().size();
    for (const auto& recs : per_image)
        if (recs.size() != rows)
            throw input_error("stats", "images produced differing record counts; mixed checkpoints?");

    const size_t dims = per_image.front().front().channel_means.size();
    std::string csv = "schema_version,layer,branch,entropy,fro_norm,max";
    for (size_t j = 0; j < dims; ++j) csv += ",cm_" + std::to_string(j);
    csv += "\n";
    for (size_t r = 0; r < rows; ++r) {
        double entropy = 0.0, fro = 0.0, mx = 0.0;
        std::vector<double> cm(dims, 0.0);
        for (const auto& recs : per_image) {
            entropy += recs[r].entropy;
            fro += recs[r].fro_norm;
            mx += recs[r].max_value;
            for (size_t j = 0; j < dims; ++j) cm[j] += recs[r].channel_means[j];
        }
        const double n = static_cast<double>(per_image.size());
        csv += std::to_string(kSchemaVersion) + "," + std::to_string(per_image.front()[r].layer) + "," +
               branch_name(per_image.front()[r].branch) + "," + fmt_real(entropy / n) + "," +
               fmt_real(fro / n) + "," + fmt_real(mx / n);
        for (size_t j = 0; j < dims; ++j) csv += "," + fmt_real(cm[j] / n);
        csv += "\n";
    }
    write_text_atomic((fs::path(run.out_dir) / "stats.csv").string(), csv);
    log_info("stats: wrote " + std::to_string(rows) + " rows");
}

void run_ablate(const RunConfig& run, const std::vector<std::string>& images,
                const std::vector<std::string>& truths, const AblateGrid& grid) {
    validate_common(run);
    require_images(images);
    if (images.size() != truths.size())
        throw input_error("config", std::to_string(images.size()) + " images vs " +
                                        std::to_string(truths.size()) + " ground-truth maps");
    for (const auto& p : truths) require_file(p, "ground truth");
    if (grid.attn.empty() || grid.residual.empty() || grid.ffn.empty() || grid.alpha.empty() || grid.beta.empty())
        throw input_error("config", "every ablation axis needs at least one value");
    const LoadedModel model = load_model(run, true);
    fs::create_directories(run.out_dir);

    const std::string csv_path = (fs::path(run.out_dir) / "ablate.csv").string();
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw input_error("output", "cannot write " + csv_path);
    csv << "schema_version,attn,residual,ffn,alpha,beta,miou\n" << std::flush;

    const int num_classes = static_cast<int>(model.text.rows.dim(0));
    for (const AttnMode mode : grid.attn)
        for (const bool residual : grid.residual)
            for (const bool ffn : grid.ffn)
                for (const float alpha : grid.alpha)
                    for (const float beta : grid.beta) {
                        RunConfig point = run;
                        point.surgery.attn_mode = mode;
                        point.surgery.keep_residual = residual;
                        point.surgery.keep_ffn = ffn;
                        point.surgery.alpha = alpha;
                        point.surgery.beta = beta;
                        validate_common(point);
                        const EvalOutcome outcome = eval_pairs(model, point, images, truths);
                        const MIoUReport report =
                            compute_miou(outcome.predictions, outcome.truths, num_classes, run.ignore_index);
                        csv << kSchemaVersion << "," << attn_mode_name(mode) << "," << (residual ? 1 : 0) << ","
                            << (ffn ? 1 : 0) << "," << fmt_real(alpha) << "," << fmt_real(beta) << ","
                            << fmt_real(report.miou) << "\n"
                            << std::flush; // keep finished rows on failure
                        log_info("ablate " + attn_mode_name(mode) + " residual=" + std::to_string(residual) +
                                 " ffn=" + std::to_string(ffn) + " alpha=" + fmt_real(alpha) + " beta=" +
                                 fmt_real(beta) + ": mIoU " + fmt_real(report.miou));
                    }
}

void write_fixture_bundle(const std::string& out_dir, const FixtureSpec& spec) {
    fs::create_directories(out_dir);
    const VitWeights weights = gen_fixture_checkpoint(spec.seed, spec.config);
    save_checkpoint((fs::path(out_dir) / "checkpoint.safetensors").string(), spec.config, weights);
    const TextEmbeddings text = gen_fixture_text(spec.seed + 1, spec.num_classes, spec.config.embed_dim);
    save_text_embeddings((fs::path(out_dir) / "text.safetensors").string(), text);
    write_png((fs::path(out_dir) / "image.png").string(),
              gen_fixture_image(spec.seed + 2, spec.image_height, spec.image_width));
    log_info("fixture bundle written to " + out_dir);
}

} // namespace clearseg

#include "clearseg/checkpoint.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "clearseg/errors.hpp"
#include "clearseg/prng.hpp"
#include "clearseg/safetensors.hpp"

namespace clearseg {

namespace {

using nlohmann::json;

std::string block_key(int i, const char* suffix) {
    return "visual.transformer.resblocks." + std::to_string(i) + "." + suffix;
}

struct ArchiveView {
    const TensorArchive& archive;
    const std::map<std::string, std::string>& key_map;
    const std::string& path;

    std::string resolve(const std::string& key) const {
        auto it = key_map.find(key);
        return it == key_map.end() ? key : it->second;
    }

    bool has(const std::string& key) const {
        return archive.tensors.count(resolve(key)) > 0;
    }

    const Tensor& get(const std::string& key) const {
        const std::string actual = resolve(key);
        auto it = archive.tensors.find(actual);
        if (it == archive.tensors.end())
            throw checkpoint_error("checkpoint", path + ": missing tensor " + actual +
                                                     (actual == key ? "" : " (for " + key + ")"));
        return it->second;
    }

    Tensor expect(const std::string& key, const std::vector<int64_t>& shape) const {
        Tensor t = get(key);
        if (t.shape != shape) {
            Tensor want;
            want.shape = shape;
            throw checkpoint_error("checkpoint", path + ": " + resolve(key) + " has shape " + t.shape_str() +
                                                     ", expected " + want.shape_str());
        }
        return t;
    }
};

Tensor slice_rows(const Tensor& t, int64_t begin, int64_t end) {
    const int64_t cols = t.dim(1);
    Tensor out({end - begin, cols});
    std::copy(t.ptr() + begin * cols, t.ptr() + end * cols, out.ptr());
    return out;
}

Tensor slice_vec(const Tensor& t, int64_t begin, int64_t end) {
    Tensor out({end - begin});
    std::copy(t.ptr() + begin, t.ptr() + end, out.ptr());
    return out;
}

std::string labels_path_for(const std::string& path) {
    std::filesystem::path p(path);
    p.replace_extension();
    return p.string() + ".labels.json";
}

Tensor random_tensor(SplitMix64& rng, std::vector<int64_t> shape, float scale, float offset = 0.0f) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = offset + rng.next_symmetric(scale);
    return t;
}

} // namespace

std::pair<VitConfig, VitWeights> load_checkpoint(
    const std::string& path, const std::map<std::string, std::string>& key_map) {
    const TensorArchive archive = read_safetensors(path);
    const ArchiveView view{archive, key_map, path};

    const Tensor& cls = view.get("visual.class_embedding");
    if (cls.rank() != 1)
        throw checkpoint_error("checkpoint", path + ": visual.class_embedding must be rank 1, got " + cls.shape_str());
    const int64_t d = cls.dim(0);

    const Tensor& conv = view.get("visual.conv1.weight");
    if (conv.rank() != 4 || conv.dim(0) != d || conv.dim(1) != 3 || conv.dim(2) != conv.dim(3))
        throw checkpoint_error("checkpoint", path + ": visual.conv1.weight has shape " + conv.shape_str());
    const int64_t patch = conv.dim(2);

    const Tensor& pos = view.get("visual.positional_embedding");
    if (pos.rank() != 2 || pos.dim(1) != d || pos.dim(0) < 2)
        throw checkpoint_error("checkpoint", path + ": visual.positional_embedding has shape " + pos.shape_str());
    const int64_t hw = pos.dim(0) - 1;
    const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(hw))));
    if (side * side != hw)
        throw checkpoint_error("checkpoint", path + ": positional grid of " + std::to_string(hw) + " tokens is not square");

    const Tensor& proj = view.get("visual.proj");
    if (proj.rank() != 2 || proj.dim(0) != d)
        throw checkpoint_error("checkpoint", path + ": visual.proj has shape " + proj.shape_str());

    int layers = 0;
    while (view.has(block_key(layers, "ln_1.weight"))) ++layers;
    if (layers == 0) throw checkpoint_error("checkpoint", path + ": no transformer blocks found");

    VitConfig config;
    config.width = static_cast<int>(d);
    config.patch_size = static_cast<int>(patch);
    config.image_size = static_cast<int>(side * patch);
    config.layers = layers;
    config.embed_dim = static_cast<int>(proj.dim(1));

    auto meta = [&](const char* key) -> std::optional<std::string> {
        auto it = archive.metadata.find(key);
        if (it == archive.metadata.end()) return std::nullopt;
        return it->second;
    };
    if (auto h = meta("heads")) {
        config.heads = std::stoi(*h);
    } else if (d % 64 == 0) {
        config.heads = static_cast<int>(d / 64); // CLIP family uses 64-dim heads
    } else {
        throw checkpoint_error("checkpoint", path + ": cannot infer head count for width " + std::to_string(d) +
                                                 "; add 'heads' to archive metadata");
    }
    if (config.heads <= 0 || d % config.heads != 0)
        throw checkpoint_error("checkpoint", path + ": width " + std::to_string(d) + " not divisible by " +
                                                 std::to_string(config.heads) + " heads");
    if (auto g = meta("gelu")) {
        if (*g == "quick") config.gelu_variant = GeluVariant::quick;
        else if (*g == "exact") config.gelu_variant = GeluVariant::exact;
        else throw checkpoint_error("checkpoint", path + ": unknown gelu variant '" + *g + "'");
    }

    VitWeights w;
    w.class_embedding = cls;
    w.patch_kernel = conv;
    w.positional_embedding = pos;
    w.proj = proj;
    if (view.has("visual.ln_pre.weight") || view.has("visual.ln_pre.bias")) {
        w.has_pre_norm = true;
        w.pre_gamma = view.expect("visual.ln_pre.weight", {d});
        w.pre_beta = view.expect("visual.ln_pre.bias", {d});
    }
    w.post_gamma = view.expect("visual.ln_post.weight", {d});
    w.post_beta = view.expect("visual.ln_post.bias", {d});

    w.blocks.resize(static_cast<size_t>(layers));
    for (int i = 0; i < layers; ++i) {
        BlockWeights& b = w.blocks[static_cast<size_t>(i)];
        b.ln1_gamma = view.expect(block_key(i, "ln_1.weight"), {d});
        b.ln1_beta = view.expect(block_key(i, "ln_1.bias"), {d});
        const Tensor in_w = view.expect(block_key(i, "attn.in_proj_weight"), {3 * d, d});
        const Tensor in_b = view.expect(block_key(i, "attn.in_proj_bias"), {3 * d});
        b.wq = slice_rows(in_w, 0, d);
        b.wk = slice_rows(in_w, d, 2 * d);
        b.wv = slice_rows(in_w, 2 * d, 3 * d);
        b.bq = slice_vec(in_b, 0, d);
        b.bk = slice_vec(in_b, d, 2 * d);
        b.bv = slice_vec(in_b, 2 * d, 3 * d);
        b.wo = view.expect(block_key(i, "attn.out_proj.weight"), {d, d});
        b.bo = view.expect(block_key(i, "attn.out_proj.bias"), {d});
        b.ln2_gamma = view.expect(block_key(i, "ln_2.weight"), {d});
        b.ln2_beta = view.expect(block_key(i, "ln_2.bias"), {d});
        const Tensor& w1 = view.get(block_key(i, "mlp.c_fc.weight"));
        if (w1.rank() != 2 || w1.dim(1) != d)
            throw checkpoint_error("checkpoint", path + ": " + block_key(i, "mlp.c_fc.weight") + " has shape " + w1.shape_str());
        const int64_t ff = w1.dim(0);
        b.ffn_w1 = w1;
        b.ffn_b1 = view.expect(block_key(i, "mlp.c_fc.bias"), {ff});
        b.ffn_w2 = view.expect(block_key(i, "mlp.c_proj.weight"), {d, ff});
        b.ffn_b2 = view.expect(block_key(i, "mlp.c_proj.bias"), {d});
    }
    return {config, w};
}

void save_checkpoint(const std::string& path, const VitConfig& config, const VitWeights& weights) {
    TensorArchive archive;
    archive.metadata["heads"] = std::to_string(config.heads);
    archive.metadata["gelu"] = config.gelu_variant == GeluVariant::quick ? "quick" : "exact";
    auto put = [&](const std::string& key, const Tensor& t) { archive.tensors.emplace(key, t); };
    put("visual.class_embedding", weights.class_embedding);
    put("visual.conv1.weight", weights.patch_kernel);
    put("visual.positional_embedding", weights.positional_embedding);
    if (weights.has_pre_norm) {
        put("visual.ln_pre.weight", weights.pre_gamma);
        put("visual.ln_pre.bias", weights.pre_beta);
    }
    put("visual.ln_post.weight", weights.post_gamma);
    put("visual.ln_post.bias", weights.post_beta);
    put("visual.proj", weights.proj);
    const int64_t d = weights.class_embedding.dim(0);
    for (size_t i = 0; i < weights.blocks.size(); ++i) {
        const BlockWeights& b = weights.blocks[i];
        const int bi = static_cast<int>(i);
        Tensor in_w({3 * d, d});
        std::copy(b.wq.data.begin(), b.wq.data.end(), in_w.ptr());
        std::copy(b.wk.data.begin(), b.wk.data.end(), in_w.ptr() + d * d);
        std::copy(b.wv.data.begin(), b.wv.data.end(), in_w.ptr() + 2 * d * d);
        Tensor in_b({3 * d});
        std::copy(b.bq.data.begin(), b.bq.data.end(), in_b.ptr());
        std::copy(b.bk.data.begin(), b.bk.data.end(), in_b.ptr() + d);
        std::copy(b.bv.data.begin(), b.bv.data.end(), in_b.ptr() + 2 * d);
        put(block_key(bi, "ln_1.weight"), b.ln1_gamma);
        put(block_key(bi, "ln_1.bias"), b.ln1_beta);
        put(block_key(bi, "attn.in_proj_weight"), in_w);
        put(block_key(bi, "attn.in_proj_bias"), in_b);
        put(block_key(bi, "attn.out_proj.weight"), b.wo);
        put(block_key(bi, "attn.out_proj.bias"), b.bo);
        put(block_key(bi, "ln_2.weight"), b.ln2_gamma);
        put(block_key(bi, "ln_2.bias"), b.ln2_beta);
        put(block_key(bi, "mlp.c_fc.weight"), b.ffn_w1);
        put(block_key(bi, "mlp.c_fc.bias"), b.ffn_b1);
        put(block_key(bi, "mlp.c_proj.weight"), b.ffn_w2);
        put(block_key(bi, "mlp.c_proj.bias"), b.ffn_b2);
    }
    write_safetensors(path, archive);
}

TextEmbeddings load_text_embeddings(const std::string& path) {
    const TensorArchive archive = read_safetensors(path);
    const Tensor* rows = nullptr;
    if (auto it = archive.tensors.find("text_embeddings"); it != archive.tensors.end()) {
        rows = &it->second;
    } else {
        for (const auto& [name, t] : archive.tensors)
            if (t.rank() == 2) {
                if (rows) throw checkpoint_error("text-emb", path + ": multiple rank-2 tensors; name one 'text_embeddings'");
                rows = &t;
            }
    }
    if (!rows || rows->rank() != 2)
        throw checkpoint_error("text-emb", path + ": no [classes,embed_dim] tensor found");

    TextEmbeddings emb;
    emb.rows = *rows;
    const int64_t c = emb.rows.dim(0), d = emb.rows.dim(1);
    for (int64_t i = 0; i < c; ++i) {
        float* row = emb.rows.ptr() + i * d;
        float norm_sq = 0.0f;
        for (int64_t j = 0; j < d; ++j) norm_sq += row[j] * row[j];
        if (!(norm_sq > 0.0f) || !std::isfinite(norm_sq))
            throw degenerate_error("text-emb", path + ": row " + std::to_string(i) + " has zero or non-finite norm");
        const float inv = 1.0f / std::sqrt(norm_sq);
        for (int64_t j = 0; j < d; ++j) row[j] *= inv;
    }

    const std::string labels_path = labels_path_for(path);
    std::ifstream in(labels_path);
    if (!in) throw input_error("text-emb", "missing class-name sidecar " + labels_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw input_error("text-emb", labels_path + ": " + e.what());
    }
    if (!j.is_array())
        throw input_error("text-emb", labels_path + ": expected a JSON array of class names");
    emb.class_names = j.get<std::vector<std::string>>();
    if (static_cast<int64_t>(emb.class_names.size()) != c)
        throw input_error("text-emb", labels_path + ": " + std::to_string(emb.class_names.size()) +
                                          " names for " + std::to_string(c) + " embedding rows");
    return emb;
}

void save_text_embeddings(const std::string& path, const TextEmbeddings& emb) {
    TensorArchive archive;
    archive.tensors.emplace("text_embeddings", emb.rows);
    write_safetensors(path, archive);
    const std::string labels_path = labels_path_for(path);
    const std::string tmp = labels_path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw input_error("text-emb", "cannot write " + tmp);
        out << json(emb.class_names).dump(2) << "\n";
    }
    std::filesystem::rename(tmp, labels_path);
}

VitWeights gen_fixture_checkpoint(uint64_t seed, const VitConfig& config) {
    if (config.width <= 0 || config.heads <= 0 || config.width % config.heads != 0)
        throw input_error("fixture", "width must be a positive multiple of heads");
    if (config.image_size <= 0 || config.patch_size <= 0 || config.image_size % config.patch_size != 0)
        throw input_error("fixture", "image_size must be a positive multiple of patch_size");
    SplitMix64 rng(seed);
    const int64_t d = config.width;
    const int64_t p = config.patch_size;
    const int64_t side = config.image_size / config.patch_size;
    const int64_t ff = 4 * d;
    const float s = 0.02f;

    VitWeights w;
    w.class_embedding = random_tensor(rng, {d}, s);
    w.patch_kernel = random_tensor(rng, {d, 3, p, p}, s);
    w.positional_embedding = random_tensor(rng, {1 + side * side, d}, s);
    w.has_pre_norm = true;
    w.pre_gamma = random_tensor(rng, {d}, s, 1.0f);
    w.pre_beta = random_tensor(rng, {d}, s);
    w.blocks.resize(static_cast<size_t>(config.layers));
    for (auto& b : w.blocks) {
        b.ln1_gamma = random_tensor(rng, {d}, s, 1.0f);
        b.ln1_beta = random_tensor(rng, {d}, s);
        b.wq = random_tensor(rng, {d, d}, s);
        b.bq = random_tensor(rng, {d}, s);
        b.wk = random_tensor(rng, {d, d}, s);
        b.bk = random_tensor(rng, {d}, s);
        b.wv = random_tensor(rng, {d, d}, s);
        b.bv = random_tensor(rng, {d}, s);
        b.wo = random_tensor(rng, {d, d}, s);
        b.bo = random_tensor(rng, {d}, s);
        b.ln2_gamma = random_tensor(rng, {d}, s, 1.0f);
        b.ln2_beta = random_tensor(rng, {d}, s);
        b.ffn_w1 = random_tensor(rng, {ff, d}, s);
        b.ffn_b1 = random_tensor(rng, {ff}, s);
        b.ffn_w2 = random_tensor(rng, {d, ff}, s);
        b.ffn_b2 = random_tensor(rng, {d}, s);
    }
    w.post_gamma = random_tensor(rng, {d}, s, 1.0f);
    w.post_beta = random_tensor(rng, {d}, s);
    w.proj = random_tensor(rng, {d, config.embed_dim}, s);
    return w;
}

TextEmbeddings gen_fixture_text(uint64_t seed, int num_classes, int embed_dim) {
    if (num_classes < 1 || embed_dim < 1)
        throw input_error("fixture", "need at least one class and one embedding dimension");
    SplitMix64 rng(seed);
    TextEmbeddings emb;
    emb.rows = Tensor({num_classes, embed_dim});
    for (int i = 0; i < num_classes; ++i) {
        float* row = emb.rows.ptr() + static_cast<int64_t>(i) * embed_dim;
        float norm_sq = 0.0f;
        while (norm_sq == 0.0f) {
            norm_sq = 0.0f;
            for (int j = 0; j < embed_dim; ++j) {
                row[j] = rng.next_symmetric(1.0f);
                norm_sq += row[j] * row[j];
            }
        }
        const float inv = 1.0f / std::sqrt(norm_sq);
        for (int j = 0; j < embed_dim; ++j) row[j] *= inv;
        emb.class_names.push_back("class_" + std::to_string(i));
    }
    return emb;
}

} // namespace clearseg

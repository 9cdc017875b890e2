#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clearseg/tensor.hpp"

namespace clearseg {

struct VitConfig {
    int image_size = 224;
    int patch_size = 16;
    int width = 768;      // token dimension d
    int layers = 12;
    int heads = 12;
    int embed_dim = 512;  // joint image/text dimension
    GeluVariant gelu_variant = GeluVariant::quick;
};

// Raw per-block parameters in archive layout: projection matrices are
// [out,in] and are applied as x @ W^T + b.
struct BlockWeights {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv; // each [d,d] / [d]
    Tensor wo, bo;                 // [d,d] / [d]
    Tensor ln2_gamma, ln2_beta;
    Tensor ffn_w1, ffn_b1;         // [ff,d] / [ff]
    Tensor ffn_w2, ffn_b2;         // [d,ff] / [d]
};

struct VitWeights {
    Tensor patch_kernel;           // [d,3,p,p], no bias
    Tensor class_embedding;        // [d]
    Tensor positional_embedding;   // [1+HW,d]
    bool has_pre_norm = false;     // present in OpenAI-style towers, optional here
    Tensor pre_gamma, pre_beta;
    std::vector<BlockWeights> blocks;
    Tensor post_gamma, post_beta;
    Tensor proj;                   // [d,embed_dim]
};

struct TextEmbeddings {
    Tensor rows;                          // [C,embed_dim], unit L2 rows
    std::vector<std::string> class_names; // length C
};

// Loads a visual tower from a safetensors archive using the reference key
// schema (visual.class_embedding, visual.transformer.resblocks.N..., ...).
// key_map remaps expected keys to archive keys for checkpoints that use a
// different naming family. Config is inferred from shapes; head count and
// gelu variant come from archive metadata when present, otherwise from the
// CLIP convention (64-dim heads, quick gelu). Missing tensors and shape
// mismatches raise checkpoint_error naming the key.
std::pair<VitConfig, VitWeights> load_checkpoint(
    const std::string& path, const std::map<std::string, std::string>& key_map = {});

// Writes weights back under the reference schema with metadata so that
// load_checkpoint(save_checkpoint(w)) reproduces w exactly. Deterministic.
void save_checkpoint(const std::string& path, const VitConfig& config, const VitWeights& weights);

// Text-side ingestion: a [C,embed_dim] float matrix (key "text_embeddings",
// or the archive's only rank-2 tensor) plus a sidecar JSON array of class
// names at <basename>.labels.json. Rows are re-normalized to unit L2 norm.
TextEmbeddings load_text_embeddings(const std::string& path);
void save_text_embeddings(const std::string& path, const TextEmbeddings& emb);

// Deterministic fixtures. All parameters are SplitMix64 draws scaled by 0.02;
// layer-norm gains are centered at 1 so normalization behaves like a trained
// network. Same seed and config give byte-identical archives on every
// platform.
VitWeights gen_fixture_checkpoint(uint64_t seed, const VitConfig& config);
TextEmbeddings gen_fixture_text(uint64_t seed, int num_classes, int embed_dim);

} // namespace clearseg

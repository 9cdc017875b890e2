#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clearseg/checkpoint.hpp"
#include "clearseg/tensor.hpp"

namespace clearseg {

// Attention rewiring for the surgered block. qk is the trained layout
// softmax(q k^T / sqrt(d_k)); the self-self modes swap in q q^T, k k^T or
// v v^T; identity skips mixing entirely; qq_plus_kk adds the qq and kk maps
// (rows then sum to 2, which is where the alpha=2 reading of that variant
// comes from).
enum class AttnMode { qk, qq, kk, vv, identity, qq_plus_kk };

std::string attn_mode_name(AttnMode mode);
AttnMode attn_mode_from_name(const std::string& name);

// Last-block rewrite. Defaults give the attention-only decomposition: qq
// attention, residual path dropped, FFN dropped, no scaling.
// beta in [0,1] zeroes the highest-mean residual channels before the
// summation (only meaningful with keep_residual).
struct SurgeryConfig {
    AttnMode attn_mode = AttnMode::qq;
    bool keep_residual = false;
    bool keep_ffn = false;
    float alpha = 1.0f;
    float beta = 0.0f;
};

// Branch capture for one block, all [1+hw, d]:
//   x_res  residual branch as summed (input X, channel-masked when beta > 0)
//   x_attn attention branch Proj(Attn v) + bias, before alpha
//   x_sum  x_res + alpha*x_attn, or alpha*x_attn without the residual
//   x_ffn  FFN branch on LN2(x_sum); empty tensor when the FFN is dropped
//   x_out  x_sum + x_ffn, or x_sum when the FFN is dropped
struct BlockTrace {
    Tensor x_res, x_attn, x_sum, x_ffn, x_out;
};

// Per-head row-stochastic mixing matrices, [heads, tokens, tokens].
struct AttnMaps {
    Tensor maps;
};

// Dense visual features: one row per patch, class token already dropped.
struct PatchEmbeddings {
    Tensor features; // [hw, embed_dim]
    int64_t grid_h = 0;
    int64_t grid_w = 0;
};

// q,k,v: [heads, tokens, d_k]. Returns the mixing matrix for `mode`.
AttnMaps attention_maps(const Tensor& q, const Tensor& k, const Tensor& v, AttnMode mode);

// Resamples a [1+HW, d] positional table to a gh x gw patch grid; the class
// row passes through and the square spatial part is resampled bilinearly
// (align-corners). Pass-through when the grid already matches.
Tensor interpolate_pos_embed(const Tensor& pos, int64_t grid_h, int64_t grid_w);

struct EncodeResult {
    PatchEmbeddings patches;
    std::vector<BlockTrace> traces; // empty unless tracing was requested
};

class Encoder {
public:
    Encoder(const VitConfig& config, const VitWeights& weights);

    const VitConfig& config() const { return config_; }

    // One transformer block. X: [1+hw, d]. surgery applies the rewired
    // block and is only ever passed for the final block.
    BlockTrace block_forward(const Tensor& x, int block_index, const SurgeryConfig* surgery) const;

    // Full dense forward for pixels [3,H,W] with H,W multiples of the patch
    // size: patch embedding, class token, interpolated positional table,
    // all blocks (surgery on the last), final layer norm and projection on
    // every token, class token dropped at the end.
    EncodeResult encode_dense(const Tensor& pixels, const SurgeryConfig* surgery, bool trace = false) const;

private:
    struct PreparedBlock {
        Tensor ln1_gamma, ln1_beta;
        Tensor wq_t, bq, wk_t, bk, wv_t, bv; // weights pre-transposed to [in,out]
        Tensor wo_t, bo;
        Tensor ln2_gamma, ln2_beta;
        Tensor ffn_w1_t, ffn_b1, ffn_w2_t, ffn_b2;
    };

    VitConfig config_;
    Tensor patch_kernel_t_; // [3*p*p, d]
    Tensor class_embedding_;
    Tensor positional_embedding_;
    bool has_pre_norm_ = false;
    Tensor pre_gamma_, pre_beta_;
    std::vector<PreparedBlock> blocks_;
    Tensor post_gamma_, post_beta_;
    Tensor proj_;
};

} // namespace clearseg

#include "clearseg/encoder.hpp"

#include <cmath>

#include "clearseg/errors.hpp"
#include "clearseg/stats.hpp"

namespace clearseg {

namespace {

constexpr float kLnEps = 1e-5f;

std::vector<Tensor> split_heads(const Tensor& x, int heads) {
    // x: [T,d] -> heads tensors [T,d/heads]
    const int64_t t = x.dim(0), d = x.dim(1);
    const int64_t dk = d / heads;
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor part({t, dk});
        for (int64_t i = 0; i < t; ++i)
            std::copy(x.ptr() + i * d + h * dk, x.ptr() + i * d + (h + 1) * dk, part.ptr() + i * dk);
        out.push_back(std::move(part));
    }
    return out;
}

Tensor merge_heads(const std::vector<Tensor>& parts) {
    const int heads = static_cast<int>(parts.size());
    const int64_t t = parts[0].dim(0), dk = parts[0].dim(1);
    Tensor out({t, static_cast<int64_t>(heads) * dk});
    for (int h = 0; h < heads; ++h)
        for (int64_t i = 0; i < t; ++i)
            std::copy(parts[static_cast<size_t>(h)].ptr() + i * dk,
                      parts[static_cast<size_t>(h)].ptr() + (i + 1) * dk,
                      out.ptr() + i * heads * dk + h * dk);
    return out;
}

Tensor head_map(const Tensor& q, const Tensor& k, const Tensor& v, AttnMode mode) {
    // q,k,v: [T,dk] for one head
    const int64_t t = q.dim(0), dk = q.dim(1);
    const float temp = 1.0f / std::sqrt(static_cast<float>(dk));
    switch (mode) {
        case AttnMode::qk: return softmax_rows(matmul(q, transpose2d(k)), temp);
        case AttnMode::qq: return softmax_rows(matmul(q, transpose2d(q)), temp);
        case AttnMode::kk: return softmax_rows(matmul(k, transpose2d(k)), temp);
        case AttnMode::vv: return softmax_rows(matmul(v, transpose2d(v)), temp);
        case AttnMode::identity: {
            Tensor eye({t, t});
            for (int64_t i = 0; i < t; ++i) eye.data[static_cast<size_t>(i * t + i)] = 1.0f;
            return eye;
        }
        case AttnMode::qq_plus_kk:
            return add(softmax_rows(matmul(q, transpose2d(q)), temp),
                       softmax_rows(matmul(k, transpose2d(k)), temp));
    }
    throw input_error("attention", "unknown attention mode");
}

} // namespace

std::string attn_mode_name(AttnMode mode) {
    switch (mode) {
        case AttnMode::qk: return "qk";
        case AttnMode::qq: return "qq";
        case AttnMode::kk: return "kk";
        case AttnMode::vv: return "vv";
        case AttnMode::identity: return "identity";
        case AttnMode::qq_plus_kk: return "qqkk";
    }
    return "?";
}

AttnMode attn_mode_from_name(const std::string& name) {
    if (name == "qk") return AttnMode::qk;
    if (name == "qq") return AttnMode::qq;
    if (name == "kk") return AttnMode::kk;
    if (name == "vv") return AttnMode::vv;
    if (name == "identity") return AttnMode::identity;
    if (name == "qqkk" || name == "qq_plus_kk") return AttnMode::qq_plus_kk;
    throw input_error("attention", "unknown attention mode '" + name + "'");
}

AttnMaps attention_maps(const Tensor& q, const Tensor& k, const Tensor& v, AttnMode mode) {
    if (q.rank() != 3 || !q.same_shape(k) || !q.same_shape(v))
        throw dimension_error("attention", "q,k,v must share a [heads,tokens,d_k] shape");
    const int64_t heads = q.dim(0), t = q.dim(1), dk = q.dim(2);
    AttnMaps out;
    out.maps = Tensor({heads, t, t});
    for (int64_t h = 0; h < heads; ++h) {
        Tensor qh({t, dk}), kh({t, dk}), vh({t, dk});
        std::copy(q.ptr() + h * t * dk, q.ptr() + (h + 1) * t * dk, qh.ptr());
        std::copy(k.ptr() + h * t * dk, k.ptr() + (h + 1) * t * dk, kh.ptr());
        std::copy(v.ptr() + h * t * dk, v.ptr() + (h + 1) * t * dk, vh.ptr());
        const Tensor m = head_map(qh, kh, vh, mode);
        std::copy(m.data.begin(), m.data.end(), out.maps.ptr() + h * t * t);
    }
    return out;
}

Tensor interpolate_pos_embed(const Tensor& pos, int64_t grid_h, int64_t grid_w) {
    if (pos.rank() != 2 || pos.dim(0) < 2)
        throw dimension_error("pos-embed", "positional table must be [1+HW,d], got " + pos.shape_str());
    if (grid_h < 1 || grid_w < 1) throw dimension_error("pos-embed", "target grid must be at least 1x1");
    const int64_t hw = pos.dim(0) - 1;
    const int64_t d = pos.dim(1);
    const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(hw))));
    if (side * side != hw)
        throw dimension_error("pos-embed", "source grid of " + std::to_string(hw) + " tokens is not square");
    Tensor out({1 + grid_h * grid_w, d});
    std::copy(pos.ptr(), pos.ptr() + d, out.ptr()); // class row untouched
    if (grid_h == side && grid_w == side) {
        std::copy(pos.ptr() + d, pos.ptr() + (1 + hw) * d, out.ptr() + d);
        return out;
    }
    Tensor grid;
    grid.shape = {side, side, d};
    grid.data.assign(pos.data.begin() + static_cast<size_t>(d), pos.data.end());
    const Tensor resized = interpolate_grid(grid, grid_h, grid_w);
    std::copy(resized.data.begin(), resized.data.end(), out.ptr() + d);
    return out;
}

Encoder::Encoder(const VitConfig& config, const VitWeights& weights) : config_(config) {
    const int64_t d = config.width;
    const int64_t p = config.patch_size;
    if (config.heads <= 0 || d % config.heads != 0)
        throw checkpoint_error("encoder", "width " + std::to_string(d) + " not divisible by heads");
    if (weights.class_embedding.shape != std::vector<int64_t>{d})
        throw checkpoint_error("encoder", "class embedding shape " + weights.class_embedding.shape_str());
    if (weights.patch_kernel.shape != std::vector<int64_t>{d, 3, p, p})
        throw checkpoint_error("encoder", "patch kernel shape " + weights.patch_kernel.shape_str());
    if (static_cast<int>(weights.blocks.size()) != config.layers)
        throw checkpoint_error("encoder", "block count does not match config");

    // conv kernel [d,3,p,p] -> [3*p*p, d] so a patch row vector can multiply it
    const int64_t k = 3 * p * p;
    patch_kernel_t_ = Tensor({k, d});
    for (int64_t o = 0; o < d; ++o)
        for (int64_t i = 0; i < k; ++i)
            patch_kernel_t_.data[static_cast<size_t>(i * d + o)] = weights.patch_kernel.data[static_cast<size_t>(o * k + i)];

    class_embedding_ = weights.class_embedding;
    positional_embedding_ = weights.positional_embedding;
    has_pre_norm_ = weights.has_pre_norm;
    if (has_pre_norm_) {
        pre_gamma_ = weights.pre_gamma;
        pre_beta_ = weights.pre_beta;
    }
    post_gamma_ = weights.post_gamma;
    post_beta_ = weights.post_beta;
    proj_ = weights.proj;

    blocks_.reserve(weights.blocks.size());
    for (const BlockWeights& b : weights.blocks) {
        PreparedBlock pb;
        pb.ln1_gamma = b.ln1_gamma;
        pb.ln1_beta = b.ln1_beta;
        pb.wq_t = transpose2d(b.wq);
        pb.wk_t = transpose2d(b.wk);
        pb.wv_t = transpose2d(b.wv);
        pb.wo_t = transpose2d(b.wo);
        pb.bq = b.bq;
        pb.bk = b.bk;
        pb.bv = b.bv;
        pb.bo = b.bo;
        pb.ln2_gamma = b.ln2_gamma;
        pb.ln2_beta = b.ln2_beta;
        pb.ffn_w1_t = transpose2d(b.ffn_w1);
        pb.ffn_b1 = b.ffn_b1;
        pb.ffn_w2_t = transpose2d(b.ffn_w2);
        pb.ffn_b2 = b.ffn_b2;
        blocks_.push_back(std::move(pb));
    }
}

BlockTrace Encoder::block_forward(const Tensor& x, int block_index, const SurgeryConfig* surgery) const {
    if (block_index < 0 || block_index >= static_cast<int>(blocks_.size()))
        throw input_error("encoder", "block index " + std::to_string(block_index) + " out of range");
    if (x.rank() != 2 || x.dim(1) != config_.width)
        throw dimension_error("encoder", "block input must be [tokens," + std::to_string(config_.width) + "], got " + x.shape_str());
    const PreparedBlock& b = blocks_[static_cast<size_t>(block_index)];
    const std::string where = "block " + std::to_string(block_index);
    const AttnMode mode = surgery ? surgery->attn_mode : AttnMode::qk;
    const bool keep_residual = surgery ? surgery->keep_residual : true;
    const bool keep_ffn = surgery ? surgery->keep_ffn : true;
    const float alpha = surgery ? surgery->alpha : 1.0f;
    const float beta = surgery ? surgery->beta : 0.0f;

    BlockTrace trace;
    try {
        const Tensor ln1 = layer_norm(x, b.ln1_gamma, b.ln1_beta, kLnEps);
        const Tensor q = linear(ln1, b.wq_t, b.bq);
        const Tensor k = linear(ln1, b.wk_t, b.bk);
        const Tensor v = linear(ln1, b.wv_t, b.bv);
        const auto qh = split_heads(q, config_.heads);
        const auto kh = split_heads(k, config_.heads);
        const auto vh = split_heads(v, config_.heads);
        std::vector<Tensor> ctx(static_cast<size_t>(config_.heads));
        for (int h = 0; h < config_.heads; ++h) {
            const size_t hi = static_cast<size_t>(h);
            if (mode == AttnMode::identity) {
                ctx[hi] = vh[hi]; // mixing matrix is I, so Attn v == v bit for bit
            } else {
                ctx[hi] = matmul(head_map(qh[hi], kh[hi], vh[hi], mode), vh[hi]);
            }
        }
        trace.x_attn = linear(merge_heads(ctx), b.wo_t, b.bo);
        ensure_finite(trace.x_attn, where + " attention branch");
    } catch (const numeric_error& e) {
        throw numeric_error("numeric", where + " attention branch: " + std::string(e.what()));
    }

    trace.x_res = (keep_residual && beta > 0.0f) ? mask_top_channels(x, beta) : x;
    try {
        trace.x_sum = keep_residual ? add(trace.x_res, scale(trace.x_attn, alpha))
                                    : scale(trace.x_attn, alpha);
        ensure_finite(trace.x_sum, where + " residual sum");
    } catch (const numeric_error& e) {
        throw numeric_error("numeric", where + " residual sum: " + std::string(e.what()));
    }

    if (keep_ffn) {
        try {
            const Tensor ln2 = layer_norm(trace.x_sum, b.ln2_gamma, b.ln2_beta, kLnEps);
            const Tensor hidden = gelu(linear(ln2, b.ffn_w1_t, b.ffn_b1), config_.gelu_variant);
            trace.x_ffn = linear(hidden, b.ffn_w2_t, b.ffn_b2);
            ensure_finite(trace.x_ffn, where + " ffn branch");
        } catch (const numeric_error& e) {
            throw numeric_error("numeric", where + " ffn branch: " + std::string(e.what()));
        }
        trace.x_out = add(trace.x_sum, trace.x_ffn);
    } else {
        trace.x_out = trace.x_sum;
    }
    return trace;
}

EncodeResult Encoder::encode_dense(const Tensor& pixels, const SurgeryConfig* surgery, bool trace) const {
    if (pixels.rank() != 3 || pixels.dim(0) != 3)
        throw dimension_error("encoder", "pixels must be [3,H,W], got " + pixels.shape_str());
    const int64_t p = config_.patch_size;
    const int64_t h = pixels.dim(1), w = pixels.dim(2);
    if (h < p || w < p || h % p != 0 || w % p != 0)
        throw dimension_error("encoder", "image " + std::to_string(h) + "x" + std::to_string(w) +
                                             " is not a multiple of patch size " + std::to_string(p));
    const int64_t gh = h / p, gw = w / p;
    const int64_t hw = gh * gw;
    const int64_t d = config_.width;

    // patch extraction in (channel, py, px) order to match the conv kernel layout
    Tensor patches({hw, 3 * p * p});
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx) {
            float* row = patches.ptr() + (gy * gw + gx) * 3 * p * p;
            int64_t idx = 0;
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px)
                        row[idx++] = pixels.data[static_cast<size_t>((c * h + gy * p + py) * w + gx * p + px)];
        }
    const Tensor patch_tokens = matmul(patches, patch_kernel_t_);

    Tensor x({1 + hw, d});
    std::copy(class_embedding_.data.begin(), class_embedding_.data.end(), x.ptr());
    std::copy(patch_tokens.data.begin(), patch_tokens.data.end(), x.ptr() + d);
    x = add(x, interpolate_pos_embed(positional_embedding_, gh, gw));
    if (has_pre_norm_) x = layer_norm(x, pre_gamma_, pre_beta_, kLnEps);

    EncodeResult result;
    const int last = config_.layers - 1;
    for (int i = 0; i < config_.layers; ++i) {
        BlockTrace bt = block_forward(x, i, i == last ? surgery : nullptr);
        x = bt.x_out;
        if (trace) result.traces.push_back(std::move(bt));
    }

    const Tensor normed = layer_norm(x, post_gamma_, post_beta_, kLnEps);
    const Tensor projected = matmul(normed, proj_); // class token still attached

    result.patches.grid_h = gh;
    result.patches.grid_w = gw;
    result.patches.features = Tensor({hw, static_cast<int64_t>(config_.embed_dim)});
    std::copy(projected.data.begin() + static_cast<size_t>(config_.embed_dim), projected.data.end(),
              result.patches.features.ptr());
    return result;
}

} // namespace clearseg

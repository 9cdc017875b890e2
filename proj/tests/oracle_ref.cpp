#include "oracle_ref.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace refenc {

using clearseg::GeluVariant;
using clearseg::SurgeryConfig;
using clearseg::Tensor;
using clearseg::VitConfig;
using clearseg::VitWeights;

namespace {

constexpr float kEps = 1e-5f;

// x:[m,k] against an archive-layout weight w:[n,k], applied as x w^T + b.
Tensor apply_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(0);
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int64_t t = 0; t < k; ++t) acc += x.at2(i, t) * w.at2(j, t);
            out.at2(i, j) = acc + b.data[static_cast<size_t>(j)];
        }
    return out;
}

Tensor head_columns(const Tensor& x, int64_t head, int64_t dk) {
    const int64_t t = x.dim(0);
    Tensor out({t, dk});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < dk; ++j) out.at2(i, j) = x.at2(i, head * dk + j);
    return out;
}

// softmax(a b^T / sqrt(dk)) for one head.
Tensor mixing_softmax(const Tensor& a, const Tensor& b) {
    const int64_t t = a.dim(0), dk = a.dim(1);
    Tensor logits({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < t; ++j) {
            float acc = 0.0f;
            for (int64_t c = 0; c < dk; ++c) acc += a.at2(i, c) * b.at2(j, c);
            logits.at2(i, j) = acc;
        }
    return refenc::softmax_rows(logits, 1.0f / std::sqrt(static_cast<float>(dk)));
}

Tensor mixing_matrix(const Tensor& q, const Tensor& k, const Tensor& v, clearseg::AttnMode mode) {
    using clearseg::AttnMode;
    const int64_t t = q.dim(0);
    switch (mode) {
        case AttnMode::qk: return mixing_softmax(q, k);
        case AttnMode::qq: return mixing_softmax(q, q);
        case AttnMode::kk: return mixing_softmax(k, k);
        case AttnMode::vv: return mixing_softmax(v, v);
        case AttnMode::identity: {
            Tensor eye({t, t});
            for (int64_t i = 0; i < t; ++i) eye.at2(i, i) = 1.0f;
            return eye;
        }
        case AttnMode::qq_plus_kk: {
            Tensor a = mixing_softmax(q, q);
            const Tensor b = mixing_softmax(k, k);
            for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
            return a;
        }
    }
    throw std::logic_error("unknown attention mode");
}

// Zero the ceil(beta*d) channels with the highest token-mean; ties go to the
// lower channel index.
Tensor mask_channels(const Tensor& x, double beta) {
    const int64_t t = x.dim(0), d = x.dim(1);
    const auto count = static_cast<int64_t>(std::ceil(beta * static_cast<double>(d)));
    if (count <= 0) return x;
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += x.at2(i, j);
    std::vector<int64_t> order(static_cast<size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return mean[static_cast<size_t>(a)] > mean[static_cast<size_t>(b)]; });
    Tensor out = x;
    for (int64_t r = 0; r < std::min(count, d); ++r)
        for (int64_t i = 0; i < t; ++i) out.at2(i, order[static_cast<size_t>(r)]) = 0.0f;
    return out;
}

struct BlockOut {
    Tensor x;
};

BlockOut block(const Tensor& x_in, const clearseg::BlockWeights& bw, const VitConfig& cfg,
               const SurgeryConfig* surgery) {
    const int64_t t = x_in.dim(0), d = x_in.dim(1);
    const int64_t dk = d / cfg.heads;

    const Tensor ln1 = refenc::layer_norm(x_in, bw.ln1_gamma, bw.ln1_beta, kEps);
    const Tensor q = apply_linear(ln1, bw.wq, bw.bq);
    const Tensor k = apply_linear(ln1, bw.wk, bw.bk);
    const Tensor v = apply_linear(ln1, bw.wv, bw.bv);

    const clearseg::AttnMode mode = surgery ? surgery->attn_mode : clearseg::AttnMode::qk;
    Tensor mixed({t, d});
    for (int h = 0; h < cfg.heads; ++h) {
        const Tensor qh = head_columns(q, h, dk);
        const Tensor kh = head_columns(k, h, dk);
        const Tensor vh = head_columns(v, h, dk);
        const Tensor map = mixing_matrix(qh, kh, vh, mode);
        for (int64_t i = 0; i < t; ++i)
            for (int64_t c = 0; c < dk; ++c) {
                float acc = 0.0f;
                for (int64_t j = 0; j < t; ++j) acc += map.at2(i, j) * vh.at2(j, c);
                mixed.at2(i, h * dk + c) = acc;
            }
    }
    const Tensor x_attn = apply_linear(mixed, bw.wo, bw.bo);

    const bool keep_residual = surgery ? surgery->keep_residual : true;
    const bool keep_ffn = surgery ? surgery->keep_ffn : true;
    const float alpha = surgery ? surgery->alpha : 1.0f;
    const double beta = surgery ? surgery->beta : 0.0;

    Tensor x_sum({t, d});
    if (keep_residual) {
        const Tensor res = beta > 0.0 ? mask_channels(x_in, beta) : x_in;
        for (size_t i = 0; i < x_sum.data.size(); ++i)
            x_sum.data[i] = res.data[i] + alpha * x_attn.data[i];
    } else {
        for (size_t i = 0; i < x_sum.data.size(); ++i) x_sum.data[i] = alpha * x_attn.data[i];
    }

    if (!keep_ffn) return {x_sum};
    const Tensor ln2 = refenc::layer_norm(x_sum, bw.ln2_gamma, bw.ln2_beta, kEps);
    Tensor hidden = apply_linear(ln2, bw.ffn_w1, bw.ffn_b1);
    for (auto& hv : hidden.data) hv = gelu_value(hv, cfg.gelu_variant);
    const Tensor f = apply_linear(hidden, bw.ffn_w2, bw.ffn_b2);
    Tensor out({t, d});
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x_sum.data[i] + f.data[i];
    return {out};
}

} // namespace

Tensor matmul_naive(const Tensor& a, const Tensor& b) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int64_t t = 0; t < k; ++t) acc += a.at2(i, t) * b.at2(t, j);
            c.at2(i, j) = acc;
        }
    return c;
}

Tensor softmax_rows(const Tensor& x, float scale) {
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        float mx = x.at2(i, 0) * scale;
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x.at2(i, j) * scale);
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            const float e = std::exp(x.at2(i, j) * scale - mx);
            out.at2(i, j) = e;
            denom += e;
        }
        for (int64_t j = 0; j < n; ++j) out.at2(i, j) = static_cast<float>(out.at2(i, j) / denom);
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const int64_t d = x.shape.back();
    const int64_t rows = x.numel() / d;
    Tensor out;
    out.shape = x.shape;
    out.data.resize(x.data.size());
    for (int64_t i = 0; i < rows; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += x.data[static_cast<size_t>(i * d + j)];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = x.data[static_cast<size_t>(i * d + j)] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (int64_t j = 0; j < d; ++j) {
            const double norm = (x.data[static_cast<size_t>(i * d + j)] - mean) * inv;
            out.data[static_cast<size_t>(i * d + j)] =
                static_cast<float>(norm) * gamma.data[static_cast<size_t>(j)] + beta.data[static_cast<size_t>(j)];
        }
    }
    return out;
}

float gelu_value(float v, GeluVariant variant) {
    if (variant == GeluVariant::quick) return v / (1.0f + std::exp(-1.702f * v));
    return 0.5f * v * (1.0f + std::erf(v / std::sqrt(2.0f)));
}

Tensor resample_grid(const Tensor& grid, int64_t out_h, int64_t out_w) {
    const int64_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2);
    Tensor out({out_h, out_w, d});
    for (int64_t y = 0; y < out_h; ++y) {
        const double sy = (out_h > 1 && h > 1) ? static_cast<double>(y) * (h - 1) / (out_h - 1) : 0.0;
        const auto y0 = static_cast<int64_t>(std::floor(sy));
        const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
        const double fy = sy - static_cast<double>(y0);
        for (int64_t x = 0; x < out_w; ++x) {
            const double sx = (out_w > 1 && w > 1) ? static_cast<double>(x) * (w - 1) / (out_w - 1) : 0.0;
            const auto x0 = static_cast<int64_t>(std::floor(sx));
            const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
            const double fx = sx - static_cast<double>(x0);
            for (int64_t c = 0; c < d; ++c) {
                const double top = (1.0 - fx) * grid.at3(y0, x0, c) + fx * grid.at3(y0, x1, c);
                const double bot = (1.0 - fx) * grid.at3(y1, x0, c) + fx * grid.at3(y1, x1, c);
                out.at3(y, x, c) = static_cast<float>((1.0 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

Tensor encode_dense(const VitConfig& cfg, const VitWeights& w, const Tensor& pixels,
                    const SurgeryConfig* surgery) {
    const int64_t p = cfg.patch_size;
    const int64_t ih = pixels.dim(1), iw = pixels.dim(2);
    const int64_t gh = ih / p, gw = iw / p;
    const int64_t hw = gh * gw;
    const int64_t d = cfg.width;

    Tensor x({1 + hw, d});
    for (int64_t j = 0; j < d; ++j) x.at2(0, j) = w.class_embedding.data[static_cast<size_t>(j)];
    // conv-as-matmul: token value = sum over (c,py,px) of pixel * kernel[d,c,py,px]
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx)
            for (int64_t o = 0; o < d; ++o) {
                float acc = 0.0f;
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            acc += pixels.data[static_cast<size_t>((c * ih + gy * p + py) * iw + gx * p + px)] *
                                   w.patch_kernel.data[static_cast<size_t>(((o * 3 + c) * p + py) * p + px)];
                x.at2(1 + gy * gw + gx, o) = acc;
            }

    // positional table: class row direct, spatial rows resampled if needed
    const int64_t src_hw = w.positional_embedding.dim(0) - 1;
    const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(src_hw))));
    if (side == gh && side == gw) {
        for (int64_t i = 0; i < 1 + hw; ++i)
            for (int64_t j = 0; j < d; ++j) x.at2(i, j) += w.positional_embedding.at2(i, j);
    } else {
        Tensor grid({side, side, d});
        for (int64_t i = 0; i < src_hw; ++i)
            for (int64_t j = 0; j < d; ++j)
                grid.data[static_cast<size_t>(i * d + j)] = w.positional_embedding.at2(1 + i, j);
        const Tensor res = resample_grid(grid, gh, gw);
        for (int64_t j = 0; j < d; ++j) x.at2(0, j) += w.positional_embedding.at2(0, j);
        for (int64_t i = 0; i < hw; ++i)
            for (int64_t j = 0; j < d; ++j) x.at2(1 + i, j) += res.data[static_cast<size_t>(i * d + j)];
    }

    if (w.has_pre_norm) x = refenc::layer_norm(x, w.pre_gamma, w.pre_beta, kEps);

    const int last = cfg.layers - 1;
    for (int i = 0; i < cfg.layers; ++i)
        x = block(x, w.blocks[static_cast<size_t>(i)], cfg, i == last ? surgery : nullptr).x;

    const Tensor normed = refenc::layer_norm(x, w.post_gamma, w.post_beta, kEps);
    Tensor features({hw, static_cast<int64_t>(cfg.embed_dim)});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t e = 0; e < cfg.embed_dim; ++e) {
            float acc = 0.0f;
            for (int64_t j = 0; j < d; ++j) acc += normed.at2(1 + i, j) * w.proj.at2(j, e);
            features.at2(i, e) = acc;
        }
    return features;
}

double rel_fro(const Tensor& a, const Tensor& b) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        num += d * d;
        den += static_cast<double>(b.data[i]) * static_cast<double>(b.data[i]);
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

} // namespace refenc

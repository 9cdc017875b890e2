#include "clearseg/tensor.hpp"

#include <cmath>
#include <sstream>

#include "clearseg/errors.hpp"

namespace clearseg {

namespace {

int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw dimension_error("tensor", "negative dimension in shape");
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(checked_numel(shape)), 0.0f);
}

Tensor Tensor::from(std::vector<int64_t> s, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(s);
    if (checked_numel(t.shape) != static_cast<int64_t>(values.size()))
        throw dimension_error("tensor", "value count does not match shape");
    t.data = std::move(values);
    return t;
}

int64_t Tensor::numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw dimension_error("matmul", "expects rank-2 operands, got " + a.shape_str() + " x " + b.shape_str());
    if (a.dim(1) != b.dim(0))
        throw dimension_error("matmul", "inner dimensions differ: " + a.shape_str() + " x " + b.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    // Row-by-row saxpy: c[i,j] accumulates over ascending t, same bits as the
    // naive i,j,t loop, but the inner loop runs over independent accumulators.
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a.ptr() + i * k;
        float* crow = c.ptr() + i * n;
        for (int64_t t = 0; t < k; ++t) {
            const float av = arow[t];
            const float* brow = b.ptr() + t * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    ensure_finite(c, "matmul output");
    return c;
}

Tensor softmax_rows(const Tensor& a, float scale) {
    if (a.rank() != 2) throw dimension_error("softmax_rows", "expects rank-2 input, got " + a.shape_str());
    const int64_t m = a.dim(0), n = a.dim(1);
    if (n == 0) throw degenerate_error("softmax_rows", "empty rows");
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const float* row = a.ptr() + i * n;
        float* orow = out.ptr() + i * n;
        float mx = row[0] * scale;
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j] * scale);
        if (!std::isfinite(mx)) throw numeric_error("softmax_rows", "non-finite logits");
        float denom = 0.0f;
        for (int64_t j = 0; j < n; ++j) {
            const float e = std::exp(row[j] * scale - mx);
            orow[j] = e;
            denom += e;
        }
        for (int64_t j = 0; j < n; ++j) orow[j] /= denom;
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (x.rank() < 1) throw dimension_error("layer_norm", "scalar input");
    const int64_t d = x.shape.back();
    if (d == 0) throw degenerate_error("layer_norm", "empty feature dimension");
    if (gamma.numel() != d || beta.numel() != d)
        throw dimension_error("layer_norm", "gamma/beta length does not match feature dim " + std::to_string(d));
    const int64_t rows = x.numel() / d;
    Tensor out;
    out.shape = x.shape;
    out.data.resize(x.data.size());
    const float* g = gamma.ptr();
    const float* bb = beta.ptr();
    for (int64_t i = 0; i < rows; ++i) {
        const float* row = x.ptr() + i * d;
        float* orow = out.ptr() + i * d;
        float mean = 0.0f;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (int64_t j = 0; j < d; ++j) {
            const float c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<float>(d);
        const float inv = 1.0f / std::sqrt(var + eps);
        for (int64_t j = 0; j < d; ++j) orow[j] = (row[j] - mean) * inv * g[j] + bb[j];
    }
    ensure_finite(out, "layer_norm output");
    return out;
}

Tensor gelu(const Tensor& x, GeluVariant variant) {
    Tensor out;
    out.shape = x.shape;
    out.data.resize(x.data.size());
    const size_t n = x.data.size();
    if (variant == GeluVariant::quick) {
        for (size_t i = 0; i < n; ++i) {
            const float v = x.data[i];
            out.data[i] = v / (1.0f + std::exp(-1.702f * v));
        }
    } else {
        const float inv_sqrt2 = 0.7071067811865475f;
        for (size_t i = 0; i < n; ++i) {
            const float v = x.data[i];
            out.data[i] = 0.5f * v * (1.0f + std::erf(v * inv_sqrt2));
        }
    }
    return out;
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw dimension_error("cosine_matrix", "expects [m,d] x [n,d], got " + a.shape_str() + " x " + b.shape_str());
    const int64_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
    std::vector<float> na(static_cast<size_t>(m)), nb(static_cast<size_t>(n));
    for (int64_t i = 0; i < m; ++i) {
        float s = 0.0f;
        const float* row = a.ptr() + i * d;
        for (int64_t j = 0; j < d; ++j) s += row[j] * row[j];
        if (s <= 0.0f) throw degenerate_error("cosine_matrix", "zero row " + std::to_string(i) + " in left operand");
        na[static_cast<size_t>(i)] = std::sqrt(s);
    }
    for (int64_t i = 0; i < n; ++i) {
        float s = 0.0f;
        const float* row = b.ptr() + i * d;
        for (int64_t j = 0; j < d; ++j) s += row[j] * row[j];
        if (s <= 0.0f) throw degenerate_error("cosine_matrix", "zero row " + std::to_string(i) + " in right operand");
        nb[static_cast<size_t>(i)] = std::sqrt(s);
    }
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a.ptr() + i * d;
        float* crow = c.ptr() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const float* brow = b.ptr() + j * d;
            float dot = 0.0f;
            for (int64_t t = 0; t < d; ++t) dot += arow[t] * brow[t];
            crow[j] = dot / (na[static_cast<size_t>(i)] * nb[static_cast<size_t>(j)]);
        }
    }
    ensure_finite(c, "cosine_matrix output");
    return c;
}

Tensor interpolate_grid(const Tensor& grid, int64_t out_h, int64_t out_w) {
    if (grid.rank() != 3) throw dimension_error("interpolate_grid", "expects [h,w,d], got " + grid.shape_str());
    const int64_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2);
    if (h < 1 || w < 1) throw dimension_error("interpolate_grid", "source grid is empty");
    if (out_h < 1 || out_w < 1)
        throw dimension_error("interpolate_grid", "target size must be at least 1x1");
    Tensor out({out_h, out_w, d});
    for (int64_t y = 0; y < out_h; ++y) {
        // align-corners: endpoints map onto endpoints
        const float sy = (out_h == 1 || h == 1) ? 0.0f
                                                : static_cast<float>(y) * static_cast<float>(h - 1) / static_cast<float>(out_h - 1);
        const int64_t y0 = static_cast<int64_t>(sy);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const float fy = sy - static_cast<float>(y0);
        for (int64_t x = 0; x < out_w; ++x) {
            const float sx = (out_w == 1 || w == 1) ? 0.0f
                                                    : static_cast<float>(x) * static_cast<float>(w - 1) / static_cast<float>(out_w - 1);
            const int64_t x0 = static_cast<int64_t>(sx);
            const int64_t x1 = std::min(x0 + 1, w - 1);
            const float fx = sx - static_cast<float>(x0);
            const float w00 = (1.0f - fy) * (1.0f - fx);
            const float w01 = (1.0f - fy) * fx;
            const float w10 = fy * (1.0f - fx);
            const float w11 = fy * fx;
            const float* p00 = grid.ptr() + (y0 * w + x0) * d;
            const float* p01 = grid.ptr() + (y0 * w + x1) * d;
            const float* p10 = grid.ptr() + (y1 * w + x0) * d;
            const float* p11 = grid.ptr() + (y1 * w + x1) * d;
            float* op = out.ptr() + (y * out_w + x) * d;
            for (int64_t c = 0; c < d; ++c)
                op[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
        }
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& wt, const Tensor& bias) {
    Tensor y = matmul(x, wt);
    const int64_t m = y.dim(0), n = y.dim(1);
    if (bias.numel() != n)
        throw dimension_error("linear", "bias length " + std::to_string(bias.numel()) + " does not match out dim " + std::to_string(n));
    for (int64_t i = 0; i < m; ++i) {
        float* row = y.ptr() + i * n;
        const float* b = bias.ptr();
        for (int64_t j = 0; j < n; ++j) row[j] += b[j];
    }
    return y;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw dimension_error("transpose2d", "expects rank-2 input, got " + a.shape_str());
    const int64_t m = a.dim(0), n = a.dim(1);
    Tensor t({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) t.data[static_cast<size_t>(j * m + i)] = a.data[static_cast<size_t>(i * n + j)];
    return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw dimension_error("add", "shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    Tensor c;
    c.shape = a.shape;
    c.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

Tensor scale(const Tensor& a, float s) {
    Tensor c;
    c.shape = a.shape;
    c.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * s;
    return c;
}

void ensure_finite(const Tensor& t, const std::string& what) {
    for (float v : t.data)
        if (!std::isfinite(v)) throw numeric_error("numeric", "non-finite value in " + what);
}

} // namespace clearseg

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace clearseg {

// Dense row-major float32 tensor. Every kernel accumulates in float32 with a
// fixed ascending-index order, so the same inputs produce the same bits on
// every run; nothing here may be replaced by a BLAS call that reorders sums.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s);
    static Tensor from(std::vector<int64_t> s, std::vector<float> values);

    int64_t numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const;

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    // Convenience accessors for tests and small paths; hot loops index raw data.
    float& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    float at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
    float& at3(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    float at3(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
};

enum class GeluVariant { quick, exact };

// a:[m,k] x b:[k,n] -> [m,n]. Each output element is the ascending-k sum of
// products, identical bits to the textbook triple loop.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax of scale*a with per-row max subtraction. a:[m,n].
Tensor softmax_rows(const Tensor& a, float scale);

// Normalizes the last dimension: (x - mean) / sqrt(var + eps) * gamma + beta,
// with var the population variance (divide by d).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

// quick: x*sigmoid(1.702x) (OpenAI CLIP), exact: x*Phi(x) via erf.
Tensor gelu(const Tensor& x, GeluVariant variant);

// a:[m,d] x b:[n,d] -> [m,n] of cosine similarities. Zero rows are an error.
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

// Align-corners bilinear resampling of a [h,w,d] grid to [out_h,out_w,d].
Tensor interpolate_grid(const Tensor& grid, int64_t out_h, int64_t out_w);

// ---- plumbing used across modules ----

// x:[m,k] by a pre-transposed weight wt:[k,n] plus bias[n] broadcast per row.
// Bias is added after the full accumulation.
Tensor linear(const Tensor& x, const Tensor& wt, const Tensor& bias);

Tensor transpose2d(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);

// Throws numeric_error naming `what` if any element is NaN or Inf.
void ensure_finite(const Tensor& t, const std::string& what);

} // namespace clearseg

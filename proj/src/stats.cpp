#include "clearseg/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "clearseg/errors.hpp"

namespace clearseg {

namespace {

// Patch rows of a trace matrix [1+hw,d] (or the whole matrix when the class
// token is wanted).
Tensor select_tokens(const Tensor& x, bool include_class_token) {
    if (include_class_token) return x;
    const int64_t t = x.dim(0), d = x.dim(1);
    if (t < 2) throw degenerate_error("stats", "trace matrix has no patch tokens");
    Tensor out({t - 1, d});
    std::copy(x.data.begin() + static_cast<size_t>(d), x.data.end(), out.ptr());
    return out;
}

} // namespace

std::string branch_name(Branch b) {
    switch (b) {
        case Branch::res: return "res";
        case Branch::attn: return "attn";
        case Branch::sum: return "sum";
    }
    return "?";
}

double normalized_entropy(const Tensor& x) {
    const int64_t n = x.numel();
    if (n < 2) throw degenerate_error("stats", "entropy needs at least two elements (log normalizer is zero)");
    float mx = x.data[0];
    for (float v : x.data) mx = std::max(mx, v);
    if (!std::isfinite(mx)) throw numeric_error("stats", "non-finite values in entropy input");
    // joint softmax over all elements; accumulate in double so the 1e-6
    // contract holds for maps of any size
    double denom = 0.0;
    for (float v : x.data) denom += std::exp(static_cast<double>(v) - static_cast<double>(mx));
    const double log_denom = std::log(denom);
    double acc = 0.0; // sum of p * log p, shifted domain
    for (float v : x.data) {
        const double z = static_cast<double>(v) - static_cast<double>(mx);
        const double p = std::exp(z) / denom;
        if (p > 0.0) acc += p * (z - log_denom);
    }
    return -acc / std::log(static_cast<double>(n));
}

double frobenius_norm(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
}

double max_activation(const Tensor& x) {
    if (x.numel() == 0) throw degenerate_error("stats", "max of an empty map");
    float mx = x.data[0];
    for (float v : x.data) mx = std::max(mx, v);
    return static_cast<double>(mx);
}

std::vector<double> channel_mean_profile(const Tensor& x) {
    if (x.rank() != 2) throw dimension_error("stats", "channel profile expects [tokens,d], got " + x.shape_str());
    const int64_t t = x.dim(0), d = x.dim(1);
    if (t == 0 || d == 0) throw degenerate_error("stats", "channel profile of an empty map");
    std::vector<double> means(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < t; ++i) {
        const float* row = x.ptr() + i * d;
        for (int64_t j = 0; j < d; ++j) means[static_cast<size_t>(j)] += static_cast<double>(row[j]);
    }
    double peak = 0.0;
    for (auto& m : means) {
        m /= static_cast<double>(t);
        peak = std::max(peak, std::abs(m));
    }
    if (peak == 0.0) throw degenerate_error("stats", "channel profile of an all-zero map");
    for (auto& m : means) m /= peak;
    std::sort(means.begin(), means.end());
    return means;
}

Tensor mask_top_channels(const Tensor& x, double beta) {
    if (x.rank() != 2) throw dimension_error("stats", "channel mask expects [tokens,d], got " + x.shape_str());
    if (!(beta >= 0.0 && beta <= 1.0)) throw input_error("stats", "beta must be in [0,1]");
    const int64_t t = x.dim(0), d = x.dim(1);
    const int64_t count = static_cast<int64_t>(std::ceil(beta * static_cast<double>(d)));
    if (count == 0) return x;
    std::vector<double> means(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < t; ++i) {
        const float* row = x.ptr() + i * d;
        for (int64_t j = 0; j < d; ++j) means[static_cast<size_t>(j)] += static_cast<double>(row[j]);
    }
    std::vector<int64_t> order(static_cast<size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        return means[static_cast<size_t>(a)] > means[static_cast<size_t>(b)];
    });
    Tensor out = x;
    for (int64_t r = 0; r < std::min(count, d); ++r) {
        const int64_t ch = order[static_cast<size_t>(r)];
        for (int64_t i = 0; i < t; ++i) out.data[static_cast<size_t>(i * d + ch)] = 0.0f;
    }
    return out;
}

std::vector<StatsRecord> layer_report(const std::vector<BlockTrace>& traces, bool include_class_token) {
    std::vector<StatsRecord> records;
    records.reserve(traces.size() * 3);
    for (size_t li = 0; li < traces.size(); ++li) {
        const BlockTrace& tr = traces[li];
        const std::pair<Branch, const Tensor*> branches[] = {
            {Branch::res, &tr.x_res}, {Branch::attn, &tr.x_attn}, {Branch::sum, &tr.x_sum}};
        for (const auto& [branch, tensor] : branches) {
            const Tensor map = select_tokens(*tensor, include_class_token);
            StatsRecord rec;
            rec.layer = static_cast<int>(li) + 1;
            rec.branch = branch;
            rec.entropy = normalized_entropy(map);
            rec.fro_norm = frobenius_norm(map);
            rec.max_value = max_activation(map);
            rec.channel_means = channel_mean_profile(map);
            records.push_back(std::move(rec));
        }
    }
    return records;
}

} // namespace clearseg

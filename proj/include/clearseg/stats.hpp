#pragma once

#include <string>
#include <vector>

#include "clearseg/encoder.hpp"
#include "clearseg/tensor.hpp"

namespace clearseg {

enum class Branch { res, attn, sum };

std::string branch_name(Branch b);

// One row of the per-layer report. channel_means is the sorted (ascending)
// per-channel mean profile normalized by its largest magnitude.
struct StatsRecord {
    int layer = 0; // 1-based, matching per-layer plots
    Branch branch = Branch::res;
    double entropy = 0.0;
    double fro_norm = 0.0;
    double max_value = 0.0;
    std::vector<double> channel_means;
};

// Entropy of the joint softmax over every element of the map, divided by
// log(numel) so the result lands in [0,1]: 1 for a constant map, ~0 for a
// single dominating peak. Maps with fewer than two elements have no defined
// normalizer and are rejected.
double normalized_entropy(const Tensor& x);

double frobenius_norm(const Tensor& x);

double max_activation(const Tensor& x);

// x: [tokens,d]. Per-channel means over tokens, scaled so the largest
// magnitude becomes 1, returned sorted ascending. All-zero input is rejected.
std::vector<double> channel_mean_profile(const Tensor& x);

// x: [tokens,d]. Zeroes the ceil(beta*d) channels with the highest raw (not
// absolute) mean; ties break toward the lower channel index. beta=0 is the
// identity, beta=1 clears the matrix.
Tensor mask_top_channels(const Tensor& x, double beta);

// Stats for every (layer, branch in {res, attn, sum}) pair. By default the
// class token is excluded so the numbers describe the dense patch map;
// include_class_token keeps it.
std::vector<StatsRecord> layer_report(const std::vector<BlockTrace>& traces, bool include_class_token = false);

} // namespace clearseg

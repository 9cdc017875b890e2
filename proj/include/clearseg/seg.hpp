#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "clearseg/checkpoint.hpp"
#include "clearseg/encoder.hpp"
#include "clearseg/image.hpp"
#include "clearseg/tensor.hpp"

namespace clearseg {

// CLIP pre-training channel statistics.
constexpr std::array<float, 3> kClipMean = {0.48145466f, 0.4578275f, 0.40821073f};
constexpr std::array<float, 3> kClipStd = {0.26862954f, 0.26130258f, 0.27577711f};

struct WindowRect {
    int64_t top = 0, left = 0, height = 0, width = 0;
};

struct WindowPlan {
    std::vector<WindowRect> windows;
    int64_t crop = 0, stride = 0;
};

struct SegParams {
    int shorter_side = 448;
    int crop = 336;
    int stride = 112;
    std::array<float, 3> mean = kClipMean;
    std::array<float, 3> std = kClipStd;
};

// Label map plus the averaged cosine logits it was taken from.
struct SegmentationResult {
    int64_t height = 0, width = 0;
    std::vector<int32_t> labels; // [h*w], row-major argmax indices
    Tensor logits;               // [classes, h, w]
};

struct LabelMap {
    int64_t height = 0, width = 0;
    std::vector<int32_t> values;
};

struct MIoUReport {
    int num_classes = 0;
    std::vector<double> iou;          // per class; NaN when absent everywhere
    std::vector<bool> valid;          // class appears in prediction or truth
    double miou = 0.0;                // mean over valid classes
    std::vector<int64_t> confusion;   // [num_classes*num_classes], row = truth
    int64_t ignored_pixels = 0;
};

// Scale so min(H,W) lands on shorter_side (aspect preserved), both output
// dims rounded down to patch multiples, then [0,1] scaling and per-channel
// normalization. Returns [3,H',W']. Grayscale input is replicated to RGB.
Tensor preprocess_image(const ImageU8& image, int shorter_side, int patch_size,
                        const std::array<float, 3>& mean, const std::array<float, 3>& std);

// Stride-aligned cover of an HxW image with crop x crop windows: each next
// window starts on the largest stride multiple that still overlaps the
// previous one, and the final window in each direction is clamped to the
// edge. An image no bigger than the crop gets a single window spanning it.
WindowPlan plan_windows(int64_t height, int64_t width, int64_t crop, int64_t stride);

// Cosine similarity of each patch embedding against each class embedding,
// reshaped to [classes, grid_h, grid_w].
Tensor classify_patches(const PatchEmbeddings& patches, const TextEmbeddings& text);

// Full pipeline for one image: preprocess, window, encode each window with
// the surgery, upsample per-window logits bilinearly to pixels, average
// overlaps by coverage, argmax (lowest index wins ties).
SegmentationResult segment_image(const ImageU8& image, const Encoder& encoder,
                                 const TextEmbeddings& text, const SurgeryConfig& surgery,
                                 const SegParams& params);

// Per-class align-corners bilinear resize of a [classes,h,w] logit stack.
Tensor resize_logits(const Tensor& logits, int64_t out_h, int64_t out_w);

// Argmax over the class axis of [classes,h,w]; the lowest index wins ties.
std::vector<int32_t> argmax_labels(const Tensor& logits);

// Confusion-matrix mIoU over prediction/truth pairs. Pixels whose ground
// truth equals ignore_index are skipped; classes absent from both sides are
// left out of the mean.
MIoUReport compute_miou(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& truths,
                        int num_classes, int ignore_index = 255);

} // namespace clearseg

#include "clearseg/seg.hpp"

#include <cmath>
#include <limits>

#include "clearseg/errors.hpp"

namespace clearseg {

namespace {

// One plane of a [c,h,w] tensor resampled via the shared align-corners kernel.
Tensor resize_plane(const float* src, int64_t h, int64_t w, int64_t out_h, int64_t out_w) {
    Tensor grid;
    grid.shape = {h, w, 1};
    grid.data.assign(src, src + h * w);
    return interpolate_grid(grid, out_h, out_w);
}

std::vector<int64_t> axis_offsets(int64_t dim, int64_t crop, int64_t stride) {
    if (dim <= crop) return {0};
    std::vector<int64_t> offsets = {0};
    while (offsets.back() + crop < dim) {
        const int64_t reach = offsets.back() + crop;           // first uncovered coordinate
        int64_t next = (reach / stride) * stride;              // largest stride multiple still covered
        if (next <= offsets.back()) next = reach;              // stride > crop: stay gap-free
        offsets.push_back(std::min(next, dim - crop));
    }
    return offsets;
}

} // namespace

Tensor preprocess_image(const ImageU8& image, int shorter_side, int patch_size,
                        const std::array<float, 3>& mean, const std::array<float, 3>& std_dev) {
    if (image.height < 1 || image.width < 1 || (image.channels != 1 && image.channels != 3))
        throw input_error("preprocess", "image must be non-empty gray or RGB");
    if (shorter_side < patch_size)
        throw input_error("preprocess", "shorter_side " + std::to_string(shorter_side) +
                                            " is below the patch size " + std::to_string(patch_size));
    const double scale = static_cast<double>(shorter_side) /
                         static_cast<double>(std::min(image.height, image.width));
    const auto to_patch_multiple = [&](int64_t dim) {
        const double target = static_cast<double>(dim) * scale;
        const int64_t floored = static_cast<int64_t>(target / patch_size) * patch_size;
        return std::max<int64_t>(floored, patch_size);
    };
    const int64_t out_h = to_patch_multiple(image.height);
    const int64_t out_w = to_patch_multiple(image.width);

    Tensor out({3, out_h, out_w});
    for (int c = 0; c < 3; ++c) {
        const int src_c = image.channels == 3 ? c : 0;
        Tensor plane;
        plane.shape = {image.height, image.width, 1};
        plane.data.resize(static_cast<size_t>(image.height * image.width));
        for (int64_t y = 0; y < image.height; ++y)
            for (int64_t x = 0; x < image.width; ++x)
                plane.data[static_cast<size_t>(y * image.width + x)] =
                    static_cast<float>(image.at(y, x, src_c));
        const Tensor resized = interpolate_grid(plane, out_h, out_w);
        const float m = mean[static_cast<size_t>(c)];
        const float s = std_dev[static_cast<size_t>(c)];
        float* dst = out.ptr() + static_cast<int64_t>(c) * out_h * out_w;
        for (int64_t i = 0; i < out_h * out_w; ++i)
            dst[i] = (resized.data[static_cast<size_t>(i)] / 255.0f - m) / s;
    }
    return out;
}

WindowPlan plan_windows(int64_t height, int64_t width, int64_t crop, int64_t stride) {
    if (height < 1 || width < 1) throw input_error("windows", "image is empty");
    if (crop < 1 || stride < 1) throw input_error("windows", "crop and stride must be positive");
    WindowPlan plan;
    plan.crop = crop;
    plan.stride = stride;
    const auto rows = axis_offsets(height, crop, stride);
    const auto cols = axis_offsets(width, crop, stride);
    for (const int64_t top : rows)
        for (const int64_t left : cols)
            plan.windows.push_back({top, left, std::min(crop, height), std::min(crop, width)});
    return plan;
}

Tensor classify_patches(const PatchEmbeddings& patches, const TextEmbeddings& text) {
    if (patches.features.dim(1) != text.rows.dim(1))
        throw dimension_error("classify", "patch dim " + std::to_string(patches.features.dim(1)) +
                                              " and text dim " + std::to_string(text.rows.dim(1)) + " differ");
    const Tensor cos = cosine_matrix(patches.features, text.rows); // [hw, classes]
    const int64_t hw = cos.dim(0), classes = cos.dim(1);
    Tensor out({classes, patches.grid_h, patches.grid_w});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < classes; ++c)
            out.data[static_cast<size_t>(c * hw + i)] = cos.data[static_cast<size_t>(i * classes + c)];
    return out;
}

SegmentationResult segment_image(const ImageU8& image, const Encoder& encoder,
                                 const TextEmbeddings& text, const SurgeryConfig& surgery,
                                 const SegParams& params) {
    const Tensor pixels = preprocess_image(image, params.shorter_side, encoder.config().patch_size,
                                           params.mean, params.std);
    const int64_t h = pixels.dim(1), w = pixels.dim(2);
    const int64_t classes = text.rows.dim(0);
    const WindowPlan plan = plan_windows(h, w, params.crop, params.stride);

    Tensor acc({classes, h, w});
    std::vector<int32_t> coverage(static_cast<size_t>(h * w), 0);
    for (const WindowRect& win : plan.windows) {
        Tensor crop({3, win.height, win.width});
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < win.height; ++y) {
                const float* src = pixels.ptr() + (c * h + win.top + y) * w + win.left;
                std::copy(src, src + win.width, crop.ptr() + (c * win.height + y) * win.width);
            }
        const EncodeResult enc = encoder.encode_dense(crop, &surgery, false);
        const Tensor logits = classify_patches(enc.patches, text); // [classes, gh, gw]
        for (int64_t c = 0; c < classes; ++c) {
            const Tensor up = resize_plane(logits.ptr() + c * enc.patches.grid_h * enc.patches.grid_w,
                                           enc.patches.grid_h, enc.patches.grid_w, win.height, win.width);
            for (int64_t y = 0; y < win.height; ++y) {
                float* dst = acc.ptr() + (c * h + win.top + y) * w + win.left;
                const float* src = up.ptr() + y * win.width;
                for (int64_t x = 0; x < win.width; ++x) dst[x] += src[x];
            }
        }
        for (int64_t y = 0; y < win.height; ++y) {
            int32_t* cov = coverage.data() + (win.top + y) * w + win.left;
            for (int64_t x = 0; x < win.width; ++x) ++cov[x];
        }
    }

    SegmentationResult result;
    result.height = h;
    result.width = w;
    for (int64_t p = 0; p < h * w; ++p) {
        const int32_t cov = coverage[static_cast<size_t>(p)];
        if (cov == 0) throw numeric_error("segment", "window plan left pixels uncovered");
        for (int64_t c = 0; c < classes; ++c)
            acc.data[static_cast<size_t>(c * h * w + p)] /= static_cast<float>(cov);
    }
    result.labels = argmax_labels(acc);
    result.logits = std::move(acc);
    return result;
}

Tensor resize_logits(const Tensor& logits, int64_t out_h, int64_t out_w) {
    if (logits.rank() != 3) throw dimension_error("segment", "logits must be [classes,h,w], got " + logits.shape_str());
    const int64_t classes = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    if (h == out_h && w == out_w) return logits;
    Tensor out({classes, out_h, out_w});
    for (int64_t c = 0; c < classes; ++c) {
        const Tensor plane = resize_plane(logits.ptr() + c * h * w, h, w, out_h, out_w);
        std::copy(plane.data.begin(), plane.data.end(), out.ptr() + c * out_h * out_w);
    }
    return out;
}

std::vector<int32_t> argmax_labels(const Tensor& logits) {
    if (logits.rank() != 3 || logits.dim(0) < 1)
        throw dimension_error("segment", "logits must be [classes,h,w], got " + logits.shape_str());
    const int64_t classes = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
    std::vector<int32_t> labels(static_cast<size_t>(hw), 0);
    for (int64_t p = 0; p < hw; ++p) {
        int32_t best = 0;
        float best_v = logits.data[static_cast<size_t>(p)];
        for (int64_t c = 1; c < classes; ++c) {
            const float v = logits.data[static_cast<size_t>(c * hw + p)];
            if (v > best_v) { // strict: ties keep the lowest class index
                best_v = v;
                best = static_cast<int32_t>(c);
            }
        }
        labels[static_cast<size_t>(p)] = best;
    }
    return labels;
}

MIoUReport compute_miou(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& truths,
                        int num_classes, int ignore_index) {
    if (predictions.size() != truths.size())
        throw input_error("miou", std::to_string(predictions.size()) + " predictions vs " +
                                      std::to_string(truths.size()) + " ground-truth maps");
    if (predictions.empty()) throw degenerate_error("miou", "no prediction pairs");
    if (num_classes < 1) throw input_error("miou", "need at least one class");
    if (ignore_index >= 0 && ignore_index < num_classes)
        throw input_error("miou", "ignore_index collides with a class index");

    MIoUReport report;
    report.num_classes = num_classes;
    report.confusion.assign(static_cast<size_t>(num_classes) * num_classes, 0);
    for (size_t i = 0; i < predictions.size(); ++i) {
        const LabelMap& pred = predictions[i];
        const LabelMap& truth = truths[i];
        if (pred.height != truth.height || pred.width != truth.width)
            throw input_error("miou", "pair " + std::to_string(i) + ": prediction " + std::to_string(pred.height) +
                                          "x" + std::to_string(pred.width) + " vs truth " +
                                          std::to_string(truth.height) + "x" + std::to_string(truth.width));
        const size_t n = static_cast<size_t>(pred.height) * static_cast<size_t>(pred.width);
        if (pred.values.size() != n || truth.values.size() != n)
            throw input_error("miou", "pair " + std::to_string(i) + ": label buffer does not match its dimensions");
        for (size_t p = 0; p < n; ++p) {
            const int32_t t = truth.values[p];
            if (t == ignore_index) {
                ++report.ignored_pixels;
                continue;
            }
            const int32_t pr = pred.values[p];
            if (t < 0 || t >= num_classes)
                throw input_error("miou", "pair " + std::to_string(i) + ": ground-truth label " + std::to_string(t) +
                                              " outside [0," + std::to_string(num_classes) + ")");
            if (pr < 0 || pr >= num_classes)
                throw input_error("miou", "pair " + std::to_string(i) + ": predicted label " + std::to_string(pr) +
                                              " outside [0," + std::to_string(num_classes) + ")");
            ++report.confusion[static_cast<size_t>(t) * num_classes + static_cast<size_t>(pr)];
        }
    }

    report.iou.assign(static_cast<size_t>(num_classes), std::numeric_limits<double>::quiet_NaN());
    report.valid.assign(static_cast<size_t>(num_classes), false);
    double total = 0.0;
    int valid_count = 0;
    for (int c = 0; c < num_classes; ++c) {
        int64_t tp = report.confusion[static_cast<size_t>(c) * num_classes + static_cast<size_t>(c)];
        int64_t fp = 0, fn = 0;
        for (int o = 0; o < num_classes; ++o) {
            if (o == c) continue;
            fn += report.confusion[static_cast<size_t>(c) * num_classes + static_cast<size_t>(o)];
            fp += report.confusion[static_cast<size_t>(o) * num_classes + static_cast<size_t>(c)];
        }
        const int64_t unionc = tp + fp + fn;
        if (unionc == 0) continue; // absent from both sides
        report.valid[static_cast<size_t>(c)] = true;
        report.iou[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(unionc);
        total += report.iou[static_cast<size_t>(c)];
        ++valid_count;
    }
    if (valid_count == 0) throw degenerate_error("miou", "every pixel was ignored; mean is undefined");
    report.miou = total / valid_count;
    return report;
}

} // namespace clearseg

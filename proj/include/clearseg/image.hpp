#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace clearseg {

// Interleaved 8-bit image, row-major. channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    int64_t height = 0;
    int64_t width = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;

    uint8_t at(int64_t y, int64_t x, int c) const {
        return pixels[static_cast<size_t>((y * width + x) * channels + c)];
    }
};

// PNG or JPEG, decided by magic bytes. Palette/16-bit/alpha PNG variants are
// folded down to plain 8-bit gray or RGB.
ImageU8 load_image(const std::string& path);

// Single-channel 8-bit PNG with pixel value == class index, 255 == ignore.
ImageU8 load_label_png(const std::string& path);

// Deterministic PNG writer: fixed chunk layout, stored (uncompressed) deflate
// blocks, so identical pixels give identical bytes everywhere. Files are
// written to <path>.tmp and renamed into place.
void write_png(const std::string& path, const ImageU8& image);

// Deterministic synthetic RGB test image: smooth ramps plus seeded noise,
// integer arithmetic only.
ImageU8 gen_fixture_image(uint64_t seed, int64_t height, int64_t width);

} // namespace clearseg

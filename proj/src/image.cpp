#include "clearseg/image.hpp"

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <jpeglib.h>
#include <png.h>
#include <zlib.h>

#include "clearseg/errors.hpp"
#include "clearseg/prng.hpp"

namespace clearseg {

namespace {

struct FileCloser {
    FILE* f = nullptr;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

ImageU8 load_png(const std::string& path) {
    FileCloser fc{std::fopen(path.c_str(), "rb")};
    if (!fc.f) throw input_error("image", "cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw input_error("image", "libpng init failed for " + path);
    }
    std::vector<uint8_t> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw input_error("image", "failed to decode " + path);
    }
    png_init_io(png, fc.f);
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw input_error("image", path + ": unsupported channel count " + std::to_string(channels));
    }
    ImageU8 img;
    img.height = h;
    img.width = w;
    img.channels = channels;
    img.pixels.resize(static_cast<size_t>(h) * w * static_cast<size_t>(channels));
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = img.pixels.data() + static_cast<size_t>(y) * w * static_cast<size_t>(channels);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

struct JpegErrorMgr {
    jpeg_error_mgr base;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(mgr->jump, 1);
}

ImageU8 load_jpeg(const std::string& path) {
    FileCloser fc{std::fopen(path.c_str(), "rb")};
    if (!fc.f) throw input_error("image", "cannot open " + path);
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw input_error("image", "failed to decode " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fc.f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    ImageU8 img;
    img.height = cinfo.output_height;
    img.width = cinfo.output_width;
    img.channels = 3;
    img.pixels.resize(static_cast<size_t>(img.height) * img.width * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        uint8_t* row = img.pixels.data() + static_cast<size_t>(cinfo.output_scanline) * img.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

void append_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<uint8_t>(v & 0xFF));
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& payload) {
    append_u32_be(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    append_u32_be(out, crc);
}

} // namespace

ImageU8 load_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw input_error("image", "cannot open " + path);
    unsigned char magic[4] = {0, 0, 0, 0};
    probe.read(reinterpret_cast<char*>(magic), 4);
    probe.close();
    if (magic[0] == 0x89 && magic[1] == 'P') return load_png(path);
    if (magic[0] == 0xFF && magic[1] == 0xD8) return load_jpeg(path);
    throw input_error("image", path + ": not a PNG or JPEG file");
}

ImageU8 load_label_png(const std::string& path) {
    ImageU8 img = load_image(path);
    if (img.channels != 1)
        throw input_error("image", path + ": label maps must be single-channel 8-bit PNG");
    return img;
}

void write_png(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw input_error("image", "can only write gray or RGB images");
    if (image.height <= 0 || image.width <= 0)
        throw input_error("image", "cannot write an empty image");
    const size_t row_bytes = static_cast<size_t>(image.width) * static_cast<size_t>(image.channels);
    if (image.pixels.size() != row_bytes * static_cast<size_t>(image.height))
        throw input_error("image", "pixel buffer does not match image dimensions");

    // raw scanlines, each prefixed with filter byte 0
    std::vector<uint8_t> raw;
    raw.reserve((row_bytes + 1) * static_cast<size_t>(image.height));
    for (int64_t y = 0; y < image.height; ++y) {
        raw.push_back(0);
        const uint8_t* row = image.pixels.data() + static_cast<size_t>(y) * row_bytes;
        raw.insert(raw.end(), row, row + row_bytes);
    }

    // zlib wrapper around stored deflate blocks: deterministic regardless of
    // the zlib version linked
    std::vector<uint8_t> idat;
    idat.push_back(0x78);
    idat.push_back(0x01);
    size_t off = 0;
    while (off < raw.size()) {
        const size_t len = std::min<size_t>(raw.size() - off, 65535);
        const bool final_block = off + len == raw.size();
        idat.push_back(final_block ? 1 : 0);
        idat.push_back(static_cast<uint8_t>(len & 0xFF));
        idat.push_back(static_cast<uint8_t>((len >> 8) & 0xFF));
        idat.push_back(static_cast<uint8_t>(~len & 0xFF));
        idat.push_back(static_cast<uint8_t>((~len >> 8) & 0xFF));
        idat.insert(idat.end(), raw.begin() + static_cast<std::ptrdiff_t>(off),
                    raw.begin() + static_cast<std::ptrdiff_t>(off + len));
        off += len;
    }
    const uint32_t adler = static_cast<uint32_t>(adler32(1, raw.data(), static_cast<uInt>(raw.size())));
    append_u32_be(idat, adler);

    std::vector<uint8_t> ihdr;
    append_u32_be(ihdr, static_cast<uint32_t>(image.width));
    append_u32_be(ihdr, static_cast<uint32_t>(image.height));
    ihdr.push_back(8);                                      // bit depth
    ihdr.push_back(image.channels == 1 ? 0 : 2);            // gray / truecolor
    ihdr.push_back(0);                                      // compression
    ihdr.push_back(0);                                      // filter
    ihdr.push_back(0);                                      // no interlace

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", idat);
    append_chunk(out, "IEND", {});

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw input_error("image", "cannot write " + tmp);
        f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
        if (!f) throw input_error("image", "short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

ImageU8 gen_fixture_image(uint64_t seed, int64_t height, int64_t width) {
    if (height < 1 || width < 1) throw input_error("image", "fixture image must be at least 1x1");
    SplitMix64 rng(seed);
    ImageU8 img;
    img.height = height;
    img.width = width;
    img.channels = 3;
    img.pixels.resize(static_cast<size_t>(height) * width * 3);
    for (int64_t y = 0; y < height; ++y)
        for (int64_t x = 0; x < width; ++x) {
            const int64_t rx = width > 1 ? (x * 255) / (width - 1) : 0;
            const int64_t ry = height > 1 ? (y * 255) / (height - 1) : 0;
            const uint64_t n = rng.next_u64();
            // two ramps, a checker, and a little noise per channel
            const int64_t checker = (((x / 8) + (y / 8)) % 2) * 96;
            int64_t r = rx - 32 + static_cast<int64_t>(n & 0x1F);
            int64_t g = ry - 32 + static_cast<int64_t>((n >> 5) & 0x1F);
            int64_t b = checker + 64 + static_cast<int64_t>((n >> 10) & 0x1F);
            auto clamp255 = [](int64_t v) { return static_cast<uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v)); };
            uint8_t* px = img.pixels.data() + static_cast<size_t>((y * width + x) * 3);
            px[0] = clamp255(r);
            px[1] = clamp255(g);
            px[2] = clamp255(b);
        }
    return img;
}

} // namespace clearseg

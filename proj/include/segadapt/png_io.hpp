#pragma once

// Thin libpng wrappers: RGB images to/from [0,1] doubles and binary masks
// to/from 8-bit grayscale. Reads normalize every input to 8-bit RGB (palette,
// grayscale, 16-bit and alpha variants included) so callers only ever see
// three channels. libpng reports failures through longjmp; each wrapper turns
// that into a ParseError carrying the file path.

#include <png.h>

#include <cstdio>
#include <string>
#include <vector>

#include "segadapt/core.hpp"
#include "segadapt/tensor.hpp"

namespace segadapt {

namespace detail {

// RAII so the longjmp error path cannot leak the FILE or the png structs.
struct PngReadGuard {
    FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadGuard() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngWriteGuard {
    FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriteGuard() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

// Decodes any PNG into packed 8-bit RGB rows.
inline void read_png_rgb8(const std::string& path, int& h, int& w, std::vector<png_byte>& rgb) {
    PngReadGuard g;
    g.fp = std::fopen(path.c_str(), "rb");
    if (!g.fp) throw IoError("cannot open PNG for reading: " + path);
    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (g.png) g.info = png_create_info_struct(g.png);
    if (!g.info) throw IoError("libpng allocation failed for " + path);
    if (setjmp(png_jmpbuf(g.png))) throw ParseError("malformed PNG: " + path);

    png_init_io(g.png, g.fp);
    png_read_info(g.png, g.info);
    h = static_cast<int>(png_get_image_height(g.png, g.info));
    w = static_cast<int>(png_get_image_width(g.png, g.info));
    const png_byte color = png_get_color_type(g.png, g.info);
    const png_byte depth = png_get_bit_depth(g.png, g.info);
    if (depth == 16) png_set_strip_16(g.png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(g.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
    if (png_get_valid(g.png, g.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(g.png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(g.png);
    png_set_strip_alpha(g.png);
    png_read_update_info(g.png, g.info);
    if (png_get_rowbytes(g.png, g.info) != static_cast<size_t>(w) * 3)
        throw ParseError("unexpected PNG layout after normalization: " + path);

    rgb.assign(static_cast<size_t>(h) * w * 3, 0);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = rgb.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(g.png, rows.data());
    png_read_end(g.png, nullptr);
}

inline void write_png_rows(const std::string& path, int h, int w, int color_type,
                           std::vector<png_byte>& pixels, int bytes_per_row) {
    PngWriteGuard g;
    g.fp = std::fopen(path.c_str(), "wb");
    if (!g.fp) throw IoError("cannot open PNG for writing: " + path);
    g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (g.png) g.info = png_create_info_struct(g.png);
    if (!g.info) throw IoError("libpng allocation failed for " + path);
    if (setjmp(png_jmpbuf(g.png))) throw IoError("PNG write failed: " + path);

    png_init_io(g.png, g.fp);
    png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(g.png, g.info);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] = pixels.data() + static_cast<size_t>(y) * bytes_per_row;
    png_write_image(g.png, rows.data());
    png_write_end(g.png, nullptr);
}

}  // namespace detail

inline Image read_image_png(const std::string& path) {
    int h = 0, w = 0;
    std::vector<png_byte> rgb;
    detail::read_png_rgb8(path, h, w, rgb);
    Image img(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(c, y, x) = rgb[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
    return img;
}

// Any nonzero pixel counts as foreground, matching the usual binary-mask
// file convention.
inline Mask read_mask_png(const std::string& path) {
    int h = 0, w = 0;
    std::vector<png_byte> rgb;
    detail::read_png_rgb8(path, h, w, rgb);
    Mask m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            m.at(y, x) = rgb[(static_cast<size_t>(y) * w + x) * 3] != 0 ? 1 : 0;
    return m;
}

inline void write_image_png(const Image& img, const std::string& path) {
    if (!img.all_finite()) throw InvalidArgument("write_image_png: image has non-finite values");
    std::vector<png_byte> rgb(static_cast<size_t>(img.h) * img.w * 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::min(1.0, std::max(0.0, img.at(c, y, x)));
                rgb[(static_cast<size_t>(y) * img.w + x) * 3 + static_cast<size_t>(c)] =
                    static_cast<png_byte>(std::lround(v * 255.0));
            }
    detail::write_png_rows(path, img.h, img.w, PNG_COLOR_TYPE_RGB, rgb, img.w * 3);
}

inline void write_mask_png(const Mask& m, const std::string& path) {
    std::vector<png_byte> gray(static_cast<size_t>(m.h) * m.w);
    for (size_t i = 0; i < m.v.size(); ++i) gray[i] = m.v[i] ? 255 : 0;
    detail::write_png_rows(path, m.h, m.w, PNG_COLOR_TYPE_GRAY, gray, m.w);
}

}  // namespace segadapt

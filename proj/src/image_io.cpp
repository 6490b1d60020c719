#include "dive/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

#include "dive/errors.hpp"

namespace dive {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open image: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("failed to decode PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    // Normalize every input to 8-bit RGB.
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_strip_alpha(png);
    png_read_update_info(png, info);

    std::vector<png_byte> row(png_get_rowbytes(png, info));
    Tensor img = Tensor::zeros({3, int64_t(h), int64_t(w)});
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, int64_t(y), int64_t(x)) = row[x * 3 + size_t(c)] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.size(0) != 3) throw DataError("write_png expects a (3,H,W) tensor");
    const int64_t h = image.size(1), w = image.size(2);

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot write image: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("failed to encode PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(size_t(w) * 3);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const Scalar v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                row[size_t(x) * 3 + size_t(c)] = png_byte(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w) {
    if (image.ndim() != 3) throw DataError("resize_bilinear expects a (C, H, W) image");
    if (out_h < 1 || out_w < 1) throw DataError("resize_bilinear target size must be positive");
    const int64_t ch = image.size(0), h = image.size(1), w = image.size(2);
    if (h == out_h && w == out_w) return image;
    Tensor out = Tensor::zeros({ch, out_h, out_w});
    const Scalar sy = Scalar(h) / Scalar(out_h);
    const Scalar sx = Scalar(w) / Scalar(out_w);
    for (int64_t y = 0; y < out_h; ++y) {
        const Scalar fy = std::clamp((Scalar(y) + 0.5) * sy - 0.5, 0.0, Scalar(h - 1));
        const int64_t y0 = int64_t(std::floor(fy));
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const Scalar wy = fy - Scalar(y0);
        for (int64_t x = 0; x < out_w; ++x) {
            const Scalar fx = std::clamp((Scalar(x) + 0.5) * sx - 0.5, 0.0, Scalar(w - 1));
            const int64_t x0 = int64_t(std::floor(fx));
            const int64_t x1 = std::min(x0 + 1, w - 1);
            const Scalar wx = fx - Scalar(x0);
            for (int64_t c = 0; c < ch; ++c) {
                const Scalar top = image.at(c, y0, x0) * (1.0 - wx) + image.at(c, y0, x1) * wx;
                const Scalar bot = image.at(c, y1, x0) * (1.0 - wx) + image.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return out;
}

}  // namespace dive

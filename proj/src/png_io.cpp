#include "nervdiff/png_io.hpp"

#include "nervdiff/errors.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace nervdiff {

namespace {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace

ImageU8 read_png_rgb8(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw VideoIoError(VideoIoError::Kind::io, "cannot open png: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw VideoIoError(VideoIoError::Kind::io, "libpng init failure");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw VideoIoError(VideoIoError::Kind::io, "png decode failure: " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    ImageU8 img;
    img.height = static_cast<Index>(h);
    img.width = static_cast<Index>(w);
    img.rgb.resize(static_cast<size_t>(h) * w * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.rgb.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png_rgb8(const std::string& path, const ImageU8& img) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw VideoIoError(VideoIoError::Kind::io, "cannot open for write: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw VideoIoError(VideoIoError::Kind::io, "libpng init failure");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw VideoIoError(VideoIoError::Kind::io, "png encode failure: " + path);
    }
    png_init_io(png, f.get());
    // fixed settings keep writes byte-deterministic
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_const_bytep> rows(static_cast<size_t>(img.height));
    for (Index y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = img.rgb.data() + static_cast<size_t>(y) * img.width * 3;
    png_write_rows(png, const_cast<png_bytepp>(rows.data()), static_cast<png_uint_32>(img.height));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace nervdiff

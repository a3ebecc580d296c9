#pragma once

#include <png.h>

#include <array>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "misra/label_mask.hpp"
#include "misra/preprocess.hpp"

namespace misra {

namespace detail {

struct RawPng {
    std::size_t height = 0, width = 0, channels = 0;
    bool indexed = false;
    std::vector<std::uint8_t> data;  // row-major, `channels` bytes per pixel
};

enum class PngRead { Rgb, Index };

inline void png_warning_sink(png_structp, png_const_charp) {}

inline void png_error_to_jmp(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err) *err = msg;
    png_longjmp(png, 1);
}

// Only pointers cross the setjmp boundary so nothing is left in an indeterminate state.
inline bool png_read_into(std::FILE* fp, PngRead mode, RawPng* out, std::string* err) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, png_error_to_jmp, png_warning_sink);
    if (!png) return false;
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        return false;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (mode == PngRead::Rgb) {
        png_set_expand(png);
        png_set_strip_alpha(png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    } else {
        if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
            *err = "label masks must be indexed or 8-bit grayscale PNGs";
            png_destroy_read_struct(&png, &info, nullptr);
            return false;
        }
        if (depth < 8) png_set_packing(png);
        out->indexed = color == PNG_COLOR_TYPE_PALETTE;
    }
    png_read_update_info(png, info);
    out->width = png_get_image_width(png, info);
    out->height = png_get_image_height(png, info);
    out->channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    out->data.assign(stride * out->height, 0);
    std::vector<png_bytep> rows(out->height);
    for (std::size_t y = 0; y < out->height; ++y) rows[y] = out->data.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return true;
}

inline RawPng read_png(const std::filesystem::path& path, PngRead mode) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw DataError("cannot open " + path.string());
    std::array<unsigned char, 8> sig{};
    if (std::fread(sig.data(), 1, 8, fp) != 8 || png_sig_cmp(sig.data(), 0, 8) != 0) {
        std::fclose(fp);
        throw DataError(path.string() + " is not a PNG file");
    }
    std::rewind(fp);
    RawPng raw;
    std::string err;
    const bool ok = png_read_into(fp, mode, &raw, &err);
    std::fclose(fp);
    if (!ok) throw DataError("failed to decode " + path.string() + (err.empty() ? "" : ": " + err));
    return raw;
}

struct PngWriteJob {
    std::size_t height, width;
    int color_type;
    const std::uint8_t* pixels;
    std::size_t bytes_per_pixel;
    const png_color* palette;
    int palette_size;
};

inline bool png_write_from(std::FILE* fp, const PngWriteJob* job, std::string* err) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, png_error_to_jmp, png_warning_sink);
    if (!png) return false;
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        return false;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        return false;
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(job->width), static_cast<png_uint_32>(job->height), 8,
                 job->color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (job->palette) png_set_PLTE(png, info, job->palette, job->palette_size);
    png_write_info(png, info);
    for (std::size_t y = 0; y < job->height; ++y)
        png_write_row(png, job->pixels + y * job->width * job->bytes_per_pixel);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return true;
}

inline void write_png(const std::filesystem::path& path, const PngWriteJob& job) {
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw DataError("cannot write " + path.string());
    std::string err;
    const bool ok = png_write_from(fp, &job, &err);
    const bool closed = std::fclose(fp) == 0;
    if (!ok || !closed) throw DataError("failed to encode " + path.string() + (err.empty() ? "" : ": " + err));
}

}  // namespace detail

inline RgbImage read_rgb_png(const std::filesystem::path& path) {
    auto raw = detail::read_png(path, detail::PngRead::Rgb);
    if (raw.channels != 3) throw DataError(path.string() + ": unsupported PNG layout");
    RgbImage img(raw.height, raw.width);
    img.pixels = std::move(raw.data);
    return img;
}

inline void write_rgb_png(const std::filesystem::path& path, const RgbImage& img) {
    detail::write_png(path, {img.height, img.width, PNG_COLOR_TYPE_RGB, img.pixels.data(), 3, nullptr, 0});
}

/// 8-bit indexed PNG with an arbitrary palette.
inline void write_indexed_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                              const std::vector<std::uint8_t>& indices,
                              const std::vector<std::array<std::uint8_t, 3>>& palette) {
    std::vector<png_color> pal;
    for (const auto& c : palette) pal.push_back(png_color{c[0], c[1], c[2]});
    detail::write_png(path, {height, width, PNG_COLOR_TYPE_PALETTE, indices.data(), 1, pal.data(),
                             static_cast<int>(pal.size())});
}

inline void write_mask_png(const std::filesystem::path& path, const LabelMask& mask) {
    require_labels_below(mask, kNumClasses);
    write_indexed_png(path, mask.height, mask.width, mask.labels,
                      std::vector<std::array<std::uint8_t, 3>>(kClassPalette.begin(), kClassPalette.end()));
}

/// Reads palette indices (or gray levels) as class ids.
inline LabelMask read_mask_png(const std::filesystem::path& path, std::size_t num_classes = kNumClasses) {
    auto raw = detail::read_png(path, detail::PngRead::Index);
    LabelMask m(raw.height, raw.width);
    m.labels = std::move(raw.data);
    try {
        require_labels_below(m, num_classes);
    } catch (const LabelError& e) {
        throw LabelError(path.string() + ": " + e.what());
    }
    return m;
}

}  // namespace misra

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "misra/core/tensor.hpp"

namespace misra {

/// 8-bit RGB image, interleaved row-major (H, W, 3).
struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    RgbImage() = default;
    RgbImage(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w * 3, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    bool operator==(const RgbImage&) const = default;
};

/// Single-channel real-valued map.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    GrayImage() = default;
    GrayImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}

    double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// Network input: R, G, B scaled to [0,1], then normalized erosion and dilation maps. Shape [5,H,W].
struct FiveChannelInput {
    Tensor values;

    std::size_t height() const { return values.dim(1); }
    std::size_t width() const { return values.dim(2); }
};

inline constexpr double kNormalizeEps = 1e-6;
inline constexpr std::size_t kSizeMultiple = 8;

/// ITU-R 601 luma, unrounded.
inline GrayImage rgb_to_gray(const RgbImage& img) {
    GrayImage g(img.height, img.width);
    for (std::size_t i = 0; i < img.height * img.width; ++i)
        g.values[i] = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
    return g;
}

namespace detail {

// Flat 4×4 window anchored at (1,1): rows y-1..y+2, cols x-1..x+2, replicate border.
template <class Pick>
GrayImage morph_4x4(const GrayImage& src, Pick pick) {
    GrayImage out(src.height, src.width);
    const long H = static_cast<long>(src.height), W = static_cast<long>(src.width);
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
            double acc = src.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            for (long dy = -1; dy <= 2; ++dy) {
                const auto yy = static_cast<std::size_t>(std::clamp(y + dy, 0L, H - 1));
                for (long dx = -1; dx <= 2; ++dx) {
                    const auto xx = static_cast<std::size_t>(std::clamp(x + dx, 0L, W - 1));
                    acc = pick(acc, src.at(yy, xx));
                }
            }
            out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc;
        }
    return out;
}

}  // namespace detail

inline GrayImage morph_erode(const GrayImage& g) {
    return detail::morph_4x4(g, [](double a, double b) { return std::min(a, b); });
}

inline GrayImage morph_dilate(const GrayImage& g) {
    return detail::morph_4x4(g, [](double a, double b) { return std::max(a, b); });
}

/// (X - min X) / (max X - min X + eps) over the whole map.
inline GrayImage minmax_normalize(const GrayImage& x, double eps = kNormalizeEps) {
    GrayImage out(x.height, x.width);
    if (x.values.empty()) return out;
    const auto [lo, hi] = std::minmax_element(x.values.begin(), x.values.end());
    const double mn = *lo, range = *hi - *lo + eps;
    for (std::size_t i = 0; i < x.values.size(); ++i) out.values[i] = (x.values[i] - mn) / range;
    return out;
}

inline void require_size_multiple(std::size_t h, std::size_t w, std::size_t multiple = kSizeMultiple) {
    if (h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0)
        throw SizingError("image is " + std::to_string(h) + "x" + std::to_string(w) + "; height and width must be " +
                          "multiples of " + std::to_string(multiple) + " (use padding)");
}

inline FiveChannelInput build_five_channel(const RgbImage& img) {
    require_size_multiple(img.height, img.width);
    const std::size_t H = img.height, W = img.width, HW = H * W;
    const GrayImage gray = rgb_to_gray(img);
    const GrayImage lo = minmax_normalize(morph_erode(gray));
    const GrayImage hi = minmax_normalize(morph_dilate(gray));
    std::vector<float> v(5 * HW);
    for (std::size_t i = 0; i < HW; ++i) {
        for (std::size_t c = 0; c < 3; ++c) v[c * HW + i] = static_cast<float>(img.pixels[3 * i + c] / 255.0);
        v[3 * HW + i] = static_cast<float>(lo.values[i]);
        v[4 * HW + i] = static_cast<float>(hi.values[i]);
    }
    return FiveChannelInput{Tensor(Shape{5, H, W}, std::move(v))};
}

/// Zero padding added around an image to reach a size multiple.
struct Padding {
    std::size_t top = 0, bottom = 0, left = 0, right = 0;
};

inline Padding padding_for(std::size_t h, std::size_t w, std::size_t multiple = kSizeMultiple) {
    const std::size_t ph = (multiple - h % multiple) % multiple, pw = (multiple - w % multiple) % multiple;
    return Padding{ph / 2, ph - ph / 2, pw / 2, pw - pw / 2};
}

/// Symmetric zero padding up to the next multiple of `multiple`.
inline RgbImage pad_to_multiple(const RgbImage& img, Padding* applied = nullptr, std::size_t multiple = kSizeMultiple) {
    const Padding p = padding_for(img.height, img.width, multiple);
    if (applied) *applied = p;
    RgbImage out(img.height + p.top + p.bottom, img.width + p.left + p.right, 0);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(y + p.top, x + p.left, c) = img.at(y, x, c);
    return out;
}

}  // namespace misra

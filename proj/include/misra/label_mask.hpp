#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "misra/core/tensor.hpp"

namespace misra {

inline constexpr std::size_t kNumClasses = 7;

enum ClassId : std::uint8_t { BG = 0, LAV = 1, RAV = 2, LNH = 3, RNH = 4, ND = 5, WR = 6 };

inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"BG", "LAV", "RAV", "LNH", "RNH", "ND", "WR"};

/// Palette used for indexed mask PNGs (index = class id).
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kClassPalette{{
    {0, 0, 0},
    {220, 60, 60},
    {60, 90, 220},
    {240, 200, 40},
    {40, 200, 120},
    {255, 255, 255},
    {200, 60, 220},
}};

/// Per-pixel class map, row-major.
struct LabelMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> labels;

    LabelMask() = default;
    LabelMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
    std::size_t size() const { return labels.size(); }

    bool operator==(const LabelMask&) const = default;
};

inline void require_labels_below(const LabelMask& m, std::size_t num_classes) {
    for (auto v : m.labels)
        if (v >= num_classes)
            throw LabelError("label " + std::to_string(v) + " out of range for " + std::to_string(num_classes) +
                             " classes");
}

/// Per-pixel argmax over channels of an NCHW tensor; ties resolve to the lowest class index.
template <class T>
std::vector<LabelMask> argmax_channel(const BasicTensor<T>& scores) {
    if (scores.rank() != 4) throw DimensionError("argmax_channel: expected NCHW, got " + shape_str(scores.shape()));
    const std::size_t N = scores.dim(0), C = scores.dim(1), H = scores.dim(2), W = scores.dim(3), HW = H * W;
    std::vector<LabelMask> out(N, LabelMask(H, W));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
            std::size_t best = 0;
            T best_v = scores[n * C * HW + i];
            for (std::size_t c = 1; c < C; ++c) {
                const T v = scores[(n * C + c) * HW + i];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            out[n].labels[i] = static_cast<std::uint8_t>(best);
        }
    return out;
}

}  // namespace misra

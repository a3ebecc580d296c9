#pragma once

// Brute-force reference implementations used only by tests. Written with plain
// loops in double precision and no shared code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "misra/core/rng.hpp"
#include "misra/core/tensor.hpp"
#include "misra/label_mask.hpp"

namespace oracle {

template <class T>
misra::BasicTensor<T> random_tensor(misra::Shape shape, misra::Rng& rng, double lo = -1.0, double hi = 1.0) {
    misra::BasicTensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline std::vector<double> conv2d(const std::vector<double>& x, std::size_t N, std::size_t Cin, std::size_t H,
                                  std::size_t W, const std::vector<double>& w, std::size_t Cout, std::size_t kh,
                                  std::size_t kw, const std::vector<double>& b, std::size_t stride,
                                  std::size_t pad, std::size_t& Ho, std::size_t& Wo) {
    Ho = (H + 2 * pad - kh) / stride + 1;
    Wo = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(N * Cout * Ho * Wo, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    double acc = b.empty() ? 0.0 : b[co];
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                    continue;
                                acc += x[((n * Cin + ci) * H + iy) * W + ix] * w[((co * Cin + ci) * kh + ky) * kw + kx];
                            }
                    out[((n * Cout + co) * Ho + oy) * Wo + ox] = acc;
                }
    return out;
}

/// Window min/max over rows y-1..y+2 and cols x-1..x+2 with clamped coordinates.
inline std::vector<double> window_extreme(const std::vector<double>& g, std::size_t H, std::size_t W, bool want_max) {
    std::vector<double> out(H * W);
    for (long y = 0; y < static_cast<long>(H); ++y)
        for (long x = 0; x < static_cast<long>(W); ++x) {
            std::vector<double> window;
            for (long yy = y - 1; yy <= y + 2; ++yy)
                for (long xx = x - 1; xx <= x + 2; ++xx) {
                    const long cy = std::clamp(yy, 0L, static_cast<long>(H) - 1);
                    const long cx = std::clamp(xx, 0L, static_cast<long>(W) - 1);
                    window.push_back(g[cy * W + cx]);
                }
            out[y * W + x] = want_max ? *std::max_element(window.begin(), window.end())
                                      : *std::min_element(window.begin(), window.end());
        }
    return out;
}

using misra::LabelMask;
using misra::Rng;
using misra::Tensor64;

// Plain-loop reference implementations over NCHW doubles.
struct Ref {
    std::size_t N, C, HW;
    std::vector<double> v;
    double at(std::size_t n, std::size_t c, std::size_t i) const { return v[(n * C + c) * HW + i]; }
};

inline Ref ref_of(const Tensor64& t) { return {t.dim(0), t.dim(1), t.dim(2) * t.dim(3), t.values()}; }

inline Ref ref_softmax(const Ref& z) {
    Ref p = z;
    for (std::size_t n = 0; n < z.N; ++n)
        for (std::size_t i = 0; i < z.HW; ++i) {
            double s = 0;
            for (std::size_t c = 0; c < z.C; ++c) s += std::exp(z.at(n, c, i));
            for (std::size_t c = 0; c < z.C; ++c) p.v[(n * z.C + c) * z.HW + i] = std::exp(z.at(n, c, i)) / s;
        }
    return p;
}

inline double ref_ce(const Ref& z, const std::vector<LabelMask>& y, const std::vector<double>& w) {
    Ref p = ref_softmax(z);
    double total = 0;
    for (std::size_t n = 0; n < z.N; ++n)
        for (std::size_t i = 0; i < z.HW; ++i) {
            const auto c = y[n].labels[i];
            total += -w[c] * std::log(std::max(p.at(n, c, i), 1e-12));
        }
    return total / static_cast<double>(z.N * z.HW);
}

struct Counts {
    double tp = 0, sp = 0, sy = 0;
};

inline Counts ref_counts(const Ref& p, const std::vector<LabelMask>& y, std::size_t c) {
    Counts k;
    for (std::size_t n = 0; n < p.N; ++n)
        for (std::size_t i = 0; i < p.HW; ++i) {
            const double yi = y[n].labels[i] == c ? 1.0 : 0.0;
            k.tp += p.at(n, c, i) * yi;
            k.sp += p.at(n, c, i);
            k.sy += yi;
        }
    return k;
}

inline double ref_dice(const Ref& p, const std::vector<LabelMask>& y) {
    double s = 0;
    for (std::size_t c = 0; c < p.C; ++c) {
        auto k = ref_counts(p, y, c);
        s += 2 * k.tp / (k.sp + k.sy + 1e-6);
    }
    return 1 - s / static_cast<double>(p.C);
}

inline double ref_ftl(const Ref& p, const std::vector<LabelMask>& y, const std::vector<double>& w) {
    double s = 0;
    for (std::size_t c = 0; c < p.C; ++c) {
        auto k = ref_counts(p, y, c);
        const double ti = k.tp / (k.tp + 0.3 * (k.sp - k.tp) + 0.7 * (k.sy - k.tp) + 1e-6);
        s += w[c] * std::pow(1 - ti, 4.0 / 3.0);
    }
    return s / static_cast<double>(p.C);
}

inline double ref_miou(const Ref& p, const std::vector<LabelMask>& y) {
    double s = 0;
    for (std::size_t c = 0; c < p.C; ++c) {
        double inter = 0, uni = 0;
        for (std::size_t n = 0; n < p.N; ++n)
            for (std::size_t i = 0; i < p.HW; ++i) {
                const double yi = y[n].labels[i] == c ? 1.0 : 0.0, pi = p.at(n, c, i);
                inter += pi * yi;
                uni += pi + yi - pi * yi;
            }
        s += inter / (uni + 1e-6);
    }
    return s / static_cast<double>(p.C);
}

inline std::vector<LabelMask> random_labels(std::size_t n, std::size_t h, std::size_t w, std::size_t classes, Rng& rng) {
    std::vector<LabelMask> out(n, LabelMask(h, w));
    for (auto& m : out)
        for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng.below(classes));
    return out;
}

inline std::vector<double> random_weights(std::size_t c, Rng& rng) {
    std::vector<double> w(c);
    for (auto& v : w) v = rng.uniform(0.2, 2.0);
    return w;
}


// Blobby random masks: a few filled rectangles per class over background.
inline LabelMask random_mask(std::size_t h, std::size_t w, Rng& rng, std::size_t classes = 7) {
    LabelMask m(h, w);
    const std::size_t rects = 2 + rng.below(6);
    for (std::size_t r = 0; r < rects; ++r) {
        const auto c = static_cast<std::uint8_t>(1 + rng.below(classes - 1));
        const std::size_t y0 = rng.below(h), x0 = rng.below(w);
        const std::size_t rh = 1 + rng.below(h / 2), rw = 1 + rng.below(w / 2);
        for (std::size_t y = y0; y < std::min(h, y0 + rh); ++y)
            for (std::size_t x = x0; x < std::min(w, x0 + rw); ++x) m.at(y, x) = c;
    }
    return m;
}

// Corrupt a copy of `m` at a random subset of pixels.
inline LabelMask perturb(const LabelMask& m, Rng& rng, double rate, std::size_t classes = 7) {
    LabelMask out = m;
    for (auto& l : out.labels)
        if (rng.uniform() < rate) l = static_cast<std::uint8_t>(rng.below(classes));
    return out;
}

inline std::vector<float> random_probs(std::size_t classes, std::size_t hw, Rng& rng) {
    std::vector<float> p(classes * hw);
    for (std::size_t i = 0; i < hw; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < classes; ++c) s += (p[c * hw + i] = static_cast<float>(rng.uniform(0.01, 1)));
        for (std::size_t c = 0; c < classes; ++c) p[c * hw + i] = static_cast<float>(p[c * hw + i] / s);
    }
    return p;
}

// Whole-split oracle working from pixel index sets.
struct BruteForce {
    double mciou = 0, mdice = 0;
};

inline BruteForce brute_force(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& gts) {
    std::vector<double> ious, dices;
    for (std::uint8_t c = 1; c < 7; ++c) {
        std::set<std::size_t> P, G;
        std::size_t offset = 0;
        for (std::size_t n = 0; n < preds.size(); ++n) {
            for (std::size_t i = 0; i < preds[n].size(); ++i) {
                if (preds[n].labels[i] == c) P.insert(offset + i);
                if (gts[n].labels[i] == c) G.insert(offset + i);
            }
            offset += preds[n].size();
        }
        std::set<std::size_t> U = P;
        U.insert(G.begin(), G.end());
        if (U.empty()) continue;
        std::size_t inter = 0;
        for (auto i : P) inter += G.count(i);
        ious.push_back(100.0 * static_cast<double>(inter) / static_cast<double>(U.size()));
        dices.push_back(200.0 * static_cast<double>(inter) / static_cast<double>(P.size() + G.size()));
    }
    auto mean = [](const std::vector<double>& v) {
        return v.empty() ? 100.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    return {mean(ious), mean(dices)};
}

// Union-find component labelling, independent of the flood fill under test.
inline std::map<std::uint8_t, std::vector<std::size_t>> component_sizes(const LabelMask& m) {
    const std::size_t H = m.height, W = m.width;
    std::vector<std::size_t> parent(H * W);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t i = y * W + x;
            const std::pair<int, int> back[] = {{0, -1}, {-1, -1}, {-1, 0}, {-1, 1}};
            for (auto [dy, dx] : back) {
                const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                if (yy < 0 || xx < 0 || xx >= static_cast<long>(W)) continue;
                const std::size_t j = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx);
                if (m.labels[j] == m.labels[i]) parent[find(i)] = find(j);
            }
        }
    std::map<std::size_t, std::size_t> size;
    for (std::size_t i = 0; i < H * W; ++i)
        if (m.labels[i]) ++size[find(i)];
    std::map<std::uint8_t, std::vector<std::size_t>> out;
    for (auto [root, n] : size) out[m.labels[root]].push_back(n);
    for (auto& [c, v] : out) std::sort(v.begin(), v.end());
    return out;
}

/// One class of one image set for the AP oracle: instances as pixel sets.
struct ApInstance {
    std::set<std::uint32_t> pixels;
    double score = 0;
    std::size_t image = 0;
};

/// Greedy best-IoU matching in descending score order, then the area under the
/// precision envelope summed over the recall steps.
inline double average_precision(std::vector<ApInstance> preds, const std::vector<ApInstance>& gts, double tau) {
    if (gts.empty()) return 0.0;
    std::stable_sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    std::vector<bool> used(gts.size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < preds.size(); ++k) {
        double best = -1;
        std::size_t best_j = gts.size();
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (used[j] || gts[j].image != preds[k].image) continue;
            std::size_t inter = 0;
            for (auto px : preds[k].pixels) inter += gts[j].pixels.count(px);
            const double iou = static_cast<double>(inter) /
                               static_cast<double>(preds[k].pixels.size() + gts[j].pixels.size() - inter);
            if (iou > best) best = iou, best_j = j;
        }
        if (best_j < gts.size() && best >= tau) used[best_j] = true, ++tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    }
    double ap = 0, prev_recall = 0;
    for (std::size_t k = 0; k < precision.size(); ++k) {
        if (recall[k] <= prev_recall) continue;
        double envelope = 0;
        for (std::size_t q = k; q < precision.size(); ++q) envelope = std::max(envelope, precision[q]);
        ap += (recall[k] - prev_recall) * envelope;
        prev_recall = recall[k];
    }
    return ap;
}

}  // namespace oracle

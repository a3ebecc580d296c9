#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "misra/core/ops.hpp"
#include "misra/label_mask.hpp"
#include "misra/model.hpp"

namespace misra {

enum class ClassWeightMode { Uniform, Mfb, Nmfb };

inline std::string to_string(ClassWeightMode m) {
    switch (m) {
        case ClassWeightMode::Uniform: return "uniform";
        case ClassWeightMode::Mfb: return "mfb";
        case ClassWeightMode::Nmfb: return "nmfb";
    }
    return "nmfb";
}

inline ClassWeightMode class_weight_mode_from_string(const std::string& s) {
    if (s == "uniform") return ClassWeightMode::Uniform;
    if (s == "mfb") return ClassWeightMode::Mfb;
    if (s == "nmfb") return ClassWeightMode::Nmfb;
    throw ConfigError("unknown class_weight_mode '" + s + "' (expected uniform, mfb, nmfb)");
}

struct ClassWeights {
    std::vector<double> values;
    ClassWeightMode mode = ClassWeightMode::Uniform;

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t c) const { return values[c]; }
};

/// Per-class frequency: pixels of class c over the total pixels of the images that contain c.
inline std::vector<double> class_frequencies(std::span<const LabelMask> masks, std::size_t num_classes) {
    std::vector<double> class_px(num_classes, 0.0), image_px(num_classes, 0.0);
    std::vector<std::size_t> counts(num_classes);
    for (const auto& m : masks) {
        require_labels_below(m, num_classes);
        std::fill(counts.begin(), counts.end(), 0);
        for (auto v : m.labels) ++counts[v];
        for (std::size_t c = 0; c < num_classes; ++c)
            if (counts[c] > 0) {
                class_px[c] += static_cast<double>(counts[c]);
                image_px[c] += static_cast<double>(m.size());
            }
    }
    std::vector<double> freq(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (class_px[c] == 0.0)
            throw DegenerateError("class " + std::to_string(c) +
                                  (c < kClassNames.size() ? " (" + std::string(kClassNames[c]) + ")" : std::string()) +
                                  " never occurs; median-frequency weights are undefined");
        freq[c] = class_px[c] / image_px[c];
    }
    return freq;
}

/// MFB: median(f) / f_c. nMFB: MFB rescaled to mean 1.
inline ClassWeights weights_from_frequencies(const std::vector<double>& freq, ClassWeightMode mode) {
    ClassWeights w{std::vector<double>(freq.size(), 1.0), mode};
    if (mode == ClassWeightMode::Uniform) return w;
    std::vector<double> sorted = freq;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    for (std::size_t c = 0; c < n; ++c) w.values[c] = median / freq[c];
    if (mode == ClassWeightMode::Nmfb) {
        const double mean = std::accumulate(w.values.begin(), w.values.end(), 0.0) / static_cast<double>(n);
        for (auto& v : w.values) v /= mean;
    }
    return w;
}

inline ClassWeights compute_class_weights(std::span<const LabelMask> masks, std::size_t num_classes,
                                          ClassWeightMode mode) {
    if (mode == ClassWeightMode::Uniform) return ClassWeights{std::vector<double>(num_classes, 1.0), mode};
    return weights_from_frequencies(class_frequencies(masks, num_classes), mode);
}

/// Loss coefficients and constants of the training objective.
struct LossCoefficients {
    double lambda_ce = 10.0;
    double lambda_dice = 4.0;
    double lambda_ftl = 0.3;
    double lambda_ifl_ce = 1.0;
    double lambda_ifl_iou = 1.0;
    double alpha = 0.3;
    double beta = 0.7;
    double gamma = 4.0 / 3.0;
    double eps = 1e-6;
    double log_clamp = 1e-12;
    double iteration_weight = 0.1;
};

/// eta_t = w * (t + 1) for t = 0..T.
inline std::vector<double> iteration_weights(std::size_t T, double w = 0.1) {
    if (!(w > 0)) throw ConfigError("iteration weight base must be positive");
    std::vector<double> eta(T + 1);
    // (t+1) / (1/w) rounds 3 * 0.1 to the double nearest 0.3; the direct product does not.
    const double inv = 1.0 / w;
    for (std::size_t t = 0; t <= T; ++t) eta[t] = static_cast<double>(t + 1) / inv;
    return eta;
}

namespace detail {

template <class T>
void check_loss_inputs(const BasicTensor<T>& x, std::span<const LabelMask> labels, const char* op) {
    require_rank4(x.shape(), op);
    if (labels.size() != x.dim(0))
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " masks for batch of " +
                             std::to_string(x.dim(0)));
    for (const auto& m : labels) {
        if (m.height != x.dim(2) || m.width != x.dim(3))
            throw DimensionError(std::string(op) + ": mask " + std::to_string(m.height) + "x" +
                                 std::to_string(m.width) + " vs tensor " + shape_str(x.shape()));
        require_labels_below(m, x.dim(1));
    }
}

/// Soft per-class sums over the whole batch: I = Σ p·y, P = Σ p, Y = Σ y.
struct ClassSums {
    std::vector<double> inter, pred, target;
};

template <class T>
ClassSums class_sums(const BasicTensor<T>& p, std::span<const LabelMask> labels) {
    const std::size_t N = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
    ClassSums s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::size_t i = 0; i < HW; ++i) acc += p[(n * C + c) * HW + i];
            s.pred[c] += acc;
        }
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
            const std::size_t c = labels[n].labels[i];
            s.inter[c] += p[(n * C + c) * HW + i];
            s.target[c] += 1.0;
        }
    return s;
}

/// Scalar loss whose gradient w.r.t. p[n,c,i] is on_class[c] where y(i) = c, off_class[c] otherwise.
template <class T>
BasicTensor<T> class_sum_loss(const BasicTensor<T>& p, std::span<const LabelMask> labels, double value,
                              std::vector<double> on_class, std::vector<double> off_class) {
    std::vector<std::uint8_t> flat;
    flat.reserve(p.dim(0) * p.dim(2) * p.dim(3));
    for (const auto& m : labels) flat.insert(flat.end(), m.labels.begin(), m.labels.end());
    const std::size_t N = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
    return make_result<T>(Shape{1}, std::vector<T>{static_cast<T>(value)}, {&p},
                          [N, C, HW, flat = std::move(flat), on_class = std::move(on_class),
                           off_class = std::move(off_class)](TensorNode<T>& self) {
                              auto& pp = *self.parents[0];
                              if (!pp.requires_grad) return;
                              auto& g = pp.ensure_grad();
                              const double seed = self.grad[0];
                              for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t c = 0; c < C; ++c)
                                      for (std::size_t i = 0; i < HW; ++i) {
                                          const bool hit = flat[n * HW + i] == c;
                                          g[(n * C + c) * HW + i] +=
                                              static_cast<T>(seed * (hit ? on_class[c] : off_class[c]));
                                      }
                          });
}

}  // namespace detail

/// -(1/|Ω|) Σ_i w(y_i) log p_{y_i}(i) with p = softmax(z), log clamped at `log_clamp`.
template <class T>
BasicTensor<T> weighted_ce(const BasicTensor<T>& z, std::span<const LabelMask> labels, const ClassWeights& w,
                           double log_clamp = 1e-12) {
    detail::check_loss_inputs(z, labels, "weighted_ce");
    const std::size_t N = z.dim(0), C = z.dim(1), HW = z.dim(2) * z.dim(3);
    if (w.size() != C) throw DimensionError("weighted_ce: " + std::to_string(w.size()) + " weights for " + std::to_string(C) + " classes");
    const double inv_omega = 1.0 / static_cast<double>(N * HW);
    const double log_floor = std::log(log_clamp);
    std::vector<T> probs(z.numel());
    std::vector<std::uint8_t> clamped(N * HW, 0), flat(N * HW);
    double total = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(z[(n * C + c) * HW + i]));
            double s = 0;
            for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(z[(n * C + c) * HW + i]) - mx);
            for (std::size_t c = 0; c < C; ++c)
                probs[(n * C + c) * HW + i] = static_cast<T>(std::exp(z[(n * C + c) * HW + i] - mx) / s);
            const std::size_t y = labels[n].labels[i];
            flat[n * HW + i] = static_cast<std::uint8_t>(y);
            double logp = static_cast<double>(z[(n * C + y) * HW + i]) - mx - std::log(s);
            if (logp < log_floor) {
                logp = log_floor;
                clamped[n * HW + i] = 1;
            }
            total -= w[y] * logp;
        }
    const double value = total * inv_omega;
    return make_result<T>(Shape{1}, std::vector<T>{static_cast<T>(value)}, {&z},
                          [N, C, HW, inv_omega, weights = w.values, probs = std::move(probs),
                           clamped = std::move(clamped), flat = std::move(flat)](TensorNode<T>& self) {
                              auto& pz = *self.parents[0];
                              if (!pz.requires_grad) return;
                              auto& g = pz.ensure_grad();
                              const double seed = self.grad[0] * inv_omega;
                              for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t i = 0; i < HW; ++i) {
                                      if (clamped[n * HW + i]) continue;
                                      const std::size_t y = flat[n * HW + i];
                                      const double k = seed * weights[y];
                                      for (std::size_t c = 0; c < C; ++c) {
                                          const std::size_t idx = (n * C + c) * HW + i;
                                          g[idx] += static_cast<T>(k * (probs[idx] - (c == y ? 1.0 : 0.0)));
                                      }
                                  }
                          });
}

/// 1 - (1/C) Σ_c 2 Σ p·y / (Σ p + Σ y + eps), sums over every pixel of the batch.
template <class T>
BasicTensor<T> dice_loss(const BasicTensor<T>& p, std::span<const LabelMask> labels, double eps = 1e-6) {
    detail::check_loss_inputs(p, labels, "dice_loss");
    const std::size_t C = p.dim(1);
    const auto s = detail::class_sums(p, labels);
    double mean_dice = 0;
    std::vector<double> on(C), off(C);
    for (std::size_t c = 0; c < C; ++c) {
        const double den = s.pred[c] + s.target[c] + eps;
        mean_dice += 2 * s.inter[c] / den;
        // d(loss)/dp = -(1/C) * 2 (y den - I) / den^2 ; d(den)/dp = 1
        off[c] = -(1.0 / C) * (-2 * s.inter[c]) / (den * den);
        on[c] = -(1.0 / C) * 2 * (den - s.inter[c]) / (den * den);
    }
    mean_dice /= static_cast<double>(C);
    return detail::class_sum_loss(p, labels, 1.0 - mean_dice, std::move(on), std::move(off));
}

/// (1/C) Σ_c w_c (1 - TI_c)^gamma, TI_c = TP / (TP + alpha FP + beta FN + eps).
template <class T>
BasicTensor<T> focal_tversky(const BasicTensor<T>& p, std::span<const LabelMask> labels, const ClassWeights& w,
                             double alpha = 0.3, double beta = 0.7, double gamma = 4.0 / 3.0, double eps = 1e-6) {
    detail::check_loss_inputs(p, labels, "focal_tversky");
    const std::size_t C = p.dim(1);
    if (w.size() != C) throw DimensionError("focal_tversky: " + std::to_string(w.size()) + " weights for " + std::to_string(C) + " classes");
    const auto s = detail::class_sums(p, labels);
    double value = 0;
    std::vector<double> on(C), off(C);
    for (std::size_t c = 0; c < C; ++c) {
        const double tp = s.inter[c], fp = s.pred[c] - s.inter[c], fn = s.target[c] - s.inter[c];
        const double den = tp + alpha * fp + beta * fn + eps;
        const double ti = tp / den;
        const double miss = std::max(0.0, 1.0 - ti);
        value += w[c] * std::pow(miss, gamma);
        const double dl_dti = miss > 0 ? -(1.0 / C) * w[c] * gamma * std::pow(miss, gamma - 1) : 0.0;
        // dDen/dp = y (1 - beta) + (1 - y) alpha ; dTP/dp = y
        on[c] = dl_dti * (den - tp * (1.0 - beta)) / (den * den);
        off[c] = dl_dti * (-tp * alpha) / (den * den);
    }
    value /= static_cast<double>(C);
    return detail::class_sum_loss(p, labels, value, std::move(on), std::move(off));
}

/// (1/C) Σ_c Σ p·y / (Σ (p + y - p·y) + eps).
template <class T>
BasicTensor<T> soft_miou(const BasicTensor<T>& p, std::span<const LabelMask> labels, double eps = 1e-6) {
    detail::check_loss_inputs(p, labels, "soft_miou");
    const std::size_t C = p.dim(1);
    const auto s = detail::class_sums(p, labels);
    double value = 0;
    std::vector<double> on(C), off(C);
    for (std::size_t c = 0; c < C; ++c) {
        const double u = s.pred[c] + s.target[c] - s.inter[c] + eps;
        value += s.inter[c] / u;
        // dU/dp = 1 - y
        on[c] = (1.0 / C) / u;
        off[c] = (1.0 / C) * (-s.inter[c]) / (u * u);
    }
    value /= static_cast<double>(C);
    return detail::class_sum_loss(p, labels, value, std::move(on), std::move(off));
}

/// Components of the training objective, plus the differentiable total.
template <class T>
struct LossBundle {
    LossCoefficients coefficients{};
    double ce = 0, dice = 0, ftl = 0, seg = 0, ifl = 0, total = 0;
    BasicTensor<T> total_tensor;
};

struct LossToggles {
    bool use_ftl = true;
    bool use_ifl = true;
};

/// lambda_CE * CE + lambda_Dice * Dice + lambda_FTL * FTL on the final pass.
template <class T>
BasicTensor<T> seg_loss(const BasicTensor<T>& z_final, const BasicTensor<T>& p_final, std::span<const LabelMask> labels,
                        const ClassWeights& w, const LossCoefficients& k = {}, bool use_ftl = true) {
    std::vector<BasicTensor<T>> terms{weighted_ce(z_final, labels, w, k.log_clamp), dice_loss(p_final, labels, k.eps)};
    std::vector<T> coeffs{static_cast<T>(k.lambda_ce), static_cast<T>(k.lambda_dice)};
    if (use_ftl) {
        terms.push_back(focal_tversky(p_final, labels, w, k.alpha, k.beta, k.gamma, k.eps));
        coeffs.push_back(static_cast<T>(k.lambda_ftl));
    }
    return linear_combination(terms, coeffs);
}

/// Σ_t eta_t [lambda_CE CE(z_t) + lambda_IoU (1 - mIoU(p_t))].
template <class T>
BasicTensor<T> ifl(const std::vector<BasicTensor<T>>& logits, const std::vector<BasicTensor<T>>& probs,
                   std::span<const LabelMask> labels, const ClassWeights& w, const std::vector<double>& eta,
                   const LossCoefficients& k = {}) {
    if (eta.size() != logits.size() || probs.size() != logits.size())
        throw ContractError("ifl: " + std::to_string(eta.size()) + " iteration weights for " +
                            std::to_string(logits.size()) + " passes");
    std::vector<BasicTensor<T>> terms;
    std::vector<T> coeffs;
    T constant = T(0);
    for (std::size_t t = 0; t < logits.size(); ++t) {
        terms.push_back(weighted_ce(logits[t], labels, w, k.log_clamp));
        coeffs.push_back(static_cast<T>(eta[t] * k.lambda_ifl_ce));
        terms.push_back(soft_miou(probs[t], labels, k.eps));
        coeffs.push_back(static_cast<T>(-eta[t] * k.lambda_ifl_iou));
        constant += static_cast<T>(eta[t] * k.lambda_ifl_iou);
    }
    // The "1 -" part of every IoU term is a constant offset.
    terms.push_back(BasicTensor<T>::scalar(constant));
    coeffs.push_back(T(1));
    return linear_combination(terms, coeffs);
}

/// L_total = L_SEG(final pass) + L_IFL(all passes).
template <class T>
LossBundle<T> total_loss(const IterationOutputs<T>& out, std::span<const LabelMask> labels, const ClassWeights& w,
                         const LossToggles& toggles = {}, const LossCoefficients& k = {}) {
    LossBundle<T> b;
    b.coefficients = k;
    const auto& z = out.final_logits();
    const auto& p = out.final_probabilities();
    auto ce = weighted_ce(z, labels, w, k.log_clamp);
    auto dice = dice_loss(p, labels, k.eps);
    std::vector<BasicTensor<T>> terms{ce, dice};
    std::vector<T> coeffs{static_cast<T>(k.lambda_ce), static_cast<T>(k.lambda_dice)};
    b.ce = ce.item();
    b.dice = dice.item();
    if (toggles.use_ftl) {
        auto ftl = focal_tversky(p, labels, w, k.alpha, k.beta, k.gamma, k.eps);
        b.ftl = ftl.item();
        terms.push_back(ftl);
        coeffs.push_back(static_cast<T>(k.lambda_ftl));
    }
    auto seg = linear_combination(terms, coeffs);
    b.seg = seg.item();
    if (toggles.use_ifl) {
        auto l_ifl = ifl(out.logits, out.probabilities, labels, w, iteration_weights(out.passes() - 1, k.iteration_weight), k);
        b.ifl = l_ifl.item();
        b.total_tensor = add(seg, l_ifl);
    } else {
        b.total_tensor = seg;
    }
    b.total = b.total_tensor.item();
    return b;
}

}  // namespace misra

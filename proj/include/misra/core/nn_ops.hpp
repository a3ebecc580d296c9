#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "misra/core/ops.hpp"

namespace misra {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// dst (+)= a * b. Thin and tiny products use a fixed-order loop: Eigen's kernels for those shapes peel by
// pointer alignment, which makes the rounding depend on heap addresses.
template <class Dst, class A, class B>
void matmul(Dst&& dst, const A& a, const B& b, bool accumulate) {
    using T = typename std::decay_t<Dst>::Scalar;
    const Eigen::Index m = a.rows(), k = a.cols(), n = b.cols();
    if (m == 1 || n == 1 || m + n + k < 24) {
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < n; ++j) {
                T s(0);
                for (Eigen::Index q = 0; q < k; ++q) s += a(i, q) * b(q, j);
                dst(i, j) = accumulate ? dst(i, j) + s : s;
            }
        return;
    }
    if (accumulate)
        dst.noalias() += a * b;
    else
        dst.noalias() = a * b;
}

struct ConvGeometry {
    std::size_t cin, h, w, kh, kw, stride, pad, ho, wo;
    std::size_t k() const { return cin * kh * kw; }
    std::size_t p() const { return ho * wo; }
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::size_t P = g.p();
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = col + ((ci * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill_n(dst, g.wo, T(0));
                        continue;
                    }
                    const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
                    }
                }
            }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
    const std::size_t P = g.p();
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    T* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.wo + ox];
                    }
                }
            }
}

inline std::size_t reflect_index(long i, std::size_t n) {
    if (i < 0) return static_cast<std::size_t>(-i);
    if (i >= static_cast<long>(n)) return 2 * n - 2 - static_cast<std::size_t>(i);
    return static_cast<std::size_t>(i);
}

}  // namespace detail

/// Cross-correlation of `input` [N,Cin,H,W] with `weight` [Cout,Cin,kh,kw] plus optional `bias` [Cout].
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      std::size_t stride = 1, std::size_t padding = 0) {
    detail::require_rank4(input.shape(), "conv2d input");
    detail::require_rank4(weight.shape(), "conv2d weight");
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    const std::size_t N = input.dim(0), Cout = weight.dim(0);
    detail::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
    if (weight.dim(1) != g.cin)
        throw DimensionError("conv2d: input channels (axis 1) " + std::to_string(g.cin) + " vs weight axis 1 " +
                             std::to_string(weight.dim(1)));
    if (bias.defined() && bias.shape() != Shape{Cout})
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " vs out channels " +
                             std::to_string(Cout));
    const long span_h = static_cast<long>(g.h + 2 * padding) - static_cast<long>(g.kh);
    const long span_w = static_cast<long>(g.w + 2 * padding) - static_cast<long>(g.kw);
    if (span_h < 0 || span_w < 0 || span_h % static_cast<long>(stride) != 0 || span_w % static_cast<long>(stride) != 0)
        throw ConfigError("conv2d: output extent not integral for input " + shape_str(input.shape()) + ", kernel " +
                          std::to_string(g.kh) + "x" + std::to_string(g.kw) + ", stride " + std::to_string(stride) +
                          ", padding " + std::to_string(padding));
    g.ho = static_cast<std::size_t>(span_h) / stride + 1;
    g.wo = static_cast<std::size_t>(span_w) / stride + 1;
    const std::size_t K = g.k(), P = g.p(), in_block = g.cin * g.h * g.w;

    using Mat = detail::RowMat<T>;
    std::vector<T> out(N * Cout * P);
    std::vector<T> col(g.pointwise() ? 0 : K * P);
    Eigen::Map<const Mat> W(weight.data().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = input.data().data() + n * in_block;
        if (!g.pointwise()) detail::im2col(xn, g, col.data());
        Eigen::Map<const Mat> C(g.pointwise() ? xn : col.data(), static_cast<Eigen::Index>(K),
                                static_cast<Eigen::Index>(P));
        Eigen::Map<Mat> O(out.data() + n * Cout * P, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(P));
        detail::matmul(O, W, C, false);
        if (bias.defined())
            for (std::size_t co = 0; co < Cout; ++co) O.row(static_cast<Eigen::Index>(co)).array() += bias[co];
    }

    Shape out_shape{N, Cout, g.ho, g.wo};
    auto bw = [g, N, Cout, K, P, in_block, has_bias = bias.defined()](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const bool need_x = px.requires_grad, need_w = pw.requires_grad;
        const bool need_b = has_bias && self.parents[2]->requires_grad;
        Eigen::Map<const Mat> W(pw.data.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
        std::vector<T> col(g.pointwise() || !need_w ? 0 : K * P);
        std::vector<T> dcol(g.pointwise() || !need_x ? 0 : K * P);
        for (std::size_t n = 0; n < N; ++n) {
            Eigen::Map<const Mat> dO(self.grad.data() + n * Cout * P, static_cast<Eigen::Index>(Cout),
                                     static_cast<Eigen::Index>(P));
            const T* xn = px.data.data() + n * in_block;
            if (need_w) {
                if (!g.pointwise()) detail::im2col(xn, g, col.data());
                Eigen::Map<const Mat> C(g.pointwise() ? xn : col.data(), static_cast<Eigen::Index>(K),
                                        static_cast<Eigen::Index>(P));
                Eigen::Map<Mat> dW(pw.ensure_grad().data(), static_cast<Eigen::Index>(Cout),
                                   static_cast<Eigen::Index>(K));
                detail::matmul(dW, dO, C.transpose(), true);
            }
            if (need_x) {
                T* dxn = px.ensure_grad().data() + n * in_block;
                if (g.pointwise()) {
                    Eigen::Map<Mat> dX(dxn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                    detail::matmul(dX, W.transpose(), dO, true);
                } else {
                    Eigen::Map<Mat> dC(dcol.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                    detail::matmul(dC, W.transpose(), dO, false);
                    detail::col2im(dcol.data(), g, dxn);
                }
            }
            if (need_b) {
                auto& gb = self.parents[2]->ensure_grad();
                for (std::size_t co = 0; co < Cout; ++co) {
                    const T* row = self.grad.data() + (n * Cout + co) * P;
                    T s(0);
                    for (std::size_t p = 0; p < P; ++p) s += row[p];
                    gb[co] += s;
                }
            }
        }
    };
    if (bias.defined()) return make_result<T>(std::move(out_shape), std::move(out), {&input, &weight, &bias}, bw);
    return make_result<T>(std::move(out_shape), std::move(out), {&input, &weight}, bw);
}

/// k×k max pooling with stride k; gradient routes to the first maximum in row-major order.
template <class T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, std::size_t k = 2) {
    detail::require_rank4(x.shape(), "maxpool2d");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (k == 0 || H % k != 0 || W % k != 0)
        throw DimensionError("maxpool2d: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                             " (axes 2,3) not divisible by " + std::to_string(k));
    const std::size_t Ho = H / k, Wo = W / k;
    std::vector<T> out(NC * Ho * Wo);
    std::vector<std::size_t> src(out.size());
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = (nc * H + oy * k) * W + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t i = (nc * H + oy * k + dy) * W + ox * k + dx;
                        if (x[i] > x[best]) best = i;
                    }
                const std::size_t o = (nc * Ho + oy) * Wo + ox;
                out[o] = x[best];
                src[o] = best;
            }
    return make_result<T>(Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {&x},
                          [src = std::move(src)](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& g = p.ensure_grad();
                              for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
                          });
}

/// k×k average pooling with stride k.
template <class T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t k) {
    detail::require_rank4(x.shape(), "avg_pool2d");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (k == 0 || H % k != 0 || W % k != 0)
        throw DimensionError("avg_pool2d: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                             " (axes 2,3) not divisible by " + std::to_string(k));
    if (k == 1) return x;
    const std::size_t Ho = H / k, Wo = W / k;
    const T inv = T(1) / static_cast<T>(k * k);
    std::vector<T> out(NC * Ho * Wo, T(0));
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) out[(nc * Ho + y / k) * Wo + xx / k] += x[(nc * H + y) * W + xx];
    for (auto& v : out) v *= inv;
    return make_result<T>(Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {&x},
                          [NC, H, W, Ho, Wo, k, inv](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& g = p.ensure_grad();
                              for (std::size_t nc = 0; nc < NC; ++nc)
                                  for (std::size_t y = 0; y < H; ++y)
                                      for (std::size_t xx = 0; xx < W; ++xx)
                                          g[(nc * H + y) * W + xx] += inv * self.grad[(nc * Ho + y / k) * Wo + xx / k];
                          });
}

/// Anti-aliased stride-2 downsampling: depthwise 3×3 binomial filter, reflect padding 1.
template <class T>
BasicTensor<T> blurpool2d(const BasicTensor<T>& x) {
    detail::require_rank4(x.shape(), "blurpool2d");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw DimensionError("blurpool2d: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                             " (axes 2,3) must be even");
    static constexpr std::array<double, 3> taps{0.25, 0.5, 0.25};
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(NC * Ho * Wo, T(0));
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                T acc = T(0);
                for (int ky = 0; ky < 3; ++ky) {
                    const std::size_t iy = detail::reflect_index(static_cast<long>(2 * oy) + ky - 1, H);
                    for (int kx = 0; kx < 3; ++kx) {
                        const std::size_t ix = detail::reflect_index(static_cast<long>(2 * ox) + kx - 1, W);
                        acc += static_cast<T>(taps[ky] * taps[kx]) * x[(nc * H + iy) * W + ix];
                    }
                }
                out[(nc * Ho + oy) * Wo + ox] = acc;
            }
    return make_result<T>(Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {&x},
                          [NC, H, W, Ho, Wo](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& g = p.ensure_grad();
                              for (std::size_t nc = 0; nc < NC; ++nc)
                                  for (std::size_t oy = 0; oy < Ho; ++oy)
                                      for (std::size_t ox = 0; ox < Wo; ++ox) {
                                          const T go = self.grad[(nc * Ho + oy) * Wo + ox];
                                          for (int ky = 0; ky < 3; ++ky) {
                                              const std::size_t iy =
                                                  detail::reflect_index(static_cast<long>(2 * oy) + ky - 1, H);
                                              for (int kx = 0; kx < 3; ++kx) {
                                                  const std::size_t ix =
                                                      detail::reflect_index(static_cast<long>(2 * ox) + kx - 1, W);
                                                  g[(nc * H + iy) * W + ix] += static_cast<T>(taps[ky] * taps[kx]) * go;
                                              }
                                          }
                                      }
                          });
}

/// 2× bilinear upsampling with half-pixel centers (align_corners = false).
template <class T>
BasicTensor<T> upsample_bilinear2x(const BasicTensor<T>& x) {
    detail::require_rank4(x.shape(), "upsample_bilinear2x");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = 2 * H, Wo = 2 * W;
    struct Tap {
        std::size_t i0, i1;
        T w1;
    };
    auto taps_for = [](std::size_t out_len, std::size_t in_len) {
        std::vector<Tap> taps(out_len);
        for (std::size_t o = 0; o < out_len; ++o) {
            double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
            if (src < 0) src = 0;
            const auto i0 = std::min(static_cast<std::size_t>(src), in_len - 1);
            const std::size_t i1 = std::min(i0 + 1, in_len - 1);
            taps[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
        }
        return taps;
    };
    auto ty = taps_for(Ho, H), tx = taps_for(Wo, W);
    std::vector<T> out(NC * Ho * Wo);
    for (std::size_t nc = 0; nc < NC; ++nc) {
        const T* src = x.data().data() + nc * H * W;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const auto& b = tx[ox];
                const T top = src[a.i0 * W + b.i0] * (T(1) - b.w1) + src[a.i0 * W + b.i1] * b.w1;
                const T bot = src[a.i1 * W + b.i0] * (T(1) - b.w1) + src[a.i1 * W + b.i1] * b.w1;
                out[(nc * Ho + oy) * Wo + ox] = top * (T(1) - a.w1) + bot * a.w1;
            }
        }
    }
    return make_result<T>(Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {&x},
                          [NC, H, W, Ho, Wo, ty, tx](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& g = p.ensure_grad();
                              for (std::size_t nc = 0; nc < NC; ++nc) {
                                  T* dst = g.data() + nc * H * W;
                                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                                      const auto& a = ty[oy];
                                      for (std::size_t ox = 0; ox < Wo; ++ox) {
                                          const auto& b = tx[ox];
                                          const T go = self.grad[(nc * Ho + oy) * Wo + ox];
                                          dst[a.i0 * W + b.i0] += go * (T(1) - a.w1) * (T(1) - b.w1);
                                          dst[a.i0 * W + b.i1] += go * (T(1) - a.w1) * b.w1;
                                          dst[a.i1 * W + b.i0] += go * a.w1 * (T(1) - b.w1);
                                          dst[a.i1 * W + b.i1] += go * a.w1 * b.w1;
                                      }
                                  }
                              }
                          });
}

/// Running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormState {
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 1)
        : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

/// Per-channel batch normalization of an NCHW tensor. Training mode normalizes with batch
/// statistics and updates `state`; eval mode uses the running statistics.
template <class T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                           BatchNormState<T>& state, bool training) {
    detail::require_rank4(x.shape(), "batchnorm2d");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), M = N * HW;
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || state.running_mean.shape() != Shape{C})
        throw DimensionError("batchnorm2d: affine/state parameters must have shape [" + std::to_string(C) + "]");
    if (training && M < 2)
        throw DegenerateError("batchnorm2d: training-mode statistics need N*H*W >= 2, got " + std::to_string(M));

    std::vector<T> mean(C), invstd(C);
    if (training) {
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0, ss = 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < HW; ++i) s += x[(n * C + c) * HW + i];
            const double mu = s / static_cast<double>(M);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < HW; ++i) {
                    const double d = x[(n * C + c) * HW + i] - mu;
                    ss += d * d;
                }
            const double var = ss / static_cast<double>(M);
            mean[c] = static_cast<T>(mu);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
            const double unbiased = ss / static_cast<double>(M - 1);
            state.running_mean[c] =
                static_cast<T>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
            state.running_var[c] =
                static_cast<T>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.eps));
        }
    }

    std::vector<T> xhat(x.numel()), out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = (n * C + c) * HW + i;
                xhat[k] = (x[k] - mean[c]) * invstd[c];
                out[k] = xhat[k] * gamma[c] + beta[c];
            }
    return make_result<T>(
        x.shape(), std::move(out), {&x, &gamma, &beta},
        [N, C, HW, M, training, invstd = std::move(invstd), xhat = std::move(xhat)](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            for (std::size_t c = 0; c < C; ++c) {
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t k = (n * C + c) * HW + i;
                        sum_dy += self.grad[k];
                        sum_dy_xhat += self.grad[k] * xhat[k];
                    }
                if (pg.requires_grad) pg.ensure_grad()[c] += sum_dy_xhat;
                if (pb.requires_grad) pb.ensure_grad()[c] += sum_dy;
                if (!px.requires_grad) continue;
                auto& g = px.ensure_grad();
                const T gm = pg.data[c];
                const T inv_m = T(1) / static_cast<T>(M);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t k = (n * C + c) * HW + i;
                        if (training)
                            g[k] += gm * invstd[c] * (self.grad[k] - inv_m * sum_dy - xhat[k] * inv_m * sum_dy_xhat);
                        else
                            g[k] += gm * invstd[c] * self.grad[k];
                    }
            }
        });
}

}  // namespace misra

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "misra/core/tensor.hpp"

namespace misra {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw DimensionError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank4(const Shape& s, const char* op) {
    if (s.size() != 4) throw DimensionError(std::string(op) + ": expected NCHW tensor, got " + shape_str(s));
}

template <class T>
void accumulate_into(TensorNode<T>& target, const std::vector<T>& g, T scale = T(1)) {
    if (!target.requires_grad) return;
    auto& dst = target.ensure_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * g[i];
}

}  // namespace detail

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
        detail::accumulate_into(*self.parents[0], self.grad);
        detail::accumulate_into(*self.parents[1], self.grad);
    });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
        }
    });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a[i];
    return make_result<T>(a.shape(), std::move(out), {&a}, [factor](TensorNode<T>& self) {
        detail::accumulate_into(*self.parents[0], self.grad, factor);
    });
}

/// Σ coeffs[i]·terms[i] over same-shaped tensors.
template <class T>
BasicTensor<T> linear_combination(const std::vector<BasicTensor<T>>& terms, const std::vector<T>& coeffs) {
    if (terms.empty() || terms.size() != coeffs.size())
        throw ContractError("linear_combination: need matching non-empty term/coefficient lists");
    std::vector<T> out(terms[0].numel(), T(0));
    for (std::size_t k = 0; k < terms.size(); ++k) {
        detail::require_same_shape(terms[0].shape(), terms[k].shape(), "linear_combination");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeffs[k] * terms[k][i];
    }
    BasicTensor<T> result(terms[0].shape(), std::move(out));
    if (!grad_enabled()) return result;
    bool track = std::any_of(terms.begin(), terms.end(), [](const auto& t) { return t.requires_grad(); });
    if (!track) return result;
    auto& node = *result.node();
    node.requires_grad = true;
    for (const auto& t : terms) node.parents.push_back(t.node());
    node.backward_fn = [coeffs](TensorNode<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k)
            detail::accumulate_into(*self.parents[k], self.grad, coeffs[k]);
    };
    return result;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return make_result<T>(x.shape(), std::move(out), {&x}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.data[i] > T(0)) g[i] += self.grad[i];
    });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x[i];
        // Split by sign so exp never overflows.
        out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    }
    return make_result<T>(x.shape(), std::move(out), {&x}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = self.data[i];
            g[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

/// Per-pixel softmax across the channel axis of an NCHW tensor.
template <class T>
BasicTensor<T> softmax_channel(const BasicTensor<T>& z) {
    detail::require_rank4(z.shape(), "softmax_channel");
    const std::size_t N = z.dim(0), C = z.dim(1), HW = z.dim(2) * z.dim(3);
    std::vector<T> out(z.numel());
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t base = n * C * HW;
        for (std::size_t i = 0; i < HW; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, z[base + c * HW + i]);
            T sum = T(0);
            for (std::size_t c = 0; c < C; ++c) {
                const T e = std::exp(z[base + c * HW + i] - mx);
                out[base + c * HW + i] = e;
                sum += e;
            }
            for (std::size_t c = 0; c < C; ++c) out[base + c * HW + i] /= sum;
        }
    }
    return make_result<T>(z.shape(), std::move(out), {&z}, [N, C, HW](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = n * C * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                T dot = T(0);
                for (std::size_t c = 0; c < C; ++c) dot += self.grad[base + c * HW + i] * self.data[base + c * HW + i];
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t k = base + c * HW + i;
                    g[k] += self.data[k] * (self.grad[k] - dot);
                }
            }
        }
    });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T s = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
    return make_result<T>(Shape{1}, std::vector<T>{s}, {&x}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Concatenate NCHW tensors along channels.
template <class T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_channels: no inputs");
    const auto& s0 = parts[0].shape();
    detail::require_rank4(s0, "concat_channels");
    std::size_t C = 0;
    for (const auto& p : parts) {
        detail::require_rank4(p.shape(), "concat_channels");
        if (p.dim(0) != s0[0] || p.dim(2) != s0[2] || p.dim(3) != s0[3])
            throw DimensionError("concat_channels: " + shape_str(p.shape()) + " vs " + shape_str(s0) +
                                 " differ outside axis 1");
        C += p.dim(1);
    }
    const std::size_t N = s0[0], HW = s0[2] * s0[3];
    std::vector<T> out(N * C * HW);
    std::vector<std::size_t> widths;
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t block = p.dim(1) * HW;
            std::copy_n(p.data().begin() + n * block, block, out.begin() + (n * C * HW + off));
            off += block;
        }
    }
    for (const auto& p : parts) widths.push_back(p.dim(1));
    BasicTensor<T> result(Shape{N, C, s0[2], s0[3]}, std::move(out));
    if (!grad_enabled()) return result;
    if (std::none_of(parts.begin(), parts.end(), [](const auto& t) { return t.requires_grad(); })) return result;
    auto& node = *result.node();
    node.requires_grad = true;
    for (const auto& p : parts) node.parents.push_back(p.node());
    node.backward_fn = [widths, N, C, HW](TensorNode<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto& p = *self.parents[k];
            const std::size_t block = widths[k] * HW;
            if (p.requires_grad) {
                auto& g = p.ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < block; ++i) g[n * block + i] += self.grad[n * C * HW + off + i];
            }
            off += block;
        }
    };
    return result;
}

/// x[N,C,H,W] * gate[N,C,1,1]
template <class T>
BasicTensor<T> mul_channel_gate(const BasicTensor<T>& x, const BasicTensor<T>& gate) {
    detail::require_rank4(x.shape(), "mul_channel_gate");
    const Shape want{x.dim(0), x.dim(1), 1, 1};
    detail::require_same_shape(gate.shape(), want, "mul_channel_gate");
    const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel());
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = x[nc * HW + i] * gate[nc];
    return make_result<T>(x.shape(), std::move(out), {&x, &gate}, [NC, HW](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        if (px.requires_grad) {
            auto& g = px.ensure_grad();
            for (std::size_t nc = 0; nc < NC; ++nc)
                for (std::size_t i = 0; i < HW; ++i) g[nc * HW + i] += self.grad[nc * HW + i] * pg.data[nc];
        }
        if (pg.requires_grad) {
            auto& g = pg.ensure_grad();
            for (std::size_t nc = 0; nc < NC; ++nc) {
                T acc = T(0);
                for (std::size_t i = 0; i < HW; ++i) acc += self.grad[nc * HW + i] * px.data[nc * HW + i];
                g[nc] += acc;
            }
        }
    });
}

/// x[N,C,H,W] * gate[N,1,H,W]
template <class T>
BasicTensor<T> mul_spatial_gate(const BasicTensor<T>& x, const BasicTensor<T>& gate) {
    detail::require_rank4(x.shape(), "mul_spatial_gate");
    const Shape want{x.dim(0), 1, x.dim(2), x.dim(3)};
    detail::require_same_shape(gate.shape(), want, "mul_spatial_gate");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i)
                out[(n * C + c) * HW + i] = x[(n * C + c) * HW + i] * gate[n * HW + i];
    return make_result<T>(x.shape(), std::move(out), {&x, &gate}, [N, C, HW](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        if (px.requires_grad) {
            auto& g = px.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < HW; ++i)
                        g[(n * C + c) * HW + i] += self.grad[(n * C + c) * HW + i] * pg.data[n * HW + i];
        }
        if (pg.requires_grad) {
            auto& g = pg.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < HW; ++i)
                        g[n * HW + i] += self.grad[(n * C + c) * HW + i] * px.data[(n * C + c) * HW + i];
        }
    });
}

/// Stacks the per-pixel channel mean and channel max into [N,2,H,W].
/// Max gradient goes to the first channel attaining the maximum.
template <class T>
BasicTensor<T> channel_mean_max(const BasicTensor<T>& x) {
    detail::require_rank4(x.shape(), "channel_mean_max");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(N * 2 * HW);
    std::vector<std::size_t> argmax(N * HW);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
            T s = T(0);
            T mx = x[n * C * HW + i];
            std::size_t best = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const T v = x[(n * C + c) * HW + i];
                s += v;
                if (v > mx) {
                    mx = v;
                    best = c;
                }
            }
            out[n * 2 * HW + i] = s / static_cast<T>(C);
            out[n * 2 * HW + HW + i] = mx;
            argmax[n * HW + i] = best;
        }
    return make_result<T>(Shape{N, 2, x.dim(2), x.dim(3)}, std::move(out), {&x},
                          [N, C, HW, argmax = std::move(argmax)](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& g = p.ensure_grad();
                              const T inv = T(1) / static_cast<T>(C);
                              for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t i = 0; i < HW; ++i) {
                                      const T gm = self.grad[n * 2 * HW + i] * inv;
                                      for (std::size_t c = 0; c < C; ++c) g[(n * C + c) * HW + i] += gm;
                                      g[(n * C + argmax[n * HW + i]) * HW + i] += self.grad[n * 2 * HW + HW + i];
                                  }
                          });
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C,1,1].
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
    detail::require_rank4(x.shape(), "global_avg_pool");
    const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(NC);
    for (std::size_t nc = 0; nc < NC; ++nc) {
        T s = T(0);
        for (std::size_t i = 0; i < HW; ++i) s += x[nc * HW + i];
        out[nc] = s / static_cast<T>(HW);
    }
    return make_result<T>(Shape{x.dim(0), x.dim(1), 1, 1}, std::move(out), {&x}, [NC, HW](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        const T inv = T(1) / static_cast<T>(HW);
        for (std::size_t nc = 0; nc < NC; ++nc)
            for (std::size_t i = 0; i < HW; ++i) g[nc * HW + i] += self.grad[nc] * inv;
    });
}

}  // namespace misra

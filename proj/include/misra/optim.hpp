#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "misra/core/tensor.hpp"

namespace misra {

struct AdamWConfig {
    double lr = 5e-4;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One AdamW update of a single tensor. `step` is the 1-based step count used for bias correction.
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
template <class T>
void adamw_step(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, const AdamWConfig& cfg,
                std::size_t step) {
    if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size())
        throw DimensionError("adamw_step: parameter, gradient and moment sizes differ (" + std::to_string(theta.size()) +
                             ", " + std::to_string(grad.size()) + ", " + std::to_string(m.size()) + ", " +
                             std::to_string(v.size()) + ")");
    if (step == 0) throw ContractError("adamw_step: step count starts at 1");
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg.eps) + cfg.weight_decay * theta[i];
        theta[i] = static_cast<T>(theta[i] - cfg.lr * update);
    }
}

/// AdamW over a fixed list of named parameters. Parameters without a gradient this step are still decayed.
template <class T>
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, BasicTensor<T>>> params, AdamWConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        for (const auto& [name, p] : params_) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    std::size_t steps() const { return step_; }
    void set_steps(std::size_t s) { step_ = s; }

    std::vector<T>& first_moment(std::size_t i) { return m_[i]; }
    std::vector<T>& second_moment(std::size_t i) { return v_[i]; }
    const std::vector<T>& first_moment(std::size_t i) const { return m_[i]; }
    const std::vector<T>& second_moment(std::size_t i) const { return v_[i]; }
    const std::vector<std::pair<std::string, BasicTensor<T>>>& params() const { return params_; }

    void step() {
        ++step_;
        std::vector<T> zeros;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].second;
            std::span<const T> g;
            if (p.has_grad()) {
                g = p.grad();
            } else {
                zeros.assign(p.numel(), T(0));
                g = zeros;
            }
            adamw_step<T>(p.data(), g, m_[i], v_[i], cfg_, step_);
        }
    }

private:
    std::vector<std::pair<std::string, BasicTensor<T>>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    std::size_t step_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<std::pair<std::string, BasicTensor<T>>>& params, double max_norm) {
    double sq = 0;
    for (const auto& [name, p] : params)
        if (p.has_grad())
            for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& [name, p] : params)
            if (p.has_grad()) {
                auto q = p;
                for (auto& g : q.grad_buffer()) g = static_cast<T>(g * scale);
            }
    }
    return norm;
}

}  // namespace misra

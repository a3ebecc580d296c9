#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "misra/core/rng.hpp"
#include "misra/core/tensor.hpp"

namespace misra {

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t probes = 0;

    bool passed(double tol) const { return max_rel_error < tol; }
};

/// Compares backward() against central finite differences in double precision.
/// `loss_fn` must rebuild the graph from the current values of `inputs` on every call.
/// At most `max_probes` coordinates per input are checked (all if the input is small enough).
/// Relative error is |a - f| / max(|a|, |f|, floor).
inline GradCheckResult check_gradients(const std::function<Tensor64()>& loss_fn, std::vector<Tensor64> inputs,
                                       double h = 1e-3, std::size_t max_probes = 64, std::uint64_t seed = 7,
                                       double floor = 1e-6) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    Tensor64 loss = loss_fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs)
        analytic.emplace_back(in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                            : std::vector<double>(in.numel(), 0.0));

    GradCheckResult result;
    Rng rng(seed);
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& in = inputs[k];
        std::vector<std::size_t> coords(in.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (coords.size() > max_probes) {
            for (std::size_t i = 0; i < max_probes; ++i) std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
            coords.resize(max_probes);
        }
        for (std::size_t i : coords) {
            const double saved = in[i];
            in[i] = saved + h;
            const double up = loss_fn().item();
            in[i] = saved - h;
            const double down = loss_fn().item();
            in[i] = saved;
            const double fd = (up - down) / (2 * h);
            const double a = analytic[k][i];
            const double abs_err = std::abs(a - fd);
            const double rel = abs_err / std::max({std::abs(a), std::abs(fd), floor});
            result.max_abs_error = std::max(result.max_abs_error, abs_err);
            result.max_rel_error = std::max(result.max_rel_error, rel);
            ++result.probes;
        }
    }
    return result;
}

}  // namespace misra

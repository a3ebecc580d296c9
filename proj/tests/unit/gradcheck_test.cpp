#include <gtest/gtest.h>

#include "misra/core/gradcheck.hpp"
#include "misra/core/ops.hpp"
#include "oracles.hpp"

using namespace misra;

// A deliberately wrong backward: claims d/dx (x^2) = x.
Tensor64 bad_square(const Tensor64& x) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] * x[i];
    return make_result<double>(x.shape(), std::move(v), {&x}, [](TensorNode<double>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.parents[0]->data[i];
    });
}

TEST(GradCheck, DetectsWrongBackward) {
    Rng rng(4);
    auto x = oracle::random_tensor<double>(Shape{6}, rng, 0.5, 2.0);
    auto good = check_gradients([&] { return sum(mul(x, x)); }, {x});
    EXPECT_LT(good.max_rel_error, 1e-8);
    auto bad = check_gradients([&] { return sum(bad_square(x)); }, {x});
    EXPECT_GT(bad.max_rel_error, 0.4);
}

TEST(GradCheck, ProbesAreCapped) {
    Rng rng(5);
    auto x = oracle::random_tensor<double>(Shape{500}, rng);
    auto r = check_gradients([&] { return sum(mul(x, x)); }, {x}, 1e-3, 20);
    EXPECT_EQ(r.probes, 20u);
}

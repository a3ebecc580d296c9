#include <gtest/gtest.h>

#include <set>

#include "misra/core/gradcheck.hpp"
#include "misra/losses.hpp"
#include "misra/model.hpp"
#include "oracles.hpp"

using namespace misra;

namespace {

ModelConfig small_config(std::size_t classes = 7, std::size_t T = 3) {
    ModelConfig c;
    c.base_width = 8;
    c.num_classes = classes;
    c.T = T;
    return c;
}

template <class T>
BasicTensor<T> input(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed, std::size_t channels = 5) {
    Rng rng(seed);
    return oracle::random_tensor<T>(Shape{n, channels, h, w}, rng, 0.0, 1.0);
}

template <class T>
bool same_values(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace

TEST(ModelShapes, FullWidthStagesAndLogits) {
    NoGradGuard ng;
    Misra<float> model(ModelConfig{}, 1);
    auto x = input<float>(1, 64, 64, 2);
    auto out = model.forward(x);
    ASSERT_EQ(out.passes(), 4u);
    const auto& e = out.features[0];
    EXPECT_EQ(e.e1.shape(), (Shape{1, 48, 64, 64}));
    EXPECT_EQ(e.e2.shape(), (Shape{1, 96, 32, 32}));
    EXPECT_EQ(e.e3.shape(), (Shape{1, 192, 16, 16}));
    EXPECT_EQ(e.e4.shape(), (Shape{1, 384, 8, 8}));
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_EQ(out.logits[t].shape(), (Shape{1, 7, 64, 64}));
        EXPECT_EQ(out.probabilities[t].shape(), (Shape{1, 7, 64, 64}));
    }
    ASSERT_EQ(out.prediction.size(), 1u);
    EXPECT_EQ(out.prediction[0].height, 64u);
}

TEST(ModelShapes, PassCountFollowsFeedbackSetting) {
    NoGradGuard ng;
    auto x = input<float>(2, 16, 24, 3);
    for (std::size_t T : {0u, 1u, 2u}) {
        Misra<float> m(small_config(7, T), 1);
        EXPECT_EQ(m.forward(x).passes(), T + 1);
    }
    auto cfg = small_config(7, 3);
    cfg.use_ifm = false;
    Misra<float> off(cfg, 1);
    EXPECT_EQ(off.forward(x).passes(), 1u);
    for (const auto& [name, p] : off.named_parameters()) EXPECT_NE(name.rfind("ff", 0), 0u) << name;
}

TEST(ModelShapes, InputValidation) {
    NoGradGuard ng;
    Misra<float> m(small_config(), 1);
    EXPECT_THROW(m.forward(input<float>(1, 16, 16, 1, 3)), DimensionError);
    EXPECT_THROW(m.forward(input<float>(1, 12, 16, 1)), SizingError);
    auto cfg = small_config();
    cfg.use_luma_channels = false;
    Misra<float> rgb(cfg, 1);
    EXPECT_EQ(rgb.forward(input<float>(1, 16, 16, 1, 3)).passes(), 4u);
    cfg.base_width = 4;
    EXPECT_THROW((Misra<float>(cfg, 1)), ConfigError);
}

TEST(ModelShapes, DecoderStages) {
    NoGradGuard ng;
    Misra<float> m(small_config(), 4);
    auto e = m.encoder_forward(input<float>(2, 32, 16, 5));
    auto s = m.gate_skips(e);
    EXPECT_EQ(s.s1.shape(), e.e1.shape());
    EXPECT_EQ(s.s2.shape(), e.e2.shape());
    EXPECT_EQ(s.s3.shape(), e.e3.shape());
    auto ctx = m.context_block(e.e4);
    EXPECT_EQ(ctx.shape(), (Shape{2, 64, 4, 2}));
    auto d1 = m.decoder_forward(ctx, s.s3, s.s2, s.s1);
    EXPECT_EQ(d1.shape(), (Shape{2, 8, 32, 16}));
    EXPECT_EQ(m.head(d1).shape(), (Shape{2, 7, 32, 16}));
    EXPECT_THROW(m.decoder_forward(ctx, s.s2, s.s2, s.s1), DimensionError);
}

TEST(ModelHead, ZeroHeadGivesUniformProbabilities) {
    NoGradGuard ng;
    Misra<float> m(small_config(), 5);
    for (auto& v : m.head_layer().weight.values()) v = 0;
    for (auto& v : m.head_layer().bias.values()) v = 0;
    auto out = m.forward(input<float>(1, 16, 16, 6));
    for (const auto& p : out.probabilities)
        for (float v : p.data()) EXPECT_NEAR(v, 1.0f / 7.0f, 1e-7);
    for (auto l : out.prediction[0].labels) EXPECT_EQ(l, 0);
}

TEST(ModelAttention, ChannelGateOpenIsIdentity) {
    NoGradGuard ng;
    Misra<double> m(small_config(), 6);
    auto& ca = m.channel_attention(2);
    for (auto& v : ca.excite.weight.values()) v = 0;
    for (auto& v : ca.excite.bias.values()) v = 20;
    Rng rng(1);
    auto f = oracle::random_tensor<double>(Shape{2, 16, 4, 4}, rng, -2, 2);
    auto g = ca(f);
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(g[i], f[i], 1e-8 * std::abs(f[i]) + 1e-12);
}

TEST(ModelAttention, GatesStayInUnitInterval) {
    NoGradGuard ng;
    Misra<double> m(small_config(), 7);
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        auto f = oracle::random_tensor<double>(Shape{1, 16, 8, 8}, rng, -5, 5);
        auto cg = m.channel_attention(2).gate(f);
        auto sg = m.spatial_attention(2).gate(f);
        EXPECT_EQ(cg.shape(), (Shape{1, 16, 1, 1}));
        EXPECT_EQ(sg.shape(), (Shape{1, 1, 8, 8}));
        for (double v : cg.data()) EXPECT_TRUE(v > 0 && v < 1);
        for (double v : sg.data()) EXPECT_TRUE(v > 0 && v < 1);
    }
}

TEST(ModelAttention, SpatialGateWithBiasOnlyIsConstant) {
    NoGradGuard ng;
    Misra<double> m(small_config(), 8);
    auto& sa = m.spatial_attention(3);
    for (auto& v : sa.conv.weight.values()) v = 0;
    sa.conv.bias[0] = 0.7;
    Rng rng(3);
    auto f = oracle::random_tensor<double>(Shape{2, 4, 6, 6}, rng, -1, 1);
    const double s = 1 / (1 + std::exp(-0.7));
    auto gate = sa.gate(f);
    for (double v : gate.data()) EXPECT_NEAR(v, s, 1e-15);
    auto y = sa(f);
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(y[i], s * f[i], 1e-15);
}

TEST(ModelAttention, SkipModeNonePassesFeaturesThrough) {
    NoGradGuard ng;
    auto cfg = small_config();
    cfg.skip_attention_mode = SkipAttentionMode::None;
    Misra<float> m(cfg, 9);
    auto e = m.encoder_forward(input<float>(1, 16, 16, 1));
    auto s = m.gate_skips(e);
    EXPECT_TRUE(same_values(s.s1, e.e1));
    EXPECT_TRUE(same_values(s.s2, e.e2));
    EXPECT_TRUE(same_values(s.s3, e.e3));
}

TEST(ModelAttention, ClosedSpatialGateLeavesResidual) {
    NoGradGuard ng;
    Misra<double> m(small_config(), 10);
    for (int j : {2, 3}) {
        auto& sa = m.spatial_attention(j);
        for (auto& v : sa.conv.weight.values()) v = 0;
        sa.conv.bias[0] = -60;
    }
    auto e = m.encoder_forward(input<double>(1, 16, 16, 2));
    auto s = m.gate_skips(e);
    for (std::size_t i = 0; i < e.e2.numel(); ++i) EXPECT_NEAR(s.s2[i], e.e2[i], 1e-20 + 1e-24 * std::abs(e.e2[i]));
    for (std::size_t i = 0; i < e.e3.numel(); ++i) EXPECT_NEAR(s.s3[i], e.e3[i], 1e-20 + 1e-24 * std::abs(e.e3[i]));
    // s1 = CA(e1) has no residual path
    auto ca1 = m.channel_attention(1)(e.e1);
    EXPECT_TRUE(same_values(s.s1, ca1));
}

TEST(ModelAttention, SaAllAddsFirstSpatialGate) {
    auto cfg = small_config();
    cfg.skip_attention_mode = SkipAttentionMode::SaAll;
    Misra<float> m(cfg, 11);
    std::set<std::string> names;
    for (const auto& [name, p] : m.named_parameters()) names.insert(name);
    EXPECT_TRUE(names.count("skip1.sa.conv.weight"));
    Misra<float> plain(small_config(), 11);
    for (const auto& [name, p] : plain.named_parameters()) EXPECT_NE(name, "skip1.sa.conv.weight");
    EXPECT_EQ(skip_attention_from_string("sa_all"), SkipAttentionMode::SaAll);
    EXPECT_THROW(skip_attention_from_string("both"), ConfigError);
}

TEST(ModelFeedback, FirstStageIsNeverRefined) {
    NoGradGuard ng;
    Misra<float> m(small_config(), 12);
    auto out = m.forward(input<float>(1, 16, 16, 3));
    ASSERT_EQ(out.passes(), 4u);
    for (std::size_t t = 1; t < 4; ++t) {
        EXPECT_TRUE(same_values(out.features[t].e1, out.features[0].e1));
        for (int k = 2; k <= 4; ++k) {
            EXPECT_EQ(out.features[t].stage(k).shape(), out.features[0].stage(k).shape());
            EXPECT_FALSE(same_values(out.features[t].stage(k), out.features[0].stage(k))) << "t=" << t << " k=" << k;
        }
        EXPECT_FALSE(same_values(out.logits[t], out.logits[t - 1]));
    }
}

TEST(ModelFeedback, FuseShapesAndErrors) {
    NoGradGuard ng;
    Misra<float> m(small_config(), 13);
    auto e = m.encoder_forward(input<float>(2, 32, 32, 4));
    Rng rng(4);
    auto d1 = oracle::random_tensor<float>(Shape{2, 8, 32, 32}, rng, 0, 1);
    for (int k = 2; k <= 4; ++k) EXPECT_EQ(m.feedback_fuse(k, e.stage(k), d1).shape(), e.stage(k).shape());
    auto wrong = oracle::random_tensor<float>(Shape{2, 8, 16, 16}, rng, 0, 1);
    EXPECT_THROW(m.feedback_fuse(2, e.e2, wrong), DimensionError);
    EXPECT_THROW(m.feedback_fuse(1, e.e1, d1), ContractError);
    EXPECT_THROW(m.feedback_fuse(5, e.e4, d1), ContractError);
    Misra<float> t0(small_config(7, 0), 13);
    EXPECT_THROW(t0.feedback_fuse(2, e.e2, d1), ContractError);
}

TEST(ModelFeedback, NullFeedbackReducesToFuseOfZeros) {
    NoGradGuard ng;
    Misra<double> m(small_config(), 14);
    auto e = m.encoder_forward(input<double>(1, 16, 16, 5));
    auto& ff = m.feedback_module(3);
    for (auto& v : ff.project.bias.values()) v = 0;
    auto zeros = Tensor64(Shape{1, 8, 16, 16}, 0.0);
    auto got = m.feedback_fuse(3, e.e3, zeros);
    auto expect = ff.fuse(concat_channels<double>({e.e3, Tensor64(e.e3.shape(), 0.0)}), true);
    EXPECT_TRUE(same_values(got, expect));
}

TEST(ModelFeedback, GradientReachesBothFuseInputs) {
    Misra<double> m(small_config(), 15);
    Rng rng(5);
    for (int k = 2; k <= 4; ++k) {
        const std::size_t f = std::size_t{1} << (k - 1);
        auto ek = oracle::random_tensor<double>(Shape{2, m.config().stage_width(k), 16 / f, 16 / f}, rng, 0, 1);
        auto d1 = oracle::random_tensor<double>(Shape{2, 8, 16, 16}, rng, 0, 1);
        ek.set_requires_grad();
        d1.set_requires_grad();
        Rng wr(static_cast<std::uint64_t>(k));
        auto w = oracle::random_tensor<double>(ek.shape(), wr, -1, 1);
        backward(sum(mul(m.feedback_fuse(k, ek, d1), w)));
        auto nonzero = [](const Tensor64& t) {
            return std::any_of(t.grad().begin(), t.grad().end(), [](double v) { return v != 0.0; });
        };
        EXPECT_TRUE(nonzero(ek)) << k;
        EXPECT_TRUE(nonzero(d1)) << k;
    }
}

TEST(ModelGradients, AttentionModulesMatchFiniteDifferences) {
    Misra<double> m(small_config(), 16);
    Rng rng(6);
    auto f = oracle::random_tensor<double>(Shape{2, 16, 6, 6}, rng, -1, 1);
    auto w = oracle::random_tensor<double>(Shape{2, 16, 6, 6}, rng, -1, 1);
    auto& ca = m.channel_attention(2);
    auto& sa = m.spatial_attention(2);
    auto r1 = check_gradients([&] { return sum(mul(ca(f), w)); },
                              {f, ca.squeeze.weight, ca.squeeze.bias, ca.excite.weight, ca.excite.bias}, 1e-5);
    EXPECT_LT(r1.max_rel_error, 1e-5);
    auto r2 = check_gradients([&] { return sum(mul(sa(f), w)); }, {f, sa.conv.weight, sa.conv.bias}, 1e-5);
    EXPECT_LT(r2.max_rel_error, 1e-5);
}

TEST(ModelGradients, FeedbackFuseMatchesFiniteDifferences) {
    Misra<double> m(small_config(), 17);
    Rng rng(7);
    auto e3 = oracle::random_tensor<double>(Shape{2, 32, 4, 4}, rng, 0, 1);
    auto d1 = oracle::random_tensor<double>(Shape{2, 8, 16, 16}, rng, 0, 1);
    auto w = oracle::random_tensor<double>(Shape{2, 32, 4, 4}, rng, -1, 1);
    auto& ff = m.feedback_module(3);
    auto r = check_gradients([&] { return sum(mul(m.feedback_fuse(3, e3, d1), w)); },
                             {e3, d1, ff.project.weight, ff.project.bias, ff.fuse.conv.weight, ff.fuse.bn.gamma},
                             1e-6, 24);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(ModelGradients, EndToEndTotalLossMatchesFiniteDifferences) {
    Misra<double> m(small_config(3, 2), 18);
    auto x = input<double>(2, 16, 16, 8);
    std::vector<LabelMask> labels(2, LabelMask(16, 16));
    Rng rng(9);
    for (auto& mask : labels)
        for (auto& l : mask.labels) l = static_cast<std::uint8_t>(rng.below(3));
    ClassWeights w{{0.8, 1.1, 1.1}, ClassWeightMode::Nmfb};
    std::vector<Tensor64> probe;
    for (const auto& [name, p] : m.named_parameters())
        if (name == "enc1.0.conv.weight" || name == "skip2.sa.conv.weight" || name == "ff3.project.weight" ||
            name == "ff4.fuse.bn.gamma" || name == "dec1.1.conv.weight" || name == "head.weight" ||
            name == "skip1.ca.excite.bias" || name == "context.bn.beta")
            probe.push_back(p);
    ASSERT_EQ(probe.size(), 8u);
    auto r = check_gradients([&] { return total_loss(m.forward(x), labels, w).total_tensor; }, probe, 1e-6, 4);
    EXPECT_GE(r.probes, 20u);
    EXPECT_LT(r.max_rel_error, 1e-3) << "abs " << r.max_abs_error;
}

TEST(ModelState, SeededInitAndCopy) {
    Misra<float> a(small_config(), 21), b(small_config(), 21), c(small_config(), 22);
    auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].first, pb[i].first);
        EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
        differs = differs || pa[i].second.values() != pc[i].second.values();
    }
    EXPECT_TRUE(differs);
    Misra<double> d(small_config(), 99);
    d.copy_state_from(a);
    auto pd = d.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pa[i].second.numel(); ++j)
            EXPECT_EQ(static_cast<float>(pd[i].second[j]), pa[i].second[j]);
    // BN gamma/beta start at 1/0
    for (const auto& [name, p] : pa)
        if (name.ends_with("bn.gamma"))
            for (float v : p.data()) EXPECT_EQ(v, 1.0f);
}

TEST(ModelState, EvalModeIsDeterministicAndBatchIndependent) {
    NoGradGuard ng;
    Misra<float> m(small_config(), 23);
    m.set_training(false);
    auto x = input<float>(2, 16, 16, 10);
    auto a = m.forward(x), b = m.forward(x);
    EXPECT_EQ(a.final_logits().values(), b.final_logits().values());
    // in eval mode item 0 must not depend on item 1
    Tensor x0(Shape{1, 5, 16, 16}, std::vector<float>(x.values().begin(), x.values().begin() + 5 * 256));
    auto single = m.forward(x0).final_logits();
    for (std::size_t i = 0; i < single.numel(); ++i) EXPECT_NEAR(single[i], a.final_logits()[i], 1e-4);
}

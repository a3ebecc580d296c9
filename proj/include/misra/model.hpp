#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "misra/core/nn_ops.hpp"
#include "misra/core/rng.hpp"
#include "misra/label_mask.hpp"

namespace misra {

enum class SkipAttentionMode { Default, None, SaAll };

inline std::string to_string(SkipAttentionMode m) {
    switch (m) {
        case SkipAttentionMode::Default: return "default";
        case SkipAttentionMode::None: return "none";
        case SkipAttentionMode::SaAll: return "sa_all";
    }
    return "default";
}

inline SkipAttentionMode skip_attention_from_string(const std::string& s) {
    if (s == "default") return SkipAttentionMode::Default;
    if (s == "none") return SkipAttentionMode::None;
    if (s == "sa_all") return SkipAttentionMode::SaAll;
    throw ConfigError("unknown skip_attention_mode '" + s + "' (expected default, none, sa_all)");
}

struct ModelConfig {
    std::size_t num_classes = kNumClasses;
    std::size_t base_width = 48;
    std::size_t T = 3;
    bool use_luma_channels = true;
    SkipAttentionMode skip_attention_mode = SkipAttentionMode::Default;
    bool use_ifm = true;

    std::size_t in_channels() const { return use_luma_channels ? 5 : 3; }
    /// Feedback passes actually run after t = 0.
    std::size_t feedback_iterations() const { return use_ifm ? T : 0; }
    std::size_t stage_width(int k) const { return base_width << (k - 1); }

    void validate() const {
        if (base_width < 8) throw ConfigError("base_width must be >= 8, got " + std::to_string(base_width));
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (num_classes > 256) throw ConfigError("num_classes must fit in 8-bit labels");
    }

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

template <class T>
BasicTensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    BasicTensor<T> w(std::move(shape));
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = static_cast<T>(std_dev * rng.normal());
    w.set_requires_grad(true);
    return w;
}

template <class T>
struct Conv2dLayer {
    BasicTensor<T> weight;
    BasicTensor<T> bias;  // undefined when the conv feeds batch norm
    std::size_t stride = 1;
    std::size_t padding = 0;

    Conv2dLayer() = default;
    Conv2dLayer(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng, bool with_bias)
        : weight(kaiming_normal<T>(Shape{cout, cin, k, k}, cin * k * k, rng)), padding(k / 2) {
        if (with_bias) bias = BasicTensor<T>(Shape{cout}, T(0)).set_requires_grad(true);
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

    void collect(const std::string& prefix, NamedTensors<T>& params) const {
        params.emplace_back(prefix + ".weight", weight);
        if (bias.defined()) params.emplace_back(prefix + ".bias", bias);
    }
};

template <class T>
struct BatchNormLayer {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    BatchNormState<T> state;

    BatchNormLayer() = default;
    explicit BatchNormLayer(std::size_t c)
        : gamma(BasicTensor<T>(Shape{c}, T(1)).set_requires_grad(true)),
          beta(BasicTensor<T>(Shape{c}, T(0)).set_requires_grad(true)),
          state(c) {}

    BasicTensor<T> operator()(const BasicTensor<T>& x, bool training) {
        return batchnorm2d(x, gamma, beta, state, training);
    }

    void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
        params.emplace_back(prefix + ".gamma", gamma);
        params.emplace_back(prefix + ".beta", beta);
        buffers.emplace_back(prefix + ".running_mean", state.running_mean);
        buffers.emplace_back(prefix + ".running_var", state.running_var);
    }
};

/// 3×3 conv (no bias) -> batch norm -> ReLU.
template <class T>
struct ConvBnRelu {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;

    ConvBnRelu() = default;
    ConvBnRelu(std::size_t cin, std::size_t cout, Rng& rng) : conv(cin, cout, 3, rng, false), bn(cout) {}

    BasicTensor<T> operator()(const BasicTensor<T>& x, bool training) { return relu(bn(conv(x), training)); }

    void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
        conv.collect(prefix + ".conv", params);
        bn.collect(prefix + ".bn", params, buffers);
    }
};

/// Squeeze-and-excitation: GAP -> 1×1 (C/8) -> ReLU -> 1×1 (C) -> sigmoid -> channel scale.
template <class T>
struct ChannelAttention {
    static constexpr std::size_t kReduction = 8;
    Conv2dLayer<T> squeeze;
    Conv2dLayer<T> excite;

    ChannelAttention() = default;
    ChannelAttention(std::size_t channels, Rng& rng) {
        if (channels < kReduction)
            throw ConfigError("channel attention needs >= 8 channels, got " + std::to_string(channels));
        squeeze = Conv2dLayer<T>(channels, channels / kReduction, 1, rng, true);
        excite = Conv2dLayer<T>(channels / kReduction, channels, 1, rng, true);
    }

    BasicTensor<T> gate(const BasicTensor<T>& f) const { return sigmoid(excite(relu(squeeze(global_avg_pool(f))))); }
    BasicTensor<T> operator()(const BasicTensor<T>& f) const { return mul_channel_gate(f, gate(f)); }

    void collect(const std::string& prefix, NamedTensors<T>& params) const {
        squeeze.collect(prefix + ".squeeze", params);
        excite.collect(prefix + ".excite", params);
    }
};

/// [channel mean, channel max] -> 7×7 conv -> sigmoid -> spatial scale.
template <class T>
struct SpatialAttention {
    Conv2dLayer<T> conv;

    SpatialAttention() = default;
    explicit SpatialAttention(Rng& rng) : conv(2, 1, 7, rng, true) {}

    BasicTensor<T> gate(const BasicTensor<T>& f) const { return sigmoid(conv(channel_mean_max(f))); }
    BasicTensor<T> operator()(const BasicTensor<T>& f) const { return mul_spatial_gate(f, gate(f)); }

    void collect(const std::string& prefix, NamedTensors<T>& params) const { conv.collect(prefix + ".conv", params); }
};

/// FF_k: pool d1 to stage-k resolution, 1×1 project to stage width, concat with e_k^(0), fuse.
template <class T>
struct FeedbackFuse {
    int stage = 2;
    Conv2dLayer<T> project;
    ConvBnRelu<T> fuse;

    FeedbackFuse() = default;
    FeedbackFuse(int k, std::size_t d1_width, std::size_t stage_width, Rng& rng)
        : stage(k), project(d1_width, stage_width, 1, rng, true), fuse(2 * stage_width, stage_width, rng) {
        if (k < 2 || k > 4) throw ContractError("feedback fuse exists only for stages 2..4, got " + std::to_string(k));
    }

    BasicTensor<T> operator()(const BasicTensor<T>& e_k0, const BasicTensor<T>& d1_prev, bool training) {
        const std::size_t factor = std::size_t{1} << (stage - 1);
        if (d1_prev.dim(2) != e_k0.dim(2) * factor || d1_prev.dim(3) != e_k0.dim(3) * factor)
            throw DimensionError("feedback fuse stage " + std::to_string(stage) + ": d1 " + shape_str(d1_prev.shape()) +
                                 " is not " + std::to_string(factor) + "x the stage extent " +
                                 shape_str(e_k0.shape()));
        BasicTensor<T> fed = project(avg_pool2d(d1_prev, factor));
        return fuse(concat_channels<T>({e_k0, fed}), training);
    }

    void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
        project.collect(prefix + ".project", params);
        fuse.collect(prefix + ".fuse", params, buffers);
    }
};

template <class T>
struct EncoderFeatures {
    BasicTensor<T> e1, e2, e3, e4;
    const BasicTensor<T>& stage(int k) const {
        switch (k) {
            case 1: return e1;
            case 2: return e2;
            case 3: return e3;
            default: return e4;
        }
    }
};

template <class T>
struct GatedSkips {
    BasicTensor<T> s1, s2, s3;
};

template <class T>
struct IterationOutputs {
    std::vector<BasicTensor<T>> logits;         // z^(t), t = 0..T
    std::vector<BasicTensor<T>> probabilities;  // p^(t)
    std::vector<EncoderFeatures<T>> features;   // e^(t) fed to the decoder at pass t
    std::vector<LabelMask> prediction;          // argmax of p^(T), one mask per batch item

    std::size_t passes() const { return logits.size(); }
    const BasicTensor<T>& final_logits() const { return logits.back(); }
    const BasicTensor<T>& final_probabilities() const { return probabilities.back(); }
};

/// Attention-gated U-Net with iterative decoder-to-encoder feedback.
template <class T>
class Misra {
public:
    explicit Misra(ModelConfig config, std::uint64_t seed = 0) : config_(config) {
        config_.validate();
        Rng rng(seed);
        const auto w = [&](int k) { return config_.stage_width(k); };
        enc1a_ = ConvBnRelu<T>(config_.in_channels(), w(1), rng);
        enc1b_ = ConvBnRelu<T>(w(1), w(1), rng);
        enc2a_ = ConvBnRelu<T>(w(1), w(2), rng);
        enc2b_ = ConvBnRelu<T>(w(2), w(2), rng);
        enc3a_ = ConvBnRelu<T>(w(2), w(3), rng);
        enc3b_ = ConvBnRelu<T>(w(3), w(3), rng);
        enc4a_ = ConvBnRelu<T>(w(3), w(4), rng);
        enc4b_ = ConvBnRelu<T>(w(4), w(4), rng);
        ca1_ = ChannelAttention<T>(w(1), rng);
        ca2_ = ChannelAttention<T>(w(2), rng);
        ca3_ = ChannelAttention<T>(w(3), rng);
        sa2_ = SpatialAttention<T>(rng);
        sa3_ = SpatialAttention<T>(rng);
        if (config_.skip_attention_mode == SkipAttentionMode::SaAll) sa1_ = SpatialAttention<T>(rng);
        context_ = ConvBnRelu<T>(w(4), w(4), rng);
        dec3a_ = ConvBnRelu<T>(w(4) + w(3), w(3), rng);
        dec3b_ = ConvBnRelu<T>(w(3), w(3), rng);
        dec2a_ = ConvBnRelu<T>(w(3) + w(2), w(2), rng);
        dec2b_ = ConvBnRelu<T>(w(2), w(2), rng);
        dec1a_ = ConvBnRelu<T>(w(2) + w(1), w(1), rng);
        dec1b_ = ConvBnRelu<T>(w(1), w(1), rng);
        head_ = Conv2dLayer<T>(w(1), config_.num_classes, 1, rng, true);
        if (config_.feedback_iterations() > 0) {
            for (int k = 2; k <= 4; ++k) ff_[static_cast<std::size_t>(k - 2)] = FeedbackFuse<T>(k, w(1), w(k), rng);
        }
    }

    const ModelConfig& config() const { return config_; }
    bool training() const { return training_; }
    void set_training(bool on) { training_ = on; }

    /// e^(0) when `d1_prev` is null; otherwise e1 = e1^(0) and e_k = FF_k(e_k^(0), d1_prev) for k = 2..4.
    EncoderFeatures<T> encoder_forward(const BasicTensor<T>& x, const BasicTensor<T>* d1_prev = nullptr) {
        EncoderFeatures<T> e0 = encode(x);
        if (!d1_prev) return e0;
        return apply_feedback(e0, *d1_prev);
    }

    BasicTensor<T> feedback_fuse(int k, const BasicTensor<T>& e_k0, const BasicTensor<T>& d1_prev) {
        if (k < 2 || k > 4) throw ContractError("feedback_fuse: stage index must be 2, 3 or 4 (got " + std::to_string(k) + ")");
        if (config_.feedback_iterations() == 0)
            throw ContractError("feedback_fuse: model was built without feedback modules (T = 0 or feedback off)");
        return ff_[static_cast<std::size_t>(k - 2)](e_k0, d1_prev, training_);
    }

    GatedSkips<T> gate_skips(const EncoderFeatures<T>& e) const {
        return GatedSkips<T>{gate_s1(e.e1), gate_residual(e.e2, ca2_, sa2_), gate_residual(e.e3, ca3_, sa3_)};
    }

    BasicTensor<T> context_block(const BasicTensor<T>& e4) { return context_(e4, training_); }

    BasicTensor<T> decoder_forward(const BasicTensor<T>& e4_ctx, const BasicTensor<T>& s3, const BasicTensor<T>& s2,
                                   const BasicTensor<T>& s1) {
        auto d3 = up_block(e4_ctx, s3, dec3a_, dec3b_);
        auto d2 = up_block(d3, s2, dec2a_, dec2b_);
        return up_block(d2, s1, dec1a_, dec1b_);
    }

    BasicTensor<T> head(const BasicTensor<T>& d1) const { return head_(d1); }

    IterationOutputs<T> forward(const BasicTensor<T>& x) {
        IterationOutputs<T> out;
        const EncoderFeatures<T> e0 = encode(x);
        const GatedSkips<T> s0 = gate_skips(e0);
        BasicTensor<T> d1 = emit(out, e0, s0);
        for (std::size_t t = 1; t <= config_.feedback_iterations(); ++t) {
            EncoderFeatures<T> e = apply_feedback(e0, d1);
            // s1 reads only e1^(0), so the t = 0 gate is reused.
            GatedSkips<T> s{s0.s1, gate_residual(e.e2, ca2_, sa2_), gate_residual(e.e3, ca3_, sa3_)};
            d1 = emit(out, e, s);
        }
        out.prediction = argmax_channel(out.final_logits());
        return out;
    }

    NamedTensors<T> named_parameters() const {
        NamedTensors<T> params, buffers;
        collect(params, buffers);
        return params;
    }

    NamedTensors<T> named_buffers() const {
        NamedTensors<T> params, buffers;
        collect(params, buffers);
        return buffers;
    }

    void zero_grad() {
        for (auto& [name, p] : named_parameters()) p.zero_grad();
    }

    /// Copies parameter and buffer values from a model with the same config and any scalar type.
    template <class U>
    void copy_state_from(const Misra<U>& other) {
        auto dst = named_parameters(), dst_b = named_buffers();
        auto src = other.named_parameters(), src_b = other.named_buffers();
        dst.insert(dst.end(), dst_b.begin(), dst_b.end());
        src.insert(src.end(), src_b.begin(), src_b.end());
        if (dst.size() != src.size()) throw ConfigError("copy_state_from: parameter layouts differ");
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (dst[i].first != src[i].first || dst[i].second.shape() != src[i].second.shape())
                throw ConfigError("copy_state_from: mismatch at " + dst[i].first);
            for (std::size_t j = 0; j < dst[i].second.numel(); ++j)
                dst[i].second[j] = static_cast<T>(src[i].second[j]);
        }
    }

    ChannelAttention<T>& channel_attention(int j) { return j == 1 ? ca1_ : (j == 2 ? ca2_ : ca3_); }
    SpatialAttention<T>& spatial_attention(int j) { return j == 1 ? sa1_ : (j == 2 ? sa2_ : sa3_); }
    Conv2dLayer<T>& head_layer() { return head_; }
    FeedbackFuse<T>& feedback_module(int k) { return ff_.at(static_cast<std::size_t>(k - 2)); }

private:
    EncoderFeatures<T> encode(const BasicTensor<T>& x) {
        detail::require_rank4(x.shape(), "misra input");
        if (x.dim(1) != config_.in_channels())
            throw DimensionError("misra input has " + std::to_string(x.dim(1)) + " channels (axis 1), expected " +
                                 std::to_string(config_.in_channels()));
        if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0 || x.dim(2) == 0 || x.dim(3) == 0)
            throw SizingError("misra input extents " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                              " must be multiples of 8");
        EncoderFeatures<T> e;
        e.e1 = enc1b_(enc1a_(x, training_), training_);
        e.e2 = enc2b_(enc2a_(blurpool2d(e.e1), training_), training_);
        e.e3 = enc3b_(enc3a_(maxpool2d(e.e2), training_), training_);
        e.e4 = enc4b_(enc4a_(maxpool2d(e.e3), training_), training_);
        return e;
    }

    EncoderFeatures<T> apply_feedback(const EncoderFeatures<T>& e0, const BasicTensor<T>& d1_prev) {
        return EncoderFeatures<T>{e0.e1, feedback_fuse(2, e0.e2, d1_prev), feedback_fuse(3, e0.e3, d1_prev),
                                  feedback_fuse(4, e0.e4, d1_prev)};
    }

    BasicTensor<T> gate_s1(const BasicTensor<T>& e1) const {
        switch (config_.skip_attention_mode) {
            case SkipAttentionMode::None: return e1;
            case SkipAttentionMode::SaAll: return sa1_(ca1_(e1));
            default: return ca1_(e1);
        }
    }

    BasicTensor<T> gate_residual(const BasicTensor<T>& e, const ChannelAttention<T>& ca,
                                 const SpatialAttention<T>& sa) const {
        if (config_.skip_attention_mode == SkipAttentionMode::None) return e;
        return add(sa(ca(e)), e);
    }

    BasicTensor<T> up_block(const BasicTensor<T>& deep, const BasicTensor<T>& skip, ConvBnRelu<T>& a, ConvBnRelu<T>& b) {
        auto up = upsample_bilinear2x(deep);
        if (up.dim(0) != skip.dim(0) || up.dim(2) != skip.dim(2) || up.dim(3) != skip.dim(3))
            throw DimensionError("decoder: upsampled " + shape_str(up.shape()) + " does not align with skip " +
                                 shape_str(skip.shape()));
        return b(a(concat_channels<T>({up, skip}), training_), training_);
    }

    BasicTensor<T> emit(IterationOutputs<T>& out, const EncoderFeatures<T>& e, const GatedSkips<T>& s) {
        BasicTensor<T> d1 = decoder_forward(context_block(e.e4), s.s3, s.s2, s.s1);
        BasicTensor<T> z = head(d1);
        out.probabilities.push_back(softmax_channel(z));
        out.logits.push_back(std::move(z));
        out.features.push_back(e);
        return d1;
    }

    void collect(NamedTensors<T>& p, NamedTensors<T>& b) const {
        enc1a_.collect("enc1.0", p, b);
        enc1b_.collect("enc1.1", p, b);
        enc2a_.collect("enc2.0", p, b);
        enc2b_.collect("enc2.1", p, b);
        enc3a_.collect("enc3.0", p, b);
        enc3b_.collect("enc3.1", p, b);
        enc4a_.collect("enc4.0", p, b);
        enc4b_.collect("enc4.1", p, b);
        ca1_.collect("skip1.ca", p);
        if (sa1_.conv.weight.defined()) sa1_.collect("skip1.sa", p);
        ca2_.collect("skip2.ca", p);
        sa2_.collect("skip2.sa", p);
        ca3_.collect("skip3.ca", p);
        sa3_.collect("skip3.sa", p);
        context_.collect("context", p, b);
        if (config_.feedback_iterations() > 0)
            for (int k = 2; k <= 4; ++k)
                ff_[static_cast<std::size_t>(k - 2)].collect("ff" + std::to_string(k), p, b);
        dec3a_.collect("dec3.0", p, b);
        dec3b_.collect("dec3.1", p, b);
        dec2a_.collect("dec2.0", p, b);
        dec2b_.collect("dec2.1", p, b);
        dec1a_.collect("dec1.0", p, b);
        dec1b_.collect("dec1.1", p, b);
        head_.collect("head", p);
    }

    ModelConfig config_;
    bool training_ = true;
    ConvBnRelu<T> enc1a_, enc1b_, enc2a_, enc2b_, enc3a_, enc3b_, enc4a_, enc4b_;
    ChannelAttention<T> ca1_, ca2_, ca3_;
    SpatialAttention<T> sa1_, sa2_, sa3_;
    ConvBnRelu<T> context_;
    std::array<FeedbackFuse<T>, 3> ff_;
    ConvBnRelu<T> dec3a_, dec3b_, dec2a_, dec2b_, dec1a_, dec1b_;
    Conv2dLayer<T> head_;
};

}  // namespace misra

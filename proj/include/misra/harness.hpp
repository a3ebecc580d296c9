#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "misra/core/archive.hpp"
#include "misra/losses.hpp"
#include "misra/metrics.hpp"
#include "misra/model.hpp"
#include "misra/optim.hpp"
#include "misra/png_io.hpp"
#include "misra/preprocess.hpp"
#include "misra/synthdata.hpp"

namespace misra {

namespace fs = std::filesystem;

/// Training run settings; the JSON config file uses these field names.
struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 1e-3;
    std::size_t epochs = 100;
    std::size_t batch_size = 4;
    std::size_t T = 3;
    double w = 0.1;
    ClassWeightMode class_weight_mode = ClassWeightMode::Nmfb;
    bool use_ftl = true;
    bool use_ifl = true;
    bool use_luma_channels = true;
    SkipAttentionMode skip_attention_mode = SkipAttentionMode::Default;
    bool use_ifm = true;
    std::size_t base_width = 48;
    std::size_t num_classes = kNumClasses;
    std::uint64_t seed = 0;
    double grad_clip = 5.0;  // global L2 norm; 0 disables
    std::string data_dir;
    std::string out_dir = "run";
    std::string train_split = "train";
    std::size_t max_train_scenes = 0;  // 0 = whole split
    std::string resume_from;           // checkpoint to continue from

    /// 64x64 scenes, base width 16, 30 epochs.
    static TrainConfig desk_scale() {
        TrainConfig c;
        c.epochs = 30;
        c.base_width = 16;
        return c;
    }

    ModelConfig model() const {
        ModelConfig m;
        m.num_classes = num_classes;
        m.base_width = base_width;
        m.T = T;
        m.use_luma_channels = use_luma_channels;
        m.skip_attention_mode = skip_attention_mode;
        m.use_ifm = use_ifm;
        return m;
    }

    AdamWConfig optimizer() const {
        AdamWConfig a;
        a.lr = lr;
        a.weight_decay = weight_decay;
        return a;
    }

    void validate() const {
        if (!(lr > 0)) throw ConfigError("lr must be positive");
        if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(w > 0)) throw ConfigError("w must be positive");
        if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be non-negative");
        model().validate();
    }

    nlohmann::json to_json() const {
        return {{"lr", lr},
                {"weight_decay", weight_decay},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"T", T},
                {"w", w},
                {"class_weight_mode", to_string(class_weight_mode)},
                {"use_ftl", use_ftl},
                {"use_ifl", use_ifl},
                {"use_luma_channels", use_luma_channels},
                {"skip_attention_mode", to_string(skip_attention_mode)},
                {"use_ifm", use_ifm},
                {"base_width", base_width},
                {"num_classes", num_classes},
                {"seed", seed},
                {"grad_clip", grad_clip},
                {"data_dir", data_dir},
                {"out_dir", out_dir},
                {"train_split", train_split},
                {"max_train_scenes", max_train_scenes},
                {"resume_from", resume_from}};
    }

    /// Missing fields keep their defaults (or those of `base`); unknown fields are rejected.
    static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig()); }

    static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base) {
        if (!j.is_object()) throw ConfigError("training config must be a JSON object");
        const auto known = base.to_json();
        for (const auto& [key, value] : j.items())
            if (!known.contains(key)) throw ConfigError("unknown config field '" + key + "'");
        TrainConfig c = base;
        try {
            c.lr = j.value("lr", c.lr);
            c.weight_decay = j.value("weight_decay", c.weight_decay);
            c.epochs = j.value("epochs", c.epochs);
            c.batch_size = j.value("batch_size", c.batch_size);
            c.T = j.value("T", c.T);
            c.w = j.value("w", c.w);
            if (j.contains("class_weight_mode"))
                c.class_weight_mode = class_weight_mode_from_string(j["class_weight_mode"].get<std::string>());
            c.use_ftl = j.value("use_ftl", c.use_ftl);
            c.use_ifl = j.value("use_ifl", c.use_ifl);
            c.use_luma_channels = j.value("use_luma_channels", c.use_luma_channels);
            if (j.contains("skip_attention_mode"))
                c.skip_attention_mode = skip_attention_from_string(j["skip_attention_mode"].get<std::string>());
            c.use_ifm = j.value("use_ifm", c.use_ifm);
            c.base_width = j.value("base_width", c.base_width);
            c.num_classes = j.value("num_classes", c.num_classes);
            c.seed = j.value("seed", c.seed);
            c.grad_clip = j.value("grad_clip", c.grad_clip);
            c.data_dir = j.value("data_dir", c.data_dir);
            c.out_dir = j.value("out_dir", c.out_dir);
            c.train_split = j.value("train_split", c.train_split);
            c.max_train_scenes = j.value("max_train_scenes", c.max_train_scenes);
            c.resume_from = j.value("resume_from", c.resume_from);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad config value: ") + e.what());
        }
        c.validate();
        return c;
    }

    static TrainConfig load(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
        }
        return from_json(j);
    }
};

/// A scene ready for the network: padded to a multiple of 8, as a C×H×W input.
struct Sample {
    std::vector<float> input;
    std::size_t channels = 0, height = 0, width = 0;
    LabelMask mask;
    Padding padding;
};

inline Sample prepare_sample(const RgbImage& image, const LabelMask* mask, bool use_luma) {
    Sample s;
    const RgbImage padded = pad_to_multiple(image, &s.padding);
    const auto five = build_five_channel(padded);
    s.channels = use_luma ? 5 : 3;
    s.height = padded.height;
    s.width = padded.width;
    s.input.assign(five.values.values().begin(),
                   five.values.values().begin() + static_cast<long>(s.channels * s.height * s.width));
    if (mask) {
        if (mask->height != image.height || mask->width != image.width)
            throw DataError("mask extents differ from image extents");
        s.mask = LabelMask(s.height, s.width, BG);
        for (std::size_t y = 0; y < mask->height; ++y)
            for (std::size_t x = 0; x < mask->width; ++x)
                s.mask.at(y + s.padding.top, x + s.padding.left) = mask->at(y, x);
    }
    return s;
}

/// Stacks samples of equal extents into an N×C×H×W batch.
inline Tensor stack_inputs(const std::vector<const Sample*>& batch) {
    const Sample& first = *batch.front();
    std::vector<float> v;
    v.reserve(batch.size() * first.input.size());
    for (const Sample* s : batch) {
        if (s->height != first.height || s->width != first.width || s->channels != first.channels)
            throw DataError("cannot batch scenes of different sizes (" + std::to_string(s->height) + "x" +
                            std::to_string(s->width) + " vs " + std::to_string(first.height) + "x" +
                            std::to_string(first.width) + ")");
        v.insert(v.end(), s->input.begin(), s->input.end());
    }
    return Tensor(Shape{batch.size(), first.channels, first.height, first.width}, std::move(v));
}

/// Metadata stored next to the tensor archive of a checkpoint.
struct CheckpointMeta {
    TrainConfig config;
    std::size_t epoch = 0;  // completed epochs
    std::size_t step = 0;   // optimizer steps taken
    ClassWeights weights;
    Rng::State rng_state{};
};

inline fs::path sidecar_path(const fs::path& archive) {
    fs::path p = archive;
    return p.replace_extension(".json");
}

namespace detail {

inline std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline nlohmann::json meta_to_json(const CheckpointMeta& m, const std::string& archive_name) {
    nlohmann::json rng = nlohmann::json::array();
    for (auto w : m.rng_state) rng.push_back(hex64(w));
    return {{"format", "misra-checkpoint-1"},
            {"archive", archive_name},
            {"config", m.config.to_json()},
            {"epoch", m.epoch},
            {"optimizer",
             {{"type", "adamw"},
              {"step", m.step},
              {"lr", m.config.lr},
              {"weight_decay", m.config.weight_decay},
              {"beta1", AdamWConfig{}.beta1},
              {"beta2", AdamWConfig{}.beta2},
              {"eps", AdamWConfig{}.eps},
              {"moments", "archive entries optim/m/<param> and optim/v/<param>"}}},
            {"class_weights", {{"mode", to_string(m.weights.mode)}, {"values", m.weights.values}}},
            {"rng_state", rng}};
}

}  // namespace detail

/// Writes `<stem>.msra` (parameters, BN buffers, AdamW moments) and `<stem>.json`.
inline void save_checkpoint(const fs::path& archive_path, const Misra<float>& model, const AdamW<float>* optim,
                            const CheckpointMeta& meta) {
    TensorArchive ar;
    for (const auto& [name, p] : model.named_parameters()) ar.add("param/" + name, p);
    for (const auto& [name, b] : model.named_buffers()) ar.add("buffer/" + name, b);
    if (optim)
        for (std::size_t i = 0; i < optim->params().size(); ++i) {
            const auto& [name, p] = optim->params()[i];
            ar.add("optim/m/" + name, Tensor(p.shape(), optim->first_moment(i)));
            ar.add("optim/v/" + name, Tensor(p.shape(), optim->second_moment(i)));
        }
    if (!archive_path.parent_path().empty()) fs::create_directories(archive_path.parent_path());
    ar.save(archive_path);
    std::ofstream(sidecar_path(archive_path)) << detail::meta_to_json(meta, archive_path.filename().string()).dump(2)
                                              << '\n';
}

inline CheckpointMeta load_checkpoint_meta(const fs::path& archive_path) {
    const auto side = sidecar_path(archive_path);
    std::ifstream in(side);
    if (!in) throw DataError("checkpoint sidecar " + side.string() + " not found");
    nlohmann::json j;
    try {
        in >> j;
        CheckpointMeta m;
        m.config = TrainConfig::from_json(j.at("config"));
        m.epoch = j.at("epoch").get<std::size_t>();
        m.step = j.at("optimizer").at("step").get<std::size_t>();
        m.weights.mode = class_weight_mode_from_string(j.at("class_weights").at("mode").get<std::string>());
        m.weights.values = j.at("class_weights").at("values").get<std::vector<double>>();
        const auto rng = j.at("rng_state");
        for (std::size_t i = 0; i < m.rng_state.size(); ++i)
            m.rng_state[i] = std::stoull(rng.at(i).get<std::string>(), nullptr, 16);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint sidecar " + side.string() + ": " + e.what());
    }
}

namespace detail {

inline void restore_tensors(const TensorArchive& ar, const std::string& prefix,
                            const NamedTensors<float>& targets) {
    for (const auto& [name, t] : targets) {
        const Tensor* src = ar.find(prefix + name);
        if (!src) throw DataError("checkpoint is missing '" + prefix + name + "'");
        if (src->shape() != t.shape())
            throw DataError("checkpoint entry '" + prefix + name + "' has shape " + shape_str(src->shape()) +
                            ", model expects " + shape_str(t.shape()));
        auto dst = t;
        std::copy(src->data().begin(), src->data().end(), dst.data().begin());
    }
}

}  // namespace detail

/// A trained model restored from disk.
struct LoadedModel {
    CheckpointMeta meta;
    std::unique_ptr<Misra<float>> model;
    TensorArchive archive;
};

inline LoadedModel load_checkpoint(const fs::path& archive_path) {
    LoadedModel lm;
    lm.meta = load_checkpoint_meta(archive_path);
    lm.archive = TensorArchive::load(archive_path);
    lm.model = std::make_unique<Misra<float>>(lm.meta.config.model(), lm.meta.config.seed);
    detail::restore_tensors(lm.archive, "param/", lm.model->named_parameters());
    detail::restore_tensors(lm.archive, "buffer/", lm.model->named_buffers());
    lm.model->set_training(false);
    return lm;
}

inline void restore_optimizer(const TensorArchive& ar, AdamW<float>& optim, std::size_t step) {
    for (std::size_t i = 0; i < optim.params().size(); ++i) {
        const auto& name = optim.params()[i].first;
        const Tensor* m = ar.find("optim/m/" + name);
        const Tensor* v = ar.find("optim/v/" + name);
        if (!m || !v) throw DataError("checkpoint has no optimizer moments for '" + name + "'");
        optim.first_moment(i) = m->values();
        optim.second_moment(i) = v->values();
    }
    optim.set_steps(step);
}

inline std::string format_loss_row(std::size_t step, const LossBundle<float>& b) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step, b.ce, b.dice, b.ftl, b.seg, b.ifl,
                  b.total);
    return buf;
}

inline constexpr const char* kLossCsvHeader = "step,L_CE,L_Dice,L_FTL,L_SEG,L_IFL,L_total";

struct TrainResult {
    std::size_t steps = 0;
    double initial_total = 0;                // L_total of the first step
    double final_total = 0;                  // mean L_total over the last epoch
    std::vector<double> epoch_mean_totals;
    std::size_t clipped_steps = 0;
    double seconds = 0;
    fs::path checkpoint;
    fs::path loss_csv;
    ClassWeights weights;
};

/// Trains on in-memory scenes. Writes loss.csv and checkpoint.{msra,json} (refreshed every epoch) to cfg.out_dir.
inline TrainResult train(const TrainConfig& cfg, const std::vector<LabeledScene>& scenes, std::ostream* log = nullptr) {
    cfg.validate();
    if (scenes.empty()) throw DataError("training split is empty");
    const auto start = std::chrono::steady_clock::now();

    std::vector<LabelMask> masks;
    std::vector<Sample> samples;
    for (const auto& s : scenes) {
        masks.push_back(s.mask);
        samples.push_back(prepare_sample(s.image, &s.mask, cfg.use_luma_channels));
        require_labels_below(samples.back().mask, cfg.num_classes);
    }

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    TrainResult result;
    result.loss_csv = out / "loss.csv";
    result.checkpoint = out / "checkpoint.msra";

    Misra<float> model(cfg.model(), cfg.seed);
    AdamW<float> optim(model.named_parameters(), cfg.optimizer());
    Rng order_rng = Rng::for_stream(cfg.seed, 0x5eedull);
    std::size_t first_epoch = 0;
    ClassWeights weights;

    std::ofstream csv;
    if (!cfg.resume_from.empty()) {
        auto ckpt = load_checkpoint(cfg.resume_from);
        if (!(ckpt.meta.config.model() == cfg.model()))
            throw ConfigError("resume_from checkpoint was trained with a different model configuration");
        model.copy_state_from(*ckpt.model);
        restore_optimizer(ckpt.archive, optim, ckpt.meta.step);
        order_rng.set_state(ckpt.meta.rng_state);
        first_epoch = ckpt.meta.epoch;
        weights = ckpt.meta.weights;
        csv.open(result.loss_csv, std::ios::app);
    } else {
        // computed once from the training split
        weights = compute_class_weights(masks, cfg.num_classes, cfg.class_weight_mode);
        csv.open(result.loss_csv);
        csv << kLossCsvHeader << '\n';
    }
    if (!csv) throw DataError("cannot write " + result.loss_csv.string());
    result.weights = weights;
    model.set_training(true);

    const LossToggles toggles{cfg.use_ftl, cfg.use_ifl};
    LossCoefficients coeffs;
    coeffs.iteration_weight = cfg.w;
    const auto params = model.named_parameters();
    std::size_t step = optim.steps();
    bool have_initial = false;

    for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

        double epoch_sum = 0;
        std::size_t epoch_steps = 0, epoch_clipped = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<const Sample*> batch;
            std::vector<LabelMask> labels;
            for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) {
                batch.push_back(&samples[order[k]]);
                labels.push_back(samples[order[k]].mask);
            }
            model.zero_grad();
            auto outputs = model.forward(stack_inputs(batch));
            auto bundle = total_loss(outputs, labels, weights, toggles, coeffs);
            ++step;
            if (!std::isfinite(bundle.total))
                throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                                   std::to_string(epoch + 1) + "): " + format_loss_row(step, bundle));
            backward(bundle.total_tensor);
            const double norm = clip_grad_norm(params, cfg.grad_clip);
            if (!std::isfinite(norm))
                throw NumericError("non-finite gradient norm at step " + std::to_string(step));
            if (cfg.grad_clip > 0 && norm > cfg.grad_clip) ++epoch_clipped;
            optim.step();

            csv << format_loss_row(step, bundle) << '\n';
            if (!have_initial && first_epoch == epoch && b == 0) {
                result.initial_total = bundle.total;
                have_initial = true;
            }
            epoch_sum += bundle.total;
            ++epoch_steps;
        }
        csv.flush();
        const double mean = epoch_sum / static_cast<double>(epoch_steps);
        result.epoch_mean_totals.push_back(mean);
        result.clipped_steps += epoch_clipped;
        save_checkpoint(result.checkpoint, model, &optim,
                        CheckpointMeta{cfg, epoch + 1, optim.steps(), weights, order_rng.state()});
        if (log) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            *log << "epoch " << (epoch + 1) << "/" << cfg.epochs << "  mean L_total " << std::fixed
                 << std::setprecision(4) << mean << "  clipped " << epoch_clipped << "/" << epoch_steps << "  "
                 << std::setprecision(1) << secs << "s" << std::defaultfloat << std::setprecision(6) << '\n';
        }
    }
    result.steps = step;
    result.final_total = result.epoch_mean_totals.empty() ? 0.0 : result.epoch_mean_totals.back();
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

/// Loads cfg.train_split from cfg.data_dir (optionally truncated) and trains.
inline TrainResult train(const TrainConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    if (cfg.data_dir.empty()) throw ConfigError("data_dir is required for training");
    auto stems = dataset_split(cfg.data_dir, cfg.train_split);
    if (cfg.max_train_scenes && stems.size() > cfg.max_train_scenes) stems.resize(cfg.max_train_scenes);
    std::vector<LabeledScene> scenes;
    for (const auto& s : stems) scenes.push_back(read_scene(cfg.data_dir, s));
    return train(cfg, scenes, log);
}

/// Per-pass predictions for one image, cropped back to its original extents.
struct Inference {
    std::vector<LabelMask> per_pass;  // ŷ^(t), t = 0..T
    std::vector<float> final_probs;   // C×H×W at the last pass, cropped

    const LabelMask& final_mask() const { return per_pass.back(); }
};

inline Inference infer(Misra<float>& model, const RgbImage& image) {
    NoGradGuard no_grad;
    const bool was_training = model.training();
    model.set_training(false);
    const Sample s = prepare_sample(image, nullptr, model.config().use_luma_channels);
    auto out = model.forward(stack_inputs({&s}));
    model.set_training(was_training);
    const std::size_t C = model.config().num_classes, H = image.height, W = image.width;
    Inference inf;
    for (const auto& z : out.logits) {
        auto full = argmax_channel(z)[0];
        LabelMask m(H, W);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) m.at(y, x) = full.at(y + s.padding.top, x + s.padding.left);
        inf.per_pass.push_back(std::move(m));
    }
    const auto& p = out.final_probabilities();
    inf.final_probs.resize(C * H * W);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                inf.final_probs[(c * H + y) * W + x] = p.at(0, c, y + s.padding.top, x + s.padding.left);
    return inf;
}

inline MetricsReport evaluate(Misra<float>& model, const std::vector<LabeledScene>& scenes) {
    MetricsAccumulator acc(model.config().num_classes);
    for (const auto& scene : scenes) {
        require_labels_below(scene.mask, model.config().num_classes);
        const auto inf = infer(model, scene.image);
        acc.add<float>(inf.final_mask(), scene.mask, inf.final_probs);
    }
    return acc.report();
}

inline MetricsReport evaluate(const fs::path& checkpoint, const fs::path& data_dir, const std::string& split) {
    auto lm = load_checkpoint(checkpoint);
    return evaluate(*lm.model, load_split(data_dir, split));
}

/// Writes the final mask to `out`; with `per_iteration`, also `<stem>_t<k>.<ext>` for k = 0..T-1.
inline std::vector<fs::path> write_inference(const Inference& inf, const fs::path& out, bool per_iteration) {
    std::vector<fs::path> written;
    if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
    if (per_iteration)
        for (std::size_t t = 0; t + 1 < inf.per_pass.size(); ++t) {
            auto p = out.parent_path() / (out.stem().string() + "_t" + std::to_string(t) + out.extension().string());
            write_mask_png(p, inf.per_pass[t]);
            written.push_back(p);
        }
    write_mask_png(out, inf.final_mask());
    written.push_back(out);
    return written;
}

}  // namespace misra

// misra command-line driver: synthetic data, preprocessing dumps, training, evaluation and inference.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.

#include <cstdio>
#include <iostream>
#include <regex>

#include "CLI11.hpp"
#include "misra/harness.hpp"

using namespace misra;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
    static const std::regex re(R"((\d+)[xX](\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ConfigError("--size expects HxW, got '" + s + "'");
    return {std::stoul(m[1]), std::stoul(m[2])};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_gray_png(const fs::path& path, const float* v, std::size_t h, std::size_t w) {
    RgbImage img(h, w);
    for (std::size_t i = 0; i < h * w; ++i) {
        const double c = std::clamp(static_cast<double>(v[i]), 0.0, 1.0);
        const auto b = static_cast<std::uint8_t>(std::lround(c * 255.0));
        img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = b;
    }
    write_rgb_png(path, img);
}

struct GenSynthArgs {
    fs::path out;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    std::string size = "64x64";
    double split = kDefaultTrainFraction;
    fs::path spec;
};

int run_gen_synth(const GenSynthArgs& a) {
    SceneSpec spec;
    if (!a.spec.empty()) {
        std::ifstream in(a.spec);
        if (!in) throw ConfigError("cannot read scene spec " + a.spec.string());
        try {
            spec = SceneSpec::from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("scene spec " + a.spec.string() + ": " + e.what());
        }
    }
    spec.seed = a.seed;
    std::tie(spec.height, spec.width) = parse_size(a.size);
    spec.validate();
    const auto manifest = generate_dataset(a.out, spec, a.count, a.split);
    std::cout << "wrote " << a.count << " scenes to " << a.out.string() << " (train "
              << manifest["split"]["train"].size() << ", test " << manifest["split"]["test"].size() << ")\n";
    return kOk;
}

int run_preprocess(const fs::path& image_path, bool pad, const fs::path& dump) {
    RgbImage img = read_rgb_png(image_path);
    Padding padding;
    if (pad) img = pad_to_multiple(img, &padding);
    const auto five = build_five_channel(img);
    const std::size_t H = five.height(), W = five.width(), HW = H * W;
    const auto& v = five.values.values();
    static const char* names[] = {"r", "g", "b", "erode", "dilate"};
    std::printf("input %zux%zu  padding t%zu b%zu l%zu r%zu\n", H, W, padding.top, padding.bottom, padding.left,
                padding.right);
    for (std::size_t c = 0; c < 5; ++c) {
        const auto [lo, hi] = std::minmax_element(v.begin() + c * HW, v.begin() + (c + 1) * HW);
        double mean = 0;
        for (std::size_t i = 0; i < HW; ++i) mean += v[c * HW + i];
        std::printf("  %-7s min %.4f  max %.4f  mean %.4f\n", names[c], *lo, *hi, mean / HW);
    }
    if (!dump.empty()) {
        fs::create_directories(dump);
        for (std::size_t c = 0; c < 5; ++c)
            write_gray_png(dump / (image_path.stem().string() + "_" + names[c] + ".png"), v.data() + c * HW, H, W);
    }
    return kOk;
}

int run_train(const fs::path& config_path, const std::string& out_override, const std::string& data_override) {
    auto cfg = TrainConfig::load(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (!data_override.empty()) cfg.data_dir = data_override;
    const auto r = train(cfg, &std::cout);
    std::printf("steps %zu  initial L_total %.6g  final L_total %.6g  clipped %zu  %.1fs\n", r.steps, r.initial_total,
                r.final_total, r.clipped_steps, r.seconds);
    std::cout << "checkpoint " << r.checkpoint.string() << "\nloss log " << r.loss_csv.string() << "\n";
    return kOk;
}

int run_eval(const fs::path& ckpt, const fs::path& data, const std::string& split, const fs::path& report_path) {
    auto lm = load_checkpoint(ckpt);
    const auto report = evaluate(*lm.model, load_split(data, split));
    auto j = report.to_json();
    j["checkpoint"] = ckpt.string();
    j["split"] = split;
    j["T"] = lm.meta.config.model().feedback_iterations();
    if (!report_path.empty()) write_json(report_path, j);
    std::printf("mcIoU %.2f  ISI-IoU %.2f  mDice %.2f  mAP50 %.2f  mAP95 %.2f  (%zu images)\n", report.mciou,
                report.isi_iou, report.mdice, report.map50, report.map95, report.images);
    return kOk;
}

int run_infer(const fs::path& ckpt, const fs::path& image, const fs::path& out, bool per_iteration) {
    auto lm = load_checkpoint(ckpt);
    const auto inf = infer(*lm.model, read_rgb_png(image));
    for (const auto& p : write_inference(inf, out, per_iteration)) std::cout << p.string() << "\n";
    return kOk;
}

int run_stats(const fs::path& data, const std::string& split) {
    const auto stems = dataset_split(data, split);
    std::vector<LabelMask> masks;
    for (const auto& s : stems) masks.push_back(read_mask_png(data / (s + "_mask.png")));
    const auto pct = dataset_stats(masks);
    std::printf("%zu masks (%s)\n", masks.size(), split.c_str());
    for (std::size_t c = 0; c < pct.size(); ++c) {
        const std::string name(kClassNames[c]);
        std::printf("  %-3s %7.3f%%\n", name.c_str(), pct[c]);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"misra: thin-instrument segmentation toolkit"};
    app.require_subcommand(1);

    GenSynthArgs gs;
    auto* gen = app.add_subcommand("gen-synth", "Generate a labelled synthetic dataset");
    gen->add_option("--out", gs.out, "Output directory")->required();
    gen->add_option("--count", gs.count, "Number of scenes")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gs.seed, "Dataset seed");
    gen->add_option("--size", gs.size, "Scene size HxW")->capture_default_str();
    gen->add_option("--split", gs.split, "Train fraction")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--spec", gs.spec, "SceneSpec JSON overriding generator parameters");

    fs::path pp_image, pp_dump;
    bool pp_pad = false;
    auto* pre = app.add_subcommand("preprocess", "Build the five-channel input and report channel statistics");
    pre->add_option("--image", pp_image, "RGB PNG")->required();
    pre->add_flag("--pad", pp_pad, "Pad to a multiple of 8 instead of rejecting");
    pre->add_option("--dump", pp_dump, "Write each channel as a PNG into this directory");

    fs::path tr_config;
    std::string tr_out, tr_data;
    auto* tr = app.add_subcommand("train", "Train from a JSON config");
    tr->add_option("--config", tr_config, "Training config JSON")->required();
    tr->add_option("--out", tr_out, "Override out_dir");
    tr->add_option("--data", tr_data, "Override data_dir");

    fs::path ev_ckpt, ev_data, ev_report;
    std::string ev_split = "test";
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint archive")->required();
    ev->add_option("--data", ev_data, "Dataset directory")->required();
    ev->add_option("--split", ev_split, "train, test or all")->capture_default_str();
    ev->add_option("--report", ev_report, "Write the metrics report JSON here");

    fs::path in_ckpt, in_image, in_out;
    bool in_per_iter = false;
    auto* inf = app.add_subcommand("infer", "Segment one image");
    inf->add_option("--ckpt", in_ckpt, "Checkpoint archive")->required();
    inf->add_option("--image", in_image, "RGB PNG")->required();
    inf->add_option("--out", in_out, "Output mask PNG")->required();
    inf->add_flag("--per-iteration", in_per_iter, "Also write the mask of every earlier pass");

    fs::path st_data;
    std::string st_split = "all";
    auto* st = app.add_subcommand("stats", "Class pixel percentages of a dataset");
    st->add_option("--data", st_data, "Dataset directory")->required();
    st->add_option("--split", st_split, "train, test or all")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*gen) return run_gen_synth(gs);
        if (*pre) return run_preprocess(pp_image, pp_pad, pp_dump);
        if (*tr) return run_train(tr_config, tr_out, tr_data);
        if (*ev) return run_eval(ev_ckpt, ev_data, ev_split, ev_report);
        if (*inf) return run_infer(in_ckpt, in_image, in_out, in_per_iter);
        if (*st) return run_stats(st_data, st_split);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    }
    return kOk;
}

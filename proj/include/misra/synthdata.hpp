#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "misra/core/rng.hpp"
#include "misra/label_mask.hpp"
#include "misra/png_io.hpp"
#include "misra/preprocess.hpp"

namespace misra {

/// Parameters of the synthetic scene distribution. Lengths are fractions of min(H, W) unless noted.
struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t height = 64;
    std::size_t width = 64;

    double p_vessel = 0.9;  // per vessel
    double p_holder = 0.85;  // per holder
    double p_needle = 0.85;
    double vessel_radius_min = 0.07, vessel_radius_max = 0.12;
    double holder_length_min = 0.30, holder_length_max = 0.55;
    double holder_width_min = 0.08, holder_width_max = 0.14;
    double needle_radius_min = 0.05, needle_radius_max = 0.09;  // arc radius
    double needle_sweep_min = 2.0, needle_sweep_max = 3.4;      // radians
    double thin_width_min = 1.0, thin_width_max = 2.0;          // pixels
    double noise_sigma = 8.0 / 255.0;                           // on the [0,1] intensity scale
    double illumination = 0.15;                                 // peak relative brightness change

    void validate() const {
        if (height == 0 || width == 0) throw ConfigError("scene size must be positive");
        if (height < 16 || width < 16) throw ConfigError("scenes smaller than 16x16 are not supported");
        if (thin_width_min < 1.0 || thin_width_max > 2.0 || thin_width_min > thin_width_max)
            throw ConfigError("thin structure widths must lie in [1, 2] px");
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"height", height},
                {"width", width},
                {"p_vessel", p_vessel},
                {"p_holder", p_holder},
                {"p_needle", p_needle},
                {"vessel_radius", {vessel_radius_min, vessel_radius_max}},
                {"holder_length", {holder_length_min, holder_length_max}},
                {"holder_width", {holder_width_min, holder_width_max}},
                {"needle_radius", {needle_radius_min, needle_radius_max}},
                {"needle_sweep", {needle_sweep_min, needle_sweep_max}},
                {"thin_width", {thin_width_min, thin_width_max}},
                {"noise_sigma", noise_sigma},
                {"illumination", illumination}};
    }

    static SceneSpec from_json(const nlohmann::json& j) {
        SceneSpec s;
        auto pair = [&](const char* key, double& lo, double& hi) {
            if (j.contains(key)) lo = j.at(key).at(0).get<double>(), hi = j.at(key).at(1).get<double>();
        };
        s.seed = j.value("seed", s.seed);
        s.height = j.value("height", s.height);
        s.width = j.value("width", s.width);
        s.p_vessel = j.value("p_vessel", s.p_vessel);
        s.p_holder = j.value("p_holder", s.p_holder);
        s.p_needle = j.value("p_needle", s.p_needle);
        pair("vessel_radius", s.vessel_radius_min, s.vessel_radius_max);
        pair("holder_length", s.holder_length_min, s.holder_length_max);
        pair("holder_width", s.holder_width_min, s.holder_width_max);
        pair("needle_radius", s.needle_radius_min, s.needle_radius_max);
        pair("needle_sweep", s.needle_sweep_min, s.needle_sweep_max);
        pair("thin_width", s.thin_width_min, s.thin_width_max);
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        s.illumination = j.value("illumination", s.illumination);
        s.validate();
        return s;
    }
};

struct LabeledScene {
    RgbImage image;
    LabelMask mask;
    // thin-class pixels (ND, WR) drawn over an earlier non-background label
    std::size_t thin_overlap_pixels = 0;
};

namespace detail {

struct Point {
    double y, x;
};

using Polyline = std::vector<Point>;

inline Polyline quadratic_curve(Point a, Point c, Point b, double step = 0.25) {
    const double len = std::hypot(c.y - a.y, c.x - a.x) + std::hypot(b.y - c.y, b.x - c.x);
    const auto n = static_cast<std::size_t>(std::max(2.0, std::ceil(len / step)));
    Polyline out(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(n), u = 1 - t;
        out[i] = {u * u * a.y + 2 * u * t * c.y + t * t * b.y, u * u * a.x + 2 * u * t * c.x + t * t * b.x};
    }
    return out;
}

inline Polyline arc(Point centre, double radius, double start, double sweep, double step = 0.25) {
    const auto n = static_cast<std::size_t>(std::max(2.0, std::ceil(radius * sweep / step)));
    Polyline out(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
        const double th = start + sweep * static_cast<double>(i) / static_cast<double>(n);
        out[i] = {centre.y + radius * std::sin(th), centre.x + radius * std::cos(th)};
    }
    return out;
}

inline double segment_distance(Point p, Point a, Point b) {
    const double vy = b.y - a.y, vx = b.x - a.x, len2 = vy * vy + vx * vx;
    double t = len2 > 0 ? ((p.y - a.y) * vy + (p.x - a.x) * vx) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(p.y - (a.y + t * vy), p.x - (a.x + t * vx));
}

/// Distance from every pixel centre to the polyline, limited to a band of `reach` around it.
inline std::vector<double> polyline_distance(const Polyline& line, std::size_t H, std::size_t W, double reach) {
    std::vector<double> d(H * W, std::numeric_limits<double>::infinity());
    for (std::size_t s = 0; s + 1 < line.size(); ++s) {
        const Point a = line[s], b = line[s + 1];
        const long y0 = std::max(0L, static_cast<long>(std::floor(std::min(a.y, b.y) - reach)));
        const long y1 = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(std::max(a.y, b.y) + reach)));
        const long x0 = std::max(0L, static_cast<long>(std::floor(std::min(a.x, b.x) - reach)));
        const long x1 = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(std::max(a.x, b.x) + reach)));
        for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) {
                auto& v = d[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
                v = std::min(v, segment_distance({static_cast<double>(y), static_cast<double>(x)}, a, b));
            }
    }
    return d;
}

/// Rasterizes a 1-2 px stroke, then drops pixels whose whole 8-neighbourhood is stroke so that
/// the chessboard distance transform of the result never exceeds 1.
inline std::vector<std::uint8_t> thin_stroke(const Polyline& line, std::size_t H, std::size_t W, double width) {
    const double r = std::max(width / 2, 0.72);
    const auto d = polyline_distance(line, H, W, r + 1);
    std::vector<std::uint8_t> on(H * W, 0);
    for (std::size_t i = 0; i < H * W; ++i) on[i] = d[i] < r;
    std::vector<std::uint8_t> out = on;
    for (std::size_t y = 1; y + 1 < H; ++y)
        for (std::size_t x = 1; x + 1 < W; ++x) {
            if (!on[y * W + x]) continue;
            bool interior = true;
            for (std::size_t yy = y - 1; yy <= y + 1; ++yy)
                for (std::size_t xx = x - 1; xx <= x + 1; ++xx) interior = interior && on[yy * W + xx];
            if (interior) out[y * W + x] = 0;
        }
    return out;
}

struct Canvas {
    std::size_t H, W;
    std::vector<double> rgb;  // 0..255, interleaved
    LabelMask mask;

    Canvas(std::size_t h, std::size_t w) : H(h), W(w), rgb(h * w * 3, 0.0), mask(h, w) {}

    void paint(std::size_t i, std::uint8_t cls, const std::array<double, 3>& colour, double shade = 1.0) {
        mask.labels[i] = cls;
        for (std::size_t c = 0; c < 3; ++c) rgb[3 * i + c] = colour[c] * shade;
    }
};

inline std::array<double, 3> jitter(std::array<double, 3> base, Rng& rng, double amount) {
    for (auto& v : base) v += rng.uniform(-amount, amount);
    return base;
}

}  // namespace detail

/// Renders scene `index` of the dataset described by `spec`; identical inputs give identical bytes.
inline LabeledScene generate_scene(const SceneSpec& spec, std::uint64_t index) {
    using namespace detail;
    spec.validate();
    Rng rng = Rng::for_stream(spec.seed, index);
    const std::size_t H = spec.height, W = spec.width;
    const double S = static_cast<double>(std::min(H, W)), Hd = static_cast<double>(H), Wd = static_cast<double>(W);
    Canvas cv(H, W);

    // Background tissue with a slow texture.
    const auto tissue = jitter({120, 72, 62}, rng, 12);
    const double fy = rng.uniform(1, 3) * std::numbers::pi / Hd, fx = rng.uniform(1, 3) * std::numbers::pi / Wd;
    const double ph = rng.uniform(0, 2 * std::numbers::pi);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double tex = 1.0 + 0.08 * std::sin(fy * static_cast<double>(y) + ph) * std::cos(fx * static_cast<double>(x));
            for (std::size_t c = 0; c < 3; ++c) cv.rgb[3 * (y * W + x) + c] = tissue[c] * tex;
        }

    // Vessels: shaded tubes confined to the left (LAV) and right (RAV) halves.
    for (int side = 0; side < 2; ++side) {
        if (!rng.bernoulli(spec.p_vessel)) continue;
        const double r = rng.uniform(spec.vessel_radius_min, spec.vessel_radius_max) * S;
        const double lo = side == 0 ? 0.0 : Wd / 2, hi = side == 0 ? Wd / 2 : Wd;
        auto xin = [&] { return rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo)); };
        const Point a{-r, xin()}, c{rng.uniform(0.3, 0.7) * Hd, xin()}, b{Hd + r, xin()};
        const auto d = polyline_distance(quadratic_curve(a, c, b), H, W, r + 1);
        const auto colour = side == 0 ? jitter({205, 120, 130}, rng, 10) : jitter({185, 130, 160}, rng, 10);
        const auto cls = side == 0 ? LAV : RAV;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double xd = static_cast<double>(x);
                if (xd < lo || xd >= hi) continue;
                const std::size_t i = y * W + x;
                if (d[i] < r) cv.paint(i, cls, colour, 1.0 - 0.35 * (d[i] / r) * (d[i] / r));
            }
    }

    // Needle holders: long rotated rectangles entering from the left (LNH) and right (RNH) edges.
    std::vector<Point> tips;
    for (int side = 0; side < 2; ++side) {
        if (!rng.bernoulli(spec.p_holder)) continue;
        const double len = rng.uniform(spec.holder_length_min, spec.holder_length_max) * Wd;
        const double half = rng.uniform(spec.holder_width_min, spec.holder_width_max) * S / 2;
        const double angle = rng.uniform(-0.6, 0.6) + (side == 0 ? 0.0 : std::numbers::pi);
        const Point base{rng.uniform(0.2, 0.8) * Hd, side == 0 ? 0.0 : Wd - 1};
        const double uy = std::sin(angle), ux = std::cos(angle);
        const auto colour = side == 0 ? jitter({160, 162, 172}, rng, 8) : jitter({128, 134, 150}, rng, 8);
        const auto cls = side == 0 ? LNH : RNH;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double dy = static_cast<double>(y) - base.y, dx = static_cast<double>(x) - base.x;
                const double along = dy * uy + dx * ux, across = -dy * ux + dx * uy;
                // the jaw narrows over the last fifth of the shaft
                const double taper = along > 0.8 * len ? 1.0 - 0.5 * (along - 0.8 * len) / (0.2 * len) : 1.0;
                if (along >= -half && along <= len && std::abs(across) <= half * taper)
                    cv.paint(y * W + x, cls, colour, 1.0 - 0.25 * std::abs(across) / half);
            }
        tips.push_back({base.y + len * uy, base.x + len * ux});
    }

    const LabelMask before_thin = cv.mask;

    // Needle: a bright thin arc near a holder tip when there is one.
    if (rng.bernoulli(spec.p_needle)) {
        const double radius = rng.uniform(spec.needle_radius_min, spec.needle_radius_max) * S;
        Point centre{rng.uniform(0.25, 0.75) * Hd, rng.uniform(0.25, 0.75) * Wd};
        if (!tips.empty()) {
            const Point tip = tips[rng.below(tips.size())];
            centre = {std::clamp(tip.y + rng.uniform(-1, 1) * radius, radius, Hd - 1 - radius),
                      std::clamp(tip.x + rng.uniform(-1, 1) * radius, radius, Wd - 1 - radius)};
        }
        const double width = rng.uniform(spec.thin_width_min, spec.thin_width_max);
        const auto stroke = thin_stroke(arc(centre, radius, rng.uniform(0, 2 * std::numbers::pi),
                                            rng.uniform(spec.needle_sweep_min, spec.needle_sweep_max)),
                                        H, W, width);
        const auto colour = jitter({232, 232, 238}, rng, 6);
        for (std::size_t i = 0; i < H * W; ++i)
            if (stroke[i]) cv.paint(i, ND, colour);
    }

    // Wire: a long dark quadratic curve between two image edges, drawn last.
    {
        auto edge_point = [&](int edge) -> Point {
            switch (edge) {
                case 0: return {-2, rng.uniform(0, Wd)};
                case 1: return {Hd + 1, rng.uniform(0, Wd)};
                case 2: return {rng.uniform(0, Hd), -2};
                default: return {rng.uniform(0, Hd), Wd + 1};
            }
        };
        const int e1 = static_cast<int>(rng.below(4));
        const int e2 = (e1 + 1 + static_cast<int>(rng.below(3))) % 4;
        const Point a = edge_point(e1), b = edge_point(e2);
        const Point c{rng.uniform(0.1, 0.9) * Hd, rng.uniform(0.1, 0.9) * Wd};
        const double width = rng.uniform(spec.thin_width_min, spec.thin_width_max);
        auto stroke = thin_stroke(quadratic_curve(a, c, b), H, W, width);
        if (std::none_of(stroke.begin(), stroke.end(), [](std::uint8_t v) { return v != 0; }))
            stroke = thin_stroke(quadratic_curve({-2, Wd / 2}, {Hd / 2, Wd / 2}, {Hd + 1, Wd / 2}), H, W, width);
        const auto colour = jitter({48, 66, 150}, rng, 10);
        for (std::size_t i = 0; i < H * W; ++i)
            if (stroke[i]) cv.paint(i, WR, colour);
    }

    LabeledScene scene;
    for (std::size_t i = 0; i < H * W; ++i) {
        const auto l = cv.mask.labels[i];
        if ((l == ND || l == WR) && before_thin.labels[i] != BG) ++scene.thin_overlap_pixels;
    }

    // Global illumination ramp, then sensor noise.
    const double gy = rng.uniform(-1, 1), gx = rng.uniform(-1, 1), gn = std::max(1e-9, std::hypot(gy, gx));
    const double amp = rng.uniform(0.3, 1.0) * spec.illumination;
    scene.image = RgbImage(H, W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double ry = static_cast<double>(y) / (Hd - 1) - 0.5, rx = static_cast<double>(x) / (Wd - 1) - 0.5;
            const double light = 1.0 + amp * 2 * (ry * gy + rx * gx) / gn;
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = cv.rgb[3 * (y * W + x) + c] * light + 255.0 * spec.noise_sigma * rng.normal();
                scene.image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    scene.mask = std::move(cv.mask);
    return scene;
}

/// Percentage of pixels per class over all masks; sums to 100.
inline std::vector<double> dataset_stats(std::span<const LabelMask> masks, std::size_t num_classes = kNumClasses) {
    std::vector<double> counts(num_classes, 0.0);
    double total = 0;
    for (const auto& m : masks) {
        require_labels_below(m, num_classes);
        for (auto l : m.labels) counts[l] += 1;
        total += static_cast<double>(m.size());
    }
    if (total > 0)
        for (auto& c : counts) c = 100.0 * c / total;
    return counts;
}

inline std::string scene_stem(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05zu", index);
    return buf;
}

inline void write_scene(const std::filesystem::path& dir, std::size_t index, const LabeledScene& scene) {
    const auto stem = scene_stem(index);
    write_rgb_png(dir / (stem + ".png"), scene.image);
    write_mask_png(dir / (stem + "_mask.png"), scene.mask);
}

inline LabeledScene read_scene(const std::filesystem::path& dir, const std::string& stem) {
    LabeledScene s;
    s.image = read_rgb_png(dir / (stem + ".png"));
    s.mask = read_mask_png(dir / (stem + "_mask.png"));
    if (s.image.height != s.mask.height || s.image.width != s.mask.width)
        throw DataError("image and mask extents differ for " + (dir / stem).string());
    return s;
}

inline constexpr double kDefaultTrainFraction = 2433.0 / 2999.0;

/// Number of training scenes for a dataset of `count` with fraction `train_fraction`.
inline std::size_t train_count(std::size_t count, double train_fraction) {
    if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ConfigError("split fraction must lie in [0, 1]");
    return static_cast<std::size_t>(std::llround(static_cast<double>(count) * train_fraction));
}

/// Writes `count` scenes plus manifest.json; the first scenes form the training split.
inline nlohmann::json generate_dataset(const std::filesystem::path& dir, const SceneSpec& spec, std::size_t count,
                                       double train_fraction = kDefaultTrainFraction) {
    spec.validate();
    std::filesystem::create_directories(dir);
    const std::size_t n_train = train_count(count, train_fraction);
    nlohmann::json train = nlohmann::json::array(), test = nlohmann::json::array();
    std::size_t overlapping = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const auto scene = generate_scene(spec, i);
        write_scene(dir, i, scene);
        overlapping += scene.thin_overlap_pixels > 0;
        (i < n_train ? train : test).push_back(scene_stem(i));
    }
    nlohmann::json palette = nlohmann::json::array();
    for (std::size_t c = 0; c < kNumClasses; ++c)
        palette.push_back({{"id", c}, {"name", kClassNames[c]}, {"rgb", kClassPalette[c]}});
    nlohmann::json manifest{{"format", "misra-synth-1"},
                            {"spec", spec.to_json()},
                            {"count", count},
                            {"palette", palette},
                            {"split", {{"train_fraction", train_fraction}, {"train", train}, {"test", test}}},
                            {"scenes_with_thin_overlap", overlapping}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
    return manifest;
}

/// Scene stems of a split ("train", "test" or "all"). Without a manifest every NNNNN_mask.png pair counts as "all".
inline std::vector<std::string> dataset_split(const std::filesystem::path& dir, const std::string& split) {
    if (split != "train" && split != "test" && split != "all")
        throw ConfigError("unknown split '" + split + "' (expected train, test, all)");
    std::vector<std::string> stems;
    const auto manifest_path = dir / "manifest.json";
    if (std::filesystem::exists(manifest_path)) {
        nlohmann::json m;
        try {
            std::ifstream(manifest_path) >> m;
            for (const char* part : {"train", "test"})
                if (split == "all" || split == part)
                    for (const auto& s : m.at("split").at(part)) stems.push_back(s.get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
        }
    } else {
        if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " not found");
        if (split != "all") throw DataError(dir.string() + " has no manifest.json; only split 'all' is available");
        const std::string suffix = "_mask.png";
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            const auto name = entry.path().filename().string();
            if (name.size() > suffix.size() && name.ends_with(suffix))
                stems.push_back(name.substr(0, name.size() - suffix.size()));
        }
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) throw DataError("no scenes found in " + dir.string() + " for split '" + split + "'");
    return stems;
}

inline std::vector<LabeledScene> load_split(const std::filesystem::path& dir, const std::string& split) {
    std::vector<LabeledScene> scenes;
    for (const auto& stem : dataset_split(dir, split)) scenes.push_back(read_scene(dir, stem));
    return scenes;
}

}  // namespace misra

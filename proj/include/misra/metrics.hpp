#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "misra/label_mask.hpp"

namespace misra {

inline constexpr std::size_t kDefaultMinArea = 10;

/// Pixel counts for one class.
struct ClassCounts {
    std::uint64_t intersection = 0;
    std::uint64_t predicted = 0;
    std::uint64_t target = 0;

    std::uint64_t union_count() const { return predicted + target - intersection; }
    bool present() const { return predicted + target > 0; }

    ClassCounts& operator+=(const ClassCounts& o) {
        intersection += o.intersection;
        predicted += o.predicted;
        target += o.target;
        return *this;
    }
    bool operator==(const ClassCounts&) const = default;
};

/// Running confusion statistics for a split, plus the per-image counts that ISI-IoU needs.
class ConfusionAccumulator {
public:
    explicit ConfusionAccumulator(std::size_t num_classes = kNumClasses) : totals_(num_classes) {}

    std::size_t num_classes() const { return totals_.size(); }
    std::size_t images() const { return per_image_.size(); }
    const std::vector<ClassCounts>& totals() const { return totals_; }
    const std::vector<std::vector<ClassCounts>>& per_image() const { return per_image_; }

    void accumulate(const LabelMask& pred, const LabelMask& gt) {
        if (pred.height != gt.height || pred.width != gt.width)
            throw DimensionError("metrics: prediction " + std::to_string(pred.height) + "x" +
                                 std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) + "x" +
                                 std::to_string(gt.width));
        require_labels_below(pred, num_classes());
        require_labels_below(gt, num_classes());
        std::vector<ClassCounts> img(num_classes());
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const auto p = pred.labels[i], g = gt.labels[i];
            ++img[p].predicted;
            ++img[g].target;
            if (p == g) ++img[p].intersection;
        }
        for (std::size_t c = 0; c < img.size(); ++c) totals_[c] += img[c];
        per_image_.push_back(std::move(img));
    }

    void merge(const ConfusionAccumulator& other) {
        if (other.num_classes() != num_classes()) throw DimensionError("metrics: merging accumulators of different class counts");
        for (std::size_t c = 0; c < totals_.size(); ++c) totals_[c] += other.totals_[c];
        per_image_.insert(per_image_.end(), other.per_image_.begin(), other.per_image_.end());
    }

private:
    std::vector<ClassCounts> totals_;
    std::vector<std::vector<ClassCounts>> per_image_;
};

/// IoU per instrument class (index c - 1 for class c); empty when the class never appears in prediction or GT.
inline std::vector<std::optional<double>> iou_per_class(const ConfusionAccumulator& acc) {
    std::vector<std::optional<double>> out;
    for (std::size_t c = 1; c < acc.num_classes(); ++c) {
        const auto& k = acc.totals()[c];
        if (k.present()) out.push_back(100.0 * static_cast<double>(k.intersection) / static_cast<double>(k.union_count()));
        else out.emplace_back();
    }
    return out;
}

namespace detail {

inline double mean_present(const std::vector<std::optional<double>>& v) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& x : v)
        if (x) s += *x, ++n;
    // nothing to score: an all-background split is reported as perfect
    return n ? s / static_cast<double>(n) : 100.0;
}

}  // namespace detail

/// Mean IoU over instrument classes present anywhere in the split, in percent.
inline double mciou(const ConfusionAccumulator& acc) { return detail::mean_present(iou_per_class(acc)); }

inline double mdice(const ConfusionAccumulator& acc) {
    std::vector<std::optional<double>> d;
    for (std::size_t c = 1; c < acc.num_classes(); ++c) {
        const auto& k = acc.totals()[c];
        if (k.present())
            d.push_back(100.0 * 2.0 * static_cast<double>(k.intersection) / static_cast<double>(k.predicted + k.target));
        else
            d.emplace_back();
    }
    return detail::mean_present(d);
}

/// Per class, IoU averaged over the images where that class occurs in GT or prediction; then mean over classes.
inline double isi_iou(const ConfusionAccumulator& acc) {
    std::vector<std::optional<double>> per_class;
    for (std::size_t c = 1; c < acc.num_classes(); ++c) {
        double s = 0;
        std::size_t n = 0;
        for (const auto& img : acc.per_image()) {
            const auto& k = img[c];
            if (!k.present()) continue;
            s += static_cast<double>(k.intersection) / static_cast<double>(k.union_count());
            ++n;
        }
        if (n) per_class.push_back(100.0 * s / static_cast<double>(n));
        else per_class.emplace_back();
    }
    return detail::mean_present(per_class);
}

/// A connected region of one class. `pixels` holds sorted flat indices.
struct Instance {
    std::uint8_t cls = 0;
    std::vector<std::uint32_t> pixels;
    double score = 1.0;
};

using InstanceSet = std::vector<Instance>;

/// 8-connected components of every non-background class, dropping those under `min_area` pixels.
/// With `probs` (C×H×W for this image) the score is the mean probability of the component's class;
/// without it every score is 1.
template <class T = float>
InstanceSet extract_instances(const LabelMask& mask, std::span<const T> probs = {}, std::size_t num_classes = kNumClasses,
                              std::size_t min_area = kDefaultMinArea) {
    require_labels_below(mask, num_classes);
    const std::size_t H = mask.height, W = mask.width, HW = H * W;
    if (!probs.empty() && probs.size() != num_classes * HW)
        throw DimensionError("extract_instances: probability map has " + std::to_string(probs.size()) +
                             " values, expected " + std::to_string(num_classes * HW));
    InstanceSet out;
    std::vector<std::uint8_t> seen(HW, 0);
    std::vector<std::uint32_t> stack;
    for (std::size_t start = 0; start < HW; ++start) {
        const auto cls = mask.labels[start];
        if (cls == 0 || seen[start]) continue;
        Instance inst;
        inst.cls = cls;
        seen[start] = 1;
        stack.assign(1, static_cast<std::uint32_t>(start));
        while (!stack.empty()) {
            const std::uint32_t i = stack.back();
            stack.pop_back();
            inst.pixels.push_back(i);
            const long y = static_cast<long>(i / W), x = static_cast<long>(i % W);
            for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                    const auto j = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx);
                    if (!seen[j] && mask.labels[j] == cls) {
                        seen[j] = 1;
                        stack.push_back(static_cast<std::uint32_t>(j));
                    }
                }
        }
        if (inst.pixels.size() < min_area) continue;
        std::sort(inst.pixels.begin(), inst.pixels.end());
        if (!probs.empty()) {
            double s = 0;
            for (auto i : inst.pixels) s += static_cast<double>(probs[cls * HW + i]);
            inst.score = s / static_cast<double>(inst.pixels.size());
        }
        out.push_back(std::move(inst));
    }
    return out;
}

inline double mask_iou(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    std::size_t inter = 0;
    for (std::size_t i = 0, j = 0; i < a.size() && j < b.size();) {
        if (a[i] < b[j]) ++i;
        else if (b[j] < a[i]) ++j;
        else ++inter, ++i, ++j;
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Area under the precision/recall curve with the precision envelope (all-points interpolation).
inline double average_precision(const std::vector<bool>& tp_in_score_order, std::size_t num_gt) {
    if (num_gt == 0) return 0.0;
    const std::size_t n = tp_in_score_order.size();
    std::vector<double> precision(n), recall(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += tp_in_score_order[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
    }
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

/// Mean AP at IoU threshold `tau`, in percent, over classes with at least one GT instance.
inline double map_at(const std::vector<InstanceSet>& preds, const std::vector<InstanceSet>& gts, double tau,
                     std::size_t num_classes = kNumClasses) {
    if (preds.size() != gts.size())
        throw DimensionError("map_at: " + std::to_string(preds.size()) + " predicted images vs " +
                             std::to_string(gts.size()) + " ground-truth images");
    double sum = 0;
    std::size_t classes = 0;
    for (std::size_t c = 1; c < num_classes; ++c) {
        struct Candidate {
            std::size_t image, index;
            double score;
        };
        std::vector<Candidate> cand;
        std::size_t num_gt = 0;
        for (std::size_t im = 0; im < preds.size(); ++im) {
            for (std::size_t k = 0; k < preds[im].size(); ++k)
                if (preds[im][k].cls == c) cand.push_back({im, k, preds[im][k].score});
            for (const auto& g : gts[im]) num_gt += g.cls == c;
        }
        if (num_gt == 0) continue;
        std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
        std::vector<std::vector<std::uint8_t>> taken(gts.size());
        for (std::size_t im = 0; im < gts.size(); ++im) taken[im].assign(gts[im].size(), 0);
        std::vector<bool> hits;
        for (const auto& cd : cand) {
            const auto& p = preds[cd.image][cd.index];
            double best = -1;
            std::size_t best_k = 0;
            for (std::size_t k = 0; k < gts[cd.image].size(); ++k) {
                const auto& g = gts[cd.image][k];
                if (g.cls != c || taken[cd.image][k]) continue;
                const double iou = mask_iou(p.pixels, g.pixels);
                if (iou > best) best = iou, best_k = k;
            }
            const bool hit = best >= tau;
            if (hit) taken[cd.image][best_k] = 1;
            hits.push_back(hit);
        }
        sum += average_precision(hits, num_gt);
        ++classes;
    }
    return classes ? 100.0 * sum / static_cast<double>(classes) : 100.0;
}

/// Split-level evaluation results, all in percent.
struct MetricsReport {
    std::vector<std::optional<double>> iou_per_class;  // instrument classes 1..C-1
    double mciou = 0, isi_iou = 0, mdice = 0, map50 = 0, map95 = 0;
    std::size_t images = 0;

    /// IoU of class id `cls` (1..C-1); empty for background, unknown ids and absent classes.
    std::optional<double> class_iou(std::size_t cls) const {
        if (cls == 0 || cls > iou_per_class.size()) return std::nullopt;
        return iou_per_class[cls - 1];
    }

    nlohmann::json to_json() const {
        nlohmann::json per_class = nlohmann::json::object();
        for (std::size_t i = 0; i < iou_per_class.size(); ++i) {
            const std::size_t c = i + 1;
            const std::string name = c < kClassNames.size() && iou_per_class.size() + 1 == kNumClasses
                                         ? std::string(kClassNames[c])
                                         : "class" + std::to_string(c);
            per_class[name] = iou_per_class[i] ? nlohmann::json(*iou_per_class[i]) : nlohmann::json(nullptr);
        }
        return nlohmann::json{{"mcIoU", mciou},   {"ISI-IoU", isi_iou}, {"mDice", mdice},       {"mAP50", map50},
                              {"mAP95", map95},   {"per_class", per_class}, {"images", images}};
    }
};

/// Streams predictions for a split and produces a MetricsReport.
class MetricsAccumulator {
public:
    explicit MetricsAccumulator(std::size_t num_classes = kNumClasses, std::size_t min_area = kDefaultMinArea)
        : confusion_(num_classes), min_area_(min_area) {}

    /// `probs` is the C×H×W probability map of this image at the final pass.
    template <class T>
    void add(const LabelMask& pred, const LabelMask& gt, std::span<const T> probs) {
        confusion_.accumulate(pred, gt);
        pred_instances_.push_back(extract_instances<T>(pred, probs, confusion_.num_classes(), min_area_));
        gt_instances_.push_back(extract_instances<T>(gt, {}, confusion_.num_classes(), min_area_));
    }

    void merge(const MetricsAccumulator& other) {
        confusion_.merge(other.confusion_);
        pred_instances_.insert(pred_instances_.end(), other.pred_instances_.begin(), other.pred_instances_.end());
        gt_instances_.insert(gt_instances_.end(), other.gt_instances_.begin(), other.gt_instances_.end());
    }

    const ConfusionAccumulator& confusion() const { return confusion_; }

    MetricsReport report() const {
        MetricsReport r;
        r.iou_per_class = iou_per_class(confusion_);
        r.mciou = mciou(confusion_);
        r.isi_iou = isi_iou(confusion_);
        r.mdice = mdice(confusion_);
        r.map50 = map_at(pred_instances_, gt_instances_, 0.50, confusion_.num_classes());
        r.map95 = map_at(pred_instances_, gt_instances_, 0.95, confusion_.num_classes());
        r.images = confusion_.images();
        return r;
    }

private:
    ConfusionAccumulator confusion_;
    std::size_t min_area_;
    std::vector<InstanceSet> pred_instances_, gt_instances_;
};

}  // namespace misra

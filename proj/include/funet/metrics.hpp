#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"

namespace funet {

constexpr int kThresholds = 256;
/// tau_k = k / 255, k = 0..255; a pixel is positive when pred >= tau_k.
inline double threshold_at(int k) { return k / 255.0; }

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

struct MetricOptions {
    /// Score of a 0/0 ratio (e.g. dice when both masks are empty).
    double empty_score = 1.0;
    /// Take each frame's best threshold, then average, instead of maximising the frame-averaged curve.
    bool per_frame_max = false;
};

ConfusionCounts confusion_at(std::span<const float> pred, std::span<const float> gt, double tau);
/// Counts at all 256 thresholds in one pass; identical to 256 calls of confusion_at.
std::array<ConfusionCounts, kThresholds> confusion_sweep(std::span<const float> pred, std::span<const float> gt);

double dice(const ConfusionCounts& c, double empty_score = 1.0);
double iou(const ConfusionCounts& c, double empty_score = 1.0);
double specificity(const ConfusionCounts& c, double empty_score = 1.0);
double mae(std::span<const float> pred, std::span<const float> gt);

struct MetricReport {
    double max_dice = 0, max_iou = 0, mae = 0, mean_spe = 0, max_spe = 0;
    std::vector<double> dice_curve, iou_curve, spe_curve;  // 256 points, frame-averaged
    std::int64_t frames = 0;
};

/// Streams frames into a report; frames are folded in the order they are added.
class MetricAccumulator {
public:
    explicit MetricAccumulator(MetricOptions opt = {});
    void add(std::span<const float> pred, std::span<const float> gt);
    std::int64_t frames() const { return frames_; }
    MetricReport report() const;

private:
    MetricOptions opt_;
    std::array<double, kThresholds> dice_{}, iou_{}, spe_{};
    double mae_ = 0, best_dice_ = 0, best_iou_ = 0, best_spe_ = 0, mean_spe_ = 0;
    std::int64_t frames_ = 0;
};

MetricReport sweep_report(const std::vector<std::vector<float>>& preds, const std::vector<std::vector<float>>& gts,
                          const MetricOptions& opt = {});

nlohmann::json to_json(const MetricReport& r);

}  // namespace funet

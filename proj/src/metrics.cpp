#include "funet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace funet {

namespace {

void check_pair(std::span<const float> pred, std::span<const float> gt)
{
    if (pred.size() != gt.size()) {
        throw std::invalid_argument("metrics: prediction has " + std::to_string(pred.size()) +
                                    " pixels, ground truth " + std::to_string(gt.size()));
    }
    if (pred.empty()) throw std::invalid_argument("metrics: empty frame");
    for (float g : gt) {
        if (g != 0.0f && g != 1.0f) throw std::invalid_argument("metrics: ground truth must be binary");
    }
    for (float p : pred) {
        if (!(p >= 0.0f && p <= 1.0f)) throw std::invalid_argument("metrics: predictions must lie in [0,1]");
    }
}

double ratio(double num, double den, double empty_score) { return den == 0 ? empty_score : num / den; }

}  // namespace

ConfusionCounts confusion_at(std::span<const float> pred, std::span<const float> gt, double tau)
{
    check_pair(pred, gt);
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = static_cast<double>(pred[i]) >= tau;
        const bool g = gt[i] != 0.0f;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

std::array<ConfusionCounts, kThresholds> confusion_sweep(std::span<const float> pred, std::span<const float> gt)
{
    check_pair(pred, gt);
    // histogram each pixel at the highest threshold it still clears, then suffix-sum
    std::array<std::int64_t, kThresholds> pos{}, neg{};
    std::int64_t n_pos = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = pred[i];
        int k = std::min(static_cast<int>(p * 255.0), kThresholds - 1);
        while (k < kThresholds - 1 && p >= threshold_at(k + 1)) ++k;
        while (k > 0 && p < threshold_at(k)) --k;
        if (gt[i] != 0.0f) {
            ++pos[k];
            ++n_pos;
        } else {
            ++neg[k];
        }
    }
    const std::int64_t n_neg = static_cast<std::int64_t>(pred.size()) - n_pos;
    std::array<ConfusionCounts, kThresholds> out;
    std::int64_t tp = 0, fp = 0;
    for (int k = kThresholds - 1; k >= 0; --k) {
        tp += pos[k];
        fp += neg[k];
        out[k] = {tp, fp, n_neg - fp, n_pos - tp};
    }
    return out;
}

double dice(const ConfusionCounts& c, double empty_score)
{
    return ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn, empty_score);
}

double iou(const ConfusionCounts& c, double empty_score)
{
    return ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp + c.fn), empty_score);
}

double specificity(const ConfusionCounts& c, double empty_score)
{
    return ratio(static_cast<double>(c.tn), static_cast<double>(c.tn + c.fp), empty_score);
}

double mae(std::span<const float> pred, std::span<const float> gt)
{
    check_pair(pred, gt);
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(static_cast<double>(pred[i]) - gt[i]);
    return acc / static_cast<double>(pred.size());
}

MetricAccumulator::MetricAccumulator(MetricOptions opt) : opt_(opt) {}

void MetricAccumulator::add(std::span<const float> pred, std::span<const float> gt)
{
    const auto counts = confusion_sweep(pred, gt);
    double bd = 0, bi = 0, bs = 0, ms = 0;
    for (int k = 0; k < kThresholds; ++k) {
        const double d = dice(counts[k], opt_.empty_score), j = iou(counts[k], opt_.empty_score);
        const double s = specificity(counts[k], opt_.empty_score);
        dice_[k] += d;
        iou_[k] += j;
        spe_[k] += s;
        bd = std::max(bd, d);
        bi = std::max(bi, j);
        bs = std::max(bs, s);
        ms += s;
    }
    best_dice_ += bd;
    best_iou_ += bi;
    best_spe_ += bs;
    mean_spe_ += ms / kThresholds;
    mae_ += mae(pred, gt);
    ++frames_;
}

MetricReport MetricAccumulator::report() const
{
    if (frames_ == 0) throw std::invalid_argument("metrics: no frames");
    MetricReport r;
    r.frames = frames_;
    const double n = static_cast<double>(frames_);
    for (int k = 0; k < kThresholds; ++k) {
        r.dice_curve.push_back(dice_[k] / n);
        r.iou_curve.push_back(iou_[k] / n);
        r.spe_curve.push_back(spe_[k] / n);
    }
    r.mae = mae_ / n;
    if (opt_.per_frame_max) {
        r.max_dice = best_dice_ / n;
        r.max_iou = best_iou_ / n;
        r.max_spe = best_spe_ / n;
        r.mean_spe = mean_spe_ / n;
    } else {
        r.max_dice = *std::max_element(r.dice_curve.begin(), r.dice_curve.end());
        r.max_iou = *std::max_element(r.iou_curve.begin(), r.iou_curve.end());
        r.max_spe = *std::max_element(r.spe_curve.begin(), r.spe_curve.end());
        double acc = 0;
        for (double s : r.spe_curve) acc += s;
        r.mean_spe = acc / kThresholds;
    }
    return r;
}

MetricReport sweep_report(const std::vector<std::vector<float>>& preds, const std::vector<std::vector<float>>& gts,
                          const MetricOptions& opt)
{
    if (preds.empty()) throw std::invalid_argument("sweep_report: no frames");
    if (preds.size() != gts.size()) throw std::invalid_argument("sweep_report: prediction/ground-truth count mismatch");
    MetricAccumulator acc(opt);
    for (std::size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], gts[i]);
    return acc.report();
}

nlohmann::json to_json(const MetricReport& r)
{
    std::vector<double> taus;
    for (int k = 0; k < kThresholds; ++k) taus.push_back(threshold_at(k));
    return {{"max_dice", r.max_dice},
            {"max_iou", r.max_iou},
            {"mae", r.mae},
            {"mean_spe", r.mean_spe},
            {"max_spe", r.max_spe},
            {"curves", {{"threshold", taus}, {"dice", r.dice_curve}, {"iou", r.iou_curve}, {"spe", r.spe_curve}}}};
}

}  // namespace funet

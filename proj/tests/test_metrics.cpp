#include <algorithm>
#include <numeric>
#include <cmath>
#include <random>

#include "doctest.h"
#include "funet/metrics.hpp"

using namespace funet;

namespace {

// Straight-line oracle: per frame, per threshold, per pixel; nothing shared with the fast path.
struct NaiveReport {
    std::vector<double> dice, iou, spe;
    double mae = 0;
};

NaiveReport naive(const std::vector<std::vector<float>>& preds, const std::vector<std::vector<float>>& gts)
{
    NaiveReport r;
    r.dice.assign(256, 0);
    r.iou.assign(256, 0);
    r.spe.assign(256, 0);
    for (std::size_t f = 0; f < preds.size(); ++f) {
        for (int k = 0; k < 256; ++k) {
            const double tau = k / 255.0;
            long tp = 0, fp = 0, tn = 0, fn = 0;
            for (std::size_t i = 0; i < preds[f].size(); ++i) {
                const bool p = double(preds[f][i]) >= tau, g = gts[f][i] == 1.0f;
                tp += p && g;
                fp += p && !g;
                tn += !p && !g;
                fn += !p && g;
            }
            const double dd = 2.0 * tp + fp + fn, id = double(tp + fp + fn), sd = double(tn + fp);
            r.dice[k] += dd == 0 ? 1.0 : 2.0 * tp / dd;
            r.iou[k] += id == 0 ? 1.0 : tp / id;
            r.spe[k] += sd == 0 ? 1.0 : tn / sd;
        }
        double a = 0;
        for (std::size_t i = 0; i < preds[f].size(); ++i) a += std::abs(double(preds[f][i]) - gts[f][i]);
        r.mae += a / double(preds[f].size());
    }
    const double n = double(preds.size());
    for (int k = 0; k < 256; ++k) {
        r.dice[k] /= n;
        r.iou[k] /= n;
        r.spe[k] /= n;
    }
    r.mae /= n;
    return r;
}

std::vector<float> gt3x3(int code)
{
    std::vector<float> g(9);
    for (int i = 0; i < 9; ++i) g[i] = (code >> i) & 1 ? 1.0f : 0.0f;
    return g;
}

}  // namespace

TEST_CASE("confusion counts")
{
    const std::vector<float> pred{0.9f, 0.1f, 0.8f, 0.2f}, gt{1, 0, 1, 0};
    const auto c = confusion_at(pred, gt, 0.5);
    CHECK(c == ConfusionCounts{2, 0, 2, 0});
    CHECK(mae(pred, gt) == doctest::Approx(0.15));

    const std::vector<float> all06(6, 0.6f), ones(6, 1.0f);
    CHECK(confusion_at(all06, ones, 0.5).tp == 6);
    for (double tau : {0.01, 0.5, 1.0}) {
        const auto e = confusion_at(gt, gt, tau);
        CHECK(e.fp == 0);
        CHECK(e.fn == 0);
    }
    CHECK(mae(gt, gt) == 0);
    const std::vector<float> half(4, 0.5f);
    CHECK(mae(half, gt) == 0.5);

    CHECK_THROWS_AS(confusion_at(pred, std::vector<float>{1, 0, 1}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(confusion_at(pred, std::vector<float>{1, 0, 0.5f, 0}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(mae(std::vector<float>{1.5f, 0, 0, 0}, gt), std::invalid_argument);
}

TEST_CASE("dice, iou and specificity formulas")
{
    const ConfusionCounts c{2, 1, 5, 1};
    CHECK(dice(c) == doctest::Approx(2.0 / 3));
    CHECK(iou(c) == doctest::Approx(0.5));
    CHECK(specificity(c) == doctest::Approx(5.0 / 6));
    CHECK(dice(ConfusionCounts{3, 0, 1, 0}) == 1);
    CHECK(dice(ConfusionCounts{0, 2, 0, 2}) == 0);
    CHECK(iou(ConfusionCounts{0, 2, 0, 2}) == 0);
    // empty denominators
    CHECK(dice(ConfusionCounts{0, 0, 4, 0}) == 1);
    CHECK(dice(ConfusionCounts{0, 0, 4, 0}, 0.0) == 0);
    CHECK(specificity(ConfusionCounts{4, 0, 0, 0}) == 1);
}

TEST_CASE("sweep examples")
{
    std::vector<std::vector<float>> gts{{1, 0, 1, 1, 0, 0}}, preds{{}};
    for (float g : gts[0]) preds[0].push_back(g * 0.6f + (1 - g) * 0.4f);
    auto r = sweep_report(preds, gts);
    CHECK(r.max_dice == 1);
    CHECK(r.max_iou == 1);
    for (int k = 0; k < 256; ++k) {
        const double tau = threshold_at(k);
        const bool perfect = tau > 0.4f && tau <= 0.6f;
        CHECK((r.dice_curve[k] == 1.0) == perfect);
    }

    r = sweep_report(gts, gts);
    CHECK(r.max_dice == 1);
    CHECK(r.max_iou == 1);
    CHECK(r.mae == 0);
    CHECK(r.dice_curve.size() == 256);
    CHECK(r.frames == 1);
    CHECK(r.max_spe >= r.mean_spe);

    // all-zero prediction: specificity is 1 at every positive threshold
    r = sweep_report({{0, 0, 0, 0, 0, 0}}, gts);
    for (int k = 1; k < 256; ++k) CHECK(r.spe_curve[k] == 1);

    CHECK_THROWS_AS(sweep_report({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(sweep_report(preds, {}), std::invalid_argument);

    const auto j = to_json(r);
    for (const char* key : {"max_dice", "max_iou", "mae", "mean_spe", "max_spe", "curves"}) CHECK(j.contains(key));
}

TEST_CASE("fast sweep equals per-threshold counting on adversarial values")
{
    // values sitting exactly on, just below and just above every threshold
    std::vector<float> pred, gt;
    for (int k = 0; k < 256; ++k) {
        const float v = static_cast<float>(k / 255.0);
        for (float x : {v, std::nextafter(v, 0.0f), std::nextafter(v, 1.0f)}) {
            pred.push_back(std::clamp(x, 0.0f, 1.0f));
            gt.push_back(static_cast<float>(k % 2));
        }
    }
    const auto sweep = confusion_sweep(pred, gt);
    for (int k = 0; k < 256; ++k) {
        CAPTURE(k);
        CHECK(sweep[k] == confusion_at(pred, gt, threshold_at(k)));
        CHECK(sweep[k].total() == static_cast<std::int64_t>(pred.size()));
    }
}

TEST_CASE("report matches the naive oracle on every 3x3 ground truth")
{
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<float> u(0, 1);
    std::uniform_int_distribution<int> level(0, 255);
    std::vector<std::vector<float>> all_preds, all_gts;
    std::int64_t mismatches = 0;
    for (int code = 0; code < 512; ++code) {
        const auto gt = gt3x3(code);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<float> pred(9);
            // half the maps use values on the threshold grid, where ties matter
            for (auto& p : pred) p = trial % 2 ? u(rng) : static_cast<float>(level(rng) / 255.0);
            const auto fast = confusion_sweep(pred, gt);
            for (int k = 0; k < 256; ++k) {
                long tp = 0, fp = 0, tn = 0, fn = 0;
                for (int i = 0; i < 9; ++i) {
                    const bool p = double(pred[i]) >= k / 255.0, g = gt[i] == 1.0f;
                    tp += p && g;
                    fp += p && !g;
                    tn += !p && !g;
                    fn += !p && g;
                }
                mismatches += !(fast[k] == ConfusionCounts{tp, fp, tn, fn});
            }
            const auto one = sweep_report({pred}, {gt});
            const auto ref = naive({pred}, {gt});
            for (int k = 0; k < 256; ++k) {
                mismatches += std::abs(one.dice_curve[k] - ref.dice[k]) > 1e-12;
                mismatches += std::abs(one.iou_curve[k] - ref.iou[k]) > 1e-12;
                mismatches += std::abs(one.spe_curve[k] - ref.spe[k]) > 1e-12;
                // dice = 2 iou / (1 + iou) at every threshold
                const double i = one.iou_curve[k];
                mismatches += std::abs(one.dice_curve[k] - 2 * i / (1 + i)) > 1e-12;
            }
            mismatches += std::abs(one.mae - ref.mae) > 1e-12;
            all_preds.push_back(pred);
            all_gts.push_back(gt);
        }
    }
    CHECK(mismatches == 0);

    const auto r = sweep_report(all_preds, all_gts);
    const auto ref = naive(all_preds, all_gts);
    double worst = 0;
    for (int k = 0; k < 256; ++k) {
        worst = std::max({worst, std::abs(r.dice_curve[k] - ref.dice[k]), std::abs(r.iou_curve[k] - ref.iou[k]),
                          std::abs(r.spe_curve[k] - ref.spe[k])});
    }
    CHECK(worst <= 1e-12);
    CHECK(std::abs(r.mae - ref.mae) <= 1e-12);
    CHECK(r.max_dice == *std::max_element(ref.dice.begin(), ref.dice.end()));
}

TEST_CASE("metric invariants")
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(0, 1);
    std::vector<std::vector<float>> preds(6), gts(6);
    for (int f = 0; f < 6; ++f) {
        for (int i = 0; i < 40; ++i) {
            preds[f].push_back(u(rng));
            gts[f].push_back(u(rng) < 0.3f ? 1.0f : 0.0f);
        }
    }
    const auto r = sweep_report(preds, gts);
    for (int k = 0; k < 256; ++k) {
        CHECK(r.max_dice >= r.dice_curve[k]);
        CHECK(r.max_iou >= r.iou_curve[k]);
        CHECK(r.max_spe >= r.spe_curve[k]);
    }
    for (double v : {r.max_dice, r.max_iou, r.mae, r.mean_spe, r.max_spe}) {
        CHECK(v >= 0);
        CHECK(v <= 1);
    }

    // the same pixel permutation applied to prediction and ground truth changes nothing
    std::vector<int> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto pp = preds, pg = gts;
    for (int f = 0; f < 6; ++f)
        for (int i = 0; i < 40; ++i) {
            pp[f][i] = preds[f][perm[i]];
            pg[f][i] = gts[f][perm[i]];
        }
    const auto q = sweep_report(pp, pg);
    CHECK(q.dice_curve == r.dice_curve);
    CHECK(q.mae == doctest::Approx(r.mae).epsilon(1e-12));

    // per-frame variant: mean of per-frame maxima is at least the max of the mean curve
    const auto pf = sweep_report(preds, gts, {1.0, true});
    CHECK(pf.max_dice >= r.max_dice);
}

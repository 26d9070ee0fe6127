#include <cmath>
#include <random>

#include "doctest.h"
#include "funet/gradcheck.hpp"
#include "funet/ops.hpp"
#include "funet/training.hpp"

using namespace funet;

namespace {

TensorD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1, double hi = 1)
{
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = d(rng);
    return TensorD::from_vector(std::move(shape), std::move(v));
}

TensorD random_mask(std::mt19937_64& rng, Shape shape)
{
    auto t = random_tensor(rng, std::move(shape), 0, 1);
    for (auto& v : t.mutable_data()) v = v < 0.4 ? 1.0 : 0.0;
    return t;
}

SyntheticVideoSpec tiny_video(std::uint64_t seed)
{
    SyntheticVideoSpec s;
    s.height = 16;
    s.width = 28;
    s.radius_min = 0.2;
    s.radius_max = 0.35;
    s.drift_max = 1.0;
    s.seed = seed;
    return s;
}

template <typename A, typename B>
bool max_equal(A a, B b)
{
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("loss examples")
{
    const Shape s{1, 2, 1, 4, 4};
    CHECK(segmentation_loss(TensorD::full(s, 20.0), TensorD::full(s, 1.0), 0.5).item() < 1e-4);

    std::vector<double> half(32);
    for (std::size_t i = 0; i < half.size(); ++i) half[i] = i % 2;
    const auto m = TensorD::from_vector(s, half);
    CHECK(segmentation_loss(TensorD::zeros(s), m, 0.0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // soft dice at p = 1/2 with 8 foreground pixels per frame: 1 - (2*4 + 1) / (8 + 8 + 1)
    CHECK(segmentation_loss(TensorD::zeros(s), m, 1.0).item() == doctest::Approx(1 - 9.0 / 17).epsilon(1e-12));

    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto z = random_tensor(rng, s, -8, 8);
        CHECK(segmentation_loss(z, random_mask(rng, s), trial / 49.0).item() >= 0);
    }
    CHECK_THROWS_AS(segmentation_loss(TensorD::zeros(s), TensorD::zeros({1, 2, 1, 4, 5}), 0.5), ShapeError);
    set_checked_mode(true);
    CHECK_THROWS_AS(segmentation_loss(TensorD::zeros(s), TensorD::full(s, 0.5), 0.5), NumericError);
    set_checked_mode(false);
}

TEST_CASE("loss gradient")
{
    std::mt19937_64 rng(2);
    for (int seed = 0; seed < 5; ++seed) {
        const auto masks = random_mask(rng, {2, 3, 1, 3, 4});
        const auto err = grad_check(
            [&](const std::vector<TensorD>& in) { return segmentation_loss(in[0], masks, 0.3); },
            {random_tensor(rng, {2, 3, 1, 3, 4}, -3, 3)});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("adam examples")
{
    TrainConfig cfg;
    auto p = TensorD::from_vector({1}, {0.0});
    p.mutable_grad()[0] = 1.0;
    AdamState<double> st;
    cfg.weight_decay = 0;
    adam_step<double>({p}, st, cfg);
    CHECK(st.step == 1);
    CHECK(st.m[0][0] == doctest::Approx(0.1));
    CHECK(st.v[0][0] == doctest::Approx(0.001));
    CHECK(p[0] == doctest::Approx(-1e-4 / (1 + 1e-8)).epsilon(1e-12));

    auto q = TensorD::from_vector({3}, {0.5, -2, 3});
    AdamState<double> st2;
    adam_step<double>({q}, st2, cfg);  // no gradient buffer, no decay
    CHECK(q[0] == 0.5);
    CHECK(q[1] == -2);

    cfg.weight_decay = 1e-4;
    auto r = TensorD::from_vector({1}, {1.0});
    AdamState<double> st3;
    adam_step<double>({r}, st3, cfg);
    CHECK(r[0] == doctest::Approx(1 - 1e-8).epsilon(1e-15));

    AdamState<double> wrong;
    adam_step<double>({q}, wrong, cfg);
    CHECK_THROWS_AS(adam_step<double>({q, r}, wrong, cfg), ShapeError);
}

TEST_CASE("adam matches a straight-line reference")
{
    std::mt19937_64 rng(3);
    TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.weight_decay = 0.05;
    std::vector<TensorD> params{random_tensor(rng, {4, 5}), random_tensor(rng, {7})};
    std::vector<std::vector<double>> ref, m, v;
    for (const auto& p : params) {
        ref.emplace_back(p.data().begin(), p.data().end());
        m.emplace_back(p.numel(), 0.0);
        v.emplace_back(p.numel(), 0.0);
    }
    AdamState<double> st;
    double worst = 0;
    for (int t = 1; t <= 25; ++t) {
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto g = params[k].mutable_grad();
            std::uniform_real_distribution<double> d(-2, 2);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = d(rng);
                double& p = ref[k][i];
                p = p - cfg.lr * cfg.weight_decay * p;
                m[k][i] = cfg.beta1 * m[k][i] + (1 - cfg.beta1) * g[i];
                v[k][i] = cfg.beta2 * v[k][i] + (1 - cfg.beta2) * g[i] * g[i];
                const double mh = m[k][i] / (1 - std::pow(cfg.beta1, t));
                const double vh = v[k][i] / (1 - std::pow(cfg.beta2, t));
                p = p - cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps);
            }
        }
        adam_step(params, st, cfg);
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < ref[k].size(); ++i) worst = std::max(worst, std::abs(params[k][i] - ref[k][i]));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("gradient clipping")
{
    auto a = TensorD::from_vector({2}, {0, 0});
    auto b = TensorD::from_vector({1}, {0});
    a.mutable_grad()[0] = 3;
    a.mutable_grad()[1] = 0;
    b.mutable_grad()[0] = 4;
    CHECK(clip_grad_norm<double>({a, b}, 10) == doctest::Approx(5));
    CHECK(a.grad()[0] == 3);
    CHECK(clip_grad_norm<double>({a, b}, 1) == doctest::Approx(5));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(b.grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("augmentation")
{
    const auto clip = synth_batch(tiny_video(4), 3, 4);
    const AugmentParams full{false, 0, 0, 16, 28};
    auto same = apply_augment(clip, {full, full, full});
    CHECK(max_equal(same.frames.data(), clip.frames.data()));
    CHECK(max_equal(same.masks.data(), clip.masks.data()));

    const AugmentParams flip{true, 0, 0, 16, 28};
    auto twice = apply_augment(apply_augment(clip, {flip, flip, flip}), {flip, flip, flip});
    CHECK(max_equal(twice.frames.data(), clip.frames.data()));
    CHECK(max_equal(twice.masks.data(), clip.masks.data()));

    AugmentConfig off;
    off.crop_scale_min = 1;
    off.hflip_prob = 0;
    Rng rng(5);
    auto ident = augment(clip, rng, off);
    CHECK(max_equal(ident.frames.data(), clip.frames.data()));

    // a clip whose frames are all equal stays equal: the same window and flip reach every frame
    auto frozen = tiny_video(6);
    frozen.drift_min = frozen.drift_max = 0;
    frozen.deformation = 0;
    frozen.noise = 0;
    const auto still = synth_batch(frozen, 2, 4);
    AugmentConfig cfg;
    cfg.crop_scale_min = 0.5;
    for (int trial = 0; trial < 20; ++trial) {
        auto out = augment(still, rng, cfg);
        CHECK(out.frames.shape() == still.frames.shape());
        CHECK(out.masks.shape() == still.masks.shape());
        for (auto v : out.masks.data()) REQUIRE((v == 0.0f || v == 1.0f));
        const std::int64_t f = 3 * 16 * 28, m = 16 * 28;
        for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t t = 1; t < 4; ++t) {
                for (std::int64_t i = 0; i < f; i += 7) REQUIRE(out.frames[(b * 4 + t) * f + i] == out.frames[b * 4 * f + i]);
                for (std::int64_t i = 0; i < m; i += 3) REQUIRE(out.masks[(b * 4 + t) * m + i] == out.masks[b * 4 * m + i]);
            }
    }
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = draw_augment(rng, cfg, 16, 28);
        CHECK(a.crop_h >= 8);
        CHECK(a.y0 + a.crop_h <= 16);
        CHECK(a.x0 + a.crop_w <= 28);
    }
}

TEST_CASE("single-batch overfitting")
{
    const auto cfg = FUnetConfig::tiny();
    const auto batch = synth_batch(tiny_video(11), 2, cfg.frames);
    FUnet<float> net(cfg, Variant::Full, 11);
    TrainConfig tc;
    tc.lr = 1e-3;
    Trainer trainer(net, tc);
    std::vector<double> losses;
    for (int i = 0; i < 200; ++i) losses.push_back(trainer.step(batch));
    CHECK(trainer.steps() == 200);
    CHECK(losses.back() < 0.05);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("early overfitting loss never rises")
{
    const auto cfg = FUnetConfig::tiny();
    int monotone = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto batch = synth_batch(tiny_video(seed), 2, cfg.frames);
        FUnet<float> net(cfg, Variant::Full, seed);
        TrainConfig tc;
        tc.lr = 1e-3;
        Trainer trainer(net, tc);
        double prev = trainer.step(batch);
        bool ok = true;
        for (int i = 1; i < 20; ++i) {
            const double l = trainer.step(batch);
            ok = ok && l <= prev;
            prev = l;
        }
        MESSAGE("seed " << seed << (ok ? std::string(" monotone") : std::string(" rose")));
        monotone += ok;
    }
    CHECK(monotone >= 4);
}

TEST_CASE("training loop determinism and lr = 0")
{
    auto cfg = FUnetConfig::tiny();
    std::vector<LoadedSequence> train_seqs, val_seqs;
    auto video = tiny_video(12);
    for (int s = 0; s < 3; ++s) {
        LoadedSequence seq;
        for (int f = 0; f < 5; ++f) {
            auto [img, mask] = synth_render(video, s, f);
            seq.frames.push_back(img);
            seq.masks.push_back(mask);
        }
        (s < 2 ? train_seqs : val_seqs).push_back(seq);
    }
    TrainConfig tc;
    tc.epochs = 2;
    tc.lr = 1e-3;
    tc.seed = 5;
    FUnet<float> a(cfg, Variant::Full, 1), b(cfg, Variant::Full, 1);
    const auto ra = train(a, train_seqs, val_seqs, tc);
    const auto rb = train(b, train_seqs, val_seqs, tc);
    REQUIRE(ra.trace.size() == 2);
    for (int e = 0; e < 2; ++e) {
        CHECK(ra.trace[e].train_loss == rb.trace[e].train_loss);
        CHECK(ra.trace[e].val_max_dice == rb.trace[e].val_max_dice);
    }
    CHECK(ra.steps == 6);  // 3 windows per sequence, batches of 2

    tc.lr = 0;
    FUnet<float> c(cfg, Variant::Full, 1), fresh(cfg, Variant::Full, 1);
    train(c, train_seqs, {}, tc);
    for (std::size_t k = 0; k < c.params().items().size(); ++k) {
        const auto& p = c.params().items()[k].second;
        const auto& q = fresh.params().items()[k].second;
        CHECK(max_equal(p.data(), q.data()));
    }

    CHECK_THROWS_AS(train(c, {}, val_seqs, tc), std::invalid_argument);
    auto bad = train_seqs;
    for (auto& v : bad[0].frames[0].data) v = std::nanf("");
    tc.lr = 1e-3;
    CHECK_THROWS_AS(train(c, bad, {}, tc), NumericError);
}

TEST_CASE("train config json")
{
    TrainConfig c;
    c.epochs = 7;
    c.augment.crop_scale_min = 0.9;
    const auto j = to_json(c);
    CHECK(to_json(train_config_from_json(j)) == j);
    auto bad = j;
    bad["learning_rate"] = 1;
    CHECK_THROWS_AS(train_config_from_json(bad), std::invalid_argument);
    c.loss_mix = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

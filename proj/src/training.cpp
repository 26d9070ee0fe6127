#include "funet/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "funet/ops.hpp"

namespace funet {

void TrainConfig::validate() const
{
    auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
    if (!(lr >= 0)) fail("lr must be nonnegative");
    if (!(weight_decay >= 0)) fail("weight_decay must be nonnegative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0,1)");
    if (!(adam_eps > 0)) fail("adam_eps must be positive");
    if (epochs < 1) fail("epochs must be at least 1");
    if (batch_clips < 1) fail("batch_clips must be at least 1");
    if (!(loss_mix >= 0 && loss_mix <= 1)) fail("loss_mix must lie in [0,1]");
    if (!(clip_norm >= 0)) fail("clip_norm must be nonnegative");
    if (early_stop_patience < 0) fail("early_stop_patience must be nonnegative");
    if (train_stride < 1) fail("train_stride must be at least 1");
    if (!(augment.hflip_prob >= 0 && augment.hflip_prob <= 1)) fail("hflip_prob must lie in [0,1]");
    if (!(augment.crop_scale_min > 0 && augment.crop_scale_min <= 1)) fail("crop_scale_min must lie in (0,1]");
}

nlohmann::json to_json(const TrainConfig& c)
{
    return {{"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"epochs", c.epochs},
            {"batch_clips", c.batch_clips},
            {"seed", c.seed},
            {"loss_mix", c.loss_mix},
            {"clip_norm", c.clip_norm},
            {"early_stop_patience", c.early_stop_patience},
            {"train_stride", c.train_stride},
            {"augment",
             {{"enabled", c.augment.enabled},
              {"hflip_prob", c.augment.hflip_prob},
              {"crop_scale_min", c.augment.crop_scale_min}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
    TrainConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "lr") c.lr = v.get<double>();
        else if (key == "weight_decay") c.weight_decay = v.get<double>();
        else if (key == "beta1") c.beta1 = v.get<double>();
        else if (key == "beta2") c.beta2 = v.get<double>();
        else if (key == "adam_eps") c.adam_eps = v.get<double>();
        else if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "batch_clips") c.batch_clips = v.get<int>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "loss_mix") c.loss_mix = v.get<double>();
        else if (key == "clip_norm") c.clip_norm = v.get<double>();
        else if (key == "early_stop_patience") c.early_stop_patience = v.get<int>();
        else if (key == "train_stride") c.train_stride = v.get<int>();
        else if (key == "augment") {
            if (!v.is_object()) throw std::invalid_argument("augment must be an object");
            for (const auto& [k, a] : v.items()) {
                if (k == "enabled") c.augment.enabled = a.get<bool>();
                else if (k == "hflip_prob") c.augment.hflip_prob = a.get<double>();
                else if (k == "crop_scale_min") c.augment.crop_scale_min = a.get<double>();
                else throw std::invalid_argument("unknown augment key '" + k + "'");
            }
        } else {
            throw std::invalid_argument("unknown train config key '" + key + "'");
        }
    }
    return c;
}

// ---------------------------------------------------------------------------------------------
// loss and optimiser

template <typename T>
BasicTensor<T> segmentation_loss(const BasicTensor<T>& logits, const BasicTensor<T>& masks, double loss_mix)
{
    if (logits.shape() != masks.shape()) {
        throw ShapeError("loss: logits " + shape_str(logits.shape()) + " vs masks " + shape_str(masks.shape()));
    }
    if (logits.rank() < 2) throw ShapeError("loss: expected (B,T,1,H,W)");
    if (checked_mode()) {
        for (auto v : masks.data()) {
            if (v != T(0) && v != T(1)) throw NumericError("loss: mask values must be 0 or 1");
        }
    }
    const std::int64_t frames = logits.rank() == 5 ? logits.dim(0) * logits.dim(1) : logits.dim(0);
    const std::int64_t pixels = logits.numel() / frames;
    auto z = reshape(logits, {frames, pixels});
    auto g = reshape(masks.detach(), {frames, pixels});

    auto p = sigmoid(z);
    auto inter = sum_per_sample(mul(p, g));
    auto denom = add_scalar(add(sum_per_sample(p), sum_per_sample(g)), T(1));
    auto ratio = div(add_scalar(scale(inter, T(2)), T(1)), denom);
    auto dice_loss = add_scalar(scale(mean(ratio), T(-1)), T(1));
    auto bce = mean(bce_with_logits(z, g));
    return add(scale(dice_loss, static_cast<T>(loss_mix)), scale(bce, static_cast<T>(1 - loss_mix)));
}

template <typename T>
void adam_step(const std::vector<BasicTensor<T>>& params, AdamState<T>& state, const TrainConfig& cfg)
{
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
            state.v.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: optimiser state built for other parameters");
    ++state.step;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != static_cast<std::size_t>(p.numel())) throw ShapeError("adam_step: moment/parameter size mismatch");
        auto data = p.mutable_data();
        const auto grad = p.grad();
        const bool has_grad = p.has_grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
            double w = data[i];
            w -= cfg.lr * cfg.weight_decay * w;
            const double mi = b1 * m[i] + (1 - b1) * g;
            const double vi = b2 * v[i] + (1 - b2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            w -= cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps);
            data[i] = static_cast<T>(w);
        }
    }
}

template <typename T>
double clip_grad_norm(const std::vector<BasicTensor<T>>& params, double max_norm)
{
    double sq = 0;
    for (const auto& p : params) {
        for (auto g : p.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto p : params) {
            if (!p.has_grad()) continue;
            for (auto& g : p.mutable_grad()) g = static_cast<T>(g * f);
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------------------------
// augmentation

AugmentParams draw_augment(Rng& rng, const AugmentConfig& cfg, int h, int w)
{
    // draw every value unconditionally so the stream does not depend on the outcomes
    AugmentParams a;
    const bool flip = rng.coin(cfg.hflip_prob);
    const double s = rng.uniform(cfg.crop_scale_min, 1.0);
    const double uy = rng.uniform(), ux = rng.uniform();
    if (!cfg.enabled) {
        a.crop_h = h;
        a.crop_w = w;
        return a;
    }
    a.flip = flip;
    a.crop_h = std::clamp(static_cast<int>(std::lround(s * h)), 1, h);
    a.crop_w = std::clamp(static_cast<int>(std::lround(s * w)), 1, w);
    a.y0 = std::min(static_cast<int>(uy * (h - a.crop_h + 1)), h - a.crop_h);
    a.x0 = std::min(static_cast<int>(ux * (w - a.crop_w + 1)), w - a.crop_w);
    return a;
}

namespace {

Image slice_image(const Tensor& t, std::int64_t offset, int c, int h, int w)
{
    Image img(c, h, w);
    const auto d = t.data();
    std::copy(d.begin() + offset, d.begin() + offset + static_cast<std::int64_t>(img.data.size()), img.data.begin());
    return img;
}

}  // namespace

ClipBatch apply_augment(const ClipBatch& clip, const std::vector<AugmentParams>& params)
{
    clip.validate();
    const auto& s = clip.frames.shape();
    const auto b = s[0], t = s[1];
    const int c = static_cast<int>(s[2]), h = static_cast<int>(s[3]), w = static_cast<int>(s[4]);
    if (static_cast<std::int64_t>(params.size()) != b) throw std::invalid_argument("apply_augment: one parameter set per clip");
    std::vector<float> frames, masks;
    frames.reserve(static_cast<std::size_t>(clip.frames.numel()));
    const std::int64_t fsize = static_cast<std::int64_t>(c) * h * w, msize = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < b; ++i) {
        const auto& a = params[static_cast<std::size_t>(i)];
        for (std::int64_t k = 0; k < t; ++k) {
            auto f = crop_resize_bilinear(slice_image(clip.frames, (i * t + k) * fsize, c, h, w), a.y0, a.x0, a.crop_h,
                                          a.crop_w, h, w);
            if (a.flip) f = hflip(f);
            frames.insert(frames.end(), f.data.begin(), f.data.end());
            if (clip.has_masks()) {
                auto m = crop_resize_nearest(slice_image(clip.masks, (i * t + k) * msize, 1, h, w), a.y0, a.x0,
                                             a.crop_h, a.crop_w, h, w);
                if (a.flip) m = hflip(m);
                masks.insert(masks.end(), m.data.begin(), m.data.end());
            }
        }
    }
    ClipBatch out;
    out.frames = Tensor::from_vector(s, std::move(frames));
    if (clip.has_masks()) out.masks = Tensor::from_vector(clip.masks.shape(), std::move(masks));
    return out;
}

ClipBatch augment(const ClipBatch& clip, Rng& rng, const AugmentConfig& cfg)
{
    clip.validate();
    std::vector<AugmentParams> params;
    for (std::int64_t i = 0; i < clip.frames.dim(0); ++i) {
        params.push_back(draw_augment(rng, cfg, static_cast<int>(clip.frames.dim(3)), static_cast<int>(clip.frames.dim(4))));
    }
    return apply_augment(clip, params);
}

// ---------------------------------------------------------------------------------------------
// evaluation

std::vector<std::vector<Image>> predict_sequences(const FUnet<float>& model, const std::vector<LoadedSequence>& seqs,
                                                  int batch_clips)
{
    const int frames = model.config().frames;
    const auto windows = eval_windows(seqs, frames);
    std::vector<std::vector<Image>> sums(seqs.size());
    std::vector<std::vector<int>> counts(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto& f0 = seqs[i].frames.at(0);
        sums[i].assign(seqs[i].frames.size(), Image(1, f0.height, f0.width));
        counts[i].assign(seqs[i].frames.size(), 0);
    }
    for (std::size_t at = 0; at < windows.size(); at += static_cast<std::size_t>(batch_clips)) {
        const auto end = std::min(windows.size(), at + static_cast<std::size_t>(batch_clips));
        const std::vector<ClipRef> refs(windows.begin() + static_cast<std::ptrdiff_t>(at),
                                        windows.begin() + static_cast<std::ptrdiff_t>(end));
        const auto batch = make_batch(seqs, refs, frames);
        const auto probs = sigmoid(model.forward(batch.frames));
        const auto p = probs.data();
        const std::int64_t hw = probs.dim(3) * probs.dim(4);
        for (std::size_t r = 0; r < refs.size(); ++r) {
            for (int t = 0; t < frames; ++t) {
                auto& acc = sums[refs[r].sequence][refs[r].start + t];
                const auto off = (static_cast<std::int64_t>(r) * frames + t) * hw;
                for (std::int64_t k = 0; k < hw; ++k) acc.data[k] += p[off + k];
                ++counts[refs[r].sequence][refs[r].start + t];
            }
        }
    }
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        for (std::size_t f = 0; f < sums[i].size(); ++f) {
            const float n = static_cast<float>(counts[i][f]);
            if (n > 1) {
                for (auto& v : sums[i][f].data) v = std::clamp(v / n, 0.0f, 1.0f);
            }
        }
    }
    return sums;
}

MetricReport evaluate(const FUnet<float>& model, const std::vector<LoadedSequence>& seqs, int batch_clips,
                      const MetricOptions& opt)
{
    if (seqs.empty()) throw std::invalid_argument("evaluate: no sequences");
    const auto preds = predict_sequences(model, seqs, batch_clips);
    MetricAccumulator acc(opt);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (seqs[i].masks.empty()) throw std::invalid_argument("evaluate: sequence " + seqs[i].id + " has no masks");
        for (std::size_t f = 0; f < preds[i].size(); ++f) acc.add(preds[i][f].data, seqs[i].masks[f].data);
    }
    return acc.report();
}

// ---------------------------------------------------------------------------------------------
// training

Trainer::Trainer(FUnet<float>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg))
{
    cfg_.validate();
    for (const auto& item : model_.params().items()) params_.push_back(item.second);
}

double Trainer::step(const ClipBatch& batch)
{
    if (!batch.has_masks()) throw std::invalid_argument("training batch has no masks");
    model_.params().zero_grad();
    double value = 0;
    {
        Tape tape;
        TapeScope scope(tape);
        const auto loss = segmentation_loss(model_.forward(batch.frames), batch.masks, cfg_.loss_mix);
        value = loss.item();
        if (!std::isfinite(value)) {
            throw NumericError("training loss became non-finite at step " + std::to_string(state_.step + 1) +
                               "; try a lower lr or keep gradient clipping on");
        }
        backward(tape, loss);
    }
    if (cfg_.clip_norm > 0) clip_grad_norm(params_, cfg_.clip_norm);
    adam_step(params_, state_, cfg_);
    return value;
}

namespace {

std::vector<std::vector<float>> snapshot(const FUnet<float>& model)
{
    std::vector<std::vector<float>> out;
    for (const auto& item : model.params().items()) out.emplace_back(item.second.data().begin(), item.second.data().end());
    return out;
}

void restore(FUnet<float>& model, const std::vector<std::vector<float>>& values)
{
    std::size_t k = 0;
    for (auto [name, p] : model.params().items()) {
        auto d = p.mutable_data();
        std::copy(values[k].begin(), values[k].end(), d.begin());
        ++k;
    }
}

}  // namespace

TrainResult train(FUnet<float>& model, const std::vector<LoadedSequence>& train_seqs,
                  const std::vector<LoadedSequence>& val_seqs, const TrainConfig& cfg, bool foreground_only,
                  const std::function<void(const EpochRecord&)>& on_epoch)
{
    cfg.validate();
    const int frames = model.config().frames;
    for (const auto& s : train_seqs) {
        if (s.masks.empty()) throw std::invalid_argument("training sequence " + s.id + " has no masks");
    }
    const auto windows = training_windows(train_seqs, frames, cfg.train_stride, foreground_only);
    if (windows.empty()) throw std::invalid_argument("training set is empty (no windows of T frames)");

    Trainer trainer(model, cfg);
    Rng rng(stable_hash("train", cfg.seed));
    TrainResult result;
    result.best_val_max_dice = -1;
    std::vector<std::vector<float>> best;
    int since_best = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto order = windows;
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0;
        int batches = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_clips)) {
            const auto end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_clips));
            const std::vector<ClipRef> refs(order.begin() + static_cast<std::ptrdiff_t>(at),
                                            order.begin() + static_cast<std::ptrdiff_t>(end));
            auto batch = make_batch(train_seqs, refs, frames);
            batch = augment(batch, rng, cfg.augment);
            loss_sum += trainer.step(batch);
            ++batches;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / batches;
        rec.val_max_dice = val_seqs.empty() ? std::numeric_limits<double>::quiet_NaN()
                                            : evaluate(model, val_seqs, cfg.batch_clips).max_dice;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.trace.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (val_seqs.empty() || rec.val_max_dice > result.best_val_max_dice) {
            result.best_epoch = epoch;
            result.best_val_max_dice = rec.val_max_dice;
            best = snapshot(model);
            since_best = 0;
        } else if (cfg.early_stop_patience > 0 && ++since_best >= cfg.early_stop_patience) {
            result.stopped_early = true;
            break;
        }
    }
    restore(model, best);
    result.steps = trainer.steps();
    return result;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& trace)
{
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "epoch,train_loss,val_maxDice,seconds\n";
    char line[160];
    for (const auto& r : trace) {
        std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.3f\n", r.epoch, r.train_loss, r.val_max_dice, r.seconds);
        out << line;
    }
    if (!out) throw IoError("cannot write " + path.string());
}

template Tensor segmentation_loss(const Tensor&, const Tensor&, double);
template TensorD segmentation_loss(const TensorD&, const TensorD&, double);
template void adam_step(const std::vector<Tensor>&, AdamState<float>&, const TrainConfig&);
template void adam_step(const std::vector<TensorD>&, AdamState<double>&, const TrainConfig&);
template double clip_grad_norm(const std::vector<Tensor>&, double);
template double clip_grad_norm(const std::vector<TensorD>&, double);

}  // namespace funet

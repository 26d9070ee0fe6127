#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "funet/data_io.hpp"
#include "funet/metrics.hpp"
#include "funet/model.hpp"
#include "funet/random.hpp"
#include "json.hpp"

namespace funet {

struct AugmentConfig {
    bool enabled = true;
    double hflip_prob = 0.5;
    double crop_scale_min = 0.75;
};

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int epochs = 30;
    int batch_clips = 2;
    std::uint64_t seed = 0;
    double loss_mix = 0.5;        // weight of the dice term; BCE gets 1 - loss_mix
    double clip_norm = 5.0;       // global gradient-norm clip; 0 disables
    int early_stop_patience = 0;  // epochs without a better validation maxDice; 0 disables
    int train_stride = 1;
    AugmentConfig augment;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Strict: unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// loss_mix * soft dice (smoothing 1, per frame) + (1 - loss_mix) * BCE-with-logits, averaged over B*T frames.
template <typename T>
BasicTensor<T> segmentation_loss(const BasicTensor<T>& logits, const BasicTensor<T>& masks, double loss_mix);

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::int64_t step = 0;
};

/// Decoupled weight decay (p -= lr*wd*p) followed by the bias-corrected Adam update.
/// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
void adam_step(const std::vector<BasicTensor<T>>& params, AdamState<T>& state, const TrainConfig& cfg);

/// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<BasicTensor<T>>& params, double max_norm);

/// One crop/flip decision for a whole clip.
struct AugmentParams {
    bool flip = false;
    int y0 = 0, x0 = 0, crop_h = 0, crop_w = 0;
};

AugmentParams draw_augment(Rng& rng, const AugmentConfig& cfg, int h, int w);
/// Applies params[b] to every frame of clip b: crop, resize back (bilinear frames, nearest masks), then flip.
ClipBatch apply_augment(const ClipBatch& clip, const std::vector<AugmentParams>& params);
ClipBatch augment(const ClipBatch& clip, Rng& rng, const AugmentConfig& cfg);

/// Per-frame probability maps for every sequence; overlapping eval windows are averaged.
std::vector<std::vector<Image>> predict_sequences(const FUnet<float>& model, const std::vector<LoadedSequence>& seqs,
                                                  int batch_clips);
MetricReport evaluate(const FUnet<float>& model, const std::vector<LoadedSequence>& seqs, int batch_clips,
                      const MetricOptions& opt = {});

/// Forward, loss, backward, clip and Adam for one batch. Throws NumericError on a non-finite loss.
class Trainer {
public:
    Trainer(FUnet<float>& model, TrainConfig cfg);
    double step(const ClipBatch& batch);
    std::int64_t steps() const { return state_.step; }

private:
    FUnet<float>& model_;
    TrainConfig cfg_;
    std::vector<Tensor> params_;
    AdamState<float> state_;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0;
    double val_max_dice = 0;  // NaN without a validation split
    double seconds = 0;
};

struct TrainResult {
    std::vector<EpochRecord> trace;
    int best_epoch = 0;
    double best_val_max_dice = 0;
    bool stopped_early = false;
    std::int64_t steps = 0;
};

/// Epoch loop over shuffled training windows. On return the model holds the parameters of the
/// epoch with the best validation maxDice (the last epoch when there is no validation data).
TrainResult train(FUnet<float>& model, const std::vector<LoadedSequence>& train_seqs,
                  const std::vector<LoadedSequence>& val_seqs, const TrainConfig& cfg, bool foreground_only = false,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

void write_trace_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& trace);

}  // namespace funet

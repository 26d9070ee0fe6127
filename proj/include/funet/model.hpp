#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "funet/tensor.hpp"
#include "json.hpp"

namespace funet {

enum class IfaApplication { Multiply, Residual };
enum class IfaFusion { Sum, Concat };
enum class CsaApplication { Multiply, Residual };

/// Ablation ladder: baseline Unet, + inter-frame attention, + channel self-attention.
enum class Variant { Baseline, WithIfa, Full };

std::string variant_tag(Variant v);  // "B", "BI", "BIC"
Variant parse_variant(const std::string& tag);

/// Every architecture hyperparameter in one place.
struct FUnetConfig {
    int frames = 5;          // T
    int in_channels = 3;     // C
    int base_channels = 16;  // encoder width at level 0, doubled per level
    int depth = 4;           // number of 2x down/up steps
    int adb_stages = 4;      // channel-pyramid stages, each halving channels
    int csa_grid = 32;       // attention over a grid x grid token map
    int csa_heads = 4;
    int csa_embed_dim = 0;   // 0: use the decoder width at the insertion level
    IfaApplication ifa_application = IfaApplication::Residual;
    IfaFusion ifa_fusion = IfaFusion::Sum;
    CsaApplication csa_application = CsaApplication::Multiply;
    bool csa_per_channel = false;  // gate per pixel and channel instead of per pixel
    bool scale_full_d = false;     // divide attention logits by sqrt(d) instead of sqrt(d / heads)
    int input_h = 256;
    int input_w = 448;

    /// Throws std::invalid_argument naming the violated constraint.
    void validate(Variant variant = Variant::Full) const;

    int channels_at(int level) const { return base_channels << level; }
    int bottleneck_channels() const { return channels_at(depth); }
    int embed_dim_at(int level) const { return csa_embed_dim > 0 ? csa_embed_dim : channels_at(level); }
    /// Decoder levels (0 = full resolution) whose extents are at least csa_grid.
    std::vector<int> csa_levels() const;

    /// Tiny configuration used by the gradient oracle and smoke tests.
    static FUnetConfig tiny();
};

nlohmann::json to_json(const FUnetConfig& cfg);
/// Strict: unknown keys are rejected. Missing keys keep their defaults.
FUnetConfig funet_config_from_json(const nlohmann::json& j);

/// (B,T,C,H,W) frames in [0,1] with optional (B,T,1,H,W) binary masks.
struct ClipBatch {
    Tensor frames;
    Tensor masks;  // undefined when absent

    bool has_masks() const { return masks.defined(); }
    void validate() const;
};

/// (B,T,C,H,W) -> (B*T,C,H,W); frame t of clip b lands at b*T + t.
template <typename T>
BasicTensor<T> merge_frames(const BasicTensor<T>& clip);
/// Inverse of merge_frames.
template <typename T>
BasicTensor<T> split_frames(const BasicTensor<T>& x, int frames);
/// (B*T,C,H,W) -> (B,C*T,H,W); frame t's channels occupy slots [t*C, (t+1)*C).
template <typename T>
BasicTensor<T> frames_to_channel_stack(const BasicTensor<T>& feat, int frames);
template <typename T>
BasicTensor<T> channel_stack_to_frames(const BasicTensor<T>& stack, int frames);

/// Ordered named parameters. Initial values depend only on (model seed, parameter name).
template <typename T>
class ParameterSet {
public:
    // FanIn: U(+-1/sqrt(fan_in)); ReluFanIn: U(+-sqrt(6/fan_in)), for weights feeding a relu
    enum class Init { FanIn, ReluFanIn, Zeros, Ones };

    explicit ParameterSet(std::uint64_t seed) : seed_(seed) {}

    BasicTensor<T> create(const std::string& name, Shape shape, Init init, std::int64_t fan_in = 1);

    const std::vector<std::pair<std::string, BasicTensor<T>>>& items() const { return items_; }
    BasicTensor<T> get(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::int64_t count() const;
    void zero_grad();

private:
    std::uint64_t seed_;
    std::vector<std::pair<std::string, BasicTensor<T>>> items_;
};

/// conv3x3 -> group norm -> relu -> conv3x3 -> relu
template <typename T>
struct ConvBlock {
    BasicTensor<T> w1, b1, g1, beta1, w2, b2;
    int groups = 1;
    bool linear_out = false;  // skip the final relu

    ConvBlock() = default;
    ConvBlock(ParameterSet<T>& ps, const std::string& prefix, int in_ch, int out_ch);
    BasicTensor<T> forward(const BasicTensor<T>& x) const;
};

/// Attention Down Block: halves channels at fixed H x W and scores the T frames.
template <typename T>
struct AttentionDownBlock {
    struct Output {
        BasicTensor<T> reduced;  // (B, Cin/2, H, W)
        BasicTensor<T> scores;   // (B, T, 1, 1), pre-activation
    };

    std::vector<BasicTensor<T>> branch_w, branch_b;  // dilations 1, 2, 3
    BasicTensor<T> fuse_w, fuse_b, norm_g, norm_b;
    BasicTensor<T> head1_w, head1_b, head2_w, head2_b;
    int in_channels = 0;
    int groups = 1;

    AttentionDownBlock() = default;
    AttentionDownBlock(ParameterSet<T>& ps, const std::string& prefix, int in_ch, int frames);
    Output forward(const BasicTensor<T>& x) const;
};

template <typename T>
struct InterFrameAttention {
    struct Output {
        BasicTensor<T> weighted;                 // (B*T, C, H, W)
        BasicTensor<T> weights;                  // (B, T, 1, 1) in (0,1)
        std::vector<BasicTensor<T>> raw_scores;  // one (B, T, 1, 1) per pyramid stage
    };

    std::vector<AttentionDownBlock<T>> stages;
    BasicTensor<T> fusion_w, fusion_b;  // concat fusion only
    int frames = 0;
    IfaFusion fusion = IfaFusion::Sum;
    IfaApplication application = IfaApplication::Residual;

    InterFrameAttention() = default;
    InterFrameAttention(ParameterSet<T>& ps, const std::string& prefix, const FUnetConfig& cfg, int channels);
    /// `forced_weight` replaces the fused gates by a constant (identity-gate checks).
    Output forward(const BasicTensor<T>& feat, std::optional<T> forced_weight = std::nullopt) const;
};

template <typename T>
struct ChannelSelfAttention {
    struct Output {
        BasicTensor<T> tokens;     // (B, grid^2, d), position embedding included
        BasicTensor<T> query, key, value;
        BasicTensor<T> attention;  // (B*heads, grid^2, grid^2), rows sum to 1
        BasicTensor<T> gate;       // (B, 1 or C, H, W) in (0,1)
        BasicTensor<T> out;        // (B, C, H, W)
    };

    BasicTensor<T> patch_w, patch_b, pos;
    BasicTensor<T> q_w, q_b, k_w, k_b, v_w, v_b;
    BasicTensor<T> norm_g, norm_b, proj_w, proj_b;
    int grid = 0, heads = 1, embed = 0, channels = 0;
    bool per_channel = false;
    bool scale_full_d = false;
    CsaApplication application = CsaApplication::Multiply;

    ChannelSelfAttention() = default;
    ChannelSelfAttention(ParameterSet<T>& ps, const std::string& prefix, const FUnetConfig& cfg, int channels,
                         int embed_dim);
    Output forward(const BasicTensor<T>& feat) const;
};

/// Patch convolution geometry that maps an extent onto exactly `grid` cells.
struct PatchGeometry {
    int kernel = 1, stride = 1, padding = 0;
};
PatchGeometry patch_geometry(std::int64_t extent, int grid);

template <typename T>
class FUnet {
public:
    struct Trace {
        typename InterFrameAttention<T>::Output ifa;
        std::vector<typename ChannelSelfAttention<T>::Output> csa;  // decoder order, deepest first
        BasicTensor<T> bottleneck;
        std::vector<BasicTensor<T>> decoder;  // conv-block output per level, deepest first
    };

    FUnet(FUnetConfig cfg, Variant variant, std::uint64_t seed);

    /// clip (B,T,C,H,W) -> logits (B,T,1,H,W).
    BasicTensor<T> forward(const BasicTensor<T>& clip, Trace* trace = nullptr) const;

    const FUnetConfig& config() const { return cfg_; }
    Variant variant() const { return variant_; }
    ParameterSet<T>& params() { return params_; }
    const ParameterSet<T>& params() const { return params_; }
    bool has_ifa() const { return variant_ != Variant::Baseline; }
    bool has_csa() const { return variant_ == Variant::Full; }

    /// Test hook: pin the IFA gates to a constant.
    std::optional<T> forced_ifa_weight;

private:
    FUnetConfig cfg_;
    Variant variant_;
    ParameterSet<T> params_;
    std::vector<ConvBlock<T>> encoder_;
    std::vector<ConvBlock<T>> decoder_;  // index = level
    InterFrameAttention<T> ifa_;
    std::vector<std::optional<ChannelSelfAttention<T>>> csa_;  // index = level
    BasicTensor<T> head_w_, head_b_;
};

/// Largest divisor of `channels` that is at most 8.
int group_count(int channels);

}  // namespace funet

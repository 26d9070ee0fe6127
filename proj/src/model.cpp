#include "funet/model.hpp"

#include <cmath>
#include <stdexcept>

#include "funet/ops.hpp"
#include "funet/random.hpp"

namespace funet {

std::string variant_tag(Variant v)
{
    switch (v) {
    case Variant::Baseline: return "B";
    case Variant::WithIfa: return "BI";
    case Variant::Full: return "BIC";
    }
    return "?";
}

Variant parse_variant(const std::string& tag)
{
    if (tag == "B") return Variant::Baseline;
    if (tag == "BI" || tag == "B+I") return Variant::WithIfa;
    if (tag == "BIC" || tag == "B+I+C") return Variant::Full;
    throw std::invalid_argument("unknown variant '" + tag + "' (expected B, BI or BIC)");
}

int group_count(int channels)
{
    for (int g = std::min(8, channels); g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

// ---------------------------------------------------------------------------------------------
// config

std::vector<int> FUnetConfig::csa_levels() const
{
    std::vector<int> levels;
    for (int level = depth - 1; level >= 0; --level) {
        if (std::min(input_h >> level, input_w >> level) >= csa_grid) levels.push_back(level);
    }
    return levels;
}

void FUnetConfig::validate(Variant variant) const
{
    auto fail = [](const std::string& msg) { throw std::invalid_argument("FUnetConfig: " + msg); };
    if (frames < 2) fail("frames (T) must be at least 2; inter-frame attention needs several frames");
    if (in_channels < 1 || base_channels < 1) fail("channel counts must be positive");
    if (depth < 1) fail("depth must be at least 1");
    if (adb_stages < 1) fail("adb_stages must be at least 1");
    if (input_h < 1 || input_w < 1) fail("input size must be positive");
    const int step = 1 << depth;
    if (input_h % step != 0 || input_w % step != 0) {
        fail("input " + std::to_string(input_h) + "x" + std::to_string(input_w) + " must be divisible by 2^depth = " +
             std::to_string(step));
    }
    if (variant != Variant::Baseline) {
        const int stacked = bottleneck_channels() * frames;
        if (stacked % (1 << adb_stages) != 0) {
            fail("bottleneck channels x frames = " + std::to_string(stacked) + " must be divisible by 2^adb_stages = " +
                 std::to_string(1 << adb_stages) + "; raise base_channels or change frames");
        }
        if (stacked >> (adb_stages - 1) < 4) {
            fail("the last pyramid stage would see fewer than 4 channels; lower adb_stages or raise base_channels");
        }
    }
    if (variant == Variant::Full) {
        if (csa_grid < 1 || csa_heads < 1) fail("csa_grid and csa_heads must be positive");
        const auto levels = csa_levels();
        if (levels.empty()) {
            fail("no decoder level is at least csa_grid = " + std::to_string(csa_grid) + " pixels on a side");
        }
        for (int level : levels) {
            if (embed_dim_at(level) % csa_heads != 0) {
                fail("embedding width " + std::to_string(embed_dim_at(level)) + " at level " + std::to_string(level) +
                     " is not divisible by csa_heads = " + std::to_string(csa_heads));
            }
        }
    }
}

FUnetConfig FUnetConfig::tiny()
{
    FUnetConfig c;
    c.frames = 3;
    c.base_channels = 4;
    c.depth = 2;
    c.csa_grid = 4;
    c.csa_heads = 2;
    c.input_h = 16;
    c.input_w = 28;
    return c;
}

namespace {

const char* to_string(IfaApplication a) { return a == IfaApplication::Multiply ? "multiply" : "residual"; }
const char* to_string(IfaFusion f) { return f == IfaFusion::Sum ? "sum" : "concat"; }
const char* to_string(CsaApplication a) { return a == CsaApplication::Multiply ? "multiply" : "residual"; }

}  // namespace

nlohmann::json to_json(const FUnetConfig& c)
{
    return {
        {"frames", c.frames},
        {"in_channels", c.in_channels},
        {"base_channels", c.base_channels},
        {"depth", c.depth},
        {"adb_stages", c.adb_stages},
        {"csa_grid", c.csa_grid},
        {"csa_heads", c.csa_heads},
        {"csa_embed_dim", c.csa_embed_dim},
        {"ifa_application", to_string(c.ifa_application)},
        {"ifa_fusion", to_string(c.ifa_fusion)},
        {"csa_application", to_string(c.csa_application)},
        {"csa_per_channel", c.csa_per_channel},
        {"scale_full_d", c.scale_full_d},
        {"input_h", c.input_h},
        {"input_w", c.input_w},
    };
}

FUnetConfig funet_config_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
    FUnetConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "frames") c.frames = v.get<int>();
        else if (key == "in_channels") c.in_channels = v.get<int>();
        else if (key == "base_channels") c.base_channels = v.get<int>();
        else if (key == "depth") c.depth = v.get<int>();
        else if (key == "adb_stages") c.adb_stages = v.get<int>();
        else if (key == "csa_grid") c.csa_grid = v.get<int>();
        else if (key == "csa_heads") c.csa_heads = v.get<int>();
        else if (key == "csa_embed_dim") c.csa_embed_dim = v.get<int>();
        else if (key == "ifa_application") {
            const auto s = v.get<std::string>();
            if (s == "multiply") c.ifa_application = IfaApplication::Multiply;
            else if (s == "residual") c.ifa_application = IfaApplication::Residual;
            else throw std::invalid_argument("ifa_application must be multiply or residual");
        } else if (key == "ifa_fusion") {
            const auto s = v.get<std::string>();
            if (s == "sum") c.ifa_fusion = IfaFusion::Sum;
            else if (s == "concat") c.ifa_fusion = IfaFusion::Concat;
            else throw std::invalid_argument("ifa_fusion must be sum or concat");
        } else if (key == "csa_application") {
            const auto s = v.get<std::string>();
            if (s == "multiply") c.csa_application = CsaApplication::Multiply;
            else if (s == "residual") c.csa_application = CsaApplication::Residual;
            else throw std::invalid_argument("csa_application must be multiply or residual");
        } else if (key == "csa_per_channel") c.csa_per_channel = v.get<bool>();
        else if (key == "scale_full_d") c.scale_full_d = v.get<bool>();
        else if (key == "input_h") c.input_h = v.get<int>();
        else if (key == "input_w") c.input_w = v.get<int>();
        else throw std::invalid_argument("unknown model config key '" + key + "'");
    }
    return c;
}

void ClipBatch::validate() const
{
    if (!frames.defined() || frames.rank() != 5) throw ShapeError("ClipBatch: frames must be (B,T,C,H,W)");
    if (!masks.defined()) return;
    const auto& f = frames.shape();
    const Shape want{f[0], f[1], 1, f[3], f[4]};
    if (masks.shape() != want) {
        throw ShapeError("ClipBatch: masks " + shape_str(masks.shape()) + " must be " + shape_str(want));
    }
    for (auto v : masks.data()) {
        if (v != 0.0f && v != 1.0f) throw std::invalid_argument("ClipBatch: mask values must be exactly 0 or 1");
    }
}

// ---------------------------------------------------------------------------------------------
// frame bookkeeping

template <typename T>
BasicTensor<T> merge_frames(const BasicTensor<T>& clip)
{
    if (clip.rank() != 5) throw ShapeError("merge_frames: expected rank 5 (B,T,C,H,W), got " + shape_str(clip.shape()));
    const auto& s = clip.shape();
    return reshape(clip, {s[0] * s[1], s[2], s[3], s[4]});
}

template <typename T>
BasicTensor<T> split_frames(const BasicTensor<T>& x, int frames)
{
    if (x.rank() != 4 || frames < 1 || x.dim(0) % frames != 0) {
        throw ShapeError("split_frames: leading extent of " + shape_str(x.shape()) + " not divisible by T=" +
                         std::to_string(frames));
    }
    const auto& s = x.shape();
    return reshape(x, {s[0] / frames, frames, s[1], s[2], s[3]});
}

template <typename T>
BasicTensor<T> frames_to_channel_stack(const BasicTensor<T>& feat, int frames)
{
    if (frames < 2) throw std::invalid_argument("frames_to_channel_stack: T must be at least 2");
    if (feat.rank() != 4 || feat.dim(0) % frames != 0) {
        throw ShapeError("frames_to_channel_stack: leading extent of " + shape_str(feat.shape()) +
                         " not divisible by T=" + std::to_string(frames));
    }
    const auto& s = feat.shape();
    // (B*T,C,H,W) and (B,T*C,H,W) share a row-major layout with channel index t*C + c
    return reshape(feat, {s[0] / frames, s[1] * frames, s[2], s[3]});
}

template <typename T>
BasicTensor<T> channel_stack_to_frames(const BasicTensor<T>& stack, int frames)
{
    if (stack.rank() != 4 || frames < 1 || stack.dim(1) % frames != 0) {
        throw ShapeError("channel_stack_to_frames: channels of " + shape_str(stack.shape()) +
                         " not divisible by T=" + std::to_string(frames));
    }
    const auto& s = stack.shape();
    return reshape(stack, {s[0] * frames, s[1] / frames, s[2], s[3]});
}

// ---------------------------------------------------------------------------------------------
// parameters

template <typename T>
BasicTensor<T> ParameterSet<T>::create(const std::string& name, Shape shape, Init init, std::int64_t fan_in)
{
    if (contains(name)) throw std::logic_error("duplicate parameter name " + name);
    auto t = BasicTensor<T>::zeros(std::move(shape));
    auto data = t.mutable_data();
    if (init == Init::Ones) {
        std::fill(data.begin(), data.end(), T(1));
    } else if (init == Init::FanIn || init == Init::ReluFanIn) {
        Rng rng(stable_hash(name, seed_));
        const double gain = init == Init::ReluFanIn ? std::sqrt(6.0) : 1.0;
        const double bound = gain / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
        for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    t.set_requires_grad(true);
    items_.emplace_back(name, t);
    return t;
}

template <typename T>
BasicTensor<T> ParameterSet<T>::get(const std::string& name) const
{
    for (const auto& [n, t] : items_) {
        if (n == name) return t;
    }
    throw std::out_of_range("no parameter named " + name);
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& name) const
{
    for (const auto& item : items_) {
        if (item.first == name) return true;
    }
    return false;
}

template <typename T>
std::int64_t ParameterSet<T>::count() const
{
    std::int64_t n = 0;
    for (const auto& item : items_) n += item.second.numel();
    return n;
}

template <typename T>
void ParameterSet<T>::zero_grad()
{
    for (auto& item : items_) item.second.zero_grad();
}

// ---------------------------------------------------------------------------------------------
// blocks

template <typename T>
ConvBlock<T>::ConvBlock(ParameterSet<T>& ps, const std::string& prefix, int in_ch, int out_ch)
{
    using Init = typename ParameterSet<T>::Init;
    w1 = ps.create(prefix + ".conv1.weight", {out_ch, in_ch, 3, 3}, Init::ReluFanIn, in_ch * 9);
    b1 = ps.create(prefix + ".conv1.bias", {out_ch}, Init::Zeros);
    g1 = ps.create(prefix + ".norm1.weight", {out_ch}, Init::Ones);
    beta1 = ps.create(prefix + ".norm1.bias", {out_ch}, Init::Zeros);
    w2 = ps.create(prefix + ".conv2.weight", {out_ch, out_ch, 3, 3}, Init::ReluFanIn, out_ch * 9);
    b2 = ps.create(prefix + ".conv2.bias", {out_ch}, Init::Zeros);
    groups = group_count(out_ch);
}

template <typename T>
BasicTensor<T> ConvBlock<T>::forward(const BasicTensor<T>& x) const
{
    const Conv2dOptions same{{1, 1}, {1, 1}, {1, 1}};
    // the second conv is left unnormalised so feature (and logit) scale can grow
    auto h = relu(group_norm(conv2d(x, w1, b1, same), groups, g1, beta1));
    auto y = conv2d(h, w2, b2, same);
    return linear_out ? y : relu(y);
}

template <typename T>
AttentionDownBlock<T>::AttentionDownBlock(ParameterSet<T>& ps, const std::string& prefix, int in_ch, int frames)
    : in_channels(in_ch)
{
    using Init = typename ParameterSet<T>::Init;
    if (in_ch % 2 != 0 || in_ch / 4 < 1) {
        throw std::invalid_argument("AttentionDownBlock: input channels " + std::to_string(in_ch) +
                                    " must be even and at least 4");
    }
    const int half = in_ch / 2;
    const int per_branch = in_ch / 6;
    const int widths[3] = {half - 2 * per_branch, per_branch, per_branch};
    for (int k = 0; k < 3; ++k) {
        if (widths[k] == 0) continue;
        const auto name = prefix + ".branch" + std::to_string(k + 1);
        branch_w.push_back(ps.create(name + ".weight", {widths[k], in_ch, 3, 3}, Init::FanIn, in_ch * 9));
        branch_b.push_back(ps.create(name + ".bias", {widths[k]}, Init::Zeros));
    }
    fuse_w = ps.create(prefix + ".fuse.weight", {half, half, 1, 1}, Init::FanIn, half);
    fuse_b = ps.create(prefix + ".fuse.bias", {half}, Init::Zeros);
    norm_g = ps.create(prefix + ".norm.weight", {half}, Init::Ones);
    norm_b = ps.create(prefix + ".norm.bias", {half}, Init::Zeros);
    groups = group_count(half);
    const int quarter = in_ch / 4;
    head1_w = ps.create(prefix + ".head1.weight", {quarter, half, 1, 1}, Init::FanIn, half);
    head1_b = ps.create(prefix + ".head1.bias", {quarter}, Init::Zeros);
    head2_w = ps.create(prefix + ".head2.weight", {frames, quarter, 1, 1}, Init::FanIn, quarter);
    head2_b = ps.create(prefix + ".head2.bias", {frames}, Init::Zeros);
}

template <typename T>
typename AttentionDownBlock<T>::Output AttentionDownBlock<T>::forward(const BasicTensor<T>& x) const
{
    if (x.rank() != 4 || x.dim(1) != in_channels) {
        throw ShapeError("AttentionDownBlock: expected " + std::to_string(in_channels) + " channels, got " +
                         shape_str(x.shape()));
    }
    std::vector<BasicTensor<T>> branches;
    for (std::size_t i = 0; i < branch_w.size(); ++i) {
        // when Cin < 6 only the first branch has channels
        const int dil = static_cast<int>(i + 1);
        branches.push_back(conv2d(x, branch_w[i], branch_b[i], {{1, 1}, {dil, dil}, {dil, dil}}));
    }
    auto cat = branches.size() == 1 ? branches[0] : concat(branches, 1);
    auto reduced = relu(group_norm(conv2d(cat, fuse_w, fuse_b), groups, norm_g, norm_b));
    auto pooled = adaptive_global_avg_pool(reduced);
    auto scores = conv2d(relu(conv2d(pooled, head1_w, head1_b)), head2_w, head2_b);
    return {reduced, scores};
}

template <typename T>
InterFrameAttention<T>::InterFrameAttention(ParameterSet<T>& ps, const std::string& prefix, const FUnetConfig& cfg,
                                            int channels)
    : frames(cfg.frames), fusion(cfg.ifa_fusion), application(cfg.ifa_application)
{
    using Init = typename ParameterSet<T>::Init;
    int width = channels * cfg.frames;
    for (int s = 0; s < cfg.adb_stages; ++s) {
        stages.emplace_back(ps, prefix + ".adb" + std::to_string(s + 1), width, cfg.frames);
        width /= 2;
    }
    if (fusion == IfaFusion::Concat) {
        const int in = cfg.frames * cfg.adb_stages;
        fusion_w = ps.create(prefix + ".fusion.weight", {cfg.frames, in, 1, 1}, Init::FanIn, in);
        fusion_b = ps.create(prefix + ".fusion.bias", {cfg.frames}, Init::Zeros);
    }
}

template <typename T>
typename InterFrameAttention<T>::Output InterFrameAttention<T>::forward(const BasicTensor<T>& feat,
                                                                      std::optional<T> forced_weight) const
{
    if (feat.rank() != 4 || feat.dim(0) % frames != 0) {
        throw ShapeError("InterFrameAttention: leading extent of " + shape_str(feat.shape()) +
                         " must be a multiple of T=" + std::to_string(frames) + " (check FUnetConfig.frames)");
    }
    if ((feat.dim(1) * frames) % (std::int64_t{1} << stages.size()) != 0) {
        throw ShapeError("InterFrameAttention: C*T = " + std::to_string(feat.dim(1) * frames) +
                         " must be divisible by 2^" + std::to_string(stages.size()) +
                         " (check base_channels/adb_stages)");
    }
    const auto n = feat.dim(0);
    const auto batch = n / frames;
    Output out;
    auto stack = frames_to_channel_stack(feat, frames);
    for (const auto& stage : stages) {
        auto r = stage.forward(stack);
        stack = r.reduced;
        out.raw_scores.push_back(r.scores);
    }
    BasicTensor<T> fused;
    if (fusion == IfaFusion::Sum) {
        fused = out.raw_scores[0];
        for (std::size_t i = 1; i < out.raw_scores.size(); ++i) fused = add(fused, out.raw_scores[i]);
    } else {
        fused = conv2d(concat(out.raw_scores, 1), fusion_w, fusion_b);
    }
    out.weights = forced_weight ? BasicTensor<T>::full({batch, frames, 1, 1}, *forced_weight) : sigmoid(fused);
    auto per_frame = reshape(out.weights, {n});
    if (application == IfaApplication::Residual) per_frame = add_scalar(per_frame, T(1));
    out.weighted = scale_per_sample(feat, per_frame);
    return out;
}

PatchGeometry patch_geometry(std::int64_t extent, int grid)
{
    if (grid < 1 || extent < grid) {
        throw ShapeError("CSA patching: extent " + std::to_string(extent) + " is smaller than csa_grid " +
                         std::to_string(grid));
    }
    PatchGeometry p;
    p.stride = static_cast<int>((extent + grid - 1) / grid);
    p.kernel = p.stride;
    const auto total = static_cast<std::int64_t>(grid) * p.stride - extent;
    p.padding = static_cast<int>((total + 1) / 2);
    const auto cells = (extent + 2 * p.padding - p.kernel) / p.stride + 1;
    if (cells != grid) {
        throw ShapeError("CSA patching: extent " + std::to_string(extent) + " maps onto " + std::to_string(cells) +
                         " cells, not csa_grid " + std::to_string(grid));
    }
    return p;
}

template <typename T>
ChannelSelfAttention<T>::ChannelSelfAttention(ParameterSet<T>& ps, const std::string& prefix,
                                              const FUnetConfig& cfg, int ch, int embed_dim)
    : grid(cfg.csa_grid), heads(cfg.csa_heads), embed(embed_dim), channels(ch), per_channel(cfg.csa_per_channel),
      scale_full_d(cfg.scale_full_d), application(cfg.csa_application)
{
    using Init = typename ParameterSet<T>::Init;
    if (embed % heads != 0) {
        throw std::invalid_argument("ChannelSelfAttention: d = " + std::to_string(embed) +
                                    " not divisible by heads = " + std::to_string(heads));
    }
    // patch_w/patch_b depend on the feature-map size; the owner creates them for its level
    pos = ps.create(prefix + ".pos_embedding", {static_cast<std::int64_t>(grid) * grid, embed}, Init::Zeros);
    q_w = ps.create(prefix + ".query.weight", {embed, embed}, Init::FanIn, embed);
    q_b = ps.create(prefix + ".query.bias", {embed}, Init::Zeros);
    k_w = ps.create(prefix + ".key.weight", {embed, embed}, Init::FanIn, embed);
    k_b = ps.create(prefix + ".key.bias", {embed}, Init::Zeros);
    v_w = ps.create(prefix + ".value.weight", {embed, embed}, Init::FanIn, embed);
    v_b = ps.create(prefix + ".value.bias", {embed}, Init::Zeros);
    norm_g = ps.create(prefix + ".norm.weight", {embed}, Init::Ones);
    norm_b = ps.create(prefix + ".norm.bias", {embed}, Init::Zeros);
    const int out = per_channel ? channels : 1;
    proj_w = ps.create(prefix + ".proj.weight", {out, embed}, Init::FanIn, embed);
    proj_b = ps.create(prefix + ".proj.bias", {out}, Init::Zeros);
}

template <typename T>
typename ChannelSelfAttention<T>::Output ChannelSelfAttention<T>::forward(const BasicTensor<T>& feat) const
{
    if (feat.rank() != 4 || feat.dim(1) != channels) {
        throw ShapeError("ChannelSelfAttention: expected " + std::to_string(channels) + " channels, got " +
                         shape_str(feat.shape()));
    }
    if (!patch_w.defined()) throw std::logic_error("ChannelSelfAttention: patch convolution not initialised");
    const auto b = feat.dim(0), h = feat.dim(2), w = feat.dim(3);
    const auto ph = patch_geometry(h, grid), pw = patch_geometry(w, grid);
    if (patch_w.dim(2) != ph.kernel || patch_w.dim(3) != pw.kernel) {
        throw ShapeError("ChannelSelfAttention: patch kernel " + shape_str(patch_w.shape()) +
                         " was built for a different feature-map size than " + shape_str(feat.shape()));
    }
    const std::int64_t tokens = static_cast<std::int64_t>(grid) * grid;
    const std::int64_t dh = embed / heads;

    Output o;
    auto patches = conv2d(feat, patch_w, patch_b, {{ph.stride, pw.stride}, {ph.padding, pw.padding}, {1, 1}});
    o.tokens = add_batch_shared(permute(reshape(patches, {b, embed, tokens}), {0, 2, 1}), pos);
    o.query = linear(o.tokens, q_w, q_b);
    o.key = linear(o.tokens, k_w, k_b);
    o.value = linear(o.tokens, v_w, v_b);

    auto split = [&](const BasicTensor<T>& t) {
        return reshape(permute(reshape(t, {b, tokens, heads, dh}), {0, 2, 1, 3}), {b * heads, tokens, dh});
    };
    auto qh = split(o.query);
    auto kt = permute(split(o.key), {0, 2, 1});
    auto vh = split(o.value);
    const double denom = std::sqrt(static_cast<double>(scale_full_d ? embed : dh));
    o.attention = softmax(scale(matmul_batched(qh, kt), static_cast<T>(1.0 / denom)), -1);
    auto mixed = matmul_batched(o.attention, vh);
    auto merged = reshape(permute(reshape(mixed, {b, heads, tokens, dh}), {0, 2, 1, 3}), {b, tokens, embed});
    auto normed = layer_norm(merged, norm_g, norm_b);

    auto projected = linear(normed, proj_w, proj_b);  // (B, N, 1 or C)
    const std::int64_t gate_ch = per_channel ? channels : 1;
    auto gate_grid = sigmoid(reshape(permute(projected, {0, 2, 1}), {b, gate_ch, grid, grid}));
    o.gate = resize_bilinear(gate_grid, h, w);
    auto factor = application == CsaApplication::Residual ? add_scalar(o.gate, T(1)) : o.gate;
    o.out = per_channel ? mul(feat, factor) : mul_spatial_gate(feat, factor);
    return o;
}

// ---------------------------------------------------------------------------------------------
// network

template <typename T>
FUnet<T>::FUnet(FUnetConfig cfg, Variant variant, std::uint64_t seed)
    : cfg_(std::move(cfg)), variant_(variant), params_(seed)
{
    using Init = typename ParameterSet<T>::Init;
    cfg_.validate(variant_);
    for (int level = 0; level <= cfg_.depth; ++level) {
        const int in = level == 0 ? cfg_.in_channels : cfg_.channels_at(level - 1);
        encoder_.emplace_back(params_, "enc" + std::to_string(level), in, cfg_.channels_at(level));
    }
    if (has_ifa()) ifa_ = InterFrameAttention<T>(params_, "ifa", cfg_, cfg_.bottleneck_channels());

    decoder_.resize(static_cast<std::size_t>(cfg_.depth));
    csa_.resize(static_cast<std::size_t>(cfg_.depth));
    const auto csa_levels = cfg_.csa_levels();
    for (int level = cfg_.depth - 1; level >= 0; --level) {
        const auto prefix = "dec" + std::to_string(level);
        const int ch = cfg_.channels_at(level);
        decoder_[level] = ConvBlock<T>(params_, prefix, cfg_.channels_at(level + 1) + ch, ch);
        // signed features into the head: with a relu here every channel can go quiet on the
        // foreground, leaving the foreground logit to the head bias alone
        decoder_[level].linear_out = level == 0;
        const bool active = std::find(csa_levels.begin(), csa_levels.end(), level) != csa_levels.end();
        if (has_csa() && active) {
            const int d = cfg_.embed_dim_at(level);
            ChannelSelfAttention<T> gate(params_, prefix + ".csa", cfg_, ch, d);
            const auto ph = patch_geometry(cfg_.input_h >> level, cfg_.csa_grid);
            const auto pw = patch_geometry(cfg_.input_w >> level, cfg_.csa_grid);
            gate.patch_w = params_.create(prefix + ".csa.patch.weight", {d, ch, ph.kernel, pw.kernel}, Init::FanIn,
                                          static_cast<std::int64_t>(ch) * ph.kernel * pw.kernel);
            gate.patch_b = params_.create(prefix + ".csa.patch.bias", {d}, Init::Zeros);
            csa_[level] = std::move(gate);
        }
    }
    head_w_ = params_.create("head.weight", {1, cfg_.channels_at(0), 3, 3}, Init::FanIn, cfg_.channels_at(0) * 9);
    head_b_ = params_.create("head.bias", {1}, Init::Zeros);
}

template <typename T>
BasicTensor<T> FUnet<T>::forward(const BasicTensor<T>& clip, Trace* trace) const
{
    if (clip.rank() != 5) throw ShapeError("FUnet: input must be (B,T,C,H,W), got " + shape_str(clip.shape()));
    const Shape& s = clip.shape();
    if (s[1] != cfg_.frames || s[2] != cfg_.in_channels || s[3] != cfg_.input_h || s[4] != cfg_.input_w) {
        throw ShapeError("FUnet: input " + shape_str(s) + " does not match config (T=" + std::to_string(cfg_.frames) +
                         ", C=" + std::to_string(cfg_.in_channels) + ", " + std::to_string(cfg_.input_h) + "x" +
                         std::to_string(cfg_.input_w) + ")");
    }
    auto x = merge_frames(clip);
    std::vector<BasicTensor<T>> skips;
    x = encoder_[0].forward(x);
    for (int level = 1; level <= cfg_.depth; ++level) {
        skips.push_back(x);
        x = encoder_[level].forward(avg_pool2x(x));
    }
    if (trace) trace->bottleneck = x;
    if (has_ifa()) {
        auto r = ifa_.forward(x, forced_ifa_weight);
        x = r.weighted;
        if (trace) trace->ifa = std::move(r);
    }
    for (int level = cfg_.depth - 1; level >= 0; --level) {
        x = concat<T>({upsample2x(x), skips[level]}, 1);
        x = decoder_[level].forward(x);
        if (trace) trace->decoder.push_back(x);
        if (csa_[level]) {
            auto r = csa_[level]->forward(x);
            x = r.out;
            if (trace) trace->csa.push_back(std::move(r));
        }
    }
    return split_frames(conv2d(x, head_w_, head_b_, {{1, 1}, {1, 1}, {1, 1}}), cfg_.frames);
}

template BasicTensor<float> merge_frames(const BasicTensor<float>&);
template BasicTensor<double> merge_frames(const BasicTensor<double>&);
template BasicTensor<float> split_frames(const BasicTensor<float>&, int);
template BasicTensor<double> split_frames(const BasicTensor<double>&, int);
template BasicTensor<float> frames_to_channel_stack(const BasicTensor<float>&, int);
template BasicTensor<double> frames_to_channel_stack(const BasicTensor<double>&, int);
template BasicTensor<float> channel_stack_to_frames(const BasicTensor<float>&, int);
template BasicTensor<double> channel_stack_to_frames(const BasicTensor<double>&, int);

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct ConvBlock<float>;
template struct ConvBlock<double>;
template struct AttentionDownBlock<float>;
template struct AttentionDownBlock<double>;
template struct InterFrameAttention<float>;
template struct InterFrameAttention<double>;
template struct ChannelSelfAttention<float>;
template struct ChannelSelfAttention<double>;
template class FUnet<float>;
template class FUnet<double>;

}  // namespace funet

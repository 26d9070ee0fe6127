#include "funet/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include "funet/gradcheck.hpp"
#include "funet/model.hpp"
#include "funet/ops.hpp"

namespace funet {
namespace {

using Rng = std::mt19937_64;

std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi)
{
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

TensorD uniform(Rng& rng, Shape shape, double lo = -1, double hi = 1)
{
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = dist(rng);
    return TensorD::from_vector(std::move(shape), std::move(v));
}

// Values with |x| >= margin, so kinks and poles stay out of the difference stencil.
TensorD away_from_zero(Rng& rng, Shape shape, double margin, double hi = 1)
{
    std::uniform_real_distribution<double> mag(margin, hi);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    return TensorD::from_vector(std::move(shape), std::move(v));
}

// Contract the op output with fixed random weights so every output element matters.
TensorD project(const TensorD& y, const TensorD& w)
{
    return sum(mul(y, w));
}

using Case = std::function<double(Rng&, const GradCheckOptions&)>;

template <typename Op>
double check_unary(Rng& rng, const GradCheckOptions& opt, TensorD x, Op op)
{
    auto probe_shape = op(x).shape();
    auto w = uniform(rng, probe_shape);
    return grad_check([&](const std::vector<TensorD>& in) { return project(op(in[0]), w); }, {x}, opt);
}

const std::map<std::string, Case>& cases()
{
    static const std::map<std::string, Case> table = {
        {"conv2d",
         [](Rng& rng, const GradCheckOptions& opt) {
             const int k = static_cast<int>(pick(rng, 1, 3));
             const int dil = static_cast<int>(pick(rng, 1, 2));
             const int stride = static_cast<int>(pick(rng, 1, 2));
             const int pad = static_cast<int>(pick(rng, 0, 1));
             const auto span = dil * (k - 1) + 1;
             const auto lo = std::max<std::int64_t>(1, span - 2 * pad);
             const auto h = pick(rng, lo, std::max<std::int64_t>(lo, 6)), w = pick(rng, lo, std::max<std::int64_t>(lo, 6));
             const auto b = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
             Conv2dOptions o{{stride, stride}, {pad, pad}, {dil, dil}};
             auto x = uniform(rng, {b, cin, h, w});
             auto wt = uniform(rng, {cout, cin, k, k});
             auto bias = uniform(rng, {cout});
             auto probe = uniform(rng, conv2d(x, wt, bias, o).shape());
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(conv2d(in[0], in[1], in[2], o), probe); },
                 {x, wt, bias}, opt);
         }},
        {"linear",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto din = pick(rng, 1, 6), dout = pick(rng, 1, 6);
             auto x = uniform(rng, {pick(rng, 1, 4), pick(rng, 1, 3), din});
             auto w = uniform(rng, {dout, din});
             auto b = uniform(rng, {dout});
             auto probe = uniform(rng, linear(x, w, b).shape());
             return grad_check([&](const std::vector<TensorD>& in) { return project(linear(in[0], in[1], in[2]), probe); },
                               {x, w, b}, opt);
         }},
        {"matmul_batched",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto bt = pick(rng, 1, 3), m = pick(rng, 1, 6), k = pick(rng, 1, 6), n = pick(rng, 1, 6);
             auto a = uniform(rng, {bt, m, k});
             auto b = uniform(rng, {bt, k, n});
             auto probe = uniform(rng, {bt, m, n});
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(matmul_batched(in[0], in[1]), probe); }, {a, b},
                 opt);
         }},
        {"softmax",
         [](Rng& rng, const GradCheckOptions& opt) {
             const int rank = static_cast<int>(pick(rng, 1, 3));
             Shape s;
             for (int i = 0; i < rank; ++i) s.push_back(pick(rng, 1, 6));
             const int axis = static_cast<int>(pick(rng, 0, rank - 1));
             return check_unary(rng, opt, uniform(rng, s, -3, 3), [axis](const TensorD& x) { return softmax(x, axis); });
         }},
        {"sigmoid",
         [](Rng& rng, const GradCheckOptions& opt) {
             return check_unary(rng, opt, uniform(rng, {pick(rng, 1, 6), pick(rng, 1, 6)}, -4, 4),
                                [](const TensorD& x) { return sigmoid(x); });
         }},
        {"relu",
         [](Rng& rng, const GradCheckOptions& opt) {
             return check_unary(rng, opt, away_from_zero(rng, {pick(rng, 1, 6), pick(rng, 1, 6)}, 1e-3),
                                [](const TensorD& x) { return relu(x); });
         }},
        {"layer_norm",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto d = pick(rng, 2, 6);
             auto x = uniform(rng, {pick(rng, 1, 4), d});
             auto g = uniform(rng, {d}, 0.5, 1.5);
             auto b = uniform(rng, {d});
             auto probe = uniform(rng, x.shape());
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(layer_norm(in[0], in[1], in[2]), probe); },
                 {x, g, b}, opt);
         }},
        {"group_norm",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto groups = pick(rng, 1, 3);
             const auto c = groups * pick(rng, 1, 2);
             auto x = uniform(rng, {pick(rng, 1, 2), c, pick(rng, 1, 4), pick(rng, 2, 4)});
             auto g = uniform(rng, {c}, 0.5, 1.5);
             auto b = uniform(rng, {c});
             auto probe = uniform(rng, x.shape());
             const int gi = static_cast<int>(groups);
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(group_norm(in[0], gi, in[1], in[2]), probe); },
                 {x, g, b}, opt);
         }},
        {"add_sub_mul_div",
         [](Rng& rng, const GradCheckOptions& opt) {
             Shape s{pick(rng, 1, 6), pick(rng, 1, 6)};
             auto a = uniform(rng, s);
             auto b = away_from_zero(rng, s, 0.5, 1.5);
             auto probe = uniform(rng, s);
             return grad_check(
                 [&](const std::vector<TensorD>& in) {
                     auto y = add(mul(in[0], in[1]), div(sub(in[0], in[1]), in[1]));
                     return project(add_scalar(scale(y, 0.7), 0.3), probe);
                 },
                 {a, b}, opt);
         }},
        {"concat",
         [](Rng& rng, const GradCheckOptions& opt) {
             const int axis = static_cast<int>(pick(rng, 0, 2));
             Shape s{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
             Shape s2 = s;
             s2[axis] = pick(rng, 1, 4);
             auto a = uniform(rng, s);
             auto b = uniform(rng, s2);
             auto probe = uniform(rng, concat<double>({a, b}, axis).shape());
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(concat<double>({in[0], in[1]}, axis), probe); },
                 {a, b}, opt);
         }},
        {"reshape_permute",
         [](Rng& rng, const GradCheckOptions& opt) {
             Shape s{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
             std::vector<int> perm{0, 1, 2};
             std::shuffle(perm.begin(), perm.end(), rng);
             return check_unary(rng, opt, uniform(rng, s), [perm](const TensorD& x) {
                 return reshape(permute(x, perm), {-1});
             });
         }},
        {"resize_bilinear",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto oh = pick(rng, 1, 6), ow = pick(rng, 1, 6);
             auto x = uniform(rng, {pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4)});
             return check_unary(rng, opt, x, [oh, ow](const TensorD& v) {
                 return concat<double>({reshape(resize_bilinear(v, oh, ow), {-1}), reshape(upsample2x(v), {-1})}, 0);
             });
         }},
        {"avg_pool2x",
         [](Rng& rng, const GradCheckOptions& opt) {
             auto x = uniform(rng, {pick(rng, 1, 2), pick(rng, 1, 3), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)});
             return check_unary(rng, opt, x, [](const TensorD& v) { return avg_pool2x(v); });
         }},
        {"adaptive_global_avg_pool",
         [](Rng& rng, const GradCheckOptions& opt) {
             auto x = uniform(rng, {pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 6), pick(rng, 1, 6)});
             return check_unary(rng, opt, x, [](const TensorD& v) { return adaptive_global_avg_pool(v); });
         }},
        {"scale_per_sample",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto n = pick(rng, 1, 6);
             auto x = uniform(rng, {n, pick(rng, 1, 3), pick(rng, 1, 4)});
             auto s = uniform(rng, {n, 1});
             auto probe = uniform(rng, x.shape());
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(scale_per_sample(in[0], in[1]), probe); },
                 {x, s}, opt);
         }},
        {"mul_spatial_gate",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto b = pick(rng, 1, 2), h = pick(rng, 1, 5), w = pick(rng, 1, 5);
             auto x = uniform(rng, {b, pick(rng, 1, 4), h, w});
             auto g = uniform(rng, {b, 1, h, w});
             auto probe = uniform(rng, x.shape());
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(mul_spatial_gate(in[0], in[1]), probe); },
                 {x, g}, opt);
         }},
        {"add_batch_shared",
         [](Rng& rng, const GradCheckOptions& opt) {
             const auto n = pick(rng, 1, 6), d = pick(rng, 1, 6);
             auto x = uniform(rng, {pick(rng, 1, 3), n, d});
             auto t = uniform(rng, {n, d});
             auto probe = uniform(rng, x.shape());
             return grad_check(
                 [&](const std::vector<TensorD>& in) { return project(add_batch_shared(in[0], in[1]), probe); },
                 {x, t}, opt);
         }},
        {"reductions",
         [](Rng& rng, const GradCheckOptions& opt) {
             auto x = uniform(rng, {pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 1, 3)});
             return check_unary(rng, opt, x, [](const TensorD& v) {
                 auto s = sum_per_sample(v);
                 return concat<double>({mul(s, s), mean(mul(v, v)), sum(v)}, 0);
             });
         }},
        {"bce_with_logits",
         [](Rng& rng, const GradCheckOptions& opt) {
             Shape s{pick(rng, 1, 6), pick(rng, 1, 6)};
             auto z = uniform(rng, s, -4, 4);
             std::bernoulli_distribution coin(0.5);
             std::vector<double> t(static_cast<std::size_t>(shape_numel(s)));
             for (auto& v : t) v = coin(rng) ? 1.0 : 0.0;
             auto targets = TensorD::from_vector(s, t);
             return check_unary(rng, opt, z, [targets](const TensorD& v) { return bce_with_logits(v, targets); });
         }},
    };
    return table;
}

}  // namespace

std::vector<std::string> gradcheck_op_names()
{
    std::vector<std::string> names;
    for (const auto& [name, fn] : cases()) names.push_back(name);
    return names;
}

double gradcheck_op(const std::string& name, std::uint64_t seed, double eps)
{
    const auto it = cases().find(name);
    if (it == cases().end()) throw std::invalid_argument("unknown gradcheck case: " + name);
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + std::hash<std::string>{}(name));
    GradCheckOptions opt;
    opt.eps = eps;
    return it->second(rng, opt);
}

FUnetConfig gradcheck_funet_config(std::uint64_t seed)
{
    auto cfg = FUnetConfig::tiny();
    // odd seeds exercise the alternative gate wiring
    if (seed % 2 == 1) {
        cfg.ifa_fusion = IfaFusion::Concat;
        cfg.ifa_application = IfaApplication::Multiply;
        cfg.csa_application = CsaApplication::Residual;
        cfg.csa_per_channel = true;
    }
    return cfg;
}

GradCheckStats gradcheck_funet(std::uint64_t seed, double eps, int probes_per_tensor)
{
    Rng rng(seed ^ 0xF0E1D2C3B4A59687ULL);
    const auto cfg = gradcheck_funet_config(seed);
    FUnet<double> net(cfg, Variant::Full, seed);
    // move every parameter off its structured init (zero biases, unit gains)
    std::vector<TensorD> params;
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);
    for (auto [name, p] : net.params().items()) {
        for (auto& v : p.mutable_data()) v += jitter(rng);
        params.push_back(p);
    }
    const auto clip = uniform(rng, {1, cfg.frames, cfg.in_channels, cfg.input_h, cfg.input_w}, 0, 1);
    GradCheckOptions opt;
    opt.eps = eps;
    opt.max_probes_per_input = probes_per_tensor;
    opt.probe_seed = seed;
    return grad_check_stats([&](const std::vector<TensorD>&) { return mean(sigmoid(net.forward(clip))); }, params, opt);
}

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t base_seed, int seeds, double eps)
{
    std::vector<GradCheckResult> out;
    for (const auto& name : gradcheck_op_names()) {
        GradCheckResult r{name, 0, seeds};
        for (int i = 0; i < seeds; ++i) r.worst_error = std::max(r.worst_error, gradcheck_op(name, base_seed + i, eps));
        out.push_back(r);
    }
    GradCheckResult r{"funet_tiny", 0, seeds};
    for (int i = 0; i < seeds; ++i) {
        const auto s = gradcheck_funet(base_seed + i, eps);
        r.worst_error = std::max(r.worst_error, s.worst);
        r.probes += s.probes;
        r.kink_skips += s.kink_skips;
    }
    out.push_back(r);
    return out;
}

}  // namespace funet

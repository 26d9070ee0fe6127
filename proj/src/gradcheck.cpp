#include "funet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace funet {
namespace {

struct KinkLogScope {
    explicit KinkLogScope(detail::KinkLog* log) { detail::set_kink_log(log); }
    ~KinkLogScope() { detail::set_kink_log(nullptr); }
};

}  // namespace

double grad_check(const ScalarFn& f, std::vector<TensorD> inputs, const GradCheckOptions& opt)
{
    return grad_check_stats(f, std::move(inputs), opt).worst;
}

GradCheckStats grad_check_stats(const ScalarFn& f, std::vector<TensorD> inputs, const GradCheckOptions& opt)
{
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    std::vector<std::vector<double>> analytic;
    {
        TapeD tape;
        TapeScope scope(tape);
        const auto loss = f(inputs);
        if (loss.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
        backward(tape, loss);
    }
    for (auto& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        }
    }

    std::mt19937_64 rng(opt.probe_seed);
    GradCheckStats stats;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        std::vector<std::int64_t> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        const bool sampled = opt.max_probes_per_input > 0 && static_cast<std::int64_t>(order.size()) > opt.max_probes_per_input;
        if (sampled) std::shuffle(order.begin(), order.end(), rng);
        const std::int64_t want = sampled ? opt.max_probes_per_input : static_cast<std::int64_t>(order.size());
        std::int64_t taken = 0;
        // walk the shuffled order so a skipped probe is replaced by the next candidate
        for (std::size_t n = 0; n < order.size() && taken < want; ++n) {
            const auto i = order[n];
            const double saved = data[i];
            detail::KinkLog up_log, down_log;
            double up, down;
            {
                KinkLogScope scope(&up_log);
                data[i] = saved + opt.eps;
                up = f(inputs).item();
            }
            {
                KinkLogScope scope(&down_log);
                data[i] = saved - opt.eps;
                down = f(inputs).item();
            }
            data[i] = saved;
            if (opt.skip_kink_crossings && up_log.hash != down_log.hash) {
                ++stats.kink_skips;
                continue;
            }
            ++taken;
            const double numeric = (up - down) / (2 * opt.eps);
            const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
            stats.worst = std::max(stats.worst, err);
        }
        stats.probes += taken;
    }
    return stats;
}

}  // namespace funet

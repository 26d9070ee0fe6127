#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "funet/tensor.hpp"

namespace funet {

struct GradCheckOptions {
    double eps = 1e-5;
    /// Elements probed per input by finite differences; <= 0 probes all of them.
    std::int64_t max_probes_per_input = 0;
    std::uint64_t probe_seed = 0;
    /// Re-draw probes whose +eps and -eps evaluations take different relu branches: there the
    /// central difference measures a kink, not the derivative.
    bool skip_kink_crossings = true;
};

struct GradCheckStats {
    double worst = 0;
    std::int64_t probes = 0;
    std::int64_t kink_skips = 0;
};

using ScalarFn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Central-difference oracle. Runs `f` once on a tape for the analytic gradient, then perturbs
/// input elements in place (+/- eps) with no tape active. Returns the largest
/// |analytic - numeric| / max(1, |numeric|) over all probed elements.
/// Inputs are treated as leaves: their requires_grad flag is set and existing gradients cleared.
double grad_check(const ScalarFn& f, std::vector<TensorD> inputs, const GradCheckOptions& opt = {});
GradCheckStats grad_check_stats(const ScalarFn& f, std::vector<TensorD> inputs, const GradCheckOptions& opt = {});

}  // namespace funet

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "funet/gradcheck.hpp"
#include "funet/model.hpp"

namespace funet {

struct GradCheckResult {
    std::string name;
    double worst_error = 0;
    int seeds = 0;
    std::int64_t probes = 0;
    std::int64_t kink_skips = 0;  // probes re-drawn because they straddled a relu kink
};

/// Names of the per-op finite-difference cases (random shapes, extents <= 6).
std::vector<std::string> gradcheck_op_names();

/// Worst relative error of one op case at one seed (64-bit).
double gradcheck_op(const std::string& name, std::uint64_t seed, double eps = 1e-5);

/// End-to-end case: d mean(sigmoid(logits)) / d(every parameter tensor) of the tiny FUnet
/// (base 4, depth 2, grid 4, T = 3, 16x28 input), probing `probes_per_tensor` elements per tensor.
/// Tiny configuration checked at `seed`; odd seeds switch every gate option to its alternative.
FUnetConfig gradcheck_funet_config(std::uint64_t seed);
GradCheckStats gradcheck_funet(std::uint64_t seed, double eps = 1e-5, int probes_per_tensor = 2);

/// Every op case plus the end-to-end case over `seeds` consecutive seeds from `base_seed`.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t base_seed, int seeds, double eps = 1e-5);

}  // namespace funet

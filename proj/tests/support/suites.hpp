#pragma once
// Randomized property suites shared by the unit tests and the acceptance
// binary. Each returns raw measurements; callers decide pass/fail.

#include <cstdint>
#include <string>
#include <vector>

namespace lbq::oracle {

struct OpGradResult {
  std::string op;
  int trials = 0;
  double max_rel_error = 0.0;
};

/// Finite-difference check (h = 1e-3) of every differentiable op and of the
/// straight-through and soft-mask surrogate paths.
std::vector<OpGradResult> gradient_suite(int trials, std::uint64_t seed);

struct EmOracleResult {
  int cases = 0;
  double worst_ratio = 0.0;  // EM error / brute-force optimum (1 when both are 0)
};
EmOracleResult em_oracle_suite(int cases, std::uint64_t seed);

struct PackedSuiteResult {
  int instances = 0;
  double max_abs_error = 0.0;
  int roundtrips = 0;
  int roundtrip_failures = 0;
};
/// packed_matmul against an independently dequantized double reference on
/// random layers up to `max_dim` square, plus pack/unpack round trips.
PackedSuiteResult packed_suite(int instances, int roundtrips, std::size_t max_dim,
                               std::uint64_t seed);

struct LongTailResult {
  double mse_single_region = 0.0;  // c_alpha = c_beta = 1, one 4-bit region
  double mse_initial = 0.0;        // three regions, percentile knees, c = 1
  double mse_trained = 0.0;        // after training clips and knees
  double mse_clip_only = 0.0;      // single region, only clips trained
  double max_mask_sum_error = 0.0; // |p1 + p2 + p3 - 1| over the sample and all steps
  float k1 = 0, k2 = 0, c_alpha = 0, c_beta = 0;
};
/// 99% N(0,1) plus 1% outliers at +-50, `n` values, `steps` Adam steps.
LongTailResult act_longtail_experiment(std::size_t n, int steps, std::uint64_t seed);

}  // namespace lbq::oracle

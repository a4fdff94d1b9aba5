#pragma once
// Post-training initialization of W(1+1) layers.
//
// Every row chunk is fitted on its own: the four levels
// {o0, s0 + o0, o1, s1 + o1} are a free 4-level scalar codebook, so the fit
// is a weighted Lloyd clustering of the chunk's weights, with weights taken
// from a diagonal second-moment proxy of the layer-input Hessian.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "lbq/model.hpp"
#include "lbq/weight_quant.hpp"

namespace lbq {

struct HessianEstimate {
  std::vector<float> h;  // one entry per input feature, >= 0
  std::size_t sample_count = 0;
};

/// Streaming accumulator for h_i = (2/N) sum_t x_ti^2.
class HessianAccumulator {
 public:
  HessianAccumulator() = default;
  explicit HessianAccumulator(std::size_t features) : sum_(features, 0.0) {}
  void add(const Tensor& x);  // [tokens x features]
  HessianEstimate finish() const;
  std::size_t features() const { return sum_.size(); }

 private:
  std::vector<double> sum_;
  std::size_t tokens_ = 0;
};

HessianEstimate estimate_hessian_diag(std::span<const Tensor> inputs);

struct EmOptions {
  int max_iters = 50;
  int restarts = 4;
  std::uint64_t seed = 0;
  bool record_history = false;
};

struct EmFit {
  std::vector<std::uint8_t> group_bits;   // 1 = group 0
  std::vector<std::uint8_t> weight_bits;
  AffinePair g0, g1;
  std::array<float, 4> levels{};  // ascending
  double error = 0.0;             // sum h (w - w_hat)^2
  std::vector<double> history;    // error after each E-step of the winning restart
};

/// Weighted 4-level fit of one chunk. All-zero h falls back to uniform weights.
EmFit em_group_fit(std::span<const float> w, std::span<const float> h, const EmOptions& opt = {});

/// Sum h (w - nearest level)^2 for a fixed level set.
double weighted_error(std::span<const float> w, std::span<const float> h,
                      std::span<const float> levels);

enum class InitMethod { Em, Rtn };
/// How the relaxed surrogates start: exact bits, or fractional values that
/// threshold to the same bits (see ptq.cpp).
enum class RelaxedInit { Soft, Hard };

struct PtqOptions {
  std::size_t group_size = 128;
  InitMethod method = InitMethod::Em;
  RelaxedInit relaxed = RelaxedInit::Soft;
  EmOptions em;
};

std::uint64_t chunk_seed(std::uint64_t base, std::uint64_t layer, std::uint64_t row,
                         std::uint64_t chunk);

QuantLinear ptq_initialize_layer(const Tensor& weight, const HessianEstimate& hessian,
                                 const PtqOptions& opt, std::uint64_t layer_id = 0);
/// Min-max levels {min, max} per chunk, nearest-level bits, one group.
QuantLinear rtn_initialize_layer(const Tensor& weight, std::size_t group_size,
                                 RelaxedInit relaxed = RelaxedInit::Soft);

/// ||W - dequant(q)||_F / ||W||_F with hard bits.
double relative_frobenius_error(const Tensor& weight, const QuantLinear& q);

/// Per-layer, per-site Hessian estimates from the teacher on `calibration`.
std::vector<std::array<HessianEstimate, 4>> collect_hessians(
    const Model& teacher, std::span<const std::vector<int>> calibration);

/// Student with every linear slot replaced by an initialized QuantLinear.
Model ptq_initialize_model(const Model& teacher, std::span<const std::vector<int>> calibration,
                           const PtqOptions& opt);

}  // namespace lbq

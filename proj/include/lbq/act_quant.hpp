#pragma once
// Distribution-aware dynamic activation quantizer.
//
// Two trainable knees k1 < k2 split the real line into three regions
// (-inf, k1), [k1, k2), [k2, +inf). Each region j gets its own bit budget
// b_j and an affine grid recomputed from the current tensor on every call:
//
//   scale_j  = (c_alpha * max_j - c_beta * min_j) / (2^b_j - 1)
//   offset_j = -round(c_beta * min_j / scale_j)
//   x_hat    = (clamp(round(x / scale_j + offset_j), 0, 2^b_j - 1) - offset_j) * scale_j
//
// where max_j/min_j are taken over the (unclipped) members of region j.
// Forward partitioning is hard. For training, region masks carry the gradient
// of a difference-of-sigmoids soft membership with temperature
// tau = tau_scale * std(X).

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "lbq/tensor.hpp"

namespace lbq {

struct ActQuantParams {
  Tensor knee;      // k1 (scalar leaf)
  Tensor knee_gap;  // k2 = k1 + softplus(knee_gap)
  Tensor clip_max;  // c_alpha
  Tensor clip_min;  // c_beta
  std::array<int, 3> bits{2, 4, 2};
  int total_bits = 4;
  float tau_scale = 0.05f;

  float k1() const;
  float k2() const;
  float c_alpha() const { return clip_max.item(); }
  float c_beta() const { return clip_min.item(); }

  static ActQuantParams create(float k1, float k2, float c_alpha = 1.0f, float c_beta = 1.0f,
                               std::array<int, 3> bits = {2, 4, 2}, int total_bits = 4);
  /// Knees far outside any realistic activation range; every value falls in
  /// the middle region, which gets `bits` bits.
  static ActQuantParams single_region(int bits = 4);
  /// Knees at the 1st/99th percentiles of `sample`, clip factors 1.
  static ActQuantParams from_percentiles(std::span<const float> sample,
                                         std::array<int, 3> bits = {2, 4, 2},
                                         int total_bits = 4, float lo_pct = 0.01f,
                                         float hi_pct = 0.99f);

  std::vector<Tensor> clip_params() const { return {clip_max, clip_min}; }
  std::vector<Tensor> knee_params() const { return {knee, knee_gap}; }
  ActQuantParams clone() const;
  /// Throws ContractError when bit budgets or knees are invalid.
  void validate() const;
};

inline constexpr float kClipMin = 0.01f;
inline constexpr float kClipMax = 1.5f;
inline constexpr float kKneeGapMin = -10.0f;

/// Projections applied after optimizer steps.
void project_clip(std::span<float> values);
void project_knee_gap(std::span<float> values);

/// Grid of one region for one tensor.
struct RegionAffine {
  float scale = 0.0f;   // 0 means pass-through (empty or constant region)
  float offset = 0.0f;  // integer-valued zero point
  int bits = 4;
  std::size_t count = 0;
  float lo = 0.0f;  // min over members
  float hi = 0.0f;  // max over members
  std::size_t argmin = 0, argmax = 0;
  int levels() const { return (1 << bits) - 1; }
};

int region_of(float x, float k1, float k2);
std::array<RegionAffine, 3> dynamic_range(std::span<const float> x, const ActQuantParams& p);

/// Integer codes of a quantized tensor: region id and level per element.
struct ActCodes {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> region;
  std::vector<std::uint8_t> level;
  std::array<RegionAffine, 3> affine;
  std::vector<float> passthrough;  // values of elements in pass-through regions
};

ActCodes act_encode(const Tensor& x, const ActQuantParams& p);
std::vector<float> act_decode(const ActCodes& codes);

/// Hard fake-quantization, no gradient.
Tensor act_quantize_forward(const Tensor& x, const ActQuantParams& p);
/// Same forward values; gradients reach x, the clip factors and the knees.
Tensor act_quantize_train(const Tensor& x, const ActQuantParams& p);

float temperature(std::span<const float> x, const ActQuantParams& p);

struct SoftMembership {
  std::vector<double> p1, p2, p3;
};
SoftMembership soft_membership(std::span<const float> x, float k1, float k2, float tau);

/// Hard region-j indicator in the forward pass whose gradient is that of the
/// soft membership pi_j, i.e. sg[I - pi_j] + pi_j. Region index 0..2.
Tensor surrogate_indicator(const Tensor& x, int region, const ActQuantParams& p);

/// Forward takes the values of `value`; backward routes the upstream gradient
/// into `surrogate` unchanged.
Tensor straight_through(const Tensor& value, const Tensor& surrogate);

/// KV-cache round trip: the dequantized image of the entry's codes.
Tensor quantize_kv(const Tensor& entry, const ActQuantParams& p, bool train = false);

}  // namespace lbq

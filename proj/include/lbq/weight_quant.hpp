#pragma once
// W(1+1) weights: one binary weight bit and one group-bitmap bit per element.
// Each row is cut into chunks of `group_size` columns; every chunk carries two
// affine pairs (scale, offset), one per group, so a chunk holds four levels:
//
//   W_q = G * (scale0 * W_b + offset0) + (1 - G) * (scale1 * W_b + offset1)
//
// During training W_b and G are the 0.5-thresholded images of the relaxed
// surrogates `weight` and `group`; the backward pass treats the threshold as
// identity. The last chunk of a row may be short (columns past `cols` are
// treated as zero-weight padding).

#include <cstddef>
#include <span>
#include <vector>

#include "lbq/tensor.hpp"

namespace lbq {

struct AffinePair {
  float scale = 0.0f;
  float offset = 0.0f;
};

/// Min-max fit: scale = max - min, offset = min, so the levels are {min, max}.
AffinePair init_affine_minmax(std::span<const float> chunk);

struct QuantLinear {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = 128;
  Tensor weight;  // relaxed W_FP, rows x cols
  Tensor group;   // relaxed G_FP in [0,1], rows x cols
  Tensor scale0, offset0, scale1, offset1;  // rows x chunks
  bool frozen = false;

  std::size_t chunks() const { return (cols + group_size - 1) / group_size; }
  std::size_t chunk_of(std::size_t col) const { return col / group_size; }

  /// Trainable leaves for the given flags.
  std::vector<Tensor> affine_params() const { return {scale0, offset0, scale1, offset1}; }

  /// Builds a layer with every tensor a trainable leaf.
  static QuantLinear create(std::size_t rows, std::size_t cols, std::size_t group_size,
                            std::vector<float> weight, std::vector<float> group,
                            std::vector<float> scale0, std::vector<float> offset0,
                            std::vector<float> scale1, std::vector<float> offset1);

  QuantLinear clone() const;
};

enum class DequantMode {
  Hard,  // thresholded bits, gradients reach the affine pairs only
  Ste,   // thresholded bits forward, straight-through to weight and group
};

Tensor dequantize_grouped(const QuantLinear& q, DequantMode mode);

/// sum((1 - |2g - 1|^beta)^2); beta must lie in [kBetaMin, 1].
Tensor reg_loss(const Tensor& group, float beta);
inline constexpr float kBetaMin = 0.01f;

/// 1 where x >= 0.5, else 0. Constant (no gradient).
Tensor clamp_binarize(const Tensor& x);

/// Replaces the relaxed surrogates by their hard bits and marks the layer
/// frozen. Throws ContractError if already frozen.
void freeze(QuantLinear& q);

/// Share of entries with |2g - 1| > margin.
double polarization_fraction(std::span<const float> group, double margin = 0.99);

/// Projects values into [0,1] in place.
void project_unit_interval(std::span<float> values);

}  // namespace lbq

#include "lbq/weight_quant.hpp"

#include <algorithm>
#include <cmath>

namespace lbq {

AffinePair init_affine_minmax(std::span<const float> chunk) {
  if (chunk.empty()) throw ContractError("init_affine_minmax on an empty chunk");
  const auto [lo, hi] = std::minmax_element(chunk.begin(), chunk.end());
  if (!std::isfinite(*lo) || !std::isfinite(*hi))
    throw NumericError("init_affine_minmax: non-finite weight");
  return {*hi - *lo, *lo};
}

QuantLinear QuantLinear::create(std::size_t rows, std::size_t cols, std::size_t group_size,
                                std::vector<float> weight, std::vector<float> group,
                                std::vector<float> scale0, std::vector<float> offset0,
                                std::vector<float> scale1, std::vector<float> offset1) {
  if (group_size == 0) throw ContractError("group_size must be positive");
  QuantLinear q;
  q.rows = rows;
  q.cols = cols;
  q.group_size = group_size;
  const std::size_t ch = q.chunks();
  q.weight = Tensor::param({rows, cols}, std::move(weight));
  q.group = Tensor::param({rows, cols}, std::move(group));
  q.scale0 = Tensor::param({rows, ch}, std::move(scale0));
  q.offset0 = Tensor::param({rows, ch}, std::move(offset0));
  q.scale1 = Tensor::param({rows, ch}, std::move(scale1));
  q.offset1 = Tensor::param({rows, ch}, std::move(offset1));
  return q;
}

QuantLinear QuantLinear::clone() const {
  QuantLinear q = *this;
  q.weight = weight.clone();
  q.group = group.clone();
  q.scale0 = scale0.clone();
  q.offset0 = offset0.clone();
  q.scale1 = scale1.clone();
  q.offset1 = offset1.clone();
  return q;
}

Tensor dequantize_grouped(const QuantLinear& q, DequantMode mode) {
  if (q.frozen && mode == DequantMode::Ste)
    throw ContractError("straight-through dequantization of a frozen layer");
  const std::size_t rows = q.rows, cols = q.cols, ch = q.chunks(), gs = q.group_size;
  auto w = q.weight.data();
  auto g = q.group.data();
  auto a0 = q.scale0.data(), m0 = q.offset0.data(), a1 = q.scale1.data(), m1 = q.offset1.data();
  std::vector<float> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c, p = r * ch + c / gs;
      const float wb = w[i] >= 0.5f ? 1.0f : 0.0f;
      out[i] = g[i] >= 0.5f ? a0[p] * wb + m0[p] : a1[p] * wb + m1[p];
    }
  }
  std::vector<Tensor> inputs{q.scale0, q.offset0, q.scale1, q.offset1, q.weight, q.group};
  const bool ste = mode == DequantMode::Ste;
  return make_op(
      ste ? "dequantize_ste" : "dequantize_hard", {rows, cols}, std::move(out), inputs,
      [rows, cols, ch, gs, ste](detail::Node& self) {
        auto& s0 = *self.inputs[0];
        auto& o0 = *self.inputs[1];
        auto& s1 = *self.inputs[2];
        auto& o1 = *self.inputs[3];
        auto& wn = *self.inputs[4];
        auto& gn = *self.inputs[5];
        const bool affine = s0.requires_grad || o0.requires_grad || s1.requires_grad ||
                            o1.requires_grad;
        std::span<float> gs0, go0, gs1, go1, gw, gg;
        if (affine) {
          gs0 = s0.grad_buffer();
          go0 = o0.grad_buffer();
          gs1 = s1.grad_buffer();
          go1 = o1.grad_buffer();
        }
        const bool to_w = ste && wn.requires_grad;
        const bool to_g = ste && gn.requires_grad;
        if (to_w) gw = wn.grad_buffer();
        if (to_g) gg = gn.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c, p = r * ch + c / gs;
            const float up = self.grad[i];
            const float wb = wn.data[i] >= 0.5f ? 1.0f : 0.0f;
            const float gb = gn.data[i] >= 0.5f ? 1.0f : 0.0f;
            if (affine) {
              gs0[p] += up * gb * wb;
              go0[p] += up * gb;
              gs1[p] += up * (1.0f - gb) * wb;
              go1[p] += up * (1.0f - gb);
            }
            if (to_w) gw[i] += up * (gb * s0.data[p] + (1.0f - gb) * s1.data[p]);
            if (to_g)
              gg[i] += up * ((s0.data[p] * wb + o0.data[p]) - (s1.data[p] * wb + o1.data[p]));
          }
        }
      });
}

Tensor reg_loss(const Tensor& group, float beta) {
  if (!(beta >= kBetaMin && beta <= 1.0f))
    throw ContractError("reg_loss: beta " + std::to_string(beta) + " outside [0.01, 1]");
  auto g = group.data();
  double total = 0.0;
  for (float v : g) {
    const double t = std::fabs(2.0 * v - 1.0);
    const double d = 1.0 - std::pow(t, double(beta));
    total += d * d;
  }
  return make_op("reg_loss", {}, {static_cast<float>(total)}, {group},
                 [beta](detail::Node& self) {
                   auto& in = *self.inputs[0];
                   auto gi = in.grad_buffer();
                   const double up = self.grad[0];
                   for (std::size_t i = 0; i < gi.size(); ++i) {
                     const double t = 2.0 * in.data[i] - 1.0;
                     const double a = std::fabs(t);
                     if (a == 0.0) continue;  // subgradient 0 at g = 0.5
                     const double p = std::pow(a, double(beta));
                     const double sign = t > 0.0 ? 1.0 : -1.0;
                     const double d = 2.0 * (1.0 - p) * (-beta * p / a) * sign * 2.0;
                     gi[i] += static_cast<float>(up * d);
                   }
                 });
}

Tensor clamp_binarize(const Tensor& x) { return greater_equal(x, 0.5f); }

void freeze(QuantLinear& q) {
  if (q.frozen) throw ContractError("freeze() on an already frozen layer");
  q.weight = clamp_binarize(q.weight);
  q.group = clamp_binarize(q.group);
  q.frozen = true;
}

double polarization_fraction(std::span<const float> group, double margin) {
  if (group.empty()) return 1.0;
  std::size_t hit = 0;
  for (float v : group)
    if (std::fabs(2.0 * v - 1.0) > margin) ++hit;
  return double(hit) / double(group.size());
}

void project_unit_interval(std::span<float> values) {
  for (auto& v : values) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace lbq

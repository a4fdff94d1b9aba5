#include "lbq/act_quant.hpp"

#include <algorithm>
#include <cmath>

namespace lbq {

namespace {

double softplus_d(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_d(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double inverse_softplus(double y) { return y > 20.0 ? y : std::log(std::expm1(y)); }

float percentile(std::vector<float> v, float q) {
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - double(lo);
  return static_cast<float>(v[lo] * (1.0 - frac) + v[hi] * frac);
}

// Fake-quantizes one value on a region grid.
float quantize_value(float x, const RegionAffine& a) {
  if (a.scale == 0.0f) return x;
  const float q = std::clamp(std::round(x / a.scale + a.offset), 0.0f, float(a.levels()));
  return (q - a.offset) * a.scale;
}

}  // namespace

float ActQuantParams::k1() const { return knee.item(); }

float ActQuantParams::k2() const {
  return static_cast<float>(double(knee.item()) + softplus_d(knee_gap.item()));
}

ActQuantParams ActQuantParams::create(float k1, float k2, float c_alpha, float c_beta,
                                      std::array<int, 3> bits, int total_bits) {
  if (!(k2 > k1)) throw ContractError("knees must satisfy k1 < k2");
  ActQuantParams p;
  p.knee = Tensor::param({}, k1);
  p.knee_gap = Tensor::param({}, static_cast<float>(inverse_softplus(double(k2) - double(k1))));
  p.clip_max = Tensor::param({}, c_alpha);
  p.clip_min = Tensor::param({}, c_beta);
  p.bits = bits;
  p.total_bits = total_bits;
  p.validate();
  return p;
}

ActQuantParams ActQuantParams::single_region(int bits) {
  return create(-1e6f, 1e6f, 1.0f, 1.0f, {2, bits, 2}, bits);
}

ActQuantParams ActQuantParams::from_percentiles(std::span<const float> sample,
                                                std::array<int, 3> bits, int total_bits,
                                                float lo_pct, float hi_pct) {
  if (sample.empty()) throw ContractError("knee initialization needs a non-empty sample");
  std::vector<float> v(sample.begin(), sample.end());
  float k1 = percentile(v, lo_pct);
  float k2 = percentile(v, hi_pct);
  if (!(k2 - k1 > 1e-4f)) k2 = k1 + 1e-3f;
  return create(k1, k2, 1.0f, 1.0f, bits, total_bits);
}

ActQuantParams ActQuantParams::clone() const {
  ActQuantParams p = *this;
  p.knee = knee.clone();
  p.knee_gap = knee_gap.clone();
  p.clip_max = clip_max.clone();
  p.clip_min = clip_min.clone();
  return p;
}

void ActQuantParams::validate() const {
  long codes = 0;
  for (int b : bits) {
    if (b < 1 || b > 8) throw ContractError("region bit budget must be in [1, 8]");
    codes += 1L << b;
  }
  if (total_bits < 1 || total_bits > 8) throw ContractError("total_bits must be in [1, 8]");
  if (codes > (1L << (total_bits + 1)))
    throw ContractError("region code count exceeds 2^(total_bits + 1)");
  if (!(k2() > k1())) throw ContractError("knees must satisfy k1 < k2");
  if (!(tau_scale > 0.0f)) throw ContractError("temperature scale must be positive");
}

void project_clip(std::span<float> values) {
  for (auto& v : values) v = std::clamp(v, kClipMin, kClipMax);
}

void project_knee_gap(std::span<float> values) {
  for (auto& v : values) v = std::max(v, kKneeGapMin);
}

int region_of(float x, float k1, float k2) { return x < k1 ? 0 : (x < k2 ? 1 : 2); }

std::array<RegionAffine, 3> dynamic_range(std::span<const float> x, const ActQuantParams& p) {
  if (x.empty()) throw ContractError("dynamic_range of an empty tensor");
  const float k1 = p.k1(), k2 = p.k2();
  const float ca = p.c_alpha(), cb = p.c_beta();
  std::array<RegionAffine, 3> out;
  for (int j = 0; j < 3; ++j) out[j].bits = p.bits[j];
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw NumericError("activation quantizer received a non-finite value");
    auto& a = out[region_of(x[i], k1, k2)];
    if (a.count == 0 || x[i] < a.lo) a.lo = x[i], a.argmin = i;
    if (a.count == 0 || x[i] > a.hi) a.hi = x[i], a.argmax = i;
    ++a.count;
  }
  for (auto& a : out) {
    if (a.count == 0 || a.hi == a.lo) continue;  // pass-through
    float scale = (ca * a.hi - cb * a.lo) / float(a.levels());
    const float floor = 1e-8f * (std::fabs(a.hi) + std::fabs(a.lo));
    a.scale = std::max(scale, floor);
    a.offset = -std::round(cb * a.lo / a.scale);
  }
  return out;
}

ActCodes act_encode(const Tensor& x, const ActQuantParams& p) {
  auto xd = x.data();
  ActCodes c;
  c.rows = x.rank() >= 2 ? x.size() / x.shape().back() : 1;
  c.cols = x.rank() >= 1 ? x.shape().back() : 1;
  c.affine = dynamic_range(xd, p);
  c.region.resize(xd.size());
  c.level.resize(xd.size());
  const float k1 = p.k1(), k2 = p.k2();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const int r = region_of(xd[i], k1, k2);
    const auto& a = c.affine[r];
    c.region[i] = static_cast<std::uint8_t>(r);
    if (a.scale == 0.0f) {
      if (c.passthrough.empty()) c.passthrough.assign(xd.size(), 0.0f);
      c.passthrough[i] = xd[i];
      c.level[i] = 0;
    } else {
      c.level[i] = static_cast<std::uint8_t>(
          std::clamp(std::round(xd[i] / a.scale + a.offset), 0.0f, float(a.levels())));
    }
  }
  return c;
}

std::vector<float> act_decode(const ActCodes& c) {
  std::vector<float> out(c.region.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& a = c.affine[c.region[i]];
    out[i] = a.scale == 0.0f ? c.passthrough[i] : (float(c.level[i]) - a.offset) * a.scale;
  }
  return out;
}

Tensor act_quantize_forward(const Tensor& x, const ActQuantParams& p) {
  return make_op("act_quantize", x.shape(), act_decode(act_encode(x, p)), {}, {});
}

float temperature(std::span<const float> x, const ActQuantParams& p) {
  double s = 0.0, s2 = 0.0;
  for (float v : x) s += v, s2 += double(v) * v;
  const double n = double(x.size());
  const double var = std::max(0.0, s2 / n - (s / n) * (s / n));
  return std::max(static_cast<float>(p.tau_scale * std::sqrt(var)), 1e-6f);
}

SoftMembership soft_membership(std::span<const float> x, float k1, float k2, float tau) {
  if (!(tau > 0.0f)) throw ContractError("soft membership needs tau > 0");
  SoftMembership m;
  m.p1.resize(x.size());
  m.p2.resize(x.size());
  m.p3.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double sa = sigmoid_d((double(x[i]) - k1) / tau);
    const double sb = sigmoid_d((double(x[i]) - k2) / tau);
    m.p1[i] = 1.0 - sa;
    m.p2[i] = sa - sb;
    m.p3[i] = sb;
  }
  return m;
}

Tensor straight_through(const Tensor& value, const Tensor& surrogate) {
  if (value.shape() != surrogate.shape())
    throw DimensionError("straight_through: value and surrogate shapes differ");
  auto v = value.data();
  return make_op("straight_through", value.shape(), std::vector<float>(v.begin(), v.end()),
                 {surrogate}, [](detail::Node& self) {
                   auto gi = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
                 });
}

Tensor surrogate_indicator(const Tensor& x, int region, const ActQuantParams& p) {
  if (region < 0 || region > 2) throw ContractError("region index must be 0, 1 or 2");
  const float tau = temperature(x.data(), p);
  const Tensor k1 = p.knee;
  const Tensor k2 = add(p.knee, softplus(p.knee_gap));
  Tensor soft;
  const Tensor sa = sigmoid(mul(sub(x, k1), 1.0f / tau));
  const Tensor sb = sigmoid(mul(sub(x, k2), 1.0f / tau));
  if (region == 0) soft = add(neg(sa), 1.0f);
  if (region == 1) soft = sub(sa, sb);
  if (region == 2) soft = sb;
  auto xd = x.data();
  const float kk1 = p.k1(), kk2 = p.k2();
  std::vector<float> hard(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) hard[i] = region_of(xd[i], kk1, kk2) == region;
  return straight_through(Tensor::from(x.shape(), std::move(hard)), soft);
}

Tensor act_quantize_train(const Tensor& x, const ActQuantParams& p) {
  ActCodes codes = act_encode(x, p);
  std::vector<float> out = act_decode(codes);
  const float tau = temperature(x.data(), p);
  const float k1 = p.k1(), k2 = p.k2();
  const float ca = p.c_alpha(), cb = p.c_beta();
  const float gap = p.knee_gap.item();
  std::vector<Tensor> inputs{x, p.knee, p.knee_gap, p.clip_max, p.clip_min};
  return make_op(
      "act_quantize_train", x.shape(), std::move(out), inputs,
      [codes = std::move(codes), tau, k1, k2, ca, cb, gap](detail::Node& self) {
        auto& xn = *self.inputs[0];
        const auto& xd = xn.data;
        const std::size_t n = xd.size();
        // Partial d/d scale_j. The error is continuous across rounding
        // midpoints, so its derivative in the scale holds the codes (and the
        // rounded zero point) fixed: d x_hat / d scale = q - offset.
        std::array<double, 3> ga{};
        double g_k1 = 0.0, g_k2 = 0.0;
        std::vector<double> gx(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const double up = self.grad[i];
          if (up == 0.0) continue;
          const float xv = xd[i];
          std::array<double, 3> q{};
          for (int j = 0; j < 3; ++j) q[j] = quantize_value(xv, codes.affine[j]);
          const int r = codes.region[i];
          const auto& a = codes.affine[r];
          // Straight-through in x inside the grid, zero once clipped.
          if (a.scale == 0.0f) {
            gx[i] += up;
          } else {
            const double u = std::round(double(xv) / a.scale + a.offset);
            if (u >= 0.0 && u <= a.levels()) gx[i] += up;
            ga[r] += up * (std::clamp(u, 0.0, double(a.levels())) - a.offset);
          }
          // Soft-membership path through the knees.
          const double sa = sigmoid_d((double(xv) - k1) / tau);
          const double sb = sigmoid_d((double(xv) - k2) / tau);
          const double da = sa * (1.0 - sa) / tau;
          const double db = sb * (1.0 - sb) / tau;
          gx[i] += up * ((q[1] - q[0]) * da + (q[2] - q[1]) * db);
          g_k1 += up * (q[1] - q[0]) * (-da);
          g_k2 += up * (q[2] - q[1]) * (-db);
        }
        double g_ca = 0.0, g_cb = 0.0;
        for (int j = 0; j < 3; ++j) {
          const auto& a = codes.affine[j];
          if (a.scale == 0.0f || a.count == 0) continue;
          const double L = a.levels();
          const double d_scale = ga[j];
          g_ca += d_scale * a.hi / L;
          g_cb += d_scale * (-a.lo / L);
          gx[a.argmax] += d_scale * ca / L;
          gx[a.argmin] += d_scale * (-cb / L);
        }
        if (xn.requires_grad) {
          auto g = xn.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<float>(gx[i]);
        }
        auto& kn = *self.inputs[1];
        auto& gn = *self.inputs[2];
        auto& can = *self.inputs[3];
        auto& cbn = *self.inputs[4];
        if (kn.requires_grad) kn.grad_buffer()[0] += static_cast<float>(g_k1 + g_k2);
        if (gn.requires_grad) gn.grad_buffer()[0] += static_cast<float>(g_k2 * sigmoid_d(gap));
        if (can.requires_grad) can.grad_buffer()[0] += static_cast<float>(g_ca);
        if (cbn.requires_grad) cbn.grad_buffer()[0] += static_cast<float>(g_cb);
      });
}

Tensor quantize_kv(const Tensor& entry, const ActQuantParams& p, bool train) {
  return train ? act_quantize_train(entry, p) : act_quantize_forward(entry, p);
}

}  // namespace lbq

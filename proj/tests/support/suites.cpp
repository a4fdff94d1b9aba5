#include "suites.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "lbq/act_quant.hpp"
#include "lbq/distill.hpp"
#include "lbq/optim.hpp"
#include "lbq/packed.hpp"
#include "lbq/ptq.hpp"
#include "lbq/weight_quant.hpp"
#include "oracles.hpp"

namespace lbq::oracle {

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

float uniform(Rng& rng, float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); }

std::vector<float> normals(Rng& rng, std::size_t n, float sd = 1.0f) {
  std::normal_distribution<float> nd(0.0f, sd);
  std::vector<float> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

// Values whose magnitude stays in [lo, hi], random sign.
std::vector<float> away_from_zero(Rng& rng, std::size_t n, float lo, float hi) {
  std::vector<float> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi) * (rng() & 1 ? 1.0f : -1.0f);
  return v;
}

std::vector<float> in_range(Rng& rng, std::size_t n, float lo, float hi) {
  std::vector<float> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return v;
}

Tensor param(Shape s, std::vector<float> v) { return Tensor::param(std::move(s), std::move(v)); }

// One differentiable case: builds leaves and the function under test.
struct Case {
  std::vector<Tensor> leaves;
  TensorFn f;
  TensorFn numeric;  // empty: same as f
};

using CaseMaker = std::function<Case(Rng&)>;

struct OpSpec {
  const char* name;
  CaseMaker make;
};

Case unary(Rng& rng, std::function<Tensor(const Tensor&)> op, std::function<std::vector<float>(Rng&, std::size_t)> gen) {
  const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
  Case k;
  k.leaves = {param({r, c}, gen(rng, r * c))};
  k.f = [op](const std::vector<Tensor>& l) { return op(l[0]); };
  return k;
}

Case binary(Rng& rng, std::function<Tensor(const Tensor&, const Tensor&)> op,
            std::function<std::vector<float>(Rng&, std::size_t)> gen_b) {
  const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
  Case k;
  k.leaves = {param({r, c}, normals(rng, r * c)), param({r, c}, gen_b(rng, r * c))};
  k.f = [op](const std::vector<Tensor>& l) { return op(l[0], l[1]); };
  return k;
}

auto gauss = [](Rng& rng, std::size_t n) { return normals(rng, n); };

// Linearization of the straight-through dequantization around the current
// relaxed point (w0, g0) with the hard bits held fixed. Its exact derivative
// at that point is the pass-through gradient.
Tensor passthrough_dequant(const QuantLinear& q, const std::vector<float>& w0, const std::vector<float>& g0,
                           const std::vector<float>& wb, const std::vector<float>& gb) {
  const std::size_t rows = q.rows, cols = q.cols;
  auto expand = [&](const Tensor& p) { return repeat_cols(p, q.group_size, cols); };
  const Tensor a0 = expand(q.scale0), m0 = expand(q.offset0), a1 = expand(q.scale1), m1 = expand(q.offset1);
  const Tensor Wh = Tensor::from({rows, cols}, wb), Gh = Tensor::from({rows, cols}, gb);
  const Tensor Gc = add(neg(Gh), 1.0f);
  const Tensor level0 = add(mul(a0, Wh), m0), level1 = add(mul(a1, Wh), m1);
  const Tensor hard = add(mul(Gh, level0), mul(Gc, level1));
  const Tensor dw = sub(q.weight, Tensor::from({rows, cols}, w0));
  const Tensor dg = sub(q.group, Tensor::from({rows, cols}, g0));
  return add(hard, add(mul(add(mul(Gh, a0), mul(Gc, a1)), dw), mul(sub(level0, level1), dg)));
}

std::vector<OpSpec> op_specs() {
  std::vector<OpSpec> s;
  s.push_back({"add", [](Rng& r) { return binary(r, [](auto& a, auto& b) { return add(a, b); }, gauss); }});
  s.push_back({"sub", [](Rng& r) { return binary(r, [](auto& a, auto& b) { return sub(a, b); }, gauss); }});
  s.push_back({"mul", [](Rng& r) { return binary(r, [](auto& a, auto& b) { return mul(a, b); }, gauss); }});
  s.push_back({"div", [](Rng& r) {
                 return binary(r, [](auto& a, auto& b) { return div(a, b); },
                               [](Rng& g, std::size_t n) { return away_from_zero(g, n, 0.5f, 2.0f); });
               }});
  s.push_back({"add_row_vector", [](Rng& rng) {
                 const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
                 Case k;
                 k.leaves = {param({r, c}, normals(rng, r * c)), param({c}, normals(rng, c))};
                 k.f = [](const std::vector<Tensor>& l) { return add(l[0], l[1]); };
                 return k;
               }});
  s.push_back({"mul_scalar_tensor", [](Rng& rng) {
                 const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
                 Case k;
                 k.leaves = {param({r, c}, normals(rng, r * c)), param({}, normals(rng, 1))};
                 k.f = [](const std::vector<Tensor>& l) { return mul(l[0], l[1]); };
                 return k;
               }});
  s.push_back({"add_float", [](Rng& r) { return unary(r, [](auto& a) { return add(a, 0.7f); }, gauss); }});
  s.push_back({"mul_float", [](Rng& r) { return unary(r, [](auto& a) { return mul(a, -1.3f); }, gauss); }});
  s.push_back({"neg", [](Rng& r) { return unary(r, [](auto& a) { return neg(a); }, gauss); }});
  s.push_back({"abs", [](Rng& r) {
                 return unary(r, [](auto& a) { return abs(a); },
                              [](Rng& g, std::size_t n) { return away_from_zero(g, n, 0.05f, 2.0f); });
               }});
  s.push_back({"pow", [](Rng& rng) {
                 const float e = uniform(rng, 0.5f, 3.0f);
                 return unary(rng, [e](auto& a) { return pow(a, e); },
                              [](Rng& g, std::size_t n) { return in_range(g, n, 0.5f, 2.0f); });
               }});
  s.push_back({"pow_integer_negative_base", [](Rng& r) {
                 return unary(r, [](auto& a) { return pow(a, 3.0f); },
                              [](Rng& g, std::size_t n) { return in_range(g, n, -2.0f, -0.2f); });
               }});
  s.push_back({"exp", [](Rng& r) {
                 return unary(r, [](auto& a) { return exp(a); },
                              [](Rng& g, std::size_t n) { return in_range(g, n, -2.0f, 2.0f); });
               }});
  s.push_back({"log", [](Rng& r) {
                 return unary(r, [](auto& a) { return log(a); },
                              [](Rng& g, std::size_t n) { return in_range(g, n, 0.5f, 3.0f); });
               }});
  s.push_back({"sqrt", [](Rng& r) {
                 return unary(r, [](auto& a) { return sqrt(a); },
                              [](Rng& g, std::size_t n) { return in_range(g, n, 0.5f, 3.0f); });
               }});
  s.push_back({"sigmoid", [](Rng& r) { return unary(r, [](auto& a) { return sigmoid(a); }, gauss); }});
  s.push_back({"softplus", [](Rng& r) { return unary(r, [](auto& a) { return softplus(a); }, gauss); }});
  s.push_back({"silu", [](Rng& r) { return unary(r, [](auto& a) { return silu(a); }, gauss); }});
  s.push_back({"clamp", [](Rng& r) {
                 // Keep every value at least 0.05 away from both bounds.
                 return unary(r, [](auto& a) { return clamp(a, -0.5f, 0.5f); }, [](Rng& g, std::size_t n) {
                   std::vector<float> v(n);
                   for (auto& x : v) {
                     do x = uniform(g, -1.5f, 1.5f);
                     while (std::fabs(std::fabs(x) - 0.5f) < 0.05f);
                   }
                   return v;
                 });
               }});
  s.push_back({"sum", [](Rng& r) { return unary(r, [](auto& a) { return sum(a); }, gauss); }});
  s.push_back({"mean", [](Rng& r) { return unary(r, [](auto& a) { return mean(a); }, gauss); }});
  s.push_back({"reshape", [](Rng& r) {
                 return unary(r, [](auto& a) { return reshape(a, {a.size()}); }, gauss);
               }});
  s.push_back({"transpose", [](Rng& r) { return unary(r, [](auto& a) { return transpose(a); }, gauss); }});
  s.push_back({"slice", [](Rng& rng) {
                 const std::size_t r = pick(rng, 2, 4), c = pick(rng, 2, 5);
                 const std::size_t axis = pick(rng, 0, 1), n = axis == 0 ? r : c;
                 const std::size_t b = pick(rng, 0, n - 1), e = pick(rng, b + 1, n);
                 Case k;
                 k.leaves = {param({r, c}, normals(rng, r * c))};
                 k.f = [axis, b, e](const std::vector<Tensor>& l) { return slice(l[0], axis, b, e); };
                 return k;
               }});
  s.push_back({"concat", [](Rng& rng) {
                 const std::size_t r = pick(rng, 1, 3), c1 = pick(rng, 1, 4), c2 = pick(rng, 1, 4);
                 Case k;
                 k.leaves = {param({r, c1}, normals(rng, r * c1)), param({r, c2}, normals(rng, r * c2))};
                 k.f = [](const std::vector<Tensor>& l) { return concat({l[0], l[1]}, 1); };
                 return k;
               }});
  s.push_back({"repeat_cols", [](Rng& rng) {
                 const std::size_t r = pick(rng, 1, 3), c = pick(rng, 1, 4), t = pick(rng, 1, 3);
                 const std::size_t cols = (c - 1) * t + pick(rng, 1, t);
                 Case k;
                 k.leaves = {param({r, c}, normals(rng, r * c))};
                 k.f = [t, cols](const std::vector<Tensor>& l) { return repeat_cols(l[0], t, cols); };
                 return k;
               }});
  s.push_back({"matmul", [](Rng& rng) {
                 const std::size_t m = pick(rng, 1, 5), kk = pick(rng, 1, 7), n = pick(rng, 1, 4);
                 Case k;
                 k.leaves = {param({m, kk}, normals(rng, m * kk)), param({kk, n}, normals(rng, kk * n))};
                 k.f = [](const std::vector<Tensor>& l) { return matmul(l[0], l[1]); };
                 return k;
               }});
  s.push_back({"matmul_nt", [](Rng& rng) {
                 const std::size_t m = pick(rng, 1, 5), kk = pick(rng, 1, 7), n = pick(rng, 1, 4);
                 Case k;
                 k.leaves = {param({m, kk}, normals(rng, m * kk)), param({n, kk}, normals(rng, n * kk))};
                 k.f = [](const std::vector<Tensor>& l) { return matmul_nt(l[0], l[1]); };
                 return k;
               }});
  s.push_back({"softmax_last", [](Rng& r) { return unary(r, [](auto& a) { return softmax_last(a); }, gauss); }});
  s.push_back({"causal_softmax", [](Rng& rng) {
                 const std::size_t q = pick(rng, 1, 4), off = pick(rng, 0, 2);
                 Case k;
                 k.leaves = {param({q, q + off}, normals(rng, q * (q + off)))};
                 k.f = [off](const std::vector<Tensor>& l) { return causal_softmax(l[0], off); };
                 return k;
               }});
  s.push_back({"rms_norm", [](Rng& rng) {
                 const std::size_t r = pick(rng, 1, 4), c = pick(rng, 2, 6);
                 Case k;
                 k.leaves = {param({r, c}, normals(rng, r * c)), param({c}, normals(rng, c))};
                 k.f = [](const std::vector<Tensor>& l) { return rms_norm(l[0], l[1], 1e-5f); };
                 return k;
               }});
  s.push_back({"gather_rows", [](Rng& rng) {
                 const std::size_t v = pick(rng, 2, 6), d = pick(rng, 1, 4), n = pick(rng, 1, 5);
                 std::vector<int> ids(n);
                 for (auto& i : ids) i = int(pick(rng, 0, v - 1));
                 Case k;
                 k.leaves = {param({v, d}, normals(rng, v * d))};
                 k.f = [ids](const std::vector<Tensor>& l) { return gather_rows(l[0], ids); };
                 return k;
               }});
  s.push_back({"cross_entropy", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 4), v = pick(rng, 2, 6);
                 std::vector<int> t(n);
                 for (auto& i : t) i = int(pick(rng, 0, v - 1));
                 Case k;
                 k.leaves = {param({n, v}, normals(rng, n * v))};
                 k.f = [t](const std::vector<Tensor>& l) { return cross_entropy(l[0], t); };
                 return k;
               }});
  s.push_back({"reconstruction_loss", [](Rng& rng) {
                 const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
                 const Tensor teacher = Tensor::from({r, c}, normals(rng, r * c));
                 Case k;
                 k.leaves = {param({r, c}, normals(rng, r * c))};
                 k.f = [teacher](const std::vector<Tensor>& l) { return reconstruction_loss(teacher, l[0]); };
                 return k;
               }});
  s.push_back({"reg_loss", [](Rng& rng) {
                 const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
                 const float beta = uniform(rng, kBetaMin, 1.0f);
                 std::vector<float> g(r * c);
                 for (auto& x : g) x = rng() & 1 ? uniform(rng, 0.05f, 0.45f) : uniform(rng, 0.55f, 0.95f);
                 Case k;
                 k.leaves = {param({r, c}, g)};
                 k.f = [beta](const std::vector<Tensor>& l) { return reg_loss(l[0], beta); };
                 return k;
               }});
  // Surrogate paths: the analytic gradient of the op is checked against the
  // exact derivative of the smooth function it stands in for.
  s.push_back({"ste_round", [](Rng& rng) {
                 Case k = unary(rng, [](auto& a) { return ste_round(a); },
                                [](Rng& g, std::size_t n) { return in_range(g, n, -5.0f, 5.0f); });
                 k.numeric = [](const std::vector<Tensor>& l) { return l[0]; };
                 return k;
               }});
  s.push_back({"stop_gradient", [](Rng& rng) {
                 Case k = unary(rng, [](auto& a) { return add(stop_gradient(mul(a, a)), mul(a, 3.0f)); }, gauss);
                 k.numeric = [](const std::vector<Tensor>& l) { return mul(l[0], 3.0f); };
                 return k;
               }});
  s.push_back({"dequantize_hard_affine", [](Rng& rng) {
                 const std::size_t rows = pick(rng, 1, 3), cols = pick(rng, 1, 9), gs = pick(rng, 1, 4);
                 const std::size_t ch = (cols + gs - 1) / gs;
                 std::vector<float> w(rows * cols), g(rows * cols);
                 for (auto& x : w) x = float(rng() & 1);
                 for (auto& x : g) x = float(rng() & 1);
                 auto q = std::make_shared<QuantLinear>(QuantLinear::create(
                     rows, cols, gs, w, g, normals(rng, rows * ch), normals(rng, rows * ch),
                     normals(rng, rows * ch), normals(rng, rows * ch)));
                 Case k;
                 k.leaves = {q->scale0, q->offset0, q->scale1, q->offset1};
                 k.f = [q](const std::vector<Tensor>&) { return dequantize_grouped(*q, DequantMode::Hard); };
                 return k;
               }});
  s.push_back({"dequantize_ste", [](Rng& rng) {
                 const std::size_t rows = pick(rng, 1, 3), cols = pick(rng, 1, 9), gs = pick(rng, 1, 4);
                 const std::size_t ch = (cols + gs - 1) / gs;
                 // Relaxed values at least 0.05 from the 0.5 threshold.
                 auto relaxed = [&](std::size_t n) {
                   std::vector<float> v(n);
                   for (auto& x : v) x = rng() & 1 ? uniform(rng, 0.0f, 0.45f) : uniform(rng, 0.55f, 1.0f);
                   return v;
                 };
                 const auto w = relaxed(rows * cols), g = relaxed(rows * cols);
                 auto q = std::make_shared<QuantLinear>(QuantLinear::create(
                     rows, cols, gs, w, g, normals(rng, rows * ch), normals(rng, rows * ch),
                     normals(rng, rows * ch), normals(rng, rows * ch)));
                 std::vector<float> wb(w.size()), gb(g.size());
                 for (std::size_t i = 0; i < w.size(); ++i) wb[i] = w[i] >= 0.5f, gb[i] = g[i] >= 0.5f;
                 Case k;
                 k.leaves = {q->weight, q->group, q->scale0, q->offset0, q->scale1, q->offset1};
                 k.f = [q](const std::vector<Tensor>&) { return dequantize_grouped(*q, DequantMode::Ste); };
                 k.numeric = [q, w, g, wb, gb](const std::vector<Tensor>&) { return passthrough_dequant(*q, w, g, wb, gb); };
                 return k;
               }});
  for (int region = 0; region < 3; ++region) {
    static const char* names[] = {"surrogate_indicator_r1", "surrogate_indicator_r2", "surrogate_indicator_r3"};
    s.push_back({names[region], [region](Rng& rng) {
                   const std::size_t n = pick(rng, 4, 16);
                   auto xs = normals(rng, n);
                   const float k1 = uniform(rng, -1.0f, 0.0f), k2 = k1 + uniform(rng, 0.3f, 1.5f);
                   auto p = std::make_shared<ActQuantParams>(ActQuantParams::create(k1, k2));
                   // A moderate temperature makes the soft path visible; it is
                   // held fixed while differencing, as in the op itself.
                   p->tau_scale = 0.5f;
                   const float tau = temperature(xs, *p);
                   Case k;
                   k.leaves = {param({n}, xs), p->knee, p->knee_gap};
                   k.f = [p, region](const std::vector<Tensor>& l) { return surrogate_indicator(l[0], region, *p); };
                   k.numeric = [p, region, tau](const std::vector<Tensor>& l) {
                     const Tensor kk1 = l[1], kk2 = add(l[1], softplus(l[2]));
                     const Tensor sa = sigmoid(mul(sub(l[0], kk1), 1.0f / tau));
                     const Tensor sb = sigmoid(mul(sub(l[0], kk2), 1.0f / tau));
                     if (region == 0) return add(neg(sa), 1.0f);
                     if (region == 1) return sub(sa, sb);
                     return sb;
                   };
                   return k;
                 }});
  }
  return s;
}

}  // namespace

std::vector<OpGradResult> gradient_suite(int trials, std::uint64_t seed) {
  std::vector<OpGradResult> out;
  const auto specs = op_specs();
  for (std::size_t o = 0; o < specs.size(); ++o) {
    Rng rng(seed * 1000003ULL + o);
    OpGradResult r{specs[o].name, trials, 0.0};
    for (int t = 0; t < trials; ++t) {
      Case k = specs[o].make(rng);
      const auto g = check_gradient(k.f, k.leaves, rng(), 1e-3, k.numeric);
      r.max_rel_error = std::max(r.max_rel_error, g.rel_error);
    }
    out.push_back(r);
  }
  return out;
}

EmOracleResult em_oracle_suite(int cases, std::uint64_t seed) {
  Rng rng(seed);
  EmOracleResult r{cases, 0.0};
  for (int c = 0; c < cases; ++c) {
    const auto w = normals(rng, 8);
    const auto h = in_range(rng, 8, 0.01f, 1.0f);
    EmOptions opt;
    opt.seed = rng();
    const EmFit fit = em_group_fit(w, h, opt);
    const double best = brute_force_cluster_error(w, h);
    double ratio;
    if (best < 1e-12) ratio = fit.error < 1e-9 ? 1.0 : std::numeric_limits<double>::infinity();
    else ratio = fit.error / best;
    r.worst_ratio = std::max(r.worst_ratio, ratio);
  }
  return r;
}

PackedSuiteResult packed_suite(int instances, int roundtrips, std::size_t max_dim, std::uint64_t seed) {
  Rng rng(seed);
  PackedSuiteResult res;
  res.instances = instances;
  res.roundtrips = roundtrips;
  const std::size_t group_sizes[] = {8, 16, 32, 64, 128};
  auto half_exact = [&](float lo, float hi) { return half_to_float(float_to_half(uniform(rng, lo, hi))); };
  for (int i = 0; i < instances; ++i) {
    const std::size_t rows = pick(rng, 1, max_dim), cols = pick(rng, 1, max_dim);
    const std::size_t gs = group_sizes[pick(rng, 0, 4)], ch = (cols + gs - 1) / gs;
    const std::size_t tokens = pick(rng, 1, 4);
    std::vector<float> w(rows * cols), g(rows * cols);
    for (auto& x : w) x = float(rng() & 1);
    for (auto& x : g) x = float(rng() & 1);
    std::vector<float> s0(rows * ch), o0(rows * ch), s1(rows * ch), o1(rows * ch);
    for (std::size_t p = 0; p < rows * ch; ++p) {
      s0[p] = half_exact(0.01f, 0.5f), o0[p] = half_exact(-0.3f, 0.3f);
      s1[p] = half_exact(0.01f, 0.5f), o1[p] = half_exact(-0.3f, 0.3f);
    }
    const QuantLinear q = QuantLinear::create(rows, cols, gs, w, g, s0, o0, s1, o1);
    const PackedLayer layer = PackedLayer::from_quant(q);
    std::vector<std::uint8_t> codes(tokens * cols);
    for (auto& c : codes) c = static_cast<std::uint8_t>(pick(rng, 0, 15));
    const float act_scale = uniform(rng, 0.01f, 0.2f);
    const float act_offset = float(pick(rng, 0, 15));
    const auto y = packed_matmul(codes, tokens, act_scale, act_offset, layer);

    const Tensor wq = dequantize_grouped(q, DequantMode::Hard);
    auto wd = wq.data();
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
          acc += double(wd[r * cols + c]) * ((double(codes[t * cols + c]) - act_offset) * act_scale);
        res.max_abs_error = std::max(res.max_abs_error, std::fabs(acc - double(y[t * rows + r])));
      }
  }
  for (int i = 0; i < roundtrips; ++i) {
    const std::size_t rows = pick(rng, 1, 80), cols = pick(rng, 1, 80);
    const double density = uniform(rng, 0.0f, 1.0f);
    std::vector<float> m(rows * cols);
    for (auto& x : m) x = std::uniform_real_distribution<double>(0, 1)(rng) < density ? 1.0f : 0.0f;
    const auto words = pack_bits(m);
    if (unpack_bits(words, rows, cols) != m) ++res.roundtrip_failures;
  }
  return res;
}

LongTailResult act_longtail_experiment(std::size_t n, int steps, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> xs(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 100 == 0) xs[i] = (i / 100) % 2 ? 50.0f : -50.0f;
    else xs[i] = nd(rng);
  }
  const Tensor x = Tensor::from({n}, xs);
  auto mse = [&](const ActQuantParams& p) {
    NoGradGuard ng;
    const Tensor out = act_quantize_forward(x, p);
    const auto q = out.data();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += double(q[i] - xs[i]) * double(q[i] - xs[i]);
    return s / double(n);
  };

  LongTailResult r;
  r.mse_single_region = mse(ActQuantParams::single_region(4));

  auto train = [&](ActQuantParams& p, bool knees) {
    std::vector<ParamGroup> groups;
    groups.push_back({"clip", p.clip_params(), 1e-2f, project_clip});
    if (knees) {
      groups.push_back({"knee", {p.knee}, 1e-2f, {}});
      groups.push_back({"gap", {p.knee_gap}, 1e-2f, project_knee_gap});
    }
    Adam adam(std::move(groups));
    for (int s = 0; s < steps; ++s) {
      adam.zero_grad();
      const Tensor xq = act_quantize_train(x, p);
      backward(mean(pow(sub(xq, x), 2.0f)));
      adam.step();
      const auto m = soft_membership(xs, p.k1(), p.k2(), temperature(xs, p));
      for (std::size_t i = 0; i < n; ++i)
        r.max_mask_sum_error = std::max(r.max_mask_sum_error, std::fabs(m.p1[i] + m.p2[i] + m.p3[i] - 1.0));
    }
  };

  ActQuantParams clip_only = ActQuantParams::single_region(4);
  train(clip_only, false);
  r.mse_clip_only = mse(clip_only);

  ActQuantParams p = ActQuantParams::from_percentiles(xs);
  r.mse_initial = mse(p);
  train(p, true);
  r.mse_trained = mse(p);
  r.k1 = p.k1(), r.k2 = p.k2(), r.c_alpha = p.c_alpha(), r.c_beta = p.c_beta();
  return r;
}

}  // namespace lbq::oracle

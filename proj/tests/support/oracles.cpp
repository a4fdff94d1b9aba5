#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace lbq::oracle {

namespace {

double weighted_sum(const Tensor& out, const std::vector<float>& r) {
  auto d = out.data();
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) s += double(d[i]) * r[i];
  return s;
}

}  // namespace

GradCheck check_gradient(const TensorFn& f, std::vector<Tensor> leaves, std::uint64_t weight_seed,
                         double h, const TensorFn& numeric) {
  const TensorFn& g = numeric ? numeric : f;
  for (auto& l : leaves) l.zero_grad();

  const Tensor out = f(leaves);
  std::mt19937_64 rng(weight_seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> r(out.size());
  for (auto& v : r) v = nd(rng);
  backward(sum(mul(out, Tensor::from(out.shape(), r))));

  std::vector<double> analytic, approx;
  for (auto& leaf : leaves) {
    const std::size_t n = leaf.size();
    if (leaf.has_grad()) {
      auto gr = leaf.grad();
      analytic.insert(analytic.end(), gr.begin(), gr.end());
    } else {
      analytic.insert(analytic.end(), n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto data = leaf.mutable_data();
      const float orig = data[i];
      // Use the step actually representable in float.
      const float up = static_cast<float>(orig + h), down = static_cast<float>(orig - h);
      double fp, fm;
      {
        NoGradGuard ng;
        data[i] = up;
        fp = weighted_sum(g(leaves), r);
        leaf.mutable_data()[i] = down;
        fm = weighted_sum(g(leaves), r);
      }
      leaf.mutable_data()[i] = orig;
      approx.push_back((fp - fm) / (double(up) - double(down)));
    }
  }

  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - approx[i]) * (analytic[i] - approx[i]);
    na += analytic[i] * analytic[i];
    nn += approx[i] * approx[i];
  }
  GradCheck out_check;
  out_check.analytic_norm = std::sqrt(na);
  out_check.numeric_norm = std::sqrt(nn);
  const double scale = std::max(out_check.analytic_norm, out_check.numeric_norm) + kNoiseFloor;
  out_check.rel_error = std::sqrt(diff) / scale;
  return out_check;
}

double round_half_away(double x) { return x < 0.0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5); }

double brute_force_cluster_error(std::span<const float> w, std::span<const float> h,
                                 int max_levels) {
  const std::size_t n = w.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return w[a] < w[b]; });
  std::vector<double> sw(n), sh(n);
  for (std::size_t i = 0; i < n; ++i) sw[i] = w[order[i]], sh[i] = h[order[i]];
  bool all_zero = std::all_of(sh.begin(), sh.end(), [](double v) { return v == 0.0; });
  if (all_zero) std::fill(sh.begin(), sh.end(), 1.0);

  // Cost of one cluster [a, b): weighted squared deviation from its weighted mean.
  auto cost = [&](std::size_t a, std::size_t b) {
    double hs = 0.0, hw = 0.0;
    for (std::size_t i = a; i < b; ++i) hs += sh[i], hw += sh[i] * sw[i];
    const double mu = hs > 0.0 ? hw / hs : sw[a];
    double e = 0.0;
    for (std::size_t i = a; i < b; ++i) e += sh[i] * (sw[i] - mu) * (sw[i] - mu);
    return e;
  };

  double best = std::numeric_limits<double>::infinity();
  // Enumerate every set of at most (max_levels - 1) cut positions.
  std::function<void(std::size_t, int, double)> rec = [&](std::size_t start, int parts_left,
                                                           double acc) {
    if (acc >= best) return;
    if (parts_left == 1) {
      best = std::min(best, acc + cost(start, n));
      return;
    }
    best = std::min(best, acc + cost(start, n));
    for (std::size_t cut = start + 1; cut < n; ++cut) rec(cut, parts_left - 1, acc + cost(start, cut));
  };
  rec(0, max_levels, 0.0);
  return best;
}

std::vector<double> act_reference_quantize(std::span<const float> x, const ActReference& p) {
  struct Region {
    bool any = false;
    double lo = 0.0, hi = 0.0;
  };
  std::array<Region, 3> reg;
  auto region = [&](double v) { return v < p.k1 ? 0 : (v < p.k2 ? 1 : 2); };
  for (float fv : x) {
    const double v = fv;
    auto& r = reg[region(v)];
    if (!r.any) r.any = true, r.lo = r.hi = v;
    r.lo = std::min(r.lo, v);
    r.hi = std::max(r.hi, v);
  }
  std::vector<double> out;
  out.reserve(x.size());
  for (float fv : x) {
    const double v = fv;
    const int j = region(v);
    const auto& r = reg[j];
    if (r.hi == r.lo) {
      out.push_back(v);
      continue;
    }
    const double levels = std::pow(2.0, p.bits[j]) - 1.0;
    const double alpha = (p.c_alpha * r.hi - p.c_beta * r.lo) / levels;
    const double mu = -round_half_away(p.c_beta * r.lo / alpha);
    const double q = std::clamp(round_half_away(v / alpha + mu), 0.0, levels);
    out.push_back((q - mu) * alpha);
  }
  return out;
}

}  // namespace lbq::oracle

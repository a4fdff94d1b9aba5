#include "lbq/ptq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace lbq {

void HessianAccumulator::add(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("Hessian input must be [tokens x features]");
  if (sum_.empty()) sum_.assign(x.dim(1), 0.0);
  if (x.dim(1) != sum_.size()) throw DimensionError("Hessian input width changed");
  auto d = x.data();
  const std::size_t m = sum_.size();
  for (std::size_t t = 0; t < x.dim(0); ++t)
    for (std::size_t i = 0; i < m; ++i) sum_[i] += double(d[t * m + i]) * d[t * m + i];
  tokens_ += x.dim(0);
}

HessianEstimate HessianAccumulator::finish() const {
  if (tokens_ == 0) throw ContractError("no calibration data for the Hessian estimate");
  HessianEstimate e;
  e.sample_count = tokens_;
  e.h.resize(sum_.size());
  for (std::size_t i = 0; i < sum_.size(); ++i)
    e.h[i] = static_cast<float>(2.0 * sum_[i] / double(tokens_));
  return e;
}

HessianEstimate estimate_hessian_diag(std::span<const Tensor> inputs) {
  HessianAccumulator acc;
  for (const auto& x : inputs) acc.add(x);
  return acc.finish();
}

double weighted_error(std::span<const float> w, std::span<const float> h,
                      std::span<const float> levels) {
  double e = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (float l : levels) best = std::min(best, std::fabs(double(w[i]) - l));
    e += double(h[i]) * best * best;
  }
  return e;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Lloyd {
  std::array<double, 4> levels{};
  std::vector<int> assign;
  double error = 0.0;
  std::vector<double> history;
};

int nearest(double x, const std::array<double, 4>& lv) {
  int best = 0;
  double bd = std::fabs(x - lv[0]);
  for (int k = 1; k < 4; ++k) {
    const double d = std::fabs(x - lv[k]);
    if (d < bd) bd = d, best = k;
  }
  return best;
}

Lloyd run_lloyd(std::span<const float> w, std::span<const double> h, std::array<double, 4> init,
                int max_iters, bool history) {
  const std::size_t n = w.size();
  Lloyd s;
  s.levels = init;
  s.assign.assign(n, -1);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = nearest(w[i], s.levels);
      if (a != s.assign[i]) changed = true, s.assign[i] = a;
      const double d = w[i] - s.levels[a];
      err += h[i] * d * d;
    }
    s.error = err;
    if (history) s.history.push_back(err);
    if (!changed && it > 0) break;
    std::array<double, 4> num{}, den{}, cnt{}, plain{};
    for (std::size_t i = 0; i < n; ++i) {
      const int a = s.assign[i];
      num[a] += h[i] * w[i];
      den[a] += h[i];
      plain[a] += w[i];
      cnt[a] += 1.0;
    }
    for (int k = 0; k < 4; ++k) {
      if (cnt[k] == 0.0) {
        // Empty cluster: move it onto the worst-represented point.
        std::size_t worst = 0;
        double we = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = w[i] - s.levels[s.assign[i]];
          if (h[i] * d * d > we) we = h[i] * d * d, worst = i;
        }
        s.levels[k] = w[worst];
      } else {
        s.levels[k] = den[k] > 0.0 ? num[k] / den[k] : plain[k] / cnt[k];
      }
    }
  }
  // Final assignment against the final levels.
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s.assign[i] = nearest(w[i], s.levels);
    const double d = w[i] - s.levels[s.assign[i]];
    err += h[i] * d * d;
  }
  if (history && (s.history.empty() || err != s.history.back())) s.history.push_back(err);
  s.error = err;
  return s;
}

// Optimal levels over contiguous partitions of the sorted weights, by dynamic
// programming on prefix sums. Optimal 1-D clusterings are sort-contiguous, so
// Lloyd started here is already at its fixed point.
std::array<double, 4> optimal_partition_levels(std::span<const float> w, std::span<const double> h) {
  const std::size_t n = w.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return w[a] < w[b]; });
  std::vector<double> s0(n + 1, 0.0), s1(n + 1, 0.0), s2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = w[idx[i]], q = h[idx[i]];
    s0[i + 1] = s0[i] + q;
    s1[i + 1] = s1[i] + q * v;
    s2[i + 1] = s2[i] + q * v * v;
  }
  auto mean = [&](std::size_t a, std::size_t b) {
    const double m = s0[b] - s0[a];
    return m > 0.0 ? (s1[b] - s1[a]) / m : double(w[idx[a]]);
  };
  auto cost = [&](std::size_t a, std::size_t b) {
    const double m = s0[b] - s0[a];
    if (m <= 0.0) return 0.0;
    const double d = s1[b] - s1[a];
    return std::max(0.0, (s2[b] - s2[a]) - d * d / m);
  };
  constexpr double inf = std::numeric_limits<double>::infinity();
  // best[k][i]: first i sorted values split into k + 1 parts.
  std::array<std::vector<double>, 4> best;
  std::array<std::vector<std::size_t>, 4> cut;
  for (auto& b : best) b.assign(n + 1, inf);
  for (auto& c : cut) c.assign(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) best[0][i] = cost(0, i);
  for (int k = 1; k < 4; ++k)
    for (std::size_t i = 1; i <= n; ++i) {
      best[k][i] = best[k - 1][i];
      cut[k][i] = i;  // last part empty
      for (std::size_t j = 1; j < i; ++j) {
        const double c = best[k - 1][j] + cost(j, i);
        if (c < best[k][i]) best[k][i] = c, cut[k][i] = j;
      }
    }
  std::array<double, 4> lv{};
  std::size_t end = n;
  double last = mean(0, n);
  for (int k = 3; k >= 0; --k) {
    const std::size_t begin = k == 0 ? 0 : cut[k][end];
    if (begin < end) last = mean(begin, end);
    lv[k] = last;
    end = begin;
  }
  return lv;
}

// Restart 0 seeds at h-weighted quantiles, restart 1 at the optimal
// contiguous partition, later restarts k-means++ style.
std::array<double, 4> seed_levels(std::span<const float> w, std::span<const double> h, int restart,
                                  std::mt19937_64& rng) {
  const std::size_t n = w.size();
  std::array<double, 4> lv{};
  if (restart == 0) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return w[a] < w[b]; });
    const double total = std::accumulate(h.begin(), h.end(), 0.0);
    double acc = 0.0;
    std::size_t i = 0;
    for (int k = 0; k < 4; ++k) {
      const double target = total * (2 * k + 1) / 8.0;
      while (i + 1 < n && acc + h[idx[i]] < target) acc += h[idx[i++]];
      lv[k] = w[idx[i]];
    }
    return lv;
  }
  if (restart == 1) return optimal_partition_levels(w, h);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  lv[0] = w[pick(rng)];
  for (int k = 1; k < 4; ++k) {
    std::vector<double> d(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) best = std::min(best, std::fabs(w[i] - lv[j]));
      d[i] = (h[i] + 1e-12) * best * best;
      total += d[i];
    }
    if (total <= 0.0) {
      lv[k] = w[pick(rng)];
      continue;
    }
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t i = 0;
    for (; i + 1 < n && u >= d[i]; ++i) u -= d[i];
    lv[k] = w[i];
  }
  return lv;
}

}  // namespace

std::uint64_t chunk_seed(std::uint64_t base, std::uint64_t layer, std::uint64_t row,
                         std::uint64_t chunk) {
  return splitmix64(splitmix64(splitmix64(splitmix64(base) ^ layer) ^ row) ^ chunk);
}

EmFit em_group_fit(std::span<const float> w, std::span<const float> h, const EmOptions& opt) {
  if (w.empty()) throw ContractError("em_group_fit on an empty chunk");
  if (w.size() != h.size()) throw DimensionError("em_group_fit: |w| != |h|");
  if (opt.max_iters < 1 || opt.restarts < 1) throw ContractError("em_group_fit: bad options");
  const std::size_t n = w.size();
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(w[i]) || !std::isfinite(h[i])) throw NumericError("em_group_fit: non-finite input");
    if (h[i] < 0.0f) throw ContractError("em_group_fit: negative weight");
    any = any || h[i] > 0.0f;
  }
  std::vector<double> hw(n);
  for (std::size_t i = 0; i < n; ++i) hw[i] = any ? double(h[i]) : 1.0;

  std::vector<float> distinct(w.begin(), w.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  Lloyd best;
  best.error = std::numeric_limits<double>::infinity();
  if (distinct.size() <= 4) {
    std::array<double, 4> lv;
    for (std::size_t k = 0; k < 4; ++k) lv[k] = distinct[std::min(k, distinct.size() - 1)];
    best = run_lloyd(w, hw, lv, 1, opt.record_history);
  } else {
    std::mt19937_64 rng(opt.seed);
    for (int r = 0; r < opt.restarts; ++r) {
      Lloyd s = run_lloyd(w, hw, seed_levels(w, hw, r, rng), opt.max_iters, opt.record_history);
      if (s.error < best.error) best = std::move(s);
    }
  }

  // Sort levels, remap assignments, decode into (group, weight) bits.
  std::array<int, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return best.levels[a] < best.levels[b]; });
  std::array<int, 4> rank{};
  for (int k = 0; k < 4; ++k) rank[order[k]] = k;
  EmFit fit;
  for (int k = 0; k < 4; ++k) fit.levels[k] = static_cast<float>(best.levels[order[k]]);
  fit.g0 = {fit.levels[1] - fit.levels[0], fit.levels[0]};
  fit.g1 = {fit.levels[3] - fit.levels[2], fit.levels[2]};
  fit.group_bits.resize(n);
  fit.weight_bits.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = rank[best.assign[i]];
    fit.group_bits[i] = a < 2;
    fit.weight_bits[i] = a % 2;
  }
  // Error of the decoded float parameters (what dequantization reproduces).
  const std::array<float, 4> decoded{fit.g0.offset, fit.g0.scale + fit.g0.offset, fit.g1.offset,
                                     fit.g1.scale + fit.g1.offset};
  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float wq = decoded[(fit.group_bits[i] ? 0 : 2) + fit.weight_bits[i]];
    const double d = double(w[i]) - wq;
    e += hw[i] * d * d;
  }
  fit.error = e;
  fit.history = std::move(best.history);
  return fit;
}

namespace {

// Relaxed starting values that threshold to the given bits. The soft form
// places each weight inside its group's interval and the bitmap by relative
// distance to the two groups; exact 0/1 values would start the polarization
// penalty at zero.
void relaxed_values(float w, bool gbit, bool wbit, const AffinePair& p0, const AffinePair& p1,
                    RelaxedInit mode, float& wfp, float& gfp) {
  if (mode == RelaxedInit::Hard) {
    wfp = wbit;
    gfp = gbit;
    return;
  }
  const AffinePair& own = gbit ? p0 : p1;
  float v = own.scale != 0.0f ? (w - own.offset) / own.scale : float(wbit);
  v = std::clamp(v, 0.0f, 1.0f);
  wfp = wbit ? std::max(v, 0.5f) : std::min(v, 0.499f);
  const auto dist = [w](const AffinePair& p) {
    return std::min(std::fabs(w - p.offset), std::fabs(w - (p.scale + p.offset)));
  };
  const float d0 = dist(p0), d1 = dist(p1);
  float g = d0 + d1 > 0.0f ? d1 / (d0 + d1) : float(gbit);
  gfp = gbit ? std::max(g, 0.5f) : std::min(g, 0.499f);
}

}  // namespace

QuantLinear ptq_initialize_layer(const Tensor& weight, const HessianEstimate& hessian,
                                 const PtqOptions& opt, std::uint64_t layer_id) {
  if (weight.rank() != 2) throw DimensionError("ptq_initialize_layer expects a matrix");
  const std::size_t n = weight.dim(0), m = weight.dim(1), gs = opt.group_size;
  if (hessian.h.size() != m)
    throw DimensionError("Hessian has " + std::to_string(hessian.h.size()) + " entries, layer has " +
                         std::to_string(m) + " inputs");
  if (opt.method == InitMethod::Rtn) return rtn_initialize_layer(weight, gs, opt.relaxed);
  if (gs == 0) throw ContractError("group_size must be positive");
  const std::size_t ch = (m + gs - 1) / gs;
  auto W = weight.data();
  std::vector<float> wfp(n * m), gfp(n * m), s0(n * ch), o0(n * ch), s1(n * ch), o1(n * ch);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < ch; ++k) {
      const std::size_t lo = k * gs, hi = std::min(m, lo + gs);
      EmOptions em = opt.em;
      em.seed = chunk_seed(opt.em.seed, layer_id, r, k);
      em.record_history = false;
      const EmFit fit = em_group_fit(W.subspan(r * m + lo, hi - lo),
                                     std::span<const float>(hessian.h).subspan(lo, hi - lo), em);
      const std::size_t p = r * ch + k;
      s0[p] = fit.g0.scale, o0[p] = fit.g0.offset, s1[p] = fit.g1.scale, o1[p] = fit.g1.offset;
      for (std::size_t c = lo; c < hi; ++c)
        relaxed_values(W[r * m + c], fit.group_bits[c - lo], fit.weight_bits[c - lo], fit.g0, fit.g1,
                       opt.relaxed, wfp[r * m + c], gfp[r * m + c]);
    }
  }
  return QuantLinear::create(n, m, gs, std::move(wfp), std::move(gfp), std::move(s0),
                             std::move(o0), std::move(s1), std::move(o1));
}

QuantLinear rtn_initialize_layer(const Tensor& weight, std::size_t group_size, RelaxedInit relaxed) {
  if (weight.rank() != 2) throw DimensionError("rtn_initialize_layer expects a matrix");
  if (group_size == 0) throw ContractError("group_size must be positive");
  const std::size_t n = weight.dim(0), m = weight.dim(1), gs = group_size;
  const std::size_t ch = (m + gs - 1) / gs;
  auto W = weight.data();
  std::vector<float> wfp(n * m), gfp(n * m, 1.0f), s(n * ch), o(n * ch);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < ch; ++k) {
      const std::size_t lo = k * gs, hi = std::min(m, lo + gs);
      const AffinePair p = init_affine_minmax(W.subspan(r * m + lo, hi - lo));
      s[r * ch + k] = p.scale;
      o[r * ch + k] = p.offset;
      for (std::size_t c = lo; c < hi; ++c) {
        const float w = W[r * m + c];
        const bool bit = p.scale != 0.0f && std::fabs(w - (p.scale + p.offset)) < std::fabs(w - p.offset);
        float unused = 0.0f;
        relaxed_values(w, true, bit, p, p, relaxed, wfp[r * m + c], unused);
      }
    }
  }
  return QuantLinear::create(n, m, gs, std::move(wfp), std::move(gfp), s, o, s, o);
}

double relative_frobenius_error(const Tensor& weight, const QuantLinear& q) {
  NoGradGuard guard;
  const Tensor deq = dequantize_grouped(q, DequantMode::Hard);
  auto a = weight.data();
  auto b = deq.data();
  if (a.size() != b.size()) throw DimensionError("relative_frobenius_error: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    den += double(a[i]) * a[i];
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

std::vector<std::array<HessianEstimate, 4>> collect_hessians(
    const Model& teacher, std::span<const std::vector<int>> calibration) {
  if (calibration.empty()) throw ContractError("no calibration data");
  NoGradGuard guard;
  const std::size_t L = teacher.layers.size();
  std::vector<std::array<HessianAccumulator, 4>> acc(L);
  for (const auto& seq : calibration) {
    Tensor x = embed(teacher, seq);
    for (std::size_t l = 0; l < L; ++l) {
      const SiteCapture cap = [&](Site s, const Tensor& t) {
        const int i = static_cast<int>(s);
        if (i < 4) acc[l][i].add(t);
      };
      ForwardMode mode;
      mode.capture = &cap;
      x = decoder_forward(teacher.layers[l], x, teacher.cfg, mode);
    }
  }
  std::vector<std::array<HessianEstimate, 4>> out(L);
  for (std::size_t l = 0; l < L; ++l)
    for (int i = 0; i < 4; ++i) out[l][i] = acc[l][i].finish();
  return out;
}

Model ptq_initialize_model(const Model& teacher, std::span<const std::vector<int>> calibration,
                           const PtqOptions& opt) {
  const auto hess = collect_hessians(teacher, calibration);
  Model student = teacher.clone();
  // Input site of each slot in DecoderLayer::slots() order.
  constexpr std::array<Site, 7> site_of{Site::AttnIn, Site::AttnIn, Site::AttnIn, Site::OIn,
                                        Site::MlpIn,  Site::MlpIn,  Site::DownIn};
  for (std::size_t l = 0; l < student.layers.size(); ++l) {
    auto slots = student.layers[l].slots();
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const auto* full = std::get_if<FullLinear>(slots[s]);
      if (!full) throw ContractError("PTQ initialization expects a full-precision teacher");
      const auto& h = hess[l][static_cast<int>(site_of[s])];
      *slots[s] = ptq_initialize_layer(full->weight, h, opt, l * slots.size() + s);
    }
  }
  return student;
}

}  // namespace lbq

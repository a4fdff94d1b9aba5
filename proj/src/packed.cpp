#include "lbq/packed.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace lbq {

std::uint16_t float_to_half(float value) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t exp = (x >> 23) & 0xffu;
  std::uint32_t mant = x & 0x7fffffu;
  if (exp == 0xffu) return sign | 0x7c00u | (mant ? 0x200u : 0u);
  const int e = int(exp) - 127 + 15;
  if (e >= 31) return sign | 0x7c00u;
  if (e <= 0) {
    if (e < -10) return sign;
    mant |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t half = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = (std::uint32_t(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // carry may reach inf
  return static_cast<std::uint16_t>(sign | half);
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = std::uint32_t(bits & 0x8000u) << 16;
  const std::uint32_t exp = (bits >> 10) & 0x1fu;
  const std::uint32_t mant = bits & 0x3ffu;
  if (exp == 0) {
    const float v = std::ldexp(float(mant), -24);
    return sign ? -v : v;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

std::vector<std::uint64_t> pack_bits(std::span<const float> binary) {
  std::vector<std::uint64_t> words((binary.size() + 63) / 64, 0);
  for (std::size_t i = 0; i < binary.size(); ++i) {
    if (binary[i] == 1.0f)
      words[i / 64] |= std::uint64_t{1} << (i % 64);
    else if (binary[i] != 0.0f)
      throw ContractError("pack_bits: input is not binary");
  }
  return words;
}

std::vector<float> unpack_bits(std::span<const std::uint64_t> words, std::size_t rows,
                               std::size_t cols) {
  const std::size_t n = rows * cols;
  if (words.size() != (n + 63) / 64) throw DimensionError("unpack_bits: word count mismatch");
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = float((words[i / 64] >> (i % 64)) & 1u);
  return out;
}

namespace {

std::vector<std::uint16_t> to_half(std::span<const float> v) {
  std::vector<std::uint16_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]) || std::fabs(v[i]) > 65504.0f)
      throw NumericError("affine parameter does not fit binary16");
    out[i] = float_to_half(v[i]);
  }
  return out;
}

std::vector<float> from_half(std::span<const std::uint16_t> v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = half_to_float(v[i]);
  return out;
}

bool bit_at(const std::vector<std::uint64_t>& words, std::size_t i) {
  return (words[i / 64] >> (i % 64)) & 1u;
}

// Word ranges (with edge masks) covering each chunk of a row-aligned row.
struct ChunkSegments {
  std::vector<std::size_t> begin;  // chunks + 1 offsets into word/mask
  std::vector<std::size_t> word;
  std::vector<std::uint64_t> mask;
};

ChunkSegments chunk_segments(std::size_t cols, std::size_t group_size) {
  ChunkSegments s;
  const std::size_t chunks = (cols + group_size - 1) / group_size;
  s.begin.push_back(0);
  for (std::size_t k = 0; k < chunks; ++k) {
    const std::size_t lo = k * group_size, hi = std::min(cols, lo + group_size);
    for (std::size_t w = lo / 64; w <= (hi - 1) / 64; ++w) {
      const std::size_t a = std::max(lo, w * 64) - w * 64;
      const std::size_t b = std::min(hi, w * 64 + 64) - w * 64;
      const std::uint64_t m =
          (b == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << b) - 1)) & ~((std::uint64_t{1} << a) - 1);
      s.word.push_back(w);
      s.mask.push_back(m);
    }
    s.begin.push_back(s.word.size());
  }
  return s;
}

// out[r] += coef * sum_k affine(A, B, C, D) for integer-weighted planes.
void accumulate_planes(const PackedLayer& L, const ChunkSegments& seg,
                       const std::vector<const std::uint64_t*>& planes,
                       const std::vector<std::int32_t>& weights, float coef, float* out) {
  const std::size_t wpr = L.words_per_row(), ch = L.chunks();
  std::vector<std::int32_t> d(ch, 0);
  for (std::size_t k = 0; k < ch; ++k)
    for (std::size_t s = seg.begin[k]; s < seg.begin[k + 1]; ++s)
      for (std::size_t p = 0; p < planes.size(); ++p)
        d[k] += weights[p] * std::popcount(planes[p][seg.word[s]] & seg.mask[s]);
  for (std::size_t r = 0; r < L.rows; ++r) {
    const std::uint64_t* gw = L.gw_rows.data() + r * wpr;
    const std::uint64_t* g = L.g_rows.data() + r * wpr;
    const std::uint64_t* w = L.w_rows.data() + r * wpr;
    float acc = 0.0f;
    for (std::size_t k = 0; k < ch; ++k) {
      std::int32_t a = 0, b = 0, c = 0;
      for (std::size_t s = seg.begin[k]; s < seg.begin[k + 1]; ++s) {
        const std::size_t wi = seg.word[s];
        for (std::size_t p = 0; p < planes.size(); ++p) {
          const std::uint64_t x = planes[p][wi] & seg.mask[s];
          a += weights[p] * std::popcount(gw[wi] & x);
          b += weights[p] * std::popcount(g[wi] & x);
          c += weights[p] * std::popcount(w[wi] & x);
        }
      }
      const std::size_t pi = r * ch + k;
      acc += L.s0f[pi] * float(a) + L.o0f[pi] * float(b) + L.s1f[pi] * float(c - a) +
             L.o1f[pi] * float(d[k] - b);
    }
    out[r] += coef * acc;
  }
}

}  // namespace

PackedLayer PackedLayer::from_quant(const QuantLinear& q) {
  std::vector<float> wb(q.weight.size()), gb(q.group.size());
  auto w = q.weight.data();
  auto g = q.group.data();
  for (std::size_t i = 0; i < wb.size(); ++i) {
    wb[i] = w[i] >= 0.5f ? 1.0f : 0.0f;
    gb[i] = g[i] >= 0.5f ? 1.0f : 0.0f;
  }
  return from_storage(q.rows, q.cols, q.group_size, pack_bits(wb), pack_bits(gb),
                      to_half(q.scale0.data()), to_half(q.offset0.data()),
                      to_half(q.scale1.data()), to_half(q.offset1.data()));
}

PackedLayer PackedLayer::from_storage(std::size_t rows, std::size_t cols, std::size_t group_size,
                                      std::vector<std::uint64_t> weight_bits,
                                      std::vector<std::uint64_t> bitmap_bits,
                                      std::vector<std::uint16_t> scale0,
                                      std::vector<std::uint16_t> offset0,
                                      std::vector<std::uint16_t> scale1,
                                      std::vector<std::uint16_t> offset1) {
  if (rows == 0 || cols == 0 || group_size == 0)
    throw DimensionError("packed layer extents must be positive");
  PackedLayer L;
  L.rows = rows;
  L.cols = cols;
  L.group_size = group_size;
  const std::size_t words = (rows * cols + 63) / 64, params = rows * L.chunks();
  if (weight_bits.size() != words || bitmap_bits.size() != words)
    throw DimensionError("packed layer: bit word count mismatch");
  if (scale0.size() != params || offset0.size() != params || scale1.size() != params ||
      offset1.size() != params)
    throw DimensionError("packed layer: parameter count mismatch");
  L.weight_bits = std::move(weight_bits);
  L.bitmap_bits = std::move(bitmap_bits);
  L.scale0 = std::move(scale0);
  L.offset0 = std::move(offset0);
  L.scale1 = std::move(scale1);
  L.offset1 = std::move(offset1);
  L.build_tables();
  return L;
}

void PackedLayer::build_tables() {
  const std::size_t wpr = words_per_row();
  w_rows.assign(rows * wpr, 0);
  g_rows.assign(rows * wpr, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const std::uint64_t bit = std::uint64_t{1} << (c % 64);
      if (bit_at(weight_bits, i)) w_rows[r * wpr + c / 64] |= bit;
      if (bit_at(bitmap_bits, i)) g_rows[r * wpr + c / 64] |= bit;
    }
  }
  gw_rows.resize(w_rows.size());
  for (std::size_t i = 0; i < w_rows.size(); ++i) gw_rows[i] = w_rows[i] & g_rows[i];
  s0f = from_half(scale0);
  o0f = from_half(offset0);
  s1f = from_half(scale1);
  o1f = from_half(offset1);
  const auto dense = dequantize();
  row_sum.assign(rows, 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += dense[r * cols + c];
    row_sum[r] = static_cast<float>(s);
  }
}

std::vector<float> PackedLayer::dequantize() const {
  std::vector<float> out(rows * cols);
  const std::size_t ch = chunks();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c, p = r * ch + c / group_size;
      const float wb = bit_at(weight_bits, i) ? 1.0f : 0.0f;
      out[i] = bit_at(bitmap_bits, i) ? s0f[p] * wb + o0f[p] : s1f[p] * wb + o1f[p];
    }
  }
  return out;
}

std::vector<float> packed_matmul(std::span<const std::uint8_t> codes, std::size_t tokens,
                                 float act_scale, float act_offset, const PackedLayer& layer) {
  const std::size_t m = layer.cols, n = layer.rows, wpr = layer.words_per_row();
  if (codes.size() != tokens * m) throw DimensionError("packed_matmul: code count mismatch");
  const auto seg = chunk_segments(m, layer.group_size);
  std::vector<float> y(tokens * n, 0.0f);
  std::vector<std::uint64_t> planes(4 * wpr);
  const std::vector<std::int32_t> weights{1, 2, 4, 8};
  for (std::size_t t = 0; t < tokens; ++t) {
    std::fill(planes.begin(), planes.end(), 0);
    for (std::size_t c = 0; c < m; ++c) {
      const std::uint8_t v = codes[t * m + c];
      if (v >= 16) throw ContractError("packed_matmul: activation code overflow");
      for (int b = 0; b < 4; ++b)
        if ((v >> b) & 1u) planes[b * wpr + c / 64] |= std::uint64_t{1} << (c % 64);
    }
    std::vector<const std::uint64_t*> ptr{planes.data(), planes.data() + wpr,
                                          planes.data() + 2 * wpr, planes.data() + 3 * wpr};
    float* out = y.data() + t * n;
    accumulate_planes(layer, seg, ptr, weights, act_scale, out);
    for (std::size_t r = 0; r < n; ++r) out[r] -= act_scale * act_offset * layer.row_sum[r];
  }
  return y;
}

std::vector<float> packed_matmul(const ActCodes& codes, const PackedLayer& layer) {
  const std::size_t m = layer.cols, n = layer.rows, wpr = layer.words_per_row();
  if (codes.cols != m) throw DimensionError("packed_matmul: activation width mismatch");
  const std::size_t tokens = codes.rows;
  const auto seg = chunk_segments(m, layer.group_size);
  std::vector<float> y(tokens * n, 0.0f);
  for (std::size_t t = 0; t < tokens; ++t) {
    float* out = y.data() + t * n;
    for (int j = 0; j < 3; ++j) {
      const auto& a = codes.affine[j];
      if (a.count == 0) continue;
      const std::size_t nb = a.scale == 0.0f ? 0 : std::size_t(a.bits);
      std::vector<std::uint64_t> planes((nb + 1) * wpr, 0);
      bool any = false;
      for (std::size_t c = 0; c < m; ++c) {
        const std::size_t i = t * m + c;
        if (codes.region[i] != j) continue;
        any = true;
        const std::uint64_t bit = std::uint64_t{1} << (c % 64);
        planes[nb * wpr + c / 64] |= bit;  // membership mask
        for (std::size_t b = 0; b < nb; ++b)
          if ((codes.level[i] >> b) & 1u) planes[b * wpr + c / 64] |= bit;
      }
      if (!any) continue;
      const std::vector<const std::uint64_t*> mask{planes.data() + nb * wpr};
      if (nb == 0) {
        accumulate_planes(layer, seg, mask, {1}, a.lo, out);  // constant region
        continue;
      }
      std::vector<const std::uint64_t*> lv;
      std::vector<std::int32_t> wt;
      for (std::size_t b = 0; b < nb; ++b) {
        lv.push_back(planes.data() + b * wpr);
        wt.push_back(std::int32_t{1} << b);
      }
      accumulate_planes(layer, seg, lv, wt, a.scale, out);
      accumulate_planes(layer, seg, mask, {1}, -a.scale * a.offset, out);
    }
  }
  return y;
}

std::vector<float> dense_reference(std::span<const std::uint8_t> codes, std::size_t tokens,
                                   float act_scale, float act_offset, const PackedLayer& layer) {
  const std::size_t m = layer.cols, n = layer.rows;
  if (codes.size() != tokens * m) throw DimensionError("dense_reference: code count mismatch");
  const auto w = layer.dequantize();
  std::vector<float> y(tokens * n);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t r = 0; r < n; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < m; ++c)
        acc += double(w[r * m + c]) * ((float(codes[t * m + c]) - act_offset) * act_scale);
      y[t * n + r] = static_cast<float>(acc);
    }
  return y;
}

std::vector<float> naive_dense_matmul(std::span<const float> x, std::size_t tokens,
                                      std::span<const float> w, std::size_t rows,
                                      std::size_t cols) {
  if (x.size() != tokens * cols || w.size() != rows * cols)
    throw DimensionError("naive_dense_matmul: shape mismatch");
  std::vector<float> y(tokens * rows);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t r = 0; r < rows; ++r) {
      float acc = 0.0f;
      for (std::size_t c = 0; c < cols; ++c) acc += x[t * cols + c] * w[r * cols + c];
      y[t * rows + r] = acc;
    }
  return y;
}

MemoryReport memory_report(std::span<const LayerShape> layers, std::uint64_t unquantized_params) {
  MemoryReport rep;
  rep.unquantized_params = unquantized_params;
  for (const auto& shape : layers) {
    if (shape.group_size == 0) throw ContractError("memory_report: group_size must be positive");
    LayerMemory lm;
    lm.name = shape.name;
    lm.rows = shape.rows;
    lm.cols = shape.cols;
    lm.group_size = shape.group_size;
    lm.chunks = shape.rows * ((shape.cols + shape.group_size - 1) / shape.group_size);
    const std::uint64_t n = std::uint64_t(shape.rows) * shape.cols;
    lm.bits_q = n;
    lm.bits_g = n;
    lm.bits_p_actual = lm.chunks * 16 * 4;
    lm.bits_p_nominal = lm.chunks * 17;
    lm.bits_fp = 16 * n;
    rep.weights += n;
    rep.bits_q += lm.bits_q;
    rep.bits_g += lm.bits_g;
    rep.bits_p_actual += lm.bits_p_actual;
    rep.bits_p_nominal += lm.bits_p_nominal;
    rep.bits_fp += lm.bits_fp;
    rep.layers.push_back(lm);
  }
  if (rep.weights == 0) return rep;
  const double w = double(rep.weights), fp = double(rep.bits_fp);
  rep.bits_p_per_weight_actual = double(rep.bits_p_actual) / w;
  rep.bits_p_per_weight_nominal = double(rep.bits_p_nominal) / w;
  rep.ratio_actual = double(rep.bits_q + rep.bits_g + rep.bits_p_actual) / fp;
  rep.ratio_nominal = double(rep.bits_q + rep.bits_g + rep.bits_p_nominal) / fp;
  rep.compression_actual = 1.0 / rep.ratio_actual;
  rep.compression_nominal = 1.0 / rep.ratio_nominal;
  return rep;
}

MemoryReport memory_report(std::span<const PackedLayer* const> layers,
                           std::span<const std::string> names, std::uint64_t unquantized_params) {
  if (names.size() != layers.size()) throw DimensionError("memory_report: one name per layer");
  std::vector<LayerShape> shapes;
  for (std::size_t i = 0; i < layers.size(); ++i)
    shapes.push_back({names[i], layers[i]->rows, layers[i]->cols, layers[i]->group_size});
  return memory_report(std::span<const LayerShape>(shapes), unquantized_params);
}

double BenchResult::median_ms(const std::string& shape, const std::string& kernel) const {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.shape == shape && r.kernel == kernel) v.push_back(r.ms);
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

BenchResult bench_matmul(std::span<const std::pair<std::size_t, std::size_t>> shapes, int reps,
                         std::size_t tokens, std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  BenchResult res;
  std::mt19937_64 rng(seed);
  for (const auto& [n, m] : shapes) {
    const std::size_t words = (n * m + 63) / 64, ch = n * ((m + 127) / 128);
    std::vector<std::uint64_t> wb(words), gb(words);
    for (auto& x : wb) x = rng();
    for (auto& x : gb) x = rng();
    if ((n * m) % 64) {
      const std::uint64_t keep = (std::uint64_t{1} << ((n * m) % 64)) - 1;
      wb.back() &= keep;
      gb.back() &= keep;
    }
    std::uniform_real_distribution<float> sd(0.01f, 0.05f), od(-0.03f, 0.0f);
    std::vector<float> s0(ch), o0(ch), s1(ch), o1(ch);
    for (std::size_t i = 0; i < ch; ++i) s0[i] = sd(rng), o0[i] = od(rng), s1[i] = sd(rng), o1[i] = od(rng);
    const PackedLayer L = PackedLayer::from_storage(n, m, 128, std::move(wb), std::move(gb),
                                                    to_half(s0), to_half(o0), to_half(s1), to_half(o1));
    std::vector<std::uint8_t> codes(tokens * m);
    for (auto& c : codes) c = static_cast<std::uint8_t>(rng() % 16);
    const float as = 0.1f, ao = 8.0f;
    std::vector<float> x(codes.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (float(codes[i]) - ao) * as;
    const auto wd = L.dequantize();

    const auto yp = packed_matmul(codes, tokens, as, ao, L);
    const auto yr = dense_reference(codes, tokens, as, ao, L);
    for (std::size_t i = 0; i < yp.size(); ++i)
      res.max_abs_error = std::max(res.max_abs_error, double(std::fabs(yp[i] - yr[i])));

    const std::string shape = std::to_string(n) + "x" + std::to_string(m);
    volatile float sink = 0.0f;
    for (int rep = 0; rep < reps; ++rep) {
      auto t0 = clock::now();
      auto a = packed_matmul(codes, tokens, as, ao, L);
      auto t1 = clock::now();
      auto b = naive_dense_matmul(x, tokens, wd, n, m);
      auto t2 = clock::now();
      sink = sink + a[0] + b[0];
      res.rows.push_back({shape, "packed", rep,
                          std::chrono::duration<double, std::milli>(t1 - t0).count()});
      res.rows.push_back({shape, "dense", rep,
                          std::chrono::duration<double, std::milli>(t2 - t1).count()});
    }
  }
  return res;
}

std::string bench_csv(const BenchResult& result) {
  std::ostringstream os;
  os << "shape,kernel,rep,ms\n";
  for (const auto& r : result.rows) os << r.shape << ',' << r.kernel << ',' << r.rep << ',' << r.ms << '\n';
  return os.str();
}

}  // namespace lbq

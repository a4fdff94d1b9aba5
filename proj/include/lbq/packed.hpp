#pragma once
// Frozen W(1+1) layers in bit-packed form and the bit-plane matmul kernel.
//
// Storage order: bit i of the weight/bitmap word arrays is element
// (i / cols, i % cols), least significant bit first within each 64-bit word.
// The kernel keeps a second, row-aligned copy so every row starts on a word
// boundary. Affine parameters are stored as IEEE binary16.
//
// For a binary activation plane p restricted to one chunk, the dot product
// with the dequantized weights needs four popcounts:
//   sum W_q p = s0*A + o0*B + s1*(C - A) + o1*(D - B)
//   A = pc(G & Wb & p), B = pc(G & p), C = pc(Wb & p), D = pc(p)
// Plane sums are combined as integers (weighted by 2^b) before the affine
// step, so the integer core is exact.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lbq/act_quant.hpp"
#include "lbq/weight_quant.hpp"

namespace lbq {

std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

/// Packs a binary matrix (values exactly 0 or 1) in the global bit order.
std::vector<std::uint64_t> pack_bits(std::span<const float> binary);
std::vector<float> unpack_bits(std::span<const std::uint64_t> words, std::size_t rows,
                               std::size_t cols);

struct PackedLayer {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = 128;
  std::vector<std::uint64_t> weight_bits;  // global order, ceil(rows*cols/64) words
  std::vector<std::uint64_t> bitmap_bits;
  std::vector<std::uint16_t> scale0, offset0, scale1, offset1;  // binary16, rows x chunks

  std::size_t chunks() const { return (cols + group_size - 1) / group_size; }
  std::size_t words_per_row() const { return (cols + 63) / 64; }

  /// Packs a frozen (or any) QuantLinear using its hard bits.
  static PackedLayer from_quant(const QuantLinear& q);
  /// Builds from stored words; validates sizes and rebuilds kernel tables.
  static PackedLayer from_storage(std::size_t rows, std::size_t cols, std::size_t group_size,
                                  std::vector<std::uint64_t> weight_bits,
                                  std::vector<std::uint64_t> bitmap_bits,
                                  std::vector<std::uint16_t> scale0,
                                  std::vector<std::uint16_t> offset0,
                                  std::vector<std::uint16_t> scale1,
                                  std::vector<std::uint16_t> offset1);

  /// Dense dequantized matrix [rows x cols] from the stored bits and params.
  std::vector<float> dequantize() const;

  // Kernel tables (derived, not serialized).
  std::vector<std::uint64_t> w_rows, g_rows, gw_rows;  // row-aligned
  std::vector<float> s0f, o0f, s1f, o1f;               // decoded params
  std::vector<float> row_sum;                          // sum_c W_q[r][c]

 private:
  void build_tables();
};

/// y[t][r] = sum_c W_q[r][c] * (code[t][c] - act_offset) * act_scale.
/// `codes` is tokens x cols, every code < 16.
std::vector<float> packed_matmul(std::span<const std::uint8_t> codes, std::size_t tokens,
                                 float act_scale, float act_offset, const PackedLayer& layer);

/// Multi-region variant: applies each region's own grid (pass-through
/// regions contribute their constant value).
std::vector<float> packed_matmul(const ActCodes& codes, const PackedLayer& layer);

/// Reference: dequantize both sides, then a plain float triple loop.
std::vector<float> dense_reference(std::span<const std::uint8_t> codes, std::size_t tokens,
                                   float act_scale, float act_offset, const PackedLayer& layer);
/// Naive dense float matmul y = x W^T, x tokens x cols, w rows x cols.
std::vector<float> naive_dense_matmul(std::span<const float> x, std::size_t tokens,
                                      std::span<const float> w, std::size_t rows,
                                      std::size_t cols);

struct LayerMemory {
  std::string name;
  std::size_t rows = 0, cols = 0, group_size = 0, chunks = 0;
  std::uint64_t bits_q = 0;        // 1 per weight
  std::uint64_t bits_g = 0;        // 1 per weight
  std::uint64_t bits_p_actual = 0; // four 16-bit params per chunk
  std::uint64_t bits_p_nominal = 0;  // 16-bit scale + 1-bit offset per chunk
  std::uint64_t bits_fp = 0;       // 16 per weight
};

struct MemoryReport {
  std::vector<LayerMemory> layers;
  std::uint64_t weights = 0;
  std::uint64_t bits_q = 0, bits_g = 0, bits_p_actual = 0, bits_p_nominal = 0, bits_fp = 0;
  double bits_p_per_weight_actual = 0.0;
  double bits_p_per_weight_nominal = 0.0;
  double ratio_actual = 0.0;  // (bits_q + bits_g + bits_p_actual) / bits_fp
  double ratio_nominal = 0.0;   // (bits_q + bits_g + bits_p_nominal) / bits_fp
  double compression_actual = 0.0;
  double compression_nominal = 0.0;
  /// Published per-weight parameter cost. It does not follow from the
  /// 17-bits-per-chunk formula and is carried for comparison only.
  double printed_bits_p = 0.148;
  std::uint64_t unquantized_params = 0;  // embeddings, norms, head
};

struct LayerShape {
  std::string name;
  std::size_t rows = 0, cols = 0, group_size = 128;
};

/// Accounting from shapes alone (no weights needed).
MemoryReport memory_report(std::span<const LayerShape> layers, std::uint64_t unquantized_params);
MemoryReport memory_report(std::span<const PackedLayer* const> layers,
                           std::span<const std::string> names, std::uint64_t unquantized_params);

struct BenchRow {
  std::string shape;
  std::string kernel;
  int rep = 0;
  double ms = 0.0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double max_abs_error = 0.0;  // packed vs dense reference, checked before timing
  double median_ms(const std::string& shape, const std::string& kernel) const;
};

/// Times packed vs naive dense at each shape ("rows x cols"), `tokens`
/// activation rows, `reps` repetitions per kernel.
BenchResult bench_matmul(std::span<const std::pair<std::size_t, std::size_t>> shapes, int reps,
                         std::size_t tokens, std::uint64_t seed);
std::string bench_csv(const BenchResult& result);

}  // namespace lbq

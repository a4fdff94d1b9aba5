#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "lbq/checkpoint.hpp"
#include "lbq/corpus.hpp"
#include "lbq/distill.hpp"
#include "lbq/errors.hpp"
#include "lbq/packed.hpp"
#include "lbq/pipeline.hpp"
#include "lbq/ptq.hpp"
#include "suites.hpp"

using namespace lbq;

namespace {

QuantLinear layer_from(std::size_t rows, std::size_t cols, std::size_t gs, std::vector<float> w,
                       std::vector<float> g, float s0, float o0, float s1, float o1) {
  const std::size_t n = rows * ((cols + gs - 1) / gs);
  return QuantLinear::create(rows, cols, gs, std::move(w), std::move(g), std::vector<float>(n, s0),
                             std::vector<float>(n, o0), std::vector<float>(n, s1), std::vector<float>(n, o1));
}

std::vector<float> random_bits(std::size_t n, std::mt19937_64& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng() & 1);
  return v;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("lbq_test_" + name);
}

Model packed_toy_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 16;
  const Model teacher = Model::init(cfg, 31);
  const auto seqs = sample_windows(markov_corpus(make_markov_table(1), 3000, 2), 4, 16, 3);
  PtqOptions popt;
  popt.group_size = 8;
  Model student = ptq_initialize_model(teacher, seqs, popt);
  freeze_model(student);
  StageConfig sc;
  attach_naive_sites(student, seqs, sc);
  return pack_model(student);
}

}  // namespace

TEST(PackBits, BitZeroIsTheFirstElement) {
  std::vector<float> even(64), odd(64);
  for (std::size_t i = 0; i < 64; ++i) even[i] = float(i % 2 == 0), odd[i] = float(i % 2 == 1);
  EXPECT_EQ(pack_bits(even), (std::vector<std::uint64_t>{0x5555555555555555ull}));
  EXPECT_EQ(pack_bits(odd), (std::vector<std::uint64_t>{0xAAAAAAAAAAAAAAAAull}));
}

TEST(PackBits, ZerosPackToZeroWords) {
  const auto words = pack_bits(std::vector<float>(130, 0.0f));
  EXPECT_EQ(words, (std::vector<std::uint64_t>(3, 0)));
}

TEST(PackBits, RejectsNonBinaryInput) {
  EXPECT_ANY_THROW(pack_bits(std::vector<float>{0.0f, 0.5f}));
}

TEST(PackBits, RoundTripsThousandRandomMatrices) {
  const auto r = oracle::packed_suite(0, 1000, 80, 11);
  EXPECT_EQ(r.roundtrips, 1000);
  EXPECT_EQ(r.roundtrip_failures, 0);
}

TEST(PackedMatmul, IdentityPatternReturnsTheActivations) {
  const std::size_t n = 8;
  std::vector<float> eye(n * n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0f;
  const auto layer = PackedLayer::from_quant(layer_from(n, n, 8, eye, std::vector<float>(n * n, 1.0f), 1, 0, 3, 2));
  std::vector<std::uint8_t> codes(2 * n);
  for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = std::uint8_t((i * 5) % 16);
  const auto y = packed_matmul(codes, 2, 1.0f, 0.0f, layer);
  for (std::size_t i = 0; i < codes.size(); ++i) EXPECT_EQ(y[i], float(codes[i]));
}

TEST(PackedMatmul, ConstantActivationsGiveTheRowSumsOfTheLevels) {
  std::mt19937_64 rng(3);
  const std::size_t rows = 5, cols = 24, gs = 8;
  const auto w = random_bits(rows * cols, rng), g = random_bits(rows * cols, rng);
  const auto layer = PackedLayer::from_quant(layer_from(rows, cols, gs, w, g, 0.5f, -0.25f, 1.5f, 0.75f));
  const std::vector<std::uint8_t> zeros(cols, 0);
  for (float v : packed_matmul(zeros, 1, 0.125f, 0.0f, layer)) EXPECT_EQ(v, 0.0f);
  // Codes 0 with offset -2 dequantize to the constant 2 * scale.
  const auto y = packed_matmul(zeros, 1, 0.125f, -2.0f, layer);
  for (std::size_t r = 0; r < rows; ++r) {
    double expect = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const float b = w[r * cols + c];
      expect += g[r * cols + c] ? 0.5 * b - 0.25 : 1.5 * b + 0.75;
    }
    EXPECT_NEAR(y[r], 0.25 * expect, 1e-5);
  }
}

TEST(PackedMatmul, RandomLayersMatchDenseReference) {
  const auto r = oracle::packed_suite(100, 0, 96, 5);
  EXPECT_EQ(r.instances, 100);
  EXPECT_LT(r.max_abs_error, 1e-3);
}

TEST(PackedMatmul, DoublingScalesQuadruplesOutputWithoutOffsets) {
  std::mt19937_64 rng(7);
  const std::size_t rows = 6, cols = 40, gs = 16;
  const auto w = random_bits(rows * cols, rng), g = random_bits(rows * cols, rng);
  const auto a = PackedLayer::from_quant(layer_from(rows, cols, gs, w, g, 0.75f, 0, 1.25f, 0));
  const auto b = PackedLayer::from_quant(layer_from(rows, cols, gs, w, g, 1.5f, 0, 2.5f, 0));
  std::vector<std::uint8_t> codes(3 * cols);
  for (auto& c : codes) c = std::uint8_t(rng() % 16);
  const auto ya = packed_matmul(codes, 3, 0.25f, 3.0f, a), yb = packed_matmul(codes, 3, 0.5f, 3.0f, b);
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_EQ(yb[i], 4.0f * ya[i]);
}

TEST(PackedMatmul, RejectsCodeOverflow) {
  const auto layer = PackedLayer::from_quant(layer_from(2, 8, 8, std::vector<float>(16, 1.0f),
                                                       std::vector<float>(16, 1.0f), 1, 0, 1, 0));
  std::vector<std::uint8_t> codes(8, 1);
  codes[3] = 16;
  EXPECT_ANY_THROW(packed_matmul(codes, 1, 1.0f, 0.0f, layer));
}

TEST(PackedLayer, DequantizeMatchesQuantLinear) {
  std::mt19937_64 rng(9);
  const QuantLinear q = layer_from(4, 20, 8, random_bits(80, rng), random_bits(80, rng), 0.5f, -1.0f, 0.25f, 2.0f);
  const auto deq = dequantize_grouped(q, DequantMode::Hard);
  EXPECT_EQ(PackedLayer::from_quant(q).dequantize(), std::vector<float>(deq.data().begin(), deq.data().end()));
}

TEST(MemoryReport, SeventeenBitsPerChunkOfOneTwentyEight) {
  const std::vector<LayerShape> shapes{{"proj", 4096, 4096, 128}};
  const auto r = memory_report(shapes, 0);
  EXPECT_DOUBLE_EQ(r.bits_p_per_weight_nominal, 17.0 / 128.0);
  EXPECT_DOUBLE_EQ(r.bits_p_per_weight_actual, 64.0 / 128.0);
  EXPECT_DOUBLE_EQ(r.ratio_nominal, (2.0 + 17.0 / 128.0) / 16.0);
  EXPECT_DOUBLE_EQ(r.ratio_nominal, double(r.bits_q + r.bits_g + r.bits_p_nominal) / double(r.bits_fp));
  EXPECT_NEAR(r.compression_nominal, 7.5, 0.01);
  EXPECT_EQ(r.printed_bits_p, 0.148);
}

TEST(MemoryReport, WholeRowGroupShrinksParameterCost) {
  const std::vector<LayerShape> shapes{{"proj", 64, 512, 512}};
  const auto r = memory_report(shapes, 10);
  EXPECT_DOUBLE_EQ(r.bits_p_per_weight_nominal, 17.0 / 512.0);
  EXPECT_EQ(r.unquantized_params, 10u);
}

TEST(BenchMatmul, CsvHeaderAndCorrectnessCheck) {
  const std::vector<std::pair<std::size_t, std::size_t>> shapes{{64, 128}};
  const auto r = bench_matmul(shapes, 3, 4, 1);
  EXPECT_LT(r.max_abs_error, 1e-3);
  const std::string csv = bench_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "shape,kernel,rep,ms");
  EXPECT_EQ(r.rows.size(), 6u);
  EXPECT_GT(r.median_ms("64x128", "packed"), 0.0);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Model m = packed_toy_model();
  const auto a = temp_path("a.lbq"), b = temp_path("b.lbq");
  save_checkpoint(m, {{"stage", "aar"}}, a.string());
  const Checkpoint ck = load_checkpoint(a.string());
  EXPECT_EQ(ck.stage(), "aar");
  save_checkpoint(ck.model, ck.meta, b.string());
  EXPECT_EQ(read_file(a.string()), read_file(b.string()));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Checkpoint, PackedModelEvaluatesIdenticallyAfterReload) {
  const Model m = packed_toy_model();
  const auto bytes = serialize_records(model_records(m, {}));
  const Checkpoint ck = model_from_records(parse_records(bytes));
  const auto ids = markov_corpus(make_markov_table(1), 200, 9);
  ForwardMode mode;
  mode.acts = ActPath::Forward;
  EXPECT_EQ(perplexity(ck.model, ids, mode), perplexity(m, ids, mode));
  const std::vector<int> window(ids.begin(), ids.begin() + 16);
  const auto la = model_forward(m, window, mode), lb = model_forward(ck.model, window, mode);
  EXPECT_TRUE(std::equal(la.data().begin(), la.data().end(), lb.data().begin()));
}

TEST(Checkpoint, RandomByteFlipsAreDetected) {
  const auto bytes = serialize_records(model_records(packed_toy_model(), {{"stage", "aar"}}));
  std::mt19937_64 rng(13);
  int detected = 0;
  for (int t = 0; t < 100; ++t) {
    auto copy = bytes;
    const std::size_t pos = rng() % copy.size();
    copy[pos] ^= std::uint8_t(1u << (rng() % 8));
    try {
      parse_records(copy);
    } catch (const FormatError&) {
      ++detected;
    }
  }
  EXPECT_EQ(detected, 100);
}

TEST(Checkpoint, RejectsBadMagicVersionAndTruncation) {
  auto bytes = serialize_records({Record{RecordType::Config, "config", {}, 0, {1, 2, 3}}});
  EXPECT_EQ(parse_records(bytes).front().payload, (std::vector<std::uint8_t>{1, 2, 3}));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_records(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(parse_records(bad), FormatError);
  bad.assign(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(parse_records(bad), FormatError);
  EXPECT_THROW(load_checkpoint(temp_path("missing.lbq").string()), IoError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "lbq/corpus.hpp"
#include "lbq/errors.hpp"
#include "lbq/model.hpp"

using namespace lbq;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  c.max_seq_len = 16;
  return c;
}

std::vector<int> random_ids(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> ids(n);
  for (auto& i : ids) i = int(rng() % 256);
  return ids;
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeadsAndZeroExtents) {
  ModelConfig c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.d_ff = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(small_config().validate());
}

TEST(DecoderForward, PreservesShape) {
  const Model m = Model::init(small_config(), 1);
  for (std::size_t seq : {1u, 5u, 16u}) {
    const Tensor x = embed(m, random_ids(seq, seq));
    const Tensor y = decoder_forward(m.layers[0], x, m.cfg, {});
    EXPECT_EQ(y.shape(), x.shape());
  }
}

TEST(DecoderForward, IsDeterministic) {
  const Model m = Model::init(small_config(), 2);
  const Tensor x = embed(m, random_ids(9, 4));
  EXPECT_EQ(values(decoder_forward(m.layers[1], x, m.cfg, {})),
            values(decoder_forward(m.layers[1], x, m.cfg, {})));
}

TEST(DecoderForward, RejectsSequencesLongerThanContext) {
  const Model m = Model::init(small_config(), 2);
  EXPECT_THROW(model_forward(m, random_ids(17, 1)), ContractError);
}

TEST(ModelForward, LogitsShapeIsSeqByVocab) {
  const Model m = Model::init(small_config(), 3);
  EXPECT_EQ(model_forward(m, random_ids(7, 1)).shape(), (Shape{7, 256}));
}

TEST(ModelForward, OutOfVocabularyIdThrows) {
  const Model m = Model::init(small_config(), 3);
  const std::vector<int> ids{1, 256};
  EXPECT_THROW(model_forward(m, ids), ContractError);
}

TEST(ModelForward, IncrementalDecodeMatchesFullSequence) {
  const Model m = Model::init(small_config(), 4);
  const auto ids = random_ids(16, 9);
  const ForwardMode mode{};
  const auto full = values(model_forward(m, ids, mode));
  KVCache cache;
  double worst = 0.0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto step = values(model_forward(m, std::span<const int>(ids).subspan(t, 1), mode, &cache));
    for (std::size_t v = 0; v < 256; ++v) worst = std::max(worst, double(std::fabs(step[v] - full[t * 256 + v])));
  }
  EXPECT_LT(worst, 1e-4);
  EXPECT_EQ(cache.length, ids.size());
}

TEST(ModelForward, FutureTokensDoNotAffectPastLogits) {
  const Model m = Model::init(small_config(), 5);
  const auto a = random_ids(12, 1);
  for (std::size_t t = 0; t + 1 < a.size(); t += 3) {
    auto b = a;
    for (std::size_t j = t + 1; j < b.size(); ++j) b[j] = (b[j] + 17 + int(j)) % 256;
    const auto la = values(model_forward(m, a)), lb = values(model_forward(m, b));
    for (std::size_t i = 0; i < (t + 1) * 256; ++i) ASSERT_EQ(la[i], lb[i]) << "position " << i / 256;
  }
}

TEST(ModelForward, QuantizedKvCacheStoresGridValues) {
  Model m = Model::init(small_config(), 6);
  const auto ids = random_ids(16, 2);
  DecoderBlock block(m.layers[0], m.cfg);
  block.attach_sites({embed(m, ids)}, 4, {2, 4, 2});
  KVCache cache;
  ForwardMode mode;
  mode.acts = ActPath::Forward;
  model_forward(m, ids, mode, &cache);
  // 4 + 16 + 4 codes at most, per stored key tensor.
  std::set<float> distinct(cache.keys[0].data().begin(), cache.keys[0].data().end());
  EXPECT_LE(distinct.size(), 24u);
  EXPECT_GT(distinct.size(), 1u);
}

TEST(ModelForward, TwoLevelQuantizedSlotReproducesFullPrecision) {
  Model m = Model::init(small_config(), 7);
  auto& full = std::get<FullLinear>(m.layers[0].up);
  const std::size_t rows = full.weight.dim(0), cols = full.weight.dim(1);
  // Weights drawn from {-0.25, 0.5}: exactly representable with one group.
  std::mt19937_64 rng(3);
  std::vector<float> w(rows * cols), bits(rows * cols);
  for (std::size_t i = 0; i < w.size(); ++i) {
    bits[i] = float(rng() & 1);
    w[i] = bits[i] ? 0.5f : -0.25f;
  }
  full.weight = Tensor::from({rows, cols}, w);
  const auto ids = random_ids(10, 4);
  const auto reference = values(model_forward(m, ids));

  const std::size_t gs = 8, ch = cols / gs;
  m.layers[0].up = QuantLinear::create(rows, cols, gs, bits, std::vector<float>(rows * cols, 1.0f),
                                       std::vector<float>(rows * ch, 0.75f),
                                       std::vector<float>(rows * ch, -0.25f),
                                       std::vector<float>(rows * ch, 1.0f), std::vector<float>(rows * ch, 0.0f));
  EXPECT_EQ(values(model_forward(m, ids)), reference);
}

TEST(Training, RepeatingCorpusLossDropsBelowUniform) {
  Model m = Model::init(small_config(), 8);
  const auto ids = repeated_pattern("ab", 4000);
  TeacherTrainOptions opt;
  opt.steps = 200;
  opt.batch = 4;
  opt.seq_len = 16;
  const auto losses = train_teacher(m, ids, opt);
  ASSERT_EQ(losses.size(), 200u);
  EXPECT_LT(losses.back(), std::log(256.0));
  EXPECT_LT(losses.back(), 0.1);
}

TEST(Perplexity, UniformLogitsGiveVocabularySize) {
  const auto ids = random_ids(300, 3);
  const double ppl = perplexity([](std::span<const int> w) { return Tensor::zeros({w.size(), 256}); }, ids, 64);
  EXPECT_NEAR(ppl, 256.0, 1e-3);
}

TEST(Perplexity, PerfectPredictorGivesOne) {
  std::vector<int> ids(200);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = int((i * 7) % 256);
  const auto predictor = [](std::span<const int> w) {
    std::vector<float> logits(w.size() * 256, 0.0f);
    for (std::size_t i = 0; i < w.size(); ++i) logits[i * 256 + (w[i] + 7) % 256] = 100.0f;
    return Tensor::from({w.size(), 256}, logits);
  };
  EXPECT_NEAR(perplexity(predictor, ids, 32), 1.0, 1e-9);
}

TEST(Perplexity, HandComputedThreeTokens) {
  const std::vector<int> ids{0, 1, 2};
  // Row 0 gives p(1) = 2/4, row 1 gives p(2) = 3/5.
  const auto fn = [](std::span<const int> w) {
    EXPECT_EQ(w.size(), 2u);
    return Tensor::from({2, 3}, {0.0f, std::log(2.0f), 0.0f, 0.0f, 0.0f, std::log(3.0f)});
  };
  EXPECT_NEAR(perplexity(fn, ids, 8), std::sqrt(2.0 * 5.0 / 3.0), 1e-6);
}

TEST(Perplexity, NeedsTwoTokens) {
  const std::vector<int> one{5};
  EXPECT_THROW(perplexity(Model::init(small_config(), 1), one), ContractError);
}

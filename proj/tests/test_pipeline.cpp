#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

#include "lbq/checkpoint.hpp"
#include "lbq/corpus.hpp"
#include "lbq/errors.hpp"
#include "lbq/pipeline.hpp"

using namespace lbq;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lbq_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A configuration small enough to run every stage in about a second.
std::string tiny_config(const fs::path& out, std::uint64_t seed = 7) {
  return "[run]\nseed = " + std::to_string(seed) + "\nout_dir = " + out.string() +
         "\n[corpus]\nsource = builtin:markov\nlength = 6000\n"
         "[model]\nd_model = 16\nn_heads = 2\nn_layers = 2\nd_ff = 32\nmax_seq_len = 32\n"
         "[teacher]\nsteps = 30\nseq_len = 32\n"
         "[ptq]\ncalib_sequences = 4\ngroup_size = 16\n"
         "[distill]\nsamples = 8\n"
         "[eval]\nmax_tokens = 400\n"
         "[bench]\nshapes = 32x64\nreps = 2\n";
}

LoadedConfig tiny(const fs::path& out, std::uint64_t seed = 7) {
  return load_config_text(tiny_config(out, seed), {}, false);
}

void quiet(Pipeline& p) { p.set_log(nullptr); }

std::string write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.ini";
  std::ofstream(p) << text;
  return p.string();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LBQ_CLI_PATH) + " " + args + " --quiet > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Corpus, RepeatedPattern) {
  EXPECT_EQ(repeated_pattern("ab", 10), (std::vector<int>{97, 98, 97, 98, 97, 98, 97, 98, 97, 98}));
}

TEST(Corpus, SameSeedSameBytes) {
  EXPECT_EQ(ingest_corpus("builtin:markov", 5000, 3), ingest_corpus("builtin:markov", 5000, 3));
  EXPECT_EQ(ingest_corpus("builtin:mixed", 5000, 3), ingest_corpus("builtin:mixed", 5000, 3));
  EXPECT_NE(ingest_corpus("builtin:mixed", 5000, 3), ingest_corpus("builtin:mixed", 5000, 4));
}

// At 1e5 tokens a rarely visited symbol has only ~1500 successors, so the
// estimate is held to a 4-sigma binomial bound; a flat 2% bound is checked
// at 1e6 tokens where it sits well above the sampling noise.
TEST(Corpus, MarkovBigramsMatchTheTransitionTable) {
  const MarkovTable table = make_markov_table(5);
  for (std::size_t length : {100000u, 1000000u}) {
    const auto ids = markov_corpus(table, length, 6);
    std::map<std::pair<int, int>, double> pairs;
    std::map<int, double> from;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      pairs[{ids[i], ids[i + 1]}] += 1.0;
      from[ids[i]] += 1.0;
    }
    for (std::size_t s = 0; s < table.symbols; ++s) {
      const int a = table.byte_of(int(s));
      ASSERT_GT(from[a], 0.0);
      for (std::size_t k = 0; k < table.next[s].size(); ++k) {
        const double p = table.prob[s][k];
        const double emp = pairs[{a, table.byte_of(table.next[s][k])}] / from[a];
        const double tol = length < 1000000u ? 4.0 * std::sqrt(p * (1.0 - p) / from[a]) : 0.02;
        EXPECT_NEAR(emp, p, tol) << length << ": " << s << "->" << table.next[s][k];
      }
    }
  }
}

TEST(Corpus, UnreadableFileIsAnIoError) {
  EXPECT_THROW(ingest_corpus("/nonexistent/corpus.txt", 10, 1), IoError);
}

TEST(Config, ParseSerializeParseIsIdentity) {
  const ConfigFile d = default_config();
  EXPECT_EQ(ConfigFile::parse(d.serialize()), d);
  const ConfigFile user = ConfigFile::parse("# note\n[run]\nseed = 3\n\n[wat]\nlambda = 0.2\n");
  EXPECT_EQ(ConfigFile::parse(user.serialize()), user);
}

TEST(Config, UnknownKeyIsRejected) {
  EXPECT_THROW(load_config_text("[run]\nseed = 1\n[wat]\nlamda = 0.1\n", {}, false), ConfigError);
  EXPECT_THROW(load_config_text("[run]\nseed = 1\n[nope]\nx = 1\n", {}, false), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[run]\nseed 1\n"), ConfigError);
}

TEST(Config, OverridesApplyAfterTheFile) {
  const std::vector<std::string> ov{"wat.lambda=0.2", "model.n_layers=3"};
  const auto c = load_config_text("[run]\nseed = 1\n[wat]\nlambda = 0.01\n", ov, false);
  EXPECT_FLOAT_EQ(c.cfg.wat.lambda, 0.2f);
  EXPECT_EQ(c.cfg.model.n_layers, 3u);
}

TEST(Config, SeedIsMandatoryAndEnvironmentOverridesIt) {
  EXPECT_THROW(load_config_text("[wat]\nlambda = 0.1\n", {}, false), ConfigError);
  ::setenv("LBQ_SEED", "99", 1);
  EXPECT_EQ(load_config_text("[wat]\nlambda = 0.1\n", {}, true).cfg.seed, 99u);
  EXPECT_EQ(load_config_text("[run]\nseed = 5\n", {}, true).cfg.seed, 99u);
  ::unsetenv("LBQ_SEED");
  EXPECT_EQ(load_config_text("[run]\nseed = 5\n", {}, true).cfg.seed, 5u);
}

TEST(Config, HashIgnoresOutputDirectory) {
  const auto a = load_config_text("[run]\nseed = 5\nout_dir = a\n", {}, false);
  const auto b = load_config_text("[run]\nseed = 5\nout_dir = b\n", {}, false);
  const auto c = load_config_text("[run]\nseed = 6\nout_dir = a\n", {}, false);
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_NE(a.hash, c.hash);
  EXPECT_EQ(a.hash.size(), 16u);
}

TEST(Metrics, RecordsRoundTrip) {
  MetricRecord m{"abc-0", "wat", 2, "l_rec", 0.125, 17, "heldout", "A4"};
  EXPECT_EQ(MetricRecord::from_line(m.to_line()), m);
  MetricRecord bare{"abc-1", "eval", std::nullopt, "ppl", std::nan(""), std::nullopt, std::nullopt, std::nullopt};
  EXPECT_EQ(MetricRecord::from_line(bare.to_line()), bare);
  const double tricky = 0.1 + 0.2;
  MetricRecord exact{"r", "s", std::nullopt, "x", tricky, std::nullopt, std::nullopt, std::nullopt};
  EXPECT_EQ(MetricRecord::from_line(exact.to_line()).value, tricky);
  TraceRecord t{"r", "aar", 1, 0, 5, 1.5, 0.25, 0.5, 1.75, 0.9};
  const TraceRecord back = TraceRecord::from_line(t.to_line());
  EXPECT_EQ(back.to_line(), t.to_line());
  EXPECT_THROW(MetricRecord::from_line("{not json"), FormatError);
}

TEST(Pipeline, AarBeforeWatIsAnOrderingError) {
  const auto dir = fresh_dir("order");
  Pipeline p(tiny(dir));
  quiet(p);
  EXPECT_THROW(p.train_aar(), StageOrderError);
  EXPECT_THROW(p.train_wat(), StageOrderError);
  EXPECT_THROW(p.eval(), StageOrderError);
}

TEST(Pipeline, EndToEndOnTinyConfig) {
  const auto dir = fresh_dir("e2e");
  Pipeline p(tiny(dir));
  quiet(p);
  const ReportResult rep = p.run_all();
  ASSERT_EQ(rep.ablation.size(), 4u);
  for (const auto& r : rep.ablation) EXPECT_TRUE(std::isfinite(r.ppl_heldout));
  EXPECT_TRUE(fs::exists(dir / "ablation.csv"));
  for (const char* f : {files::kTeacher, files::kPtq, files::kWat, files::kAar, files::kPacked})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(load_checkpoint((dir / files::kWat).string()).stage(), "train-wat");

  // Teacher evaluation equals the model's own perplexity on the same tokens.
  const auto& c = p.cfg();
  const auto split = split_corpus(ingest_corpus(c.corpus_source, c.corpus_length, c.seed), c.train_fraction);
  const std::vector<int> held(split.heldout.begin(),
                              split.heldout.begin() + std::min(c.eval_max_tokens, split.heldout.size()));
  const double direct = perplexity(load_checkpoint((dir / files::kTeacher).string()).model, held);
  const auto rows = p.eval();
  EXPECT_EQ(rows.front().model, "pretrain-teacher");
  EXPECT_EQ(rows.front().ppl_heldout, direct);

  // Report aggregates are the mean of the trace records they summarize.
  const auto traces = read_traces((dir / "traces.jsonl").string());
  for (const auto& s : rep.layers) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : traces)
      if (t.stage == s.stage && t.layer == s.layer && t.run_id == p.run_id()) sum += t.l_rec, ++n;
    ASSERT_EQ(n, s.steps);
    EXPECT_NEAR(s.mean_l_rec, sum / double(n), 1e-9);
  }
}

TEST(Pipeline, RepeatedEvalGivesSameValuesUnderNewRunIds) {
  const auto dir = fresh_dir("rerun");
  {
    Pipeline p(tiny(dir));
    quiet(p);
    p.pretrain_teacher();
  }
  std::vector<std::string> ids;
  std::vector<double> ppl;
  for (int i = 0; i < 2; ++i) {
    Pipeline p(tiny(dir));
    quiet(p);
    ppl.push_back(p.eval().front().ppl_heldout);
    ids.push_back(p.run_id());
  }
  EXPECT_EQ(ppl[0], ppl[1]);
  EXPECT_NE(ids[0], ids[1]);
  const auto metrics = read_metrics((dir / "metrics.jsonl").string());
  std::map<std::string, double> by_run;
  for (const auto& m : metrics)
    if (m.metric == "ppl" && m.split == "heldout") by_run[m.run_id] = m.value;
  EXPECT_EQ(by_run.at(ids[0]), by_run.at(ids[1]));
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  const std::string cfg = write_config(dir, tiny_config(dir));
  EXPECT_EQ(run_cli("bench --config " + cfg), 0);
  EXPECT_EQ(run_cli("train-aar --config " + cfg), 3);
  EXPECT_EQ(run_cli("bench --config " + cfg + " --override wat.lamda=1"), 2);
  EXPECT_EQ(run_cli("no-such-command --config " + cfg), 2);
  EXPECT_EQ(run_cli("bench --config " + (dir / "missing.ini").string()), 5);
  EXPECT_EQ(run_cli("pretrain-teacher --config " + cfg), 0);
  EXPECT_TRUE(fs::exists(dir / files::kTeacher));
}

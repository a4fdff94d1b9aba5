#include "lbq/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "lbq/errors.hpp"

namespace lbq {

double unit_uniform(std::uint64_t bits) { return double(bits >> 11) * 0x1.0p-53; }

namespace {

int sample(const std::vector<double>& prob, std::mt19937_64& rng) {
  double u = unit_uniform(rng());
  for (std::size_t i = 0; i + 1 < prob.size(); ++i) {
    if (u < prob[i]) return int(i);
    u -= prob[i];
  }
  return int(prob.size()) - 1;
}

std::size_t below(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(unit_uniform(rng()) * double(n));
}

const std::array<const char*, 8> kPhrases{
    "the quick brown fox. ", "bits and bytes. ", "one two three four. ", "lorem ipsum. ",
    "x=1; y=2; z=x+y; ",    "hello world! ",    "abcabcabc. ",         "to be or not to be. "};

}  // namespace

std::vector<int> repeated_pattern(const std::string& pattern, std::size_t length) {
  if (pattern.empty()) throw ContractError("repeat pattern must not be empty");
  std::vector<int> out(length);
  for (std::size_t i = 0; i < length; ++i)
    out[i] = static_cast<unsigned char>(pattern[i % pattern.size()]);
  return out;
}

MarkovTable make_markov_table(std::uint64_t seed, std::size_t symbols, std::size_t successors) {
  if (symbols < 2 || successors < 1 || successors > symbols || symbols > 26)
    throw ContractError("markov table: need 1 <= successors <= symbols <= 26");
  std::mt19937_64 rng(seed);
  MarkovTable t;
  t.symbols = symbols;
  for (std::size_t s = 0; s < symbols; ++s) {
    std::vector<int> all(symbols);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t i = 0; i < successors; ++i) std::swap(all[i], all[i + below(rng, symbols - i)]);
    all.resize(successors);
    std::vector<double> w(successors);
    double total = 0.0;
    for (auto& x : w) total += (x = 0.2 + unit_uniform(rng()));
    for (auto& x : w) x /= total;
    t.next.push_back(all);
    t.prob.push_back(w);
  }
  return t;
}

std::vector<int> markov_corpus(const MarkovTable& table, std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  out.reserve(length);
  int s = 0;
  for (std::size_t i = 0; i < length; ++i) {
    out.push_back(table.byte_of(s));
    s = table.next[s][sample(table.prob[s], rng)];
  }
  return out;
}

std::vector<int> mixed_corpus(std::size_t length, std::uint64_t seed) {
  const MarkovTable table = make_markov_table(seed ^ 0x5eedu);
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  out.reserve(length + 128);
  int s = 0;
  while (out.size() < length) {
    if (unit_uniform(rng()) < 0.5) {
      const std::size_t n = 32 + below(rng, 65);
      for (std::size_t i = 0; i < n; ++i) {
        out.push_back(table.byte_of(s));
        s = table.next[s][sample(table.prob[s], rng)];
      }
      out.push_back(' ');
    } else {
      const std::string p = kPhrases[below(rng, kPhrases.size())];
      const std::size_t reps = 1 + below(rng, 3);
      for (std::size_t r = 0; r < reps; ++r)
        for (char c : p) out.push_back(static_cast<unsigned char>(c));
    }
  }
  out.resize(length);
  return out;
}

std::vector<int> ingest_corpus(const std::string& source, std::size_t length, std::uint64_t seed) {
  const std::string repeat = "builtin:repeat:";
  if (source.rfind(repeat, 0) == 0) return repeated_pattern(source.substr(repeat.size()), length);
  if (source == "builtin:markov") return markov_corpus(make_markov_table(seed), length, seed + 1);
  if (source == "builtin:mixed") return mixed_corpus(length, seed);
  if (source.rfind("builtin:", 0) == 0) throw ConfigError("unknown builtin corpus '" + source + "'");
  std::ifstream in(source, std::ios::binary);
  if (!in) throw IoError("cannot read corpus '" + source + "'");
  std::vector<int> out;
  for (auto it = std::istreambuf_iterator<char>(in); it != std::istreambuf_iterator<char>(); ++it)
    out.push_back(static_cast<unsigned char>(*it));
  return out;
}

CorpusSplit split_corpus(const std::vector<int>& ids, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ContractError("train fraction must lie in (0, 1)");
  const auto cut = static_cast<std::size_t>(double(ids.size()) * train_fraction);
  return {{ids.begin(), ids.begin() + cut}, {ids.begin() + cut, ids.end()}};
}

std::vector<std::vector<int>> sample_windows(const std::vector<int>& ids, std::size_t count,
                                             std::size_t length, std::uint64_t seed) {
  if (ids.size() < length) throw ContractError("corpus shorter than one window");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = below(rng, ids.size() - length + 1);
    out.emplace_back(ids.begin() + s, ids.begin() + s + length);
  }
  return out;
}

}  // namespace lbq

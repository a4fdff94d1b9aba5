#pragma once
// Byte-level corpora. Builtin generators are deterministic given a seed.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace lbq {

/// `pattern` repeated and cut to `length` bytes.
std::vector<int> repeated_pattern(const std::string& pattern, std::size_t length);

/// First-order chain over `symbols` byte values starting at 'a'; each symbol
/// has `successors` distinct next symbols with fixed probabilities.
struct MarkovTable {
  std::size_t symbols = 16;
  std::vector<std::vector<int>> next;       // symbol indices
  std::vector<std::vector<double>> prob;    // same shape, rows sum to 1
  int byte_of(int symbol) const { return 'a' + symbol; }
};

MarkovTable make_markov_table(std::uint64_t seed, std::size_t symbols = 16,
                              std::size_t successors = 4);
std::vector<int> markov_corpus(const MarkovTable& table, std::size_t length, std::uint64_t seed);

/// Markov text interleaved with short fixed phrases, some repeated.
std::vector<int> mixed_corpus(std::size_t length, std::uint64_t seed);

/// `source` is "builtin:repeat:<pattern>", "builtin:markov", "builtin:mixed"
/// or a file path (raw bytes; `length` ignored). IoError if unreadable.
std::vector<int> ingest_corpus(const std::string& source, std::size_t length, std::uint64_t seed);

struct CorpusSplit {
  std::vector<int> train, heldout;
};
/// First `train_fraction` of the stream for training, the rest held out.
CorpusSplit split_corpus(const std::vector<int>& ids, double train_fraction = 0.9);

/// `count` windows of `length` tokens at seeded random offsets.
std::vector<std::vector<int>> sample_windows(const std::vector<int>& ids, std::size_t count,
                                             std::size_t length, std::uint64_t seed);

/// Uniform double in [0, 1) from 53 random bits; stable across standard libraries.
double unit_uniform(std::uint64_t bits);

}  // namespace lbq

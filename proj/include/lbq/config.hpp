#pragma once
// Sectioned key/value configuration:
//
//   # comment
//   [section]
//   key = value
//
// Sections and keys keep their order, so parse -> serialize -> parse is the
// identity and the serialized text can be hashed.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lbq/distill.hpp"
#include "lbq/model.hpp"
#include "lbq/ptq.hpp"

namespace lbq {

class ConfigFile {
 public:
  using Entries = std::vector<std::pair<std::string, std::string>>;

  /// ConfigError on malformed lines or duplicate keys.
  static ConfigFile parse(const std::string& text);
  static ConfigFile load(const std::string& path);  // IoError, ConfigError
  std::string serialize() const;

  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  void set(const std::string& section, const std::string& key, const std::string& value);
  /// "section.key=value".
  void apply_override(const std::string& assignment);
  bool has(const std::string& section, const std::string& key) const { return get(section, key).has_value(); }

  const std::vector<std::pair<std::string, Entries>>& sections() const { return sections_; }
  bool operator==(const ConfigFile&) const = default;

 private:
  std::vector<std::pair<std::string, Entries>> sections_;
};

/// Every recognized key with its default value.
ConfigFile default_config();

/// Defaults overlaid with `user`; unknown sections/keys are a ConfigError.
ConfigFile merge_with_defaults(const ConfigFile& user);

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string metrics_file, traces_file, timing_file;

  std::string corpus_source;
  std::size_t corpus_length = 0;
  double train_fraction = 0.9;

  ModelConfig model;
  TeacherTrainOptions teacher;

  std::size_t calib_sequences = 16;
  PtqOptions ptq;

  std::size_t distill_samples = 256;
  TargetMode targets = TargetMode::Teacher;
  StageConfig wat, aar;

  std::size_t eval_max_tokens = 16384;
  bool joint_enabled = true;
  bool rtn_branch = true;

  std::vector<std::pair<std::size_t, std::size_t>> bench_shapes;
  int bench_reps = 20;
  std::size_t bench_tokens = 1;

  std::string path(const std::string& file) const;
};

/// Validates and converts a merged config. A seed must be given explicitly
/// (in the file, through an override or LBQ_SEED).
PipelineConfig pipeline_config(const ConfigFile& merged);

/// FNV-1a 64 of the text, as 16 hex digits.
std::string config_hash(const std::string& text);

}  // namespace lbq

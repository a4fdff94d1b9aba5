#pragma once
// Stage commands over one output directory.
//
//   pretrain-teacher  -> teacher.lbq
//   ptq-init          teacher.lbq -> ptq.lbq (+ ptq-rtn.lbq)
//   train-wat         ptq.lbq -> wat.lbq (+ wat-rtn.lbq from ptq-rtn.lbq)
//   train-aar         wat.lbq -> aar.lbq, packed.lbq
//   eval              perplexity of every checkpoint present
//   joint-probe       ptq.lbq -> metrics only
//   bench             no inputs; bench.csv
//   report            metrics + traces -> CSV tables
//
// Each checkpoint carries its producing command as the "stage" meta entry,
// and consumers check it.

#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lbq/checkpoint.hpp"
#include "lbq/config.hpp"
#include "lbq/metrics.hpp"
#include "lbq/packed.hpp"

namespace lbq {

struct LoadedConfig {
  ConfigFile merged;
  PipelineConfig cfg;
  std::string hash;  // of the merged config with run.out_dir blanked
};

/// Parses, applies overrides then LBQ_SEED (when `use_env`), merges with
/// defaults and validates.
LoadedConfig load_config_text(const std::string& text, std::span<const std::string> overrides = {},
                              bool use_env = true);
LoadedConfig load_config(const std::string& path, std::span<const std::string> overrides = {},
                         bool use_env = true);

enum class Command { PretrainTeacher, PtqInit, TrainWat, TrainAar, Eval, Bench, JointProbe, Report, RunAll };
Command parse_command(const std::string& name);  // ConfigError
const char* command_name(Command c);

/// Checkpoint file names inside out_dir.
namespace files {
inline constexpr const char* kTeacher = "teacher.lbq";
inline constexpr const char* kPtq = "ptq.lbq";
inline constexpr const char* kPtqRtn = "ptq-rtn.lbq";
inline constexpr const char* kWat = "wat.lbq";
inline constexpr const char* kWatRtn = "wat-rtn.lbq";
inline constexpr const char* kAar = "aar.lbq";
inline constexpr const char* kPacked = "packed.lbq";
inline constexpr const char* kBench = "bench.csv";
}  // namespace files

/// Replaces every QuantLinear slot with its packed form (acts kept).
Model pack_model(const Model& model);

/// Per-layer shapes of a 32-layer LLaMA-7B style decoder.
std::vector<LayerShape> llama7b_shapes(std::size_t group_size = 128);

struct EvalRow {
  std::string model;  // checkpoint label
  std::string mode;   // "A16" or "A4"
  double ppl_train = 0.0;
  double ppl_heldout = 0.0;
};

struct JointOutcome {
  bool diverged = false;
  int diverged_layer = -1;
  double final_mean_l_rec = 0.0;
};

struct LayerSummary {
  std::string stage;
  int layer = 0;
  std::size_t steps = 0;
  double mean_l_rec = 0.0;  // over every trace step
  double final_epoch_l_rec = 0.0;
  double l_rec_before = 0.0, l_rec_after = 0.0;
  double l_reg_initial = 0.0, l_reg_final = 0.0;
  double polarization = 0.0;
};

struct ReportResult {
  std::vector<EvalRow> ablation;       // init, +WAT, +naive-A4, +AAR
  std::vector<EvalRow> init_ablation;  // EM -> WAT, RTN -> WAT (when present)
  std::vector<LayerSummary> layers;
  double decoupled_mean_l_rec = 0.0;
  std::optional<JointOutcome> joint;
  double wat_polarization = 0.0;  // share of polarized G entries, whole model
  double wat_l_reg_ratio = 0.0;   // sum final / sum initial over layers
  MemoryReport toy_memory, llama_memory;
  std::vector<std::string> written;  // CSV paths
};

/// Owns one run id; every command emits under it.
class Pipeline {
 public:
  explicit Pipeline(LoadedConfig config);

  const PipelineConfig& cfg() const { return config_.cfg; }
  const std::string& run_id() const { return sink_.run_id(); }

  void pretrain_teacher();
  void ptq_init();
  void train_wat();
  void train_aar();
  std::vector<EvalRow> eval();
  BenchResult bench();
  JointOutcome joint_probe();
  ReportResult report();
  /// Every command in order; a diverging joint probe is recorded, not thrown.
  ReportResult run_all();

  /// Runs a single command. Returns true when the joint probe diverged.
  bool run(Command c);

  /// Progress lines go here (stderr by default, nullptr silences them).
  void set_log(std::ostream* log);

 private:
  struct Data {
    std::vector<int> train, heldout;
    std::vector<std::vector<int>> calib, distill;
  };
  const Data& data();
  Checkpoint require(const char* file, const char* stage, const char* consumer) const;
  void save(const Model& m, const char* stage, const char* file);
  DistillOptions distill_options(const char* stage);
  EvalRow evaluate(const std::string& label, const Model& m, const ForwardMode& mode);
  void note(const std::string& line);

  LoadedConfig config_;
  MetricsSink sink_;
  std::optional<Data> data_;
  std::ostream* log_ = &std::cerr;
};

}  // namespace lbq

#pragma once
// Line-delimited JSON records. One writer per file; every emit appends a
// complete line and flushes.
//
// Wall-clock times never enter the metrics or trace files (those must be
// reproducible byte for byte); they go to a separate timing file.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lbq/distill.hpp"

namespace lbq {

struct MetricRecord {
  std::string run_id;
  std::string stage;
  std::optional<int> layer;
  std::string metric;
  double value = 0.0;  // NaN/inf are written as null and read back as NaN
  std::optional<long long> step;
  std::optional<std::string> split;
  std::optional<std::string> mode;

  std::string to_line() const;
  static MetricRecord from_line(const std::string& line);  // FormatError
  bool operator==(const MetricRecord& o) const;  // NaN compares equal to NaN
};

struct TraceRecord {
  std::string run_id;
  std::string stage;
  int layer = 0;
  int epoch = 0;
  int step = 0;
  double l_rec = 0.0, l_reg = 0.0, beta = 0.0, loss = 0.0, polarization = 0.0;

  std::string to_line() const;
  static TraceRecord from_line(const std::string& line);
};

struct TimingRecord {
  std::string run_id;
  std::string stage;
  std::optional<int> layer;
  double wall_ms = 0.0;

  std::string to_line() const;
};

/// Appends lines to `path`, creating it when missing (IoError otherwise).
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path);
  void write(const std::string& line);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

std::vector<MetricRecord> read_metrics(const std::string& path);
std::vector<TraceRecord> read_traces(const std::string& path);

/// "<hash>-<n>", n = number of distinct run ids with this hash already in
/// the metrics file. A fresh file gives "<hash>-0".
std::string next_run_id(const std::string& metrics_path, const std::string& config_hash);

/// Emits all three kinds of record under one run id.
class MetricsSink {
 public:
  MetricsSink(const std::string& metrics_path, const std::string& traces_path,
              const std::string& timing_path, std::string run_id);

  const std::string& run_id() const { return run_id_; }
  void metric(const std::string& stage, const std::string& name, double value,
              std::optional<int> layer = std::nullopt, std::optional<std::string> split = std::nullopt,
              std::optional<std::string> mode = std::nullopt,
              std::optional<long long> step = std::nullopt);
  /// Step records plus per-layer summary metrics and the wall time, under
  /// `label` (the trace's own stage name when empty).
  void layer_trace(const LayerTrace& trace, const std::string& label = {});
  void timing(const std::string& stage, double wall_ms, std::optional<int> layer = std::nullopt);

 private:
  std::string run_id_;
  JsonlWriter metrics_, traces_, timing_;
};

}  // namespace lbq

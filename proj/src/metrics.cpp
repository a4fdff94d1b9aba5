#include "lbq/metrics.hpp"

#include <cmath>
#include <limits>
#include <set>

#include <json.hpp>

#include "lbq/errors.hpp"

namespace lbq {

using nlohmann::ordered_json;

namespace {

ordered_json number(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

double to_number(const ordered_json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

ordered_json parse(const std::string& line) {
  try {
    return ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad JSON line: ") + e.what());
  }
}

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

template <class F>
auto field(const char* what, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad ") + what + " record: " + e.what());
  }
}

}  // namespace

std::string MetricRecord::to_line() const {
  ordered_json j;
  j["run_id"] = run_id;
  j["stage"] = stage;
  if (layer) j["layer"] = *layer;
  j["metric"] = metric;
  j["value"] = number(value);
  if (step) j["step"] = *step;
  if (split) j["split"] = *split;
  if (mode) j["mode"] = *mode;
  return j.dump();
}

MetricRecord MetricRecord::from_line(const std::string& line) {
  const auto j = parse(line);
  return field("metric", [&] {
    MetricRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.stage = j.at("stage").get<std::string>();
    if (j.contains("layer")) r.layer = j["layer"].get<int>();
    r.metric = j.at("metric").get<std::string>();
    r.value = to_number(j.at("value"));
    if (j.contains("step")) r.step = j["step"].get<long long>();
    if (j.contains("split")) r.split = j["split"].get<std::string>();
    if (j.contains("mode")) r.mode = j["mode"].get<std::string>();
    return r;
  });
}

bool MetricRecord::operator==(const MetricRecord& o) const {
  return run_id == o.run_id && stage == o.stage && layer == o.layer && metric == o.metric &&
         same(value, o.value) && step == o.step && split == o.split && mode == o.mode;
}

std::string TraceRecord::to_line() const {
  ordered_json j;
  j["run_id"] = run_id;
  j["stage"] = stage;
  j["layer"] = layer;
  j["epoch"] = epoch;
  j["step"] = step;
  j["l_rec"] = number(l_rec);
  j["l_reg"] = number(l_reg);
  j["beta"] = number(beta);
  j["loss"] = number(loss);
  j["polarization"] = number(polarization);
  return j.dump();
}

TraceRecord TraceRecord::from_line(const std::string& line) {
  const auto j = parse(line);
  return field("trace", [&] {
    TraceRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.stage = j.at("stage").get<std::string>();
    r.layer = j.at("layer").get<int>();
    r.epoch = j.at("epoch").get<int>();
    r.step = j.at("step").get<int>();
    r.l_rec = to_number(j.at("l_rec"));
    r.l_reg = to_number(j.at("l_reg"));
    r.beta = to_number(j.at("beta"));
    r.loss = to_number(j.at("loss"));
    r.polarization = to_number(j.at("polarization"));
    return r;
  });
}

std::string TimingRecord::to_line() const {
  ordered_json j;
  j["run_id"] = run_id;
  j["stage"] = stage;
  if (layer) j["layer"] = *layer;
  j["wall_ms"] = number(wall_ms);
  return j.dump();
}

JsonlWriter::JsonlWriter(const std::string& path) : path_(path), out_(path, std::ios::app) {
  if (!out_) throw IoError("cannot open '" + path + "' for appending");
}

void JsonlWriter::write(const std::string& line) {
  out_ << line << '\n';
  out_.flush();
  if (!out_) throw IoError("write to '" + path_ + "' failed");
}

namespace {

template <class R>
std::vector<R> read_lines(const std::string& path) {
  std::vector<R> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(R::from_line(line));
  return out;
}

}  // namespace

std::vector<MetricRecord> read_metrics(const std::string& path) { return read_lines<MetricRecord>(path); }
std::vector<TraceRecord> read_traces(const std::string& path) { return read_lines<TraceRecord>(path); }

std::string next_run_id(const std::string& metrics_path, const std::string& config_hash) {
  std::set<std::string> seen;
  for (const auto& r : read_metrics(metrics_path))
    if (r.run_id.rfind(config_hash + "-", 0) == 0) seen.insert(r.run_id);
  return config_hash + "-" + std::to_string(seen.size());
}

MetricsSink::MetricsSink(const std::string& metrics_path, const std::string& traces_path,
                         const std::string& timing_path, std::string run_id)
    : run_id_(std::move(run_id)), metrics_(metrics_path), traces_(traces_path), timing_(timing_path) {}

void MetricsSink::metric(const std::string& stage, const std::string& name, double value,
                         std::optional<int> layer, std::optional<std::string> split,
                         std::optional<std::string> mode, std::optional<long long> step) {
  MetricRecord r{run_id_, stage, layer, name, value, step, std::move(split), std::move(mode)};
  metrics_.write(r.to_line());
}

void MetricsSink::layer_trace(const LayerTrace& t, const std::string& label) {
  const std::string stage = label.empty() ? std::string(stage_name(t.stage)) : label;
  for (const auto& s : t.steps) {
    TraceRecord r{run_id_, stage, s.layer, s.epoch, s.step, s.l_rec, s.l_reg, s.beta, s.loss,
                  s.polarization};
    traces_.write(r.to_line());
  }
  metric(stage, "l_rec_before", t.eval_before, t.layer);
  metric(stage, "l_rec_after", t.eval_after, t.layer);
  metric(stage, "final_epoch_l_rec", t.final_epoch_l_rec, t.layer);
  metric(stage, "l_reg_initial", t.l_reg_initial, t.layer);
  metric(stage, "l_reg_final", t.l_reg_final, t.layer);
  if (!t.steps.empty()) metric(stage, "polarization", t.steps.back().polarization, t.layer);
  metric(stage, "diverged", t.diverged ? 1.0 : 0.0, t.layer);
  timing(stage, t.wall_ms, t.layer);
}

void MetricsSink::timing(const std::string& stage, double wall_ms, std::optional<int> layer) {
  timing_.write(TimingRecord{run_id_, stage, layer, wall_ms}.to_line());
}

}  // namespace lbq

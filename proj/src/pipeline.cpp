#include "lbq/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "lbq/corpus.hpp"
#include "lbq/errors.hpp"
#include "lbq/ptq.hpp"

namespace lbq {

namespace fs = std::filesystem;

LoadedConfig load_config_text(const std::string& text, std::span<const std::string> overrides,
                              bool use_env) {
  ConfigFile user = ConfigFile::parse(text);
  for (const auto& o : overrides) user.apply_override(o);
  if (use_env)
    if (const char* env = std::getenv("LBQ_SEED"); env && *env) user.set("run", "seed", env);
  LoadedConfig out;
  out.merged = merge_with_defaults(user);
  out.cfg = pipeline_config(out.merged);
  // The output directory does not influence any result, so runs in
  // different directories share a hash (and produce identical files).
  ConfigFile hashed = out.merged;
  hashed.set("run", "out_dir", "");
  out.hash = config_hash(hashed.serialize());
  return out;
}

LoadedConfig load_config(const std::string& path, std::span<const std::string> overrides,
                         bool use_env) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return load_config_text(os.str(), overrides, use_env);
}

namespace {

constexpr std::array<std::pair<Command, const char*>, 9> kCommands{{
    {Command::PretrainTeacher, "pretrain-teacher"},
    {Command::PtqInit, "ptq-init"},
    {Command::TrainWat, "train-wat"},
    {Command::TrainAar, "train-aar"},
    {Command::Eval, "eval"},
    {Command::Bench, "bench"},
    {Command::JointProbe, "joint-probe"},
    {Command::Report, "report"},
    {Command::RunAll, "run-all"},
}};

// Labels used for checkpoints' stage tags and metric records.
constexpr const char* kTeacherStage = "pretrain-teacher";
constexpr const char* kPtqStage = "ptq-init";
constexpr const char* kPtqRtnStage = "ptq-init-rtn";
constexpr const char* kWatStage = "train-wat";
constexpr const char* kWatRtnStage = "train-wat-rtn";
constexpr const char* kAarStage = "train-aar";
constexpr const char* kNaiveLabel = "wat+naive-a4";
constexpr const char* kPackedLabel = "packed";
constexpr const char* kJointStage = "joint-probe";

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::vector<int> head_tokens(const std::vector<int>& ids, std::size_t n) {
  return {ids.begin(), ids.begin() + std::ptrdiff_t(std::min(n, ids.size()))};
}

MetricsSink make_sink(const LoadedConfig& c) {
  std::error_code ec;
  if (!c.cfg.out_dir.empty()) fs::create_directories(c.cfg.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + c.cfg.out_dir + "': " + ec.message());
  const auto& p = c.cfg;
  return MetricsSink(p.path(p.metrics_file), p.path(p.traces_file), p.path(p.timing_file),
                     next_run_id(p.path(p.metrics_file), c.hash));
}

double model_polarization(const Model& m) {
  double hit = 0.0, total = 0.0;
  for (const auto& layer : m.layers)
    for (const auto* s : layer.slots())
      if (const auto* q = std::get_if<QuantLinear>(s)) {
        hit += polarization_fraction(q->group.data()) * double(q->group.size());
        total += double(q->group.size());
      }
  return total > 0 ? hit / total : 0.0;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header) : path_(path), out_(path) {
    if (!out_) throw IoError("cannot write '" + path + "'");
    out_ << header << '\n';
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    if (!out_) throw IoError("write to '" + path_ + "' failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace

Command parse_command(const std::string& name) {
  for (const auto& [c, n] : kCommands)
    if (name == n) return c;
  throw ConfigError("unknown command '" + name + "'");
}

const char* command_name(Command c) {
  for (const auto& [k, n] : kCommands)
    if (k == c) return n;
  return "?";
}

Model pack_model(const Model& model) {
  Model out = model.clone();
  for (auto& layer : out.layers)
    for (auto* s : layer.slots())
      if (const auto* q = std::get_if<QuantLinear>(s)) *s = PackedLayer::from_quant(*q);
  return out;
}

std::vector<LayerShape> llama7b_shapes(std::size_t group_size) {
  std::vector<LayerShape> out;
  for (int l = 0; l < 32; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* n : {"q", "k", "v", "o"}) out.push_back({p + n, 4096, 4096, group_size});
    out.push_back({p + "up", 11008, 4096, group_size});
    out.push_back({p + "gate", 11008, 4096, group_size});
    out.push_back({p + "down", 4096, 11008, group_size});
  }
  return out;
}

Pipeline::Pipeline(LoadedConfig config) : config_(std::move(config)), sink_(make_sink(config_)) {}

const Pipeline::Data& Pipeline::data() {
  if (!data_) {
    const auto& c = cfg();
    const auto ids = ingest_corpus(c.corpus_source, c.corpus_length, c.seed);
    auto split = split_corpus(ids, c.train_fraction);
    if (split.train.size() < c.model.max_seq_len + 1 || split.heldout.size() < 2)
      throw ConfigError("corpus too short for the configured sequence length");
    Data d;
    d.calib = sample_windows(split.train, c.calib_sequences, c.model.max_seq_len, c.seed + 10);
    d.distill = sample_windows(split.train, c.distill_samples, c.model.max_seq_len, c.seed + 11);
    d.train = std::move(split.train);
    d.heldout = std::move(split.heldout);
    data_ = std::move(d);
  }
  return *data_;
}

Checkpoint Pipeline::require(const char* file, const char* stage, const char* consumer) const {
  const std::string path = cfg().path(file);
  if (!fs::exists(path))
    throw StageOrderError(std::string(consumer) + " requires the output of " + stage + " (" +
                          path + " is missing)");
  Checkpoint ck = load_checkpoint(path);
  if (ck.stage() != stage)
    throw StageOrderError(std::string(consumer) + " expects " + file + " from " + stage +
                          ", found a checkpoint tagged '" + ck.stage() + "'");
  return ck;
}

void Pipeline::save(const Model& m, const char* stage, const char* file) {
  const Meta meta{{"stage", stage}, {"config_hash", config_.hash}, {"seed", std::to_string(cfg().seed)}};
  save_checkpoint(m, meta, cfg().path(file));
}

void Pipeline::set_log(std::ostream* log) { log_ = log; }

void Pipeline::note(const std::string& line) {
  if (log_) *log_ << "[" << run_id() << "] " << line << std::endl;
}

DistillOptions Pipeline::distill_options(const char* stage) {
  DistillOptions opt;
  opt.targets = cfg().targets;
  const std::string label = stage;
  opt.on_layer = [this, label](const LayerTrace& t) {
    sink_.layer_trace(t, label);
    note(label + " layer " + std::to_string(t.layer) + ": L_rec " + fmt(t.eval_before) + " -> " +
         fmt(t.eval_after) + (t.diverged ? " (diverged)" : ""));
  };
  return opt;
}

void Pipeline::pretrain_teacher() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& d = data();
  Model teacher = Model::init(cfg().model, cfg().seed);
  const auto losses = train_teacher(teacher, d.train, cfg().teacher);
  for (std::size_t i = 0; i < losses.size(); ++i)
    sink_.metric(kTeacherStage, "train_ce", losses[i], std::nullopt, "train", std::nullopt,
                 static_cast<long long>(i));
  save(teacher, kTeacherStage, files::kTeacher);
  note(std::string("teacher trained, final CE ") + (losses.empty() ? "n/a" : fmt(losses.back())));
  sink_.timing(kTeacherStage, elapsed_ms(t0));
}

void Pipeline::ptq_init() {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint teacher = require(files::kTeacher, kTeacherStage, kPtqStage);
  const auto& d = data();

  auto run = [&](const PtqOptions& opt, const char* stage, const char* file) {
    const Model student = ptq_initialize_model(teacher.model, d.calib, opt);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t l = 0; l < student.layers.size(); ++l) {
      const auto t_slots = teacher.model.layers[l].slots();
      const auto s_slots = student.layers[l].slots();
      for (std::size_t s = 0; s < s_slots.size(); ++s) {
        const double e = relative_frobenius_error(std::get<FullLinear>(*t_slots[s]).weight,
                                                  std::get<QuantLinear>(*s_slots[s]));
        sink_.metric(stage, std::string("rel_error.") + DecoderLayer::slot_names()[s], e, int(l));
        sum += e;
        ++n;
      }
    }
    sink_.metric(stage, "mean_rel_error", n ? sum / double(n) : 0.0);
    save(student, stage, file);
    note(std::string(stage) + ": mean relative weight error " + fmt(n ? sum / double(n) : 0.0));
  };

  run(cfg().ptq, kPtqStage, files::kPtq);
  if (cfg().rtn_branch && cfg().ptq.method == InitMethod::Em) {
    PtqOptions rtn = cfg().ptq;
    rtn.method = InitMethod::Rtn;
    run(rtn, kPtqRtnStage, files::kPtqRtn);
  }
  sink_.timing(kPtqStage, elapsed_ms(t0));
}

void Pipeline::train_wat() {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint ptq = require(files::kPtq, kPtqStage, kWatStage);
  const Checkpoint teacher = require(files::kTeacher, kTeacherStage, kWatStage);
  const auto& d = data();

  auto run = [&](Model student, const char* stage, const char* file) {
    const auto traces = distill_wat(teacher.model, student, d.distill, cfg().wat, distill_options(stage));
    double reg0 = 0.0, reg1 = 0.0;
    for (const auto& t : traces) {
      reg0 += t.l_reg_initial;
      reg1 += t.l_reg_final;
    }
    const double pol = model_polarization(student);
    sink_.metric(stage, "model_polarization", pol);
    sink_.metric(stage, "l_reg_ratio", reg0 > 0 ? reg1 / reg0 : 0.0);
    save(student, stage, file);
    note(std::string(stage) + ": polarized share " + fmt(pol));
  };

  run(ptq.model.clone(), kWatStage, files::kWat);
  if (cfg().rtn_branch && fs::exists(cfg().path(files::kPtqRtn))) {
    const Checkpoint rtn = require(files::kPtqRtn, kPtqRtnStage, kWatRtnStage);
    run(rtn.model.clone(), kWatRtnStage, files::kWatRtn);
  }
  sink_.timing(kWatStage, elapsed_ms(t0));
}

void Pipeline::train_aar() {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint wat = require(files::kWat, kWatStage, kAarStage);
  const Checkpoint teacher = require(files::kTeacher, kTeacherStage, kAarStage);
  Model student = wat.model.clone();
  distill_aar(teacher.model, student, data().distill, cfg().aar, distill_options(kAarStage));
  save(student, kAarStage, files::kAar);
  save(pack_model(student), kAarStage, files::kPacked);
  sink_.timing(kAarStage, elapsed_ms(t0));
}

EvalRow Pipeline::evaluate(const std::string& label, const Model& m, const ForwardMode& mode) {
  const auto& d = data();
  const std::size_t n = cfg().eval_max_tokens;
  EvalRow row{label, mode.acts == ActPath::None ? "A16" : "A4", 0.0, 0.0};
  row.ppl_train = perplexity(m, head_tokens(d.train, n), mode);
  row.ppl_heldout = perplexity(m, head_tokens(d.heldout, n), mode);
  sink_.metric(label, "ppl", row.ppl_train, std::nullopt, "train", row.mode);
  sink_.metric(label, "ppl", row.ppl_heldout, std::nullopt, "heldout", row.mode);
  note("eval " + label + " " + row.mode + ": ppl train " + fmt(row.ppl_train) + ", heldout " +
       fmt(row.ppl_heldout));
  return row;
}

std::vector<EvalRow> Pipeline::eval() {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint teacher = require(files::kTeacher, kTeacherStage, "eval");
  const ForwardMode a16{};
  const ForwardMode a4{WeightPath::Hard, ActPath::Forward, cfg().aar.kv_quant, nullptr};
  std::vector<EvalRow> rows;
  rows.push_back(evaluate(kTeacherStage, teacher.model, a16));

  auto present = [&](const char* file) { return fs::exists(cfg().path(file)); };
  if (present(files::kPtq)) rows.push_back(evaluate(kPtqStage, require(files::kPtq, kPtqStage, "eval").model, a16));
  if (present(files::kPtqRtn))
    rows.push_back(evaluate(kPtqRtnStage, require(files::kPtqRtn, kPtqRtnStage, "eval").model, a16));
  if (present(files::kWat)) {
    const Checkpoint wat = require(files::kWat, kWatStage, "eval");
    rows.push_back(evaluate(kWatStage, wat.model, a16));
    Model naive = wat.model.clone();
    freeze_model(naive);
    const auto& calib = data().distill;
    attach_naive_sites(naive, std::span(calib).first(std::min(cfg().aar.batch, calib.size())), cfg().aar);
    rows.push_back(evaluate(kNaiveLabel, naive, a4));
  }
  if (present(files::kWatRtn))
    rows.push_back(evaluate(kWatRtnStage, require(files::kWatRtn, kWatRtnStage, "eval").model, a16));
  if (present(files::kAar)) rows.push_back(evaluate(kAarStage, require(files::kAar, kAarStage, "eval").model, a4));
  if (present(files::kPacked))
    rows.push_back(evaluate(kPackedLabel, require(files::kPacked, kAarStage, "eval").model, a4));
  sink_.timing("eval", elapsed_ms(t0));
  return rows;
}

BenchResult Pipeline::bench() {
  const auto t0 = std::chrono::steady_clock::now();
  BenchResult res = bench_matmul(cfg().bench_shapes, cfg().bench_reps, cfg().bench_tokens, cfg().seed + 20);
  std::ofstream out(cfg().path(files::kBench));
  if (!out) throw IoError("cannot write " + cfg().path(files::kBench));
  out << bench_csv(res);
  for (const auto& [n, m] : cfg().bench_shapes) {
    const std::string shape = std::to_string(n) + "x" + std::to_string(m);
    const double packed = res.median_ms(shape, "packed"), dense = res.median_ms(shape, "dense");
    note("bench " + shape + ": packed " + fmt(packed) + " ms, dense " + fmt(dense) + " ms (median)");
  }
  // Timings are machine dependent and stay out of the metrics file.
  sink_.timing("bench", elapsed_ms(t0));
  return res;
}

JointOutcome Pipeline::joint_probe() {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint ptq = require(files::kPtq, kPtqStage, kJointStage);
  const Checkpoint teacher = require(files::kTeacher, kTeacherStage, kJointStage);
  Model student = ptq.model.clone();
  StageConfig joint = cfg().wat;
  joint.stage = Stage::Joint;
  joint.epochs = cfg().wat.epochs + cfg().aar.epochs;
  const auto res = joint_training_probe(teacher.model, student, data().distill, joint, cfg().aar,
                                        true, distill_options(kJointStage));
  JointOutcome out{res.diverged, res.diverged_layer, res.final_mean_l_rec};
  sink_.metric(kJointStage, "final_mean_l_rec", out.final_mean_l_rec);
  sink_.metric(kJointStage, "diverged", out.diverged ? 1.0 : 0.0);
  sink_.metric(kJointStage, "diverged_layer", out.diverged_layer);
  note(std::string("joint probe: ") + (out.diverged ? "diverged at layer " + std::to_string(out.diverged_layer)
                                                   : "final mean L_rec " + fmt(out.final_mean_l_rec)));
  sink_.timing(kJointStage, elapsed_ms(t0));
  return out;
}

ReportResult Pipeline::report() {
  const auto& c = cfg();
  const auto metrics = read_metrics(c.path(c.metrics_file));
  const auto traces = read_traces(c.path(c.traces_file));
  ReportResult rep;

  // Latest value per key.
  std::map<std::string, double> latest;
  auto key = [](const std::string& stage, const std::string& metric, std::optional<int> layer,
                const std::string& split = "", const std::string& mode = "") {
    return stage + "|" + metric + "|" + (layer ? std::to_string(*layer) : "") + "|" + split + "|" + mode;
  };
  for (const auto& r : metrics)
    latest[key(r.stage, r.metric, r.layer, r.split.value_or(""), r.mode.value_or(""))] = r.value;
  auto find = [&](const std::string& k) -> std::optional<double> {
    auto it = latest.find(k);
    if (it == latest.end()) return std::nullopt;
    return it->second;
  };
  auto eval_row = [&](const char* label, const char* mode) -> std::optional<EvalRow> {
    auto tr = find(key(label, "ppl", std::nullopt, "train", mode));
    auto ho = find(key(label, "ppl", std::nullopt, "heldout", mode));
    if (!tr || !ho) return std::nullopt;
    return EvalRow{label, mode, *tr, *ho};
  };

  const std::pair<const char*, const char*> ablation[] = {
      {kPtqStage, "A16"}, {kWatStage, "A16"}, {kNaiveLabel, "A4"}, {kAarStage, "A4"}};
  for (const auto& [label, mode] : ablation) {
    auto row = eval_row(label, mode);
    if (!row)
      throw StageOrderError(std::string("report requires eval results for '") + label +
                            "' (run the pipeline stages and eval first)");
    rep.ablation.push_back(*row);
  }
  if (auto rtn = eval_row(kWatRtnStage, "A16")) {
    rep.init_ablation.push_back(rep.ablation[1]);
    rep.init_ablation.push_back(*rtn);
  }

  // Per (stage, layer) trace summaries from the most recent run of each stage.
  std::map<std::string, std::string> last_run;
  for (const auto& t : traces) last_run[t.stage] = t.run_id;
  std::map<std::pair<std::string, int>, LayerSummary> sums;
  for (const auto& t : traces) {
    if (t.run_id != last_run[t.stage]) continue;
    auto& s = sums[{t.stage, t.layer}];
    s.stage = t.stage;
    s.layer = t.layer;
    s.mean_l_rec += t.l_rec;
    ++s.steps;
  }
  for (auto& [k, s] : sums) {
    s.mean_l_rec /= double(s.steps);
    auto get = [&](const char* m) { return find(key(s.stage, m, s.layer)).value_or(0.0); };
    s.final_epoch_l_rec = get("final_epoch_l_rec");
    s.l_rec_before = get("l_rec_before");
    s.l_rec_after = get("l_rec_after");
    s.l_reg_initial = get("l_reg_initial");
    s.l_reg_final = get("l_reg_final");
    s.polarization = get("polarization");
    rep.layers.push_back(s);
  }

  double aar_sum = 0.0;
  int aar_n = 0;
  for (const auto& s : rep.layers)
    if (s.stage == kAarStage) {
      aar_sum += s.final_epoch_l_rec;
      ++aar_n;
    }
  rep.decoupled_mean_l_rec = aar_n ? aar_sum / aar_n : 0.0;
  if (auto v = find(key(kJointStage, "final_mean_l_rec", std::nullopt))) {
    JointOutcome j;
    j.final_mean_l_rec = *v;
    j.diverged = find(key(kJointStage, "diverged", std::nullopt)).value_or(0.0) != 0.0;
    j.diverged_layer = int(find(key(kJointStage, "diverged_layer", std::nullopt)).value_or(-1.0));
    rep.joint = j;
  }
  rep.wat_polarization = find(key(kWatStage, "model_polarization", std::nullopt)).value_or(0.0);
  rep.wat_l_reg_ratio = find(key(kWatStage, "l_reg_ratio", std::nullopt)).value_or(0.0);

  const auto llama = llama7b_shapes(c.ptq.group_size);
  // Embeddings, LM head and norms of the 7B model stay in 16-bit.
  rep.llama_memory = memory_report(std::span<const LayerShape>(llama), 2ull * 32000 * 4096 + 4096ull * 65);
  if (fs::exists(c.path(files::kPacked)))
    rep.toy_memory = model_memory_report(require(files::kPacked, kAarStage, "report").model);

  // Tables.
  auto out = [&](const char* name) {
    rep.written.push_back(c.path(name));
    return c.path(name);
  };
  {
    CsvWriter w(out("ablation.csv"), "row,model,mode,ppl_train,ppl_heldout");
    const char* names[] = {"init", "+WAT", "+naive-A4", "+AAR"};
    for (std::size_t i = 0; i < rep.ablation.size(); ++i) {
      const auto& r = rep.ablation[i];
      w.row({names[i], r.model, r.mode, fmt(r.ppl_train), fmt(r.ppl_heldout)});
    }
  }
  if (!rep.init_ablation.empty()) {
    CsvWriter w(out("init_ablation.csv"), "init,model,ppl_train,ppl_heldout");
    const char* names[] = {"em", "rtn"};
    for (std::size_t i = 0; i < rep.init_ablation.size(); ++i)
      w.row({names[i], rep.init_ablation[i].model, fmt(rep.init_ablation[i].ppl_train),
             fmt(rep.init_ablation[i].ppl_heldout)});
  }
  {
    CsvWriter w(out("eval.csv"), "model,mode,ppl_train,ppl_heldout");
    std::map<std::pair<std::string, std::string>, std::pair<double, double>> rows;
    for (const auto& r : metrics)
      if (r.metric == "ppl" && r.split && r.mode) {
        auto& cell = rows[{r.stage, *r.mode}];
        (*r.split == "train" ? cell.first : cell.second) = r.value;
      }
    for (const auto& [k, v] : rows) w.row({k.first, k.second, fmt(v.first), fmt(v.second)});
  }
  {
    CsvWriter w(out("layers.csv"),
                "stage,layer,steps,mean_l_rec,final_epoch_l_rec,l_rec_before,l_rec_after,"
                "l_reg_initial,l_reg_final,polarization");
    for (const auto& s : rep.layers)
      w.row({s.stage, std::to_string(s.layer), std::to_string(s.steps), fmt(s.mean_l_rec),
             fmt(s.final_epoch_l_rec), fmt(s.l_rec_before), fmt(s.l_rec_after), fmt(s.l_reg_initial),
             fmt(s.l_reg_final), fmt(s.polarization)});
  }
  {
    CsvWriter w(out("loss_curves.csv"), "stage,layer,epoch,step,l_rec,l_reg,beta,loss,polarization");
    for (const auto& t : traces)
      if (t.run_id == last_run[t.stage])
        w.row({t.stage, std::to_string(t.layer), std::to_string(t.epoch), std::to_string(t.step),
               fmt(t.l_rec), fmt(t.l_reg), fmt(t.beta), fmt(t.loss), fmt(t.polarization)});
  }
  {
    CsvWriter w(out("decoupling.csv"), "layer,decoupled_l_rec,joint_l_rec");
    std::map<int, std::pair<std::optional<double>, std::optional<double>>> per;
    for (const auto& s : rep.layers) {
      if (s.stage == kAarStage) per[s.layer].first = s.final_epoch_l_rec;
      if (s.stage == kJointStage) per[s.layer].second = s.final_epoch_l_rec;
    }
    auto cell = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
    for (const auto& [l, v] : per) w.row({std::to_string(l), cell(v.first), cell(v.second)});
    w.row({"mean", fmt(rep.decoupled_mean_l_rec),
           rep.joint ? (rep.joint->diverged ? "diverged" : fmt(rep.joint->final_mean_l_rec)) : ""});
  }
  {
    CsvWriter w(out("memory.csv"),
                "model,weights,bits_q,bits_g,bits_p_actual,bits_p_nominal,bits_p_per_weight_actual,"
                "bits_p_per_weight_nominal,printed_bits_p,ratio_actual,ratio_nominal,compression_actual,"
                "compression_nominal");
    auto row = [&](const char* name, const MemoryReport& m) {
      w.row({name, std::to_string(m.weights), std::to_string(m.bits_q), std::to_string(m.bits_g),
             std::to_string(m.bits_p_actual), std::to_string(m.bits_p_nominal),
             fmt(m.bits_p_per_weight_actual), fmt(m.bits_p_per_weight_nominal), fmt(m.printed_bits_p),
             fmt(m.ratio_actual), fmt(m.ratio_nominal), fmt(m.compression_actual),
             fmt(m.compression_nominal)});
    };
    if (rep.toy_memory.weights) row("toy", rep.toy_memory);
    row("llama-7b-shapes", rep.llama_memory);
  }
  note("report written to " + (c.out_dir.empty() ? std::string(".") : c.out_dir));
  return rep;
}

ReportResult Pipeline::run_all() {
  pretrain_teacher();
  ptq_init();
  train_wat();
  train_aar();
  eval();
  if (cfg().joint_enabled) joint_probe();
  bench();
  return report();
}

bool Pipeline::run(Command c) {
  switch (c) {
    case Command::PretrainTeacher: pretrain_teacher(); break;
    case Command::PtqInit: ptq_init(); break;
    case Command::TrainWat: train_wat(); break;
    case Command::TrainAar: train_aar(); break;
    case Command::Eval: eval(); break;
    case Command::Bench: bench(); break;
    case Command::JointProbe: return joint_probe().diverged;
    case Command::Report: report(); break;
    case Command::RunAll: run_all(); break;
  }
  return false;
}

}  // namespace lbq

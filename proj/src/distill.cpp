#include "lbq/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace lbq {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Wat: return "wat";
    case Stage::Aar: return "aar";
    case Stage::Joint: return "joint";
  }
  return "?";
}

void StageConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  for (float r : {lr.weight, lr.group, lr.affine, lr.clip, lr.knee, lr_scale})
    if (!(r > 0.0f)) throw ConfigError("learning rates must be > 0");
  if (!(lambda >= 0.0f)) throw ConfigError("lambda must be >= 0");
  if (!(beta_start <= 1.0f && beta_end >= kBetaMin && beta_end <= beta_start))
    throw ConfigError("beta schedule must satisfy 0.01 <= beta_end <= beta_start <= 1");
}

Tensor reconstruction_loss(const Tensor& teacher_out, const Tensor& student_out) {
  if (teacher_out.shape() != student_out.shape())
    throw DimensionError("reconstruction_loss: " + shape_str(teacher_out.shape()) + " vs " +
                         shape_str(student_out.shape()));
  const Tensor d = sub(student_out, teacher_out);
  return sum(mul(d, d));
}

Tensor total_loss(const Tensor& l_rec, const Tensor& l_reg, float lambda) {
  if (!(lambda >= 0.0f)) throw ContractError("lambda must be >= 0");
  return add(l_rec, mul(l_reg, lambda));
}

double total_loss(double l_rec, double l_reg, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("lambda must be >= 0");
  return l_rec + lambda * l_reg;
}

float anneal_beta(std::size_t step, std::size_t total_steps, float beta_start, float beta_end) {
  if (step > total_steps) throw ContractError("anneal_beta: step past the schedule");
  if (total_steps == 0) return std::max(beta_end, kBetaMin);
  const double t = double(step) / double(total_steps);
  const double b = double(beta_start) + (double(beta_end) - double(beta_start)) * t;
  return std::max(static_cast<float>(b), kBetaMin);
}

bool is_divergent(double loss, double initial) {
  return !std::isfinite(loss) || loss > 1e3 * initial;
}

double evaluate_l_rec(const Block& student, std::span<const Tensor> inputs,
                      std::span<const Tensor> targets, const ForwardMode& mode) {
  if (inputs.size() != targets.size() || inputs.empty())
    throw ContractError("evaluate_l_rec: need matching, non-empty inputs and targets");
  NoGradGuard guard;
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    total += reconstruction_loss(targets[i], student.forward(inputs[i], mode)).item();
  return total / double(inputs.size());
}

namespace {

struct TrainSpec {
  Stage stage = Stage::Wat;
  bool train_bits = false;
  bool train_affine = true;
  bool train_acts = false;
  bool use_reg = false;
  bool tolerate_divergence = false;
  float affine_lr = 0.0f;
  const StageConfig* act_cfg = nullptr;
  ForwardMode mode;
  ForwardMode eval_mode;
};

double polarization_of(const std::vector<QuantLinear*>& qs) {
  double hit = 0.0, n = 0.0;
  for (const QuantLinear* q : qs) {
    hit += polarization_fraction(q->group.data()) * double(q->group.size());
    n += double(q->group.size());
  }
  return n > 0.0 ? hit / n : 1.0;
}

double reg_value(const std::vector<QuantLinear*>& qs, float beta) {
  NoGradGuard guard;
  double total = 0.0;
  for (const QuantLinear* q : qs) total += reg_loss(q->group, beta).item();
  return total;
}

LayerTrace run_training(Block& student, std::span<const Tensor> inputs,
                        std::span<const Tensor> targets, const StageConfig& cfg,
                        const TrainSpec& spec, int layer) {
  cfg.validate();
  if (inputs.size() != targets.size() || inputs.empty())
    throw ContractError("layer training needs matching, non-empty inputs and targets");
  const auto t0 = std::chrono::steady_clock::now();
  const auto qs = student.quant_linears();
  const auto sites = student.act_sites();
  const float s = cfg.lr_scale;
  std::vector<ParamGroup> groups;
  if (spec.train_bits) {
    ParamGroup w{"weight", {}, cfg.lr.weight * s, project_unit_interval};
    ParamGroup g{"group", {}, cfg.lr.group * s, project_unit_interval};
    for (QuantLinear* q : qs) {
      if (q->frozen) throw ContractError("cannot train the bits of a frozen layer");
      w.params.push_back(q->weight);
      g.params.push_back(q->group);
    }
    groups.push_back(std::move(w));
    groups.push_back(std::move(g));
  }
  if (spec.train_affine) {
    ParamGroup a{"affine", {}, spec.affine_lr, {}};
    for (QuantLinear* q : qs)
      for (const Tensor& t : q->affine_params()) a.params.push_back(t);
    groups.push_back(std::move(a));
  }
  if (spec.train_acts) {
    if (sites.empty()) throw ContractError("activation training needs attached sites");
    const StageConfig& ac = *spec.act_cfg;
    ParamGroup clip{"clip", {}, ac.lr.clip * ac.lr_scale, project_clip};
    ParamGroup knee{"knee", {}, ac.lr.knee * ac.lr_scale, {}};
    ParamGroup gap{"knee_gap", {}, ac.lr.knee * ac.lr_scale, project_knee_gap};
    for (ActQuantParams* p : sites) {
      clip.params.push_back(p->clip_max);
      clip.params.push_back(p->clip_min);
      knee.params.push_back(p->knee);
      gap.params.push_back(p->knee_gap);
    }
    groups.push_back(std::move(clip));
    groups.push_back(std::move(knee));
    groups.push_back(std::move(gap));
  }
  std::erase_if(groups, [](const ParamGroup& g) { return g.params.empty(); });
  if (groups.empty()) throw ContractError("nothing to train in this layer");

  LayerTrace trace;
  trace.layer = layer;
  trace.stage = spec.stage;
  trace.eval_before = evaluate_l_rec(student, inputs, targets, spec.eval_mode);

  Adam adam(std::move(groups), cfg.adam);
  const std::size_t n = inputs.size();
  const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = per_epoch * std::size_t(cfg.epochs);
  std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ull + std::uint64_t(layer) + 1);
  std::vector<std::size_t> order(n);
  double first_loss = -1.0;
  std::size_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs && !trace.diverged; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t lo = b * cfg.batch, hi = std::min(n, lo + cfg.batch);
      const float inv = 1.0f / float(hi - lo);
      const float beta = anneal_beta(step, total - 1, cfg.beta_start, cfg.beta_end);
      StepRecord rec;
      rec.layer = layer;
      rec.epoch = epoch;
      rec.step = int(step);
      rec.beta = beta;
      try {
        adam.zero_grad();
        double l_rec = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
          const Tensor out = student.forward(inputs[order[i]], spec.mode);
          const Tensor l = reconstruction_loss(targets[order[i]], out);
          l_rec += l.item();
          backward(mul(l, inv));
        }
        rec.l_rec = l_rec * inv;
        if (spec.use_reg) {
          Tensor reg = reg_loss(qs.front()->group, beta);
          for (std::size_t k = 1; k < qs.size(); ++k) reg = add(reg, reg_loss(qs[k]->group, beta));
          rec.l_reg = reg.item();
          if (cfg.lambda > 0.0f) backward(mul(reg, cfg.lambda));
        }
      } catch (const NumericError& e) {
        if (!spec.tolerate_divergence)
          throw DivergenceError("layer " + std::to_string(layer) + " step " + std::to_string(step) +
                                    ": " + e.what(),
                                layer);
        rec.l_rec = std::nan("");
      }
      rec.loss = total_loss(rec.l_rec, rec.l_reg, spec.use_reg ? cfg.lambda : 0.0);
      if (first_loss < 0.0) first_loss = rec.loss;
      const bool bad = spec.tolerate_divergence ? is_divergent(rec.loss, first_loss)
                                                : !std::isfinite(rec.loss);
      if (bad) {
        if (!spec.tolerate_divergence)
          throw DivergenceError("layer " + std::to_string(layer) + ": non-finite loss", layer);
        trace.diverged = true;
        trace.diverged_step = int(step);
        trace.steps.push_back(rec);
        break;
      }
      for (const QuantLinear* q : qs)
        if (q->frozen && (q->weight.has_grad() || q->group.has_grad()))
          throw ContractError("gradient reached frozen weight bits");
      if (cfg.lr_decay) adam.set_lr_multiplier(float(total - step) / float(total));
      adam.step();
      if (spec.train_bits) rec.polarization = polarization_of(qs);
      trace.steps.push_back(rec);
    }
  }

  double sum_last = 0.0;
  std::size_t cnt_last = 0;
  const int last_epoch = trace.steps.empty() ? 0 : trace.steps.back().epoch;
  for (const auto& r : trace.steps)
    if (r.epoch == last_epoch && std::isfinite(r.l_rec)) sum_last += r.l_rec, ++cnt_last;
  trace.final_epoch_l_rec = cnt_last ? sum_last / double(cnt_last) : std::nan("");
  if (spec.use_reg) {
    trace.l_reg_initial = trace.steps.empty() ? 0.0 : trace.steps.front().l_reg;
    trace.l_reg_final = reg_value(qs, std::max(cfg.beta_end, kBetaMin));
  }
  if (!trace.diverged) trace.eval_after = evaluate_l_rec(student, inputs, targets, spec.eval_mode);
  trace.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return trace;
}

TrainSpec wat_spec(const StageConfig& cfg) {
  TrainSpec s;
  s.stage = Stage::Wat;
  s.train_bits = true;
  s.use_reg = true;
  s.affine_lr = cfg.lr.affine * cfg.lr_scale;
  s.mode = {WeightPath::Ste, ActPath::None, false, nullptr};
  s.eval_mode = {WeightPath::Hard, ActPath::None, false, nullptr};
  return s;
}

std::vector<Tensor> block_targets(const Block& teacher, std::span<const Tensor> inputs) {
  NoGradGuard guard;
  std::vector<Tensor> out;
  for (const auto& x : inputs) out.push_back(teacher.forward(x, {}));
  return out;
}

}  // namespace

LayerTrace train_wat_layer(Block& student, std::span<const Tensor> inputs,
                           std::span<const Tensor> targets, const StageConfig& cfg, int layer) {
  if (student.quant_linears().empty()) throw ContractError("WAT needs quantized linear slots");
  return run_training(student, inputs, targets, cfg, wat_spec(cfg), layer);
}

LayerTrace train_wat_layer(const Block& teacher, Block& student, std::span<const Tensor> inputs,
                           const StageConfig& cfg, int layer) {
  const auto targets = block_targets(teacher, inputs);
  return train_wat_layer(student, inputs, targets, cfg, layer);
}

LayerTrace train_aar_layer(Block& student, std::span<const Tensor> inputs,
                           std::span<const Tensor> targets, const StageConfig& cfg, int layer) {
  const auto qs = student.quant_linears();
  for (const QuantLinear* q : qs)
    if (!q->frozen) throw ContractError("AAR requires frozen weights");
  if (student.act_sites().empty()) throw ContractError("AAR requires attached activation sites");
  TrainSpec s;
  s.stage = Stage::Aar;
  s.train_affine = !qs.empty();
  s.train_acts = true;
  s.act_cfg = &cfg;
  s.affine_lr = cfg.lr.affine * cfg.lr_scale;
  s.mode = {WeightPath::Hard, ActPath::Train, cfg.kv_quant, nullptr};
  s.eval_mode = {WeightPath::Hard, ActPath::Forward, cfg.kv_quant, nullptr};
  return run_training(student, inputs, targets, cfg, s, layer);
}

LayerTrace train_aar_layer(const Block& teacher, Block& student, std::span<const Tensor> inputs,
                           const StageConfig& cfg, int layer) {
  const auto targets = block_targets(teacher, inputs);
  return train_aar_layer(student, inputs, targets, cfg, layer);
}

LayerTrace train_joint_layer(Block& student, std::span<const Tensor> inputs,
                             std::span<const Tensor> targets, const StageConfig& cfg,
                             const StageConfig& act_cfg, bool quantize_acts, int layer) {
  TrainSpec s = wat_spec(cfg);
  if (quantize_acts) {
    s.stage = Stage::Joint;
    s.train_acts = true;
    s.act_cfg = &act_cfg;
    s.tolerate_divergence = true;
    s.mode = {WeightPath::Ste, ActPath::Train, act_cfg.kv_quant, nullptr};
    s.eval_mode = {WeightPath::Hard, ActPath::Forward, act_cfg.kv_quant, nullptr};
  }
  return run_training(student, inputs, targets, cfg, s, layer);
}

// ---- whole-model sweeps ------------------------------------------------------

namespace {

struct Streams {
  std::vector<Tensor> student, teacher;
};

Streams embed_all(const Model& teacher, const Model& student,
                  std::span<const std::vector<int>> sequences) {
  if (sequences.empty()) throw ContractError("distillation needs training sequences");
  NoGradGuard guard;
  Streams s;
  for (const auto& seq : sequences) {
    s.student.push_back(embed(student, seq));
    s.teacher.push_back(embed(teacher, seq));
  }
  return s;
}

std::vector<Tensor> layer_targets(const Model& teacher, std::size_t l, const Streams& s,
                                  TargetMode mode) {
  NoGradGuard guard;
  const auto& src = mode == TargetMode::Teacher ? s.teacher : s.student;
  std::vector<Tensor> out;
  for (const auto& x : src) out.push_back(decoder_forward(teacher.layers[l], x, teacher.cfg, {}));
  return out;
}

void advance(const Model& teacher, const Model& student, std::size_t l, Streams& s,
             const ForwardMode& student_mode) {
  NoGradGuard guard;
  for (std::size_t i = 0; i < s.student.size(); ++i) {
    s.student[i] = decoder_forward(student.layers[l], s.student[i], student.cfg, student_mode);
    s.teacher[i] = decoder_forward(teacher.layers[l], s.teacher[i], teacher.cfg, {});
  }
}

std::vector<Tensor> first_batch(const std::vector<Tensor>& xs, std::size_t batch) {
  return {xs.begin(), xs.begin() + std::min(batch, xs.size())};
}

StageConfig for_layer(StageConfig cfg, std::size_t l) {
  cfg.seed = cfg.seed * 31 + l;
  return cfg;
}

void check_same_shape(const Model& teacher, const Model& student) {
  if (teacher.layers.size() != student.layers.size())
    throw ContractError("teacher and student layer counts differ");
}

}  // namespace

std::vector<LayerTrace> distill_wat(const Model& teacher, Model& student,
                                    std::span<const std::vector<int>> sequences,
                                    const StageConfig& cfg, const DistillOptions& opt) {
  check_same_shape(teacher, student);
  Streams s = embed_all(teacher, student, sequences);
  std::vector<LayerTrace> traces;
  for (std::size_t l = 0; l < student.layers.size(); ++l) {
    const auto targets = layer_targets(teacher, l, s, opt.targets);
    DecoderBlock blk(student.layers[l], student.cfg);
    traces.push_back(train_wat_layer(blk, s.student, targets, for_layer(cfg, l), int(l)));
    if (opt.on_layer) opt.on_layer(traces.back());
    advance(teacher, student, l, s, {WeightPath::Hard, ActPath::None, false, nullptr});
  }
  return traces;
}

void freeze_model(Model& student) {
  for (auto& layer : student.layers)
    for (LinearSlot* slot : layer.slots())
      if (auto* q = std::get_if<QuantLinear>(slot); q && !q->frozen) freeze(*q);
}

void attach_naive_sites(Model& student, std::span<const std::vector<int>> calibration,
                        const StageConfig& cfg) {
  if (calibration.empty()) throw ContractError("site calibration needs sequences");
  NoGradGuard guard;
  std::vector<Tensor> xs;
  for (const auto& seq : calibration) xs.push_back(embed(student, seq));
  const ForwardMode mode{WeightPath::Hard, ActPath::Forward, cfg.kv_quant, nullptr};
  for (auto& layer : student.layers) {
    DecoderBlock blk(layer, student.cfg);
    blk.attach_sites(xs, cfg.act_total_bits, cfg.act_bits);
    for (auto& x : xs) x = decoder_forward(layer, x, student.cfg, mode);
  }
}

std::vector<LayerTrace> distill_aar(const Model& teacher, Model& student,
                                    std::span<const std::vector<int>> sequences,
                                    const StageConfig& cfg, const DistillOptions& opt) {
  check_same_shape(teacher, student);
  freeze_model(student);
  Streams s = embed_all(teacher, student, sequences);
  std::vector<LayerTrace> traces;
  const ForwardMode mode{WeightPath::Hard, ActPath::Forward, cfg.kv_quant, nullptr};
  for (std::size_t l = 0; l < student.layers.size(); ++l) {
    const auto targets = layer_targets(teacher, l, s, opt.targets);
    DecoderBlock blk(student.layers[l], student.cfg);
    blk.attach_sites(first_batch(s.student, cfg.batch), cfg.act_total_bits, cfg.act_bits);
    traces.push_back(train_aar_layer(blk, s.student, targets, for_layer(cfg, l), int(l)));
    if (opt.on_layer) opt.on_layer(traces.back());
    advance(teacher, student, l, s, mode);
  }
  return traces;
}

PipelineTraces progressive_pipeline(const Model& teacher, Model& student,
                                    std::span<const std::vector<int>> sequences,
                                    const StageConfig& wat, const StageConfig& aar,
                                    const DistillOptions& opt) {
  PipelineTraces t;
  t.wat = distill_wat(teacher, student, sequences, wat, opt);
  t.aar = distill_aar(teacher, student, sequences, aar, opt);
  return t;
}

JointProbeResult joint_training_probe(const Model& teacher, Model& student,
                                      std::span<const std::vector<int>> sequences,
                                      const StageConfig& cfg, const StageConfig& act_cfg,
                                      bool quantize_acts, const DistillOptions& opt) {
  check_same_shape(teacher, student);
  Streams s = embed_all(teacher, student, sequences);
  JointProbeResult res;
  const ForwardMode mode{WeightPath::Hard, quantize_acts ? ActPath::Forward : ActPath::None,
                         act_cfg.kv_quant, nullptr};
  double sum = 0.0;
  for (std::size_t l = 0; l < student.layers.size(); ++l) {
    const auto targets = layer_targets(teacher, l, s, opt.targets);
    DecoderBlock blk(student.layers[l], student.cfg);
    if (quantize_acts)
      blk.attach_sites(first_batch(s.student, cfg.batch), act_cfg.act_total_bits, act_cfg.act_bits);
    LayerTrace tr = train_joint_layer(blk, s.student, targets, for_layer(cfg, l), act_cfg,
                                      quantize_acts, int(l));
    if (opt.on_layer) opt.on_layer(tr);
    const bool diverged = tr.diverged;
    sum += tr.final_epoch_l_rec;
    res.layers.push_back(std::move(tr));
    if (diverged) {
      res.diverged = true;
      res.diverged_layer = int(l);
      break;
    }
    advance(teacher, student, l, s, mode);
  }
  res.final_mean_l_rec = sum / double(res.layers.size());
  return res;
}

}  // namespace lbq

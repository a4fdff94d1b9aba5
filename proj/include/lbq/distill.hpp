#pragma once
// Layer-wise distillation of a quantized student against a full-precision
// teacher, shallow to deep.
//
//   WAT  weights trained through the straight-through path (W, G, scales,
//        offsets), activations full precision, loss L_rec + lambda * L_reg.
//   AAR  weights frozen to hard bits; activation quantizers attached to every
//        site; only scales/offsets, clip factors and knees train.
//
// Layer inputs come from the student's already-trained prefix, so every layer
// sees (and can compensate) the error accumulated upstream.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lbq/model.hpp"
#include "lbq/optim.hpp"

namespace lbq {

enum class Stage { Wat, Aar, Joint };
const char* stage_name(Stage s);

struct LearningRates {
  float weight = 2e-5f;
  float group = 1e-4f;
  float affine = 1e-4f;
  float clip = 1e-4f;
  float knee = 5e-4f;
};

struct StageConfig {
  Stage stage = Stage::Wat;
  int epochs = 2;
  std::size_t batch = 4;
  LearningRates lr;
  float lr_scale = 1.0f;  // multiplies every rate above
  bool lr_decay = false;  // rates fall linearly towards zero over the stage
  float lambda = 0.05f;
  float beta_start = 1.0f;
  float beta_end = 0.01f;
  AdamOptions adam;
  std::uint64_t seed = 0;
  bool kv_quant = true;
  std::array<int, 3> act_bits{2, 4, 2};
  int act_total_bits = 4;

  void validate() const;  // ConfigError
};

struct StepRecord {
  int layer = 0;
  int epoch = 0;
  int step = 0;
  double l_rec = 0.0;  // mean over the batch of per-sequence sum of squares
  double l_reg = 0.0;
  double beta = 0.0;
  double loss = 0.0;
  double polarization = 0.0;  // share of |2g - 1| > 0.99 after the step
};

struct LayerTrace {
  int layer = 0;
  Stage stage = Stage::Wat;
  std::vector<StepRecord> steps;
  double eval_before = 0.0;  // mean per-sequence L_rec before training
  double eval_after = 0.0;   // and after
  double final_epoch_l_rec = 0.0;
  double l_reg_initial = 0.0;
  double l_reg_final = 0.0;
  bool diverged = false;
  int diverged_step = -1;
  double wall_ms = 0.0;  // not part of any deterministic output
};

Tensor reconstruction_loss(const Tensor& teacher_out, const Tensor& student_out);
Tensor total_loss(const Tensor& l_rec, const Tensor& l_reg, float lambda);
double total_loss(double l_rec, double l_reg, double lambda);
float anneal_beta(std::size_t step, std::size_t total_steps, float beta_start, float beta_end);

/// Mean per-sequence reconstruction loss without gradients.
double evaluate_l_rec(const Block& student, std::span<const Tensor> inputs,
                      std::span<const Tensor> targets, const ForwardMode& mode);

LayerTrace train_wat_layer(Block& student, std::span<const Tensor> inputs,
                           std::span<const Tensor> targets, const StageConfig& cfg, int layer = 0);
/// Targets are the teacher block's outputs on the same inputs.
LayerTrace train_wat_layer(const Block& teacher, Block& student, std::span<const Tensor> inputs,
                           const StageConfig& cfg, int layer = 0);

/// Requires frozen weights and attached activation sites.
LayerTrace train_aar_layer(Block& student, std::span<const Tensor> inputs,
                           std::span<const Tensor> targets, const StageConfig& cfg, int layer = 0);
LayerTrace train_aar_layer(const Block& teacher, Block& student, std::span<const Tensor> inputs,
                           const StageConfig& cfg, int layer = 0);

/// Everything trainable at once. With `quantize_acts` false this is the WAT
/// update exactly; otherwise divergence is recorded, not thrown.
LayerTrace train_joint_layer(Block& student, std::span<const Tensor> inputs,
                             std::span<const Tensor> targets, const StageConfig& cfg,
                             const StageConfig& act_cfg, bool quantize_acts, int layer = 0);

enum class TargetMode {
  Teacher,  // teacher layer on the teacher's own hidden states
  Shared,   // teacher layer on the student's inputs
};

struct DistillOptions {
  TargetMode targets = TargetMode::Teacher;
  /// Called after each layer finishes (e.g. to emit traces).
  std::function<void(const LayerTrace&)> on_layer;
};

/// Stage 2 over all layers. The student must hold relaxed QuantLinear slots.
std::vector<LayerTrace> distill_wat(const Model& teacher, Model& student,
                                    std::span<const std::vector<int>> sequences,
                                    const StageConfig& cfg, const DistillOptions& opt = {});

/// Freezes every QuantLinear slot (no-op for already frozen ones).
void freeze_model(Model& student);

/// Attaches percentile-initialized sites to every layer, shallow to deep,
/// using the quantized prefix's outputs on `calibration`.
void attach_naive_sites(Model& student, std::span<const std::vector<int>> calibration,
                        const StageConfig& cfg);

/// Stage 3 over all layers. Freezes the student first if needed.
std::vector<LayerTrace> distill_aar(const Model& teacher, Model& student,
                                    std::span<const std::vector<int>> sequences,
                                    const StageConfig& cfg, const DistillOptions& opt = {});

struct PipelineTraces {
  std::vector<LayerTrace> wat, aar;
};

PipelineTraces progressive_pipeline(const Model& teacher, Model& student,
                                    std::span<const std::vector<int>> sequences,
                                    const StageConfig& wat, const StageConfig& aar,
                                    const DistillOptions& opt = {});

struct JointProbeResult {
  std::vector<LayerTrace> layers;
  bool diverged = false;
  int diverged_layer = -1;
  double final_mean_l_rec = 0.0;  // mean over finished layers of final-epoch L_rec
};

/// Trains a fresh PTQ student with activation quantizers live from step 0.
JointProbeResult joint_training_probe(const Model& teacher, Model& student,
                                      std::span<const std::vector<int>> sequences,
                                      const StageConfig& cfg, const StageConfig& act_cfg,
                                      bool quantize_acts = true, const DistillOptions& opt = {});

/// Divergence rule of the probe: non-finite, or above 1000x the first loss.
bool is_divergent(double loss, double initial);

}  // namespace lbq

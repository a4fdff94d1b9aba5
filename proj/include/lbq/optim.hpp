#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lbq/tensor.hpp"

namespace lbq {

/// Parameters sharing one learning rate, with an optional projection applied
/// in place after every step (e.g. clamping a relaxed bitmap to [0,1]).
struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  float lr = 1e-3f;
  std::function<void(std::span<float>)> project;
};

struct AdamOptions {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adam with per-group learning rates. Live instances are counted so callers
/// can assert that at most one layer's optimizer state exists at a time.
class Adam {
 public:
  Adam(std::vector<ParamGroup> groups, AdamOptions options = {});
  ~Adam();
  Adam(const Adam&) = delete;
  Adam& operator=(const Adam&) = delete;

  void step();
  void zero_grad();
  long steps() const { return step_; }
  /// Scales every group's rate on subsequent steps (schedules).
  void set_lr_multiplier(float m) { lr_mult_ = m; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  static int live_instances();
  static int peak_live_instances();
  static void reset_peak();

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<Moments>> state_;
  AdamOptions opt_;
  long step_ = 0;
  float lr_mult_ = 1.0f;
};

}  // namespace lbq

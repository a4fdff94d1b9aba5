#include "lbq/optim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace lbq {

namespace {
std::atomic<int> g_live{0};
std::atomic<int> g_peak{0};
}  // namespace

Adam::Adam(std::vector<ParamGroup> groups, AdamOptions options)
    : groups_(std::move(groups)), opt_(options) {
  for (const auto& g : groups_) {
    if (!(g.lr > 0.0f)) throw ContractError("learning rate of group '" + g.name + "' must be > 0");
    std::vector<Moments> per;
    for (const auto& p : g.params) {
      if (!p.requires_grad() || !p.is_leaf())
        throw ContractError("group '" + g.name + "' holds a tensor that is not a trainable leaf");
      per.push_back({std::vector<float>(p.size(), 0.0f), std::vector<float>(p.size(), 0.0f)});
    }
    state_.push_back(std::move(per));
  }
  const int now = ++g_live;
  int peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

Adam::~Adam() { --g_live; }

void Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(double(opt_.beta1), double(step_));
  const double bc2 = 1.0 - std::pow(double(opt_.beta2), double(step_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      Tensor& p = group.params[pi];
      if (!p.has_grad()) continue;
      auto grad = p.grad();
      auto data = p.mutable_data();
      auto& st = state_[gi][pi];
      for (std::size_t i = 0; i < data.size(); ++i) {
        st.m[i] = opt_.beta1 * st.m[i] + (1.0f - opt_.beta1) * grad[i];
        st.v[i] = opt_.beta2 * st.v[i] + (1.0f - opt_.beta2) * grad[i] * grad[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        data[i] -= static_cast<float>(double(group.lr) * lr_mult_ * mhat / (std::sqrt(vhat) + opt_.eps));
      }
      if (group.project) group.project(data);
    }
  }
}

void Adam::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

int Adam::live_instances() { return g_live.load(); }
int Adam::peak_live_instances() { return g_peak.load(); }
void Adam::reset_peak() { g_peak.store(g_live.load()); }

}  // namespace lbq

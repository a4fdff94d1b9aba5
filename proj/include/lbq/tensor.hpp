#pragma once
// Dense row-major float tensors with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record a node holding the backward rule; `backward(loss)`
// walks the recorded nodes in reverse creation order. Leaf gradients
// accumulate across calls until `zero_grad()`.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lbq/errors.hpp"

namespace lbq {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `grad` of this node and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::span<float> grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);
  static Tensor from(Shape shape, std::vector<float> values);
  /// A leaf that participates in gradient computation.
  static Tensor param(Shape shape, std::vector<float> values);
  static Tensor param(Shape shape, float value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const float> data() const;
  /// Direct write access. Only valid on leaves (parameters, constants).
  std::span<float> mutable_data();
  float item() const;
  float at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  /// Gradient view; zeros if nothing was accumulated yet.
  std::span<const float> grad() const;
  void zero_grad();

  /// Copy of the values with no tape history.
  Tensor detach() const;
  /// Deep copy; preserves the requires-grad flag of leaves.
  Tensor clone() const;

  std::uint64_t tape_id() const;
  const char* op_name() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Populates d(loss)/d(leaf) on every reachable leaf that requires grad.
/// Repeated calls accumulate into leaf gradients.
void backward(const Tensor& loss);

// ---- custom-gradient hook -------------------------------------------------

/// Backward rule for `make_op`: receives the output node (with its grad
/// filled) and must accumulate into the inputs via `grad_buffer()`.
using BackwardRule = std::function<void(detail::Node& out)>;

/// Builds an op result. Records a tape node only if some input requires
/// grad and recording is enabled. Throws NumericError on non-finite output.
Tensor make_op(const char* name, Shape shape, std::vector<float> values,
               std::vector<Tensor> inputs, BackwardRule rule);

// ---- arithmetic -----------------------------------------------------------
// Binary ops accept equal shapes, a one-element operand on either side, or a
// rank-1 right operand matching the trailing axis of the left operand.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float b);
Tensor mul(const Tensor& a, float b);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, float b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, float b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, float b) { return mul(a, b); }
inline Tensor operator*(float a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor abs(const Tensor& a);
Tensor pow(const Tensor& a, float exponent);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
/// Gradient flows only where lo <= x <= hi.
Tensor clamp(const Tensor& a, float lo, float hi);

/// Round half away from zero; straight-through (identity) backward.
Tensor ste_round(const Tensor& a);
/// Identity forward, zero backward.
Tensor stop_gradient(const Tensor& a);

// Comparison masks: 1.0 where the predicate holds, no gradient.
Tensor greater_equal(const Tensor& a, float threshold);
Tensor less(const Tensor& a, float threshold);
Tensor less(const Tensor& a, const Tensor& threshold);
Tensor greater_equal(const Tensor& a, const Tensor& threshold);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank-2 only
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Repeats each column `times` times and keeps the first `cols` columns:
/// [n x c] -> [n x cols]. Backward sums over the repeats.
Tensor repeat_cols(const Tensor& a, std::size_t times, std::size_t cols);

// ---- linear algebra and NN helpers -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] . [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] . [n x k]^T
Tensor softmax_last(const Tensor& a);
/// Row softmax with positions j > i + offset masked out.
Tensor causal_softmax(const Tensor& scores, std::size_t offset);
/// x / sqrt(mean(x^2) + eps) * weight, row-wise over the last axis.
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps);
/// Rows of `table` selected by `ids`.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// Mean token negative log-likelihood of `targets` under row-softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace lbq

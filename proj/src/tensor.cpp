#include "lbq/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace lbq {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> data) {
  if (shape_size(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

void check_finite(const char* op, std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// C[m x n] += A[m x k] . B[k x n]
void gemm_acc(float* c, const float* a, const float* b, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<float> transposed(std::span<const float> a, std::size_t rows, std::size_t cols) {
  std::vector<float> t(a.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

enum class Broadcast { Same, ScalarA, ScalarB, RowB };

Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.size() == 1) return Broadcast::ScalarB;
  if (a.size() == 1) return Broadcast::ScalarA;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Broadcast::RowB;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) +
                       " with " + shape_str(b.shape()));
}

template <class F, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const Broadcast mode = classify(a, b, name);
  const Shape out_shape = mode == Broadcast::ScalarA ? b.shape() : a.shape();
  const std::size_t n = shape_size(out_shape);
  const std::size_t row = mode == Broadcast::RowB ? b.dim(0) : 1;
  auto ia = [mode](std::size_t i) { return mode == Broadcast::ScalarA ? 0 : i; };
  auto ib = [mode, row](std::size_t i) {
    switch (mode) {
      case Broadcast::Same: return i;
      case Broadcast::ScalarB: return std::size_t{0};
      case Broadcast::RowB: return i % row;
      case Broadcast::ScalarA: return i;
    }
    return i;
  };
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[ia(i)], bd[ib(i)]);
  return make_op(name, out_shape, std::move(out), {a, b},
                 [ia, ib, n, da, db](detail::Node& self) {
                   auto& an = *self.inputs[0];
                   auto& bn = *self.inputs[1];
                   const auto& g = self.grad;
                   if (an.requires_grad) {
                     auto ga = an.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       ga[ia(i)] += g[i] * da(an.data[ia(i)], bn.data[ib(i)], self.data[i]);
                   }
                   if (bn.requires_grad) {
                     auto gb = bn.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i)
                       gb[ib(i)] += g[i] * db(an.data[ia(i)], bn.data[ib(i)], self.data[i]);
                   }
                 });
}

// y = f(x) with dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  return make_op(name, a.shape(), std::move(out), {a}, [df](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i)
      gi[i] += self.grad[i] * df(in.data[i], self.data[i]);
  });
}

float stable_sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<float> detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
  const std::size_t n = shape_size(shape);
  return Tensor(new_node(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::scalar(float value) { return Tensor(new_node({}, {value})); }

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  return Tensor(new_node(std::move(shape), std::move(values)));
}

Tensor Tensor::param(Shape shape, std::vector<float> values) {
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor Tensor::param(Shape shape, float value) {
  const std::size_t n = shape_size(shape);
  return param(std::move(shape), std::vector<float>(n, value));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::size() const { return shape_size(shape()); }

std::span<const float> Tensor::data() const {
  shape();
  return node_->data;
}

std::span<float> Tensor::mutable_data() {
  shape();
  if (!node_->is_leaf) throw ContractError("mutable_data() on a non-leaf tensor");
  return node_->data;
}

float Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  shape();
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(new_node(shape(), node_->data)); }

Tensor Tensor::clone() const {
  auto node = new_node(shape(), node_->data);
  node->requires_grad = node_->is_leaf && node_->requires_grad;
  return Tensor(std::move(node));
}

std::uint64_t Tensor::tape_id() const { return node_ ? node_->id : 0; }
const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Tensor make_op(const char* name, Shape shape, std::vector<float> values,
               std::vector<Tensor> inputs, BackwardRule rule) {
  check_finite(name, values);
  auto node = new_node(std::move(shape), std::move(values));
  node->op = name;
  bool record = false;
  if (t_grad_enabled && rule) {
    for (const auto& in : inputs) record = record || in.requires_grad();
  }
  if (record) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(rule);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("backward() on a loss with no tape history");

  // Collect every recorded node reachable from the loss.
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{loss.node().get()};
  std::unordered_set<const detail::Node*> seen;
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs)
      if (in->requires_grad) stack.push_back(in.get());
  }
  // Ids are creation order, so descending id is a valid reverse topological order.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* x, const detail::Node* y) { return x->id > y->id; });
  for (auto* n : order)
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0f);

  loss.node()->grad_buffer()[0] += 1.0f;
  for (auto* n : order) {
    if (n->is_leaf || !n->backward) continue;
    n->backward(*n);
  }
  for (auto* n : order)
    if (!n->is_leaf) n->grad.clear();
}

// ---- arithmetic -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](float x, float y) { return x + y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](float x, float y) { return x - y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](float x, float y) { return x * y; },
      [](float, float y, float) { return y; }, [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (float v : b.data())
    if (v == 0.0f) throw NumericError("div: division by zero");
  return binary(
      "div", a, b, [](float x, float y) { return x / y; },
      [](float, float y, float) { return 1.0f / y; },
      [](float, float y, float out) { return -out / y; });
}

Tensor add(const Tensor& a, float b) {
  return unary(
      "add_scalar", a, [b](float x) { return x + b; }, [](float, float) { return 1.0f; });
}

Tensor mul(const Tensor& a, float b) {
  return unary(
      "mul_scalar", a, [b](float x) { return x * b; }, [b](float, float) { return b; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0f); }

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](float x) { return std::fabs(x); },
      [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

Tensor pow(const Tensor& a, float exponent) {
  const bool integral = std::floor(exponent) == exponent;
  if (!integral) {
    for (float v : a.data())
      if (v < 0.0f) throw NumericError("pow: negative base with fractional exponent");
  }
  return unary(
      "pow", a, [exponent](float x) { return std::pow(x, exponent); },
      [exponent](float x, float) { return exponent * std::pow(x, exponent - 1.0f); });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
  for (float v : a.data())
    if (v <= 0.0f) throw NumericError("log: non-positive argument");
  return unary(
      "log", a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Tensor sqrt(const Tensor& a) {
  for (float v : a.data())
    if (v < 0.0f) throw NumericError("sqrt: negative argument");
  return unary(
      "sqrt", a, [](float x) { return std::sqrt(x); },
      [](float, float y) { return y > 0.0f ? 0.5f / y : 0.0f; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid, [](float, float y) { return y * (1.0f - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a,
      [](float x) { return x > 0.0f ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](float x, float) { return stable_sigmoid(x); });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](float x) { return x * stable_sigmoid(x); },
      [](float x, float) {
        const float s = stable_sigmoid(x);
        return s + x * s * (1.0f - s);
      });
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(
      "clamp", a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

Tensor ste_round(const Tensor& a) {
  return unary(
      "ste_round", a, [](float x) { return std::round(x); }, [](float, float) { return 1.0f; });
}

Tensor stop_gradient(const Tensor& a) {
  auto d = a.data();
  return make_op("stop_gradient", a.shape(), std::vector<float>(d.begin(), d.end()), {}, {});
}

namespace {
template <class P>
Tensor mask_op(const char* name, const Tensor& a, P pred) {
  auto d = a.data();
  std::vector<float> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = pred(d[i], i) ? 1.0f : 0.0f;
  return make_op(name, a.shape(), std::move(out), {}, {});
}
}  // namespace

Tensor greater_equal(const Tensor& a, float threshold) {
  return mask_op("ge", a, [threshold](float x, std::size_t) { return x >= threshold; });
}

Tensor less(const Tensor& a, float threshold) {
  return mask_op("lt", a, [threshold](float x, std::size_t) { return x < threshold; });
}

Tensor less(const Tensor& a, const Tensor& threshold) {
  if (threshold.size() != 1) throw DimensionError("less: threshold must be a scalar");
  return less(a, threshold.item());
}

Tensor greater_equal(const Tensor& a, const Tensor& threshold) {
  if (threshold.size() != 1) throw DimensionError("greater_equal: threshold must be a scalar");
  return greater_equal(a, threshold.item());
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  return make_op("sum", {}, {static_cast<float>(s)}, {a}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto gi = in.grad_buffer();
    for (auto& g : gi) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.size();
  if (n == 0) throw ContractError("mean of an empty tensor");
  double s = 0.0;
  for (float v : a.data()) s += v;
  return make_op("mean", {}, {static_cast<float>(s / n)}, {a}, [n](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto gi = in.grad_buffer();
    const float g = self.grad[0] / static_cast<float>(n);
    for (auto& v : gi) v += g;
  });
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto d = a.data();
  return make_op("reshape", std::move(shape), std::vector<float>(d.begin(), d.end()), {a},
                 [](detail::Node& self) {
                   auto gi = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
                 });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  return make_op("transpose", {c, r}, transposed(a.data(), r, c), {a},
                 [r, c](detail::Node& self) {
                   auto gi = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) gi[i * c + j] += self.grad[j * r + i];
                 });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = end - begin, full = s[axis];
  Shape out_shape = s;
  out_shape[axis] = len;
  auto d = a.data();
  std::vector<float> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(d.begin() + (o * full + begin) * inner, len * inner,
                out.begin() + o * len * inner);
  return make_op("slice", std::move(out_shape), std::move(out), {a},
                 [outer, inner, len, full, begin](detail::Node& self) {
                   auto gi = self.inputs[0]->grad_buffer();
                   for (std::size_t o = 0; o < outer; ++o)
                     for (std::size_t t = 0; t < len * inner; ++t)
                       gi[(o * full + begin) * inner + t] += self.grad[o * len * inner + t];
                 });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range");
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = s0;
    if (a.size() != b.size()) throw DimensionError("concat rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat shape mismatch");
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<float> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.begin() + o * lens[k] * inner, lens[k] * inner,
                  out.begin() + (o * total + offset) * inner);
    offset += lens[k];
  }
  return make_op("concat", std::move(out_shape), std::move(out), parts,
                 [outer, inner, total, lens](detail::Node& self) {
                   std::size_t off = 0;
                   for (std::size_t k = 0; k < lens.size(); ++k) {
                     auto& in = *self.inputs[k];
                     if (in.requires_grad) {
                       auto gi = in.grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t t = 0; t < lens[k] * inner; ++t)
                           gi[o * lens[k] * inner + t] +=
                               self.grad[(o * total + off) * inner + t];
                     }
                     off += lens[k];
                   }
                 });
}

Tensor repeat_cols(const Tensor& a, std::size_t times, std::size_t cols) {
  require_rank2(a, "repeat_cols");
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (times == 0 || cols > c * times || cols <= (c - 1) * times) {
    throw DimensionError("repeat_cols: " + std::to_string(c) + " columns x " +
                         std::to_string(times) + " cannot yield " + std::to_string(cols));
  }
  auto d = a.data();
  std::vector<float> out(n * cols);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = d[i * c + j / times];
  return make_op("repeat_cols", {n, cols}, std::move(out), {a},
                 [n, c, cols, times](detail::Node& self) {
                   auto gi = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < cols; ++j)
                       gi[i * c + j / times] += self.grad[i * cols + j];
                 });
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  }
  std::vector<float> out(m * n, 0.0f);
  gemm_acc(out.data(), a.data().data(), b.data().data(), m, k, n);
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (an.requires_grad) {  // dA = dC . B^T
      auto bt = transposed(bn.data, k, n);
      gemm_acc(an.grad_buffer().data(), self.grad.data(), bt.data(), m, n, k);
    }
    if (bn.requires_grad) {  // dB = A^T . dC
      auto at = transposed(an.data, m, k);
      gemm_acc(bn.grad_buffer().data(), at.data(), self.grad.data(), k, m, n);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<float> out(m * n, 0.0f);
  auto bt = transposed(b.data(), n, k);
  gemm_acc(out.data(), a.data().data(), bt.data(), m, k, n);
  return make_op("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (an.requires_grad)  // dA = dC . B
      gemm_acc(an.grad_buffer().data(), self.grad.data(), bn.data.data(), m, n, k);
    if (bn.requires_grad) {  // dB = dC^T . A
      auto gt = transposed(self.grad, m, n);
      gemm_acc(bn.grad_buffer().data(), gt.data(), an.data.data(), n, m, k);
    }
  });
}

namespace {

void softmax_rows(std::span<const float> in, std::span<float> out, std::size_t rows,
                  std::size_t cols, std::size_t offset, bool causal) {
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t live = causal ? std::min(cols, i + offset + 1) : cols;
    const float* x = in.data() + i * cols;
    float* y = out.data() + i * cols;
    float mx = x[0];
    for (std::size_t j = 1; j < live; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < live; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (std::size_t j = 0; j < live; ++j) y[j] *= inv;
    for (std::size_t j = live; j < cols; ++j) y[j] = 0.0f;
  }
}

BackwardRule softmax_backward(std::size_t rows, std::size_t cols) {
  return [rows, cols](detail::Node& self) {
    auto gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < rows; ++i) {
      const float* y = self.data.data() + i * cols;
      const float* g = self.grad.data() + i * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += static_cast<double>(g[j]) * y[j];
      for (std::size_t j = 0; j < cols; ++j)
        gi[i * cols + j] += y[j] * (g[j] - static_cast<float>(dot));
    }
  };
}

}  // namespace

Tensor softmax_last(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("softmax_last on a scalar");
  const std::size_t cols = a.shape().back(), rows = a.size() / cols;
  std::vector<float> out(a.size());
  softmax_rows(a.data(), out, rows, cols, 0, false);
  return make_op("softmax", a.shape(), std::move(out), {a}, softmax_backward(rows, cols));
}

Tensor causal_softmax(const Tensor& scores, std::size_t offset) {
  require_rank2(scores, "causal_softmax");
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  std::vector<float> out(scores.size());
  softmax_rows(scores.data(), out, rows, cols, offset, true);
  return make_op("causal_softmax", scores.shape(), std::move(out), {scores},
                 softmax_backward(rows, cols));
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
  if (x.rank() == 0 || weight.rank() != 1 || weight.dim(0) != x.shape().back()) {
    throw DimensionError("rms_norm " + shape_str(x.shape()) + " with weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t cols = weight.dim(0), rows = x.size() / cols;
  auto xd = x.data();
  auto wd = weight.data();
  std::vector<float> out(x.size());
  std::vector<float> inv(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ms += double(xd[i * cols + j]) * xd[i * cols + j];
    inv[i] = static_cast<float>(1.0 / std::sqrt(ms / cols + eps));
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = xd[i * cols + j] * inv[i] * wd[j];
  }
  return make_op("rms_norm", x.shape(), std::move(out), {x, weight},
                 [rows, cols, inv](detail::Node& self) {
                   auto& xn = *self.inputs[0];
                   auto& wn = *self.inputs[1];
                   if (wn.requires_grad) {
                     auto gw = wn.grad_buffer();
                     for (std::size_t i = 0; i < rows; ++i)
                       for (std::size_t j = 0; j < cols; ++j)
                         gw[j] += self.grad[i * cols + j] * xn.data[i * cols + j] * inv[i];
                   }
                   if (xn.requires_grad) {
                     auto gx = xn.grad_buffer();
                     for (std::size_t i = 0; i < rows; ++i) {
                       double dot = 0.0;
                       for (std::size_t j = 0; j < cols; ++j)
                         dot += double(self.grad[i * cols + j]) * wn.data[j] *
                                xn.data[i * cols + j];
                       const float r = inv[i];
                       const float coef = static_cast<float>(dot / cols) * r * r * r;
                       for (std::size_t j = 0; j < cols; ++j)
                         gx[i * cols + j] += r * self.grad[i * cols + j] * wn.data[j] -
                                             xn.data[i * cols + j] * coef;
                     }
                   }
                 });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  auto td = table.data();
  std::vector<float> out(ids.size() * cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw ContractError("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " +
                          std::to_string(rows) + ")");
    }
    std::copy_n(td.begin() + ids[i] * cols, cols, out.begin() + i * cols);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_op("gather_rows", {ids.size(), cols}, std::move(out), {table},
                 [idv, cols](detail::Node& self) {
                   auto gt = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < idv.size(); ++i)
                     for (std::size_t j = 0; j < cols; ++j)
                       gt[idv[i] * cols + j] += self.grad[i * cols + j];
                 });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank2(logits, "cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows) throw DimensionError("cross_entropy: target count mismatch");
  if (rows == 0) throw ContractError("cross_entropy over zero rows");
  auto d = logits.data();
  std::vector<float> probs(d.size());
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= cols)
      throw ContractError("cross_entropy: target outside vocabulary");
    const float* x = d.data() + i * cols;
    float mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(double(x[j]) - mx);
    const double lse = mx + std::log(z);
    total += lse - x[targets[i]];
    for (std::size_t j = 0; j < cols; ++j)
      probs[i * cols + j] = static_cast<float>(std::exp(double(x[j]) - lse));
  }
  std::vector<int> tv(targets.begin(), targets.end());
  return make_op("cross_entropy", {}, {static_cast<float>(total / rows)}, {logits},
                 [rows, cols, tv, probs = std::move(probs)](detail::Node& self) {
                   auto gi = self.inputs[0]->grad_buffer();
                   const float scale = self.grad[0] / static_cast<float>(rows);
                   for (std::size_t i = 0; i < rows; ++i)
                     for (std::size_t j = 0; j < cols; ++j)
                       gi[i * cols + j] +=
                           scale * (probs[i * cols + j] - (int(j) == tv[i] ? 1.0f : 0.0f));
                 });
}

}  // namespace lbq

#include "all4one/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "all4one/errors.hpp"

namespace all4one {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

thread_local Tape* g_active_tape = nullptr;

ConstMap as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MutMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

const std::vector<double>& values_of(const detail::Node& n, std::size_t i) {
  return n.parents[i]->value;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

void require_matrix(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_to_string(t.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  require_defined(a, op);
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return record(a.shape(), std::move(out), {&a}, [deriv](detail::Node& self) {
    auto* ga = self.parent_grad(0);
    if (!ga) return;
    const auto& x = values_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * deriv(x[i], self.value[i]);
  });
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>* detail::Node::parent_grad(std::size_t i) const {
  auto& p = parents[i];
  return p->requires_grad ? &p->grad : nullptr;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return from({n, n}, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("shape of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_to_string(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.empty()) return 1;
  return s.size() == 2 ? s[1] : s[0];
}

std::span<const double> Tensor::data() const& {
  if (!node_) throw ContractError("data of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() & {
  if (!node_) throw ContractError("data of undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw ContractError("set_requires_grad on undefined tensor");
  if (!node_->leaf) throw ContractError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

bool Tensor::on_tape() const { return node_ && node_->tape != nullptr; }

std::optional<std::span<const double>> Tensor::grad() const {
  if (!node_ || node_->grad.empty()) return std::nullopt;
  return std::span<const double>(node_->grad);
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::clone() const {
  Tensor t = from(shape(), node_->value, false);
  if (node_->leaf) t.node_->requires_grad = node_->requires_grad;
  return t;
}

// ---------------------------------------------------------------------------
// Tape

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
  // Recorded results that outlive the tape become plain constants.
  for (auto& n : nodes_) {
    n->tape = nullptr;
    n->leaf = true;
    n->requires_grad = false;
    n->parents.clear();
    n->backward = nullptr;
  }
}

void Tape::append(const detail::NodePtr& node) {
  node->tape = this;
  node->tape_index = nodes_.size();
  nodes_.push_back(node);
}

void Tape::register_leaf(const detail::NodePtr& leaf) {
  if (leaf_index_.insert(leaf.get()).second) leaves_.push_back(leaf);
}

TapeScope::TapeScope(Tape* tape) : previous_(g_active_tape) { g_active_tape = tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

namespace {

Tensor record_impl(Shape shape, std::vector<double> value, const Tensor* const* inputs,
                   std::size_t count, detail::BackwardFn fn) {
  Tape* tape = g_active_tape;
  bool needs_grad = false;
  if (tape) {
    for (std::size_t i = 0; i < count; ++i) {
      const auto& n = inputs[i]->node();
      if (!n->requires_grad) continue;
      if (!n->leaf && n->tape != tape) {
        throw ContractError("operand was recorded on a different tape");
      }
      needs_grad = true;
    }
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (needs_grad) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto& n = inputs[i]->node();
      if (n->leaf && n->requires_grad) tape->register_leaf(n);
      node->parents.push_back(n);
    }
    node->backward = std::move(fn);
    tape->append(node);
  }
  return Tensor(std::move(node));
}

}  // namespace

Tensor record(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
              detail::BackwardFn fn) {
  return record_impl(std::move(shape), std::move(value), inputs.begin(), inputs.size(),
                     std::move(fn));
}

Tensor record_many(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   detail::BackwardFn fn) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  return record_impl(std::move(shape), std::move(value), ptrs.data(), ptrs.size(), std::move(fn));
}

Gradients backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_to_string(loss.shape()));
  }
  Gradients out;
  const auto& root = loss.node();
  Tape* tape = root->tape;
  if (!tape) {
    if (root->leaf && root->requires_grad) {
      out.grads_[root.get()] = {1.0};
      return out;
    }
    throw ContractError("backward: loss is not recorded on a tape");
  }
  for (auto& n : tape->nodes_) n->grad.assign(n->value.size(), 0.0);
  for (auto& n : tape->leaves_) n->grad.assign(n->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (std::size_t i = root->tape_index + 1; i-- > 0;) {
    auto& n = *tape->nodes_[i];
    if (n.backward) n.backward(n);
  }
  for (auto& n : tape->leaves_) out.grads_[n.get()] = n->grad;
  return out;
}

Tensor Gradients::of(const Tensor& leaf) const {
  auto it = grads_.find(leaf.node().get());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape());
  return Tensor::from(leaf.shape(), it->second);
}

bool Gradients::participated(const Tensor& leaf) const {
  return grads_.count(leaf.node().get()) != 0;
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return record(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = self.parent_grad(p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return record(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = self.parent_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return record(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    const auto& x = values_of(self, 0);
    const auto& y = values_of(self, 1);
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * y[i];
    }
    if (auto* g = self.parent_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x < 0.0 ? 0.0 : x; },  // NaN passes through
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor reciprocal(const Tensor& a) {
  return unary(
      a, "reciprocal", [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

// ---------------------------------------------------------------------------
// broadcasting

namespace {

void require_row_vector(const Tensor& x, const Tensor& v, const char* op) {
  require_matrix(x, op);
  require_defined(v, op);
  if (v.numel() != x.cols()) {
    throw DimensionError(std::string(op) + ": vector " + shape_to_string(v.shape()) +
                         " does not match columns of " + shape_to_string(x.shape()));
  }
}

void require_col_vector(const Tensor& x, const Tensor& v, const char* op) {
  require_matrix(x, op);
  require_defined(v, op);
  if (v.numel() != x.rows()) {
    throw DimensionError(std::string(op) + ": vector " + shape_to_string(v.shape()) +
                         " does not match rows of " + shape_to_string(x.shape()));
  }
}

}  // namespace

Tensor add_rowwise(const Tensor& x, const Tensor& v) {
  require_row_vector(x, v, "add_rowwise");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += vv[c];
  return record(x.shape(), std::move(out), {&x, &v}, [n, d](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = self.parent_grad(1)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[c] += self.grad[r * d + c];
    }
  });
}

Tensor mul_rowwise(const Tensor& x, const Tensor& v) {
  require_row_vector(x, v, "mul_rowwise");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= vv[c];
  return record(x.shape(), std::move(out), {&x, &v}, [n, d](detail::Node& self) {
    const auto& xv = values_of(self, 0);
    const auto& vv = values_of(self, 1);
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += self.grad[r * d + c] * vv[c];
    }
    if (auto* g = self.parent_grad(1)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[c] += self.grad[r * d + c] * xv[r * d + c];
    }
  });
}

Tensor add_colwise(const Tensor& x, const Tensor& v) {
  require_col_vector(x, v, "add_colwise");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += vv[r];
  return record(x.shape(), std::move(out), {&x, &v}, [n, d](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = self.parent_grad(1)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[r] += self.grad[r * d + c];
    }
  });
}

Tensor mul_colwise(const Tensor& x, const Tensor& v) {
  require_col_vector(x, v, "mul_colwise");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= vv[r];
  return record(x.shape(), std::move(out), {&x, &v}, [n, d](detail::Node& self) {
    const auto& xv = values_of(self, 0);
    const auto& vv = values_of(self, 1);
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += self.grad[r * d + c] * vv[r];
    }
    if (auto* g = self.parent_grad(1)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[r] += self.grad[r * d + c] * xv[r * d + c];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return record({}, {s}, {&a}, [](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (auto& gi : *g) gi += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_rows(const Tensor& x) {
  require_matrix(x, "sum_rows");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(d, 0.0);
  const auto xv = x.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += xv[r * d + c];
  return record({d}, std::move(out), {&x}, [n, d](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += self.grad[c];
    }
  });
}

Tensor sum_cols(const Tensor& x) {
  require_matrix(x, "sum_cols");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(n, 0.0);
  const auto xv = x.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r] += xv[r * d + c];
  return record({n}, std::move(out), {&x}, [n, d](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += self.grad[r];
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ, " + shape_to_string(a.shape()) + " · " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  as_matrix(out, m, n).noalias() =
      as_matrix(a.node()->value, m, k) * as_matrix(b.node()->value, k, n);
  return record({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    auto dc = as_matrix(self.grad, m, n);
    if (auto* g = self.parent_grad(0)) {
      as_matrix(*g, m, k).noalias() += dc * as_matrix(values_of(self, 1), k, n).transpose();
    }
    if (auto* g = self.parent_grad(1)) {
      as_matrix(*g, k, n).noalias() += as_matrix(values_of(self, 0), m, k).transpose() * dc;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  as_matrix(out, n, m) = as_matrix(a.node()->value, m, n).transpose();
  return record({n, m}, std::move(out), {&a}, [m, n](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      as_matrix(*g, m, n) += as_matrix(self.grad, n, m).transpose();
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const std::size_t n = x.rows(), in = x.cols(), out_dim = weight.rows();
  if (weight.cols() != in) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  std::vector<double> out(n * out_dim);
  auto y = as_matrix(out, n, out_dim);
  y.noalias() = as_matrix(x.node()->value, n, in) *
                as_matrix(weight.node()->value, out_dim, in).transpose();
  if (has_bias) {
    const auto b = bias.data();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += b[c];
  }
  auto fn = [n, in, out_dim](detail::Node& self) {
    auto dy = as_matrix(self.grad, n, out_dim);
    if (auto* g = self.parent_grad(0)) {
      as_matrix(*g, n, in).noalias() += dy * as_matrix(values_of(self, 1), out_dim, in);
    }
    if (auto* g = self.parent_grad(1)) {
      as_matrix(*g, out_dim, in).noalias() += dy.transpose() * as_matrix(values_of(self, 0), n, in);
    }
    if (self.parents.size() > 2) {
      if (auto* g = self.parent_grad(2)) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < out_dim; ++c) (*g)[c] += self.grad[r * out_dim + c];
      }
    }
  };
  if (has_bias) return record({n, out_dim}, std::move(out), {&x, &weight, &bias}, fn);
  return record({n, out_dim}, std::move(out), {&x, &weight}, fn);
}

Tensor diagonal(const Tensor& a) {
  require_matrix(a, "diagonal");
  const std::size_t n = a.rows();
  if (a.cols() != n) throw DimensionError("diagonal: matrix not square " + shape_to_string(a.shape()));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i, i);
  return record({n}, std::move(out), {&a}, [n](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i * n + i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// normalisation

namespace {

void require_finite(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  require_finite(x, "softmax_rows");
  const std::size_t n = x.rows(), d = x.cols();
  const auto xv = x.data();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) z += (out[r * d + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] /= z;
  }
  return record(x.shape(), std::move(out), {&x}, [n, d](detail::Node& self) {
    auto* g = self.parent_grad(0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data() + r * d;
      const double* dy = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += y[c] * (dy[c] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_matrix(x, "log_softmax_rows");
  require_finite(x, "log_softmax_rows");
  const std::size_t n = x.rows(), d = x.cols();
  const auto xv = x.data();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = row[c] - lse;
  }
  return record(x.shape(), std::move(out), {&x}, [n, d](detail::Node& self) {
    auto* g = self.parent_grad(0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data() + r * d;
      const double* dy = self.grad.data() + r * d;
      double total = 0.0;
      for (std::size_t c = 0; c < d; ++c) total += dy[c];
      for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += dy[c] - std::exp(y[c]) * total;
    }
  });
}

Tensor l2_normalize(const Tensor& x, std::size_t axis, std::vector<std::size_t>* degenerate) {
  require_defined(x, "l2_normalize");
  if (x.rank() == 1) {
    if (axis != 0) throw DimensionError("l2_normalize: axis out of range for a vector");
    return reshape(l2_normalize(reshape(x, {1, x.numel()}), 1, degenerate), x.shape());
  }
  require_matrix(x, "l2_normalize");
  if (axis > 1) throw DimensionError("l2_normalize: axis out of range for a matrix");
  const std::size_t n = x.rows(), d = x.cols();
  // A slice runs along `axis`; slice s, element e lives at offset(s, e).
  const std::size_t slices = axis == 1 ? n : d;
  const std::size_t length = axis == 1 ? d : n;
  const std::size_t slice_stride = axis == 1 ? d : 1;
  const std::size_t elem_stride = axis == 1 ? 1 : d;

  const auto xv = x.data();
  std::vector<double> out(xv.begin(), xv.end());
  std::vector<double> norms(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    double sq = 0.0;
    for (std::size_t e = 0; e < length; ++e) {
      const double v = xv[s * slice_stride + e * elem_stride];
      sq += v * v;
    }
    norms[s] = std::sqrt(sq);
    if (norms[s] < kNormEpsilon) {
      if (degenerate) degenerate->push_back(s);
      continue;
    }
    for (std::size_t e = 0; e < length; ++e) out[s * slice_stride + e * elem_stride] /= norms[s];
  }
  return record(x.shape(), std::move(out), {&x},
                [norms = std::move(norms), slices, length, slice_stride,
                 elem_stride](detail::Node& self) {
                  auto* g = self.parent_grad(0);
                  if (!g) return;
                  for (std::size_t s = 0; s < slices; ++s) {
                    const std::size_t base = s * slice_stride;
                    if (norms[s] < kNormEpsilon) {
                      for (std::size_t e = 0; e < length; ++e) {
                        (*g)[base + e * elem_stride] += self.grad[base + e * elem_stride];
                      }
                      continue;
                    }
                    double dot = 0.0;
                    for (std::size_t e = 0; e < length; ++e) {
                      const std::size_t i = base + e * elem_stride;
                      dot += self.value[i] * self.grad[i];
                    }
                    for (std::size_t e = 0; e < length; ++e) {
                      const std::size_t i = base + e * elem_stride;
                      (*g)[i] += (self.grad[i] - self.value[i] * dot) / norms[s];
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// indexing

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return record(std::move(shape), std::move(out), {&x}, [](detail::Node& self) {
    if (auto* g = self.parent_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  if (rows.empty()) throw ContractError("gather_rows: empty index list");
  const std::size_t n = x.rows(), d = x.cols();
  const auto xv = x.data();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_to_string(x.shape()));
    }
    std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record({rows.size(), d}, std::move(out), {&x},
                [idx = std::move(idx), d](detail::Node& self) {
                  auto* g = self.parent_grad(0);
                  if (!g) return;
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t c = 0; c < d; ++c) (*g)[idx[i] * d + c] += self.grad[i * d + c];
                });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != d) {
      throw DimensionError("concat_rows: column mismatch " + shape_to_string(parts.front().shape()) +
                           " vs " + shape_to_string(p.shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return record_many({total, d}, std::move(out), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t len = self.parents[p]->value.size();
      if (auto* g = self.parent_grad(p)) {
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

// ---------------------------------------------------------------------------
// attention

namespace {

struct AttentionGeometry {
  std::size_t sequences, q_len, kv_len, heads, dim, head_dim;
  double inv_sqrt;
};

AttentionGeometry attention_geometry(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t q_len, std::size_t kv_len, std::size_t heads) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  if (v.defined()) require_same_shape(k, v, "attention");
  if (q_len == 0 || kv_len == 0 || heads == 0) throw ContractError("attention: zero extent");
  const std::size_t d = q.cols();
  if (k.cols() != d) {
    throw DimensionError("attention: query " + shape_to_string(q.shape()) + " vs key " +
                         shape_to_string(k.shape()));
  }
  if (d % heads != 0) {
    throw DimensionError("attention: model width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
  }
  if (q.rows() % q_len != 0 || k.rows() % kv_len != 0 ||
      q.rows() / q_len != k.rows() / kv_len) {
    throw DimensionError("attention: sequence layout mismatch, " + shape_to_string(q.shape()) +
                         " / " + std::to_string(q_len) + " vs " + shape_to_string(k.shape()) +
                         " / " + std::to_string(kv_len));
  }
  const std::size_t hd = d / heads;
  return {q.rows() / q_len, q_len, kv_len, heads, d, hd, 1.0 / std::sqrt(static_cast<double>(hd))};
}

std::vector<double> compute_probabilities(const AttentionGeometry& g, const std::vector<double>& q,
                                          const std::vector<double>& k) {
  std::vector<double> probs(g.sequences * g.heads * g.q_len * g.kv_len);
  std::vector<double> row(g.kv_len);
  for (std::size_t s = 0; s < g.sequences; ++s) {
    for (std::size_t h = 0; h < g.heads; ++h) {
      for (std::size_t i = 0; i < g.q_len; ++i) {
        const double* qi = q.data() + (s * g.q_len + i) * g.dim + h * g.head_dim;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < g.kv_len; ++j) {
          const double* kj = k.data() + (s * g.kv_len + j) * g.dim + h * g.head_dim;
          double dot = 0.0;
          for (std::size_t e = 0; e < g.head_dim; ++e) dot += qi[e] * kj[e];
          row[j] = dot * g.inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < g.kv_len; ++j) z += (row[j] = std::exp(row[j] - mx));
        double* p = probs.data() + ((s * g.heads + h) * g.q_len + i) * g.kv_len;
        for (std::size_t j = 0; j < g.kv_len; ++j) p[j] = row[j] / z;
      }
    }
  }
  return probs;
}

}  // namespace

std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k, std::size_t q_len,
                                            std::size_t kv_len, std::size_t heads) {
  const auto g = attention_geometry(q, k, Tensor(), q_len, kv_len, heads);
  return compute_probabilities(g, q.node()->value, k.node()->value);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t q_len,
                 std::size_t kv_len, std::size_t heads) {
  require_defined(v, "attention");
  const auto g = attention_geometry(q, k, v, q_len, kv_len, heads);
  require_finite(q, "attention");
  require_finite(k, "attention");
  auto probs = compute_probabilities(g, q.node()->value, k.node()->value);
  const auto& vv = v.node()->value;
  std::vector<double> out(q.numel(), 0.0);
  for (std::size_t s = 0; s < g.sequences; ++s) {
    for (std::size_t h = 0; h < g.heads; ++h) {
      for (std::size_t i = 0; i < g.q_len; ++i) {
        const double* p = probs.data() + ((s * g.heads + h) * g.q_len + i) * g.kv_len;
        double* oi = out.data() + (s * g.q_len + i) * g.dim + h * g.head_dim;
        for (std::size_t j = 0; j < g.kv_len; ++j) {
          const double* vj = vv.data() + (s * g.kv_len + j) * g.dim + h * g.head_dim;
          for (std::size_t e = 0; e < g.head_dim; ++e) oi[e] += p[j] * vj[e];
        }
      }
    }
  }
  return record(q.shape(), std::move(out), {&q, &k, &v},
                [g, probs = std::move(probs)](detail::Node& self) {
                  const auto& qv = values_of(self, 0);
                  const auto& kv = values_of(self, 1);
                  const auto& vv = values_of(self, 2);
                  auto* gq = self.parent_grad(0);
                  auto* gk = self.parent_grad(1);
                  auto* gv = self.parent_grad(2);
                  std::vector<double> dp(g.kv_len);
                  for (std::size_t s = 0; s < g.sequences; ++s) {
                    for (std::size_t h = 0; h < g.heads; ++h) {
                      for (std::size_t i = 0; i < g.q_len; ++i) {
                        const std::size_t qrow = (s * g.q_len + i) * g.dim + h * g.head_dim;
                        const double* p = probs.data() + ((s * g.heads + h) * g.q_len + i) * g.kv_len;
                        const double* doi = self.grad.data() + qrow;
                        double weighted = 0.0;
                        for (std::size_t j = 0; j < g.kv_len; ++j) {
                          const std::size_t krow = (s * g.kv_len + j) * g.dim + h * g.head_dim;
                          double dot = 0.0;
                          for (std::size_t e = 0; e < g.head_dim; ++e) {
                            dot += doi[e] * vv[krow + e];
                            if (gv) (*gv)[krow + e] += p[j] * doi[e];
                          }
                          dp[j] = dot;
                          weighted += p[j] * dot;
                        }
                        if (!gq && !gk) continue;
                        for (std::size_t j = 0; j < g.kv_len; ++j) {
                          const double ds = p[j] * (dp[j] - weighted) * g.inv_sqrt;
                          const std::size_t krow = (s * g.kv_len + j) * g.dim + h * g.head_dim;
                          for (std::size_t e = 0; e < g.head_dim; ++e) {
                            if (gq) (*gq)[qrow + e] += ds * kv[krow + e];
                            if (gk) (*gk)[krow + e] += ds * qv[qrow + e];
                          }
                        }
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// finite differences

double finite_diff_check(const ScalarFn& f, Tensor x, double h) {
  if (!x.is_leaf()) throw ContractError("finite_diff_check: x must be a leaf tensor");
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = f(x);
    if (y.numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
    if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: f(x) is not finite");
    if (y.on_tape()) {
      const auto grads = backward(y);
      const Tensor g = grads.of(x);
      analytic.assign(g.data().begin(), g.data().end());
    } else {
      analytic.assign(x.numel(), 0.0);
    }
  }
  x.set_requires_grad(had_grad);

  NoGradScope no_grad;
  auto values = x.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + h;
    const double fp = f(x).item();
    values[i] = original - h;
    const double fm = f(x).item();
    values[i] = original;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_check: non-finite value under perturbation");
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace all4one

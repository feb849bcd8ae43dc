#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle: copying it aliases the same storage, use
// clone() for an independent deep copy. Operations record themselves on the
// thread's active Tape (see TapeScope) whenever one of their inputs requires
// a gradient; with no active tape they run as plain arithmetic.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace all4one {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tape;
class Gradients;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<NodePtr> parents;
  BackwardFn backward;
  Tape* tape = nullptr;
  std::size_t tape_index = 0;

  // Gradient buffer of parent i, or nullptr when that parent takes none.
  std::vector<double>* parent_grad(std::size_t i) const;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor eye(std::size_t n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // 2-D accessors; rank-1 tensors count as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  // Views into storage; not available on temporaries, whose storage may die
  // with them.
  std::span<const double> data() const&;
  std::span<const double> data() const&& = delete;
  // Direct write access, bypassing the tape. Used by optimizers and EMA.
  std::span<double> mutable_data() &;
  std::span<double> mutable_data() && = delete;
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  // Only leaves may change this flag.
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool on_tape() const;
  // Gradient buffer of the most recent backward pass that reached this tensor.
  std::optional<std::span<const double>> grad() const;

  // Same values, no history, no gradient.
  Tensor detach() const;
  Tensor clone() const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// Ordered record of differentiable operations. Nodes are appended in
// creation order, which is a valid topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  std::size_t size() const { return nodes_.size(); }
  std::size_t leaf_count() const { return leaves_.size(); }

  // Used by record(); appends a node and stamps its tape position.
  void append(const detail::NodePtr& node);
  void register_leaf(const detail::NodePtr& leaf);

 private:
  friend Gradients backward(const Tensor& loss);

  std::vector<detail::NodePtr> nodes_;
  std::vector<detail::NodePtr> leaves_;
  std::unordered_set<const detail::Node*> leaf_index_;
};

// Makes `tape` the active tape of this thread for the scope's lifetime.
// Passing nullptr suspends recording.
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  explicit TapeScope(Tape& tape) : TapeScope(&tape) {}
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope();

 private:
  Tape* previous_;
};

struct NoGradScope : TapeScope {
  NoGradScope() : TapeScope(nullptr) {}
};

Tape* active_tape();

// Result of a backward pass: accumulated gradients of every leaf on the tape.
class Gradients {
 public:
  // Zeros for leaves that did not take part in the loss.
  Tensor of(const Tensor& leaf) const;
  bool participated(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Tensor& loss);
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

Gradients backward(const Tensor& loss);

// Creates an op result. Records a node when a tape is active and any input
// requires a gradient. Exposed for the fused primitives of other modules.
Tensor record(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
              detail::BackwardFn fn);
Tensor record_many(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   detail::BackwardFn fn);

// ---- elementwise ----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// Subgradient 0 at exactly 0.
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor reciprocal(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---- broadcasting (row / column vectors only) -----------------------------
// x: N×D, v: D values
Tensor add_rowwise(const Tensor& x, const Tensor& v);
Tensor mul_rowwise(const Tensor& x, const Tensor& v);
// x: N×D, v: N values
Tensor add_colwise(const Tensor& x, const Tensor& v);
Tensor mul_colwise(const Tensor& x, const Tensor& v);

// ---- reductions ------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// N×D -> D (sum over the batch axis)
Tensor sum_rows(const Tensor& x);
// N×D -> N
Tensor sum_cols(const Tensor& x);

// ---- linear algebra --------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x·Wᵀ + b; `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Square matrix -> its diagonal.
Tensor diagonal(const Tensor& a);

// ---- normalisation ---------------------------------------------------------
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

inline constexpr double kNormEpsilon = 1e-12;

// Unit-norm slices along `axis` (0: columns, 1: rows of a matrix). Slices
// with norm below kNormEpsilon pass through unchanged and their indices are
// appended to `degenerate`.
Tensor l2_normalize(const Tensor& x, std::size_t axis,
                    std::vector<std::size_t>* degenerate = nullptr);

// ---- indexing --------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(const std::vector<Tensor>& parts);

// ---- attention -------------------------------------------------------------
// Batched multi-head scaled dot-product attention over S independent
// sequences. q: (S·q_len)×D, k and v: (S·kv_len)×D. Each head attends with
// softmax(q_h k_hᵀ / sqrt(D/heads)) over its own sequence.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t q_len,
                 std::size_t kv_len, std::size_t heads);
// Attention weights laid out [S][head][q_len][kv_len].
std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k, std::size_t q_len,
                                            std::size_t kv_len, std::size_t heads);

// ---- verification ----------------------------------------------------------
using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over entries of |analytic − central difference| /
// max(1e-8, |analytic| + |numeric|). `x` must be a leaf; its values are
// perturbed in place and restored.
double finite_diff_check(const ScalarFn& f, Tensor x, double h = 1e-5);

}  // namespace all4one

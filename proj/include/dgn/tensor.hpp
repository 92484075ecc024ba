#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to an immutable node (shape + flat row-major
// data). Ops executed while a Tape is active and with at least one
// grad-tracked input are recorded on that tape; Tape::backward walks the
// record in reverse and accumulates gradients into every tracked input.
// Ops executed with no active tape produce plain constants, which is how
// inference runs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace dgn {

#ifdef DGN_USE_FLOAT
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

/// Shape or axis contract violated by an op's inputs.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid model/training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An op produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the tape (non-scalar loss, double backward, ...).
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Runtime settings: deterministic mode and intra-op threads.

namespace detail {
struct Settings {
  std::atomic<bool> deterministic{true};
  std::atomic<unsigned> threads{1};
  std::atomic<std::uint64_t> mac_counter{0};
};
inline Settings& settings() {
  static Settings s;
  return s;
}
}  // namespace detail

/// Deterministic mode (default on) fixes every reduction order, including
/// the canonical key ordering inside attention.
inline bool deterministic() { return detail::settings().deterministic.load(); }
inline void set_deterministic(bool on) { detail::settings().deterministic = on; }

inline unsigned num_threads() { return detail::settings().threads.load(); }
inline void set_num_threads(unsigned n) { detail::settings().threads = std::max(1u, n); }

/// Multiply-accumulate counter incremented by matmul, attention,
/// conv_transpose2d. Used to cross-check the analytic FLOP estimate.
inline std::uint64_t mac_count() { return detail::settings().mac_counter.load(); }
inline void reset_mac_count() { detail::settings().mac_counter = 0; }
inline void add_macs(std::uint64_t n) { detail::settings().mac_counter += n; }

/// Runs fn(begin, end) over [0, n) split into contiguous chunks. Each output
/// index is owned by exactly one chunk, so results do not depend on the
/// thread count as long as fn reduces inside an index in a fixed order.
/// Deterministic mode runs single-threaded.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t min_chunk, Fn&& fn) {
  const unsigned threads = deterministic() ? 1u : num_threads();
  if (threads <= 1 || n < 2 * min_chunk) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunks = std::min<std::size_t>(threads, n / min_chunk);
  const std::size_t step = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(chunks);
  for (std::size_t c = 1; c < chunks; ++c) {
    const std::size_t b = c * step;
    const std::size_t e = std::min(n, b + step);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, step));
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Real> values) {
    if (dgn::numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + to_string(shape) + " holds " +
                           std::to_string(dgn::numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (auto s : shape) {
      if (s == 0) throw DimensionError("tensor: zero-length axis in " + to_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->op = "leaf";
    return Tensor(std::move(node));
  }
  static Tensor full(Shape shape, Real value) {
    const auto n = dgn::numel(shape);
    return from(std::move(shape), std::vector<Real>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), Real(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), Real(1)); }
  static Tensor scalar(Real v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim() const { return node().shape.size(); }
  std::size_t size(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().data.size(); }
  std::span<const Real> data() const { return node().data; }
  const std::vector<Real>& values() const { return node().data; }
  Real item() const {
    if (numel() != 1) throw DimensionError("item: tensor " + to_string(shape()) + " is not scalar");
    return node().data[0];
  }
  Real operator[](std::size_t i) const { return node().data.at(i); }
  const std::string& op_name() const { return node().op; }

  /// Writable view for leaves only (parameter updates, test perturbation).
  std::span<Real> mutable_data() {
    if (!node().leaf) throw AutodiffError("mutable_data: only leaf tensors are writable");
    return node_->data;
  }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node().leaf) throw AutodiffError("set_requires_grad: only leaf tensors can be toggled");
    node_->requires_grad = on;
    if (on) {
      node_->ensure_grad();
    } else {
      node_->grad.clear();
    }
    return *this;
  }
  bool is_leaf() const { return node().leaf; }

  /// Accumulated gradient; zeros for a tracked leaf nothing flowed into,
  /// empty for untracked tensors.
  std::span<const Real> grad() const { return node().grad; }
  void zero_grad() {
    auto& g = node_->grad;
    std::fill(g.begin(), g.end(), Real(0));
  }

  /// Identity comparison (same underlying node).
  bool same(const Tensor& other) const { return node_ == other.node_; }

  /// A new untracked leaf holding a copy of the values.
  Tensor detach() const { return from(shape(), node().data); }

  // Internal handle; used by op implementations.
  const std::shared_ptr<detail::Node>& handle() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  const detail::Node& node() const {
    if (!node_) throw AutodiffError("tensor: use of undefined tensor");
    return *node_;
  }
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of executed differentiable ops. One training step owns
/// one tape; it is single-writer.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (detail::active_tape() == this) detail::active_tape() = nullptr;
  }

  void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Drops the record so the tape can serve another forward pass. Leaf
  /// gradients are left untouched (they accumulate across backward calls).
  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  /// Populates gradients of every tracked tensor reachable from loss.
  void backward(const Tensor& loss, Real seed = Real(1)) {
    if (consumed_) throw AutodiffError("backward: tape already consumed; call reset() first");
    if (loss.numel() != 1) {
      throw AutodiffError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
    }
    if (nodes_.empty()) throw AutodiffError("backward: tape is empty");
    consumed_ = true;
    auto& root = *loss.handle();
    if (!root.requires_grad) return;
    root.ensure_grad();
    root.grad[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.grad.empty()) continue;  // unreachable from loss
      if (n.backward) n.backward(n);
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool consumed_ = false;
};

/// Makes a tape the recording target for the current thread while in scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape()) { detail::active_tape() = &tape; }
  ~TapeScope() { detail::active_tape() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Convenience wrapper: backward(tape, loss).
inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

namespace detail {

inline void check_finite(const std::string& op, std::span<const Real> values) {
  for (Real v : values) {
    if (!std::isfinite(v)) throw NumericError(op + ": produced a non-finite value");
  }
}

/// Builds the output of an op. The backward closure is attached (and the
/// node recorded) only when some parent is tracked and a tape is active.
inline Tensor make_result(std::string op, Shape shape, std::vector<Real> data,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  node->leaf = false;
  Tape* tape = active_tape();
  bool tracked = false;
  for (const auto& p : parents) tracked = tracked || p.requires_grad();
  if (tracked && tape != nullptr) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.handle());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

/// Grad buffer of parent i if it is tracked, else nullptr.
inline Real* parent_grad(Node& n, std::size_t i) {
  auto& p = *n.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

}  // namespace detail
}  // namespace dgn

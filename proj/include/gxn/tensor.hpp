#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace gxn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct ThreadState {
  std::uint64_t next_id = 1;
  int no_grad_depth = 0;
  // Pre-activation values of kinked ops (relu, max0diff, ...) while a monitor is installed.
  std::vector<double>* kink_log = nullptr;
  std::size_t nonfinite_events = 0;
};

inline ThreadState& thread_state() {
  thread_local ThreadState state;
  return state;
}

}  // namespace detail

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::thread_state().no_grad_depth; }
  ~NoGradGuard() { --detail::thread_state().no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::thread_state().no_grad_depth == 0; }

/// Count of ops on this thread that produced a non-finite value (log of a
/// non-positive number, overflowing exp, ...). The value itself propagates.
inline std::size_t nonfinite_events() { return detail::thread_state().nonfinite_events; }
inline void reset_nonfinite_events() { detail::thread_state().nonfinite_events = 0; }

/// Records pre-activation values of every kinked op evaluated while alive.
class KinkMonitor {
 public:
  KinkMonitor() : previous_(detail::thread_state().kink_log) {
    detail::thread_state().kink_log = &values_;
  }
  ~KinkMonitor() { detail::thread_state().kink_log = previous_; }
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> values_;
  std::vector<double>* previous_;
};

template <typename Scalar>
struct Node {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Vector value;
  Vector grad;
  std::vector<std::shared_ptr<Node>> parents;
  // Adds this node's grad into the grads of tracked parents.
  std::function<void(Node&)> backward;
  std::uint64_t id = 0;
  bool tracked = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Vector::Zero(value.size());
  }
};

template <typename Scalar>
class BasicTensor {
 public:
  using scalar_type = Scalar;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  BasicTensor() = default;

  static BasicTensor constant(Shape shape, Vector values) { return make_leaf(std::move(shape), std::move(values), false); }

  /// Tracked leaf; gradients accumulate into it across backward() calls.
  static BasicTensor parameter(Shape shape, Vector values) { return make_leaf(std::move(shape), std::move(values), true); }

  static BasicTensor zeros(Shape shape, bool tracked = false) {
    const auto n = numel(shape);
    return make_leaf(std::move(shape), Vector::Zero(static_cast<Eigen::Index>(n)), tracked);
  }

  static BasicTensor scalar(Scalar value) {
    Vector v(1);
    v[0] = value;
    return constant({1}, std::move(v));
  }

  static BasicTensor from(Shape shape, std::initializer_list<Scalar> values, bool tracked = false) {
    Vector v(static_cast<Eigen::Index>(values.size()));
    std::copy(values.begin(), values.end(), v.data());
    return make_leaf(std::move(shape), std::move(v), tracked);
  }

  /// Internal: result of an op. Records parents only when any is tracked.
  static BasicTensor make_result(Shape shape, Vector values, std::vector<BasicTensor> inputs,
                                 std::function<void(Node<Scalar>&)> backward) {
    check_size(shape, values);
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->id = detail::thread_state().next_id++;
    node->leaf = false;
    if (!node->value.allFinite()) ++detail::thread_state().nonfinite_events;
    bool any = false;
    for (const auto& in : inputs) any = any || in.tracked();
    if (any && grad_enabled()) {
      node->tracked = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node_);
      node->backward = std::move(backward);
    }
    return BasicTensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t size() const { return static_cast<std::size_t>(node().value.size()); }
  bool tracked() const { return node_ && node_->tracked; }
  bool is_leaf() const { return node().leaf; }
  std::uint64_t id() const { return node().id; }

  const Vector& values() const { return node().value; }
  std::span<const Scalar> span() const { return {node().value.data(), size()}; }
  Scalar operator[](std::size_t i) const { return node().value[static_cast<Eigen::Index>(i)]; }

  /// Mutable access for leaves only (parameter updates, test perturbation).
  Vector& mutable_values() {
    if (!node().leaf) throw std::logic_error("mutable_values on a non-leaf tensor");
    return node_->value;
  }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node().value[0];
  }

  /// Gradient accumulated by backward(); zeros if none has reached this tensor.
  const Vector& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (node_ && node_->grad.size()) node_->grad.setZero();
  }

  /// Rows = leading dimension, cols = everything else.
  ConstMatrixMap matrix() const {
    const auto rows = rank() == 0 ? std::size_t{1} : dim(0);
    return ConstMatrixMap(node().value.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(rows ? size() / rows : 0));
  }

  /// Untracked copy of the values.
  BasicTensor detach() const { return constant(shape(), values()); }

  const NodePtr& node_ptr() const { return node_; }

 private:
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static void check_size(const Shape& shape, const Vector& values) {
    if (numel(shape) != static_cast<std::size_t>(values.size())) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + to_string(shape));
    }
  }

  static BasicTensor make_leaf(Shape shape, Vector values, bool tracked) {
    check_size(shape, values);
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->tracked = tracked;
    node->id = detail::thread_state().next_id++;
    return BasicTensor(std::move(node));
  }

  const Node<Scalar>& node() const {
    if (!node_) throw std::logic_error("use of an undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

/// Topologically ordered record of the tracked ancestors of a root tensor.
/// Replaying it back to front visits every node after all of its consumers.
template <typename Scalar>
class GradTape {
 public:
  explicit GradTape(const BasicTensor<Scalar>& root) {
    if (!root.tracked()) return;
    std::unordered_set<const Node<Scalar>*> seen;
    // Iterative post-order DFS; parents land before their consumers.
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
    stack.emplace_back(root.node_ptr().get(), 0);
    seen.insert(root.node_ptr().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<Scalar>* parent = node->parents[next++].get();
        if (parent->tracked && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::span<Node<Scalar>* const> order() const { return order_; }

  void replay() const {
    using Vector = typename Node<Scalar>::Vector;
    for (auto* node : order_) {
      if (!node->leaf) node->grad = Vector::Zero(node->value.size());
    }
    Node<Scalar>* root = order_.back();
    root->ensure_grad();
    root->grad.array() += Scalar(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<Scalar>* node = *it;
      if (node->leaf || !node->backward) continue;
      node->backward(*node);
      // Intermediate gradients are only needed during this pass.
      if (node != root) node->grad.resize(0);
    }
    if (!root->leaf) root->grad.resize(0);
  }

 private:
  std::vector<Node<Scalar>*> order_;
};

/// Accumulates d(loss)/d(leaf) into every tracked leaf reachable from loss.
template <typename Scalar>
void backward(const BasicTensor<Scalar>& loss) {
  if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.tracked()) throw std::invalid_argument("backward() on an untracked loss");
  GradTape<Scalar>(loss).replay();
}

using Tensor = BasicTensor<double>;

}  // namespace gxn

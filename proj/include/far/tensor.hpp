#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace far {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Shape = std::vector<std::int64_t>;

std::string shape_string(const Shape& shape);

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

/// Rows of the 2-D view of a tensor: product of all but the last dimension.
inline Eigen::Index view_rows(const Shape& shape) {
  if (shape.size() <= 1) return 1;
  return static_cast<Eigen::Index>(numel(shape) / shape.back());
}

inline Eigen::Index view_cols(const Shape& shape) {
  return shape.empty() ? 1 : static_cast<Eigen::Index>(shape.back());
}

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename Scalar>
struct Node {
  Shape shape;
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const MatrixX<Scalar>&)> backward;
};

}  // namespace detail

/// Whether operations currently record a graph.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle participating in a define-by-run graph.
///
/// Copies of a Tensor share the same node; parameters are leaves whose value
/// persists across forward passes while intermediate nodes are rebuilt each
/// pass. Data is stored as the 2-D view `view_rows(shape) x view_cols(shape)`.
template <typename Scalar>
class Tensor {
 public:
  using Matrix = MatrixX<Scalar>;
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Tensor() = default;

  static Tensor from_matrix(Matrix value, Shape shape, bool requires_grad = false) {
    if (numel(shape) != value.size() || value.rows() != view_rows(shape)) {
      throw DimensionError("tensor data " + std::to_string(value.rows()) + "x" +
                           std::to_string(value.cols()) + " does not match shape " +
                           shape_string(shape));
    }
    auto node = std::make_shared<detail::Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  /// 2-D tensor with the matrix's own shape.
  static Tensor from_matrix(Matrix value, bool requires_grad = false) {
    Shape shape{value.rows(), value.cols()};
    return from_matrix(std::move(value), std::move(shape), requires_grad);
  }

  static Tensor from_values(Shape shape, const std::vector<Scalar>& values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_string(shape));
    }
    Matrix m(view_rows(shape), view_cols(shape));
    std::copy(values.begin(), values.end(), m.data());
    return from_matrix(std::move(m), std::move(shape), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Matrix m = Matrix::Zero(view_rows(shape), view_cols(shape));
    return from_matrix(std::move(m), std::move(shape), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return from_matrix(std::move(m), Shape{}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t size() const { return node_->value.size(); }

  const Matrix& value() const { return node_->value; }
  /// Mutable storage of a leaf; used by optimizers and mask application.
  Matrix& mutable_value() {
    if (!node_->leaf) throw std::logic_error("mutable_value() on a non-leaf tensor");
    return node_->value;
  }
  Scalar item() const {
    if (node_->value.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
    return node_->value(0, 0);
  }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->leaf) throw std::logic_error("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
  }
  bool is_leaf() const { return node_->leaf; }

  /// A constant leaf holding a copy of this tensor's value.
  Tensor detach() const { return from_matrix(node_->value, node_->shape, false); }

  /// Deep copy into an independent leaf with the same requires_grad flag.
  Tensor clone() const { return from_matrix(node_->value, node_->shape, node_->requires_grad); }

  /// Replaces shape and value of a leaf in place (shared by every handle).
  void assign(Matrix value, Shape shape) {
    if (!node_->leaf) throw std::logic_error("assign() on a non-leaf tensor");
    if (numel(shape) != value.size()) throw DimensionError("assign(): size mismatch");
    node_->value = std::move(value);
    node_->shape = std::move(shape);
    node_->grad.resize(0, 0);
  }

  const NodePtr& node() const { return node_; }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

namespace detail {

template <typename Scalar>
void accumulate(const Tensor<Scalar>& t, const MatrixX<Scalar>& contribution) {
  auto& node = *t.node();
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = contribution;
  } else {
    node.grad += contribution;
  }
}

/// Builds the result node of an operation; the backward closure is kept only
/// when some parent requires a gradient and recording is enabled.
template <typename Scalar, typename Backward>
Tensor<Scalar> make_result(Shape shape, MatrixX<Scalar> value, std::vector<Tensor<Scalar>> parents,
                           Backward&& backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires one; frozen leaves are skipped.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  auto root = loss.node();
  if (root->value.size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(root->shape));
  }
  if (root->backward_done) {
    throw std::logic_error("backward() already ran on this graph; rebuild the forward pass first");
  }
  root->backward_done = true;
  if (!root->requires_grad) return;

  // Iterative post-order DFS; parents are visited in their recorded order so
  // the resulting topological order is deterministic.
  std::vector<detail::Node<Scalar>*> order;
  std::unordered_set<detail::Node<Scalar>*> visited;
  std::vector<std::pair<detail::Node<Scalar>*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  MatrixX<Scalar> seed(1, 1);
  seed(0, 0) = Scalar(1);
  detail::accumulate(loss, seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(node->grad);
  }
}

}  // namespace far

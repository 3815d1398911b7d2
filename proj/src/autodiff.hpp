#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "error.hpp"

namespace gatedformer {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Runtime switch for the per-op non-finite scan ("debug mode" checks).
inline bool& finite_checks_enabled() {
  static bool enabled = true;
  return enabled;
}

namespace detail {
inline std::atomic<uint64_t>& node_seq_counter() {
  static std::atomic<uint64_t> counter{1};
  return counter;
}
}  // namespace detail

// One recorded value in the define-by-run graph. Creation order (`seq`)
// is topological by construction; backward replays it in reverse.
template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until an accumulation touches it
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T fill, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value.assign(static_cast<size_t>(shape_numel(node->shape)), fill);
    node->requires_grad = requires_grad;
    node->seq = detail::node_seq_counter().fetch_add(1, std::memory_order_relaxed);
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    require(shape_numel(shape) == static_cast<int64_t>(values.size()), ErrorCode::ShapeMismatch,
            "tensor data length " + std::to_string(values.size()) + " does not match shape " +
                shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->seq = detail::node_seq_counter().fetch_add(1, std::memory_order_relaxed);
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::span<const T> values() const { return node_->value; }
  // Leaf mutation between steps (optimizer updates, finite-difference nudges).
  std::span<T> values_mut() { return node_->value; }

  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::vector<T> to_vector() const { return node_->value; }

  std::shared_ptr<Node> node() const { return node_; }
  Node* raw() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
void check_finite(const TensorNode<T>& node, const char* op, bool allow_neg_inf = false) {
  if (!finite_checks_enabled()) return;
  for (T v : node.value) {
    if (std::isnan(v) || (std::isinf(v) && !(allow_neg_inf && v < T(0)))) {
      fail(ErrorCode::NonFinite,
           std::string(op) + " produced a non-finite value on finite inputs");
    }
  }
}

template <class T>
std::shared_ptr<TensorNode<T>> new_node(Shape shape) {
  auto node = std::make_shared<TensorNode<T>>();
  node->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  node->shape = std::move(shape);
  node->seq = node_seq_counter().fetch_add(1, std::memory_order_relaxed);
  return node;
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

// Reverse sweep from a scalar loss. Nodes replay strictly in reverse creation
// order, so every recorded operation is visited exactly once.
template <class T>
void backward(const Tensor<T>& loss) {
  require(loss.size() == 1, ErrorCode::NotScalar,
          "backward requires a scalar loss, got shape " + shape_str(loss.shape()));

  std::vector<TensorNode<T>*> reachable;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<TensorNode<T>*> stack{loss.raw()};
  seen.insert(loss.raw());
  while (!stack.empty()) {
    TensorNode<T>* node = stack.back();
    stack.pop_back();
    reachable.push_back(node);
    for (const auto& parent : node->parents) {
      if (parent->requires_grad && seen.insert(parent.get()).second) {
        stack.push_back(parent.get());
      }
    }
  }
  std::sort(reachable.begin(), reachable.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->seq > b->seq; });

  loss.raw()->ensure_grad();
  loss.raw()->grad[0] += T(1);
  for (TensorNode<T>* node : reachable) {
    if (node->backward_fn && !node->grad.empty()) node->backward_fn();
  }
}

// Central-difference oracle. `fn` must be a deterministic function of the
// current leaf values; the leaf is restored before returning.
template <class T>
double finite_diff_check(const std::function<Tensor<T>()>& fn, Tensor<T> x, T h = T(1e-5)) {
  require(x.requires_grad(), ErrorCode::InvalidArgument,
          "finite_diff_check leaf must require gradients");

  Tensor<T> first = fn();
  require(first.size() == 1, ErrorCode::NotScalar, "finite_diff_check needs a scalar function");
  Tensor<T> second = fn();
  require(first.values()[0] == second.values()[0] ||
              (std::isnan(first.values()[0]) && std::isnan(second.values()[0])),
          ErrorCode::NondeterministicFunction,
          "two evaluations at the same point returned different values");

  x.zero_grad();
  backward(second);
  std::vector<T> analytic(x.grad().begin(), x.grad().end());

  double max_rel_err = 0.0;
  auto vals = x.values_mut();
  for (size_t i = 0; i < vals.size(); ++i) {
    const T orig = vals[i];
    vals[i] = orig + h;
    const double f_plus = static_cast<double>(fn().values()[0]);
    vals[i] = orig - h;
    const double f_minus = static_cast<double>(fn().values()[0]);
    vals[i] = orig;
    const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(h));
    const double rel = std::abs(static_cast<double>(analytic[i]) - numeric) /
                       std::max(1e-8, std::abs(numeric));
    max_rel_err = std::max(max_rel_err, rel);
  }
  return max_rel_err;
}

}  // namespace gatedformer

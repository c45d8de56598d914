#pragma once

#include "gazeloss/common.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace gazeloss {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline uint64_t& graph_seq_counter() {
  thread_local uint64_t counter = 0;
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

/// One recorded operation (or leaf) in the compute graph. Creation order is
/// captured in `seq`; parents always carry a smaller seq than their children,
/// so reverse creation order is a valid reverse-topological order.
template <typename S>
struct TensorNode {
  Shape shape;
  VecX<S> value;
  VecX<S> grad;  // allocated on first accumulation
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Pulls this node's grad into its parents. Unset on leaves.
  std::function<void(TensorNode&)> backprop;

  void add_grad(const Eigen::Ref<const VecX<S>>& delta) {
    if (grad.size() == 0) grad = VecX<S>::Zero(value.size());
    grad += delta;
  }
  void add_grad_at(int64_t i, S delta) {
    if (grad.size() == 0) grad = VecX<S>::Zero(value.size());
    grad[i] += delta;
  }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major tensor participating in reverse-mode autodiff.
///
/// A Tensor is a shared handle to a graph node: copies alias the same storage
/// and gradient, which is what optimizer and graph code want. Scalar type S
/// is float in production; tests also instantiate double for tight
/// finite-difference tolerances.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(Shape shape, S v, bool requires_grad = false) {
    Tensor t;
    t.node_ = make_leaf(std::move(shape));
    t.node_->value.setConstant(v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = make_leaf(std::move(shape));
    std::copy(data.begin(), data.end(), t.node_->value.data());
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return filled({1}, v, requires_grad);
  }

  static Tensor from_grid(const GridX<S>& g, bool requires_grad = false) {
    Tensor t;
    t.node_ = make_leaf({static_cast<int>(g.rows()), static_cast<int>(g.cols())});
    Eigen::Map<GridX<S>>(t.node_->value.data(), g.rows(), g.cols()) = g;
    t.node_->requires_grad = requires_grad;
    return t;
  }

  /// Seeded fan-in-style uniform fill in [-bound, bound].
  static Tensor uniform(Shape shape, S bound, Rng& rng, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    S* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
      p[i] = static_cast<S>(rng.uniform_in(-double(bound), double(bound)));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  Eigen::Map<VecX<S>> vec() { return {node_->value.data(), node_->value.size()}; }
  Eigen::Map<const VecX<S>> vec() const { return {node_->value.data(), node_->value.size()}; }

  /// Rank-2 (or [1,h,w]) view as a grid copy.
  GridX<S> grid() const {
    int r = rank();
    int h, w;
    if (r == 2) {
      h = dim(0);
      w = dim(1);
    } else if (r == 3 && dim(0) == 1) {
      h = dim(1);
      w = dim(2);
    } else {
      throw DimensionError("grid() expects a rank-2 tensor, got " + shape_str(shape()));
    }
    return Eigen::Map<const GridX<S>>(data(), h, w);
  }

  S item() const {
    if (numel() != 1) throw ContractError("item() expects a scalar tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  bool has_grad() const { return node_->grad.size() > 0; }
  const VecX<S>& grad() const { return node_->grad; }
  VecX<S>& mutable_grad() { return node_->grad; }
  void zero_grad() {
    if (node_->grad.size() > 0) node_->grad.setZero();
  }

  std::shared_ptr<detail::TensorNode<S>> node() const { return node_; }

  /// Wraps an op result. Records parents and the pull-back only when grad
  /// mode is on and some parent needs gradients.
  static Tensor make_op(Shape shape, std::vector<Tensor> parents,
                        std::function<void(detail::TensorNode<S>&)> backprop) {
    Tensor t;
    t.node_ = make_leaf(std::move(shape));
    bool track = grad_mode_enabled();
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (track && any) {
      t.node_->requires_grad = true;
      t.node_->backprop = std::move(backprop);
      t.node_->parents.reserve(parents.size());
      for (auto& p : parents) t.node_->parents.push_back(p.node_);
    }
    return t;
  }

 private:
  static std::shared_ptr<detail::TensorNode<S>> make_leaf(Shape shape) {
    auto n = std::make_shared<detail::TensorNode<S>>();
    n->value = VecX<S>::Zero(shape_numel(shape));
    n->shape = std::move(shape);
    n->seq = ++detail::graph_seq_counter();
    return n;
  }

  std::shared_ptr<detail::TensorNode<S>> node_;
};

/// Ordered record of the operations reachable from a root, in reverse
/// creation order. Running backward visits every recorded node exactly once.
template <typename S>
class ComputeGraph {
 public:
  explicit ComputeGraph(const Tensor<S>& root) : root_(root.node()) {
    std::unordered_set<const detail::TensorNode<S>*> seen;
    std::vector<detail::TensorNode<S>*> stack{root_.get()};
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto* n = stack.back();
      stack.pop_back();
      order_.push_back(n);
      for (const auto& p : n->parents)
        if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order_.begin(), order_.end(),
              [](const auto* a, const auto* b) { return a->seq > b->seq; });
  }

  size_t size() const { return order_.size(); }

  std::vector<uint64_t> visit_order() const {
    std::vector<uint64_t> v;
    v.reserve(order_.size());
    for (const auto* n : order_) v.push_back(n->seq);
    return v;
  }

  /// Seeds d(root)/d(root) = 1 and pulls gradients through the record.
  /// Interior grads are transient scratch; leaf grads accumulate across
  /// calls until zero_grad().
  void run_backward() {
    for (auto* n : order_)
      if (n->backprop && n->grad.size() > 0) n->grad.setZero();
    root_->add_grad_at(0, S(1));
    for (auto* n : order_)
      if (n->backprop && n->requires_grad && n->grad.size() > 0) n->backprop(*n);
  }

 private:
  std::shared_ptr<detail::TensorNode<S>> root_;
  std::vector<detail::TensorNode<S>*> order_;
};

/// Reverse-mode sweep from a scalar loss.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() expects a scalar loss, got " + shape_str(loss.shape()));
  ComputeGraph<S>(loss).run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  Tensor<S> out = Tensor<S>::make_op(a.shape(), {a, b}, [an, bn](detail::TensorNode<S>& o) {
    if (an->requires_grad) an->add_grad(o.grad);
    if (bn->requires_grad) bn->add_grad(o.grad);
  });
  out.vec() = a.vec() + b.vec();
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto an = a.node();
  Tensor<S> out = Tensor<S>::make_op(a.shape(), {a}, [an, c](detail::TensorNode<S>& o) {
    an->add_grad(o.grad * c);
  });
  out.vec() = a.vec() * c;
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  auto an = a.node();
  Tensor<S> out = Tensor<S>::make_op({1}, {a}, [an](detail::TensorNode<S>& o) {
    an->add_grad(VecX<S>::Constant(an->value.size(), o.grad[0]));
  });
  // Fixed row-major accumulation order.
  S acc = 0;
  const S* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += p[i];
  out.data()[0] = acc;
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  Tensor<S> out = Tensor<S>::make_op(a.shape(), {a, b}, [an, bn](detail::TensorNode<S>& o) {
    if (an->requires_grad) an->add_grad(o.grad * bn->value);
    if (bn->requires_grad) bn->add_grad(o.grad * an->value);
  });
  out.vec() = a.vec() * b.vec();
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  auto xn = x.node();
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x}, [xn](detail::TensorNode<S>& o) {
    // Subgradient 0 at exactly 0.
    xn->add_grad((xn->value > S(0)).select(o.grad, VecX<S>::Zero(o.grad.size())));
  });
  out.vec() = x.vec().max(S(0));
  return out;
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope) {
  auto xn = x.node();
  Tensor<S> out = Tensor<S>::make_op(x.shape(), {x}, [xn, slope](detail::TensorNode<S>& o) {
    // Subgradient `slope` at exactly 0.
    xn->add_grad((xn->value > S(0)).select(o.grad, o.grad * slope));
  });
  out.vec() = (x.vec() > S(0)).select(x.vec(), x.vec() * slope);
  return out;
}

/// Copy-reshape; gradients flow back through the identity.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " has " +
                         std::to_string(x.numel()) + " elements, target " + shape_str(shape));
  auto xn = x.node();
  Tensor<S> out = Tensor<S>::make_op(std::move(shape), {x}, [xn](detail::TensorNode<S>& o) {
    xn->add_grad(o.grad);
  });
  out.vec() = x.vec();
  return out;
}

template <typename S>
Tensor<S> flatten(const Tensor<S>& x) {
  return reshape(x, {static_cast<int>(x.numel())});
}

}  // namespace gazeloss

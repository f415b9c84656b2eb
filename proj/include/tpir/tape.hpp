#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "tpir/common.hpp"

namespace tpir {

template <typename Scalar>
class Tape;

// Handle to a node on a Tape. Cheap to copy; valid until the tape is cleared.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar scalar() const {
    require(rows() == 1 && cols() == 1, "Var::scalar: node is not 1x1");
    return value()(0, 0);
  }
};

// Reverse-mode autodiff over dense Eigen matrices. Nodes are created in
// topological order by construction; backward() walks them in reverse.
template <typename Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;

  struct Node {
    M value;
    M grad;  // empty until first accumulation
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
  };

  Var<Scalar> leaf(M value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), M(), nullptr, needs_grad});
    return Var<Scalar>{this, static_cast<std::int32_t>(nodes_.size()) - 1};
  }

  Var<Scalar> constant(M value) { return leaf(std::move(value), false); }

  Var<Scalar> scalar_constant(Scalar v) {
    M m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Used by op implementations: creates a node whose gradient flows back
  // through `backward` into the op's inputs.
  template <typename F>
  Var<Scalar> op(M value, bool needs_grad, F&& backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::forward<F>(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>{this, static_cast<std::int32_t>(nodes_.size()) - 1};
  }

  const M& value(Var<Scalar> v) const { return nodes_[v.id].value; }
  bool needs_grad(Var<Scalar> v) const { return nodes_[v.id].needs_grad; }

  // Gradient of the last backward() root w.r.t. v; zero matrix if v did not
  // participate.
  M grad(Var<Scalar> v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool has_grad(Var<Scalar> v) const { return nodes_[v.id].grad.size() != 0; }

  // Accumulate into a node's gradient (no-op for nodes that do not need it).
  template <typename Expr>
  void add_grad(std::int32_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  const M& grad_ref(std::int32_t id) const { return nodes_[id].grad; }

  // Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
  void backward(Var<Scalar> root) {
    require(root.tape == this, "Tape::backward: foreign var");
    require(nodes_[root.id].value.rows() == 1 && nodes_[root.id].value.cols() == 1,
            "Tape::backward: root must be scalar (1x1)");
    M seed(1, 1);
    seed(0, 0) = Scalar(1);
    add_grad(root.id, seed);
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

}  // namespace tpir

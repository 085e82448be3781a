#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "voltran/core/tensor.hpp"

namespace voltran::ad {

// Dynamic reverse-mode tape. Each op allocates a node holding its output
// value; backward() walks the graph in reverse topological order and calls
// each node's pull function, which accumulates into the parents' grads.
//
// Grad buffers are allocated lazily (zero-filled) the first time a node
// receives a contribution, so untouched branches cost nothing.
template <typename Real>
struct node {
  tensor<Real> val;
  tensor<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<node>> parents;
  std::function<void(node&)> pull;  // propagate this->grad into parents

  tensor<Real>& ensure_grad() {
    if (grad.empty() || !grad.same_shape(val)) grad = tensor<Real>(val.rows, val.cols);
    return grad;
  }
};

template <typename Real>
using var = std::shared_ptr<node<Real>>;

template <typename Real>
var<Real> make_leaf(tensor<Real> value, bool requires_grad = true) {
  auto n = std::make_shared<node<Real>>();
  n->val = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename Real>
var<Real> make_const(tensor<Real> value) {
  return make_leaf(std::move(value), false);
}

namespace detail {

template <typename Real>
var<Real> make_op(tensor<Real> value, std::vector<var<Real>> parents,
                  std::function<void(node<Real>&)> pull) {
  auto n = std::make_shared<node<Real>>();
  n->val = std::move(value);
  for (auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->pull = std::move(pull);
  }
  return n;
}

// Iterative post-order DFS; creation order is not tracked, topology is
// recovered from the parent edges.
template <typename Real>
std::vector<node<Real>*> topo_order(node<Real>* root) {
  std::vector<node<Real>*> order;
  std::unordered_set<node<Real>*> seen;
  struct frame {
    node<Real>* n;
    size_t next_parent;
  };
  std::vector<frame> stack;
  if (root->requires_grad) stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      node<Real>* p = f.n->parents[f.next_parent++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

// Reverse-mode sweep from a scalar (1x1) loss node.
template <typename Real>
void backward(const var<Real>& loss) {
  VT_CHECK(loss->val.rows == 1 && loss->val.cols == 1, "backward needs a scalar loss");
  if (!loss->requires_grad) return;
  auto order = detail::topo_order(loss.get());
  loss->ensure_grad();
  loss->grad(0, 0) = Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    node<Real>* n = *it;
    if (n->pull && !n->grad.empty()) n->pull(*n);
  }
}

// Zero the grads of a parameter set before a fresh backward pass.
template <typename Real>
void zero_grad(const std::vector<var<Real>>& params) {
  for (auto& p : params)
    if (!p->grad.empty()) p->grad.set_zero();
}

}  // namespace voltran::ad

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "nulite/tensor.hpp"

namespace nulite {

// Define-by-run autograd tape. Ops build Node graphs while grad mode is on;
// with grad mode off they produce detached leaves so intermediates free as
// soon as the last consumer drops them.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // lazily allocated, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

inline Var make_var(Tensor value, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool any_requires_grad(std::initializer_list<const Var*> vars) {
  if (!grad_enabled()) return false;
  for (const Var* v : vars)
    if (*v && (*v)->requires_grad) return true;
  return false;
}

// Attach an op node; `fn` accumulates parent grads from node.grad.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const auto& p : parents)
      if (p && p->requires_grad) {
        need = true;
        break;
      }
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = need;
  if (need) {
    n->parents = std::move(parents);
    n->backprop = std::move(fn);
  }
  return n;
}

// Reverse-topological backward from a scalar root. Seeds root grad with 1.
inline void backward(const Var& root) {
  if (!root->requires_grad) throw std::logic_error("backward: root does not require grad");
  if (root->value.numel() != 1) throw std::logic_error("backward: root must be scalar");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; graphs are deep enough to overflow recursion.
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad().fill(1.f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.defined()) n->backprop(*n);
  }
}

inline void zero_grad(std::vector<Var>& params) {
  for (auto& p : params)
    if (p->grad.defined()) p->grad.fill(0.f);
}

}  // namespace nulite

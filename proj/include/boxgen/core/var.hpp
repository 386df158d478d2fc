#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "boxgen/core/tensor.hpp"

namespace boxgen {

// Reverse-mode autodiff over dynamically built graphs. A Var is a
// shared handle to a value node; ops in ops.hpp append nodes with a
// grad_fn that scatters the node's gradient into its parents.

struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <typename S>
class Var {
 public:
  struct Node {
    Buffer<S> val;
    Buffer<S> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    bool leaf = false;
    std::vector<Var> parents;
    std::function<void(Node&)> grad_fn;
    uint64_t visit = 0;

    Buffer<S>& ensure_grad() {
      if (!grad_alloc) {
        grad = Buffer<S>::zeros(val.shape);
        grad_alloc = true;
      }
      return grad;
    }
  };

  Var() = default;

  static Var leaf(Buffer<S> value, bool requires_grad) {
    Var v;
    v.n_ = std::make_shared<Node>();
    v.n_->val = std::move(value);
    v.n_->requires_grad = requires_grad;
    v.n_->leaf = true;
    return v;
  }

  static Var constant(Buffer<S> value) { return leaf(std::move(value), false); }

  template <typename Fn>
  static Var op(Buffer<S> value, std::vector<Var> parents, Fn&& grad_fn) {
    Var v;
    v.n_ = std::make_shared<Node>();
    v.n_->val = std::move(value);
    bool req = false;
    if (GradMode::enabled()) {
      for (const auto& p : parents) req = req || p.requires_grad();
    }
    v.n_->requires_grad = req;
    if (req) {
      v.n_->parents = std::move(parents);
      v.n_->grad_fn = std::forward<Fn>(grad_fn);
    }
    return v;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Buffer<S>& val() const { return n_->val; }
  Buffer<S>& mutable_val() { return n_->val; }
  const Shape& shape() const { return n_->val.shape; }
  int64_t numel() const { return n_->val.numel(); }
  bool requires_grad() const { return n_->requires_grad; }
  bool is_leaf() const { return n_->leaf; }

  // Gradient of a leaf after backward(); zero-shaped until allocated.
  const Buffer<S>& grad() const { return n_->grad; }
  bool has_grad() const { return n_->grad_alloc; }
  void zero_grad() {
    if (n_->grad_alloc) n_->grad.fill(S(0));
  }

  Node* node() const { return n_.get(); }

  // Backpropagate from this scalar (or from an explicit seed gradient).
  void backward() {
    Buffer<S> seed(n_->val.shape, S(1));
    backward(seed);
  }

  void backward(const Buffer<S>& seed) {
    if (!n_->requires_grad) throw StateError("backward: output does not require grad");
    seed.require_shape(n_->val.shape, "backward seed");
    std::vector<Node*> order = topo_order();
    {
      auto& g = n_->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* nd = *it;
      if (nd->grad_fn && nd->grad_alloc) nd->grad_fn(*nd);
      if (!nd->leaf && nd != n_.get()) {
        // Interior gradients are scratch; drop the buffers eagerly.
        nd->grad = Buffer<S>();
        nd->grad_alloc = false;
      }
    }
    // Drop interior graph edges so buffers can be reclaimed.
    for (Node* nd : order) {
      if (!nd->leaf) {
        nd->parents.clear();
        nd->grad_fn = nullptr;
      }
    }
  }

 private:
  std::shared_ptr<Node> n_;

  static uint64_t next_epoch() {
    static uint64_t e = 0;
    return ++e;
  }

  std::vector<Node*> topo_order() {
    const uint64_t epoch = next_epoch();
    std::vector<Node*> order;
    // Iterative DFS, children pushed before being emitted (post-order).
    struct Frame {
      Node* nd;
      size_t next;
    };
    std::vector<Frame> stack;
    if (n_->visit != epoch) {
      stack.push_back({n_.get(), 0});
      n_->visit = epoch;
    }
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.nd->parents.size()) {
        Node* c = f.nd->parents[f.next].node();
        ++f.next;
        if (c->visit != epoch && c->requires_grad) {
          c->visit = epoch;
          stack.push_back({c, 0});
        }
      } else {
        order.push_back(f.nd);
        stack.pop_back();
      }
    }
    return order;
  }
};

// Accumulate src into the lazily allocated gradient of parent p.
template <typename S>
inline Buffer<S>& grad_sink(const Var<S>& p) {
  return p.node()->ensure_grad();
}

template <typename S>
inline bool needs_grad(const Var<S>& p) {
  return p.requires_grad();
}

}  // namespace boxgen

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "boxgen/core/rng.hpp"
#include "boxgen/core/var.hpp"

namespace boxgen {

// Named parameter registry. Insertion order is the serialization order, so
// checkpoints stay stable as long as construction order does.
template <typename S>
class ParamStore {
 public:
  // Vars are shared handles, so callers get copies that stay valid across
  // later create() calls.
  Var<S> create(const std::string& name, Buffer<S> init) {
    if (index_.count(name)) throw StateError("parameter registered twice: " + name);
    index_[name] = vars_.size();
    order_.push_back(name);
    vars_.push_back(Var<S>::leaf(std::move(init), true));
    return vars_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Var<S> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter: " + name);
    return vars_[it->second];
  }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return vars_.size(); }
  Var<S>& at(size_t i) { return vars_[i]; }
  const Var<S>& at(size_t i) const { return vars_[i]; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& v : vars_) n += v.numel();
    return n;
  }

  // Mark parameters trainable or frozen by name prefix.
  void set_trainable(const std::string& prefix, bool trainable) {
    bool hit = false;
    for (size_t i = 0; i < order_.size(); ++i)
      if (order_[i].rfind(prefix, 0) == 0) {
        vars_[i].node()->requires_grad = trainable;
        hit = true;
      }
    if (!hit) throw StateError("no parameters under prefix: " + prefix);
  }

  void set_all_trainable(bool trainable) {
    for (auto& v : vars_) v.node()->requires_grad = trainable;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (size_t i = 0; i < order_.size(); ++i)
      if (vars_[i].requires_grad()) out.push_back(order_[i]);
    return out;
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

 private:
  std::map<std::string, size_t> index_;
  std::vector<std::string> order_;
  std::vector<Var<S>> vars_;
};

namespace init {

template <typename S>
Buffer<S> zeros(Shape shape) {
  return Buffer<S>(std::move(shape));
}

template <typename S>
Buffer<S> constant(Shape shape, S value) {
  Buffer<S> b(std::move(shape));
  b.fill(value);
  return b;
}

template <typename S>
Buffer<S> normal(Shape shape, Rng& rng, double stddev) {
  Buffer<S> b(std::move(shape));
  for (int64_t i = 0; i < b.numel(); ++i) b[i] = static_cast<S>(rng.normal() * stddev);
  return b;
}

// He-style scaling for weight matrices keyed on fan-in.
template <typename S>
Buffer<S> scaled_normal(Shape shape, Rng& rng, int64_t fan_in) {
  return normal<S>(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace init

}  // namespace boxgen

#pragma once

#include <doctest.h>

#include <functional>

#include "boxgen/core/rng.hpp"
#include "boxgen/core/var.hpp"

namespace fd {

using D = double;
using VarD = boxgen::Var<D>;

inline boxgen::Buffer<D> rand_buf(boxgen::Shape s, boxgen::Rng& r, double lo = -1.0,
                                  double hi = 1.0) {
  boxgen::Buffer<D> b(std::move(s));
  for (int64_t i = 0; i < b.numel(); ++i) b[i] = r.uniform(lo, hi);
  return b;
}

// Central-difference check of d(scalar f)/d(every input element). Returns the
// worst relative error across all components of all inputs.
inline double fd_max_rel_err(std::vector<VarD>& inputs,
                             const std::function<VarD(std::vector<VarD>&)>& f, double h = 1e-5) {
  for (auto& v : inputs) v.zero_grad();
  VarD y = f(inputs);
  REQUIRE(y.numel() == 1);
  y.backward();
  double worst = 0.0;
  for (auto& leaf : inputs) {
    auto& x = leaf.mutable_val();
    for (int64_t i = 0; i < x.numel(); ++i) {
      const D keep = x[i];
      D f1, f2;
      {
        boxgen::NoGradGuard ng;
        x[i] = keep + h;
        f1 = f(inputs).val()[0];
        x[i] = keep - h;
        f2 = f(inputs).val()[0];
      }
      x[i] = keep;
      const D fd = (f1 - f2) / (2.0 * h);
      const D an = leaf.has_grad() ? leaf.grad()[i] : 0.0;
      const D err = std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-3);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

constexpr double kTol = 1e-4;

}  // namespace fd

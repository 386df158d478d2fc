#pragma once

#include <cmath>
#include <numbers>

#include "boxgen/core/params.hpp"

namespace boxgen {

// Cosine decay from lr_max to lr_min over total_steps, no warmup.
inline double cosine_lr(double lr_max, double lr_min, int64_t step, int64_t total_steps) {
  if (total_steps <= 1) return lr_max;
  const double t = std::min<double>(static_cast<double>(step) / static_cast<double>(total_steps - 1), 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global L2 norm cap; 0 disables
};

// Decoupled weight decay Adam over a ParamStore. Moment slots are keyed by
// parameter index and sized lazily, so freezing or thawing params mid-run is
// safe as long as the store itself is stable.
template <typename S>
class AdamW {
 public:
  AdamW(ParamStore<S>& params, AdamWOptions opt) : params_(params), opt_(opt) {}

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  int64_t step_count() const { return t_; }

  // Returns the pre-clip global gradient norm over trainable params.
  double step() {
    if (m_.empty()) {
      m_.resize(params_.size());
      v_.resize(params_.size());
    }
    double sq = 0.0;
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_.at(i);
      if (!p.requires_grad() || !p.has_grad()) continue;
      const auto& g = p.grad();
      for (int64_t j = 0; j < g.numel(); ++j) sq += static_cast<double>(g[j]) * g[j];
    }
    const double norm = std::sqrt(sq);
    double cs = 1.0;
    if (opt_.grad_clip > 0.0 && norm > opt_.grad_clip) cs = opt_.grad_clip / norm;

    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_.at(i);
      if (!p.requires_grad() || !p.has_grad()) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.numel() == 0) {
        m = Buffer<double>::zeros(p.shape());
        v = Buffer<double>::zeros(p.shape());
      }
      const auto& g = p.grad();
      auto& w = p.mutable_val();
      for (int64_t j = 0; j < g.numel(); ++j) {
        const double gj = static_cast<double>(g[j]) * cs;
        m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
        v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj;
        const double mh = m[j] / bc1;
        const double vh = v[j] / bc2;
        double wj = static_cast<double>(w[j]);
        wj -= opt_.lr * (mh / (std::sqrt(vh) + opt_.eps) + opt_.weight_decay * wj);
        w[j] = static_cast<S>(wj);
      }
    }
    return norm;
  }

 private:
  ParamStore<S>& params_;
  AdamWOptions opt_;
  int64_t t_ = 0;
  std::vector<Buffer<double>> m_, v_;
};

}  // namespace boxgen

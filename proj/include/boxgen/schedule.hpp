#pragma once

#include <cmath>
#include <vector>

#include "boxgen/core/tensor.hpp"

namespace boxgen {

// Linear-beta DDPM schedule. All derived products are computed and stored in
// fp64 no matter what precision the model runs at, since alpha_bar underflows
// float resolution long before t reaches typical T.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
};

inline NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 1) throw ValidationError("make_schedule: T must be >= 1");
  if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1))
    throw ValidationError("make_schedule: need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.betas[t] = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * t / (T - 1);
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

// Closed-form forward marginal z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps,
// per sample; z0/eps are [B, ...] with one timestep per sample.
template <typename S>
Buffer<S> add_noise(const Buffer<S>& z0, const std::vector<int>& t, const Buffer<S>& eps,
                    const NoiseSchedule& sched) {
  if (z0.shape != eps.shape) throw ValidationError("add_noise: z0/eps shape mismatch");
  if (z0.shape.empty() || z0.shape[0] != static_cast<int>(t.size()))
    throw ValidationError("add_noise: need one timestep per sample");
  const int B = z0.shape[0];
  const int64_t per = z0.numel() / B;
  Buffer<S> out(z0.shape);
  for (int b = 0; b < B; ++b) {
    if (t[b] < 0 || t[b] >= sched.T)
      throw ValidationError("add_noise: timestep " + std::to_string(t[b]) +
                            " outside schedule of length " + std::to_string(sched.T));
    const double ab = sched.alpha_bars[t[b]];
    const S c0 = static_cast<S>(std::sqrt(ab));
    const S c1 = static_cast<S>(std::sqrt(1.0 - ab));
    const S* z = z0.data() + b * per;
    const S* e = eps.data() + b * per;
    S* o = out.data() + b * per;
    for (int64_t i = 0; i < per; ++i) o[i] = c0 * z[i] + c1 * e[i];
  }
  return out;
}

}  // namespace boxgen

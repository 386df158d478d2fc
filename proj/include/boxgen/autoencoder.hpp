#pragma once

#include "boxgen/config.hpp"
#include "boxgen/core/nn_ops.hpp"
#include "boxgen/core/ops.hpp"
#include "boxgen/core/params.hpp"

namespace boxgen {

// Small convolutional autoencoder for the halved-resolution latent mode: one
// stride-2 step down, mirrored back up, tanh output so decoded images stay
// in [-1, 1]. In pixel mode the diffusion model works on images directly and
// this module is never built.
template <typename S>
struct AutoEncoder {
  int c_lat = 4;
  Var<S> e1w, e1b, e2w, e2b;
  Var<S> d1w, d1b, d2w, d2b;

  static AutoEncoder build(ParamStore<S>& ps, const Config& c, Rng& rng) {
    AutoEncoder ae;
    ae.c_lat = c.c_lat();
    auto conv = [&](const std::string& name, int cin, int cout) {
      return ps.create("ae." + name + ".w",
                       init::scaled_normal<S>({cout, cin, 3, 3}, rng, cin * 9));
    };
    auto bias = [&](const std::string& name, int cout) {
      return ps.create("ae." + name + ".b", init::zeros<S>({cout}));
    };
    ae.e1w = conv("e1", 3, 16);
    ae.e1b = bias("e1", 16);
    ae.e2w = conv("e2", 16, ae.c_lat);
    ae.e2b = bias("e2", ae.c_lat);
    ae.d1w = conv("d1", ae.c_lat, 16);
    ae.d1b = bias("d1", 16);
    ae.d2w = conv("d2", 16, 3);
    ae.d2b = bias("d2", 3);
    return ae;
  }

  static AutoEncoder attach(const ParamStore<S>& ps, const Config& c) {
    AutoEncoder ae;
    ae.c_lat = c.c_lat();
    ae.e1w = ps.get("ae.e1.w");
    ae.e1b = ps.get("ae.e1.b");
    ae.e2w = ps.get("ae.e2.w");
    ae.e2b = ps.get("ae.e2.b");
    ae.d1w = ps.get("ae.d1.w");
    ae.d1b = ps.get("ae.d1.b");
    ae.d2w = ps.get("ae.d2.w");
    ae.d2b = ps.get("ae.d2.b");
    return ae;
  }

  // [B,3,H,W] -> [B,c_lat,H/2,W/2]
  Var<S> encode(const Var<S>& x) const {
    Var<S> h = ops::silu(ops::conv2d(x, e1w, e1b, 2, 1));
    return ops::conv2d(h, e2w, e2b, 1, 1);
  }

  // [B,c_lat,H/2,W/2] -> [B,3,H,W] in [-1,1]
  Var<S> decode(const Var<S>& z) const {
    Var<S> h = ops::silu(ops::conv2d(z, d1w, d1b, 1, 1));
    h = ops::upsample2(h);
    return ops::tanh_op(ops::conv2d(h, d2w, d2b, 1, 1));
  }

  Var<S> reconstruction_loss(const Var<S>& x) const { return ops::mse(decode(encode(x)), x); }
};

}  // namespace boxgen

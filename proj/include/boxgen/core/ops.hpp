#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "boxgen/core/var.hpp"

namespace boxgen {
namespace ops {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S, typename FwdFn, typename BwdFn>
Var<S> unary(const Var<S>& a, FwdFn fwd, BwdFn dfdx) {
  Buffer<S> out(a.shape());
  const auto& x = a.val();
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
  return Var<S>::op(std::move(out), {a}, [a, dfdx](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    const auto& x = a.val();
    for (int64_t i = 0; i < x.numel(); ++i) da[i] += n.grad[i] * dfdx(x[i], n.val[i]);
  });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  b.val().require_shape(a.shape(), "add");
  Buffer<S> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + b.val()[i];
  return Var<S>::op(std::move(out), {a, b}, [a, b](typename Var<S>::Node& n) {
    if (needs_grad(a)) {
      auto& da = grad_sink(a);
      for (int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i];
    }
    if (needs_grad(b)) {
      auto& db = grad_sink(b);
      for (int64_t i = 0; i < n.grad.numel(); ++i) db[i] += n.grad[i];
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  b.val().require_shape(a.shape(), "sub");
  Buffer<S> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
  return Var<S>::op(std::move(out), {a, b}, [a, b](typename Var<S>::Node& n) {
    if (needs_grad(a)) {
      auto& da = grad_sink(a);
      for (int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i];
    }
    if (needs_grad(b)) {
      auto& db = grad_sink(b);
      for (int64_t i = 0; i < n.grad.numel(); ++i) db[i] -= n.grad[i];
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  b.val().require_shape(a.shape(), "mul");
  Buffer<S> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
  return Var<S>::op(std::move(out), {a, b}, [a, b](typename Var<S>::Node& n) {
    if (needs_grad(a)) {
      auto& da = grad_sink(a);
      for (int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i] * b.val()[i];
    }
    if (needs_grad(b)) {
      auto& db = grad_sink(b);
      for (int64_t i = 0; i < n.grad.numel(); ++i) db[i] += n.grad[i] * a.val()[i];
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, double c) {
  Buffer<S> out(a.shape());
  const S cs = static_cast<S>(c);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * cs;
  return Var<S>::op(std::move(out), {a}, [a, cs](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    for (int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i] * cs;
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, double c) {
  Buffer<S> out(a.shape());
  const S cs = static_cast<S>(c);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + cs;
  return Var<S>::op(std::move(out), {a}, [a](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    for (int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i];
  });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return scale(a, -1.0);
}

// Multiply a tensor by a scalar variable s (shape [1]).
template <typename S>
Var<S> scale_by(const Var<S>& a, const Var<S>& s) {
  if (s.numel() != 1) throw ValidationError("scale_by: scalar var must have one element");
  Buffer<S> out(a.shape());
  const S sv = s.val()[0];
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * sv;
  return Var<S>::op(std::move(out), {a, s}, [a, s, sv](typename Var<S>::Node& n) {
    if (needs_grad(a)) {
      auto& da = grad_sink(a);
      for (int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i] * sv;
    }
    if (needs_grad(s)) {
      auto& ds = grad_sink(s);
      S acc = 0;
      for (int64_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i] * a.val()[i];
      ds[0] += acc;
    }
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  return unary(
      a, [](S x) { return x / (S(1) + std::exp(-x)); },
      [](S x, S) {
        const S sg = S(1) / (S(1) + std::exp(-x));
        return sg * (S(1) + x * (S(1) - sg));
      });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  return unary(
      a, [](S x) { return x > S(0) ? x : S(0); }, [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
Var<S> tanh_op(const Var<S>& a) {
  return unary(
      a, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  return unary(
      a, [](S x) { return S(1) / (S(1) + std::exp(-x)); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> exp_op(const Var<S>& a) {
  return unary(
      a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> log_op(const Var<S>& a) {
  return unary(
      a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

// Stable softplus: max(x,0) + log1p(exp(-|x|)); derivative sigmoid(x).
template <typename S>
Var<S> softplus(const Var<S>& a) {
  return unary(
      a,
      [](S x) { return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](S x, S) { return S(1) / (S(1) + std::exp(-x)); });
}

template <typename S>
Var<S> pow_const(const Var<S>& a, double p) {
  const S ps = static_cast<S>(p);
  return unary(
      a, [ps](S x) { return std::pow(x, ps); },
      [ps](S x, S) { return ps * std::pow(x, ps - S(1)); });
}

// Elementwise smooth-L1 (Huber, beta = 1).
template <typename S>
Var<S> smooth_l1(const Var<S>& a) {
  return unary(
      a,
      [](S x) {
        const S ax = std::abs(x);
        return ax < S(1) ? S(0.5) * x * x : ax - S(0.5);
      },
      [](S x, S) { return std::clamp(x, S(-1), S(1)); });
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

// x [..., K] times W [K, N] -> [..., N]; leading dims treated as rows.
template <typename S>
Var<S> matmul(const Var<S>& x, const Var<S>& w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2) throw ValidationError("matmul: weight must be 2-D");
  const int64_t k = xs.back();
  if (k != ws[0])
    throw ValidationError("matmul: inner dims disagree " + shape_str(xs) + " x " + shape_str(ws));
  const int64_t rows = x.numel() / k;
  const int64_t n = ws[1];
  Shape os(xs);
  os.back() = static_cast<int>(n);
  Buffer<S> out(os);
  as_matrix(out, rows, n).noalias() = as_matrix(x.val(), rows, k) * as_matrix(w.val(), k, n);
  return Var<S>::op(std::move(out), {x, w}, [x, w, rows, k, n](typename Var<S>::Node& nd) {
    ConstMatMap<S> g(nd.grad.data(), rows, n);
    if (needs_grad(x)) {
      auto& dx = grad_sink(x);
      as_matrix(dx, rows, k).noalias() += g * as_matrix(w.val(), k, n).transpose();
    }
    if (needs_grad(w)) {
      auto& dw = grad_sink(w);
      as_matrix(dw, k, n).noalias() += as_matrix(x.val(), rows, k).transpose() * g;
    }
  });
}

// x [..., D] + b [D]
template <typename S>
Var<S> add_bias_rows(const Var<S>& x, const Var<S>& b) {
  const int64_t d = x.shape().back();
  if (b.numel() != d) throw ValidationError("add_bias_rows: bias dim mismatch");
  const int64_t rows = x.numel() / d;
  Buffer<S> out(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out[r * d + j] = x.val()[r * d + j] + b.val()[j];
  return Var<S>::op(std::move(out), {x, b}, [x, b, rows, d](typename Var<S>::Node& n) {
    if (needs_grad(x)) {
      auto& dx = grad_sink(x);
      for (int64_t i = 0; i < n.grad.numel(); ++i) dx[i] += n.grad[i];
    }
    if (needs_grad(b)) {
      auto& db = grad_sink(b);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) db[j] += n.grad[r * d + j];
    }
  });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  return add_bias_rows(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(const Var<S>& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw ValidationError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
  Buffer<S> out(std::move(s));
  out.v = a.val().v;
  return Var<S>::op(std::move(out), {a}, [a](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    for (int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i];
  });
}

// [B,C,H,W] -> [B, H*W, C]
template <typename S>
Var<S> bchw_to_btc(const Var<S>& a) {
  const Shape& s = a.shape();
  if (s.size() != 4) throw ValidationError("bchw_to_btc: expected 4-D input");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const int T = H * W;
  Buffer<S> out({B, T, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* src = a.val().data() + (static_cast<int64_t>(b) * C + c) * T;
      S* dst = out.data() + static_cast<int64_t>(b) * T * C + c;
      for (int t = 0; t < T; ++t) dst[static_cast<int64_t>(t) * C] = src[t];
    }
  return Var<S>::op(std::move(out), {a}, [a, B, C, T](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        S* dst = da.data() + (static_cast<int64_t>(b) * C + c) * T;
        const S* src = n.grad.data() + static_cast<int64_t>(b) * T * C + c;
        for (int t = 0; t < T; ++t) dst[t] += src[static_cast<int64_t>(t) * C];
      }
  });
}

// [B, H*W, C] -> [B,C,H,W]
template <typename S>
Var<S> btc_to_bchw(const Var<S>& a, int H, int W) {
  const Shape& s = a.shape();
  if (s.size() != 3 || s[1] != H * W) throw ValidationError("btc_to_bchw: bad token count");
  const int B = s[0], T = s[1], C = s[2];
  Buffer<S> out({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      S* dst = out.data() + (static_cast<int64_t>(b) * C + c) * T;
      const S* src = a.val().data() + static_cast<int64_t>(b) * T * C + c;
      for (int t = 0; t < T; ++t) dst[t] = src[static_cast<int64_t>(t) * C];
    }
  return Var<S>::op(std::move(out), {a}, [a, B, C, T](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const S* src = n.grad.data() + (static_cast<int64_t>(b) * C + c) * T;
        S* dst = da.data() + static_cast<int64_t>(b) * T * C + c;
        for (int t = 0; t < T; ++t) dst[static_cast<int64_t>(t) * C] += src[t];
      }
  });
}

template <typename S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ValidationError("concat_channels: incompatible shapes");
  const int B = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
  Buffer<S> out({B, Ca + Cb, sa[2], sa[3]});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a.val().data() + static_cast<int64_t>(bi) * Ca * HW, static_cast<int64_t>(Ca) * HW,
                out.data() + static_cast<int64_t>(bi) * (Ca + Cb) * HW);
    std::copy_n(b.val().data() + static_cast<int64_t>(bi) * Cb * HW, static_cast<int64_t>(Cb) * HW,
                out.data() + static_cast<int64_t>(bi) * (Ca + Cb) * HW + static_cast<int64_t>(Ca) * HW);
  }
  return Var<S>::op(std::move(out), {a, b}, [a, b, B, Ca, Cb, HW](typename Var<S>::Node& n) {
    for (int bi = 0; bi < B; ++bi) {
      const S* g = n.grad.data() + static_cast<int64_t>(bi) * (Ca + Cb) * HW;
      if (needs_grad(a)) {
        auto& da = grad_sink(a);
        S* d = da.data() + static_cast<int64_t>(bi) * Ca * HW;
        for (int64_t i = 0; i < static_cast<int64_t>(Ca) * HW; ++i) d[i] += g[i];
      }
      if (needs_grad(b)) {
        auto& db = grad_sink(b);
        S* d = db.data() + static_cast<int64_t>(bi) * Cb * HW;
        for (int64_t i = 0; i < static_cast<int64_t>(Cb) * HW; ++i) d[i] += g[static_cast<int64_t>(Ca) * HW + i];
      }
    }
  });
}

// [B,Ta,D] ++ [B,Tb,D] along tokens.
template <typename S>
Var<S> concat_tokens(const Var<S>& a, const Var<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
    throw ValidationError("concat_tokens: incompatible shapes");
  const int B = sa[0], Ta = sa[1], Tb = sb[1], D = sa[2];
  Buffer<S> out({B, Ta + Tb, D});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a.val().data() + static_cast<int64_t>(bi) * Ta * D, static_cast<int64_t>(Ta) * D,
                out.data() + static_cast<int64_t>(bi) * (Ta + Tb) * D);
    std::copy_n(b.val().data() + static_cast<int64_t>(bi) * Tb * D, static_cast<int64_t>(Tb) * D,
                out.data() + static_cast<int64_t>(bi) * (Ta + Tb) * D + static_cast<int64_t>(Ta) * D);
  }
  return Var<S>::op(std::move(out), {a, b}, [a, b, B, Ta, Tb, D](typename Var<S>::Node& n) {
    for (int bi = 0; bi < B; ++bi) {
      const S* g = n.grad.data() + static_cast<int64_t>(bi) * (Ta + Tb) * D;
      if (needs_grad(a)) {
        auto& da = grad_sink(a);
        S* d = da.data() + static_cast<int64_t>(bi) * Ta * D;
        for (int64_t i = 0; i < static_cast<int64_t>(Ta) * D; ++i) d[i] += g[i];
      }
      if (needs_grad(b)) {
        auto& db = grad_sink(b);
        S* d = db.data() + static_cast<int64_t>(bi) * Tb * D;
        for (int64_t i = 0; i < static_cast<int64_t>(Tb) * D; ++i) d[i] += g[static_cast<int64_t>(Ta) * D + i];
      }
    }
  });
}

// Keep tokens [t0, t1) of [B,T,D].
template <typename S>
Var<S> slice_tokens(const Var<S>& a, int t0, int t1) {
  const Shape& s = a.shape();
  if (s.size() != 3 || t0 < 0 || t1 > s[1] || t0 >= t1)
    throw ValidationError("slice_tokens: bad range");
  const int B = s[0], T = s[1], D = s[2], L = t1 - t0;
  Buffer<S> out({B, L, D});
  for (int bi = 0; bi < B; ++bi)
    std::copy_n(a.val().data() + (static_cast<int64_t>(bi) * T + t0) * D, static_cast<int64_t>(L) * D,
                out.data() + static_cast<int64_t>(bi) * L * D);
  return Var<S>::op(std::move(out), {a}, [a, B, T, D, L, t0](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    for (int bi = 0; bi < B; ++bi) {
      const S* g = n.grad.data() + static_cast<int64_t>(bi) * L * D;
      S* d = da.data() + (static_cast<int64_t>(bi) * T + t0) * D;
      for (int64_t i = 0; i < static_cast<int64_t>(L) * D; ++i) d[i] += g[i];
    }
  });
}

// Concatenate along dim 0; both [*, D]-like with equal trailing dims.
template <typename S>
Var<S> concat_rows(const Var<S>& a, const Var<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    throw ValidationError("concat_rows: incompatible shapes");
  const int64_t na = sa[0], nb = sb[0], d = sa[1];
  Buffer<S> out({static_cast<int>(na + nb), sa[1]});
  std::copy_n(a.val().data(), na * d, out.data());
  std::copy_n(b.val().data(), nb * d, out.data() + na * d);
  return Var<S>::op(std::move(out), {a, b}, [a, b, na, nb, d](typename Var<S>::Node& n) {
    if (needs_grad(a)) {
      auto& da = grad_sink(a);
      for (int64_t i = 0; i < na * d; ++i) da[i] += n.grad[i];
    }
    if (needs_grad(b)) {
      auto& db = grad_sink(b);
      for (int64_t i = 0; i < nb * d; ++i) db[i] += n.grad[na * d + i];
    }
  });
}

// Concatenate two matrices along dim 1; [R, Ca] + [R, Cb] -> [R, Ca+Cb].
template <typename S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[0] != sb[0])
    throw ValidationError("concat_cols: incompatible shapes");
  const int64_t r = sa[0], ca = sa[1], cb = sb[1];
  Buffer<S> out({sa[0], static_cast<int>(ca + cb)});
  for (int64_t i = 0; i < r; ++i) {
    std::copy_n(a.val().data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.val().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return Var<S>::op(std::move(out), {a, b}, [a, b, r, ca, cb](typename Var<S>::Node& n) {
    if (needs_grad(a)) {
      auto& da = grad_sink(a);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < ca; ++j) da[i * ca + j] += n.grad[i * (ca + cb) + j];
    }
    if (needs_grad(b)) {
      auto& db = grad_sink(b);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < cb; ++j) db[i * cb + j] += n.grad[i * (ca + cb) + ca + j];
    }
  });
}

// Gather rows of [N, D] by index.
template <typename S>
Var<S> select_rows(const Var<S>& a, std::vector<int64_t> idx) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw ValidationError("select_rows: expected 2-D input");
  const int64_t d = s[1];
  Buffer<S> out({static_cast<int>(idx.size()), s[1]});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= s[0]) throw ValidationError("select_rows: index out of range");
    std::copy_n(a.val().data() + idx[r] * d, d, out.data() + static_cast<int64_t>(r) * d);
  }
  auto keep = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return Var<S>::op(std::move(out), {a}, [a, keep, d](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    for (size_t r = 0; r < keep->size(); ++r) {
      S* dst = da.data() + (*keep)[r] * d;
      const S* g = n.grad.data() + static_cast<int64_t>(r) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
    }
  });
}

// ---------------------------------------------------------------------------
// broadcast adds
// ---------------------------------------------------------------------------

// x [B,T,D] + pe [T,D]
template <typename S>
Var<S> add_tokens_pe(const Var<S>& x, const Var<S>& pe) {
  const Shape& s = x.shape();
  if (s.size() != 3 || pe.shape() != Shape{s[1], s[2]})
    throw ValidationError("add_tokens_pe: positional embedding shape mismatch");
  const int B = s[0];
  const int64_t td = static_cast<int64_t>(s[1]) * s[2];
  Buffer<S> out(s);
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < td; ++i) out[b * td + i] = x.val()[b * td + i] + pe.val()[i];
  return Var<S>::op(std::move(out), {x, pe}, [x, pe, B, td](typename Var<S>::Node& n) {
    if (needs_grad(x)) {
      auto& dx = grad_sink(x);
      for (int64_t i = 0; i < n.grad.numel(); ++i) dx[i] += n.grad[i];
    }
    if (needs_grad(pe)) {
      auto& dp = grad_sink(pe);
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < td; ++i) dp[i] += n.grad[b * td + i];
    }
  });
}

// x [B,C,H,W] + e [B,C] (broadcast over spatial dims); timestep injection.
template <typename S>
Var<S> add_sample_channel(const Var<S>& x, const Var<S>& e) {
  const Shape& s = x.shape();
  if (s.size() != 4 || e.shape() != Shape{s[0], s[1]})
    throw ValidationError("add_sample_channel: embedding shape mismatch");
  const int B = s[0], C = s[1], HW = s[2] * s[3];
  Buffer<S> out(s);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S ev = e.val()[static_cast<int64_t>(b) * C + c];
      const S* src = x.val().data() + (static_cast<int64_t>(b) * C + c) * HW;
      S* dst = out.data() + (static_cast<int64_t>(b) * C + c) * HW;
      for (int i = 0; i < HW; ++i) dst[i] = src[i] + ev;
    }
  return Var<S>::op(std::move(out), {x, e}, [x, e, B, C, HW](typename Var<S>::Node& n) {
    if (needs_grad(x)) {
      auto& dx = grad_sink(x);
      for (int64_t i = 0; i < n.grad.numel(); ++i) dx[i] += n.grad[i];
    }
    if (needs_grad(e)) {
      auto& de = grad_sink(e);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const S* g = n.grad.data() + (static_cast<int64_t>(b) * C + c) * HW;
          S acc = 0;
          for (int i = 0; i < HW; ++i) acc += g[i];
          de[static_cast<int64_t>(b) * C + c] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  Buffer<S> out({1});
  S acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a.val()[i];
  out[0] = acc;
  return Var<S>::op(std::move(out), {a}, [a](typename Var<S>::Node& n) {
    if (!needs_grad(a)) return;
    auto& da = grad_sink(a);
    const S g = n.grad[0];
    for (int64_t i = 0; i < da.numel(); ++i) da[i] += g;
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  auto d = sub(a, b);
  return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

template <typename S>
Var<S> embedding(const Var<S>& table, std::vector<int> ids) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw ValidationError("embedding: table must be 2-D");
  const int64_t d = s[1];
  Buffer<S> out({static_cast<int>(ids.size()), s[1]});
  for (size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= s[0])
      throw ValidationError("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                            std::to_string(s[0]));
    std::copy_n(table.val().data() + static_cast<int64_t>(ids[r]) * d, d,
                out.data() + static_cast<int64_t>(r) * d);
  }
  auto keep = std::make_shared<std::vector<int>>(std::move(ids));
  return Var<S>::op(std::move(out), {table}, [table, keep, d](typename Var<S>::Node& n) {
    if (!needs_grad(table)) return;
    auto& dt = grad_sink(table);
    for (size_t r = 0; r < keep->size(); ++r) {
      S* dst = dt.data() + static_cast<int64_t>((*keep)[r]) * d;
      const S* g = n.grad.data() + static_cast<int64_t>(r) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
    }
  });
}

}  // namespace ops
}  // namespace boxgen

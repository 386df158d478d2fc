#pragma once

#include <cmath>
#include <memory>
#include <optional>

#include "boxgen/core/ops.hpp"

namespace boxgen {
namespace ops {

// Logit offset for masked attention keys. Large but finite so max-shifted
// softmax stays IEEE-exact for the unmasked columns.
inline constexpr double kMaskedLogit = -1e30;

namespace detail {

template <typename S>
void im2col(const Buffer<S>& x, int B, int C, int H, int W, int kh, int kw, int stride, int pad,
            int OH, int OW, Buffer<S>& col) {
  const int K = C * kh * kw;
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        S* row = col.data() + ((static_cast<int64_t>(b) * OH + oy) * OW + ox) * K;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        for (int c = 0; c < C; ++c) {
          const S* plane = x.data() + (static_cast<int64_t>(b) * C + c) * H * W;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            S* dst = row + (static_cast<int64_t>(c) * kh + ky) * kw;
            if (iy < 0 || iy >= H) {
              std::fill_n(dst, kw, S(0));
              continue;
            }
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              dst[kx] = (ix < 0 || ix >= W) ? S(0) : plane[static_cast<int64_t>(iy) * W + ix];
            }
          }
        }
      }
}

template <typename S>
void col2im_add(const Buffer<S>& col, int B, int C, int H, int W, int kh, int kw, int stride,
                int pad, int OH, int OW, Buffer<S>& dx) {
  const int K = C * kh * kw;
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        const S* row = col.data() + ((static_cast<int64_t>(b) * OH + oy) * OW + ox) * K;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        for (int c = 0; c < C; ++c) {
          S* plane = dx.data() + (static_cast<int64_t>(b) * C + c) * H * W;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= H) continue;
            const S* src = row + (static_cast<int64_t>(c) * kh + ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix >= 0 && ix < W) plane[static_cast<int64_t>(iy) * W + ix] += src[kx];
            }
          }
        }
      }
}

}  // namespace detail

// x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout].
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw ValidationError("conv2d: expected 4-D tensors");
  if (xs[1] != ws[1]) throw ValidationError("conv2d: channel mismatch");
  if (b.numel() != ws[0]) throw ValidationError("conv2d: bias dim mismatch");
  const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int Cout = ws[0], kh = ws[2], kw = ws[3];
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  if (OH <= 0 || OW <= 0) throw ValidationError("conv2d: kernel larger than padded input");
  const int K = C * kh * kw;
  const int64_t rows = static_cast<int64_t>(B) * OH * OW;

  auto col = std::make_shared<Buffer<S>>(Shape{static_cast<int>(rows), K});
  detail::im2col(x.val(), B, C, H, W, kh, kw, stride, pad, OH, OW, *col);

  // out rows are (b,oy,ox) with Cout columns, then permuted back to BCHW.
  Buffer<S> om({static_cast<int>(rows), Cout});
  as_matrix(om, rows, Cout).noalias() =
      as_matrix(*col, rows, K) * as_matrix(w.val(), Cout, K).transpose();
  Buffer<S> out({B, Cout, OH, OW});
  const int HW = OH * OW;
  for (int bi = 0; bi < B; ++bi)
    for (int p = 0; p < HW; ++p) {
      const S* src = om.data() + (static_cast<int64_t>(bi) * HW + p) * Cout;
      for (int c = 0; c < Cout; ++c)
        out[(static_cast<int64_t>(bi) * Cout + c) * HW + p] = src[c] + b.val()[c];
    }

  return Var<S>::op(std::move(out), {x, w, b},
                    [x, w, b, col, B, C, H, W, Cout, kh, kw, stride, pad, OH, OW, K,
                     rows](typename Var<S>::Node& n) {
    const int HW = OH * OW;
    // Gather grad into (row, Cout) layout once.
    Buffer<S> gm({static_cast<int>(rows), Cout});
    for (int bi = 0; bi < B; ++bi)
      for (int p = 0; p < HW; ++p) {
        S* dst = gm.data() + (static_cast<int64_t>(bi) * HW + p) * Cout;
        for (int c = 0; c < Cout; ++c)
          dst[c] = n.grad[(static_cast<int64_t>(bi) * Cout + c) * HW + p];
      }
    if (needs_grad(b)) {
      auto& db = grad_sink(b);
      for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < Cout; ++c) db[c] += gm[r * Cout + c];
    }
    if (needs_grad(w)) {
      auto& dw = grad_sink(w);
      as_matrix(dw, Cout, K).noalias() +=
          as_matrix(gm, rows, Cout).transpose() * as_matrix(*col, rows, K);
    }
    if (needs_grad(x)) {
      Buffer<S> dcol({static_cast<int>(rows), K});
      as_matrix(dcol, rows, K).noalias() =
          as_matrix(gm, rows, Cout) * as_matrix(w.val(), Cout, K);
      auto& dx = grad_sink(x);
      detail::col2im_add(dcol, B, C, H, W, kh, kw, stride, pad, OH, OW, dx);
    }
  });
}

// Nearest-neighbour 2x upsample.
template <typename S>
Var<S> upsample2(const Var<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ValidationError("upsample2: expected 4-D input");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  Buffer<S> out({B, C, 2 * H, 2 * W});
  for (int bc = 0; bc < B * C; ++bc) {
    const S* src = x.val().data() + static_cast<int64_t>(bc) * H * W;
    S* dst = out.data() + static_cast<int64_t>(bc) * 4 * H * W;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        const S v = src[static_cast<int64_t>(y) * W + xx];
        S* d = dst + (static_cast<int64_t>(2 * y) * 2 * W + 2 * xx);
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
  return Var<S>::op(std::move(out), {x}, [x, B, C, H, W](typename Var<S>::Node& n) {
    if (!needs_grad(x)) return;
    auto& dx = grad_sink(x);
    for (int bc = 0; bc < B * C; ++bc) {
      S* d = dx.data() + static_cast<int64_t>(bc) * H * W;
      const S* g = n.grad.data() + static_cast<int64_t>(bc) * 4 * H * W;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          const S* gp = g + (static_cast<int64_t>(2 * y) * 2 * W + 2 * xx);
          d[static_cast<int64_t>(y) * W + xx] += gp[0] + gp[1] + gp[2 * W] + gp[2 * W + 1];
        }
    }
  });
}

// GroupNorm over [B,C,H,W]; gamma/beta per channel.
template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups,
                  double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ValidationError("group_norm: expected 4-D input");
  const int B = s[0], C = s[1], HW = s[2] * s[3];
  if (C % groups != 0) throw ValidationError("group_norm: channels not divisible by groups");
  if (gamma.numel() != C || beta.numel() != C)
    throw ValidationError("group_norm: affine params must be per-channel");
  const int Cg = C / groups;
  const int64_t m = static_cast<int64_t>(Cg) * HW;

  auto xhat = std::make_shared<Buffer<S>>(s);
  auto istd = std::make_shared<Buffer<S>>(Shape{B, groups});
  Buffer<S> out(s);
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const S* xp = x.val().data() + (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * HW;
      S mu = 0;
      for (int64_t i = 0; i < m; ++i) mu += xp[i];
      mu /= static_cast<S>(m);
      S var = 0;
      for (int64_t i = 0; i < m; ++i) {
        const S d = xp[i] - mu;
        var += d * d;
      }
      var /= static_cast<S>(m);
      const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
      (*istd)[static_cast<int64_t>(b) * groups + g] = is;
      S* xh = xhat->data() + (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * HW;
      S* op = out.data() + (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * HW;
      for (int c = 0; c < Cg; ++c) {
        const S ga = gamma.val()[static_cast<int64_t>(g) * Cg + c];
        const S be = beta.val()[static_cast<int64_t>(g) * Cg + c];
        for (int i = 0; i < HW; ++i) {
          const S h = (xp[static_cast<int64_t>(c) * HW + i] - mu) * is;
          xh[static_cast<int64_t>(c) * HW + i] = h;
          op[static_cast<int64_t>(c) * HW + i] = ga * h + be;
        }
      }
    }

  return Var<S>::op(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat, istd, B, C, HW, groups, Cg, m](typename Var<S>::Node& n) {
    if (needs_grad(gamma)) {
      auto& dg = grad_sink(gamma);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const S* g = n.grad.data() + (static_cast<int64_t>(b) * C + c) * HW;
          const S* xh = xhat->data() + (static_cast<int64_t>(b) * C + c) * HW;
          S acc = 0;
          for (int i = 0; i < HW; ++i) acc += g[i] * xh[i];
          dg[c] += acc;
        }
    }
    if (needs_grad(beta)) {
      auto& db = grad_sink(beta);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const S* g = n.grad.data() + (static_cast<int64_t>(b) * C + c) * HW;
          S acc = 0;
          for (int i = 0; i < HW; ++i) acc += g[i];
          db[c] += acc;
        }
    }
    if (needs_grad(x)) {
      auto& dx = grad_sink(x);
      for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups; ++g) {
          const int64_t base = (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * HW;
          const S is = (*istd)[static_cast<int64_t>(b) * groups + g];
          // dxhat = grad * gamma; reduce means, then the usual norm backward.
          S s1 = 0, s2 = 0;
          for (int c = 0; c < Cg; ++c) {
            const S ga = gamma.val()[static_cast<int64_t>(g) * Cg + c];
            const S* gp = n.grad.data() + base + static_cast<int64_t>(c) * HW;
            const S* xh = xhat->data() + base + static_cast<int64_t>(c) * HW;
            for (int i = 0; i < HW; ++i) {
              const S dh = gp[i] * ga;
              s1 += dh;
              s2 += dh * xh[i];
            }
          }
          s1 /= static_cast<S>(m);
          s2 /= static_cast<S>(m);
          for (int c = 0; c < Cg; ++c) {
            const S ga = gamma.val()[static_cast<int64_t>(g) * Cg + c];
            const S* gp = n.grad.data() + base + static_cast<int64_t>(c) * HW;
            const S* xh = xhat->data() + base + static_cast<int64_t>(c) * HW;
            S* d = dx.data() + base + static_cast<int64_t>(c) * HW;
            for (int i = 0; i < HW; ++i) d[i] += is * (gp[i] * ga - s1 - xh[i] * s2);
          }
        }
    }
  });
}

// LayerNorm over the last dim of [..., D].
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps = 1e-5) {
  const int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw ValidationError("layer_norm: affine params must match feature dim");
  const int64_t rows = x.numel() / d;
  auto xhat = std::make_shared<Buffer<S>>(x.shape());
  auto istd = std::make_shared<Buffer<S>>(Shape{static_cast<int>(rows)});
  Buffer<S> out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const S* xp = x.val().data() + r * d;
    S mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += xp[j];
    mu /= static_cast<S>(d);
    S var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const S dv = xp[j] - mu;
      var += dv * dv;
    }
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*istd)[r] = is;
    for (int64_t j = 0; j < d; ++j) {
      const S h = (xp[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gamma.val()[j] * h + beta.val()[j];
    }
  }
  return Var<S>::op(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat, istd, rows, d](typename Var<S>::Node& n) {
    if (needs_grad(gamma)) {
      auto& dg = grad_sink(gamma);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) dg[j] += n.grad[r * d + j] * (*xhat)[r * d + j];
    }
    if (needs_grad(beta)) {
      auto& db = grad_sink(beta);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) db[j] += n.grad[r * d + j];
    }
    if (needs_grad(x)) {
      auto& dx = grad_sink(x);
      for (int64_t r = 0; r < rows; ++r) {
        const S is = (*istd)[r];
        S s1 = 0, s2 = 0;
        for (int64_t j = 0; j < d; ++j) {
          const S dh = n.grad[r * d + j] * gamma.val()[j];
          s1 += dh;
          s2 += dh * (*xhat)[r * d + j];
        }
        s1 /= static_cast<S>(d);
        s2 /= static_cast<S>(d);
        for (int64_t j = 0; j < d; ++j) {
          const S dh = n.grad[r * d + j] * gamma.val()[j];
          dx[r * d + j] += is * (dh - s1 - (*xhat)[r * d + j] * s2);
        }
      }
    }
  });
}

// Multi-head scaled dot-product attention.
//   q [B,M,D], k [B,N,D], v [B,N,D] -> [B,M,D]
// key_mask (optional) is [B,N] with 1 = attendable. Masked keys get a large
// negative logit; if a sample has zero attendable keys its output rows are
// zero. probs_out, when given, receives the softmax weights [B,h,M,N].
template <typename S>
Var<S> scaled_dot_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads,
                            const Buffer<S>* key_mask = nullptr,
                            Buffer<S>* probs_out = nullptr) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() != 3 || ks.size() != 3 || v.shape() != ks || qs[0] != ks[0] || qs[2] != ks[2])
    throw ValidationError("attention: incompatible q/k/v shapes");
  const int B = qs[0], M = qs[1], N = ks[1], D = qs[2];
  if (D % heads != 0) throw ValidationError("attention: dim not divisible by heads");
  if (key_mask && key_mask->shape != Shape{B, N})
    throw ValidationError("attention: key mask must be [batch, keys]");
  const int dk = D / heads;
  const S sc = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));

  auto probs = std::make_shared<Buffer<S>>(Shape{B, heads, M, N});
  Buffer<S> out({B, M, D});
  out.fill(0);

  using StridedMap = Eigen::Map<const EigenMat<S>, 0, Eigen::OuterStride<>>;
  for (int b = 0; b < B; ++b) {
    int valid = N;
    if (key_mask) {
      valid = 0;
      for (int j = 0; j < N; ++j)
        if ((*key_mask)[static_cast<int64_t>(b) * N + j] != S(0)) ++valid;
    }
    if (valid == 0) continue;  // output stays zero, probs stay zero
    for (int h = 0; h < heads; ++h) {
      StridedMap Q(q.val().data() + static_cast<int64_t>(b) * M * D + h * dk, M, dk,
                   Eigen::OuterStride<>(D));
      StridedMap K(k.val().data() + static_cast<int64_t>(b) * N * D + h * dk, N, dk,
                   Eigen::OuterStride<>(D));
      StridedMap V(v.val().data() + static_cast<int64_t>(b) * N * D + h * dk, N, dk,
                   Eigen::OuterStride<>(D));
      EigenMat<S> logits = (Q * K.transpose()) * sc;
      if (key_mask)
        for (int j = 0; j < N; ++j)
          if ((*key_mask)[static_cast<int64_t>(b) * N + j] == S(0))
            logits.col(j).array() += static_cast<S>(kMaskedLogit);
      S* P = probs->data() + ((static_cast<int64_t>(b) * heads + h) * M) * N;
      for (int i = 0; i < M; ++i) {
        const S mx = logits.row(i).maxCoeff();
        S z = 0;
        for (int j = 0; j < N; ++j) {
          const S e = std::exp(logits(i, j) - mx);
          P[static_cast<int64_t>(i) * N + j] = e;
          z += e;
        }
        const S iz = S(1) / z;
        for (int j = 0; j < N; ++j) P[static_cast<int64_t>(i) * N + j] *= iz;
      }
      ConstMatMap<S> Pm(P, M, N);
      Eigen::Map<EigenMat<S>, 0, Eigen::OuterStride<>> O(
          out.data() + static_cast<int64_t>(b) * M * D + h * dk, M, dk, Eigen::OuterStride<>(D));
      O.noalias() = Pm * V;
    }
  }
  if (probs_out) *probs_out = *probs;

  return Var<S>::op(std::move(out), {q, k, v},
                    [q, k, v, probs, B, M, N, D, heads, dk, sc](typename Var<S>::Node& n) {
    const bool nq = needs_grad(q), nk = needs_grad(k), nv = needs_grad(v);
    if (!nq && !nk && !nv) return;
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < heads; ++h) {
        StridedMap Q(q.val().data() + static_cast<int64_t>(b) * M * D + h * dk, M, dk,
                     Eigen::OuterStride<>(D));
        StridedMap K(k.val().data() + static_cast<int64_t>(b) * N * D + h * dk, N, dk,
                     Eigen::OuterStride<>(D));
        StridedMap V(v.val().data() + static_cast<int64_t>(b) * N * D + h * dk, N, dk,
                     Eigen::OuterStride<>(D));
        StridedMap G(n.grad.data() + static_cast<int64_t>(b) * M * D + h * dk, M, dk,
                     Eigen::OuterStride<>(D));
        ConstMatMap<S> Pm(probs->data() + ((static_cast<int64_t>(b) * heads + h) * M) * N, M, N);
        if (nv) {
          auto& dv = grad_sink(v);
          Eigen::Map<EigenMat<S>, 0, Eigen::OuterStride<>> DV(
              dv.data() + static_cast<int64_t>(b) * N * D + h * dk, N, dk, Eigen::OuterStride<>(D));
          DV.noalias() += Pm.transpose() * G;
        }
        if (nq || nk) {
          EigenMat<S> dP = G * V.transpose();  // [M,N]
          // softmax backward per row; masked cols have P = 0 so dS vanishes there.
          EigenMat<S> dS(M, N);
          for (int i = 0; i < M; ++i) {
            const S dot = (dP.row(i).array() * Pm.row(i).array()).sum();
            dS.row(i) = Pm.row(i).array() * (dP.row(i).array() - dot);
          }
          dS *= sc;
          if (nq) {
            auto& dq = grad_sink(q);
            Eigen::Map<EigenMat<S>, 0, Eigen::OuterStride<>> DQ(
                dq.data() + static_cast<int64_t>(b) * M * D + h * dk, M, dk,
                Eigen::OuterStride<>(D));
            DQ.noalias() += dS * K;
          }
          if (nk) {
            auto& dkk = grad_sink(k);
            Eigen::Map<EigenMat<S>, 0, Eigen::OuterStride<>> DK(
                dkk.data() + static_cast<int64_t>(b) * N * D + h * dk, N, dk,
                Eigen::OuterStride<>(D));
            DK.noalias() += dS.transpose() * Q;
          }
        }
      }
  });
}

// Stack per-sample token sets [n_i, D] into [B, n_max, D], zero padded.
template <typename S>
Var<S> pad_stack_tokens(const std::vector<Var<S>>& samples, int n_max, int d) {
  const int B = static_cast<int>(samples.size());
  if (B == 0) throw ValidationError("pad_stack_tokens: empty batch");
  Buffer<S> out({B, n_max, d});
  out.fill(0);
  std::vector<Var<S>> parents;
  std::vector<std::pair<int, int>> rows;  // (sample index, n_i) for parents
  for (int b = 0; b < B; ++b) {
    const Shape& s = samples[b].shape();
    if (s.size() != 2 || s[1] != d) throw ValidationError("pad_stack_tokens: bad sample shape");
    if (s[0] > n_max) throw CapacityError("pad_stack_tokens: sample exceeds capacity");
    if (s[0] == 0) continue;
    std::copy_n(samples[b].val().data(), static_cast<int64_t>(s[0]) * d,
                out.data() + static_cast<int64_t>(b) * n_max * d);
    parents.push_back(samples[b]);
    rows.emplace_back(b, s[0]);
  }
  auto keep = std::make_shared<std::vector<std::pair<int, int>>>(std::move(rows));
  auto kept_parents = std::make_shared<std::vector<Var<S>>>(parents);
  return Var<S>::op(std::move(out), std::move(parents),
                    [keep, kept_parents, n_max, d](typename Var<S>::Node& n) {
    for (size_t i = 0; i < keep->size(); ++i) {
      const auto& p = (*kept_parents)[i];
      if (!needs_grad(p)) continue;
      auto& dp = grad_sink(p);
      const auto [b, ni] = (*keep)[i];
      const S* g = n.grad.data() + static_cast<int64_t>(b) * n_max * d;
      for (int64_t j = 0; j < static_cast<int64_t>(ni) * d; ++j) dp[j] += g[j];
    }
  });
}

// [B, A*C, H, W] -> [B*H*W*A, C]; anchors enumerate (y, x, a) row-major per
// sample, matching the anchor grid order used by the detection head.
template <typename S>
Var<S> anchor_flatten(const Var<S>& x, int A, int C) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != A * C) throw ValidationError("anchor_flatten: channel mismatch");
  const int B = s[0], HW = s[2] * s[3];
  Buffer<S> out({B * HW * A, C});
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < HW; ++p)
      for (int a = 0; a < A; ++a) {
        S* dst = out.data() + ((static_cast<int64_t>(b) * HW + p) * A + a) * C;
        for (int c = 0; c < C; ++c)
          dst[c] = x.val()[(static_cast<int64_t>(b) * A * C + a * C + c) * HW + p];
      }
  return Var<S>::op(std::move(out), {x}, [x, B, A, C, HW](typename Var<S>::Node& n) {
    if (!needs_grad(x)) return;
    auto& dx = grad_sink(x);
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < HW; ++p)
        for (int a = 0; a < A; ++a) {
          const S* g = n.grad.data() + ((static_cast<int64_t>(b) * HW + p) * A + a) * C;
          for (int c = 0; c < C; ++c)
            dx[(static_cast<int64_t>(b) * A * C + a * C + c) * HW + p] += g[c];
        }
  });
}

}  // namespace ops
}  // namespace boxgen

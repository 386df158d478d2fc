#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "boxgen/config.hpp"
#include "boxgen/core/nn_ops.hpp"
#include "boxgen/core/ops.hpp"
#include "boxgen/core/params.hpp"
#include "boxgen/data_synth.hpp"
#include "boxgen/geometry.hpp"
#include "boxgen/vocab.hpp"

namespace boxgen {

// Multi-scale feature maps, finest first, uniform channel width.
template <typename S>
struct Pyramid {
  std::vector<Var<S>> levels;
};

template <typename S>
struct PerceptionOutput {
  std::vector<Var<S>> cls;  // per level [B, A*K, H, W]
  std::vector<Var<S>> box;  // per level [B, A*4, H, W]
};

inline constexpr int kAnchorsPerCell = 3;
inline constexpr std::array<double, kAnchorsPerCell> kAnchorScales = {1.0, 1.26, 1.59};

// All anchors across levels, normalized coordinates, finest level first.
// Within a level the order is row-major over cells, then scale.
struct AnchorGrid {
  std::vector<Box> boxes;
  std::vector<int> level_sizes;  // square side per level
  int count() const { return static_cast<int>(boxes.size()); }
};

// Tap depths (0-based) selected by fpn_tap_stages, e.g. "D2" is depth 1.
inline std::vector<int> fpn_tap_indices(const Config& c) {
  std::vector<int> out;
  for (const auto& s : c.fpn_tap_stages) {
    if (s.size() < 2 || s[0] != 'D')
      throw ConfigError("fpn_tap_stages: unknown stage '" + s + "' (valid: D1..D" +
                        std::to_string(c.unet_stages) + ")");
    int i = 0;
    try {
      i = std::stoi(s.substr(1));
    } catch (const std::exception&) {
      throw ConfigError("fpn_tap_stages: unknown stage '" + s + "'");
    }
    if (i < 1 || i > c.unet_stages)
      throw ConfigError("fpn_tap_stages: stage '" + s + "' out of range for a " +
                        std::to_string(c.unet_stages) + "-stage encoder");
    if (!out.empty() && i - 1 <= out.back())
      throw ConfigError("fpn_tap_stages: stages must be distinct and ordered fine to coarse");
    out.push_back(i - 1);
  }
  if (out.empty()) throw ConfigError("fpn_tap_stages: need at least one stage");
  return out;
}

inline AnchorGrid make_anchors(const Config& c) {
  AnchorGrid g;
  for (int idx : fpn_tap_indices(c)) {
    const int n = c.h_lat() >> idx;
    g.level_sizes.push_back(n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        for (double sc : kAnchorScales) {
          const double cx = (x + 0.5) / n;
          const double cy = (y + 0.5) / n;
          const double half = 0.5 * c.anchor_base_scale * sc / n;
          g.boxes.push_back(Box{cx - half, cy - half, cx + half, cy + half});
        }
  }
  return g;
}

// Box regression parameterization: center offsets in anchor units, log size
// ratios. decode_box is the exact inverse of encode_box.
inline std::array<double, 4> encode_box(const Box& gt, const Box& anchor) {
  const double aw = anchor.x1 - anchor.x0, ah = anchor.y1 - anchor.y0;
  const double acx = 0.5 * (anchor.x0 + anchor.x1), acy = 0.5 * (anchor.y0 + anchor.y1);
  const double gw = gt.x1 - gt.x0, gh = gt.y1 - gt.y0;
  return {(0.5 * (gt.x0 + gt.x1) - acx) / aw, (0.5 * (gt.y0 + gt.y1) - acy) / ah,
          std::log(gw / aw), std::log(gh / ah)};
}

inline Box decode_box(const std::array<double, 4>& d, const Box& anchor) {
  const double aw = anchor.x1 - anchor.x0, ah = anchor.y1 - anchor.y0;
  const double cx = 0.5 * (anchor.x0 + anchor.x1) + d[0] * aw;
  const double cy = 0.5 * (anchor.y0 + anchor.y1) + d[1] * ah;
  const double w = aw * std::exp(d[2]), h = ah * std::exp(d[3]);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Per-anchor training labels. Exactly one of the three states per anchor.
struct Assignment {
  std::vector<int8_t> label;  // +1 positive, 0 negative, -1 ignore
  std::vector<int> gt_idx;    // valid where label == +1
};

inline Assignment assign_anchors(const AnchorGrid& g, const std::vector<ObjectSpec>& gt,
                                 double iou_pos, double iou_neg) {
  const int n = g.count();
  Assignment a;
  a.label.assign(n, 0);
  a.gt_idx.assign(n, -1);
  if (gt.empty()) return a;

  for (int i = 0; i < n; ++i) {
    double best = 0;
    int best_gt = -1;
    for (size_t j = 0; j < gt.size(); ++j) {
      const double v = compute_iou(g.boxes[i], gt[j].box);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(j);
      }
    }
    if (best >= iou_pos) {
      a.label[i] = 1;
      a.gt_idx[i] = best_gt;
    } else if (best >= iou_neg) {
      a.label[i] = -1;
    }
  }
  // every gt keeps its single best-overlap anchor even below the threshold;
  // ties resolve to the lowest anchor index
  for (size_t j = 0; j < gt.size(); ++j) {
    double best = -1;
    int best_i = 0;
    for (int i = 0; i < n; ++i) {
      const double v = compute_iou(g.boxes[i], gt[j].box);
      if (v > best) {
        best = v;
        best_i = i;
      }
    }
    a.label[best_i] = 1;
    a.gt_idx[best_i] = static_cast<int>(j);
  }
  return a;
}

template <typename S>
struct PerceptionHead {
  int k_classes = 0;  // object categories plus one background class
  int c_fpn = 0, d_seq = 0, heads = 0;
  bool enh_enabled = true, enh_residual = true;
  std::vector<int> tap_idx;
  std::vector<int> tap_ch, tap_hw;

  std::vector<Var<S>> lat_w, lat_b, sm_w, sm_b;
  Var<S> enh_in_w, enh_in_b, enh_pe, enh_wq, enh_wk, enh_wv, enh_wo, enh_out_w, enh_out_b;
  std::vector<Var<S>> cls_w, cls_b, reg_w, reg_b;  // 4 tower convs + output conv each

  static PerceptionHead build(ParamStore<S>& ps, const Config& c, Rng& rng) {
    PerceptionHead h;
    h.configure(c);
    auto conv = [&](const std::string& n, int co, int ci, int k) {
      return ps.create(n, init::scaled_normal<S>({co, ci, k, k}, rng, ci * k * k));
    };
    auto bias = [&](const std::string& n, int co) { return ps.create(n, init::zeros<S>({co})); };
    for (size_t i = 0; i < h.tap_idx.size(); ++i) {
      const std::string p = "pog.l" + std::to_string(i);
      h.lat_w.push_back(conv(p + ".lat.w", h.c_fpn, h.tap_ch[i], 1));
      h.lat_b.push_back(bias(p + ".lat.b", h.c_fpn));
      h.sm_w.push_back(conv(p + ".smooth.w", h.c_fpn, h.c_fpn, 3));
      h.sm_b.push_back(bias(p + ".smooth.b", h.c_fpn));
    }
    int s_tokens = 0;
    for (int n : h.tap_hw) s_tokens += n * n;
    h.enh_in_w = ps.create("pog.enh.in.w", init::scaled_normal<S>({h.c_fpn, h.d_seq}, rng, h.c_fpn));
    h.enh_in_b = bias("pog.enh.in.b", h.d_seq);
    h.enh_pe = ps.create("pog.enh.pe", init::normal<S>({s_tokens, h.d_seq}, rng, 0.02));
    auto proj = [&](const std::string& n) {
      return ps.create(n, init::scaled_normal<S>({h.d_seq, h.d_seq}, rng, h.d_seq));
    };
    h.enh_wq = proj("pog.enh.wq");
    h.enh_wk = proj("pog.enh.wk");
    h.enh_wv = proj("pog.enh.wv");
    h.enh_wo = proj("pog.enh.wo");
    h.enh_out_w =
        ps.create("pog.enh.out.w", init::scaled_normal<S>({h.d_seq, h.c_fpn}, rng, h.d_seq));
    h.enh_out_b = bias("pog.enh.out.b", h.c_fpn);
    for (int k = 0; k < 4; ++k) {
      const std::string cn = "pog.cls.t" + std::to_string(k), rn = "pog.reg.t" + std::to_string(k);
      h.cls_w.push_back(conv(cn + ".w", h.c_fpn, h.c_fpn, 3));
      h.cls_b.push_back(bias(cn + ".b", h.c_fpn));
      h.reg_w.push_back(conv(rn + ".w", h.c_fpn, h.c_fpn, 3));
      h.reg_b.push_back(bias(rn + ".b", h.c_fpn));
    }
    h.cls_w.push_back(conv("pog.cls.out.w", kAnchorsPerCell * h.k_classes, h.c_fpn, 3));
    h.cls_b.push_back(bias("pog.cls.out.b", kAnchorsPerCell * h.k_classes));
    h.reg_w.push_back(conv("pog.reg.out.w", kAnchorsPerCell * 4, h.c_fpn, 3));
    h.reg_b.push_back(bias("pog.reg.out.b", kAnchorsPerCell * 4));
    return h;
  }

  static PerceptionHead attach(ParamStore<S>& ps, const Config& c) {
    PerceptionHead h;
    h.configure(c);
    for (size_t i = 0; i < h.tap_idx.size(); ++i) {
      const std::string p = "pog.l" + std::to_string(i);
      h.lat_w.push_back(ps.get(p + ".lat.w"));
      h.lat_b.push_back(ps.get(p + ".lat.b"));
      h.sm_w.push_back(ps.get(p + ".smooth.w"));
      h.sm_b.push_back(ps.get(p + ".smooth.b"));
    }
    h.enh_in_w = ps.get("pog.enh.in.w");
    h.enh_in_b = ps.get("pog.enh.in.b");
    h.enh_pe = ps.get("pog.enh.pe");
    h.enh_wq = ps.get("pog.enh.wq");
    h.enh_wk = ps.get("pog.enh.wk");
    h.enh_wv = ps.get("pog.enh.wv");
    h.enh_wo = ps.get("pog.enh.wo");
    h.enh_out_w = ps.get("pog.enh.out.w");
    h.enh_out_b = ps.get("pog.enh.out.b");
    for (int k = 0; k < 5; ++k) {
      const std::string ck = k < 4 ? "pog.cls.t" + std::to_string(k) : "pog.cls.out";
      const std::string rk = k < 4 ? "pog.reg.t" + std::to_string(k) : "pog.reg.out";
      h.cls_w.push_back(ps.get(ck + ".w"));
      h.cls_b.push_back(ps.get(ck + ".b"));
      h.reg_w.push_back(ps.get(rk + ".w"));
      h.reg_b.push_back(ps.get(rk + ".b"));
    }
    return h;
  }

  // Top-down pyramid: 1x1 lateral per tap, nearest upsample of the coarser
  // merged map, add, then a 3x3 smoothing conv per level.
  Pyramid<S> build_fpn(const std::vector<Var<S>>& all_taps) const {
    std::vector<Var<S>> taps;
    for (size_t i = 0; i < tap_idx.size(); ++i) {
      if (tap_idx[i] >= static_cast<int>(all_taps.size()))
        throw ValidationError("build_fpn: tap depth out of range");
      const Var<S>& t = all_taps[tap_idx[i]];
      const Shape& s = t.shape();
      if (s.size() != 4 || s[1] != tap_ch[i] || s[2] != tap_hw[i] || s[3] != tap_hw[i])
        throw ValidationError("build_fpn: tap " + std::to_string(i) + " has unexpected shape");
      taps.push_back(t);
    }
    const int levels = static_cast<int>(taps.size());
    std::vector<Var<S>> merged(levels);
    for (int i = levels - 1; i >= 0; --i) {
      Var<S> m = ops::conv2d(taps[i], lat_w[i], lat_b[i], 1, 0);
      if (i + 1 < levels) {
        Var<S> up = merged[i + 1];
        while (up.shape()[2] < tap_hw[i]) up = ops::upsample2(up);
        m = ops::add(m, up);
      }
      merged[i] = m;
    }
    Pyramid<S> p;
    for (int i = 0; i < levels; ++i)
      p.levels.push_back(ops::conv2d(merged[i], sm_w[i], sm_b[i], 1, 1));
    return p;
  }

  // Flatten all levels to one token sequence, project, add the learned
  // positional table, run multi-head self-attention, project back and restore
  // the level geometry.
  Pyramid<S> enh_fusion(const Pyramid<S>& p) const {
    if (!enh_enabled) return p;
    std::vector<int> t_per;
    Var<S> seq;
    for (size_t i = 0; i < p.levels.size(); ++i) {
      Var<S> t = ops::bchw_to_btc(p.levels[i]);
      t_per.push_back(static_cast<int>(t.shape()[1]));
      seq = i == 0 ? t : ops::concat_tokens(seq, t);
    }
    if (seq.shape()[1] != enh_pe.shape()[0])
      throw StateError("enh_fusion: token count " + std::to_string(seq.shape()[1]) +
                       " does not match the positional table (" +
                       std::to_string(enh_pe.shape()[0]) + ")");
    Var<S> x = ops::add_tokens_pe(ops::add_bias_rows(ops::matmul(seq, enh_in_w), enh_in_b), enh_pe);
    Var<S> att = ops::scaled_dot_attention(ops::matmul(x, enh_wq), ops::matmul(x, enh_wk),
                                           ops::matmul(x, enh_wv), heads);
    Var<S> back = ops::add_bias_rows(ops::matmul(ops::matmul(att, enh_wo), enh_out_w), enh_out_b);
    Pyramid<S> out;
    int t0 = 0;
    for (size_t i = 0; i < p.levels.size(); ++i) {
      const Shape& s = p.levels[i].shape();
      Var<S> piece = ops::btc_to_bchw(ops::slice_tokens(back, t0, t0 + t_per[i]),
                                      static_cast<int>(s[2]), static_cast<int>(s[3]));
      out.levels.push_back(enh_residual ? ops::add(p.levels[i], piece) : piece);
      t0 += t_per[i];
    }
    return out;
  }

  // 4-layer conv towers shared across levels, then a linear output conv.
  Var<S> run_tower(const Var<S>& x, const std::vector<Var<S>>& w,
                   const std::vector<Var<S>>& b) const {
    Var<S> h = x;
    for (int k = 0; k < 4; ++k) h = ops::relu(ops::conv2d(h, w[k], b[k], 1, 1));
    return ops::conv2d(h, w[4], b[4], 1, 1);
  }

  PerceptionOutput<S> forward(const std::vector<Var<S>>& all_taps) const {
    Pyramid<S> p = enh_fusion(build_fpn(all_taps));
    PerceptionOutput<S> out;
    for (const auto& lvl : p.levels) {
      out.cls.push_back(run_tower(lvl, cls_w, cls_b));
      out.box.push_back(run_tower(lvl, reg_w, reg_b));
    }
    return out;
  }

 private:
  void configure(const Config& c) {
    k_classes = vocab::kNumCategories + 1;
    c_fpn = c.fpn_channels;
    d_seq = c.d_seq;
    heads = c.enh_heads;
    enh_enabled = c.enh_fusion_enabled;
    enh_residual = c.enh_fusion_residual;
    tap_idx = fpn_tap_indices(c);
    for (int idx : tap_idx) {
      tap_ch.push_back(c.unet_widths[idx]);
      tap_hw.push_back(c.h_lat() >> idx);
    }
  }
};

template <typename S>
struct PerceptionLoss {
  Var<S> total, cla, reg;
  int n_pos = 0;
};

// Flattens per-level [B, A*inner, H, W] predictions to one [B*N, inner]
// matrix whose row order matches AnchorGrid (level, cell row-major, scale).
template <typename S>
Var<S> flatten_predictions(const std::vector<Var<S>>& levels, int inner) {
  Var<S> seq;
  int64_t b = 0;
  for (size_t i = 0; i < levels.size(); ++i) {
    const Shape& s = levels[i].shape();
    b = s[0];
    Var<S> t = ops::bchw_to_btc(levels[i]);  // [B, H*W, A*inner]
    t = ops::reshape(t, {b, t.shape()[1] * kAnchorsPerCell, inner});
    seq = i == 0 ? t : ops::concat_tokens(seq, t);
  }
  return ops::reshape(seq, {b * seq.shape()[1], inner});
}

// Focal-modulated softmax cross-entropy plus smooth-L1 box regression over an
// anchor assignment. Samples with active[b] == 0 contribute nothing. The
// focal_on_regression switch moves the focal factor from classification onto
// the regression term instead.
template <typename S>
PerceptionLoss<S> perception_loss(const PerceptionOutput<S>& out, const AnchorGrid& grid,
                                  const std::vector<std::vector<ObjectSpec>>& gt,
                                  const std::vector<char>& active, const Config& c) {
  if (out.cls.empty() || out.cls.size() != out.box.size())
    throw ValidationError("perception_loss: malformed output");
  const int64_t batch = out.cls[0].shape()[0];
  if (static_cast<int64_t>(gt.size()) != batch || static_cast<int64_t>(active.size()) != batch)
    throw ValidationError("perception_loss: one gt list and active flag per sample");
  const int k_classes = static_cast<int>(out.cls[0].shape()[1]) / kAnchorsPerCell;
  const int n_anchors = grid.count();

  Var<S> cls_flat = flatten_predictions(out.cls, k_classes);  // [B*N, K]
  Var<S> box_flat = flatten_predictions(out.box, 4);          // [B*N, 4]
  if (cls_flat.shape()[0] != batch * n_anchors)
    throw ValidationError("perception_loss: anchor grid does not match prediction geometry");

  std::vector<int64_t> ce_rows, pos_rows;
  std::vector<int> ce_target;  // class index per ce row
  std::vector<S> reg_targets;
  for (int64_t b = 0; b < batch; ++b) {
    if (!active[b]) continue;
    Assignment a = assign_anchors(grid, gt[b], c.iou_pos, c.iou_neg);
    for (int i = 0; i < n_anchors; ++i) {
      if (a.label[i] < 0) continue;
      ce_rows.push_back(b * n_anchors + i);
      if (a.label[i] == 1) {
        const ObjectSpec& o = gt[b][a.gt_idx[i]];
        ce_target.push_back(o.category);
        pos_rows.push_back(b * n_anchors + i);
        for (double v : encode_box(o.box, grid.boxes[i])) reg_targets.push_back(static_cast<S>(v));
      } else {
        ce_target.push_back(k_classes - 1);  // background
      }
    }
  }

  PerceptionLoss<S> r;
  r.n_pos = static_cast<int>(pos_rows.size());
  const double norm = 1.0 / std::max(1, r.n_pos);
  if (ce_rows.empty()) {
    r.cla = Var<S>::leaf(Buffer<S>({1}), false);
    r.reg = Var<S>::leaf(Buffer<S>({1}), false);
    r.total = ops::add(r.cla, r.reg);
    return r;
  }

  const int64_t m = static_cast<int64_t>(ce_rows.size());
  Var<S> sel = ops::select_rows(cls_flat, ce_rows);  // [M, K]

  // constants for the row-wise softmax: detached per-row max (an exact shift
  // for log-sum-exp), one-hot targets, ones for row reduction and broadcast
  Buffer<S> row_max({m, 1});
  for (int64_t i = 0; i < m; ++i) {
    S mx = sel.val()[i * k_classes];
    for (int j = 1; j < k_classes; ++j) mx = std::max(mx, sel.val()[i * k_classes + j]);
    row_max[i] = mx;
  }
  Buffer<S> onehot({m, k_classes});
  for (int64_t i = 0; i < m; ++i) onehot[i * k_classes + ce_target[i]] = S(1);
  auto cvar = [](Buffer<S> v) { return Var<S>::leaf(std::move(v), false); };
  Var<S> ones_row = cvar(Buffer<S>({1, k_classes}, S(1)));
  Var<S> ones_col = cvar(Buffer<S>({k_classes, 1}, S(1)));

  Var<S> shifted = ops::sub(sel, ops::matmul(cvar(row_max), ones_row));
  Var<S> lse = ops::log_op(ops::matmul(ops::exp_op(shifted), ones_col));         // [M,1]
  Var<S> z_t = ops::matmul(ops::mul(shifted, cvar(onehot)), ones_col);     // [M,1]
  Var<S> log_p = ops::sub(z_t, lse);
  Var<S> ce = ops::neg(log_p);

  if (c.focal_on_regression) {
    r.cla = ops::scale(ops::sum_all(ce), norm);
  } else {
    Buffer<S> alpha_t({m, 1});
    for (int64_t i = 0; i < m; ++i)
      alpha_t[i] = static_cast<S>(ce_target[i] == k_classes - 1 ? 1.0 - c.focal_alpha
                                                                : c.focal_alpha);
    Var<S> one_minus_p = ops::sub(cvar(Buffer<S>({m, 1}, S(1))), ops::exp_op(log_p));
    Var<S> w = ops::mul(cvar(alpha_t), ops::pow_const(one_minus_p, c.focal_gamma));
    r.cla = ops::scale(ops::sum_all(ops::mul(w, ce)), norm);
  }

  if (pos_rows.empty()) {
    r.reg = Var<S>::leaf(Buffer<S>({1}), false);
  } else {
    const int64_t np = static_cast<int64_t>(pos_rows.size());
    Buffer<S> tgt({np, 4});
    std::copy(reg_targets.begin(), reg_targets.end(), tgt.v.begin());
    Var<S> diff = ops::sub(ops::select_rows(box_flat, pos_rows), cvar(tgt));
    Var<S> huber = ops::smooth_l1(diff);
    if (c.focal_on_regression) {
      // focal factor applied to regression, from the live class confidences
      std::vector<int64_t> pos_in_m;
      for (int64_t i = 0; i < m; ++i)
        if (ce_target[i] != k_classes - 1) pos_in_m.push_back(i);
      Var<S> p_pos = ops::exp_op(ops::select_rows(log_p, pos_in_m));  // [np,1]
      Var<S> f = ops::scale(
          ops::pow_const(ops::sub(cvar(Buffer<S>({np, 1}, S(1))), p_pos), c.focal_gamma),
          c.focal_alpha);
      huber = ops::mul(huber, ops::matmul(f, cvar(Buffer<S>({1, 4}, S(1)))));
    }
    r.reg = ops::scale(ops::sum_all(huber), norm);
  }
  r.total = ops::add(r.cla, r.reg);
  return r;
}

// Trainable positive weights for the two loss terms, or frozen constants in
// fixed mode (where zero is allowed so single-term variants are expressible).
template <typename S>
struct LossWeights {
  bool trainable = true;
  Var<S> raw_alpha, raw_beta;  // trainable mode only
  S fixed_alpha = S(1), fixed_beta = S(1);

  // softplus(x) = 1 exactly at x = ln(e - 1)
  static constexpr double kRawUnit = 0.5413248546129181;

  static LossWeights build(ParamStore<S>& ps, const Config& c) {
    LossWeights w;
    w.trainable = c.loss_weight_mode == "trainable";
    if (w.trainable) {
      w.raw_alpha = ps.create("loss.raw_alpha", init::constant<S>({1}, kRawUnit));
      w.raw_beta = ps.create("loss.raw_beta", init::constant<S>({1}, kRawUnit));
    } else {
      w.fixed_alpha = static_cast<S>(c.fixed_alpha);
      w.fixed_beta = static_cast<S>(c.fixed_beta);
    }
    return w;
  }

  static LossWeights attach(ParamStore<S>& ps, const Config& c) {
    LossWeights w;
    w.trainable = c.loss_weight_mode == "trainable";
    if (w.trainable) {
      w.raw_alpha = ps.get("loss.raw_alpha");
      w.raw_beta = ps.get("loss.raw_beta");
    } else {
      w.fixed_alpha = static_cast<S>(c.fixed_alpha);
      w.fixed_beta = static_cast<S>(c.fixed_beta);
    }
    return w;
  }

  Var<S> alpha() const {
    return trainable ? ops::softplus(raw_alpha)
                     : Var<S>::leaf(Buffer<S>({1}, fixed_alpha), false);
  }
  Var<S> beta() const {
    return trainable ? ops::softplus(raw_beta) : Var<S>::leaf(Buffer<S>({1}, fixed_beta), false);
  }
};

template <typename S>
Var<S> combined_loss(const Var<S>& l_p, const Var<S>& l_sd, const LossWeights<S>& w) {
  return ops::add(ops::mul(w.alpha(), l_p), ops::mul(w.beta(), l_sd));
}

}  // namespace boxgen

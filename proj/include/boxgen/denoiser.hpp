#pragma once

#include <map>
#include <string>
#include <vector>

#include "boxgen/autoencoder.hpp"
#include "boxgen/config.hpp"
#include "boxgen/core/nn_ops.hpp"
#include "boxgen/core/ops.hpp"
#include "boxgen/core/params.hpp"
#include "boxgen/grounding.hpp"
#include "boxgen/grounding_attention.hpp"
#include "boxgen/schedule.hpp"
#include "boxgen/vocab.hpp"

namespace boxgen {

// Sinusoidal embedding of integer timesteps, [B, dim].
template <typename S>
Buffer<S> timestep_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  Buffer<S> out({static_cast<int>(t.size()), dim});
  for (size_t b = 0; b < t.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
      out[b * dim + i] = static_cast<S>(std::sin(t[b] * freq));
      out[b * dim + half + i] = static_cast<S>(std::cos(t[b] * freq));
    }
  return out;
}

template <typename S>
struct ResBlock {
  int cin = 0, cout = 0, groups = 0;
  Var<S> g1, b1, c1w, c1b, tw, tb, g2, b2, c2w, c2b;
  Var<S> skw, skb;  // 1x1 projection when cin != cout

  static ResBlock build(ParamStore<S>& ps, const std::string& p, int cin, int cout, int t_hidden,
                        int groups, Rng& rng) {
    ResBlock r;
    r.cin = cin;
    r.cout = cout;
    r.groups = groups;
    r.g1 = ps.create(p + ".g1", init::constant<S>({cin}, 1));
    r.b1 = ps.create(p + ".b1", init::zeros<S>({cin}));
    r.c1w = ps.create(p + ".c1.w", init::scaled_normal<S>({cout, cin, 3, 3}, rng, cin * 9));
    r.c1b = ps.create(p + ".c1.b", init::zeros<S>({cout}));
    r.tw = ps.create(p + ".t.w", init::scaled_normal<S>({t_hidden, cout}, rng, t_hidden));
    r.tb = ps.create(p + ".t.b", init::zeros<S>({cout}));
    r.g2 = ps.create(p + ".g2", init::constant<S>({cout}, 1));
    r.b2 = ps.create(p + ".b2", init::zeros<S>({cout}));
    r.c2w = ps.create(p + ".c2.w", init::scaled_normal<S>({cout, cout, 3, 3}, rng, cout * 9));
    r.c2b = ps.create(p + ".c2.b", init::zeros<S>({cout}));
    if (cin != cout) {
      r.skw = ps.create(p + ".sk.w", init::scaled_normal<S>({cout, cin, 1, 1}, rng, cin));
      r.skb = ps.create(p + ".sk.b", init::zeros<S>({cout}));
    }
    return r;
  }

  Var<S> forward(const Var<S>& x, const Var<S>& temb) const {
    Var<S> h = ops::conv2d(ops::silu(ops::group_norm(x, g1, b1, groups)), c1w, c1b, 1, 1);
    h = ops::add_sample_channel(h, ops::linear(temb, tw, tb));
    h = ops::conv2d(ops::silu(ops::group_norm(h, g2, b2, groups)), c2w, c2b, 1, 1);
    Var<S> sk = cin == cout ? x : ops::conv2d(x, skw, skb, 1, 0);
    return ops::add(h, sk);
  }
};

// Pre-normed residual attention over spatial tokens. Self-attention when no
// context is passed, caption cross-attention otherwise.
template <typename S>
struct AttnBlock {
  int ch = 0, heads = 0, groups = 0;
  bool cross = false;
  Var<S> g, b, wq, wk, wv, wo;

  static AttnBlock build(ParamStore<S>& ps, const std::string& p, int ch, int d_kv, bool cross,
                         int heads, int groups, Rng& rng) {
    AttnBlock a;
    a.ch = ch;
    a.heads = heads;
    a.groups = groups;
    a.cross = cross;
    a.g = ps.create(p + ".g", init::constant<S>({ch}, 1));
    a.b = ps.create(p + ".b", init::zeros<S>({ch}));
    a.wq = ps.create(p + ".wq", init::scaled_normal<S>({ch, ch}, rng, ch));
    a.wk = ps.create(p + ".wk", init::scaled_normal<S>({d_kv, ch}, rng, d_kv));
    a.wv = ps.create(p + ".wv", init::scaled_normal<S>({d_kv, ch}, rng, d_kv));
    a.wo = ps.create(p + ".wo", init::scaled_normal<S>({ch, ch}, rng, ch));
    return a;
  }

  Var<S> forward(const Var<S>& x, const Var<S>* context = nullptr) const {
    const int H = x.shape()[2], W = x.shape()[3];
    Var<S> t = ops::bchw_to_btc(ops::group_norm(x, g, b, groups));
    Var<S> q = ops::matmul(t, wq);
    const Var<S>& kvsrc = cross ? *context : t;
    Var<S> k = ops::matmul(kvsrc, wk);
    Var<S> v = ops::matmul(kvsrc, wv);
    Var<S> att = ops::scaled_dot_attention(q, k, v, heads);
    return ops::add(x, ops::btc_to_bchw(ops::matmul(att, wo), H, W));
  }
};

// Learned caption encoder: token table plus positional embedding, one
// pre-normed transformer block.
template <typename S>
struct CaptionEncoder {
  int d_model = 0, l_txt = 0, heads = 0;
  Var<S> table, pe;
  Var<S> ln1g, ln1b, wq, wk, wv, wo;
  Var<S> ln2g, ln2b, mw1, mb1, mw2, mb2;

  static CaptionEncoder build(ParamStore<S>& ps, const Config& c, Rng& rng) {
    CaptionEncoder e;
    e.d_model = c.d_model;
    e.l_txt = c.l_txt;
    e.heads = c.attn_heads;
    const int n_words = static_cast<int>(vocab::caption_words().size());
    const int d = c.d_model, dm = 4 * c.d_model;
    e.table = ps.create("caption.table", init::normal<S>({n_words, d}, rng, 0.02));
    e.pe = ps.create("caption.pe", init::normal<S>({c.l_txt, d}, rng, 0.02));
    e.ln1g = ps.create("caption.ln1.g", init::constant<S>({d}, 1));
    e.ln1b = ps.create("caption.ln1.b", init::zeros<S>({d}));
    e.wq = ps.create("caption.sa.wq", init::scaled_normal<S>({d, d}, rng, d));
    e.wk = ps.create("caption.sa.wk", init::scaled_normal<S>({d, d}, rng, d));
    e.wv = ps.create("caption.sa.wv", init::scaled_normal<S>({d, d}, rng, d));
    e.wo = ps.create("caption.sa.wo", init::scaled_normal<S>({d, d}, rng, d));
    e.ln2g = ps.create("caption.ln2.g", init::constant<S>({d}, 1));
    e.ln2b = ps.create("caption.ln2.b", init::zeros<S>({d}));
    e.mw1 = ps.create("caption.mlp.w1", init::scaled_normal<S>({d, dm}, rng, d));
    e.mb1 = ps.create("caption.mlp.b1", init::zeros<S>({dm}));
    e.mw2 = ps.create("caption.mlp.w2", init::scaled_normal<S>({dm, d}, rng, dm));
    e.mb2 = ps.create("caption.mlp.b2", init::zeros<S>({d}));
    return e;
  }

  // token ids [B][l_txt] -> [B, l_txt, d_model]
  Var<S> forward(const std::vector<std::vector<int>>& ids) const {
    const int B = static_cast<int>(ids.size());
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(B) * l_txt);
    for (const auto& row : ids) {
      if (static_cast<int>(row.size()) != l_txt)
        throw ValidationError("caption encoder: expected " + std::to_string(l_txt) +
                              " tokens per caption");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    Var<S> x = ops::reshape(ops::embedding(table, flat), {B, l_txt, d_model});
    x = ops::add_tokens_pe(x, pe);
    Var<S> n1 = ops::layer_norm(x, ln1g, ln1b);
    Var<S> att = ops::scaled_dot_attention(ops::matmul(n1, wq), ops::matmul(n1, wk),
                                           ops::matmul(n1, wv), heads);
    x = ops::add(x, ops::matmul(att, wo));
    Var<S> n2 = ops::layer_norm(x, ln2g, ln2b);
    Var<S> m = ops::linear(ops::silu(ops::linear(n2, mw1, mb1)), mw2, mb2);
    return ops::add(x, m);
  }
};

// The denoising U-Net: per-stage residual blocks with self/cross attention
// in the two deepest resolutions, optional gated grounding attention at the
// configured insertion stages, and feature taps on every down stage.
template <typename S>
struct Denoiser {
  enum class Mode { text_only, with_grounding };

  struct Output {
    Var<S> eps_hat;
    std::vector<Var<S>> taps;  // down-stage outputs, finest first
  };

  Config cfg;
  int t_hidden = 0;
  Var<S> temb_w1, temb_b1, temb_w2, temb_b2;
  Var<S> stem_w, stem_b;
  std::vector<ResBlock<S>> dres, ures;
  ResBlock<S> mid;
  std::vector<Var<S>> down_w, down_b, up_w, up_b;
  std::map<std::string, AttnBlock<S>> sa, ca;
  std::map<std::string, GatedAttention<S>> ga;
  Var<S> head_g, head_b, head_w, head_bias;
  CaptionEncoder<S> caption;
  bool has_grounding = false;

  static std::string dname(int i) { return "D" + std::to_string(i + 1); }
  static std::string uname(int j) { return "U" + std::to_string(j + 1); }

  // Stage s (0-based, depth order) carries self+cross attention iff it sits
  // in the two deepest resolutions of the config's stage count.
  bool attn_stage(int depth_idx) const { return depth_idx >= cfg.unet_stages - 2; }

  static Denoiser build(ParamStore<S>& ps, const Config& c, Rng& rng, bool with_grounding_modules) {
    Denoiser m;
    m.cfg = c;
    m.has_grounding = with_grounding_modules;
    const int s_count = c.unet_stages;
    const std::vector<int>& w = c.unet_widths;
    m.t_hidden = 2 * c.t_emb_dim;
    m.temb_w1 = ps.create("unet.temb.w1",
                          init::scaled_normal<S>({c.t_emb_dim, m.t_hidden}, rng, c.t_emb_dim));
    m.temb_b1 = ps.create("unet.temb.b1", init::zeros<S>({m.t_hidden}));
    m.temb_w2 = ps.create("unet.temb.w2",
                          init::scaled_normal<S>({m.t_hidden, m.t_hidden}, rng, m.t_hidden));
    m.temb_b2 = ps.create("unet.temb.b2", init::zeros<S>({m.t_hidden}));

    m.stem_w = ps.create("unet.stem.w",
                         init::scaled_normal<S>({w[0], c.c_lat(), 3, 3}, rng, c.c_lat() * 9));
    m.stem_b = ps.create("unet.stem.b", init::zeros<S>({w[0]}));

    auto mk_attn_pair = [&](const std::string& stage, int ch) {
      m.sa.emplace(stage, AttnBlock<S>::build(ps, "unet." + stage + ".sa", ch, ch, false,
                                              c.attn_heads, c.groupnorm_groups, rng));
      m.ca.emplace(stage, AttnBlock<S>::build(ps, "unet." + stage + ".ca", ch, c.d_model, true,
                                              c.attn_heads, c.groupnorm_groups, rng));
    };

    for (int i = 0; i < s_count; ++i) {
      m.dres.push_back(ResBlock<S>::build(ps, "unet.d" + std::to_string(i + 1) + ".res", w[i],
                                          w[i], m.t_hidden, c.groupnorm_groups, rng));
      if (m.attn_stage(i)) mk_attn_pair(dname(i), w[i]);
      if (i + 1 < s_count) {
        m.down_w.push_back(ps.create("unet.down" + std::to_string(i + 1) + ".w",
                                     init::scaled_normal<S>({w[i + 1], w[i], 3, 3}, rng, w[i] * 9)));
        m.down_b.push_back(
            ps.create("unet.down" + std::to_string(i + 1) + ".b", init::zeros<S>({w[i + 1]})));
      }
    }
    m.mid = ResBlock<S>::build(ps, "unet.mid.res", w[s_count - 1], w[s_count - 1], m.t_hidden,
                               c.groupnorm_groups, rng);
    for (int j = 0; j < s_count; ++j) {
      const int d = s_count - 1 - j;  // matching down stage
      m.ures.push_back(ResBlock<S>::build(ps, "unet.u" + std::to_string(j + 1) + ".res",
                                          2 * w[d], w[d], m.t_hidden, c.groupnorm_groups, rng));
      if (m.attn_stage(d)) mk_attn_pair(uname(j), w[d]);
      if (d > 0) {
        m.up_w.push_back(ps.create("unet.up" + std::to_string(j + 1) + ".w",
                                   init::scaled_normal<S>({w[d - 1], w[d], 3, 3}, rng, w[d] * 9)));
        m.up_b.push_back(
            ps.create("unet.up" + std::to_string(j + 1) + ".b", init::zeros<S>({w[d - 1]})));
      }
    }
    m.head_g = ps.create("unet.head.g", init::constant<S>({w[0]}, 1));
    m.head_b = ps.create("unet.head.b", init::zeros<S>({w[0]}));
    m.head_w = ps.create("unet.head.w",
                         init::scaled_normal<S>({c.c_lat(), w[0], 3, 3}, rng, w[0] * 9));
    m.head_bias = ps.create("unet.head.bias", init::zeros<S>({c.c_lat()}));

    m.caption = CaptionEncoder<S>::build(ps, c, rng);

    if (with_grounding_modules) {
      const auto variant = GatedAttention<S>::parse_variant(c.attention_variant);
      for (const auto& stage : insertion_plan(c)) {
        const int depth = stage[1] - '1';
        const int width = stage[0] == 'D' ? w[depth] : w[s_count - 1 - depth];
        m.ga.emplace(stage, GatedAttention<S>::build(ps, "ga." + stage, variant, width,
                                                     c.d_model, c.attn_heads, rng));
      }
    }
    return m;
  }

  // Applies the gated grounding attention for `stage` if the model carries
  // one there and the caller asked for grounding.
  Var<S> maybe_ground(const std::string& stage, Var<S> h, Mode mode,
                      const GroundingBatch<S>* g) const {
    if (mode != Mode::with_grounding) return h;
    auto it = ga.find(stage);
    if (it == ga.end()) return h;
    const int H = h.shape()[2], W = h.shape()[3];
    Var<S> t = ops::bchw_to_btc(h);
    t = it->second.forward(t, g->tokens, g->mask);
    return ops::btc_to_bchw(t, H, W);
  }

  Output forward(const Var<S>& z_t, const std::vector<int>& t, const Var<S>& cap_emb, Mode mode,
                 const GroundingBatch<S>* g = nullptr) const {
    const Shape& zs = z_t.shape();
    if (zs.size() != 4 || zs[1] != cfg.c_lat())
      throw ValidationError("denoiser: latent must be [B," + std::to_string(cfg.c_lat()) +
                            ",H,W]");
    if (zs[0] != static_cast<int>(t.size()))
      throw ValidationError("denoiser: one timestep per sample required");
    if (mode == Mode::with_grounding) {
      if (!has_grounding)
        throw StateError("denoiser: grounding modules were not built for this model");
      if (g == nullptr) throw StateError("denoiser: grounding batch missing");
    }

    Var<S> temb = Var<S>::leaf(timestep_embedding<S>(t, cfg.t_emb_dim), false);
    temb = ops::linear(ops::silu(ops::linear(temb, temb_w1, temb_b1)), temb_w2, temb_b2);

    Output out;
    Var<S> h = ops::conv2d(z_t, stem_w, stem_b, 1, 1);
    const int s_count = cfg.unet_stages;
    for (int i = 0; i < s_count; ++i) {
      h = dres[i].forward(h, temb);
      const std::string stage = dname(i);
      if (attn_stage(i)) {
        h = sa.at(stage).forward(h);
        h = maybe_ground(stage, h, mode, g);
        h = ca.at(stage).forward(h, &cap_emb);
      } else {
        h = maybe_ground(stage, h, mode, g);
      }
      out.taps.push_back(h);
      if (i + 1 < s_count) h = ops::conv2d(h, down_w[i], down_b[i], 2, 1);
    }
    h = mid.forward(h, temb);
    for (int j = 0; j < s_count; ++j) {
      const int d = s_count - 1 - j;
      h = ures[j].forward(ops::concat_channels(h, out.taps[d]), temb);
      const std::string stage = uname(j);
      if (attn_stage(d)) {
        h = sa.at(stage).forward(h);
        h = maybe_ground(stage, h, mode, g);
        h = ca.at(stage).forward(h, &cap_emb);
      } else {
        h = maybe_ground(stage, h, mode, g);
      }
      if (d > 0) h = ops::conv2d(ops::upsample2(h), up_w[j], up_b[j], 1, 1);
    }
    out.eps_hat = ops::conv2d(ops::silu(ops::group_norm(h, head_g, head_b, cfg.groupnorm_groups)),
                              head_w, head_bias, 1, 1);
    return out;
  }
};

// Noise-prediction MSE over all elements and samples.
template <typename S>
Var<S> generation_loss(const Var<S>& eps, const Var<S>& eps_hat) {
  return ops::mse(eps_hat, eps);
}

// Evenly spaced ancestral-sampling timesteps, ascending, always containing
// 0 and T-1. steps == 0 or steps >= T means the full schedule.
inline std::vector<int> sampling_timesteps(int T, int steps) {
  if (steps <= 0 || steps >= T) {
    std::vector<int> ts(T);
    for (int i = 0; i < T; ++i) ts[i] = i;
    return ts;
  }
  if (steps == 1) return {T - 1};
  std::vector<int> ts(steps);
  for (int j = 0; j < steps; ++j)
    ts[j] = static_cast<int>(std::lround(static_cast<double>(j) * (T - 1) / (steps - 1)));
  return ts;
}

// Ancestral DDPM sampling from pure noise, deterministic given the rng
// state. Returns latents [B, c_lat, h_lat, w_lat]; the caller decodes.
template <typename S>
Buffer<S> sample_latents(const Denoiser<S>& model, const Var<S>& cap_emb,
                         typename Denoiser<S>::Mode mode, const GroundingBatch<S>* g,
                         const NoiseSchedule& sched, int steps, Rng& rng) {
  NoGradGuard ng;
  const int B = cap_emb.shape()[0];
  const int C = model.cfg.c_lat(), H = model.cfg.h_lat();
  Buffer<S> z({B, C, H, H});
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<S>(rng.normal());

  const std::vector<int> ts = sampling_timesteps(sched.T, steps);
  for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
    const int t = ts[i];
    const double ab_cur = sched.alpha_bars[t];
    const double ab_prev = i > 0 ? sched.alpha_bars[ts[i - 1]] : 1.0;
    const double alpha = ab_cur / ab_prev;
    const double beta = 1.0 - alpha;
    const double mean_scale = 1.0 / std::sqrt(alpha);
    const double eps_scale = beta / std::sqrt(1.0 - ab_cur);
    const double sigma = i > 0 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_cur)) : 0.0;

    auto out = model.forward(Var<S>::leaf(z, false), std::vector<int>(B, t), cap_emb, mode, g);
    const auto& eh = out.eps_hat.val();
    for (int64_t k = 0; k < z.numel(); ++k) {
      double v = mean_scale * (z[k] - eps_scale * eh[k]);
      if (sigma > 0) v += sigma * rng.normal();
      z[k] = static_cast<S>(v);
    }
  }
  return z;
}

// Latents to images in [-1, 1]: identity plus clamp in pixel mode, decoder
// pass otherwise.
template <typename S>
Buffer<S> decode_latents(const Buffer<S>& z, const Config& cfg, const AutoEncoder<S>* ae) {
  if (cfg.pixel_latents()) {
    Buffer<S> img = z;
    for (int64_t i = 0; i < img.numel(); ++i)
      img[i] = std::min(S(1), std::max(S(-1), img[i]));
    return img;
  }
  if (ae == nullptr) throw StateError("decode_latents: conv latent mode needs the autoencoder");
  NoGradGuard ng;
  return ae->decode(Var<S>::leaf(z, false)).val();
}

}  // namespace boxgen

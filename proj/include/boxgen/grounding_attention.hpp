#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "boxgen/config.hpp"
#include "boxgen/core/nn_ops.hpp"
#include "boxgen/core/ops.hpp"
#include "boxgen/core/params.hpp"
#include "boxgen/grounding.hpp"

namespace boxgen {

// Gated attention bridge between visual tokens and grounding tokens. Two
// variants share the gate law out = v + tanh(gamma) * Attn(...):
//   cross: queries from visual tokens, keys/values from grounding tokens
//   gate:  grounding tokens projected into the visual width, concatenated,
//          run through self-attention, visual rows kept
// gamma starts at exactly zero, so a freshly built module is a no-op and the
// surrounding network's behavior is unchanged until training moves the gate.
template <typename S>
struct GatedAttention {
  enum class Variant { cross, gate };

  Variant variant = Variant::cross;
  int heads = 0;
  int d_attn = 0;
  int d_model = 0;

  Var<S> gamma;            // [1]
  Var<S> wq, wk, wv, wo;   // no biases
  Var<S> wg;               // gate variant only: grounding -> d_attn

  static Variant parse_variant(const std::string& s) {
    if (s == "grounding") return Variant::cross;
    if (s == "gate") return Variant::gate;
    throw ConfigError("attention_variant must be 'grounding' or 'gate', got '" + s + "'");
  }

  static GatedAttention build(ParamStore<S>& ps, const std::string& prefix, Variant variant,
                              int d_attn, int d_model, int heads, Rng& rng) {
    if (d_attn % heads != 0)
      throw ConfigError(prefix + ": head count " + std::to_string(heads) +
                        " must divide width " + std::to_string(d_attn));
    GatedAttention a;
    a.variant = variant;
    a.heads = heads;
    a.d_attn = d_attn;
    a.d_model = d_model;
    a.gamma = ps.create(prefix + ".gamma", init::zeros<S>({1}));
    const int d_kv_in = variant == Variant::cross ? d_model : d_attn;
    a.wq = ps.create(prefix + ".wq", init::scaled_normal<S>({d_attn, d_attn}, rng, d_attn));
    a.wk = ps.create(prefix + ".wk", init::scaled_normal<S>({d_kv_in, d_attn}, rng, d_kv_in));
    a.wv = ps.create(prefix + ".wv", init::scaled_normal<S>({d_kv_in, d_attn}, rng, d_kv_in));
    a.wo = ps.create(prefix + ".wo", init::scaled_normal<S>({d_attn, d_attn}, rng, d_attn));
    if (variant == Variant::gate)
      a.wg = ps.create(prefix + ".wg", init::scaled_normal<S>({d_model, d_attn}, rng, d_model));
    return a;
  }

  static GatedAttention attach(const ParamStore<S>& ps, const std::string& prefix,
                               Variant variant, int d_attn, int d_model, int heads) {
    GatedAttention a;
    a.variant = variant;
    a.heads = heads;
    a.d_attn = d_attn;
    a.d_model = d_model;
    a.gamma = ps.get(prefix + ".gamma");
    a.wq = ps.get(prefix + ".wq");
    a.wk = ps.get(prefix + ".wk");
    a.wv = ps.get(prefix + ".wv");
    a.wo = ps.get(prefix + ".wo");
    if (variant == Variant::gate) a.wg = ps.get(prefix + ".wg");
    return a;
  }

  // v [B, M, d_attn]; grounding tokens [B, R, d_model] with {0,1} key mask
  // [B, R]. Samples whose mask is all zero pass through untouched.
  Var<S> forward(const Var<S>& v, const Var<S>& g_tokens, const Buffer<S>& g_mask,
                 Buffer<S>* probs_out = nullptr) const {
    const Shape& vs = v.shape();
    if (vs.size() != 3 || vs[2] != d_attn)
      throw ValidationError("gated attention: visual tokens must be [B,M," +
                            std::to_string(d_attn) + "]");
    const Shape& gs = g_tokens.shape();
    if (gs.size() != 3 || gs[2] != d_model || gs[0] != vs[0])
      throw ValidationError("gated attention: grounding tokens must be [B,R," +
                            std::to_string(d_model) + "]");
    if (g_mask.shape != Shape{gs[0], gs[1]})
      throw ValidationError("gated attention: mask shape mismatch");

    Var<S> att;  // [B, M, d_attn] before the output projection
    if (variant == Variant::cross) {
      Var<S> q = ops::matmul(v, wq);
      Var<S> k = ops::matmul(g_tokens, wk);
      Var<S> val = ops::matmul(g_tokens, wv);
      att = ops::scaled_dot_attention(q, k, val, heads, &g_mask, probs_out);
    } else {
      const int B = vs[0], M = vs[1], R = gs[1];
      Var<S> seq = ops::concat_tokens(v, ops::matmul(g_tokens, wg));
      Buffer<S> mask({B, M + R});
      for (int b = 0; b < B; ++b) {
        for (int t = 0; t < M; ++t) mask[static_cast<int64_t>(b) * (M + R) + t] = S(1);
        for (int r = 0; r < R; ++r)
          mask[static_cast<int64_t>(b) * (M + R) + M + r] = g_mask[static_cast<int64_t>(b) * R + r];
      }
      Var<S> q = ops::matmul(seq, wq);
      Var<S> k = ops::matmul(seq, wk);
      Var<S> val = ops::matmul(seq, wv);
      Var<S> full = ops::scaled_dot_attention(q, k, val, heads, &mask, probs_out);
      att = ops::slice_tokens(full, 0, M);
    }
    return ops::add(v, ops::scale_by(ops::matmul(att, wo), ops::tanh_op(gamma)));
  }
};

// Canonical, validated set of backbone stages where grounding attention is
// inserted. Order follows the forward pass: D1..D3 then U1..U3. Duplicates
// collapse; an empty plan is valid (caption-only conditioning).
inline std::vector<std::string> insertion_plan(const Config& c) {
  static const std::vector<std::string> kOrder = {"D1", "D2", "D3", "U1", "U2", "U3"};
  for (const auto& s : c.insertion_stages)
    if (std::find(kOrder.begin(), kOrder.end(), s) == kOrder.end())
      throw ConfigError("insertion_stages: unknown stage '" + s +
                        "' (valid: D1 D2 D3 U1 U2 U3)");
  std::vector<std::string> plan;
  for (const auto& stage : kOrder)
    if (std::find(c.insertion_stages.begin(), c.insertion_stages.end(), stage) !=
        c.insertion_stages.end())
      plan.push_back(stage);
  return plan;
}

}  // namespace boxgen

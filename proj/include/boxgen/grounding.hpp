#pragma once

#include <vector>

#include "boxgen/config.hpp"
#include "boxgen/core/nn_ops.hpp"
#include "boxgen/core/ops.hpp"
#include "boxgen/core/params.hpp"
#include "boxgen/data_synth.hpp"
#include "boxgen/geometry.hpp"
#include "boxgen/vocab.hpp"

namespace boxgen {

namespace detail {

// No box validation: callers that need the degenerate analytic cases (e.g.
// an all-zero box) go through here.
template <typename S>
Buffer<S> fourier_embed_unchecked(const Box& box, int n_freqs) {
  Buffer<S> out({4 * 2 * n_freqs});
  const double coords[4] = {box.x0, box.y0, box.x1, box.y1};
  int64_t i = 0;
  for (double c : coords)
    for (int k = 0; k < n_freqs; ++k) {
      const double f = std::ldexp(kPi, k);  // 2^k * pi
      out[i++] = static_cast<S>(std::sin(f * c));
      out[i++] = static_cast<S>(std::cos(f * c));
    }
  return out;
}

}  // namespace detail

// Sinusoid features of the four box coordinates at geometrically spaced
// frequencies 2^k*pi, laid out coordinate-major with (sin, cos) pairs per
// frequency. Every entry lies in [-1, 1].
template <typename S>
Buffer<S> fourier_embed(const Box& box, int n_freqs) {
  if (n_freqs < 1) throw ValidationError("fourier_embed: n_freqs must be >= 1");
  validate_box(box, "fourier_embed");
  return detail::fourier_embed_unchecked<S>(box, n_freqs);
}

// One scene's object tokens, zero-padded to fixed capacity. In token concat
// mode each object occupies two consecutive rows (category row, then box
// row), so capacity is 2 * n_max.
template <typename S>
struct GroundingSetT {
  Var<S> tokens;           // [capacity, d_model]; padding rows exactly zero
  std::vector<char> mask;  // 1 = real object row, 0 = padding
  int count = 0;           // number of objects (not rows)
};

// A batch of grounding sets stacked for attention: key padding is carried as
// a {0,1} mask with the same row layout as GroundingSetT.
template <typename S>
struct GroundingBatch {
  Var<S> tokens;  // [B, capacity, d_model]
  Buffer<S> mask;  // [B, capacity]
  std::vector<int> counts;
};

// Turns per-object (category, box) annotations into fused conditioning
// tokens: a learned category embedding and a fourier box embedding run
// through a two-layer MLP.
template <typename S>
struct GroundingEncoder {
  int n_freqs = 0;
  int d_cat = 0;
  int d_model = 0;
  int n_max = 0;
  bool token_mode = false;

  Var<S> cat_table;  // [n_categories, d_cat]
  Var<S> fuse_w1, fuse_b1, fuse_w2, fuse_b2;

  int rows_per_object() const { return token_mode ? 2 : 1; }
  int capacity() const { return n_max * rows_per_object(); }
  int d_fourier() const { return 8 * n_freqs; }

  static GroundingEncoder build(ParamStore<S>& ps, const Config& c, Rng& rng) {
    GroundingEncoder e;
    e.n_freqs = c.n_freqs;
    e.d_cat = c.d_cat;
    e.d_model = c.d_model;
    e.n_max = c.n_max;
    e.token_mode = c.grounding_concat_mode == "token";
    // In token mode the MLP sees category and box rows through the same
    // weights, so its input width is d_cat (validated equal to d_fourier).
    const int d_in = e.token_mode ? c.d_cat : c.d_cat + e.d_fourier();
    const int d_h = c.d_grounding_hidden;
    e.cat_table = ps.create("grounding.cat_table",
                            init::normal<S>({vocab::kNumCategories, c.d_cat}, rng, 0.02));
    e.fuse_w1 = ps.create("grounding.fuse.w1", init::scaled_normal<S>({d_in, d_h}, rng, d_in));
    e.fuse_b1 = ps.create("grounding.fuse.b1", init::zeros<S>({d_h}));
    e.fuse_w2 = ps.create("grounding.fuse.w2", init::scaled_normal<S>({d_h, c.d_model}, rng, d_h));
    e.fuse_b2 = ps.create("grounding.fuse.b2", init::zeros<S>({c.d_model}));
    return e;
  }

  // Rebind parameter handles after a checkpoint load replaced store contents.
  static GroundingEncoder attach(const ParamStore<S>& ps, const Config& c) {
    GroundingEncoder e;
    e.n_freqs = c.n_freqs;
    e.d_cat = c.d_cat;
    e.d_model = c.d_model;
    e.n_max = c.n_max;
    e.token_mode = c.grounding_concat_mode == "token";
    e.cat_table = ps.get("grounding.cat_table");
    e.fuse_w1 = ps.get("grounding.fuse.w1");
    e.fuse_b1 = ps.get("grounding.fuse.b1");
    e.fuse_w2 = ps.get("grounding.fuse.w2");
    e.fuse_b2 = ps.get("grounding.fuse.b2");
    return e;
  }

  Var<S> encode_category(int category_id) const {
    return ops::embedding(cat_table, std::vector<int>{category_id});  // validates the id
  }

  // cat_rows [N, d_cat], box_rows [N, d_fourier] -> fused tokens.
  // Feature mode concatenates per object and yields [N, d_model]; token mode
  // runs the shared MLP over interleaved (category, box) rows -> [2N, d_model].
  Var<S> fuse(const Var<S>& cat_rows, const Var<S>& box_rows) const {
    if (cat_rows.shape()[0] != box_rows.shape()[0])
      throw ValidationError("fuse: row count mismatch between category and box embeddings");
    Var<S> x;
    if (token_mode) {
      const int64_t n = cat_rows.shape()[0];
      std::vector<int64_t> interleave(2 * n);
      for (int64_t i = 0; i < n; ++i) {
        interleave[2 * i] = i;
        interleave[2 * i + 1] = n + i;
      }
      x = ops::select_rows(ops::concat_rows(cat_rows, box_rows), std::move(interleave));
    } else {
      x = ops::concat_cols(cat_rows, box_rows);
    }
    Var<S> h = ops::relu(ops::linear(x, fuse_w1, fuse_b1));
    return ops::linear(h, fuse_w2, fuse_b2);
  }

  // Fused rows for one scene without padding: [count * rows_per_object, d_model].
  Var<S> encode_rows(const std::vector<ObjectSpec>& objects) const {
    const int n = static_cast<int>(objects.size());
    if (n > n_max)
      throw CapacityError("grounding set capacity n_max=" + std::to_string(n_max) +
                          " exceeded: got " + std::to_string(n) + " objects");
    std::vector<int> ids(n);
    Buffer<S> four({n, d_fourier()});
    for (int i = 0; i < n; ++i) {
      ids[i] = objects[i].category;
      auto f = fourier_embed<S>(objects[i].box, n_freqs);
      std::copy_n(f.data(), f.numel(), four.data() + static_cast<int64_t>(i) * d_fourier());
    }
    Var<S> cat_rows = ops::embedding(cat_table, ids);
    Var<S> box_rows = Var<S>::leaf(std::move(four), false);
    return fuse(cat_rows, box_rows);
  }

  GroundingSetT<S> encode(const std::vector<ObjectSpec>& objects) const {
    GroundingSetT<S> g;
    g.count = static_cast<int>(objects.size());
    const int used = g.count * rows_per_object();
    g.mask.assign(capacity(), 0);
    std::fill_n(g.mask.begin(), used, 1);
    if (g.count == 0) {
      g.tokens = Var<S>::leaf(init::zeros<S>({capacity(), d_model}), false);
      return g;
    }
    Var<S> rows = encode_rows(objects);
    if (used < capacity()) {
      Var<S> pad = Var<S>::leaf(init::zeros<S>({capacity() - used, d_model}), false);
      rows = ops::concat_rows(rows, pad);
    }
    g.tokens = rows;
    return g;
  }

  GroundingBatch<S> encode_batch(const std::vector<std::vector<ObjectSpec>>& scenes) const {
    const int b = static_cast<int>(scenes.size());
    if (b == 0) throw ValidationError("encode_batch: empty batch");
    std::vector<Var<S>> per_sample;
    GroundingBatch<S> out;
    out.mask = Buffer<S>({b, capacity()});
    for (int i = 0; i < b; ++i) {
      const int n = static_cast<int>(scenes[i].size());
      if (n > n_max)
        throw CapacityError("grounding set capacity n_max=" + std::to_string(n_max) +
                            " exceeded: got " + std::to_string(n) + " objects");
      per_sample.push_back(n == 0 ? Var<S>::leaf(init::zeros<S>({0, d_model}), false)
                                  : encode_rows(scenes[i]));
      out.counts.push_back(n);
      for (int r = 0; r < capacity(); ++r)
        out.mask[static_cast<int64_t>(i) * capacity() + r] =
            r < n * rows_per_object() ? S(1) : S(0);
    }
    out.tokens = ops::pad_stack_tokens(per_sample, capacity(), d_model);
    return out;
  }
};

}  // namespace boxgen

#include <doctest.h>

#include <cstdio>
#include <functional>

#include "boxgen/core/serialize.hpp"
#include "boxgen/grounding.hpp"
#include "fd_check.hpp"

using namespace boxgen;

TEST_CASE("fourier_embed: hand-computed values at n_freqs=2") {
  auto e = fourier_embed<double>(Box{0.25, 0.5, 0.75, 1.0}, 2);
  REQUIRE(e.shape == Shape{16});
  // frequencies pi and 2*pi over coordinates (0.25, 0.5, 0.75, 1.0),
  // (sin, cos) pairs: values checked against a separately computed table
  const double s = 0.7071067811865476;
  const double expect[16] = {s, s, 1, 0, 1, 0, 0, -1, s, -s, -1, 0, 0, -1, 0, 1};
  for (int i = 0; i < 16; ++i) CHECK(e[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("fourier_embed: degenerate all-zero box via unchecked path") {
  auto e = detail::fourier_embed_unchecked<double>(Box{0, 0, 0, 0}, 3);
  REQUIRE(e.numel() == 24);
  for (int i = 0; i < 24; i += 2) {
    CHECK(e[i] == 0.0);      // sin terms
    CHECK(e[i + 1] == 1.0);  // cos terms
  }
}

TEST_CASE("fourier_embed: rejects malformed boxes, bounds outputs") {
  CHECK_THROWS_AS(fourier_embed<float>(Box{0.5, 0.2, 0.5, 0.8}, 2), ValidationError);
  CHECK_THROWS_AS(fourier_embed<float>(Box{-0.1, 0.2, 0.5, 0.8}, 2), ValidationError);
  CHECK_THROWS_AS(fourier_embed<float>(Box{0.1, 0.2, 0.5, 1.2}, 2), ValidationError);

  Rng rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    double x0 = rng.uniform(0, 0.9), y0 = rng.uniform(0, 0.9);
    Box b{x0, y0, x0 + rng.uniform(0.01, 1.0 - x0), y0 + rng.uniform(0.01, 1.0 - y0)};
    auto e = fourier_embed<double>(b, 5);
    for (int64_t i = 0; i < e.numel(); ++i) {
      CHECK(e[i] >= -1.0);
      CHECK(e[i] <= 1.0);
    }
  }
}

TEST_CASE("fourier_embed: width scales as 8 per frequency") {
  CHECK(fourier_embed<float>(Box{0.1, 0.1, 0.9, 0.9}, 1).numel() == 8);
  CHECK(fourier_embed<float>(Box{0.1, 0.1, 0.9, 0.9}, 96).numel() == 768);
}

namespace {

Config grounding_cfg() {
  Config c;  // defaults: d_cat=64, n_freqs=8 (d_fourier=64), d_model=64, hidden=128
  return c;
}

}  // namespace

TEST_CASE("encode_category: table lookup semantics") {
  ParamStore<float> ps;
  Rng rng(3);
  auto enc = GroundingEncoder<float>::build(ps, grounding_cfg(), rng);
  auto a = enc.encode_category(5);
  auto b = enc.encode_category(5);
  REQUIRE(a.shape() == Shape{1, 64});
  bool same = true, differs = false;
  auto c = enc.encode_category(6);
  for (int i = 0; i < 64; ++i) {
    same = same && a.val()[i] == b.val()[i];
    differs = differs || a.val()[i] != c.val()[i];
  }
  CHECK(same);
  CHECK(differs);
  CHECK_THROWS_AS(enc.encode_category(vocab::kNumCategories), ValidationError);
  CHECK_THROWS_AS(enc.encode_category(-1), ValidationError);
}

TEST_CASE("fuse: identity-like weights copy the category embedding through") {
  ParamStore<float> ps;
  Rng rng(4);
  auto enc = GroundingEncoder<float>::build(ps, grounding_cfg(), rng);
  // hidden = input copy (128x128 identity), output = first 64 hidden entries
  enc.fuse_w1.mutable_val().fill(0);
  for (int i = 0; i < 128; ++i) enc.fuse_w1.mutable_val()[i * 128 + i] = 1.0f;
  enc.fuse_w2.mutable_val().fill(0);
  for (int i = 0; i < 64; ++i) enc.fuse_w2.mutable_val()[i * 64 + i] = 1.0f;
  enc.fuse_b1.mutable_val().fill(0);
  enc.fuse_b2.mutable_val().fill(0);

  Buffer<float> u({1, 64}), v({1, 64});
  Rng r2(5);
  for (int i = 0; i < 64; ++i) {
    u[i] = static_cast<float>(r2.uniform(0.0, 1.0));  // nonnegative so relu passes through
    v[i] = static_cast<float>(r2.uniform(0.0, 1.0));
  }
  auto out = enc.fuse(Var<float>::leaf(u, false), Var<float>::leaf(v, false));
  REQUIRE(out.shape() == Shape{1, 64});
  for (int i = 0; i < 64; ++i) CHECK(out.val()[i] == u[i]);
}

TEST_CASE("fuse and category table gradients match finite differences") {
  ParamStore<double> ps;
  Rng rng(11);
  Config c = grounding_cfg();
  auto enc = GroundingEncoder<double>::build(ps, c, rng);
  // keep preactivations away from the relu kink
  for (int64_t i = 0; i < enc.fuse_b1.numel(); ++i) enc.fuse_b1.mutable_val()[i] = 0.05;

  std::vector<ObjectSpec> objs = {{2, Box{0.1, 0.2, 0.5, 0.6}}, {17, Box{0.4, 0.4, 0.9, 0.8}}};
  std::vector<fd::VarD> leaves = {enc.cat_table, enc.fuse_w1, enc.fuse_b1, enc.fuse_w2,
                                  enc.fuse_b2};
  auto f = [&](std::vector<fd::VarD>&) { return ops::sum_all(enc.encode_rows(objs)); };
  CHECK(fd::fd_max_rel_err(leaves, f) < fd::kTol);
}

TEST_CASE("encode: padding contract and capacity error") {
  ParamStore<float> ps;
  Rng rng(6);
  Config c = grounding_cfg();
  c.n_obj_max = 2;
  c.n_max = 4;
  auto enc = GroundingEncoder<float>::build(ps, c, rng);

  std::vector<ObjectSpec> objs = {{0, Box{0.1, 0.1, 0.4, 0.4}}, {7, Box{0.5, 0.5, 0.9, 0.9}}};
  auto g = enc.encode(objs);
  CHECK(g.count == 2);
  REQUIRE(g.tokens.shape() == Shape{4, 64});
  CHECK(g.mask == std::vector<char>{1, 1, 0, 0});
  bool row0_nonzero = false, row1_nonzero = false;
  for (int j = 0; j < 64; ++j) {
    row0_nonzero = row0_nonzero || g.tokens.val()[j] != 0.0f;
    row1_nonzero = row1_nonzero || g.tokens.val()[64 + j] != 0.0f;
    CHECK(g.tokens.val()[128 + j] == 0.0f);
    CHECK(g.tokens.val()[192 + j] == 0.0f);
  }
  CHECK(row0_nonzero);
  CHECK(row1_nonzero);

  auto empty = enc.encode({});
  CHECK(empty.count == 0);
  CHECK(empty.mask == std::vector<char>{0, 0, 0, 0});
  for (int64_t i = 0; i < empty.tokens.numel(); ++i) CHECK(empty.tokens.val()[i] == 0.0f);

  std::vector<ObjectSpec> five(5, ObjectSpec{0, Box{0.1, 0.1, 0.4, 0.4}});
  try {
    enc.encode(five);
    FAIL("expected CapacityError");
  } catch (const CapacityError& e) {
    CHECK(std::string(e.what()).find("4") != std::string::npos);
  }
}

TEST_CASE("encode: permuting objects permutes token rows identically") {
  ParamStore<float> ps;
  Rng rng(7);
  auto enc = GroundingEncoder<float>::build(ps, grounding_cfg(), rng);
  std::vector<ObjectSpec> objs = {{1, Box{0.1, 0.1, 0.4, 0.4}},
                                  {8, Box{0.5, 0.5, 0.9, 0.9}},
                                  {15, Box{0.2, 0.6, 0.45, 0.85}}};
  auto g = enc.encode(objs);
  std::vector<ObjectSpec> perm = {objs[2], objs[0], objs[1]};
  auto gp = enc.encode(perm);
  const int map[3] = {2, 0, 1};  // gp row i corresponds to g row map[i]
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 64; ++j)
      CHECK(gp.tokens.val()[i * 64 + j] == g.tokens.val()[map[i] * 64 + j]);
}

TEST_CASE("token concat mode: two rows per object through a shared MLP") {
  ParamStore<float> ps;
  Rng rng(8);
  Config c = grounding_cfg();
  c.grounding_concat_mode = "token";
  c.n_obj_max = 2;
  c.n_max = 4;
  auto enc = GroundingEncoder<float>::build(ps, c, rng);
  CHECK(enc.capacity() == 8);

  std::vector<ObjectSpec> objs = {{3, Box{0.1, 0.1, 0.4, 0.4}}, {9, Box{0.5, 0.5, 0.9, 0.9}}};
  auto g = enc.encode(objs);
  CHECK(g.count == 2);
  REQUIRE(g.tokens.shape() == Shape{8, 64});
  CHECK(g.mask == std::vector<char>{1, 1, 1, 1, 0, 0, 0, 0});
  for (int r = 4; r < 8; ++r)
    for (int j = 0; j < 64; ++j) CHECK(g.tokens.val()[r * 64 + j] == 0.0f);

  // prefix stability: encoding only the first object reproduces rows 0-1
  // (to the last few bits: the matmul kernel may block differently per size)
  auto g1 = enc.encode({objs[0]});
  for (int i = 0; i < 2 * 64; ++i)
    CHECK(g1.tokens.val()[i] == doctest::Approx(g.tokens.val()[i]).epsilon(1e-6));

  // gradients through the interleaved path
  ParamStore<double> psd;
  Rng rngd(12);
  auto encd = GroundingEncoder<double>::build(psd, c, rngd);
  for (int64_t i = 0; i < encd.fuse_b1.numel(); ++i) encd.fuse_b1.mutable_val()[i] = 0.05;
  std::vector<fd::VarD> leaves = {encd.cat_table, encd.fuse_w1, encd.fuse_w2};
  std::vector<ObjectSpec> od = {{2, Box{0.15, 0.2, 0.5, 0.6}}};
  auto f = [&](std::vector<fd::VarD>&) { return ops::sum_all(encd.encode_rows(od)); };
  CHECK(fd::fd_max_rel_err(leaves, f) < fd::kTol);
}

TEST_CASE("encode_batch: stacking, masks, per-sample prefixes") {
  ParamStore<float> ps;
  Rng rng(10);
  Config c = grounding_cfg();
  auto enc = GroundingEncoder<float>::build(ps, c, rng);
  std::vector<std::vector<ObjectSpec>> scenes = {
      {{1, Box{0.1, 0.1, 0.4, 0.4}}, {8, Box{0.5, 0.5, 0.9, 0.9}}},
      {},
      {{15, Box{0.2, 0.6, 0.45, 0.85}}}};
  auto gb = enc.encode_batch(scenes);
  REQUIRE(gb.tokens.shape() == Shape{3, 8, 64});
  CHECK(gb.counts == std::vector<int>{2, 0, 1});
  for (int r = 0; r < 8; ++r) {
    CHECK(gb.mask[r] == (r < 2 ? 1.0f : 0.0f));
    CHECK(gb.mask[8 + r] == 0.0f);
    CHECK(gb.mask[16 + r] == (r < 1 ? 1.0f : 0.0f));
  }
  // middle sample fully zero
  for (int i = 0; i < 8 * 64; ++i) CHECK(gb.tokens.val()[8 * 64 + i] == 0.0f);
  // prefix rows match single-scene encodes
  auto g0 = enc.encode(scenes[0]);
  for (int i = 0; i < 2 * 64; ++i) CHECK(gb.tokens.val()[i] == g0.tokens.val()[i]);
}

TEST_CASE("full-width configuration keeps the shape law") {
  Config c;
  c.n_freqs = 96;  // 768-wide box embedding
  c.d_cat = 768;
  c.d_model = 768;
  c.n_max = 30;
  ParamStore<float> ps;
  Rng rng(13);
  auto enc = GroundingEncoder<float>::build(ps, c, rng);
  std::vector<ObjectSpec> objs;
  Rng orng(14);
  for (int i = 0; i < 30; ++i) {
    double x0 = orng.uniform(0, 0.5), y0 = orng.uniform(0, 0.5);
    objs.push_back({static_cast<int>(i % vocab::kNumCategories),
                    Box{x0, y0, x0 + 0.3, y0 + 0.3}});
  }
  auto g = enc.encode(objs);
  CHECK(g.tokens.shape() == Shape{30, 768});
  CHECK(g.count == 30);
}

TEST_CASE("fuse weights round-trip through a checkpoint bit-compatibly") {
  Config c = grounding_cfg();
  ParamStore<float> a;
  Rng ra(20);
  auto enc_a = GroundingEncoder<float>::build(a, c, ra);
  std::vector<ObjectSpec> objs = {{4, Box{0.2, 0.3, 0.6, 0.7}}, {11, Box{0.1, 0.5, 0.3, 0.9}}};
  auto out_a = enc_a.encode(objs);

  const std::string path = "/tmp/boxgen_grounding_ckpt.bin";
  save_checkpoint(path, a, {"test", c.to_json(), {}});

  ParamStore<float> b;
  Rng rb(999);  // different init, then overwritten by the load
  auto enc_b = GroundingEncoder<float>::build(b, c, rb);
  load_checkpoint(path, b);
  auto enc_b2 = GroundingEncoder<float>::attach(b, c);
  auto out_b = enc_b2.encode(objs);
  REQUIRE(out_b.tokens.shape() == out_a.tokens.shape());
  for (int64_t i = 0; i < out_a.tokens.numel(); ++i)
    CHECK(out_a.tokens.val()[i] == out_b.tokens.val()[i]);
  std::remove(path.c_str());
}

#include <doctest.h>

#include <cmath>
#include <functional>

#include "boxgen/denoiser.hpp"
#include "fd_check.hpp"

using namespace boxgen;

namespace {

Config tiny_cfg() {
  Config c;
  c.resolution = 16;
  c.unet_widths = {8, 16, 32};
  c.d_model = 16;
  c.d_cat = 16;
  c.n_freqs = 2;  // d_fourier 16
  c.d_grounding_hidden = 32;
  c.l_txt = 8;
  c.attn_heads = 4;
  c.t_emb_dim = 16;
  c.diffusion_t = 50;
  return c;
}

template <typename S>
Buffer<S> rnd(Shape s, Rng& r, double lo = -1, double hi = 1) {
  Buffer<S> b(std::move(s));
  for (int64_t i = 0; i < b.numel(); ++i) b[i] = static_cast<S>(r.uniform(lo, hi));
  return b;
}

std::vector<std::vector<int>> toy_captions(const Config& c, int B) {
  std::vector<std::vector<int>> ids;
  for (int b = 0; b < B; ++b)
    ids.push_back(vocab::tokenize_caption(b % 2 ? "a red circle on a plain background"
                                                : "a blue square on a gradient background",
                                          c.l_txt));
  return ids;
}

}  // namespace

TEST_CASE("schedule: construction, bounds, endpoint oracle") {
  auto s1 = make_schedule(1, 0.5, 0.5);
  REQUIRE(s1.T == 1);
  CHECK(s1.alpha_bars[0] == doctest::Approx(0.5).epsilon(1e-15));

  auto s = make_schedule(1000, 1e-4, 0.02);
  CHECK(s.betas.front() == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.betas.back() == doctest::Approx(0.02).epsilon(1e-12));
  // cumulative product at the far end, checked against a separately computed value
  CHECK(s.alpha_bars.back() == doctest::Approx(4.04e-5).epsilon(0.01));
  for (int t = 1; t < 1000; ++t) {
    CHECK(s.betas[t] >= s.betas[t - 1]);
    CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
  }
  CHECK(s.alpha_bars[0] == doctest::Approx(1.0).epsilon(1e-3));

  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.5, 1.0), ValidationError);
}

TEST_CASE("add_noise: exact limits and algebraic inversion") {
  auto sched = make_schedule(100, 1e-4, 0.02);
  Rng r(1);
  Buffer<float> z0 = rnd<float>({3, 2, 4, 4}, r);
  Buffer<float> zero(z0.shape);
  std::vector<int> t = {0, 50, 99};

  auto no_noise = add_noise(z0, t, zero, sched);
  for (int b = 0; b < 3; ++b) {
    const float c0 = static_cast<float>(std::sqrt(sched.alpha_bars[t[b]]));
    for (int i = 0; i < 32; ++i) CHECK(no_noise[b * 32 + i] == c0 * z0[b * 32 + i]);
  }

  Buffer<float> eps = rnd<float>({3, 2, 4, 4}, r);
  auto zt = add_noise(z0, t, eps, sched);
  for (int b = 0; b < 3; ++b) {
    const double ab = sched.alpha_bars[t[b]];
    for (int i = 0; i < 32; ++i) {
      const double rec = (zt[b * 32 + i] - std::sqrt(ab) * z0[b * 32 + i]) / std::sqrt(1 - ab);
      CHECK(rec == doctest::Approx(eps[b * 32 + i]).epsilon(1e-5));
    }
  }

  CHECK_THROWS_AS(add_noise(z0, {0, 1, 100}, eps, sched), ValidationError);
  CHECK_THROWS_AS(add_noise(z0, {0, 1}, eps, sched), ValidationError);
}

TEST_CASE("add_noise: variance-preserving marginal over 10k samples") {
  auto sched = make_schedule(100, 1e-4, 0.02);
  Rng r(7);
  const int n = 10000;
  Buffer<double> z0({n, 1}), eps({n, 1});
  for (int i = 0; i < n; ++i) {
    z0[i] = r.normal();
    eps[i] = r.normal();
  }
  std::vector<int> t(n, 60);
  auto zt = add_noise(z0, t, eps, sched);
  double m2 = 0;
  for (int i = 0; i < n; ++i) m2 += zt[i] * zt[i];
  m2 /= n;
  CHECK(m2 == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("generation loss: mse semantics") {
  Rng r(2);
  auto a = Var<float>::leaf(rnd<float>({2, 3, 4, 4}, r), false);
  CHECK(generation_loss(a, a).val()[0] == 0.0f);
  auto zero = Var<float>::leaf(Buffer<float>({2, 8}), false);
  auto ones = Var<float>::leaf(Buffer<float>({2, 8}, 1.0f), false);
  CHECK(generation_loss(zero, ones).val()[0] == doctest::Approx(1.0).epsilon(1e-7));
  // independent two-line reference on a random pair
  auto b = Var<float>::leaf(rnd<float>({2, 3, 4, 4}, r), false);
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a.val()[i] - b.val()[i];
    acc += d * d;
  }
  CHECK(generation_loss(a, b).val()[0] == doctest::Approx(acc / a.numel()).epsilon(1e-6));
}

TEST_CASE("denoiser: output shape law and feature tap pyramid") {
  Config c = tiny_cfg();
  ParamStore<float> ps;
  Rng rng(3);
  auto m = Denoiser<float>::build(ps, c, rng, false);
  Rng rd(4);
  auto z = Var<float>::leaf(rnd<float>({2, 3, 16, 16}, rd), false);
  auto cap = m.caption.forward(toy_captions(c, 2));
  REQUIRE(cap.shape() == Shape{2, 8, 16});
  auto out = m.forward(z, {3, 40}, cap, Denoiser<float>::Mode::text_only);
  CHECK(out.eps_hat.shape() == Shape{2, 3, 16, 16});
  REQUIRE(out.taps.size() == 3);
  CHECK(out.taps[0].shape() == Shape{2, 8, 16, 16});
  CHECK(out.taps[1].shape() == Shape{2, 16, 8, 8});
  CHECK(out.taps[2].shape() == Shape{2, 32, 4, 4});
}

TEST_CASE("denoiser: grounding modules at zero gate reproduce text-only bit-for-bit") {
  Config c = tiny_cfg();
  ParamStore<float> ps;
  Rng rng(5);
  auto m = Denoiser<float>::build(ps, c, rng, true);
  auto enc = GroundingEncoder<float>::build(ps, c, rng);
  std::vector<std::vector<ObjectSpec>> scenes = {
      {{2, Box{0.1, 0.1, 0.5, 0.5}}}, {{7, Box{0.4, 0.3, 0.8, 0.9}}, {12, Box{0.1, 0.6, 0.3, 0.9}}}};
  auto gb = enc.encode_batch(scenes);

  Rng rd(6);
  auto z = Var<float>::leaf(rnd<float>({2, 3, 16, 16}, rd), false);
  auto cap = m.caption.forward(toy_captions(c, 2));
  auto base = m.forward(z, {10, 20}, cap, Denoiser<float>::Mode::text_only);
  auto with_g = m.forward(z, {10, 20}, cap, Denoiser<float>::Mode::with_grounding, &gb);
  for (int64_t i = 0; i < base.eps_hat.numel(); ++i)
    CHECK(base.eps_hat.val()[i] == with_g.eps_hat.val()[i]);

  // open a gate: outputs must now differ
  ps.get("ga.D3.gamma").mutable_val()[0] = 1.0f;
  auto opened = m.forward(z, {10, 20}, cap, Denoiser<float>::Mode::with_grounding, &gb);
  double diff = 0;
  for (int64_t i = 0; i < base.eps_hat.numel(); ++i)
    diff += std::abs(opened.eps_hat.val()[i] - base.eps_hat.val()[i]);
  CHECK(diff > 0);
}

TEST_CASE("denoiser: grounding attention gradients live only in grounding mode") {
  Config c = tiny_cfg();
  ParamStore<float> ps;
  Rng rng(7);
  auto m = Denoiser<float>::build(ps, c, rng, true);
  auto enc = GroundingEncoder<float>::build(ps, c, rng);
  std::vector<std::vector<ObjectSpec>> scenes = {{{2, Box{0.1, 0.1, 0.5, 0.5}}}};
  auto gb = enc.encode_batch(scenes);
  Rng rd(8);
  auto z = Var<float>::leaf(rnd<float>({1, 3, 16, 16}, rd), false);
  auto cap = m.caption.forward(toy_captions(c, 1));

  ps.zero_grad();
  auto out1 = m.forward(z, {5}, cap, Denoiser<float>::Mode::text_only);
  ops::sum_all(ops::mul(out1.eps_hat, out1.eps_hat)).backward();
  auto gamma = ps.get("ga.D3.gamma");
  CHECK(!gamma.has_grad());

  ps.zero_grad();
  auto out2 = m.forward(z, {5}, cap, Denoiser<float>::Mode::with_grounding, &gb);
  ops::sum_all(ops::mul(out2.eps_hat, out2.eps_hat)).backward();
  CHECK(gamma.has_grad());
  CHECK(gamma.grad()[0] != 0.0f);
  CHECK(ps.get("ga.U1.wq").has_grad());
}

TEST_CASE("denoiser: batch permutation equivariance") {
  Config c = tiny_cfg();
  ParamStore<float> ps;
  Rng rng(9);
  auto m = Denoiser<float>::build(ps, c, rng, false);
  Rng rd(10);
  Buffer<float> z2 = rnd<float>({2, 3, 16, 16}, rd);
  Buffer<float> swapped = z2;
  const int64_t per = 3 * 16 * 16;
  for (int64_t i = 0; i < per; ++i) {
    swapped[i] = z2[per + i];
    swapped[per + i] = z2[i];
  }
  auto cap_a = m.caption.forward(toy_captions(c, 2));
  std::vector<std::vector<int>> rev_caps = toy_captions(c, 2);
  std::swap(rev_caps[0], rev_caps[1]);
  auto cap_b = m.caption.forward(rev_caps);
  auto oa = m.forward(Var<float>::leaf(z2, false), {4, 30}, cap_a,
                      Denoiser<float>::Mode::text_only);
  auto ob = m.forward(Var<float>::leaf(swapped, false), {30, 4}, cap_b,
                      Denoiser<float>::Mode::text_only);
  for (int64_t i = 0; i < per; ++i) {
    CHECK(oa.eps_hat.val()[i] == doctest::Approx(ob.eps_hat.val()[per + i]).epsilon(1e-5));
    CHECK(oa.eps_hat.val()[per + i] == doctest::Approx(ob.eps_hat.val()[i]).epsilon(1e-5));
  }
}

TEST_CASE("denoiser: gradient w.r.t. a 4x4 latent matches finite differences") {
  Config c = tiny_cfg();
  c.unet_widths = {8, 16, 16};
  c.d_grounding_hidden = 16;
  ParamStore<double> ps;
  Rng rng(11);
  auto m = Denoiser<double>::build(ps, c, rng, false);
  Rng rd(12);
  auto z = Var<double>::leaf(rnd<double>({1, 3, 4, 4}, rd), true);
  auto cap = m.caption.forward(toy_captions(c, 1));
  std::vector<fd::VarD> leaves = {z};
  auto f = [&](std::vector<fd::VarD>& v) {
    auto out = m.forward(v[0], {7}, cap, Denoiser<double>::Mode::text_only);
    return ops::sum_all(ops::mul(out.eps_hat, out.eps_hat));
  };
  CHECK(fd::fd_max_rel_err(leaves, f) < 1e-3);

  // and through a couple of weight tensors
  std::vector<fd::VarD> wleaves = {ps.get("unet.mid.res.c1.w"), ps.get("caption.sa.wq")};
  auto fw = [&](std::vector<fd::VarD>&) {
    auto cap2 = m.caption.forward(toy_captions(c, 1));
    auto out = m.forward(z, {7}, cap2, Denoiser<double>::Mode::text_only);
    return ops::sum_all(ops::mul(out.eps_hat, out.eps_hat));
  };
  CHECK(fd::fd_max_rel_err(wleaves, fw) < 1e-3);
}

TEST_CASE("denoiser: insertion at stages without built-in attention") {
  Config c = tiny_cfg();
  c.insertion_stages = {"D1", "U3"};
  ParamStore<float> ps;
  Rng rng(13);
  auto m = Denoiser<float>::build(ps, c, rng, true);
  CHECK(ps.has("ga.D1.gamma"));
  CHECK(ps.has("ga.U3.gamma"));
  auto enc = GroundingEncoder<float>::build(ps, c, rng);
  auto gb = enc.encode_batch({{{3, Box{0.2, 0.2, 0.7, 0.7}}}});
  Rng rd(14);
  auto z = Var<float>::leaf(rnd<float>({1, 3, 16, 16}, rd), false);
  auto cap = m.caption.forward(toy_captions(c, 1));
  auto base = m.forward(z, {9}, cap, Denoiser<float>::Mode::text_only);
  auto gated = m.forward(z, {9}, cap, Denoiser<float>::Mode::with_grounding, &gb);
  for (int64_t i = 0; i < base.eps_hat.numel(); ++i)
    CHECK(base.eps_hat.val()[i] == gated.eps_hat.val()[i]);
  ps.get("ga.D1.gamma").mutable_val()[0] = 0.8f;
  auto opened = m.forward(z, {9}, cap, Denoiser<float>::Mode::with_grounding, &gb);
  double diff = 0;
  for (int64_t i = 0; i < base.eps_hat.numel(); ++i)
    diff += std::abs(opened.eps_hat.val()[i] - base.eps_hat.val()[i]);
  CHECK(diff > 0);
}

TEST_CASE("sampling timesteps: full, strided, endpoints") {
  auto full = sampling_timesteps(5, 0);
  CHECK(full == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(sampling_timesteps(5, 10) == full);
  auto strided = sampling_timesteps(10, 4);
  CHECK(strided == std::vector<int>{0, 3, 6, 9});
  CHECK(sampling_timesteps(400, 2) == std::vector<int>{0, 399});
  CHECK(sampling_timesteps(7, 1) == std::vector<int>{6});
}

TEST_CASE("sampler: deterministic under a fixed seed, output in range") {
  Config c = tiny_cfg();
  ParamStore<float> ps;
  Rng rng(15);
  auto m = Denoiser<float>::build(ps, c, rng, false);
  auto sched = make_schedule(c.diffusion_t, c.beta_min, c.beta_max);
  auto cap = m.caption.forward(toy_captions(c, 2));

  Rng s1(77), s2(77), s3(78);
  auto za = sample_latents(m, cap, Denoiser<float>::Mode::text_only,
                           static_cast<const GroundingBatch<float>*>(nullptr), sched, 8, s1);
  auto zb = sample_latents(m, cap, Denoiser<float>::Mode::text_only,
                           static_cast<const GroundingBatch<float>*>(nullptr), sched, 8, s2);
  auto zc = sample_latents(m, cap, Denoiser<float>::Mode::text_only,
                           static_cast<const GroundingBatch<float>*>(nullptr), sched, 8, s3);
  REQUIRE(za.shape == Shape{2, 3, 16, 16});
  bool all_eq = true, differs = false;
  for (int64_t i = 0; i < za.numel(); ++i) {
    all_eq = all_eq && za[i] == zb[i];
    differs = differs || za[i] != zc[i];
  }
  CHECK(all_eq);
  CHECK(differs);

  auto img = decode_latents(za, c, static_cast<AutoEncoder<float>*>(nullptr));
  for (int64_t i = 0; i < img.numel(); ++i) {
    CHECK(img[i] >= -1.0f);
    CHECK(img[i] <= 1.0f);
  }
}

TEST_CASE("autoencoder: halved latent round trip and clamped decode") {
  Config c = tiny_cfg();
  c.latent_mode = "conv16";
  CHECK(c.c_lat() == 4);
  CHECK(c.h_lat() == 8);
  ParamStore<float> ps;
  Rng rng(16);
  auto ae = AutoEncoder<float>::build(ps, c, rng);
  Rng rd(17);
  auto x = Var<float>::leaf(rnd<float>({2, 3, 16, 16}, rd), false);
  auto z = ae.encode(x);
  CHECK(z.shape() == Shape{2, 4, 8, 8});
  auto y = ae.decode(z);
  CHECK(y.shape() == Shape{2, 3, 16, 16});
  for (int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.val()[i] >= -1.0f);
    CHECK(y.val()[i] <= 1.0f);
  }
  CHECK(ae.reconstruction_loss(x).val()[0] > 0.0f);

  // denoiser consumes the latent geometry
  ParamStore<float> ps2;
  Rng rng2(18);
  auto m = Denoiser<float>::build(ps2, c, rng2, false);
  auto cap = m.caption.forward(toy_captions(c, 2));
  auto out = m.forward(Var<float>::leaf(rnd<float>({2, 4, 8, 8}, rd), false), {1, 2}, cap,
                       Denoiser<float>::Mode::text_only);
  CHECK(out.eps_hat.shape() == Shape{2, 4, 8, 8});
}

TEST_CASE("timestep embedding distinguishes steps deterministically") {
  auto a = timestep_embedding<float>({5, 9}, 16);
  auto b = timestep_embedding<float>({5, 9}, 16);
  REQUIRE(a.shape == Shape{2, 16});
  bool same = true, differ = false;
  for (int i = 0; i < 16; ++i) {
    same = same && a[i] == b[i];
    differ = differ || a[i] != a[16 + i];
  }
  CHECK(same);
  CHECK(differ);
}

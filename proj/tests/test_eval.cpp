#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "boxgen/eval.hpp"

using namespace boxgen;

namespace {

// pixel-counting overlap oracle: boxes rasterized onto an N x N grid of cell
// centres, areas counted in integer cells
int64_t span_count(double a, double b, int n) {
  int lo = static_cast<int>(std::ceil(a * n - 0.5));
  int hi = static_cast<int>(std::floor(b * n - 0.5));
  lo = std::max(lo, 0);
  hi = std::min(hi, n - 1);
  return std::max(0, hi - lo + 1);
}

int64_t raster_cells(const Box& b, int n) {
  return span_count(b.x0, b.x1, n) * span_count(b.y0, b.y1, n);
}

double raster_iou(const Box& a, const Box& b, int n) {
  const double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  int64_t inter = 0;
  if (ix0 < ix1 && iy0 < iy1) inter = raster_cells(Box{ix0, iy0, ix1, iy1}, n);
  const int64_t uni = raster_cells(a, n) + raster_cells(b, n) - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Box random_box(Rng& r, double min_side = 0.2, double max_side = 0.5) {
  const double w = r.uniform(min_side, max_side), h = r.uniform(min_side, max_side);
  const double x = r.uniform(0, 1 - w), y = r.uniform(0, 1 - h);
  return Box{x, y, x + w, y + h};
}

GaussianStats diag_stats(const std::vector<double>& mean, const std::vector<double>& var) {
  GaussianStats g;
  g.mean = mean;
  const int d = static_cast<int>(mean.size());
  g.cov.assign(d * d, 0.0);
  for (int i = 0; i < d; ++i) g.cov[i * d + i] = var[i];
  return g;
}

}  // namespace

TEST_CASE("iou agrees with a pixel-rasterization oracle") {
  // the counting form equals the literal nested-loop rasterization
  Rng r0(1);
  for (int k = 0; k < 10; ++k) {
    const Box a = random_box(r0), b = random_box(r0);
    const int n = 200;
    int64_t inter = 0, only_a = 0, only_b = 0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double cx = (x + 0.5) / n, cy = (y + 0.5) / n;
        const bool in_a = cx >= a.x0 && cx <= a.x1 && cy >= a.y0 && cy <= a.y1;
        const bool in_b = cx >= b.x0 && cx <= b.x1 && cy >= b.y0 && cy <= b.y1;
        inter += in_a && in_b;
        only_a += in_a && !in_b;
        only_b += !in_a && in_b;
      }
    const double brute =
        inter + only_a + only_b > 0
            ? static_cast<double>(inter) / static_cast<double>(inter + only_a + only_b)
            : 0.0;
    CHECK(raster_iou(a, b, n) == doctest::Approx(brute).epsilon(1e-12));
  }

  // analytic iou tracks the high-resolution raster within 1e-3 on 1000 pairs
  Rng r(2);
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    const Box a = random_box(r), b = random_box(r);
    worst = std::max(worst, std::abs(compute_iou(a, b) - raster_iou(a, b, 10000)));
  }
  CHECK(worst < 1e-3);

  // the hand case: quarter overlap of two half-size squares
  CHECK(compute_iou(Box{0, 0, 0.5, 0.5}, Box{0.25, 0.25, 0.75, 0.75}) ==
        doctest::Approx(0.0625 / 0.4375).epsilon(1e-9));
  CHECK(raster_iou(Box{0, 0, 0.5, 0.5}, Box{0.25, 0.25, 0.75, 0.75}, 1000) ==
        doctest::Approx(0.0625 / 0.4375).epsilon(1e-3));
}

TEST_CASE("gaussian fit: three-point hand oracle") {
  Buffer<float> f({3, 2});
  f[0] = 0;
  f[1] = 0;
  f[2] = 1;
  f[3] = 0;
  f[4] = 0;
  f[5] = 2;
  auto g = fit_gaussian(f);
  CHECK(g.mean[0] == doctest::Approx(1.0 / 3).epsilon(1e-9));
  CHECK(g.mean[1] == doctest::Approx(2.0 / 3).epsilon(1e-9));
  CHECK(g.cov[0] == doctest::Approx(1.0 / 3).epsilon(1e-6));   // xx
  CHECK(g.cov[1] == doctest::Approx(-1.0 / 3).epsilon(1e-6));  // xy
  CHECK(g.cov[2] == doctest::Approx(-1.0 / 3).epsilon(1e-6));
  CHECK(g.cov[3] == doctest::Approx(4.0 / 3).epsilon(1e-6));
  CHECK_THROWS_AS(fit_gaussian(Buffer<float>({1, 4})), ValidationError);
}

TEST_CASE("frechet distance: closed forms, symmetry, identity") {
  // identical distributions
  Rng r(3);
  const int d = 6;
  Buffer<float> feats({40, d});
  for (int64_t i = 0; i < feats.numel(); ++i) feats[i] = static_cast<float>(r.normal());
  auto p = fit_gaussian(feats);
  CHECK(frechet_distance(p, p) < 1e-6);

  // 1-D gaussians N(0,1) vs N(2,1): (mu diff)^2 + (sigma diff)^2 = 4
  auto a = diag_stats({0.0}, {1.0});
  auto b = diag_stats({2.0}, {1.0});
  CHECK(frechet_distance(a, b) == doctest::Approx(4.0).epsilon(1e-9));

  // commuting diagonal case against the elementwise closed form
  std::vector<double> mp = {0.1, -0.4, 2.0, 0.0, 1.5};
  std::vector<double> mq = {0.0, 0.3, 1.0, -1.0, 1.5};
  std::vector<double> vp = {1.0, 2.0, 0.5, 3.0, 0.1};
  std::vector<double> vq = {2.0, 0.7, 0.5, 1.0, 0.4};
  double expect = 0;
  for (int i = 0; i < 5; ++i) {
    const double dm = mp[i] - mq[i], ds = std::sqrt(vp[i]) - std::sqrt(vq[i]);
    expect += dm * dm + ds * ds;
  }
  CHECK(frechet_distance(diag_stats(mp, vp), diag_stats(mq, vq)) ==
        doctest::Approx(expect).epsilon(1e-8));

  // symmetric in its arguments
  Buffer<float> f2({40, d});
  for (int64_t i = 0; i < f2.numel(); ++i) f2[i] = static_cast<float>(r.normal() * 0.5 + 0.2);
  auto q = fit_gaussian(f2);
  CHECK(frechet_distance(p, q) == doctest::Approx(frechet_distance(q, p)).epsilon(1e-6));

  CHECK_THROWS_AS(frechet_distance(a, p), ValidationError);
}

TEST_CASE("proxy fid: identity, symmetry, sample floor, corruption ordering") {
  Rng r(4);
  const int d = 8, n = 40;
  Buffer<float> base({n, d}), other({n, d});
  for (int64_t i = 0; i < base.numel(); ++i) {
    base[i] = static_cast<float>(r.normal());
    other[i] = static_cast<float>(r.normal());  // same distribution, fresh draw
  }
  CHECK(proxy_fid(base, base) < 1e-5);
  Buffer<float> shifted = base;
  for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.5f;
  CHECK(proxy_fid(base, shifted) ==
        doctest::Approx(proxy_fid(shifted, base)).epsilon(1e-6));
  CHECK_THROWS_AS(proxy_fid(Buffer<float>({d, d}), Buffer<float>({n, d})), ValidationError);

  // increasingly corrupted copies drift monotonically
  Rng rn(5);
  Buffer<float> c1 = base, c2 = base;
  for (int64_t i = 0; i < base.numel(); ++i) {
    const float e = static_cast<float>(rn.normal());
    c1[i] += 0.1f * e;
    c2[i] += 0.3f * e;
  }
  const double f0 = proxy_fid(base, base);
  const double f1 = proxy_fid(base, c1);
  const double f2 = proxy_fid(base, c2);
  CHECK(f0 < f1);
  CHECK(f1 < f2);

  // a genuinely different distribution sits beyond the same-distribution floor
  Buffer<float> noise({n, d});
  for (int64_t i = 0; i < noise.numel(); ++i) noise[i] = static_cast<float>(r.uniform(-3, 3));
  CHECK(proxy_fid(base, noise) > proxy_fid(base, other));
}

TEST_CASE("nms: suppression, category isolation, score ties") {
  std::vector<Detection> d = {
      {Box{0.1, 0.1, 0.4, 0.4}, 2, 0.9},
      {Box{0.12, 0.1, 0.42, 0.4}, 2, 0.8},   // heavy overlap, same category
      {Box{0.12, 0.1, 0.42, 0.4}, 5, 0.85},  // same box, other category
      {Box{0.6, 0.6, 0.9, 0.9}, 2, 0.7},     // disjoint
  };
  auto kept = nms(d, 0.5);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].score == 0.9);
  CHECK(kept[1].category == 5);
  CHECK(kept[2].score == 0.7);

  // equal scores: the earlier detection wins
  std::vector<Detection> tie = {{Box{0.1, 0.1, 0.4, 0.4}, 1, 0.5},
                                {Box{0.1, 0.1, 0.4, 0.4}, 1, 0.5}};
  auto kt = nms(tie, 0.5);
  REQUIRE(kt.size() == 1);
}

TEST_CASE("map: perfect detector, total miss, empty gt error") {
  std::vector<std::vector<ObjectSpec>> gt = {
      {{2, Box{0.1, 0.1, 0.4, 0.4}}, {7, Box{0.5, 0.5, 0.9, 0.9}}},
      {{2, Box{0.2, 0.3, 0.6, 0.7}}}};
  std::vector<std::vector<Detection>> perfect(2);
  for (size_t im = 0; im < gt.size(); ++im)
    for (const auto& o : gt[im]) perfect[im].push_back({o.box, o.category, 1.0});
  auto m = compute_map(perfect, gt);
  CHECK(m.map == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.ap50 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.ap75 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.per_threshold.size() == 10);

  std::vector<std::vector<Detection>> none(2);
  auto z = compute_map(none, gt);
  CHECK(z.map == 0.0);

  std::vector<std::vector<ObjectSpec>> empty(2);
  CHECK_THROWS_AS(compute_map(none, empty), ValidationError);
  CHECK_THROWS_AS(compute_map(none, gt, {}), ValidationError);
}

TEST_CASE("map: crafted three-detection curve matches the hand value") {
  // one category, two gt boxes; detections rank TP, FP, TP giving
  // AP = 0.5 * 1 + 0.5 * (2/3)
  std::vector<std::vector<ObjectSpec>> gt = {
      {{0, Box{0.1, 0.1, 0.3, 0.3}}, {0, Box{0.6, 0.6, 0.8, 0.8}}}};
  std::vector<std::vector<Detection>> dets = {{
      {Box{0.1, 0.1, 0.3, 0.3}, 0, 0.9},
      {Box{0.35, 0.35, 0.55, 0.55}, 0, 0.8},
      {Box{0.6, 0.6, 0.8, 0.8}, 0, 0.7},
  }};
  auto m = compute_map(dets, gt, {0.5});
  CHECK(m.ap50 == doctest::Approx(0.5 + 0.5 * (2.0 / 3.0)).epsilon(1e-12));

  auto pr = category_pr(dets, gt, 0, 0.5);
  REQUIRE(pr.precision.size() == 3);
  CHECK(pr.precision[0] == doctest::Approx(1.0));
  CHECK(pr.precision[1] == doctest::Approx(0.5));
  CHECK(pr.precision[2] == doctest::Approx(2.0 / 3));
  CHECK(pr.recall[2] == doctest::Approx(1.0));
}

TEST_CASE("map: prefix-max oracle on random single-category fixtures") {
  // independent AP formulation: for each achievable recall step k/n_gt, the
  // best precision among prefixes reaching at least k true positives
  Rng r(6);
  for (int fix = 0; fix < 20; ++fix) {
    const int n_img = 1 + static_cast<int>(r.uniform() * 3);
    std::vector<std::vector<ObjectSpec>> gt(n_img);
    std::vector<std::vector<Detection>> dets(n_img);
    int total_gt = 0;
    for (int im = 0; im < n_img; ++im) {
      const int ng = 1 + static_cast<int>(r.uniform() * 3);
      for (int j = 0; j < ng; ++j) {
        gt[im].push_back({0, random_box(r)});
        ++total_gt;
      }
      const int nd = static_cast<int>(r.uniform() * 5);
      for (int j = 0; j < nd; ++j) {
        // half the detections hover near a gt box, half are wild
        Box bx = random_box(r);
        if (j % 2 == 0) {
          const Box& g0 = gt[im][j % gt[im].size()].box;
          const double dx = r.uniform(-0.05, 0.05), dy = r.uniform(-0.05, 0.05);
          bx = Box{std::clamp(g0.x0 + dx, 0.0, 0.9), std::clamp(g0.y0 + dy, 0.0, 0.9),
                   std::clamp(g0.x1 + dx, 0.05, 1.0), std::clamp(g0.y1 + dy, 0.05, 1.0)};
        }
        dets[im].push_back({bx, 0, r.uniform()});
      }
    }
    // replay the matching to get the TP flag sequence in rank order
    struct Ref {
      double score;
      int img, idx;
    };
    std::vector<Ref> refs;
    for (int im = 0; im < n_img; ++im)
      for (size_t k = 0; k < dets[im].size(); ++k)
        refs.push_back({dets[im][k].score, im, static_cast<int>(k)});
    std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.img != b.img) return a.img < b.img;
      return a.idx < b.idx;
    });
    std::vector<std::vector<char>> used(n_img);
    for (int im = 0; im < n_img; ++im) used[im].assign(gt[im].size(), 0);
    std::vector<int> tp_at;  // cumulative
    int tp = 0;
    for (const auto& rf : refs) {
      double best = 0.5;
      int bj = -1;
      for (size_t j = 0; j < gt[rf.img].size(); ++j) {
        if (used[rf.img][j]) continue;
        const double v = compute_iou(dets[rf.img][rf.idx].box, gt[rf.img][j].box);
        if (v >= best && (bj < 0 || v > best)) {
          best = v;
          bj = static_cast<int>(j);
        }
      }
      if (bj >= 0) {
        used[rf.img][bj] = 1;
        ++tp;
      }
      tp_at.push_back(tp);
    }
    double oracle = 0;
    for (int k = 1; k <= total_gt; ++k) {
      double best_p = 0;
      for (size_t i = 0; i < tp_at.size(); ++i)
        if (tp_at[i] >= k) best_p = std::max(best_p, tp_at[i] / static_cast<double>(i + 1));
      oracle += best_p / total_gt;
    }
    auto m = compute_map(dets, gt, {0.5});
    CHECK(m.ap50 == doctest::Approx(oracle).epsilon(1e-12));
  }
}

TEST_CASE("map: invariant under image reordering") {
  Rng r(7);
  std::vector<std::vector<ObjectSpec>> gt(3);
  std::vector<std::vector<Detection>> dets(3);
  for (int im = 0; im < 3; ++im) {
    for (int j = 0; j < 2; ++j) gt[im].push_back({j, random_box(r)});
    for (int j = 0; j < 3; ++j) dets[im].push_back({random_box(r), j % 2, r.uniform()});
  }
  auto m1 = compute_map(dets, gt);
  std::swap(gt[0], gt[2]);
  std::swap(dets[0], dets[2]);
  auto m2 = compute_map(dets, gt);
  CHECK(m1.map == doctest::Approx(m2.map).epsilon(1e-12));
}

TEST_CASE("layout matching: greedy pairing, unmatched zeros, aggregation") {
  std::vector<ObjectSpec> req = {{2, Box{0.1, 0.1, 0.4, 0.4}}, {2, Box{0.5, 0.5, 0.8, 0.8}}};
  std::vector<Detection> dets = {
      {Box{0.48, 0.48, 0.78, 0.78}, 2, 0.9},  // strong match for request 1
      {Box{0.2, 0.2, 0.5, 0.5}, 2, 0.8},      // weaker match for request 0
      {Box{0.1, 0.1, 0.4, 0.4}, 9, 0.95},     // right place, wrong category
  };
  auto ious = match_layout(dets, req);
  REQUIRE(ious.size() == 2);
  CHECK(ious[0] == doctest::Approx(compute_iou(req[0].box, dets[1].box)).epsilon(1e-12));
  CHECK(ious[1] == doctest::Approx(compute_iou(req[1].box, dets[0].box)).epsilon(1e-12));

  // nothing detected: every requested object scores zero
  auto rep0 = layout_accuracy({{}, {}}, {{req[0]}, {req[1]}});
  CHECK(rep0.mean_iou == 0.0);
  CHECK(rep0.object_ious.size() == 2);

  auto rep = layout_accuracy({dets}, {req});
  CHECK(rep.mean_iou == doctest::Approx(0.5 * (ious[0] + ious[1])).epsilon(1e-12));
  CHECK(rep.per_category_iou.at(2) == doctest::Approx(rep.mean_iou).epsilon(1e-12));
  auto rep2 = layout_accuracy({dets}, {req});
  CHECK(rep.mean_iou == rep2.mean_iou);
  CHECK(rep.detection_map.map == rep2.detection_map.map);
}

TEST_CASE("decode: threshold, category, box recovery, cap") {
  Config c;
  c.resolution = 8;
  c.unet_stages = 3;
  c.unet_widths = {8, 16, 32};
  c.fpn_tap_stages = {"D3"};
  c.anchor_base_scale = 2.0;
  auto grid = make_anchors(c);
  REQUIRE(grid.level_sizes == std::vector<int>{2});
  REQUIRE(grid.count() == 12);
  const int K = vocab::kNumCategories + 1;

  Buffer<float> cls({1, 3 * K, 2, 2});
  Buffer<float> box({1, 12, 2, 2});
  // background everywhere
  for (int a = 0; a < 3; ++a)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) cls[((a * K + K - 1) * 2 + y) * 2 + x] = 10.0f;
  // one confident object at cell (0,1), anchor 1, category 7
  cls[(((1 * K) + K - 1) * 2 + 0) * 2 + 1] = -10.0f;
  cls[(((1 * K) + 7) * 2 + 0) * 2 + 1] = 10.0f;
  PerceptionOutput<float> out;
  out.cls = {Var<float>::leaf(cls, false)};
  out.box = {Var<float>::leaf(box, false)};
  auto dets = decode_detections(out, grid, c);
  REQUIRE(dets.size() == 1);
  REQUIRE(dets[0].size() == 1);
  const Detection& d = dets[0][0];
  CHECK(d.category == 7);
  CHECK(d.score > 0.99);
  const Box& anchor = grid.boxes[(0 * 2 + 1) * 3 + 1];  // zero deltas decode to the anchor
  CHECK(d.box.x0 == doctest::Approx(std::clamp(anchor.x0, 0.0, 1.0)).epsilon(1e-6));
  CHECK(d.box.y1 == doctest::Approx(std::clamp(anchor.y1, 0.0, 1.0)).epsilon(1e-6));

  // sub-threshold confidence yields nothing
  Buffer<float> weak({1, 3 * K, 2, 2});
  PerceptionOutput<float> quiet;
  quiet.cls = {Var<float>::leaf(weak, false)};  // uniform logits: p = 1/K each
  quiet.box = {Var<float>::leaf(box, false)};
  auto none = decode_detections(quiet, grid, c);
  CHECK(none[0].empty());

  // every anchor confident in a distinct-looking spot: the cap clips the list
  Config capc = c;
  capc.eval_max_detections = 4;
  capc.eval_nms_iou = 1.1;  // suppress nothing
  Buffer<float> loud({1, 3 * K, 2, 2});
  for (int a = 0; a < 3; ++a)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) loud[((a * K + 3) * 2 + y) * 2 + x] = 10.0f;
  PerceptionOutput<float> full;
  full.cls = {Var<float>::leaf(loud, false)};
  full.box = {Var<float>::leaf(box, false)};
  auto capped = decode_detections(full, grid, capc);
  CHECK(capped[0].size() == 4);
}

TEST_CASE("eval detector: geometry, features, determinism") {
  Config c;  // defaults: resolution 32, taps D2/D3, d_feat 64
  ParamStore<float> ps;
  Rng rng(8);
  auto det = EvalDetector<float>::build(ps, c, rng);
  CHECK(det.dcfg.unet_widths == std::vector<int>{16, 32, 64});

  Rng rd(9);
  Buffer<float> img({2, 3, 32, 32});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(rd.uniform(-1, 1));
  auto x = Var<float>::leaf(img, false);
  auto out = det.forward(x);
  const int K = vocab::kNumCategories + 1;
  REQUIRE(out.cls.size() == 2);
  CHECK(out.cls[0].shape() == Shape{2, 3 * K, 16, 16});
  CHECK(out.cls[1].shape() == Shape{2, 3 * K, 8, 8});
  CHECK(out.box[1].shape() == Shape{2, 12, 8, 8});

  auto f1 = det.features(x);
  auto f2 = det.features(x);
  REQUIRE(f1.shape == Shape{2, 64});
  for (int64_t i = 0; i < f1.numel(); ++i) CHECK(f1[i] == f2[i]);

  // feature rows differ across distinct images
  bool differs = false;
  for (int64_t i = 0; i < 64; ++i) differs = differs || f1[i] != f1[64 + i];
  CHECK(differs);

  // wrong input geometry surfaces as a validation error
  CHECK_THROWS_AS(det.forward(Var<float>::leaf(Buffer<float>({2, 3, 16, 16}), false)),
                  ValidationError);

  // anchors span both tapped strides
  auto grid = make_anchors(det.dcfg);
  CHECK(grid.level_sizes == std::vector<int>{16, 8});
}

TEST_CASE("plots: files written, bad geometry rejected") {
  PrCurve pr;
  for (int i = 0; i <= 10; ++i) {
    pr.recall.push_back(i / 10.0);
    pr.precision.push_back(1.0 - 0.05 * i);
  }
  const std::string dir = "eval_plot_scratch";
  std::filesystem::create_directories(dir);
  write_pr_svg(dir + "/pr.svg", pr, "pr check");
  std::vector<double> vals = {0.1, 0.5, 0.52, 0.9, 0.3};
  write_hist_svg(dir + "/hist.svg", vals, 8, 0.0, 1.0, "iou histogram");
  CHECK(std::filesystem::file_size(dir + "/pr.svg") > 200);
  CHECK(std::filesystem::file_size(dir + "/hist.svg") > 200);
  std::string head(64, '\0');
  {
    std::ifstream f(dir + "/pr.svg");
    f.read(head.data(), 64);
  }
  CHECK(head.find("<svg") != std::string::npos);
  CHECK_THROWS_AS(write_hist_svg(dir + "/bad.svg", vals, 0, 0.0, 1.0, "bad"), ValidationError);
  std::filesystem::remove_all(dir);
}

#pragma once

#include <map>
#include <string>
#include <vector>

#include "boxgen/config.hpp"
#include "boxgen/data_synth.hpp"
#include "boxgen/perception.hpp"

namespace boxgen {

struct Detection {
  Box box;
  int category = 0;
  double score = 0;
};

// Gaussian fit of a feature cloud, row-major covariance, unbiased normalizer.
struct GaussianStats {
  std::vector<double> mean;
  std::vector<double> cov;
  int dim() const { return static_cast<int>(mean.size()); }
};

GaussianStats fit_gaussian(const Buffer<float>& features);  // [N, d]

// Squared 2-Wasserstein distance between Gaussians; the cross term's matrix
// square root goes through eigendecomposition with negative eigenvalues
// clamped to zero.
double frechet_distance(const GaussianStats& p, const GaussianStats& q);

// Fits both feature sets and returns their Fréchet distance. Each side needs
// at least d+1 rows so the covariance can reach full rank.
double proxy_fid(const Buffer<float>& a, const Buffer<float>& b);

// Greedy same-category suppression, strongest detection first (score ties
// keep the earlier entry).
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

struct MapResult {
  double map = 0, ap50 = 0, ap75 = 0;
  std::vector<double> thresholds, per_threshold;
};

std::vector<double> coco_thresholds();  // 0.50, 0.55, ..., 0.95

// COCO-style average precision: per-category greedy matching by descending
// score, all-point precision envelope, categories averaged, then thresholds.
// Ordering ties break by image index, then detection index. Throws if no
// image has any ground truth.
MapResult compute_map(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<ObjectSpec>>& gt,
                      const std::vector<double>& thresholds = coco_thresholds());

struct PrCurve {
  std::vector<double> recall, precision;
};

// Cumulative precision/recall for one category at one overlap threshold.
PrCurve category_pr(const std::vector<std::vector<Detection>>& dets,
                    const std::vector<std::vector<ObjectSpec>>& gt, int category, double tau);

// Greedy IoU matching of detections to the requested layout within category;
// returns one IoU per requested object, zero when nothing matched.
std::vector<double> match_layout(const std::vector<Detection>& dets,
                                 const std::vector<ObjectSpec>& requested);

struct LayoutReport {
  double mean_iou = 0;
  std::map<int, double> per_category_iou;
  MapResult detection_map;
  std::vector<double> object_ious;  // pooled over images, request order
};

LayoutReport layout_accuracy(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<ObjectSpec>>& requested);

void write_pr_svg(const std::string& path, const PrCurve& curve, const std::string& title);
void write_hist_svg(const std::string& path, const std::vector<double>& values, int bins,
                    double lo, double hi, const std::string& title);

// Standalone detector: a three-stage conv extractor feeding the shared
// perception head, trained on real renders and then frozen as the measuring
// instrument. Its penultimate (deepest) feature map, mean-pooled, is the
// embedding used for the fidelity metric.
template <typename S>
struct EvalDetector {
  Config dcfg;  // geometry the head reads: extractor widths as stage widths
  Var<S> e1w, e1b, e2w, e2b, e3w, e3b;
  PerceptionHead<S> head;

  static Config derive_config(const Config& c) {
    Config d = c;
    d.latent_mode = "pixel";
    d.unet_stages = 3;
    d.unet_widths = {16, 32, c.d_feat};
    return d;
  }

  static EvalDetector build(ParamStore<S>& ps, const Config& c, Rng& rng) {
    EvalDetector e;
    e.dcfg = derive_config(c);
    const auto& w = e.dcfg.unet_widths;
    e.e1w = ps.create("det.e1.w", init::scaled_normal<S>({w[0], 3, 3, 3}, rng, 3 * 9));
    e.e1b = ps.create("det.e1.b", init::zeros<S>({w[0]}));
    e.e2w = ps.create("det.e2.w", init::scaled_normal<S>({w[1], w[0], 3, 3}, rng, w[0] * 9));
    e.e2b = ps.create("det.e2.b", init::zeros<S>({w[1]}));
    e.e3w = ps.create("det.e3.w", init::scaled_normal<S>({w[2], w[1], 3, 3}, rng, w[1] * 9));
    e.e3b = ps.create("det.e3.b", init::zeros<S>({w[2]}));
    e.head = PerceptionHead<S>::build(ps, e.dcfg, rng);
    return e;
  }

  static EvalDetector attach(ParamStore<S>& ps, const Config& c) {
    EvalDetector e;
    e.dcfg = derive_config(c);
    e.e1w = ps.get("det.e1.w");
    e.e1b = ps.get("det.e1.b");
    e.e2w = ps.get("det.e2.w");
    e.e2b = ps.get("det.e2.b");
    e.e3w = ps.get("det.e3.w");
    e.e3b = ps.get("det.e3.b");
    e.head = PerceptionHead<S>::attach(ps, e.dcfg);
    return e;
  }

  std::vector<Var<S>> taps(const Var<S>& img) const {
    const Shape& s = img.shape();
    if (s.size() != 4 || s[1] != 3)
      throw ValidationError("detector: expected [B,3,H,W] images");
    Var<S> a1 = ops::silu(ops::conv2d(img, e1w, e1b, 1, 1));
    Var<S> a2 = ops::silu(ops::conv2d(a1, e2w, e2b, 2, 1));
    Var<S> a3 = ops::silu(ops::conv2d(a2, e3w, e3b, 2, 1));
    return {a1, a2, a3};
  }

  PerceptionOutput<S> forward(const Var<S>& img) const { return head.forward(taps(img)); }

  // [B, d_feat]: spatial mean of the deepest extractor map
  Buffer<S> features(const Var<S>& img) const {
    NoGradGuard ng;
    Var<S> a3 = taps(img)[2];
    const Shape& s = a3.shape();
    Buffer<S> out({s[0], s[1]});
    const int64_t hw = s[2] * s[3];
    for (int64_t b = 0; b < s[0]; ++b)
      for (int64_t ch = 0; ch < s[1]; ++ch) {
        double acc = 0;
        for (int64_t i = 0; i < hw; ++i) acc += a3.val()[(b * s[1] + ch) * hw + i];
        out[b * s[1] + ch] = static_cast<S>(acc / hw);
      }
    return out;
  }
};

// Turns head outputs into thresholded, suppressed, capped per-image
// detections. Scores are softmax probabilities of the best object class.
template <typename S>
std::vector<std::vector<Detection>> decode_detections(const PerceptionOutput<S>& out,
                                                      const AnchorGrid& grid, const Config& c) {
  if (out.cls.empty()) throw ValidationError("decode_detections: empty output");
  const int64_t batch = out.cls[0].shape()[0];
  const int k_classes = static_cast<int>(out.cls[0].shape()[1]) / kAnchorsPerCell;
  std::vector<std::vector<Detection>> result(batch);
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<Detection> cands;
    int anchor = 0;
    for (size_t lvl = 0; lvl < out.cls.size(); ++lvl) {
      const auto& cv = out.cls[lvl].val();
      const auto& bv = out.box[lvl].val();
      const int64_t h = out.cls[lvl].shape()[2], w = out.cls[lvl].shape()[3];
      auto cls_at = [&](int64_t y, int64_t x, int ch) {
        return static_cast<double>(cv[((b * out.cls[lvl].shape()[1] + ch) * h + y) * w + x]);
      };
      auto box_at = [&](int64_t y, int64_t x, int ch) {
        return static_cast<double>(bv[((b * out.box[lvl].shape()[1] + ch) * h + y) * w + x]);
      };
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          for (int a = 0; a < kAnchorsPerCell; ++a, ++anchor) {
            double mx = cls_at(y, x, a * k_classes);
            for (int k = 1; k < k_classes; ++k) mx = std::max(mx, cls_at(y, x, a * k_classes + k));
            double denom = 0;
            for (int k = 0; k < k_classes; ++k)
              denom += std::exp(cls_at(y, x, a * k_classes + k) - mx);
            int best = -1;
            double best_p = 0;
            for (int k = 0; k < k_classes - 1; ++k) {
              const double p = std::exp(cls_at(y, x, a * k_classes + k) - mx) / denom;
              if (p > best_p) {
                best_p = p;
                best = k;
              }
            }
            if (best < 0 || best_p < c.eval_score_threshold) continue;
            std::array<double, 4> d = {box_at(y, x, a * 4 + 0), box_at(y, x, a * 4 + 1),
                                       box_at(y, x, a * 4 + 2), box_at(y, x, a * 4 + 3)};
            Box bx = decode_box(d, grid.boxes[anchor]);
            bx.x0 = std::clamp(bx.x0, 0.0, 1.0);
            bx.y0 = std::clamp(bx.y0, 0.0, 1.0);
            bx.x1 = std::clamp(bx.x1, 0.0, 1.0);
            bx.y1 = std::clamp(bx.y1, 0.0, 1.0);
            if (bx.x1 - bx.x0 < 1e-6 || bx.y1 - bx.y0 < 1e-6) continue;
            cands.push_back(Detection{bx, best, best_p});
          }
    }
    auto kept = nms(cands, c.eval_nms_iou);
    if (static_cast<int>(kept.size()) > c.eval_max_detections)
      kept.resize(c.eval_max_detections);
    result[b] = std::move(kept);
  }
  return result;
}

// Runs the frozen detector over generated images and scores them against the
// layouts they were asked to realize.
template <typename S>
LayoutReport evaluate_layout(const EvalDetector<S>& det, const std::vector<Buffer<S>>& images,
                             const std::vector<std::vector<ObjectSpec>>& requested,
                             const Config& c) {
  if (images.size() != requested.size())
    throw ValidationError("evaluate_layout: one requested layout per image");
  NoGradGuard ng;
  AnchorGrid grid = make_anchors(det.dcfg);
  std::vector<std::vector<Detection>> dets;
  for (const auto& img : images) {
    Buffer<S> one({1, img.shape[0], img.shape[1], img.shape[2]});
    std::copy(img.v.begin(), img.v.end(), one.v.begin());
    auto out = det.forward(Var<S>::leaf(std::move(one), false));
    dets.push_back(decode_detections(out, grid, c)[0]);
  }
  return layout_accuracy(dets, requested);
}

}  // namespace boxgen

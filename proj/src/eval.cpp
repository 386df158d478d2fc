#include "boxgen/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <Eigen/Dense>

namespace boxgen {

GaussianStats fit_gaussian(const Buffer<float>& features) {
  if (features.shape.size() != 2)
    throw ValidationError("fit_gaussian: expected [N,d] features, got " +
                          shape_str(features.shape));
  const int64_t n = features.shape[0], d = features.shape[1];
  if (n < 2) throw ValidationError("fit_gaussian: need at least 2 rows");
  GaussianStats g;
  g.mean.assign(d, 0.0);
  g.cov.assign(d * d, 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) g.mean[j] += features[i * d + j];
  for (auto& m : g.mean) m /= n;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t a = 0; a < d; ++a) {
      const double da = features[i * d + a] - g.mean[a];
      for (int64_t b = a; b < d; ++b)
        g.cov[a * d + b] += da * (features[i * d + b] - g.mean[b]);
    }
  for (int64_t a = 0; a < d; ++a)
    for (int64_t b = a; b < d; ++b) {
      g.cov[a * d + b] /= (n - 1);
      g.cov[b * d + a] = g.cov[a * d + b];
    }
  return g;
}

double frechet_distance(const GaussianStats& p, const GaussianStats& q) {
  const int d = p.dim();
  if (d != q.dim() || d == 0)
    throw ValidationError("frechet_distance: dimension mismatch (" + std::to_string(d) + " vs " +
                          std::to_string(q.dim()) + ")");
  using Mat = Eigen::MatrixXd;
  Mat sp = Eigen::Map<const Mat>(p.cov.data(), d, d);
  Mat sq = Eigen::Map<const Mat>(q.cov.data(), d, d);

  // sqrt(sq) via eigendecomposition, negatives clamped
  Eigen::SelfAdjointEigenSolver<Mat> esq(sq);
  Eigen::VectorXd ev = esq.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Mat rq = esq.eigenvectors() * ev.asDiagonal() * esq.eigenvectors().transpose();

  // Tr sqrt(sp*sq) = Tr sqrt(rq*sp*rq), and the latter is symmetric PSD
  Mat inner = rq * sp * rq;
  inner = 0.5 * (inner + inner.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Mat> esi(inner);
  const double tr_sqrt = esi.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  double mu2 = 0;
  for (int i = 0; i < d; ++i) {
    const double dm = p.mean[i] - q.mean[i];
    mu2 += dm * dm;
  }
  return std::max(0.0, mu2 + sp.trace() + sq.trace() - 2.0 * tr_sqrt);
}

double proxy_fid(const Buffer<float>& a, const Buffer<float>& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1])
    throw ValidationError("proxy_fid: feature sets must be [N,d] with matching d");
  const int64_t d = a.shape[1];
  if (a.shape[0] < d + 1 || b.shape[0] < d + 1)
    throw ValidationError("proxy_fid: need at least d+1 = " + std::to_string(d + 1) +
                          " samples per side, got " + std::to_string(a.shape[0]) + " and " +
                          std::to_string(b.shape[0]));
  return frechet_distance(fit_gaussian(a), fit_gaussian(b));
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::vector<int> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].score > dets[b].score; });
  std::vector<char> dead(dets.size(), 0);
  std::vector<Detection> kept;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const int i = order[oi];
    if (dead[i]) continue;
    kept.push_back(dets[i]);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (dead[j] || dets[j].category != dets[i].category) continue;
      if (compute_iou(dets[i].box, dets[j].box) >= iou_thresh) dead[j] = 1;
    }
  }
  return kept;
}

std::vector<double> coco_thresholds() {
  std::vector<double> out;
  for (int i = 0; i < 10; ++i) out.push_back(0.5 + 0.05 * i);
  return out;
}

namespace {

struct Cum {
  std::vector<double> precision, recall;
};

// cumulative precision/recall for one category at overlap threshold tau;
// detections ranked by score, ties by image then detection index
Cum accumulate_pr(const std::vector<std::vector<Detection>>& dets,
                  const std::vector<std::vector<ObjectSpec>>& gt, int cat, double tau,
                  int* n_gt_out) {
  struct Ref {
    double score;
    int img, idx;
  };
  std::vector<Ref> refs;
  int n_gt = 0;
  for (size_t im = 0; im < dets.size(); ++im) {
    for (size_t k = 0; k < dets[im].size(); ++k)
      if (dets[im][k].category == cat)
        refs.push_back({dets[im][k].score, static_cast<int>(im), static_cast<int>(k)});
    for (const auto& o : gt[im])
      if (o.category == cat) ++n_gt;
  }
  *n_gt_out = n_gt;
  std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.idx < b.idx;
  });
  std::vector<std::vector<char>> used(gt.size());
  for (size_t im = 0; im < gt.size(); ++im) used[im].assign(gt[im].size(), 0);

  Cum c;
  int tp = 0, fp = 0;
  for (const auto& r : refs) {
    const Detection& d = dets[r.img][r.idx];
    double best = tau;
    int best_j = -1;
    for (size_t j = 0; j < gt[r.img].size(); ++j) {
      if (used[r.img][j] || gt[r.img][j].category != cat) continue;
      const double v = compute_iou(d.box, gt[r.img][j].box);
      if (v >= best && (best_j < 0 || v > best)) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      used[r.img][best_j] = 1;
      ++tp;
    } else {
      ++fp;
    }
    c.precision.push_back(static_cast<double>(tp) / (tp + fp));
    c.recall.push_back(n_gt > 0 ? static_cast<double>(tp) / n_gt : 0.0);
  }
  return c;
}

// area under the monotone precision envelope
double average_precision(const Cum& c) {
  if (c.precision.empty()) return 0.0;
  const size_t n = c.precision.size();
  std::vector<double> env(c.precision);
  for (size_t i = n - 1; i-- > 0;) env[i] = std::max(env[i], env[i + 1]);
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < n; ++i) {
    ap += (c.recall[i] - prev_r) * env[i];
    prev_r = c.recall[i];
  }
  return ap;
}

}  // namespace

PrCurve category_pr(const std::vector<std::vector<Detection>>& dets,
                    const std::vector<std::vector<ObjectSpec>>& gt, int category, double tau) {
  int n_gt = 0;
  Cum c = accumulate_pr(dets, gt, category, tau, &n_gt);
  return PrCurve{c.recall, c.precision};
}

MapResult compute_map(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<ObjectSpec>>& gt,
                      const std::vector<double>& thresholds) {
  if (dets.size() != gt.size())
    throw ValidationError("compute_map: detection and gt image counts differ");
  std::set<int> cats;
  for (const auto& img : gt)
    for (const auto& o : img) cats.insert(o.category);
  if (cats.empty())
    throw ValidationError("compute_map: no ground-truth objects in any image");
  if (thresholds.empty()) throw ValidationError("compute_map: empty threshold list");

  MapResult r;
  r.thresholds = thresholds;
  for (double tau : thresholds) {
    double sum = 0;
    for (int cat : cats) {
      int n_gt = 0;
      Cum c = accumulate_pr(dets, gt, cat, tau, &n_gt);
      sum += average_precision(c);
    }
    const double ap = sum / static_cast<double>(cats.size());
    r.per_threshold.push_back(ap);
    if (std::abs(tau - 0.5) < 1e-9) r.ap50 = ap;
    if (std::abs(tau - 0.75) < 1e-9) r.ap75 = ap;
    r.map += ap;
  }
  r.map /= static_cast<double>(thresholds.size());
  return r;
}

std::vector<double> match_layout(const std::vector<Detection>& dets,
                                 const std::vector<ObjectSpec>& requested) {
  struct Pair {
    double v;
    int req, det;
  };
  std::vector<Pair> pairs;
  for (size_t i = 0; i < requested.size(); ++i)
    for (size_t j = 0; j < dets.size(); ++j) {
      if (dets[j].category != requested[i].category) continue;
      const double v = compute_iou(requested[i].box, dets[j].box);
      if (v > 0) pairs.push_back({v, static_cast<int>(i), static_cast<int>(j)});
    }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.v != b.v) return a.v > b.v;
    if (a.req != b.req) return a.req < b.req;
    return a.det < b.det;
  });
  std::vector<double> out(requested.size(), 0.0);
  std::vector<char> req_used(requested.size(), 0), det_used(dets.size(), 0);
  for (const auto& p : pairs) {
    if (req_used[p.req] || det_used[p.det]) continue;
    req_used[p.req] = 1;
    det_used[p.det] = 1;
    out[p.req] = p.v;
  }
  return out;
}

LayoutReport layout_accuracy(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<ObjectSpec>>& requested) {
  if (dets.size() != requested.size())
    throw ValidationError("layout_accuracy: one requested layout per image");
  LayoutReport rep;
  std::map<int, std::pair<double, int>> per_cat;
  for (size_t im = 0; im < requested.size(); ++im) {
    auto ious = match_layout(dets[im], requested[im]);
    for (size_t i = 0; i < ious.size(); ++i) {
      rep.object_ious.push_back(ious[i]);
      auto& pc = per_cat[requested[im][i].category];
      pc.first += ious[i];
      pc.second += 1;
    }
  }
  if (!rep.object_ious.empty()) {
    double s = 0;
    for (double v : rep.object_ious) s += v;
    rep.mean_iou = s / static_cast<double>(rep.object_ious.size());
  }
  for (const auto& [cat, acc] : per_cat) rep.per_category_iou[cat] = acc.first / acc.second;
  rep.detection_map = compute_map(dets, requested);
  return rep;
}

namespace {

void svg_open(std::ostringstream& s, const std::string& title) {
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='440' height='340' "
       "viewBox='0 0 440 340'>\n"
    << "<rect width='440' height='340' fill='white'/>\n"
    << "<text x='220' y='22' text-anchor='middle' font-size='14' "
       "font-family='sans-serif'>"
    << title << "</text>\n"
    << "<rect x='50' y='40' width='360' height='260' fill='none' stroke='black'/>\n";
}

void svg_write(const std::string& path, const std::string& body) {
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write plot: " + path);
  f << body;
  if (!f) throw RuntimeFailure("short write for plot: " + path);
}

}  // namespace

void write_pr_svg(const std::string& path, const PrCurve& curve, const std::string& title) {
  std::ostringstream s;
  svg_open(s, title);
  s << "<text x='230' y='325' text-anchor='middle' font-size='11' "
       "font-family='sans-serif'>recall</text>\n"
    << "<text x='18' y='170' text-anchor='middle' font-size='11' "
       "font-family='sans-serif' transform='rotate(-90 18 170)'>precision</text>\n";
  if (!curve.recall.empty()) {
    s << "<polyline fill='none' stroke='#1f6fb2' stroke-width='1.5' points='";
    for (size_t i = 0; i < curve.recall.size(); ++i) {
      const double x = 50 + 360 * curve.recall[i];
      const double y = 300 - 260 * curve.precision[i];
      s << std::fixed << std::setprecision(1) << x << "," << y << " ";
    }
    s << "'/>\n";
  }
  s << "</svg>\n";
  svg_write(path, s.str());
}

void write_hist_svg(const std::string& path, const std::vector<double>& values, int bins,
                    double lo, double hi, const std::string& title) {
  if (bins < 1 || hi <= lo) throw ValidationError("write_hist_svg: bad bin geometry");
  std::vector<int> count(bins, 0);
  for (double v : values) {
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    count[std::clamp(b, 0, bins - 1)] += 1;
  }
  const int peak = std::max(1, *std::max_element(count.begin(), count.end()));
  std::ostringstream s;
  svg_open(s, title);
  const double bw = 360.0 / bins;
  for (int b = 0; b < bins; ++b) {
    const double h = 260.0 * count[b] / peak;
    s << "<rect x='" << std::fixed << std::setprecision(1) << 50 + b * bw << "' y='" << 300 - h
      << "' width='" << bw - 1 << "' height='" << h << "' fill='#5a9e6f'/>\n";
  }
  s << "</svg>\n";
  svg_write(path, s.str());
}

}  // namespace boxgen

#pragma once

// Saliency evaluation: MAE, precision/recall/F-beta threshold sweep,
// structure measure and enhanced-alignment measure.

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgn {

/// Prediction in [0,1] and binary ground truth on the same grid, row-major.
struct EvalPair {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> prediction;
  std::vector<double> ground_truth;

  std::size_t size() const { return height * width; }

  void validate() const {
    const std::size_t n = height * width;
    if (n == 0 || prediction.size() != n || ground_truth.size() != n) {
      throw std::invalid_argument("eval pair: prediction/ground truth sizes do not match " + std::to_string(height) +
                                  "x" + std::to_string(width));
    }
    for (double g : ground_truth) {
      if (g != 0.0 && g != 1.0) throw std::invalid_argument("eval pair: ground truth must be binary");
    }
    for (double p : prediction) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("eval pair: prediction outside [0,1]");
    }
  }
};

/// Min-max normalizes a non-constant prediction to [0,1]; constant maps
/// are returned unchanged.
inline std::vector<double> normalize_prediction(std::vector<double> p) {
  if (p.empty()) return p;
  const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
  const double mn = *lo, mx = *hi;
  if (mx > mn) {
    for (auto& v : p) v = (v - mn) / (mx - mn);
  }
  return p;
}

/// 8-bit prediction and mask (mask binarized at 128) -> normalized pair.
inline EvalPair make_eval_pair(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& prediction,
                               const std::vector<std::uint8_t>& mask) {
  EvalPair pair;
  pair.height = height;
  pair.width = width;
  pair.prediction.resize(prediction.size());
  pair.ground_truth.resize(mask.size());
  for (std::size_t i = 0; i < prediction.size(); ++i) pair.prediction[i] = prediction[i] / 255.0;
  for (std::size_t i = 0; i < mask.size(); ++i) pair.ground_truth[i] = mask[i] >= 128 ? 1.0 : 0.0;
  pair.prediction = normalize_prediction(std::move(pair.prediction));
  pair.validate();
  return pair;
}

inline constexpr double kBetaSquared = 0.3;
inline constexpr std::size_t kDefaultThresholds = 256;

inline double mae(const EvalPair& pair) {
  pair.validate();
  double acc = 0;
  for (std::size_t i = 0; i < pair.size(); ++i) acc += std::abs(pair.prediction[i] - pair.ground_truth[i]);
  return acc / static_cast<double>(pair.size());
}

/// tau_t = t / (T - 1), t = 0..T-1.
inline std::vector<double> sweep_thresholds(std::size_t T) {
  if (T < 2) throw std::invalid_argument("threshold sweep: T must be >= 2");
  std::vector<double> t(T);
  for (std::size_t i = 0; i < T; ++i) t[i] = static_cast<double>(i) / static_cast<double>(T - 1);
  return t;
}

struct SweepCurves {
  std::vector<double> thresholds;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> fbeta;
  std::vector<std::size_t> true_positives;
  std::vector<std::size_t> predicted_positives;
};

/// Precision, recall and F-beta at each threshold, binarizing P >= tau.
/// Zero predicted positives: precision 1 if the mask is empty, else 0.
/// Empty mask: recall 1.
inline double fbeta_from(double precision, double recall) {
  const double den = kBetaSquared * precision + recall;
  return den > 0 ? (1 + kBetaSquared) * precision * recall / den : 0.0;
}

inline SweepCurves pr_and_fbeta_sweep(const EvalPair& pair, std::size_t T = kDefaultThresholds) {
  pair.validate();
  SweepCurves c;
  c.thresholds = sweep_thresholds(T);
  // level(p) = number of thresholds <= p; the pixel is positive at t < level.
  std::vector<std::size_t> fg_hist(T + 1, 0), all_hist(T + 1, 0);
  std::size_t gt_pos = 0;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const double p = pair.prediction[i];
    const auto level =
        static_cast<std::size_t>(std::upper_bound(c.thresholds.begin(), c.thresholds.end(), p) - c.thresholds.begin());
    ++all_hist[level];
    if (pair.ground_truth[i] == 1.0) {
      ++fg_hist[level];
      ++gt_pos;
    }
  }
  c.precision.resize(T);
  c.recall.resize(T);
  c.fbeta.resize(T);
  c.true_positives.resize(T);
  c.predicted_positives.resize(T);
  std::size_t tp = 0, pp = 0;
  for (std::size_t t = T; t-- > 0;) {
    tp += fg_hist[t + 1];
    pp += all_hist[t + 1];
    c.true_positives[t] = tp;
    c.predicted_positives[t] = pp;
    const double precision = pp == 0 ? (gt_pos == 0 ? 1.0 : 0.0) : static_cast<double>(tp) / static_cast<double>(pp);
    const double recall = gt_pos == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(gt_pos);
    c.precision[t] = precision;
    c.recall[t] = recall;
    c.fbeta[t] = fbeta_from(precision, recall);
  }
  return c;
}

namespace detail {

inline constexpr double kMetricEps = DBL_EPSILON;

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// 2x / (x^2 + 1 + sigma + eps) over the values selected by the mask
/// (sigma: sample standard deviation, 0 below two values).
inline double s_object(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const double x = mean_of(values);
  double sigma = 0;
  if (values.size() >= 2) {
    double ss = 0;
    for (double v : values) ss += (v - x) * (v - x);
    sigma = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return 2 * x / (x * x + 1 + sigma + kMetricEps);
}

/// SSIM-style similarity of one block; an empty block scores 0.
inline double block_ssim(const std::vector<double>& p, const std::vector<double>& g) {
  const std::size_t n = p.size();
  if (n == 0) return 0.0;
  const double x = mean_of(p), y = mean_of(g);
  const double denom = static_cast<double>(std::max<std::size_t>(n - 1, 1));
  double sx = 0, sy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += (p[i] - x) * (p[i] - x);
    sy += (g[i] - y) * (g[i] - y);
    sxy += (p[i] - x) * (g[i] - y);
  }
  sx /= denom;
  sy /= denom;
  sxy /= denom;
  const double alpha = 4 * x * y * sxy;
  const double beta = (x * x + y * y) * (sx + sy);
  if (alpha != 0) return alpha / (beta + kMetricEps);
  return beta == 0 ? 1.0 : 0.0;
}

}  // namespace detail

inline double s_measure(const EvalPair& pair, double alpha = 0.5) {
  pair.validate();
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("s_measure: alpha must lie in [0,1]");
  const std::size_t H = pair.height, W = pair.width, N = pair.size();
  const auto& P = pair.prediction;
  const auto& G = pair.ground_truth;
  double gt_mean = 0;
  for (double g : G) gt_mean += g;
  gt_mean /= static_cast<double>(N);
  if (gt_mean == 0) return 1 - detail::mean_of(P);
  if (gt_mean == 1) return detail::mean_of(P);

  // Object term.
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < N; ++i) {
    if (G[i] == 1.0) {
      fg.push_back(P[i]);
    } else {
      bg.push_back(1 - P[i]);
    }
  }
  const double object = gt_mean * detail::s_object(fg) + (1 - gt_mean) * detail::s_object(bg);

  // Region term: split at the mask centroid (rounded half-to-even, then +1).
  double sy = 0, sx = 0, count = 0;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      if (G[r * W + c] == 1.0) {
        sy += static_cast<double>(r);
        sx += static_cast<double>(c);
        count += 1;
      }
    }
  }
  const auto cx = static_cast<std::size_t>(std::nearbyint(sx / count)) + 1;
  const auto cy = static_cast<std::size_t>(std::nearbyint(sy / count)) + 1;
  const double area = static_cast<double>(N);
  const double w1 = static_cast<double>(cx * cy) / area;
  const double w2 = static_cast<double>(cy * (W - cx)) / area;
  const double w3 = static_cast<double>((H - cy) * cx) / area;
  const double w4 = 1 - w1 - w2 - w3;
  auto block = [&](std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    std::vector<double> p, g;
    for (std::size_t r = r0; r < r1; ++r) {
      for (std::size_t c = c0; c < c1; ++c) {
        p.push_back(P[r * W + c]);
        g.push_back(G[r * W + c]);
      }
    }
    return detail::block_ssim(p, g);
  };
  const double region = w1 * block(0, cy, 0, cx) + w2 * block(0, cy, cx, W) + w3 * block(cy, H, 0, cx) +
                        w4 * block(cy, H, cx, W);
  return std::max(0.0, alpha * object + (1 - alpha) * region);
}

/// Mean enhanced-alignment measure over T binarizations at the midpoint
/// thresholds (t + 0.5) / T. Empty mask: 1 - mean(P).
inline double e_measure(const EvalPair& pair, std::size_t T = kDefaultThresholds) {
  pair.validate();
  if (T < 1) throw std::invalid_argument("e_measure: T must be >= 1");
  const std::size_t N = pair.size();
  const auto& P = pair.prediction;
  const auto& G = pair.ground_truth;
  std::size_t gt_pos = 0;
  for (double g : G) gt_pos += g == 1.0 ? 1 : 0;
  if (gt_pos == 0) return 1 - detail::mean_of(P);

  std::vector<double> thr(T);
  for (std::size_t t = 0; t < T; ++t) thr[t] = (static_cast<double>(t) + 0.5) / static_cast<double>(T);
  // level(p) = number of thresholds <= p.
  std::vector<std::size_t> fg_hist(T + 1, 0), all_hist(T + 1, 0);
  for (std::size_t i = 0; i < N; ++i) {
    const auto level = static_cast<std::size_t>(std::upper_bound(thr.begin(), thr.end(), P[i]) - thr.begin());
    ++all_hist[level];
    if (G[i] == 1.0) ++fg_hist[level];
  }
  const double n = static_cast<double>(N);
  const double mu_g = static_cast<double>(gt_pos) / n;
  auto enhanced = [](double a, double b) {
    const double align = 2 * a * b / (a * a + b * b + detail::kMetricEps);
    return (align + 1) * (align + 1) / 4;
  };
  double total = 0;
  std::size_t tp = 0, pp = 0;
  for (std::size_t t = T; t-- > 0;) {
    tp += fg_hist[t + 1];
    pp += all_hist[t + 1];
    double sum;
    if (gt_pos == N) {
      sum = static_cast<double>(pp);
    } else {
      const double mu_p = static_cast<double>(pp) / n;
      const double c11 = static_cast<double>(tp);
      const double c10 = static_cast<double>(pp - tp);
      const double c01 = static_cast<double>(gt_pos - tp);
      const double c00 = n - c11 - c10 - c01;
      sum = c11 * enhanced(1 - mu_p, 1 - mu_g) + c10 * enhanced(1 - mu_p, -mu_g) + c01 * enhanced(-mu_p, 1 - mu_g) +
            c00 * enhanced(-mu_p, -mu_g);
    }
    total += sum / n;
  }
  return total / static_cast<double>(T);
}

/// Metrics of one image.
struct ImageMetrics {
  std::string name;
  double mae = 0;
  double fbeta_max = 0;
  double s_measure = 0;
  double e_measure = 0;
  std::vector<double> fbeta_curve;
  std::vector<double> precision_curve;
  std::vector<double> recall_curve;
};

inline ImageMetrics evaluate_pair(const EvalPair& pair, std::string name = {}, std::size_t T = kDefaultThresholds) {
  ImageMetrics m;
  m.name = std::move(name);
  m.mae = mae(pair);
  auto c = pr_and_fbeta_sweep(pair, T);
  m.fbeta_curve = std::move(c.fbeta);
  m.precision_curve = std::move(c.precision);
  m.recall_curve = std::move(c.recall);
  m.fbeta_max = *std::max_element(m.fbeta_curve.begin(), m.fbeta_curve.end());
  m.s_measure = s_measure(pair);
  m.e_measure = e_measure(pair, T);
  return m;
}

/// Per-image rows plus the aggregate. Aggregate curves are per-threshold
/// means; the aggregate F-beta max is the maximum of the mean curve.
struct SaliencyReport {
  std::size_t thresholds = kDefaultThresholds;
  std::vector<ImageMetrics> images;
  ImageMetrics aggregate;
  std::vector<std::string> missing;  // inputs without a counterpart
};

inline void finalize_report(SaliencyReport& r) {
  const std::size_t T = r.thresholds;
  ImageMetrics a;
  a.name = "mean";
  a.fbeta_curve.assign(T, 0.0);
  a.precision_curve.assign(T, 0.0);
  a.recall_curve.assign(T, 0.0);
  if (!r.images.empty()) {
    const double n = static_cast<double>(r.images.size());
    for (const auto& m : r.images) {
      a.mae += m.mae;
      a.s_measure += m.s_measure;
      a.e_measure += m.e_measure;
      for (std::size_t t = 0; t < T; ++t) {
        a.fbeta_curve[t] += m.fbeta_curve[t];
        a.precision_curve[t] += m.precision_curve[t];
        a.recall_curve[t] += m.recall_curve[t];
      }
    }
    a.mae /= n;
    a.s_measure /= n;
    a.e_measure /= n;
    for (std::size_t t = 0; t < T; ++t) {
      a.fbeta_curve[t] /= n;
      a.precision_curve[t] /= n;
      a.recall_curve[t] /= n;
    }
    a.fbeta_max = *std::max_element(a.fbeta_curve.begin(), a.fbeta_curve.end());
  }
  r.aggregate = std::move(a);
}

}  // namespace dgn

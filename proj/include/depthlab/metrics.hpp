#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "depthlab/geometry.hpp"

// Depth evaluation metrics with the with/without-initial-estimate region
// split, plus their table and CSV renderings.

namespace depthlab {

struct MetricsReport {
  std::string region;  // "whole", "with_initial", "without_initial"
  double rel = 0;      // mean(|pred - gt| / gt), meters over meters
  double rmse = 0;     // sqrt(mean((pred - gt)^2)), meters
  double delta1 = 0;   // fraction with max(pred/gt, gt/pred) < 1.25
  double delta2 = 0;   // ... < 1.25^2
  double delta3 = 0;   // ... < 1.25^3
  double pct_valid = 0;  // percent of gt-valid pixels the prediction covers,
                         // always over the whole gt domain
  int64_t n_gt = 0;    // gt-valid pixels inside the region
  int64_t n_eval = 0;  // of those, also valid in the prediction
  bool empty = false;  // n_eval == 0: the metric fields carry no information
};

// Fixed-shape pairwise summation: splits at floor(n/2) and adds linearly
// under 16 elements. The reduction tree depends only on the element count,
// so the result is bit-stable no matter how the terms were produced.
double pairwise_sum(const double* x, int64_t n);

// Evaluates pred against gt over the gt-valid domain, split three ways by
// the initial estimate's validity: whole, with_initial, without_initial.
// Prediction-invalid pixels are excluded from the averages and show up only
// in pct_valid. All maps must share one shape; threads parallelizes the
// per-pixel terms without affecting any digit of the result.
std::array<MetricsReport, 3> compute_metrics(const DepthMap& pred, const DepthMap& gt,
                                             const DepthMap& initial, int threads = 1);

// Aligned text table, one row per region. Empty regions print dashes.
std::string format_metrics_table(const std::array<MetricsReport, 3>& reports);

// CSV with the exact digits the table prints, plus the counters.
void write_metrics_csv(const std::string& path, const std::array<MetricsReport, 3>& reports);
std::array<MetricsReport, 3> read_metrics_csv(const std::string& path);

}  // namespace depthlab

#include "depthlab/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "depthlab/parallel.hpp"

namespace depthlab {

namespace {

constexpr double kDelta1 = 1.25;
constexpr double kDelta2 = 1.5625;
constexpr double kDelta3 = 1.953125;

const char* kRegionNames[3] = {"whole", "with_initial", "without_initial"};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string cell(const MetricsReport& r, double v) { return r.empty ? "-" : fmt(v); }

}  // namespace

double pairwise_sum(const double* x, int64_t n) {
  if (n <= 16) {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    return acc;
  }
  const int64_t half = n / 2;
  return pairwise_sum(x, half) + pairwise_sum(x + half, n - half);
}

std::array<MetricsReport, 3> compute_metrics(const DepthMap& pred, const DepthMap& gt,
                                             const DepthMap& initial, int threads) {
  if (gt.depth.shape.size() != 2) throw std::invalid_argument("metrics: gt must be {H, W}");
  for (const DepthMap* m : {&pred, &gt, &initial})
    if (!m->depth.same_shape(gt.depth) || !m->valid.same_shape(gt.depth))
      throw std::invalid_argument("metrics: all maps must share the gt shape");

  const int64_t n = gt.depth.size();
  // Per-pixel terms, written disjointly so the fill parallelizes without
  // touching any result digit.
  std::vector<double> rel_t(static_cast<size_t>(n), 0.0), sq_t(static_cast<size_t>(n), 0.0);
  std::vector<double> d1_t(static_cast<size_t>(n), 0.0), d2_t(static_cast<size_t>(n), 0.0),
      d3_t(static_cast<size_t>(n), 0.0);
  std::vector<int8_t> kind(static_cast<size_t>(n), 0);  // 0 off-domain, 1 with, 2 without
  std::vector<int8_t> covered(static_cast<size_t>(n), 0);

  parallel_for(n, threads, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      if (gt.valid[i] == 0.0) continue;
      kind[static_cast<size_t>(i)] = initial.valid[i] != 0.0 ? 1 : 2;
      if (pred.valid[i] == 0.0) continue;
      covered[static_cast<size_t>(i)] = 1;
      const double p = pred.depth[i], g = gt.depth[i];
      rel_t[static_cast<size_t>(i)] = std::abs(p - g) / g;
      sq_t[static_cast<size_t>(i)] = (p - g) * (p - g);
      const double ratio = std::fmax(p / g, g / p);
      d1_t[static_cast<size_t>(i)] = ratio < kDelta1 ? 1.0 : 0.0;
      d2_t[static_cast<size_t>(i)] = ratio < kDelta2 ? 1.0 : 0.0;
      d3_t[static_cast<size_t>(i)] = ratio < kDelta3 ? 1.0 : 0.0;
    }
  });

  int64_t n_gt_whole = 0, n_cov_whole = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (kind[static_cast<size_t>(i)] == 0) continue;
    ++n_gt_whole;
    n_cov_whole += covered[static_cast<size_t>(i)];
  }
  const double pct =
      n_gt_whole > 0 ? 100.0 * static_cast<double>(n_cov_whole) / static_cast<double>(n_gt_whole)
                     : 0.0;

  std::array<MetricsReport, 3> out;
  std::vector<double> rel_c, sq_c, d1_c, d2_c, d3_c;  // region-compacted, row-major
  for (int r = 0; r < 3; ++r) {
    MetricsReport& rep = out[static_cast<size_t>(r)];
    rep.region = kRegionNames[r];
    rep.pct_valid = pct;
    rel_c.clear(), sq_c.clear(), d1_c.clear(), d2_c.clear(), d3_c.clear();
    for (int64_t i = 0; i < n; ++i) {
      const int8_t k = kind[static_cast<size_t>(i)];
      if (k == 0 || (r == 1 && k != 1) || (r == 2 && k != 2)) continue;
      ++rep.n_gt;
      if (!covered[static_cast<size_t>(i)]) continue;
      rel_c.push_back(rel_t[static_cast<size_t>(i)]);
      sq_c.push_back(sq_t[static_cast<size_t>(i)]);
      d1_c.push_back(d1_t[static_cast<size_t>(i)]);
      d2_c.push_back(d2_t[static_cast<size_t>(i)]);
      d3_c.push_back(d3_t[static_cast<size_t>(i)]);
    }
    rep.n_eval = static_cast<int64_t>(rel_c.size());
    if (rep.n_eval == 0) {
      rep.empty = true;
      continue;
    }
    const double m = static_cast<double>(rep.n_eval);
    rep.rel = pairwise_sum(rel_c.data(), rep.n_eval) / m;
    rep.rmse = std::sqrt(pairwise_sum(sq_c.data(), rep.n_eval) / m);
    rep.delta1 = pairwise_sum(d1_c.data(), rep.n_eval) / m;
    rep.delta2 = pairwise_sum(d2_c.data(), rep.n_eval) / m;
    rep.delta3 = pairwise_sum(d3_c.data(), rep.n_eval) / m;
  }
  return out;
}

std::string format_metrics_table(const std::array<MetricsReport, 3>& reports) {
  const bool domain_ok = reports[0].n_gt > 0;
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof(line), "%-17s %11s %11s %11s %11s %11s %11s\n", "region", "Rel",
                "RMSE", "d<1.25", "d<1.25^2", "d<1.25^3", "%val");
  os << line;
  for (const MetricsReport& r : reports) {
    std::snprintf(line, sizeof(line), "%-17s %11s %11s %11s %11s %11s %11s\n", r.region.c_str(),
                  cell(r, r.rel).c_str(), cell(r, r.rmse).c_str(), cell(r, r.delta1).c_str(),
                  cell(r, r.delta2).c_str(), cell(r, r.delta3).c_str(),
                  domain_ok ? fmt(r.pct_valid).c_str() : "-");
    os << line;
  }
  return os.str();
}

void write_metrics_csv(const std::string& path, const std::array<MetricsReport, 3>& reports) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("metrics: cannot write " + path);
  out << "region,rel,rmse,delta1,delta2,delta3,pct_valid,n_gt,n_eval,empty\n";
  for (const MetricsReport& r : reports)
    out << r.region << ',' << fmt(r.rel) << ',' << fmt(r.rmse) << ',' << fmt(r.delta1) << ','
        << fmt(r.delta2) << ',' << fmt(r.delta3) << ',' << fmt(r.pct_valid) << ',' << r.n_gt << ','
        << r.n_eval << ',' << (r.empty ? 1 : 0) << '\n';
  if (!out) throw std::runtime_error("metrics: write failed for " + path);
}

std::array<MetricsReport, 3> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics: cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("region,", 0) != 0)
    throw std::runtime_error("metrics: bad CSV header in " + path);
  std::array<MetricsReport, 3> out;
  for (int r = 0; r < 3; ++r) {
    if (!std::getline(in, line)) throw std::runtime_error("metrics: truncated CSV " + path);
    std::istringstream row(line);
    MetricsReport& rep = out[static_cast<size_t>(r)];
    std::string field;
    auto next = [&]() {
      if (!std::getline(row, field, ',')) throw std::runtime_error("metrics: short CSV row");
      return field;
    };
    rep.region = next();
    rep.rel = std::stod(next());
    rep.rmse = std::stod(next());
    rep.delta1 = std::stod(next());
    rep.delta2 = std::stod(next());
    rep.delta3 = std::stod(next());
    rep.pct_valid = std::stod(next());
    rep.n_gt = std::stoll(next());
    rep.n_eval = std::stoll(next());
    rep.empty = std::stoi(next()) != 0;
  }
  return out;
}

}  // namespace depthlab

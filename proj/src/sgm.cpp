#include "depthlab/sgm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace depthlab {

namespace {

// Census transform: one bit per non-center window pixel, set when the
// neighbor is darker than the center. Window clamped at the border.
std::vector<uint64_t> census_codes(const Image& img, int window) {
  const int64_t h = img.rows(), w = img.cols();
  const int r = window / 2;
  std::vector<uint64_t> codes(static_cast<size_t>(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double center = img.at(y, x);
      uint64_t code = 0;
      for (int wy = -r; wy <= r; ++wy)
        for (int wx = -r; wx <= r; ++wx) {
          if (wx == 0 && wy == 0) continue;
          const int64_t sy = std::clamp<int64_t>(y + wy, 0, h - 1);
          const int64_t sx = std::clamp<int64_t>(x + wx, 0, w - 1);
          code = (code << 1) | (img.at(sy, sx) < center ? 1u : 0u);
        }
      codes[static_cast<size_t>(y * w + x)] = code;
    }
  return codes;
}

void check_cost_inputs(const Image& left, const Image& right, int d_max, int window) {
  if (left.shape.size() != 2 || !left.same_shape(right))
    throw std::invalid_argument("census_cost: images must be equal-size 2D");
  if (window < 3 || window > 7 || window % 2 == 0)
    throw std::invalid_argument("census_cost: window must be odd, 3..7");
  if (d_max < 0 || d_max >= left.cols())
    throw std::invalid_argument("census_cost: need 0 <= d_max < width");
}

CostVolume make_volume(int64_t w, int64_t h, int d_max, int32_t max_cost) {
  CostVolume v;
  v.width = w;
  v.height = h;
  v.d_max = d_max;
  v.max_cost = max_cost;
  v.costs.assign(static_cast<size_t>(w * h * (d_max + 1)), 0);
  return v;
}

// True when the cost more than one disparity away from best_d comes within
// uniqueness_ratio of the winner's cost. Ties count as ambiguous.
bool ambiguous(const CostVolume& v, int64_t x, int64_t y, int best_d, double ratio) {
  const int32_t best = v.at(x, y, best_d);
  int32_t second = std::numeric_limits<int32_t>::max();
  for (int d = 0; d <= v.d_max; ++d)
    if (std::abs(d - best_d) > 1) second = std::min(second, v.at(x, y, d));
  return second != std::numeric_limits<int32_t>::max() &&
         static_cast<double>(second) <= ratio * best;
}

// Winner-take-all with parabolic subpixel and the uniqueness test. The
// pre-aggregation volume, when given, must also single out the winner:
// path aggregation turns the max-cost padding of out-of-range disparities
// into a gradient toward d=0, so on textureless input the aggregated
// minimum looks unique even though the data says nothing. The left-right
// check happens afterwards, once both maps exist.
DisparityMap wta(const CostVolume& v, const CostVolume* raw, const SgmParams& params) {
  DisparityMap out;
  out.disp = Tensor::zeros({v.height, v.width});
  out.valid = Tensor::zeros({v.height, v.width});
  const int nd = v.d_max + 1;
  for (int64_t y = 0; y < v.height; ++y)
    for (int64_t x = 0; x < v.width; ++x) {
      int best_d = 0;
      int32_t best = v.at(x, y, 0);
      for (int d = 1; d < nd; ++d)
        if (v.at(x, y, d) < best) {
          best = v.at(x, y, d);
          best_d = d;
        }
      if (ambiguous(v, x, y, best_d, params.uniqueness_ratio)) continue;
      if (raw && ambiguous(*raw, x, y, best_d, params.uniqueness_ratio)) continue;

      double disp = best_d;
      if (best_d > 0 && best_d < v.d_max) {
        const double ca = v.at(x, y, best_d - 1);
        const double cb = best;
        const double cc = v.at(x, y, best_d + 1);
        const double denom = ca - 2 * cb + cc;
        if (denom > 0) disp += std::clamp((ca - cc) / (2 * denom), -0.5, 0.5);
      }
      out.disp.at(y, x) = disp;
      out.valid.at(y, x) = 1.0;
    }
  return out;
}

}  // namespace

void SgmParams::validate() const {
  if (!(p2 > p1 && p1 > 0)) throw std::invalid_argument("sgm: need p2 > p1 > 0");
  if (census_window < 3 || census_window > 7 || census_window % 2 == 0)
    throw std::invalid_argument("sgm: census_window must be odd, 3..7");
  if (paths != 4 && paths != 8) throw std::invalid_argument("sgm: paths must be 4 or 8");
  if (uniqueness_ratio < 1.0) throw std::invalid_argument("sgm: uniqueness_ratio must be >= 1");
  if (lr_max_diff < 0) throw std::invalid_argument("sgm: lr_max_diff must be >= 0");
}

CostVolume census_cost(const Image& left, const Image& right, int d_max, int census_window) {
  check_cost_inputs(left, right, d_max, census_window);
  const int64_t h = left.rows(), w = left.cols();
  const std::vector<uint64_t> cl = census_codes(left, census_window);
  const std::vector<uint64_t> cr = census_codes(right, census_window);
  const int32_t max_cost = census_window * census_window - 1;
  CostVolume v = make_volume(w, h, d_max, max_cost);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int d = 0; d <= d_max; ++d)
        v.at(x, y, d) = x - d >= 0
                            ? std::popcount(cl[y * w + x] ^ cr[y * w + x - d])
                            : max_cost;
  return v;
}

CostVolume census_cost_right(const Image& left, const Image& right, int d_max,
                             int census_window) {
  check_cost_inputs(left, right, d_max, census_window);
  const int64_t h = left.rows(), w = left.cols();
  const std::vector<uint64_t> cl = census_codes(left, census_window);
  const std::vector<uint64_t> cr = census_codes(right, census_window);
  const int32_t max_cost = census_window * census_window - 1;
  CostVolume v = make_volume(w, h, d_max, max_cost);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int d = 0; d <= d_max; ++d)
        v.at(x, y, d) = x + d < w
                            ? std::popcount(cr[y * w + x] ^ cl[y * w + x + d])
                            : max_cost;
  return v;
}

void aggregate_direction(const CostVolume& volume, int dx, int dy, int p1, int p2,
                         CostVolume& sum) {
  const int64_t w = volume.width, h = volume.height;
  const int nd = volume.d_max + 1;
  CostVolume path = make_volume(w, h, volume.d_max, volume.max_cost);

  const int64_t y0 = dy >= 0 ? 0 : h - 1, ys = dy >= 0 ? 1 : -1;
  const int64_t x0 = dx >= 0 ? 0 : w - 1, xs = dx >= 0 ? 1 : -1;
  for (int64_t y = y0; y >= 0 && y < h; y += ys)
    for (int64_t x = x0; x >= 0 && x < w; x += xs) {
      const int64_t px = x - dx, py = y - dy;
      if (px < 0 || px >= w || py < 0 || py >= h) {
        for (int d = 0; d < nd; ++d) path.at(x, y, d) = volume.at(x, y, d);
        continue;
      }
      int32_t min_prev = path.at(px, py, 0);
      for (int d = 1; d < nd; ++d) min_prev = std::min(min_prev, path.at(px, py, d));
      for (int d = 0; d < nd; ++d) {
        int32_t best = path.at(px, py, d);
        if (d > 0) best = std::min(best, path.at(px, py, d - 1) + p1);
        if (d < nd - 1) best = std::min(best, path.at(px, py, d + 1) + p1);
        best = std::min(best, min_prev + p2);
        path.at(x, y, d) = volume.at(x, y, d) + best - min_prev;
      }
    }
  for (size_t i = 0; i < sum.costs.size(); ++i) sum.costs[i] += path.costs[i];
}

CostVolume aggregate(const CostVolume& volume, const SgmParams& params) {
  params.validate();
  CostVolume sum = make_volume(volume.width, volume.height, volume.d_max, volume.max_cost);
  static const int dirs8[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1},
                                  {1, 1}, {-1, 1}, {1, -1}, {-1, -1}};
  for (int i = 0; i < params.paths; ++i)
    aggregate_direction(volume, dirs8[i][0], dirs8[i][1], params.p1, params.p2, sum);
  return sum;
}

DisparityMap extract_disparity(const CostVolume& agg_left, const CostVolume& agg_right,
                               const SgmParams& params, const CostVolume* raw_left,
                               const CostVolume* raw_right) {
  params.validate();
  if (agg_left.width != agg_right.width || agg_left.height != agg_right.height ||
      agg_left.d_max != agg_right.d_max)
    throw std::invalid_argument("extract_disparity: volume shapes differ");
  DisparityMap left = wta(agg_left, raw_left, params);
  const DisparityMap right = wta(agg_right, raw_right, params);
  for (int64_t y = 0; y < agg_left.height; ++y)
    for (int64_t x = 0; x < agg_left.width; ++x) {
      if (left.valid.at(y, x) == 0.0) continue;
      const double d = left.disp.at(y, x);
      const int64_t xr = x - std::llround(d);
      const bool ok = xr >= 0 && xr < agg_left.width && right.valid.at(y, xr) != 0.0 &&
                      std::abs(d - right.disp.at(y, xr)) <= params.lr_max_diff;
      if (!ok) {
        left.disp.at(y, x) = 0.0;
        left.valid.at(y, x) = 0.0;
      }
    }
  return left;
}

DisparityMap match_stereo(const Image& left, const Image& right, int d_max,
                          const SgmParams& params) {
  params.validate();
  const CostVolume cost_l = census_cost(left, right, d_max, params.census_window);
  const CostVolume cost_r = census_cost_right(left, right, d_max, params.census_window);
  return extract_disparity(aggregate(cost_l, params), aggregate(cost_r, params), params,
                           &cost_l, &cost_r);
}

}  // namespace depthlab

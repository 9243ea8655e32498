#pragma once

#include <cstdint>
#include <vector>

#include "depthlab/geometry.hpp"

// Semi-global stereo matcher. Census matching cost, scanline aggregation
// over 4 or 8 directions, winner-take-all with parabolic subpixel, then
// uniqueness and left-right consistency filtering. Holes are left as holes:
// the output is a semi-dense map with sentinel 0 on rejected pixels.

namespace depthlab {

struct SgmParams {
  int p1 = 8;   // penalty for |delta d| == 1 between neighbors
  int p2 = 32;  // penalty for larger jumps, must exceed p1
  int census_window = 5;
  int paths = 8;  // 4 (axis-aligned) or 8 (plus diagonals)
  double uniqueness_ratio = 1.15;
  double lr_max_diff = 1.0;  // pixels

  void validate() const;
};

// Matching costs for disparities 0..d_max per pixel, row-major, disparity
// fastest. Census Hamming distances, so max_cost = census bits per pixel.
struct CostVolume {
  int64_t width = 0;
  int64_t height = 0;
  int d_max = 0;
  int32_t max_cost = 0;
  std::vector<int32_t> costs;

  int32_t& at(int64_t x, int64_t y, int d) {
    return costs[(y * width + x) * (d_max + 1) + d];
  }
  int32_t at(int64_t x, int64_t y, int d) const {
    return costs[(y * width + x) * (d_max + 1) + d];
  }
};

// Left-as-reference costs: cost(x,y,d) compares left (x,y) to right (x-d,y).
// Disparities reaching outside the right image get max_cost. The census
// window is clamped at the image border.
CostVolume census_cost(const Image& left, const Image& right, int d_max,
                       int census_window = 5);

// Right-as-reference costs: cost(x,y,d) compares right (x,y) to left (x+d,y).
CostVolume census_cost_right(const Image& left, const Image& right, int d_max,
                             int census_window = 5);

// One scanline pass in direction (dx,dy), accumulated into sum. Exposed so
// single-direction behavior stays testable against hand evaluation.
void aggregate_direction(const CostVolume& volume, int dx, int dy, int p1, int p2,
                         CostVolume& sum);

// Sum of the path recursion over params.paths directions.
CostVolume aggregate(const CostVolume& volume, const SgmParams& params);

// Winner-take-all over the aggregated left volume with parabolic subpixel
// refinement (ties toward smaller disparity). A pixel is rejected when the
// best cost outside +-1 disparity is within uniqueness_ratio of the minimum
// (ties count as ambiguous), or when the right-reference disparity at the
// matched pixel disagrees by more than lr_max_diff. When the raw volumes
// are given, the uniqueness test also runs on them around the aggregated
// winner: aggregation turns the out-of-range padding into a bias toward
// small disparities, which on textureless input would otherwise pass the
// ratio test with a best cost of zero.
DisparityMap extract_disparity(const CostVolume& agg_left, const CostVolume& agg_right,
                               const SgmParams& params,
                               const CostVolume* raw_left = nullptr,
                               const CostVolume* raw_right = nullptr);

// Full pipeline: census costs both ways, aggregate, extract, filter.
DisparityMap match_stereo(const Image& left, const Image& right, int d_max,
                          const SgmParams& params);

}  // namespace depthlab

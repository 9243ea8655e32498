#include <doctest.h>

#include <cmath>
#include <random>

#include "depthlab/scene_sim.hpp"
#include "depthlab/sgm.hpp"

using namespace depthlab;

namespace {

// Stereo pair with an exact integer shift: both views crop the same wide
// random texture, the right view offset by `shift` columns.
void shifted_pair(int64_t w, int64_t h, int shift, Image& left, Image& right, uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor wide = Tensor::zeros({h, w + shift});
  for (auto& v : wide.data) v = u(rng);
  left = Tensor::zeros({h, w});
  right = Tensor::zeros({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      left.at(y, x) = wide.at(y, x);
      right.at(y, x) = wide.at(y, x + shift);
    }
}

StereoRig wall_rig(int64_t w, int64_t h, double fx, double baseline) {
  StereoRig rig;
  rig.intr.fx = fx;
  rig.intr.fy = fx;
  rig.intr.cx = w / 2.0;
  rig.intr.cy = h / 2.0;
  rig.intr.width = w;
  rig.intr.height = h;
  rig.baseline = baseline;
  return rig;
}

Scene textured_wall(double z, double tex_scale) {
  Scene s;
  Plane wall;
  wall.center = Eigen::Vector3d(0, 0, z);
  wall.normal = Eigen::Vector3d(0, 0, -1);
  wall.half_s = 50;
  wall.half_t = 50;
  wall.albedo = 0.85;
  wall.texture.kind = tex_scale > 0 ? TextureKind::kNoise : TextureKind::kBlank;
  wall.texture.scale = tex_scale > 0 ? tex_scale : 0.3;
  wall.texture.contrast = 0.35;
  wall.texture.seed = 21;
  s.planes.push_back(wall);
  return s;
}

double valid_fraction(const DisparityMap& m, int64_t margin) {
  int64_t valid = 0, total = 0;
  for (int64_t y = margin; y < m.disp.rows() - margin; ++y)
    for (int64_t x = margin; x < m.disp.cols() - margin; ++x) {
      ++total;
      if (m.valid.at(y, x) != 0.0) ++valid;
    }
  return static_cast<double>(valid) / total;
}

}  // namespace

TEST_CASE("sgm: census cost is zero at the true shift") {
  Image left, right;
  shifted_pair(48, 20, 3, left, right, 7);
  CostVolume v = census_cost(left, right, 8);
  CHECK(v.max_cost == 24);
  // interior: both census windows fully inside the shared texture
  for (int64_t y = 2; y < 18; ++y)
    for (int64_t x = 5; x < 46; ++x) CHECK(v.at(x, y, 3) == 0);
  // disparities that leave the image pay the maximum cost
  CHECK(v.at(1, 5, 6) == 24);

  CHECK_THROWS(census_cost(left, right, 48));  // d_max must stay below width

  Image flat_l = Tensor::full({20, 48}, 0.5);
  Image flat_r = Tensor::full({20, 48}, 0.5);
  CostVolume f = census_cost(flat_l, flat_r, 8);
  for (int64_t y = 0; y < 20; ++y)
    for (int64_t x = 0; x < 48; ++x)
      for (int d = 0; d <= 8; ++d)
        CHECK(f.at(x, y, d) == (d <= x ? 0 : 24));  // in-range matches are free
}

TEST_CASE("sgm: zero penalties make aggregation a plain sum over paths") {
  Image left, right;
  shifted_pair(24, 12, 2, left, right, 5);
  CostVolume v = census_cost(left, right, 6);
  CostVolume sum = v;
  for (auto& c : sum.costs) c = 0;
  static const int dirs[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1},
                                 {1, 1}, {-1, 1}, {1, -1}, {-1, -1}};
  for (auto& d : dirs) aggregate_direction(v, d[0], d[1], 0, 0, sum);
  for (size_t i = 0; i < v.costs.size(); ++i) CHECK(sum.costs[i] == 8 * v.costs[i]);
}

TEST_CASE("sgm: single-path recursion matches hand evaluation") {
  // one row, three pixels, two disparities, left-to-right pass with
  // p1=2, p2=5 worked out by hand
  CostVolume v;
  v.width = 3;
  v.height = 1;
  v.d_max = 1;
  v.max_cost = 24;
  v.costs = {4, 1, 3, 3, 0, 5};
  CostVolume sum = v;
  for (auto& c : sum.costs) c = 0;
  aggregate_direction(v, 1, 0, 2, 5, sum);
  CHECK(sum.costs == std::vector<int32_t>{4, 1, 5, 3, 2, 5});
}

TEST_CASE("sgm: aggregation keeps the argmin at the true shift and stays bounded") {
  Image left, right;
  shifted_pair(48, 20, 3, left, right, 11);
  SgmParams params;
  CostVolume agg = aggregate(census_cost(left, right, 8), params);
  for (int64_t y = 4; y < 16; ++y)
    for (int64_t x = 8; x < 44; ++x) {
      int best_d = 0;
      int32_t best = agg.at(x, y, 0);
      for (int d = 1; d <= 8; ++d)
        if (agg.at(x, y, d) < best) {
          best = agg.at(x, y, d);
          best_d = d;
        }
      CHECK(best_d == 3);
    }
  const int32_t bound = params.paths * (agg.max_cost + params.p2);
  for (int32_t c : agg.costs) {
    CHECK(c >= 0);
    CHECK(c <= bound);
  }
}

TEST_CASE("sgm: full pipeline on an exact-shift pair") {
  Image left, right;
  shifted_pair(48, 20, 3, left, right, 13);
  SgmParams params;
  DisparityMap m = match_stereo(left, right, 8, params);
  int64_t good = 0, total = 0;
  for (int64_t y = 3; y < 17; ++y)
    for (int64_t x = 10; x < 45; ++x) {
      ++total;
      if (m.valid.at(y, x) != 0.0 && std::abs(m.disp.at(y, x) - 3.0) <= 0.5) ++good;
    }
  CHECK(static_cast<double>(good) / total >= 0.95);

  // translating both views by two columns leaves interior answers in place
  Image left2 = Tensor::zeros({20, 46}), right2 = Tensor::zeros({20, 46});
  for (int64_t y = 0; y < 20; ++y)
    for (int64_t x = 0; x < 46; ++x) {
      left2.at(y, x) = left.at(y, x + 2);
      right2.at(y, x) = right.at(y, x + 2);
    }
  DisparityMap m2 = match_stereo(left2, right2, 8, params);
  int64_t agree = 0, both = 0;
  for (int64_t y = 3; y < 17; ++y)
    for (int64_t x = 10; x < 43; ++x) {
      if (m.valid.at(y, x + 2) == 0.0 || m2.valid.at(y, x) == 0.0) continue;
      ++both;
      if (std::abs(m.disp.at(y, x + 2) - m2.disp.at(y, x)) <= 0.25) ++agree;
    }
  REQUIRE(both > 200);
  CHECK(static_cast<double>(agree) / both >= 0.98);

  // mirrored-and-swapped matching reproduces the same disparities
  Image lf = Tensor::zeros({20, 48}), rf = Tensor::zeros({20, 48});
  for (int64_t y = 0; y < 20; ++y)
    for (int64_t x = 0; x < 48; ++x) {
      lf.at(y, x) = left.at(y, 47 - x);
      rf.at(y, x) = right.at(y, 47 - x);
    }
  DisparityMap mf = match_stereo(rf, lf, 8, params);
  int64_t sym = 0, cnt = 0;
  for (int64_t y = 3; y < 17; ++y)
    for (int64_t x = 10; x < 45; ++x) {
      if (m.valid.at(y, x) == 0.0) continue;
      const double d = m.disp.at(y, x);
      const int64_t xr = 47 - (x - std::llround(d));
      if (xr < 0 || xr >= 48 || mf.valid.at(y, xr) == 0.0) continue;
      ++cnt;
      if (std::abs(mf.disp.at(y, xr) - d) <= 0.5) ++sym;
    }
  REQUIRE(cnt > 200);
  CHECK(static_cast<double>(sym) / cnt >= 0.9);
}

TEST_CASE("sgm: rendered textured wall at disparity 8") {
  StereoRig rig = wall_rig(64, 48, 80.0, 0.2);
  Scene s = textured_wall(2.0, 0.08);  // fx*b/z = 8 px
  RenderedFrame f = render_passive(s, rig, Pose::identity());
  SgmParams params;
  DisparityMap m = match_stereo(f.left, f.right, 16, params);
  int64_t good = 0, total = 0;
  for (int64_t y = 3; y < 45; ++y)
    for (int64_t x = 19; x < 61; ++x) {  // interior: beyond census border and d_max
      ++total;
      if (m.valid.at(y, x) != 0.0 && std::abs(m.disp.at(y, x) - 8.0) <= 0.5) ++good;
    }
  CHECK(static_cast<double>(good) / total >= 0.95);
}

TEST_CASE("sgm: active pattern recovers coverage on a blank wall") {
  StereoRig rig = wall_rig(64, 48, 80.0, 0.2);
  Scene s = textured_wall(2.0, 0.0);  // textureless
  RenderedFrame passive = render_passive(s, rig, Pose::identity());
  SgmParams params;
  DisparityMap mp = match_stereo(passive.left, passive.right, 16, params);
  const double frac_passive = valid_fraction(mp, 4);
  CHECK(frac_passive < 0.10);  // uniqueness rejects the ambiguous matches

  BlobPattern pat = make_grid_pattern(14, 10, 0.35, 3);
  RenderedFrame active = render_active(s, rig, passive, pat);
  DisparityMap ma = match_stereo(active.left, active.right, 16, params);
  const double frac_active = valid_fraction(ma, 4);
  CHECK(frac_active > frac_passive);
}

TEST_CASE("sgm: parameter validation") {
  SgmParams p;
  CHECK_NOTHROW(p.validate());
  p.p1 = 32;
  CHECK_THROWS(p.validate());  // p1 >= p2
  p.p1 = 8;
  p.paths = 5;
  CHECK_THROWS(p.validate());
  p.paths = 4;
  p.uniqueness_ratio = 0.9;
  CHECK_THROWS(p.validate());
}

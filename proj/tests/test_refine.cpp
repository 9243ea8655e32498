#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "depthlab/refine.hpp"
#include "depthlab/sgm.hpp"
#include "fd_check.hpp"

using namespace depthlab;
namespace ad = depthlab::ad;

namespace {

StereoRig refine_rig(int w = 64, int h = 48) {
  StereoRig rig;
  rig.intr = {80.0, 80.0, (w - 1) / 2.0, (h - 1) / 2.0, w, h};
  rig.baseline = 0.2;
  return rig;
}

Scene wall_scene(double z, TextureKind kind, double scale = 0.25, double contrast = 0.35,
                 uint64_t seed = 7) {
  Scene s;
  Plane wall;
  wall.center = Eigen::Vector3d(0, 0, z);
  wall.normal = Eigen::Vector3d(0, 0, -1);
  wall.half_s = 50;
  wall.half_t = 50;
  wall.albedo = 0.85;
  wall.texture.kind = kind;
  wall.texture.scale = scale;
  wall.texture.contrast = contrast;
  wall.texture.seed = seed;
  s.planes.push_back(wall);
  return s;
}

FrameTriplet render_triplet(const Scene& s, const StereoRig& rig, const Eigen::Vector3d& step,
                            const BlobPattern* pattern) {
  FrameTriplet trip;
  RenderedFrame* slots[3] = {&trip.t_minus, &trip.t, &trip.t_plus};
  for (int i = 0; i < 3; ++i) {
    Pose pose;
    pose.t = -step * (i - 1.0);
    *slots[i] = render_passive(s, rig, pose);
  }
  if (pattern) trip.t = render_active(s, rig, trip.t, *pattern);
  return trip;
}

// Forward total at a field, built the same way step derives its pyramid.
double field_total(const Tensor& field, const RefineProblem& p) {
  ad::Tape tape;
  std::vector<ad::Var> depths;
  ad::Var cur = tape.leaf(field);
  for (int k = 0; k < p.weights.n_scales; ++k) {
    if (k > 0) cur = ad::avg_pool2(cur);
    depths.push_back(1.0 / (cur * (kMaxInverseDepth - kMinInverseDepth) + kMinInverseDepth));
  }
  return total_loss(tape, p.trip, p.rig, depths, p.d_sd, p.landmarks, {}, p.weights).total;
}

double rmse(const Image& a, const Image& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

}  // namespace

TEST_CASE("refine: fully valid map initializes to its exact round trip") {
  StereoRig rig = refine_rig(16, 12);
  std::mt19937 rng(21);
  std::uniform_real_distribution<double> depth_dist(0.5, 15.0);
  DepthMap d_sd;
  d_sd.depth = Tensor::zeros({12, 16});
  d_sd.valid = Tensor::full({12, 16}, 1.0);
  for (int64_t i = 0; i < d_sd.depth.size(); ++i) d_sd.depth[i] = depth_dist(rng);
  SparseDepthImage d_s;
  d_s.image = Tensor::zeros({12, 16});

  RefineState st = initialize(d_sd, d_s, rig);
  REQUIRE(st.d_hat.size() == 1);
  REQUIRE(st.d_hat[0].same_shape(d_sd.depth));
  CHECK(st.iteration == 0);
  CHECK(st.history.empty());
  CHECK_FALSE(st.converged);
  for (int64_t i = 0; i < d_sd.depth.size(); ++i) {
    CHECK(st.d_hat[0][i] >= 0.0);
    CHECK(st.d_hat[0][i] <= 1.0);
    CHECK(normalized_disparity_to_depth(st.d_hat[0][i]) ==
          doctest::Approx(d_sd.depth[i]).epsilon(1e-12));
  }
}

TEST_CASE("refine: empty inputs give the uniform field and mismatches throw") {
  StereoRig rig = refine_rig(16, 12);
  DepthMap d_sd;
  d_sd.depth = Tensor::zeros({12, 16});
  d_sd.valid = Tensor::zeros({12, 16});
  SparseDepthImage d_s;
  d_s.image = Tensor::zeros({12, 16});

  RefineState st = initialize(d_sd, d_s, rig);
  for (int64_t i = 0; i < st.d_hat[0].size(); ++i) CHECK(st.d_hat[0][i] == 0.5);

  SparseDepthImage wrong;
  wrong.image = Tensor::zeros({12, 15});
  CHECK_THROWS_AS(initialize(d_sd, wrong, rig), std::invalid_argument);
  CHECK_THROWS_AS(initialize(d_sd, d_s, refine_rig(16, 14)), std::invalid_argument);
}

TEST_CASE("refine: one sparse seed floods the whole field") {
  StereoRig rig = refine_rig(16, 12);
  DepthMap d_sd;
  d_sd.depth = Tensor::zeros({12, 16});
  d_sd.valid = Tensor::zeros({12, 16});
  SparseDepthImage d_s;
  d_s.image = Tensor::zeros({12, 16});
  d_s.image.at(5, 7) = 1.7;
  d_s.count = 1;

  RefineState st = initialize(d_sd, d_s, rig);
  const double expect = depth_to_normalized_disparity(1.7);
  for (int64_t i = 0; i < st.d_hat[0].size(); ++i) CHECK(st.d_hat[0][i] == expect);
}

TEST_CASE("refine: holes take the nearest seed and the semi-dense map wins overlaps") {
  StereoRig rig = refine_rig(16, 12);
  DepthMap d_sd;
  d_sd.depth = Tensor::zeros({12, 16});
  d_sd.valid = Tensor::zeros({12, 16});
  d_sd.depth.at(3, 2) = 1.0;
  d_sd.valid.at(3, 2) = 1.0;
  SparseDepthImage d_s;
  d_s.image = Tensor::zeros({12, 16});
  d_s.image.at(3, 2) = 2.5;  // shadowed by the semi-dense value above
  d_s.image.at(3, 13) = 4.0;
  d_s.count = 2;

  RefineState st = initialize(d_sd, d_s, rig);
  const double va = depth_to_normalized_disparity(1.0);
  const double vb = depth_to_normalized_disparity(4.0);
  CHECK(st.d_hat[0].at(3, 2) == va);
  for (int64_t y = 0; y < 12; ++y)
    for (int64_t x = 0; x < 16; ++x) {
      const int64_t da = std::abs(y - 3) + std::abs(x - 2);
      const int64_t db = std::abs(y - 3) + std::abs(x - 13);
      // Ties go to the seed enqueued first (row-major order), here the left one.
      CHECK(st.d_hat[0].at(y, x) == (da <= db ? va : vb));
    }
}

TEST_CASE("refine: bilinear upsampling matches hand values") {
  Tensor flat = Tensor::full({7, 5}, 0.37);
  Tensor up = upsample_bilinear(flat, 13, 11);
  REQUIRE(up.rows() == 13);
  REQUIRE(up.cols() == 11);
  for (int64_t i = 0; i < up.size(); ++i) CHECK(up[i] == doctest::Approx(0.37).epsilon(1e-15));

  Tensor src({2, 2}, {0.0, 1.0, 2.0, 3.0});
  Tensor big = upsample_bilinear(src, 4, 4);
  const double expect[4][4] = {{0.0, 0.25, 0.75, 1.0},
                               {0.5, 0.75, 1.25, 1.5},
                               {1.5, 1.75, 2.25, 2.5},
                               {2.0, 2.25, 2.75, 3.0}};
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x)
      CHECK(big.at(y, x) == doctest::Approx(expect[y][x]).epsilon(1e-15));

  std::mt19937 rng(33);
  Tensor same = fdtest::random_tensor(rng, {6, 9}, 0.0, 1.0);
  Tensor copy = upsample_bilinear(same, 6, 9);
  for (int64_t i = 0; i < same.size(); ++i) CHECK(copy[i] == same[i]);
}

TEST_CASE("refine: schedule validation rejects bad knobs") {
  RefineSchedule s;
  s.iters_per_scale = {4, 4};
  CHECK_NOTHROW(s.validate(2));
  CHECK_THROWS_AS(s.validate(3), std::invalid_argument);
  s.iters_per_scale = {4, -1};
  CHECK_THROWS_AS(s.validate(2), std::invalid_argument);
  s.iters_per_scale = {4, 4};
  s.initial_step = 0.0;
  CHECK_THROWS_AS(s.validate(2), std::invalid_argument);
  s.initial_step = 1.0;
  s.max_halvings = -1;
  CHECK_THROWS_AS(s.validate(2), std::invalid_argument);
  s.max_halvings = 20;
  s.grad_tol = -1e-3;
  CHECK_THROWS_AS(s.validate(2), std::invalid_argument);
}

TEST_CASE("refine: a field at the exact optimum converges untouched") {
  StereoRig rig = refine_rig(16, 12);
  Scene blank = wall_scene(2.0, TextureKind::kBlank);
  RefineProblem prob;
  prob.trip = render_triplet(blank, rig, Eigen::Vector3d::Zero(), nullptr);
  prob.rig = rig;
  prob.weights.w1 = 0.0;  // warping noise would perturb the exact-zero gradient
  prob.weights.n_scales = 1;

  const double d_hat_c = 0.25;
  prob.d_sd.depth = Tensor::full({12, 16}, normalized_disparity_to_depth(d_hat_c));
  prob.d_sd.valid = Tensor::full({12, 16}, 1.0);

  RefineState st;
  st.d_hat.push_back(Tensor::full({12, 16}, d_hat_c));
  RefineState out = step(st, prob, RefineSchedule{});
  CHECK(out.converged);
  CHECK(out.iteration == 0);
  CHECK(out.history.empty());
  for (int64_t i = 0; i < out.d_hat[0].size(); ++i) CHECK(out.d_hat[0][i] == d_hat_c);
}

TEST_CASE("refine: steps from a perturbed ground-truth init strictly descend") {
  StereoRig rig = refine_rig();
  Scene textured = wall_scene(2.0, TextureKind::kNoise);
  BlobPattern pat = make_grid_pattern(12, 9, 0.3, 5);
  RefineProblem prob;
  prob.trip = render_triplet(textured, rig, Eigen::Vector3d(0.04, 0, 0), &pat);
  prob.rig = rig;
  prob.d_sd = prob.trip.t.gt_left;
  prob.weights.n_scales = 2;

  SparseDepthImage none;
  none.image = Tensor::zeros({48, 64});
  RefineState st = initialize(prob.d_sd, none, rig);
  for (int64_t i = 0; i < st.d_hat[0].size(); ++i)
    st.d_hat[0][i] = std::fmin(1.0, st.d_hat[0][i] * 1.1);

  const double entry = field_total(st.d_hat[0], prob);
  RefineSchedule sched;
  for (int k = 0; k < 6; ++k) {
    st = step(st, prob, sched);
    if (st.converged) break;
  }
  REQUIRE(st.history.size() >= 1);
  CHECK(st.history[0] < entry);
  CHECK(st.iteration == static_cast<int>(st.history.size()));
  for (size_t k = 1; k < st.history.size(); ++k) CHECK(st.history[k] < st.history[k - 1]);

  // The accepted field stays bounded and its pooled levels stay in sync.
  REQUIRE(st.d_hat.size() == 2);
  for (int64_t i = 0; i < st.d_hat[0].size(); ++i) {
    CHECK(st.d_hat[0][i] >= 0.0);
    CHECK(st.d_hat[0][i] <= 1.0);
  }
  Tensor pooled = downsample_image(st.d_hat[0]);
  for (int64_t i = 0; i < pooled.size(); ++i) CHECK(st.d_hat[1][i] == pooled[i]);
}

TEST_CASE("refine: a non-finite objective reports its components") {
  StereoRig rig = refine_rig(16, 12);
  Scene blank = wall_scene(2.0, TextureKind::kBlank);
  RefineProblem prob;
  prob.trip = render_triplet(blank, rig, Eigen::Vector3d::Zero(), nullptr);
  prob.rig = rig;
  prob.weights.n_scales = 1;
  prob.d_sd.depth = Tensor::full({12, 16}, 2.0);
  prob.d_sd.valid = Tensor::full({12, 16}, 1.0);
  // A corrupt guide image (a bad file load) poisons the smoothness edge
  // weights: adjacent infinities difference to NaN inside exp(-|dI|).
  for (int64_t i = 0; i < prob.trip.t.left.size(); ++i)
    prob.trip.t.left[i] = std::numeric_limits<double>::infinity();

  RefineState st;
  st.d_hat.push_back(Tensor::full({12, 16}, 0.3));
  CHECK_THROWS_WITH_AS(step(st, prob, RefineSchedule{}), doctest::Contains("non-finite total"),
                       std::runtime_error);
}

TEST_CASE("refine: an all-zero schedule returns the seed field unchanged") {
  StereoRig rig = refine_rig(16, 12);
  Scene blank = wall_scene(2.0, TextureKind::kBlank);
  RefineInputs in;
  in.trip = render_triplet(blank, rig, Eigen::Vector3d::Zero(), nullptr);
  in.rig = rig;
  in.d_sd.depth = Tensor::zeros({12, 16});
  in.d_sd.valid = Tensor::zeros({12, 16});
  in.d_sd.depth.at(4, 4) = 2.0;
  in.d_sd.valid.at(4, 4) = 1.0;
  in.weights.n_scales = 1;

  SparseDepthImage none;
  none.image = Tensor::zeros({12, 16});
  Tensor expect = initialize(in.d_sd, none, rig).d_hat[0];

  RefineSchedule sched;
  sched.iters_per_scale = {0};
  RefineReport rep = run_refine(in, sched);
  REQUIRE(rep.d_hat.same_shape(expect));
  for (int64_t i = 0; i < expect.size(); ++i) CHECK(rep.d_hat[i] == expect[i]);
  for (int64_t i = 0; i < expect.size(); ++i) {
    CHECK(rep.completed.valid[i] == 1.0);
    CHECK(rep.completed.depth[i] == normalized_disparity_to_depth(expect[i]));
  }
  CHECK(rep.total_accepted == 0);
  for (const auto& h : rep.history_per_scale) CHECK(h.empty());
  CHECK(std::isfinite(rep.final_breakdown.total));
}

TEST_CASE("refine: full run beats the nearest-neighbor-filled stereo baseline") {
  StereoRig rig = refine_rig();
  Scene blank = wall_scene(2.0, TextureKind::kBlank);
  BlobPattern pat = make_grid_pattern(12, 9, 0.3, 5);
  RefineInputs in;
  in.trip = render_triplet(blank, rig, Eigen::Vector3d(0.04, 0, 0), &pat);
  in.rig = rig;
  in.weights.n_scales = 3;

  DisparityMap disp = match_stereo(in.trip.t.left, in.trip.t.right, 24, SgmParams{});
  in.d_sd = disparity_to_depth(rig, disp);

  for (double x : {-0.5, -0.25, 0.0, 0.25, 0.5}) {
    Landmark lm;
    lm.position = Eigen::Vector3d(x, 0.4 * x, 2.0);
    in.landmarks.push_back(lm);
  }

  RefineSchedule none;
  none.iters_per_scale = {0, 0, 0};
  RefineReport baseline = run_refine(in, none);

  RefineSchedule sched;
  sched.iters_per_scale = {8, 6, 4};
  RefineReport rep = run_refine(in, sched);

  const Image& gt = in.trip.t.gt_left.depth;
  const double err_base = rmse(baseline.completed.depth, gt);
  const double err_refined = rmse(rep.completed.depth, gt);
  CHECK(err_refined < err_base);

  CHECK(rep.total_accepted > 0);
  int accepted = 0;
  for (const auto& h : rep.history_per_scale) {
    accepted += static_cast<int>(h.size());
    for (size_t k = 1; k < h.size(); ++k) CHECK(h[k] < h[k - 1]);
  }
  CHECK(rep.total_accepted == accepted);
  for (int64_t i = 0; i < rep.completed.valid.size(); ++i) CHECK(rep.completed.valid[i] == 1.0);
}

TEST_CASE("refine: identical inputs and schedule give bit-identical output") {
  StereoRig rig = refine_rig(32, 24);
  Scene blank = wall_scene(2.0, TextureKind::kBlank);
  BlobPattern pat = make_grid_pattern(8, 6, 0.3, 9);
  RefineInputs in;
  in.trip = render_triplet(blank, rig, Eigen::Vector3d(0.04, 0, 0), &pat);
  in.rig = rig;
  in.weights.n_scales = 2;

  DisparityMap disp = match_stereo(in.trip.t.left, in.trip.t.right, 16, SgmParams{});
  in.d_sd = disparity_to_depth(rig, disp);

  RefineSchedule sched;
  sched.iters_per_scale = {3, 3};
  RefineReport a = run_refine(in, sched);
  RefineReport b = run_refine(in, sched);
  REQUIRE(a.d_hat.size() == b.d_hat.size());
  for (int64_t i = 0; i < a.d_hat.size(); ++i) CHECK(a.d_hat[i] == b.d_hat[i]);
  for (int64_t i = 0; i < a.completed.depth.size(); ++i)
    CHECK(a.completed.depth[i] == b.completed.depth[i]);
  CHECK(a.total_accepted == b.total_accepted);
}

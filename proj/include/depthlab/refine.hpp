#pragma once

#include <vector>

#include "depthlab/losses.hpp"

namespace depthlab {

// Variational depth completion: a per-pixel normalized-disparity field is
// optimized directly against the full loss stack by backtracking gradient
// descent, coarsest stage first.

struct RefineSchedule {
  std::vector<int> iters_per_scale;  // index = loss scale, 0 finest
  double initial_step = 1.0;         // reset at every stage
  int max_halvings = 20;             // failed halvings before giving up
  double grad_tol = 1e-10;           // gradient inf-norm convergence test

  void validate(int n_scales) const;
};

// Optimization state at one coarse-to-fine stage. d_hat[0] is the free field
// in [0, 1] at the stage resolution; entries behind it are its 2x2 poolings,
// refreshed on every accepted step (initialize returns just the field).
struct RefineState {
  std::vector<Tensor> d_hat;  // normalized-disparity pyramid, [0] optimized
  int scale = 0;              // loss scale this stage's resolution matches
  int iteration = 0;
  double step_size = 1.0;
  bool converged = false;
  std::vector<double> history;  // accepted totals, strictly decreasing
};

// Objective inputs for one stage, already pooled to the stage resolution;
// weights.n_scales counts the sub-scales at and below the stage.
struct RefineProblem {
  FrameTriplet trip;
  StereoRig rig;
  DepthMap d_sd;
  std::vector<Landmark> landmarks;
  LossWeights weights;
};

// Seed field: semi-dense pixels converted to normalized disparity, sparse
// raster pixels filling where the semi-dense map has none, holes flooded
// from the nearest seed (4-connected BFS, row-major tie order). No seeds at
// all gives a uniform 0.5.
RefineState initialize(const DepthMap& d_sd, const SparseDepthImage& d_s, const StereoRig& rig);

// One backtracking step on the stage total. The depth pyramid is derived on
// the tape by 2x2 pooling of the field, so every sub-scale's gradient lands
// on the one free field. Accepts only a strict decrease and then doubles the
// step; otherwise halves it up to max_halvings times and sets converged. A
// gradient inf-norm under grad_tol returns the state untouched with
// converged set. Throws with a component dump if the total is not finite.
RefineState step(const RefineState& state, const RefineProblem& problem,
                 const RefineSchedule& schedule);

struct RefineInputs {
  FrameTriplet trip;  // full resolution
  StereoRig rig;
  DepthMap d_sd;
  std::vector<Landmark> landmarks;
  LossWeights weights;
};

struct RefineReport {
  DepthMap completed;  // metric depth, every pixel valid
  Tensor d_hat;        // final finest-scale field
  std::vector<std::vector<double>> history_per_scale;  // index = scale
  LossBreakdown final_breakdown;  // full-resolution objective at the result
  int total_accepted = 0;
};

// Coarse-to-fine driver: rasterizes the landmarks, seeds via initialize,
// pools the seed field down to the coarsest scheduled stage, optimizes each
// stage against the triplet pooled to its resolution, bilinearly upsamples
// the result as the next stage's init, and converts the finest field to
// metric depth. With an all-zero schedule the seed field returns unchanged.
RefineReport run_refine(const RefineInputs& in, const RefineSchedule& schedule);

// Bilinear resampling to an arbitrary size (pixel centers aligned by area,
// samples clamped at the borders). Exposed for the stage hand-off tests.
Tensor upsample_bilinear(const Tensor& src, int64_t h, int64_t w);

}  // namespace depthlab

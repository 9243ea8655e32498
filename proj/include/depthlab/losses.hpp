#pragma once

#include <array>
#include <vector>

#include "depthlab/autodiff.hpp"
#include "depthlab/geometry.hpp"
#include "depthlab/landmarks.hpp"
#include "depthlab/scene_sim.hpp"

// Self-supervised losses over one interleaved triplet, built on the autodiff
// tape so every scalar differentiates w.r.t. the candidate depth. The active
// pair at time t supplies the on-pattern stereo loss; the passive neighbors
// at t-1/t+1 are all warped into the current left view and compared pairwise,
// and the per-pixel minimum over those four passive maps absorbs occlusions
// without erasing the pattern signal from the active pair.

namespace depthlab {

inline constexpr double kSsimC1 = 1e-4;
inline constexpr double kSsimC2 = 9e-4;

struct LossWeights {
  double w1 = 1.0;      // photometric
  double w2 = 0.01;     // semi-dense consistency
  double w3 = 1.0;      // sparse landmark consistency
  double w4 = 1e-5;     // smoothness
  double w5 = 2e-6;     // exchange-gate sparsity
  double alpha_pe = 0.85;  // SSIM share of the photometric error
  double beta = 1.0;       // passive minimum weight
  int n_scales = 4;

  void validate() const;  // weights >= 0, alpha_pe in [0,1], n_scales >= 1
};

// Per-pixel photometric error with its masked average. `valid` is detached;
// pixels outside it are never read, not even through SSIM windows.
struct PeResult {
  ad::Var map;
  ad::Var scalar;
  Tensor valid;
};

// alpha * (1 - SSIM)/2 + (1 - alpha) * |target - warped|, SSIM over 3x3
// windows with C1/C2 above, intensities in [0,1]. Empty mask gives scalar 0.
PeResult pe(ad::Tape& tape, ad::Var target, ad::Var warped, const Tensor& valid,
            double alpha_pe = 0.85);

// Active-pair stereo loss: right-on warped into the left view by `depth`.
PeResult stereo_on_loss(ad::Tape& tape, const FrameTriplet& trip, const StereoRig& rig,
                        ad::Var depth, double alpha_pe = 0.85);

// The four passive maps, all in the current left view under the same depth:
// both temporal pairings (left/left and right/right across t-1/t+1) and the
// per-neighbor stereo pairings.
struct OffMaps {
  PeResult temp_right;   // right(t-1) vs right(t+1), both warped to left t
  PeResult temp_left;    // left(t-1) vs left(t+1)
  PeResult stereo_prev;  // left(t-1) vs right(t-1)
  PeResult stereo_next;  // left(t+1) vs right(t+1)
};

OffMaps off_losses(ad::Tape& tape, const FrameTriplet& trip, const StereoRig& rig,
                   ad::Var depth, double alpha_pe = 0.85);

// Stationary-pixel mask: true where the best warped passive error beats the
// best unwarped (identity) pairing strictly. Applied to the passive minimum
// only; detached from the tape.
Tensor auto_mask(ad::Tape& tape, const FrameTriplet& trip, const OffMaps& off,
                 double alpha_pe = 0.85);

// Per-pixel minimum over the four passive maps. Pixels invalid in a map are
// excluded from that map's candidacy; the result is valid where at least one
// map is valid and the mask is set.
struct OffMin {
  ad::Var map;
  Tensor valid;
};

OffMin off_minimum(ad::Tape& tape, const OffMaps& off, const Tensor& mask);

// on average + beta * masked average of the passive minimum.
ad::Var photo_combined(ad::Tape& tape, const PeResult& on, const OffMaps& off,
                       const Tensor& mask, double beta);

// Reference variant folding the active map into the minimum as a fifth
// candidate; kept for the signal-preservation comparison, not for training.
ad::Var photo_full_min(ad::Tape& tape, const PeResult& on, const OffMaps& off,
                       const Tensor& mask);

// Inverse-square-weighted L1 against the semi-dense depth, averaged over its
// valid set: |d_sd - depth| / d_sd^2. Empty set gives 0.
ad::Var sd_loss(ad::Tape& tape, ad::Var depth, const DepthMap& d_sd);

// Unweighted L1 against the sparse raster over its nonzero pixels.
ad::Var sparse_loss(ad::Tape& tape, ad::Var depth, const SparseDepthImage& d_s);

// Edge-aware first-difference penalty on mean-normalized disparity. The
// guide image is median-filtered 9x9 first so projected blobs do not mint
// fake edges. Throws if the disparity mean is zero.
ad::Var smooth_loss(ad::Tape& tape, ad::Var normalized_disparity, const Image& ir);

// Sum of absolute exchange-gate scales across all branches and layers.
double gamma_loss(const std::vector<Tensor>& gammas);

// Pyramid steps shared by the loss and the refiner: 2x2 average pooling (odd
// trailing row/col dropped), valid-aware for depth maps, and the matching
// intrinsics rescale (pixel centers sit on integer coordinates).
Image downsample_image(const Image& img);
DepthMap downsample_depth(const DepthMap& d);
Intrinsics downsample_intrinsics(const Intrinsics& intr);

struct LossBreakdown {
  // Scale-summed components, each already carrying its 1/l^2 factors but not
  // its w_i, so total = w1*(photo_on + beta*photo_off_min) + w2*sd
  // + w3*sparse + w4*smooth + w5*gamma.
  double photo_on = 0, photo_off_min = 0, sd = 0, sparse = 0, smooth = 0, gamma = 0;
  double total = 0;
  ad::Var total_var;  // backward through this

  // Full-resolution per-pixel diagnostics.
  Tensor on_map, on_valid;
  Tensor temp_right_map, temp_left_map, stereo_prev_map, stereo_next_map;
  Tensor temp_right_valid, temp_left_valid, stereo_prev_valid, stereo_next_valid;
  Tensor off_min_map, off_min_valid;
  Tensor mask;  // auto-mask at full resolution
};

// Complete multi-scale objective. depth_pyramid[k] is the candidate depth at
// scale l = k+1 (each level half the previous resolution, meters, on the
// tape); images, the rig, and the semi-dense map are downsampled to match and
// landmarks are re-projected per scale. gammas enter unscaled.
LossBreakdown total_loss(ad::Tape& tape, const FrameTriplet& trip, const StereoRig& rig,
                         const std::vector<ad::Var>& depth_pyramid, const DepthMap& d_sd,
                         const std::vector<Landmark>& landmarks,
                         const std::vector<Tensor>& gammas, const LossWeights& weights);

}  // namespace depthlab

#pragma once

#include <utility>
#include <vector>

#include "depthlab/geometry.hpp"

// Sparse landmark pipeline over passive stereo frames: blob detection,
// epipolar patch matching, inter-frame tracking against known poses, and
// least-squares refinement of each landmark's 3D position. Surviving
// landmarks rasterize into a sparse depth image for the active frame.

namespace depthlab {

struct LandmarkParams {
  int max_features = 240;         // keep the strongest detections per frame
  double detect_threshold = 8e-3; // absolute band-pass response floor
  double sigma1 = 1.0;            // band-pass blur pair
  double sigma2 = 1.6;
  int nms_window = 5;
  int ncc_window = 7;    // odd patch side for epipolar matching
  int d_max = 64;        // disparity search range, pixels
  double min_disparity = 0.5;
  double ncc_min_score = 0.8;
  double ncc_min_margin = 0.05;  // best peak must beat runners-up by this
  double max_edge_ratio = 10.0;  // curvature ratio bound for flat/ridge peaks
  double gate_px = 1.0;          // track association radius
  double reproj_tol = 1.0;       // max per-observation reprojection error

  void validate() const;
};

// One sighting of a landmark: matched pixel positions in both eyes of the
// passive pair, frame_id indexing into the tracked sequence.
struct Observation {
  int frame_id = 0;
  double left_u = 0, left_v = 0;
  double right_u = 0, right_v = 0;
};

struct Landmark {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();  // world frame
  std::vector<Observation> observations;

  int track_length() const { return static_cast<int>(observations.size()); }
};

// Depth in meters at isolated pixels, zero elsewhere.
struct SparseDepthImage {
  Image image;
  int64_t count = 0;  // nonzero pixels
};

// Input to tracking: a rectified passive pair with its known pose.
struct TrackingFrame {
  Image left;
  Image right;
  Pose cam_from_world;
};

// Band-pass extrema (both signs), strongest first, at integer pixel
// positions. Deterministic: ties order by row then column.
std::vector<std::pair<double, double>> detect_features(const Image& image,
                                                       const LandmarkParams& params);

// Detect in every frame, match along the epipolar row by normalized cross
// correlation (subpixel peak, ambiguous peaks rejected), associate across
// frames by projecting known landmarks into each new frame, then refine
// every landmark position over its whole track. Landmarks seen in fewer
// than two frames or with any reprojection residual above reproj_tol are
// dropped.
std::vector<Landmark> triangulate_and_track(const std::vector<TrackingFrame>& frames,
                                            const StereoRig& rig,
                                            const LandmarkParams& params);

// Project landmarks into the given camera; each visible landmark writes its
// camera-frame depth at the rounded pixel, nearest depth winning collisions.
SparseDepthImage rasterize(const std::vector<Landmark>& landmarks, const StereoRig& rig,
                           const Pose& cam_from_world);

}  // namespace depthlab

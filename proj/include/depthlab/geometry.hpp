#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "depthlab/autodiff.hpp"
#include "depthlab/tensor.hpp"

namespace depthlab {

struct Intrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;  // fx,fy > 0; principal point strictly inside
};

// Rigid transform. Stored camera-from-world when it describes a camera;
// apply() maps points from the parent frame into this one.
struct Pose {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static Pose identity() { return Pose{}; }
  Pose inverse() const;
  Pose operator*(const Pose& rhs) const;  // this ∘ rhs
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }
  void validate() const;  // R orthonormal and det +1 within 1e-9
};

// Rectified pair sharing one set of intrinsics; the right camera sits at
// +baseline along x in left-camera coordinates. The texture projector is
// co-located with the left camera.
struct StereoRig {
  Intrinsics intr;
  double baseline = 0;  // meters

  void validate() const;
  Pose left_to_right() const;  // maps left-camera points into the right frame
  Pose right_to_left() const;
};

// Depth in meters; invalid pixels carry 0 in both planes.
struct DepthMap {
  Image depth;
  Image valid;

  void validate() const;  // valid pixels finite and > 0, invalid pixels 0
};

// Disparity in pixels, same validity convention.
struct DisparityMap {
  Image disp;
  Image valid;
};

// Per-target-pixel coordinates in the source image, plus visibility:
// 1 where the target pixel is valid, lands in front of the source camera,
// and falls inside the source image bounds.
struct ProjectedCoords {
  Image u, v;
  Image visible;
};

ProjectedCoords project(const Intrinsics& intr, const DepthMap& depth,
                        const Pose& target_to_source);

struct WarpResult {
  Image image;
  Image valid;  // visible and all four bilinear neighbors in bounds
};

WarpResult warp_image(const Image& source, const ProjectedCoords& coords);

DepthMap disparity_to_depth(const StereoRig& rig, const DisparityMap& d);
DisparityMap depth_to_disparity(const StereoRig& rig, const DepthMap& d);

// Working inverse-depth range of the normalized-disparity parametrization:
// 0 maps to 20 m, 1 maps to 0.3 m.
inline constexpr double kMinInverseDepth = 1.0 / 20.0;
inline constexpr double kMaxInverseDepth = 1.0 / 0.3;

double normalized_disparity_to_depth(double d_hat);  // throws outside [0,1]
double depth_to_normalized_disparity(double z);      // clamped to [0,1]

// Differentiable projection: the back-rotated ray grids are tape constants,
// depth enters as a Var, so gradients flow from warped intensities back to
// depth. Visibility is evaluated on the forward pass and detached.
struct TapeCoords {
  ad::Var u, v;
  Tensor visible;
};

TapeCoords project_on_tape(ad::Tape& tape, const Intrinsics& intr, ad::Var depth,
                           const Tensor& depth_valid, const Pose& target_to_source);

// Relative pose taking points from camera A's frame into camera B's, given
// both cameras as camera-from-world.
Pose relative(const Pose& cam_from_world_a, const Pose& cam_from_world_b);

struct TrajectoryEntry {
  double timestamp = 0;
  Pose camera_from_world;
};

// Text rows of `timestamp tx ty tz qx qy qz qw` (Hamilton quaternion),
// each row giving the camera's pose in the world; inverted on load.
std::vector<TrajectoryEntry> load_trajectory(const std::string& path);
void save_trajectory(const std::string& path, const std::vector<TrajectoryEntry>& traj);

}  // namespace depthlab

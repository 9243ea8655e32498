#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "depthlab/geometry.hpp"

namespace depthlab {

// Procedural world of textured planes and spheres rendered into interleaved
// active/passive stereo sequences with ground-truth depth.

enum class TextureKind { kBlank, kNoise, kStripes };

struct TextureSpec {
  TextureKind kind = TextureKind::kBlank;
  double base = 0.6;      // intensity of the untextured surface
  double contrast = 0.3;  // peak deviation from base
  double scale = 0.3;     // noise feature size / stripe half-period, meters
  char stripe_axis = 's';  // 's' or 't' in the primitive's local frame
  uint64_t seed = 0;
};

struct Plane {
  Eigen::Vector3d center{0, 0, 2};
  Eigen::Vector3d normal{0, 0, -1};
  double half_s = 1, half_t = 1;  // extents along the derived in-plane axes
  double albedo = 0.8;
  TextureSpec texture;
};

struct Sphere {
  Eigen::Vector3d center{0, 0, 2};
  double radius = 0.5;
  double albedo = 0.8;
  TextureSpec texture;
};

struct Scene {
  std::vector<Plane> planes;
  std::vector<Sphere> spheres;
  double ambient = 0.35;
  // Direction the light travels, world frame; shading is world-anchored so
  // surfaces keep their brightness across views.
  Eigen::Vector3d light_dir{0.25, 0.4, 0.88};

  void validate() const;  // at least one primitive, sane texture ranges
};

// Relative blob intensity vs hit distance: piecewise linear between table
// rows, constant beyond the ends.
struct IntensityCurve {
  std::vector<std::pair<double, double>> table;  // (meters, intensity in (0,1])

  double eval(double dist) const;
  void validate() const;  // sorted distances, values in (0,1], non-increasing
};

// Inverse-square falloff referenced to 1 m and clamped at 1.
IntensityCurve default_intensity_curve();

struct BlobPattern {
  std::vector<std::pair<double, double>> positions;  // normalized (u,v) in [0,1]^2
  double sigma = 1.2;  // Gaussian splat sigma, pixels (projector and camera
                       // share an origin, so the footprint size is distance-free)
  double gain = 0.6;   // peak added intensity where the curve evaluates to 1
  IntensityCurve curve = default_intensity_curve();

  void validate() const;
};

// Jittered grid covering [u0,u1]x[v0,v1] in normalized coordinates. Narrow
// the v range to keep blobs off the lower part of the scene (e.g. a floor).
BlobPattern make_grid_pattern(int nx, int ny, double jitter, uint64_t seed, double u0 = 0.04,
                              double u1 = 0.96, double v0 = 0.04, double v1 = 0.96);

// A rendered right-image blob must agree with the rendered right depth this
// closely (relative) to be drawn; occluded blobs fail and are suppressed.
inline constexpr double kDepthMatchTol = 0.01;

// Everything knowable about one projected blob in one frame, for audits.
struct BlobRecord {
  double left_u = 0, left_v = 0;    // splat center in the left image
  double right_u = 0, right_v = 0;  // stereo-reprojected splat center
  double depth = 0;                 // left-camera z of the surface hit
  double right_gt_depth = 0;        // rendered right depth at the footprint center
  bool hit = false;                 // the projector ray struck a surface
  bool in_right_bounds = false;
  bool right_splatted = false;      // passed the depth-match gate
};

struct RenderedFrame {
  Pose cam_from_world;  // left camera
  Image left, right;
  DepthMap gt_left, gt_right;
  bool active = false;
  std::vector<BlobRecord> blobs;  // empty for passive frames
};

RenderedFrame render_passive(const Scene& scene, const StereoRig& rig,
                             const Pose& cam_from_world, int threads = 1);

// Splats the pattern on top of a passive render. Blobs are cast from the
// projector at the left camera's origin; each lands at a fixed left pixel,
// fades with hit distance, and appears in the right image only where the
// rendered right depth matches the reprojected depth.
RenderedFrame render_active(const Scene& scene, const StereoRig& rig,
                            const RenderedFrame& passive, const BlobPattern& pattern);

// Difference-of-Gaussians blob detection (sigma 1.0/1.6) with 5x5
// non-maximum suppression; keeps peaks above rel_threshold times the top
// response and refines them to subpixel. Throws when nothing is found.
BlobPattern extract_pattern(const Image& on, const Image& off, double rel_threshold = 0.25);

struct FrameTriplet {
  RenderedFrame t_minus, t, t_plus;  // passive, active, passive
};

// Renders the trajectory in interleaved mode: odd pose indices are active,
// even ones passive. Each active frame with both neighbors present yields a
// triplet. The seed perturbs texture noise only.
std::vector<FrameTriplet> generate_sequence(const Scene& scene, const StereoRig& rig,
                                            const std::vector<TrajectoryEntry>& trajectory,
                                            const BlobPattern& pattern, uint64_t seed,
                                            int threads = 1);

// JSON scene file: primitives, ambient light, pattern parameters.
struct SceneConfig {
  Scene scene;
  BlobPattern pattern;
};

SceneConfig load_scene(const std::string& path);

}  // namespace depthlab

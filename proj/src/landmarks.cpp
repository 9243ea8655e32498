#include "depthlab/landmarks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "depthlab/filters.hpp"

namespace depthlab {

namespace {

constexpr double kZNear = 1e-6;

struct Detection {
  int64_t x, y;
  double strength;
};

// Pixel position of a camera-frame point, no bounds check.
inline void project_point(const Intrinsics& intr, const Eigen::Vector3d& p, double& u,
                          double& v) {
  u = intr.fx * p.x() / p.z() + intr.cx;
  v = intr.fy * p.y() / p.z() + intr.cy;
}

struct EpipolarMatch {
  double disparity = 0;
  bool ok = false;
};

// Normalized cross correlation of the square patch around (fu,fv) in left
// against candidates along the same row of right. The peak must be strong,
// beat every candidate more than one disparity away by a margin (repetitive
// structure like stripes fails this), and refine to at least min_disparity.
// The returned disparity is evaluated at the fractional feature position.
EpipolarMatch match_epipolar(const Image& left, const Image& right, double fu, double fv,
                             const LandmarkParams& p) {
  EpipolarMatch none;
  const int64_t x = std::llround(fu), y = std::llround(fv);
  const int r = p.ncc_window / 2;
  const int64_t w = left.cols(), h = left.rows();
  if (x < r || x >= w - r || y < r || y >= h - r) return none;

  const int n = p.ncc_window * p.ncc_window;
  std::vector<double> a(static_cast<size_t>(n));
  double mean_a = 0;
  {
    int i = 0;
    for (int64_t wy = y - r; wy <= y + r; ++wy)
      for (int64_t wx = x - r; wx <= x + r; ++wx) mean_a += a[i++] = left.at(wy, wx);
    mean_a /= n;
  }
  double var_a = 0;
  for (double& v : a) {
    v -= mean_a;
    var_a += v * v;
  }
  if (var_a < 1e-12) return none;

  const int d_hi = static_cast<int>(std::min<int64_t>(p.d_max, x - r));
  if (d_hi < 1) return none;
  std::vector<double> score(static_cast<size_t>(d_hi) + 1,
                            -std::numeric_limits<double>::infinity());
  int best_d = -1;
  for (int d = 0; d <= d_hi; ++d) {
    double mean_b = 0;
    for (int64_t wy = y - r; wy <= y + r; ++wy)
      for (int64_t wx = x - d - r; wx <= x - d + r; ++wx) mean_b += right.at(wy, wx);
    mean_b /= n;
    double dot = 0, var_b = 0;
    int i = 0;
    for (int64_t wy = y - r; wy <= y + r; ++wy)
      for (int64_t wx = x - d - r; wx <= x - d + r; ++wx) {
        const double b = right.at(wy, wx) - mean_b;
        dot += a[static_cast<size_t>(i++)] * b;
        var_b += b * b;
      }
    if (var_b < 1e-12) continue;
    score[static_cast<size_t>(d)] = dot / std::sqrt(var_a * var_b);
    if (best_d < 0 || score[static_cast<size_t>(d)] > score[static_cast<size_t>(best_d)])
      best_d = d;
  }
  if (best_d < 0) return none;
  const double best = score[static_cast<size_t>(best_d)];
  if (best < p.ncc_min_score) return none;
  for (int d = 0; d <= d_hi; ++d)
    if (std::abs(d - best_d) > 1 && score[static_cast<size_t>(d)] > best - p.ncc_min_margin)
      return none;

  // Subpixel: Gauss-Newton on the photometric error against the cubically
  // interpolated right row, starting from the integer peak. A parabola on
  // the correlation scores is too coarse for metric depth. The model is
  // affine disparity d0 + gx*dx + gy*dy over the patch, which is exact for
  // planar surfaces; a constant-shift model leaves a slant-induced bias.
  Eigen::Vector3d coef(best_d, 0, 0);
  bool refined = false;
  for (int iter = 0; iter < 10; ++iter) {
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    bool in_bounds = true;
    int i = 0;
    for (int64_t wy = y - r; wy <= y + r && in_bounds; ++wy)
      for (int64_t wx = x - r; wx <= x + r; ++wx) {
        const double dx = static_cast<double>(wx - x), dy = static_cast<double>(wy - y);
        const double xs = wx - (coef[0] + coef[1] * dx + coef[2] * dy);
        const int64_t x0 = static_cast<int64_t>(std::floor(xs));
        if (x0 < 1 || x0 + 2 >= w) {
          in_bounds = false;
          break;
        }
        // Catmull-Rom through the four row neighbors, plus its derivative
        const double f = xs - x0;
        const double q0 = right.at(wy, x0 - 1), q1 = right.at(wy, x0);
        const double q2 = right.at(wy, x0 + 1), q3 = right.at(wy, x0 + 2);
        const double c1 = 0.5 * (q2 - q0);
        const double c2 = q0 - 2.5 * q1 + 2 * q2 - 0.5 * q3;
        const double c3 = 0.5 * (q3 - q0) + 1.5 * (q1 - q2);
        const double rv = q1 + f * (c1 + f * (c2 + f * c3));
        const double rx = c1 + f * (2 * c2 + f * 3 * c3);
        const double res = (a[static_cast<size_t>(i++)] + mean_a) - rv;
        const Eigen::Vector3d j(rx, rx * dx, rx * dy);
        jtj += j * j.transpose();
        jtr += j * res;
      }
    if (!in_bounds) break;
    refined = true;
    const Eigen::Vector3d step =
        (jtj + 1e-12 * Eigen::Matrix3d::Identity()).ldlt().solve(-jtr);
    coef += step;
    coef[0] = std::clamp(coef[0], best_d - 1.0, best_d + 1.0);
    if (step.norm() < 1e-5) break;
  }
  // a match the refinement cannot even sample (left border) stays at integer
  // precision, which is not good enough to act as depth supervision
  if (!refined) return none;
  const double disp = coef[0] + coef[1] * (fu - x) + coef[2] * (fv - y);
  if (disp < p.min_disparity) return none;
  return {disp, true};
}

Eigen::Vector3d triangulate(const StereoRig& rig, const Pose& cam_from_world, double u,
                            double v, double disparity) {
  const double z = rig.intr.fx * rig.baseline / disparity;
  const Eigen::Vector3d p_cam((u - rig.intr.cx) / rig.intr.fx * z,
                              (v - rig.intr.cy) / rig.intr.fy * z, z);
  return cam_from_world.inverse().apply(p_cam);
}

// Gauss-Newton over all reprojections of the track (left and right pixel of
// every observation). Returns the largest per-observation pixel error.
double refine_landmark(Landmark& lm, const std::vector<TrackingFrame>& frames,
                       const StereoRig& rig) {
  const Pose l2r = rig.left_to_right();
  for (int iter = 0; iter < 20; ++iter) {
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (const Observation& obs : lm.observations) {
      const Pose& cam = frames[static_cast<size_t>(obs.frame_id)].cam_from_world;
      const Pose poses[2] = {cam, l2r * cam};
      const double targets[2][2] = {{obs.left_u, obs.left_v}, {obs.right_u, obs.right_v}};
      for (int e = 0; e < 2; ++e) {
        const Eigen::Vector3d p = poses[e].apply(lm.position);
        if (p.z() < kZNear) continue;
        double u, v;
        project_point(rig.intr, p, u, v);
        const Eigen::Vector3d ju =
            (rig.intr.fx / p.z()) * poses[e].R.row(0).transpose() -
            (rig.intr.fx * p.x() / (p.z() * p.z())) * poses[e].R.row(2).transpose();
        const Eigen::Vector3d jv =
            (rig.intr.fy / p.z()) * poses[e].R.row(1).transpose() -
            (rig.intr.fy * p.y() / (p.z() * p.z())) * poses[e].R.row(2).transpose();
        jtj += ju * ju.transpose() + jv * jv.transpose();
        jtr += ju * (u - targets[e][0]) + jv * (v - targets[e][1]);
      }
    }
    const Eigen::Vector3d step = (jtj + 1e-12 * Eigen::Matrix3d::Identity()).ldlt().solve(-jtr);
    lm.position += step;
    if (step.norm() < 1e-12) break;
  }

  double worst = 0;
  for (const Observation& obs : lm.observations) {
    const Pose& cam = frames[static_cast<size_t>(obs.frame_id)].cam_from_world;
    const Pose poses[2] = {cam, l2r * cam};
    const double targets[2][2] = {{obs.left_u, obs.left_v}, {obs.right_u, obs.right_v}};
    for (int e = 0; e < 2; ++e) {
      const Eigen::Vector3d p = poses[e].apply(lm.position);
      if (p.z() < kZNear) return std::numeric_limits<double>::infinity();
      double u, v;
      project_point(rig.intr, p, u, v);
      worst = std::max(worst, std::hypot(u - targets[e][0], v - targets[e][1]));
    }
  }
  return worst;
}

}  // namespace

void LandmarkParams::validate() const {
  if (max_features < 1) throw std::invalid_argument("landmarks: max_features must be >= 1");
  if (!(detect_threshold > 0))
    throw std::invalid_argument("landmarks: detect_threshold must be positive");
  if (!(sigma2 > sigma1 && sigma1 > 0))
    throw std::invalid_argument("landmarks: need sigma2 > sigma1 > 0");
  if (nms_window < 3 || nms_window % 2 == 0)
    throw std::invalid_argument("landmarks: nms_window must be odd and >= 3");
  if (ncc_window < 3 || ncc_window % 2 == 0)
    throw std::invalid_argument("landmarks: ncc_window must be odd and >= 3");
  if (d_max < 1) throw std::invalid_argument("landmarks: d_max must be >= 1");
  if (!(min_disparity > 0)) throw std::invalid_argument("landmarks: min_disparity must be > 0");
  if (!(ncc_min_score > 0 && ncc_min_score <= 1))
    throw std::invalid_argument("landmarks: ncc_min_score must be in (0, 1]");
  if (ncc_min_margin < 0) throw std::invalid_argument("landmarks: ncc_min_margin must be >= 0");
  if (!(max_edge_ratio > 0))
    throw std::invalid_argument("landmarks: max_edge_ratio must be > 0");
  if (!(gate_px > 0)) throw std::invalid_argument("landmarks: gate_px must be > 0");
  if (!(reproj_tol > 0)) throw std::invalid_argument("landmarks: reproj_tol must be > 0");
}

std::vector<std::pair<double, double>> detect_features(const Image& image,
                                                       const LandmarkParams& params) {
  params.validate();
  const Image g1 = gaussian_blur(image, params.sigma1);
  const Image g2 = gaussian_blur(image, params.sigma2);
  const int64_t h = image.rows(), w = image.cols();
  Image resp = Tensor::zeros({h, w});
  for (int64_t i = 0; i < resp.size(); ++i) resp[i] = std::abs(g1[i] - g2[i]);

  const int64_t r = params.nms_window / 2;
  // Bound on tr(H)^2/det(H) of the response Hessian at the peak; flatter or
  // more ridge-like peaks wobble between pixels across frames and get cut.
  const double er = params.max_edge_ratio;
  const double edge_bound = (er + 1) * (er + 1) / er;
  std::vector<Detection> found;
  for (int64_t y = 1; y < h - 1; ++y)
    for (int64_t x = 1; x < w - 1; ++x) {
      const double v = resp.at(y, x);
      if (v < params.detect_threshold) continue;
      bool is_max = true;
      for (int64_t wy = std::max<int64_t>(0, y - r); wy <= std::min(h - 1, y + r) && is_max;
           ++wy)
        for (int64_t wx = std::max<int64_t>(0, x - r); wx <= std::min(w - 1, x + r); ++wx) {
          if (wx == x && wy == y) continue;
          if (resp.at(wy, wx) >= v) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      const double dxx = resp.at(y, x - 1) - 2 * v + resp.at(y, x + 1);
      const double dyy = resp.at(y - 1, x) - 2 * v + resp.at(y + 1, x);
      const double dxy = 0.25 * (resp.at(y - 1, x - 1) + resp.at(y + 1, x + 1) -
                                 resp.at(y - 1, x + 1) - resp.at(y + 1, x - 1));
      const double det = dxx * dyy - dxy * dxy;
      const double tr = dxx + dyy;
      if (det <= 0 || tr * tr >= edge_bound * det) continue;
      found.push_back({x, y, v});
    }
  std::sort(found.begin(), found.end(), [](const Detection& a, const Detection& b) {
    if (a.strength != b.strength) return a.strength > b.strength;
    return a.y != b.y ? a.y < b.y : a.x < b.x;
  });
  if (static_cast<int>(found.size()) > params.max_features)
    found.resize(static_cast<size_t>(params.max_features));
  std::vector<std::pair<double, double>> out;
  out.reserve(found.size());
  for (const Detection& d : found) {
    // parabolic subpixel per axis; integer positions drift by up to half a
    // pixel between frames, which poisons multi-frame triangulation
    double sx = 0, sy = 0;
    if (d.x > 0 && d.x < w - 1) {
      const double ca = resp.at(d.y, d.x - 1), cb = d.strength, cc = resp.at(d.y, d.x + 1);
      const double denom = ca - 2 * cb + cc;
      if (denom < 0) sx = std::clamp((ca - cc) / (2 * denom), -0.5, 0.5);
    }
    if (d.y > 0 && d.y < h - 1) {
      const double ca = resp.at(d.y - 1, d.x), cb = d.strength, cc = resp.at(d.y + 1, d.x);
      const double denom = ca - 2 * cb + cc;
      if (denom < 0) sy = std::clamp((ca - cc) / (2 * denom), -0.5, 0.5);
    }
    out.emplace_back(static_cast<double>(d.x) + sx, static_cast<double>(d.y) + sy);
  }
  return out;
}

std::vector<Landmark> triangulate_and_track(const std::vector<TrackingFrame>& frames,
                                            const StereoRig& rig,
                                            const LandmarkParams& params) {
  params.validate();
  rig.validate();
  if (frames.size() < 2)
    throw std::invalid_argument("triangulate_and_track: need at least two frames");

  std::vector<Landmark> tracks;
  for (size_t f = 0; f < frames.size(); ++f) {
    const TrackingFrame& frame = frames[f];
    const std::vector<std::pair<double, double>> feats = detect_features(frame.left, params);

    // predicted pixel of every existing landmark in this frame
    std::vector<double> pu(tracks.size()), pv(tracks.size());
    std::vector<bool> in_view(tracks.size(), false);
    for (size_t i = 0; i < tracks.size(); ++i) {
      const Eigen::Vector3d p = frame.cam_from_world.apply(tracks[i].position);
      if (p.z() < kZNear) continue;
      project_point(rig.intr, p, pu[i], pv[i]);
      in_view[i] = pu[i] >= 0 && pu[i] <= rig.intr.width - 1 && pv[i] >= 0 &&
                   pv[i] <= rig.intr.height - 1;
    }

    std::vector<bool> claimed(tracks.size(), false);
    for (const auto& [fu, fv] : feats) {
      const EpipolarMatch m = match_epipolar(frame.left, frame.right, fu, fv, params);
      if (!m.ok) continue;
      Observation obs;
      obs.frame_id = static_cast<int>(f);
      obs.left_u = fu;
      obs.left_v = fv;
      obs.right_u = fu - m.disparity;
      obs.right_v = fv;

      int best = -1;
      double best_dist = params.gate_px;
      for (size_t i = 0; i < tracks.size(); ++i) {
        if (!in_view[i] || claimed[i]) continue;
        const double dist = std::hypot(pu[i] - fu, pv[i] - fv);
        if (dist <= best_dist) {
          best_dist = dist;
          best = static_cast<int>(i);
        }
      }
      if (best >= 0) {
        tracks[static_cast<size_t>(best)].observations.push_back(obs);
        claimed[static_cast<size_t>(best)] = true;
      } else {
        Landmark lm;
        lm.position = triangulate(rig, frame.cam_from_world, fu, fv, m.disparity);
        lm.observations.push_back(obs);
        tracks.push_back(std::move(lm));
        // freshly added landmarks don't take part in this frame's gating
        pu.push_back(0);
        pv.push_back(0);
        in_view.push_back(false);
        claimed.push_back(true);
      }
    }
  }

  std::vector<Landmark> out;
  for (Landmark& lm : tracks) {
    if (lm.track_length() < 2) continue;
    if (refine_landmark(lm, frames, rig) <= params.reproj_tol) out.push_back(std::move(lm));
  }
  return out;
}

SparseDepthImage rasterize(const std::vector<Landmark>& landmarks, const StereoRig& rig,
                           const Pose& cam_from_world) {
  SparseDepthImage out;
  out.image = Tensor::zeros({rig.intr.height, rig.intr.width});
  for (const Landmark& lm : landmarks) {
    const Eigen::Vector3d p = cam_from_world.apply(lm.position);
    if (p.z() < kZNear) continue;
    double u, v;
    project_point(rig.intr, p, u, v);
    const int64_t x = std::llround(u), y = std::llround(v);
    if (x < 0 || x >= rig.intr.width || y < 0 || y >= rig.intr.height) continue;
    double& cell = out.image.at(y, x);
    if (cell == 0.0 || p.z() < cell) cell = p.z();
  }
  for (double v : out.image.data) out.count += v != 0.0;
  return out;
}

}  // namespace depthlab

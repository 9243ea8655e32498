#include "depthlab/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace depthlab {

namespace {

constexpr double kZNear = 1e-6;  // points closer than this count as behind the camera

void check_image_pair(const Image& a, const Image& b, const char* what) {
  if (a.shape.size() != 2 || !a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": image/valid shape mismatch");
}

}  // namespace

void Intrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("Intrinsics: focal lengths must be > 0");
  if (width <= 0 || height <= 0) throw std::invalid_argument("Intrinsics: empty image");
  if (!(cx > 0 && cx < width) || !(cy > 0 && cy < height))
    throw std::invalid_argument("Intrinsics: principal point outside image");
}

Pose Pose::inverse() const {
  Pose p;
  p.R = R.transpose();
  p.t = -p.R * t;
  return p;
}

Pose Pose::operator*(const Pose& rhs) const {
  Pose p;
  p.R = R * rhs.R;
  p.t = R * rhs.t + t;
  return p;
}

void Pose::validate() const {
  if ((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
    throw std::invalid_argument("Pose: rotation not orthonormal");
  if (std::abs(R.determinant() - 1.0) > 1e-9)
    throw std::invalid_argument("Pose: rotation determinant != +1");
  if (!t.allFinite()) throw std::invalid_argument("Pose: non-finite translation");
}

void StereoRig::validate() const {
  intr.validate();
  if (!(baseline > 0)) throw std::invalid_argument("StereoRig: baseline must be > 0");
}

Pose StereoRig::left_to_right() const {
  Pose p;
  p.t = Eigen::Vector3d(-baseline, 0, 0);
  return p;
}

Pose StereoRig::right_to_left() const {
  Pose p;
  p.t = Eigen::Vector3d(baseline, 0, 0);
  return p;
}

void DepthMap::validate() const {
  check_image_pair(depth, valid, "DepthMap");
  for (int64_t i = 0; i < depth.size(); ++i) {
    if (valid[i] != 0.0) {
      if (!std::isfinite(depth[i]) || depth[i] <= 0)
        throw std::invalid_argument("DepthMap: valid pixel with non-positive depth");
    } else if (depth[i] != 0.0) {
      throw std::invalid_argument("DepthMap: invalid pixel must carry 0");
    }
  }
}

ProjectedCoords project(const Intrinsics& intr, const DepthMap& depth,
                        const Pose& target_to_source) {
  check_image_pair(depth.depth, depth.valid, "project");
  const int64_t h = depth.depth.rows(), w = depth.depth.cols();
  ProjectedCoords out;
  out.u = Tensor::zeros({h, w});
  out.v = Tensor::zeros({h, w});
  out.visible = Tensor::zeros({h, w});
  const Eigen::Matrix3d& R = target_to_source.R;
  const Eigen::Vector3d& t = target_to_source.t;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (depth.valid.at(y, x) == 0.0) continue;
      const double z = depth.depth.at(y, x);
      const Eigen::Vector3d p(z * (x - intr.cx) / intr.fx, z * (y - intr.cy) / intr.fy, z);
      const Eigen::Vector3d q = R * p + t;
      if (q.z() <= kZNear) continue;
      const double u = intr.fx * q.x() / q.z() + intr.cx;
      const double v = intr.fy * q.y() / q.z() + intr.cy;
      if (u < 0 || u > intr.width - 1 || v < 0 || v > intr.height - 1) continue;
      out.u.at(y, x) = u;
      out.v.at(y, x) = v;
      out.visible.at(y, x) = 1.0;
    }
  }
  return out;
}

WarpResult warp_image(const Image& source, const ProjectedCoords& coords) {
  check_image_pair(coords.u, coords.v, "warp_image");
  if (source.shape.size() != 2) throw std::invalid_argument("warp_image: source must be {H, W}");
  const int64_t h = coords.u.rows(), w = coords.u.cols();
  const int64_t sh = source.rows(), sw = source.cols();
  WarpResult out;
  out.image = Tensor::zeros({h, w});
  out.valid = Tensor::zeros({h, w});
  for (int64_t i = 0; i < coords.u.size(); ++i) {
    if (coords.visible[i] == 0.0) continue;
    const double x = coords.u[i], y = coords.v[i];
    const int64_t x0 = static_cast<int64_t>(std::floor(x));
    const int64_t y0 = static_cast<int64_t>(std::floor(y));
    if (x0 < 0 || y0 < 0 || x0 + 1 >= sw || y0 + 1 >= sh) continue;
    const double fu = x - x0, fv = y - y0;
    out.image[i] = (1 - fv) * ((1 - fu) * source.at(y0, x0) + fu * source.at(y0, x0 + 1)) +
                   fv * ((1 - fu) * source.at(y0 + 1, x0) + fu * source.at(y0 + 1, x0 + 1));
    out.valid[i] = 1.0;
  }
  return out;
}

DepthMap disparity_to_depth(const StereoRig& rig, const DisparityMap& d) {
  check_image_pair(d.disp, d.valid, "disparity_to_depth");
  DepthMap out;
  out.depth = Tensor::zeros(d.disp.shape);
  out.valid = d.valid;
  const double fxb = rig.intr.fx * rig.baseline;
  for (int64_t i = 0; i < d.disp.size(); ++i) {
    if (d.valid[i] == 0.0) continue;
    if (!(d.disp[i] > 0))
      throw std::invalid_argument("disparity_to_depth: valid pixel with disparity <= 0");
    out.depth[i] = fxb / d.disp[i];
  }
  return out;
}

DisparityMap depth_to_disparity(const StereoRig& rig, const DepthMap& d) {
  check_image_pair(d.depth, d.valid, "depth_to_disparity");
  DisparityMap out;
  out.disp = Tensor::zeros(d.depth.shape);
  out.valid = d.valid;
  const double fxb = rig.intr.fx * rig.baseline;
  for (int64_t i = 0; i < d.depth.size(); ++i) {
    if (d.valid[i] == 0.0) continue;
    if (!(d.depth[i] > 0))
      throw std::invalid_argument("depth_to_disparity: valid pixel with depth <= 0");
    out.disp[i] = fxb / d.depth[i];
  }
  return out;
}

double normalized_disparity_to_depth(double d_hat) {
  if (!(d_hat >= 0.0 && d_hat <= 1.0))
    throw std::domain_error("normalized disparity outside [0, 1]");
  return 1.0 / (kMinInverseDepth + (kMaxInverseDepth - kMinInverseDepth) * d_hat);
}

double depth_to_normalized_disparity(double z) {
  if (!(z > 0)) throw std::domain_error("depth must be > 0");
  const double d = (1.0 / z - kMinInverseDepth) / (kMaxInverseDepth - kMinInverseDepth);
  return std::fmin(1.0, std::fmax(0.0, d));
}

TapeCoords project_on_tape(ad::Tape& tape, const Intrinsics& intr, ad::Var depth,
                           const Tensor& depth_valid, const Pose& target_to_source) {
  const Tensor& d = tape.value(depth);
  if (d.shape.size() != 2 || !d.same_shape(depth_valid))
    throw std::invalid_argument("project_on_tape: depth/valid shape mismatch");
  const int64_t h = d.rows(), w = d.cols();

  // Rotated back-projection rays: for pixel (x, y) the source-frame point is
  // ray(x, y) * depth + t, with ray = R * K^{-1} (x, y, 1).
  Tensor ax = Tensor::zeros({h, w}), ay = Tensor::zeros({h, w}), az = Tensor::zeros({h, w});
  const Eigen::Matrix3d& R = target_to_source.R;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const Eigen::Vector3d ray((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
      const Eigen::Vector3d r = R * ray;
      ax.at(y, x) = r.x();
      ay.at(y, x) = r.y();
      az.at(y, x) = r.z();
    }
  }
  const Eigen::Vector3d& t = target_to_source.t;

  ad::Var X = depth * tape.constant(ax) + t.x();
  ad::Var Y = depth * tape.constant(ay) + t.y();
  ad::Var Z = depth * tape.constant(az) + t.z();
  // The clamp never binds on visible pixels (z > kZNear there); it only keeps
  // the division defined on the masked-out rest of the grid.
  ad::Var zs = ad::vmax(Z, kZNear);
  TapeCoords out;
  out.u = intr.fx * (X / zs) + intr.cx;
  out.v = intr.fy * (Y / zs) + intr.cy;

  // Re-fetch values here: the node pushes above may have reallocated the
  // tape, so `d` from function entry must not be touched again.
  const Tensor& uu = tape.value(out.u);
  const Tensor& vv = tape.value(out.v);
  const Tensor& zz = tape.value(Z);
  out.visible = Tensor::zeros({h, w});
  for (int64_t i = 0; i < depth_valid.size(); ++i) {
    if (depth_valid[i] == 0.0 || zz[i] <= kZNear) continue;
    if (uu[i] < 0 || uu[i] > intr.width - 1 || vv[i] < 0 || vv[i] > intr.height - 1) continue;
    out.visible[i] = 1.0;
  }
  return out;
}

Pose relative(const Pose& cam_from_world_a, const Pose& cam_from_world_b) {
  return cam_from_world_b * cam_from_world_a.inverse();
}

std::vector<TrajectoryEntry> load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trajectory: " + path);
  std::vector<TrajectoryEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 8 fields");
    Eigen::Quaterniond q(qw, qx, qy, qz);
    if (q.norm() < 1e-9)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": zero quaternion");
    q.normalize();
    Pose world_from_cam;
    world_from_cam.R = q.toRotationMatrix();
    world_from_cam.t = Eigen::Vector3d(tx, ty, tz);
    out.push_back({ts, world_from_cam.inverse()});
  }
  return out;
}

void save_trajectory(const std::string& path, const std::vector<TrajectoryEntry>& traj) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trajectory: " + path);
  out.precision(17);
  for (const TrajectoryEntry& e : traj) {
    const Pose wfc = e.camera_from_world.inverse();
    const Eigen::Quaterniond q(wfc.R);
    out << e.timestamp << " " << wfc.t.x() << " " << wfc.t.y() << " " << wfc.t.z() << " " << q.x()
        << " " << q.y() << " " << q.z() << " " << q.w() << "\n";
  }
}

}  // namespace depthlab

#include "depthlab/scene_sim.hpp"

#include "depthlab/filters.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "depthlab/parallel.hpp"

namespace depthlab {

namespace {

constexpr double kRayEps = 1e-9;  // hits closer than this are the camera itself

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double hash01(uint64_t x) { return static_cast<double>(splitmix64(x) >> 11) * 0x1.0p-53; }

double lattice(uint64_t seed, int64_t ix, int64_t iy, int64_t iz) {
  uint64_t h = seed;
  h = splitmix64(h ^ (static_cast<uint64_t>(ix) * 0x9e3779b97f4a7c15ULL));
  h = splitmix64(h ^ (static_cast<uint64_t>(iy) * 0xc2b2ae3d27d4eb4fULL));
  h = splitmix64(h ^ (static_cast<uint64_t>(iz) * 0x165667b19e3779f9ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

// Trilinearly interpolated lattice noise in [0,1], band-limited to the
// lattice spacing.
double value_noise3(const Eigen::Vector3d& p, uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const int64_t ix = static_cast<int64_t>(fx);
  const int64_t iy = static_cast<int64_t>(fy);
  const int64_t iz = static_cast<int64_t>(fz);
  const double tx = smooth(p.x() - fx), ty = smooth(p.y() - fy), tz = smooth(p.z() - fz);
  double c[2][2][2];
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) c[dz][dy][dx] = lattice(seed, ix + dx, iy + dy, iz + dz);
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double x00 = lerp(c[0][0][0], c[0][0][1], tx);
  const double x01 = lerp(c[0][1][0], c[0][1][1], tx);
  const double x10 = lerp(c[1][0][0], c[1][0][1], tx);
  const double x11 = lerp(c[1][1][0], c[1][1][1], tx);
  return lerp(lerp(x00, x01, ty), lerp(x10, x11, ty), tz);
}

double texture_value(const TextureSpec& tex, const Eigen::Vector3d& world, double s, double t) {
  switch (tex.kind) {
    case TextureKind::kBlank:
      return std::clamp(tex.base, 0.0, 1.0);
    case TextureKind::kNoise: {
      const Eigen::Vector3d q = world / tex.scale;
      const double n = 0.65 * value_noise3(q, tex.seed) +
                       0.35 * value_noise3(2.03 * q + Eigen::Vector3d(17.7, 9.3, 4.1),
                                           splitmix64(tex.seed + 1));
      return std::clamp(tex.base + tex.contrast * 2.0 * (n - 0.5), 0.0, 1.0);
    }
    case TextureKind::kStripes: {
      const double coord = (tex.stripe_axis == 't') ? t : s;
      const int64_t band = static_cast<int64_t>(std::floor(coord / tex.scale));
      const double v = (band % 2 == 0) ? tex.base + tex.contrast : tex.base - tex.contrast;
      return std::clamp(v, 0.0, 1.0);
    }
  }
  return 0.0;
}

// Deterministic in-plane axes for a unit normal.
void plane_axes(const Eigen::Vector3d& n, Eigen::Vector3d& s_axis, Eigen::Vector3d& t_axis) {
  Eigen::Vector3d up(0, 1, 0);
  if (std::abs(n.dot(up)) > 0.99) up = Eigen::Vector3d(1, 0, 0);
  s_axis = up.cross(n).normalized();
  t_axis = n.cross(s_axis);
}

struct Hit {
  double z = 0;  // left-camera depth (ray parameter with dir_cam.z == 1)
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  double s = 0, t = 0;  // local surface coordinates, meters
  const TextureSpec* texture = nullptr;
  double albedo = 0;
  bool ok = false;
};

// origin/dir in world coordinates; dir is the camera ray scaled so that the
// parameter equals camera-frame depth.
Hit cast_ray(const Scene& scene, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) {
  Hit best;
  double best_z = std::numeric_limits<double>::infinity();

  for (const Plane& pl : scene.planes) {
    const double denom = dir.dot(pl.normal);
    if (std::abs(denom) < 1e-12) continue;
    const double z = (pl.center - origin).dot(pl.normal) / denom;
    if (z <= kRayEps || z >= best_z) continue;
    const Eigen::Vector3d p = origin + z * dir;
    Eigen::Vector3d sa, ta;
    plane_axes(pl.normal, sa, ta);
    const double s = (p - pl.center).dot(sa);
    const double t = (p - pl.center).dot(ta);
    if (std::abs(s) > pl.half_s || std::abs(t) > pl.half_t) continue;
    best_z = z;
    best.z = z;
    best.point = p;
    best.normal = pl.normal;
    best.s = s;
    best.t = t;
    best.texture = &pl.texture;
    best.albedo = pl.albedo;
    best.ok = true;
  }

  for (const Sphere& sp : scene.spheres) {
    const Eigen::Vector3d oc = origin - sp.center;
    const double a = dir.squaredNorm();
    const double b = 2.0 * dir.dot(oc);
    const double c = oc.squaredNorm() - sp.radius * sp.radius;
    const double disc = b * b - 4 * a * c;
    if (disc < 0) continue;
    const double sq = std::sqrt(disc);
    double z = (-b - sq) / (2 * a);
    if (z <= kRayEps) z = (-b + sq) / (2 * a);
    if (z <= kRayEps || z >= best_z) continue;
    const Eigen::Vector3d p = origin + z * dir;
    const Eigen::Vector3d n = (p - sp.center) / sp.radius;
    best_z = z;
    best.z = z;
    best.point = p;
    best.normal = n;
    // Local coordinates from the azimuth/elevation of the surface normal.
    best.s = std::atan2(n.z(), n.x()) * sp.radius;
    best.t = std::asin(std::clamp(n.y(), -1.0, 1.0)) * sp.radius;
    best.texture = &sp.texture;
    best.albedo = sp.albedo;
    best.ok = true;
  }
  return best;
}

double shade(const Scene& scene, const Hit& hit, const Eigen::Vector3d& view_dir) {
  // Two-sided: flip the normal toward the viewer before lighting.
  Eigen::Vector3d n = hit.normal;
  if (n.dot(view_dir) > 0) n = -n;
  const Eigen::Vector3d l = scene.light_dir.normalized();
  const double diffuse = std::max(0.0, -n.dot(l));
  return scene.ambient + (1.0 - scene.ambient) * diffuse;
}

void render_view(const Scene& scene, const Intrinsics& intr, const Pose& cam_from_world,
                 Image& img, DepthMap& depth, int threads) {
  const int64_t w = intr.width, h = intr.height;
  img = Tensor::zeros({h, w});
  depth.depth = Tensor::zeros({h, w});
  depth.valid = Tensor::zeros({h, w});
  const Pose world_from_cam = cam_from_world.inverse();
  const Eigen::Vector3d origin = world_from_cam.t;
  parallel_for(h, threads, [&](int64_t y0, int64_t y1) {
    for (int64_t y = y0; y < y1; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const Eigen::Vector3d dir_cam((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
        const Eigen::Vector3d dir = world_from_cam.R * dir_cam;
        const Hit hit = cast_ray(scene, origin, dir);
        if (!hit.ok) continue;
        const double tex = texture_value(*hit.texture, hit.point, hit.s, hit.t);
        img.at(y, x) = std::clamp(hit.albedo * tex * shade(scene, hit, dir), 0.0, 1.0);
        depth.depth.at(y, x) = hit.z;
        depth.valid.at(y, x) = 1.0;
      }
    }
  });
}

void splat(Image& img, double cu, double cv, double amplitude, double sigma) {
  const int64_t w = img.cols(), h = img.rows();
  const int64_t r = static_cast<int64_t>(std::ceil(3.0 * sigma));
  const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cu)) - r);
  const int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(cu)) + r);
  const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cv)) - r);
  const int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(cv)) + r);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int64_t y = y0; y <= y1; ++y) {
    for (int64_t x = x0; x <= x1; ++x) {
      const double dx = x - cu, dy = y - cv;
      const double r2 = dx * dx + dy * dy;
      if (r2 > 9.0 * sigma * sigma) continue;
      img.at(y, x) = std::clamp(img.at(y, x) + amplitude * std::exp(-r2 * inv2s2), 0.0, 1.0);
    }
  }
}

// Separable Gaussian with a truncated, per-pixel renormalized kernel so the
// borders stay unbiased.

TextureSpec texture_from_json(const nlohmann::json& j) {
  TextureSpec t;
  const std::string kind = j.value("kind", "blank");
  if (kind == "blank")
    t.kind = TextureKind::kBlank;
  else if (kind == "noise")
    t.kind = TextureKind::kNoise;
  else if (kind == "stripes")
    t.kind = TextureKind::kStripes;
  else
    throw std::runtime_error("scene: unknown texture kind '" + kind + "'");
  t.base = j.value("base", t.base);
  t.contrast = j.value("contrast", t.contrast);
  t.scale = j.value("scale", t.scale);
  t.seed = j.value("seed", t.seed);
  const std::string axis = j.value("axis", "s");
  t.stripe_axis = axis == "t" ? 't' : 's';
  if (t.scale <= 0) throw std::runtime_error("scene: texture scale must be > 0");
  return t;
}

Eigen::Vector3d vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::runtime_error("scene: expected [x, y, z]");
  return Eigen::Vector3d(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

}  // namespace

void Scene::validate() const {
  if (planes.empty() && spheres.empty())
    throw std::invalid_argument("Scene: needs at least one primitive");
  if (!(ambient >= 0 && ambient <= 1)) throw std::invalid_argument("Scene: ambient outside [0,1]");
  auto check_tex = [](const TextureSpec& t) {
    if (t.scale <= 0) throw std::invalid_argument("Scene: texture scale must be > 0");
    if (t.base < 0 || t.base > 1) throw std::invalid_argument("Scene: texture base outside [0,1]");
  };
  for (const Plane& p : planes) {
    if (p.half_s <= 0 || p.half_t <= 0) throw std::invalid_argument("Scene: empty plane");
    if (std::abs(p.normal.norm() - 1.0) > 1e-9)
      throw std::invalid_argument("Scene: plane normal must be unit length");
    check_tex(p.texture);
  }
  for (const Sphere& s : spheres) {
    if (s.radius <= 0) throw std::invalid_argument("Scene: sphere radius must be > 0");
    check_tex(s.texture);
  }
}

double IntensityCurve::eval(double dist) const {
  if (table.empty()) throw std::logic_error("IntensityCurve: empty table");
  if (dist <= table.front().first) return table.front().second;
  if (dist >= table.back().first) return table.back().second;
  for (size_t i = 1; i < table.size(); ++i) {
    if (dist <= table[i].first) {
      const auto& [d0, v0] = table[i - 1];
      const auto& [d1, v1] = table[i];
      const double w = (dist - d0) / (d1 - d0);
      return v0 + w * (v1 - v0);
    }
  }
  return table.back().second;
}

void IntensityCurve::validate() const {
  if (table.empty()) throw std::invalid_argument("IntensityCurve: empty table");
  for (size_t i = 0; i < table.size(); ++i) {
    if (!(table[i].second > 0 && table[i].second <= 1))
      throw std::invalid_argument("IntensityCurve: values must lie in (0, 1]");
    if (i > 0) {
      if (table[i].first <= table[i - 1].first)
        throw std::invalid_argument("IntensityCurve: distances must increase");
      if (table[i].second > table[i - 1].second)
        throw std::invalid_argument("IntensityCurve: intensity must be non-increasing");
    }
  }
}

IntensityCurve default_intensity_curve() {
  IntensityCurve c;
  for (double d = 0.25; d <= 16.01; d *= std::sqrt(2.0)) {
    c.table.emplace_back(d, std::min(1.0, 1.0 / (d * d)));
  }
  return c;
}

void BlobPattern::validate() const {
  if (positions.empty()) throw std::invalid_argument("BlobPattern: no blobs");
  for (const auto& [u, v] : positions)
    if (!(u >= 0 && u <= 1 && v >= 0 && v <= 1))
      throw std::invalid_argument("BlobPattern: position outside the projector field of view");
  if (!(sigma > 0)) throw std::invalid_argument("BlobPattern: sigma must be > 0");
  if (!(gain > 0)) throw std::invalid_argument("BlobPattern: gain must be > 0");
  curve.validate();
}

BlobPattern make_grid_pattern(int nx, int ny, double jitter, uint64_t seed, double u0, double u1,
                              double v0, double v1) {
  if (nx < 1 || ny < 1) throw std::invalid_argument("make_grid_pattern: empty grid");
  BlobPattern p;
  const double du = nx > 1 ? (u1 - u0) / (nx - 1) : 0.0;
  const double dv = ny > 1 ? (v1 - v0) / (ny - 1) : 0.0;
  uint64_t h = splitmix64(seed + 0x5eedULL);
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      h = splitmix64(h);
      const double ju = (hash01(h) - 0.5) * jitter * (du > 0 ? du : 0.05);
      h = splitmix64(h);
      const double jv = (hash01(h) - 0.5) * jitter * (dv > 0 ? dv : 0.05);
      const double u = std::clamp(u0 + i * du + ju, 0.0, 1.0);
      const double v = std::clamp(v0 + j * dv + jv, 0.0, 1.0);
      p.positions.emplace_back(u, v);
    }
  }
  return p;
}

RenderedFrame render_passive(const Scene& scene, const StereoRig& rig, const Pose& cam_from_world,
                             int threads) {
  scene.validate();
  rig.validate();
  RenderedFrame f;
  f.cam_from_world = cam_from_world;
  render_view(scene, rig.intr, cam_from_world, f.left, f.gt_left, threads);
  const Pose right_cam = rig.left_to_right() * cam_from_world;
  render_view(scene, rig.intr, right_cam, f.right, f.gt_right, threads);
  return f;
}

RenderedFrame render_active(const Scene& scene, const StereoRig& rig,
                            const RenderedFrame& passive, const BlobPattern& pattern) {
  pattern.validate();
  RenderedFrame f = passive;
  f.active = true;
  const Intrinsics& k = rig.intr;
  const Pose world_from_cam = passive.cam_from_world.inverse();
  const Eigen::Vector3d origin = world_from_cam.t;

  for (const auto& [pu, pv] : pattern.positions) {
    BlobRecord rec;
    rec.left_u = pu * (k.width - 1);
    rec.left_v = pv * (k.height - 1);
    const Eigen::Vector3d dir_cam((rec.left_u - k.cx) / k.fx, (rec.left_v - k.cy) / k.fy, 1.0);
    const Hit hit = cast_ray(scene, origin, world_from_cam.R * dir_cam);
    if (!hit.ok) {
      f.blobs.push_back(rec);
      continue;
    }
    rec.hit = true;
    rec.depth = hit.z;
    const double amp =
        pattern.gain * pattern.curve.eval(hit.z) * std::max(1.0, hit.albedo);
    splat(f.left, rec.left_u, rec.left_v, amp, pattern.sigma);

    // Rectified reprojection: same row, shifted left by the disparity.
    rec.right_u = rec.left_u - k.fx * rig.baseline / hit.z;
    rec.right_v = rec.left_v;
    rec.in_right_bounds = rec.right_u >= 0 && rec.right_u <= k.width - 1 && rec.right_v >= 0 &&
                          rec.right_v <= k.height - 1;
    if (rec.in_right_bounds) {
      const int64_t cx = static_cast<int64_t>(std::llround(rec.right_u));
      const int64_t cy = static_cast<int64_t>(std::llround(rec.right_v));
      if (passive.gt_right.valid.at(cy, cx) != 0.0) {
        rec.right_gt_depth = passive.gt_right.depth.at(cy, cx);
        if (std::abs(rec.right_gt_depth - hit.z) <= kDepthMatchTol * hit.z) {
          splat(f.right, rec.right_u, rec.right_v, amp, pattern.sigma);
          rec.right_splatted = true;
        }
      }
    }
    f.blobs.push_back(rec);
  }
  return f;
}

BlobPattern extract_pattern(const Image& on, const Image& off, double rel_threshold) {
  if (!on.same_shape(off) || on.shape.size() != 2)
    throw std::invalid_argument("extract_pattern: image shape mismatch");
  const int64_t h = on.rows(), w = on.cols();
  Image diff = Tensor::zeros({h, w});
  for (int64_t i = 0; i < diff.size(); ++i) diff[i] = on[i] - off[i];

  const Image g1 = gaussian_blur(diff, 1.0);
  const Image g2 = gaussian_blur(diff, 1.6);
  Image resp = Tensor::zeros({h, w});
  double peak = 0;
  for (int64_t i = 0; i < resp.size(); ++i) {
    resp[i] = g1[i] - g2[i];
    peak = std::max(peak, resp[i]);
  }
  if (peak <= 0) throw std::runtime_error("extract_pattern: no positive response");

  BlobPattern p;
  const double thresh = rel_threshold * peak;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double r0 = resp.at(y, x);
      if (r0 < thresh) continue;
      bool is_max = true;
      for (int64_t dy = -2; dy <= 2 && is_max; ++dy)
        for (int64_t dx = -2; dx <= 2; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int64_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (resp.at(yy, xx) >= r0) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      // Parabolic refinement along each axis; denominators are negative at a
      // strict interior maximum.
      double sx = 0, sy = 0;
      if (x > 0 && x + 1 < w) {
        const double a = resp.at(y, x - 1), c = resp.at(y, x + 1);
        const double den = a - 2 * r0 + c;
        if (den < 0) sx = 0.5 * (a - c) / den;
      }
      if (y > 0 && y + 1 < h) {
        const double a = resp.at(y - 1, x), c = resp.at(y + 1, x);
        const double den = a - 2 * r0 + c;
        if (den < 0) sy = 0.5 * (a - c) / den;
      }
      p.positions.emplace_back((x + sx) / (w - 1), (y + sy) / (h - 1));
    }
  }
  if (p.positions.empty()) throw std::runtime_error("extract_pattern: no blobs detected");
  return p;
}

std::vector<FrameTriplet> generate_sequence(const Scene& scene, const StereoRig& rig,
                                            const std::vector<TrajectoryEntry>& trajectory,
                                            const BlobPattern& pattern, uint64_t seed,
                                            int threads) {
  if (trajectory.size() < 3)
    throw std::invalid_argument("generate_sequence: need at least 3 poses");
  // The sequence seed perturbs texture noise only.
  Scene seeded = scene;
  for (Plane& p : seeded.planes) p.texture.seed = splitmix64(p.texture.seed ^ (seed * 2 + 1));
  for (Sphere& s : seeded.spheres) s.texture.seed = splitmix64(s.texture.seed ^ (seed * 2 + 1));

  std::vector<RenderedFrame> frames(trajectory.size());
  for (size_t i = 0; i < trajectory.size(); ++i) {
    frames[i] = render_passive(seeded, rig, trajectory[i].camera_from_world, threads);
    if (i % 2 == 1) frames[i] = render_active(seeded, rig, frames[i], pattern);
  }

  std::vector<FrameTriplet> out;
  for (size_t i = 1; i + 1 < trajectory.size(); i += 2) {
    FrameTriplet trip;
    trip.t_minus = frames[i - 1];
    trip.t = frames[i];
    trip.t_plus = frames[i + 1];
    out.push_back(std::move(trip));
  }
  return out;
}

SceneConfig load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scene: " + path);
  nlohmann::json j;
  in >> j;

  SceneConfig cfg;
  cfg.scene.ambient = j.value("ambient", cfg.scene.ambient);
  if (j.contains("light_dir")) cfg.scene.light_dir = vec3_from_json(j["light_dir"]);
  for (const auto& pj : j.value("planes", nlohmann::json::array())) {
    Plane p;
    p.center = vec3_from_json(pj.at("center"));
    p.normal = vec3_from_json(pj.at("normal")).normalized();
    const auto& he = pj.at("half_extent");
    if (!he.is_array() || he.size() != 2)
      throw std::runtime_error("scene: plane half_extent must be [s, t]");
    p.half_s = he[0].get<double>();
    p.half_t = he[1].get<double>();
    p.albedo = pj.value("albedo", p.albedo);
    if (pj.contains("texture")) p.texture = texture_from_json(pj["texture"]);
    cfg.scene.planes.push_back(p);
  }
  for (const auto& sj : j.value("spheres", nlohmann::json::array())) {
    Sphere s;
    s.center = vec3_from_json(sj.at("center"));
    s.radius = sj.at("radius").get<double>();
    s.albedo = sj.value("albedo", s.albedo);
    if (sj.contains("texture")) s.texture = texture_from_json(sj["texture"]);
    cfg.scene.spheres.push_back(s);
  }
  cfg.scene.validate();

  if (j.contains("pattern")) {
    const auto& pj = j["pattern"];
    const auto grid = pj.value("grid", std::vector<int>{12, 10});
    if (grid.size() != 2) throw std::runtime_error("scene: pattern grid must be [nx, ny]");
    const auto ur = pj.value("u_range", std::vector<double>{0.04, 0.96});
    const auto vr = pj.value("v_range", std::vector<double>{0.04, 0.96});
    if (ur.size() != 2 || vr.size() != 2)
      throw std::runtime_error("scene: pattern u_range/v_range must be [lo, hi]");
    cfg.pattern = make_grid_pattern(grid[0], grid[1], pj.value("jitter", 0.3),
                                    pj.value("seed", uint64_t{1}), ur[0], ur[1], vr[0], vr[1]);
    cfg.pattern.sigma = pj.value("sigma", cfg.pattern.sigma);
    cfg.pattern.gain = pj.value("gain", cfg.pattern.gain);
    cfg.pattern.validate();
  }
  return cfg;
}

}  // namespace depthlab

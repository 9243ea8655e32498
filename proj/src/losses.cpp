#include "depthlab/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "depthlab/filters.hpp"

namespace depthlab {

namespace {

// Substituted for a map entry wherever that map is invalid, so the per-pixel
// minimum never picks an invalid candidate at a pixel where any valid one
// exists. Real pe values live in [0, ~1].
constexpr double kInvalidPe = 1e9;

void check_pair(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape.size() != 2 || !a.same_shape(b))
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

Tensor ones_like(const Tensor& t) { return Tensor::full(t.shape, 1.0); }

// Relative poses from the current left camera to the four passive sources.
struct OffPoses {
  Pose prev_left, next_left, prev_right, next_right;
};

OffPoses off_poses(const FrameTriplet& trip, const StereoRig& rig) {
  OffPoses p;
  p.prev_left = relative(trip.t.cam_from_world, trip.t_minus.cam_from_world);
  p.next_left = relative(trip.t.cam_from_world, trip.t_plus.cam_from_world);
  p.prev_right = rig.left_to_right() * p.prev_left;
  p.next_right = rig.left_to_right() * p.next_left;
  return p;
}

struct Warped {
  ad::Var image;
  Tensor valid;
};

Warped warp_source(ad::Tape& tape, const Image& source, const Intrinsics& intr, ad::Var depth,
                   const Tensor& depth_valid, const Pose& target_to_source) {
  TapeCoords coords = project_on_tape(tape, intr, depth, depth_valid, target_to_source);
  Warped out;
  out.image = ad::warp_bilinear(tape.constant(source), coords.u, coords.v, coords.visible,
                                &out.valid);
  return out;
}

Tensor and_masks(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out[i] = (a[i] != 0.0 && b[i] != 0.0) ? 1.0 : 0.0;
  return out;
}

// Masks invalid entries up to kInvalidPe so vmin skips them.
ad::Var mask_for_min(ad::Tape& tape, const PeResult& r) {
  Tensor big = Tensor::zeros(r.valid.shape);
  for (int64_t i = 0; i < big.size(); ++i) big[i] = r.valid[i] == 0.0 ? kInvalidPe : 0.0;
  return r.map * tape.constant(r.valid) + tape.constant(big);
}

void check_positive_depth(const Tensor& d, const char* who) {
  for (int64_t i = 0; i < d.size(); ++i)
    if (!(d[i] > 0) || !std::isfinite(d[i]))
      throw std::invalid_argument(std::string(who) + ": depth must be finite and > 0");
}

Image pool_image(const Image& img) {
  const int64_t h = img.rows() / 2, w = img.cols() / 2;
  if (h < 1 || w < 1) throw std::invalid_argument("downsample: image too small");
  Image out = Tensor::zeros({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      out.at(y, x) = 0.25 * (img.at(2 * y, 2 * x) + img.at(2 * y, 2 * x + 1) +
                             img.at(2 * y + 1, 2 * x) + img.at(2 * y + 1, 2 * x + 1));
  return out;
}

}  // namespace

void LossWeights::validate() const {
  if (w1 < 0 || w2 < 0 || w3 < 0 || w4 < 0 || w5 < 0)
    throw std::invalid_argument("losses: weights must be >= 0");
  if (!(alpha_pe >= 0 && alpha_pe <= 1))
    throw std::invalid_argument("losses: alpha_pe must be in [0, 1]");
  if (beta < 0) throw std::invalid_argument("losses: beta must be >= 0");
  if (n_scales < 1) throw std::invalid_argument("losses: n_scales must be >= 1");
}

PeResult pe(ad::Tape& tape, ad::Var target, ad::Var warped, const Tensor& valid,
            double alpha_pe) {
  check_pair(tape.value(target), tape.value(warped), "pe");
  check_pair(tape.value(target), valid, "pe");

  ad::Var l1 = ad::vabs(target - warped);

  ad::Var mx = ad::box_mean3(target, &valid);
  ad::Var my = ad::box_mean3(warped, &valid);
  ad::Var mxx = ad::box_mean3(target * target, &valid);
  ad::Var myy = ad::box_mean3(warped * warped, &valid);
  ad::Var mxy = ad::box_mean3(target * warped, &valid);
  ad::Var var_x = mxx - mx * mx;
  ad::Var var_y = myy - my * my;
  ad::Var cov = mxy - mx * my;
  // Denominator is bounded below by roughly C1*C2, so the division is safe.
  ad::Var ssim = ((2.0 * (mx * my) + kSsimC1) * (2.0 * cov + kSsimC2)) /
                 ((mx * mx + my * my + kSsimC1) * (var_x + var_y + kSsimC2));

  PeResult out;
  // Clamp at zero: rounding can push SSIM a hair past 1 on near-constant
  // patches, and a -1e-13 map entry would beat an exact-zero identity error
  // in the stationary-pixel comparison.
  out.map = ad::vmax((alpha_pe * 0.5) * (1.0 - ssim) + (1.0 - alpha_pe) * l1, 0.0);
  out.scalar = ad::reduce_mean_masked(out.map, &valid);
  out.valid = valid;
  return out;
}

PeResult stereo_on_loss(ad::Tape& tape, const FrameTriplet& trip, const StereoRig& rig,
                        ad::Var depth, double alpha_pe) {
  check_pair(tape.value(depth), trip.t.left, "stereo_on_loss");
  check_positive_depth(tape.value(depth), "stereo_on_loss");
  const Tensor dense = ones_like(trip.t.left);
  Warped r2l = warp_source(tape, trip.t.right, rig.intr, depth, dense, rig.left_to_right());
  return pe(tape, tape.constant(trip.t.left), r2l.image, r2l.valid, alpha_pe);
}

OffMaps off_losses(ad::Tape& tape, const FrameTriplet& trip, const StereoRig& rig,
                   ad::Var depth, double alpha_pe) {
  check_pair(tape.value(depth), trip.t.left, "off_losses");
  check_positive_depth(tape.value(depth), "off_losses");
  const Tensor dense = ones_like(trip.t.left);
  const OffPoses poses = off_poses(trip, rig);

  Warped pl = warp_source(tape, trip.t_minus.left, rig.intr, depth, dense, poses.prev_left);
  Warped nl = warp_source(tape, trip.t_plus.left, rig.intr, depth, dense, poses.next_left);
  Warped pr = warp_source(tape, trip.t_minus.right, rig.intr, depth, dense, poses.prev_right);
  Warped nr = warp_source(tape, trip.t_plus.right, rig.intr, depth, dense, poses.next_right);

  OffMaps out;
  out.temp_right = pe(tape, pr.image, nr.image, and_masks(pr.valid, nr.valid), alpha_pe);
  out.temp_left = pe(tape, pl.image, nl.image, and_masks(pl.valid, nl.valid), alpha_pe);
  out.stereo_prev = pe(tape, pl.image, pr.image, and_masks(pl.valid, pr.valid), alpha_pe);
  out.stereo_next = pe(tape, nl.image, nr.image, and_masks(nl.valid, nr.valid), alpha_pe);
  return out;
}

Tensor auto_mask(ad::Tape& tape, const FrameTriplet& trip, const OffMaps& off,
                 double alpha_pe) {
  // Identity counterparts: the same four pairings without any warping.
  const Tensor all = ones_like(trip.t.left);
  ad::Var pl = tape.constant(trip.t_minus.left);
  ad::Var nl = tape.constant(trip.t_plus.left);
  ad::Var pr = tape.constant(trip.t_minus.right);
  ad::Var nr = tape.constant(trip.t_plus.right);
  // Copies: growing the tape below would invalidate references into it.
  const Tensor id_tr = tape.value(pe(tape, pr, nr, all, alpha_pe).map);
  const Tensor id_tl = tape.value(pe(tape, pl, nl, all, alpha_pe).map);
  const Tensor id_sp = tape.value(pe(tape, pl, pr, all, alpha_pe).map);
  const Tensor id_sn = tape.value(pe(tape, nl, nr, all, alpha_pe).map);

  const PeResult* maps[4] = {&off.temp_right, &off.temp_left, &off.stereo_prev,
                             &off.stereo_next};
  Tensor mask = Tensor::zeros(all.shape);
  for (int64_t i = 0; i < mask.size(); ++i) {
    double warped = kInvalidPe;
    bool any = false;
    for (const PeResult* m : maps) {
      if (m->valid[i] == 0.0) continue;
      warped = std::min(warped, tape.value(m->map)[i]);
      any = true;
    }
    if (!any) continue;
    const double identity =
        std::min(std::min(id_tr[i], id_tl[i]), std::min(id_sp[i], id_sn[i]));
    if (warped < identity) mask[i] = 1.0;
  }
  return mask;
}

OffMin off_minimum(ad::Tape& tape, const OffMaps& off, const Tensor& mask) {
  ad::Var m = ad::vmin(ad::vmin(mask_for_min(tape, off.temp_right), mask_for_min(tape, off.temp_left)),
                       ad::vmin(mask_for_min(tape, off.stereo_prev), mask_for_min(tape, off.stereo_next)));
  OffMin out;
  out.map = m;
  out.valid = Tensor::zeros(mask.shape);
  for (int64_t i = 0; i < mask.size(); ++i) {
    const bool any = off.temp_right.valid[i] != 0.0 || off.temp_left.valid[i] != 0.0 ||
                     off.stereo_prev.valid[i] != 0.0 || off.stereo_next.valid[i] != 0.0;
    if (any && mask[i] != 0.0) out.valid[i] = 1.0;
  }
  return out;
}

ad::Var photo_combined(ad::Tape& tape, const PeResult& on, const OffMaps& off,
                       const Tensor& mask, double beta) {
  OffMin mn = off_minimum(tape, off, mask);
  return on.scalar + beta * ad::reduce_mean_masked(mn.map, &mn.valid);
}

ad::Var photo_full_min(ad::Tape& tape, const PeResult& on, const OffMaps& off,
                       const Tensor& mask) {
  ad::Var five = ad::vmin(
      mask_for_min(tape, on),
      ad::vmin(ad::vmin(mask_for_min(tape, off.temp_right), mask_for_min(tape, off.temp_left)),
               ad::vmin(mask_for_min(tape, off.stereo_prev), mask_for_min(tape, off.stereo_next))));
  Tensor valid = Tensor::zeros(mask.shape);
  for (int64_t i = 0; i < mask.size(); ++i) {
    const bool any = on.valid[i] != 0.0 || off.temp_right.valid[i] != 0.0 ||
                     off.temp_left.valid[i] != 0.0 || off.stereo_prev.valid[i] != 0.0 ||
                     off.stereo_next.valid[i] != 0.0;
    if (any && mask[i] != 0.0) valid[i] = 1.0;
  }
  return ad::reduce_mean_masked(five, &valid);
}

ad::Var sd_loss(ad::Tape& tape, ad::Var depth, const DepthMap& d_sd) {
  check_pair(tape.value(depth), d_sd.depth, "sd_loss");
  d_sd.validate();
  Tensor w = Tensor::zeros(d_sd.depth.shape);
  for (int64_t i = 0; i < w.size(); ++i)
    if (d_sd.valid[i] != 0.0) w[i] = 1.0 / (d_sd.depth[i] * d_sd.depth[i]);
  ad::Var weighted = ad::vabs(tape.constant(d_sd.depth) - depth) * tape.constant(w);
  return ad::reduce_mean_masked(weighted, &d_sd.valid);
}

ad::Var sparse_loss(ad::Tape& tape, ad::Var depth, const SparseDepthImage& d_s) {
  check_pair(tape.value(depth), d_s.image, "sparse_loss");
  Tensor mask = Tensor::zeros(d_s.image.shape);
  for (int64_t i = 0; i < mask.size(); ++i) mask[i] = d_s.image[i] != 0.0 ? 1.0 : 0.0;
  ad::Var l1 = ad::vabs(tape.constant(d_s.image) - depth);
  return ad::reduce_mean_masked(l1, &mask);
}

ad::Var smooth_loss(ad::Tape& tape, ad::Var normalized_disparity, const Image& ir) {
  const Tensor& d = tape.value(normalized_disparity);
  check_pair(d, ir, "smooth_loss");
  double mean = 0;
  for (int64_t i = 0; i < d.size(); ++i) mean += d[i];
  mean /= static_cast<double>(d.size());
  if (std::abs(mean) <= ad::kDivEps)
    throw std::invalid_argument("smooth_loss: disparity mean is zero");

  ad::Var dstar = normalized_disparity / ad::reduce_mean(normalized_disparity);

  const Image med = median_filter(ir, 4);
  const int64_t h = ir.rows(), w = ir.cols();
  Tensor wx = Tensor::zeros({h, w - 1});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x + 1 < w; ++x)
      wx.at(y, x) = std::exp(-std::abs(med.at(y, x + 1) - med.at(y, x)));
  Tensor wy = Tensor::zeros({h - 1, w});
  for (int64_t y = 0; y + 1 < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      wy.at(y, x) = std::exp(-std::abs(med.at(y + 1, x) - med.at(y, x)));

  ad::Var sx = ad::reduce_mean(ad::vabs(ad::diff_x(dstar)) * tape.constant(wx));
  ad::Var sy = ad::reduce_mean(ad::vabs(ad::diff_y(dstar)) * tape.constant(wy));
  return sx + sy;
}

double gamma_loss(const std::vector<Tensor>& gammas) {
  double sum = 0;
  for (const Tensor& g : gammas)
    for (int64_t i = 0; i < g.size(); ++i) sum += std::abs(g[i]);
  return sum;
}

Image downsample_image(const Image& img) {
  if (img.shape.size() != 2) throw std::invalid_argument("downsample_image: need {H, W}");
  return pool_image(img);
}

DepthMap downsample_depth(const DepthMap& d) {
  if (d.depth.shape.size() != 2 || !d.depth.same_shape(d.valid))
    throw std::invalid_argument("downsample_depth: need matching {H, W} planes");
  const int64_t h = d.depth.rows() / 2, w = d.depth.cols() / 2;
  if (h < 1 || w < 1) throw std::invalid_argument("downsample_depth: map too small");
  DepthMap out;
  out.depth = Tensor::zeros({h, w});
  out.valid = Tensor::zeros({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double sum = 0;
      int n = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          if (d.valid.at(2 * y + dy, 2 * x + dx) == 0.0) continue;
          sum += d.depth.at(2 * y + dy, 2 * x + dx);
          ++n;
        }
      if (n > 0) {
        out.depth.at(y, x) = sum / n;
        out.valid.at(y, x) = 1.0;
      }
    }
  return out;
}

Intrinsics downsample_intrinsics(const Intrinsics& intr) {
  // Pooled pixel k covers source pixels 2k and 2k+1, so its center sits at
  // source coordinate 2k + 0.5.
  Intrinsics out;
  out.fx = intr.fx / 2;
  out.fy = intr.fy / 2;
  out.cx = (intr.cx - 0.5) / 2;
  out.cy = (intr.cy - 0.5) / 2;
  out.width = intr.width / 2;
  out.height = intr.height / 2;
  out.validate();
  return out;
}

LossBreakdown total_loss(ad::Tape& tape, const FrameTriplet& trip, const StereoRig& rig,
                         const std::vector<ad::Var>& depth_pyramid, const DepthMap& d_sd,
                         const std::vector<Landmark>& landmarks,
                         const std::vector<Tensor>& gammas, const LossWeights& weights) {
  weights.validate();
  if (static_cast<int>(depth_pyramid.size()) != weights.n_scales)
    throw std::invalid_argument("total_loss: pyramid depth != n_scales");
  check_pair(d_sd.depth, trip.t.left, "total_loss");

  FrameTriplet cur = trip;  // images pooled in place per scale
  StereoRig cur_rig = rig;
  DepthMap cur_sd = d_sd;

  LossBreakdown out;
  ad::Var photo_on_acc, off_min_acc, sd_acc, sparse_acc, smooth_acc;
  for (int level = 0; level < weights.n_scales; ++level) {
    if (level > 0) {
      for (Image* img : {&cur.t_minus.left, &cur.t_minus.right, &cur.t.left, &cur.t.right,
                         &cur.t_plus.left, &cur.t_plus.right})
        *img = pool_image(*img);
      cur_rig.intr = downsample_intrinsics(cur_rig.intr);
      cur_sd = downsample_depth(cur_sd);
    }
    ad::Var depth = depth_pyramid[static_cast<size_t>(level)];
    if (!tape.value(depth).same_shape(cur.t.left))
      throw std::invalid_argument("total_loss: pyramid level shape mismatch");

    PeResult on = stereo_on_loss(tape, cur, cur_rig, depth, weights.alpha_pe);
    OffMaps off = off_losses(tape, cur, cur_rig, depth, weights.alpha_pe);
    Tensor mask = auto_mask(tape, cur, off, weights.alpha_pe);
    OffMin mn = off_minimum(tape, off, mask);
    ad::Var off_scalar = ad::reduce_mean_masked(mn.map, &mn.valid);

    SparseDepthImage raster = rasterize(landmarks, cur_rig, trip.t.cam_from_world);
    ad::Var sd = sd_loss(tape, depth, cur_sd);
    ad::Var sp = sparse_loss(tape, depth, raster);

    const double span = kMaxInverseDepth - kMinInverseDepth;
    ad::Var dhat = (1.0 / depth - kMinInverseDepth) * (1.0 / span);
    ad::Var sm = smooth_loss(tape, dhat, cur.t.left);

    const double ls = 1.0 / ((level + 1.0) * (level + 1.0));
    photo_on_acc = level == 0 ? ls * on.scalar : photo_on_acc + ls * on.scalar;
    off_min_acc = level == 0 ? ls * off_scalar : off_min_acc + ls * off_scalar;
    sd_acc = level == 0 ? ls * sd : sd_acc + ls * sd;
    sparse_acc = level == 0 ? ls * sp : sparse_acc + ls * sp;
    smooth_acc = level == 0 ? ls * sm : smooth_acc + ls * sm;

    if (level == 0) {
      out.on_map = tape.value(on.map);
      out.on_valid = on.valid;
      out.temp_right_map = tape.value(off.temp_right.map);
      out.temp_left_map = tape.value(off.temp_left.map);
      out.stereo_prev_map = tape.value(off.stereo_prev.map);
      out.stereo_next_map = tape.value(off.stereo_next.map);
      out.temp_right_valid = off.temp_right.valid;
      out.temp_left_valid = off.temp_left.valid;
      out.stereo_prev_valid = off.stereo_prev.valid;
      out.stereo_next_valid = off.stereo_next.valid;
      out.off_min_map = tape.value(mn.map);
      out.off_min_valid = mn.valid;
      out.mask = mask;
    }
  }

  out.gamma = gamma_loss(gammas);
  out.total_var = weights.w1 * (photo_on_acc + weights.beta * off_min_acc) +
                  weights.w2 * sd_acc + weights.w3 * sparse_acc + weights.w4 * smooth_acc +
                  weights.w5 * out.gamma;
  out.photo_on = tape.value(photo_on_acc)[0];
  out.photo_off_min = tape.value(off_min_acc)[0];
  out.sd = tape.value(sd_acc)[0];
  out.sparse = tape.value(sparse_acc)[0];
  out.smooth = tape.value(smooth_acc)[0];
  out.total = tape.value(out.total_var)[0];
  return out;
}

}  // namespace depthlab

#include "depthlab/refine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <queue>
#include <stdexcept>
#include <utility>

namespace depthlab {

namespace {

constexpr double kInvDepthSpan = kMaxInverseDepth - kMinInverseDepth;

double clamp01(double v) { return std::fmin(1.0, std::fmax(0.0, v)); }

// Depth pyramid over one free field: level k is the field pooled k times,
// mapped through the inverse-depth span. Pooling on the tape keeps every
// level's gradient flowing into the single leaf.
std::vector<ad::Var> depth_pyramid(ad::Var field, int n_scales) {
  std::vector<ad::Var> depths;
  ad::Var cur = field;
  for (int k = 0; k < n_scales; ++k) {
    if (k > 0) cur = ad::avg_pool2(cur);
    depths.push_back(1.0 / (cur * kInvDepthSpan + kMinInverseDepth));
  }
  return depths;
}

LossBreakdown eval_field(ad::Tape& tape, const Tensor& field, const RefineProblem& p,
                         ad::Var* leaf_out) {
  ad::Var leaf = tape.leaf(field);
  if (leaf_out != nullptr) *leaf_out = leaf;
  std::vector<ad::Var> depths = depth_pyramid(leaf, p.weights.n_scales);
  return total_loss(tape, p.trip, p.rig, depths, p.d_sd, p.landmarks, {}, p.weights);
}

// Rebuild the derived pyramid levels behind the free field.
void refresh_pyramid(std::vector<Tensor>& pyr, int n_scales) {
  pyr.resize(static_cast<size_t>(n_scales));
  for (int k = 1; k < n_scales; ++k) pyr[k] = downsample_image(pyr[static_cast<size_t>(k) - 1]);
}

// One pooling stage of everything the objective reads. Ground-truth maps are
// pooled too when present so the stage triplet stays self-consistent.
RefineProblem pool_problem(const RefineProblem& p) {
  RefineProblem out = p;
  for (RenderedFrame* f : {&out.trip.t_minus, &out.trip.t, &out.trip.t_plus}) {
    f->left = downsample_image(f->left);
    f->right = downsample_image(f->right);
    if (f->gt_left.depth.shape.size() == 2) f->gt_left = downsample_depth(f->gt_left);
    if (f->gt_right.depth.shape.size() == 2) f->gt_right = downsample_depth(f->gt_right);
  }
  out.rig.intr = downsample_intrinsics(out.rig.intr);
  out.d_sd = downsample_depth(out.d_sd);
  out.weights.n_scales -= 1;
  return out;
}

}  // namespace

void RefineSchedule::validate(int n_scales) const {
  if (static_cast<int>(iters_per_scale.size()) != n_scales)
    throw std::invalid_argument("refine: schedule needs one iteration count per scale");
  for (int it : iters_per_scale)
    if (it < 0) throw std::invalid_argument("refine: negative iteration count");
  if (!(initial_step > 0)) throw std::invalid_argument("refine: initial step must be positive");
  if (max_halvings < 0) throw std::invalid_argument("refine: negative halving limit");
  if (!(grad_tol >= 0)) throw std::invalid_argument("refine: negative gradient tolerance");
}

RefineState initialize(const DepthMap& d_sd, const SparseDepthImage& d_s, const StereoRig& rig) {
  rig.validate();
  if (d_sd.depth.shape.size() != 2 || !d_sd.depth.same_shape(d_sd.valid))
    throw std::invalid_argument("initialize: semi-dense map needs matching {H, W} planes");
  if (!d_s.image.same_shape(d_sd.depth))
    throw std::invalid_argument("initialize: sparse raster shape mismatch");
  const int64_t h = d_sd.depth.rows(), w = d_sd.depth.cols();
  if (h != rig.intr.height || w != rig.intr.width)
    throw std::invalid_argument("initialize: map size does not match the intrinsics");

  Tensor field = Tensor::zeros({h, w});
  std::vector<int8_t> seeded(static_cast<size_t>(h * w), 0);
  std::queue<int64_t> frontier;
  for (int64_t i = 0; i < h * w; ++i) {
    double z;
    if (d_sd.valid[i] != 0.0)
      z = d_sd.depth[i];
    else if (d_s.image[i] != 0.0)
      z = d_s.image[i];
    else
      continue;
    field[i] = depth_to_normalized_disparity(z);
    seeded[static_cast<size_t>(i)] = 1;
    frontier.push(i);
  }

  if (frontier.empty()) {
    field = Tensor::full({h, w}, 0.5);
  } else {
    // Multi-source BFS: each hole copies its nearest seed, first writer
    // winning distance ties (seeds enter the queue in row-major order).
    while (!frontier.empty()) {
      const int64_t i = frontier.front();
      frontier.pop();
      const int64_t y = i / w, x = i % w;
      const int64_t ny[4] = {y - 1, y + 1, y, y};
      const int64_t nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
        const int64_t j = ny[k] * w + nx[k];
        if (seeded[static_cast<size_t>(j)]) continue;
        seeded[static_cast<size_t>(j)] = 1;
        field[j] = field[i];
        frontier.push(j);
      }
    }
  }

  RefineState out;
  out.d_hat.push_back(std::move(field));
  return out;
}

RefineState step(const RefineState& state, const RefineProblem& problem,
                 const RefineSchedule& schedule) {
  problem.weights.validate();
  if (schedule.max_halvings < 0) throw std::invalid_argument("refine: negative halving limit");
  if (!(schedule.grad_tol >= 0))
    throw std::invalid_argument("refine: negative gradient tolerance");
  if (state.d_hat.empty()) throw std::invalid_argument("refine: state carries no field");
  if (!state.d_hat[0].same_shape(problem.trip.t.left))
    throw std::invalid_argument("refine: field does not match the triplet resolution");

  ad::Tape tape;
  ad::Var leaf;
  const LossBreakdown bd = eval_field(tape, state.d_hat[0], problem, &leaf);
  if (!std::isfinite(bd.total)) {
    char msg[240];
    std::snprintf(msg, sizeof(msg),
                  "refine: non-finite total (photo_on=%g photo_off_min=%g sd=%g sparse=%g "
                  "smooth=%g gamma=%g)",
                  bd.photo_on, bd.photo_off_min, bd.sd, bd.sparse, bd.smooth, bd.gamma);
    throw std::runtime_error(msg);
  }
  tape.backward(bd.total_var);
  const Tensor grad = tape.grad(leaf);

  RefineState out = state;
  double gmax = 0;
  for (int64_t i = 0; i < grad.size(); ++i) gmax = std::fmax(gmax, std::abs(grad[i]));
  if (gmax < schedule.grad_tol) {
    out.converged = true;
    return out;
  }

  double s = state.step_size;
  for (int attempt = 0; attempt <= schedule.max_halvings; ++attempt, s *= 0.5) {
    Tensor cand = state.d_hat[0];
    for (int64_t i = 0; i < cand.size(); ++i) cand[i] = clamp01(cand[i] - s * grad[i]);
    ad::Tape ct;
    const double total_c = eval_field(ct, cand, problem, nullptr).total;
    if (std::isfinite(total_c) && total_c < bd.total) {
      out.d_hat[0] = std::move(cand);
      refresh_pyramid(out.d_hat, problem.weights.n_scales);
      out.iteration = state.iteration + 1;
      out.step_size = s * 2.0;
      out.history.push_back(total_c);
      out.converged = false;
      return out;
    }
  }
  out.converged = true;
  return out;
}

RefineReport run_refine(const RefineInputs& in, const RefineSchedule& schedule) {
  in.weights.validate();
  schedule.validate(in.weights.n_scales);
  const int n = in.weights.n_scales;

  const SparseDepthImage d_s = rasterize(in.landmarks, in.rig, in.trip.t.cam_from_world);
  Tensor field = initialize(in.d_sd, d_s, in.rig).d_hat[0];

  RefineReport report;
  report.history_per_scale.assign(static_cast<size_t>(n), {});

  int l_start = -1;
  for (int l = n - 1; l >= 0; --l)
    if (schedule.iters_per_scale[static_cast<size_t>(l)] > 0) {
      l_start = l;
      break;
    }

  if (l_start >= 0) {
    // Objective inputs per stage; stages coarser than l_start never run.
    std::vector<RefineProblem> probs;
    probs.push_back({in.trip, in.rig, in.d_sd, in.landmarks, in.weights});
    for (int l = 1; l <= l_start; ++l) probs.push_back(pool_problem(probs.back()));
    for (int l = 0; l < l_start; ++l) field = downsample_image(field);

    for (int l = l_start; l >= 0; --l) {
      RefineState st;
      st.d_hat.push_back(std::move(field));
      refresh_pyramid(st.d_hat, probs[static_cast<size_t>(l)].weights.n_scales);
      st.scale = l;
      st.step_size = schedule.initial_step;
      for (int it = 0; it < schedule.iters_per_scale[static_cast<size_t>(l)]; ++it) {
        st = step(st, probs[static_cast<size_t>(l)], schedule);
        if (st.converged) break;
      }
      report.history_per_scale[static_cast<size_t>(l)] = st.history;
      report.total_accepted += static_cast<int>(st.history.size());
      field = std::move(st.d_hat[0]);
      if (l > 0) {
        const Tensor& finer = probs[static_cast<size_t>(l) - 1].trip.t.left;
        field = upsample_bilinear(field, finer.rows(), finer.cols());
        // Interpolation of in-range values can overshoot the bounds by an ulp.
        for (int64_t i = 0; i < field.size(); ++i) field[i] = clamp01(field[i]);
      }
    }
  }

  report.completed.depth = Tensor::zeros(field.shape);
  report.completed.valid = Tensor::full(field.shape, 1.0);
  for (int64_t i = 0; i < field.size(); ++i)
    report.completed.depth[i] = normalized_disparity_to_depth(field[i]);
  report.d_hat = std::move(field);

  ad::Tape tape;
  report.final_breakdown =
      eval_field(tape, report.d_hat, {in.trip, in.rig, in.d_sd, in.landmarks, in.weights}, nullptr);
  return report;
}

Tensor upsample_bilinear(const Tensor& src, int64_t h, int64_t w) {
  if (src.shape.size() != 2) throw std::invalid_argument("upsample_bilinear: need {H, W}");
  if (h < 1 || w < 1) throw std::invalid_argument("upsample_bilinear: bad target size");
  const int64_t sh = src.rows(), sw = src.cols();
  const double ry = static_cast<double>(sh) / static_cast<double>(h);
  const double rx = static_cast<double>(sw) / static_cast<double>(w);
  Tensor out = Tensor::zeros({h, w});
  for (int64_t y = 0; y < h; ++y) {
    double sy = (static_cast<double>(y) + 0.5) * ry - 0.5;
    sy = std::fmin(std::fmax(sy, 0.0), static_cast<double>(sh - 1));
    const int64_t y0 = static_cast<int64_t>(sy);
    const int64_t y1 = std::min<int64_t>(y0 + 1, sh - 1);
    const double fy = sy - static_cast<double>(y0);
    for (int64_t x = 0; x < w; ++x) {
      double sx = (static_cast<double>(x) + 0.5) * rx - 0.5;
      sx = std::fmin(std::fmax(sx, 0.0), static_cast<double>(sw - 1));
      const int64_t x0 = static_cast<int64_t>(sx);
      const int64_t x1 = std::min<int64_t>(x0 + 1, sw - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = src.at(y0, x0) * (1.0 - fx) + src.at(y0, x1) * fx;
      const double bot = src.at(y1, x0) * (1.0 - fx) + src.at(y1, x1) * fx;
      out.at(y, x) = top * (1.0 - fy) + bot * fy;
    }
  }
  return out;
}

}  // namespace depthlab

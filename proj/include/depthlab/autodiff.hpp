#pragma once

#include <memory>
#include <vector>

#include "depthlab/tensor.hpp"

namespace depthlab {
namespace ad {

// Reverse-mode autodiff over dense tensors. A Tape owns an append-only list
// of op nodes; Var is a handle into it. Construction is single-writer and a
// tape supports one backward pass. Identical inputs recorded in identical
// order produce bit-identical gradients.
//
// Conventions baked into the adjoints:
//  - min/max route the gradient to the first argument on exact ties
//  - clamp passes gradient only strictly inside (lo, hi)
//  - division requires |denominator| > kDivEps everywhere; use safe_div to
//    substitute a signed epsilon instead of throwing
//  - exp clamps its argument to [-745, 709] so outputs stay finite
//  - masked means with an empty mask evaluate to 0 and propagate no gradient

inline constexpr double kDivEps = 1e-12;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kSafeDiv,  // denominators with |b| <= kDivEps become signed kDivEps
  kAddC,   // a + c0
  kSubC,   // a - c0
  kCSub,   // c0 - a
  kMulC,   // a * c0
  kDivC,   // a / c0
  kCDiv,   // c0 / a
  kNeg,
  kAbs,
  kExp,
  kMin,
  kMax,
  kMinC,
  kMaxC,
  kClamp,  // [c0, c1]
  kSum,
  kMeanMasked,  // aux = mask (same size), c0 = mask sum
  kBoxMean3,    // aux = validity mask, idx unused; count-normalized 3x3 mean
  kDiffX,
  kDiffY,
  kAvgPool2,
  kWarp,  // parents: src (a), u (b), v (b2); aux = [fu, fv] per px; idx = base or -1
};

struct Node {
  Op op = Op::kLeaf;
  int a = -1, b = -1, b2 = -1;
  Tensor val;
  double c0 = 0.0, c1 = 0.0;
  std::vector<double> aux;
  std::vector<int32_t> idx;
};

class Tape {
 public:
  Var leaf(Tensor t);
  // Same node kind as leaf; named separately where the caller will never ask
  // for the gradient.
  Var constant(Tensor t) { return leaf(std::move(t)); }
  Var constant(double v) { return leaf(Tensor::scalar(v)); }

  const Tensor& value(Var v) const { return node(v).val; }
  size_t num_nodes() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse id order.
  void backward(Var loss);
  bool has_gradients() const { return !grads_.empty(); }
  const Tensor& grad(Var v) const;

  const Node& node(Var v) const;
  Node& node(Var v);

 private:
  friend Var binary(Op op, Var a, Var b);
  friend Var binary_c(Op op, Var a, double c);
  friend Var unary(Op op, Var a, double c0, double c1);
  friend Var reduce_sum(Var a);
  friend Var reduce_mean_masked(Var a, const Tensor* mask);
  friend Var box_mean3(Var a, const Tensor* valid);
  friend Var diff_x(Var a);
  friend Var diff_y(Var a);
  friend Var avg_pool2(Var a);
  friend Var warp_bilinear(Var src, Var u, Var v, const Tensor& visible, Tensor* valid_out);

  int push(Node n);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Elementwise arithmetic. Shapes must match, or one side must be a scalar
// tensor (rank 0), which broadcasts.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);  // throws if any |b| <= kDivEps
Var operator+(Var a, double c);
Var operator-(Var a, double c);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator/(Var a, double c);
Var operator/(double c, Var a);
Var operator-(Var a);
inline Var operator+(double c, Var a) { return a + c; }
inline Var operator*(double c, Var a) { return a * c; }

Var safe_div(Var a, Var b);  // |b| <= kDivEps replaced by signed kDivEps
Var vabs(Var a);
Var vexp(Var a);
Var vmin(Var a, Var b);
Var vmax(Var a, Var b);
Var vmin(Var a, double c);
Var vmax(Var a, double c);
Var vclamp(Var a, double lo, double hi);

Var reduce_sum(Var a);
// Mean over mask (values in {0,1}); mask == nullptr averages all entries.
// Empty mask yields scalar 0 with zero gradient.
Var reduce_mean_masked(Var a, const Tensor* mask);
inline Var reduce_mean(Var a) { return reduce_mean_masked(a, nullptr); }

// 3x3 local mean over in-bounds (and valid, if given) neighbors, normalized
// by their count. Invalid pixels output 0 and their values are never read.
Var box_mean3(Var a, const Tensor* valid = nullptr);

// Forward differences; diff_x yields {H, W-1}, diff_y yields {H-1, W}.
Var diff_x(Var a);
Var diff_y(Var a);

// 2x2 average pooling with floor division; odd trailing row/col is dropped.
Var avg_pool2(Var a);

// Bilinear sample of src at (u, v) per target pixel. Differentiable w.r.t.
// src values and w.r.t. the coordinates. A target pixel is valid when
// visible(px) != 0 and all four neighbors are in bounds; invalid pixels
// output 0 and receive/propagate no gradient. valid_out, if non-null,
// receives the resulting mask.
Var warp_bilinear(Var src, Var u, Var v, const Tensor& visible, Tensor* valid_out);

}  // namespace ad
}  // namespace depthlab

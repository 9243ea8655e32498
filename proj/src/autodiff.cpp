#include "depthlab/autodiff.hpp"

#include <cmath>
#include <cstring>

namespace depthlab {
namespace ad {

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("autodiff: vars from different tapes");
}

bool broadcastable(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) || a.is_scalar() || b.is_scalar();
}

// Shape of the elementwise result under scalar broadcasting.
const Tensor& wide(const Tensor& a, const Tensor& b) { return a.is_scalar() ? b : a; }

double expc(double x) { return std::exp(std::fmin(709.0, std::fmax(-745.0, x))); }

}  // namespace

Var Tape::leaf(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.val = std::move(t);
  return Var{this, push(std::move(n))};
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Node& Tape::node(Var v) const {
  if (!v.valid() || v.tape != this || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("autodiff: bad var handle");
  return nodes_[static_cast<size_t>(v.id)];
}

Node& Tape::node(Var v) {
  return const_cast<Node&>(static_cast<const Tape*>(this)->node(v));
}

const Tensor& Tape::grad(Var v) const {
  if (grads_.empty()) throw std::logic_error("autodiff: backward() has not run");
  node(v);  // validates handle
  return grads_[static_cast<size_t>(v.id)];
}

Var binary(Op op, Var a, Var b) {
  check_same_tape(a, b);
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  const Tensor& vb = t->value(b);
  if (!broadcastable(va, vb))
    throw std::invalid_argument("autodiff: shape mismatch " + shape_str(va) + " vs " + shape_str(vb));
  const Tensor& ref = wide(va, vb);
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.val = Tensor::zeros(ref.shape);
  const int64_t size = ref.size();
  const bool sa = va.is_scalar(), sb = vb.is_scalar();
  for (int64_t i = 0; i < size; ++i) {
    const double x = va[sa ? 0 : i];
    const double y = vb[sb ? 0 : i];
    double r = 0;
    switch (op) {
      case Op::kAdd: r = x + y; break;
      case Op::kSub: r = x - y; break;
      case Op::kMul: r = x * y; break;
      case Op::kDiv:
        if (std::abs(y) <= kDivEps)
          throw std::domain_error("autodiff: division by |y| <= eps; use safe_div");
        r = x / y;
        break;
      case Op::kSafeDiv:
        r = x / (std::abs(y) > kDivEps ? y : (y >= 0 ? kDivEps : -kDivEps));
        break;
      case Op::kMin: r = (x <= y) ? x : y; break;
      case Op::kMax: r = (x >= y) ? x : y; break;
      default: throw std::logic_error("binary: bad op");
    }
    n.val[i] = r;
  }
  return Var{t, t->push(std::move(n))};
}

Var binary_c(Op op, Var a, double c) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  Node n;
  n.op = op;
  n.a = a.id;
  n.c0 = c;
  n.val = Tensor::zeros(va.shape);
  for (int64_t i = 0; i < va.size(); ++i) {
    const double x = va[i];
    double r = 0;
    switch (op) {
      case Op::kAddC: r = x + c; break;
      case Op::kSubC: r = x - c; break;
      case Op::kCSub: r = c - x; break;
      case Op::kMulC: r = x * c; break;
      case Op::kDivC:
        if (std::abs(c) <= kDivEps) throw std::domain_error("autodiff: division by constant ~0");
        r = x / c;
        break;
      case Op::kCDiv:
        if (std::abs(x) <= kDivEps)
          throw std::domain_error("autodiff: c/x with |x| <= eps");
        r = c / x;
        break;
      case Op::kMinC: r = (x <= c) ? x : c; break;
      case Op::kMaxC: r = (x >= c) ? x : c; break;
      default: throw std::logic_error("binary_c: bad op");
    }
    n.val[i] = r;
  }
  return Var{t, t->push(std::move(n))};
}

Var unary(Op op, Var a, double c0, double c1) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  Node n;
  n.op = op;
  n.a = a.id;
  n.c0 = c0;
  n.c1 = c1;
  n.val = Tensor::zeros(va.shape);
  for (int64_t i = 0; i < va.size(); ++i) {
    const double x = va[i];
    double r = 0;
    switch (op) {
      case Op::kNeg: r = -x; break;
      case Op::kAbs: r = std::abs(x); break;
      case Op::kExp: r = expc(x); break;
      case Op::kClamp: r = std::fmin(c1, std::fmax(c0, x)); break;
      default: throw std::logic_error("unary: bad op");
    }
    n.val[i] = r;
  }
  return Var{t, t->push(std::move(n))};
}

Var operator+(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var operator-(Var a, Var b) { return binary(Op::kSub, a, b); }
Var operator*(Var a, Var b) { return binary(Op::kMul, a, b); }
Var operator/(Var a, Var b) { return binary(Op::kDiv, a, b); }
Var operator+(Var a, double c) { return binary_c(Op::kAddC, a, c); }
Var operator-(Var a, double c) { return binary_c(Op::kSubC, a, c); }
Var operator-(double c, Var a) { return binary_c(Op::kCSub, a, c); }
Var operator*(Var a, double c) { return binary_c(Op::kMulC, a, c); }
Var operator/(Var a, double c) { return binary_c(Op::kDivC, a, c); }
Var operator/(double c, Var a) { return binary_c(Op::kCDiv, a, c); }
Var operator-(Var a) { return unary(Op::kNeg, a, 0, 0); }
Var vabs(Var a) { return unary(Op::kAbs, a, 0, 0); }
Var vexp(Var a) { return unary(Op::kExp, a, 0, 0); }
Var vmin(Var a, Var b) { return binary(Op::kMin, a, b); }
Var vmax(Var a, Var b) { return binary(Op::kMax, a, b); }
Var vmin(Var a, double c) { return binary_c(Op::kMinC, a, c); }
Var vmax(Var a, double c) { return binary_c(Op::kMaxC, a, c); }
Var vclamp(Var a, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("vclamp: lo >= hi");
  return unary(Op::kClamp, a, lo, hi);
}

Var safe_div(Var a, Var b) { return binary(Op::kSafeDiv, a, b); }

Var reduce_sum(Var a) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  Node n;
  n.op = Op::kSum;
  n.a = a.id;
  double s = 0;
  for (int64_t i = 0; i < va.size(); ++i) s += va[i];
  n.val = Tensor::scalar(s);
  return Var{t, t->push(std::move(n))};
}

Var reduce_mean_masked(Var a, const Tensor* mask) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  Node n;
  n.op = Op::kMeanMasked;
  n.a = a.id;
  double s = 0, cnt = 0;
  if (mask) {
    if (!mask->same_shape(va))
      throw std::invalid_argument("reduce_mean_masked: mask shape mismatch");
    n.aux.resize(static_cast<size_t>(va.size()));
    for (int64_t i = 0; i < va.size(); ++i) {
      const double m = (*mask)[i] != 0.0 ? 1.0 : 0.0;
      n.aux[static_cast<size_t>(i)] = m;
      s += m * va[i];
      cnt += m;
    }
  } else {
    for (int64_t i = 0; i < va.size(); ++i) s += va[i];
    cnt = static_cast<double>(va.size());
  }
  n.c0 = cnt;
  n.val = Tensor::scalar(cnt > 0 ? s / cnt : 0.0);
  return Var{t, t->push(std::move(n))};
}

Var box_mean3(Var a, const Tensor* valid) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  if (va.shape.size() != 2) throw std::invalid_argument("box_mean3: expects {H, W}");
  const int64_t h = va.rows(), w = va.cols();
  if (valid && !valid->same_shape(va))
    throw std::invalid_argument("box_mean3: validity shape mismatch");
  Node n;
  n.op = Op::kBoxMean3;
  n.a = a.id;
  n.aux.resize(static_cast<size_t>(va.size()), 1.0);
  if (valid)
    for (int64_t i = 0; i < va.size(); ++i)
      n.aux[static_cast<size_t>(i)] = (*valid)[i] != 0.0 ? 1.0 : 0.0;
  n.val = Tensor::zeros(va.shape);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (n.aux[static_cast<size_t>(y * w + x)] == 0.0) continue;
      double s = 0;
      int cnt = 0;
      for (int64_t dy = -1; dy <= 1; ++dy) {
        for (int64_t dx = -1; dx <= 1; ++dx) {
          const int64_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (n.aux[static_cast<size_t>(yy * w + xx)] == 0.0) continue;
          s += va.at(yy, xx);
          ++cnt;
        }
      }
      n.val.at(y, x) = cnt > 0 ? s / cnt : 0.0;
    }
  }
  return Var{t, t->push(std::move(n))};
}

Var diff_x(Var a) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  if (va.shape.size() != 2 || va.cols() < 2)
    throw std::invalid_argument("diff_x: expects {H, W>=2}");
  const int64_t h = va.rows(), w = va.cols();
  Node n;
  n.op = Op::kDiffX;
  n.a = a.id;
  n.val = Tensor::zeros({h, w - 1});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w - 1; ++x) n.val.at(y, x) = va.at(y, x + 1) - va.at(y, x);
  return Var{t, t->push(std::move(n))};
}

Var diff_y(Var a) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  if (va.shape.size() != 2 || va.rows() < 2)
    throw std::invalid_argument("diff_y: expects {H>=2, W}");
  const int64_t h = va.rows(), w = va.cols();
  Node n;
  n.op = Op::kDiffY;
  n.a = a.id;
  n.val = Tensor::zeros({h - 1, w});
  for (int64_t y = 0; y < h - 1; ++y)
    for (int64_t x = 0; x < w; ++x) n.val.at(y, x) = va.at(y + 1, x) - va.at(y, x);
  return Var{t, t->push(std::move(n))};
}

Var avg_pool2(Var a) {
  Tape* t = a.tape;
  const Tensor& va = t->value(a);
  if (va.shape.size() != 2 || va.rows() < 2 || va.cols() < 2)
    throw std::invalid_argument("avg_pool2: expects {H>=2, W>=2}");
  const int64_t h2 = va.rows() / 2, w2 = va.cols() / 2;
  Node n;
  n.op = Op::kAvgPool2;
  n.a = a.id;
  n.val = Tensor::zeros({h2, w2});
  for (int64_t y = 0; y < h2; ++y)
    for (int64_t x = 0; x < w2; ++x)
      n.val.at(y, x) = 0.25 * (va.at(2 * y, 2 * x) + va.at(2 * y, 2 * x + 1) +
                               va.at(2 * y + 1, 2 * x) + va.at(2 * y + 1, 2 * x + 1));
  return Var{t, t->push(std::move(n))};
}

Var warp_bilinear(Var src, Var u, Var v, const Tensor& visible, Tensor* valid_out) {
  check_same_tape(src, u);
  check_same_tape(u, v);
  Tape* t = src.tape;
  const Tensor& vs = t->value(src);
  const Tensor& vu = t->value(u);
  const Tensor& vv = t->value(v);
  if (vs.shape.size() != 2) throw std::invalid_argument("warp: src must be {H, W}");
  if (!vu.same_shape(vv) || vu.shape.size() != 2)
    throw std::invalid_argument("warp: u/v must be matching {H, W}");
  if (!visible.same_shape(vu)) throw std::invalid_argument("warp: visibility shape mismatch");
  const int64_t sh = vs.rows(), sw = vs.cols();
  Node n;
  n.op = Op::kWarp;
  n.a = src.id;
  n.b = u.id;
  n.b2 = v.id;
  n.val = Tensor::zeros(vu.shape);
  n.idx.resize(static_cast<size_t>(vu.size()), -1);
  n.aux.resize(static_cast<size_t>(2 * vu.size()), 0.0);
  Tensor valid = Tensor::zeros(vu.shape);
  for (int64_t i = 0; i < vu.size(); ++i) {
    if (visible[i] == 0.0) continue;
    const double x = vu[i], y = vv[i];
    const double xf = std::floor(x), yf = std::floor(y);
    const int64_t x0 = static_cast<int64_t>(xf), y0 = static_cast<int64_t>(yf);
    if (x0 < 0 || y0 < 0 || x0 + 1 >= sw || y0 + 1 >= sh) continue;
    const double fu = x - xf, fv = y - yf;
    const double s00 = vs.at(y0, x0), s01 = vs.at(y0, x0 + 1);
    const double s10 = vs.at(y0 + 1, x0), s11 = vs.at(y0 + 1, x0 + 1);
    n.val[i] = (1 - fv) * ((1 - fu) * s00 + fu * s01) + fv * ((1 - fu) * s10 + fu * s11);
    n.idx[static_cast<size_t>(i)] = static_cast<int32_t>(y0 * sw + x0);
    n.aux[static_cast<size_t>(2 * i)] = fu;
    n.aux[static_cast<size_t>(2 * i + 1)] = fv;
    valid[i] = 1.0;
  }
  if (valid_out) *valid_out = std::move(valid);
  return Var{t, t->push(std::move(n))};
}

void Tape::backward(Var loss) {
  const Node& ln = node(loss);
  if (!ln.val.is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
  if (!std::isfinite(ln.val[0])) throw std::domain_error("backward: loss is not finite");
  grads_.assign(nodes_.size(), Tensor{});
  auto g = [&](int id) -> Tensor& {
    Tensor& t = grads_[static_cast<size_t>(id)];
    if (t.data.empty()) t = Tensor::zeros(nodes_[static_cast<size_t>(id)].val.shape);
    return t;
  };
  g(loss.id)[0] = 1.0;

  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.op == Op::kLeaf) continue;
    Tensor& go = grads_[static_cast<size_t>(id)];
    if (go.data.empty()) continue;  // node does not feed the loss

    auto acc = [&](int parent, int64_t flat, double v) {
      if (v == 0.0) return;
      Tensor& gp = g(parent);
      gp[gp.is_scalar() ? 0 : flat] += v;
    };
    const Tensor* va = n.a >= 0 ? &nodes_[static_cast<size_t>(n.a)].val : nullptr;
    const Tensor* vb = n.b >= 0 ? &nodes_[static_cast<size_t>(n.b)].val : nullptr;
    const bool sa = va && va->is_scalar();
    const bool sb = vb && vb->is_scalar();

    switch (n.op) {
      case Op::kLeaf: break;
      case Op::kAdd:
        for (int64_t i = 0; i < go.size(); ++i) {
          acc(n.a, i, go[i]);
          acc(n.b, i, go[i]);
        }
        break;
      case Op::kSub:
        for (int64_t i = 0; i < go.size(); ++i) {
          acc(n.a, i, go[i]);
          acc(n.b, i, -go[i]);
        }
        break;
      case Op::kMul:
        for (int64_t i = 0; i < go.size(); ++i) {
          acc(n.a, i, go[i] * (*vb)[sb ? 0 : i]);
          acc(n.b, i, go[i] * (*va)[sa ? 0 : i]);
        }
        break;
      case Op::kDiv:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double y = (*vb)[sb ? 0 : i];
          acc(n.a, i, go[i] / y);
          acc(n.b, i, -go[i] * n.val[i] / y);
        }
        break;
      case Op::kSafeDiv:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double y = (*vb)[sb ? 0 : i];
          const bool capped = std::abs(y) <= kDivEps;
          const double d = capped ? (y >= 0 ? kDivEps : -kDivEps) : y;
          acc(n.a, i, go[i] / d);
          // Inside the cap the denominator no longer depends on y.
          if (!capped) acc(n.b, i, -go[i] * n.val[i] / d);
        }
        break;
      case Op::kAddC:
      case Op::kSubC:
        for (int64_t i = 0; i < go.size(); ++i) acc(n.a, i, go[i]);
        break;
      case Op::kCSub:
      case Op::kNeg:
        for (int64_t i = 0; i < go.size(); ++i) acc(n.a, i, -go[i]);
        break;
      case Op::kMulC:
        for (int64_t i = 0; i < go.size(); ++i) acc(n.a, i, go[i] * n.c0);
        break;
      case Op::kDivC:
        for (int64_t i = 0; i < go.size(); ++i) acc(n.a, i, go[i] / n.c0);
        break;
      case Op::kCDiv:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double x = (*va)[i];
          acc(n.a, i, -go[i] * n.c0 / (x * x));
        }
        break;
      case Op::kAbs:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double x = (*va)[i];
          acc(n.a, i, go[i] * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0)));
        }
        break;
      case Op::kExp:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double x = (*va)[i];
          if (x > -745.0 && x < 709.0) acc(n.a, i, go[i] * n.val[i]);
        }
        break;
      case Op::kMin:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double x = (*va)[sa ? 0 : i], y = (*vb)[sb ? 0 : i];
          if (x <= y)
            acc(n.a, i, go[i]);
          else
            acc(n.b, i, go[i]);
        }
        break;
      case Op::kMax:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double x = (*va)[sa ? 0 : i], y = (*vb)[sb ? 0 : i];
          if (x >= y)
            acc(n.a, i, go[i]);
          else
            acc(n.b, i, go[i]);
        }
        break;
      case Op::kMinC:
        for (int64_t i = 0; i < go.size(); ++i)
          if ((*va)[i] <= n.c0) acc(n.a, i, go[i]);
        break;
      case Op::kMaxC:
        for (int64_t i = 0; i < go.size(); ++i)
          if ((*va)[i] >= n.c0) acc(n.a, i, go[i]);
        break;
      case Op::kClamp:
        for (int64_t i = 0; i < go.size(); ++i) {
          const double x = (*va)[i];
          if (x > n.c0 && x < n.c1) acc(n.a, i, go[i]);
        }
        break;
      case Op::kSum: {
        const double gs = go[0];
        for (int64_t i = 0; i < va->size(); ++i) acc(n.a, i, gs);
        break;
      }
      case Op::kMeanMasked: {
        if (n.c0 <= 0) break;
        const double gs = go[0] / n.c0;
        if (n.aux.empty()) {
          for (int64_t i = 0; i < va->size(); ++i) acc(n.a, i, gs);
        } else {
          for (int64_t i = 0; i < va->size(); ++i)
            if (n.aux[static_cast<size_t>(i)] != 0.0) acc(n.a, i, gs);
        }
        break;
      }
      case Op::kBoxMean3: {
        const int64_t h = n.val.rows(), w = n.val.cols();
        for (int64_t y = 0; y < h; ++y) {
          for (int64_t x = 0; x < w; ++x) {
            const double gi = go.at(y, x);
            if (gi == 0.0 || n.aux[static_cast<size_t>(y * w + x)] == 0.0) continue;
            int cnt = 0;
            for (int64_t dy = -1; dy <= 1; ++dy)
              for (int64_t dx = -1; dx <= 1; ++dx) {
                const int64_t yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                if (n.aux[static_cast<size_t>(yy * w + xx)] != 0.0) ++cnt;
              }
            if (cnt == 0) continue;
            const double gv = gi / cnt;
            for (int64_t dy = -1; dy <= 1; ++dy)
              for (int64_t dx = -1; dx <= 1; ++dx) {
                const int64_t yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                if (n.aux[static_cast<size_t>(yy * w + xx)] != 0.0) acc(n.a, yy * w + xx, gv);
              }
          }
        }
        break;
      }
      case Op::kDiffX: {
        const int64_t h = n.val.rows(), w = n.val.cols();  // w == src_w - 1
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            const double gi = go.at(y, x);
            if (gi == 0.0) continue;
            acc(n.a, y * (w + 1) + x + 1, gi);
            acc(n.a, y * (w + 1) + x, -gi);
          }
        break;
      }
      case Op::kDiffY: {
        const int64_t h = n.val.rows(), w = n.val.cols();
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            const double gi = go.at(y, x);
            if (gi == 0.0) continue;
            acc(n.a, (y + 1) * w + x, gi);
            acc(n.a, y * w + x, -gi);
          }
        break;
      }
      case Op::kAvgPool2: {
        const int64_t h2 = n.val.rows(), w2 = n.val.cols();
        const int64_t w = va->cols();
        for (int64_t y = 0; y < h2; ++y)
          for (int64_t x = 0; x < w2; ++x) {
            const double gi = 0.25 * go.at(y, x);
            if (gi == 0.0) continue;
            acc(n.a, (2 * y) * w + 2 * x, gi);
            acc(n.a, (2 * y) * w + 2 * x + 1, gi);
            acc(n.a, (2 * y + 1) * w + 2 * x, gi);
            acc(n.a, (2 * y + 1) * w + 2 * x + 1, gi);
          }
        break;
      }
      case Op::kWarp: {
        const Tensor& vsrc = *va;
        const int64_t sw = vsrc.cols();
        for (int64_t i = 0; i < go.size(); ++i) {
          const double gi = go[i];
          if (gi == 0.0) continue;
          const int32_t base = n.idx[static_cast<size_t>(i)];
          if (base < 0) continue;
          const double fu = n.aux[static_cast<size_t>(2 * i)];
          const double fv = n.aux[static_cast<size_t>(2 * i + 1)];
          const int64_t i00 = base, i01 = base + 1, i10 = base + sw, i11 = base + sw + 1;
          acc(n.a, i00, gi * (1 - fv) * (1 - fu));
          acc(n.a, i01, gi * (1 - fv) * fu);
          acc(n.a, i10, gi * fv * (1 - fu));
          acc(n.a, i11, gi * fv * fu);
          const double s00 = vsrc[i00], s01 = vsrc[i01], s10 = vsrc[i10], s11 = vsrc[i11];
          acc(n.b, i, gi * ((1 - fv) * (s01 - s00) + fv * (s11 - s10)));
          acc(n.b2, i, gi * ((1 - fu) * (s10 - s00) + fu * (s11 - s01)));
        }
        break;
      }
    }
  }

  // Nodes the loss never touched still answer grad() with a proper zero.
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (grads_[i].data.empty()) grads_[i] = Tensor::zeros(nodes_[i].val.shape);
}

}  // namespace ad
}  // namespace depthlab

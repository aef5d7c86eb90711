#include "dadet/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace dadet {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<T>;

void require(bool ok, const char* msg) {
  if (!ok) throw ShapeMismatch(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) throw ShapeMismatch(std::string(op) + ": shape mismatch");
}

}  // namespace

int shape_size(const std::vector<int>& s) {
  int n = 1;
  for (int e : s) n *= e;
  return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_size(shape) != int(data.size()))
    throw ShapeMismatch("Tensor: shape does not match data length");
}

Tensor Tensor::zeros(std::vector<int> s) {
  Tensor t;
  t.data.assign(size_t(shape_size(s)), 0.0);
  t.shape = std::move(s);
  return t;
}

Tensor Tensor::full(std::vector<int> s, double v) {
  Tensor t = zeros(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- GradTape ---------------------------------------------------------------

void GradTape::watch(Tensor& t) {
  t.requires_grad = true;
  t.node = add_node(t.size(), nullptr);
}

int GradTape::add_node(int size, BackwardFn fn) {
  nodes_.push_back(Node{size, std::move(fn), {}, false});
  return int(nodes_.size()) - 1;
}

std::vector<double>& GradTape::grad_buffer(int node) {
  Node& n = nodes_[size_t(node)];
  if (!n.touched) {
    n.grad.assign(size_t(n.size), 0.0);
    n.touched = true;
  }
  return n.grad;
}

void GradTape::backward(const Tensor& loss) {
  if (ran_) throw ShapeMismatch("backward: tape already consumed");
  if (!loss.tracked()) throw ShapeMismatch("backward: loss is not on this tape");
  if (loss.size() != 1) throw ShapeMismatch("backward: loss must be scalar");
  grad_buffer(loss.node)[0] += 1.0;
  for (int i = loss.node; i >= 0; --i) {
    Node& n = nodes_[size_t(i)];
    if (n.touched && n.fn) n.fn(*this, n.grad);
  }
  ran_ = true;
}

const std::vector<double>& GradTape::grad(const Tensor& t) const {
  if (!t.tracked()) throw ShapeMismatch("grad: tensor is not on this tape");
  const Node& n = nodes_[size_t(t.node)];
  if (!n.touched) {
    zeros_.assign(size_t(n.size), 0.0);
    return zeros_;
  }
  return n.grad;
}

void GradTape::write_grad(Tensor& t) const { t.grad = grad(t); }

// ---- elementwise ------------------------------------------------------------

namespace {

// Shared recording for binary elementwise ops with gradients
// (da, db) = (ga(g), gb(g)) given by per-element factors.
template <typename FA, typename FB>
void record_binary(GradTape* tape, const Tensor& a, const Tensor& b, Tensor& y,
                   FA fa, FB fb) {
  if (!tape || (!a.tracked() && !b.tracked())) return;
  int an = a.node, bn = b.node;
  y.node = tape->add_node(y.size(), [an, bn, fa, fb](GradTape& t,
                                                     const std::vector<double>& g) {
    if (an >= 0) {
      auto& ga = t.grad_buffer(an);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += fa(i, g[i]);
    }
    if (bn >= 0) {
      auto& gb = t.grad_buffer(bn);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += fb(i, g[i]);
    }
  });
  y.requires_grad = true;
}

}  // namespace

Tensor add(GradTape* tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y = a;
  y.node = -1;
  y.requires_grad = false;
  y.grad.clear();
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
  record_binary(
      tape, a, b, y, [](size_t, double g) { return g; },
      [](size_t, double g) { return g; });
  return y;
}

Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a;
  y.node = -1;
  y.requires_grad = false;
  y.grad.clear();
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] -= b.data[i];
  record_binary(
      tape, a, b, y, [](size_t, double g) { return g; },
      [](size_t, double g) { return -g; });
  return y;
}

Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y;
  y.shape = a.shape;
  y.data.resize(a.data.size());
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.data[i] * b.data[i];
  if (tape && (a.tracked() || b.tracked())) {
    auto ad = std::make_shared<std::vector<double>>(a.data);
    auto bd = std::make_shared<std::vector<double>>(b.data);
    record_binary(
        tape, a, b, y, [bd](size_t i, double g) { return g * (*bd)[i]; },
        [ad](size_t i, double g) { return g * (*ad)[i]; });
  }
  return y;
}

Tensor mul_scalar(GradTape* tape, const Tensor& a, double s) {
  Tensor y;
  y.shape = a.shape;
  y.data.resize(a.data.size());
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.data[i] * s;
  if (tape && a.tracked()) {
    int an = a.node;
    y.node = tape->add_node(y.size(), [an, s](GradTape& t,
                                              const std::vector<double>& g) {
      auto& ga = t.grad_buffer(an);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor relu(GradTape* tape, const Tensor& x) {
  Tensor y;
  y.shape = x.shape;
  y.data.resize(x.data.size());
  for (size_t i = 0; i < y.data.size(); ++i)
    y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
  if (tape && x.tracked()) {
    int xn = x.node;
    auto xd = std::make_shared<std::vector<double>>(x.data);
    y.node = tape->add_node(y.size(), [xn, xd](GradTape& t,
                                               const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (size_t i = 0; i < g.size(); ++i)
        if ((*xd)[i] > 0.0) gx[i] += g[i];
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor log(GradTape* tape, const Tensor& x) {
  Tensor y;
  y.shape = x.shape;
  y.data.resize(x.data.size());
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::log(x.data[i]);
  if (tape && x.tracked()) {
    int xn = x.node;
    auto xd = std::make_shared<std::vector<double>>(x.data);
    y.node = tape->add_node(y.size(), [xn, xd](GradTape& t,
                                               const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (*xd)[i];
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor exp(GradTape* tape, const Tensor& x) {
  Tensor y;
  y.shape = x.shape;
  y.data.resize(x.data.size());
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::exp(x.data[i]);
  if (tape && x.tracked()) {
    int xn = x.node;
    auto yd = std::make_shared<std::vector<double>>(y.data);
    y.node = tape->add_node(y.size(), [xn, yd](GradTape& t,
                                               const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*yd)[i];
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor smooth_l1(GradTape* tape, const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "smooth_l1");
  Tensor y;
  y.shape = pred.shape;
  y.data.resize(pred.data.size());
  std::vector<double> diff(pred.data.size());
  for (size_t i = 0; i < y.data.size(); ++i) {
    double d = pred.data[i] - target.data[i];
    diff[i] = d;
    double a = std::abs(d);
    y.data[i] = a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  if (tape && pred.tracked()) {
    int pn = pred.node;
    auto dd = std::make_shared<std::vector<double>>(std::move(diff));
    y.node = tape->add_node(y.size(), [pn, dd](GradTape& t,
                                               const std::vector<double>& g) {
      auto& gp = t.grad_buffer(pn);
      for (size_t i = 0; i < g.size(); ++i) {
        double d = (*dd)[i];
        gp[i] += g[i] * std::clamp(d, -1.0, 1.0);
      }
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor sum(GradTape* tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data) s += v;
  Tensor y({1}, {s});
  if (tape && x.tracked()) {
    int xn = x.node;
    int n = x.size();
    y.node = tape->add_node(1, [xn, n](GradTape& t, const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (int i = 0; i < n; ++i) gx[size_t(i)] += g[0];
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor mean(GradTape* tape, const Tensor& x) {
  require(x.size() > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : x.data) s += v;
  double inv = 1.0 / double(x.size());
  Tensor y({1}, {s * inv});
  if (tape && x.tracked()) {
    int xn = x.node;
    int n = x.size();
    y.node = tape->add_node(1, [xn, n, inv](GradTape& t,
                                            const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (int i = 0; i < n; ++i) gx[size_t(i)] += g[0] * inv;
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor sum_rows(GradTape* tape, const Tensor& x) {
  require(x.shape.size() == 2, "sum_rows: expected [R,C]");
  const int r = x.shape[0], c = x.shape[1];
  Tensor y = Tensor::zeros({r});
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    const double* row = &x.data[size_t(i) * c];
    for (int j = 0; j < c; ++j) s += row[j];
    y.data[size_t(i)] = s;
  }
  if (tape && x.tracked()) {
    int xn = x.node;
    y.node = tape->add_node(r, [xn, r, c](GradTape& t,
                                          const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gx[size_t(i) * c + j] += g[size_t(i)];
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor expand_rows(GradTape* tape, const Tensor& v, int cols) {
  require(v.shape.size() == 1, "expand_rows: expected [R]");
  const int r = v.shape[0];
  Tensor y = Tensor::zeros({r, cols});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < cols; ++j) y.data[size_t(i) * cols + j] = v.data[size_t(i)];
  if (tape && v.tracked()) {
    int vn = v.node;
    y.node = tape->add_node(y.size(), [vn, r, cols](GradTape& t,
                                                    const std::vector<double>& g) {
      auto& gv = t.grad_buffer(vn);
      for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int j = 0; j < cols; ++j) s += g[size_t(i) * cols + j];
        gv[size_t(i)] += s;
      }
    });
    y.requires_grad = true;
  }
  return y;
}

// ---- shape -------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> s) {
  require(shape_size(s) == x.size(), "reshape: element count mismatch");
  Tensor y = x;
  y.shape = std::move(s);
  y.grad.clear();
  return y;
}

Tensor transpose2d(GradTape* tape, const Tensor& x) {
  require(x.shape.size() == 2, "transpose2d: expected [R,C]");
  const int r = x.shape[0], c = x.shape[1];
  Tensor y = Tensor::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y.data[size_t(j) * r + i] = x.data[size_t(i) * c + j];
  if (tape && x.tracked()) {
    int xn = x.node;
    y.node = tape->add_node(y.size(), [xn, r, c](GradTape& t,
                                                 const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gx[size_t(i) * c + j] += g[size_t(j) * r + i];
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor stack_rows(GradTape* tape, const std::vector<Tensor>& rows) {
  require(!rows.empty(), "stack_rows: empty input");
  const int d = rows[0].size();
  const int n = int(rows.size());
  Tensor y = Tensor::zeros({n, d});
  bool any_tracked = false;
  std::vector<int> nodes(rows.size());
  for (int i = 0; i < n; ++i) {
    require(rows[size_t(i)].size() == d, "stack_rows: rows differ in size");
    std::copy(rows[size_t(i)].data.begin(), rows[size_t(i)].data.end(),
              y.data.begin() + size_t(i) * d);
    nodes[size_t(i)] = rows[size_t(i)].node;
    any_tracked = any_tracked || rows[size_t(i)].tracked();
  }
  if (tape && any_tracked) {
    y.node = tape->add_node(y.size(), [nodes, d](GradTape& t,
                                                 const std::vector<double>& g) {
      for (size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i] < 0) continue;
        auto& gr = t.grad_buffer(nodes[i]);
        for (int j = 0; j < d; ++j) gr[size_t(j)] += g[i * size_t(d) + j];
      }
    });
    y.requires_grad = true;
  }
  return y;
}

// ---- linear algebra ------------------------------------------------------------

Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2, "matmul: expected 2-d");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k) throw ShapeMismatch("matmul: inner dimensions differ");
  Tensor y = Tensor::zeros({m, n});
  Map<const RowMat> A(a.data.data(), m, k);
  Map<const RowMat> B(b.data.data(), k, n);
  Map<RowMat> Y(y.data.data(), m, n);
  Y.noalias() = A * B;
  if (tape && (a.tracked() || b.tracked())) {
    int an = a.node, bn = b.node;
    auto ad = std::make_shared<std::vector<double>>(a.data);
    auto bd = std::make_shared<std::vector<double>>(b.data);
    y.node = tape->add_node(y.size(), [=](GradTape& t, const std::vector<double>& g) {
      Map<const RowMat> G(g.data(), m, n);
      if (an >= 0) {
        Map<RowMat> GA(t.grad_buffer(an).data(), m, k);
        Map<const RowMat> B2(bd->data(), k, n);
        GA.noalias() += G * B2.transpose();
      }
      if (bn >= 0) {
        Map<RowMat> GB(t.grad_buffer(bn).data(), k, n);
        Map<const RowMat> A2(ad->data(), m, k);
        GB.noalias() += A2.transpose() * G;
      }
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor matmul_nt(GradTape* tape, const Tensor& a, const Tensor& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2, "matmul_nt: expected 2-d");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  if (b.shape[1] != k) throw ShapeMismatch("matmul_nt: inner dimensions differ");
  Tensor y = Tensor::zeros({m, n});
  Map<const RowMat> A(a.data.data(), m, k);
  Map<const RowMat> B(b.data.data(), n, k);
  Map<RowMat> Y(y.data.data(), m, n);
  Y.noalias() = A * B.transpose();
  if (tape && (a.tracked() || b.tracked())) {
    int an = a.node, bn = b.node;
    auto ad = std::make_shared<std::vector<double>>(a.data);
    auto bd = std::make_shared<std::vector<double>>(b.data);
    y.node = tape->add_node(y.size(), [=](GradTape& t, const std::vector<double>& g) {
      Map<const RowMat> G(g.data(), m, n);
      if (an >= 0) {
        Map<RowMat> GA(t.grad_buffer(an).data(), m, k);
        Map<const RowMat> B2(bd->data(), n, k);
        GA.noalias() += G * B2;
      }
      if (bn >= 0) {
        Map<RowMat> GB(t.grad_buffer(bn).data(), n, k);
        Map<const RowMat> A2(ad->data(), m, k);
        GB.noalias() += G.transpose() * A2;
      }
    });
    y.requires_grad = true;
  }
  return y;
}

Tensor linear(GradTape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.shape.size() == 1 && w.shape.size() == 2 && b.shape.size() == 1,
          "linear: expected x[in], w[out,in], b[out]");
  const int in = x.shape[0], out = w.shape[0];
  if (w.shape[1] != in || b.shape[0] != out)
    throw ShapeMismatch("linear: dimension mismatch");
  Tensor y = Tensor::zeros({out});
  for (int o = 0; o < out; ++o) {
    double s = b.data[size_t(o)];
    const double* wr = &w.data[size_t(o) * in];
    for (int i = 0; i < in; ++i) s += wr[i] * x.data[size_t(i)];
    y.data[size_t(o)] = s;
  }
  if (tape && (x.tracked() || w.tracked() || b.tracked())) {
    int xn = x.node, wn = w.node, bn = b.node;
    auto xd = std::make_shared<std::vector<double>>(x.data);
    auto wd = std::make_shared<std::vector<double>>(w.data);
    y.node = tape->add_node(out, [=](GradTape& t, const std::vector<double>& g) {
      if (bn >= 0) {
        auto& gb = t.grad_buffer(bn);
        for (int o = 0; o < out; ++o) gb[size_t(o)] += g[size_t(o)];
      }
      if (wn >= 0) {
        auto& gw = t.grad_buffer(wn);
        for (int o = 0; o < out; ++o)
          for (int i = 0; i < in; ++i)
            gw[size_t(o) * in + i] += g[size_t(o)] * (*xd)[size_t(i)];
      }
      if (xn >= 0) {
        auto& gx = t.grad_buffer(xn);
        for (int o = 0; o < out; ++o)
          for (int i = 0; i < in; ++i)
            gx[size_t(i)] += g[size_t(o)] * (*wd)[size_t(o) * in + i];
      }
    });
    y.requires_grad = true;
  }
  return y;
}

// ---- conv / pool ----------------------------------------------------------------

namespace {

void im2col(const double* x, int ci, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, double* col) {
  const size_t plane = size_t(h) * w;
  const size_t patches = size_t(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    const double* src = x + size_t(c) * plane;
    for (int r = 0; r < kh; ++r) {
      for (int s = 0; s < kw; ++s) {
        double* dst = col + (size_t(c) * kh * kw + size_t(r) * kw + s) * patches;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + r - pad;
          double* drow = dst + size_t(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wo, 0.0);
            continue;
          }
          const double* srow = src + size_t(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + s - pad;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int ci, int h, int w, int kh, int kw,
                int stride, int pad, int ho, int wo, double* gx) {
  const size_t plane = size_t(h) * w;
  const size_t patches = size_t(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    double* dst = gx + size_t(c) * plane;
    for (int r = 0; r < kh; ++r) {
      for (int s = 0; s < kw; ++s) {
        const double* src = col + (size_t(c) * kh * kw + size_t(r) * kw + s) * patches;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + r - pad;
          if (iy < 0 || iy >= h) continue;
          double* drow = dst + size_t(iy) * w;
          const double* srow = src + size_t(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + s - pad;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(GradTape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad) {
  require(x.shape.size() == 3 && w.shape.size() == 4 && b.shape.size() == 1,
          "conv2d: expected x[Ci,H,W], w[Co,Ci,kh,kw], b[Co]");
  const int ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
  const int co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (w.shape[1] != ci) throw ShapeMismatch("conv2d: channel count mismatch");
  if (b.shape[0] != co) throw ShapeMismatch("conv2d: bias size mismatch");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(kh <= h + 2 * pad && kw <= wd + 2 * pad,
          "conv2d: kernel exceeds padded input");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const int k = ci * kh * kw;
  const size_t patches = size_t(ho) * wo;

  auto col = std::make_shared<std::vector<double>>(size_t(k) * patches);
  im2col(x.data.data(), ci, h, wd, kh, kw, stride, pad, ho, wo, col->data());

  Tensor y = Tensor::zeros({co, ho, wo});
  Map<const RowMat> W(w.data.data(), co, k);
  Map<const RowMat> C(col->data(), k, Eigen::Index(patches));
  Map<RowMat> Y(y.data.data(), co, Eigen::Index(patches));
  Y.noalias() = W * C;
  for (int c = 0; c < co; ++c) {
    double bv = b.data[size_t(c)];
    double* row = &y.data[size_t(c) * patches];
    for (size_t p = 0; p < patches; ++p) row[p] += bv;
  }

  if (tape && (x.tracked() || w.tracked() || b.tracked())) {
    int xn = x.node, wn = w.node, bn = b.node;
    auto wd_saved = std::make_shared<std::vector<double>>(w.data);
    y.node = tape->add_node(
        y.size(), [=](GradTape& t, const std::vector<double>& g) {
          Map<const RowMat> G(g.data(), co, Eigen::Index(patches));
          if (bn >= 0) {
            auto& gb = t.grad_buffer(bn);
            for (int c = 0; c < co; ++c) {
              double s = 0.0;
              const double* row = &g[size_t(c) * patches];
              for (size_t p = 0; p < patches; ++p) s += row[p];
              gb[size_t(c)] += s;
            }
          }
          if (wn >= 0) {
            Map<RowMat> GW(t.grad_buffer(wn).data(), co, k);
            Map<const RowMat> C2(col->data(), k, Eigen::Index(patches));
            GW.noalias() += G * C2.transpose();
          }
          if (xn >= 0) {
            std::vector<double> dcol(size_t(k) * patches);
            Map<RowMat> DC(dcol.data(), k, Eigen::Index(patches));
            Map<const RowMat> W2(wd_saved->data(), co, k);
            DC.noalias() = W2.transpose() * G;
            col2im_add(dcol.data(), ci, h, wd, kh, kw, stride, pad, ho, wo,
                       t.grad_buffer(xn).data());
          }
        });
    y.requires_grad = true;
  }
  return y;
}

Tensor max_pool2d(GradTape* tape, const Tensor& x, int k, int stride) {
  require(x.shape.size() == 3, "max_pool2d: expected [C,H,W]");
  require(k >= 1 && stride >= 1, "max_pool2d: bad kernel/stride");
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  require(h >= k && w >= k, "max_pool2d: kernel exceeds input");
  const int ho = (h - k) / stride + 1;
  const int wo = (w - k) / stride + 1;
  Tensor y = Tensor::zeros({c, ho, wo});
  auto argmax = std::make_shared<std::vector<int>>(size_t(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = &x.data[size_t(ch) * h * w];
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int best_idx = -1;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            int idx = (oy * stride + dy) * w + (ox * stride + dx);
            if (plane[idx] > best) {  // strict: first index wins on ties
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        size_t out_idx = (size_t(ch) * ho + oy) * wo + ox;
        y.data[out_idx] = best;
        (*argmax)[out_idx] = best_idx + ch * h * w;
      }
    }
  }
  if (tape && x.tracked()) {
    int xn = x.node;
    y.node = tape->add_node(y.size(), [xn, argmax](GradTape& t,
                                                   const std::vector<double>& g) {
      auto& gx = t.grad_buffer(xn);
      for (size_t i = 0; i < g.size(); ++i) gx[size_t((*argmax)[i])] += g[i];
    });
    y.requires_grad = true;
  }
  return y;
}

// ---- normalization / pooling over boxes -------------------------------------

Tensor l2_normalize(GradTape* tape, const Tensor& v) {
  double sq = 0.0;
  for (double e : v.data) sq += e * e;
  const double norm = std::sqrt(sq);
  if (norm <= kEpsilonNorm)
    throw NearZeroNorm("l2_normalize: input norm below 1e-12");
  Tensor y;
  y.shape = v.shape;
  y.data.resize(v.data.size());
  const double inv = 1.0 / norm;
  for (size_t i = 0; i < v.data.size(); ++i) y.data[i] = v.data[i] * inv;
  if (tape && v.tracked()) {
    int vn = v.node;
    auto yd = std::make_shared<std::vector<double>>(y.data);
    y.node = tape->add_node(y.size(), [vn, yd, inv](GradTape& t,
                                                    const std::vector<double>& g) {
      auto& gv = t.grad_buffer(vn);
      double dot = 0.0;
      for (size_t i = 0; i < g.size(); ++i) dot += g[i] * (*yd)[i];
      for (size_t i = 0; i < g.size(); ++i)
        gv[i] += (g[i] - dot * (*yd)[i]) * inv;
    });
    y.requires_grad = true;
  }
  return y;
}

namespace detail {
double roi_align_perturbation = 0.0;
}

Tensor roi_align(GradTape* tape, const Tensor& fmap, const Box& box, int out_h,
                 int out_w, int samples_per_bin) {
  require(fmap.shape.size() == 3, "roi_align: expected [C,H,W]");
  require(out_h >= 1 && out_w >= 1 && samples_per_bin >= 1,
          "roi_align: bad output size");
  if (!(box.width() > 0.0) || !(box.height() > 0.0))
    throw DegenerateBox("roi_align: box has non-positive extent");
  const int c = fmap.shape[0], h = fmap.shape[1], w = fmap.shape[2];
  const int s = samples_per_bin;
  const double bin_w = box.width() / out_w;
  const double bin_h = box.height() / out_h;
  const double inv_samples = 1.0 / double(s * s);

  // Sample geometry is channel-independent: 4 (cell, weight) pairs per sample.
  struct Tap {
    int cell;
    double weight;
  };
  auto taps = std::make_shared<std::vector<Tap>>();
  taps->reserve(size_t(out_h) * out_w * s * s * 4);

  Tensor y = Tensor::zeros({c, out_h, out_w});
  for (int by = 0; by < out_h; ++by) {
    for (int bx = 0; bx < out_w; ++bx) {
      for (int sy = 0; sy < s; ++sy) {
        for (int sx = 0; sx < s; ++sx) {
          const double px = box.x1 + (bx + (sx + 0.5) / s) * bin_w;
          const double py = box.y1 + (by + (sy + 0.5) / s) * bin_h;
          // pixel centers at (i+0.5, j+0.5)
          const double u = px - 0.5;
          const double v = py - 0.5;
          const int x0 = int(std::floor(u));
          const int y0 = int(std::floor(v));
          const double fx = u - x0;
          const double fy = v - y0;
          const int xs[2] = {std::clamp(x0, 0, w - 1), std::clamp(x0 + 1, 0, w - 1)};
          const int ys[2] = {std::clamp(y0, 0, h - 1), std::clamp(y0 + 1, 0, h - 1)};
          const double wx[2] = {1.0 - fx, fx};
          const double wy[2] = {1.0 - fy, fy};
          for (int iy = 0; iy < 2; ++iy)
            for (int ix = 0; ix < 2; ++ix)
              taps->push_back({ys[iy] * w + xs[ix], wy[iy] * wx[ix] * inv_samples});
          const double bump = detail::roi_align_perturbation;
          if (bump != 0.0) {
            for (int ch = 0; ch < c; ++ch)
              y.data[(size_t(ch) * out_h + by) * out_w + bx] += bump * inv_samples;
          }
        }
      }
    }
  }
  const size_t taps_per_bin = size_t(s) * s * 4;
  const size_t plane = size_t(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const double* src = &fmap.data[size_t(ch) * plane];
    double* dst = &y.data[size_t(ch) * out_h * out_w];
    for (int bin = 0; bin < out_h * out_w; ++bin) {
      double acc = dst[size_t(bin)];
      const Tap* tp = taps->data() + size_t(bin) * taps_per_bin;
      for (size_t i = 0; i < taps_per_bin; ++i) acc += src[tp[i].cell] * tp[i].weight;
      dst[size_t(bin)] = acc;
    }
  }

  if (tape && fmap.tracked()) {
    int fn = fmap.node;
    const int bins = out_h * out_w;
    y.node = tape->add_node(
        y.size(), [fn, taps, taps_per_bin, plane, c, bins](
                      GradTape& t, const std::vector<double>& g) {
          auto& gf = t.grad_buffer(fn);
          for (int ch = 0; ch < c; ++ch) {
            double* dst = gf.data() + size_t(ch) * plane;
            const double* gsrc = g.data() + size_t(ch) * bins;
            for (int bin = 0; bin < bins; ++bin) {
              const double gb = gsrc[bin];
              const Tap* tp = taps->data() + size_t(bin) * taps_per_bin;
              for (size_t i = 0; i < taps_per_bin; ++i)
                dst[tp[i].cell] += gb * tp[i].weight;
            }
          }
        });
    y.requires_grad = true;
  }
  return y;
}

// ---- gradient checking ---------------------------------------------------------

double grad_check(const std::function<Tensor(GradTape*, const Tensor&)>& f,
                  const Tensor& x, double eps) {
  GradTape tape;
  Tensor xt = x;
  xt.node = -1;
  tape.watch(xt);
  Tensor loss = f(&tape, xt);
  if (loss.size() != 1) throw ShapeMismatch("grad_check: f must return a scalar");
  tape.backward(loss);
  const std::vector<double> analytic = tape.grad(xt);

  double max_err = 0.0;
  for (int i = 0; i < x.size(); ++i) {
    Tensor xp = x;
    Tensor xm = x;
    xp.node = -1;
    xm.node = -1;
    xp.data[size_t(i)] += eps;
    xm.data[size_t(i)] -= eps;
    const double fp = f(nullptr, xp).data[0];
    const double fm = f(nullptr, xm).data[0];
    const double central = (fp - fm) / (2.0 * eps);
    const double err =
        std::abs(analytic[size_t(i)] - central) / std::max(1e-8, std::abs(central));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace dadet

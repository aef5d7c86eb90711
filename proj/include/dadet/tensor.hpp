#pragma once

#include <functional>
#include <vector>

#include "dadet/errors.hpp"
#include "dadet/geometry.hpp"

namespace dadet {

int shape_size(const std::vector<int>& s);

/// Dense n-d array of 64-bit floats, row-major, value-semantic.
/// `node` ties the tensor to a GradTape entry; -1 means constant
/// (no gradient flows through it).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // filled by GradTape::write_grad
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(std::vector<int> s);
  static Tensor full(std::vector<int> s, double v);

  int size() const { return int(data.size()); }
  bool tracked() const { return node >= 0; }
  bool all_finite() const;

  // Row-major accessors for the common ranks.
  double& at2(int r, int c) { return data[size_t(r) * shape[1] + c]; }
  double at2(int r, int c) const { return data[size_t(r) * shape[1] + c]; }
  double& at3(int c, int y, int x) {
    return data[(size_t(c) * shape[1] + y) * shape[2] + x];
  }
  double at3(int c, int y, int x) const {
    return data[(size_t(c) * shape[1] + y) * shape[2] + x];
  }
};

/// Reverse-mode tape. One tape per forward/backward pass, confined to a
/// single thread; separate tapes share nothing. Ops append closures during
/// the forward pass and backward() replays them newest-first, accumulating
/// into per-node gradient buffers.
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, const std::vector<double>&)>;

  // Registers t as a differentiable leaf. Overwrites any node id from a
  // previous tape.
  void watch(Tensor& t);

  int add_node(int size, BackwardFn fn);

  // loss must be a tracked scalar. May be called once per tape.
  void backward(const Tensor& loss);

  // Gradient of the last backward() w.r.t. t; zeros if no gradient reached t.
  const std::vector<double>& grad(const Tensor& t) const;
  void write_grad(Tensor& t) const;

  std::vector<double>& grad_buffer(int node);
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    int size = 0;
    BackwardFn fn;
    std::vector<double> grad;
    bool touched = false;
  };
  std::vector<Node> nodes_;
  mutable std::vector<double> zeros_;  // scratch for untouched grads
  bool ran_ = false;
};

inline constexpr double kEpsilonNorm = 1e-12;

// ---- elementwise / reductions ----------------------------------------------

Tensor add(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor mul_scalar(GradTape* tape, const Tensor& a, double s);
Tensor relu(GradTape* tape, const Tensor& x);
Tensor log(GradTape* tape, const Tensor& x);  // domain: x > 0
Tensor exp(GradTape* tape, const Tensor& x);
// Elementwise Huber with unit transition; target is treated as constant.
Tensor smooth_l1(GradTape* tape, const Tensor& pred, const Tensor& target);
Tensor sum(GradTape* tape, const Tensor& x);   // -> [1]
Tensor mean(GradTape* tape, const Tensor& x);  // -> [1]
Tensor sum_rows(GradTape* tape, const Tensor& x);               // [R,C] -> [R]
Tensor expand_rows(GradTape* tape, const Tensor& v, int cols);  // [R] -> [R,C]

// ---- shape ------------------------------------------------------------------

// Same data order, new shape; shares the tape node (zero extra gradient work).
Tensor reshape(const Tensor& x, std::vector<int> s);
Tensor transpose2d(GradTape* tape, const Tensor& x);
Tensor stack_rows(GradTape* tape, const std::vector<Tensor>& rows);

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b);     // [m,k]·[k,n]
Tensor matmul_nt(GradTape* tape, const Tensor& a, const Tensor& b);  // [m,k]·[n,k]ᵀ
Tensor linear(GradTape* tape, const Tensor& x, const Tensor& w,
              const Tensor& b);  // w[out,in]·x[in] + b[out]

// ---- vision -----------------------------------------------------------------

// Cross-correlation, H' = floor((H+2·pad-kh)/stride)+1.
Tensor conv2d(GradTape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad);
// Gradient routes to the argmax cell; ties break to the first index in
// row-major order.
Tensor max_pool2d(GradTape* tape, const Tensor& x, int k, int stride);
// NearZeroNorm if ||v|| <= kEpsilonNorm; norm taken over all elements.
Tensor l2_normalize(GradTape* tape, const Tensor& v);
// Each output bin averages samples_per_bin² bilinear samples at regular
// sub-bin offsets. Pixel centers sit at (i+0.5, j+0.5); out-of-map neighbors
// clamp to the nearest valid cell, so boxes may extend past the map.
Tensor roi_align(GradTape* tape, const Tensor& fmap, const Box& box, int out_h,
                 int out_w, int samples_per_bin);

namespace detail {
// Test hook: the selfcheck negative control nudges every RoIAlign sample by
// this amount to prove the oracle comparison can fail. Always 0.0 in real use.
extern double roi_align_perturbation;
}  // namespace detail

/// Max over coordinates of |analytic - central difference| /
/// max(1e-8, |central difference|). f must map a tensor to a scalar tensor
/// and be smooth near x.
double grad_check(const std::function<Tensor(GradTape*, const Tensor&)>& f,
                  const Tensor& x, double eps);

}  // namespace dadet

#include "dadet/contrastive.hpp"

#include <algorithm>
#include <cmath>

#include "dadet/errors.hpp"

namespace dadet {

namespace {

// Values-only copy: whatever tape history the input carries is dropped.
Tensor detached_matrix(const std::vector<Tensor>& rows) {
  if (rows.empty()) return Tensor::zeros({0, 0});
  const int d = rows[0].size();
  Tensor m = Tensor::zeros({int(rows.size()), d});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw ShapeMismatch("feature dims differ");
    std::copy(rows[i].data.begin(), rows[i].data.end(),
              m.data.begin() + long(i) * d);
  }
  return m;
}

// Shared InfoNCE core: given the [N,N] similarity matrix X (X_ij = zS_i.zT_j)
// on the tape and per-row positive weights W (rows sum to 1), returns
// scale * sum_i ( logZ_i - sum_p W_ip * X_ip / tau ).
Tensor weighted_info_nce(GradTape* tape, const Tensor& X, const Tensor& W,
                         double tau, double scale) {
  const int n = X.shape[0];
  Tensor Xs = mul_scalar(tape, X, 1.0 / tau);
  // Row maxes enter as constants; the shift cancels exactly in the gradient.
  Tensor shift = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i) {
    double m = -1e300;
    for (int j = 0; j < n; ++j) m = std::max(m, Xs.at2(i, j));
    for (int j = 0; j < n; ++j) shift.at2(i, j) = m;
  }
  Tensor sh = sub(tape, Xs, shift);
  Tensor logz = log(tape, sum_rows(tape, exp(tape, sh)));  // [n]
  Tensor pos = sum(tape, mul(tape, sh, W));
  return mul_scalar(tape, sub(tape, sum(tape, logz), pos), scale);
}

}  // namespace

std::vector<ObjectFeature> extract_object_features(
    GradTape* tape, const BackboneFeatures& feats, int level,
    const std::vector<Box>& boxes, const AugRecord& view,
    const AugRecord& target_view, int out_size, int samples, bool teacher) {
  const Tensor& fmap = feats.maps.at(size_t(level));
  const double stride = feats.strides.at(size_t(level));
  std::vector<ObjectFeature> out;
  for (size_t i = 0; i < boxes.size(); ++i) {
    Box mapped;
    try {
      mapped = transform_box(boxes[i], view, target_view);
    } catch (const BoxOutsideView&) {
      continue;
    } catch (const DegenerateBox&) {
      continue;
    }
    // Sub-cell boxes pool nothing but interpolation noise; skip them.
    if (mapped.width() < stride || mapped.height() < stride) continue;
    const Box roi{mapped.x1 / stride, mapped.y1 / stride, mapped.x2 / stride,
                  mapped.y2 / stride};
    Tensor pooled = roi_align(tape, fmap, roi, out_size, out_size, samples);
    // Dead feature regions (all zeros after relu) pool to a vector with no
    // direction; such objects are skipped like sub-cell ones.
    double norm2 = 0.0;
    for (double v : pooled.data) norm2 += v * v;
    if (std::sqrt(norm2) <= kEpsilonNorm) continue;
    Tensor vec = l2_normalize(tape, reshape(pooled, {pooled.size()}));
    out.push_back({std::move(vec), int(i), level, teacher});
  }
  return out;
}

PositiveSets positive_sets(const std::vector<int>& classes) {
  PositiveSets ps;
  ps.sets.resize(classes.size());
  for (size_t i = 0; i < classes.size(); ++i)
    for (size_t p = 0; p < classes.size(); ++p)
      if (classes[p] == classes[i]) ps.sets[i].push_back(int(p));
  return ps;
}

Tensor contrastive_loss(GradTape* tape, const Tensor& zS, const Tensor& zT,
                        const std::vector<int>& classes, double tau,
                        double lambda) {
  if (zS.shape.size() != 2 || zT.shape.size() != 2)
    throw ShapeMismatch("contrastive_loss: expected [N,d] matrices");
  const int n = zS.shape[0];
  if (n == 0) throw EmptyBatch("contrastive_loss: no objects");
  if (zT.shape != zS.shape || int(classes.size()) != n)
    throw ShapeMismatch("contrastive_loss: zS/zT/classes disagree");

  Tensor keys = zT;  // values only; never on the tape
  keys.node = -1;
  Tensor X = matmul_nt(tape, zS, keys);  // X_ij = zS_i . zT_j

  const PositiveSets ps = positive_sets(classes);
  Tensor W = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i)
    for (int p : ps.sets[size_t(i)])
      W.at2(i, p) = 1.0 / double(ps.sets[size_t(i)].size());
  return weighted_info_nce(tape, X, W, tau, lambda / double(n));
}

Tensor contrastive_loss(GradTape* tape, const std::vector<Tensor>& zS,
                        const std::vector<Tensor>& zT,
                        const std::vector<int>& classes, double tau,
                        double lambda) {
  if (zS.empty()) throw EmptyBatch("contrastive_loss: no objects");
  return contrastive_loss(tape, stack_rows(tape, zS), detached_matrix(zT),
                          classes, tau, lambda);
}

Tensor moco_loss(GradTape* tape, const std::vector<Tensor>& zQ,
                 const std::vector<Tensor>& zK, double tau) {
  const int n = int(zQ.size());
  if (n < 2) throw EmptyBatch("moco_loss: needs at least one negative");
  if (zK.size() != zQ.size())
    throw ShapeMismatch("moco_loss: query/key counts differ");
  Tensor X = matmul_nt(tape, stack_rows(tape, zQ), detached_matrix(zK));
  Tensor W = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i) W.at2(i, i) = 1.0;
  return weighted_info_nce(tape, X, W, tau, 1.0 / double(n));
}

Tensor multi_scale_contrastive(GradTape* tape, const BackboneFeatures& featS,
                               const BackboneFeatures& featT,
                               const PseudoLabelSet& labels,
                               const AugRecord& recS, const AugRecord& recT,
                               const ContrastiveConfig& cfg) {
  Tensor total;
  bool any = false;
  for (int level : cfg.levels) {
    auto fS = extract_object_features(tape, featS, level, labels.boxes,
                                      labels.view, recS, cfg.out_size,
                                      cfg.samples, false);
    auto fT = extract_object_features(nullptr, featT, level, labels.boxes,
                                      labels.view, recT, cfg.out_size,
                                      cfg.samples, true);
    // Keep only objects that survived extraction on both sides; both lists
    // are ordered by object_index, so a two-pointer merge aligns the pairs.
    std::vector<Tensor> zS, zT;
    std::vector<int> classes;
    size_t a = 0, b = 0;
    while (a < fS.size() && b < fT.size()) {
      if (fS[a].object_index < fT[b].object_index) {
        ++a;
      } else if (fS[a].object_index > fT[b].object_index) {
        ++b;
      } else {
        zS.push_back(fS[a].vec);
        zT.push_back(fT[b].vec);
        classes.push_back(labels.classes.at(size_t(fS[a].object_index)));
        ++a;
        ++b;
      }
    }
    if (classes.empty()) continue;
    Tensor lk = contrastive_loss(tape, zS, zT, classes, cfg.tau, 1.0);
    total = any ? add(tape, total, lk) : lk;
    any = true;
  }
  if (!any) throw EmptyBatch("multi_scale_contrastive: no usable objects");
  return total;
}

}  // namespace dadet

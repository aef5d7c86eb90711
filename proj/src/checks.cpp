#include "dadet/checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dadet/contrastive.hpp"
#include "dadet/evaluation.hpp"
#include "dadet/mean_teacher.hpp"
#include "dadet/rng.hpp"

namespace dadet::checks {

namespace {

// Bilinear read at continuous point (px, py), interpolating the four pixel
// centers around it, each clamped into the map.
double bilinear_at(const Tensor& fmap, int channel, double px, double py) {
  const int h = fmap.shape[1], w = fmap.shape[2];
  const double u = px - 0.5;
  const double v = py - 0.5;
  const double fx0 = std::floor(u);
  const double fy0 = std::floor(v);
  const double ax = u - fx0;
  const double ay = v - fy0;
  double out = 0.0;
  for (int dy = 0; dy <= 1; ++dy) {
    for (int dx = 0; dx <= 1; ++dx) {
      const int cx = std::clamp(int(fx0) + dx, 0, w - 1);
      const int cy = std::clamp(int(fy0) + dy, 0, h - 1);
      const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
      out += wgt * fmap.at3(channel, cy, cx);
    }
  }
  return out;
}

}  // namespace

Tensor dense_roi_align(const Tensor& fmap, const Box& box, int out_h, int out_w,
                       int samples_per_bin) {
  const int c = fmap.shape[0];
  Tensor out = Tensor::zeros({c, out_h, out_w});
  const double bin_w = (box.x2 - box.x1) / out_w;
  const double bin_h = (box.y2 - box.y1) / out_h;
  for (int ch = 0; ch < c; ++ch) {
    for (int by = 0; by < out_h; ++by) {
      for (int bx = 0; bx < out_w; ++bx) {
        double acc = 0.0;
        for (int sy = 0; sy < samples_per_bin; ++sy) {
          for (int sx = 0; sx < samples_per_bin; ++sx) {
            const double px = box.x1 + bin_w * (bx + (sx + 0.5) / samples_per_bin);
            const double py = box.y1 + bin_h * (by + (sy + 0.5) / samples_per_bin);
            acc += bilinear_at(fmap, ch, px, py);
          }
        }
        out.at3(ch, by, bx) = acc / (samples_per_bin * samples_per_bin);
      }
    }
  }
  return out;
}

double detection_loss_reference(const DensePrediction& pred,
                                const std::vector<SceneObject>& labels) {
  const int nc = pred.logits.shape[0];
  const int hp = pred.logits.shape[1], wp = pred.logits.shape[2];
  const int background = nc - 1;

  double ce_total = 0.0;
  double reg_total = 0.0;
  int npos = 0;
  for (int y = 0; y < hp; ++y) {
    for (int x = 0; x < wp; ++x) {
      const double cx = (x + 0.5) * pred.stride;
      const double cy = (y + 0.5) * pred.stride;
      int cls = background;
      Box assigned;
      double best_area = std::numeric_limits<double>::infinity();
      for (const auto& o : labels) {
        const bool contains = cx >= o.box.x1 && cx <= o.box.x2 &&
                              cy >= o.box.y1 && cy <= o.box.y2;
        if (contains && o.box.area() < best_area) {
          best_area = o.box.area();
          cls = o.class_id;
          assigned = o.box;
        }
      }

      double mx = pred.logits.at3(0, y, x);
      for (int c = 1; c < nc; ++c) mx = std::max(mx, pred.logits.at3(c, y, x));
      double z = 0.0;
      for (int c = 0; c < nc; ++c) z += std::exp(pred.logits.at3(c, y, x) - mx);
      ce_total += -(pred.logits.at3(cls, y, x) - mx - std::log(z));

      if (cls == background) continue;
      ++npos;
      const double target[4] = {cx - assigned.x1, cy - assigned.y1,
                                assigned.x2 - cx, assigned.y2 - cy};
      for (int k = 0; k < 4; ++k) {
        const double d = pred.offsets.at3(k, y, x) - target[k];
        const double a = std::abs(d);
        reg_total += a < 1.0 ? 0.5 * d * d : a - 0.5;
      }
    }
  }
  double loss = ce_total / (hp * wp);
  if (npos > 0) loss += reg_total / (4.0 * npos);
  return loss;
}

std::vector<int> nms_reference(const std::vector<NmsCandidate>& cands,
                               double iou_thresh, int max_dets) {
  std::vector<int> order(cands.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (cands[size_t(a)].score != cands[size_t(b)].score)
      return cands[size_t(a)].score > cands[size_t(b)].score;
    return cands[size_t(a)].cell < cands[size_t(b)].cell;
  });

  auto overlap = [](const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double ua = (a.x2 - a.x1) * (a.y2 - a.y1);
    const double ub = (b.x2 - b.x1) * (b.y2 - b.y1);
    return inter / (ua + ub - inter);
  };

  std::vector<int> kept;
  for (int idx : order) {
    if (int(kept.size()) >= max_dets) break;
    bool ok = true;
    for (int k : kept)
      if (cands[size_t(k)].class_id == cands[size_t(idx)].class_id &&
          overlap(cands[size_t(k)].box, cands[size_t(idx)].box) >= iou_thresh)
        ok = false;
    if (ok) kept.push_back(idx);
  }
  return kept;
}

namespace {

double dot_ref(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

// log sum_j exp(row[j]) with a max shift for stability.
double lse_ref(const std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  return mx + std::log(z);
}

}  // namespace

double contrastive_loss_reference(const std::vector<std::vector<double>>& zS,
                                  const std::vector<std::vector<double>>& zT,
                                  const std::vector<int>& classes, double tau,
                                  double lambda) {
  const size_t n = zS.size();
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> row(n);
    for (size_t j = 0; j < n; ++j) row[j] = dot_ref(zS[i], zT[j]) / tau;
    const double lse = lse_ref(row);
    double inner = 0.0;
    int npos = 0;
    for (size_t p = 0; p < n; ++p) {
      if (classes[p] != classes[i]) continue;
      ++npos;
      inner += row[p] - lse;
    }
    total += -inner / npos;
  }
  return lambda * total / double(n);
}

double moco_ce_reference(const std::vector<std::vector<double>>& zQ,
                         const std::vector<std::vector<double>>& zK,
                         double tau) {
  const size_t n = zQ.size();
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> row(n);
    for (size_t j = 0; j < n; ++j) row[j] = dot_ref(zQ[i], zK[j]) / tau;
    total += lse_ref(row) - row[i];
  }
  return total / double(n);
}

namespace {

Tensor rand_tensor(Rng& rng, std::vector<int> shape, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> rand_unit_row(Rng& rng, int d) {
  std::vector<double> v(static_cast<size_t>(d));
  double norm2 = 0.0;
  for (double& x : v) {
    x = rng.uniform(-1.0, 1.0);
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-30));
  for (double& x : v) x *= inv;
  return v;
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
  Tensor t = Tensor::zeros({int(rows.size()), int(rows[0].size())});
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) t.at2(int(i), int(j)) = rows[i][j];
  return t;
}

std::string format_worst(const std::string& what, double worst) {
  std::ostringstream os;
  os << what << " = " << worst;
  return os.str();
}

CheckResult check_op_gradients() {
  Rng rng(101);
  double worst = 0.0;

  const Tensor img = rand_tensor(rng, {2, 6, 6}, -1.0, 1.0);
  const Tensor cw = rand_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5);
  const Tensor cb = rand_tensor(rng, {3}, -0.1, 0.1);
  worst = std::max(
      worst, grad_check(
                 [&](GradTape* t, const Tensor& x) {
                   return sum(t, max_pool2d(t, relu(t, conv2d(t, x, cw, cb, 1, 1)),
                                            2, 2));
                 },
                 img, 1e-5));
  worst = std::max(
      worst, grad_check(
                 [&](GradTape* t, const Tensor& x) {
                   return sum(t, relu(t, conv2d(t, img, reshape(x, {3, 2, 3, 3}),
                                                cb, 1, 1)));
                 },
                 rand_tensor(rng, {54}, -0.5, 0.5), 1e-5));

  const Tensor lw = rand_tensor(rng, {4, 5}, -1.0, 1.0);
  const Tensor lb = rand_tensor(rng, {4}, -0.3, 0.3);
  const Tensor tgt = rand_tensor(rng, {4}, -1.0, 1.0);
  worst = std::max(
      worst, grad_check(
                 [&](GradTape* t, const Tensor& x) {
                   return sum(t, smooth_l1(t, l2_normalize(t, linear(t, x, lw, lb)),
                                           tgt));
                 },
                 rand_tensor(rng, {5}, -1.0, 1.0), 1e-5));

  const Tensor mb = rand_tensor(rng, {4, 3}, -1.0, 1.0);
  worst = std::max(
      worst, grad_check(
                 [&](GradTape* t, const Tensor& x) {
                   return mean(t, matmul(t, transpose2d(t, reshape(x, {4, 3})), mb));
                 },
                 rand_tensor(rng, {12}, -1.0, 1.0), 1e-5));

  worst = std::max(
      worst, grad_check(
                 [&](GradTape* t, const Tensor& x) {
                   return sum(t, roi_align(t, reshape(x, {2, 5, 5}),
                                           Box{0.7, 0.9, 3.8, 4.1}, 3, 3, 2));
                 },
                 rand_tensor(rng, {50}, -1.0, 1.0), 1e-5));

  return {"op_gradients", worst < 1e-4, worst,
          format_worst("max rel err over 5 composite pipelines", worst)};
}

CheckResult check_contrastive_gradient() {
  Rng rng(202);
  double worst = 0.0;
  for (int n : {3, 4, 5}) {
    const int d = 4;
    std::vector<std::vector<double>> keys;
    std::vector<int> classes;
    for (int i = 0; i < n; ++i) {
      keys.push_back(rand_unit_row(rng, d));
      classes.push_back(i % 2);
    }
    const Tensor zT = rows_to_tensor(keys);
    worst = std::max(
        worst, grad_check(
                   [&](GradTape* t, const Tensor& x) {
                     return contrastive_loss(t, reshape(x, {n, d}), zT, classes,
                                             0.2, 1.0);
                   },
                   rand_tensor(rng, {n * d}, -1.0, 1.0), 1e-5));
  }
  return {"contrastive_gradient", worst < 1e-4, worst,
          format_worst("max rel err over 3 batch sizes", worst)};
}

CheckResult check_roi_align_oracle() {
  Rng rng(303);
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const int c = 1 + int(rng.uniform_int(3));
    const int h = 4 + int(rng.uniform_int(5));
    const int w = 4 + int(rng.uniform_int(5));
    const Tensor fmap = rand_tensor(rng, {c, h, w}, -2.0, 2.0);
    // Odd trials push one or both corners outside the map.
    const double slack = (trial % 2 == 0) ? 0.0 : 2.5;
    const double x1 = rng.uniform(-slack, w - 1.0);
    const double y1 = rng.uniform(-slack, h - 1.0);
    const Box box{x1, y1, x1 + rng.uniform(0.5, w + slack - x1),
                  y1 + rng.uniform(0.5, h + slack - y1)};
    const Tensor fast = roi_align(nullptr, fmap, box, 3, 3, 2);
    const Tensor ref = dense_roi_align(fmap, box, 3, 3, 2);
    for (int i = 0; i < fast.size(); ++i)
      worst = std::max(worst, std::abs(fast.data[size_t(i)] - ref.data[size_t(i)]));
  }
  return {"roi_align_oracle", worst <= 1e-9, worst,
          format_worst("max abs gap over 60 boxes (half out-of-bounds)", worst)};
}

CheckResult check_contrastive_oracle() {
  Rng rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + int(rng.uniform_int(8));
    const int d = 2 + int(rng.uniform_int(4));
    const double tau = (trial % 2 == 0) ? 0.07 : 0.5;
    const double lambda = (trial % 3 == 0) ? 1.0 : 0.05;
    std::vector<std::vector<double>> zs, zt;
    std::vector<int> classes;
    for (int i = 0; i < n; ++i) {
      zs.push_back(rand_unit_row(rng, d));
      zt.push_back(rand_unit_row(rng, d));
      classes.push_back(int(rng.uniform_int(3)));
    }
    const double fast = contrastive_loss(nullptr, rows_to_tensor(zs),
                                         rows_to_tensor(zt), classes, tau, lambda)
                            .data[0];
    const double ref = contrastive_loss_reference(zs, zt, classes, tau, lambda);
    worst = std::max(worst, std::abs(fast - ref));
  }
  return {"contrastive_oracle", worst <= 1e-10, worst,
          format_worst("max abs gap to double-loop reference over 30 batches",
                       worst)};
}

CheckResult check_moco_oracle() {
  Rng rng(505);
  double worst_oracle = 0.0;
  double worst_equiv = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + int(rng.uniform_int(7));
    const int d = 3 + int(rng.uniform_int(3));
    const double tau = (trial % 2 == 0) ? 0.07 : 1.0;
    std::vector<std::vector<double>> q, k;
    std::vector<Tensor> qt, kt;
    std::vector<int> distinct;
    for (int i = 0; i < n; ++i) {
      q.push_back(rand_unit_row(rng, d));
      k.push_back(rand_unit_row(rng, d));
      qt.push_back(Tensor({d}, q.back()));
      kt.push_back(Tensor({d}, k.back()));
      distinct.push_back(i);
    }
    const double fast = moco_loss(nullptr, qt, kt, tau).data[0];
    worst_oracle = std::max(worst_oracle,
                            std::abs(fast - moco_ce_reference(q, k, tau)));
    // All-distinct classes at lambda = 1 collapse the class loss to MoCo.
    const double as_contrastive =
        contrastive_loss(nullptr, qt, kt, distinct, tau, 1.0).data[0];
    worst_equiv = std::max(worst_equiv, std::abs(fast - as_contrastive));
  }
  const bool passed = worst_oracle <= 1e-10 && worst_equiv <= 1e-12;
  return {"moco_oracle", passed, std::max(worst_oracle, worst_equiv),
          format_worst("max abs gap: cross-entropy reference", worst_oracle) +
              ", " + format_worst("all-distinct equivalence", worst_equiv)};
}

CheckResult check_detection_loss_oracle() {
  Rng rng(606);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int nc = 2 + int(rng.uniform_int(2));
    const int h = 3 + int(rng.uniform_int(3));
    const int w = 3 + int(rng.uniform_int(3));
    DensePrediction pred;
    pred.stride = 8;
    pred.logits = rand_tensor(rng, {nc + 1, h, w}, -2.0, 2.0);
    pred.offsets = rand_tensor(rng, {4, h, w}, 0.5, 12.0);
    std::vector<SceneObject> labels;
    const int n_obj = 1 + int(rng.uniform_int(3));
    for (int i = 0; i < n_obj; ++i) {
      const double x1 = rng.uniform(0.0, w * 8.0 - 10.0);
      const double y1 = rng.uniform(0.0, h * 8.0 - 10.0);
      labels.push_back({int(rng.uniform_int(nc)),
                        Box{x1, y1, x1 + rng.uniform(6.0, 9.5),
                            y1 + rng.uniform(6.0, 9.5)}});
    }
    const double fast = detection_loss(nullptr, pred, labels).data[0];
    worst = std::max(worst,
                     std::abs(fast - detection_loss_reference(pred, labels)));
  }
  return {"detection_loss_oracle", worst <= 1e-10, worst,
          format_worst("max abs gap to scalar reference over 10 grids", worst)};
}

CheckResult check_ema_decay() {
  DetectorConfig small;
  small.num_classes = 2;
  small.channels = {4, 6};
  small.head_channels = 6;
  small.head_stage = 1;
  const DetectorParams student = init_detector(small, 2);
  const DetectorParams t0 = init_detector(small, 1);

  auto distance = [](const DetectorParams& a, const DetectorParams& b) {
    double s = 0.0;
    for (const auto& [name, t] : a.tensors) {
      const Tensor& o = b.at(name);
      for (size_t i = 0; i < t.data.size(); ++i) {
        const double d = t.data[i] - o.data[i];
        s += d * d;
      }
    }
    return std::sqrt(s);
  };

  const double d0 = distance(t0, student);
  const int steps = 20;
  double worst = 0.0;
  for (double alpha : {0.0, 0.5, 0.9996}) {
    DetectorParams teacher = t0;
    for (int i = 0; i < steps; ++i) ema_update(teacher, student, alpha);
    const double expected = std::pow(alpha, steps) * d0;
    const double got = distance(teacher, student);
    // Relative where the expected distance is meaningful, absolute at 0.
    const double err = expected > 1e-300
                           ? std::abs(got - expected) / expected
                           : std::abs(got);
    worst = std::max(worst, err);
  }
  return {"ema_decay", worst <= 1e-9, worst,
          format_worst("max rel err of alpha^T decay over 3 alphas", worst)};
}

CheckResult check_ap_fixtures() {
  double worst = 0.0;

  // Two ground truths, ranking TP > FP > TP: all-point AP = 5/6.
  const Box a{2, 2, 12, 12}, b{30, 30, 44, 44}, off{50, 2, 60, 12};
  std::vector<std::vector<SceneObject>> gts = {{{0, a}, {0, b}}};
  std::vector<std::vector<Detection>> dets = {
      {{a, 0, 0.9}, {off, 0, 0.8}, {b, 0, 0.7}}};
  worst = std::max(worst, std::abs(evaluate_detections(dets, gts, 1).map50 -
                                   5.0 / 6.0));

  // Perfect detections give exactly 1.
  std::vector<std::vector<SceneObject>> gts2 = {{{0, a}, {1, b}}, {{1, off}}};
  std::vector<std::vector<Detection>> dets2 = {{{a, 0, 0.9}, {b, 1, 0.8}},
                                               {{off, 1, 0.95}}};
  worst = std::max(worst,
                   std::abs(evaluate_detections(dets2, gts2, 2).map50 - 1.0));

  // One class never predicted: its AP is 0 and the mean halves.
  std::vector<std::vector<Detection>> dets3 = {{{a, 0, 0.9}}, {}};
  std::vector<std::vector<SceneObject>> gts3 = {{{0, a}}, {{1, off}}};
  worst = std::max(worst,
                   std::abs(evaluate_detections(dets3, gts3, 2).map50 - 0.5));

  return {"ap_fixtures", worst <= 1e-9, worst,
          format_worst("max abs gap over 3 hand-computed fixtures", worst)};
}

}  // namespace

std::vector<CheckResult> run_selfcheck() {
  return {check_op_gradients(),       check_contrastive_gradient(),
          check_roi_align_oracle(),   check_contrastive_oracle(),
          check_moco_oracle(),        check_detection_loss_oracle(),
          check_ema_decay(),          check_ap_fixtures()};
}

}  // namespace dadet::checks

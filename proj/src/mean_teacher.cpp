#include "dadet/mean_teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dadet/errors.hpp"

namespace dadet {

void ema_update(DetectorParams& teacher, const DetectorParams& student,
                double alpha) {
  if (teacher.tensors.size() != student.tensors.size())
    throw ShapeMismatch("ema_update: parameter sets differ");
  for (auto& [name, t] : teacher.tensors) {
    const Tensor& s = student.at(name);
    if (s.shape != t.shape)
      throw ShapeMismatch("ema_update: shape differs for " + name);
    for (size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = alpha * t.data[i] + (1.0 - alpha) * s.data[i];
  }
}

PseudoLabelSet pseudo_label_from(const DensePrediction& pred,
                                 const AugRecord& view, double gamma,
                                 double nms_iou) {
  PseudoLabelSet out;
  out.view = view;
  for (const Detection& d : decode(pred, gamma, nms_iou, kEvalMaxDets)) {
    out.boxes.push_back(d.box);
    out.classes.push_back(d.class_id);
    out.scores.push_back(d.score);
  }
  return out;
}

PseudoLabelSet pseudo_label(const DetectorParams& teacher,
                            const DetectorConfig& cfg, const Tensor& img_weak,
                            const AugRecord& view, double gamma,
                            double nms_iou) {
  BackboneFeatures f = forward_backbone(nullptr, img_weak, teacher, cfg);
  DensePrediction pred = forward_head(nullptr, f, teacher, cfg);
  return pseudo_label_from(pred, view, gamma, nms_iou);
}

PseudoLabelSet cutout_exclusion(const Tensor& img_teacher_view,
                                const Tensor& img_student_view,
                                const PseudoLabelSet& labels,
                                const AugRecord& student_record) {
  const int h = img_student_view.shape[1], w = img_student_view.shape[2];
  const double pixel_thresh = 40.0 / 255.0;
  PseudoLabelSet out;
  out.view = labels.view;
  for (int i = 0; i < labels.size(); ++i) {
    Box sb;
    bool visible = true;
    try {
      sb = transform_box(labels.boxes[size_t(i)], labels.view, student_record);
    } catch (const BoxOutsideView&) {
      visible = false;  // nothing to measure; leave the drop to the loss side
    }
    long total = 0, differing = 0;
    if (visible) {
      const int x_lo = std::max(0, int(std::ceil(sb.x1 - 0.5)));
      const int x_hi = std::min(w - 1, int(std::floor(sb.x2 - 0.5)));
      const int y_lo = std::max(0, int(std::ceil(sb.y1 - 0.5)));
      const int y_hi = std::min(h - 1, int(std::floor(sb.y2 - 0.5)));
      for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x) {
          double xo, yo, xt, yt;
          view_to_original(student_record, x + 0.5, y + 0.5, xo, yo);
          original_to_view(labels.view, xo, yo, xt, yt);
          double diff = 0.0;
          for (int c = 0; c < 3; ++c)
            diff = std::max(
                diff, std::abs(sample_bilinear(img_teacher_view, c, xt, yt) -
                               img_student_view.at3(c, y, x)));
          ++total;
          differing += diff > pixel_thresh;
        }
    }
    if (total > 0 && 2 * differing > total) continue;  // drop: > 50% differ
    out.boxes.push_back(labels.boxes[size_t(i)]);
    out.classes.push_back(labels.classes[size_t(i)]);
    out.scores.push_back(labels.scores[size_t(i)]);
  }
  return out;
}

PseudoLabelSet inject_label_noise(const PseudoLabelSet& labels, double fraction,
                                  int num_classes, Rng& rng) {
  PseudoLabelSet out = labels;
  const int n = out.size();
  const int k = int(std::lround(fraction * n));
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {  // partial Fisher-Yates draw without replacement
    const int j = i + rng.uniform_int(n - i);
    std::swap(idx[size_t(i)], idx[size_t(j)]);
  }
  for (int i = 0; i < k; ++i)
    out.classes[size_t(idx[size_t(i)])] = rng.uniform_int(num_classes);
  return out;
}

}  // namespace dadet

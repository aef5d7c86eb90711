#pragma once

#include <vector>

#include "dadet/detector.hpp"
#include "dadet/rng.hpp"
#include "dadet/synth.hpp"

namespace dadet {

inline constexpr double kEmaAlpha = 0.9996;
inline constexpr double kPseudoGamma = 0.6;

// Teacher-generated labels, in the teacher's (weak) view coordinates.
struct PseudoLabelSet {
  std::vector<Box> boxes;
  std::vector<int> classes;  // never the background id
  std::vector<double> scores;
  AugRecord view;  // augmentation that produced the teacher input

  int size() const { return int(boxes.size()); }
};

// In place: every teacher tensor <- alpha * teacher + (1 - alpha) * student.
// ShapeMismatch when the name sets or shapes differ.
void ema_update(DetectorParams& teacher, const DetectorParams& student,
                double alpha);

// Teacher forward without gradient recording, decoded at score threshold
// gamma. The view record is attached to the result untouched.
PseudoLabelSet pseudo_label(const DetectorParams& teacher,
                            const DetectorConfig& cfg, const Tensor& img_weak,
                            const AugRecord& view, double gamma,
                            double nms_iou);

// Decode-only tail of pseudo_label, for callers that already hold the teacher
// forward pass (and want to reuse its feature maps).
PseudoLabelSet pseudo_label_from(const DensePrediction& pred,
                                 const AugRecord& view, double gamma,
                                 double nms_iou);

// Drops boxes whose pixels mostly disagree between the aligned views: a pixel
// counts as differing when the max-channel absolute difference between the
// teacher view (sampled at the student pixel's position) and the student view
// exceeds 40/255; the box is dropped when more than half its pixels differ.
PseudoLabelSet cutout_exclusion(const Tensor& img_teacher_view,
                                const Tensor& img_student_view,
                                const PseudoLabelSet& labels,
                                const AugRecord& student_record);

// Re-assigns round(fraction * N) uniformly chosen labels to a uniform class
// draw (which may repeat the original). Boxes and scores untouched.
PseudoLabelSet inject_label_noise(const PseudoLabelSet& labels, double fraction,
                                  int num_classes, Rng& rng);

}  // namespace dadet

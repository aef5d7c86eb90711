#pragma once

#include <string>
#include <vector>

#include "dadet/detector.hpp"
#include "dadet/geometry.hpp"
#include "dadet/tensor.hpp"

// Reference implementations used to cross-check the fast paths. Each oracle
// is written from the textbook definition, scalar code only, and must stay
// independent of the implementation it checks (no shared helpers).

namespace dadet::checks {

// Average of samples² bilinear reads per bin, sub-bin offsets (k+0.5)/samples,
// pixel centers at (i+0.5, j+0.5), neighbors clamped to the map.
Tensor dense_roi_align(const Tensor& fmap, const Box& box, int out_h, int out_w,
                       int samples_per_bin);

// Detection loss recomputed cell by cell with scalar arithmetic: per-cell
// softmax cross-entropy averaged over cells, plus smooth-L1 on the offset
// channels of positive cells averaged over 4*npos entries.
double detection_loss_reference(const DensePrediction& pred,
                                const std::vector<SceneObject>& labels);

// Greedy class-wise NMS by the definition: scan candidates in (score desc,
// cell asc) order, keep unless overlapping a kept same-class box at or above
// the threshold, stop at max_dets.
struct NmsCandidate {
  Box box;
  int class_id = 0;
  double score = 0.0;
  int cell = 0;
};
std::vector<int> nms_reference(const std::vector<NmsCandidate>& cands,
                               double iou_thresh, int max_dets);

// Scalar double-loop evaluation of the class-positive InfoNCE loss, written
// directly from the summation formula with no shared tensor machinery.
double contrastive_loss_reference(const std::vector<std::vector<double>>& zS,
                                  const std::vector<std::vector<double>>& zT,
                                  const std::vector<int>& classes, double tau,
                                  double lambda);

// Instance-discrimination loss phrased as softmax cross-entropy over each
// similarity row with target index i.
double moco_ce_reference(const std::vector<std::vector<double>>& zQ,
                         const std::vector<std::vector<double>>& zK,
                         double tau);

// One self-contained check; runs and reports.
struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;  // worst error observed, semantics per check
  std::string detail;
};

// Full battery behind the `selfcheck` command. Deterministic.
std::vector<CheckResult> run_selfcheck();

}  // namespace dadet::checks

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dadet/dataset.hpp"
#include "dadet/detector.hpp"

namespace dadet {

struct ClassCounts {
  long tp = 0;
  long fp = 0;
  long num_gt = 0;
  long fn() const { return num_gt - tp; }
};

struct EvalResult {
  std::map<int, double> per_class_ap;
  std::map<int, ClassCounts> counts;
  double map50 = 0.0;  // mean AP over classes with >= 1 ground-truth instance
  std::string interpolation = "all-point";

  std::string to_json() const;
};

// Intersection over union; 0 when disjoint. DegenerateBox on empty boxes.
double iou(const Box& a, const Box& b);

// Greedy matcher for one image, one class. dets must be sorted by descending
// score; each detection takes the highest-IoU still-unmatched ground truth at
// or above iou_thresh (TP), else counts as FP. Returns one flag per detection.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Box>& gts,
                                   double iou_thresh);

// All-point interpolated average precision from (score, is_tp) pairs pooled
// across the dataset. Ranking depends only on score order (stable on ties).
// 0 when num_gt == 0 by convention.
double average_precision(std::vector<std::pair<double, bool>> scored_flags,
                         long num_gt);

// Pure aggregation: one detection list and one label list per image.
EvalResult evaluate_detections(
    const std::vector<std::vector<Detection>>& dets,
    const std::vector<std::vector<SceneObject>>& gts, int num_classes);

// The only code path allowed to open the quarantined eval annotations.
class Evaluator {
 public:
  static EvalResult evaluate(const DetectorParams& params,
                             const DetectorConfig& cfg, const Dataset& data);
};

// Runs decode over every eval-split target image; needs no annotations.
std::vector<std::vector<Detection>> eval_split_detections(
    const DetectorParams& params, const DetectorConfig& cfg,
    const Dataset& data);

}  // namespace dadet

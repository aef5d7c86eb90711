#pragma once

#include <vector>

#include "dadet/detector.hpp"
#include "dadet/mean_teacher.hpp"
#include "dadet/synth.hpp"
#include "dadet/tensor.hpp"

namespace dadet {

inline constexpr double kTau = 0.07;
inline constexpr double kLambdaContrast = 0.05;
inline constexpr int kRoiOutSize = 3;
inline constexpr int kRoiSamples = 2;

// One pooled, flattened, unit-normalized object descriptor.
struct ObjectFeature {
  Tensor vec;           // [C * out * out], ||vec|| = 1
  int object_index = 0;  // index into the originating label list
  int level = 0;
  bool teacher = false;  // teacher-sourced features carry no tape node
};

struct PositiveSets {
  std::vector<std::vector<int>> sets;  // sets[i] = {p | C_p == C_i}, holds i
};

// Maps each box from `view` into `target_view`, scales by the level stride,
// pools with roi_align(out_size), flattens, and l2-normalizes. Boxes that
// leave the target view, cover less than one feature cell at this level, or
// pool a near-zero vector (dead relu region) are omitted; object_index
// records which survived.
std::vector<ObjectFeature> extract_object_features(
    GradTape* tape, const BackboneFeatures& feats, int level,
    const std::vector<Box>& boxes, const AugRecord& view,
    const AugRecord& target_view, int out_size, int samples, bool teacher);

PositiveSets positive_sets(const std::vector<int>& classes);

// Batched class-positive InfoNCE over student/teacher pairs:
//   L = (lambda/N) sum_i (-1/|P(i)|) sum_{p in P(i)}
//       log( exp(zS_i . zT_p / tau) / sum_j exp(zS_i . zT_j / tau) )
// zT values are detached; rows of zS receive gradient. Log-sum-exp uses a
// constant row-max shift, stable down to tau = 0.01. EmptyBatch when N = 0.
Tensor contrastive_loss(GradTape* tape, const Tensor& zS, const Tensor& zT,
                        const std::vector<int>& classes, double tau,
                        double lambda);
Tensor contrastive_loss(GradTape* tape, const std::vector<Tensor>& zS,
                        const std::vector<Tensor>& zT,
                        const std::vector<int>& classes, double tau,
                        double lambda);

// Instance-discrimination InfoNCE (key i is the only positive of query i):
//   mean_i -log( exp(zQ_i . zK_i / tau) / sum_j exp(zQ_i . zK_j / tau) )
// EmptyBatch when N < 2 (no negatives exist).
Tensor moco_loss(GradTape* tape, const std::vector<Tensor>& zQ,
                 const std::vector<Tensor>& zK, double tau);

struct ContrastiveConfig {
  std::vector<int> levels{0, 1, 2, 3};
  double tau = kTau;
  int out_size = kRoiOutSize;
  int samples = kRoiSamples;
};

// Sum of per-level contrastive losses (lambda = 1; the trainer owns the
// balancing weight). A box participates at a level only when it survives
// extraction for both models, so the pair lists stay aligned. EmptyBatch when
// no configured level yields at least one object.
Tensor multi_scale_contrastive(GradTape* tape, const BackboneFeatures& featS,
                               const BackboneFeatures& featT,
                               const PseudoLabelSet& labels,
                               const AugRecord& recS, const AugRecord& recT,
                               const ContrastiveConfig& cfg);

}  // namespace dadet

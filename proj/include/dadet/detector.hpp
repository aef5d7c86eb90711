#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dadet/synth.hpp"
#include "dadet/tensor.hpp"

namespace dadet {

struct DetectorConfig {
  int num_classes = 3;
  std::vector<int> channels{16, 32, 64, 64};  // one entry per stage
  int head_channels = 64;
  int head_stage = 2;  // index into the feature pyramid; stride 8 by default
};

// Named weight set. std::map keeps iteration deterministic (sorted by name),
// which pins the EMA/SGD/checkpoint orders.
struct DetectorParams {
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
};

// Uniform init in [-sqrt(1/fan_in), sqrt(1/fan_in)], biases zero. Draw order
// is the fixed construction order, independent of map order.
DetectorParams init_detector(const DetectorConfig& cfg, std::uint64_t seed);

struct BackboneFeatures {
  std::vector<Tensor> maps;  // one per stage, after pooling
  std::vector<int> strides;  // 2, 4, 8, 16 for the default four stages
};

// k stages of [conv3x3 -> relu -> conv3x3 -> relu -> max_pool 2x2]. Image
// extents must be divisible by 2^k.
BackboneFeatures forward_backbone(GradTape* tape, const Tensor& img,
                                  const DetectorParams& p,
                                  const DetectorConfig& cfg);

struct DensePrediction {
  Tensor logits;   // [num_classes+1, Hp, Wp]; background is the last channel
  Tensor offsets;  // [4, Hp, Wp]; (l,t,r,b) distances in pixels, positive
  int stride = 0;
};

DensePrediction forward_head(GradTape* tape, const BackboneFeatures& feats,
                             const DetectorParams& p, const DetectorConfig& cfg);

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

// Per-cell argmax class (background skipped), score threshold, class-wise
// greedy NMS, global cap. Ties order by (score desc, cell row-major asc).
std::vector<Detection> decode(const DensePrediction& pred, double score_thresh,
                              double nms_iou, int max_dets);

inline constexpr double kEvalScoreThresh = 0.05;
inline constexpr double kEvalNmsIou = 0.5;
inline constexpr int kEvalMaxDets = 20;

// Cell assignment: positive for the smallest-area label box containing the
// cell center, else background. Mean CE over all cells plus mean smooth-L1
// over the offset channels of positive cells (zero when no positives).
Tensor detection_loss(GradTape* tape, const DensePrediction& pred,
                      const std::vector<SceneObject>& labels);

// Registers every tensor on the tape (resetting stale node ids first).
void watch_all(DetectorParams& params, GradTape& tape);

// In-place SGD on all watched tensors with global-norm gradient clipping.
// The clip guards the exp offset branch, whose logit-space updates scale
// with the offsets themselves and oscillate unboundedly when unclipped.
void sgd_step(DetectorParams& params, GradTape& tape, double lr,
              double clip_norm = 10.0);

struct Checkpoint {
  DetectorParams student;
  DetectorParams teacher;
  std::string config_json;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dadet

#include "dadet/evaluation.hpp"

#include <json.hpp>

#include <algorithm>

#include "dadet/errors.hpp"

namespace dadet {

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw DegenerateBox("iou: empty box");
  return box_iou(a, b);
}

std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Box>& gts,
                                   double iou_thresh) {
  std::vector<bool> flags(dets.size(), false);
  std::vector<bool> taken(gts.size(), false);
  for (size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v > best_iou) {  // strict > keeps the lowest index on ties
        best_iou = v;
        best = int(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      flags[d] = true;
      taken[size_t(best)] = true;
    }
  }
  return flags;
}

double average_precision(std::vector<std::pair<double, bool>> scored_flags,
                         long num_gt) {
  if (num_gt <= 0) return 0.0;
  std::stable_sort(scored_flags.begin(), scored_flags.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  // Precision at each rank, then area under the right-max envelope.
  std::vector<double> prec, rec;
  long tp = 0, fp = 0;
  for (const auto& [score, is_tp] : scored_flags) {
    (is_tp ? tp : fp) += 1;
    prec.push_back(double(tp) / double(tp + fp));
    rec.push_back(double(tp) / double(num_gt));
  }
  double ap = 0.0, env = 0.0;
  for (size_t i = prec.size(); i-- > 0;) {
    env = std::max(env, prec[i]);
    const double r_prev = i > 0 ? rec[i - 1] : 0.0;
    ap += (rec[i] - r_prev) * env;
  }
  return ap;
}

EvalResult evaluate_detections(
    const std::vector<std::vector<Detection>>& dets,
    const std::vector<std::vector<SceneObject>>& gts, int num_classes) {
  if (dets.size() != gts.size())
    throw ShapeMismatch("evaluate_detections: image count mismatch");
  EvalResult res;
  double ap_sum = 0.0;
  int ap_classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::pair<double, bool>> pooled;
    long num_gt = 0;
    for (size_t img = 0; img < dets.size(); ++img) {
      std::vector<Detection> cls_dets;
      for (const auto& d : dets[img])
        if (d.class_id == c) cls_dets.push_back(d);
      std::stable_sort(
          cls_dets.begin(), cls_dets.end(),
          [](const Detection& a, const Detection& b) { return a.score > b.score; });
      std::vector<Box> cls_gts;
      for (const auto& o : gts[img])
        if (o.class_id == c) cls_gts.push_back(o.box);
      num_gt += long(cls_gts.size());
      const auto flags = match_detections(cls_dets, cls_gts, 0.5);
      for (size_t i = 0; i < flags.size(); ++i) {
        pooled.emplace_back(cls_dets[i].score, flags[i]);
        (flags[i] ? res.counts[c].tp : res.counts[c].fp) += 1;
      }
    }
    res.counts[c].num_gt = num_gt;
    res.per_class_ap[c] = average_precision(pooled, num_gt);
    if (num_gt > 0) {
      ap_sum += res.per_class_ap[c];
      ++ap_classes;
    }
  }
  res.map50 = ap_classes > 0 ? ap_sum / double(ap_classes) : 0.0;
  return res;
}

std::vector<std::vector<Detection>> eval_split_detections(
    const DetectorParams& params, const DetectorConfig& cfg,
    const Dataset& data) {
  std::vector<std::vector<Detection>> dets;
  dets.reserve(size_t(data.eval_size()));
  for (int i = 0; i < data.eval_size(); ++i) {
    Tensor img = data.eval_target(i);
    BackboneFeatures f = forward_backbone(nullptr, img, params, cfg);
    DensePrediction pred = forward_head(nullptr, f, params, cfg);
    dets.push_back(decode(pred, kEvalScoreThresh, kEvalNmsIou, kEvalMaxDets));
  }
  return dets;
}

EvalResult Evaluator::evaluate(const DetectorParams& params,
                               const DetectorConfig& cfg, const Dataset& data) {
  auto dets = eval_split_detections(params, cfg, data);
  std::vector<std::vector<SceneObject>> gts;
  gts.reserve(size_t(data.eval_size()));
  for (int i = 0; i < data.eval_size(); ++i)
    gts.push_back(data.eval_annotations(i, EvalAccess{}));
  return evaluate_detections(dets, gts, cfg.num_classes);
}

std::string EvalResult::to_json() const {
  nlohmann::json j;
  j["map50"] = map50;
  j["interpolation"] = interpolation;
  j["per_class_ap"] = nlohmann::json::object();
  for (const auto& [c, ap] : per_class_ap) {
    j["per_class_ap"][std::to_string(c)] = ap;
    j["per_class"][std::to_string(c)]["ap"] = ap;
  }
  for (const auto& [c, k] : counts) {
    auto& e = j["per_class"][std::to_string(c)];
    e["tp"] = k.tp;
    e["fp"] = k.fp;
    e["fn"] = k.fn();
    e["num_gt"] = k.num_gt;
  }
  return j.dump(2);
}

}  // namespace dadet

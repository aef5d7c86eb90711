#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dadet/contrastive.hpp"
#include "dadet/dataset.hpp"
#include "dadet/detector.hpp"
#include "dadet/evaluation.hpp"
#include "dadet/mean_teacher.hpp"

namespace dadet {

struct TrainToggles {
  bool contrastive_enabled = true;
  bool class_based_contrast = true;  // off: all-distinct ids (instance mode)
  bool multi_scale = true;           // off: finest configured level only
  bool cutout_exclusion = true;
};

struct TrainConfig {
  double alpha = kEmaAlpha;
  double tau = kTau;
  double lambda_contrast = kLambdaContrast;
  double lambda_unsup_det = 1.0;
  double lambda_sup_det = 1.0;
  double gamma = kPseudoGamma;  // pseudo-label confidence floor
  double lr = 0.01;
  int burn_in_iters = 300;
  int max_iters = 1500;
  int batch_size = 4;  // per stream: this many labeled plus this many target
  std::vector<int> feature_levels{0, 1, 2, 3};
  double noise_fraction = 0.0;
  TrainToggles toggles;
  std::uint64_t seed = 1;
  int eval_interval = 300;
  DetectorConfig detector;

  void validate() const;  // ConfigInvalid on any out-of-range field
  std::string to_json() const;
};

// Flat key=value text ('#' comments, blank lines ignored); unknown keys and
// unparsable values raise ConfigInvalid. Missing keys keep their defaults.
TrainConfig parse_train_config(const std::string& text);

// Inverse of to_json, for manifests and checkpoint headers. Unknown keys and
// type mismatches raise ConfigInvalid; missing keys keep their defaults.
TrainConfig train_config_from_json(const std::string& json_text);

struct StepRecord {
  int iter = 0;  // 1-based adaptation step
  double loss_contrast = 0.0;   // unweighted component values
  double loss_unsup_det = 0.0;
  double loss_sup_det = 0.0;
  double loss_total = 0.0;      // weighted sum actually stepped on
  int num_pseudo_labels = 0;    // after the confidence filter
  int num_excluded = 0;         // dropped by cutout exclusion
};

struct EvalRecord {
  int iter = 0;  // 0 = freshly burned-in teacher, before adaptation
  double map50 = 0.0;
  std::map<int, double> per_class_ap;
};

struct MetricLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  // One JSON object per line, in execution order (an eval at iteration t
  // follows the step with the same t; the iteration-0 eval leads).
  std::string to_jsonl() const;
};

struct LabeledExample {
  Tensor image;  // source domain, original coordinates
  std::vector<SceneObject> objects;
};

struct TrainState {
  DetectorParams student;
  DetectorParams teacher;
  // Global step index (burn-in steps included) seeding the per-iteration
  // augmentation streams; train_step increments it.
  int iter = 0;
};

// Supervised-only SGD on random source batches for cfg.burn_in_iters steps
// (global iterations 0..burn_in_iters-1), then returns an exact copy of the
// student as the initial teacher.
DetectorParams burn_in(DetectorParams& student, const Dataset& data,
                       const TrainConfig& cfg);

// One adaptation iteration: EMA teacher update, pseudo-labeling on the weak
// target views (cutout exclusion, label noise), contrastive + unsupervised +
// supervised losses, one clipped SGD step on the student. TrainingDiverged if
// the total loss is not finite.
StepRecord train_step(TrainState& state,
                      const std::vector<LabeledExample>& batch_labeled,
                      const std::vector<Tensor>& batch_unlabeled,
                      const TrainConfig& cfg);

struct RunOutput {
  Checkpoint checkpoint;  // final student + teacher
  MetricLog log;
};

// Burn-in, then max_iters adaptation steps with the teacher evaluated on the
// held-out target split at iteration 0, every eval_interval steps, and at the
// end. Deterministic in (cfg, dataset).
RunOutput run(const TrainConfig& cfg, const Dataset& data);

struct SweepCell {
  double fraction = 0.0;
  std::string variant;  // "baseline" (contrastive off) or "cmt"
  std::vector<double> final_map;  // one per seed, ordered as given
  double mean = 0.0;
  double stddev = 0.0;  // population
};

// Full runs for every (fraction, variant, seed); jobs > 1 runs them on a
// thread pool. Cell order: fractions outer, baseline before cmt.
std::vector<SweepCell> noise_sweep(const TrainConfig& base, const Dataset& data,
                                   const std::vector<double>& fractions,
                                   const std::vector<std::uint64_t>& seeds,
                                   int jobs = 1);
std::string sweep_csv(const std::vector<SweepCell>& cells,
                      const std::vector<std::uint64_t>& seeds);

struct AblationCell {
  std::string name;
  TrainToggles toggles;
  std::vector<double> final_map;
  double mean = 0.0;
  double stddev = 0.0;
};

// The no-contrastive baseline plus the {class_based, multi_scale} 2x2 grid.
std::vector<AblationCell> ablate(const TrainConfig& base, const Dataset& data,
                                 const std::vector<std::uint64_t>& seeds,
                                 int jobs = 1);
std::string ablate_csv(const std::vector<AblationCell>& cells,
                       const std::vector<std::uint64_t>& seeds);

}  // namespace dadet

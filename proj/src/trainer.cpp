#include "dadet/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>

#include "dadet/errors.hpp"
#include "dadet/rng.hpp"

namespace dadet {

namespace {

using nlohmann::json;

// Independent stream families: batch-index draws and augmentation/noise draws
// never share a sequence, so adding a draw to one cannot shift the other.
constexpr std::uint64_t kSaltBatch = 0xB1;
constexpr std::uint64_t kSaltAugment = 0xA2;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t salt, int iter) {
  return Rng::mix(Rng::mix(seed, salt), std::uint64_t(iter));
}

// Bit-exact weight fingerprint; any mutation flips it.
std::uint64_t params_fingerprint(const DetectorParams& p) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : p.tensors)
    for (double v : t.data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 1099511628211ull;
    }
  return h;
}

double parse_double(const std::string& key, const std::string& val) {
  try {
    size_t pos = 0;
    const double d = std::stod(val, &pos);
    if (pos != val.size()) throw std::invalid_argument(val);
    return d;
  } catch (const std::exception&) {
    throw ConfigInvalid("config: bad number for " + key + ": '" + val + "'");
  }
}

long long parse_int(const std::string& key, const std::string& val) {
  try {
    size_t pos = 0;
    const long long i = std::stoll(val, &pos);
    if (pos != val.size()) throw std::invalid_argument(val);
    return i;
  } catch (const std::exception&) {
    throw ConfigInvalid("config: bad integer for " + key + ": '" + val + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& val) {
  if (val == "true" || val == "1") return true;
  if (val == "false" || val == "0") return false;
  throw ConfigInvalid("config: bad bool for " + key + ": '" + val + "'");
}

std::vector<int> parse_int_list(const std::string& key,
                                const std::string& val) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(val);
  while (std::getline(in, item, ',')) {
    const size_t a = item.find_first_not_of(" \t");
    const size_t b = item.find_last_not_of(" \t");
    if (a == std::string::npos)
      throw ConfigInvalid("config: empty list item for " + key);
    out.push_back(int(parse_int(key, item.substr(a, b - a + 1))));
  }
  if (out.empty()) throw ConfigInvalid("config: empty list for " + key);
  return out;
}

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double final_map(const MetricLog& log) {
  if (log.evals.empty()) throw EmptyBatch("run produced no eval records");
  return log.evals.back().map50;
}

void mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
  mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  stddev = std::sqrt(var / double(xs.size()));
}

// Runs independent tasks on `jobs` threads; the first exception is rethrown
// on the caller after all workers drain.
void run_tasks(std::vector<std::function<void()>>& tasks, int jobs) {
  jobs = std::max(1, jobs);
  if (jobs == 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&] {
    for (size_t i; (i = next.fetch_add(1)) < tasks.size();) {
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::string csv_number(double v) {
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigInvalid("config: " + m); };
  if (!(alpha >= 0.0 && alpha < 1.0)) fail("alpha must be in [0,1)");
  if (!(tau > 0.0)) fail("tau must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(lambda_contrast >= 0.0 && lambda_unsup_det >= 0.0 &&
        lambda_sup_det >= 0.0))
    fail("loss weights must be nonnegative");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma must be in [0,1]");
  if (!(noise_fraction >= 0.0 && noise_fraction <= 1.0))
    fail("noise_fraction must be in [0,1]");
  if (burn_in_iters < 0 || max_iters < 0)
    fail("iteration counts must be nonnegative");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (eval_interval < 1) fail("eval_interval must be at least 1");
  if (feature_levels.empty()) fail("feature_levels must be nonempty");
  for (int l : feature_levels)
    if (l < 0 || l >= int(detector.channels.size()))
      fail("feature level out of range");
  if (detector.num_classes < 1) fail("num_classes must be at least 1");
  if (detector.channels.empty()) fail("channels must be nonempty");
  for (int c : detector.channels)
    if (c < 1) fail("channels must be positive");
  if (detector.head_channels < 1) fail("head_channels must be at least 1");
  if (detector.head_stage < 0 ||
      detector.head_stage >= int(detector.channels.size()))
    fail("head_stage out of range");
}

std::string TrainConfig::to_json() const {
  json j;
  j["alpha"] = alpha;
  j["tau"] = tau;
  j["lambda_contrast"] = lambda_contrast;
  j["lambda_unsup_det"] = lambda_unsup_det;
  j["lambda_sup_det"] = lambda_sup_det;
  j["gamma"] = gamma;
  j["lr"] = lr;
  j["burn_in_iters"] = burn_in_iters;
  j["max_iters"] = max_iters;
  j["batch_size"] = batch_size;
  j["feature_levels"] = feature_levels;
  j["noise_fraction"] = noise_fraction;
  j["contrastive_enabled"] = toggles.contrastive_enabled;
  j["class_based_contrast"] = toggles.class_based_contrast;
  j["multi_scale"] = toggles.multi_scale;
  j["cutout_exclusion"] = toggles.cutout_exclusion;
  j["seed"] = seed;
  j["eval_interval"] = eval_interval;
  j["num_classes"] = detector.num_classes;
  j["channels"] = detector.channels;
  j["head_channels"] = detector.head_channels;
  j["head_stage"] = detector.head_stage;
  return j.dump();
}

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigInvalid("config line " + std::to_string(lineno) +
                          ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));

    if (key == "alpha") cfg.alpha = parse_double(key, val);
    else if (key == "tau") cfg.tau = parse_double(key, val);
    else if (key == "lambda_contrast") cfg.lambda_contrast = parse_double(key, val);
    else if (key == "lambda_unsup_det") cfg.lambda_unsup_det = parse_double(key, val);
    else if (key == "lambda_sup_det") cfg.lambda_sup_det = parse_double(key, val);
    else if (key == "gamma") cfg.gamma = parse_double(key, val);
    else if (key == "lr") cfg.lr = parse_double(key, val);
    else if (key == "burn_in_iters") cfg.burn_in_iters = int(parse_int(key, val));
    else if (key == "max_iters") cfg.max_iters = int(parse_int(key, val));
    else if (key == "batch_size") cfg.batch_size = int(parse_int(key, val));
    else if (key == "feature_levels") cfg.feature_levels = parse_int_list(key, val);
    else if (key == "noise_fraction") cfg.noise_fraction = parse_double(key, val);
    else if (key == "contrastive_enabled") cfg.toggles.contrastive_enabled = parse_bool(key, val);
    else if (key == "class_based_contrast") cfg.toggles.class_based_contrast = parse_bool(key, val);
    else if (key == "multi_scale") cfg.toggles.multi_scale = parse_bool(key, val);
    else if (key == "cutout_exclusion") cfg.toggles.cutout_exclusion = parse_bool(key, val);
    else if (key == "seed") cfg.seed = std::uint64_t(parse_int(key, val));
    else if (key == "eval_interval") cfg.eval_interval = int(parse_int(key, val));
    else if (key == "num_classes") cfg.detector.num_classes = int(parse_int(key, val));
    else if (key == "channels") cfg.detector.channels = parse_int_list(key, val);
    else if (key == "head_channels") cfg.detector.head_channels = int(parse_int(key, val));
    else if (key == "head_stage") cfg.detector.head_stage = int(parse_int(key, val));
    else throw ConfigInvalid("config line " + std::to_string(lineno) +
                             ": unknown key '" + key + "'");
  }
  return cfg;
}

TrainConfig train_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigInvalid(std::string("config json: ") + e.what());
  }
  if (!j.is_object()) throw ConfigInvalid("config json: expected an object");
  TrainConfig cfg;
  try {
    for (const auto& [key, val] : j.items()) {
      if (key == "alpha") cfg.alpha = val.get<double>();
      else if (key == "tau") cfg.tau = val.get<double>();
      else if (key == "lambda_contrast") cfg.lambda_contrast = val.get<double>();
      else if (key == "lambda_unsup_det") cfg.lambda_unsup_det = val.get<double>();
      else if (key == "lambda_sup_det") cfg.lambda_sup_det = val.get<double>();
      else if (key == "gamma") cfg.gamma = val.get<double>();
      else if (key == "lr") cfg.lr = val.get<double>();
      else if (key == "burn_in_iters") cfg.burn_in_iters = val.get<int>();
      else if (key == "max_iters") cfg.max_iters = val.get<int>();
      else if (key == "batch_size") cfg.batch_size = val.get<int>();
      else if (key == "feature_levels") cfg.feature_levels = val.get<std::vector<int>>();
      else if (key == "noise_fraction") cfg.noise_fraction = val.get<double>();
      else if (key == "contrastive_enabled") cfg.toggles.contrastive_enabled = val.get<bool>();
      else if (key == "class_based_contrast") cfg.toggles.class_based_contrast = val.get<bool>();
      else if (key == "multi_scale") cfg.toggles.multi_scale = val.get<bool>();
      else if (key == "cutout_exclusion") cfg.toggles.cutout_exclusion = val.get<bool>();
      else if (key == "seed") cfg.seed = val.get<std::uint64_t>();
      else if (key == "eval_interval") cfg.eval_interval = val.get<int>();
      else if (key == "num_classes") cfg.detector.num_classes = val.get<int>();
      else if (key == "channels") cfg.detector.channels = val.get<std::vector<int>>();
      else if (key == "head_channels") cfg.detector.head_channels = val.get<int>();
      else if (key == "head_stage") cfg.detector.head_stage = val.get<int>();
      else throw ConfigInvalid("config json: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigInvalid(std::string("config json: ") + e.what());
  }
  return cfg;
}

std::string MetricLog::to_jsonl() const {
  std::string out;
  size_t si = 0, ei = 0;
  auto emit_step = [&] {
    const StepRecord& r = steps[si++];
    json j;
    j["type"] = "step";
    j["iter"] = r.iter;
    j["loss_contrast"] = r.loss_contrast;
    j["loss_unsup_det"] = r.loss_unsup_det;
    j["loss_sup_det"] = r.loss_sup_det;
    j["loss_total"] = r.loss_total;
    j["num_pseudo_labels"] = r.num_pseudo_labels;
    j["num_excluded"] = r.num_excluded;
    out += j.dump();
    out += '\n';
  };
  auto emit_eval = [&] {
    const EvalRecord& r = evals[ei++];
    json ap = json::object();
    for (const auto& [cls, v] : r.per_class_ap) ap[std::to_string(cls)] = v;
    json j;
    j["type"] = "eval";
    j["iter"] = r.iter;
    j["map50"] = r.map50;
    j["per_class_ap"] = ap;
    out += j.dump();
    out += '\n';
  };
  // An eval at iteration t follows the step with that t; iteration 0 leads.
  while (si < steps.size() || ei < evals.size()) {
    if (ei < evals.size() &&
        (si == steps.size() || evals[ei].iter < steps[si].iter))
      emit_eval();
    else
      emit_step();
  }
  return out;
}

namespace {

// Mean supervised detection loss over strong-augmented labeled images.
Tensor supervised_loss(GradTape* tape, const DetectorParams& student,
                       const std::vector<LabeledExample>& batch,
                       const TrainConfig& cfg, Rng& aug) {
  Tensor acc;
  for (size_t b = 0; b < batch.size(); ++b) {
    StrongAugmented s = apply_strong(batch[b].image, aug);
    BackboneFeatures f = forward_backbone(tape, s.image, student, cfg.detector);
    DensePrediction pred = forward_head(tape, f, student, cfg.detector);
    Tensor li = detection_loss(tape, pred, batch[b].objects);
    acc = b ? add(tape, acc, li) : li;
  }
  return mul_scalar(tape, acc, 1.0 / double(batch.size()));
}

std::vector<LabeledExample> draw_labeled(const Dataset& data, int n, Rng& rng) {
  std::vector<LabeledExample> out;
  for (int b = 0; b < n; ++b) {
    const int idx = rng.uniform_int(data.train_size());
    out.push_back({data.train_source(idx), data.train_annotations(idx)});
  }
  return out;
}

std::vector<Tensor> draw_unlabeled(const Dataset& data, int n, Rng& rng) {
  std::vector<Tensor> out;
  for (int b = 0; b < n; ++b)
    out.push_back(data.train_target(rng.uniform_int(data.train_size())));
  return out;
}

}  // namespace

DetectorParams burn_in(DetectorParams& student, const Dataset& data,
                       const TrainConfig& cfg) {
  if (cfg.burn_in_iters > 0 && data.train_size() == 0)
    throw EmptyBatch("burn_in: empty train split");
  for (int g = 0; g < cfg.burn_in_iters; ++g) {
    Rng batch_rng(stream_seed(cfg.seed, kSaltBatch, g));
    Rng aug(stream_seed(cfg.seed, kSaltAugment, g));
    std::vector<LabeledExample> batch =
        draw_labeled(data, cfg.batch_size, batch_rng);
    GradTape tape;
    watch_all(student, tape);
    Tensor loss = supervised_loss(&tape, student, batch, cfg, aug);
    if (!std::isfinite(loss.data[0]))
      throw TrainingDiverged("burn_in: non-finite loss at iteration " +
                             std::to_string(g));
    tape.backward(loss);
    sgd_step(student, tape, cfg.lr);
  }
  return student;
}

StepRecord train_step(TrainState& state,
                      const std::vector<LabeledExample>& batch_labeled,
                      const std::vector<Tensor>& batch_unlabeled,
                      const TrainConfig& cfg) {
  if (batch_labeled.empty() || batch_unlabeled.empty())
    throw EmptyBatch("train_step: both batches must be nonempty");
  StepRecord rec;
  rec.iter = state.iter - cfg.burn_in_iters + 1;

  // Step 2: EMA against the pre-step student, before pseudo-labeling.
  ema_update(state.teacher, state.student, cfg.alpha);
  const std::uint64_t teacher_fp = params_fingerprint(state.teacher);

  Rng aug(stream_seed(cfg.seed, kSaltAugment, state.iter));

  // Step 1: weak teacher views and strong student views of the target batch.
  // All augmentation draws happen in this fixed order; forwards consume none.
  struct TargetViews {
    Tensor img_weak;
    AugRecord rec_weak;
    Tensor img_strong;
    AugRecord rec_strong;
  };
  std::vector<TargetViews> views;
  for (const Tensor& img : batch_unlabeled) {
    WeakAugmented wk = apply_weak(img, {}, aug);
    StrongAugmented st = apply_strong(img, aug);
    views.push_back({std::move(wk.image), wk.record, std::move(st.image),
                     st.record});
  }

  // Step 3: pseudo-labels from the teacher forward, which is kept for its
  // feature maps (no second backbone pass).
  const int nt = int(batch_unlabeled.size());
  std::vector<BackboneFeatures> featT(static_cast<size_t>(nt));
  std::vector<PseudoLabelSet> labels(static_cast<size_t>(nt));
  for (int i = 0; i < nt; ++i) {
    featT[size_t(i)] = forward_backbone(nullptr, views[size_t(i)].img_weak,
                                        state.teacher, cfg.detector);
    DensePrediction predT =
        forward_head(nullptr, featT[size_t(i)], state.teacher, cfg.detector);
    PseudoLabelSet pl = pseudo_label_from(predT, views[size_t(i)].rec_weak,
                                          cfg.gamma, kEvalNmsIou);
    rec.num_pseudo_labels += pl.size();
    if (cfg.toggles.cutout_exclusion) {
      PseudoLabelSet kept =
          cutout_exclusion(views[size_t(i)].img_weak,
                           views[size_t(i)].img_strong, pl,
                           views[size_t(i)].rec_strong);
      rec.num_excluded += pl.size() - kept.size();
      pl = std::move(kept);
    }
    if (cfg.noise_fraction > 0.0)
      pl = inject_label_noise(pl, cfg.noise_fraction,
                              cfg.detector.num_classes, aug);
    labels[size_t(i)] = std::move(pl);
  }

  // Step 4: student forward on the strong views; features shared by the
  // contrastive and unsupervised detection losses.
  GradTape tape;
  watch_all(state.student, tape);
  std::vector<BackboneFeatures> featS(static_cast<size_t>(nt));
  std::vector<DensePrediction> predS(static_cast<size_t>(nt));
  for (int i = 0; i < nt; ++i) {
    featS[size_t(i)] = forward_backbone(&tape, views[size_t(i)].img_strong,
                                        state.student, cfg.detector);
    predS[size_t(i)] =
        forward_head(&tape, featS[size_t(i)], state.student, cfg.detector);
  }

  // Step 5: contrastive loss, averaged over target images that yield usable
  // object pairs. lambda = 0 takes the disabled path so the baseline
  // comparison stays bitwise.
  Tensor loss_c;
  bool has_c = false;
  if (cfg.toggles.contrastive_enabled && cfg.lambda_contrast > 0.0) {
    ContrastiveConfig ccfg;
    ccfg.tau = cfg.tau;
    ccfg.levels = cfg.feature_levels;
    if (!cfg.toggles.multi_scale)
      ccfg.levels = {*std::min_element(cfg.feature_levels.begin(),
                                       cfg.feature_levels.end())};
    Tensor acc;
    int contributors = 0;
    for (int i = 0; i < nt; ++i) {
      if (labels[size_t(i)].size() == 0) continue;
      PseudoLabelSet cl = labels[size_t(i)];
      if (!cfg.toggles.class_based_contrast)
        for (size_t k = 0; k < cl.classes.size(); ++k)
          cl.classes[k] = int(k);  // all distinct: instance discrimination
      try {
        Tensor li = multi_scale_contrastive(
            &tape, featS[size_t(i)], featT[size_t(i)], cl,
            views[size_t(i)].rec_strong, views[size_t(i)].rec_weak, ccfg);
        acc = contributors ? add(&tape, acc, li) : li;
        ++contributors;
      } catch (const EmptyBatch&) {
        // no object survived extraction at any level for this image
      }
    }
    if (contributors > 0) {
      loss_c = mul_scalar(&tape, acc, 1.0 / double(contributors));
      has_c = true;
    }
  }

  // Step 6: unsupervised detection loss against pseudo-labels mapped into the
  // student view; images without surviving labels carry no signal.
  Tensor loss_u;
  bool has_u = false;
  {
    Tensor acc;
    int contributors = 0;
    for (int i = 0; i < nt; ++i) {
      std::vector<SceneObject> objs;
      const PseudoLabelSet& pl = labels[size_t(i)];
      for (int k = 0; k < pl.size(); ++k) {
        try {
          Box b = transform_box(pl.boxes[size_t(k)], pl.view,
                                views[size_t(i)].rec_strong);
          objs.push_back({pl.classes[size_t(k)], b});
        } catch (const BoxOutsideView&) {
        }
      }
      if (objs.empty()) continue;
      Tensor li = detection_loss(&tape, predS[size_t(i)], objs);
      acc = contributors ? add(&tape, acc, li) : li;
      ++contributors;
    }
    if (contributors > 0) {
      loss_u = mul_scalar(&tape, acc, 1.0 / double(contributors));
      has_u = true;
    }
  }

  // Step 7: supervised loss on the labeled batch (strong views).
  Tensor loss_s = supervised_loss(&tape, state.student, batch_labeled, cfg,
                                  aug);

  // Step 8: weighted total, one clipped SGD step on the student only.
  Tensor total;
  bool has_total = false;
  auto accumulate = [&](const Tensor& term, double weight) {
    Tensor w = mul_scalar(&tape, term, weight);
    total = has_total ? add(&tape, total, w) : w;
    has_total = true;
  };
  if (has_c) accumulate(loss_c, cfg.lambda_contrast);
  if (has_u) accumulate(loss_u, cfg.lambda_unsup_det);
  accumulate(loss_s, cfg.lambda_sup_det);

  rec.loss_contrast = has_c ? loss_c.data[0] : 0.0;
  rec.loss_unsup_det = has_u ? loss_u.data[0] : 0.0;
  rec.loss_sup_det = loss_s.data[0];
  rec.loss_total = total.data[0];
  if (!std::isfinite(rec.loss_total))
    throw TrainingDiverged("train_step: non-finite loss at iteration " +
                           std::to_string(rec.iter));

  tape.backward(total);
  sgd_step(state.student, tape, cfg.lr);

  if (params_fingerprint(state.teacher) != teacher_fp)
    throw std::logic_error("train_step: teacher mutated outside ema_update");

  ++state.iter;
  return rec;
}

RunOutput run(const TrainConfig& cfg, const Dataset& data) {
  cfg.validate();
  if (data.train_size() == 0) throw EmptyBatch("run: empty train split");

  TrainState st;
  st.student = init_detector(cfg.detector, cfg.seed);
  st.teacher = burn_in(st.student, data, cfg);
  st.iter = cfg.burn_in_iters;

  MetricLog log;
  auto do_eval = [&](int iter_label) {
    EvalResult r = Evaluator::evaluate(st.teacher, cfg.detector, data);
    EvalRecord e;
    e.iter = iter_label;
    e.map50 = r.map50;
    e.per_class_ap = r.per_class_ap;
    log.evals.push_back(std::move(e));
  };
  do_eval(0);  // burned-in, pre-adaptation teacher

  for (int t = 1; t <= cfg.max_iters; ++t) {
    Rng batch_rng(stream_seed(cfg.seed, kSaltBatch, st.iter));
    std::vector<LabeledExample> labeled =
        draw_labeled(data, cfg.batch_size, batch_rng);
    std::vector<Tensor> unlabeled =
        draw_unlabeled(data, cfg.batch_size, batch_rng);
    log.steps.push_back(train_step(st, labeled, unlabeled, cfg));
    if (t % cfg.eval_interval == 0 && t != cfg.max_iters) do_eval(t);
  }
  if (cfg.max_iters > 0) do_eval(cfg.max_iters);

  RunOutput out;
  out.checkpoint = Checkpoint{st.student, st.teacher, cfg.to_json()};
  out.log = std::move(log);
  return out;
}

std::vector<SweepCell> noise_sweep(const TrainConfig& base, const Dataset& data,
                                   const std::vector<double>& fractions,
                                   const std::vector<std::uint64_t>& seeds,
                                   int jobs) {
  std::vector<SweepCell> cells;
  for (double f : fractions)
    for (const char* variant : {"baseline", "cmt"}) {
      SweepCell c;
      c.fraction = f;
      c.variant = variant;
      c.final_map.assign(seeds.size(), 0.0);
      cells.push_back(std::move(c));
    }

  std::vector<std::function<void()>> tasks;
  for (size_t ci = 0; ci < cells.size(); ++ci)
    for (size_t si = 0; si < seeds.size(); ++si)
      tasks.push_back([&, ci, si] {
        TrainConfig cfg = base;
        cfg.noise_fraction = cells[ci].fraction;
        cfg.toggles.contrastive_enabled = cells[ci].variant == "cmt";
        cfg.seed = seeds[si];
        cells[ci].final_map[si] = final_map(run(cfg, data).log);
      });
  run_tasks(tasks, jobs);

  for (auto& c : cells) mean_std(c.final_map, c.mean, c.stddev);
  return cells;
}

std::string sweep_csv(const std::vector<SweepCell>& cells,
                      const std::vector<std::uint64_t>& seeds) {
  std::string out = "fraction,variant";
  for (std::uint64_t s : seeds) out += ",seed_" + std::to_string(s);
  out += ",mean_map50,std_map50\n";
  for (const auto& c : cells) {
    out += csv_number(c.fraction) + "," + c.variant;
    for (double m : c.final_map) out += "," + csv_number(m);
    out += "," + csv_number(c.mean) + "," + csv_number(c.stddev) + "\n";
  }
  return out;
}

std::vector<AblationCell> ablate(const TrainConfig& base, const Dataset& data,
                                 const std::vector<std::uint64_t>& seeds,
                                 int jobs) {
  auto make = [&](const char* name, bool on, bool class_based, bool multi) {
    AblationCell c;
    c.name = name;
    c.toggles = base.toggles;
    c.toggles.contrastive_enabled = on;
    c.toggles.class_based_contrast = class_based;
    c.toggles.multi_scale = multi;
    c.final_map.assign(seeds.size(), 0.0);
    return c;
  };
  std::vector<AblationCell> cells;
  cells.push_back(make("no_contrastive", false, true, true));
  cells.push_back(make("instance_single", true, false, false));
  cells.push_back(make("instance_multi", true, false, true));
  cells.push_back(make("class_single", true, true, false));
  cells.push_back(make("class_multi", true, true, true));

  std::vector<std::function<void()>> tasks;
  for (size_t ci = 0; ci < cells.size(); ++ci)
    for (size_t si = 0; si < seeds.size(); ++si)
      tasks.push_back([&, ci, si] {
        TrainConfig cfg = base;
        cfg.toggles = cells[ci].toggles;
        cfg.seed = seeds[si];
        cells[ci].final_map[si] = final_map(run(cfg, data).log);
      });
  run_tasks(tasks, jobs);

  for (auto& c : cells) mean_std(c.final_map, c.mean, c.stddev);
  return cells;
}

std::string ablate_csv(const std::vector<AblationCell>& cells,
                       const std::vector<std::uint64_t>& seeds) {
  std::string out = "config,contrastive,class_based,multi_scale";
  for (std::uint64_t s : seeds) out += ",seed_" + std::to_string(s);
  out += ",mean_map50,std_map50\n";
  for (const auto& c : cells) {
    out += c.name;
    out += c.toggles.contrastive_enabled ? ",1" : ",0";
    out += c.toggles.class_based_contrast ? ",1" : ",0";
    out += c.toggles.multi_scale ? ",1" : ",0";
    for (double m : c.final_map) out += "," + csv_number(m);
    out += "," + csv_number(c.mean) + "," + csv_number(c.stddev) + "\n";
  }
  return out;
}

}  // namespace dadet

#include "dadet/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dadet/checks.hpp"
#include "dadet/dataset.hpp"
#include "dadet/detector.hpp"
#include "dadet/errors.hpp"
#include "dadet/evaluation.hpp"
#include "dadet/png_io.hpp"
#include "dadet/trainer.hpp"

namespace dadet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join(const std::string& a, const std::string& b) {
  return (fs::path(a) / b).string();
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path);
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + path);
  f << content;
  f.flush();
  if (!f) throw IoError("write failed: " + path);
}

std::string hex_u64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string iso_utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Reconstructable-run record: one manifest.json per output directory.
void write_run_manifest(
    const std::string& out_dir, const std::string& command,
    const TrainConfig& cfg, const Dataset& data, const std::string& data_dir,
    const std::vector<std::pair<std::string, std::string>>& artifacts,
    const json& extra = json::object()) {
  json m;
  m["tool_version"] = kToolVersion;
  m["created_utc"] = iso_utc_now();
  m["command"] = command;
  m["config"] = json::parse(cfg.to_json());
  m["dataset"] = {{"dir", data_dir},
                  {"manifest_hash", hex_u64(data.manifest_hash_value())}};
  json arts = json::object();
  for (const auto& [name, path] : artifacts) arts[name] = path;
  m["artifacts"] = arts;
  for (const auto& [key, val] : extra.items()) m[key] = val;
  write_text_file(join(out_dir, "manifest.json"), m.dump(2) + "\n");
}

std::array<std::uint8_t, 3> class_color(int class_id) {
  static const std::array<std::array<std::uint8_t, 3>, 6> palette = {{
      {230, 60, 60}, {60, 200, 60}, {70, 110, 240},
      {230, 200, 50}, {200, 80, 220}, {60, 210, 210}}};
  return palette[size_t(class_id % 6)];
}

void draw_box(ImageU8& img, const Box& b, const std::array<std::uint8_t, 3>& c) {
  const int x1 = std::clamp(int(std::lround(b.x1)), 0, img.width - 1);
  const int y1 = std::clamp(int(std::lround(b.y1)), 0, img.height - 1);
  const int x2 = std::clamp(int(std::lround(b.x2)), 0, img.width - 1);
  const int y2 = std::clamp(int(std::lround(b.y2)), 0, img.height - 1);
  auto set = [&](int x, int y) {
    std::uint8_t* p = &img.pixels[(size_t(y) * size_t(img.width) + size_t(x)) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  };
  for (int x = x1; x <= x2; ++x) {
    set(x, y1);
    set(x, y2);
  }
  for (int y = y1; y <= y2; ++y) {
    set(x1, y);
    set(x2, y);
  }
}

// Teacher detections drawn over the eval target images. Uses the
// annotation-free decode path, so the eval quarantine stays intact.
void dump_eval_detections(const DetectorParams& model, const DetectorConfig& dcfg,
                          const Dataset& data, const std::string& dir) {
  make_dir(dir);
  const auto dets = eval_split_detections(model, dcfg, data);
  for (int i = 0; i < data.eval_size(); ++i) {
    ImageU8 img = tensor_to_u8(data.eval_target(i));
    for (const Detection& d : dets[size_t(i)])
      draw_box(img, d.box, class_color(d.class_id));
    char name[32];
    std::snprintf(name, sizeof name, "eval_%04d.png", i);
    write_png(join(dir, name), img);
  }
}

struct GenDataOpts {
  std::string out;
  std::uint64_t seed = 1;
  int scenes = 80;
  int eval_scenes = 20;
  int width = 64;
  int height = 64;
  int classes = 3;
  int min_objects = 1;
  int max_objects = 6;
  double min_size = 10.0;
  double max_size = 28.0;
  double fog = 0.5;
  double blur = 1.0;
  double brightness = 0.0;
  double noise_std = 0.0;
};

int cmd_gen_data(const GenDataOpts& o, std::ostream& out) {
  DatasetConfig dc;
  dc.gen.width = o.width;
  dc.gen.height = o.height;
  dc.gen.num_classes = o.classes;
  dc.gen.min_objects = o.min_objects;
  dc.gen.max_objects = o.max_objects;
  dc.gen.min_size = o.min_size;
  dc.gen.max_size = o.max_size;
  dc.gen.domain.fog_density = o.fog;
  dc.gen.domain.blur_sigma = o.blur;
  dc.gen.domain.brightness_shift = o.brightness;
  dc.gen.domain.noise_std = o.noise_std;
  dc.train_scenes = o.scenes;
  dc.eval_scenes = o.eval_scenes;
  dc.seed = o.seed;
  generate_dataset(dc, o.out);
  json s;
  s["out_dir"] = o.out;
  s["train_scenes"] = o.scenes;
  s["eval_scenes"] = o.eval_scenes;
  s["manifest_hash"] = hex_u64(manifest_hash(dc));
  out << s.dump() << "\n";
  return kExitOk;
}

struct TrainOpts {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  bool no_contrastive = false;
  bool no_class_contrast = false;
  bool single_scale = false;
  bool no_cutout_exclusion = false;
  bool dump_detections = false;
  double noise = 0.0;
  std::uint64_t seed = 0;
  int iters = 0;
  int burn_in = 0;
  // Presence flags: only explicitly given options override the config file.
  bool noise_set = false;
  bool seed_set = false;
  bool iters_set = false;
  bool burn_in_set = false;
};

TrainConfig resolve_train_config(const TrainOpts& o) {
  TrainConfig cfg;
  if (!o.config_path.empty()) cfg = parse_train_config(read_text_file(o.config_path));
  if (o.no_contrastive) cfg.toggles.contrastive_enabled = false;
  if (o.no_class_contrast) cfg.toggles.class_based_contrast = false;
  if (o.single_scale) cfg.toggles.multi_scale = false;
  if (o.no_cutout_exclusion) cfg.toggles.cutout_exclusion = false;
  if (o.noise_set) cfg.noise_fraction = o.noise;
  if (o.seed_set) cfg.seed = o.seed;
  if (o.iters_set) cfg.max_iters = o.iters;
  if (o.burn_in_set) cfg.burn_in_iters = o.burn_in;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainOpts& o, std::ostream& out) {
  const TrainConfig cfg = resolve_train_config(o);
  Dataset data = Dataset::load(o.data_dir);
  make_dir(o.out_dir);
  RunOutput res = run(cfg, data);

  write_text_file(join(o.out_dir, "metrics.jsonl"), res.log.to_jsonl());
  save_checkpoint(join(o.out_dir, "checkpoint.bin"), res.checkpoint);
  std::vector<std::pair<std::string, std::string>> artifacts = {
      {"metrics", "metrics.jsonl"}, {"checkpoint", "checkpoint.bin"}};
  if (o.dump_detections) {
    dump_eval_detections(res.checkpoint.teacher, cfg.detector, data,
                         join(o.out_dir, "detections"));
    artifacts.emplace_back("detections", "detections");
  }
  write_run_manifest(o.out_dir, "train", cfg, data, o.data_dir, artifacts);

  json s;
  s["out_dir"] = o.out_dir;
  s["final_map50"] = res.log.evals.back().map50;
  s["steps"] = res.log.steps.size();
  s["evals"] = res.log.evals.size();
  out << s.dump() << "\n";
  return kExitOk;
}

struct EvalOpts {
  std::string checkpoint;
  std::string data_dir;
  std::string model = "teacher";
};

int cmd_eval(const EvalOpts& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const TrainConfig tc = train_config_from_json(ck.config_json);
  Dataset data = Dataset::load(o.data_dir);
  const DetectorParams& model = o.model == "student" ? ck.student : ck.teacher;
  const EvalResult r = Evaluator::evaluate(model, tc.detector, data);
  out << r.to_json() << "\n";
  return kExitOk;
}

struct SweepOpts {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::vector<double> fractions = {0.0, 0.5, 1.0};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int jobs = 1;
  int iters = 0;
  int burn_in = 0;
  bool iters_set = false;
  bool burn_in_set = false;
};

TrainConfig resolve_sweep_config(const SweepOpts& o) {
  TrainConfig cfg;
  if (!o.config_path.empty()) cfg = parse_train_config(read_text_file(o.config_path));
  if (o.iters_set) cfg.max_iters = o.iters;
  if (o.burn_in_set) cfg.burn_in_iters = o.burn_in;
  cfg.validate();
  if (o.seeds.empty()) throw ConfigInvalid("sweep: need at least one seed");
  if (o.jobs < 1) throw ConfigInvalid("sweep: jobs must be >= 1");
  return cfg;
}

int cmd_sweep_noise(const SweepOpts& o, std::ostream& out) {
  const TrainConfig cfg = resolve_sweep_config(o);
  if (o.fractions.empty()) throw ConfigInvalid("sweep: need at least one fraction");
  Dataset data = Dataset::load(o.data_dir);
  make_dir(o.out_dir);
  const auto cells = noise_sweep(cfg, data, o.fractions, o.seeds, o.jobs);
  const std::string csv = sweep_csv(cells, o.seeds);
  write_text_file(join(o.out_dir, "noise_sweep.csv"), csv);
  json extra;
  extra["sweep"] = {{"fractions", o.fractions}, {"seeds", o.seeds}};
  write_run_manifest(o.out_dir, "sweep-noise", cfg, data, o.data_dir,
                     {{"csv", "noise_sweep.csv"}}, extra);
  out << csv;
  return kExitOk;
}

int cmd_ablate(const SweepOpts& o, std::ostream& out) {
  const TrainConfig cfg = resolve_sweep_config(o);
  Dataset data = Dataset::load(o.data_dir);
  make_dir(o.out_dir);
  const auto cells = ablate(cfg, data, o.seeds, o.jobs);
  const std::string csv = ablate_csv(cells, o.seeds);
  write_text_file(join(o.out_dir, "ablation.csv"), csv);
  json extra;
  extra["sweep"] = {{"seeds", o.seeds}};
  write_run_manifest(o.out_dir, "ablate", cfg, data, o.data_dir,
                     {{"csv", "ablation.csv"}}, extra);
  out << csv;
  return kExitOk;
}

int cmd_selfcheck(std::ostream& out) {
  const auto results = checks::run_selfcheck();
  int passed = 0;
  std::vector<std::string> failing;
  for (const auto& r : results) {
    out << (r.passed ? "[PASS] " : "[FAIL] ") << std::left << std::setw(24)
        << r.name << " " << r.detail << "\n";
    if (r.passed)
      ++passed;
    else
      failing.push_back(r.name);
  }
  out << "selfcheck: " << passed << "/" << results.size() << " checks passed";
  if (!failing.empty()) {
    out << "; failing:";
    for (const auto& n : failing) out << " " << n;
  }
  out << "\n";
  return failing.empty() ? kExitOk : kExitCheckFailed;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"synthetic domain-adaptation workbench for a toy object detector",
               "dadet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  GenDataOpts gd;
  CLI::App* gen = app.add_subcommand(
      "gen-data", "Render a paired clean/degraded shape dataset");
  gen->add_option("--out", gd.out, "output directory")->required();
  gen->add_option("--seed", gd.seed, "generator seed");
  gen->add_option("--scenes", gd.scenes, "training scenes");
  gen->add_option("--eval-scenes", gd.eval_scenes, "evaluation scenes");
  gen->add_option("--width", gd.width, "image width, pixels");
  gen->add_option("--height", gd.height, "image height, pixels");
  gen->add_option("--classes", gd.classes, "number of shape classes");
  gen->add_option("--min-objects", gd.min_objects, "objects per scene, lower");
  gen->add_option("--max-objects", gd.max_objects, "objects per scene, upper");
  gen->add_option("--min-size", gd.min_size, "object box side, lower");
  gen->add_option("--max-size", gd.max_size, "object box side, upper");
  gen->add_option("--fog", gd.fog, "target fog density [0,1]");
  gen->add_option("--blur", gd.blur, "target blur sigma");
  gen->add_option("--brightness", gd.brightness, "target brightness shift");
  gen->add_option("--noise-std", gd.noise_std, "target pixel noise std");

  TrainOpts to;
  CLI::App* train = app.add_subcommand(
      "train", "Adapt a detector to the unlabeled target domain");
  train->add_option("--config", to.config_path, "key=value config file");
  train->add_option("--data", to.data_dir, "dataset directory")->required();
  train->add_option("--out", to.out_dir, "run output directory")->required();
  train->add_flag("--no-contrastive", to.no_contrastive,
                  "disable the contrastive objective");
  train->add_flag("--no-class-contrast", to.no_class_contrast,
                  "instance-only positives");
  train->add_flag("--single-scale", to.single_scale,
                  "finest feature level only");
  train->add_flag("--no-cutout-exclusion", to.no_cutout_exclusion,
                  "keep erased objects in the pair pool");
  train->add_flag("--dump-detections", to.dump_detections,
                  "write eval images with teacher boxes drawn");
  CLI::Option* noise_opt =
      train->add_option("--noise", to.noise, "pseudo-label noise fraction");
  CLI::Option* seed_opt = train->add_option("--seed", to.seed, "run seed");
  CLI::Option* iters_opt =
      train->add_option("--iters", to.iters, "adaptation iterations");
  CLI::Option* burn_opt =
      train->add_option("--burn-in", to.burn_in, "supervised warmup iterations");

  EvalOpts eo;
  CLI::App* eval = app.add_subcommand(
      "eval", "Score a checkpoint on the eval split, JSON to stdout");
  eval->add_option("--checkpoint", eo.checkpoint, "checkpoint file")->required();
  eval->add_option("--data", eo.data_dir, "dataset directory")->required();
  eval->add_option("--model", eo.model, "which weight set to score")
      ->check(CLI::IsMember({"teacher", "student"}));

  SweepOpts so;
  CLI::App* sweep = app.add_subcommand(
      "sweep-noise", "Train baseline and contrastive runs across noise levels");
  sweep->add_option("--config", so.config_path, "key=value config file");
  sweep->add_option("--data", so.data_dir, "dataset directory")->required();
  sweep->add_option("--out", so.out_dir, "output directory")->required();
  sweep->add_option("--fractions", so.fractions, "noise fractions")
      ->delimiter(',');
  sweep->add_option("--seeds", so.seeds, "one full run per seed")
      ->delimiter(',');
  sweep->add_option("--jobs", so.jobs, "concurrent runs");
  CLI::Option* s_iters_opt =
      sweep->add_option("--iters", so.iters, "adaptation iterations");
  CLI::Option* s_burn_opt =
      sweep->add_option("--burn-in", so.burn_in, "supervised warmup iterations");

  SweepOpts ao;
  CLI::App* abl = app.add_subcommand(
      "ablate", "Train every contrastive-component combination");
  abl->add_option("--config", ao.config_path, "key=value config file");
  abl->add_option("--data", ao.data_dir, "dataset directory")->required();
  abl->add_option("--out", ao.out_dir, "output directory")->required();
  abl->add_option("--seeds", ao.seeds, "one full run per seed")->delimiter(',');
  abl->add_option("--jobs", ao.jobs, "concurrent runs");
  CLI::Option* a_iters_opt =
      abl->add_option("--iters", ao.iters, "adaptation iterations");
  CLI::Option* a_burn_opt =
      abl->add_option("--burn-in", ao.burn_in, "supervised warmup iterations");

  CLI::App* self = app.add_subcommand(
      "selfcheck", "Run the oracle and gradient battery, table to stdout");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "argument error: " << e.what() << "\n";
    return kExitConfig;
  }

  to.noise_set = noise_opt->count() > 0;
  to.seed_set = seed_opt->count() > 0;
  to.iters_set = iters_opt->count() > 0;
  to.burn_in_set = burn_opt->count() > 0;
  so.iters_set = s_iters_opt->count() > 0;
  so.burn_in_set = s_burn_opt->count() > 0;
  ao.iters_set = a_iters_opt->count() > 0;
  ao.burn_in_set = a_burn_opt->count() > 0;

  try {
    if (gen->parsed()) return cmd_gen_data(gd, out);
    if (train->parsed()) return cmd_train(to, out);
    if (eval->parsed()) return cmd_eval(eo, out);
    if (sweep->parsed()) return cmd_sweep_noise(so, out);
    if (abl->parsed()) return cmd_ablate(ao, out);
    if (self->parsed()) return cmd_selfcheck(out);
  } catch (const ConfigInvalid& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const TrainingDiverged& e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  err << "no command given\n";
  return kExitConfig;
}

}  // namespace dadet

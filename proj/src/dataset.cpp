#include "dadet/dataset.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "dadet/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dadet {

namespace {

json config_to_json(const DatasetConfig& cfg) {
  return json{
      {"format_version", 1},
      {"seed", cfg.seed},
      {"train_scenes", cfg.train_scenes},
      {"eval_scenes", cfg.eval_scenes},
      {"gen",
       {{"width", cfg.gen.width},
        {"height", cfg.gen.height},
        {"num_classes", cfg.gen.num_classes},
        {"min_objects", cfg.gen.min_objects},
        {"max_objects", cfg.gen.max_objects},
        {"min_size", cfg.gen.min_size},
        {"max_size", cfg.gen.max_size},
        {"max_pairwise_iou", cfg.gen.max_pairwise_iou}}},
      {"domain",
       {{"fog_density", cfg.gen.domain.fog_density},
        {"blur_sigma", cfg.gen.domain.blur_sigma},
        {"brightness_shift", cfg.gen.domain.brightness_shift},
        {"noise_std", cfg.gen.domain.noise_std}}},
  };
}

std::string image_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d.png", id);
  return buf;
}

json annotations_to_json(const std::vector<std::vector<SceneObject>>& ann,
                         int first_id) {
  json out = json::object();
  for (size_t i = 0; i < ann.size(); ++i) {
    json list = json::array();
    for (const auto& o : ann[i])
      list.push_back({{"class_id", o.class_id},
                      {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
    out[std::to_string(first_id + int(i))] = std::move(list);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("short write to " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

std::vector<std::vector<SceneObject>> parse_annotations(const fs::path& path,
                                                        int first_id,
                                                        int count) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw IoError("bad annotations file " + path.string() + ": " + e.what());
  }
  std::vector<std::vector<SceneObject>> out(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::string key = std::to_string(first_id + i);
    if (!j.contains(key))
      throw IoError("annotations missing image id " + key + " in " + path.string());
    for (const auto& e : j[key]) {
      SceneObject o;
      o.class_id = e.at("class_id").get<int>();
      const auto& b = e.at("box");
      o.box = {b.at(0).get<double>(), b.at(1).get<double>(),
               b.at(2).get<double>(), b.at(3).get<double>()};
      out[size_t(i)].push_back(o);
    }
  }
  return out;
}

}  // namespace

std::uint64_t manifest_hash(const DatasetConfig& cfg) {
  const std::string s = config_to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void generate_dataset(const DatasetConfig& cfg, const std::string& dir) {
  if (cfg.train_scenes < 1 || cfg.eval_scenes < 1)
    throw ConfigInvalid("generate_dataset: need at least one scene per split");

  std::error_code ec;
  for (const char* split : {"train", "eval"})
    for (const char* domain : {"source", "target"}) {
      fs::create_directories(fs::path(dir) / split / domain, ec);
      if (ec) throw IoError("cannot create dataset directories under " + dir);
    }

  auto emit_split = [&](const char* split, int first_id, int count) {
    std::vector<std::vector<SceneObject>> ann;
    ann.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
      Scene s = generate_scene(first_id + i, cfg.seed, cfg.gen);
      const std::string name = image_name(first_id + i);
      write_png((fs::path(dir) / split / "source" / name).string(),
                tensor_to_u8(s.image_source));
      write_png((fs::path(dir) / split / "target" / name).string(),
                tensor_to_u8(s.image_target));
      ann.push_back(std::move(s.objects));
    }
    write_text(fs::path(dir) / split / "annotations.json",
               annotations_to_json(ann, first_id).dump(2));
  };
  emit_split("train", 0, cfg.train_scenes);
  emit_split("eval", cfg.train_scenes, cfg.eval_scenes);

  json manifest = config_to_json(cfg);
  manifest["hash"] = manifest_hash(cfg);
  write_text(fs::path(dir) / "manifest.json", manifest.dump(2));
}

Dataset::Dataset(Dataset&& o) noexcept
    : train_source_(std::move(o.train_source_)),
      train_target_(std::move(o.train_target_)),
      eval_target_(std::move(o.eval_target_)),
      train_ann_(std::move(o.train_ann_)),
      eval_ann_(std::move(o.eval_ann_)),
      manifest_hash_(o.manifest_hash_),
      manifest_json_(std::move(o.manifest_json_)),
      eval_reads_(o.eval_reads_.load()) {}

Dataset& Dataset::operator=(Dataset&& o) noexcept {
  train_source_ = std::move(o.train_source_);
  train_target_ = std::move(o.train_target_);
  eval_target_ = std::move(o.eval_target_);
  train_ann_ = std::move(o.train_ann_);
  eval_ann_ = std::move(o.eval_ann_);
  manifest_hash_ = o.manifest_hash_;
  manifest_json_ = std::move(o.manifest_json_);
  eval_reads_ = o.eval_reads_.load();
  return *this;
}

Dataset Dataset::load(const std::string& dir) {
  Dataset d;
  d.manifest_json_ = read_text(fs::path(dir) / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(d.manifest_json_);
  } catch (const json::exception& e) {
    throw IoError(std::string("bad manifest: ") + e.what());
  }
  const int train_n = manifest.at("train_scenes").get<int>();
  const int eval_n = manifest.at("eval_scenes").get<int>();
  d.manifest_hash_ = manifest.at("hash").get<std::uint64_t>();

  for (int i = 0; i < train_n; ++i) {
    const std::string name = image_name(i);
    d.train_source_.push_back(
        read_png((fs::path(dir) / "train" / "source" / name).string()));
    d.train_target_.push_back(
        read_png((fs::path(dir) / "train" / "target" / name).string()));
  }
  d.train_ann_ =
      parse_annotations(fs::path(dir) / "train" / "annotations.json", 0, train_n);

  for (int i = 0; i < eval_n; ++i) {
    const std::string name = image_name(train_n + i);
    d.eval_target_.push_back(
        read_png((fs::path(dir) / "eval" / "target" / name).string()));
  }
  d.eval_ann_ = parse_annotations(fs::path(dir) / "eval" / "annotations.json",
                                  train_n, eval_n);
  return d;
}

}  // namespace dadet

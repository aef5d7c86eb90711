#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "dadet/png_io.hpp"
#include "dadet/synth.hpp"

namespace dadet {

struct DatasetConfig {
  GenConfig gen;
  int train_scenes = 500;
  int eval_scenes = 100;
  std::uint64_t seed = 0;
};

// Capability token for the quarantined eval-split ground truth. Only the
// evaluation entry point can mint one; training code cannot name a
// constructor, so the compiler enforces the quarantine.
class Evaluator;
class EvalAccess {
  EvalAccess() = default;
  friend class Evaluator;
};

// Renders every scene and writes the on-disk layout:
//   dir/manifest.json
//   dir/{train,eval}/{source,target}/NNNN.png
//   dir/{train,eval}/annotations.json
// Eval scene ids continue after the train range so the splits never share an
// RNG stream. IoError on filesystem problems.
void generate_dataset(const DatasetConfig& cfg, const std::string& dir);

// FNV-1a 64 over the canonical JSON serialization of cfg.
std::uint64_t manifest_hash(const DatasetConfig& cfg);

// In-memory dataset view. Images stay 8-bit (as stored) and are converted to
// float tensors on demand; training therefore sees exactly what is on disk.
class Dataset {
 public:
  static Dataset load(const std::string& dir);

  // The atomic read counter suppresses the implicit moves load() relies on.
  Dataset() = default;
  Dataset(Dataset&& o) noexcept;
  Dataset& operator=(Dataset&& o) noexcept;

  int train_size() const { return int(train_source_.size()); }
  int eval_size() const { return int(eval_target_.size()); }

  Tensor train_source(int i) const { return u8_to_tensor(train_source_.at(size_t(i))); }
  Tensor train_target(int i) const { return u8_to_tensor(train_target_.at(size_t(i))); }
  const std::vector<SceneObject>& train_annotations(int i) const {
    return train_ann_.at(size_t(i));
  }

  Tensor eval_target(int i) const { return u8_to_tensor(eval_target_.at(size_t(i))); }
  const std::vector<SceneObject>& eval_annotations(int i, EvalAccess) const {
    ++eval_reads_;
    return eval_ann_.at(size_t(i));
  }
  // Read counter lets the trainer assert that a train step never touched the
  // quarantined annotations. Atomic so parallel sweep runs can share one
  // dataset.
  long eval_annotation_reads() const { return eval_reads_.load(); }

  std::uint64_t manifest_hash_value() const { return manifest_hash_; }
  const std::string& manifest_json() const { return manifest_json_; }

 private:
  std::vector<ImageU8> train_source_, train_target_, eval_target_;
  std::vector<std::vector<SceneObject>> train_ann_, eval_ann_;
  std::uint64_t manifest_hash_ = 0;
  std::string manifest_json_;
  mutable std::atomic<long> eval_reads_{0};
};

}  // namespace dadet

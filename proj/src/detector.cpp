#include "dadet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

#include "dadet/rng.hpp"

namespace dadet {

Tensor& DetectorParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw ShapeMismatch("DetectorParams: no tensor named " + name);
  return it->second;
}

const Tensor& DetectorParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw ShapeMismatch("DetectorParams: no tensor named " + name);
  return it->second;
}

DetectorParams init_detector(const DetectorConfig& cfg, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x64657470ULL));
  DetectorParams p;
  // fan_in counts input channels; with uniform [-s,s] this keeps activation
  // variance roughly level through relu conv stacks (no normalization layers).
  auto conv = [&](const std::string& name, int co, int ci, int k) {
    const double s = std::sqrt(1.0 / ci);
    Tensor w = Tensor::zeros({co, ci, k, k});
    for (auto& v : w.data) v = rng.uniform(-s, s);
    p.tensors.emplace(name + "_w", std::move(w));
    p.tensors.emplace(name + "_b", Tensor::zeros({co}));
  };

  int prev = 3;
  for (size_t s = 0; s < cfg.channels.size(); ++s) {
    const int ch = cfg.channels[s];
    const std::string stage = "stage" + std::to_string(s);
    conv(stage + "_conv1", ch, prev, 3);
    conv(stage + "_conv2", ch, ch, 3);
    prev = ch;
  }
  const int fc = cfg.channels.at(size_t(cfg.head_stage));
  conv("head_conv1", cfg.head_channels, fc, 3);
  conv("head_conv2", cfg.head_channels, cfg.head_channels, 3);
  conv("head_cls", cfg.num_classes + 1, cfg.head_channels, 1);
  conv("head_reg", 4, cfg.head_channels, 1);
  // Offsets decode through exp; ln(8) starts them near a typical object
  // half-extent instead of exp(0)=1 px, where the exp gradient vanishes.
  for (auto& v : p.at("head_reg_b").data) v = std::log(8.0);
  return p;
}

BackboneFeatures forward_backbone(GradTape* tape, const Tensor& img,
                                  const DetectorParams& p,
                                  const DetectorConfig& cfg) {
  const int k = int(cfg.channels.size());
  if (img.shape.size() != 3 || img.shape[0] != 3)
    throw ShapeMismatch("forward_backbone: expected [3,H,W] image");
  const int div = 1 << k;
  if (img.shape[1] % div != 0 || img.shape[2] % div != 0)
    throw ShapeMismatch("forward_backbone: extents must divide by 2^stages");

  BackboneFeatures out;
  Tensor x = img;
  int stride = 1;
  for (int s = 0; s < k; ++s) {
    const std::string stage = "stage" + std::to_string(s);
    x = relu(tape, conv2d(tape, x, p.at(stage + "_conv1_w"),
                          p.at(stage + "_conv1_b"), 1, 1));
    x = relu(tape, conv2d(tape, x, p.at(stage + "_conv2_w"),
                          p.at(stage + "_conv2_b"), 1, 1));
    x = max_pool2d(tape, x, 2, 2);
    stride *= 2;
    out.maps.push_back(x);
    out.strides.push_back(stride);
  }
  return out;
}

DensePrediction forward_head(GradTape* tape, const BackboneFeatures& feats,
                             const DetectorParams& p, const DetectorConfig& cfg) {
  const Tensor& f = feats.maps.at(size_t(cfg.head_stage));
  Tensor h = relu(tape, conv2d(tape, f, p.at("head_conv1_w"),
                               p.at("head_conv1_b"), 1, 1));
  h = relu(tape, conv2d(tape, h, p.at("head_conv2_w"), p.at("head_conv2_b"), 1, 1));
  DensePrediction pred;
  pred.logits = conv2d(tape, h, p.at("head_cls_w"), p.at("head_cls_b"), 1, 0);
  pred.offsets =
      exp(tape, conv2d(tape, h, p.at("head_reg_w"), p.at("head_reg_b"), 1, 0));
  pred.stride = feats.strides.at(size_t(cfg.head_stage));
  return pred;
}

namespace {

// Softmax probabilities for one cell, plain arithmetic (decode and pseudo-
// labeling are post-processing; no tape involved).
void cell_softmax(const Tensor& logits, int y, int x, std::vector<double>& probs) {
  const int nc = logits.shape[0];
  probs.resize(size_t(nc));
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < nc; ++c) mx = std::max(mx, logits.at3(c, y, x));
  double z = 0.0;
  for (int c = 0; c < nc; ++c) {
    probs[size_t(c)] = std::exp(logits.at3(c, y, x) - mx);
    z += probs[size_t(c)];
  }
  for (double& v : probs) v /= z;
}

struct Candidate {
  Detection det;
  int cell = 0;  // row-major index, deterministic tie-break
};

}  // namespace

std::vector<Detection> decode(const DensePrediction& pred, double score_thresh,
                              double nms_iou, int max_dets) {
  const int nc = pred.logits.shape[0];
  const int hp = pred.logits.shape[1], wp = pred.logits.shape[2];
  const int background = nc - 1;

  std::vector<Candidate> cands;
  std::vector<double> probs;
  for (int y = 0; y < hp; ++y) {
    for (int x = 0; x < wp; ++x) {
      cell_softmax(pred.logits, y, x, probs);
      int best = 0;
      for (int c = 1; c < nc; ++c)
        if (probs[size_t(c)] > probs[size_t(best)]) best = c;
      if (best == background) continue;
      const double score = probs[size_t(best)];
      if (score < score_thresh) continue;
      const double cx = (x + 0.5) * pred.stride;
      const double cy = (y + 0.5) * pred.stride;
      Candidate c;
      c.det.box = {cx - pred.offsets.at3(0, y, x), cy - pred.offsets.at3(1, y, x),
                   cx + pred.offsets.at3(2, y, x), cy + pred.offsets.at3(3, y, x)};
      c.det.class_id = best;
      c.det.score = score;
      c.cell = y * wp + x;
      cands.push_back(c);
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.det.score != b.det.score) return a.det.score > b.det.score;
    return a.cell < b.cell;
  });

  std::vector<Candidate> kept;
  for (const auto& c : cands) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.det.class_id == c.det.class_id &&
          box_iou(k.det.box, c.det.box) >= nms_iou) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(c);
    if (int(kept.size()) >= max_dets) break;
  }
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (const auto& k : kept) out.push_back(k.det);
  return out;
}

Tensor detection_loss(GradTape* tape, const DensePrediction& pred,
                      const std::vector<SceneObject>& labels) {
  const int nc = pred.logits.shape[0];
  const int hp = pred.logits.shape[1], wp = pred.logits.shape[2];
  const int cells = hp * wp;
  const int background = nc - 1;

  // Cell assignment and regression targets.
  std::vector<int> target_class(size_t(cells), background);
  std::vector<double> target_offsets(size_t(cells) * 4, 0.0);
  int npos = 0;
  for (int y = 0; y < hp; ++y) {
    for (int x = 0; x < wp; ++x) {
      const double cx = (x + 0.5) * pred.stride;
      const double cy = (y + 0.5) * pred.stride;
      double best_area = std::numeric_limits<double>::infinity();
      const SceneObject* best = nullptr;
      for (const auto& o : labels) {
        if (cx < o.box.x1 || cx > o.box.x2 || cy < o.box.y1 || cy > o.box.y2)
          continue;
        if (o.box.area() < best_area) {
          best_area = o.box.area();
          best = &o;
        }
      }
      if (!best) continue;
      const int cell = y * wp + x;
      target_class[size_t(cell)] = best->class_id;
      target_offsets[size_t(cell) * 4 + 0] = cx - best->box.x1;
      target_offsets[size_t(cell) * 4 + 1] = cy - best->box.y1;
      target_offsets[size_t(cell) * 4 + 2] = best->box.x2 - cx;
      target_offsets[size_t(cell) * 4 + 3] = best->box.y2 - cy;
      ++npos;
    }
  }

  // Mean cross-entropy over all cells via row log-softmax. The row max is a
  // constant shift, which leaves both value and gradient exact.
  Tensor rows = transpose2d(tape, reshape(pred.logits, {nc, cells}));  // [cells,nc]
  Tensor row_max = Tensor::zeros({cells});
  for (int i = 0; i < cells; ++i) {
    double m = rows.at2(i, 0);
    for (int c = 1; c < nc; ++c) m = std::max(m, rows.at2(i, c));
    row_max.data[size_t(i)] = m;
  }
  Tensor shifted = sub(tape, rows, expand_rows(tape, row_max, nc));
  Tensor log_z = log(tape, sum_rows(tape, exp(tape, shifted)));  // [cells]
  Tensor log_softmax = sub(tape, shifted, expand_rows(tape, log_z, nc));

  Tensor pick = Tensor::zeros({cells, nc});
  for (int i = 0; i < cells; ++i)
    pick.at2(i, target_class[size_t(i)]) = -1.0 / cells;
  Tensor ce = sum(tape, mul(tape, log_softmax, pick));

  if (npos == 0) return ce;

  Tensor pred_off = transpose2d(tape, reshape(pred.offsets, {4, cells}));
  Tensor target_off({cells, 4}, std::move(target_offsets));
  Tensor elementwise = smooth_l1(tape, pred_off, target_off);
  Tensor mask = Tensor::zeros({cells, 4});
  const double wgt = 1.0 / (4.0 * npos);
  for (int i = 0; i < cells; ++i)
    if (target_class[size_t(i)] != background)
      for (int c = 0; c < 4; ++c) mask.at2(i, c) = wgt;
  Tensor reg = sum(tape, mul(tape, elementwise, mask));
  return add(tape, ce, reg);
}

// ---- checkpoints -------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'A', 'D', 'E', 'T', 'C', 'K', '1'};

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint32_t read_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_params(std::ofstream& f, const DetectorParams& p) {
  write_u32(f, std::uint32_t(p.tensors.size()));
  for (const auto& [name, t] : p.tensors) {
    write_u32(f, std::uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    write_u32(f, std::uint32_t(t.shape.size()));
    for (int d : t.shape) write_u32(f, std::uint32_t(d));
    f.write(reinterpret_cast<const char*>(t.data.data()),
            std::streamsize(t.data.size() * sizeof(double)));
  }
}

DetectorParams read_params(std::ifstream& f) {
  DetectorParams p;
  const std::uint32_t count = read_u32(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(read_u32(f), '\0');
    f.read(name.data(), std::streamsize(name.size()));
    std::vector<int> shape(read_u32(f));
    for (int& d : shape) d = int(read_u32(f));
    Tensor t = Tensor::zeros(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           std::streamsize(t.data.size() * sizeof(double)));
    p.tensors.emplace(std::move(name), std::move(t));
  }
  if (!f) throw IoError("checkpoint truncated");
  return p;
}

}  // namespace

void watch_all(DetectorParams& params, GradTape& tape) {
  for (auto& [name, t] : params.tensors) {
    t.node = -1;
    tape.watch(t);
  }
}

void sgd_step(DetectorParams& params, GradTape& tape, double lr,
              double clip_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params.tensors)
    for (double g : tape.grad(t)) sq += g * g;
  if (!std::isfinite(sq)) throw TrainingDiverged("sgd_step: non-finite gradient");
  const double scale =
      sq > clip_norm * clip_norm ? clip_norm / std::sqrt(sq) : 1.0;
  for (auto& [name, t] : params.tensors) {
    const auto& g = tape.grad(t);
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] -= lr * scale * g[i];
    t.node = -1;
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(kMagic, sizeof kMagic);
  write_u32(f, std::uint32_t(ckpt.config_json.size()));
  f.write(ckpt.config_json.data(), std::streamsize(ckpt.config_json.size()));
  write_params(f, ckpt.student);
  write_params(f, ckpt.teacher);
  if (!f) throw IoError("short write to checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError("not a checkpoint file: " + path);
  Checkpoint ckpt;
  ckpt.config_json.resize(read_u32(f));
  f.read(ckpt.config_json.data(), std::streamsize(ckpt.config_json.size()));
  ckpt.student = read_params(f);
  ckpt.teacher = read_params(f);
  return ckpt;
}

}  // namespace dadet

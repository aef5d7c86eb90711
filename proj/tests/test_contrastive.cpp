#include <doctest.h>

#include <cmath>
#include <vector>

#include "dadet/checks.hpp"
#include "dadet/contrastive.hpp"
#include "dadet/detector.hpp"
#include "dadet/errors.hpp"
#include "dadet/rng.hpp"

using namespace dadet;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

std::vector<Tensor> random_rows(Rng& rng, int n, int d, bool unit) {
  std::vector<Tensor> rows;
  for (int i = 0; i < n; ++i) {
    Tensor raw = random_tensor(rng, {d});
    rows.push_back(unit ? l2_normalize(nullptr, raw) : raw);
  }
  return rows;
}

std::vector<std::vector<double>> to_ref_rows(const std::vector<Tensor>& rows) {
  std::vector<std::vector<double>> out;
  for (const auto& r : rows) out.push_back(r.data);
  return out;
}

Tensor rows_to_matrix(const std::vector<Tensor>& rows) {
  const int n = int(rows.size());
  const int d = rows[0].size();
  Tensor m = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) m.at2(i, k) = rows[size_t(i)].data[size_t(k)];
  return m;
}

Tensor basis_row(int d, int i) {
  Tensor e = Tensor::zeros({d});
  e.data[size_t(i)] = 1.0;
  return e;
}

double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::abs(b));
}

// Synthetic single-level pyramid: one random map at the given stride.
BackboneFeatures one_level_feats(Rng& rng, int c, int h, int w, int stride) {
  BackboneFeatures f;
  f.maps.push_back(random_tensor(rng, {c, h, w}, 0.1, 1.0));
  f.strides.push_back(stride);
  return f;
}

PseudoLabelSet make_labels(std::vector<Box> boxes, std::vector<int> classes,
                           int img_w, int img_h) {
  PseudoLabelSet p;
  p.boxes = std::move(boxes);
  p.classes = std::move(classes);
  p.scores.assign(p.boxes.size(), 0.9);
  p.view = AugRecord::identity(img_w, img_h);
  return p;
}

}  // namespace

TEST_CASE("positive sets group indices by class") {
  PositiveSets ps = positive_sets({0, 1, 0});
  REQUIRE(ps.sets.size() == 3);
  CHECK(ps.sets[0] == std::vector<int>{0, 2});
  CHECK(ps.sets[1] == std::vector<int>{1});
  CHECK(ps.sets[2] == std::vector<int>{0, 2});

  PositiveSets same = positive_sets({2, 2, 2});
  for (const auto& s : same.sets) CHECK(s == std::vector<int>{0, 1, 2});

  PositiveSets distinct = positive_sets({3, 1, 0, 2});
  for (size_t i = 0; i < distinct.sets.size(); ++i)
    CHECK(distinct.sets[i] == std::vector<int>{int(i)});

  // Membership is reflexive and symmetric.
  Rng rng(5);
  std::vector<int> classes;
  for (int i = 0; i < 12; ++i) classes.push_back(rng.uniform_int(3));
  PositiveSets rnd = positive_sets(classes);
  for (int i = 0; i < 12; ++i) {
    const auto& si = rnd.sets[size_t(i)];
    CHECK(std::count(si.begin(), si.end(), i) == 1);
    for (int p : si) {
      const auto& sp = rnd.sets[size_t(p)];
      CHECK(std::count(sp.begin(), sp.end(), i) == 1);
    }
  }
}

TEST_CASE("single-object contrastive loss is exactly zero") {
  // With one object the only key is its own positive: log(e^r / e^r) = 0.
  Rng rng(7);
  std::vector<Tensor> z = random_rows(rng, 1, 5, true);
  Tensor loss = contrastive_loss(nullptr, z, z, {2}, kTau, kLambdaContrast);
  CHECK(loss.data[0] == 0.0);

  Tensor m = rows_to_matrix(z);
  Tensor loss2 = contrastive_loss(nullptr, m, m, {2}, kTau, kLambdaContrast);
  CHECK(loss2.data[0] == 0.0);
}

TEST_CASE("two orthonormal distinct-class objects match the closed form") {
  // zS = zT = {e1, e2}: each row has its positive at similarity 1 and one
  // negative at 0, so L = lambda * log(1 + exp(-1/tau)).
  std::vector<Tensor> z = {basis_row(4, 0), basis_row(4, 1)};
  for (double tau : {0.07, 0.5}) {
    for (double lambda : {1.0, 0.05}) {
      const double expected = lambda * std::log1p(std::exp(-1.0 / tau));
      Tensor loss = contrastive_loss(nullptr, z, z, {0, 1}, tau, lambda);
      CHECK(loss.data[0] == doctest::Approx(expected).epsilon(1e-12));

      Tensor lm = contrastive_loss(nullptr, rows_to_matrix(z),
                                   rows_to_matrix(z), {0, 1}, tau, lambda);
      CHECK(lm.data[0] == loss.data[0]);
    }
  }
}

TEST_CASE("contrastive loss matches the double-loop reference") {
  Rng rng(31);
  const double taus[] = {0.07, 0.2, 1.0};
  const double lambdas[] = {0.05, 1.0, 2.5};
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + rng.uniform_int(8);
    const int d = 2 + rng.uniform_int(5);
    const bool unit = trial % 2 == 0;
    std::vector<Tensor> zS = random_rows(rng, n, d, unit);
    std::vector<Tensor> zT = random_rows(rng, n, d, unit);
    std::vector<int> classes;
    for (int i = 0; i < n; ++i) classes.push_back(rng.uniform_int(3));
    const double tau = taus[trial % 3];
    const double lambda = lambdas[(trial / 3) % 3];

    Tensor loss = contrastive_loss(nullptr, zS, zT, classes, tau, lambda);
    const double ref = checks::contrastive_loss_reference(
        to_ref_rows(zS), to_ref_rows(zT), classes, tau, lambda);
    CHECK(rel_diff(loss.data[0], ref) <= 1e-10);
  }
}

TEST_CASE("contrastive loss gradient matches finite differences") {
  Rng rng(13);
  const int n = 5, d = 4;
  Tensor zT = rows_to_matrix(random_rows(rng, n, d, true));
  const std::vector<int> classes = {0, 1, 0, 2, 1};
  auto f = [&](GradTape* t, const Tensor& x) {
    return contrastive_loss(t, reshape(x, {n, d}), zT, classes, 0.2, 0.7);
  };
  Tensor x0 = random_tensor(rng, {n * d});
  CHECK(grad_check(f, x0, 1e-5) < 1e-4);

  // Sharper temperature, same-class pairs present.
  const std::vector<int> classes2 = {1, 1, 1, 0, 0};
  auto f2 = [&](GradTape* t, const Tensor& x) {
    return contrastive_loss(t, reshape(x, {n, d}), zT, classes2, kTau, 1.0);
  };
  CHECK(grad_check(f2, x0, 1e-5) < 1e-4);
}

TEST_CASE("gradient pulls student features toward their positive keys") {
  // Two distinct-class objects at tau = 0.5: d loss / d zS_0 has a negative
  // component along its own key and a positive one along the negative key.
  GradTape tape;
  Tensor zS = rows_to_matrix({basis_row(3, 0), basis_row(3, 1)});
  Tensor zT = zS;
  tape.watch(zS);
  Tensor loss = contrastive_loss(&tape, zS, zT, {0, 1}, 0.5, 1.0);
  tape.backward(loss);
  const auto& g = tape.grad(zS);
  CHECK(g[0] < 0.0);  // row 0 along zT_0
  CHECK(g[1] > 0.0);  // row 0 along zT_1
  CHECK(g[3] > 0.0);  // row 1 along zT_0
  CHECK(g[4] < 0.0);  // row 1 along zT_1
}

TEST_CASE("loss falls as student features align with their positives") {
  // zT is an orthonormal basis; zS_i blends in its same-class partner with
  // weight t. Larger t raises positive similarity, so the loss must drop.
  const int n = 4, d = 6;
  const std::vector<int> classes = {0, 0, 1, 1};
  const int partner[] = {1, 0, 3, 2};
  std::vector<Tensor> zT;
  for (int i = 0; i < n; ++i) zT.push_back(basis_row(d, i));

  double prev = 1e300;
  for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    std::vector<Tensor> zS;
    for (int i = 0; i < n; ++i) {
      Tensor raw = basis_row(d, i);
      raw.data[size_t(partner[i])] = t;
      zS.push_back(l2_normalize(nullptr, raw));
    }
    Tensor loss = contrastive_loss(nullptr, zS, zT, classes, kTau, 1.0);
    CHECK(loss.data[0] < prev);
    prev = loss.data[0];
  }
}

TEST_CASE("loss scales linearly in lambda") {
  Rng rng(17);
  std::vector<Tensor> zS = random_rows(rng, 6, 4, true);
  std::vector<Tensor> zT = random_rows(rng, 6, 4, true);
  const std::vector<int> classes = {0, 1, 2, 0, 1, 2};
  Tensor unit = contrastive_loss(nullptr, zS, zT, classes, kTau, 1.0);
  Tensor scaled = contrastive_loss(nullptr, zS, zT, classes, kTau, 0.05);
  CHECK(scaled.data[0] ==
        doctest::Approx(0.05 * unit.data[0]).epsilon(1e-12));
}

TEST_CASE("loss is invariant to object permutation") {
  Rng rng(19);
  const int n = 7, d = 5;
  std::vector<Tensor> zS = random_rows(rng, n, d, true);
  std::vector<Tensor> zT = random_rows(rng, n, d, true);
  std::vector<int> classes = {0, 1, 1, 2, 0, 2, 1};
  Tensor base = contrastive_loss(nullptr, zS, zT, classes, kTau, 1.0);

  const int perm[] = {3, 0, 6, 1, 5, 2, 4};
  std::vector<Tensor> pS, pT;
  std::vector<int> pc;
  for (int i : perm) {
    pS.push_back(zS[size_t(i)]);
    pT.push_back(zT[size_t(i)]);
    pc.push_back(classes[size_t(i)]);
  }
  Tensor permuted = contrastive_loss(nullptr, pS, pT, pc, kTau, 1.0);
  CHECK(permuted.data[0] == doctest::Approx(base.data[0]).epsilon(1e-12));
}

TEST_CASE("all-distinct classes reduce to the instance-discrimination loss") {
  Rng rng(23);
  std::vector<Tensor> zQ = random_rows(rng, 5, 6, true);
  std::vector<Tensor> zK = random_rows(rng, 5, 6, true);
  const std::vector<int> classes = {4, 2, 0, 1, 3};
  Tensor cl = contrastive_loss(nullptr, zQ, zK, classes, kTau, 1.0);
  Tensor mc = moco_loss(nullptr, zQ, zK, kTau);
  CHECK(cl.data[0] == mc.data[0]);
}

TEST_CASE("teacher keys receive no gradient") {
  Rng rng(29);
  GradTape tape;
  Tensor zS = rows_to_matrix(random_rows(rng, 4, 3, true));
  Tensor zT = rows_to_matrix(random_rows(rng, 4, 3, true));
  tape.watch(zS);
  tape.watch(zT);
  Tensor loss = contrastive_loss(&tape, zS, zT, {0, 0, 1, 1}, kTau, 1.0);
  tape.backward(loss);
  for (double g : tape.grad(zT)) CHECK(g == 0.0);
  double mag = 0.0;
  for (double g : tape.grad(zS)) mag += std::abs(g);
  CHECK(mag > 0.0);

  // List overload: teacher rows pass through value-only, even when their
  // construction was recorded on the tape.
  GradTape tape2;
  Tensor rawS = random_tensor(rng, {3});
  Tensor rawT = random_tensor(rng, {3});
  Tensor rawT2 = random_tensor(rng, {3});
  tape2.watch(rawS);
  tape2.watch(rawT);
  tape2.watch(rawT2);
  std::vector<Tensor> qs = {l2_normalize(&tape2, rawS),
                            l2_normalize(&tape2, rawT2)};
  std::vector<Tensor> ks = {l2_normalize(&tape2, rawT),
                            l2_normalize(&tape2, rawT)};
  Tensor loss2 = contrastive_loss(&tape2, qs, ks, {0, 1}, kTau, 1.0);
  tape2.backward(loss2);
  for (double g : tape2.grad(rawT)) CHECK(g == 0.0);
  double smag = 0.0;
  for (double g : tape2.grad(rawS)) smag += std::abs(g);
  CHECK(smag > 0.0);
}

TEST_CASE("extreme temperature stays finite and accurate") {
  // Unshifted exponentials at tau = 0.01 would overflow (similarity 3 gives
  // exp(300)); the row-max shift keeps everything representable.
  Rng rng(41);
  std::vector<Tensor> zS = random_rows(rng, 5, 4, false);
  std::vector<Tensor> zT = random_rows(rng, 5, 4, false);
  for (auto& t : zS)
    for (auto& v : t.data) v *= 3.0;
  const std::vector<int> classes = {0, 1, 0, 1, 0};
  Tensor loss = contrastive_loss(nullptr, zS, zT, classes, 0.01, 1.0);
  CHECK(std::isfinite(loss.data[0]));
  const double ref = checks::contrastive_loss_reference(
      to_ref_rows(zS), to_ref_rows(zT), classes, 0.01, 1.0);
  CHECK(rel_diff(loss.data[0], ref) <= 1e-10);
}

TEST_CASE("instance-discrimination loss matches its cross-entropy reference") {
  Rng rng(43);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + rng.uniform_int(7);
    const int d = 2 + rng.uniform_int(5);
    std::vector<Tensor> zQ = random_rows(rng, n, d, trial % 2 == 0);
    std::vector<Tensor> zK = random_rows(rng, n, d, trial % 2 == 0);
    Tensor loss = moco_loss(nullptr, zQ, zK, trial % 2 == 0 ? kTau : 0.3);
    const double ref = checks::moco_ce_reference(
        to_ref_rows(zQ), to_ref_rows(zK), trial % 2 == 0 ? kTau : 0.3);
    CHECK(rel_diff(loss.data[0], ref) <= 1e-10);
  }

  // Orthonormal queries equal to keys at tau = 1: every row is
  // log(e + (n-1)) - 1.
  const int n = 4;
  std::vector<Tensor> basis;
  for (int i = 0; i < n; ++i) basis.push_back(basis_row(n, i));
  Tensor loss = moco_loss(nullptr, basis, basis, 1.0);
  CHECK(loss.data[0] ==
        doctest::Approx(std::log(std::exp(1.0) + n - 1) - 1.0).epsilon(1e-12));
}

TEST_CASE("degenerate batches are rejected") {
  Rng rng(47);
  std::vector<Tensor> one = random_rows(rng, 1, 3, true);
  CHECK_THROWS_AS(moco_loss(nullptr, one, one, kTau), EmptyBatch);
  CHECK_THROWS_AS(moco_loss(nullptr, {}, {}, kTau), EmptyBatch);
  CHECK_THROWS_AS(contrastive_loss(nullptr, std::vector<Tensor>{},
                                   std::vector<Tensor>{}, {}, kTau, 1.0),
                  EmptyBatch);
  CHECK_THROWS_AS(contrastive_loss(nullptr, Tensor::zeros({0, 3}),
                                   Tensor::zeros({0, 3}), {}, kTau, 1.0),
                  EmptyBatch);

  Tensor flat = Tensor::zeros({3});
  CHECK_THROWS_AS(contrastive_loss(nullptr, flat, flat, {0}, kTau, 1.0),
                  ShapeMismatch);
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(contrastive_loss(nullptr, a, b, {0, 1}, kTau, 1.0),
                  ShapeMismatch);
  CHECK_THROWS_AS(contrastive_loss(nullptr, a, a, {0}, kTau, 1.0),
                  ShapeMismatch);
  std::vector<Tensor> two = random_rows(rng, 2, 3, true);
  CHECK_THROWS_AS(moco_loss(nullptr, two, one, kTau), ShapeMismatch);
}

TEST_CASE("constant feature maps pool to identical unit descriptors") {
  BackboneFeatures feats;
  feats.maps.push_back(Tensor::full({4, 8, 8}, 0.7));
  feats.strides.push_back(8);
  const AugRecord id = AugRecord::identity(64, 64);
  const std::vector<Box> boxes = {Box{2, 2, 30, 30}, Box{20, 10, 60, 50},
                                  Box{0, 32, 28, 62}};
  auto fs = extract_object_features(nullptr, feats, 0, boxes, id, id,
                                    kRoiOutSize, kRoiSamples, false);
  REQUIRE(fs.size() == 3);
  const double expected = 1.0 / 6.0;  // 36 equal entries, unit norm
  for (const auto& f : fs) {
    REQUIRE(f.vec.size() == 36);
    for (double v : f.vec.data)
      CHECK(v == doctest::Approx(expected).epsilon(1e-12));
  }
  for (size_t i = 0; i < fs.size(); ++i)
    for (size_t j = i + 1; j < fs.size(); ++j) {
      double dot = 0.0;
      for (int k = 0; k < 36; ++k)
        dot += fs[i].vec.data[size_t(k)] * fs[j].vec.data[size_t(k)];
      CHECK(dot == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("extraction at stride one equals roi-align plus normalization") {
  Rng rng(53);
  BackboneFeatures feats = one_level_feats(rng, 3, 10, 10, 1);
  const AugRecord id = AugRecord::identity(10, 10);
  const Box box{2.5, 1.5, 7.5, 6.5};
  auto fs = extract_object_features(nullptr, feats, 0, {box}, id, id, 3, 2,
                                    true);
  REQUIRE(fs.size() == 1);
  CHECK(fs[0].object_index == 0);
  CHECK(fs[0].level == 0);
  CHECK(fs[0].teacher);

  Tensor pooled = roi_align(nullptr, feats.maps[0], box, 3, 3, 2);
  Tensor expected = l2_normalize(nullptr, reshape(pooled, {pooled.size()}));
  REQUIRE(fs[0].vec.size() == expected.size());
  for (int k = 0; k < expected.size(); ++k)
    CHECK(fs[0].vec.data[size_t(k)] ==
          doctest::Approx(expected.data[size_t(k)]).epsilon(1e-12));
}

TEST_CASE("extraction divides box coordinates by the level stride") {
  Rng rng(59);
  BackboneFeatures feats = one_level_feats(rng, 5, 16, 16, 4);
  const AugRecord id = AugRecord::identity(64, 64);
  auto fs = extract_object_features(nullptr, feats, 0, {Box{8, 8, 24, 24}},
                                    id, id, 3, 2, false);
  REQUIRE(fs.size() == 1);

  // Independent dense pooling of the same window in feature cells.
  Tensor dense =
      checks::dense_roi_align(feats.maps[0], Box{2, 2, 6, 6}, 3, 3, 2);
  Tensor expected = l2_normalize(nullptr, reshape(dense, {dense.size()}));
  for (int k = 0; k < expected.size(); ++k)
    CHECK(fs[0].vec.data[size_t(k)] ==
          doctest::Approx(expected.data[size_t(k)]).epsilon(1e-10));
}

TEST_CASE("extraction skips sub-cell and out-of-view boxes") {
  Rng rng(61);
  BackboneFeatures feats = one_level_feats(rng, 3, 8, 8, 8);
  const AugRecord id = AugRecord::identity(64, 64);

  // Boxes 1 and 3 cover less than one stride-8 cell in some direction.
  std::vector<Box> boxes = {Box{0, 0, 32, 32}, Box{0, 0, 6, 20},
                            Box{16, 16, 48, 48}, Box{8, 40, 28, 46}};
  auto fs = extract_object_features(nullptr, feats, 0, boxes, id, id, 3, 2,
                                    false);
  REQUIRE(fs.size() == 2);
  CHECK(fs[0].object_index == 0);
  CHECK(fs[1].object_index == 2);

  // A half-scale crop view pushes the second box outside entirely.
  AugRecord crop = AugRecord::identity(64, 64);
  crop.crop_scale = 0.5;
  std::vector<Box> boxes2 = {Box{4, 4, 20, 20}, Box{40, 40, 56, 56}};
  auto fs2 = extract_object_features(nullptr, feats, 0, boxes2, id, crop, 3,
                                     2, false);
  REQUIRE(fs2.size() == 1);
  CHECK(fs2[0].object_index == 0);
}

TEST_CASE("extraction skips objects pooled from dead feature regions") {
  // The map is zero everywhere except the top-left quadrant, as after a relu
  // that silenced the rest. The second box pools pure zeros: no direction to
  // normalize, so it must drop out instead of raising NearZeroNorm.
  BackboneFeatures feats;
  Tensor fmap = Tensor::zeros({2, 8, 8});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) fmap.at3(c, y, x) = 1.0 + c + 0.1 * (y + x);
  feats.maps = {fmap};
  feats.strides = {8};
  const AugRecord id = AugRecord::identity(64, 64);

  std::vector<Box> boxes = {Box{0, 0, 20, 20}, Box{36, 36, 62, 62}};
  auto fs = extract_object_features(nullptr, feats, 0, boxes, id, id, 3, 2,
                                    false);
  REQUIRE(fs.size() == 1);
  CHECK(fs[0].object_index == 0);

  // With every box dead, the multi-scale loss reports an unusable batch.
  PseudoLabelSet labels;
  labels.boxes = {Box{36, 36, 62, 62}};
  labels.classes = {0};
  labels.view = id;
  CHECK_THROWS_AS(multi_scale_contrastive(nullptr, feats, feats, labels, id,
                                          id, ContrastiveConfig{{0}}),
                  EmptyBatch);
}

TEST_CASE("multi-scale loss on one level equals the flat loss") {
  Rng rng(67);
  BackboneFeatures featS = one_level_feats(rng, 4, 16, 16, 4);
  BackboneFeatures featT = one_level_feats(rng, 4, 16, 16, 4);
  const AugRecord id = AugRecord::identity(64, 64);
  PseudoLabelSet labels = make_labels(
      {Box{4, 4, 24, 24}, Box{30, 8, 58, 40}, Box{10, 34, 40, 60}},
      {0, 1, 0}, 64, 64);
  ContrastiveConfig cfg;
  cfg.levels = {0};

  Tensor ms = multi_scale_contrastive(nullptr, featS, featT, labels, id, id,
                                      cfg);

  auto fS = extract_object_features(nullptr, featS, 0, labels.boxes,
                                    labels.view, id, cfg.out_size,
                                    cfg.samples, false);
  auto fT = extract_object_features(nullptr, featT, 0, labels.boxes,
                                    labels.view, id, cfg.out_size,
                                    cfg.samples, true);
  REQUIRE(fS.size() == 3);
  REQUIRE(fT.size() == 3);
  std::vector<Tensor> zS, zT;
  for (size_t i = 0; i < 3; ++i) {
    zS.push_back(fS[i].vec);
    zT.push_back(fT[i].vec);
  }
  Tensor flat =
      contrastive_loss(nullptr, zS, zT, labels.classes, cfg.tau, 1.0);
  CHECK(ms.data[0] == flat.data[0]);
}

TEST_CASE("multi-scale loss sums the per-level losses") {
  Rng rng(71);
  BackboneFeatures featS, featT;
  featS.maps = {random_tensor(rng, {3, 32, 32}, 0.1, 1.0),
                random_tensor(rng, {5, 16, 16}, 0.1, 1.0)};
  featS.strides = {2, 4};
  featT.maps = {random_tensor(rng, {3, 32, 32}, 0.1, 1.0),
                random_tensor(rng, {5, 16, 16}, 0.1, 1.0)};
  featT.strides = {2, 4};
  const AugRecord id = AugRecord::identity(64, 64);
  PseudoLabelSet labels = make_labels(
      {Box{4, 4, 24, 24}, Box{30, 8, 58, 40}}, {0, 1}, 64, 64);

  ContrastiveConfig both;
  both.levels = {0, 1};
  Tensor ms = multi_scale_contrastive(nullptr, featS, featT, labels, id, id,
                                      both);

  double sum = 0.0;
  for (int level : {0, 1}) {
    ContrastiveConfig single;
    single.levels = {level};
    sum += multi_scale_contrastive(nullptr, featS, featT, labels, id, id,
                                   single)
               .data[0];
  }
  CHECK(ms.data[0] == doctest::Approx(sum).epsilon(1e-14));
}

TEST_CASE("multi-scale loss matches the reference on extracted descriptors") {
  Rng rng(73);
  BackboneFeatures featS, featT;
  featS.maps = {random_tensor(rng, {3, 32, 32}, 0.1, 1.0),
                random_tensor(rng, {4, 8, 8}, 0.1, 1.0)};
  featS.strides = {2, 8};
  featT.maps = {random_tensor(rng, {3, 32, 32}, 0.1, 1.0),
                random_tensor(rng, {4, 8, 8}, 0.1, 1.0)};
  featT.strides = {2, 8};
  const AugRecord id = AugRecord::identity(64, 64);
  PseudoLabelSet labels = make_labels(
      {Box{4, 4, 24, 24}, Box{30, 8, 58, 40}, Box{6, 36, 30, 58}},
      {1, 0, 1}, 64, 64);
  ContrastiveConfig cfg;
  cfg.levels = {0, 1};

  Tensor ms = multi_scale_contrastive(nullptr, featS, featT, labels, id, id,
                                      cfg);

  double ref = 0.0;
  for (int level : {0, 1}) {
    auto fS = extract_object_features(nullptr, featS, level, labels.boxes,
                                      labels.view, id, cfg.out_size,
                                      cfg.samples, false);
    auto fT = extract_object_features(nullptr, featT, level, labels.boxes,
                                      labels.view, id, cfg.out_size,
                                      cfg.samples, true);
    REQUIRE(fS.size() == fT.size());
    std::vector<Tensor> zS, zT;
    std::vector<int> classes;
    for (size_t i = 0; i < fS.size(); ++i) {
      zS.push_back(fS[i].vec);
      zT.push_back(fT[i].vec);
      classes.push_back(labels.classes[size_t(fS[i].object_index)]);
    }
    ref += checks::contrastive_loss_reference(to_ref_rows(zS),
                                              to_ref_rows(zT), classes,
                                              cfg.tau, 1.0);
  }
  CHECK(rel_diff(ms.data[0], ref) <= 1e-10);
}

TEST_CASE("objects lost to one view drop from both sides") {
  Rng rng(79);
  BackboneFeatures featS = one_level_feats(rng, 3, 32, 32, 2);
  BackboneFeatures featT = one_level_feats(rng, 3, 32, 32, 2);
  const AugRecord id = AugRecord::identity(64, 64);
  AugRecord crop = AugRecord::identity(64, 64);
  crop.crop_scale = 0.5;  // student view sees only the top-left quadrant

  // Box 1 lies outside the student crop; the teacher still sees it.
  PseudoLabelSet full = make_labels(
      {Box{4, 4, 20, 20}, Box{40, 40, 56, 56}, Box{8, 20, 24, 30}},
      {0, 1, 0}, 64, 64);
  PseudoLabelSet pruned = make_labels(
      {Box{4, 4, 20, 20}, Box{8, 20, 24, 30}}, {0, 0}, 64, 64);

  ContrastiveConfig cfg;
  cfg.levels = {0};
  Tensor with = multi_scale_contrastive(nullptr, featS, featT, full, crop,
                                        id, cfg);
  Tensor without = multi_scale_contrastive(nullptr, featS, featT, pruned,
                                           crop, id, cfg);
  CHECK(with.data[0] == without.data[0]);
}

TEST_CASE("multi-scale loss needs at least one usable object") {
  Rng rng(83);
  BackboneFeatures featS = one_level_feats(rng, 3, 4, 4, 16);
  BackboneFeatures featT = one_level_feats(rng, 3, 4, 4, 16);
  const AugRecord id = AugRecord::identity(64, 64);
  ContrastiveConfig cfg;
  cfg.levels = {0};

  PseudoLabelSet empty = make_labels({}, {}, 64, 64);
  CHECK_THROWS_AS(multi_scale_contrastive(nullptr, featS, featT, empty, id,
                                          id, cfg),
                  EmptyBatch);

  // Every box is smaller than the level stride.
  PseudoLabelSet tiny = make_labels(
      {Box{0, 0, 8, 8}, Box{20, 20, 30, 30}}, {0, 1}, 64, 64);
  CHECK_THROWS_AS(multi_scale_contrastive(nullptr, featS, featT, tiny, id,
                                          id, cfg),
                  EmptyBatch);

  ContrastiveConfig none;
  none.levels = {};
  PseudoLabelSet ok = make_labels({Box{0, 0, 32, 32}}, {0}, 64, 64);
  CHECK_THROWS_AS(multi_scale_contrastive(nullptr, featS, featT, ok, id, id,
                                          none),
                  EmptyBatch);
}

TEST_CASE("multi-scale gradient matches finite differences") {
  Rng rng(89);
  BackboneFeatures featT = one_level_feats(rng, 3, 8, 8, 4);
  const AugRecord id = AugRecord::identity(32, 32);
  PseudoLabelSet labels = make_labels(
      {Box{4, 4, 16, 16}, Box{12, 12, 28, 28}}, {0, 0}, 32, 32);
  ContrastiveConfig cfg;
  cfg.levels = {0};

  auto f = [&](GradTape* t, const Tensor& x) {
    BackboneFeatures featS;
    featS.maps = {reshape(x, {3, 8, 8})};
    featS.strides = {4};
    return multi_scale_contrastive(t, featS, featT, labels, id, id, cfg);
  };
  Tensor x0 = random_tensor(rng, {3 * 8 * 8}, 0.1, 1.0);
  CHECK(grad_check(f, x0, 1e-5) < 1e-4);
}

TEST_CASE("teacher maps receive no gradient through the multi-scale loss") {
  Rng rng(97);
  GradTape tape;
  Tensor mapS = random_tensor(rng, {3, 16, 16}, 0.1, 1.0);
  Tensor mapT = random_tensor(rng, {3, 16, 16}, 0.1, 1.0);
  tape.watch(mapS);
  tape.watch(mapT);
  BackboneFeatures featS{{mapS}, {4}};
  BackboneFeatures featT{{mapT}, {4}};
  const AugRecord id = AugRecord::identity(64, 64);
  PseudoLabelSet labels = make_labels(
      {Box{4, 4, 24, 24}, Box{30, 30, 60, 60}}, {0, 0}, 64, 64);
  ContrastiveConfig cfg;
  cfg.levels = {0};

  Tensor loss = multi_scale_contrastive(&tape, featS, featT, labels, id, id,
                                        cfg);
  tape.backward(loss);
  for (double g : tape.grad(mapT)) CHECK(g == 0.0);
  double mag = 0.0;
  for (double g : tape.grad(mapS)) mag += std::abs(g);
  CHECK(mag > 0.0);
}

TEST_CASE("backbone features drive a finite multi-scale loss") {
  DetectorConfig cfg;
  cfg.num_classes = 3;
  cfg.channels = {4, 6, 8, 8};
  cfg.head_channels = 8;
  DetectorParams student = init_detector(cfg, 101);
  DetectorParams teacher = init_detector(cfg, 202);

  Rng rng(103);
  Tensor img = random_tensor(rng, {3, 32, 32}, 0.0, 1.0);
  GradTape tape;
  watch_all(student, tape);
  BackboneFeatures featS = forward_backbone(&tape, img, student, cfg);
  BackboneFeatures featT = forward_backbone(nullptr, img, teacher, cfg);

  PseudoLabelSet labels = make_labels(
      {Box{2, 2, 20, 20}, Box{10, 8, 30, 28}}, {0, 1}, 32, 32);
  ContrastiveConfig ccfg;  // all four levels
  Tensor loss = multi_scale_contrastive(&tape, featS, featT, labels,
                                        AugRecord::identity(32, 32),
                                        AugRecord::identity(32, 32), ccfg);
  CHECK(std::isfinite(loss.data[0]));
  CHECK(loss.data[0] > 0.0);

  tape.backward(loss);
  double backbone_mag = 0.0;
  for (double g : tape.grad(student.at("stage0_conv1_w")))
    backbone_mag += std::abs(g);
  CHECK(backbone_mag > 0.0);
  // The loss reads pyramid features only; head weights stay untouched.
  for (double g : tape.grad(student.at("head_cls_w"))) CHECK(g == 0.0);
}

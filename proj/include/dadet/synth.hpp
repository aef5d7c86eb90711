#pragma once

#include <cstdint>
#include <vector>

#include "dadet/geometry.hpp"
#include "dadet/rng.hpp"
#include "dadet/tensor.hpp"

namespace dadet {

struct SceneObject {
  int class_id = 0;
  Box box;
};

// Paired renders of identical geometry: the clean source domain and the
// degraded target domain. Annotations apply to both.
struct Scene {
  int id = 0;
  std::vector<SceneObject> objects;
  Tensor image_source;  // [3,H,W] in [0,1]
  Tensor image_target;
};

struct DomainParams {
  double fog_density = 0.0;      // [0,1], blend toward fog gray
  double blur_sigma = 0.0;       // >= 0
  double brightness_shift = 0.0;
  double noise_std = 0.0;        // >= 0
};

struct GenConfig {
  int width = 64;
  int height = 64;
  int num_classes = 3;  // disc, square, triangle
  int min_objects = 1;
  int max_objects = 6;
  double min_size = 10.0;  // object bounding-box side, pixels
  double max_size = 28.0;
  double max_pairwise_iou = 0.5;  // exclusive upper bound
  int placement_attempts = 100;   // per object before ConfigInvalid
  DomainParams domain;
};

// Reversible record of the geometric + photometric transforms applied to one
// view of an image. Geometric order: flip first, then crop-resize. Enough to
// map any pixel or box between view and original coordinates.
struct AugRecord {
  int width = 0;   // original image extents
  int height = 0;
  bool flip = false;
  double crop_dx = 0.0;  // crop window origin in (flipped) original coords
  double crop_dy = 0.0;
  double crop_scale = 1.0;  // window is crop_scale * (W,H); view resized back
  double brightness = 1.0;
  double contrast = 1.0;
  double blur_sigma = 0.0;
  std::vector<Box> cutout_rects;       // in view coordinates
  std::vector<int> dropped_boxes;      // input indices removed by the crop

  bool identity_geometry() const {
    return !flip && crop_dx == 0.0 && crop_dy == 0.0 && crop_scale == 1.0;
  }
  static AugRecord identity(int w, int h) {
    AugRecord r;
    r.width = w;
    r.height = h;
    return r;
  }
};

// Deterministic in (seed via rng state, config). Objects get class-correlated
// colors on a textured background; pairwise IoU stays below the configured
// bound. ConfigInvalid when placement fails repeatedly.
Scene generate_scene(int scene_id, std::uint64_t seed, const GenConfig& cfg);

// blur -> fog blend toward (0.8, 0.8, 0.8) -> brightness shift -> additive
// Gaussian noise -> clamp to [0,1]. Identity params return the input exactly.
Tensor render_target(const Tensor& source, const DomainParams& domain, Rng& rng);

// Separable Gaussian blur, radius ceil(3*sigma), edge-clamped. sigma == 0 is
// the identity.
Tensor gaussian_blur(const Tensor& img, double sigma);

struct WeakAugmented {
  Tensor image;
  std::vector<Box> boxes;
  AugRecord record;
};

// Horizontal flip (p = 0.5) then crop-resize with scale in [0.9, 1].
// Surviving boxes are mapped exactly; boxes entirely outside the crop are
// dropped and their indices recorded.
WeakAugmented apply_weak(const Tensor& img, const std::vector<Box>& boxes,
                         Rng& rng);

struct StrongAugmented {
  Tensor image;
  AugRecord record;
};

// Photometric only (identity geometry): contrast then brightness scaling in
// the configured jitter ranges, Gaussian blur, then 0-2 Cutout rectangles
// filled with 0.5. Rectangles are recorded.
struct StrongAugConfig {
  double brightness_lo = 0.9, brightness_hi = 1.1;
  double contrast_lo = 0.9, contrast_hi = 1.1;
  double blur_sigma_max = 0.6;
  int max_cutouts = 2;
  double cutout_min = 20.0, cutout_max = 40.0;  // rectangle side, pixels
};
StrongAugmented apply_strong(const Tensor& img, Rng& rng,
                             const StrongAugConfig& cfg = {});

// Maps a box between two views of the same original image, through original
// coordinates, then clamps into the destination view. BoxOutsideView if the
// clamped result has zero area.
Box transform_box(const Box& box, const AugRecord& from, const AugRecord& to);

// Clamped bilinear sample of channel ch at continuous position (x, y), with
// pixel centers at integer + 0.5.
double sample_bilinear(const Tensor& img, int ch, double x, double y);

// View <-> original coordinate maps used by transform_box and the
// pixel-alignment logic in cutout exclusion.
void view_to_original(const AugRecord& r, double xv, double yv, double& xo,
                      double& yo);
void original_to_view(const AugRecord& r, double xo, double yo, double& xv,
                      double& yv);

// Resamples an image through its geometric record: output pixel (x,y) reads
// the original bilinearly at view_to_original(x+0.5, y+0.5). Used to build
// augmented views and to align views for comparison.
Tensor resample_view(const Tensor& original, const AugRecord& r);

}  // namespace dadet

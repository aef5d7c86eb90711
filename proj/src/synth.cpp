#include "dadet/synth.hpp"

#include <algorithm>
#include <cmath>

namespace dadet {

namespace {

struct Color {
  double r, g, b;
};

// First three classes use a fixed palette tied to the shapes; further classes
// walk a hue wheel so any class count stays visually separable.
Color class_color(int class_id) {
  static const Color palette[3] = {
      {0.85, 0.30, 0.25},  // disc: red
      {0.25, 0.45, 0.90},  // square: blue
      {0.90, 0.80, 0.30},  // triangle: yellow
  };
  if (class_id < 3) return palette[class_id];
  double h = std::fmod(0.61803398875 * class_id, 1.0) * 6.0;
  double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  double c[3] = {0, 0, 0};
  switch (int(h)) {
    case 0: c[0] = 1; c[1] = x; break;
    case 1: c[0] = x; c[1] = 1; break;
    case 2: c[1] = 1; c[2] = x; break;
    case 3: c[1] = x; c[2] = 1; break;
    case 4: c[0] = x; c[2] = 1; break;
    default: c[0] = 1; c[2] = x; break;
  }
  return {0.2 + 0.7 * c[0], 0.2 + 0.7 * c[1], 0.2 + 0.7 * c[2]};
}

// Coverage test for the three shape silhouettes, all inscribed so the box is
// tight: disc touches edge midpoints, triangle touches apex and base corners.
bool inside_shape(int shape, const Box& b, double px, double py) {
  switch (shape) {
    case 0: {  // ellipse
      double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
      double rx = 0.5 * b.width(), ry = 0.5 * b.height();
      double dx = (px - cx) / rx, dy = (py - cy) / ry;
      return dx * dx + dy * dy <= 1.0;
    }
    case 1:  // filled box
      return px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2;
    default: {  // isoceles triangle, apex top-center
      if (py < b.y1 || py > b.y2) return false;
      double f = (py - b.y1) / b.height();  // 0 at apex row, 1 at base
      double cx = 0.5 * (b.x1 + b.x2);
      double half = 0.5 * b.width() * f;
      return px >= cx - half && px <= cx + half;
    }
  }
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void validate_config(const GenConfig& cfg) {
  bool ok = cfg.width >= 16 && cfg.height >= 16 && cfg.num_classes >= 1 &&
            cfg.min_objects >= 1 && cfg.min_objects <= cfg.max_objects &&
            cfg.min_size > 0 && cfg.min_size <= cfg.max_size &&
            cfg.max_size <= std::min(cfg.width, cfg.height) - 2.0 &&
            cfg.max_pairwise_iou > 0.0 && cfg.placement_attempts >= 1;
  if (!ok) throw ConfigInvalid("generate_scene: unsatisfiable generator config");
}

}  // namespace

Scene generate_scene(int scene_id, std::uint64_t seed, const GenConfig& cfg) {
  validate_config(cfg);
  Rng rng(Rng::mix(seed, std::uint64_t(scene_id)));
  const int w = cfg.width, h = cfg.height;

  Scene scene;
  scene.id = scene_id;

  // Textured background: muted base color, horizontal shading, value noise.
  double base[3];
  for (double& c : base) c = rng.uniform(0.15, 0.45);
  double grad = rng.uniform(-0.08, 0.08);
  scene.image_source = Tensor::zeros({3, h, w});
  Tensor& img = scene.image_source;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double n = rng.uniform(-0.05, 0.05);
      double shade = grad * (double(x) / w - 0.5);
      for (int c = 0; c < 3; ++c)
        img.at3(c, y, x) = clamp01(base[c] + shade + n);
    }
  }

  // Place boxes by rejection against the pairwise IoU bound.
  const int count = cfg.min_objects + rng.uniform_int(cfg.max_objects - cfg.min_objects + 1);
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_attempts && !placed; ++attempt) {
      double bw = rng.uniform(cfg.min_size, cfg.max_size);
      double bh = rng.uniform(cfg.min_size, cfg.max_size);
      double x1 = rng.uniform(1.0, w - 1.0 - bw);
      double y1 = rng.uniform(1.0, h - 1.0 - bh);
      Box b{x1, y1, x1 + bw, y1 + bh};
      bool ok = true;
      for (const auto& other : scene.objects)
        if (box_iou(b, other.box) >= cfg.max_pairwise_iou) ok = false;
      if (!ok) continue;
      SceneObject obj;
      obj.class_id = rng.uniform_int(cfg.num_classes);
      obj.box = b;
      scene.objects.push_back(obj);
      placed = true;
    }
    if (!placed)
      throw ConfigInvalid("generate_scene: object placement failed after " +
                          std::to_string(cfg.placement_attempts) + " attempts");
  }

  // Rasterize with 4x4 supersampled coverage, later objects on top.
  for (const auto& obj : scene.objects) {
    Color col = class_color(obj.class_id);
    double jr = rng.uniform(-0.06, 0.06);
    double jg = rng.uniform(-0.06, 0.06);
    double jb = rng.uniform(-0.06, 0.06);
    col = {clamp01(col.r + jr), clamp01(col.g + jg), clamp01(col.b + jb)};
    int shape = obj.class_id % 3;
    const Box& b = obj.box;
    int x_lo = std::max(0, int(std::floor(b.x1)));
    int y_lo = std::max(0, int(std::floor(b.y1)));
    int x_hi = std::min(w - 1, int(std::ceil(b.x2)));
    int y_hi = std::min(h - 1, int(std::ceil(b.y2)));
    for (int y = y_lo; y <= y_hi; ++y) {
      for (int x = x_lo; x <= x_hi; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx)
            if (inside_shape(shape, b, x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0))
              ++hits;
        if (hits == 0) continue;
        double a = hits / 16.0;
        img.at3(0, y, x) = clamp01((1 - a) * img.at3(0, y, x) + a * col.r);
        img.at3(1, y, x) = clamp01((1 - a) * img.at3(1, y, x) + a * col.g);
        img.at3(2, y, x) = clamp01((1 - a) * img.at3(2, y, x) + a * col.b);
      }
    }
  }

  Rng target_rng(Rng::mix(Rng::mix(seed, std::uint64_t(scene_id)), 0x7a72676eULL));
  scene.image_target = render_target(scene.image_source, cfg.domain, target_rng);
  return scene;
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(size_t(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += kernel[size_t(i + radius)];
  }
  for (double& k : kernel) k /= total;

  Tensor tmp = Tensor::zeros(img.shape);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[size_t(i + radius)] *
                 img.at3(ch, y, std::clamp(x + i, 0, w - 1));
        tmp.at3(ch, y, x) = acc;
      }
  Tensor out = Tensor::zeros(img.shape);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[size_t(i + radius)] *
                 tmp.at3(ch, std::clamp(y + i, 0, h - 1), x);
        out.at3(ch, y, x) = acc;
      }
  return out;
}

Tensor render_target(const Tensor& source, const DomainParams& domain, Rng& rng) {
  static const double fog[3] = {0.8, 0.8, 0.8};
  Tensor out = gaussian_blur(source, domain.blur_sigma);
  const int c = out.shape[0];
  const double d = domain.fog_density;
  const bool identity = d == 0.0 && domain.brightness_shift == 0.0 &&
                        domain.noise_std == 0.0 && domain.blur_sigma <= 0.0;
  if (identity) return out;
  const size_t plane = out.data.size() / c;
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < plane; ++i) {
      double v = out.data[size_t(ch) * plane + i];
      v = (1.0 - d) * v + d * fog[ch];
      v += domain.brightness_shift;
      out.data[size_t(ch) * plane + i] = v;
    }
  if (domain.noise_std > 0.0) {
    // Draw order pinned to (pixel, channel) so the stream does not depend on
    // memory layout.
    for (size_t i = 0; i < plane; ++i)
      for (int ch = 0; ch < c; ++ch)
        out.data[size_t(ch) * plane + i] += domain.noise_std * rng.normal();
  }
  for (double& v : out.data) v = clamp01(v);
  return out;
}

void view_to_original(const AugRecord& r, double xv, double yv, double& xo,
                      double& yo) {
  double xf = r.crop_dx + r.crop_scale * xv;
  yo = r.crop_dy + r.crop_scale * yv;
  xo = r.flip ? r.width - xf : xf;
}

void original_to_view(const AugRecord& r, double xo, double yo, double& xv,
                      double& yv) {
  double xf = r.flip ? r.width - xo : xo;
  xv = (xf - r.crop_dx) / r.crop_scale;
  yv = (yo - r.crop_dy) / r.crop_scale;
}

double sample_bilinear(const Tensor& img, int ch, double x, double y) {
  const int h = img.shape[1], w = img.shape[2];
  const double u = x - 0.5, v = y - 0.5;
  const int x0 = int(std::floor(u)), y0 = int(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  const int xs[2] = {std::clamp(x0, 0, w - 1), std::clamp(x0 + 1, 0, w - 1)};
  const int ys[2] = {std::clamp(y0, 0, h - 1), std::clamp(y0 + 1, 0, h - 1)};
  const double wx[2] = {1.0 - fx, fx};
  const double wy[2] = {1.0 - fy, fy};
  double acc = 0.0;
  for (int iy = 0; iy < 2; ++iy)
    for (int ix = 0; ix < 2; ++ix)
      acc += wy[iy] * wx[ix] * img.at3(ch, ys[iy], xs[ix]);
  return acc;
}

Tensor resample_view(const Tensor& original, const AugRecord& r) {
  if (r.identity_geometry()) return original;
  const int c = original.shape[0], h = original.shape[1], w = original.shape[2];
  Tensor out = Tensor::zeros(original.shape);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double xo, yo;
      view_to_original(r, x + 0.5, y + 0.5, xo, yo);
      for (int ch = 0; ch < c; ++ch)
        out.at3(ch, y, x) = sample_bilinear(original, ch, xo, yo);
    }
  }
  return out;
}

WeakAugmented apply_weak(const Tensor& img, const std::vector<Box>& boxes,
                         Rng& rng) {
  const int h = img.shape[1], w = img.shape[2];
  AugRecord rec = AugRecord::identity(w, h);
  rec.flip = rng.bernoulli(0.5);
  rec.crop_scale = rng.uniform(0.9, 1.0);
  rec.crop_dx = rng.uniform(0.0, w * (1.0 - rec.crop_scale));
  rec.crop_dy = rng.uniform(0.0, h * (1.0 - rec.crop_scale));

  WeakAugmented out;
  out.record = rec;
  out.image = resample_view(img, rec);
  for (size_t i = 0; i < boxes.size(); ++i) {
    double ax, ay, bx, by;
    original_to_view(rec, boxes[i].x1, boxes[i].y1, ax, ay);
    original_to_view(rec, boxes[i].x2, boxes[i].y2, bx, by);
    Box mapped{std::min(ax, bx), std::min(ay, by), std::max(ax, bx),
               std::max(ay, by)};
    Box clamped = clamp_box(mapped, double(w), double(h));
    if (!clamped.valid()) {
      out.record.dropped_boxes.push_back(int(i));
      continue;
    }
    out.boxes.push_back(clamped);
  }
  return out;
}

StrongAugmented apply_strong(const Tensor& img, Rng& rng,
                             const StrongAugConfig& cfg) {
  const int h = img.shape[1], w = img.shape[2];
  AugRecord rec = AugRecord::identity(w, h);
  rec.contrast = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
  rec.brightness = rng.uniform(cfg.brightness_lo, cfg.brightness_hi);
  rec.blur_sigma = rng.uniform(0.0, cfg.blur_sigma_max);
  const int n_cut = cfg.max_cutouts > 0 ? rng.uniform_int(cfg.max_cutouts + 1) : 0;
  for (int i = 0; i < n_cut; ++i) {
    double cw = rng.uniform(cfg.cutout_min, cfg.cutout_max);
    double chh = rng.uniform(cfg.cutout_min, cfg.cutout_max);
    double x1 = rng.uniform(0.0, std::max(0.0, w - cw));
    double y1 = rng.uniform(0.0, std::max(0.0, h - chh));
    rec.cutout_rects.push_back({x1, y1, x1 + cw, y1 + chh});
  }

  StrongAugmented out;
  out.record = rec;
  Tensor t = img;
  const bool photometric = rec.contrast != 1.0 || rec.brightness != 1.0;
  if (photometric)
    for (double& v : t.data)
      v = clamp01(((v - 0.5) * rec.contrast + 0.5) * rec.brightness);
  t = gaussian_blur(t, rec.blur_sigma);
  for (const Box& r : rec.cutout_rects) {
    int x_lo = std::max(0, int(std::floor(r.x1)));
    int y_lo = std::max(0, int(std::floor(r.y1)));
    int x_hi = std::min(w - 1, int(std::ceil(r.x2)) - 1);
    int y_hi = std::min(h - 1, int(std::ceil(r.y2)) - 1);
    for (int c = 0; c < 3; ++c)
      for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x) t.at3(c, y, x) = 0.5;
  }
  out.image = std::move(t);
  return out;
}

Box transform_box(const Box& box, const AugRecord& from, const AugRecord& to) {
  double ox1, oy1, ox2, oy2;
  view_to_original(from, box.x1, box.y1, ox1, oy1);
  view_to_original(from, box.x2, box.y2, ox2, oy2);
  double vx1, vy1, vx2, vy2;
  original_to_view(to, ox1, oy1, vx1, vy1);
  original_to_view(to, ox2, oy2, vx2, vy2);
  Box mapped{std::min(vx1, vx2), std::min(vy1, vy2), std::max(vx1, vx2),
             std::max(vy1, vy2)};
  Box clamped = clamp_box(mapped, double(to.width), double(to.height));
  if (!clamped.valid())
    throw BoxOutsideView("transform_box: box has no area in destination view");
  return clamped;
}

}  // namespace dadet

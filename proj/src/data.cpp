#include "efsign/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "efsign/errors.hpp"

namespace fs = std::filesystem;

namespace efsign {

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back(item.label);
  return out;
}

Dataset load_dataset(const fs::path& root, LoadReport* report) {
  LoadReport local;
  LoadReport& rep = report ? *report : local;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw InputError("dataset root " + root.string() + " is not a directory");

  Dataset ds;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) ds.class_names.push_back(entry.path().filename().string());
  }
  if (ds.class_names.empty()) throw InputError("dataset root " + root.string() + " has no class subdirectories");
  std::sort(ds.class_names.begin(), ds.class_names.end());

  for (std::size_t label = 0; label < ds.class_names.size(); ++label) {
    const fs::path dir = root / ds.class_names[label];
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      if (!has_image_extension(entry.path())) {
        ++rep.skipped_non_image;
        continue;
      }
      files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) rep.warnings.push_back("class '" + ds.class_names[label] + "' has no images");
    for (const auto& file : files) {
      try {
        Image img = decode_image(file);
        if (ds.images.empty()) {
          ds.width = img.width;
          ds.height = img.height;
        }
        ds.items.push_back({file, static_cast<int>(label)});
        ds.images.push_back(std::move(img));
      } catch (const Error& e) {
        rep.item_errors.push_back({file, e.what()});
      }
    }
  }
  if (rep.skipped_non_image > 0) {
    rep.warnings.push_back("skipped " + std::to_string(rep.skipped_non_image) + " non-image files");
  }
  return ds;
}

void AugmentConfig::validate() const {
  auto frac = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("augmentation ") + name + " must be in [0, 1]");
  };
  frac(flip_prob, "flip_prob");
  frac(brightness_jitter, "brightness_jitter");
  frac(contrast_jitter, "contrast_jitter");
  frac(saturation_jitter, "saturation_jitter");
  frac(max_translate_frac, "max_translate_frac");
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0)) {
    throw ConfigError("augmentation max_rotation_deg must be in [0, 180]");
  }
  if (target_size == 0) throw ConfigError("augmentation target_size must be positive");
}

namespace {

// Interleaved RGB in [0, 1].
struct FloatImage {
  std::size_t w = 0, h = 0;
  std::vector<float> px;

  float* at(std::size_t x, std::size_t y) { return px.data() + (y * w + x) * 3; }
  const float* at(std::size_t x, std::size_t y) const { return px.data() + (y * w + x) * 3; }
};

FloatImage to_float(const Image& img) {
  FloatImage out{img.width, img.height, std::vector<float>(img.rgb.size())};
  for (std::size_t i = 0; i < img.rgb.size(); ++i) out.px[i] = static_cast<float>(img.rgb[i]) / 255.0f;
  return out;
}

void flip_horizontal(FloatImage& img) {
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w / 2; ++x) {
      float* a = img.at(x, y);
      float* b = img.at(img.w - 1 - x, y);
      for (int c = 0; c < 3; ++c) std::swap(a[c], b[c]);
    }
  }
}

// Bilinear sample at continuous pixel coordinates; outside pixels are black.
void sample_zero_fill(const FloatImage& img, double sx, double sy, float* out) {
  const double fx = std::floor(sx), fy = std::floor(sy);
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const float wx = static_cast<float>(sx - fx), wy = static_cast<float>(sy - fy);
  out[0] = out[1] = out[2] = 0.0f;
  const long xs[2] = {x0, x0 + 1};
  const long ys[2] = {y0, y0 + 1};
  const float wxs[2] = {1.0f - wx, wx};
  const float wys[2] = {1.0f - wy, wy};
  for (int j = 0; j < 2; ++j) {
    if (ys[j] < 0 || ys[j] >= static_cast<long>(img.h) || wys[j] == 0.0f) continue;
    for (int i = 0; i < 2; ++i) {
      if (xs[i] < 0 || xs[i] >= static_cast<long>(img.w) || wxs[i] == 0.0f) continue;
      const float* p = img.at(static_cast<std::size_t>(xs[i]), static_cast<std::size_t>(ys[j]));
      const float wgt = wxs[i] * wys[j];
      for (int c = 0; c < 3; ++c) out[c] += wgt * p[c];
    }
  }
}

// Inverse-maps each output pixel centre through rotation about the image
// centre followed by a shift of (tx, ty) pixels.
FloatImage warp(const FloatImage& img, double angle_rad, double tx, double ty) {
  FloatImage out{img.w, img.h, std::vector<float>(img.px.size(), 0.0f)};
  const double cx = static_cast<double>(img.w) / 2.0, cy = static_cast<double>(img.h) / 2.0;
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      const double px = static_cast<double>(x) + 0.5 - tx - cx;
      const double py = static_cast<double>(y) + 0.5 - ty - cy;
      const double sx = c * px + s * py + cx - 0.5;
      const double sy = -s * px + c * py + cy - 0.5;
      sample_zero_fill(img, sx, sy, out.at(x, y));
    }
  }
  return out;
}

float gray(const float* p) { return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]; }

void adjust_brightness(FloatImage& img, float f) {
  for (auto& v : img.px) v = std::clamp(v * f, 0.0f, 1.0f);
}

void adjust_contrast(FloatImage& img, float f) {
  double sum = 0.0;
  const std::size_t n = img.w * img.h;
  for (std::size_t i = 0; i < n; ++i) sum += gray(img.px.data() + 3 * i);
  const float mean = static_cast<float>(sum / static_cast<double>(n));
  for (auto& v : img.px) v = std::clamp(mean + f * (v - mean), 0.0f, 1.0f);
}

void adjust_saturation(FloatImage& img, float f) {
  const std::size_t n = img.w * img.h;
  for (std::size_t i = 0; i < n; ++i) {
    float* p = img.px.data() + 3 * i;
    const float g = gray(p);
    for (int c = 0; c < 3; ++c) p[c] = std::clamp(g + f * (p[c] - g), 0.0f, 1.0f);
  }
}

// Half-pixel-centre bilinear resize with edge clamping, written straight
// into a normalized 3 x S x S tensor.
Tensor resize_normalize(const FloatImage& img, std::size_t size) {
  Tensor out({3, size, size});
  const double scale_x = static_cast<double>(img.w) / static_cast<double>(size);
  const double scale_y = static_cast<double>(img.h) / static_cast<double>(size);
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * scale_y - 0.5, 0.0, static_cast<double>(img.h - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, img.h - 1);
    const float wy = static_cast<float>(sy - static_cast<double>(y0));
    for (std::size_t x = 0; x < size; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * scale_x - 0.5, 0.0, static_cast<double>(img.w - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, img.w - 1);
      const float wx = static_cast<float>(sx - static_cast<double>(x0));
      const float* p00 = img.at(x0, y0);
      const float* p01 = img.at(x1, y0);
      const float* p10 = img.at(x0, y1);
      const float* p11 = img.at(x1, y1);
      for (std::size_t c = 0; c < 3; ++c) {
        const float top = p00[c] * (1.0f - wx) + p01[c] * wx;
        const float bottom = p10[c] * (1.0f - wx) + p11[c] * wx;
        const float v = top * (1.0f - wy) + bottom * wy;
        out[c * plane + y * size + x] = (v - kImageNetMean[c]) / kImageNetStd[c];
      }
    }
  }
  return out;
}

}  // namespace

Tensor preprocess(const Image& image, Mode mode, const AugmentConfig& cfg, Rng& rng) {
  if (image.width == 0 || image.height == 0 || image.rgb.size() != image.width * image.height * 3) {
    throw InputError("preprocess: image has zero size or inconsistent pixel buffer");
  }
  FloatImage img = to_float(image);
  if (mode == Mode::train) {
    const bool flip = rng.uniform() < cfg.flip_prob;
    const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * std::numbers::pi / 180.0;
    const double tx = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * static_cast<double>(img.w);
    const double ty = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * static_cast<double>(img.h);
    const auto brightness = static_cast<float>(rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter));
    const auto contrast = static_cast<float>(rng.uniform(1.0 - cfg.contrast_jitter, 1.0 + cfg.contrast_jitter));
    const auto saturation = static_cast<float>(rng.uniform(1.0 - cfg.saturation_jitter, 1.0 + cfg.saturation_jitter));

    if (flip) flip_horizontal(img);
    if (angle != 0.0) img = warp(img, angle, 0.0, 0.0);
    if (tx != 0.0 || ty != 0.0) img = warp(img, 0.0, tx, ty);
    if (brightness != 1.0f) adjust_brightness(img, brightness);
    if (contrast != 1.0f) adjust_contrast(img, contrast);
    if (saturation != 1.0f) adjust_saturation(img, saturation);
  }
  return resize_normalize(img, cfg.target_size);
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw InputError("stack_images: empty batch");
  const Shape& s = images.front().shape();
  Tensor out({images.size(), s.at(0), s.at(1), s.at(2)});
  const std::size_t per = images.front().numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) throw InputError("stack_images: mixed image shapes in one batch");
    std::copy(images[i].data().begin(), images[i].data().end(), out.data().begin() + i * per);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (f == fold) continue;
    out.insert(out.end(), folds[f].begin(), folds[f].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t FoldPlan::total() const {
  std::size_t n = 0;
  for (const auto& f : folds) n += f.size();
  return n;
}

FoldPlan stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw InputError("stratified_kfold: k must be at least 2");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw InputError("stratified_kfold: negative label at index " + std::to_string(i));
    by_class[labels[i]].push_back(i);
  }
  for (const auto& [label, members] : by_class) {
    if (members.size() < k) {
      throw InputError("stratified_kfold: class " + std::to_string(label) + " has " + std::to_string(members.size()) +
                       " members, fewer than k=" + std::to_string(k));
    }
  }
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.folds.assign(k, {});
  Rng rng(seed);
  std::size_t dealer = 0;
  for (auto& [label, members] : by_class) {
    rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t idx : members) {
      plan.folds[dealer].push_back(idx);
      dealer = (dealer + 1) % k;
    }
  }
  for (auto& f : plan.folds) std::sort(f.begin(), f.end());
  return plan;
}

std::string synth_class_name(std::size_t cls, std::size_t num_classes) {
  if (num_classes <= 26) return std::string(1, static_cast<char>('A' + cls));
  char buf[8];
  std::snprintf(buf, sizeof buf, "c%02zu", cls);
  return buf;
}

namespace {

constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {0.90f, 0.15f, 0.10f},
    {0.10f, 0.80f, 0.20f},
    {0.15f, 0.30f, 0.95f},
    {0.95f, 0.90f, 0.10f},
    {0.90f, 0.10f, 0.85f},
    {0.10f, 0.85f, 0.90f},
    {1.00f, 0.55f, 0.05f},
    {0.95f, 0.95f, 0.95f},
}};

double box_sdf(double u, double v, double cu, double cv, double hu, double hv) {
  const double du = std::abs(u - cu) - hu, dv = std::abs(v - cv) - hv;
  const double ou = std::max(du, 0.0), ov = std::max(dv, 0.0);
  return std::hypot(ou, ov) + std::min(std::max(du, dv), 0.0);
}

double segment_sdf(double u, double v, double au, double av, double bu, double bv, double half_width) {
  const double pu = u - au, pv = v - av, du = bu - au, dv = bv - av;
  const double t = std::clamp((pu * du + pv * dv) / (du * du + dv * dv), 0.0, 1.0);
  return std::hypot(pu - t * du, pv - t * dv) - half_width;
}

// Signed distance (negative inside) of glyph family f in [-1, 1]^2 space.
// Every family is mirror-symmetric about the vertical axis.
double glyph_sdf(std::size_t family, double u, double v) {
  switch (family) {
    case 0: {  // three horizontal bars
      double d = 1e9;
      for (double cv : {-0.5, 0.0, 0.5}) d = std::min(d, box_sdf(u, v, 0.0, cv, 0.7, 0.09));
      return d;
    }
    case 1: {  // three vertical bars
      double d = 1e9;
      for (double cu : {-0.5, 0.0, 0.5}) d = std::min(d, box_sdf(u, v, cu, 0.0, 0.09, 0.7));
      return d;
    }
    case 2:  // ring
      return std::abs(std::hypot(u, v) - 0.55) - 0.1;
    case 3:  // filled disk
      return std::hypot(u, v) - 0.6;
    case 4:  // diagonal cross
      return std::min(segment_sdf(u, v, -0.6, -0.6, 0.6, 0.6, 0.1), segment_sdf(u, v, -0.6, 0.6, 0.6, -0.6, 0.1));
    case 5: {  // hash grid
      double d = 1e9;
      for (double c : {-0.3, 0.3}) {
        d = std::min(d, box_sdf(u, v, 0.0, c, 0.7, 0.07));
        d = std::min(d, box_sdf(u, v, c, 0.0, 0.07, 0.7));
      }
      return d;
    }
    case 6: {  // 3 x 3 dots
      double d = 1e9;
      for (double cu : {-0.5, 0.0, 0.5}) {
        for (double cv : {-0.5, 0.0, 0.5}) d = std::min(d, std::hypot(u - cu, v - cv) - 0.14);
      }
      return d;
    }
    default:  // square frame
      return std::abs(std::max(std::abs(u), std::abs(v)) - 0.55) - 0.08;
  }
}

}  // namespace

Image render_glyph(std::size_t cls, std::size_t image_size, Rng& rng) {
  if (cls >= 64) throw ConfigError("render_glyph: at most 64 classes");
  const std::size_t hue = cls % 8;
  const std::size_t family = (cls / 8 + cls) % 8;
  const double angle = rng.uniform(-10.0, 10.0) * std::numbers::pi / 180.0;
  // Offsets in normalized units: the image spans 2 units, so 8% of it is 0.16.
  const double tu = rng.uniform(-0.16, 0.16), tv = rng.uniform(-0.16, 0.16);
  const double background = rng.uniform(0.12, 0.3);
  const double intensity = rng.uniform(0.8, 1.0);
  const double c = std::cos(angle), s = std::sin(angle);
  const double px = 2.0 / static_cast<double>(image_size);

  Image img(image_size, image_size);
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      const double qu = (static_cast<double>(x) + 0.5) * px - 1.0 - tu;
      const double qv = (static_cast<double>(y) + 0.5) * px - 1.0 - tv;
      const double u = c * qu + s * qv, v = -s * qu + c * qv;
      const double alpha = std::clamp(0.5 - glyph_sdf(family, u, v) / px, 0.0, 1.0);
      std::uint8_t* p = img.pixel(x, y);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double bg = background + 0.05 * rng.normal();
        const double fg = intensity * kPalette[hue][ch];
        const double val = std::clamp((1.0 - alpha) * bg + alpha * fg, 0.0, 1.0);
        p[ch] = static_cast<std::uint8_t>(std::lround(val * 255.0));
      }
    }
  }
  return img;
}

Dataset synth_generate(const SynthConfig& cfg, const fs::path& out_dir) {
  if (cfg.num_classes < 1 || cfg.num_classes > 64) throw ConfigError("synth: num_classes must be in [1, 64]");
  if (cfg.per_class == 0 || cfg.image_size < 8) throw ConfigError("synth: need per_class >= 1 and image_size >= 8");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create dataset directory " + out_dir.string());
  for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
    const std::string name = synth_class_name(cls, cfg.num_classes);
    const fs::path dir = out_dir / name;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create class directory " + dir.string());
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
      Rng rng = Rng::substream(cfg.seed, cls, i);
      char file[64];
      std::snprintf(file, sizeof file, "%s_%04zu.png", name.c_str(), i);
      write_png(dir / file, render_glyph(cls, cfg.image_size, rng));
    }
  }
  return load_dataset(out_dir);
}

}  // namespace efsign

// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "msu/json_util.hpp"

namespace msu {

namespace fs = std::filesystem;

nlohmann::json ClassMap::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < names.size(); ++i) j[std::to_string(i)] = names[i];
  return j;
}

ClassMap ClassMap::from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.empty()) throw DataError("classmap: expected a non-empty object");
  ClassMap m;
  m.names.assign(j.size(), "");
  std::set<std::string> seen;
  for (const auto& [key, value] : j.items()) {
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(key, &used);
      if (used != key.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw DataError("classmap: key '" + key + "' is not an index");
    }
    if (idx >= m.names.size()) throw DataError("classmap: indices must be contiguous from 0");
    if (!value.is_string()) throw DataError("classmap: name for " + key + " must be a string");
    m.names[idx] = value.get<std::string>();
    if (!seen.insert(m.names[idx]).second) throw DataError("classmap: duplicate name '" + m.names[idx] + "'");
  }
  return m;
}

const std::array<std::array<std::uint8_t, 3>, 7>& class_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 7> colors{{
      {0, 0, 0},        // background
      {255, 0, 0},      // SP red
      {255, 255, 0},    // SL yellow
      {154, 205, 50},   // AW yellow-green
      {127, 255, 0},    // LV chartreuse
      {0, 127, 255},    // ST azure
      {0, 255, 255},    // UV&PV cyan
  }};
  return colors;
}

void validate_mask(const Mask& mask, std::int64_t num_classes, const std::string& where) {
  for (std::int64_t y = 0; y < mask.height; ++y) {
    for (std::int64_t x = 0; x < mask.width; ++x) {
      const int v = mask.at(y, x);
      if (v >= num_classes) {
        throw DataError(where + ": label value " + std::to_string(v) + " at (row " + std::to_string(y) + ", col " +
                        std::to_string(x) + ") is not a class index (< " + std::to_string(num_classes) + ")");
      }
    }
  }
}

namespace {

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": directory not found");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.emplace(e.path().stem().string(), e.path());
  }
  return out;
}

}  // namespace

std::vector<Sample> load_dataset(const fs::path& root, std::int64_t num_classes) {
  const auto images = list_pngs(root / "images");
  const auto masks = list_pngs(root / "masks");
  for (const auto& [stem, path] : images) {
    if (!masks.count(stem)) throw DataError(path.string() + ": image has no matching mask");
  }
  for (const auto& [stem, path] : masks) {
    if (!images.count(stem)) throw DataError(path.string() + ": mask has no matching image");
  }
  std::vector<Sample> out;
  for (const auto& [stem, ipath] : images) {
    const auto& mpath = masks.at(stem);
    Sample s;
    s.id = stem;
    s.image = read_image_png(ipath);
    s.mask = read_mask_png(mpath);
    if (s.image.height != s.mask.height || s.image.width != s.mask.width) {
      throw DataError(mpath.string() + ": mask is " + std::to_string(s.mask.height) + "x" +
                      std::to_string(s.mask.width) + " but image is " + std::to_string(s.image.height) + "x" +
                      std::to_string(s.image.width));
    }
    validate_mask(s.mask, num_classes, mpath.string());
    out.push_back(std::move(s));
  }
  return out;
}

void write_sample(const fs::path& root, const Sample& s) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  write_image_png(root / "images" / (s.id + ".png"), s.image);
  write_mask_png(root / "masks" / (s.id + ".png"), s.mask);
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw ConfigError("augment.hflip_prob: must lie in [0, 1]");
  if (!(scale_min > 0 && scale_max >= scale_min)) {
    throw ConfigError("augment.scale_range: must be positive with min <= max");
  }
  for (auto [name, v] : {std::pair{"brightness", brightness}, {"contrast", contrast}, {"saturation", saturation}}) {
    if (!(v >= 0 && v < 1)) throw ConfigError(std::string("augment.") + name + ": must lie in [0, 1)");
  }
}

nlohmann::json AugmentConfig::to_json() const {
  return {{"enabled", enabled},
          {"hflip_prob", hflip_prob},
          {"scale_range", {scale_min, scale_max}},
          {"pad_value", pad_value},
          {"color_jitter", {{"brightness", brightness}, {"contrast", contrast}, {"saturation", saturation}}}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig c;
  JsonReader r(j, "augment");
  r.get("enabled", c.enabled);
  r.get("hflip_prob", c.hflip_prob);
  if (const auto* s = r.raw("scale_range")) {
    if (!s->is_array() || s->size() != 2 || !(*s)[0].is_number() || !(*s)[1].is_number()) {
      throw ConfigError("augment.scale_range: expected [min, max]");
    }
    c.scale_min = (*s)[0].get<double>();
    c.scale_max = (*s)[1].get<double>();
  }
  int pad = c.pad_value;
  r.get("pad_value", pad);
  if (pad < 0 || pad > 255) throw ConfigError("augment.pad_value: must lie in [0, 255]");
  c.pad_value = static_cast<std::uint8_t>(pad);
  if (auto cj = r.object("color_jitter")) {
    cj->get("brightness", c.brightness);
    cj->get("contrast", c.contrast);
    cj->get("saturation", c.saturation);
    cj->finish();
  }
  r.finish();
  c.validate();
  return c;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double normal01(Rng& rng) {
  // Box-Muller on the portable uniform; the second variate is discarded.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng) {
  AugmentParams p;
  p.flip = uniform01(rng) < cfg.hflip_prob;
  p.scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * uniform01(rng);
  p.brightness = 1.0 + cfg.brightness * (2 * uniform01(rng) - 1);
  p.contrast = 1.0 + cfg.contrast * (2 * uniform01(rng) - 1);
  p.saturation = 1.0 + cfg.saturation * (2 * uniform01(rng) - 1);
  return p;
}

namespace {

// Source coordinate of output pixel index i along an axis of length n.
double source_coord(std::int64_t i, std::int64_t n, double scale) {
  const double c = 0.5 * static_cast<double>(n);
  return (static_cast<double>(i) + 0.5 - c) / scale + c - 0.5;
}

// Nearest source index, or -1 when it falls outside [0, n).
std::int64_t nearest(double s, std::int64_t n) {
  const auto k = static_cast<std::int64_t>(std::floor(s + 0.5));
  return (k < 0 || k >= n) ? -1 : k;
}

}  // namespace

Image apply_geometry(const Image& img, const AugmentParams& p, std::uint8_t pad_value) {
  const std::int64_t h = img.height, w = img.width;
  Image out(h, w, pad_value);
  for (std::int64_t y = 0; y < h; ++y) {
    const double sy = source_coord(y, h, p.scale);
    if (nearest(sy, h) < 0) continue;
    const double cy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::int64_t>(std::floor(cy));
    const std::int64_t y1 = std::min(y0 + 1, h - 1);
    const double fy = cy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < w; ++x) {
      const double sx = source_coord(x, w, p.scale);
      if (nearest(sx, w) < 0) continue;
      double cx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      if (p.flip) cx = static_cast<double>(w - 1) - cx;
      const auto x0 = static_cast<std::int64_t>(std::floor(cx));
      const std::int64_t x1 = std::min(x0 + 1, w - 1);
      const double fx = cx - static_cast<double>(x0);
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                         fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

Mask apply_geometry(const Mask& mask, const AugmentParams& p) {
  const std::int64_t h = mask.height, w = mask.width;
  Mask out(h, w, 0);
  for (std::int64_t y = 0; y < h; ++y) {
    const std::int64_t ny = nearest(source_coord(y, h, p.scale), h);
    if (ny < 0) continue;
    for (std::int64_t x = 0; x < w; ++x) {
      std::int64_t nx = nearest(source_coord(x, w, p.scale), w);
      if (nx < 0) continue;
      if (p.flip) nx = w - 1 - nx;
      out.at(y, x) = mask.at(ny, nx);
    }
  }
  return out;
}

Image apply_color(const Image& img, const AugmentParams& p) {
  const std::size_t n = static_cast<std::size_t>(img.height * img.width);
  std::vector<double> v(img.pixels.begin(), img.pixels.end());
  for (double& x : v) x *= p.brightness;
  double mean_gray = 0;
  for (std::size_t i = 0; i < n; ++i) mean_gray += 0.299 * v[3 * i] + 0.587 * v[3 * i + 1] + 0.114 * v[3 * i + 2];
  mean_gray /= static_cast<double>(std::max<std::size_t>(n, 1));
  for (double& x : v) x = (x - mean_gray) * p.contrast + mean_gray;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = 0.299 * v[3 * i] + 0.587 * v[3 * i + 1] + 0.114 * v[3 * i + 2];
    for (int c = 0; c < 3; ++c) v[3 * i + c] = (v[3 * i + c] - g) * p.saturation + g;
  }
  Image out = img;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v[i]), 0L, 255L));
  }
  return out;
}

Sample augment_with(const Sample& s, const AugmentParams& p, const AugmentConfig& cfg) {
  Sample out;
  out.id = s.id;
  out.meta = s.meta;
  out.image = apply_color(apply_geometry(s.image, p, cfg.pad_value), p);
  out.mask = apply_geometry(s.mask, p);
  return out;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return s;
  return augment_with(s, sample_augment(cfg, rng), cfg);
}

// ---------------------------------------------------------------------------

void PhantomSpec::validate() const {
  if (height < 16 || width < 16) throw ConfigError("phantom.canvas: must be at least 16x16");
  for (std::size_t k = 0; k < presence.size(); ++k) {
    if (!(presence[k] >= 0 && presence[k] <= 1)) throw ConfigError("phantom.presence: entries must lie in [0, 1]");
  }
  const bool interior = presence[kSpine] > 0 || presence[kLiver] > 0 || presence[kStomach] > 0 ||
                        presence[kUmbilicalVein] > 0 || presence[kSkinLine] > 0;
  if (interior && presence[kAbdominalWall] != 1.0) {
    throw ConfigError("phantom.presence: the abdominal wall must always be present when other structures can be");
  }
  if (!(abdomen_radius_min > 0 && abdomen_radius_max >= abdomen_radius_min && abdomen_radius_max < 0.5)) {
    throw ConfigError("phantom.abdomen_radius: need 0 < min <= max < 0.5");
  }
  if (!(abdomen_aspect_min > 0 && abdomen_aspect_min <= 1)) throw ConfigError("phantom.abdomen_aspect_min: in (0, 1]");
  if (!(wall_thickness > 0 && skin_gap >= 0 && skin_thickness > 0)) {
    throw ConfigError("phantom: wall/skin thicknesses must be positive");
  }
  if (!(speckle_variance >= 0)) throw ConfigError("phantom.speckle_variance: must be >= 0");
  if (!(blur_sigma >= 0)) throw ConfigError("phantom.blur_sigma: must be >= 0");
  for (const auto& band : intensity) {
    if (band[0] < 0 || band[1] > 255 || band[0] > band[1]) throw ConfigError("phantom.intensity: bad band");
  }
  if (max_retries < 1) throw ConfigError("phantom.max_retries: must be >= 1");
}

nlohmann::json PhantomSpec::to_json() const {
  return {{"canvas", {height, width}},
          {"presence", presence},
          {"abdomen_radius", {abdomen_radius_min, abdomen_radius_max}},
          {"abdomen_aspect_min", abdomen_aspect_min},
          {"wall_thickness", wall_thickness},
          {"skin_gap", skin_gap},
          {"skin_thickness", skin_thickness},
          {"speckle_variance", speckle_variance},
          {"blur_sigma", blur_sigma},
          {"intensity", intensity},
          {"max_retries", max_retries}};
}

PhantomSpec PhantomSpec::from_json(const nlohmann::json& j) {
  PhantomSpec s;
  JsonReader r(j, "phantom");
  std::array<std::int64_t, 2> canvas{s.height, s.width};
  r.get("canvas", canvas);
  s.height = canvas[0];
  s.width = canvas[1];
  r.get("presence", s.presence);
  std::array<double, 2> radius{s.abdomen_radius_min, s.abdomen_radius_max};
  r.get("abdomen_radius", radius);
  s.abdomen_radius_min = radius[0];
  s.abdomen_radius_max = radius[1];
  r.get("abdomen_aspect_min", s.abdomen_aspect_min);
  r.get("wall_thickness", s.wall_thickness);
  r.get("skin_gap", s.skin_gap);
  r.get("skin_thickness", s.skin_thickness);
  r.get("speckle_variance", s.speckle_variance);
  r.get("blur_sigma", s.blur_sigma);
  r.get("intensity", s.intensity);
  r.get("max_retries", s.max_retries);
  r.finish();
  s.validate();
  return s;
}

std::string PhantomSpec::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finaliser over (seed, index).
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

struct Ellipse {
  double cx, cy, a, b, theta;

  // (u, v) in the ellipse frame.
  std::pair<double, double> local(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    return {dx * c + dy * s, -dx * s + dy * c};
  }
  double q(double x, double y) const {
    auto [u, v] = local(x, y);
    return (u / a) * (u / a) + (v / b) * (v / b);
  }
  double extent_x() const { return std::hypot(a * std::cos(theta), b * std::sin(theta)); }
  double extent_y() const { return std::hypot(a * std::sin(theta), b * std::cos(theta)); }
};

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Point at fractional polar position (rho, psi) inside ellipse e, in pixels.
std::pair<double, double> inside_point(const Ellipse& e, double rho, double psi) {
  const double u = rho * e.a * std::cos(psi), v = rho * e.b * std::sin(psi);
  const double c = std::cos(e.theta), s = std::sin(e.theta);
  return {e.cx + u * c - v * s, e.cy + u * s + v * c};
}

struct Geometry {
  Ellipse outer, inner, skin_in, skin_out;
  double skin_start, skin_span;
  Ellipse liver, stomach, vein;
  std::array<Ellipse, 3> spine;
};

Geometry draw_geometry(const PhantomSpec& spec, Rng& rng) {
  const double m = static_cast<double>(std::min(spec.height, spec.width));
  Geometry g;
  const double a = m * uniform(rng, spec.abdomen_radius_min, spec.abdomen_radius_max);
  const double b = a * uniform(rng, spec.abdomen_aspect_min, 1.0);
  const double theta = uniform(rng, 0, std::numbers::pi);
  const double cx = 0.5 * static_cast<double>(spec.width - 1) + uniform(rng, -0.03, 0.03) * m;
  const double cy = 0.5 * static_cast<double>(spec.height - 1) + uniform(rng, -0.03, 0.03) * m;
  const double wall = spec.wall_thickness * m * uniform(rng, 0.9, 1.1);
  const double gap = spec.skin_gap * m, skin = spec.skin_thickness * m;
  g.outer = {cx, cy, a, b, theta};
  g.inner = {cx, cy, a - wall, b - wall, theta};
  g.skin_in = {cx, cy, a + gap, b + gap, theta};
  g.skin_out = {cx, cy, a + gap + skin, b + gap + skin, theta};
  g.skin_start = uniform(rng, 0, 2 * std::numbers::pi);
  g.skin_span = uniform(rng, 0.5, 1.0) * std::numbers::pi;

  const Ellipse& in = g.inner;
  const double psi = uniform(rng, 0, 2 * std::numbers::pi);
  auto [lx, ly] = inside_point(in, uniform(rng, 0.15, 0.3), psi);
  const double la = in.a * uniform(rng, 0.38, 0.5);
  g.liver = {lx, ly, la, la * uniform(rng, 0.65, 0.9), uniform(rng, 0, std::numbers::pi)};

  auto [sx, sy] = inside_point(in, uniform(rng, 0.4, 0.55), psi + std::numbers::pi + uniform(rng, -0.5, 0.5));
  const double sa = in.a * uniform(rng, 0.2, 0.27);
  g.stomach = {sx, sy, sa, sa * uniform(rng, 0.6, 0.9), uniform(rng, 0, std::numbers::pi)};

  const double post = psi + std::numbers::pi / 2 + uniform(rng, -0.4, 0.4);
  auto [px, py] = inside_point(in, uniform(rng, 0.68, 0.76), post);
  const double r = m * uniform(rng, 0.035, 0.045);
  for (int k = 0; k < 3; ++k) {
    const double ang = post + std::numbers::pi / 2 + k * 2 * std::numbers::pi / 3;
    g.spine[static_cast<std::size_t>(k)] = {px + 1.3 * r * std::cos(ang), py + 1.3 * r * std::sin(ang), r, r, 0};
  }

  auto [vx, vy] = inside_point(in, uniform(rng, 0.0, 0.3), uniform(rng, 0, 2 * std::numbers::pi));
  const double va = in.a * uniform(rng, 0.2, 0.28);
  g.vein = {vx, vy, va, std::max(1.6, va * uniform(rng, 0.25, 0.35)), uniform(rng, 0, std::numbers::pi)};
  return g;
}

bool in_skin_arc(const Geometry& g, double x, double y) {
  if (g.skin_in.q(x, y) <= 1.0 || g.skin_out.q(x, y) > 1.0) return false;
  auto [u, v] = g.outer.local(x, y);
  double ang = std::atan2(v / g.outer.b, u / g.outer.a) - g.skin_start;
  ang = std::fmod(ang + 4 * std::numbers::pi, 2 * std::numbers::pi);
  return ang <= g.skin_span;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= s;
  return k;
}

void blur(std::vector<double>& img, std::int64_t h, std::int64_t w, double sigma) {
  if (sigma <= 0) return;
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::int64_t>(k.size() / 2);
  std::vector<double> tmp(img.size());
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0;
      for (std::int64_t i = -r; i <= r; ++i) {
        s += k[static_cast<std::size_t>(i + r)] * img[static_cast<std::size_t>(y * w + std::clamp(x + i, 0L, w - 1))];
      }
      tmp[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0;
      for (std::int64_t i = -r; i <= r; ++i) {
        s += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0L, h - 1) * w + x)];
      }
      img[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
}

}  // namespace

Sample generate_phantom(std::uint64_t seed, const PhantomSpec& spec) {
  spec.validate();
  Rng rng(seed);
  std::array<bool, 7> present{};
  for (std::size_t k = 0; k < present.size(); ++k) present[k] = uniform01(rng) < spec.presence[k];
  present[kBackground] = true;
  if (present[kSpine] || present[kLiver] || present[kStomach] || present[kUmbilicalVein] || present[kSkinLine]) {
    present[kAbdominalWall] = true;
  }

  const std::int64_t h = spec.height, w = spec.width;
  Mask mask;
  Geometry g{};
  bool ok = false;
  for (int attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
    g = draw_geometry(spec, rng);
    const Ellipse& far = g.skin_out;
    if (far.cx - far.extent_x() < 1 || far.cx + far.extent_x() > static_cast<double>(w - 2) ||
        far.cy - far.extent_y() < 1 || far.cy + far.extent_y() > static_cast<double>(h - 2)) {
      continue;
    }
    mask = Mask(h, w, kBackground);
    std::array<std::int64_t, 7> area{};
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        std::uint8_t label = kBackground;
        if (present[kAbdominalWall] && g.outer.q(fx, fy) <= 1.0) {
          label = kAbdominalWall;
          if (g.inner.q(fx, fy) <= 1.0) {
            label = kBackground;
            if (present[kLiver] && g.liver.q(fx, fy) <= 1.0) label = kLiver;
            if (present[kStomach] && g.stomach.q(fx, fy) <= 1.0) label = kStomach;
            if (present[kSpine]) {
              for (const auto& e : g.spine) {
                if (e.q(fx, fy) <= 1.0) label = kSpine;
              }
            }
            if (present[kUmbilicalVein] && g.vein.q(fx, fy) <= 1.0) label = kUmbilicalVein;
          }
        } else if (present[kSkinLine] && in_skin_arc(g, fx, fy)) {
          label = kSkinLine;
        }
        mask.at(y, x) = label;
        ++area[label];
      }
    }
    ok = true;
    for (std::size_t k = 1; k < present.size(); ++k) {
      if (present[k] && area[k] < 4) ok = false;
    }
  }
  if (!ok) {
    throw DataError("phantom generation failed after " + std::to_string(spec.max_retries) +
                    " attempts (geometry does not fit the canvas)");
  }

  // Rendering: a per-image gray level per class, the abdomen interior as a
  // soft tissue band, then speckle and blur.
  std::array<double, 7> level{};
  for (std::size_t k = 0; k < level.size(); ++k) {
    level[k] = uniform(rng, spec.intensity[k][0], spec.intensity[k][1]);
  }
  const double tissue = uniform(rng, 80, 100);
  std::vector<double> gray(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto label = mask.at(y, x);
      double v = level[label];
      if (label == kBackground && present[kAbdominalWall] &&
          g.inner.q(static_cast<double>(x), static_cast<double>(y)) <= 1.0) {
        v = tissue;
      }
      gray[static_cast<std::size_t>(y * w + x)] = v;
    }
  }
  const double sd = std::sqrt(spec.speckle_variance);
  for (double& v : gray) v *= std::max(0.0, 1.0 + sd * normal01(rng));
  const double m = static_cast<double>(std::min(h, w));
  blur(gray, h, w, spec.blur_sigma * m / 64.0);

  Sample s;
  s.id = "phantom";
  s.mask = std::move(mask);
  s.image = Image(h, w);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::clamp(std::lround(gray[i]), 0L, 255L));
    for (int c = 0; c < 3; ++c) s.image.pixels[3 * i + static_cast<std::size_t>(c)] = v;
  }
  const double frac = (g.outer.a / m - spec.abdomen_radius_min) /
                      std::max(1e-12, spec.abdomen_radius_max - spec.abdomen_radius_min);
  s.meta = {{"seed", seed}, {"gestational_week", std::round((14.0 + 14.0 * frac) * 10) / 10}};
  return s;
}

void synthesize_dataset(const fs::path& root, std::int64_t count, std::uint64_t seed, const PhantomSpec& spec) {
  if (count < 0) throw ConfigError("synth.count: must be >= 0");
  spec.validate();
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  nlohmann::json samples = nlohmann::json::array();
  for (std::int64_t i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
    Sample smp = generate_phantom(s, spec);
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%05lld", static_cast<long long>(i));
    smp.id = id;
    write_sample(root, smp);
    samples.push_back({{"id", smp.id}, {"seed", s}, {"gestational_week", smp.meta["gestational_week"]}});
  }
  std::ofstream(root / "classmap.json") << ClassMap{}.to_json().dump(2) << "\n";
  nlohmann::json manifest = {{"generator", "phantom"},
                             {"seed", seed},
                             {"count", count},
                             {"spec", spec.to_json()},
                             {"spec_hash", spec.hash()},
                             {"samples", samples}};
  std::ofstream(root / "manifest.json") << manifest.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

std::array<std::int64_t, 3> split_sizes(std::int64_t n, const SplitRatios& r) {
  const std::array<double, 3> ratios{r.train, r.val, r.test};
  double total = 0;
  for (double v : ratios) {
    if (!(v >= 0)) throw ConfigError("split ratios must be nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  int needed = 0;
  for (double v : ratios) needed += v > 0 ? 1 : 0;
  if (n < needed) {
    throw ConfigError("split: " + std::to_string(n) + " samples cannot fill " + std::to_string(needed) +
                      " nonempty partitions");
  }
  std::array<std::int64_t, 3> sizes{0, 0, 0};
  for (int k = 1; k < 3; ++k) {
    sizes[static_cast<std::size_t>(k)] = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * ratios[static_cast<std::size_t>(k)] + 1e-9));
    if (ratios[static_cast<std::size_t>(k)] > 0 && sizes[static_cast<std::size_t>(k)] == 0) sizes[static_cast<std::size_t>(k)] = 1;
  }
  sizes[0] = n - sizes[1] - sizes[2];
  if (ratios[0] > 0 && sizes[0] == 0) {
    // Take one back from the larger of val/test.
    auto& donor = sizes[1] >= sizes[2] ? sizes[1] : sizes[2];
    --donor;
    sizes[0] = 1;
  }
  return sizes;
}

DatasetSplit split_dataset(std::vector<Sample> samples, const SplitRatios& ratios, std::uint64_t seed) {
  const auto n = static_cast<std::int64_t>(samples.size());
  const auto sizes = split_sizes(n, ratios);
  Rng rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(uniform01(rng) * static_cast<double>(i + 1));
    std::swap(samples[static_cast<std::size_t>(i)], samples[static_cast<std::size_t>(j)]);
  }
  DatasetSplit out;
  auto it = samples.begin();
  out.train.assign(std::make_move_iterator(it), std::make_move_iterator(it + sizes[0]));
  it += sizes[0];
  out.val.assign(std::make_move_iterator(it), std::make_move_iterator(it + sizes[1]));
  it += sizes[1];
  out.test.assign(std::make_move_iterator(it), std::make_move_iterator(samples.end()));
  return out;
}

Tensor image_to_tensor(const Image& img, DType dtype) {
  Tensor t = Tensor::empty({1, 3, img.height, img.width}, dtype);
  const std::int64_t plane = img.height * img.width;
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto p = t.mutable_data<T>();
    for (std::int64_t i = 0; i < plane; ++i) {
      for (int c = 0; c < 3; ++c) {
        p[static_cast<std::size_t>(c * plane + i)] =
            static_cast<T>(img.pixels[static_cast<std::size_t>(i * 3 + c)] / 127.5 - 1.0);
      }
    }
  });
  return t;
}

std::pair<Tensor, LabelBatch> make_batch(const std::vector<const Sample*>& samples, DType dtype) {
  if (samples.empty()) throw ContractViolation("make_batch: empty batch");
  const std::int64_t h = samples.front()->image.height, w = samples.front()->image.width;
  const auto nb = static_cast<std::int64_t>(samples.size());
  Tensor x = Tensor::empty({nb, 3, h, w}, dtype);
  LabelBatch y(nb, h, w);
  const std::int64_t plane = h * w;
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto p = x.mutable_data<T>();
    for (std::int64_t b = 0; b < nb; ++b) {
      const Sample& s = *samples[static_cast<std::size_t>(b)];
      if (s.image.height != h || s.image.width != w || s.mask.height != h || s.mask.width != w) {
        throw DataError("make_batch: sample '" + s.id + "' has a different size from the rest of the batch");
      }
      for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
          p[static_cast<std::size_t>((b * 3 + c) * plane + i)] =
              static_cast<T>(s.image.pixels[static_cast<std::size_t>(i * 3 + c)] / 127.5 - 1.0);
        }
        y.values[static_cast<std::size_t>(b * plane + i)] = s.mask.labels[static_cast<std::size_t>(i)];
      }
    }
  });
  return {x, y};
}

}  // namespace msu

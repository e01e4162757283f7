// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msu/loss.hpp"
#include "msu/nn.hpp"

namespace msu {

/// 8-bit RGB raster, interleaved row-major.
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::int64_t h, std::int64_t w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h * w * 3), fill) {}
  std::uint8_t& at(std::int64_t y, std::int64_t x, int c) {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  std::uint8_t at(std::int64_t y, std::int64_t x, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  bool operator==(const Image&) const = default;
};

/// 8-bit class-index raster.
struct Mask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> labels;

  Mask() = default;
  Mask(std::int64_t h, std::int64_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h * w), fill) {}
  std::uint8_t& at(std::int64_t y, std::int64_t x) { return labels[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t at(std::int64_t y, std::int64_t x) const { return labels[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const Mask&) const = default;
};

struct Sample {
  std::string id;
  Image image;
  Mask mask;
  nlohmann::json meta = nlohmann::json::object();
};

/// Class indices of the six annotated structures plus background.
enum ClassIndex : std::uint8_t {
  kBackground = 0,
  kSpine = 1,
  kSkinLine = 2,
  kAbdominalWall = 3,
  kLiver = 4,
  kStomach = 5,
  kUmbilicalVein = 6,
};

struct ClassMap {
  std::vector<std::string> names{"background", "SP", "SL", "AW", "LV", "ST", "UV&PV"};

  std::int64_t size() const { return static_cast<std::int64_t>(names.size()); }
  nlohmann::json to_json() const;
  /// Requires keys "0".."K-1" with distinct names.
  static ClassMap from_json(const nlohmann::json& j);
};

/// Overlay colors by class index; background is unused.
const std::array<std::array<std::uint8_t, 3>, 7>& class_palette();

// PNG I/O. Errors are DataError naming the path.
Image read_image_png(const std::filesystem::path& path);
void write_image_png(const std::filesystem::path& path, const Image& img);
/// Palette-indexed (or 8-bit grayscale) PNG; the stored indices are returned
/// without color expansion.
Mask read_mask_png(const std::filesystem::path& path);
/// Writes an 8-bit palette-indexed PNG using class_palette().
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

/// Throws DataError naming `where` and the offending value.
void validate_mask(const Mask& mask, std::int64_t num_classes, const std::string& where);

/// Pairs root/images/*.png with root/masks/*.png by basename, sorted.
std::vector<Sample> load_dataset(const std::filesystem::path& root, std::int64_t num_classes = 7);
void write_sample(const std::filesystem::path& root, const Sample& s);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  double hflip_prob = 0.5;
  double scale_min = 0.75;
  double scale_max = 1.25;
  std::uint8_t pad_value = 128;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

/// One concrete draw of the augmentation pipeline.
struct AugmentParams {
  bool flip = false;
  double scale = 1.0;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

/// Uniform double in [0,1) from the top 53 bits; identical on every platform.
double uniform01(Rng& rng);
double normal01(Rng& rng);

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng);

/// Flip, then scale about the canvas center. Image resampled bilinearly with
/// pad_value outside the source; mask by nearest neighbour with 0 outside.
Image apply_geometry(const Image& img, const AugmentParams& p, std::uint8_t pad_value);
Mask apply_geometry(const Mask& mask, const AugmentParams& p);
Image apply_color(const Image& img, const AugmentParams& p);

Sample augment_with(const Sample& s, const AugmentParams& p, const AugmentConfig& cfg);
Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Phantom generator

struct PhantomSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  /// Per-class presence probabilities, indexed like ClassMap.
  std::array<double, 7> presence{1.0, 1.0, 719.0 / 888, 1.0, 782.0 / 888, 696.0 / 888, 784.0 / 888};
  /// Abdomen semi-major axis as a fraction of min(height, width).
  double abdomen_radius_min = 0.30;
  double abdomen_radius_max = 0.38;
  double abdomen_aspect_min = 0.80;  // minor/major
  double wall_thickness = 0.05;      // fraction of min(height, width)
  double skin_gap = 0.03;
  double skin_thickness = 0.05;
  double speckle_variance = 0.04;
  double blur_sigma = 0.7;  // pixels at 64x64, scaled with canvas
  /// Gray-level bands [lo, hi] per class index.
  std::array<std::array<int, 2>, 7> intensity{{{15, 30},
                                               {225, 250},
                                               {150, 175},
                                               {190, 215},
                                               {115, 135},
                                               {20, 35},
                                               {45, 60}}};
  int max_retries = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static PhantomSpec from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON dump, hex.
  std::string hash() const;
};

Sample generate_phantom(std::uint64_t seed, const PhantomSpec& spec);

/// Seed of the i-th sample of a dataset generated from `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Writes `count` phantoms plus classmap.json and manifest.json into root.
void synthesize_dataset(const std::filesystem::path& root, std::int64_t count, std::uint64_t seed,
                        const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Splitting and batching

struct SplitRatios {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

/// Seeded shuffle then contiguous cut; val and test sizes are
/// floor(n·ratio), train takes the remainder. A partition with positive ratio
/// that would be empty is given one sample.
DatasetSplit split_dataset(std::vector<Sample> samples, const SplitRatios& ratios, std::uint64_t seed);

/// Sizes chosen by split_dataset for n samples.
std::array<std::int64_t, 3> split_sizes(std::int64_t n, const SplitRatios& ratios);

/// Images scaled to [-1, 1] as [B,3,H,W] and masks as labels.
std::pair<Tensor, LabelBatch> make_batch(const std::vector<const Sample*>& samples, DType dtype);
Tensor image_to_tensor(const Image& img, DType dtype);

}  // namespace msu

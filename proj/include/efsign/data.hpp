#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "efsign/image_io.hpp"
#include "efsign/rng.hpp"
#include "efsign/tensor.hpp"

namespace efsign {

struct DatasetItem {
  std::filesystem::path path;
  int label = 0;
};

// Layout on disk: root/<CLASS_NAME>/<file>.png|.jpg|.jpeg. Class indices
// follow the lexicographic order of the directory names.
struct Dataset {
  std::vector<DatasetItem> items;
  std::vector<std::string> class_names;
  std::vector<Image> images;  // decoded pixels, aligned with items
  std::size_t width = 0;      // size of the first decoded image
  std::size_t height = 0;

  std::size_t size() const { return items.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::vector<int> labels() const;
};

struct LoadReport {
  std::size_t skipped_non_image = 0;
  std::vector<std::string> warnings;
  struct ItemError {
    std::filesystem::path path;
    std::string message;
  };
  std::vector<ItemError> item_errors;
};

Dataset load_dataset(const std::filesystem::path& root, LoadReport* report = nullptr);

inline constexpr float kImageNetMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kImageNetStd[3] = {0.229f, 0.224f, 0.225f};

struct AugmentConfig {
  double flip_prob = 0.5;
  double max_rotation_deg = 15.0;
  double brightness_jitter = 0.2;
  double contrast_jitter = 0.2;
  double saturation_jitter = 0.1;
  double max_translate_frac = 0.1;
  std::size_t target_size = 224;

  void validate() const;
};

// Eval: bilinear resize + ImageNet normalization. Train additionally applies
// flip -> rotate -> translate -> color jitter before the resize, drawing
// every random quantity from `rng`. Output is 3 x S x S.
Tensor preprocess(const Image& image, Mode mode, const AugmentConfig& cfg, Rng& rng);

// Stacks preprocessed images into an N x 3 x S x S batch.
Tensor stack_images(std::span<const Tensor> images);

struct FoldPlan {
  std::size_t k = 5;
  std::uint64_t seed = 42;
  std::vector<std::vector<std::size_t>> folds;  // each sorted ascending

  const std::vector<std::size_t>& test_indices(std::size_t fold) const { return folds.at(fold); }
  std::vector<std::size_t> train_indices(std::size_t fold) const;
  std::size_t total() const;
};

// Per class (ascending label order) the member indices are shuffled and
// dealt into folds round-robin; the dealer position carries over between
// classes so overall fold sizes also differ by at most one.
FoldPlan stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed);

struct SynthConfig {
  std::size_t num_classes = 26;
  std::size_t per_class = 40;
  std::size_t image_size = 64;
  std::uint64_t seed = 42;
};

std::string synth_class_name(std::size_t cls, std::size_t num_classes);

// Procedural glyph for class `cls`: a class-specific stroke pattern in a
// class-specific color, randomly rotated (<= 10 deg) and shifted (<= 8%)
// over a noisy background.
Image render_glyph(std::size_t cls, std::size_t image_size, Rng& rng);

// Writes the glyph set as PNGs in the load_dataset layout and loads it back.
Dataset synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace efsign

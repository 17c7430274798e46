#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "json.hpp"

#include "efsign/classical.hpp"
#include "efsign/data.hpp"
#include "efsign/model.hpp"
#include "efsign/report.hpp"
#include "efsign/train.hpp"

namespace efsign {

inline constexpr const char* kMethods[] = {"efficientsign", "resnet18", "mobilenetv2", "svm", "knn", "logreg"};

bool is_deep_method(const std::string& method);
void validate_method(const std::string& method);

struct CvConfig {
  std::string method = "efficientsign";
  std::string preset = "b0";
  std::filesystem::path data;          // dataset root; empty selects `synth`
  SynthConfig synth;
  TrainConfig train;
  AugmentConfig augment;
  std::size_t folds = 5;
  std::uint64_t seed = 42;             // fold plan seed
  std::filesystem::path out;           // artifacts directory; empty writes nothing
  bool parallel_folds = false;
  bool write_checkpoints = true;
  // Classical methods: feature-extractor checkpoint; empty builds a fresh
  // efficientsign model of `preset` from `train.seed`.
  std::filesystem::path extractor;
  // Classical methods: use resized raw pixels instead of deep features.
  bool pixel_features = false;
  std::size_t pixel_size = 32;
};

nlohmann::json cv_config_json(const CvConfig& cfg);

// Loads `cfg.data`, or generates the synthetic set under `cfg.out` (or a
// temporary directory) when no data path is given.
Dataset load_or_synthesize(const CvConfig& cfg);

ModelSpec spec_for_method(const std::string& method, const std::string& preset, std::size_t num_classes);

// Pooled features for every item, N x F, eval mode.
Matrix extract_feature_matrix(const ModelState& extractor, const Dataset& data, std::size_t batch = 32);

// Eval-preprocessed pixels resized to size x size, N x 3*size*size.
Matrix pixel_feature_matrix(const Dataset& data, std::size_t size);

MetricsReport classical_pipeline(const Matrix& features, std::span<const int> labels,
                                 const std::vector<std::string>& class_names, const FoldPlan& plan,
                                 ClassicalMethod method, const std::filesystem::path& out = {},
                                 std::ostream* log = nullptr);

MetricsReport classical_pipeline(const ModelState& extractor, const FoldPlan& plan, const Dataset& data,
                                 ClassicalMethod method);

// Full protocol on a loaded dataset. Writes report.json, folds.csv,
// curves.csv and per-fold checkpoints into cfg.out when set, and prints a
// table row to `log`.
MetricsReport run_cv(const CvConfig& cfg, const Dataset& data, std::ostream* log = nullptr);
MetricsReport run_cv(const CvConfig& cfg, std::ostream* log = nullptr);

}  // namespace efsign

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "efsign/classical.hpp"
#include "efsign/model.hpp"

namespace efsign {

// Container layout (all integers little-endian):
//   "EFSN" | u32 version | u64 header bytes | JSON header | payload | u32 CRC-32(payload)
// The header's "arrays" list gives name, dtype ("f32" | "f64") and shape of
// each payload array, in payload order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;

  std::size_t numel() const { return shape_numel(shape); }
  static NamedArray from(std::string name, const Tensor& t);
  static NamedArray from(std::string name, Shape shape, std::vector<double> values);
};

struct Container {
  nlohmann::json header = nlohmann::json::object();  // "arrays" is filled on write
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

// Saves parameters and batch-norm running statistics with the model spec.
// `extra` lands under "training" in the header.
void save_checkpoint(const ModelState& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());

// Throws IncompatibleError when `expected_kind` is given and differs, or
// when the stored arrays do not match the manifest implied by the model spec.
ModelState load_checkpoint(const std::filesystem::path& path, std::optional<ModelKind> expected_kind = std::nullopt);

void save_svm(const SvmModel& model, const std::filesystem::path& path);
SvmModel load_svm(const std::filesystem::path& path);
void save_knn(const KnnModel& model, const std::filesystem::path& path);
KnnModel load_knn(const std::filesystem::path& path);
void save_logreg(const LogRegModel& model, const std::filesystem::path& path);
LogRegModel load_logreg(const std::filesystem::path& path);

struct FeatureSet {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::string> class_names;
};

void save_features(const FeatureSet& set, const std::filesystem::path& path);
FeatureSet load_features(const std::filesystem::path& path);

}  // namespace efsign

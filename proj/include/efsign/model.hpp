#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "efsign/autograd.hpp"
#include "efsign/ops.hpp"
#include "efsign/rng.hpp"
#include "efsign/tensor.hpp"

namespace efsign {

enum class ModelKind { efficientsign, resnet18, mobilenetv2 };

std::string model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

// One stage of inverted-residual blocks. Only the first block strides.
struct MBConvStage {
  std::size_t expansion = 1;
  std::size_t out_channels = 16;
  std::size_t repeats = 1;
  std::size_t stride = 1;
  std::size_t kernel = 3;
  double internal_se_ratio = 0.25;

  friend bool operator==(const MBConvStage&, const MBConvStage&) = default;
};

struct BackboneConfig {
  std::string preset;
  std::size_t stem_channels = 32;
  std::vector<MBConvStage> stages;
  std::size_t head_channels = 1280;
  std::size_t input_size = 224;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

// "b0" (EfficientNet-B0 stage plan) or "tiny" (desk-scale tests).
BackboneConfig backbone_preset(const std::string& name);
std::vector<std::string> known_presets();

struct ModelSpec {
  ModelKind kind = ModelKind::efficientsign;
  BackboneConfig backbone = backbone_preset("b0");
  std::size_t se_reduction = 16;
  std::size_t spatial_kernel = 7;
  double dropout_p = 0.3;
  std::size_t num_classes = 26;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  void validate() const;
  // Width of the pooled feature vector fed to the classifier head.
  std::size_t feature_channels() const;
  std::size_t input_size() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

ModelSpec efficientsign_spec(const std::string& preset = "b0", std::size_t num_classes = 26);
ModelSpec baseline_spec(ModelKind kind, std::size_t num_classes = 26);

template <typename T>
struct NamedBatchNorm {
  std::string name;
  ops::BatchNormStats<T> stats;
};

struct ManifestEntry {
  std::string name;
  Shape shape;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

template <typename T>
struct BasicModelState {
  ModelSpec spec;
  std::vector<BasicParameter<T>> parameters;
  std::vector<NamedBatchNorm<T>> batch_norms;

  std::size_t param_index(const std::string& name) const;
  std::size_t batch_norm_index(const std::string& name) const;
  const BasicParameter<T>& param(const std::string& name) const { return parameters[param_index(name)]; }
  BasicParameter<T>& param(const std::string& name) { return parameters[param_index(name)]; }

  std::vector<ManifestEntry> manifest() const;
  void zero_grad();
  void reindex();

  template <typename U>
  BasicModelState<U> cast() const {
    BasicModelState<U> out;
    out.spec = spec;
    for (const auto& p : parameters) out.parameters.emplace_back(p.name, p.value.template cast<U>());
    for (const auto& bn : batch_norms) {
      NamedBatchNorm<U> b;
      b.name = bn.name;
      b.stats.running_mean.assign(bn.stats.running_mean.begin(), bn.stats.running_mean.end());
      b.stats.running_var.assign(bn.stats.running_var.begin(), bn.stats.running_var.end());
      b.stats.momentum = static_cast<U>(bn.stats.momentum);
      b.stats.epsilon = static_cast<U>(bn.stats.epsilon);
      out.batch_norms.push_back(std::move(b));
    }
    out.reindex();
    return out;
  }

 private:
  std::unordered_map<std::string, std::size_t> param_lookup_;
  std::unordered_map<std::string, std::size_t> bn_lookup_;
};

using ModelState = BasicModelState<float>;

// Deterministic in (spec, seed); names and shapes depend on spec only.
ModelState build_model(const ModelSpec& spec, std::uint64_t seed);

struct ForwardOptions {
  // Record the tape and expose parameter gradients.
  bool track_grad = false;
  // false bypasses the SE and spatial attention blocks (gates forced to 1).
  bool attention = true;
};

template <typename T>
struct ForwardTrace {
  Var<T> feature_map;  // backbone output, N x F x h x w
  Var<T> attended;     // after SE + spatial attention (== feature_map for baselines)
  Var<T> spatial_map;  // N x 1 x h x w, efficientsign only
  Var<T> features;     // pooled, N x F
  Var<T> logits;       // N x num_classes
  std::vector<Var<T>> params;  // leaves aligned with model.parameters
};

// Train mode updates batch-norm running statistics in the model.
template <typename T>
ForwardTrace<T> forward_trace(BasicModelState<T>& model, const BasicTensor<T>& images, Mode mode, Rng& rng,
                              ForwardOptions options = {});

// Eval-mode graph over an immutable model.
template <typename T>
ForwardTrace<T> forward_trace(const BasicModelState<T>& model, const BasicTensor<T>& images,
                              ForwardOptions options = {});

Tensor forward(ModelState& model, const Tensor& images, Mode mode, Rng& rng);
Tensor forward(const ModelState& model, const Tensor& images);

// Post-attention, post-pooling features, before dropout and the head.
Tensor extract_features(const ModelState& model, const Tensor& images);

// Adds the gradients recorded on the trace's parameter leaves into
// each parameter's accumulator.
template <typename T>
void accumulate_gradients(BasicModelState<T>& model, const ForwardTrace<T>& trace);

struct ParamCount {
  std::size_t total = 0;
  std::map<std::string, std::size_t> by_component;  // backbone / se / spatial / head
};

template <typename T>
ParamCount count_params(const BasicModelState<T>& model);

extern template struct BasicModelState<float>;
extern template struct BasicModelState<double>;

}  // namespace efsign

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "efsign/data.hpp"
#include "efsign/model.hpp"
#include "efsign/tensor.hpp"

namespace efsign {

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_parameters(std::span<const Parameter> params);
};

// Bias-corrected Adam on each parameter's grad_accum. Throws TrainingError
// naming the first parameter holding a non-finite gradient; nothing is
// updated in that case.
void adam_step(std::span<Parameter> params, AdamState& state, double lr);

struct TrainConfig {
  std::size_t epochs = 12;
  double base_lr = 1e-4;
  double lr_min = 0.0;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  bool augment = true;

  void validate() const;
};

// lr_min + (base_lr - lr_min)(1 + cos(pi t / (T - 1))) / 2; constant base_lr when T < 2.
double cosine_lr(std::size_t epoch, const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

// Argmax per row, ties to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);

EvalResult score_predictions(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes);

// Eval-mode preprocessing (resize + normalize) at the model's input size.
std::vector<Tensor> prepare_eval_inputs(const ModelSpec& spec, const Dataset& data,
                                        std::span<const std::size_t> indices);

EvalResult evaluate(const ModelState& model, std::span<const Tensor> inputs, std::span<const int> labels,
                    std::size_t batch_size = 64);
EvalResult evaluate(const ModelState& model, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t batch_size = 64);

struct FoldResult {
  std::size_t fold = 0;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;  // 1-based
  std::vector<double> train_loss;    // mean minibatch loss per epoch
  std::vector<double> val_accuracy;  // per epoch
  std::vector<double> learning_rate;  // per epoch
  ModelState best_model;
  EvalResult best_eval;
  std::vector<std::string> warnings;
};

struct TrainHooks {
  // Replaces the validation evaluation; called once per epoch (0-based).
  std::function<double(const ModelState&, std::size_t epoch)> evaluator;
  // Per-epoch progress lines; null silences them.
  std::ostream* log = nullptr;
};

FoldResult train_fold(const ModelSpec& spec, const Dataset& data, std::span<const std::size_t> train_idx,
                      std::span<const std::size_t> val_idx, const TrainConfig& cfg, const AugmentConfig& augment,
                      std::size_t fold = 0, const TrainHooks& hooks = {});

}  // namespace efsign

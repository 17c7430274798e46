#include "efsign/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>

#include "efsign/autograd.hpp"
#include "efsign/errors.hpp"
#include "efsign/ops.hpp"

namespace efsign {

AdamState AdamState::for_parameters(std::span<const Parameter> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.value.shape());
    state.v.emplace_back(p.value.shape());
  }
  return state;
}

void adam_step(std::span<Parameter> params, AdamState& state, double lr) {
  if (!(lr >= 0.0)) throw ConfigError("adam_step: learning rate must be non-negative");
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ConfigError("adam_step: optimizer state holds " + std::to_string(state.m.size()) + " slots for " +
                      std::to_string(params.size()) + " parameters");
  }
  for (const auto& p : params) {
    for (float g : p.grad_accum.data()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++state.t;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.data();
    auto g = params[i].grad_accum.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    if (m.size() != w.size()) throw ConfigError("adam_step: state shape mismatch for '" + params[i].name + "'");
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1.0 - b1) * gk;
      const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double mhat = mk / c1, vhat = vk / c2;
      w[k] = static_cast<float>(w[k] - lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(base_lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(lr_min >= 0.0 && lr_min <= base_lr)) throw ConfigError("lr_min must lie in [0, base_lr]");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
}

double cosine_lr(std::size_t epoch, const TrainConfig& cfg) {
  if (cfg.epochs < 2) return cfg.base_lr;
  if (epoch >= cfg.epochs) {
    throw ConfigError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  return cfg.lr_min + 0.5 * (cfg.base_lr - cfg.lr_min) * (1.0 + std::cos(phase));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw InputError("argmax_rows: logits must be N x K, got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits.at(n, k) > logits.at(n, best)) best = k;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

EvalResult score_predictions(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes) {
  if (predictions.size() != labels.size()) throw InputError("score_predictions: prediction/label count mismatch");
  if (labels.empty()) throw InputError("score_predictions: nothing to score");
  EvalResult r;
  r.total = labels.size();
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  r.predictions.assign(predictions.begin(), predictions.end());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= num_classes || static_cast<std::size_t>(p) >= num_classes) {
      throw InputError("score_predictions: label out of range at item " + std::to_string(i));
    }
    ++r.confusion[t][p];
    if (t == p) ++r.correct;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

std::vector<Tensor> prepare_eval_inputs(const ModelSpec& spec, const Dataset& data,
                                        std::span<const std::size_t> indices) {
  AugmentConfig aug;
  aug.target_size = spec.input_size();
  Rng unused(0);
  std::vector<Tensor> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(preprocess(data.images.at(idx), Mode::eval, aug, unused));
  return out;
}

EvalResult evaluate(const ModelState& model, std::span<const Tensor> inputs, std::span<const int> labels,
                    std::size_t batch_size) {
  if (inputs.empty()) throw InputError("evaluate: no items");
  if (inputs.size() != labels.size()) throw InputError("evaluate: input/label count mismatch");
  batch_size = std::max<std::size_t>(batch_size, 1);
  std::vector<int> predictions;
  predictions.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t stop = std::min(start + batch_size, inputs.size());
    const Tensor logits = forward(model, stack_images(inputs.subspan(start, stop - start)));
    const auto pred = argmax_rows(logits);
    predictions.insert(predictions.end(), pred.begin(), pred.end());
  }
  return score_predictions(predictions, labels, model.spec.num_classes);
}

EvalResult evaluate(const ModelState& model, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t batch_size) {
  const auto inputs = prepare_eval_inputs(model.spec, data, indices);
  std::vector<int> labels;
  for (std::size_t idx : indices) labels.push_back(data.items.at(idx).label);
  return evaluate(model, inputs, labels, batch_size);
}

FoldResult train_fold(const ModelSpec& spec, const Dataset& data, std::span<const std::size_t> train_idx,
                      std::span<const std::size_t> val_idx, const TrainConfig& cfg, const AugmentConfig& augment,
                      std::size_t fold, const TrainHooks& hooks) {
  cfg.validate();
  augment.validate();
  if (train_idx.empty() || val_idx.empty()) throw InputError("train_fold: empty train or validation split");
  if (data.num_classes() > spec.num_classes) {
    throw IncompatibleError("train_fold: dataset has " + std::to_string(data.num_classes()) + " classes, model head has " +
                            std::to_string(spec.num_classes));
  }

  FoldResult result;
  result.fold = fold;
  std::size_t batch = cfg.batch_size;
  if (batch > train_idx.size()) {
    result.warnings.push_back("batch size " + std::to_string(batch) + " exceeds " + std::to_string(train_idx.size()) +
                              " training items; using one full batch");
    if (hooks.log) *hooks.log << "warning: " << result.warnings.back() << '\n';
    batch = train_idx.size();
  }

  ModelState model = build_model(spec, cfg.seed);
  AdamState adam = AdamState::for_parameters(model.parameters);
  AugmentConfig aug = augment;
  aug.target_size = spec.input_size();

  std::vector<Tensor> val_inputs;
  std::vector<int> val_labels;
  if (!hooks.evaluator) {
    val_inputs = prepare_eval_inputs(spec, data, val_idx);
    for (std::size_t idx : val_idx) val_labels.push_back(data.items.at(idx).label);
  }
  std::vector<Tensor> fixed_train;
  if (!cfg.augment) fixed_train = prepare_eval_inputs(spec, data, train_idx);

  std::vector<std::size_t> order(train_idx.size());
  bool have_best = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = Rng::substream(cfg.seed, 0x5348554646ULL, epoch);
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(start + batch, order.size());
      std::vector<Tensor> inputs;
      std::vector<int> labels;
      for (std::size_t j = start; j < stop; ++j) {
        const std::size_t pos = order[j];
        const std::size_t item = train_idx[pos];
        if (cfg.augment) {
          Rng aug_rng = Rng::substream(cfg.seed, item, epoch + 1);
          inputs.push_back(preprocess(data.images.at(item), Mode::train, aug, aug_rng));
        } else {
          inputs.push_back(fixed_train[pos]);
        }
        labels.push_back(data.items.at(item).label);
      }
      Rng step_rng = Rng::substream(cfg.seed, 0x44524f50ULL + epoch, start);
      model.zero_grad();
      auto trace = forward_trace<float>(model, stack_images(inputs), Mode::train, step_rng, {.track_grad = true});
      auto loss = ops::softmax_cross_entropy(trace.logits, labels);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", step " +
                            std::to_string(steps + 1));
      }
      backward<float>(loss);
      accumulate_gradients(model, trace);
      adam_step(model.parameters, adam, lr);
      loss_sum += loss_value;
      ++steps;
    }
    const double mean_loss = loss_sum / static_cast<double>(steps);

    double val_acc;
    EvalResult eval;
    if (hooks.evaluator) {
      val_acc = hooks.evaluator(model, epoch);
    } else {
      eval = evaluate(model, val_inputs, val_labels);
      val_acc = eval.accuracy;
    }
    result.train_loss.push_back(mean_loss);
    result.val_accuracy.push_back(val_acc);
    result.learning_rate.push_back(lr);
    if (!have_best || val_acc > result.best_val_accuracy) {
      have_best = true;
      result.best_val_accuracy = val_acc;
      result.best_epoch = epoch + 1;
      result.best_model = model;
      result.best_eval = std::move(eval);
    }
    if (hooks.log) {
      *hooks.log << "fold " << fold + 1 << " epoch " << epoch + 1 << "/" << cfg.epochs << " lr " << lr
                 << " train_loss " << mean_loss << " val_acc " << val_acc << '\n';
    }
  }
  result.best_model.zero_grad();
  return result;
}

}  // namespace efsign

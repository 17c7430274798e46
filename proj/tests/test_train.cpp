#include <cmath>
#include <numbers>

#include "doctest.h"
#include "efsign/train.hpp"
#include "support/oracles.hpp"

using namespace efsign;

namespace {

Parameter scalar_param(const std::string& name, float v) { return Parameter(name, Tensor({1}, v)); }

const Dataset& glyphs8() {
  static const Dataset d = [] {
    SynthConfig cfg;
    cfg.num_classes = 8;
    cfg.per_class = 10;
    cfg.image_size = 32;
    cfg.seed = 3;
    return synth_generate(cfg, oracle::temp_dir("train-glyphs"));
  }();
  return d;
}

AugmentConfig small_augment() {
  AugmentConfig a;
  a.target_size = 32;
  return a;
}

}  // namespace

TEST_CASE("adam first step and zero gradient") {
  std::vector<Parameter> p{scalar_param("w", 0.5f)};
  auto state = AdamState::for_parameters(p);
  p[0].grad_accum[0] = 0.0f;
  adam_step(p, state, 1e-4);
  CHECK(p[0].value[0] == 0.5f);
  CHECK(state.t == 1);

  std::vector<Parameter> q{scalar_param("w", 0.0f)};
  auto fresh = AdamState::for_parameters(q);
  q[0].grad_accum[0] = 1.0f;
  adam_step(q, fresh, 1e-4);
  CHECK(q[0].value[0] == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-6));

  std::vector<Parameter> r{scalar_param("w", 0.0f)};
  auto s3 = AdamState::for_parameters(r);
  r[0].grad_accum[0] = -7.0f;
  adam_step(r, s3, 1e-3);
  CHECK(r[0].value[0] > 0.0f);
}

TEST_CASE("adam converges on a quadratic") {
  std::vector<Parameter> p{scalar_param("w", 0.0f)};
  auto state = AdamState::for_parameters(p);
  for (int i = 0; i < 200; ++i) {
    p[0].grad_accum[0] = 2.0f * (p[0].value[0] - 3.0f);
    adam_step(p, state, 0.1);
  }
  CHECK(std::abs(p[0].value[0] - 3.0f) < 0.1f);
  // Independent scalar simulation of the same recursion.
  double w = 0, m = 0, v = 0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2 * (w - 3);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(p[0].value[0] == doctest::Approx(w).epsilon(1e-4));
}

TEST_CASE("adam rejects non-finite gradients without updating") {
  std::vector<Parameter> p{scalar_param("good", 1.0f), scalar_param("head.bias", 2.0f)};
  auto state = AdamState::for_parameters(p);
  p[0].grad_accum[0] = 1.0f;
  p[1].grad_accum[0] = std::nanf("");
  try {
    adam_step(p, state, 1e-3);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("head.bias") != std::string::npos);
  }
  CHECK(p[0].value[0] == 1.0f);
  CHECK(state.t == 0);
  CHECK_THROWS_AS(adam_step(p, state, -1.0), ConfigError);
}

TEST_CASE("cosine schedule") {
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.base_lr = 1e-4;
  CHECK(cosine_lr(0, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(std::abs(cosine_lr(11, cfg)) < 1e-18);
  TrainConfig odd = cfg;
  odd.epochs = 13;
  CHECK(cosine_lr(6, odd) == doctest::Approx(5e-5).epsilon(1e-12));
  for (std::size_t t = 1; t < 12; ++t) CHECK(cosine_lr(t, cfg) <= cosine_lr(t - 1, cfg));
  for (std::size_t t = 0; t < 12; ++t)
    CHECK(cosine_lr(t, cfg) == doctest::Approx(0.5e-4 * (1 + std::cos(std::numbers::pi * double(t) / 11.0))));
  TrainConfig one = cfg;
  one.epochs = 1;
  CHECK(cosine_lr(0, one) == 1e-4);
  CHECK_THROWS_AS(cosine_lr(12, cfg), ConfigError);
  TrainConfig bad = cfg;
  bad.lr_min = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("argmax and scoring") {
  const Tensor logits({3, 4}, std::vector<float>{1, 5, 5, 0, 2, 2, 2, 2, -1, -3, -2, 0});
  CHECK(argmax_rows(logits) == std::vector<int>{1, 0, 3});
  SUBCASE("one-hot logits give perfect accuracy") {
    const std::vector<int> labels{2, 0, 1, 1};
    const auto r = score_predictions(labels, labels, 3);
    CHECK(r.accuracy == 1.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        if (i != j) CHECK(r.confusion[i][j] == 0);
  }
  SUBCASE("constant logits select class 0") {
    std::vector<int> labels;
    for (int c = 0; c < 26; ++c) labels.insert(labels.end(), 5, c);
    const auto preds = argmax_rows(Tensor({labels.size(), 26}, 0.3f));
    const auto r = score_predictions(preds, labels, 26);
    CHECK(r.accuracy == doctest::Approx(1.0 / 26.0));
    std::size_t sum = 0, trace = 0;
    for (std::size_t i = 0; i < 26; ++i) {
      std::size_t row = 0;
      for (std::size_t j = 0; j < 26; ++j) row += r.confusion[i][j];
      CHECK(row == 5);
      sum += row;
      trace += r.confusion[i][i];
    }
    CHECK(sum == r.total);
    CHECK(double(trace) / double(sum) == r.accuracy);
  }
}

TEST_CASE("best epoch selection follows the validation sequence") {
  const Dataset& d = glyphs8();
  const auto plan = stratified_kfold(d.labels(), 5, 1);
  const auto train = plan.train_indices(0);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.base_lr = 1e-3;
  const std::vector<double> seq{0.5, 0.9, 0.7, 0.9};
  std::vector<ModelState> snapshots;
  TrainHooks hooks;
  hooks.evaluator = [&](const ModelState& m, std::size_t epoch) {
    snapshots.push_back(m);
    return seq[epoch];
  };
  const auto r = train_fold(efficientsign_spec("tiny", 8), d, train, plan.test_indices(0), cfg, small_augment(), 0, hooks);
  CHECK(r.best_epoch == 2);
  CHECK(r.best_val_accuracy == 0.9);
  CHECK(r.val_accuracy == seq);
  REQUIRE(snapshots.size() == 4);
  bool same = true;
  for (std::size_t i = 0; i < r.best_model.parameters.size(); ++i)
    same = same && r.best_model.parameters[i].value == snapshots[1].parameters[i].value;
  CHECK(same);
}

TEST_CASE("training reduces the loss and is deterministic") {
  const Dataset& d = glyphs8();
  const auto plan = stratified_kfold(d.labels(), 5, 2);
  const auto train = plan.train_indices(1);
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 16;
  cfg.base_lr = 1e-2;
  const auto spec = efficientsign_spec("tiny", 8);
  const auto a = train_fold(spec, d, train, plan.test_indices(1), cfg, small_augment(), 1);
  REQUIRE(a.train_loss.size() == 12);
  CHECK(a.train_loss.back() < a.train_loss.front());
  CHECK(a.best_val_accuracy == *std::max_element(a.val_accuracy.begin(), a.val_accuracy.end()));
  CHECK(a.learning_rate.front() == doctest::Approx(1e-2));
  const auto b = train_fold(spec, d, train, plan.test_indices(1), cfg, small_augment(), 1);
  CHECK(a.train_loss == b.train_loss);
  CHECK(a.val_accuracy == b.val_accuracy);
  CHECK(a.best_val_accuracy == b.best_val_accuracy);
  const auto ev = evaluate(a.best_model, d, plan.test_indices(1));
  CHECK(ev.accuracy == a.best_val_accuracy);
  CHECK(ev.total == plan.test_indices(1).size());
}

TEST_CASE("oversized batch trains one full batch with a warning") {
  const Dataset& d = glyphs8();
  std::vector<std::size_t> train{0, 1, 10, 11, 20, 21};
  std::vector<std::size_t> val{2, 12};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 64;
  const auto r = train_fold(efficientsign_spec("tiny", 8), d, train, val, cfg, small_augment());
  CHECK_FALSE(r.warnings.empty());
  CHECK(r.train_loss.size() == 1);
}

TEST_CASE("a head narrower than the class count is rejected") {
  const Dataset& d = glyphs8();
  std::vector<std::size_t> idx{0, 10};
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_fold(efficientsign_spec("tiny", 4), d, idx, idx, cfg, small_augment()), IncompatibleError);
}

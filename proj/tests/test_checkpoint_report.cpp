#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "efsign/checkpoint.hpp"
#include "efsign/report.hpp"
#include "support/oracles.hpp"

using namespace efsign;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

Tensor random_images(std::size_t n, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 3, s, s});
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  return t;
}

// A model whose running statistics differ from their initial values.
ModelState trained_like(std::size_t classes, std::uint64_t seed) {
  auto model = build_model(efficientsign_spec("tiny", classes), seed);
  Rng rng(seed);
  forward(model, random_images(4, 32, seed + 1), Mode::train, rng);
  return model;
}

}  // namespace

TEST_CASE("model checkpoint round trip gives bit-identical logits") {
  const auto dir = oracle::temp_dir("ckpt");
  const auto model = trained_like(6, 3);
  save_checkpoint(model, dir / "m.efsn", {{"epochs", 12}});
  const auto loaded = load_checkpoint(dir / "m.efsn", ModelKind::efficientsign);
  CHECK(loaded.spec == model.spec);
  CHECK(loaded.manifest() == model.manifest());
  const Tensor x = random_images(3, 32, 9);
  CHECK(forward(loaded, x) == forward(model, x));
  CHECK(read_container(dir / "m.efsn").header.at("training").at("epochs") == 12);

  SUBCASE("baseline round trip") {
    const auto r = build_model(baseline_spec(ModelKind::mobilenetv2, 5), 4);
    save_checkpoint(r, dir / "r.efsn");
    const auto back = load_checkpoint(dir / "r.efsn");
    const Tensor y = random_images(1, 64, 10);
    CHECK(forward(back, y) == forward(r, y));
  }
}

TEST_CASE("corrupted checkpoints are rejected with the right error") {
  const auto dir = oracle::temp_dir("ckpt-bad");
  save_checkpoint(trained_like(4, 5), dir / "m.efsn");
  const std::string good = slurp(dir / "m.efsn");

  SUBCASE("flipped payload byte fails the checksum") {
    std::string bad = good;
    bad[bad.size() - 40] ^= 0x5a;
    spit(dir / "x.efsn", bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "x.efsn"), CorruptionError);
  }
  SUBCASE("truncated file") {
    spit(dir / "x.efsn", good.substr(0, good.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir / "x.efsn"), CorruptionError);
    spit(dir / "x.efsn", good.substr(0, 6));
    CHECK_THROWS_AS(load_checkpoint(dir / "x.efsn"), CorruptionError);
  }
  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    spit(dir / "x.efsn", bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "x.efsn"), FormatError);
  }
  SUBCASE("unsupported version") {
    std::string bad = good;
    bad[4] = 9;
    spit(dir / "x.efsn", bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "x.efsn"), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(dir / "none.efsn"), IoError); }
  SUBCASE("wrong model kind") {
    CHECK_THROWS_AS(load_checkpoint(dir / "m.efsn", ModelKind::resnet18), IncompatibleError);
  }
  SUBCASE("array shape mismatch names the array") {
    Container c = read_container(dir / "m.efsn");
    for (auto& a : c.arrays)
      if (a.name == "head.weight") {
        a.shape = {a.shape[0] * a.shape[1]};
      }
    write_container(dir / "x.efsn", c);
    try {
      load_checkpoint(dir / "x.efsn");
      FAIL("expected IncompatibleError");
    } catch (const IncompatibleError& e) {
      CHECK(std::string(e.what()).find("head.weight") != std::string::npos);
    }
  }
  SUBCASE("classical loaders reject model files") {
    CHECK_THROWS_AS(load_svm(dir / "m.efsn"), IncompatibleError);
  }
}

TEST_CASE("classical models and features round trip") {
  const auto dir = oracle::temp_dir("ckpt-classical");
  Rng rng(11);
  Matrix x(30, 4);
  std::vector<int> y;
  for (std::size_t i = 0; i < 30; ++i) {
    y.push_back(static_cast<int>(i % 3));
    for (std::size_t d = 0; d < 4; ++d) x(i, d) = (d == i % 3 ? 2.0 : 0.0) + 0.5 * rng.normal();
  }
  Matrix q(7, 4);
  for (auto& v : q.data) v = rng.normal();

  const auto svm = svm_train(x, y);
  save_svm(svm, dir / "s.efsn");
  CHECK(svm_predict(load_svm(dir / "s.efsn"), q) == svm_predict(svm, q));

  const auto knn = knn_fit(x, y, 3);
  save_knn(knn, dir / "k.efsn");
  CHECK(knn_predict(load_knn(dir / "k.efsn"), q) == knn_predict(knn, q));

  const auto lr = logreg_train(x, y, 3);
  save_logreg(lr, dir / "l.efsn");
  const auto lr2 = load_logreg(dir / "l.efsn");
  CHECK(logreg_predict_proba(lr2, q) == logreg_predict_proba(lr, q));

  FeatureSet fs{x, y, {"A", "B", "C"}};
  save_features(fs, dir / "f.efsn");
  const auto back = load_features(dir / "f.efsn");
  CHECK(back.features == x);
  CHECK(back.labels == y);
  CHECK(back.class_names == fs.class_names);
}

TEST_CASE("aggregation of the published EfficientSign folds") {
  const std::vector<double> folds{100.0, 99.88, 99.88, 100.0, 99.92};
  const Aggregate a = aggregate(folds);
  CHECK(std::abs(round_display(a.mean, 2) - 99.94) <= 0.005);
  CHECK(std::abs(round_display(a.std, 2) - 0.05) <= 0.005);
  // Independent two-pass computation.
  double m = 0;
  for (double v : folds) m += v;
  m /= 5;
  double s = 0;
  for (double v : folds) s += (v - m) * (v - m);
  CHECK(a.mean == doctest::Approx(m).epsilon(1e-14));
  CHECK(a.std == doctest::Approx(std::sqrt(s / 5)).epsilon(1e-12));
  CHECK(aggregate(std::vector<double>{0.7}).std == 0.0);
  CHECK_THROWS_AS(aggregate(std::vector<double>{}), InputError);
}

TEST_CASE("report formatting and JSON round trip") {
  CHECK(format_params(4247113) == "4.2M");
  CHECK(format_params(11189850) == "11.2M");
  CHECK(format_params(4843) == "4.8K");
  CHECK(format_params(std::nullopt) == "N/A");

  MetricsReport r;
  r.method = "efficientsign";
  r.params = 4247113;
  for (std::size_t f = 0; f < 5; ++f) {
    FoldReport fr;
    fr.fold = f;
    fr.accuracy = std::vector<double>{1.0, 0.9988, 0.9988, 1.0, 0.9992}[f];
    fr.test_size = 2527;
    fr.best_epoch = 3;
    fr.train_loss = {1.0, 0.5};
    fr.val_accuracy = {0.9, fr.accuracy};
    fr.learning_rate = {1e-4, 0.0};
    r.folds.push_back(fr);
  }
  r.class_names = {"A", "B"};
  r.confusion = {{3, 1}, {0, 4}};
  r.finalize();
  CHECK(round_display(100 * r.mean, 2) == doctest::Approx(99.94));
  const std::string row = table_row(r);
  CHECK(row.find("4.2M") != std::string::npos);
  CHECK(row.find("99.94") != std::string::npos);
  CHECK(row.find("0.05") != std::string::npos);
  CHECK(table_header(5).find("F5") != std::string::npos);

  const auto j = report_to_json(r);
  CHECK(j.at("std_convention") == "population");
  CHECK(j.at("params_display") == "4.2M");
  const auto back = report_from_json(j);
  CHECK(back.method == r.method);
  CHECK(back.params == r.params);
  CHECK(back.fold_accuracies() == r.fold_accuracies());
  CHECK(back.confusion == r.confusion);
  CHECK(back.folds[1].train_loss == r.folds[1].train_loss);

  const auto dir = oracle::temp_dir("report");
  write_folds_csv(r, dir / "folds.csv");
  write_curves_csv(r, dir / "curves.csv");
  std::istringstream folds(slurp(dir / "folds.csv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(folds, line)) ++lines;
  CHECK(lines == 6);
  std::istringstream curves(slurp(dir / "curves.csv"));
  lines = 0;
  while (std::getline(curves, line)) ++lines;
  CHECK(lines == 11);
}

TEST_CASE("aggregate edge cases and recomputation") {
  const Aggregate two = aggregate(std::vector<double>{0.0, 1.0});
  CHECK(two.mean == 0.5);
  CHECK(two.std == 0.5);
  CHECK(aggregate(std::vector<double>{0.9, 0.9, 0.9}).std == 0.0);
  MetricsReport r;
  for (double a : {0.91, 0.93, 0.97}) {
    FoldReport f;
    f.accuracy = a;
    r.folds.push_back(f);
  }
  r.finalize();
  const auto back = report_from_json(report_to_json(r));
  const Aggregate re = aggregate(back.fold_accuracies());
  CHECK(std::abs(re.mean - back.mean) <= 1e-9);
  CHECK(std::abs(re.std - back.std) <= 1e-9);
}

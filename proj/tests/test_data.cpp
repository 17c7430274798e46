#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "efsign/data.hpp"
#include "support/oracles.hpp"

using namespace efsign;
namespace fs = std::filesystem;

namespace {

Image solid(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  Image im(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    im.rgb[3 * i] = r;
    im.rgb[3 * i + 1] = g;
    im.rgb[3 * i + 2] = b;
  }
  return im;
}

Image noise(std::size_t w, std::size_t h, std::uint64_t seed) {
  Rng rng(seed);
  Image im(w, h);
  for (auto& v : im.rgb) v = static_cast<std::uint8_t>(rng.below(256));
  return im;
}

AugmentConfig degenerate(std::size_t size) {
  AugmentConfig cfg;
  cfg.flip_prob = 0.0;
  cfg.max_rotation_deg = 0.0;
  cfg.brightness_jitter = 0.0;
  cfg.contrast_jitter = 0.0;
  cfg.saturation_jitter = 0.0;
  cfg.max_translate_frac = 0.0;
  cfg.target_size = size;
  return cfg;
}

std::vector<int> isl_labels() {
  std::vector<int> labels;
  for (int c = 0; c < 26; ++c) labels.insert(labels.end(), c == 9 ? 487 : 486, c);
  return labels;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("load_dataset maps sorted class directories to labels") {
  const auto root = oracle::temp_dir("load");
  for (const char* c : {"C", "A", "B"}) {
    fs::create_directories(root / c);
    write_png(root / c / "0.png", noise(5, 4, 1));
    write_png(root / c / "1.png", noise(5, 4, 2));
  }
  std::ofstream(root / "A" / "notes.txt") << "not an image";
  LoadReport report;
  const Dataset d = load_dataset(root, &report);
  CHECK(d.size() == 6);
  CHECK(d.class_names == std::vector<std::string>{"A", "B", "C"});
  std::map<int, int> counts;
  for (const auto& it : d.items) {
    ++counts[it.label];
    CHECK(d.class_names[static_cast<std::size_t>(it.label)] == it.path.parent_path().filename().string());
  }
  CHECK(counts == std::map<int, int>{{0, 2}, {1, 2}, {2, 2}});
  CHECK(report.skipped_non_image == 1);
  CHECK(d.images[0] == noise(5, 4, 1));
  CHECK(d.width == 5);
  CHECK(d.height == 4);
}

TEST_CASE("load_dataset edge cases") {
  SUBCASE("empty class is listed with a warning") {
    const auto root = oracle::temp_dir("empty-class");
    fs::create_directories(root / "A");
    fs::create_directories(root / "B");
    write_png(root / "A" / "x.png", noise(3, 3, 3));
    LoadReport report;
    const Dataset d = load_dataset(root, &report);
    CHECK(d.num_classes() == 2);
    CHECK(d.size() == 1);
    CHECK_FALSE(report.warnings.empty());
  }
  SUBCASE("no class directories is an input error") {
    const auto root = oracle::temp_dir("no-classes");
    CHECK_THROWS_AS(load_dataset(root), InputError);
    CHECK_THROWS_AS(load_dataset(root / "missing"), InputError);
  }
  SUBCASE("undecodable image is collected and the load continues") {
    const auto root = oracle::temp_dir("bad-image");
    fs::create_directories(root / "A");
    write_png(root / "A" / "good.png", noise(3, 3, 4));
    std::ofstream(root / "A" / "bad.png") << "garbage";
    LoadReport report;
    const Dataset d = load_dataset(root, &report);
    CHECK(d.size() == 1);
    REQUIRE(report.item_errors.size() == 1);
    CHECK(report.item_errors[0].path.filename() == "bad.png");
  }
}

TEST_CASE("eval preprocessing normalizes with ImageNet statistics") {
  Rng rng(1);
  const AugmentConfig cfg = degenerate(8);
  const Tensor white = preprocess(solid(10, 6, 255, 255, 255), Mode::eval, cfg, rng);
  CHECK(white.shape() == Shape{3, 8, 8});
  const double expect[3] = {2.2489, 2.4286, 2.6400};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(white[c * 64 + i] - expect[c]) < 1e-4);
  // 0.485 * 255 is not an integer, so the nearest byte is checked against its own normalization.
  const std::uint8_t r = 124;
  const Tensor red = preprocess(solid(4, 4, r, 0, 0), Mode::eval, cfg, rng);
  for (std::size_t i = 0; i < 64; ++i) CHECK(red[i] == doctest::Approx((r / 255.0 - 0.485) / 0.229).epsilon(1e-5));
  CHECK(std::abs((r / 255.0 - 0.485) / 0.229) < 0.01);
  CHECK_THROWS_AS(preprocess(Image(), Mode::eval, cfg, rng), InputError);
}

TEST_CASE("eval preprocessing consumes no randomness") {
  Rng a(5), b(5);
  const Image im = noise(20, 14, 6);
  const AugmentConfig cfg;
  CHECK(preprocess(im, Mode::eval, cfg, a) == preprocess(im, Mode::eval, cfg, a));
  CHECK(a.next() == b.next());
}

TEST_CASE("train preprocessing with degenerate augmentation equals eval") {
  const Image im = noise(37, 29, 7);
  const AugmentConfig cfg = degenerate(24);
  Rng a(1), b(2);
  CHECK(preprocess(im, Mode::train, cfg, a) == preprocess(im, Mode::eval, cfg, b));
}

TEST_CASE("train preprocessing is deterministic and stays in range") {
  const Image im = noise(48, 48, 8);
  AugmentConfig cfg;
  cfg.target_size = 32;
  Rng a(9), b(9);
  CHECK(preprocess(im, Mode::train, cfg, a) == preprocess(im, Mode::train, cfg, b));
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor t = preprocess(im, Mode::train, cfg, rng);
    CHECK(t.shape() == Shape{3, 32, 32});
    for (std::size_t c = 0; c < 3; ++c) {
      const double lo = -kImageNetMean[c] / kImageNetStd[c], hi = (1.0 - kImageNetMean[c]) / kImageNetStd[c];
      for (std::size_t i = 0; i < 1024; ++i) {
        const double v = t[c * 1024 + i];
        CHECK((v >= lo - 1e-4 && v <= hi + 1e-4));
      }
    }
  }
}

TEST_CASE("flip-only augmentation mirrors columns") {
  const Image im = noise(16, 16, 11);
  AugmentConfig cfg = degenerate(16);
  cfg.flip_prob = 1.0;
  Rng a(1), b(1);
  const Tensor f = preprocess(im, Mode::train, cfg, a);
  const Tensor e = preprocess(im, Mode::eval, cfg, b);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) CHECK(f[(c * 16 + y) * 16 + x] == e[(c * 16 + y) * 16 + 15 - x]);
}

TEST_CASE("augment config validation") {
  AugmentConfig cfg;
  cfg.flip_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AugmentConfig{};
  cfg.target_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("stratified_kfold on the ISL label multiset") {
  const auto labels = isl_labels();
  REQUIRE(labels.size() == 12637);
  const FoldPlan plan = stratified_kfold(labels, 5, 42);
  REQUIRE(plan.folds.size() == 5);
  std::vector<int> seen(labels.size(), 0);
  for (std::size_t f = 0; f < 5; ++f) {
    const auto& test = plan.test_indices(f);
    CHECK((test.size() == 2527 || test.size() == 2528));
    const auto train = plan.train_indices(f);
    CHECK((train.size() == 10109 || train.size() == 10110));
    CHECK(train.size() + test.size() == labels.size());
    std::vector<std::size_t> inter;
    std::set_intersection(train.begin(), train.end(), test.begin(), test.end(), std::back_inserter(inter));
    CHECK(inter.empty());
    for (std::size_t i : test) ++seen[i];
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
  for (int c = 0; c < 26; ++c) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& fold : plan.folds) {
      const auto n = static_cast<std::size_t>(
          std::count_if(fold.begin(), fold.end(), [&](std::size_t i) { return labels[i] == c; }));
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    CHECK(hi - lo <= 1);
  }
  const FoldPlan again = stratified_kfold(labels, 5, 42);
  CHECK(again.folds == plan.folds);
  CHECK_FALSE(stratified_kfold(labels, 5, 43).folds == plan.folds);
}

TEST_CASE("stratified_kfold small cases and errors") {
  const std::vector<int> labels{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  const FoldPlan plan = stratified_kfold(labels, 5, 1);
  for (const auto& fold : plan.folds) {
    REQUIRE(fold.size() == 2);
    CHECK(labels[fold[0]] + labels[fold[1]] == 1);
  }
  try {
    stratified_kfold(std::vector<int>{0, 0, 0, 1, 1}, 3, 1);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
  CHECK_THROWS_AS(stratified_kfold(labels, 1, 1), InputError);
}

TEST_CASE("synthetic glyph set") {
  const auto dir_a = oracle::temp_dir("synth-a"), dir_b = oracle::temp_dir("synth-b");
  SynthConfig cfg;
  cfg.num_classes = 26;
  cfg.per_class = 40;
  cfg.image_size = 64;
  cfg.seed = 42;
  const Dataset d = synth_generate(cfg, dir_a);
  CHECK(d.size() == 1040);
  CHECK(d.num_classes() == 26);
  CHECK(d.class_names.front() == "A");
  CHECK(d.class_names.back() == "Z");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir_a))
    if (e.is_regular_file()) ++files;
  CHECK(files == 1040);

  SUBCASE("same seed gives byte-identical files") {
    SynthConfig small = cfg;
    small.num_classes = 4;
    small.per_class = 3;
    synth_generate(small, dir_b / "x");
    synth_generate(small, dir_b / "y");
    for (const auto& e : fs::recursive_directory_iterator(dir_b / "x")) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), dir_b / "x");
      CHECK(slurp(e.path()) == slurp(dir_b / "y" / rel));
    }
  }

  SUBCASE("nearest centroid on raw pixels beats chance") {
    const auto labels = d.labels();
    const FoldPlan plan = stratified_kfold(labels, 5, 1);
    const std::size_t D = 64 * 64 * 3;
    std::vector<std::vector<double>> centroid(26, std::vector<double>(D, 0.0));
    std::vector<std::size_t> count(26, 0);
    for (std::size_t i : plan.train_indices(0)) {
      const auto c = static_cast<std::size_t>(labels[i]);
      for (std::size_t j = 0; j < D; ++j) centroid[c][j] += d.images[i].rgb[j];
      ++count[c];
    }
    for (std::size_t c = 0; c < 26; ++c)
      for (auto& v : centroid[c]) v /= double(count[c]);
    std::size_t correct = 0;
    for (std::size_t i : plan.test_indices(0)) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t c = 0; c < 26; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < D; ++j) {
          const double diff = d.images[i].rgb[j] - centroid[c][j];
          s += diff * diff;
        }
        if (s < best_d) best_d = s, best = c;
      }
      if (static_cast<int>(best) == labels[i]) ++correct;
    }
    const double acc = double(correct) / double(plan.test_indices(0).size());
    MESSAGE("nearest centroid accuracy " << acc);
    CHECK(acc > 1.0 / 26.0);
  }
}

TEST_CASE("synthetic class names and write errors") {
  CHECK(synth_class_name(0, 26) == "A");
  CHECK(synth_class_name(25, 26) == "Z");
  CHECK(synth_class_name(3, 30) == "c03");
  const auto root = oracle::temp_dir("synth-err");
  std::ofstream(root / "file") << "x";
  SynthConfig cfg;
  cfg.num_classes = 2;
  cfg.per_class = 1;
  CHECK_THROWS_AS(synth_generate(cfg, root / "file" / "sub"), IoError);
}

TEST_CASE("stack_images builds a batch") {
  Rng rng(1);
  const AugmentConfig cfg = degenerate(8);
  std::vector<Tensor> ims{preprocess(noise(8, 8, 1), Mode::eval, cfg, rng), preprocess(noise(8, 8, 2), Mode::eval, cfg, rng)};
  const Tensor b = stack_images(ims);
  CHECK(b.shape() == Shape{2, 3, 8, 8});
  CHECK(b[3 * 64] == ims[1][0]);
}

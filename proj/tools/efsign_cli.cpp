#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "efsign/checkpoint.hpp"
#include "efsign/cv.hpp"
#include "efsign/errors.hpp"
#include "efsign/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace efsign;

namespace {

struct Common {
  std::string data;
  std::string method = "efficientsign";
  std::string preset = "b0";
  std::size_t epochs = 12;
  double lr = 1e-4;
  std::size_t batch = 32;
  std::size_t folds = 5;
  std::uint64_t seed = 42;
  std::string out;
  std::size_t synth_classes = 26;
  std::size_t synth_per_class = 40;
  std::size_t synth_size = 64;
  bool parallel_folds = false;
  bool no_augment = false;
  std::string extractor;
  bool pixels = false;
};

void add_data_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("--data", c.data, "Dataset root (one subdirectory per class); synthetic glyphs when omitted");
  cmd->add_option("--synth-classes", c.synth_classes, "Synthetic class count")->capture_default_str();
  cmd->add_option("--synth-per-class", c.synth_per_class, "Synthetic images per class")->capture_default_str();
  cmd->add_option("--synth-size", c.synth_size, "Synthetic image size in pixels")->capture_default_str();
}

void add_train_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("--method", c.method, "efficientsign | resnet18 | mobilenetv2 | svm | knn | logreg")
      ->capture_default_str();
  cmd->add_option("--preset", c.preset, "EfficientSign backbone preset (b0 | tiny)")->capture_default_str();
  cmd->add_option("--epochs", c.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--lr", c.lr, "Base learning rate")->capture_default_str();
  cmd->add_option("--batch", c.batch, "Minibatch size")->capture_default_str();
  cmd->add_option("--folds", c.folds, "Cross-validation folds")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Seed for fold plan, initialization and augmentation")->capture_default_str();
  cmd->add_flag("--no-augment", c.no_augment, "Disable train-time augmentation");
}

CvConfig to_cv(const Common& c) {
  CvConfig cfg;
  cfg.method = c.method;
  cfg.preset = c.preset;
  cfg.data = c.data;
  cfg.synth.num_classes = c.synth_classes;
  cfg.synth.per_class = c.synth_per_class;
  cfg.synth.image_size = c.synth_size;
  cfg.synth.seed = c.seed;
  cfg.train.epochs = c.epochs;
  cfg.train.base_lr = c.lr;
  cfg.train.batch_size = c.batch;
  cfg.train.seed = c.seed;
  cfg.train.augment = !c.no_augment;
  cfg.folds = c.folds;
  cfg.seed = c.seed;
  cfg.out = c.out;
  cfg.parallel_folds = c.parallel_folds;
  cfg.extractor = c.extractor;
  cfg.pixel_features = c.pixels;
  return cfg;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

int cmd_synth(const Common& c) {
  if (c.out.empty()) throw ConfigError("synth requires --out");
  SynthConfig s;
  s.num_classes = c.synth_classes;
  s.per_class = c.synth_per_class;
  s.image_size = c.synth_size;
  s.seed = c.seed;
  const Dataset ds = synth_generate(s, c.out);
  std::cout << "wrote " << ds.size() << " images in " << ds.num_classes() << " classes to " << c.out << '\n';
  return 0;
}

int cmd_train(const Common& c) {
  CvConfig cfg = to_cv(c);
  if (!is_deep_method(cfg.method)) throw ConfigError("train expects a deep method, got '" + cfg.method + "'");
  const Dataset data = load_or_synthesize(cfg);
  const FoldPlan plan = stratified_kfold(data.labels(), cfg.folds, cfg.seed);
  const ModelSpec spec = spec_for_method(cfg.method, cfg.preset, data.num_classes());
  TrainHooks hooks;
  hooks.log = &std::cout;
  const auto train_idx = plan.train_indices(0);
  const FoldResult r = train_fold(spec, data, train_idx, plan.test_indices(0), cfg.train, cfg.augment, 0, hooks);
  std::cout << "best val accuracy " << r.best_val_accuracy << " at epoch " << r.best_epoch << '\n';
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    const fs::path ckpt = fs::path(c.out) / "model.efsn";
    save_checkpoint(r.best_model, ckpt,
                    {{"best_epoch", r.best_epoch}, {"best_val_accuracy", r.best_val_accuracy},
                     {"config", cv_config_json(cfg)}});
    std::cout << "saved " << ckpt.string() << '\n';
  }
  return 0;
}

int cmd_cv(const Common& c) {
  const MetricsReport report = run_cv(to_cv(c), &std::cout);
  if (!c.out.empty()) std::cout << "report written to " << (fs::path(c.out) / "report.json").string() << '\n';
  (void)report;
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const ModelState model = load_checkpoint(checkpoint);
  const Dataset data = load_or_synthesize(to_cv(c));
  if (data.num_classes() > model.spec.num_classes) {
    throw IncompatibleError("dataset has " + std::to_string(data.num_classes()) + " classes, checkpoint head has " +
                            std::to_string(model.spec.num_classes));
  }
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const EvalResult r = evaluate(model, data, all);
  const json j = {{"checkpoint", checkpoint}, {"accuracy", r.accuracy}, {"correct", r.correct},
                  {"total", r.total}, {"confusion", r.confusion}, {"class_names", data.class_names}};
  print_json(j);
  if (!c.out.empty()) {
    std::ofstream out(c.out);
    if (!out) throw IoError("cannot write " + c.out);
    out << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_features(const Common& c) {
  if (c.out.empty()) throw ConfigError("features requires --out");
  CvConfig cfg = to_cv(c);
  cfg.out.clear();
  const Dataset data = load_or_synthesize(cfg);
  const ModelState extractor = c.extractor.empty()
                                   ? build_model(efficientsign_spec(c.preset, std::max<std::size_t>(data.num_classes(), 2)), c.seed)
                                   : load_checkpoint(c.extractor);
  FeatureSet set;
  set.features = c.pixels ? pixel_feature_matrix(data, 32) : extract_feature_matrix(extractor, data);
  set.labels = data.labels();
  set.class_names = data.class_names;
  save_features(set, c.out);
  std::cout << "wrote " << set.features.rows << " x " << set.features.cols << " features to " << c.out << '\n';
  return 0;
}

int cmd_classical(const Common& c, const std::string& features_path) {
  ClassicalMethod method{};
  if (!parse_classical_method(c.method, &method)) {
    throw ConfigError("classical expects --method svm, knn or logreg, got '" + c.method + "'");
  }
  if (features_path.empty()) {
    run_cv(to_cv(c), &std::cout);
    return 0;
  }
  const FeatureSet set = load_features(features_path);
  const FoldPlan plan = stratified_kfold(set.labels, c.folds, c.seed);
  if (!c.out.empty()) fs::create_directories(c.out);
  MetricsReport report = classical_pipeline(set.features, set.labels, set.class_names, plan, method,
                                            c.out.empty() ? fs::path{} : fs::path(c.out), &std::cout);
  CvConfig cfg = to_cv(c);
  report.config = cv_config_json(cfg);
  report.config["features"] = {{"source", features_path}, {"dim", set.features.cols}};
  if (!c.out.empty()) {
    write_report_json(report, fs::path(c.out) / "report.json");
    write_folds_csv(report, fs::path(c.out) / "folds.csv");
  }
  std::cout << table_header(report.folds.size()) << '\n' << table_row(report) << '\n';
  return 0;
}

int cmd_params(const Common& c, std::size_t classes) {
  const ModelSpec spec = spec_for_method(c.method, c.preset, classes);
  const ParamCount count = count_params(build_model(spec, c.seed));
  json breakdown = json::object();
  for (const auto& [k, v] : count.by_component) breakdown[k] = v;
  print_json({{"method", c.method},
              {"preset", spec.kind == ModelKind::efficientsign ? json(c.preset) : json(nullptr)},
              {"num_classes", classes},
              {"total", count.total},
              {"display", format_params(count.total)},
              {"by_component", breakdown}});
  return 0;
}

int cmd_gradcheck() {
  const GradCheckOptions options;
  const auto entries = run_gradcheck_suite(options);
  std::size_t failed = 0;
  for (const auto& e : entries) {
    std::cout << (e.passed ? "ok   " : "FAIL ") << std::left << std::setw(44) << e.layer << std::setw(44) << e.tensor
              << " coords " << std::setw(3) << e.coords << " max rel err " << std::scientific << std::setprecision(2)
              << e.max_rel_error << std::defaultfloat << '\n';
    if (!e.passed) ++failed;
  }
  std::cout << entries.size() - failed << "/" << entries.size() << " tensors within relative error "
            << options.tolerance << '\n';
  if (failed > 0) throw NumericError(std::to_string(failed) + " gradient checks failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EfficientSign: attention-augmented MBConv sign classifier, training and evaluation"};
  app.require_subcommand(1);
  Common c;
  std::string checkpoint, features_path;
  std::size_t classes = 26;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic glyph dataset");
  add_data_flags(synth, c);
  synth->add_option("--seed", c.seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", c.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train on one split (fold 1 held out)");
  add_data_flags(train, c);
  add_train_flags(train, c);
  train->add_option("--out", c.out, "Directory for model.efsn");

  auto* cv = app.add_subcommand("cv", "Full stratified k-fold protocol");
  add_data_flags(cv, c);
  add_train_flags(cv, c);
  cv->add_option("--out", c.out, "Directory for report.json, folds.csv and checkpoints");
  cv->add_flag("--parallel-folds", c.parallel_folds, "Run folds concurrently");
  cv->add_option("--extractor", c.extractor, "Feature-extractor checkpoint for classical methods");
  cv->add_flag("--pixels", c.pixels, "Classical methods on raw pixels instead of deep features");

  auto* eval = app.add_subcommand("eval", "Accuracy of a checkpoint on a dataset");
  add_data_flags(eval, c);
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--out", c.out, "Write the JSON result here");

  auto* features = app.add_subcommand("features", "Extract the pooled feature matrix");
  add_data_flags(features, c);
  features->add_option("--preset", c.preset, "Backbone preset for a fresh extractor")->capture_default_str();
  features->add_option("--seed", c.seed, "Seed for a fresh extractor")->capture_default_str();
  features->add_option("--extractor,--checkpoint", c.extractor, "Extractor checkpoint");
  features->add_flag("--pixels", c.pixels, "Export raw 32x32 pixels instead");
  features->add_option("--out", c.out, "Feature file")->required();

  auto* classical = app.add_subcommand("classical", "SVM / KNN / logistic regression cross-validation");
  add_data_flags(classical, c);
  add_train_flags(classical, c);
  classical->add_option("--features", features_path, "Feature file from `features`");
  classical->add_option("--extractor", c.extractor, "Feature-extractor checkpoint");
  classical->add_flag("--pixels", c.pixels, "Use raw pixels instead of deep features");
  classical->add_option("--out", c.out, "Directory for report.json and folds.csv");

  auto* params = app.add_subcommand("params", "Parameter count and breakdown");
  params->add_option("--method", c.method, "efficientsign | resnet18 | mobilenetv2")->capture_default_str();
  params->add_option("--preset", c.preset, "Backbone preset")->capture_default_str();
  params->add_option("--classes", classes, "Number of classes")->capture_default_str();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::config);
  }

  try {
    if (*synth) return cmd_synth(c);
    if (*train) return cmd_train(c);
    if (*cv) return cmd_cv(c);
    if (*eval) return cmd_eval(c, checkpoint);
    if (*features) return cmd_features(c);
    if (*classical) {
      if (c.method == "efficientsign") c.method = "svm";
      return cmd_classical(c, features_path);
    }
    if (*params) return cmd_params(c, classes);
    if (*gradcheck) return cmd_gradcheck();
  } catch (const Error& e) {
    std::cerr << "error [" << category_name(e.category()) << "]: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

#include "efsign/cv.hpp"

#include <algorithm>
#include <chrono>
#include <ostream>
#include <sstream>
#include <thread>

#include "efsign/checkpoint.hpp"
#include "efsign/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace efsign {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void add_confusion(std::vector<std::vector<std::size_t>>& total, std::span<const int> labels,
                   std::span<const int> predictions, std::size_t K) {
  if (total.empty()) total.assign(K, std::vector<std::size_t>(K, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) ++total[labels[i]][predictions[i]];
}

}  // namespace

bool is_deep_method(const std::string& method) {
  return method == "efficientsign" || method == "resnet18" || method == "mobilenetv2";
}

void validate_method(const std::string& method) {
  for (const char* m : kMethods) {
    if (method == m) return;
  }
  throw ConfigError("unknown method '" + method + "' (expected efficientsign, resnet18, mobilenetv2, svm, knn or logreg)");
}

json cv_config_json(const CvConfig& cfg) {
  json j = {{"method", cfg.method},
            {"folds", cfg.folds},
            {"fold_seed", cfg.seed},
            {"std_convention", "population (divide by k)"},
            {"parallel_folds", cfg.parallel_folds},
            {"data", cfg.data.empty() ? json(nullptr) : json(cfg.data.string())}};
  if (cfg.data.empty()) {
    j["synth"] = {{"num_classes", cfg.synth.num_classes},
                  {"per_class", cfg.synth.per_class},
                  {"image_size", cfg.synth.image_size},
                  {"seed", cfg.synth.seed}};
  }
  if (is_deep_method(cfg.method)) {
    j["preset"] = cfg.preset;
    j["epochs"] = cfg.train.epochs;
    j["base_lr"] = cfg.train.base_lr;
    j["lr_min"] = cfg.train.lr_min;
    j["lr_schedule"] = "cosine, stepped per epoch, T-1 denominator";
    j["batch_size"] = cfg.train.batch_size;
    j["train_seed"] = cfg.train.seed;
    j["optimizer"] = {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"epsilon", 1e-8}, {"weight_decay", 0.0}};
    j["validation_split"] = "fold test split";
    j["checkpoint_selection"] = "best validation accuracy, earlier epoch on ties";
    j["augment"] = {{"enabled", cfg.train.augment},
                    {"flip_prob", cfg.augment.flip_prob},
                    {"max_rotation_deg", cfg.augment.max_rotation_deg},
                    {"brightness_jitter", cfg.augment.brightness_jitter},
                    {"contrast_jitter", cfg.augment.contrast_jitter},
                    {"saturation_jitter", cfg.augment.saturation_jitter},
                    {"max_translate_frac", cfg.augment.max_translate_frac}};
  } else if (cfg.pixel_features) {
    j["features"] = {{"source", "pixels"}, {"size", cfg.pixel_size}};
  } else {
    j["features"] = {{"source", "deep"},
                     {"extractor", cfg.extractor.empty() ? json("fresh " + cfg.preset) : json(cfg.extractor.string())},
                     {"extractor_seed", cfg.train.seed},
                     {"scaling", "none"}};
    if (cfg.method == "svm") j["svm"] = {{"C", 10.0}, {"gamma", "scale"}, {"scheme", "one-vs-one"}, {"tolerance", 1e-3}};
    if (cfg.method == "knn") j["knn"] = {{"k", 5}, {"weights", "uniform"}, {"metric", "euclidean"}};
    if (cfg.method == "logreg") {
      j["logreg"] = {{"C", 1.0}, {"max_iter", 1000}, {"solver", "l-bfgs (m=10)"}, {"multinomial", true}};
    }
  }
  return j;
}

Dataset load_or_synthesize(const CvConfig& cfg) {
  if (!cfg.data.empty()) {
    LoadReport report;
    Dataset ds = load_dataset(cfg.data, &report);
    if (ds.size() == 0) throw InputError("dataset " + cfg.data.string() + " contains no decodable images");
    return ds;
  }
  const fs::path dir = cfg.out.empty() ? fs::temp_directory_path() / ("efsign-synth-" + std::to_string(cfg.synth.seed))
                                       : cfg.out / "synth";
  return synth_generate(cfg.synth, dir);
}

ModelSpec spec_for_method(const std::string& method, const std::string& preset, std::size_t num_classes) {
  validate_method(method);
  if (!is_deep_method(method)) throw ConfigError("method '" + method + "' is not a deep model");
  if (method == "efficientsign") return efficientsign_spec(preset, num_classes);
  return baseline_spec(parse_model_kind(method), num_classes);
}

Matrix extract_feature_matrix(const ModelState& extractor, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) throw InputError("extract_feature_matrix: empty dataset");
  batch = std::max<std::size_t>(batch, 1);
  const std::size_t F = extractor.spec.feature_channels();
  Matrix out(data.size(), F);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t stop = std::min(start + batch, data.size());
    idx.clear();
    for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
    const auto inputs = prepare_eval_inputs(extractor.spec, data, idx);
    const Tensor feats = extract_features(extractor, stack_images(inputs));
    std::copy(feats.data().begin(), feats.data().end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * F));
  }
  return out;
}

Matrix pixel_feature_matrix(const Dataset& data, std::size_t size) {
  AugmentConfig aug;
  aug.target_size = size;
  Rng unused(0);
  const std::size_t D = 3 * size * size;
  Matrix out(data.size(), D);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor t = preprocess(data.images[i], Mode::eval, aug, unused);
    std::copy(t.data().begin(), t.data().end(), out.row(i).begin());
  }
  return out;
}

MetricsReport classical_pipeline(const Matrix& features, std::span<const int> labels,
                                 const std::vector<std::string>& class_names, const FoldPlan& plan,
                                 ClassicalMethod method, const fs::path& out, std::ostream* log) {
  if (labels.size() != features.rows) throw InputError("classical_pipeline: label count does not match features");
  const std::size_t K = std::max<std::size_t>(class_names.size(), 2);
  MetricsReport report;
  report.method = classical_method_name(method);
  report.class_names = class_names;
  for (std::size_t f = 0; f < plan.k; ++f) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto train_idx = plan.train_indices(f);
      const auto& test_idx = plan.test_indices(f);
      const Matrix train = features.select_rows(train_idx);
      const Matrix test = features.select_rows(test_idx);
      std::vector<int> ytrain, ytest;
      for (std::size_t i : train_idx) ytrain.push_back(labels[i]);
      for (std::size_t i : test_idx) ytest.push_back(labels[i]);

      std::vector<int> pred;
      FoldReport fr;
      fr.fold = f;
      const fs::path ckpt = out.empty() ? fs::path{} : out / ("fold" + std::to_string(f + 1) + "." + report.method + ".efsn");
      switch (method) {
        case ClassicalMethod::svm: {
          const SvmModel m = svm_train(train, ytrain);
          pred = svm_predict(m, test);
          if (!ckpt.empty()) save_svm(m, ckpt);
          break;
        }
        case ClassicalMethod::knn: {
          const KnnModel m = knn_fit(train, ytrain);
          pred = knn_predict(m, test);
          if (!ckpt.empty()) save_knn(m, ckpt);
          break;
        }
        case ClassicalMethod::logreg: {
          const LogRegModel m = logreg_train(train, ytrain, K);
          pred = logreg_predict(m, test);
          if (!ckpt.empty()) save_logreg(m, ckpt);
          break;
        }
      }
      const EvalResult r = score_predictions(pred, ytest, K);
      fr.accuracy = r.accuracy;
      fr.test_size = r.total;
      fr.checkpoint = ckpt.string();
      add_confusion(report.confusion, ytest, pred, K);
      fr.seconds = seconds_since(t0);
      if (log) *log << report.method << " fold " << f + 1 << " accuracy " << fr.accuracy << '\n';
      report.folds.push_back(std::move(fr));
    } catch (const Error& e) {
      throw TrainingError("fold " + std::to_string(f + 1) + " failed: " + e.what());
    }
  }
  report.finalize();
  return report;
}

MetricsReport classical_pipeline(const ModelState& extractor, const FoldPlan& plan, const Dataset& data,
                                 ClassicalMethod method) {
  const Matrix features = extract_feature_matrix(extractor, data);
  const auto labels = data.labels();
  MetricsReport report = classical_pipeline(features, labels, data.class_names, plan, method);
  report.config["features"] = {{"source", "deep"}, {"dim", features.cols}};
  return report;
}

namespace {

MetricsReport run_deep(const CvConfig& cfg, const Dataset& data, const FoldPlan& plan, std::ostream* log) {
  const ModelSpec spec = spec_for_method(cfg.method, cfg.preset, data.num_classes());
  MetricsReport report;
  report.method = cfg.method;
  report.class_names = data.class_names;
  report.params = count_params(build_model(spec, cfg.train.seed)).total;
  report.folds.resize(plan.k);
  std::vector<std::vector<int>> fold_preds(plan.k);
  std::vector<std::string> fold_logs(plan.k);
  std::vector<std::string> fold_errors(plan.k);

  auto run_fold = [&](std::size_t f, std::ostream* fold_log) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto train_idx = plan.train_indices(f);
      const auto& test_idx = plan.test_indices(f);
      TrainHooks hooks;
      hooks.log = fold_log;
      FoldResult r = train_fold(spec, data, train_idx, test_idx, cfg.train, cfg.augment, f, hooks);
      FoldReport& fr = report.folds[f];
      fr.fold = f;
      fr.accuracy = r.best_val_accuracy;
      fr.test_size = test_idx.size();
      fr.best_epoch = r.best_epoch;
      fr.train_loss = r.train_loss;
      fr.val_accuracy = r.val_accuracy;
      fr.learning_rate = r.learning_rate;
      fold_preds[f] = r.best_eval.predictions;
      if (!cfg.out.empty() && cfg.write_checkpoints) {
        const fs::path ckpt = cfg.out / ("fold" + std::to_string(f + 1) + ".efsn");
        save_checkpoint(r.best_model, ckpt,
                        {{"fold", f + 1}, {"best_epoch", r.best_epoch}, {"best_val_accuracy", r.best_val_accuracy},
                         {"config", cv_config_json(cfg)}});
        fr.checkpoint = ckpt.string();
      }
      fr.seconds = seconds_since(t0);
    } catch (const Error& e) {
      fold_errors[f] = e.what();
    }
  };

  if (cfg.parallel_folds) {
    std::vector<std::ostringstream> streams(plan.k);
    std::vector<std::thread> threads;
    for (std::size_t f = 0; f < plan.k; ++f) threads.emplace_back(run_fold, f, log ? &streams[f] : nullptr);
    for (auto& t : threads) t.join();
    for (std::size_t f = 0; f < plan.k; ++f) {
      if (log) *log << streams[f].str();
    }
  } else {
    for (std::size_t f = 0; f < plan.k; ++f) {
      run_fold(f, log);
      if (!fold_errors[f].empty()) break;
    }
  }
  for (std::size_t f = 0; f < plan.k; ++f) {
    if (!fold_errors[f].empty()) throw TrainingError("fold " + std::to_string(f + 1) + " failed: " + fold_errors[f]);
  }
  const auto labels = data.labels();
  for (std::size_t f = 0; f < plan.k; ++f) {
    std::vector<int> ytest;
    for (std::size_t i : plan.test_indices(f)) ytest.push_back(labels[i]);
    add_confusion(report.confusion, ytest, fold_preds[f], data.num_classes());
  }
  report.finalize();
  return report;
}

}  // namespace

MetricsReport run_cv(const CvConfig& cfg, const Dataset& data, std::ostream* log) {
  validate_method(cfg.method);
  if (cfg.folds < 2) throw ConfigError("folds must be at least 2");
  if (data.num_classes() < 2) throw InputError("dataset needs at least two classes");
  if (!cfg.out.empty()) {
    std::error_code ec;
    fs::create_directories(cfg.out, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.out.string());
  }
  const FoldPlan plan = stratified_kfold(data.labels(), cfg.folds, cfg.seed);

  MetricsReport report;
  if (is_deep_method(cfg.method)) {
    report = run_deep(cfg, data, plan, log);
  } else {
    ClassicalMethod method{};
    parse_classical_method(cfg.method, &method);
    Matrix features;
    if (cfg.pixel_features) {
      features = pixel_feature_matrix(data, cfg.pixel_size);
    } else {
      const ModelState extractor = cfg.extractor.empty()
                                       ? build_model(efficientsign_spec(cfg.preset, std::max<std::size_t>(data.num_classes(), 2)), cfg.train.seed)
                                       : load_checkpoint(cfg.extractor);
      features = extract_feature_matrix(extractor, data);
    }
    report = classical_pipeline(features, data.labels(), data.class_names, plan, method,
                                cfg.out.empty() || !cfg.write_checkpoints ? fs::path{} : cfg.out, log);
  }
  report.config = cv_config_json(cfg);
  if (!cfg.out.empty()) {
    write_report_json(report, cfg.out / "report.json");
    write_folds_csv(report, cfg.out / "folds.csv");
    if (is_deep_method(cfg.method)) write_curves_csv(report, cfg.out / "curves.csv");
  }
  if (log) *log << table_header(report.folds.size()) << '\n' << table_row(report) << '\n';
  return report;
}

MetricsReport run_cv(const CvConfig& cfg, std::ostream* log) {
  validate_method(cfg.method);
  return run_cv(cfg, load_or_synthesize(cfg), log);
}

}  // namespace efsign

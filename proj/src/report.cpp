#include "efsign/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "efsign/errors.hpp"

using nlohmann::json;

namespace efsign {

Aggregate aggregate(std::span<const double> values) {
  if (values.empty()) throw InputError("aggregate: no fold values");
  const double k = static_cast<double>(values.size());
  Aggregate a;
  for (double v : values) a.mean += v;
  a.mean /= k;
  double var = 0.0;
  for (double v : values) var += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(var / k);
  return a;
}

double round_display(double value, int digits) {
  const double scale = std::pow(10.0, digits);
  return std::round(value * scale) / scale;
}

std::vector<double> MetricsReport::fold_accuracies() const {
  std::vector<double> out;
  for (const auto& f : folds) out.push_back(f.accuracy);
  return out;
}

void MetricsReport::finalize() {
  const auto acc = fold_accuracies();
  const Aggregate a = aggregate(acc);
  mean = a.mean;
  std = a.std;
}

json report_to_json(const MetricsReport& r) {
  json folds = json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"accuracy", f.accuracy},
                     {"test_size", f.test_size},
                     {"seconds", f.seconds},
                     {"best_epoch", f.best_epoch},
                     {"train_loss", f.train_loss},
                     {"val_accuracy", f.val_accuracy},
                     {"learning_rate", f.learning_rate},
                     {"checkpoint", f.checkpoint}});
  }
  return {{"method", r.method},
          {"params", r.params ? json(*r.params) : json("N/A")},
          {"params_display", format_params(r.params)},
          {"folds", folds},
          {"fold_accuracies", r.fold_accuracies()},
          {"fold_percent_display", [&] {
             std::vector<double> v;
             for (const auto& f : r.folds) v.push_back(round_display(100.0 * f.accuracy, 2));
             return v;
           }()},
          {"mean", r.mean},
          {"std", r.std},
          {"mean_percent_display", round_display(100.0 * r.mean, 2)},
          {"std_percent_display", round_display(100.0 * r.std, 2)},
          {"std_convention", "population"},
          {"class_names", r.class_names},
          {"confusion", r.confusion},
          {"config", r.config}};
}

MetricsReport report_from_json(const json& j) {
  try {
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    if (j.at("params").is_number()) r.params = j["params"].get<std::size_t>();
    for (const auto& f : j.at("folds")) {
      FoldReport fr;
      fr.fold = f.at("fold").get<std::size_t>();
      fr.accuracy = f.at("accuracy").get<double>();
      fr.test_size = f.at("test_size").get<std::size_t>();
      fr.seconds = f.at("seconds").get<double>();
      fr.best_epoch = f.at("best_epoch").get<std::size_t>();
      fr.train_loss = f.at("train_loss").get<std::vector<double>>();
      fr.val_accuracy = f.at("val_accuracy").get<std::vector<double>>();
      fr.learning_rate = f.at("learning_rate").get<std::vector<double>>();
      fr.checkpoint = f.at("checkpoint").get<std::string>();
      r.folds.push_back(std::move(fr));
    }
    r.mean = j.at("mean").get<double>();
    r.std = j.at("std").get<double>();
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    r.config = j.at("config");
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed metrics report: ") + e.what());
  }
}

std::string format_params(std::optional<std::size_t> params) {
  if (!params) return "N/A";
  char buf[32];
  const double p = static_cast<double>(*params);
  if (p >= 1e6) std::snprintf(buf, sizeof buf, "%.1fM", p / 1e6);
  else if (p >= 1e3) std::snprintf(buf, sizeof buf, "%.1fK", p / 1e3);
  else std::snprintf(buf, sizeof buf, "%zu", *params);
  return buf;
}

std::string table_header(std::size_t folds) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "Method" << std::setw(8) << "Params" << std::setw(8) << "Mean %" << std::setw(8)
     << "Std %";
  for (std::size_t f = 0; f < folds; ++f) os << std::setw(8) << ("F" + std::to_string(f + 1));
  return os.str();
}

std::string table_row(const MetricsReport& r) {
  std::ostringstream os;
  os << std::left << std::fixed << std::setprecision(2) << std::setw(14) << r.method << std::setw(8)
     << format_params(r.params) << std::setw(8) << round_display(100.0 * r.mean, 2) << std::setw(8)
     << round_display(100.0 * r.std, 2);
  for (const auto& f : r.folds) os << std::setw(8) << round_display(100.0 * f.accuracy, 2);
  return os.str();
}

void write_report_json(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << report_to_json(report).dump(2) << '\n';
}

void write_folds_csv(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "method,fold,accuracy,test_size,seconds,best_epoch\n";
  out << std::setprecision(17);
  for (const auto& f : report.folds) {
    out << report.method << ',' << f.fold + 1 << ',' << f.accuracy << ',' << f.test_size << ',' << f.seconds << ','
        << f.best_epoch << '\n';
  }
}

void write_curves_csv(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "method,fold,epoch,lr,train_loss,val_accuracy\n";
  out << std::setprecision(17);
  for (const auto& f : report.folds) {
    for (std::size_t e = 0; e < f.train_loss.size(); ++e) {
      out << report.method << ',' << f.fold + 1 << ',' << e + 1 << ',' << f.learning_rate.at(e) << ','
          << f.train_loss[e] << ',' << f.val_accuracy.at(e) << '\n';
    }
  }
}

}  // namespace efsign

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace efsign {

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population (divide by k)
};

Aggregate aggregate(std::span<const double> values);

// Round-half-away-from-zero to `digits` decimals, as printed in tables.
double round_display(double value, int digits);

struct FoldReport {
  std::size_t fold = 0;
  double accuracy = 0.0;  // fraction
  std::size_t test_size = 0;
  double seconds = 0.0;
  std::size_t best_epoch = 0;        // deep models only
  std::vector<double> train_loss;    // deep models only
  std::vector<double> val_accuracy;  // deep models only
  std::vector<double> learning_rate;  // deep models only
  std::string checkpoint;            // path, when written
};

struct MetricsReport {
  std::string method;
  std::optional<std::size_t> params;  // absent for classical methods
  std::vector<FoldReport> folds;
  double mean = 0.0;  // fraction
  double std = 0.0;   // fraction, population
  std::vector<std::string> class_names;
  std::vector<std::vector<std::size_t>> confusion;  // summed over folds, [true][predicted]
  nlohmann::json config = nlohmann::json::object();

  std::vector<double> fold_accuracies() const;
  // Recomputes mean/std from the fold list.
  void finalize();
};

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

// "4.2M" style; "N/A" when absent.
std::string format_params(std::optional<std::size_t> params);

std::string table_header(std::size_t folds);
// Method, Params, Mean %, Std %, then each fold %, two decimals.
std::string table_row(const MetricsReport& report);

void write_report_json(const MetricsReport& report, const std::filesystem::path& path);
// One row per fold: method,fold,accuracy,test_size,seconds,best_epoch.
void write_folds_csv(const MetricsReport& report, const std::filesystem::path& path);
// One row per fold and epoch: method,fold,epoch,lr,train_loss,val_accuracy.
void write_curves_csv(const MetricsReport& report, const std::filesystem::path& path);

}  // namespace efsign

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "efsign/tensor.hpp"

namespace efsign {

// Dense row-major matrix of 64-bit features.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static Matrix from_tensor(const Tensor& t);  // N x D float -> double
  Matrix select_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// 1 / (D * population variance of all entries).
double gamma_scale(const Matrix& features);

double rbf_kernel(std::span<const double> x, std::span<const double> y, double gamma);

// Soft-margin dual over a precomputed kernel matrix (n x n, row-major) with
// labels in {-1, +1}: maximize sum(a) - 1/2 sum_ij a_i a_j y_i y_j K_ij
// subject to 0 <= a_i <= C and sum(a_i y_i) = 0. Decision value for a new
// point is sum_i a_i y_i K(x_i, x) + bias.
struct SmoResult {
  std::vector<double> alpha;
  double bias = 0.0;
  double objective = 0.0;  // dual objective (maximized form)
  std::size_t iterations = 0;
  bool converged = false;
  double kkt_gap = 0.0;  // maximal violating-pair gap at exit
};

struct SmoOptions {
  double tolerance = 1e-3;
  std::size_t max_iterations = 10'000'000;
};

SmoResult smo_solve(std::span<const double> kernel, std::span<const int> y, double C, const SmoOptions& options = {});

double svm_dual_objective(std::span<const double> kernel, std::span<const int> y, std::span<const double> alpha);

struct BinarySvm {
  int positive = 0;  // class voted for when the decision value is > 0
  int negative = 1;  // -1 for one-vs-rest machines
  Matrix support_vectors;
  std::vector<double> coef;  // alpha_i * y_i
  double bias = 0.0;
  double dual_objective = 0.0;
  std::size_t iterations = 0;
  bool converged = false;

  double decision(std::span<const double> x, double gamma) const;
};

struct SvmConfig {
  double C = 10.0;
  double gamma = 0.0;  // <= 0 selects gamma_scale
  double tolerance = 1e-3;
  double support_cutoff = 1e-8;
  bool one_vs_rest = false;
};

struct SvmModel {
  double C = 10.0;
  double gamma = 0.0;
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  bool one_vs_rest = false;
  std::vector<BinarySvm> machines;

  std::size_t support_vector_count() const;
};

SvmModel svm_train(const Matrix& features, std::span<const int> labels, const SvmConfig& cfg = {});

// One-vs-one: majority vote; ties go to the class with the largest summed
// |decision| over the machines it won, then to the lowest index.
// One-vs-rest: largest decision value, ties to the lowest index.
std::vector<int> svm_predict(const SvmModel& model, const Matrix& features);

struct KnnModel {
  Matrix features;
  std::vector<int> labels;
  std::size_t k = 5;
  std::size_t num_classes = 0;
};

KnnModel knn_fit(const Matrix& features, std::span<const int> labels, std::size_t k = 5);

// Uniform vote among the k Euclidean-nearest rows; distance ties go to the
// lower stored index, vote ties to the lowest class index.
std::vector<int> knn_predict(const KnnModel& model, const Matrix& queries);

struct LogRegConfig {
  double C = 1.0;
  std::size_t max_iter = 1000;
  double grad_tolerance = 1e-5;
  std::size_t history = 10;
};

struct LogRegModel {
  Matrix weights;  // K x D
  std::vector<double> bias;
  double C = 1.0;
  std::size_t iterations = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  bool converged = false;
};

// Mean multinomial cross-entropy + ||W||^2 / (2 C N); bias unregularized.
// Writes the gradient (weights row-major, then bias) when `grad` is non-null.
double logreg_objective(const Matrix& weights, std::span<const double> bias, const Matrix& features,
                        std::span<const int> labels, double C, std::vector<double>* grad = nullptr);

LogRegModel logreg_train(const Matrix& features, std::span<const int> labels, std::size_t num_classes,
                         const LogRegConfig& cfg = {});

Matrix logreg_predict_proba(const LogRegModel& model, const Matrix& features);
std::vector<int> logreg_predict(const LogRegModel& model, const Matrix& features);

enum class ClassicalMethod { svm, knn, logreg };

std::string classical_method_name(ClassicalMethod method);
bool parse_classical_method(const std::string& name, ClassicalMethod* out);

// Fits the chosen classifier on the training rows and predicts the test rows.
std::vector<int> fit_predict(ClassicalMethod method, const Matrix& train, std::span<const int> train_labels,
                             const Matrix& test, std::size_t num_classes);

}  // namespace efsign

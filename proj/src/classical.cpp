#include "efsign/classical.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "efsign/errors.hpp"

namespace efsign {

Matrix Matrix::from_tensor(const Tensor& t) {
  if (t.rank() != 2) throw InputError("feature tensor must be N x D, got " + shape_str(t.shape()));
  Matrix m(t.dim(0), t.dim(1));
  const auto src = t.data();
  std::copy(src.begin(), src.end(), m.data.begin());
  return m;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw InputError("row index " + std::to_string(indices[i]) + " out of range");
    const auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double gamma_scale(const Matrix& features) {
  if (features.rows < 2 || features.cols < 1) throw InputError("gamma_scale: need at least two feature rows");
  const double n = static_cast<double>(features.data.size());
  double mean = 0.0;
  for (double v : features.data) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : features.data) var += (v - mean) * (v - mean);
  var /= n;
  if (!(var > 0.0)) throw InputError("gamma_scale: features have zero variance");
  return 1.0 / (static_cast<double>(features.cols) * var);
}

namespace {

double squared_distance(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

void check_labels(std::span<const int> labels, std::size_t rows, const char* where) {
  if (labels.size() != rows) {
    throw InputError(std::string(where) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (l < 0) throw InputError(std::string(where) + ": negative class label");
  }
}

std::size_t class_count(std::span<const int> labels) {
  return labels.empty() ? 0 : static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

}  // namespace

double rbf_kernel(std::span<const double> x, std::span<const double> y, double gamma) {
  if (x.size() != y.size()) {
    throw InputError("rbf_kernel: length mismatch " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  }
  if (!(gamma > 0.0)) throw InputError("rbf_kernel: gamma must be positive");
  return std::exp(-gamma * squared_distance(x, y));
}

double svm_dual_objective(std::span<const double> kernel, std::span<const int> y, std::span<const double> alpha) {
  const std::size_t n = y.size();
  double lin = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lin += alpha[i];
    if (alpha[i] == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel[i * n + j];
  }
  return lin - 0.5 * quad;
}

SmoResult smo_solve(std::span<const double> kernel, std::span<const int> y, double C, const SmoOptions& options) {
  const std::size_t n = y.size();
  if (kernel.size() != n * n) throw InputError("smo_solve: kernel matrix does not match label count");
  if (!(C > 0.0)) throw InputError("smo_solve: C must be positive");
  bool has_pos = false, has_neg = false;
  for (int v : y) {
    if (v == 1) has_pos = true;
    else if (v == -1) has_neg = true;
    else throw InputError("smo_solve: labels must be -1 or +1");
  }
  if (!has_pos || !has_neg) throw InputError("smo_solve: both classes must be present");

  constexpr double kTau = 1e-12;
  auto Q = [&](std::size_t i, std::size_t j) { return static_cast<double>(y[i] * y[j]) * kernel[i * n + j]; };
  std::vector<double> alpha(n, 0.0), G(n, -1.0);
  auto in_up = [&](std::size_t t) { return (y[t] == 1 && alpha[t] < C) || (y[t] == -1 && alpha[t] > 0.0); };
  auto in_low = [&](std::size_t t) { return (y[t] == 1 && alpha[t] > 0.0) || (y[t] == -1 && alpha[t] < C); };

  SmoResult res;
  while (res.iterations < options.max_iterations) {
    double gmax = -std::numeric_limits<double>::infinity();
    std::size_t i = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (in_up(t) && -y[t] * G[t] > gmax) {
        gmax = -y[t] * G[t];
        i = t;
      }
    }
    double gmax2 = -std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    std::size_t j = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      gmax2 = std::max(gmax2, static_cast<double>(y[t]) * G[t]);
      if (i == n) continue;
      const double b = gmax + y[t] * G[t];
      if (b > 0.0) {
        double a = kernel[i * n + i] + kernel[t * n + t] - 2.0 * kernel[i * n + t];
        if (a <= 0.0) a = kTau;
        const double score = -(b * b) / a;
        if (score < best) {
          best = score;
          j = t;
        }
      }
    }
    res.kkt_gap = gmax + gmax2;
    if (i == n || j == n || gmax + gmax2 < options.tolerance) {
      res.converged = true;
      break;
    }
    ++res.iterations;

    const double old_i = alpha[i], old_j = alpha[j];
    if (y[i] != y[j]) {
      double quad = kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j];
      if (quad <= 0.0) quad = kTau;
      const double delta = (-G[i] - G[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0.0) {
        if (alpha[j] < 0.0) {
          alpha[j] = 0.0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = -diff;
      }
      if (diff > 0.0) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = C - diff;
        }
      } else if (alpha[j] > C) {
        alpha[j] = C;
        alpha[i] = C + diff;
      }
    } else {
      double quad = kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j];
      if (quad <= 0.0) quad = kTau;
      const double delta = (G[i] - G[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > C) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = sum - C;
        }
      } else if (alpha[j] < 0.0) {
        alpha[j] = 0.0;
        alpha[i] = sum;
      }
      if (sum > C) {
        if (alpha[j] > C) {
          alpha[j] = C;
          alpha[i] = sum - C;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = sum;
      }
    }
    const double di = alpha[i] - old_i, dj = alpha[j] - old_j;
    for (std::size_t t = 0; t < n; ++t) G[t] += Q(t, i) * di + Q(t, j) * dj;
  }

  // Bias from free multipliers, else the midpoint of the feasible interval.
  double sum_free = 0.0, ub = std::numeric_limits<double>::infinity(), lb = -ub;
  std::size_t free_count = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * G[t];
    if (alpha[t] >= C) {
      if (y[t] == -1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0.0) {
      if (y[t] == 1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++free_count;
      sum_free += yg;
    }
  }
  const double rho = free_count > 0 ? sum_free / static_cast<double>(free_count) : (ub + lb) / 2.0;
  res.bias = -rho;
  res.alpha = std::move(alpha);
  res.objective = svm_dual_objective(kernel, y, res.alpha);
  return res;
}

double BinarySvm::decision(std::span<const double> x, double gamma) const {
  double s = bias;
  for (std::size_t i = 0; i < coef.size(); ++i) s += coef[i] * rbf_kernel(support_vectors.row(i), x, gamma);
  return s;
}

std::size_t SvmModel::support_vector_count() const {
  std::size_t n = 0;
  for (const auto& m : machines) n += m.coef.size();
  return n;
}

namespace {

BinarySvm fit_binary(const Matrix& features, std::span<const std::size_t> rows, std::span<const int> y,
                     const SvmConfig& cfg, double gamma) {
  const std::size_t n = rows.size();
  std::vector<double> K(n * n);
  for (std::size_t a = 0; a < n; ++a) {
    K[a * n + a] = 1.0;
    for (std::size_t b = a + 1; b < n; ++b) {
      const double v = std::exp(-gamma * squared_distance(features.row(rows[a]), features.row(rows[b])));
      K[a * n + b] = v;
      K[b * n + a] = v;
    }
  }
  SmoOptions opts;
  opts.tolerance = cfg.tolerance;
  const SmoResult r = smo_solve(K, y, cfg.C, opts);
  BinarySvm m;
  std::vector<std::size_t> keep;
  for (std::size_t a = 0; a < n; ++a) {
    if (r.alpha[a] > cfg.support_cutoff) keep.push_back(a);
  }
  m.support_vectors = Matrix(keep.size(), features.cols);
  for (std::size_t s = 0; s < keep.size(); ++s) {
    const auto src = features.row(rows[keep[s]]);
    std::copy(src.begin(), src.end(), m.support_vectors.row(s).begin());
    m.coef.push_back(r.alpha[keep[s]] * y[keep[s]]);
  }
  m.bias = r.bias;
  m.dual_objective = r.objective;
  m.iterations = r.iterations;
  m.converged = r.converged;
  return m;
}

}  // namespace

SvmModel svm_train(const Matrix& features, std::span<const int> labels, const SvmConfig& cfg) {
  check_labels(labels, features.rows, "svm_train");
  const std::size_t K = class_count(labels);
  std::vector<std::vector<std::size_t>> members(K);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::size_t present = 0;
  for (const auto& m : members) present += m.empty() ? 0 : 1;
  if (present < 2) throw InputError("svm_train: need at least two classes with samples");

  SvmModel model;
  model.C = cfg.C;
  model.gamma = cfg.gamma > 0.0 ? cfg.gamma : gamma_scale(features);
  model.num_classes = K;
  model.dim = features.cols;
  model.one_vs_rest = cfg.one_vs_rest;

  if (cfg.one_vs_rest) {
    std::vector<std::size_t> rows(features.rows);
    std::iota(rows.begin(), rows.end(), 0);
    for (std::size_t c = 0; c < K; ++c) {
      if (members[c].empty()) continue;
      std::vector<int> y(labels.size());
      for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == static_cast<int>(c) ? 1 : -1;
      BinarySvm m = fit_binary(features, rows, y, cfg, model.gamma);
      m.positive = static_cast<int>(c);
      m.negative = -1;
      model.machines.push_back(std::move(m));
    }
    return model;
  }

  for (std::size_t a = 0; a < K; ++a) {
    if (members[a].empty()) continue;
    for (std::size_t b = a + 1; b < K; ++b) {
      if (members[b].empty()) continue;
      std::vector<std::size_t> rows;
      std::vector<int> y;
      std::merge(members[a].begin(), members[a].end(), members[b].begin(), members[b].end(), std::back_inserter(rows));
      for (std::size_t r : rows) y.push_back(labels[r] == static_cast<int>(a) ? 1 : -1);
      BinarySvm m = fit_binary(features, rows, y, cfg, model.gamma);
      m.positive = static_cast<int>(a);
      m.negative = static_cast<int>(b);
      model.machines.push_back(std::move(m));
    }
  }
  return model;
}

std::vector<int> svm_predict(const SvmModel& model, const Matrix& features) {
  if (features.cols != model.dim) {
    throw InputError("svm_predict: feature dimension " + std::to_string(features.cols) + " does not match model " +
                     std::to_string(model.dim));
  }
  std::vector<int> out(features.rows);
  for (std::size_t r = 0; r < features.rows; ++r) {
    const auto x = features.row(r);
    if (model.one_vs_rest) {
      int best = -1;
      double best_val = -std::numeric_limits<double>::infinity();
      for (const auto& m : model.machines) {
        const double d = m.decision(x, model.gamma);
        if (d > best_val) {
          best_val = d;
          best = m.positive;
        }
      }
      out[r] = best;
      continue;
    }
    std::vector<std::size_t> votes(model.num_classes, 0);
    std::vector<double> strength(model.num_classes, 0.0);
    for (const auto& m : model.machines) {
      const double d = m.decision(x, model.gamma);
      const int winner = d > 0.0 ? m.positive : m.negative;
      ++votes[winner];
      strength[winner] += std::abs(d);
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < model.num_classes; ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && strength[c] > strength[best])) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

KnnModel knn_fit(const Matrix& features, std::span<const int> labels, std::size_t k) {
  check_labels(labels, features.rows, "knn_fit");
  if (k < 1) throw InputError("knn: k must be at least 1");
  if (k > features.rows) {
    throw InputError("knn: k=" + std::to_string(k) + " exceeds the " + std::to_string(features.rows) + " stored rows");
  }
  KnnModel m;
  m.features = features;
  m.labels.assign(labels.begin(), labels.end());
  m.k = k;
  m.num_classes = class_count(labels);
  return m;
}

std::vector<int> knn_predict(const KnnModel& model, const Matrix& queries) {
  if (model.k > model.features.rows) {
    throw InputError("knn: k=" + std::to_string(model.k) + " exceeds the " + std::to_string(model.features.rows) +
                     " stored rows");
  }
  if (queries.cols != model.features.cols) throw InputError("knn_predict: feature dimension mismatch");
  const std::size_t n = model.features.rows;
  std::vector<int> out(queries.rows);
  std::vector<std::pair<double, std::size_t>> dist(n);
  std::vector<std::size_t> votes(model.num_classes);
  for (std::size_t q = 0; q < queries.rows; ++q) {
    for (std::size_t i = 0; i < n; ++i) dist[i] = {squared_distance(queries.row(q), model.features.row(i)), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(model.k), dist.end());
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t j = 0; j < model.k; ++j) ++votes[model.labels[dist[j].second]];
    out[q] = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

double logreg_objective(const Matrix& weights, std::span<const double> bias, const Matrix& features,
                        std::span<const int> labels, double C, std::vector<double>* grad) {
  const std::size_t K = weights.rows, D = weights.cols, N = features.rows;
  if (features.cols != D || bias.size() != K || labels.size() != N || N == 0) {
    throw InputError("logreg_objective: inconsistent shapes");
  }
  if (grad) grad->assign(K * D + K, 0.0);
  std::vector<double> z(K);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(N);
  for (std::size_t n = 0; n < N; ++n) {
    const auto x = features.row(n);
    for (std::size_t k = 0; k < K; ++k) {
      double s = bias[k];
      const auto w = weights.row(k);
      for (std::size_t d = 0; d < D; ++d) s += w[d] * x[d];
      z[k] = s;
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    const int t = labels[n];
    if (t < 0 || static_cast<std::size_t>(t) >= K) throw InputError("logreg_objective: label out of range");
    loss += lse - z[t];
    if (!grad) continue;
    for (std::size_t k = 0; k < K; ++k) {
      const double coef = (std::exp(z[k] - lse) - (static_cast<int>(k) == t ? 1.0 : 0.0)) * inv_n;
      double* gw = grad->data() + k * D;
      for (std::size_t d = 0; d < D; ++d) gw[d] += coef * x[d];
      (*grad)[K * D + k] += coef;
    }
  }
  double reg = 0.0;
  const double reg_scale = 1.0 / (C * static_cast<double>(N));
  for (std::size_t i = 0; i < K * D; ++i) {
    reg += weights.data[i] * weights.data[i];
    if (grad) (*grad)[i] += reg_scale * weights.data[i];
  }
  return loss * inv_n + 0.5 * reg_scale * reg;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

LogRegModel logreg_train(const Matrix& features, std::span<const int> labels, std::size_t num_classes,
                         const LogRegConfig& cfg) {
  check_labels(labels, features.rows, "logreg_train");
  if (num_classes < 2) throw InputError("logreg_train: need at least two classes");
  if (class_count(labels) > num_classes) throw InputError("logreg_train: label exceeds class count");
  if (!(cfg.C > 0.0)) throw InputError("logreg_train: C must be positive");
  const std::size_t K = num_classes, D = features.cols, P = K * D + K;

  LogRegModel model;
  model.C = cfg.C;
  model.weights = Matrix(K, D);
  model.bias.assign(K, 0.0);
  std::vector<double> theta(P, 0.0), grad, trial(P), trial_grad, dir(P);

  auto eval = [&](const std::vector<double>& th, std::vector<double>* g) {
    std::copy(th.begin(), th.begin() + static_cast<std::ptrdiff_t>(K * D), model.weights.data.begin());
    std::copy(th.begin() + static_cast<std::ptrdiff_t>(K * D), th.end(), model.bias.begin());
    return logreg_objective(model.weights, model.bias, features, labels, cfg.C, g);
  };

  double f = eval(theta, &grad);
  std::vector<std::vector<double>> s_hist, y_hist;
  std::vector<double> rho_hist;
  std::size_t iter = 0;
  double gnorm = std::sqrt(dot(grad, grad));
  while (gnorm > cfg.grad_tolerance && iter < cfg.max_iter) {
    // Two-loop recursion.
    dir = grad;
    std::vector<double> a(s_hist.size());
    for (std::size_t h = s_hist.size(); h-- > 0;) {
      a[h] = rho_hist[h] * dot(s_hist[h], dir);
      for (std::size_t p = 0; p < P; ++p) dir[p] -= a[h] * y_hist[h][p];
    }
    double h0 = 1.0 / std::max(gnorm, 1.0);
    if (!s_hist.empty()) h0 = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
    for (auto& v : dir) v *= h0;
    for (std::size_t h = 0; h < s_hist.size(); ++h) {
      const double b = rho_hist[h] * dot(y_hist[h], dir);
      for (std::size_t p = 0; p < P; ++p) dir[p] += s_hist[h][p] * (a[h] - b);
    }
    for (auto& v : dir) v = -v;
    double slope = dot(grad, dir);
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      for (std::size_t p = 0; p < P; ++p) dir[p] = -grad[p] / std::max(gnorm, 1.0);
      slope = dot(grad, dir);
    }

    // Backtracking for sufficient decrease.
    double step = 1.0, f_new = f;
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      for (std::size_t p = 0; p < P; ++p) trial[p] = theta[p] + step * dir[p];
      f_new = eval(trial, &trial_grad);
      if (!std::isfinite(f_new)) {
        throw NumericError("logreg_train: non-finite objective at iteration " + std::to_string(iter + 1));
      }
      if (f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    ++iter;
    if (!accepted) break;

    std::vector<double> s(P), yv(P);
    for (std::size_t p = 0; p < P; ++p) {
      s[p] = trial[p] - theta[p];
      yv[p] = trial_grad[p] - grad[p];
    }
    const double sy = dot(s, yv);
    if (sy > 1e-12) {
      if (s_hist.size() == cfg.history) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
    }
    theta.swap(trial);
    grad.swap(trial_grad);
    f = f_new;
    gnorm = std::sqrt(dot(grad, grad));
  }
  f = eval(theta, nullptr);
  model.iterations = iter;
  model.objective = f;
  model.grad_norm = gnorm;
  model.converged = gnorm <= cfg.grad_tolerance;
  return model;
}

Matrix logreg_predict_proba(const LogRegModel& model, const Matrix& features) {
  const std::size_t K = model.weights.rows;
  if (features.cols != model.weights.cols) throw InputError("logreg_predict: feature dimension mismatch");
  Matrix out(features.rows, K);
  for (std::size_t n = 0; n < features.rows; ++n) {
    auto row = out.row(n);
    for (std::size_t k = 0; k < K; ++k) row[k] = model.bias[k] + dot(model.weights.row(k), features.row(n));
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : row) v /= sum;
  }
  return out;
}

std::vector<int> logreg_predict(const LogRegModel& model, const Matrix& features) {
  const Matrix p = logreg_predict_proba(model, features);
  std::vector<int> out(p.rows);
  for (std::size_t n = 0; n < p.rows; ++n) {
    const auto row = p.row(n);
    out[n] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::string classical_method_name(ClassicalMethod method) {
  switch (method) {
    case ClassicalMethod::svm: return "svm";
    case ClassicalMethod::knn: return "knn";
    case ClassicalMethod::logreg: return "logreg";
  }
  return "unknown";
}

bool parse_classical_method(const std::string& name, ClassicalMethod* out) {
  for (auto m : {ClassicalMethod::svm, ClassicalMethod::knn, ClassicalMethod::logreg}) {
    if (classical_method_name(m) == name) {
      if (out) *out = m;
      return true;
    }
  }
  return false;
}

std::vector<int> fit_predict(ClassicalMethod method, const Matrix& train, std::span<const int> train_labels,
                             const Matrix& test, std::size_t num_classes) {
  switch (method) {
    case ClassicalMethod::svm: return svm_predict(svm_train(train, train_labels), test);
    case ClassicalMethod::knn: return knn_predict(knn_fit(train, train_labels), test);
    case ClassicalMethod::logreg: return logreg_predict(logreg_train(train, train_labels, num_classes), test);
  }
  return {};
}

}  // namespace efsign

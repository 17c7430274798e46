#include <cmath>
#include <numeric>

#include "doctest.h"
#include "efsign/classical.hpp"
#include "support/oracles.hpp"

using namespace efsign;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, efsign::Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data) v = scale * rng.normal();
  return m;
}

std::vector<double> gram(const Matrix& x, double gamma) {
  std::vector<double> k(x.rows * x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.rows; ++j) k[i * x.rows + j] = rbf_kernel(x.row(i), x.row(j), gamma);
  return k;
}

// Gaussian blobs, one per class, centered on scaled basis vectors.
void blobs(std::size_t per_class, std::size_t classes, std::size_t dim, double spread, efsign::Rng& rng, Matrix* x,
           std::vector<int>* y) {
  *x = Matrix(per_class * classes, dim);
  y->clear();
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      for (std::size_t d = 0; d < dim; ++d) (*x)(r, d) = (d == c % dim ? 3.0 : 0.0) + spread * rng.normal();
      y->push_back(static_cast<int>(c));
    }
}

constexpr double kOracleStopTolerance = 1e-6;

}  // namespace

TEST_CASE("gamma_scale and rbf_kernel") {
  Matrix m(2, 2);
  m.data = {0.0, 2.0, 4.0, 6.0};
  // mean 3, population variance (9 + 1 + 1 + 9) / 4 = 5
  CHECK(gamma_scale(m) == doctest::Approx(1.0 / (2.0 * 5.0)));
  CHECK_THROWS_AS(gamma_scale(Matrix(1, 3)), InputError);
  CHECK_THROWS_AS(gamma_scale(Matrix(3, 3, 1.0)), InputError);
  const std::vector<double> a{1.0, 2.0}, b{2.0, 0.0};
  CHECK(rbf_kernel(a, a, 0.7) == 1.0);
  CHECK(rbf_kernel(a, b, 0.5) == doctest::Approx(std::exp(-0.5 * 5.0)));
  CHECK_THROWS_AS(rbf_kernel(a, std::vector<double>{1.0}, 0.5), InputError);
  CHECK_THROWS_AS(rbf_kernel(a, b, 0.0), InputError);
}

TEST_CASE("SMO dual objective matches the projected-gradient QP oracle") {
  efsign::Rng rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = 6 + rng.below(15);  // 6..20 points
    const Matrix x = random_matrix(n, 3, rng);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = (x(i, 0) + 0.5 * rng.normal() > 0) ? 1 : -1;
    y[0] = 1;
    y[1] = -1;
    const double C = trial % 2 ? 1.0 : 10.0;
    const auto K = gram(x, 0.5);
    SmoOptions tight;
    tight.tolerance = kOracleStopTolerance;
    const auto smo = smo_solve(K, y, C, tight);
    CHECK(smo.converged);
    CHECK(smo.objective == doctest::Approx(svm_dual_objective(K, y, smo.alpha)).epsilon(1e-12));
    double ya = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK((smo.alpha[i] >= 0.0 && smo.alpha[i] <= C));
      ya += smo.alpha[i] * y[i];
    }
    CHECK(std::abs(ya) < 1e-10);
    const double ref = oracle::dual_objective(K, y, oracle::qp_oracle(K, y, C));
    worst = std::max(worst, std::abs(smo.objective - ref));
    CHECK(std::abs(smo.objective - ref) <= 1e-6);
  }
  MESSAGE("largest SMO vs oracle objective gap " << worst);
}

TEST_CASE("XOR is separated with four support vectors") {
  Matrix x(4, 2);
  x.data = {1, 1, -1, -1, 1, -1, -1, 1};
  const std::vector<int> y{0, 0, 1, 1};
  SvmConfig cfg;
  cfg.C = 10.0;
  const auto model = svm_train(x, y, cfg);
  CHECK(model.gamma == doctest::Approx(0.5));
  CHECK(model.support_vector_count() == 4);
  CHECK(svm_predict(model, x) == y);
}

TEST_CASE("multiclass SVM on separable blobs") {
  efsign::Rng rng(22);
  Matrix x;
  std::vector<int> y;
  blobs(15, 4, 4, 0.3, rng, &x, &y);
  const auto ovo = svm_train(x, y);
  CHECK(ovo.machines.size() == 6);
  CHECK(svm_predict(ovo, x) == y);
  SvmConfig ovr;
  ovr.one_vs_rest = true;
  const auto r = svm_train(x, y, ovr);
  CHECK(r.machines.size() == 4);
  CHECK(svm_predict(r, x) == y);
  CHECK_THROWS_AS(svm_train(x, std::vector<int>(x.rows, 0)), InputError);
}

TEST_CASE("KNN matches all-pairs brute force") {
  efsign::Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 10 + rng.below(40), q = 1 + rng.below(20), d = 1 + rng.below(5);
    const std::size_t classes = 2 + rng.below(4);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n, 9));
    Matrix train(n, d), queries(q, d);
    // Small integer grid so distance and vote ties actually occur.
    for (auto& v : train.data) v = static_cast<double>(rng.below(4));
    for (auto& v : queries.data) v = static_cast<double>(rng.below(4));
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i < classes ? i : rng.below(classes));
    const auto model = knn_fit(train, labels, k);
    CHECK(knn_predict(model, queries) == oracle::brute_knn(train, labels, queries, k));
  }
  Matrix m(3, 1);
  CHECK_THROWS_AS(knn_fit(m, std::vector<int>{0, 1, 0}, 4), InputError);
  CHECK_THROWS_AS(knn_fit(m, std::vector<int>{0, 1, 0}, 0), InputError);
}

TEST_CASE("logistic regression gradient and convergence") {
  efsign::Rng rng(24);
  Matrix x;
  std::vector<int> y;
  blobs(20, 3, 5, 1.0, rng, &x, &y);
  SUBCASE("analytic gradient matches central differences") {
    Matrix w = random_matrix(3, 5, rng, 0.3);
    std::vector<double> b{0.1, -0.2, 0.05};
    std::vector<double> g;
    logreg_objective(w, b, x, y, 1.0, &g);
    double worst = 0.0;
    const double h = 1e-6;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double& ref = i < w.data.size() ? w.data[i] : b[i - w.data.size()];
      const double orig = ref;
      ref = orig + h;
      const double up = logreg_objective(w, b, x, y, 1.0);
      ref = orig - h;
      const double down = logreg_objective(w, b, x, y, 1.0);
      ref = orig;
      const double num = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), 1e-6}));
    }
    CHECK(worst <= 1e-5);
  }
  SUBCASE("L-BFGS reaches the gradient tolerance") {
    const auto model = logreg_train(x, y, 3);
    CHECK(model.converged);
    CHECK(model.grad_norm <= 1e-5);
    std::vector<double> g;
    logreg_objective(model.weights, model.bias, x, y, model.C, &g);
    double norm = 0.0;
    for (double v : g) norm += v * v;
    CHECK(std::sqrt(norm) <= 1e-5);
    const auto proba = logreg_predict_proba(model, x);
    for (std::size_t i = 0; i < proba.rows; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += proba(i, c);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    const auto pred = logreg_predict(model, x);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
    CHECK(correct >= 55);
  }
}

TEST_CASE("classical method names and fit_predict") {
  ClassicalMethod m;
  CHECK(parse_classical_method("svm", &m));
  CHECK(m == ClassicalMethod::svm);
  CHECK(parse_classical_method("logreg", &m));
  CHECK_FALSE(parse_classical_method("forest", &m));
  CHECK(classical_method_name(ClassicalMethod::knn) == "knn");
  efsign::Rng rng(25);
  Matrix x;
  std::vector<int> y;
  blobs(10, 3, 3, 0.2, rng, &x, &y);
  for (auto method : {ClassicalMethod::svm, ClassicalMethod::knn, ClassicalMethod::logreg})
    CHECK(fit_predict(method, x, y, x, 3) == y);
}

TEST_CASE("gamma and kernel hand values") {
  Matrix one(2, 1);
  one.data = {-1.0, 1.0};
  CHECK(gamma_scale(one) == doctest::Approx(1.0));
  efsign::Rng rng(26);
  Matrix m = random_matrix(10, 6, rng);
  Matrix m2 = m;
  for (auto& v : m2.data) v *= 2.0;
  CHECK(gamma_scale(m2) == doctest::Approx(gamma_scale(m) / 4.0));
  const std::vector<double> a{0.0, 0.0}, b{1.0, 1.0};
  CHECK(rbf_kernel(a, b, 0.5) == doctest::Approx(std::exp(-1.0)));
  for (int i = 0; i < 20; ++i) {
    const Matrix p = random_matrix(2, 4, rng);
    CHECK(rbf_kernel(p.row(0), p.row(1), 0.3) == rbf_kernel(p.row(1), p.row(0), 0.3));
  }
}

TEST_CASE("SVM symmetry, 0/1 XOR and permutation invariance") {
  SUBCASE("two points split midway") {
    Matrix x(2, 1);
    x.data = {-1.0, 3.0};
    const std::vector<int> y{0, 1};
    SvmConfig cfg;
    cfg.gamma = 0.2;
    const auto model = svm_train(x, y, cfg);
    REQUIRE(model.machines.size() == 1);
    const auto& m = model.machines[0];
    REQUIRE(m.coef.size() == 2);
    CHECK(std::abs(m.coef[0]) == doctest::Approx(std::abs(m.coef[1])));
    const std::vector<double> mid{1.0};
    CHECK(std::abs(m.decision(mid, cfg.gamma)) < 1e-9);
  }
  SUBCASE("XOR on the unit square") {
    Matrix x(4, 2);
    x.data = {0, 0, 1, 1, 0, 1, 1, 0};
    const std::vector<int> y{0, 0, 1, 1};
    SvmConfig cfg;
    cfg.C = 10.0;
    cfg.gamma = 1.0;
    const auto model = svm_train(x, y, cfg);
    CHECK(svm_predict(model, x) == y);
    CHECK(model.support_vector_count() == 4);
  }
  SUBCASE("training order does not change predictions") {
    efsign::Rng rng(27);
    Matrix x;
    std::vector<int> y;
    blobs(8, 3, 3, 0.8, rng, &x, &y);
    std::vector<std::size_t> perm(x.rows);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    const Matrix xp = x.select_rows(perm);
    std::vector<int> yp;
    for (std::size_t i : perm) yp.push_back(y[i]);
    const Matrix q = random_matrix(25, 3, rng, 2.0);
    CHECK(svm_predict(svm_train(x, y), q) == svm_predict(svm_train(xp, yp), q));
    CHECK(logreg_predict(logreg_train(x, y, 3), q) == logreg_predict(logreg_train(xp, yp, 3), q));
  }
  SUBCASE("dimension mismatch") {
    Matrix x(4, 2);
    x.data = {0, 0, 1, 1, 0, 1, 1, 0};
    const auto model = svm_train(x, std::vector<int>{0, 0, 1, 1});
    CHECK_THROWS_AS(svm_predict(model, Matrix(1, 3)), InputError);
  }
}

TEST_CASE("KNN hand examples") {
  Matrix x(5, 1);
  x.data = {0.1, -0.1, 0.05, 1.3, -1.3};
  const std::vector<int> y{0, 0, 0, 1, 1};
  Matrix q(1, 1);
  CHECK(knn_predict(knn_fit(x, y, 5), q) == std::vector<int>{0});
  q.data = {1.3};
  CHECK(knn_predict(knn_fit(x, y, 1), q) == std::vector<int>{1});
  efsign::Rng rng(28);
  Matrix t = random_matrix(20, 3, rng);
  std::vector<int> ty(20);
  for (std::size_t i = 0; i < 20; ++i) ty[i] = static_cast<int>(rng.below(3));
  Matrix dup(40, 3);
  std::vector<int> dy;
  for (std::size_t i = 0; i < 40; ++i) {
    for (std::size_t d = 0; d < 3; ++d) dup(i, d) = t(i / 2, d);
    dy.push_back(ty[i / 2]);
  }
  const Matrix queries = random_matrix(30, 3, rng);
  CHECK(knn_predict(knn_fit(dup, dy, 4), queries) == oracle::brute_knn(dup, dy, queries, 4));
}

TEST_CASE("logistic regression edge cases") {
  efsign::Rng rng(29);
  SUBCASE("zero iterations gives uniform probabilities") {
    Matrix x = random_matrix(10, 3, rng);
    std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
    LogRegConfig cfg;
    cfg.max_iter = 0;
    const auto proba = logreg_predict_proba(logreg_train(x, y, 4, cfg), x);
    for (double p : proba.data) CHECK(p == doctest::Approx(0.25));
  }
  SUBCASE("mirrored 1-D data") {
    Matrix x(8, 1);
    x.data = {-2, -1.5, -1, -0.5, 0.5, 1, 1.5, 2};
    const std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
    const auto m = logreg_train(x, y, 2);
    CHECK(std::abs(m.bias[0] - m.bias[1]) < 1e-6);
    const auto p = logreg_predict_proba(m, Matrix(1, 1));
    CHECK(p(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
  }
  SUBCASE("returned objective is below random parameter points") {
    Matrix x;
    std::vector<int> y;
    blobs(12, 3, 4, 1.0, rng, &x, &y);
    const auto m = logreg_train(x, y, 3);
    CHECK(m.objective == doctest::Approx(logreg_objective(m.weights, m.bias, x, y, m.C)).epsilon(1e-12));
    for (int i = 0; i < 100; ++i) {
      Matrix w = random_matrix(3, 4, rng);
      std::vector<double> b{rng.normal(), rng.normal(), rng.normal()};
      CHECK(m.objective <= logreg_objective(w, b, x, y, m.C));
    }
  }
}

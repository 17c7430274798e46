#include <cmath>

#include "doctest.h"
#include "efsign/attention.hpp"
#include "support/oracles.hpp"

using namespace efsign;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TensorD random_d(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

SEWeights<double> se_vars(const BasicSEBlock<double>& b) {
  return {Var<double>::constant(b.w1), Var<double>::constant(b.b1), Var<double>::constant(b.w2),
          Var<double>::constant(b.b2)};
}

}  // namespace

TEST_CASE("SE hand example") {
  BasicSEBlock<double> b;
  b.channels = 2;
  b.reduction = 2;
  b.w1 = TensorD({1, 2}, 1.0);
  b.b1 = TensorD({1}, 0.0);
  b.w2 = TensorD({2, 1}, 1.0);
  b.b2 = TensorD({2}, 0.0);
  const TensorD x({1, 2, 1, 1}, std::vector<double>{4.0, 2.0});
  const TensorD y = se_forward(b, x);
  CHECK(y[0] == doctest::Approx(4.0 * sigmoid(6.0)).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(2.0 * sigmoid(6.0)).epsilon(1e-12));
  CHECK(std::abs(y[0] - 3.9901) < 5e-5);
  CHECK(std::abs(y[1] - 1.9951) < 5e-5);
}

TEST_CASE("SE with zero excitation weights halves the input") {
  Rng rng(1);
  auto b = BasicSEBlock<double>::make(8, 4, rng);
  b.w2.fill(0.0);
  b.b2.fill(0.0);
  const TensorD x = random_d({2, 8, 3, 3}, rng);
  const TensorD y = se_forward(b, x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == 0.5 * x[i]);
}

TEST_CASE("SE parameter counts") {
  CHECK(SEBlock::hidden_for(1280, 16) == 80);
  CHECK(SEBlock::parameter_count_for(1280, 16) == 206160);
  Rng rng(2);
  const auto b = SEBlock::make(1280, 16, rng);
  CHECK(b.w1.numel() + b.b1.numel() + b.w2.numel() + b.b2.numel() == 206160);
  CHECK(SEBlock::hidden_for(8, 16) == 1);
}

TEST_CASE("SE channel mismatch is a configuration error") {
  Rng rng(3);
  const auto b = SEBlock::make(4, 2, rng);
  CHECK_THROWS_AS(se_forward(b, Tensor({1, 3, 2, 2})), ConfigError);
}

TEST_CASE("spatial attention") {
  Rng rng(4);
  SUBCASE("parameter count") {
    const auto s = SpatialAttentionBlock::make(7, rng);
    CHECK(s.kernel.shape() == Shape{1, 2, 7, 7});
    CHECK(s.kernel.numel() + s.bias.numel() == 99);
    CHECK(s.parameter_count() == 99);
  }
  SUBCASE("zero kernel halves the input") {
    auto s = BasicSpatialAttention<double>::make(7, rng);
    s.kernel.fill(0.0);
    s.bias.fill(0.0);
    const TensorD x = random_d({2, 3, 5, 5}, rng);
    TensorD map;
    const TensorD y = spatial_forward(s, x, &map);
    for (double m : map.data()) CHECK(m == 0.5);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == 0.5 * x[i]);
  }
  SUBCASE("constant input gives a uniform interior map") {
    auto s = BasicSpatialAttention<double>::make(7, rng);
    s.bias[0] = 0.3;
    const double c = 0.7;
    double ksum = 0.0;
    for (double v : s.kernel.data()) ksum += v;
    TensorD map;
    spatial_forward(s, TensorD({1, 4, 11, 11}, c), &map);
    const double expect = sigmoid(c * ksum + 0.3);
    for (std::size_t h = 3; h < 8; ++h)
      for (std::size_t w = 3; w < 8; ++w) CHECK(map.at(0, 0, h, w) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("shape preserved on B0 feature maps") {
    const auto s = SpatialAttentionBlock::make(7, rng);
    Tensor map;
    const Tensor y = spatial_forward(s, Tensor({2, 1280, 7, 7}, 0.1f), &map);
    CHECK(y.shape() == Shape{2, 1280, 7, 7});
    CHECK(map.shape() == Shape{2, 1, 7, 7});
  }
}

TEST_CASE("attention contracts toward zero and keeps gates inside (0,1)") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto se = BasicSEBlock<double>::make(16, 4, rng);
    const auto sp = BasicSpatialAttention<double>::make(7, rng);
    const TensorD x = random_d({2, 16, 6, 6}, rng, -3, 3);
    const TensorD a = se_forward(se, x);
    TensorD map;
    const TensorD b = spatial_forward(sp, a, &map);
    CHECK(a.shape() == x.shape());
    CHECK(b.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      CHECK(std::abs(a[i]) <= std::abs(x[i]));
      CHECK(std::abs(b[i]) <= std::abs(a[i]));
    }
    for (double m : map.data()) CHECK((m > 0.0 && m < 1.0));
    const auto gate = se_gate(Var<double>::constant(x), se_vars(se));
    for (double s : gate.value().data()) CHECK((s > 0.0 && s < 1.0));
  }
}

TEST_CASE("raising an SE excitation bias weakly raises its gate") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    auto se = BasicSEBlock<double>::make(12, 3, rng);
    const TensorD x = random_d({1, 12, 4, 4}, rng, -2, 2);
    const auto before = se_gate(Var<double>::constant(x), se_vars(se)).value();
    const std::size_t c = static_cast<std::size_t>(rng.below(12));
    se.b2[c] += rng.uniform(0.0, 2.0);
    const auto after = se_gate(Var<double>::constant(x), se_vars(se)).value();
    CHECK(after.at(0, c) >= before.at(0, c));
  }
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(7);
  const auto se = BasicSEBlock<double>::make(8, 2, rng);
  const auto sp = BasicSpatialAttention<double>::make(7, rng);
  std::vector<TensorD> inputs{random_d({2, 8, 5, 5}, rng), se.w1, se.b1, se.w2, se.b2, sp.kernel, sp.bias};
  for (auto& b : {&inputs[2], &inputs[4], &inputs[6]})
    for (auto& v : b->data()) v = rng.uniform(-0.5, 0.5);
  TensorD r({2, 8, 5, 5});
  for (auto& v : r.data()) v = rng.uniform(-1, 1);

  auto run = [&](const std::vector<Var<double>>& v) {
    const auto a = se_apply(v[0], SEWeights<double>{v[1], v[2], v[3], v[4]});
    const auto out = spatial_apply(a, v[5], v[6]).output;
    double s = 0.0;
    for (std::size_t i = 0; i < r.numel(); ++i) s += r[i] * out.value()[i];
    return make_result<double>(TensorD({1}, s), {out}, [r](Var<double>::Node& self) {
      auto& g = self.parents[0]->value.grad();
      for (std::size_t i = 0; i < r.numel(); ++i) g[i] += self.value.grad()[0] * r[i];
    });
  };
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(Var<double>::leaf(t));
  backward<double>(run(leaves));
  auto eval = [&] {
    std::vector<Var<double>> c;
    for (const auto& t : inputs) c.push_back(Var<double>::constant(t));
    return run(c).value()[0];
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto rep = oracle::finite_difference(inputs[i], leaves[i].grad(), eval);
    CHECK_MESSAGE(rep.max_rel <= 1e-3, "input " << i);
  }
}

#include "efsign/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "efsign/attention.hpp"
#include "efsign/init.hpp"
#include "efsign/model.hpp"
#include "efsign/ops.hpp"
#include "efsign/rng.hpp"

namespace efsign {

double gradcheck_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

std::vector<std::size_t> pick_coords(std::size_t numel, std::size_t count, Rng& rng) {
  std::vector<std::size_t> all(numel);
  std::iota(all.begin(), all.end(), 0);
  if (numel <= count) return all;
  rng.shuffle(std::span<std::size_t>(all));
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

// Central differences on selected coordinates of each tensor, compared with
// the supplied analytic gradients.
std::vector<GradCheckEntry> compare(const std::string& layer, const std::vector<std::string>& names,
                                    const std::vector<TensorD*>& tensors,
                                    const std::vector<std::vector<double>>& analytic,
                                    const std::function<double()>& loss, const GradCheckOptions& options) {
  Rng rng(options.seed);
  std::vector<GradCheckEntry> out;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    TensorD& x = *tensors[t];
    GradCheckEntry e;
    e.layer = layer;
    e.tensor = names[t];
    for (std::size_t idx : pick_coords(x.numel(), options.coords_per_tensor, rng)) {
      const double orig = x[idx];
      x[idx] = orig + options.step;
      const double up = loss();
      x[idx] = orig - options.step;
      const double down = loss();
      x[idx] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[t].empty() ? 0.0 : analytic[t][idx];
      e.max_abs_error = std::max(e.max_abs_error, std::abs(a - numeric));
      e.max_rel_error = std::max(e.max_rel_error, gradcheck_relative_error(a, numeric, options.floor));
      ++e.coords;
    }
    e.passed = e.max_rel_error <= options.tolerance;
    out.push_back(std::move(e));
  }
  return out;
}

// Fixed random projection sum(r * y), turning any output into a scalar.
Var<double> project(const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> r(y.value().numel());
  for (auto& v : r) v = rng.uniform(-1.0, 1.0);
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * y.value()[i];
  return make_result<double>(TensorD({1}, s), {y}, [r](Var<double>::Node& self) {
    const double up = self.value.grad()[0];
    auto& g = self.parents[0]->value.grad();
    for (std::size_t i = 0; i < r.size(); ++i) g[i] += up * r[i];
  });
}

TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<GradCheckCase> layer_cases(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckCase> cases;
  using V = std::vector<Var<double>>;
  using ops::Activation;

  auto conv_case = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                       ops::Conv2dParams p, bool bias) {
    GradCheckCase c;
    c.layer = name;
    c.names = {"input", "weight"};
    c.inputs = {random_tensor({2, cin, 7, 7}, rng), random_tensor({cout, cin / p.groups, k, k}, rng)};
    if (bias) {
      c.names.push_back("bias");
      c.inputs.push_back(random_tensor({cout}, rng));
    }
    c.loss = [p, bias](const V& v) {
      return project(ops::conv2d(v[0], v[1], bias ? v[2] : Var<double>(), p), 11);
    };
    cases.push_back(std::move(c));
  };
  conv_case("conv2d 3x3 s1 p1", 3, 4, 3, {1, 1, 1}, true);
  conv_case("conv2d 3x3 s2 p1", 4, 5, 3, {2, 1, 1}, false);
  conv_case("conv2d 1x1 pointwise", 6, 3, 1, {1, 0, 1}, false);
  conv_case("conv2d 3x3 depthwise s2", 4, 4, 3, {2, 1, 4}, false);
  conv_case("conv2d 5x5 depthwise s1", 3, 3, 5, {1, 2, 3}, false);
  conv_case("conv2d 3x3 grouped", 4, 6, 3, {1, 1, 2}, true);

  for (Mode mode : {Mode::train, Mode::eval}) {
    GradCheckCase c;
    c.layer = mode == Mode::train ? "batch_norm2d train" : "batch_norm2d eval";
    c.names = {"input", "gamma", "beta"};
    c.inputs = {random_tensor({3, 4, 3, 3}, rng), random_tensor({4}, rng, 0.5, 1.5), random_tensor({4}, rng)};
    ops::BatchNormStats<double> stats(4);
    for (std::size_t i = 0; i < 4; ++i) {
      stats.running_mean[i] = rng.uniform(-0.5, 0.5);
      stats.running_var[i] = rng.uniform(0.5, 2.0);
    }
    c.loss = [mode, stats](const V& v) mutable {
      ops::BatchNormStats<double> s = stats;
      return project(ops::batch_norm2d(v[0], v[1], v[2], s, mode), 12);
    };
    cases.push_back(std::move(c));
  }

  for (Activation a : {Activation::relu, Activation::relu6, Activation::silu, Activation::sigmoid}) {
    GradCheckCase c;
    c.layer = std::string("activation ") + ops::activation_name(a);
    c.names = {"input"};
    c.inputs = {random_tensor({2, 3, 4, 4}, rng, -8.0, 8.0)};
    c.loss = [a](const V& v) { return project(ops::activation(v[0], a), 13); };
    cases.push_back(std::move(c));
  }

  {
    GradCheckCase c;
    c.layer = "global_avg_pool";
    c.names = {"input"};
    c.inputs = {random_tensor({2, 3, 4, 5}, rng)};
    c.loss = [](const V& v) { return project(ops::global_avg_pool(v[0]), 14); };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "channel_pool";
    c.names = {"input"};
    c.inputs = {random_tensor({2, 5, 4, 4}, rng)};
    c.loss = [](const V& v) { return project(ops::channel_pool(v[0]), 15); };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "linear";
    c.names = {"input", "weight", "bias"};
    c.inputs = {random_tensor({3, 6}, rng), random_tensor({4, 6}, rng), random_tensor({4}, rng)};
    c.loss = [](const V& v) { return project(ops::linear(v[0], v[1], v[2]), 16); };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "dropout train";
    c.names = {"input"};
    c.inputs = {random_tensor({2, 3, 4, 4}, rng)};
    c.loss = [](const V& v) {
      Rng mask(99);
      return project(ops::dropout(v[0], 0.3, Mode::train, mask), 17);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "softmax_cross_entropy";
    c.names = {"logits"};
    c.inputs = {random_tensor({4, 5}, rng, -3.0, 3.0)};
    c.loss = [](const V& v) {
      const std::vector<int> targets{0, 3, 4, 1};
      return ops::softmax_cross_entropy(v[0], targets);
    };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "max_pool2d 3/2/1";
    c.names = {"input"};
    c.inputs = {random_tensor({2, 2, 7, 7}, rng)};
    c.loss = [](const V& v) { return project(ops::max_pool2d(v[0], 3, 2, 1), 18); };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "add";
    c.names = {"a", "b"};
    c.inputs = {random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)};
    c.loss = [](const V& v) { return project(ops::add(v[0], v[1]), 19); };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "scale_channels";
    c.names = {"x", "scale"};
    c.inputs = {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3}, rng)};
    c.loss = [](const V& v) { return project(ops::scale_channels(v[0], v[1]), 20); };
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.layer = "scale_spatial";
    c.names = {"x", "map"};
    c.inputs = {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 1, 4, 4}, rng)};
    c.loss = [](const V& v) { return project(ops::scale_spatial(v[0], v[1]), 21); };
    cases.push_back(std::move(c));
  }
  {
    auto se = BasicSEBlock<double>::make(32, 16, rng);
    GradCheckCase c;
    c.layer = "se block (C=32, r=16)";
    c.names = {"input", "w1", "b1", "w2", "b2"};
    c.inputs = {random_tensor({2, 32, 3, 3}, rng), se.w1, random_tensor(se.b1.shape(), rng), se.w2,
                random_tensor(se.b2.shape(), rng)};
    c.loss = [](const V& v) { return project(se_apply(v[0], SEWeights<double>{v[1], v[2], v[3], v[4]}), 22); };
    cases.push_back(std::move(c));
  }
  {
    auto sa = BasicSpatialAttention<double>::make(7, rng);
    GradCheckCase c;
    c.layer = "spatial attention (7x7)";
    c.names = {"input", "kernel", "bias"};
    c.inputs = {random_tensor({2, 6, 5, 5}, rng), sa.kernel, random_tensor({1}, rng)};
    c.loss = [](const V& v) { return project(spatial_apply(v[0], v[1], v[2]).output, 23); };
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<GradCheckEntry> check_end_to_end(const GradCheckOptions& options) {
  ModelSpec spec = efficientsign_spec("tiny", 5);
  BasicModelState<double> model = build_model(spec, options.seed).cast<double>();
  Rng rng(options.seed + 1);
  TensorD images = random_tensor({2, 3, spec.input_size(), spec.input_size()}, rng);
  const std::vector<int> targets{1, 3};
  const std::uint64_t dropout_seed = options.seed + 2;

  auto run = [&](bool track) {
    Rng drop(dropout_seed);
    ForwardOptions fo;
    fo.track_grad = track;
    auto trace = forward_trace<double>(model, images, Mode::train, drop, fo);
    return std::make_pair(trace, ops::softmax_cross_entropy(trace.logits, targets));
  };

  auto [trace, loss] = run(true);
  backward<double>(loss);
  std::vector<std::string> names;
  std::vector<TensorD*> tensors;
  std::vector<std::vector<double>> analytic;
  for (std::size_t i = 0; i < model.parameters.size(); ++i) {
    names.push_back(model.parameters[i].name);
    tensors.push_back(&model.parameters[i].value);
    const auto& leaf = trace.params[i];
    analytic.push_back(leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.value().numel(), 0.0));
  }
  return compare("efficientsign tiny end-to-end (train mode)", names, tensors, analytic,
                 [&] { return run(false).second.value()[0]; }, options);
}

}  // namespace

std::vector<GradCheckEntry> check_gradients(const GradCheckCase& test, const GradCheckOptions& options) {
  std::vector<TensorD> values = test.inputs;
  std::vector<Var<double>> leaves;
  for (const auto& v : values) leaves.push_back(Var<double>::leaf(v));
  const Var<double> loss = test.loss(leaves);
  backward<double>(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) analytic.push_back(l.has_grad() ? l.grad() : std::vector<double>(l.value().numel(), 0.0));
  std::vector<TensorD*> ptrs;
  for (auto& v : values) ptrs.push_back(&v);
  auto eval = [&] {
    std::vector<Var<double>> consts;
    for (const auto& v : values) consts.push_back(Var<double>::constant(v));
    return test.loss(consts).value()[0];
  };
  return compare(test.layer, test.names, ptrs, analytic, eval, options);
}

std::vector<GradCheckEntry> run_gradcheck_suite(const GradCheckOptions& options) {
  std::vector<GradCheckEntry> out;
  for (const auto& c : layer_cases(options.seed)) {
    auto entries = check_gradients(c, options);
    out.insert(out.end(), entries.begin(), entries.end());
  }
  auto e2e = check_end_to_end(options);
  out.insert(out.end(), e2e.begin(), e2e.end());
  return out;
}

}  // namespace efsign

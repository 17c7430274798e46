#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "efsign/autograd.hpp"
#include "efsign/tensor.hpp"

namespace efsign {

struct GradCheckOptions {
  std::size_t coords_per_tensor = 20;  // every coordinate when a tensor is smaller
  double step = 1e-5;                  // central-difference half width
  double tolerance = 1e-3;             // on the relative error below
  double floor = 1e-6;                 // |a - n| / max(|a|, |n|, floor)
  std::uint64_t seed = 7;
};

struct GradCheckEntry {
  std::string layer;
  std::string tensor;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
};

double gradcheck_relative_error(double analytic, double numeric, double floor);

// A scalar-valued graph over named 64-bit input tensors.
struct GradCheckCase {
  std::string layer;
  std::vector<std::string> names;
  std::vector<TensorD> inputs;
  std::function<Var<double>(const std::vector<Var<double>>&)> loss;
};

std::vector<GradCheckEntry> check_gradients(const GradCheckCase& test, const GradCheckOptions& options);

// Every layer type plus the tiny EfficientSign end to end (train mode).
std::vector<GradCheckEntry> run_gradcheck_suite(const GradCheckOptions& options = {});

}  // namespace efsign

#pragma once

#include <cmath>

#include "efsign/rng.hpp"
#include "efsign/tensor.hpp"

namespace efsign {

// Uniform fan-in initialization: U(-b, b) with b = gain * sqrt(3 / fan_in),
// i.e. variance gain^2 / fan_in. gain = sqrt(2) is the He/Kaiming setting.
template <typename T>
BasicTensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng, double gain = std::sqrt(2.0)) {
  BasicTensor<T> t(std::move(shape));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace efsign

#pragma once

#include "efsign/autograd.hpp"
#include "efsign/ops.hpp"
#include "efsign/rng.hpp"
#include "efsign/tensor.hpp"

namespace efsign {

// Squeeze-and-Excitation channel attention:
//   z = GAP(x), s = sigmoid(W2 * act(W1 * z + b1) + b2), out = x * s.
template <typename T>
struct BasicSEBlock {
  std::size_t channels = 0;
  std::size_t reduction = 16;
  BasicTensor<T> w1;  // hidden x C
  BasicTensor<T> b1;  // hidden
  BasicTensor<T> w2;  // C x hidden
  BasicTensor<T> b2;  // C

  // Never zero, so tiny channel counts still get a bottleneck unit.
  static std::size_t hidden_for(std::size_t channels, std::size_t reduction) {
    const std::size_t h = reduction == 0 ? channels : channels / reduction;
    return h == 0 ? 1 : h;
  }
  static std::size_t parameter_count_for(std::size_t channels, std::size_t reduction) {
    const std::size_t h = hidden_for(channels, reduction);
    return h * channels + h + channels * h + channels;
  }

  std::size_t hidden() const { return hidden_for(channels, reduction); }
  std::size_t parameter_count() const { return parameter_count_for(channels, reduction); }

  static BasicSEBlock make(std::size_t channels, std::size_t reduction, Rng& rng);
};

// Spatial attention: map = sigmoid(conv_kxk([mean_c(x), max_c(x)]) + bias),
// out = x * map. Padding k/2 keeps the map aligned with the input pixels.
template <typename T>
struct BasicSpatialAttention {
  std::size_t kernel_size = 7;
  BasicTensor<T> kernel;  // 1 x 2 x k x k
  BasicTensor<T> bias;    // 1

  std::size_t padding() const { return kernel_size / 2; }
  static std::size_t parameter_count_for(std::size_t k) { return 2 * k * k + 1; }
  std::size_t parameter_count() const { return parameter_count_for(kernel_size); }

  static BasicSpatialAttention make(std::size_t kernel_size, Rng& rng);
};

using SEBlock = BasicSEBlock<float>;
using SpatialAttentionBlock = BasicSpatialAttention<float>;

template <typename T>
struct SEWeights {
  Var<T> w1, b1, w2, b2;
};

// Channel gates s (N x C), each strictly inside (0, 1).
template <typename T>
Var<T> se_gate(const Var<T>& x, const SEWeights<T>& weights,
               ops::Activation inner = ops::Activation::relu);

template <typename T>
Var<T> se_apply(const Var<T>& x, const SEWeights<T>& weights,
                ops::Activation inner = ops::Activation::relu);

template <typename T>
struct SpatialOutput {
  Var<T> output;
  Var<T> map;  // N x 1 x H x W
};

template <typename T>
SpatialOutput<T> spatial_apply(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias);

// Value-level wrappers over the graph functions above.
template <typename T>
BasicTensor<T> se_forward(const BasicSEBlock<T>& block, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> spatial_forward(const BasicSpatialAttention<T>& block, const BasicTensor<T>& x,
                               BasicTensor<T>* map = nullptr);

}  // namespace efsign

#include "efsign/attention.hpp"

#include "efsign/init.hpp"

namespace efsign {

template <typename T>
BasicSEBlock<T> BasicSEBlock<T>::make(std::size_t channels, std::size_t reduction, Rng& rng) {
  if (channels == 0) throw ConfigError("SE block needs at least one channel");
  BasicSEBlock block;
  block.channels = channels;
  block.reduction = reduction;
  const std::size_t h = block.hidden();
  block.w1 = kaiming_uniform<T>({h, channels}, channels, rng);
  block.b1 = BasicTensor<T>({h});
  block.w2 = kaiming_uniform<T>({channels, h}, h, rng);
  block.b2 = BasicTensor<T>({channels});
  return block;
}

template <typename T>
BasicSpatialAttention<T> BasicSpatialAttention<T>::make(std::size_t kernel_size, Rng& rng) {
  if (kernel_size == 0 || kernel_size % 2 == 0) {
    throw ConfigError("spatial attention kernel must be odd, got " + std::to_string(kernel_size));
  }
  BasicSpatialAttention block;
  block.kernel_size = kernel_size;
  block.kernel = kaiming_uniform<T>({1, 2, kernel_size, kernel_size}, 2 * kernel_size * kernel_size, rng);
  block.bias = BasicTensor<T>({1});
  return block;
}

template <typename T>
Var<T> se_gate(const Var<T>& x, const SEWeights<T>& weights, ops::Activation inner) {
  if (x.shape().size() != 4 || x.dim(1) != weights.w1.value().dim(1)) {
    throw ConfigError("SE block: input " + shape_str(x.shape()) + " does not match W1 " +
                      shape_str(weights.w1.shape()));
  }
  const Var<T> z = ops::global_avg_pool(x);
  const Var<T> hidden = ops::activation(ops::linear(z, weights.w1, weights.b1), inner);
  return ops::activation(ops::linear(hidden, weights.w2, weights.b2), ops::Activation::sigmoid);
}

template <typename T>
Var<T> se_apply(const Var<T>& x, const SEWeights<T>& weights, ops::Activation inner) {
  return ops::scale_channels(x, se_gate(x, weights, inner));
}

template <typename T>
SpatialOutput<T> spatial_apply(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  if (kernel.shape().size() != 4 || kernel.dim(0) != 1 || kernel.dim(1) != 2 ||
      kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0) {
    throw ConfigError("spatial attention: kernel must be 1x2xkxk with odd k, got " + shape_str(kernel.shape()));
  }
  const std::size_t pad = kernel.dim(2) / 2;
  const Var<T> pooled = ops::channel_pool(x);
  const Var<T> logits = ops::conv2d(pooled, kernel, bias, {1, pad, 1});
  SpatialOutput<T> out;
  out.map = ops::activation(logits, ops::Activation::sigmoid);
  out.output = ops::scale_spatial(x, out.map);
  return out;
}

template <typename T>
BasicTensor<T> se_forward(const BasicSEBlock<T>& block, const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != block.channels) {
    throw ConfigError("SE block built for " + std::to_string(block.channels) + " channels, input is " +
                      shape_str(x.shape()));
  }
  SEWeights<T> w{Var<T>::constant(block.w1), Var<T>::constant(block.b1), Var<T>::constant(block.w2),
                 Var<T>::constant(block.b2)};
  return se_apply(Var<T>::constant(x), w).value();
}

template <typename T>
BasicTensor<T> spatial_forward(const BasicSpatialAttention<T>& block, const BasicTensor<T>& x,
                               BasicTensor<T>* map) {
  auto out = spatial_apply(Var<T>::constant(x), Var<T>::constant(block.kernel), Var<T>::constant(block.bias));
  if (map) *map = out.map.value();
  return out.output.value();
}

#define EFSIGN_INSTANTIATE_ATTENTION(T)                                                           \
  template struct BasicSEBlock<T>;                                                                \
  template struct BasicSpatialAttention<T>;                                                       \
  template Var<T> se_gate<T>(const Var<T>&, const SEWeights<T>&, ops::Activation);                \
  template Var<T> se_apply<T>(const Var<T>&, const SEWeights<T>&, ops::Activation);               \
  template SpatialOutput<T> spatial_apply<T>(const Var<T>&, const Var<T>&, const Var<T>&);        \
  template BasicTensor<T> se_forward<T>(const BasicSEBlock<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> spatial_forward<T>(const BasicSpatialAttention<T>&, const BasicTensor<T>&, \
                                             BasicTensor<T>*);

EFSIGN_INSTANTIATE_ATTENTION(float)
EFSIGN_INSTANTIATE_ATTENTION(double)

#undef EFSIGN_INSTANTIATE_ATTENTION

}  // namespace efsign

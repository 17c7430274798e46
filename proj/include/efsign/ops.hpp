#pragma once

#include <span>
#include <vector>

#include "efsign/autograd.hpp"
#include "efsign/rng.hpp"
#include "efsign/tensor.hpp"

// Differentiable layers. Every function returns a new graph node and never
// mutates its inputs; batch_norm2d in train mode additionally updates the
// running statistics it is handed.
namespace efsign::ops {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// weight: OutC x (InC/groups) x kH x kW; bias (optional): OutC.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, Conv2dParams params);

template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

template <typename T>
Var<T> batch_norm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                    BatchNormStats<T>& stats, Mode mode);

enum class Activation { identity, relu, relu6, silu, sigmoid };

const char* activation_name(Activation kind);

template <typename T>
Var<T> activation(const Var<T>& input, Activation kind);

// N x C x H x W -> N x C
template <typename T>
Var<T> global_avg_pool(const Var<T>& input);

// N x C x H x W -> N x 2 x H x W (channel 0 mean, channel 1 max over C).
template <typename T>
Var<T> channel_pool(const Var<T>& input);

// N x D times (K x D)^T plus bias K.
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

// Inverted dropout; eval mode returns the input node unchanged.
template <typename T>
Var<T> dropout(const Var<T>& input, double p, Mode mode, Rng& rng);

// Mean negative log-likelihood of the targets under softmax(logits).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> targets);

template <typename T>
Var<T> max_pool2d(const Var<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

// x: N x C x H x W gated by scale: N x C (broadcast over H x W).
template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& scale);

// x: N x C x H x W gated by map: N x 1 x H x W (broadcast over C).
template <typename T>
Var<T> scale_spatial(const Var<T>& x, const Var<T>& map);

std::size_t conv_output_dim(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

}  // namespace efsign::ops

#include "efsign/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace efsign::ops {

namespace {

template <typename T>
using Node = typename Var<T>::Node;

template <typename T>
std::vector<T>& grad_of(Node<T>& self, std::size_t parent) {
  return self.parents[parent]->value.grad();
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t parent) {
  return self.parents[parent]->requires_grad;
}

void require_rank(const Shape& shape, std::size_t rank, const char* op, const char* what) {
  if (shape.size() != rank) {
    throw ConfigError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                      ", got " + shape_str(shape));
  }
}

struct ConvGeom {
  std::size_t N, C, H, W, OC, KH, KW, Ho, Wo, stride, pad, groups;

  std::size_t cg() const { return C / groups; }
  std::size_t ocg() const { return OC / groups; }
  std::size_t kg() const { return cg() * KH * KW; }
  std::size_t plane() const { return Ho * Wo; }
  bool pointwise() const { return KH == 1 && KW == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cg() == 1 && ocg() == 1; }
};

// Output positions o in [lo, hi) with 0 <= o*stride - pad + k < len.
inline void valid_range(long len, long out, long stride, long pad, long k, long& lo, long& hi) {
  const long num = pad - k;
  lo = num > 0 ? (num + stride - 1) / stride : 0;
  const long top = len - 1 + pad - k;
  hi = top < 0 ? 0 : std::min(out, top / stride + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const long s = static_cast<long>(g.stride), p = static_cast<long>(g.pad);
  const std::size_t P = g.plane();
  for (std::size_t c = 0; c < g.cg(); ++c) {
    for (std::size_t ki = 0; ki < g.KH; ++ki) {
      long oh_lo, oh_hi;
      valid_range(static_cast<long>(g.H), static_cast<long>(g.Ho), s, p, static_cast<long>(ki), oh_lo, oh_hi);
      for (std::size_t kj = 0; kj < g.KW; ++kj) {
        long ow_lo, ow_hi;
        valid_range(static_cast<long>(g.W), static_cast<long>(g.Wo), s, p, static_cast<long>(kj), ow_lo, ow_hi);
        T* dst = col + ((c * g.KH + ki) * g.KW + kj) * P;
        std::fill(dst, dst + P, T(0));
        for (long oh = oh_lo; oh < oh_hi; ++oh) {
          const long ih = oh * s - p + static_cast<long>(ki);
          const T* src = x + (c * g.H + static_cast<std::size_t>(ih)) * g.W;
          T* drow = dst + static_cast<std::size_t>(oh) * g.Wo;
          for (long ow = ow_lo; ow < ow_hi; ++ow) drow[ow] = src[ow * s - p + static_cast<long>(kj)];
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const long s = static_cast<long>(g.stride), p = static_cast<long>(g.pad);
  const std::size_t P = g.plane();
  for (std::size_t c = 0; c < g.cg(); ++c) {
    for (std::size_t ki = 0; ki < g.KH; ++ki) {
      long oh_lo, oh_hi;
      valid_range(static_cast<long>(g.H), static_cast<long>(g.Ho), s, p, static_cast<long>(ki), oh_lo, oh_hi);
      for (std::size_t kj = 0; kj < g.KW; ++kj) {
        long ow_lo, ow_hi;
        valid_range(static_cast<long>(g.W), static_cast<long>(g.Wo), s, p, static_cast<long>(kj), ow_lo, ow_hi);
        const T* srcp = col + ((c * g.KH + ki) * g.KW + kj) * P;
        for (long oh = oh_lo; oh < oh_hi; ++oh) {
          const long ih = oh * s - p + static_cast<long>(ki);
          T* dst = x + (c * g.H + static_cast<std::size_t>(ih)) * g.W;
          const T* srow = srcp + static_cast<std::size_t>(oh) * g.Wo;
          for (long ow = ow_lo; ow < ow_hi; ++ow) dst[ow * s - p + static_cast<long>(kj)] += srow[ow];
        }
      }
    }
  }
}

// Depthwise kernels iterate kernel taps outermost so the inner loop runs
// over contiguous output columns.
template <typename T>
void depthwise_forward(const T* x, const T* w, const ConvGeom& g, T* out) {
  const long s = static_cast<long>(g.stride), p = static_cast<long>(g.pad);
  for (std::size_t ki = 0; ki < g.KH; ++ki) {
    long oh_lo, oh_hi;
    valid_range(static_cast<long>(g.H), static_cast<long>(g.Ho), s, p, static_cast<long>(ki), oh_lo, oh_hi);
    for (std::size_t kj = 0; kj < g.KW; ++kj) {
      long ow_lo, ow_hi;
      valid_range(static_cast<long>(g.W), static_cast<long>(g.Wo), s, p, static_cast<long>(kj), ow_lo, ow_hi);
      const T wv = w[ki * g.KW + kj];
      for (long oh = oh_lo; oh < oh_hi; ++oh) {
        const T* src = x + static_cast<std::size_t>(oh * s - p + static_cast<long>(ki)) * g.W;
        T* dst = out + static_cast<std::size_t>(oh) * g.Wo;
        const long off = static_cast<long>(kj) - p;
        if (s == 1) {
          for (long ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += wv * src[ow + off];
        } else {
          for (long ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += wv * src[ow * s + off];
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* dout, const ConvGeom& g, T* dx, T* dw) {
  const long s = static_cast<long>(g.stride), p = static_cast<long>(g.pad);
  for (std::size_t ki = 0; ki < g.KH; ++ki) {
    long oh_lo, oh_hi;
    valid_range(static_cast<long>(g.H), static_cast<long>(g.Ho), s, p, static_cast<long>(ki), oh_lo, oh_hi);
    for (std::size_t kj = 0; kj < g.KW; ++kj) {
      long ow_lo, ow_hi;
      valid_range(static_cast<long>(g.W), static_cast<long>(g.Wo), s, p, static_cast<long>(kj), ow_lo, ow_hi);
      const T wv = w[ki * g.KW + kj];
      T acc = T(0);
      const long off = static_cast<long>(kj) - p;
      for (long oh = oh_lo; oh < oh_hi; ++oh) {
        const std::size_t row = static_cast<std::size_t>(oh * s - p + static_cast<long>(ki)) * g.W;
        const T* d = dout + static_cast<std::size_t>(oh) * g.Wo;
        if (dw) {
          const T* src = x + row;
          for (long ow = ow_lo; ow < ow_hi; ++ow) acc += d[ow] * src[ow * s + off];
        }
        if (dx) {
          T* dst = dx + row;
          for (long ow = ow_lo; ow < ow_hi; ++ow) dst[ow * s + off] += wv * d[ow];
        }
      }
      if (dw) dw[ki * g.KW + kj] += acc;
    }
  }
}

template <typename T>
T stable_sigmoid(T x) {
  T s;
  if (x >= T(0)) {
    s = T(1) / (T(1) + std::exp(-x));
  } else {
    const T e = std::exp(x);
    s = e / (T(1) + e);
  }
  // Keep the gate strictly inside (0, 1) even where the exponential saturates.
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  return std::clamp(s, lo, hi);
}

}  // namespace

std::size_t conv_output_dim(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (in + 2 * padding < kernel) return 0;
  return (in + 2 * padding - kernel) / stride + 1;
}

const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::relu6: return "relu6";
    case Activation::silu: return "silu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, Conv2dParams params) {
  const auto& x = input.value();
  const auto& w = weight.value();
  require_rank(x.shape(), 4, "conv2d", "input");
  require_rank(w.shape(), 4, "conv2d", "weight");
  if (params.groups == 0 || params.stride == 0) {
    throw ConfigError("conv2d: stride and groups must be positive");
  }
  ConvGeom g{};
  g.N = x.dim(0);
  g.C = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.OC = w.dim(0);
  g.KH = w.dim(2);
  g.KW = w.dim(3);
  g.stride = params.stride;
  g.pad = params.padding;
  g.groups = params.groups;
  if (w.dim(1) * params.groups != g.C || g.OC % params.groups != 0) {
    throw ConfigError("conv2d: weight " + shape_str(w.shape()) + " with groups=" +
                      std::to_string(params.groups) + " does not fit input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.value().numel() != g.OC) {
    throw ConfigError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                      shape_str(w.shape()));
  }
  g.Ho = conv_output_dim(g.H, g.KH, g.stride, g.pad);
  g.Wo = conv_output_dim(g.W, g.KW, g.stride, g.pad);
  if (g.Ho == 0 || g.Wo == 0) {
    throw ConfigError("conv2d: input " + shape_str(x.shape()) + " is smaller than kernel " +
                      shape_str(w.shape()) + " after padding " + std::to_string(g.pad));
  }

  BasicTensor<T> out({g.N, g.OC, g.Ho, g.Wo});
  const std::size_t P = g.plane();
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* od = out.data().data();
  std::vector<T> col;
  if (!g.pointwise() && !g.depthwise()) col.resize(g.kg() * P);

  for (std::size_t n = 0; n < g.N; ++n) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T* xg = xd + (n * g.C + grp * g.cg()) * g.H * g.W;
      T* og = od + (n * g.OC + grp * g.ocg()) * P;
      const T* wg = wd + grp * g.ocg() * g.kg();
      if (g.depthwise()) {
        depthwise_forward(xg, wg, g, og);
      } else if (g.pointwise()) {
        detail::gemm_nn(g.ocg(), P, g.kg(), wg, xg, og);
      } else {
        im2col(xg, g, col.data());
        detail::gemm_nn(g.ocg(), P, g.kg(), wg, col.data(), og);
      }
    }
    if (bias.defined()) {
      const T* bd = bias.value().data().data();
      for (std::size_t oc = 0; oc < g.OC; ++oc) {
        T* op = od + (n * g.OC + oc) * P;
        for (std::size_t i = 0; i < P; ++i) op[i] += bd[oc];
      }
    }
  }

  const bool has_bias = bias.defined();
  std::vector<Var<T>> parents{input, weight};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), std::move(parents), [g, has_bias](Node<T>& self) {
    const auto& dout_v = self.value.grad();
    const T* dout = dout_v.data();
    const T* xd = self.parents[0]->value.data().data();
    const T* wd = self.parents[1]->value.data().data();
    T* dx = wants_grad<T>(self, 0) ? grad_of<T>(self, 0).data() : nullptr;
    T* dw = wants_grad<T>(self, 1) ? grad_of<T>(self, 1).data() : nullptr;
    const std::size_t P = g.plane();
    std::vector<T> col, dcol, scratch;
    if (!g.pointwise() && !g.depthwise()) {
      col.resize(g.kg() * P);
      dcol.resize(g.kg() * P);
    }
    for (std::size_t n = 0; n < g.N; ++n) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const std::size_t xoff = (n * g.C + grp * g.cg()) * g.H * g.W;
        const T* xg = xd + xoff;
        const T* dog = dout + (n * g.OC + grp * g.ocg()) * P;
        const T* wg = wd + grp * g.ocg() * g.kg();
        T* dwg = dw ? dw + grp * g.ocg() * g.kg() : nullptr;
        T* dxg = dx ? dx + xoff : nullptr;
        if (g.depthwise()) {
          depthwise_backward(xg, wg, dog, g, dxg, dwg);
        } else if (g.pointwise()) {
          if (dwg) detail::gemm_nt(g.ocg(), g.kg(), P, dog, xg, dwg, scratch);
          if (dxg) detail::gemm_tn(g.kg(), P, g.ocg(), wg, dog, dxg, scratch);
        } else {
          if (dwg) {
            im2col(xg, g, col.data());
            detail::gemm_nt(g.ocg(), g.kg(), P, dog, col.data(), dwg, scratch);
          }
          if (dxg) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            detail::gemm_tn(g.kg(), P, g.ocg(), wg, dog, dcol.data(), scratch);
            col2im(dcol.data(), g, dxg);
          }
        }
      }
    }
    if (has_bias && wants_grad<T>(self, 2)) {
      auto& db = grad_of<T>(self, 2);
      for (std::size_t n = 0; n < g.N; ++n) {
        for (std::size_t oc = 0; oc < g.OC; ++oc) {
          const T* d = dout + (n * g.OC + oc) * P;
          T acc = T(0);
          for (std::size_t i = 0; i < P; ++i) acc += d[i];
          db[oc] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                    BatchNormStats<T>& stats, Mode mode) {
  const auto& x = input.value();
  require_rank(x.shape(), 4, "batch_norm2d", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.value().numel() != C || beta.value().numel() != C || stats.running_mean.size() != C ||
      stats.running_var.size() != C) {
    throw ConfigError("batch_norm2d: parameters sized for " + std::to_string(gamma.value().numel()) +
                      " channels, input " + shape_str(x.shape()) + " has " + std::to_string(C));
  }
  const std::size_t M = N * HW;
  std::vector<T> mean(C), invstd(C);
  const T* xd = x.data().data();
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double sum = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(M);
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(stats.epsilon)));
      const double unbiased = M > 1 ? var * static_cast<double>(M) / static_cast<double>(M - 1) : var;
      const double m = static_cast<double>(stats.momentum);
      stats.running_mean[c] = static_cast<T>((1.0 - m) * stats.running_mean[c] + m * mu);
      stats.running_var[c] = static_cast<T>((1.0 - m) * stats.running_var[c] + m * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      invstd[c] = T(1) / std::sqrt(stats.running_var[c] + stats.epsilon);
    }
  }

  BasicTensor<T> out(x.shape());
  const T* gd = gamma.value().data().data();
  const T* bd = beta.value().data().data();
  T* od = out.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = xd + (n * C + c) * HW;
      T* o = od + (n * C + c) * HW;
      const T scale = gd[c] * invstd[c];
      const T shift = bd[c] - mean[c] * scale;
      for (std::size_t i = 0; i < HW; ++i) o[i] = p[i] * scale + shift;
    }
  }

  const bool batch_stats = mode == Mode::train;
  return make_result<T>(std::move(out), {input, gamma, beta},
                        [N, C, HW, M, mean = std::move(mean), invstd = std::move(invstd),
                         batch_stats](Node<T>& self) {
    const T* dy = self.value.grad().data();
    const T* xd = self.parents[0]->value.data().data();
    const T* gd = self.parents[1]->value.data().data();
    T* dx = wants_grad<T>(self, 0) ? grad_of<T>(self, 0).data() : nullptr;
    T* dg = wants_grad<T>(self, 1) ? grad_of<T>(self, 1).data() : nullptr;
    T* db = wants_grad<T>(self, 2) ? grad_of<T>(self, 2).data() : nullptr;
    for (std::size_t c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * HW;
        const T* d = dy + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          sum_dy += d[i];
          sum_dy_xhat += static_cast<double>(d[i]) * (p[i] - mean[c]) * invstd[c];
        }
      }
      if (dg) dg[c] += static_cast<T>(sum_dy_xhat);
      if (db) db[c] += static_cast<T>(sum_dy);
      if (!dx) continue;
      const T k = gd[c] * invstd[c];
      if (batch_stats) {
        const T mdy = static_cast<T>(sum_dy / static_cast<double>(M));
        const T mdx = static_cast<T>(sum_dy_xhat / static_cast<double>(M));
        for (std::size_t n = 0; n < N; ++n) {
          const T* p = xd + (n * C + c) * HW;
          const T* d = dy + (n * C + c) * HW;
          T* g = dx + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            const T xhat = (p[i] - mean[c]) * invstd[c];
            g[i] += k * (d[i] - mdy - xhat * mdx);
          }
        }
      } else {
        for (std::size_t n = 0; n < N; ++n) {
          const T* d = dy + (n * C + c) * HW;
          T* g = dx + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) g[i] += k * d[i];
        }
      }
    }
  });
}

template <typename T>
Var<T> activation(const Var<T>& input, Activation kind) {
  if (kind == Activation::identity) return input;
  const auto& x = input.value();
  BasicTensor<T> out(x.shape());
  const std::size_t n = x.numel();
  const T* xd = x.data().data();
  T* od = out.data().data();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
      break;
    case Activation::relu6:
      for (std::size_t i = 0; i < n; ++i) od[i] = std::clamp(xd[i], T(0), T(6));
      break;
    case Activation::silu:
      for (std::size_t i = 0; i < n; ++i) od[i] = xd[i] * stable_sigmoid(xd[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) od[i] = stable_sigmoid(xd[i]);
      break;
    case Activation::identity:
      break;
  }
  return make_result<T>(std::move(out), {input}, [kind, n](Node<T>& self) {
    const T* dy = self.value.grad().data();
    const T* y = self.value.data().data();
    const T* xd = self.parents[0]->value.data().data();
    T* dx = grad_of<T>(self, 0).data();
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < n; ++i) {
          if (xd[i] > T(0)) dx[i] += dy[i];
        }
        break;
      case Activation::relu6:
        for (std::size_t i = 0; i < n; ++i) {
          if (xd[i] > T(0) && xd[i] < T(6)) dx[i] += dy[i];
        }
        break;
      case Activation::silu:
        for (std::size_t i = 0; i < n; ++i) {
          const T s = stable_sigmoid(xd[i]);
          dx[i] += dy[i] * s * (T(1) + xd[i] * (T(1) - s));
        }
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
        break;
      case Activation::identity:
        break;
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
  const auto& x = input.value();
  require_rank(x.shape(), 4, "global_avg_pool", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  BasicTensor<T> out({N, C});
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < N * C; ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < HW; ++k) sum += xd[i * HW + k];
    out[i] = static_cast<T>(sum / static_cast<double>(HW));
  }
  return make_result<T>(std::move(out), {input}, [N, C, HW](Node<T>& self) {
    const T* dy = self.value.grad().data();
    T* dx = grad_of<T>(self, 0).data();
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t i = 0; i < N * C; ++i) {
      const T g = dy[i] * inv;
      for (std::size_t k = 0; k < HW; ++k) dx[i * HW + k] += g;
    }
  });
}

template <typename T>
Var<T> channel_pool(const Var<T>& input) {
  const auto& x = input.value();
  require_rank(x.shape(), 4, "channel_pool", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  BasicTensor<T> out({N, 2, x.dim(2), x.dim(3)});
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    const T* base = xd + n * C * HW;
    T* avg = od + n * 2 * HW;
    T* mx = avg + HW;
    for (std::size_t i = 0; i < HW; ++i) {
      double sum = 0.0;
      T best = base[i];
      for (std::size_t c = 0; c < C; ++c) {
        const T v = base[c * HW + i];
        sum += v;
        if (v > best) best = v;
      }
      avg[i] = static_cast<T>(sum / static_cast<double>(C));
      mx[i] = best;
    }
  }
  return make_result<T>(std::move(out), {input}, [N, C, HW](Node<T>& self) {
    const T* dy = self.value.grad().data();
    const T* xd = self.parents[0]->value.data().data();
    T* dx = grad_of<T>(self, 0).data();
    const T inv = T(1) / static_cast<T>(C);
    for (std::size_t n = 0; n < N; ++n) {
      const T* base = xd + n * C * HW;
      T* gbase = dx + n * C * HW;
      const T* davg = dy + n * 2 * HW;
      const T* dmax = davg + HW;
      for (std::size_t i = 0; i < HW; ++i) {
        std::size_t arg = 0;
        T best = base[i];
        for (std::size_t c = 0; c < C; ++c) {
          gbase[c * HW + i] += davg[i] * inv;
          if (base[c * HW + i] > best) {
            best = base[c * HW + i];
            arg = c;
          }
        }
        gbase[arg * HW + i] += dmax[i];
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  const auto& x = input.value();
  const auto& w = weight.value();
  require_rank(x.shape(), 2, "linear", "input");
  require_rank(w.shape(), 2, "linear", "weight");
  const std::size_t N = x.dim(0), D = x.dim(1), K = w.dim(0);
  if (w.dim(1) != D) {
    throw ConfigError("linear: weight " + shape_str(w.shape()) + " does not fit input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.value().numel() != K) {
    throw ConfigError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  BasicTensor<T> out({N, K});
  std::vector<T> scratch;
  detail::gemm_nt(N, K, D, x.data().data(), w.data().data(), out.data().data(), scratch);
  if (bias.defined()) {
    const T* bd = bias.value().data().data();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) out[n * K + k] += bd[k];
    }
  }
  const bool has_bias = bias.defined();
  std::vector<Var<T>> parents{input, weight};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), std::move(parents), [N, D, K, has_bias](Node<T>& self) {
    const T* dy = self.value.grad().data();
    std::vector<T> scratch;
    if (wants_grad<T>(self, 0)) {
      detail::gemm_nn(N, D, K, dy, self.parents[1]->value.data().data(), grad_of<T>(self, 0).data());
    }
    if (wants_grad<T>(self, 1)) {
      detail::gemm_tn(K, D, N, dy, self.parents[0]->value.data().data(), grad_of<T>(self, 1).data(), scratch);
    }
    if (has_bias && wants_grad<T>(self, 2)) {
      auto& db = grad_of<T>(self, 2);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) db[k] += dy[n * K + k];
      }
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& input, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) return input;
  const auto& x = input.value();
  const std::size_t n = x.numel();
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(n);
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() < p ? T(0) : scale;
    out[i] = x[i] * mask[i];
  }
  return make_result<T>(std::move(out), {input}, [mask = std::move(mask)](Node<T>& self) {
    const auto& dy = self.value.grad();
    auto& dx = grad_of<T>(self, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += dy[i] * mask[i];
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  const auto& z = logits.value();
  require_rank(z.shape(), 2, "softmax_cross_entropy", "logits");
  const std::size_t N = z.dim(0), K = z.dim(1);
  if (targets.size() != N) {
    throw InputError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(N) + " rows");
  }
  std::vector<T> probs(N * K);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int t = targets[n];
    if (t < 0 || static_cast<std::size_t>(t) >= K) {
      throw InputError("softmax_cross_entropy: target index " + std::to_string(t) + " at row " +
                       std::to_string(n) + " outside [0, " + std::to_string(K) + ")");
    }
    const T* row = z.data().data() + n * K;
    const T mx = *std::max_element(row, row + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(static_cast<double>(row[k] - mx));
    const double lse = std::log(sum) + static_cast<double>(mx);
    loss += lse - static_cast<double>(row[t]);
    for (std::size_t k = 0; k < K; ++k) {
      probs[n * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k]) - lse));
    }
  }
  BasicTensor<T> out({1}, static_cast<T>(loss / static_cast<double>(N)));
  std::vector<int> tcopy(targets.begin(), targets.end());
  return make_result<T>(std::move(out), {logits},
                        [N, K, probs = std::move(probs), tcopy = std::move(tcopy)](Node<T>& self) {
    const T upstream = self.value.grad()[0] / static_cast<T>(N);
    auto& dz = grad_of<T>(self, 0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        const T onehot = static_cast<int>(k) == tcopy[n] ? T(1) : T(0);
        dz[n * K + k] += upstream * (probs[n * K + k] - onehot);
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const auto& x = input.value();
  require_rank(x.shape(), 4, "max_pool2d", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = conv_output_dim(H, kernel, stride, padding);
  const std::size_t Wo = conv_output_dim(W, kernel, stride, padding);
  if (Ho == 0 || Wo == 0 || stride == 0) {
    throw ConfigError("max_pool2d: input " + shape_str(x.shape()) + " too small for kernel " + std::to_string(kernel));
  }
  BasicTensor<T> out({N, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.numel());
  const T* xd = x.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xd + nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t arg = 0;
        bool found = false;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(padding);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(padding);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (!found || plane[idx] > best) {
              best = plane[idx];
              arg = idx;
              found = true;
            }
          }
        }
        const std::size_t o = (nc * Ho + oh) * Wo + ow;
        out[o] = best;
        argmax[o] = nc * H * W + arg;
      }
    }
  }
  return make_result<T>(std::move(out), {input}, [argmax = std::move(argmax)](Node<T>& self) {
    const auto& dy = self.value.grad();
    auto& dx = grad_of<T>(self, 0);
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& dy = self.value.grad();
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad<T>(self, p)) continue;
      auto& g = grad_of<T>(self, p);
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& scale) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 4, "scale_channels", "input");
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  if (scale.value().numel() != N * C) {
    throw ConfigError("scale_channels: gate " + shape_str(scale.shape()) + " does not match input " +
                      shape_str(xv.shape()));
  }
  BasicTensor<T> out(xv.shape());
  const T* s = scale.value().data().data();
  for (std::size_t i = 0; i < N * C; ++i) {
    for (std::size_t k = 0; k < HW; ++k) out[i * HW + k] = xv[i * HW + k] * s[i];
  }
  return make_result<T>(std::move(out), {x, scale}, [N, C, HW](Node<T>& self) {
    const T* dy = self.value.grad().data();
    const T* xd = self.parents[0]->value.data().data();
    const T* s = self.parents[1]->value.data().data();
    T* dx = wants_grad<T>(self, 0) ? grad_of<T>(self, 0).data() : nullptr;
    T* ds = wants_grad<T>(self, 1) ? grad_of<T>(self, 1).data() : nullptr;
    for (std::size_t i = 0; i < N * C; ++i) {
      T acc = T(0);
      for (std::size_t k = 0; k < HW; ++k) {
        if (dx) dx[i * HW + k] += dy[i * HW + k] * s[i];
        acc += dy[i * HW + k] * xd[i * HW + k];
      }
      if (ds) ds[i] += acc;
    }
  });
}

template <typename T>
Var<T> scale_spatial(const Var<T>& x, const Var<T>& map) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 4, "scale_spatial", "input");
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  if (map.shape() != Shape{N, 1, xv.dim(2), xv.dim(3)}) {
    throw ConfigError("scale_spatial: map " + shape_str(map.shape()) + " does not match input " +
                      shape_str(xv.shape()));
  }
  BasicTensor<T> out(xv.shape());
  const T* m = map.value().data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t k = 0; k < HW; ++k) out[base + k] = xv[base + k] * m[n * HW + k];
    }
  }
  return make_result<T>(std::move(out), {x, map}, [N, C, HW](Node<T>& self) {
    const T* dy = self.value.grad().data();
    const T* xd = self.parents[0]->value.data().data();
    const T* m = self.parents[1]->value.data().data();
    T* dx = wants_grad<T>(self, 0) ? grad_of<T>(self, 0).data() : nullptr;
    T* dm = wants_grad<T>(self, 1) ? grad_of<T>(self, 1).data() : nullptr;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (n * C + c) * HW;
        for (std::size_t k = 0; k < HW; ++k) {
          if (dx) dx[base + k] += dy[base + k] * m[n * HW + k];
          if (dm) dm[n * HW + k] += dy[base + k] * xd[base + k];
        }
      }
    }
  });
}

#define EFSIGN_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, Conv2dParams);            \
  template Var<T> batch_norm2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormStats<T>&, \
                                  Mode);                                                           \
  template Var<T> activation<T>(const Var<T>&, Activation);                                        \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                               \
  template Var<T> channel_pool<T>(const Var<T>&);                                                  \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                          \
  template Var<T> dropout<T>(const Var<T>&, double, Mode, Rng&);                                   \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>);                   \
  template Var<T> max_pool2d<T>(const Var<T>&, std::size_t, std::size_t, std::size_t);             \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                            \
  template Var<T> scale_channels<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> scale_spatial<T>(const Var<T>&, const Var<T>&);

EFSIGN_INSTANTIATE_OPS(float)
EFSIGN_INSTANTIATE_OPS(double)

#undef EFSIGN_INSTANTIATE_OPS

}  // namespace efsign::ops

#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Row-major dense kernels used by the convolution and linear layers.
namespace efsign::detail {

// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  constexpr std::size_t kBlockN = 512;
  constexpr std::size_t kBlockK = 128;
  for (std::size_t n0 = 0; n0 < N; n0 += kBlockN) {
    const std::size_t n1 = std::min(N, n0 + kBlockN);
    const std::size_t len = n1 - n0;
    for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
      const std::size_t k1 = std::min(K, k0 + kBlockK);
      std::size_t m = 0;
      for (; m + 4 <= M; m += 4) {
        T* c0 = C + m * N + n0;
        T* c1 = c0 + N;
        T* c2 = c1 + N;
        T* c3 = c2 + N;
        for (std::size_t k = k0; k < k1; ++k) {
          const T a0 = A[m * K + k];
          const T a1 = A[(m + 1) * K + k];
          const T a2 = A[(m + 2) * K + k];
          const T a3 = A[(m + 3) * K + k];
          const T* b = B + k * N + n0;
          for (std::size_t j = 0; j < len; ++j) {
            const T bj = b[j];
            c0[j] += a0 * bj;
            c1[j] += a1 * bj;
            c2[j] += a2 * bj;
            c3[j] += a3 * bj;
          }
        }
      }
      for (; m < M; ++m) {
        T* c = C + m * N + n0;
        for (std::size_t k = k0; k < k1; ++k) {
          const T a = A[m * K + k];
          const T* b = B + k * N + n0;
          for (std::size_t j = 0; j < len; ++j) c[j] += a * b[j];
        }
      }
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

// C[M x K] += A[M x N] * B[K x N]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C,
             std::vector<T>& scratch) {
  scratch.resize(K * N);
  transpose(K, N, B, scratch.data());
  gemm_nn(M, K, N, A, scratch.data(), C);
}

// C[K x N] += A[M x K]^T * B[M x N]
template <typename T>
void gemm_tn(std::size_t K, std::size_t N, std::size_t M, const T* A, const T* B, T* C,
             std::vector<T>& scratch) {
  scratch.resize(M * K);
  transpose(M, K, A, scratch.data());
  gemm_nn(K, N, M, scratch.data(), B, C);
}

}  // namespace efsign::detail

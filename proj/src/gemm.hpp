#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace mast::detail {

// Row-major kernels. The innermost loop always walks a contiguous row so the
// compiler can vectorize it without reassociating reductions.

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] (+)= A^T * B with A stored [k x m], B [k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] (+)= A * B^T with A stored [m x k], B [n x k]
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
             bool accumulate) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c, accumulate);
}

}  // namespace mast::detail

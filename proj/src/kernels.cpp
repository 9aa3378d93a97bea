#include "npf/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace npf::kernels {

namespace {
Mode g_mode = Mode::Parallel;
}

Mode mode() { return g_mode; }
void set_mode(Mode m) { g_mode = m; }
bool parallel() { return g_mode == Mode::Parallel; }

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void gemm_nn_serial(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool acc) {
  for (i64 i = 0; i < M; ++i) {
    T* c = C + i * N;
    if (!acc)
      for (i64 n = 0; n < N; ++n) c[n] = T(0);
    const T* a = A + i * K;
    for (i64 k = 0; k < K; ++k) {
      const T aik = a[k];
      const T* b = B + k * N;
      for (i64 n = 0; n < N; ++n) c[n] += aik * b[n];
    }
  }
}

// R rows of A share each streamed B row; inner loop over N vectorizes.
template <typename T, int R>
void gemm_nn_rows(i64 i0, i64 N, i64 K, const T* A, const T* B, T* C, bool acc) {
  const T* a[R];
  T* c[R];
  for (int r = 0; r < R; ++r) {
    a[r] = A + (i0 + r) * K;
    c[r] = C + (i0 + r) * N;
  }
  if (!acc)
    for (int r = 0; r < R; ++r)
      for (i64 n = 0; n < N; ++n) c[r][n] = T(0);
  for (i64 k = 0; k < K; ++k) {
    const T* b = B + k * N;
    T v[R];
    for (int r = 0; r < R; ++r) v[r] = a[r][k];
#pragma omp simd
    for (i64 n = 0; n < N; ++n) {
      const T bn = b[n];
      for (int r = 0; r < R; ++r) c[r][n] += v[r] * bn;
    }
  }
}

template <typename T>
void gemm_nn_fast(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool acc) {
  constexpr int R = 6;
  const i64 mb = M / R;
#pragma omp parallel for schedule(static)
  for (i64 b = 0; b < mb; ++b) gemm_nn_rows<T, R>(b * R, N, K, A, B, C, acc);
  for (i64 i = mb * R; i < M; ++i) gemm_nn_rows<T, 1>(i, N, K, A, B, C, acc);
}

template <typename T>
void gemm_nt_serial(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool acc) {
  for (i64 i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (i64 j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T s = T(0);
      for (i64 k = 0; k < K; ++k) s += a[k] * b[k];
      c[j] = acc ? c[j] + s : s;
    }
  }
}

// Dot products with a fixed 8-lane accumulation order, so the result does not
// depend on the thread count.
template <typename T>
T dot_lanes(const T* a, const T* b, i64 K) {
  constexpr int L = 8;
  T lane[L] = {};
  i64 k = 0;
  for (; k + L <= K; k += L)
    for (int l = 0; l < L; ++l) lane[l] += a[k + l] * b[k + l];
  for (; k < K; ++k) lane[k % L] += a[k] * b[k];
  T s01 = lane[0] + lane[1], s23 = lane[2] + lane[3];
  T s45 = lane[4] + lane[5], s67 = lane[6] + lane[7];
  return (s01 + s23) + (s45 + s67);
}

template <typename T>
void gemm_nt_fast(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool acc) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (i64 j = 0; j < N; ++j) {
      const T s = dot_lanes(a, B + j * K, K);
      c[j] = acc ? c[j] + s : s;
    }
  }
}

template <typename T>
void gemm_tn_serial(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool acc) {
  if (!acc)
    for (i64 k = 0; k < K; ++k)
      for (i64 n = 0; n < N; ++n) C[k * N + n] = T(0);
  for (i64 m = 0; m < M; ++m) {
    const T* a = A + m * K;
    const T* b = B + m * N;
    for (i64 k = 0; k < K; ++k) {
      const T v = a[k];
      T* c = C + k * N;
      for (i64 n = 0; n < N; ++n) c[n] += v * b[n];
    }
  }
}

// Each thread owns a tile of output rows (k indices), streaming A and B once
// per tile in m order: deterministic for any thread count.
template <typename T>
void gemm_tn_fast(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool acc) {
  constexpr i64 TILE = 16;
  const i64 tiles = (K + TILE - 1) / TILE;
#pragma omp parallel for schedule(static)
  for (i64 t = 0; t < tiles; ++t) {
    const i64 k0 = t * TILE;
    const i64 k1 = std::min(K, k0 + TILE);
    if (!acc)
      for (i64 k = k0; k < k1; ++k)
        for (i64 n = 0; n < N; ++n) C[k * N + n] = T(0);
    for (i64 m = 0; m < M; ++m) {
      const T* a = A + m * K;
      const T* b = B + m * N;
      for (i64 k = k0; k < k1; ++k) {
        const T v = a[k];
        T* c = C + k * N;
#pragma omp simd
        for (i64 n = 0; n < N; ++n) c[n] += v * b[n];
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate, Mode m) {
  if (m == Mode::Serial)
    gemm_nn_serial(M, N, K, A, B, C, accumulate);
  else
    gemm_nn_fast(M, N, K, A, B, C, accumulate);
}

template <typename T>
void gemm_nt(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate, Mode m) {
  if (m == Mode::Serial)
    gemm_nt_serial(M, N, K, A, B, C, accumulate);
  else
    gemm_nt_fast(M, N, K, A, B, C, accumulate);
}

template <typename T>
void gemm_tn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate, Mode m) {
  if (m == Mode::Serial)
    gemm_tn_serial(M, N, K, A, B, C, accumulate);
  else
    gemm_tn_fast(M, N, K, A, B, C, accumulate);
}

template <typename T>
void gemm_nn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate) {
  gemm_nn(M, N, K, A, B, C, accumulate, g_mode);
}

template <typename T>
void gemm_nt(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate) {
  gemm_nt(M, N, K, A, B, C, accumulate, g_mode);
}

template <typename T>
void gemm_tn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate) {
  gemm_tn(M, N, K, A, B, C, accumulate, g_mode);
}

// ---------------------------------------------------------------------------
// Row-wise kernels
// ---------------------------------------------------------------------------

template <typename T>
void softmax_rows(i64 rows, i64 width, const T* x, T* y) {
#pragma omp parallel for schedule(static) if (g_mode == Mode::Parallel)
  for (i64 r = 0; r < rows; ++r) {
    const T* xi = x + r * width;
    T* yi = y + r * width;
    T m = xi[0];
    for (i64 j = 1; j < width; ++j) m = std::max(m, xi[j]);
    T s = T(0);
    for (i64 j = 0; j < width; ++j) {
      yi[j] = std::exp(xi[j] - m);
      s += yi[j];
    }
    const T inv = T(1) / s;
    for (i64 j = 0; j < width; ++j) yi[j] *= inv;
  }
}

template <typename T>
void logsumexp_rows(i64 rows, i64 width, const T* x, T* lse) {
#pragma omp parallel for schedule(static) if (g_mode == Mode::Parallel)
  for (i64 r = 0; r < rows; ++r) {
    const T* xi = x + r * width;
    T m = xi[0];
    for (i64 j = 1; j < width; ++j) m = std::max(m, xi[j]);
    T s = T(0);
    for (i64 j = 0; j < width; ++j) s += std::exp(xi[j] - m);
    lse[r] = m + std::log(s);
  }
}

template <typename T>
void layer_norm_rows(i64 rows, i64 width, T eps, const T* x, T* y, T* mean, T* inv_std) {
  const T invw = T(1) / static_cast<T>(width);
#pragma omp parallel for schedule(static) if (g_mode == Mode::Parallel)
  for (i64 r = 0; r < rows; ++r) {
    const T* xi = x + r * width;
    T* yi = y + r * width;
    T mu = T(0);
    for (i64 j = 0; j < width; ++j) mu += xi[j];
    mu *= invw;
    T var = T(0);
    for (i64 j = 0; j < width; ++j) {
      const T d = xi[j] - mu;
      var += d * d;
    }
    var *= invw;
    const T is = T(1) / std::sqrt(var + eps);
    for (i64 j = 0; j < width; ++j) yi[j] = (xi[j] - mu) * is;
    mean[r] = mu;
    inv_std[r] = is;
  }
}

#define NPF_INSTANTIATE(T)                                                       \
  template void gemm_nn<T>(i64, i64, i64, const T*, const T*, T*, bool);         \
  template void gemm_nt<T>(i64, i64, i64, const T*, const T*, T*, bool);         \
  template void gemm_tn<T>(i64, i64, i64, const T*, const T*, T*, bool);         \
  template void gemm_nn<T>(i64, i64, i64, const T*, const T*, T*, bool, Mode);   \
  template void gemm_nt<T>(i64, i64, i64, const T*, const T*, T*, bool, Mode);   \
  template void gemm_tn<T>(i64, i64, i64, const T*, const T*, T*, bool, Mode);   \
  template void softmax_rows<T>(i64, i64, const T*, T*);                         \
  template void logsumexp_rows<T>(i64, i64, const T*, T*);                       \
  template void layer_norm_rows<T>(i64, i64, T, const T*, T*, T*, T*);

NPF_INSTANTIATE(float)
NPF_INSTANTIATE(double)

#undef NPF_INSTANTIATE

}  // namespace npf::kernels

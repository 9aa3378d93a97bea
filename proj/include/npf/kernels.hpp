#ifndef NPF_KERNELS_HPP
#define NPF_KERNELS_HPP

#include <cstdint>

#include "npf/tensor.hpp"

// Dense inner loops. Every kernel has a straightforward serial reference and
// an OpenMP/SIMD fast path selected at runtime; tests compare the two and the
// bench target times them. Both paths accumulate each output element in a
// fixed order, so results are reproducible for a given mode and build.
namespace npf::kernels {

enum class Mode { Serial, Parallel };

Mode mode();
void set_mode(Mode m);
bool parallel();

// C[M,N] (+)= A[M,K] * B[K,N], all row-major. The three-argument overloads
// dispatch on the global mode; the Mode overloads force one (used for the
// serial per-slice work inside batched loops).
template <typename T>
void gemm_nn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate);
template <typename T>
void gemm_nn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate, Mode m);

// C[M,N] (+)= A[M,K] * B[N,K]^T.
template <typename T>
void gemm_nt(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate);
template <typename T>
void gemm_nt(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate, Mode m);

// C[K,N] (+)= A[M,K]^T * B[M,N].
template <typename T>
void gemm_tn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate);
template <typename T>
void gemm_tn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate, Mode m);

// Row-wise max-shifted softmax over the last axis.
template <typename T>
void softmax_rows(i64 rows, i64 width, const T* x, T* y);

// Row-wise max-shifted log-sum-exp over the last axis; lse has one value per row.
template <typename T>
void logsumexp_rows(i64 rows, i64 width, const T* x, T* lse);

// Row-wise normalization to zero mean / unit variance (no affine part).
// Saves mean and inv_std (1/sqrt(var+eps)) per row for the backward pass.
template <typename T>
void layer_norm_rows(i64 rows, i64 width, T eps, const T* x, T* y, T* mean, T* inv_std);

}  // namespace npf::kernels

#endif

#pragma once

#include <algorithm>
#include <cstddef>

namespace mfen {

// Small row-major GEMM kernels used by the convolution ops.
//
// Determinism contract: every output element is accumulated by exactly one
// thread in a fixed k order, so results are bitwise identical regardless of
// the OpenMP thread count or schedule.

// C[M x N] += A[M x K] * B[K x N]
template <typename S>
void gemm_nn(S* C, const S* A, const S* B, int M, int K, int N) {
  constexpr int MR = 4;
  constexpr int NB = 1024;
  const int mblocks = (M + MR - 1) / MR;
  const int nblocks = (N + NB - 1) / NB;
#pragma omp parallel for schedule(static) collapse(2)
  for (int bi = 0; bi < mblocks; ++bi)
    for (int bj = 0; bj < nblocks; ++bj) {
      const int i0 = bi * MR;
      const int j0 = bj * NB;
      const int mr = std::min(MR, M - i0);
      const int nb = std::min(NB, N - j0);
      if (mr == MR) {
        S* c0 = C + static_cast<std::size_t>(i0 + 0) * N + j0;
        S* c1 = C + static_cast<std::size_t>(i0 + 1) * N + j0;
        S* c2 = C + static_cast<std::size_t>(i0 + 2) * N + j0;
        S* c3 = C + static_cast<std::size_t>(i0 + 3) * N + j0;
        const S* a0 = A + static_cast<std::size_t>(i0 + 0) * K;
        const S* a1 = A + static_cast<std::size_t>(i0 + 1) * K;
        const S* a2 = A + static_cast<std::size_t>(i0 + 2) * K;
        const S* a3 = A + static_cast<std::size_t>(i0 + 3) * K;
        for (int k = 0; k < K; ++k) {
          const S* b = B + static_cast<std::size_t>(k) * N + j0;
          const S v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
#pragma omp simd
          for (int j = 0; j < nb; ++j) {
            c0[j] += v0 * b[j];
            c1[j] += v1 * b[j];
            c2[j] += v2 * b[j];
            c3[j] += v3 * b[j];
          }
        }
      } else {
        for (int r = 0; r < mr; ++r) {
          S* c = C + static_cast<std::size_t>(i0 + r) * N + j0;
          const S* a = A + static_cast<std::size_t>(i0 + r) * K;
          for (int k = 0; k < K; ++k) {
            const S av = a[k];
            const S* b = B + static_cast<std::size_t>(k) * N + j0;
#pragma omp simd
            for (int j = 0; j < nb; ++j) c[j] += av * b[j];
          }
        }
      }
    }
}

// C[M x N] += A[M x L] * B^T  with B stored [N x L]; each c[i][j] is a dot of
// two contiguous rows.
template <typename S>
void gemm_nt(S* C, const S* A, const S* B, int M, int L, int N) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const S* a = A + static_cast<std::size_t>(i) * L;
    S* c = C + static_cast<std::size_t>(i) * N;
    int j = 0;
    for (; j + 4 <= N; j += 4) {
      const S* b0 = B + static_cast<std::size_t>(j + 0) * L;
      const S* b1 = B + static_cast<std::size_t>(j + 1) * L;
      const S* b2 = B + static_cast<std::size_t>(j + 2) * L;
      const S* b3 = B + static_cast<std::size_t>(j + 3) * L;
      S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
      for (int l = 0; l < L; ++l) {
        const S av = a[l];
        s0 += av * b0[l];
        s1 += av * b1[l];
        s2 += av * b2[l];
        s3 += av * b3[l];
      }
      c[j + 0] += s0;
      c[j + 1] += s1;
      c[j + 2] += s2;
      c[j + 3] += s3;
    }
    for (; j < N; ++j) {
      const S* b = B + static_cast<std::size_t>(j) * L;
      S s = 0;
#pragma omp simd reduction(+ : s)
      for (int l = 0; l < L; ++l) s += a[l] * b[l];
      c[j] += s;
    }
  }
}

// C[M x N] += A^T * B  with A stored [K x M], B stored [K x N].
template <typename S>
void gemm_tn(S* C, const S* A, const S* B, int M, int K, int N) {
  constexpr int NB = 1024;
  const int nblocks = (N + NB - 1) / NB;
#pragma omp parallel for schedule(static) collapse(2)
  for (int i = 0; i < M; ++i)
    for (int bj = 0; bj < nblocks; ++bj) {
      const int j0 = bj * NB;
      const int nb = std::min(NB, N - j0);
      S* c = C + static_cast<std::size_t>(i) * N + j0;
      for (int k = 0; k < K; ++k) {
        const S av = A[static_cast<std::size_t>(k) * M + i];
        const S* b = B + static_cast<std::size_t>(k) * N + j0;
#pragma omp simd
        for (int j = 0; j < nb; ++j) c[j] += av * b[j];
      }
    }
}

}  // namespace mfen

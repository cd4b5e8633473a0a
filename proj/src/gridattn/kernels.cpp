// Optimized GEMM paths. The hot path is an AVX-512 6x16 microkernel over
// packed B panels with KC/NC cache blocking; a portable blocked loop covers
// other ISAs. Threads split output row blocks only, so every C element is
// accumulated by exactly one thread in a fixed k order and results are
// bit-identical at any thread count.
#include "matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace gridattn {

bool Matrix::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace {

constexpr std::size_t KC = 256;
constexpr std::size_t NC = 512;

#if defined(__AVX512F__)

constexpr std::size_t MR = 6;
constexpr std::size_t NR = 16;

// Pack a kc x nr slice of B (row-major, leading dimension ldb) into a
// contiguous panel, zero-padding the column edge.
void pack_b_panel(const double* B, std::size_t ldb, std::size_t kc, std::size_t nr, double* panel) {
  for (std::size_t k = 0; k < kc; ++k) {
    const double* src = B + k * ldb;
    double* dst = panel + k * NR;
    std::size_t j = 0;
    for (; j < nr; ++j) dst[j] = src[j];
    for (; j < NR; ++j) dst[j] = 0.0;
  }
}

// C tile (mr x nr, mr <= 6, nr <= 16) += A-rows * packed B panel.
void kernel_6x16(const double* A, std::size_t lda, const double* panel, std::size_t kc, double* C,
                 std::size_t ldc, std::size_t mr, std::size_t nr, bool first) {
  __m512d acc[MR][2];
  __mmask8 m0 = nr >= 8 ? 0xFF : static_cast<__mmask8>((1u << nr) - 1);
  __mmask8 m1 = nr >= 16 ? 0xFF : (nr > 8 ? static_cast<__mmask8>((1u << (nr - 8)) - 1) : 0);
  for (std::size_t i = 0; i < mr; ++i) {
    if (first) {
      acc[i][0] = _mm512_setzero_pd();
      acc[i][1] = _mm512_setzero_pd();
    } else {
      acc[i][0] = _mm512_maskz_loadu_pd(m0, C + i * ldc);
      acc[i][1] = _mm512_maskz_loadu_pd(m1, C + i * ldc + 8);
    }
  }
  for (std::size_t k = 0; k < kc; ++k) {
    __m512d b0 = _mm512_loadu_pd(panel + k * NR);
    __m512d b1 = _mm512_loadu_pd(panel + k * NR + 8);
    for (std::size_t i = 0; i < mr; ++i) {
      __m512d a = _mm512_set1_pd(A[i * lda + k]);
      acc[i][0] = _mm512_fmadd_pd(a, b0, acc[i][0]);
      acc[i][1] = _mm512_fmadd_pd(a, b1, acc[i][1]);
    }
  }
  for (std::size_t i = 0; i < mr; ++i) {
    _mm512_mask_storeu_pd(C + i * ldc, m0, acc[i][0]);
    _mm512_mask_storeu_pd(C + i * ldc + 8, m1, acc[i][1]);
  }
}

void gemm_opt(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
              std::size_t N, bool accumulate) {
  if (!accumulate) {
    // The k0 loop accumulates into C; start clean.
    std::memset(C, 0, M * N * sizeof(double));
  }
  std::vector<double> packed(KC * NC);
  for (std::size_t j0 = 0; j0 < N; j0 += NC) {
    std::size_t nc = std::min(NC, N - j0);
    for (std::size_t k0 = 0; k0 < K; k0 += KC) {
      std::size_t kc = std::min(KC, K - k0);
      std::size_t npanels = (nc + NR - 1) / NR;
      for (std::size_t p = 0; p < npanels; ++p) {
        std::size_t nr = std::min(NR, nc - p * NR);
        pack_b_panel(B + k0 * N + j0 + p * NR, N, kc, nr, packed.data() + p * KC * NR);
      }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (std::ptrdiff_t i0 = 0; i0 < static_cast<std::ptrdiff_t>(M); i0 += MR) {
        std::size_t mr = std::min(MR, M - static_cast<std::size_t>(i0));
        for (std::size_t p = 0; p < npanels; ++p) {
          std::size_t nr = std::min(NR, nc - p * NR);
          kernel_6x16(A + static_cast<std::size_t>(i0) * K + k0, K, packed.data() + p * KC * NR,
                      kc, C + static_cast<std::size_t>(i0) * N + j0 + p * NR, N, mr, nr,
                      /*first=*/false);
        }
      }
    }
  }
}

#else  // portable fallback

void gemm_opt(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
              std::size_t N, bool accumulate) {
  if (!accumulate) std::memset(C, 0, M * N * sizeof(double));
  constexpr std::size_t BK = 64;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(M); ++i) {
    for (std::size_t k0 = 0; k0 < K; k0 += BK) {
      std::size_t kend = std::min(k0 + BK, K);
      for (std::size_t k = k0; k < kend; ++k) {
        double a = A[static_cast<std::size_t>(i) * K + k];
        const double* brow = B + k * N;
        double* crow = C + static_cast<std::size_t>(i) * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  }
}

#endif

void transpose_raw(const double* in, double* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t TB = 32;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t i0 = 0; i0 < static_cast<std::ptrdiff_t>(rows); i0 += TB) {
    for (std::size_t j0 = 0; j0 < cols; j0 += TB) {
      std::size_t iend = std::min(static_cast<std::size_t>(i0) + TB, rows);
      std::size_t jend = std::min(j0 + TB, cols);
      for (std::size_t i = static_cast<std::size_t>(i0); i < iend; ++i)
        for (std::size_t j = j0; j < jend; ++j) out[j * rows + i] = in[i * cols + j];
    }
  }
}

void check_gemm_shapes(std::size_t am, std::size_t ak, std::size_t bk, std::size_t bn,
                       const Matrix& C, std::size_t cm, std::size_t cn) {
  if (ak != bk) throw std::invalid_argument("gemm: inner dimensions differ");
  if (C.rows != cm || C.cols != cn) throw std::invalid_argument("gemm: output shape mismatch");
  (void)am;
  (void)bn;
}

}  // namespace

void gemm(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate) {
  check_gemm_shapes(A.rows, A.cols, B.rows, B.cols, C, A.rows, B.cols);
  gemm_opt(A.data.data(), B.data.data(), C.data.data(), A.rows, A.cols, B.cols, accumulate);
}

void gemm_tn(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate) {
  check_gemm_shapes(A.cols, A.rows, B.rows, B.cols, C, A.cols, B.cols);
  Matrix At(A.cols, A.rows);
  transpose_raw(A.data.data(), At.data.data(), A.rows, A.cols);
  gemm_opt(At.data.data(), B.data.data(), C.data.data(), At.rows, At.cols, B.cols, accumulate);
}

void gemm_nt(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate) {
  check_gemm_shapes(A.rows, A.cols, B.cols, B.rows, C, A.rows, B.rows);
  Matrix Bt(B.cols, B.rows);
  transpose_raw(B.data.data(), Bt.data.data(), B.rows, B.cols);
  gemm_opt(A.data.data(), Bt.data.data(), C.data.data(), A.rows, A.cols, Bt.cols, accumulate);
}

void gemm_ref(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate) {
  check_gemm_shapes(A.rows, A.cols, B.rows, B.cols, C, A.rows, B.cols);
  if (!accumulate) C.fill(0.0);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t k = 0; k < A.cols; ++k) {
      double a = A(i, k);
      for (std::size_t j = 0; j < B.cols; ++j) C(i, j) += a * B(k, j);
    }
}

void transpose(const Matrix& in, Matrix& out) {
  out = Matrix(in.cols, in.rows);
  transpose_raw(in.data.data(), out.data.data(), in.rows, in.cols);
}

}  // namespace gridattn

#pragma once
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridattn {

// Dense row-major matrix of doubles. Vectors are 1xN or Nx1 matrices.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  std::size_t size() const { return rows * cols; }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
  bool all_finite() const;
};

// C = A * B (or C += with accumulate). Optimized path, OpenMP-parallel,
// deterministic at any thread count (fixed per-element accumulation order).
void gemm(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate = false);
// C = A^T * B
void gemm_tn(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate = false);
// C = A * B^T
void gemm_nt(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate = false);

// Naive triple-loop reference used by tests and benchmarks.
void gemm_ref(const Matrix& A, const Matrix& B, Matrix& C, bool accumulate = false);

// out = in^T (blocked).
void transpose(const Matrix& in, Matrix& out);

}  // namespace gridattn

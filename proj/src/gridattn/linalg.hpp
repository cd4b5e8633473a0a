#pragma once
#include "matrix.hpp"

namespace gridattn {

// In-place lower Cholesky of a symmetric positive-definite matrix.
// Returns false if a pivot is not strictly positive. On success the lower
// triangle (incl. diagonal) holds L; the strict upper triangle is untouched.
bool cholesky_lower(Matrix& a);

// Sum of 2*log(diag(L)) for a factored matrix.
double cholesky_logdet(const Matrix& l);

// Solve L L^T X = B in place (B overwritten with X), L from cholesky_lower.
void cholesky_solve(const Matrix& l, Matrix& b);

// log|det(A)| of a general square matrix via partial-pivot LU.
// sign_out receives the determinant sign (+1/-1/0).
double lu_logabsdet(Matrix a, int& sign_out);

// Determinant of a small general square matrix via LU.
double lu_det(Matrix a);

}  // namespace gridattn

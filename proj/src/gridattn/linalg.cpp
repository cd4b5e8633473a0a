#include "linalg.hpp"

#include <cmath>

namespace gridattn {

bool cholesky_lower(Matrix& a) {
  std::size_t n = a.rows;
  if (a.cols != n) throw std::invalid_argument("cholesky: matrix not square");
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    double lj = std::sqrt(d);
    a(j, j) = lj;
    double inv = 1.0 / lj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      const double* ri = a.row(i);
      const double* rj = a.row(j);
      for (std::size_t k = 0; k < j; ++k) s -= ri[k] * rj[k];
      a(i, j) = s * inv;
    }
  }
  return true;
}

double cholesky_logdet(const Matrix& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows; ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

void cholesky_solve(const Matrix& l, Matrix& b) {
  std::size_t n = l.rows, m = b.cols;
  if (b.rows != n) throw std::invalid_argument("cholesky_solve: shape mismatch");
  // forward: L y = b
  for (std::size_t i = 0; i < n; ++i) {
    const double* li = l.row(i);
    double* bi = b.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      double lik = li[k];
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < m; ++j) bi[j] -= lik * bk[j];
    }
    double inv = 1.0 / li[i];
    for (std::size_t j = 0; j < m; ++j) bi[j] *= inv;
  }
  // backward: L^T x = y
  for (std::size_t ii = n; ii-- > 0;) {
    double* bi = b.row(ii);
    for (std::size_t k = ii + 1; k < n; ++k) {
      double lki = l(k, ii);
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < m; ++j) bi[j] -= lki * bk[j];
    }
    double inv = 1.0 / l(ii, ii);
    for (std::size_t j = 0; j < m; ++j) bi[j] *= inv;
  }
}

double lu_logabsdet(Matrix a, int& sign_out) {
  std::size_t n = a.rows;
  if (a.cols != n) throw std::invalid_argument("lu: matrix not square");
  int sign = 1;
  double logabs = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::fabs(a(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      double v = std::fabs(a(i, k));
      if (v > best) {
        best = v;
        piv = i;
      }
    }
    if (best == 0.0) {
      sign_out = 0;
      return -std::numeric_limits<double>::infinity();
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(piv, j));
      sign = -sign;
    }
    double pivval = a(k, k);
    if (pivval < 0.0) sign = -sign;
    logabs += std::log(std::fabs(pivval));
    double inv = 1.0 / pivval;
    for (std::size_t i = k + 1; i < n; ++i) {
      double f = a(i, k) * inv;
      a(i, k) = f;
      for (std::size_t j = k + 1; j < n; ++j) a(i, j) -= f * a(k, j);
    }
  }
  sign_out = sign;
  return logabs;
}

double lu_det(Matrix a) {
  int sign = 0;
  double logabs = lu_logabsdet(std::move(a), sign);
  if (sign == 0) return 0.0;
  return sign * std::exp(logabs);
}

}  // namespace gridattn

#include "tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "io.hpp"

namespace gridattn {
namespace {

void check(bool ok, const char* msg) {
  if (!ok) throw CliError("shape_error", msg);
}

}  // namespace

NodeId Tape::push(Matrix value, bool req, std::function<void(Tape&)> back) {
#ifndef NDEBUG
  if (!value.all_finite()) throw CliError("numeric_error", "non-finite value on tape");
#endif
  Node n;
  n.owned = std::move(value);
  n.req = req;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::input(Matrix v) { return push(std::move(v), false, nullptr); }

NodeId Tape::input_ref(const Matrix* v) {
  Node n;
  n.vp = v;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::param(const Matrix* value, Matrix* grad_sink) {
  Node n;
  n.vp = value;
  n.ext_grad = grad_sink;
  n.req = true;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Matrix& Tape::grad(NodeId id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_alloc) {
    const Matrix& v = val(id);
    n.gradm = Matrix(v.rows, v.cols);
    n.grad_alloc = true;
  }
  return n.gradm;
}

void Tape::backward(NodeId loss) {
  check(val(loss).rows == 1 && val(loss).cols == 1, "backward target must be scalar");
  grad(loss)(0, 0) = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.req && n.grad_alloc && n.back) n.back(*this);
  }
  for (Node& n : nodes_) {
    if (n.ext_grad && n.grad_alloc) {
      check(n.ext_grad->same_shape(n.gradm), "parameter gradient shape mismatch");
      double* dst = n.ext_grad->data.data();
      const double* src = n.gradm.data.data();
      for (std::size_t k = 0; k < n.gradm.size(); ++k) dst[k] += src[k];
    }
  }
}

NodeId Tape::linear(NodeId x, NodeId w, NodeId b) {
  const Matrix& X = val(x);
  const Matrix& W = val(w);
  const Matrix& B = val(b);
  check(X.cols == W.cols, "linear: input/weight fan-in mismatch");
  check(B.rows == 1 && B.cols == W.rows, "linear: bias shape");
  Matrix y(X.rows, W.rows);
  gemm_nt(X, W, y);
  const double* bp = B.row(0);
#pragma omp parallel for
  for (std::size_t i = 0; i < y.rows; ++i) {
    double* r = y.row(i);
    for (std::size_t j = 0; j < y.cols; ++j) r[j] += bp[j];
  }
  bool req = requires(x) || requires(w) || requires(b);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, w, b, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      if (t.requires(x)) gemm(dY, t.val(w), t.grad(x), true);
      if (t.requires(w)) gemm_tn(dY, t.val(x), t.grad(w), true);
      if (t.requires(b)) {
        Matrix& db = t.grad(b);
        double* dbp = db.row(0);
#pragma omp parallel for
        for (std::size_t j = 0; j < dY.cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < dY.rows; ++i) s += dY(i, j);
          dbp[j] += s;
        }
      }
    };
  return id;
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check(A.cols == B.rows, "matmul: inner dimension mismatch");
  Matrix y(A.rows, B.cols);
  gemm(A, B, y);
  bool req = requires(a) || requires(b);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [a, b, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      if (t.requires(a)) gemm_nt(dY, t.val(b), t.grad(a), true);
      if (t.requires(b)) gemm_tn(t.val(a), dY, t.grad(b), true);
    };
  return id;
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check(A.cols == B.cols, "matmul_nt: inner dimension mismatch");
  Matrix y(A.rows, B.rows);
  gemm_nt(A, B, y);
  bool req = requires(a) || requires(b);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [a, b, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      if (t.requires(a)) gemm(dY, t.val(b), t.grad(a), true);
      if (t.requires(b)) gemm_tn(dY, t.val(a), t.grad(b), true);
    };
  return id;
}

namespace {

template <typename F>
Matrix map_matrix(const Matrix& x, F f) {
  Matrix y(x.rows, x.cols);
  const double* xp = x.data.data();
  double* yp = y.data.data();
#pragma omp parallel for
  for (std::size_t i = 0; i < x.size(); ++i) yp[i] = f(xp[i]);
  return y;
}

void axpy(double alpha, const Matrix& src, Matrix& dst) {
  const double* s = src.data.data();
  double* d = dst.data.data();
#pragma omp parallel for
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += alpha * s[i];
}

}  // namespace

NodeId Tape::add(NodeId a, NodeId b) { return add_scaled(a, b, 1.0); }

NodeId Tape::add_scaled(NodeId a, NodeId b, double alpha) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check(A.same_shape(B), "add: shape mismatch");
  Matrix y(A.rows, A.cols);
  const double* ap = A.data.data();
  const double* bp = B.data.data();
  double* yp = y.data.data();
#pragma omp parallel for
  for (std::size_t i = 0; i < y.size(); ++i) yp[i] = ap[i] + alpha * bp[i];
  bool req = requires(a) || requires(b);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [a, b, alpha, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      if (t.requires(a)) axpy(1.0, dY, t.grad(a));
      if (t.requires(b)) axpy(alpha, dY, t.grad(b));
    };
  return id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check(A.same_shape(B), "mul: shape mismatch");
  Matrix y(A.rows, A.cols);
  const double* ap = A.data.data();
  const double* bp = B.data.data();
  double* yp = y.data.data();
#pragma omp parallel for
  for (std::size_t i = 0; i < y.size(); ++i) yp[i] = ap[i] * bp[i];
  bool req = requires(a) || requires(b);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [a, b, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      const double* dy = dY.data.data();
      if (t.requires(a)) {
        double* da = t.grad(a).data.data();
        const double* bv = t.val(b).data.data();
#pragma omp parallel for
        for (std::size_t i = 0; i < dY.size(); ++i) da[i] += dy[i] * bv[i];
      }
      if (t.requires(b)) {
        double* db = t.grad(b).data.data();
        const double* av = t.val(a).data.data();
#pragma omp parallel for
        for (std::size_t i = 0; i < dY.size(); ++i) db[i] += dy[i] * av[i];
      }
    };
  return id;
}

NodeId Tape::mul_const(NodeId x, Matrix mask) {
  const Matrix& X = val(x);
  check(X.same_shape(mask), "mul_const: shape mismatch");
  Matrix y(X.rows, X.cols);
  const double* xp = X.data.data();
  const double* mp = mask.data.data();
  double* yp = y.data.data();
#pragma omp parallel for
  for (std::size_t i = 0; i < y.size(); ++i) yp[i] = xp[i] * mp[i];
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, id, m = std::move(mask)](Tape& t) {
      const double* dy = t.grad(id).data.data();
      const double* mp2 = m.data.data();
      double* dx = t.grad(x).data.data();
      std::size_t n = t.grad(id).size();
#pragma omp parallel for
      for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * mp2[i];
    };
  return id;
}

NodeId Tape::mul_rowvec(NodeId x, NodeId w) {
  const Matrix& X = val(x);
  const Matrix& W = val(w);
  check(W.rows == 1 && W.cols == X.cols, "mul_rowvec: weight must be (1, cols)");
  Matrix y(X.rows, X.cols);
  const double* wp = W.row(0);
#pragma omp parallel for
  for (std::size_t i = 0; i < X.rows; ++i) {
    const double* xr = X.row(i);
    double* yr = y.row(i);
    for (std::size_t j = 0; j < X.cols; ++j) yr[j] = xr[j] * wp[j];
  }
  bool req = requires(x) || requires(w);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, w, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      if (t.requires(x)) {
        Matrix& dX = t.grad(x);
        const double* wp2 = t.val(w).row(0);
#pragma omp parallel for
        for (std::size_t i = 0; i < dY.rows; ++i) {
          const double* dyr = dY.row(i);
          double* dxr = dX.row(i);
          for (std::size_t j = 0; j < dY.cols; ++j) dxr[j] += dyr[j] * wp2[j];
        }
      }
      if (t.requires(w)) {
        Matrix& dW = t.grad(w);
        const Matrix& X2 = t.val(x);
        double* dwp = dW.row(0);
#pragma omp parallel for
        for (std::size_t j = 0; j < dY.cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < dY.rows; ++i) s += dY(i, j) * X2(i, j);
          dwp[j] += s;
        }
      }
    };
  return id;
}

NodeId Tape::sigmoid(NodeId x) {
  Matrix y = map_matrix(val(x), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, id](Tape& t) {
      const Matrix& Y = t.val(id);
      const double* dy = t.grad(id).data.data();
      const double* yv = Y.data.data();
      double* dx = t.grad(x).data.data();
#pragma omp parallel for
      for (std::size_t i = 0; i < Y.size(); ++i) dx[i] += dy[i] * yv[i] * (1.0 - yv[i]);
    };
  return id;
}

NodeId Tape::tanh_op(NodeId x) {
  Matrix y = map_matrix(val(x), [](double v) { return std::tanh(v); });
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, id](Tape& t) {
      const Matrix& Y = t.val(id);
      const double* dy = t.grad(id).data.data();
      const double* yv = Y.data.data();
      double* dx = t.grad(x).data.data();
#pragma omp parallel for
      for (std::size_t i = 0; i < Y.size(); ++i) dx[i] += dy[i] * (1.0 - yv[i] * yv[i]);
    };
  return id;
}

NodeId Tape::relu(NodeId x) {
  Matrix y = map_matrix(val(x), [](double v) { return v > 0.0 ? v : 0.0; });
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, id](Tape& t) {
      const double* dy = t.grad(id).data.data();
      const double* xv = t.val(x).data.data();
      double* dx = t.grad(x).data.data();
      std::size_t n = t.val(x).size();
#pragma omp parallel for
      for (std::size_t i = 0; i < n; ++i)
        if (xv[i] > 0.0) dx[i] += dy[i];
    };
  return id;
}

NodeId Tape::slice_cols(NodeId x, std::size_t lo, std::size_t n) {
  const Matrix& X = val(x);
  check(lo + n <= X.cols, "slice_cols: out of range");
  Matrix y(X.rows, n);
#pragma omp parallel for
  for (std::size_t i = 0; i < X.rows; ++i)
    std::memcpy(y.row(i), X.row(i) + lo, n * sizeof(double));
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, lo, n, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      Matrix& dX = t.grad(x);
#pragma omp parallel for
      for (std::size_t i = 0; i < dY.rows; ++i) {
        const double* dyr = dY.row(i);
        double* dxr = dX.row(i) + lo;
        for (std::size_t j = 0; j < n; ++j) dxr[j] += dyr[j];
      }
    };
  return id;
}

NodeId Tape::gather_rows_strided(NodeId x, std::size_t offset, std::size_t stride,
                                 std::size_t count) {
  const Matrix& X = val(x);
  check(count == 0 || offset + (count - 1) * stride < X.rows, "gather: out of range");
  Matrix y(count, X.cols);
#pragma omp parallel for
  for (std::size_t i = 0; i < count; ++i)
    std::memcpy(y.row(i), X.row(offset + i * stride), X.cols * sizeof(double));
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, offset, stride, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      Matrix& dX = t.grad(x);
#pragma omp parallel for
      for (std::size_t i = 0; i < dY.rows; ++i) {
        const double* dyr = dY.row(i);
        double* dxr = dX.row(offset + i * stride);
        for (std::size_t j = 0; j < dY.cols; ++j) dxr[j] += dyr[j];
      }
    };
  return id;
}

NodeId Tape::reshape(NodeId x, std::size_t rows, std::size_t cols) {
  const Matrix& X = val(x);
  check(rows * cols == X.size(), "reshape: size mismatch");
  Matrix y(rows, cols);
  std::memcpy(y.data.data(), X.data.data(), X.size() * sizeof(double));
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, id](Tape& t) {
      const double* dy = t.grad(id).data.data();
      double* dx = t.grad(x).data.data();
      std::size_t n = t.grad(id).size();
      for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i];
    };
  return id;
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
  const Matrix& X = val(x);
  const Matrix& G = val(gain);
  const Matrix& B = val(bias);
  check(G.rows == 1 && G.cols == X.cols && B.rows == 1 && B.cols == X.cols,
        "layer_norm: affine shape");
  Matrix xhat(X.rows, X.cols);
  std::vector<double> inv_std(X.rows);
  Matrix y(X.rows, X.cols);
  const double* gp = G.row(0);
  const double* bp = B.row(0);
#pragma omp parallel for
  for (std::size_t i = 0; i < X.rows; ++i) {
    const double* xr = X.row(i);
    double mu = 0.0;
    for (std::size_t j = 0; j < X.cols; ++j) mu += xr[j];
    mu /= static_cast<double>(X.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < X.cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(X.cols);
    double s = 1.0 / std::sqrt(var + eps);
    inv_std[i] = s;
    double* hr = xhat.row(i);
    double* yr = y.row(i);
    for (std::size_t j = 0; j < X.cols; ++j) {
      hr[j] = (xr[j] - mu) * s;
      yr[j] = hr[j] * gp[j] + bp[j];
    }
  }
  bool req = requires(x) || requires(gain) || requires(bias);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, gain, bias, id, xh = std::move(xhat),
                          is = std::move(inv_std)](Tape& t) {
      const Matrix& dY = t.grad(id);
      const double* gp2 = t.val(gain).row(0);
      if (t.requires(x)) {
        Matrix& dX = t.grad(x);
        double inv_n = 1.0 / static_cast<double>(dY.cols);
#pragma omp parallel for
        for (std::size_t i = 0; i < dY.rows; ++i) {
          const double* dyr = dY.row(i);
          const double* hr = xh.row(i);
          double* dxr = dX.row(i);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < dY.cols; ++j) {
            double dh = dyr[j] * gp2[j];
            m1 += dh;
            m2 += dh * hr[j];
          }
          m1 *= inv_n;
          m2 *= inv_n;
          for (std::size_t j = 0; j < dY.cols; ++j) {
            double dh = dyr[j] * gp2[j];
            dxr[j] += is[i] * (dh - m1 - hr[j] * m2);
          }
        }
      }
      if (t.requires(gain)) {
        double* dg = t.grad(gain).row(0);
#pragma omp parallel for
        for (std::size_t j = 0; j < dY.cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < dY.rows; ++i) s += dY(i, j) * xh(i, j);
          dg[j] += s;
        }
      }
      if (t.requires(bias)) {
        double* db = t.grad(bias).row(0);
#pragma omp parallel for
        for (std::size_t j = 0; j < dY.cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < dY.rows; ++i) s += dY(i, j);
          db[j] += s;
        }
      }
    };
  return id;
}

NodeId Tape::group_norm_rows(NodeId x, NodeId gain, NodeId bias, std::size_t group, double eps) {
  const Matrix& X = val(x);
  const Matrix& G = val(gain);
  const Matrix& B = val(bias);
  check(group >= 1 && X.rows % group == 0, "group_norm: rows must divide into groups");
  check(G.rows == 1 && G.cols == X.cols && B.rows == 1 && B.cols == X.cols,
        "group_norm: affine shape");
  std::size_t ngroups = X.rows / group;
  Matrix xhat(X.rows, X.cols);
  Matrix inv_std(ngroups, X.cols);
  Matrix y(X.rows, X.cols);
  const double* gp = G.row(0);
  const double* bp = B.row(0);
  double inv_g = 1.0 / static_cast<double>(group);
#pragma omp parallel for
  for (std::size_t g = 0; g < ngroups; ++g) {
    std::size_t r0 = g * group;
    for (std::size_t j = 0; j < X.cols; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < group; ++i) mu += X(r0 + i, j);
      mu *= inv_g;
      double var = 0.0;
      for (std::size_t i = 0; i < group; ++i) {
        double d = X(r0 + i, j) - mu;
        var += d * d;
      }
      var *= inv_g;
      double s = 1.0 / std::sqrt(var + eps);
      inv_std(g, j) = s;
      for (std::size_t i = 0; i < group; ++i) {
        double h = (X(r0 + i, j) - mu) * s;
        xhat(r0 + i, j) = h;
        y(r0 + i, j) = h * gp[j] + bp[j];
      }
    }
  }
  bool req = requires(x) || requires(gain) || requires(bias);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, gain, bias, id, group, ngroups, xh = std::move(xhat),
                          is = std::move(inv_std)](Tape& t) {
      const Matrix& dY = t.grad(id);
      const double* gp2 = t.val(gain).row(0);
      double inv_g2 = 1.0 / static_cast<double>(group);
      if (t.requires(x)) {
        Matrix& dX = t.grad(x);
#pragma omp parallel for
        for (std::size_t g = 0; g < ngroups; ++g) {
          std::size_t r0 = g * group;
          for (std::size_t j = 0; j < dY.cols; ++j) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < group; ++i) {
              double dh = dY(r0 + i, j) * gp2[j];
              m1 += dh;
              m2 += dh * xh(r0 + i, j);
            }
            m1 *= inv_g2;
            m2 *= inv_g2;
            for (std::size_t i = 0; i < group; ++i) {
              double dh = dY(r0 + i, j) * gp2[j];
              dX(r0 + i, j) += is(g, j) * (dh - m1 - xh(r0 + i, j) * m2);
            }
          }
        }
      }
      if (t.requires(gain)) {
        double* dg = t.grad(gain).row(0);
#pragma omp parallel for
        for (std::size_t j = 0; j < dY.cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < dY.rows; ++i) s += dY(i, j) * xh(i, j);
          dg[j] += s;
        }
      }
      if (t.requires(bias)) {
        double* db = t.grad(bias).row(0);
#pragma omp parallel for
        for (std::size_t j = 0; j < dY.cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < dY.rows; ++i) s += dY(i, j);
          db[j] += s;
        }
      }
    };
  return id;
}

NodeId Tape::self_attention(NodeId q, NodeId k, NodeId v, std::size_t heads,
                            std::size_t seq_len) {
  const Matrix& Q = val(q);
  const Matrix& K = val(k);
  const Matrix& V = val(v);
  check(Q.same_shape(K) && Q.same_shape(V), "attention: q/k/v shapes differ");
  check(seq_len >= 1 && Q.rows % seq_len == 0, "attention: rows must divide into sequences");
  check(heads >= 1 && Q.cols % heads == 0, "attention: cols must divide into heads");
  std::size_t nseq = Q.rows / seq_len;
  std::size_t dh = Q.cols / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix probs(nseq * heads * seq_len, seq_len);
  Matrix y(Q.rows, Q.cols);
#pragma omp parallel for
  for (std::size_t s = 0; s < nseq; ++s) {
    for (std::size_t a = 0; a < heads; ++a) {
      std::size_t r0 = s * seq_len;
      std::size_t c0 = a * dh;
      double* P0 = probs.row((s * heads + a) * seq_len);
      // scores -> softmax rows
      for (std::size_t i = 0; i < seq_len; ++i) {
        double* pr = P0 + i * seq_len;
        double mx = -1e300;
        for (std::size_t j = 0; j < seq_len; ++j) {
          double dot = 0.0;
          const double* qi = Q.row(r0 + i) + c0;
          const double* kj = K.row(r0 + j) + c0;
          for (std::size_t d = 0; d < dh; ++d) dot += qi[d] * kj[d];
          pr[j] = dot * scale;
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq_len; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        for (std::size_t j = 0; j < seq_len; ++j) pr[j] /= z;
      }
      for (std::size_t i = 0; i < seq_len; ++i) {
        double* yr = y.row(r0 + i) + c0;
        const double* pr = P0 + i * seq_len;
        for (std::size_t d = 0; d < dh; ++d) {
          double acc = 0.0;
          for (std::size_t j = 0; j < seq_len; ++j) acc += pr[j] * V(r0 + j, c0 + d);
          yr[d] = acc;
        }
      }
    }
  }
  bool req = requires(q) || requires(k) || requires(v);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [q, k, v, id, heads, seq_len, nseq, dh, scale,
                          P = std::move(probs)](Tape& t) {
      const Matrix& dY = t.grad(id);
      const Matrix& Q2 = t.val(q);
      const Matrix& K2 = t.val(k);
      const Matrix& V2 = t.val(v);
      Matrix& dQ = t.grad(q);
      Matrix& dK = t.grad(k);
      Matrix& dV = t.grad(v);
#pragma omp parallel for
      for (std::size_t s = 0; s < nseq; ++s) {
        std::vector<double> dS(seq_len * seq_len);
        for (std::size_t a = 0; a < heads; ++a) {
          std::size_t r0 = s * seq_len;
          std::size_t c0 = a * dh;
          const double* P0 = P.row((s * heads + a) * seq_len);
          // dV += P^T dO; dP = dO V^T; dS = P o (dP - rowsum(dP o P))
          for (std::size_t i = 0; i < seq_len; ++i) {
            const double* pr = P0 + i * seq_len;
            const double* dyr = dY.row(r0 + i) + c0;
            double rsum = 0.0;
            for (std::size_t j = 0; j < seq_len; ++j) {
              double dp = 0.0;
              const double* vj = V2.row(r0 + j) + c0;
              for (std::size_t d = 0; d < dh; ++d) dp += dyr[d] * vj[d];
              dS[i * seq_len + j] = dp;
              rsum += dp * pr[j];
            }
            for (std::size_t j = 0; j < seq_len; ++j)
              dS[i * seq_len + j] = pr[j] * (dS[i * seq_len + j] - rsum);
          }
          for (std::size_t j = 0; j < seq_len; ++j) {
            double* dvj = dV.row(r0 + j) + c0;
            for (std::size_t d = 0; d < dh; ++d) {
              double acc = 0.0;
              for (std::size_t i = 0; i < seq_len; ++i)
                acc += P0[i * seq_len + j] * dY(r0 + i, c0 + d);
              dvj[d] += acc;
            }
          }
          for (std::size_t i = 0; i < seq_len; ++i) {
            double* dqi = dQ.row(r0 + i) + c0;
            for (std::size_t d = 0; d < dh; ++d) {
              double acc = 0.0;
              for (std::size_t j = 0; j < seq_len; ++j)
                acc += dS[i * seq_len + j] * K2(r0 + j, c0 + d);
              dqi[d] += acc * scale;
            }
          }
          for (std::size_t j = 0; j < seq_len; ++j) {
            double* dkj = dK.row(r0 + j) + c0;
            for (std::size_t d = 0; d < dh; ++d) {
              double acc = 0.0;
              for (std::size_t i = 0; i < seq_len; ++i)
                acc += dS[i * seq_len + j] * Q2(r0 + i, c0 + d);
              dkj[d] += acc * scale;
            }
          }
        }
      }
    };
  return id;
}

NodeId Tape::add_timewise(NodeId x, NodeId p) {
  const Matrix& X = val(x);
  const Matrix& P = val(p);
  check(P.cols == X.cols && P.rows >= 1 && X.rows % P.rows == 0, "add_timewise: shape mismatch");
  std::size_t T = P.rows;
  Matrix y(X.rows, X.cols);
#pragma omp parallel for
  for (std::size_t i = 0; i < X.rows; ++i) {
    const double* xr = X.row(i);
    const double* pr = P.row(i % T);
    double* yr = y.row(i);
    for (std::size_t j = 0; j < X.cols; ++j) yr[j] = xr[j] + pr[j];
  }
  bool req = requires(x) || requires(p);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, p, T, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      if (t.requires(x)) axpy(1.0, dY, t.grad(x));
      if (t.requires(p)) {
        Matrix& dP = t.grad(p);
        std::size_t nseq = dY.rows / T;
#pragma omp parallel for
        for (std::size_t tt = 0; tt < T; ++tt) {
          double* dpr = dP.row(tt);
          for (std::size_t s = 0; s < nseq; ++s) {
            const double* dyr = dY.row(s * T + tt);
            for (std::size_t j = 0; j < dY.cols; ++j) dpr[j] += dyr[j];
          }
        }
      }
    };
  return id;
}

NodeId Tape::prepend_rows(NodeId x, NodeId head_row, std::size_t seq_len) {
  const Matrix& X = val(x);
  const Matrix& H = val(head_row);
  check(H.rows == 1 && H.cols == X.cols, "prepend: head row shape");
  check(seq_len >= 1 && X.rows % seq_len == 0, "prepend: rows must divide into sequences");
  std::size_t nseq = X.rows / seq_len;
  Matrix y(nseq * (seq_len + 1), X.cols);
#pragma omp parallel for
  for (std::size_t s = 0; s < nseq; ++s) {
    std::memcpy(y.row(s * (seq_len + 1)), H.row(0), X.cols * sizeof(double));
    for (std::size_t tt = 0; tt < seq_len; ++tt)
      std::memcpy(y.row(s * (seq_len + 1) + 1 + tt), X.row(s * seq_len + tt),
                  X.cols * sizeof(double));
  }
  bool req = requires(x) || requires(head_row);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, head_row, seq_len, nseq, id](Tape& t) {
      const Matrix& dY = t.grad(id);
      if (t.requires(head_row)) {
        double* dh = t.grad(head_row).row(0);
        for (std::size_t s = 0; s < nseq; ++s) {
          const double* dyr = dY.row(s * (seq_len + 1));
          for (std::size_t j = 0; j < dY.cols; ++j) dh[j] += dyr[j];
        }
      }
      if (t.requires(x)) {
        Matrix& dX = t.grad(x);
#pragma omp parallel for
        for (std::size_t s = 0; s < nseq; ++s)
          for (std::size_t tt = 0; tt < seq_len; ++tt) {
            const double* dyr = dY.row(s * (seq_len + 1) + 1 + tt);
            double* dxr = dX.row(s * seq_len + tt);
            for (std::size_t j = 0; j < dY.cols; ++j) dxr[j] += dyr[j];
          }
      }
    };
  return id;
}

NodeId Tape::softmax_xent(NodeId scores, std::vector<int> targets) {
  const Matrix& S = val(scores);
  check(S.rows == targets.size(), "cross entropy: one target per row");
  Matrix probs(S.rows, S.cols);
  double loss = 0.0;
  for (std::size_t i = 0; i < S.rows; ++i) {
    const double* sr = S.row(i);
    double* pr = probs.row(i);
    double mx = sr[0];
    for (std::size_t j = 1; j < S.cols; ++j) mx = std::max(mx, sr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < S.cols; ++j) {
      pr[j] = std::exp(sr[j] - mx);
      z += pr[j];
    }
    for (std::size_t j = 0; j < S.cols; ++j) pr[j] /= z;
    int tgt = targets[i];
    check(tgt >= 0 && static_cast<std::size_t>(tgt) < S.cols, "cross entropy: target out of range");
    loss -= std::log(std::max(pr[tgt], 1e-300));
  }
  loss /= static_cast<double>(S.rows);
  Matrix y(1, 1);
  y(0, 0) = loss;
  bool req = requires(scores);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [scores, id, P = std::move(probs), tg = std::move(targets)](Tape& t) {
      double g = t.grad(id)(0, 0) / static_cast<double>(P.rows);
      Matrix& dS = t.grad(scores);
#pragma omp parallel for
      for (std::size_t i = 0; i < P.rows; ++i) {
        const double* pr = P.row(i);
        double* dr = dS.row(i);
        for (std::size_t j = 0; j < P.cols; ++j) dr[j] += g * pr[j];
        dr[static_cast<std::size_t>(tg[i])] -= g;
      }
    };
  return id;
}

NodeId Tape::mse(NodeId pred, Matrix target) {
  const Matrix& P = val(pred);
  check(P.same_shape(target), "mse: shape mismatch");
  double acc = 0.0;
  const double* pp = P.data.data();
  const double* tp = target.data.data();
  for (std::size_t i = 0; i < P.size(); ++i) {
    double d = pp[i] - tp[i];
    acc += d * d;
  }
  Matrix y(1, 1);
  y(0, 0) = acc / static_cast<double>(P.size());
  bool req = requires(pred);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [pred, id, tgt = std::move(target)](Tape& t) {
      const Matrix& P2 = t.val(pred);
      double g = 2.0 * t.grad(id)(0, 0) / static_cast<double>(P2.size());
      double* dp = t.grad(pred).data.data();
      const double* pv = P2.data.data();
      const double* tv = tgt.data.data();
#pragma omp parallel for
      for (std::size_t i = 0; i < P2.size(); ++i) dp[i] += g * (pv[i] - tv[i]);
    };
  return id;
}

NodeId Tape::l1(NodeId x) {
  const Matrix& X = val(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) acc += std::abs(X.data[i]);
  Matrix y(1, 1);
  y(0, 0) = acc;
  bool req = requires(x);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [x, id](Tape& t) {
      double g = t.grad(id)(0, 0);
      const double* xv = t.val(x).data.data();
      double* dx = t.grad(x).data.data();
      std::size_t n = t.val(x).size();
      for (std::size_t i = 0; i < n; ++i)
        dx[i] += g * (xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0));
    };
  return id;
}

NodeId Tape::scalar_combine(NodeId a, NodeId b, double ca, double cb) {
  check(val(a).size() == 1 && val(b).size() == 1, "scalar_combine: scalars only");
  Matrix y(1, 1);
  y(0, 0) = ca * val(a)(0, 0) + cb * val(b)(0, 0);
  bool req = requires(a) || requires(b);
  NodeId id = push(std::move(y), req, nullptr);
  if (req)
    nodes_.back().back = [a, b, ca, cb, id](Tape& t) {
      double g = t.grad(id)(0, 0);
      if (t.requires(a)) t.grad(a)(0, 0) += ca * g;
      if (t.requires(b)) t.grad(b)(0, 0) += cb * g;
    };
  return id;
}

NodeId Tape::custom(Matrix value, const std::vector<NodeId>& parents,
                    std::function<void(Tape&)> back) {
  bool req = false;
  for (NodeId p : parents) req = req || requires(p);
  return push(std::move(value), req, req ? std::move(back) : nullptr);
}

}  // namespace gridattn

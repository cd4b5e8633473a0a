#pragma once
#include <cstdint>
#include <functional>
#include <vector>

#include "matrix.hpp"

namespace gridattn {

using NodeId = std::int32_t;

// Reverse-mode autodiff over Matrix values. Nodes are appended in topological
// order; backward() walks the list in reverse. Gradients are allocated lazily,
// so nodes off the loss path cost nothing extra, and ops skip gradient work
// for inputs that do not require it (e.g. embedding batches).
//
// One tape serves one forward/backward pass; build a fresh tape per batch.
class Tape {
 public:
  // Leaves. input/input_ref carry no gradient; param accumulates its gradient
  // into *grad_sink during backward(). External pointers must outlive the tape.
  NodeId input(Matrix v);
  NodeId input_ref(const Matrix* v);
  NodeId param(const Matrix* value, Matrix* grad_sink);

  // y = x·Wᵀ + b with W of shape (out, in) and b of shape (1, out).
  NodeId linear(NodeId x, NodeId w, NodeId b);
  NodeId matmul(NodeId a, NodeId b);     // A·B
  NodeId matmul_nt(NodeId a, NodeId b);  // A·Bᵀ
  NodeId add(NodeId a, NodeId b);        // same shape
  NodeId add_scaled(NodeId a, NodeId b, double alpha);  // a + alpha·b
  NodeId mul(NodeId a, NodeId b);        // elementwise
  NodeId mul_const(NodeId x, Matrix mask);
  NodeId mul_rowvec(NodeId x, NodeId w);  // broadcast (1, D) across rows
  NodeId sigmoid(NodeId x);
  NodeId tanh_op(NodeId x);
  NodeId relu(NodeId x);
  NodeId slice_cols(NodeId x, std::size_t lo, std::size_t n);
  // Rows offset, offset+stride, ..., count of them.
  NodeId gather_rows_strided(NodeId x, std::size_t offset, std::size_t stride, std::size_t count);
  NodeId reshape(NodeId x, std::size_t rows, std::size_t cols);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps);
  // Normalization across each group of `group` consecutive rows, per feature
  // (the temporal-context normalizer).
  NodeId group_norm_rows(NodeId x, NodeId gain, NodeId bias, std::size_t group, double eps);
  // Multi-head self-attention over sequences of `seq_len` consecutive rows.
  NodeId self_attention(NodeId q, NodeId k, NodeId v, std::size_t heads, std::size_t seq_len);
  // Adds p (seq_len, D) to every sequence: row s*seq_len + t gets p[t].
  NodeId add_timewise(NodeId x, NodeId p);
  // Prepends the (1, D) row to every sequence of seq_len rows.
  NodeId prepend_rows(NodeId x, NodeId head_row, std::size_t seq_len);
  // Scalar mean of -log softmax(scores)[target] over rows.
  NodeId softmax_xent(NodeId scores, std::vector<int> targets);
  NodeId mse(NodeId pred, Matrix target);  // scalar mean over elements
  NodeId l1(NodeId x);                     // scalar sum of |x|
  NodeId scalar_combine(NodeId a, NodeId b, double ca, double cb);  // scalars
  // Escape hatch for bespoke ops: value plus a backward closure.
  NodeId custom(Matrix value, const std::vector<NodeId>& parents,
                std::function<void(Tape&)> back);

  const Matrix& val(NodeId id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.vp ? *n.vp : n.owned;  // vp is set only for external matrices
  }
  bool requires(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].req; }
  Matrix& grad(NodeId id);  // allocates zeros of the value's shape on demand
  bool has_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].grad_alloc; }
  void backward(NodeId loss);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* vp = nullptr;
    Matrix gradm;
    Matrix* ext_grad = nullptr;
    bool req = false;
    bool grad_alloc = false;
    std::function<void(Tape&)> back;
  };
  NodeId push(Matrix value, bool req, std::function<void(Tape&)> back);
  std::vector<Node> nodes_;
};

}  // namespace gridattn

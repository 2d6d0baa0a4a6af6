#pragma once

#include <cstdint>
#include <vector>

#include "ckgc/matrix.hpp"

namespace ckgc {

// Reverse-mode autodiff over dense matrices.
//
// A Tape is a single-use computation record: ops evaluate eagerly on
// construction, and backward(root) accumulates adjoints into the grad
// matrices registered with leaf(). Creation order is the topological order,
// and every op walks its elements in a fixed sequence, so gradients are
// deterministic.
class Tape {
 public:
  using Id = uint32_t;

  // Parameter leaf. `value` must stay alive and unmodified for the tape's
  // lifetime; backward() accumulates into `grad` (same shape).
  Id leaf(const Matrix* value, Matrix* grad);

  // Non-differentiable input (copied).
  Id constant(Matrix value);

  // out.row(i) = x.row(idx[i])
  Id gather_rows(Id x, std::vector<uint32_t> idx);
  // out has `out_rows` rows; out.row(dst[i]) += x.row(i)
  Id scatter_sum(Id x, std::vector<uint32_t> dst, size_t out_rows);
  // out = x * w^T  (each row of x transformed by w; w is square or d_out x d_in)
  Id linear(Id x, Id w);

  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);  // elementwise

  // Broadcast a 1 x c row vector across all rows of x.
  Id add_brow(Id x, Id row);
  Id sub_brow(Id x, Id row);
  Id mul_brow(Id x, Id row);

  // out.row(i) = factors[i] * x.row(i); factors are constants.
  Id scale_rows(Id x, std::vector<double> factors);

  Id row_sum(Id x);  // (r x c) -> (r x 1)
  Id tanh(Id x);
  Id abs(Id x);
  Id sqrt(Id x);  // elementwise; derivative taken as 0 at x == 0
  Id log(Id x);
  Id clamp_min(Id x, double lo);
  Id softmax_rows(Id x);
  Id scale(Id x, double c);
  Id add_scalar(Id x, double c);
  Id reshape(Id x, size_t r, size_t c);  // element count preserved, row-major order
  Id sum_all(Id x);                      // -> 1 x 1
  Id mean_all(Id x);                     // -> 1 x 1

  const Matrix& value(Id id) const;
  double scalar_value(Id id) const { return value(id).data[0]; }

  // Backpropagate from a 1x1 root, accumulating into leaf grads.
  void backward(Id root);

  size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : uint8_t {
    kLeaf,
    kConstant,
    kGather,
    kScatterSum,
    kLinear,
    kAdd,
    kSub,
    kMul,
    kAddBrow,
    kSubBrow,
    kMulBrow,
    kScaleRows,
    kRowSum,
    kTanh,
    kAbs,
    kSqrt,
    kLog,
    kClampMin,
    kSoftmaxRows,
    kScale,
    kAddScalar,
    kReshape,
    kSumAll,
    kMeanAll,
  };

  struct Node {
    Op op;
    Id in0 = 0;
    Id in1 = 0;
    Matrix val;                  // unused for kLeaf (external)
    Matrix adj;                  // allocated during backward
    const Matrix* ext_val = nullptr;  // kLeaf
    Matrix* ext_grad = nullptr;       // kLeaf
    std::vector<uint32_t> idx;   // kGather / kScatterSum
    std::vector<double> factors; // kScaleRows
    double c = 0.0;              // kClampMin / kScale / kAddScalar
  };

  Id push(Node n);
  const Matrix& val_of(const Node& n) const { return n.op == Op::kLeaf ? *n.ext_val : n.val; }

  std::vector<Node> nodes_;
};

}  // namespace ckgc

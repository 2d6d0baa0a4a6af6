#include "ckgc/tape.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>

#include "ckgc/kernels.hpp"

namespace ckgc {

namespace {
const kernels::KernelTable& K() { return kernels::active(); }
}  // namespace

Tape::Id Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::leaf(const Matrix* value, Matrix* grad) {
  assert(value != nullptr && grad != nullptr);
  assert(value->same_shape(*grad));
  Node n;
  n.op = Op::kLeaf;
  n.ext_val = value;
  n.ext_grad = grad;
  return push(std::move(n));
}

Tape::Id Tape::constant(Matrix value) {
  Node n;
  n.op = Op::kConstant;
  n.val = std::move(value);
  return push(std::move(n));
}

Tape::Id Tape::gather_rows(Id x, std::vector<uint32_t> idx) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kGather;
  n.in0 = x;
  n.idx = std::move(idx);
  n.val = Matrix(n.idx.size(), xv.cols);
  for (size_t i = 0; i < n.idx.size(); ++i) {
    assert(n.idx[i] < xv.rows);
    std::copy(xv.row(n.idx[i]), xv.row(n.idx[i]) + xv.cols, n.val.row(i));
  }
  return push(std::move(n));
}

Tape::Id Tape::scatter_sum(Id x, std::vector<uint32_t> dst, size_t out_rows) {
  const Matrix& xv = value(x);
  assert(dst.size() == xv.rows);
  Node n;
  n.op = Op::kScatterSum;
  n.in0 = x;
  n.idx = std::move(dst);
  n.val = Matrix(out_rows, xv.cols);
  for (size_t i = 0; i < n.idx.size(); ++i) {
    assert(n.idx[i] < out_rows);
    K().axpy(1.0, xv.row(i), n.val.row(n.idx[i]), xv.cols);
  }
  return push(std::move(n));
}

Tape::Id Tape::linear(Id x, Id w) {
  const Matrix& xv = value(x);
  const Matrix& wv = value(w);
  assert(xv.cols == wv.cols);
  Node n;
  n.op = Op::kLinear;
  n.in0 = x;
  n.in1 = w;
  n.val = Matrix(xv.rows, wv.rows);
  for (size_t i = 0; i < xv.rows; ++i) {
    double* out = n.val.row(i);
    for (size_t j = 0; j < wv.rows; ++j) out[j] = K().dot(xv.row(i), wv.row(j), xv.cols);
  }
  return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  assert(av.same_shape(bv));
  Node n;
  n.op = Op::kAdd;
  n.in0 = a;
  n.in1 = b;
  n.val = Matrix(av.rows, av.cols);
  K().vadd(av.data.data(), bv.data.data(), n.val.data.data(), av.size());
  return push(std::move(n));
}

Tape::Id Tape::sub(Id a, Id b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  assert(av.same_shape(bv));
  Node n;
  n.op = Op::kSub;
  n.in0 = a;
  n.in1 = b;
  n.val = Matrix(av.rows, av.cols);
  K().vsub(av.data.data(), bv.data.data(), n.val.data.data(), av.size());
  return push(std::move(n));
}

Tape::Id Tape::mul(Id a, Id b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  assert(av.same_shape(bv));
  Node n;
  n.op = Op::kMul;
  n.in0 = a;
  n.in1 = b;
  n.val = Matrix(av.rows, av.cols);
  K().vmul(av.data.data(), bv.data.data(), n.val.data.data(), av.size());
  return push(std::move(n));
}

Tape::Id Tape::add_brow(Id x, Id row) {
  const Matrix& xv = value(x);
  const Matrix& rv = value(row);
  assert(rv.rows == 1 && rv.cols == xv.cols);
  Node n;
  n.op = Op::kAddBrow;
  n.in0 = x;
  n.in1 = row;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.rows; ++i)
    K().vadd(xv.row(i), rv.row(0), n.val.row(i), xv.cols);
  return push(std::move(n));
}

Tape::Id Tape::sub_brow(Id x, Id row) {
  const Matrix& xv = value(x);
  const Matrix& rv = value(row);
  assert(rv.rows == 1 && rv.cols == xv.cols);
  Node n;
  n.op = Op::kSubBrow;
  n.in0 = x;
  n.in1 = row;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.rows; ++i)
    K().vsub(xv.row(i), rv.row(0), n.val.row(i), xv.cols);
  return push(std::move(n));
}

Tape::Id Tape::mul_brow(Id x, Id row) {
  const Matrix& xv = value(x);
  const Matrix& rv = value(row);
  assert(rv.rows == 1 && rv.cols == xv.cols);
  Node n;
  n.op = Op::kMulBrow;
  n.in0 = x;
  n.in1 = row;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.rows; ++i)
    K().vmul(xv.row(i), rv.row(0), n.val.row(i), xv.cols);
  return push(std::move(n));
}

Tape::Id Tape::scale_rows(Id x, std::vector<double> factors) {
  const Matrix& xv = value(x);
  assert(factors.size() == xv.rows);
  Node n;
  n.op = Op::kScaleRows;
  n.in0 = x;
  n.factors = std::move(factors);
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.rows; ++i) {
    const double f = n.factors[i];
    const double* src = xv.row(i);
    double* out = n.val.row(i);
    for (size_t j = 0; j < xv.cols; ++j) out[j] = f * src[j];
  }
  return push(std::move(n));
}

Tape::Id Tape::row_sum(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kRowSum;
  n.in0 = x;
  n.val = Matrix(xv.rows, 1);
  for (size_t i = 0; i < xv.rows; ++i) n.val.at(i, 0) = K().vsum(xv.row(i), xv.cols);
  return push(std::move(n));
}

Tape::Id Tape::tanh(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kTanh;
  n.in0 = x;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.size(); ++i) n.val.data[i] = std::tanh(xv.data[i]);
  return push(std::move(n));
}

Tape::Id Tape::abs(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kAbs;
  n.in0 = x;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.size(); ++i) n.val.data[i] = std::fabs(xv.data[i]);
  return push(std::move(n));
}

Tape::Id Tape::sqrt(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kSqrt;
  n.in0 = x;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.size(); ++i) n.val.data[i] = std::sqrt(xv.data[i]);
  return push(std::move(n));
}

Tape::Id Tape::log(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kLog;
  n.in0 = x;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.size(); ++i) n.val.data[i] = std::log(xv.data[i]);
  return push(std::move(n));
}

Tape::Id Tape::clamp_min(Id x, double lo) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kClampMin;
  n.in0 = x;
  n.c = lo;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.size(); ++i) n.val.data[i] = xv.data[i] > lo ? xv.data[i] : lo;
  return push(std::move(n));
}

Tape::Id Tape::softmax_rows(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kSoftmaxRows;
  n.in0 = x;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.rows; ++i) {
    const double* src = xv.row(i);
    double* out = n.val.row(i);
    double mx = src[0];
    for (size_t j = 1; j < xv.cols; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (size_t j = 0; j < xv.cols; ++j) {
      out[j] = std::exp(src[j] - mx);
      z += out[j];
    }
    const double inv = 1.0 / z;
    for (size_t j = 0; j < xv.cols; ++j) out[j] *= inv;
  }
  return push(std::move(n));
}

Tape::Id Tape::scale(Id x, double c) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kScale;
  n.in0 = x;
  n.c = c;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.size(); ++i) n.val.data[i] = c * xv.data[i];
  return push(std::move(n));
}

Tape::Id Tape::add_scalar(Id x, double c) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kAddScalar;
  n.in0 = x;
  n.c = c;
  n.val = Matrix(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.size(); ++i) n.val.data[i] = xv.data[i] + c;
  return push(std::move(n));
}

Tape::Id Tape::reshape(Id x, size_t r, size_t c) {
  const Matrix& xv = value(x);
  if (r * c != xv.size()) throw std::invalid_argument("reshape: element count mismatch");
  Node n;
  n.op = Op::kReshape;
  n.in0 = x;
  n.val = Matrix(r, c);
  n.val.data = xv.data;
  return push(std::move(n));
}

Tape::Id Tape::sum_all(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kSumAll;
  n.in0 = x;
  n.val = Matrix(1, 1);
  n.val.data[0] = K().vsum(xv.data.data(), xv.size());
  return push(std::move(n));
}

Tape::Id Tape::mean_all(Id x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kMeanAll;
  n.in0 = x;
  n.val = Matrix(1, 1);
  n.val.data[0] = K().vsum(xv.data.data(), xv.size()) / static_cast<double>(xv.size());
  return push(std::move(n));
}

const Matrix& Tape::value(Id id) const {
  assert(id < nodes_.size());
  return val_of(nodes_[id]);
}

void Tape::backward(Id root) {
  assert(root < nodes_.size());
  assert(value(root).rows == 1 && value(root).cols == 1);

  for (Node& n : nodes_) n.adj = Matrix();
  Node& r = nodes_[root];
  r.adj = Matrix(1, 1);
  r.adj.data[0] = 1.0;

  auto ensure_adj = [&](Id id) -> Matrix& {
    Node& n = nodes_[id];
    if (n.adj.empty()) {
      const Matrix& v = val_of(n);
      n.adj = Matrix(v.rows, v.cols);
    }
    return n.adj;
  };

  for (size_t k = nodes_.size(); k-- > 0;) {
    Node& n = nodes_[static_cast<Id>(k)];
    if (n.adj.empty()) continue;  // not on the path to root
    const Matrix& g = n.adj;
    switch (n.op) {
      case Op::kLeaf:
        // Accumulate into the externally owned grad buffer.
        K().axpy(1.0, g.data.data(), n.ext_grad->data.data(), g.size());
        break;
      case Op::kConstant:
        break;
      case Op::kGather: {
        Matrix& gx = ensure_adj(n.in0);
        const size_t c = gx.cols;
        for (size_t i = 0; i < n.idx.size(); ++i)
          K().axpy(1.0, g.row(i), gx.row(n.idx[i]), c);
        break;
      }
      case Op::kScatterSum: {
        Matrix& gx = ensure_adj(n.in0);
        const size_t c = gx.cols;
        for (size_t i = 0; i < n.idx.size(); ++i)
          K().axpy(1.0, g.row(n.idx[i]), gx.row(i), c);
        break;
      }
      case Op::kLinear: {
        const Matrix& xv = value(n.in0);
        const Matrix& wv = value(n.in1);
        Matrix& gx = ensure_adj(n.in0);
        Matrix& gw = ensure_adj(n.in1);
        // y = x w^T: dx += g w; dw += g^T x
        for (size_t i = 0; i < xv.rows; ++i) {
          const double* grow = g.row(i);
          for (size_t j = 0; j < wv.rows; ++j) {
            if (grow[j] != 0.0) {
              K().axpy(grow[j], wv.row(j), gx.row(i), wv.cols);
              K().axpy(grow[j], xv.row(i), gw.row(j), wv.cols);
            }
          }
        }
        break;
      }
      case Op::kAdd: {
        Matrix& ga = ensure_adj(n.in0);
        Matrix& gb = ensure_adj(n.in1);
        K().axpy(1.0, g.data.data(), ga.data.data(), g.size());
        K().axpy(1.0, g.data.data(), gb.data.data(), g.size());
        break;
      }
      case Op::kSub: {
        Matrix& ga = ensure_adj(n.in0);
        Matrix& gb = ensure_adj(n.in1);
        K().axpy(1.0, g.data.data(), ga.data.data(), g.size());
        K().axpy(-1.0, g.data.data(), gb.data.data(), g.size());
        break;
      }
      case Op::kMul: {
        const Matrix& av = value(n.in0);
        const Matrix& bv = value(n.in1);
        Matrix& ga = ensure_adj(n.in0);
        Matrix& gb = ensure_adj(n.in1);
        for (size_t i = 0; i < g.size(); ++i) {
          ga.data[i] += g.data[i] * bv.data[i];
          gb.data[i] += g.data[i] * av.data[i];
        }
        break;
      }
      case Op::kAddBrow:
      case Op::kSubBrow: {
        Matrix& gx = ensure_adj(n.in0);
        Matrix& gr = ensure_adj(n.in1);
        K().axpy(1.0, g.data.data(), gx.data.data(), g.size());
        const double s = n.op == Op::kAddBrow ? 1.0 : -1.0;
        for (size_t i = 0; i < g.rows; ++i) K().axpy(s, g.row(i), gr.row(0), g.cols);
        break;
      }
      case Op::kMulBrow: {
        const Matrix& xv = value(n.in0);
        const Matrix& rv = value(n.in1);
        Matrix& gx = ensure_adj(n.in0);
        Matrix& gr = ensure_adj(n.in1);
        for (size_t i = 0; i < g.rows; ++i) {
          const double* grow = g.row(i);
          const double* xrow = xv.row(i);
          double* gxr = gx.row(i);
          double* grr = gr.row(0);
          for (size_t j = 0; j < g.cols; ++j) {
            gxr[j] += grow[j] * rv.data[j];
            grr[j] += grow[j] * xrow[j];
          }
        }
        break;
      }
      case Op::kScaleRows: {
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < g.rows; ++i)
          K().axpy(n.factors[i], g.row(i), gx.row(i), g.cols);
        break;
      }
      case Op::kRowSum: {
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < gx.rows; ++i) {
          const double gi = g.at(i, 0);
          double* row = gx.row(i);
          for (size_t j = 0; j < gx.cols; ++j) row[j] += gi;
        }
        break;
      }
      case Op::kTanh: {
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < g.size(); ++i) {
          const double y = n.val.data[i];
          gx.data[i] += g.data[i] * (1.0 - y * y);
        }
        break;
      }
      case Op::kAbs: {
        const Matrix& xv = value(n.in0);
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < g.size(); ++i) {
          const double x = xv.data[i];
          // subgradient 0 at x == 0
          gx.data[i] += g.data[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
        break;
      }
      case Op::kSqrt: {
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < g.size(); ++i) {
          const double y = n.val.data[i];
          if (y > 0.0) gx.data[i] += g.data[i] * 0.5 / y;
        }
        break;
      }
      case Op::kLog: {
        const Matrix& xv = value(n.in0);
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] / xv.data[i];
        break;
      }
      case Op::kClampMin: {
        const Matrix& xv = value(n.in0);
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < g.size(); ++i)
          if (xv.data[i] > n.c) gx.data[i] += g.data[i];
        break;
      }
      case Op::kSoftmaxRows: {
        Matrix& gx = ensure_adj(n.in0);
        for (size_t i = 0; i < g.rows; ++i) {
          const double* y = n.val.row(i);
          const double* grow = g.row(i);
          const double dotgy = K().dot(grow, y, g.cols);
          double* gxr = gx.row(i);
          for (size_t j = 0; j < g.cols; ++j) gxr[j] += y[j] * (grow[j] - dotgy);
        }
        break;
      }
      case Op::kScale: {
        Matrix& gx = ensure_adj(n.in0);
        K().axpy(n.c, g.data.data(), gx.data.data(), g.size());
        break;
      }
      case Op::kAddScalar: {
        Matrix& gx = ensure_adj(n.in0);
        K().axpy(1.0, g.data.data(), gx.data.data(), g.size());
        break;
      }
      case Op::kReshape: {
        Matrix& gx = ensure_adj(n.in0);
        K().axpy(1.0, g.data.data(), gx.data.data(), g.size());
        break;
      }
      case Op::kSumAll: {
        Matrix& gx = ensure_adj(n.in0);
        const double gv = g.data[0];
        for (size_t i = 0; i < gx.size(); ++i) gx.data[i] += gv;
        break;
      }
      case Op::kMeanAll: {
        Matrix& gx = ensure_adj(n.in0);
        const double gv = g.data[0] / static_cast<double>(gx.size());
        for (size_t i = 0; i < gx.size(); ++i) gx.data[i] += gv;
        break;
      }
    }
    // Free the adjoint as soon as it has been propagated.
    if (static_cast<Id>(k) != root) n.adj = Matrix();
  }
}

}  // namespace ckgc

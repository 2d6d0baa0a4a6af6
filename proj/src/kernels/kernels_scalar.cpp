#include <cmath>
#include <cstddef>

#include "ckgc/kernels.hpp"

// Reference kernels. Plain sequential loops; the AVX2 variants are checked
// against these in tests/test_kernels.cpp.

namespace ckgc::kernels {
namespace {

double dot_scalar(const double* a, const double* b, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double l1_dist_scalar(const double* a, const double* b, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += std::fabs(a[i] - b[i]);
  return s;
}

double l2_dist_sq_scalar(const double* a, const double* b, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double dot3_scalar(const double* a, const double* b, const double* c, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += a[i] * b[i] * c[i];
  return s;
}

void vadd_scalar(const double* a, const double* b, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void vsub_scalar(const double* a, const double* b, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void vmul_scalar(const double* a, const double* b, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void vscale_scalar(double alpha, double* x, size_t n) {
  for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}

double vsum_scalar(const double* x, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

void adam_step_scalar(double* p, const double* g, double* m, double* v, size_t n,
                      double lr, double beta1, double beta2, double eps, double bc1,
                      double bc2) {
  for (size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table = {
      dot_scalar,    axpy_scalar, l1_dist_scalar, l2_dist_sq_scalar,
      dot3_scalar,   vadd_scalar, vsub_scalar,    vmul_scalar,
      vscale_scalar, vsum_scalar, adam_step_scalar,
  };
  return table;
}

}  // namespace ckgc::kernels

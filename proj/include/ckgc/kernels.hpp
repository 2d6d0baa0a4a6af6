#pragma once

#include <cstddef>
#include <string>

namespace ckgc::kernels {

// Data-parallel inner loops used by the tape, the scorers and the optimizer.
// Each kernel has a scalar reference implementation and an AVX2+FMA variant;
// the active table is selected once at startup from CPUID, overridable with
// the CKGC_KERNELS environment variable ("scalar" or "avx2").
//
// Per-element accumulation order is fixed within a variant, so results are
// bit-reproducible for a given binary on a given machine. Scalar and AVX2
// variants may differ in the last bits (different summation order, FMA).
struct KernelTable {
  // sum_i a[i]*b[i]
  double (*dot)(const double* a, const double* b, size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, size_t n);
  // sum_i |a[i] - b[i]|
  double (*l1_dist)(const double* a, const double* b, size_t n);
  // sum_i (a[i] - b[i])^2
  double (*l2_dist_sq)(const double* a, const double* b, size_t n);
  // sum_i a[i]*b[i]*c[i]
  double (*dot3)(const double* a, const double* b, const double* c, size_t n);
  // out[i] = a[i] + b[i] / a[i] - b[i] / a[i] * b[i]
  void (*vadd)(const double* a, const double* b, double* out, size_t n);
  void (*vsub)(const double* a, const double* b, double* out, size_t n);
  void (*vmul)(const double* a, const double* b, double* out, size_t n);
  // x[i] *= alpha
  void (*vscale)(double alpha, double* x, size_t n);
  // sum_i x[i]
  double (*vsum)(const double* x, size_t n);
  // Adam update with precomputed bias corrections bc1 = 1-beta1^t,
  // bc2 = 1-beta2^t. Updates p, m, v in place.
  void (*adam_step)(double* p, const double* g, double* m, double* v, size_t n,
                    double lr, double beta1, double beta2, double eps, double bc1,
                    double bc2);
};

// The dispatch-selected table.
const KernelTable& active();

// Name of the selected variant ("scalar" or "avx2").
const std::string& active_isa();

// Exposed for equivalence tests.
const KernelTable& scalar_table();
const KernelTable* avx2_table();  // nullptr when unsupported by the CPU
bool cpu_has_avx2_fma();

}  // namespace ckgc::kernels

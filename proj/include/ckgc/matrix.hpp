#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace ckgc {

// Dense row-major matrix of doubles. The single numeric container used by
// parameters, encoder outputs and tape intermediates.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(size_t i) {
    assert(i < rows);
    return data.data() + i * cols;
  }
  const double* row(size_t i) const {
    assert(i < rows);
    return data.data() + i * cols;
  }
  double& at(size_t i, size_t j) { return data[i * cols + j]; }
  double at(size_t i, size_t j) const { return data[i * cols + j]; }

  size_t size() const { return rows * cols; }
  bool empty() const { return data.empty(); }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

}  // namespace ckgc

#pragma once

#include <cstddef>
#include <vector>

#include "skd/common.hpp"

namespace skd::linalg {

// Raw row-major kernels shared by the matrix type below and the model code
// (which also instantiates them for float). Fixed loop order keeps summation
// deterministic.

// C (m x n) = A (m x k) * B (k x n)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    for (std::size_t p = 0; p < k; ++p) {
      const T aval = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

// C (m x n) = A (m x k) * B^T, B stored (n x k)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = acc;
    }
  }
}

// C (m x n) = A^T * B, A stored (k x m), B stored (k x n)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T aval = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

// Dense real matrix, row-major, 64-bit.
class Matrix {
public:
  Matrix() = default;
  Matrix(index_t rows, index_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix(index_t rows, index_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(rows_ * cols_ == data_.size(), "Matrix: rows*cols must match data length");
  }

  static Matrix identity(index_t n) {
    Matrix m(n, n);
    for (index_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  index_t rows() const { return rows_; }
  index_t cols() const { return cols_; }
  double& operator()(index_t r, index_t c) { return data_[r * cols_ + c]; }
  double operator()(index_t r, index_t c) const { return data_[r * cols_ + c]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& values() const { return data_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (index_t i = 0; i < rows_; ++i)
      for (index_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool all_finite() const;

private:
  index_t rows_ = 0;
  index_t cols_ = 0;
  std::vector<double> data_;
};

struct EigenDecomposition {
  std::vector<double> eigenvalues;  // descending
  Matrix eigenvectors;              // row i = unit eigenvector of eigenvalues[i]
};

Matrix matmul(const Matrix& a, const Matrix& b);

// Cyclic Jacobi on the symmetrized input. Rows of the result are eigenvectors,
// eigenvalues descending. Sign convention: the largest-magnitude entry of each
// eigenvector is positive (earliest such entry on magnitude ties); equal
// eigenvalues are ordered by lexicographically larger eigenvector.
EigenDecomposition sym_eig(const Matrix& a);

// max |W W^T - I|
double orthogonality_error(const Matrix& w);

// ranking[i] = input dimension placed at output position i.
// Result P has P[i, ranking[i]] = 1.
Matrix permutation_from_ranking(const std::vector<index_t>& ranking);

}  // namespace skd::linalg

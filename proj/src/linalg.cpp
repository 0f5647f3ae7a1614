#include "skd/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace skd::linalg {

bool Matrix::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + ")");
  Matrix c(a.rows(), b.cols());
  gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

namespace {

double off_diagonal_frobenius(const Matrix& a) {
  const index_t n = a.rows();
  double s = 0.0;
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j < n; ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

double frobenius(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

EigenDecomposition sym_eig(const Matrix& input) {
  require(input.rows() == input.cols(), "sym_eig: matrix must be square");
  const index_t n = input.rows();
  require(input.all_finite(), "sym_eig: input has non-finite entries");

  Matrix a(n, n);
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));

  // v accumulates the rotations; its ROWS end up as eigenvectors.
  Matrix v = Matrix::identity(n);
  const double scale = frobenius(a);
  const double tol = 1e-12 * (scale > 0.0 ? scale : 1.0);
  const int max_sweeps = 100;

  bool converged = (n < 2) || off_diagonal_frobenius(a) <= tol;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    for (index_t p = 0; p + 1 < n; ++p) {
      for (index_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = 0.5 * (aqq - app) / apq;
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;

        // A <- J^T A J with J the (p,q) rotation
        for (index_t i = 0; i < n; ++i) {
          const double aip = a(i, p);
          const double aiq = a(i, q);
          a(i, p) = c * aip - s * aiq;
          a(i, q) = s * aip + c * aiq;
        }
        for (index_t i = 0; i < n; ++i) {
          const double api = a(p, i);
          const double aqi = a(q, i);
          a(p, i) = c * api - s * aqi;
          a(q, i) = s * api + c * aqi;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        // rows of v transform like columns of the similarity
        for (index_t i = 0; i < n; ++i) {
          const double vpi = v(p, i);
          const double vqi = v(q, i);
          v(p, i) = c * vpi - s * vqi;
          v(q, i) = s * vpi + c * vqi;
        }
      }
    }
    converged = off_diagonal_frobenius(a) <= tol;
  }
  if (!converged) {
    throw NumericalError("sym_eig: no convergence after 100 sweeps, off-diagonal residual " +
                         std::to_string(off_diagonal_frobenius(a)));
  }

  // Sign convention before ordering so lexicographic ties compare fixed vectors.
  for (index_t i = 0; i < n; ++i) {
    index_t arg = 0;
    double best = std::abs(v(i, 0));
    for (index_t j = 1; j < n; ++j) {
      const double m = std::abs(v(i, j));
      if (m > best) {
        best = m;
        arg = j;
      }
    }
    if (v(i, arg) < 0.0)
      for (index_t j = 0; j < n; ++j) v(i, j) = -v(i, j);
  }

  std::vector<index_t> order(n);
  std::iota(order.begin(), order.end(), index_t{0});
  std::sort(order.begin(), order.end(), [&](index_t x, index_t y) {
    if (a(x, x) != a(y, y)) return a(x, x) > a(y, y);
    for (index_t j = 0; j < n; ++j)
      if (v(x, j) != v(y, j)) return v(x, j) > v(y, j);
    return false;
  });

  EigenDecomposition dec;
  dec.eigenvalues.resize(n);
  dec.eigenvectors = Matrix(n, n);
  for (index_t i = 0; i < n; ++i) {
    dec.eigenvalues[i] = a(order[i], order[i]);
    for (index_t j = 0; j < n; ++j) dec.eigenvectors(i, j) = v(order[i], j);
  }
  return dec;
}

double orthogonality_error(const Matrix& w) {
  require(w.rows() == w.cols(), "orthogonality_error: matrix must be square");
  const index_t n = w.rows();
  Matrix g(n, n);
  gemm_nt(w.data(), w.data(), g.data(), n, n, n);
  double worst = 0.0;
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j < n; ++j) {
      const double target = (i == j) ? 1.0 : 0.0;
      worst = std::max(worst, std::abs(g(i, j) - target));
    }
  return worst;
}

Matrix permutation_from_ranking(const std::vector<index_t>& ranking) {
  const index_t n = ranking.size();
  std::vector<bool> seen(n, false);
  for (index_t i = 0; i < n; ++i) {
    require(ranking[i] < n, "permutation_from_ranking: index out of range");
    require(!seen[ranking[i]], "permutation_from_ranking: duplicate index");
    seen[ranking[i]] = true;
  }
  Matrix p(n, n);
  for (index_t i = 0; i < n; ++i) p(i, ranking[i]) = 1.0;
  return p;
}

}  // namespace skd::linalg

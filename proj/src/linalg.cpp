#include "eshift/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "eshift/error.hpp"
#include "eshift/kernels.hpp"

namespace eshift {
namespace {

constexpr std::size_t kMaxSweeps = 60;
constexpr double kCoherenceTol = 1e-14;
constexpr double kNegligibleColumn = 1e-14;  // relative to ||m||_F

kernels::SweepStats sweep(Backend b, Matrix& panel, Matrix& vrows, double tol, double floor) {
  return b == Backend::omp ? kernels::omp::jacobi_sweep(panel, vrows, tol, floor)
                           : kernels::serial::jacobi_sweep(panel, vrows, tol, floor);
}

// Fills the rows of `cols` flagged in `missing` with unit vectors orthogonal
// to every other row, trying standard basis vectors in index order.
void complete_basis(Matrix& cols, const std::vector<bool>& missing) {
  const std::size_t m = cols.cols();
  std::vector<std::size_t> accepted;
  for (std::size_t i = 0; i < cols.rows(); ++i)
    if (!missing[i]) accepted.push_back(i);

  std::size_t candidate = 0;
  std::vector<double> r(m);
  for (std::size_t i = 0; i < cols.rows(); ++i) {
    if (!missing[i]) continue;
    for (; candidate < m; ++candidate) {
      std::fill(r.begin(), r.end(), 0.0);
      r[candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t a : accepted) {
          const auto q = cols.row(a);
          const double p = kernels::dot(q, r);
          for (std::size_t k = 0; k < m; ++k) r[k] -= p * q[k];
        }
      }
      const double norm = std::sqrt(kernels::dot(r, r));
      if (norm > 0.5) {
        auto out = cols.row(i);
        for (std::size_t k = 0; k < m; ++k) out[k] = r[k] / norm;
        accepted.push_back(i);
        ++candidate;
        break;
      }
    }
  }
}

}  // namespace

Matrix SvdFactors::a() const {
  Matrix out = vt;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& v : out.row(i)) v *= sigma[i];
  return out;
}

SvdFactors svd(const Matrix& m, Backend backend) {
  const std::size_t rows = m.rows();
  const std::size_t n = m.cols();
  if (n == 0 || rows < n)
    throw std::invalid_argument("svd: need rows >= cols >= 1, got " + std::to_string(rows) + "x" +
                                std::to_string(n));
  if (!m.all_finite()) throw DataError("svd: input contains non-finite values");

  const double fro = frobenius_norm(m);
  const double floor = kNegligibleColumn * fro;

  Matrix panel = m.transposed();  // row k = column k of m
  Matrix reflectors;
  Matrix r = backend == Backend::omp ? kernels::omp::householder_qr(panel, reflectors)
                                     : kernels::serial::householder_qr(panel, reflectors);

  Matrix vrows = Matrix::identity(n);
  std::size_t sweeps = 0;
  kernels::SweepStats stats;
  bool converged = n == 1 || fro == 0.0;
  while (!converged && sweeps < kMaxSweeps) {
    stats = sweep(backend, r, vrows, kCoherenceTol, floor);
    ++sweeps;
    converged = stats.rotations == 0;
  }
  if (!converged)
    throw ConvergenceError("svd: no convergence after " + std::to_string(kMaxSweeps) + " sweeps",
                           stats.max_coherence);

  // Columns of m*V: pad R*V to full length and apply Q.
  Matrix cols(n, rows);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(r.row(i).begin(), n, cols.row(i).begin());
  if (backend == Backend::omp)
    kernels::omp::apply_q(reflectors, cols);
  else
    kernels::serial::apply_q(reflectors, cols);

  std::vector<double> sigma(n);
  std::vector<bool> missing(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    auto c = cols.row(i);
    const double s = std::sqrt(kernels::dot(c, c));
    if (s <= floor || s == 0.0) {
      sigma[i] = 0.0;
      missing[i] = true;
      continue;
    }
    sigma[i] = s;
    for (double& v : c) v /= s;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  Matrix ucols(n, rows);
  SvdFactors f;
  f.sigma.resize(n);
  f.vt = Matrix(n, n);
  std::vector<bool> sorted_missing(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    f.sigma[k] = sigma[src];
    sorted_missing[k] = missing[src];
    std::copy(cols.row(src).begin(), cols.row(src).end(), ucols.row(k).begin());
    std::copy(vrows.row(src).begin(), vrows.row(src).end(), f.vt.row(k).begin());
  }
  if (std::find(sorted_missing.begin(), sorted_missing.end(), true) != sorted_missing.end())
    complete_basis(ucols, sorted_missing);

  for (std::size_t k = 0; k < n; ++k) {
    auto uc = ucols.row(k);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < rows; ++i)
      if (std::abs(uc[i]) > std::abs(uc[arg])) arg = i;
    if (uc[arg] < 0.0) {
      for (double& v : uc) v = -v;
      for (double& v : f.vt.row(k)) v = -v;
    }
  }

  f.u = ucols.transposed();
  f.source = std::make_shared<const Matrix>(m);
  f.sweeps = sweeps;
  return f;
}

Matrix multiply_factors(const SvdFactors& f, Backend backend) {
  if (f.u.cols() != f.sigma.size() || f.vt.rows() != f.sigma.size())
    throw std::invalid_argument("multiply_factors: inconsistent factor shapes");
  Matrix us = f.u;
  for (std::size_t r = 0; r < us.rows(); ++r) {
    auto row = us.row(r);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] *= f.sigma[i];
  }
  return matmul(us, f.vt, backend);
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

double frobenius_loss(const Matrix& w, const Matrix& w_hat) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols())
    throw std::invalid_argument("frobenius_loss: shape mismatch");
  double s = 0.0;
  const auto a = w.data();
  const auto b = w_hat.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

Matrix matmul(const Matrix& a, const Matrix& b, Backend backend) {
  return backend == Backend::omp ? kernels::omp::matmul(a, b) : kernels::serial::matmul(a, b);
}

double column_orthonormality_deviation(const Matrix& q) {
  return row_orthonormality_deviation(q.transposed());
}

double row_orthonormality_deviation(const Matrix& q) {
  double worst = 0.0;
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = i; j < q.rows(); ++j) {
      const double g = kernels::dot(q.row(i), q.row(j));
      worst = std::max(worst, std::abs(g - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}

}  // namespace eshift

#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "eshift/matrix.hpp"

namespace eshift {

enum class Backend { serial, omp };

// Thin SVD of a tall matrix, M = U diag(sigma) Vt.
//
// Fresh factors from svd() have orthonormal columns in `u`, orthonormal rows
// in `vt` and a non-increasing, non-negative `sigma`. After damp_spectrum()
// the sigma ordering and sign guarantees no longer hold; `post_intervention`
// is then set and `base_sigma` keeps the spectrum the factors came from.
struct SvdFactors {
  Matrix u;                   // rows x d
  std::vector<double> sigma;  // d
  Matrix vt;                  // d x d

  // The matrix these factors were computed from, when known. Lets
  // reconstruction hand back the exact source values if nothing changed.
  std::shared_ptr<const Matrix> source;

  bool post_intervention = false;
  std::vector<double> base_sigma;

  std::size_t sweeps = 0;

  std::size_t dim() const noexcept { return sigma.size(); }

  // B = U and A = diag(sigma) Vt, the two factors of the head.
  const Matrix& b() const noexcept { return u; }
  Matrix a() const;
};

// One-sided Jacobi SVD on the R factor of a Householder QR.
// Requires rows >= cols >= 1 and finite values. Throws DataError on bad
// input and ConvergenceError if 60 sweeps do not suffice.
// Sign convention: the largest-magnitude entry of every column of U is
// positive (first such entry on ties).
SvdFactors svd(const Matrix& m, Backend backend = Backend::omp);

// U diag(sigma) Vt by the full product, ignoring any cached source.
Matrix multiply_factors(const SvdFactors& f, Backend backend = Backend::omp);

// ||w - w_hat||_F.
double frobenius_loss(const Matrix& w, const Matrix& w_hat);

double frobenius_norm(const Matrix& m);

Matrix matmul(const Matrix& a, const Matrix& b, Backend backend = Backend::omp);

// max |Q^T Q - I| over the columns of q.
double column_orthonormality_deviation(const Matrix& q);

// max |Q Q^T - I| over the rows of q.
double row_orthonormality_deviation(const Matrix& q);

}  // namespace eshift

#pragma once

// Data-parallel inner kernels. Each kernel exists twice: a plain serial
// reference and an OpenMP version. Both visit floating-point operations in
// the same order, so their outputs are bit-identical for any thread count;
// tests/test_linalg.cpp checks this and bench/ times them against each other.

#include <cstddef>
#include <span>
#include <vector>

#include "eshift/matrix.hpp"

namespace eshift::kernels {

// Dot product with a fixed four-lane summation order. Every kernel below
// goes through this function, which is what makes serial and parallel
// results agree bit for bit.
inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  const std::size_t n = a.size();
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Outcome of one cyclic Jacobi sweep over a set of column panels.
struct SweepStats {
  std::size_t rotations = 0;
  double max_coherence = 0.0;  // max |<a_i,a_j>| / (|a_i| |a_j|) seen before rotating
};

// Round-robin pairing: round r of (n-1) rounds (n rounded up to even) with
// disjoint pairs, so a whole round can be rotated concurrently.
std::vector<std::pair<std::size_t, std::size_t>> round_robin_round(std::size_t n, std::size_t round);
std::size_t round_robin_rounds(std::size_t n);

namespace serial {

// C = A * B. Each C(i,j) accumulates A(i,k) * B(k,j) in increasing k from 0.0.
Matrix matmul(const Matrix& a, const Matrix& b);

// out(j,i) = dot(h.row(j), basis.row(i)).
Matrix project_rows(const Matrix& h, const Matrix& basis);

// One sweep of one-sided Jacobi. `panel` holds the working columns as rows;
// `vrows` accumulates the same rotations. Pairs whose coherence is at most
// `tol` or whose columns have norm at most `floor` are left alone.
SweepStats jacobi_sweep(Matrix& panel, Matrix& vrows, double tol, double floor);

// In-place Householder QR of the columns stored as rows of `panel`
// (panel is n x m, representing an m x n matrix with m >= n). On return
// the reflectors are in `reflectors` (row k, entries k..m-1) and the
// n x n upper-triangular R is returned with its columns as rows.
Matrix householder_qr(Matrix& panel, Matrix& reflectors);

// Applies Q from householder_qr to each row of `cols` (length m), in place.
void apply_q(const Matrix& reflectors, Matrix& cols);

// w(r,:) += sum_t coef[t] * u(r, idx[t]) * vt(idx[t], :), terms in the given order.
void low_rank_update(Matrix& w, const Matrix& u, const Matrix& vt, std::span<const std::size_t> idx,
                     std::span<const double> coef);

}  // namespace serial

namespace omp {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix project_rows(const Matrix& h, const Matrix& basis);
SweepStats jacobi_sweep(Matrix& panel, Matrix& vrows, double tol, double floor);
Matrix householder_qr(Matrix& panel, Matrix& reflectors);
void apply_q(const Matrix& reflectors, Matrix& cols);
void low_rank_update(Matrix& w, const Matrix& u, const Matrix& vt, std::span<const std::size_t> idx,
                     std::span<const double> coef);

}  // namespace omp

}  // namespace eshift::kernels

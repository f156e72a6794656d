#include <omp.h>

#include <algorithm>
#include <stdexcept>

#include "eshift/kernels.hpp"
#include "kernel_detail.hpp"

namespace eshift::kernels::omp {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) detail::matmul_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

Matrix project_rows(const Matrix& h, const Matrix& basis) {
  if (h.cols() != basis.cols()) throw std::invalid_argument("project_rows: dimension mismatch");
  Matrix out(h.rows(), basis.rows());
  const auto rows = static_cast<std::ptrdiff_t>(h.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < rows; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    for (std::size_t i = 0; i < basis.rows(); ++i) out(jj, i) = dot(h.row(jj), basis.row(i));
  }
  return out;
}

SweepStats jacobi_sweep(Matrix& panel, Matrix& vrows, double tol, double floor) {
  std::size_t rotations = 0;
  double max_coherence = 0.0;
  const std::size_t rounds = round_robin_rounds(panel.rows());
  for (std::size_t r = 0; r < rounds; ++r) {
    const auto pairs = round_robin_round(panel.rows(), r);
    const auto count = static_cast<std::ptrdiff_t>(pairs.size());
#pragma omp parallel for schedule(static) reduction(+ : rotations) reduction(max : max_coherence)
    for (std::ptrdiff_t p = 0; p < count; ++p) {
      const auto [i, j] = pairs[static_cast<std::size_t>(p)];
      const auto res = detail::rotate_pair(panel, vrows, i, j, tol, floor);
      rotations += res.rotated ? 1 : 0;
      max_coherence = std::max(max_coherence, res.coherence);
    }
  }
  return {rotations, max_coherence};
}

Matrix householder_qr(Matrix& panel, Matrix& reflectors) {
  const std::size_t n = panel.rows();
  reflectors = Matrix(n, panel.cols());
  for (std::size_t k = 0; k < n; ++k) {
    detail::make_reflector(panel, reflectors, k);
    const auto last = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = static_cast<std::ptrdiff_t>(k) + 1; j < last; ++j)
      detail::reflect(reflectors.row(k), panel.row(static_cast<std::size_t>(j)), k);
  }
  return detail::upper_panel(panel);
}

void apply_q(const Matrix& reflectors, Matrix& cols) {
  const auto rows = static_cast<std::ptrdiff_t>(cols.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i)
    detail::apply_q_row(reflectors, cols.row(static_cast<std::size_t>(i)));
}

void low_rank_update(Matrix& w, const Matrix& u, const Matrix& vt, std::span<const std::size_t> idx,
                     std::span<const double> coef) {
  const auto rows = static_cast<std::ptrdiff_t>(w.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) detail::low_rank_row(w, u, vt, idx, coef, static_cast<std::size_t>(r));
}

}  // namespace eshift::kernels::omp

#include <algorithm>
#include <stdexcept>

#include "eshift/kernels.hpp"
#include "kernel_detail.hpp"

namespace eshift::kernels {

std::size_t round_robin_rounds(std::size_t n) {
  if (n < 2) return 0;
  const std::size_t even = n + (n % 2);
  return even - 1;
}

std::vector<std::pair<std::size_t, std::size_t>> round_robin_round(std::size_t n, std::size_t round) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (n < 2) return pairs;
  const std::size_t even = n + (n % 2);
  const std::size_t ring = even - 1;
  auto at = [&](std::size_t pos) { return pos == 0 ? 0 : 1 + (pos - 1 + round) % ring; };
  pairs.reserve(even / 2);
  for (std::size_t p = 0; p < even / 2; ++p) {
    std::size_t i = at(p);
    std::size_t j = at(even - 1 - p);
    if (i > j) std::swap(i, j);
    if (j < n) pairs.emplace_back(i, j);
  }
  return pairs;
}

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) detail::matmul_row(a, b, c, i);
  return c;
}

Matrix project_rows(const Matrix& h, const Matrix& basis) {
  if (h.cols() != basis.cols()) throw std::invalid_argument("project_rows: dimension mismatch");
  Matrix out(h.rows(), basis.rows());
  for (std::size_t j = 0; j < h.rows(); ++j)
    for (std::size_t i = 0; i < basis.rows(); ++i) out(j, i) = dot(h.row(j), basis.row(i));
  return out;
}

SweepStats jacobi_sweep(Matrix& panel, Matrix& vrows, double tol, double floor) {
  SweepStats stats;
  const std::size_t rounds = round_robin_rounds(panel.rows());
  for (std::size_t r = 0; r < rounds; ++r) {
    for (const auto& [i, j] : round_robin_round(panel.rows(), r)) {
      const auto res = detail::rotate_pair(panel, vrows, i, j, tol, floor);
      stats.rotations += res.rotated ? 1 : 0;
      stats.max_coherence = std::max(stats.max_coherence, res.coherence);
    }
  }
  return stats;
}

Matrix householder_qr(Matrix& panel, Matrix& reflectors) {
  const std::size_t n = panel.rows();
  reflectors = Matrix(n, panel.cols());
  for (std::size_t k = 0; k < n; ++k) {
    detail::make_reflector(panel, reflectors, k);
    for (std::size_t j = k + 1; j < n; ++j) detail::reflect(reflectors.row(k), panel.row(j), k);
  }
  return detail::upper_panel(panel);
}

void apply_q(const Matrix& reflectors, Matrix& cols) {
  for (std::size_t i = 0; i < cols.rows(); ++i) detail::apply_q_row(reflectors, cols.row(i));
}

void low_rank_update(Matrix& w, const Matrix& u, const Matrix& vt, std::span<const std::size_t> idx,
                     std::span<const double> coef) {
  for (std::size_t r = 0; r < w.rows(); ++r) detail::low_rank_row(w, u, vt, idx, coef, r);
}

}  // namespace serial
}  // namespace eshift::kernels

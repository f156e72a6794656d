#pragma once

// Per-item bodies shared by the serial and OpenMP kernels. The two
// variants differ only in how they iterate over independent items.

#include <cmath>
#include <cstddef>
#include <span>

#include "eshift/kernels.hpp"

namespace eshift::kernels::detail {

inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) noexcept {
  auto out = c.row(i);
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double aik = a(i, k);
    const auto brow = b.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
  }
}

struct PairResult {
  bool rotated = false;
  double coherence = 0.0;
};

inline PairResult rotate_pair(Matrix& panel, Matrix& vrows, std::size_t i, std::size_t j,
                              double tol, double floor) noexcept {
  auto ai = panel.row(i);
  auto aj = panel.row(j);
  const double alpha = dot(ai, ai);
  const double beta = dot(aj, aj);
  const double na = std::sqrt(alpha);
  const double nb = std::sqrt(beta);
  if (na <= floor || nb <= floor) return {};
  const double gamma = dot(ai, aj);
  const double coherence = std::abs(gamma) / na / nb;
  if (coherence <= tol) return {false, coherence};

  const double zeta = (beta - alpha) / (2.0 * gamma);
  const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
  const double c = 1.0 / std::sqrt(1.0 + t * t);
  const double s = c * t;

  for (std::size_t k = 0; k < ai.size(); ++k) {
    const double x = ai[k];
    const double y = aj[k];
    ai[k] = c * x - s * y;
    aj[k] = s * x + c * y;
  }
  auto vi = vrows.row(i);
  auto vj = vrows.row(j);
  for (std::size_t k = 0; k < vi.size(); ++k) {
    const double x = vi[k];
    const double y = vj[k];
    vi[k] = c * x - s * y;
    vj[k] = s * x + c * y;
  }
  return {true, coherence};
}

// Builds the unit Householder vector for column k (row k of `panel`) and
// overwrites the column with (R(0..k,k), 0...).
inline void make_reflector(Matrix& panel, Matrix& reflectors, std::size_t k) noexcept {
  auto col = panel.row(k);
  auto u = reflectors.row(k);
  const std::size_t m = col.size();
  const std::span<const double> x = col.subspan(k);
  const double normx = std::sqrt(dot(x, x));
  if (normx == 0.0) return;
  const double alpha = x[0] > 0.0 ? -normx : normx;
  for (std::size_t r = k; r < m; ++r) u[r] = col[r];
  u[k] -= alpha;
  const std::span<const double> uk = u.subspan(k);
  const double unorm = std::sqrt(dot(uk, uk));
  for (std::size_t r = k; r < m; ++r) u[r] /= unorm;
  col[k] = alpha;
  for (std::size_t r = k + 1; r < m; ++r) col[r] = 0.0;
}

inline void reflect(std::span<const double> u, std::span<double> y, std::size_t k) noexcept {
  const auto uk = u.subspan(k);
  const auto yk = y.subspan(k);
  const double s = 2.0 * dot(uk, yk);
  if (s == 0.0) return;
  for (std::size_t r = 0; r < yk.size(); ++r) yk[r] -= s * uk[r];
}

inline void apply_q_row(const Matrix& reflectors, std::span<double> y) noexcept {
  for (std::size_t k = reflectors.rows(); k-- > 0;) reflect(reflectors.row(k), y, k);
}

inline void low_rank_row(Matrix& w, const Matrix& u, const Matrix& vt, std::span<const std::size_t> idx,
                         std::span<const double> coef, std::size_t r) noexcept {
  auto out = w.row(r);
  for (std::size_t t = 0; t < idx.size(); ++t) {
    const double scale = coef[t] * u(r, idx[t]);
    const auto v = vt.row(idx[t]);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += scale * v[c];
  }
}

inline Matrix upper_panel(const Matrix& panel) {
  const std::size_t n = panel.rows();
  Matrix r(n, n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i <= k; ++i) r(k, i) = panel(k, i);
  return r;
}

}  // namespace eshift::kernels::detail

#pragma once

// Brute-force reference computations used as test oracles. They share no
// code with the library beyond the Matrix container and the RNG.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "eshift/matrix.hpp"
#include "eshift/rng.hpp"

namespace oracle {

using eshift::Matrix;

inline Matrix random_matrix(eshift::Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

// Classical Gram-Schmidt on a Gaussian matrix (rows are the basis).
inline Matrix random_orthogonal(eshift::Rng& rng, std::size_t n) {
  Matrix q = random_matrix(rng, n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) {
        double p = 0.0;
        for (std::size_t k = 0; k < n; ++k) p += q(i, k) * q(j, k);
        for (std::size_t k = 0; k < n; ++k) q(i, k) -= p * q(j, k);
      }
    double nn = 0.0;
    for (std::size_t k = 0; k < n; ++k) nn += q(i, k) * q(i, k);
    nn = std::sqrt(nn);
    for (std::size_t k = 0; k < n; ++k) q(i, k) /= nn;
  }
  return q;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

inline double frobenius(const Matrix& a, const Matrix& b) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a.data()[i]) - b.data()[i];
    s += d * d;
  }
  return static_cast<double>(std::sqrt(s));
}

// Fraction of (positive, negative) pairs ordered correctly, ties 1/2.
inline double pairwise_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  long long num2 = 0;  // twice the credited pairs, kept integral
  long long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      ++pairs;
      if (s[i] > s[j])
        num2 += 2;
      else if (s[i] == s[j])
        num2 += 1;
    }
  }
  return static_cast<double>(num2) / (2.0 * static_cast<double>(pairs));
}

// Threshold enumeration: every distinct score t (descending) predicts
// score >= t; AP = sum (R_t - R_prev) * P_t.
inline double enumerated_ap(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  long long positives = 0;
  for (auto l : y) positives += l;
  double ap = 0.0;
  double prev_recall = 0.0;
  for (double t : thresholds) {
    long long tp = 0, predicted = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        ++predicted;
        tp += y[i];
      }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

inline double direct_tph(double t, double p) {
  if (t <= 0.0) return 0.0;
  const double b = 1.0 / (1.0 + std::abs(p));
  return 2.0 * t * b / (t + b);
}

// Silhouette over all points, singleton clusters scoring 0.
inline double full_silhouette(const Matrix& x, const std::vector<std::size_t>& a) {
  const std::size_t n = x.rows();
  std::size_t k = 0;
  for (auto c : a) k = std::max(k, c + 1);
  std::vector<std::size_t> size(k, 0);
  for (auto c : a) ++size[c];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (size[a[i]] == 1) continue;
    std::vector<double> sum(k, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double d = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) d += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
      sum[a[j]] += std::sqrt(d);
    }
    const double ai = sum[a[i]] / static_cast<double>(size[a[i]] - 1);
    double bi = INFINITY;
    for (std::size_t c = 0; c < k; ++c)
      if (c != a[i] && size[c] > 0) bi = std::min(bi, sum[c] / static_cast<double>(size[c]));
    total += (bi - ai) / std::max(ai, bi);
  }
  return total / static_cast<double>(n);
}

}  // namespace oracle

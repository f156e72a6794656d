#pragma once

#include <cstdint>
#include <span>

namespace eshift {

// Fractional toxicity reduction T (0.5772 for 57.72%) and signed
// fractional perplexity change P (positive means perplexity went up).
struct TphInputs {
  double toxicity_reduction = 0.0;
  double perplexity_change = 0.0;
};

// Harmonic mean of T and the perplexity-preservation factor 1 / (1 + |P|).
// Defined as 0 for T <= 0. Returns a fraction in [0, 1].
double tph(TphInputs in) noexcept;
inline double tph(double toxicity_reduction, double perplexity_change) noexcept {
  return tph(TphInputs{toxicity_reduction, perplexity_change});
}

// Rank-statistic AUROC: probability that a random positive outscores a
// random negative, ties credited 0.5. Labels are 0/1. Throws DataError when
// either class is empty or lengths differ.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Step-wise area under the precision-recall curve over the descending-score
// sweep, sum_n (R_n - R_{n-1}) P_n, with tied scores forming one threshold.
// Throws DataError when there are no positives or lengths differ.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct Prf1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false;  // some ratio was 0/0 and reported as 0
};

Prf1 prf1(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels);

// log(sum(exp(x))) without overflow.
double log_sum_exp(std::span<const double> x) noexcept;

}  // namespace eshift

#include "eshift/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "eshift/error.hpp"

namespace eshift {
namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DataError(std::string(what) + ": scores and labels differ in length");
}

std::vector<std::size_t> order_by_score_desc(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double tph(TphInputs in) noexcept {
  const double t = in.toxicity_reduction;
  if (!(t > 0.0)) return 0.0;
  const double keep = 1.0 / (1.0 + std::abs(in.perplexity_change));
  return 2.0 * t * keep / (t + keep);
}

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_lengths(scores.size(), labels.size(), "auroc");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (auto l : labels) pos += l ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw DataError("auroc: both classes must be present");

  // Ascending sweep; a block of tied scores shares the average rank.
  auto order = order_by_score_desc(scores);
  std::reverse(order.begin(), order.end());
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t block_pos = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      block_pos += labels[order[j]] ? 1 : 0;
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    rank_sum += avg_rank * static_cast<double>(block_pos);
    i = j;
  }
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_lengths(scores.size(), labels.size(), "average_precision");
  const std::size_t n = scores.size();
  std::size_t total_pos = 0;
  for (auto l : labels) total_pos += l ? 1 : 0;
  if (total_pos == 0) throw DataError("average_precision: no positive labels");

  const auto order = order_by_score_desc(scores);
  std::size_t tp = 0;
  std::size_t seen = 0;
  std::size_t prev_tp = 0;
  double ap = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]] ? 1 : 0;
      ++j;
    }
    seen = j;
    if (tp != prev_tp) {
      // Scaled by total_pos until the end so a perfect ranking sums to exactly 1.
      const double precision = static_cast<double>(tp) / static_cast<double>(seen);
      ap += static_cast<double>(tp - prev_tp) * precision;
      prev_tp = tp;
    }
    i = j;
  }
  return ap / static_cast<double>(total_pos);
}

Prf1 prf1(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels) {
  if (predictions.size() != labels.size()) throw DataError("prf1: predictions and labels differ in length");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] != 0;
    const bool l = labels[i] != 0;
    tp += (p && l) ? 1 : 0;
    fp += (p && !l) ? 1 : 0;
    fn += (!p && l) ? 1 : 0;
  }
  Prf1 r;
  const auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      r.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.precision = ratio(tp, tp + fp);
  r.recall = ratio(tp, tp + fn);
  if (r.precision + r.recall > 0.0) {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  } else {
    r.f1 = 0.0;
    r.degenerate = true;
  }
  return r;
}

double log_sum_exp(std::span<const double> x) noexcept {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : x) hi = std::max(hi, v);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (double v : x) s += std::exp(v - hi);
  return hi + std::log(s);
}

}  // namespace eshift

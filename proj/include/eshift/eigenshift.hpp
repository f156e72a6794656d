#pragma once

// Spectral intervention on an output head W (V x d):
//   1. W = U diag(sigma) Vt
//   2. project hidden states onto the right singular directions
//   3. score each direction by the toxic-minus-non-toxic mean projection
//   4. pick the top-k directions
//   5. scale their singular values by alpha and rebuild W'.

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "eshift/linalg.hpp"
#include "eshift/tensor_store.hpp"

namespace eshift {

enum class ScoringVariant {
  unit_v,        // a_i = v_i^T h
  sigma_scaled,  // a_i = sigma_i v_i^T h, i.e. rows of diag(sigma) Vt
};

std::string_view variant_name(ScoringVariant v) noexcept;  // "unit-v" / "sigma-scaled"
ScoringVariant parse_variant(std::string_view name);        // std::invalid_argument

struct DeltaScores {
  std::vector<double> delta;  // mean_toxic - mean_nontoxic
  std::vector<double> mean_toxic;
  std::vector<double> mean_nontoxic;
  ScoringVariant variant = ScoringVariant::unit_v;
};

struct ExplicitTargets {
  std::vector<std::size_t> indices;
};
struct TopK {
  std::size_t k = 1;
};
struct Percentile {
  double p = 99.0;  // in (0, 100)
};

struct InterventionPlan {
  double alpha = 0.0;
  std::variant<ExplicitTargets, TopK, Percentile> target = TopK{};
  ScoringVariant variant = ScoringVariant::unit_v;
};

// k = ceil(d * (1 - p / 100)), with a 1e-9 guard against representation
// error so that e.g. d = 100, p = 95 gives 5.
std::size_t percentile_to_k(double p, std::size_t d);

// n x d activations. Entry (j, i) is v_i . h_j, times sigma_i for sigma_scaled.
Matrix project_activations(const SvdFactors& f, const ActivationDataset& ds,
                           ScoringVariant variant = ScoringVariant::unit_v, Backend backend = Backend::omp);

// Throws DataError if either class is empty, std::invalid_argument on a
// dimension mismatch.
DeltaScores delta_scores(const SvdFactors& f, const ActivationDataset& ds,
                         ScoringVariant variant = ScoringVariant::unit_v, Backend backend = Backend::omp);

// Indices of the k largest deltas, in descending delta order with ties
// broken by lower index. Explicit targets are validated (unique, in range)
// and returned unchanged.
std::vector<std::size_t> select_targets(const DeltaScores& scores, const InterventionPlan& plan);

// sigma'[i] = alpha * sigma[i] for i in targets. The result is marked
// post_intervention and may have unsorted or negative singular values.
SvdFactors damp_spectrum(const SvdFactors& f, const std::vector<std::size_t>& targets, double alpha);

// U diag(sigma) Vt. When no singular value differs from the spectrum the
// factors were computed from, the cached source matrix is returned as is.
// Otherwise W' = W + sum_i (sigma'_i - sigma_i) u_i v_i^T over the changed
// directions, which equals U diag(sigma') Vt to rounding.
WeightMatrix reconstruct(const SvdFactors& f, DType dtype = DType::f64, Backend backend = Backend::omp);

struct EigenShiftResult {
  WeightMatrix weights;
  DeltaScores scores;
  std::vector<std::size_t> targets;
  std::vector<double> sigma;  // spectrum before damping
  double frobenius_delta = 0.0;
  std::vector<std::string> warnings;
};

EigenShiftResult eigenshift(const WeightMatrix& w, const ActivationDataset& ds, const InterventionPlan& plan,
                            Backend backend = Backend::omp);

// Same pipeline, reusing an existing decomposition of w.
EigenShiftResult eigenshift(const WeightMatrix& w, const SvdFactors& f, const ActivationDataset& ds,
                            const InterventionPlan& plan, Backend backend = Backend::omp);

// {alpha, k, targets[], delta_top[], frobenius_delta, variant, warnings[]}
nlohmann::json diagnostics_json(const EigenShiftResult& r, const InterventionPlan& plan);

}  // namespace eshift

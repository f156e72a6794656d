#include "eshift/eigenshift.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "eshift/error.hpp"
#include "eshift/kernels.hpp"

namespace eshift {

std::string_view variant_name(ScoringVariant v) noexcept {
  return v == ScoringVariant::unit_v ? "unit-v" : "sigma-scaled";
}

ScoringVariant parse_variant(std::string_view name) {
  if (name == "unit-v" || name == "unit_v") return ScoringVariant::unit_v;
  if (name == "sigma-scaled" || name == "sigma_scaled") return ScoringVariant::sigma_scaled;
  throw std::invalid_argument("unknown scoring variant: " + std::string(name));
}

std::size_t percentile_to_k(double p, std::size_t d) {
  if (!(p > 0.0 && p < 100.0)) throw std::invalid_argument("percentile must lie in (0, 100)");
  const double exact = static_cast<double>(d) * (1.0 - p / 100.0);
  return static_cast<std::size_t>(std::ceil(exact - 1e-9));
}

Matrix project_activations(const SvdFactors& f, const ActivationDataset& ds, ScoringVariant variant,
                           Backend backend) {
  if (ds.dim() != f.vt.cols())
    throw std::invalid_argument("project_activations: hidden dimension " + std::to_string(ds.dim()) +
                                " does not match factor dimension " + std::to_string(f.vt.cols()));
  const Matrix basis = variant == ScoringVariant::unit_v ? f.vt : f.a();
  return backend == Backend::omp ? kernels::omp::project_rows(ds.hidden_states, basis)
                                 : kernels::serial::project_rows(ds.hidden_states, basis);
}

DeltaScores delta_scores(const SvdFactors& f, const ActivationDataset& ds, ScoringVariant variant,
                         Backend backend) {
  const std::size_t toxic = ds.toxic_count();
  const std::size_t clean = ds.nontoxic_count();
  if (toxic == 0 || clean == 0) throw DataError("delta_scores: dataset must contain both classes");

  const Matrix acts = project_activations(f, ds, variant, backend);
  const std::size_t d = acts.cols();
  DeltaScores s;
  s.variant = variant;
  s.mean_toxic.assign(d, 0.0);
  s.mean_nontoxic.assign(d, 0.0);
  for (std::size_t j = 0; j < acts.rows(); ++j) {
    auto& sum = ds.labels[j] ? s.mean_toxic : s.mean_nontoxic;
    const auto row = acts.row(j);
    for (std::size_t i = 0; i < d; ++i) sum[i] += row[i];
  }
  s.delta.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    s.mean_toxic[i] /= static_cast<double>(toxic);
    s.mean_nontoxic[i] /= static_cast<double>(clean);
    s.delta[i] = s.mean_toxic[i] - s.mean_nontoxic[i];
  }
  return s;
}

std::vector<std::size_t> select_targets(const DeltaScores& scores, const InterventionPlan& plan) {
  const std::size_t d = scores.delta.size();
  if (const auto* ex = std::get_if<ExplicitTargets>(&plan.target)) {
    std::set<std::size_t> seen;
    for (auto i : ex->indices) {
      if (i >= d) throw std::invalid_argument("target index " + std::to_string(i) + " out of range");
      if (!seen.insert(i).second) throw std::invalid_argument("duplicate target index " + std::to_string(i));
    }
    return ex->indices;
  }

  std::size_t k = 0;
  if (const auto* tk = std::get_if<TopK>(&plan.target))
    k = tk->k;
  else
    k = percentile_to_k(std::get<Percentile>(plan.target).p, d);
  if (k == 0) throw std::invalid_argument("top-k must be positive");
  if (k > d) throw std::invalid_argument("top-k " + std::to_string(k) + " exceeds dimension " + std::to_string(d));

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores.delta[a] > scores.delta[b]; });
  order.resize(k);
  return order;
}

SvdFactors damp_spectrum(const SvdFactors& f, const std::vector<std::size_t>& targets, double alpha) {
  SvdFactors out = f;
  if (!out.post_intervention) out.base_sigma = f.sigma;
  out.post_intervention = true;
  for (auto i : targets) {
    if (i >= out.sigma.size()) throw std::invalid_argument("damp_spectrum: index " + std::to_string(i) + " out of range");
    out.sigma[i] = alpha * f.sigma[i];
  }
  return out;
}

WeightMatrix reconstruct(const SvdFactors& f, DType dtype, Backend backend) {
  const std::size_t d = f.sigma.size();
  if (f.u.cols() != d || f.vt.rows() != d || f.vt.cols() != d)
    throw std::invalid_argument("reconstruct: inconsistent factor shapes");

  const std::vector<double>& base = f.post_intervention ? f.base_sigma : f.sigma;
  std::vector<std::size_t> changed;
  std::vector<double> coef;
  for (std::size_t i = 0; i < d; ++i) {
    if (f.sigma[i] != base[i]) {
      changed.push_back(i);
      coef.push_back(f.sigma[i] - base[i]);
    }
  }

  if (!f.source) return {multiply_factors(f, backend), dtype};
  if (f.source->rows() != f.u.rows() || f.source->cols() != d)
    throw std::invalid_argument("reconstruct: source matrix does not match factors");
  Matrix w = *f.source;
  if (changed.empty()) return {std::move(w), dtype};
  if (backend == Backend::omp)
    kernels::omp::low_rank_update(w, f.u, f.vt, changed, coef);
  else
    kernels::serial::low_rank_update(w, f.u, f.vt, changed, coef);
  return {std::move(w), dtype};
}

EigenShiftResult eigenshift(const WeightMatrix& w, const ActivationDataset& ds, const InterventionPlan& plan,
                            Backend backend) {
  if (ds.dim() != w.cols())
    throw std::invalid_argument("eigenshift: dataset dimension " + std::to_string(ds.dim()) +
                                " does not match head columns " + std::to_string(w.cols()));
  return eigenshift(w, svd(w.values, backend), ds, plan, backend);
}

EigenShiftResult eigenshift(const WeightMatrix& w, const SvdFactors& f, const ActivationDataset& ds,
                            const InterventionPlan& plan, Backend backend) {
  EigenShiftResult r;
  if (!(plan.alpha >= 0.0 && plan.alpha < 1.0))
    r.warnings.push_back("alpha " + std::to_string(plan.alpha) + " lies outside [0, 1): directions are " +
                         (plan.alpha < 0.0 ? "sign-flipped" : "not attenuated"));

  const auto* ex = std::get_if<ExplicitTargets>(&plan.target);
  if (ex && ex->indices.empty()) {
    // Nothing to damp; scores are still reported when the data allows it.
    r.weights = w;
    r.sigma = f.sigma;
    if (ds.toxic_count() > 0 && ds.nontoxic_count() > 0) r.scores = delta_scores(f, ds, plan.variant, backend);
    return r;
  }

  r.scores = delta_scores(f, ds, plan.variant, backend);
  r.targets = select_targets(r.scores, plan);
  r.sigma = f.sigma;
  const SvdFactors damped = damp_spectrum(f, r.targets, plan.alpha);

  SvdFactors anchored = damped;
  anchored.source = std::make_shared<const Matrix>(w.values);
  r.weights = reconstruct(anchored, w.dtype, backend);
  r.frobenius_delta = frobenius_loss(r.weights.values, w.values);
  return r;
}

nlohmann::json diagnostics_json(const EigenShiftResult& r, const InterventionPlan& plan) {
  nlohmann::json delta_top = nlohmann::json::array();
  for (auto i : r.targets) {
    nlohmann::json item = {{"index", i}};
    if (i < r.scores.delta.size()) item["delta"] = r.scores.delta[i];
    if (i < r.sigma.size()) item["sigma"] = r.sigma[i];
    delta_top.push_back(std::move(item));
  }
  return {{"alpha", plan.alpha},
          {"k", r.targets.size()},
          {"targets", r.targets},
          {"delta_top", std::move(delta_top)},
          {"frobenius_delta", r.frobenius_delta},
          {"variant", std::string(variant_name(plan.variant))},
          {"warnings", r.warnings}};
}

}  // namespace eshift

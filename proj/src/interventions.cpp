#include "eshift/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "eshift/error.hpp"
#include "eshift/metrics.hpp"

namespace eshift {
namespace {

void check_indices(std::span<const std::size_t> experts, std::size_t width) {
  for (auto i : experts)
    if (i >= width)
      throw std::out_of_range("expert index " + std::to_string(i) + " out of range for width " + std::to_string(width));
}

void check_aurocs(std::span<const double> aurocs) {
  for (double a : aurocs)
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("aura: AUROC " + std::to_string(a) + " outside [0, 1]");
}

void zero_in_place(std::span<double> acts, std::span<const std::size_t> experts) {
  for (auto i : experts) acts[i] = 0.0;
}

void damp_in_place(std::span<double> acts, std::span<const std::size_t> experts, double alpha) {
  for (auto i : experts) acts[i] *= alpha;
}

void aura_in_place(std::span<double> acts, std::span<const double> aurocs) {
  for (std::size_t i = 0; i < acts.size(); ++i) acts[i] *= aura_factor(aurocs[i]);
}

void replace_in_place(std::span<double> acts, std::span<const std::size_t> experts, std::span<const double> values) {
  for (std::size_t k = 0; k < experts.size(); ++k) acts[experts[k]] = values[k];
}

std::string format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

}  // namespace

std::string_view method_name(HookMethod m) noexcept {
  switch (m) {
    case HookMethod::det_zero:
      return "det-0";
    case HookMethod::damp_uniform:
      return "damp";
    case HookMethod::aura:
      return "aura";
    case HookMethod::set_mean_max:
      return "set-mean-max";
  }
  return "unknown";
}

std::vector<double> det_zero(std::span<const double> acts, std::span<const std::size_t> experts) {
  check_indices(experts, acts.size());
  std::vector<double> out(acts.begin(), acts.end());
  zero_in_place(out, experts);
  return out;
}

std::vector<double> damp_uniform(std::span<const double> acts, std::span<const std::size_t> experts, double alpha) {
  check_indices(experts, acts.size());
  std::vector<double> out(acts.begin(), acts.end());
  damp_in_place(out, experts, alpha);
  return out;
}

std::vector<double> set_mean_max(std::span<const double> acts, std::span<const std::size_t> experts,
                                 std::span<const double> replacement) {
  check_indices(experts, acts.size());
  if (replacement.size() != experts.size())
    throw std::invalid_argument("set_mean_max: need one replacement per expert");
  std::vector<double> out(acts.begin(), acts.end());
  replace_in_place(out, experts, replacement);
  return out;
}

std::vector<double> aura(std::span<const double> acts, std::span<const double> per_neuron_auroc) {
  if (per_neuron_auroc.size() != acts.size()) throw std::invalid_argument("aura: need one AUROC per neuron");
  check_aurocs(per_neuron_auroc);
  std::vector<double> out(acts.begin(), acts.end());
  aura_in_place(out, per_neuron_auroc);
  return out;
}

double aura_factor(double auroc) {
  if (!(auroc >= 0.0 && auroc <= 1.0)) throw std::invalid_argument("aura: AUROC outside [0, 1]");
  if (auroc <= 0.5) return 1.0;
  const double gini = 2.0 * auroc - 1.0;
  return std::clamp(1.0 - gini, 0.0, 1.0);
}

std::vector<double> mean_max_replacements(const NeuronActivationTable& tbl, std::span<const std::size_t> experts) {
  if (tbl.labels.size() != tbl.pooled.rows()) throw DataError("neuron table: label count does not match rows");
  check_indices(experts, tbl.pooled.cols());
  std::vector<double> sum(experts.size(), 0.0);
  std::size_t toxic = 0;
  for (std::size_t j = 0; j < tbl.pooled.rows(); ++j) {
    if (tbl.labels[j] != 1) continue;
    ++toxic;
    for (std::size_t k = 0; k < experts.size(); ++k) sum[k] += tbl.pooled(j, experts[k]);
  }
  if (toxic == 0) throw DataError("mean_max_replacements: no toxic-class samples");
  for (double& s : sum) s /= static_cast<double>(toxic);
  return sum;
}

ActivationHook ActivationHook::zero(std::vector<std::size_t> experts) {
  ActivationHook h;
  h.method = HookMethod::det_zero;
  h.experts = std::move(experts);
  return h;
}

ActivationHook ActivationHook::damp(std::vector<std::size_t> experts, double alpha) {
  ActivationHook h;
  h.method = HookMethod::damp_uniform;
  h.experts = std::move(experts);
  h.alpha = alpha;
  return h;
}

ActivationHook ActivationHook::from_aurocs(std::vector<double> aurocs) {
  ActivationHook h;
  h.method = HookMethod::aura;
  h.aurocs = std::move(aurocs);
  return h;
}

ActivationHook ActivationHook::mean_max(std::vector<std::size_t> experts, std::vector<double> replacement) {
  ActivationHook h;
  h.method = HookMethod::set_mean_max;
  h.experts = std::move(experts);
  h.replacement = std::move(replacement);
  return h;
}

void ActivationHook::validate(std::size_t width) const {
  for (auto i : experts)
    if (i >= width) throw std::invalid_argument("hook: expert index " + std::to_string(i) + " out of range");
  switch (method) {
    case HookMethod::det_zero:
      break;
    case HookMethod::damp_uniform:
      if (!std::isfinite(alpha)) throw std::invalid_argument("hook: damping factor must be finite");
      break;
    case HookMethod::aura:
      if (aurocs.size() != width) throw std::invalid_argument("hook: aura needs one AUROC per neuron");
      check_aurocs(aurocs);
      break;
    case HookMethod::set_mean_max:
      if (replacement.size() != experts.size()) throw std::invalid_argument("hook: need one replacement per expert");
      for (double v : replacement)
        if (!std::isfinite(v)) throw std::invalid_argument("hook: replacement values must be finite");
      break;
  }
}

void ActivationHook::apply(std::span<double> acts) const {
  switch (method) {
    case HookMethod::det_zero:
      zero_in_place(acts, experts);
      break;
    case HookMethod::damp_uniform:
      damp_in_place(acts, experts, alpha);
      break;
    case HookMethod::aura:
      aura_in_place(acts, aurocs);
      break;
    case HookMethod::set_mean_max:
      replace_in_place(acts, experts, replacement);
      break;
  }
}

MlpHook ActivationHook::bind(std::size_t width) const {
  validate(width);
  return [hook = *this](std::span<double> acts) { hook.apply(acts); };
}

EvalMeasure measure(const ToyModelSpec& spec, const EvalSets& sets, const MlpHook& hook) {
  return {toxicity_rate(spec, sets.prompts, sets.gen, hook), perplexity(spec, sets.corpus, hook)};
}

EvalReport compare(const EvalMeasure& base, const EvalMeasure& intervened, std::string model, std::string method,
                   std::string site) {
  EvalReport r;
  r.model = std::move(model);
  r.method = std::move(method);
  r.site = std::move(site);
  r.base = base;
  r.intervened = intervened;
  r.toxicity_reduction = base.toxicity > 0.0 ? (base.toxicity - intervened.toxicity) / base.toxicity : 0.0;
  r.perplexity_change = (intervened.perplexity - base.perplexity) / base.perplexity;
  if (r.toxicity_reduction != 0.0 || r.perplexity_change != 0.0)
    r.tph = tph(r.toxicity_reduction, r.perplexity_change);
  return r;
}

EvalReport evaluate_intervention(const ToyModelSpec& spec, const ActivationHook& hook, const EvalSets& sets) {
  const MlpHook bound = hook.bind(spec.mlp_width);
  auto r = compare(measure(spec, sets), measure(spec, sets, bound), "toy-" + std::to_string(spec.seed),
                   std::string(method_name(hook.method)), std::string(kMlpSite));
  r.interpreted = hook.method == HookMethod::aura;
  return r;
}

EvalReport evaluate_intervention(const ToyModelSpec& spec, const WeightMatrix& modified_head, const EvalSets& sets,
                                 std::string method) {
  return compare(measure(spec, sets), measure(with_head(spec, modified_head), sets), "toy-" + std::to_string(spec.seed),
                 std::move(method), std::string(kHeadSite));
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"model", r.model},
                      {"method", r.method},
                      {"site", r.site},
                      {"base", {{"toxicity", r.base.toxicity}, {"perplexity", r.base.perplexity}}},
                      {"intervened", {{"toxicity", r.intervened.toxicity}, {"perplexity", r.intervened.perplexity}}},
                      {"toxicity_reduction", r.toxicity_reduction},
                      {"perplexity_change", r.perplexity_change},
                      {"tph", r.tph ? nlohmann::json(*r.tph) : nlohmann::json(nullptr)}};
  if (r.interpreted) j["interpretation"] = "aura factor = clamp(1 - gini, 0, 1), gini = 2 AUROC - 1";
  return j;
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.model = j.value("model", "");
    r.method = j.value("method", "");
    r.site = j.value("site", "");
    r.base = {j.at("base").at("toxicity").get<double>(), j.at("base").at("perplexity").get<double>()};
    r.intervened = {j.at("intervened").at("toxicity").get<double>(), j.at("intervened").at("perplexity").get<double>()};
    r.toxicity_reduction = j.at("toxicity_reduction").get<double>();
    r.perplexity_change = j.at("perplexity_change").get<double>();
    if (j.contains("tph") && !j["tph"].is_null()) r.tph = j["tph"].get<double>();
    r.interpreted = j.contains("interpretation");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("eval report: ") + e.what());
  }
}

std::string eval_csv_header() {
  return "model,method,toxicity_pct,toxicity_delta_pct,perplexity,perplexity_delta_pct,tph_pct";
}

std::string eval_csv_row(const EvalReport& r) {
  std::string row = r.model + "," + r.method + ",";
  row += format("%.4f", 100.0 * r.intervened.toxicity) + ",";
  row += format("%.4f", 0.0 - 100.0 * r.toxicity_reduction) + ",";  // no "-0.0000"
  row += format("%.4f", r.intervened.perplexity) + ",";
  row += format("%.4f", 100.0 * r.perplexity_change) + ",";
  if (r.tph) row += format("%.4f", 100.0 * *r.tph);
  return row;
}

}  // namespace eshift

#pragma once

// Activation-level baselines applied at the toy model's post-GELU MLP site,
// and the evaluation harness shared with head-level interventions.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "eshift/expert_id.hpp"
#include "eshift/toylm.hpp"

namespace eshift {

enum class HookMethod { det_zero, damp_uniform, aura, set_mean_max };

std::string_view method_name(HookMethod m) noexcept;

// Pure forms. All throw std::out_of_range for an expert index >= acts.size().
std::vector<double> det_zero(std::span<const double> acts, std::span<const std::size_t> experts);
std::vector<double> damp_uniform(std::span<const double> acts, std::span<const std::size_t> experts, double alpha);
// `replacement[k]` is written to `acts[experts[k]]`.
std::vector<double> set_mean_max(std::span<const double> acts, std::span<const std::size_t> experts,
                                 std::span<const double> replacement);
// One AUROC per neuron. Throws std::invalid_argument for an AUROC outside
// [0, 1] or a length mismatch.
std::vector<double> aura(std::span<const double> acts, std::span<const double> per_neuron_auroc);

// 1 - (2 AUROC - 1) clamped to [0, 1] above 0.5, else 1.
double aura_factor(double auroc);

// Mean over toxic-class samples of each expert's pooled maximum.
std::vector<double> mean_max_replacements(const NeuronActivationTable& tbl, std::span<const std::size_t> experts);

struct ActivationHook {
  HookMethod method = HookMethod::det_zero;
  std::vector<std::size_t> experts;   // unused by aura
  double alpha = 0.0;                 // damp_uniform
  std::vector<double> aurocs;         // aura, one per neuron
  std::vector<double> replacement;    // set_mean_max, one per expert

  static ActivationHook zero(std::vector<std::size_t> experts);
  static ActivationHook damp(std::vector<std::size_t> experts, double alpha);
  static ActivationHook from_aurocs(std::vector<double> aurocs);
  static ActivationHook mean_max(std::vector<std::size_t> experts, std::vector<double> replacement);

  // Throws std::invalid_argument when indices, factor counts or values do
  // not fit an MLP of the given width.
  void validate(std::size_t width) const;
  void apply(std::span<double> acts) const;
  // Validates, then returns a callable for forward()/generate().
  MlpHook bind(std::size_t width) const;
};

struct EvalSets {
  std::vector<TokenSeq> prompts;  // for toxicity_rate
  Corpus corpus;                  // for perplexity
  GenParams gen;
};

struct EvalMeasure {
  double toxicity = 0.0;
  double perplexity = 0.0;
};

EvalMeasure measure(const ToyModelSpec& spec, const EvalSets& sets, const MlpHook& hook = {});

inline constexpr std::string_view kMlpSite = "mlp-post-activation";
inline constexpr std::string_view kHeadSite = "lm_head";

struct EvalReport {
  std::string model;
  std::string method;
  std::string site;
  EvalMeasure base;
  EvalMeasure intervened;
  double toxicity_reduction = 0.0;  // T: (base - new) / base, 0 when base toxicity is 0
  double perplexity_change = 0.0;   // P: (new - base) / base
  std::optional<double> tph;        // absent when T and P are both exactly 0
  bool interpreted = false;         // method rule is an interpretation (aura)
};

// Assembles a report from two measurements.
EvalReport compare(const EvalMeasure& base, const EvalMeasure& intervened, std::string model, std::string method,
                   std::string site);

EvalReport evaluate_intervention(const ToyModelSpec& spec, const ActivationHook& hook, const EvalSets& sets);
EvalReport evaluate_intervention(const ToyModelSpec& spec, const WeightMatrix& modified_head, const EvalSets& sets,
                                 std::string method = "eigenshift");

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

// Table-2 layout: model, method, toxicity %, toxicity delta %, perplexity,
// perplexity delta %, TPH % (empty when absent).
std::string eval_csv_header();
std::string eval_csv_row(const EvalReport& r);

}  // namespace eshift

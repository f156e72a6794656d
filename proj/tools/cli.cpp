#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "eshift/eigenshift.hpp"
#include "eshift/error.hpp"
#include "eshift/expert_id.hpp"
#include "eshift/interventions.hpp"
#include "eshift/linalg.hpp"
#include "eshift/metrics.hpp"
#include "eshift/rng.hpp"
#include "eshift/tensor_store.hpp"
#include "eshift/toylm.hpp"

namespace eshift::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string command;
  std::string checkpoint;
  std::string tensor = "lm_head";
  std::string dump;
  std::string out;
  std::string report;
  std::optional<double> alpha;
  std::optional<std::size_t> top_k;
  std::optional<double> percentile;
  std::optional<std::vector<std::size_t>> targets;
  std::string variant = "unit-v";
  std::uint64_t seed = 0;
  // evaluate
  std::string base;
  std::string base_report;
  std::string method;
  std::string prompts;
  std::string corpus;
  std::size_t prompt_count = 200;
  std::size_t corpus_size = 200;
  std::size_t n_tokens = 8;
  // scan-experts
  double threshold = 0.5;

  json to_json() const {
    json j = {{"command", command}, {"seed", seed}};
    auto put = [&](const char* key, const std::string& v) {
      if (!v.empty()) j[key] = v;
    };
    put("checkpoint", checkpoint);
    put("dump", dump);
    put("out", out);
    put("report", report);
    put("base", base);
    put("base_report", base_report);
    put("method", method);
    put("prompts", prompts);
    put("corpus", corpus);
    if (command == "decompose" || command == "score" || command == "shift") j["tensor"] = tensor;
    if (command == "score" || command == "shift") j["variant"] = variant;
    if (alpha) j["alpha"] = *alpha;
    if (top_k) j["top_k"] = *top_k;
    if (percentile) j["percentile"] = *percentile;
    if (targets) j["targets"] = *targets;
    if (command == "evaluate") {
      j["prompt_count"] = prompt_count;
      j["corpus_size"] = corpus_size;
      j["n_tokens"] = n_tokens;
    }
    if (command == "scan-experts") j["threshold"] = threshold;
    return j;
  }
};

std::vector<std::size_t> parse_targets(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    if (item.find_first_not_of("0123456789") != std::string::npos)
      throw UsageError("--targets: '" + item + "' is not a non-negative integer");
    out.push_back(std::stoull(item));
  }
  return out;
}

std::vector<std::size_t> targets_from_json(const json& v) {
  if (v.is_string()) return parse_targets(v.get<std::string>());
  if (v.is_array()) return v.get<std::vector<std::size_t>>();
  throw UsageError("config: targets must be a list or a comma-separated string");
}

std::string hex(const unsigned char* p, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    s += digits[p[i] >> 4];
    s += digits[p[i] & 15];
  }
  return s;
}

json input_record(const std::string& path) { return {{"path", path}, {"sha256", sha256_file(path)}}; }

void emit_json(const json& j, const std::string& path, std::ostream& out) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty())
    out << text;
  else
    write_text_file(path, text);
}

std::string fixed(double v, int digits = 10) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

TensorFile open_container(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  return read_tensor_file(path);
}

InterventionPlan make_plan(const RunConfig& cfg) {
  InterventionPlan plan;
  if (!cfg.alpha) throw UsageError("shift needs --alpha");
  plan.alpha = *cfg.alpha;
  try {
    plan.variant = parse_variant(cfg.variant);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (cfg.top_k)
    plan.target = TopK{*cfg.top_k};
  else if (cfg.percentile)
    plan.target = Percentile{*cfg.percentile};
  else if (cfg.targets)
    plan.target = ExplicitTargets{*cfg.targets};
  else
    throw UsageError("shift needs one of --top-k, --percentile or --targets");
  return plan;
}

// ---- commands ------------------------------------------------------------

int cmd_decompose(const RunConfig& cfg, std::ostream& out) {
  const auto tf = open_container(cfg.checkpoint, "checkpoint");
  const auto w = load_weight_matrix(tf, cfg.tensor);
  const auto f = svd(w.values);
  const double loss = frobenius_loss(w.values, multiply_factors(f));
  const double norm = frobenius_norm(w.values);

  json report = {{"command", "decompose"},
                 {"config", cfg.to_json()},
                 {"inputs", {{"checkpoint", input_record(cfg.checkpoint)}}},
                 {"tensor", {{"name", cfg.tensor}, {"rows", w.rows()}, {"cols", w.cols()},
                             {"dtype", std::string(dtype_name(w.dtype))}}},
                 {"sigma", f.sigma},
                 {"frobenius_loss", loss},
                 {"relative_loss", norm > 0.0 ? loss / norm : 0.0},
                 {"sweeps", f.sweeps},
                 {"orthonormality", {{"u", column_orthonormality_deviation(f.u)},
                                     {"vt", row_orthonormality_deviation(f.vt)}}}};
  if (!cfg.out.empty()) {
    TensorBlob sigma{"sigma", DType::f64, {f.sigma.size()}, encode_values(f.sigma, DType::f64)};
    const std::vector<TensorBlob> blobs = {matrix_blob("u", f.u, DType::f64), std::move(sigma),
                                           matrix_blob("vt", f.vt, DType::f64)};
    write_tensor_file(cfg.out, blobs, {{"source_tensor", cfg.tensor}});
    report["factors"] = cfg.out;
  }
  emit_json(report, cfg.report, out);
  return kExitOk;
}

int cmd_score(const RunConfig& cfg, std::ostream& out) {
  const auto tf = open_container(cfg.checkpoint, "checkpoint");
  const auto dump = open_container(cfg.dump, "dump");
  ScoringVariant variant;
  try {
    variant = parse_variant(cfg.variant);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto w = load_weight_matrix(tf, cfg.tensor);
  const auto ds = load_activation_dataset(dump);
  if (ds.dim() != w.cols())
    throw DataError("dump dimension " + std::to_string(ds.dim()) + " does not match tensor columns " +
                    std::to_string(w.cols()));
  const auto f = svd(w.values);
  const auto scores = delta_scores(f, ds, variant);

  std::vector<std::size_t> ranking(scores.delta.size());
  std::iota(ranking.begin(), ranking.end(), 0);
  std::stable_sort(ranking.begin(), ranking.end(),
                   [&](std::size_t a, std::size_t b) { return scores.delta[a] > scores.delta[b]; });
  json report = {{"command", "score"},
                 {"config", cfg.to_json()},
                 {"inputs", {{"checkpoint", input_record(cfg.checkpoint)}, {"dump", input_record(cfg.dump)}}},
                 {"variant", std::string(variant_name(variant))},
                 {"dataset", {{"size", ds.size()}, {"toxic", ds.toxic_count()}, {"meta", ds.meta}}},
                 {"sigma", f.sigma},
                 {"delta", scores.delta},
                 {"mean_toxic", scores.mean_toxic},
                 {"mean_nontoxic", scores.mean_nontoxic},
                 {"ranking", ranking}};
  emit_json(report, cfg.report, out);
  return kExitOk;
}

int cmd_shift(const RunConfig& cfg, std::ostream& out) {
  const auto plan = make_plan(cfg);
  if (cfg.out.empty()) throw UsageError("shift needs --out");
  const auto tf = open_container(cfg.checkpoint, "checkpoint");
  const auto dump = open_container(cfg.dump, "dump");
  const auto w = load_weight_matrix(tf, cfg.tensor);
  const auto ds = load_activation_dataset(dump);
  if (ds.dim() != w.cols())
    throw DataError("dump dimension " + std::to_string(ds.dim()) + " does not match tensor columns " +
                    std::to_string(w.cols()));

  const auto result = eigenshift(w, ds, plan);
  write_with_replaced_payload(tf, cfg.tensor, encode_values(result.weights.values.values(), w.dtype), cfg.out);

  json report = {{"command", "shift"},
                 {"config", cfg.to_json()},
                 {"inputs", {{"checkpoint", input_record(cfg.checkpoint)}, {"dump", input_record(cfg.dump)}}},
                 {"diagnostics", diagnostics_json(result, plan)},
                 {"output", input_record(cfg.out)}};
  emit_json(report, cfg.report, out);
  return kExitOk;
}

int cmd_scan_experts(const RunConfig& cfg, std::ostream& out) {
  const auto tf = open_container(cfg.dump, "dump");
  const auto in = load_expert_scan_input(tf);
  const auto neurons = neuron_experts_auroc(in.neurons, cfg.threshold);
  const auto survey = auroc_threshold_survey(neurons, kDefaultSurveyThresholds);

  std::vector<LayerExpertReport> layers;
  std::vector<double> expertise;
  for (std::size_t l = 0; l < in.layers.size(); ++l) {
    layers.push_back(layer_expert(in.layers[l], in.neurons.labels, derive_seed(cfg.seed, l)));
    expertise.push_back(layers.back().expertise);
  }
  const auto ranks = layers.size() >= 2 ? normalize_layer_ranks(expertise) : std::vector<double>(layers.size(), 1.0);

  const std::size_t best = neurons.best_by_auroc();
  const std::size_t best_ap = static_cast<std::size_t>(
      std::max_element(neurons.ap.begin(), neurons.ap.end()) - neurons.ap.begin());
  json survey_json = json::array();
  for (std::size_t i = 0; i < survey.size(); ++i)
    survey_json.push_back({{"threshold", kDefaultSurveyThresholds[i]}, {"percent", survey[i]}});
  json layers_json = json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& r = layers[l];
    layers_json.push_back({{"layer_id", l},
                           {"expertise", r.expertise},
                           {"raw_auroc", r.raw_auroc},
                           {"silhouette", r.silhouette},
                           {"precision", r.scores.precision},
                           {"recall", r.scores.recall},
                           {"f1", r.scores.f1},
                           {"degenerate", r.degenerate},
                           {"normalized_rank", ranks[l]}});
  }
  const auto experts = std::count(neurons.is_expert.begin(), neurons.is_expert.end(), true);
  json report = {{"command", "scan-experts"},
                 {"config", cfg.to_json()},
                 {"inputs", {{"dump", input_record(cfg.dump)}}},
                 {"samples", in.neurons.labels.size()},
                 {"neurons", {{"count", neurons.size()},
                              {"pooling", in.neurons.pooling},
                              {"criterion", "auroc"},
                              {"threshold", cfg.threshold},
                              {"experts", experts},
                              {"best_auroc", {{"neuron_id", best}, {"auroc", neurons.auroc[best]},
                                              {"ap", neurons.ap[best]}}},
                              {"best_ap", {{"neuron_id", best_ap}, {"ap", neurons.ap[best_ap]},
                                           {"auroc", neurons.auroc[best_ap]}}},
                              {"survey", survey_json}}},
                 {"layers", layers_json}};

  if (!cfg.out.empty()) {
    fs::create_directories(cfg.out);
    std::string ncsv = "neuron_id,ap,auroc\n";
    for (std::size_t m = 0; m < neurons.size(); ++m)
      ncsv += std::to_string(m) + "," + fixed(neurons.ap[m]) + "," + fixed(neurons.auroc[m]) + "\n";
    std::string lcsv = "layer_id,expertise,silhouette\n";
    for (std::size_t l = 0; l < layers.size(); ++l)
      lcsv += std::to_string(l) + "," + fixed(layers[l].expertise) + "," + fixed(layers[l].silhouette) + "\n";
    write_text_file(fs::path(cfg.out) / "neurons.csv", ncsv);
    write_text_file(fs::path(cfg.out) / "layers.csv", lcsv);
  }
  emit_json(report, cfg.report, out);
  return kExitOk;
}

ToyModelSpec load_toy(const std::string& path, const std::string& tensor) {
  const auto tf = open_container(path, "checkpoint");
  if (!is_toy_checkpoint(tf)) throw DataError(path + " is not a toy-model checkpoint");
  return load_toy_model(tf, tensor);
}

EvalSets eval_sets(const RunConfig& cfg, const ToyModelSpec& spec) {
  EvalSets sets;
  if (!cfg.prompts.empty())
    sets.prompts = read_corpus_jsonl(cfg.prompts).sequences;
  else
    sets.prompts = trigger_prompts(spec, cfg.prompt_count, derive_seed(cfg.seed, 1));
  if (!cfg.corpus.empty())
    sets.corpus = read_corpus_jsonl(cfg.corpus);
  else
    sets.corpus = neutral_corpus(spec, cfg.corpus_size, 12, derive_seed(cfg.seed, 2));
  if (sets.prompts.empty()) throw DataError("evaluation prompt set is empty");
  if (sets.corpus.sequences.empty()) throw DataError("evaluation corpus is empty");
  sets.gen.n_tokens = cfg.n_tokens;
  sets.gen.seed = derive_seed(cfg.seed, 3);
  return sets;
}

ActivationHook baseline_hook(const RunConfig& cfg, const ToyModelSpec& spec) {
  const auto& m = cfg.method;
  if (m == "det-0") return ActivationHook::zero(spec.expert_neurons);
  if (m == "damp") return ActivationHook::damp(spec.expert_neurons, cfg.alpha.value_or(0.5));
  if (m == "aura" || m == "set-mean-max") {
    const auto scan = expert_scan_input(spec, sample_corpus(spec, 400, 12, 0.5, derive_seed(cfg.seed, 4)));
    if (m == "set-mean-max")
      return ActivationHook::mean_max(spec.expert_neurons, mean_max_replacements(scan.neurons, spec.expert_neurons));
    return ActivationHook::from_aurocs(neuron_experts_auroc(scan.neurons, 0.5).auroc);
  }
  throw UsageError("unknown --method '" + m + "' (det-0, damp, aura, set-mean-max)");
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  json inputs = json::object();
  EvalReport report;
  if (!cfg.method.empty()) {
    const auto spec = load_toy(cfg.checkpoint, "lm_head");
    inputs["checkpoint"] = input_record(cfg.checkpoint);
    report = evaluate_intervention(spec, baseline_hook(cfg, spec), eval_sets(cfg, spec));
  } else {
    if (cfg.base.empty() && cfg.base_report.empty())
      throw UsageError("evaluate needs --base (checkpoint) or --base-report to compute deltas");
    const auto spec = load_toy(cfg.checkpoint, cfg.tensor);
    inputs["checkpoint"] = input_record(cfg.checkpoint);
    const auto sets = eval_sets(cfg, spec);
    EvalMeasure base;
    if (!cfg.base.empty()) {
      base = measure(load_toy(cfg.base, cfg.tensor), sets);
      inputs["base"] = input_record(cfg.base);
    } else {
      std::ifstream in(cfg.base_report);
      if (!in) throw IoError("cannot open: " + cfg.base_report);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw DataError("base report is not valid JSON: " + std::string(e.what()));
      }
      base = eval_report_from_json(j.contains("evaluation") ? j["evaluation"] : j).base;
      inputs["base_report"] = input_record(cfg.base_report);
    }
    report = compare(base, measure(spec, sets), "toy-" + std::to_string(spec.seed), "eigenshift",
                     std::string(kHeadSite));
  }
  if (!cfg.prompts.empty()) inputs["prompts"] = input_record(cfg.prompts);
  if (!cfg.corpus.empty()) inputs["corpus"] = input_record(cfg.corpus);

  if (!cfg.out.empty()) write_text_file(cfg.out, eval_csv_header() + "\n" + eval_csv_row(report) + "\n");
  emit_json({{"command", "evaluate"}, {"config", cfg.to_json()}, {"inputs", inputs}, {"evaluation", to_json(report)}},
            cfg.report, out);
  return kExitOk;
}

int cmd_tph(double t, double p, std::ostream& out) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f\n", tph(t, p));
  out << buf;
  return kExitOk;
}

int cmd_toy(const RunConfig& cfg, std::ostream& out) {
  if (cfg.out.empty()) throw UsageError("toy needs --out (directory)");
  const fs::path dir(cfg.out);
  fs::create_directories(dir);
  const auto spec = build_toy_model(cfg.seed);
  save_toy_model(dir / "model.safetensors", spec);
  const auto corpus = sample_corpus(spec, 400, 12, 0.5, derive_seed(cfg.seed, 10));
  write_corpus_jsonl(dir / "corpus.jsonl", corpus);
  write_activation_dataset(dir / "dump.safetensors", dump_activations(spec, corpus));
  write_expert_scan_input(dir / "scan.safetensors",
                          expert_scan_input(spec, sample_corpus(spec, 400, 12, 0.5, derive_seed(cfg.seed, 11))));
  write_corpus_jsonl(dir / "prompts.jsonl", Corpus{trigger_prompts(spec, 200, derive_seed(cfg.seed, 1))});
  write_corpus_jsonl(dir / "neutral.jsonl", neutral_corpus(spec, 200, 12, derive_seed(cfg.seed, 2)));
  json report = {{"command", "toy"},
                 {"config", cfg.to_json()},
                 {"planted_index", spec.planted_index},
                 {"toxic_tokens", spec.toxic_tokens},
                 {"trigger_tokens", spec.trigger_tokens},
                 {"expert_neurons", spec.expert_neurons},
                 {"files", {"model.safetensors", "dump.safetensors", "scan.safetensors", "corpus.jsonl",
                            "prompts.jsonl", "neutral.jsonl"}}};
  emit_json(report, cfg.report, out);
  return kExitOk;
}

// ---- argument handling ----------------------------------------------------

struct Options {
  std::map<std::string, CLI::Option*> by_key;  // config key -> option
  std::string config_path;
  std::string targets_text;
  std::size_t top_k = 0;
  double percentile = 0.0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
};

bool given(const Options& o, const std::string& key) {
  auto it = o.by_key.find(key);
  return it != o.by_key.end() && it->second->count() > 0;
}

void add_common(CLI::App* sub, RunConfig& cfg, Options& o) {
  o.by_key["seed"] = sub->add_option("--seed", o.seed, "RNG seed (falls back to ESHIFT_SEED, then 0)");
  o.by_key["report"] = sub->add_option("--report", cfg.report, "Write the JSON report here instead of stdout");
  sub->add_option("--config", o.config_path, "JSON config; command-line flags take precedence");
}

void add_plan(CLI::App* sub, RunConfig& cfg, Options& o) {
  o.by_key["alpha"] = sub->add_option("--alpha", o.alpha, "Damping coefficient");
  o.by_key["top_k"] = sub->add_option("--top-k", o.top_k, "Damp the k highest-delta directions");
  o.by_key["percentile"] = sub->add_option("--percentile", o.percentile, "Damp directions above this percentile");
  o.by_key["targets"] = sub->add_option("--targets", o.targets_text, "Comma-separated direction indices");
  o.by_key["variant"] = sub->add_option("--variant", cfg.variant, "Scoring variant")
                            ->check(CLI::IsMember({"unit-v", "sigma-scaled"}));
}

// Applies config-file values for every key whose flag was not given, then
// resolves seed and target selectors.
void resolve(RunConfig& cfg, Options& o) {
  json file = json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw IoError("cannot open config: " + o.config_path);
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError("config is not valid JSON: " + std::string(e.what()));
    }
    if (!file.is_object()) throw UsageError("config must be a JSON object");
  }

  auto from_file = [&](const std::string& key) -> const json* {
    if (given(o, key) || !file.contains(key)) return nullptr;
    if (!o.by_key.count(key)) return nullptr;
    return &file[key];
  };
  for (const auto& [key, value] : file.items())
    if (!o.by_key.count(key)) throw UsageError("config key '" + key + "' does not apply to " + cfg.command);

  try {
    auto str = [&](const char* key, std::string& dst) {
      if (const json* v = from_file(key)) dst = v->get<std::string>();
    };
    str("checkpoint", cfg.checkpoint);
    str("tensor", cfg.tensor);
    str("dump", cfg.dump);
    str("out", cfg.out);
    str("report", cfg.report);
    str("variant", cfg.variant);
    str("base", cfg.base);
    str("base_report", cfg.base_report);
    str("method", cfg.method);
    str("prompts", cfg.prompts);
    str("corpus", cfg.corpus);
    if (const json* v = from_file("threshold")) cfg.threshold = v->get<double>();
    if (const json* v = from_file("prompt_count")) cfg.prompt_count = v->get<std::size_t>();
    if (const json* v = from_file("corpus_size")) cfg.corpus_size = v->get<std::size_t>();
    if (const json* v = from_file("n_tokens")) cfg.n_tokens = v->get<std::size_t>();

    if (given(o, "alpha"))
      cfg.alpha = o.alpha;
    else if (const json* v = from_file("alpha"))
      cfg.alpha = v->get<double>();

    if (given(o, "seed")) {
      cfg.seed = o.seed;
    } else if (const json* v = from_file("seed")) {
      cfg.seed = v->get<std::uint64_t>();
    } else if (const char* env = std::getenv("ESHIFT_SEED"); env && *env) {
      char* end = nullptr;
      cfg.seed = std::strtoull(env, &end, 10);
      if (*end != '\0') throw UsageError(std::string("ESHIFT_SEED is not an integer: ") + env);
    }

    if (cfg.variant != "unit-v" && cfg.variant != "sigma-scaled")
      throw UsageError("unknown variant '" + cfg.variant + "'");

    // Target selectors: flags replace any selector from the config file.
    const bool flag_k = given(o, "top_k"), flag_p = given(o, "percentile"), flag_t = given(o, "targets");
    const int flags = int(flag_k) + int(flag_p) + int(flag_t);
    if (flags > 1) throw UsageError("--top-k, --percentile and --targets are mutually exclusive");
    if (flags == 1) {
      if (flag_k) cfg.top_k = o.top_k;
      if (flag_p) cfg.percentile = o.percentile;
      if (flag_t) cfg.targets = parse_targets(o.targets_text);
    } else if (o.by_key.count("top_k")) {
      const int in_file = int(file.contains("top_k")) + int(file.contains("percentile")) + int(file.contains("targets"));
      if (in_file > 1) throw UsageError("config sets more than one of top_k, percentile, targets");
      if (file.contains("top_k")) cfg.top_k = file["top_k"].get<std::size_t>();
      if (file.contains("percentile")) cfg.percentile = file["percentile"].get<double>();
      if (file.contains("targets")) cfg.targets = targets_from_json(file["targets"]);
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("config value has the wrong type: ") + e.what());
  }
}

}  // namespace

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: digest init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  return hex(digest, len);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spectral toxicity intervention on language-model output heads"};
  app.require_subcommand(1);
  RunConfig cfg;
  double tph_t = 0.0, tph_p = 0.0;

  auto* decompose = app.add_subcommand("decompose", "SVD of a head tensor with reconstruction loss");
  auto* score = app.add_subcommand("score", "Per-direction toxic/non-toxic delta scores");
  auto* shift = app.add_subcommand("shift", "Damp toxicity-aligned directions and write a new checkpoint");
  auto* scan = app.add_subcommand("scan-experts", "Neuron- and layer-level expert scan");
  auto* evaluate = app.add_subcommand("evaluate", "Toxicity, perplexity and TPH on a toy-model checkpoint");
  auto* tph_cmd = app.add_subcommand("tph", "Print the TPH score for fractional T and P");
  auto* toy = app.add_subcommand("toy", "Build a planted toy model with corpora and dumps");

  // Each subcommand registers its own options; only the parsed one is used.
  std::map<CLI::App*, Options> per_sub;
  auto checkpoint_opts = [&](CLI::App* sub, Options& so) {
    so.by_key["checkpoint"] = sub->add_option("--checkpoint", cfg.checkpoint, "Input safetensors checkpoint");
    so.by_key["tensor"] = sub->add_option("--tensor", cfg.tensor, "Head tensor name")->capture_default_str();
  };
  {
    auto& so = per_sub[decompose];
    checkpoint_opts(decompose, so);
    so.by_key["out"] = decompose->add_option("--out", cfg.out, "Write U, sigma, Vt here");
    add_common(decompose, cfg, so);
  }
  {
    auto& so = per_sub[score];
    checkpoint_opts(score, so);
    so.by_key["dump"] = score->add_option("--dump", cfg.dump, "Labelled activation dump");
    so.by_key["variant"] = score->add_option("--variant", cfg.variant, "Scoring variant")
                               ->check(CLI::IsMember({"unit-v", "sigma-scaled"}));
    add_common(score, cfg, so);
  }
  {
    auto& so = per_sub[shift];
    checkpoint_opts(shift, so);
    so.by_key["dump"] = shift->add_option("--dump", cfg.dump, "Labelled activation dump");
    so.by_key["out"] = shift->add_option("--out", cfg.out, "Output checkpoint");
    add_plan(shift, cfg, so);
    add_common(shift, cfg, so);
  }
  {
    auto& so = per_sub[scan];
    so.by_key["dump"] = scan->add_option("--dump", cfg.dump, "Expert scan container");
    so.by_key["out"] = scan->add_option("--out", cfg.out, "Directory for neurons.csv and layers.csv");
    so.by_key["threshold"] = scan->add_option("--threshold", cfg.threshold, "AUROC expert threshold");
    add_common(scan, cfg, so);
  }
  {
    auto& so = per_sub[evaluate];
    checkpoint_opts(evaluate, so);
    so.by_key["base"] = evaluate->add_option("--base", cfg.base, "Unmodified toy checkpoint");
    so.by_key["base_report"] = evaluate->add_option("--base-report", cfg.base_report, "Earlier evaluate report");
    so.by_key["method"] = evaluate->add_option("--method", cfg.method, "Activation baseline on the planted experts")
                              ->check(CLI::IsMember({"det-0", "damp", "aura", "set-mean-max"}));
    so.by_key["alpha"] = evaluate->add_option("--alpha", so.alpha, "Damping factor for --method damp");
    so.by_key["prompts"] = evaluate->add_option("--prompts", cfg.prompts, "Prompt set (JSON lines)");
    so.by_key["corpus"] = evaluate->add_option("--corpus", cfg.corpus, "Perplexity corpus (JSON lines)");
    so.by_key["prompt_count"] = evaluate->add_option("--prompt-count", cfg.prompt_count, "Synthesised prompts");
    so.by_key["corpus_size"] = evaluate->add_option("--corpus-size", cfg.corpus_size, "Synthesised sequences");
    so.by_key["n_tokens"] = evaluate->add_option("--n-tokens", cfg.n_tokens, "Tokens generated per prompt");
    so.by_key["out"] = evaluate->add_option("--out", cfg.out, "CSV row in the comparison-table layout");
    add_common(evaluate, cfg, so);
  }
  {
    tph_cmd->add_option("T", tph_t, "Fractional toxicity reduction")->required();
    tph_cmd->add_option("P", tph_p, "Fractional perplexity change")->required();
  }
  {
    auto& so = per_sub[toy];
    so.by_key["out"] = toy->add_option("--out", cfg.out, "Output directory");
    add_common(toy, cfg, so);
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  cfg.command = sub->get_name();
  try {
    if (sub == tph_cmd) return cmd_tph(tph_t, tph_p, out);
    Options& so = per_sub[sub];
    resolve(cfg, so);
    if (sub == decompose) return cmd_decompose(cfg, out);
    if (sub == score) return cmd_score(cfg, out);
    if (sub == shift) return cmd_shift(cfg, out);
    if (sub == scan) return cmd_scan_experts(cfg, out);
    if (sub == evaluate) return cmd_evaluate(cfg, out);
    return cmd_toy(cfg, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NotFoundError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {  // FormatError, DataError, ConvergenceError
    err << "invalid data: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace eshift::cli

#include "eshift/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "eshift/error.hpp"
#include "eshift/kernels.hpp"
#include "eshift/metrics.hpp"
#include "eshift/rng.hpp"

namespace eshift {
namespace {

using json = nlohmann::json;

constexpr double kFluencySigma = 40.0;
constexpr double kLeadSigma = 24.0;
constexpr double kSigmaDecay = 0.85;
constexpr double kExpertReadToxic = 3.0;
constexpr double kExpertReadFluency = 2.0;
constexpr double kExpertWriteToxic = 0.3;
constexpr double kExpertWriteGeneric = 1.0;
constexpr double kGenericWrite = 0.5;
// Trigger embeddings keep only a trace of the random texture so that their
// pull on the hidden state is dominated by v_{j*}.
constexpr double kTriggerTexture = 0.2;
constexpr int kMaxTuningRounds = 16;

// Orthonormalises the rows of `m` in place (two passes of modified
// Gram-Schmidt). Rows must be linearly independent.
void orthonormalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) {
        const auto q = m.row(j);
        const double p = kernels::dot(q, r);
        for (std::size_t k = 0; k < r.size(); ++k) r[k] -= p * q[k];
      }
    const double n = std::sqrt(kernels::dot(r, r));
    for (double& v : r) v /= n;
  }
}

void remove_component(std::span<double> x, std::span<const double> unit) {
  const double p = kernels::dot(x, unit);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] -= p * unit[k];
}

struct Construction {
  Matrix basis;  // rows v_0..v_{d-1}
  Matrix u_cols;  // rows u_0..u_{d-1} (columns of U)
  std::vector<double> sigma;
};

// Rank of the best toxic logit among all logits (0 = top).
std::size_t best_toxic_rank(const ToyModelSpec& spec, const std::vector<double>& logits) {
  double best = -INFINITY;
  for (Token t : spec.toxic_tokens) best = std::max(best, logits[t]);
  std::size_t above = 0;
  for (std::size_t t = 0; t < logits.size(); ++t)
    if (!spec.is_toxic(static_cast<Token>(t)) && logits[t] > best) ++above;
  return above;
}

bool meets_guarantees(const ToyModelSpec& spec) {
  if (spec.toxic_tokens.empty()) return true;
  const std::size_t neutral_total = spec.vocab - spec.toxic_tokens.size();
  const std::size_t outside = std::min<std::size_t>(10, neutral_total);
  for (Token t = 0; t < spec.vocab; ++t) {
    const Token ctx[2] = {kBos, t};
    const auto fp = forward(spec, std::span<const Token>(ctx, t == kBos ? 1 : 2));
    const std::size_t rank = best_toxic_rank(spec, fp.logits);
    if (spec.is_trigger(t)) {
      if (rank >= 3) return false;
    } else if (rank < outside) {
      return false;
    }
  }
  return true;
}

ToyModelSpec assemble(std::uint64_t seed, const ToyModelParams& p) {
  Rng rng(seed);
  ToyModelSpec spec;
  spec.vocab = p.vocab;
  spec.hidden = p.hidden;
  spec.mlp_width = p.mlp_width;
  spec.seed = seed;
  const std::size_t V = p.vocab, d = p.hidden, m = p.mlp_width;

  std::vector<Token> ids(V - 1);
  std::iota(ids.begin(), ids.end(), Token{1});
  rng.shuffle(ids);
  spec.toxic_tokens.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(p.toxic_count));
  spec.trigger_tokens.assign(ids.begin() + static_cast<std::ptrdiff_t>(p.toxic_count),
                             ids.begin() + static_cast<std::ptrdiff_t>(p.toxic_count + p.trigger_count));
  std::sort(spec.toxic_tokens.begin(), spec.toxic_tokens.end());
  std::sort(spec.trigger_tokens.begin(), spec.trigger_tokens.end());

  spec.planted_index = 1 + static_cast<std::size_t>(rng.below(3));
  const std::size_t js = spec.planted_index;

  // Right singular directions.
  Matrix basis(d, d);
  for (double& v : basis.data()) v = rng.normal();
  orthonormalize_rows(basis);

  // Left singular directions, stored as rows. u_0 spreads evenly over the
  // non-toxic tokens, u_{j*} over the toxic ones; the rest are random on
  // the non-toxic tokens.
  Matrix u(d, V);
  const double nontoxic = static_cast<double>(V - spec.toxic_tokens.size());
  for (Token t = 0; t < V; ++t) {
    const bool toxic = spec.is_toxic(t);
    u(0, t) = toxic ? 0.0 : 1.0 / std::sqrt(nontoxic);
    if (!spec.toxic_tokens.empty())
      u(js, t) = toxic ? 1.0 / std::sqrt(static_cast<double>(spec.toxic_tokens.size())) : 0.0;
  }
  for (std::size_t i = 1; i < d; ++i) {
    if (i == js && !spec.toxic_tokens.empty()) continue;
    for (Token t = 0; t < V; ++t) u(i, t) = spec.is_toxic(t) ? 0.0 : rng.normal();
  }
  orthonormalize_rows(u);
  for (std::size_t i = 0; i < d; ++i) {
    auto r = u.row(i);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < r.size(); ++k)
      if (std::abs(r[k]) > std::abs(r[arg])) arg = k;
    if (r[arg] < 0.0) {
      for (double& v : r) v = -v;
      for (double& v : basis.row(i)) v = -v;
    }
  }

  std::vector<double> sigma(d);
  sigma[0] = kFluencySigma;
  for (std::size_t i = 1; i < d; ++i) sigma[i] = kLeadSigma * std::pow(kSigmaDecay, static_cast<double>(i - 1));

  Matrix head(V, d);
  for (Token t = 0; t < V; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double coef = sigma[i] * u(i, t);
      if (coef == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) head(t, c) += coef * basis(i, c);
    }
  spec.head = WeightMatrix{std::move(head), DType::f64};

  const auto v0 = basis.row(0);
  const auto vj = basis.row(js);

  spec.embedding = Matrix(V, d);
  for (Token t = 0; t < V; ++t) {
    auto e = spec.embedding.row(t);
    const double planted = spec.is_trigger(t) ? p.trigger_strength : -p.neutral_offset;
    for (std::size_t i = 0; i < d; ++i) {
      double coord;
      if (i == 0)
        coord = p.fluency;
      else if (i == js)
        coord = planted;
      else
        coord = (spec.is_trigger(t) ? kTriggerTexture : 1.0) * p.texture * rng.normal();
      const auto v = basis.row(i);
      for (std::size_t c = 0; c < d; ++c) e[c] += coord * v[c];
    }
  }

  std::vector<std::size_t> neurons(m);
  std::iota(neurons.begin(), neurons.end(), 0);
  rng.shuffle(neurons);
  spec.expert_neurons.assign(neurons.begin(), neurons.begin() + static_cast<std::ptrdiff_t>(p.expert_count));
  std::sort(spec.expert_neurons.begin(), spec.expert_neurons.end());
  std::vector<bool> expert(m, false);
  for (auto n : spec.expert_neurons) expert[n] = true;

  spec.w1 = Matrix(m, d);
  Matrix w2t(m, d);  // column n of W2 as row n
  const double read_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double write_scale = 1.0 / std::sqrt(static_cast<double>(m));
  for (std::size_t n = 0; n < m; ++n) {
    auto r = spec.w1.row(n);
    auto w = w2t.row(n);
    for (double& v : w) v = rng.normal();
    remove_component(w, vj);
    if (expert[n]) {
      for (std::size_t c = 0; c < d; ++c) {
        r[c] = kExpertReadToxic * vj[c] + kExpertReadFluency * v0[c];
        w[c] = kExpertWriteGeneric * write_scale * w[c] + kExpertWriteToxic * vj[c];
      }
    } else {
      for (double& v : r) v = read_scale * rng.normal();
      for (double& v : w) v *= kGenericWrite * write_scale;
    }
  }
  spec.w2 = w2t.transposed();
  return spec;
}

}  // namespace

bool ToyModelSpec::is_toxic(Token t) const noexcept {
  return std::binary_search(toxic_tokens.begin(), toxic_tokens.end(), t);
}

bool ToyModelSpec::is_trigger(Token t) const noexcept {
  return std::binary_search(trigger_tokens.begin(), trigger_tokens.end(), t);
}

ToyModelSpec build_toy_model(std::uint64_t seed, const ToyModelParams& params) {
  if (params.hidden < 4) throw std::invalid_argument("toy model: hidden size must be at least 4");
  if (params.vocab <= params.toxic_count + params.trigger_count + 1)
    throw std::invalid_argument("toy model: vocabulary too small for the token sets");
  if (params.expert_count > params.mlp_width)
    throw std::invalid_argument("toy model: more experts than MLP neurons");
  if (params.mlp_width == 0) throw std::invalid_argument("toy model: MLP width must be positive");

  ToyModelParams p = params;
  for (int round = 0; round < kMaxTuningRounds; ++round) {
    ToyModelSpec spec = assemble(seed, p);
    if (meets_guarantees(spec)) return spec;
    p.trigger_strength *= 1.25;
    p.fluency *= 1.1;
  }
  throw DataError("toy model: construction could not be tuned for seed " + std::to_string(seed));
}

ToyModelSpec with_head(const ToyModelSpec& spec, const WeightMatrix& head) {
  if (head.rows() != spec.vocab || head.cols() != spec.hidden)
    throw std::invalid_argument("with_head: head shape does not match the model");
  ToyModelSpec out = spec;
  out.head = head;
  return out;
}

double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

ForwardPass forward(const ToyModelSpec& spec, std::span<const Token> context, const MlpHook& hook) {
  const Token bos_only[1] = {kBos};
  if (context.empty()) context = bos_only;
  const std::size_t d = spec.hidden;
  ForwardPass fp;
  fp.pooled.assign(d, 0.0);
  for (Token t : context) {
    if (t >= spec.vocab) throw std::out_of_range("token " + std::to_string(t) + " out of range");
    const auto e = spec.embedding.row(t);
    for (std::size_t c = 0; c < d; ++c) fp.pooled[c] += e[c];
  }
  for (double& v : fp.pooled) v /= static_cast<double>(context.size());

  fp.mlp.resize(spec.mlp_width);
  for (std::size_t n = 0; n < spec.mlp_width; ++n) fp.mlp[n] = gelu(kernels::dot(spec.w1.row(n), fp.pooled));
  if (hook) hook(fp.mlp);

  fp.hidden = fp.pooled;
  for (std::size_t c = 0; c < d; ++c) fp.hidden[c] += kernels::dot(spec.w2.row(c), fp.mlp);

  fp.logits.resize(spec.vocab);
  for (std::size_t t = 0; t < spec.vocab; ++t) fp.logits[t] = kernels::dot(spec.head.values.row(t), fp.hidden);
  return fp;
}

TokenSeq generate(const ToyModelSpec& spec, std::span<const Token> prompt, const GenParams& gen,
                  const MlpHook& hook) {
  if (gen.n_tokens == 0) throw std::invalid_argument("generate: n_tokens must be at least 1");
  if (!gen.greedy && !(gen.temperature > 0.0)) throw std::invalid_argument("generate: temperature must be positive");
  Rng rng(gen.seed);
  TokenSeq context(prompt.begin(), prompt.end());
  if (context.empty()) context.push_back(kBos);
  TokenSeq out;
  out.reserve(gen.n_tokens);
  std::vector<double> scaled(spec.vocab);
  for (std::size_t step = 0; step < gen.n_tokens; ++step) {
    const auto fp = forward(spec, context, hook);
    Token next = 0;
    if (gen.greedy) {
      next = static_cast<Token>(std::max_element(fp.logits.begin(), fp.logits.end()) - fp.logits.begin());
    } else {
      for (std::size_t t = 0; t < spec.vocab; ++t) scaled[t] = fp.logits[t] / gen.temperature;
      const double lse = log_sum_exp(scaled);
      const double u = rng.uniform();
      double acc = 0.0;
      next = static_cast<Token>(spec.vocab - 1);
      for (std::size_t t = 0; t < spec.vocab; ++t) {
        acc += std::exp(scaled[t] - lse);
        if (u < acc) {
          next = static_cast<Token>(t);
          break;
        }
      }
    }
    out.push_back(next);
    context.push_back(next);
  }
  return out;
}

namespace {

struct Position {
  std::size_t sequence;
  std::size_t length;  // context = sequence[0, length)
  bool toxic;
};

std::vector<Position> dump_positions(const ToyModelSpec& spec, const Corpus& corpus) {
  std::vector<Position> toxic, clean;
  for (std::size_t s = 0; s < corpus.sequences.size(); ++s) {
    const auto& seq = corpus.sequences[s];
    for (std::size_t p = 1; p < seq.size(); ++p) {
      if (spec.is_toxic(seq[p]))
        toxic.push_back({s, p, true});
      else
        clean.push_back({s, p, false});
    }
  }
  if (toxic.empty()) throw DataError("no positive samples: corpus has no toxic successor positions");
  Rng rng(derive_seed(spec.seed, 0xd0));
  rng.shuffle(clean);
  clean.resize(std::min(clean.size(), toxic.size()));
  std::vector<Position> all = std::move(toxic);
  all.insert(all.end(), clean.begin(), clean.end());
  std::sort(all.begin(), all.end(), [](const Position& a, const Position& b) {
    return a.sequence != b.sequence ? a.sequence < b.sequence : a.length < b.length;
  });
  return all;
}

std::vector<ForwardPass> run_positions(const ToyModelSpec& spec, const Corpus& corpus,
                                       const std::vector<Position>& positions) {
  std::vector<ForwardPass> out(positions.size());
  const auto count = static_cast<std::ptrdiff_t>(positions.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto& p = positions[static_cast<std::size_t>(i)];
    const auto& seq = corpus.sequences[p.sequence];
    out[static_cast<std::size_t>(i)] = forward(spec, std::span<const Token>(seq.data(), p.length));
  }
  return out;
}

}  // namespace

ActivationDataset dump_activations(const ToyModelSpec& spec, const Corpus& corpus) {
  if (corpus.sequences.empty()) throw DataError("dump_activations: empty corpus");
  const auto positions = dump_positions(spec, corpus);
  const auto passes = run_positions(spec, corpus, positions);
  ActivationDataset ds;
  ds.hidden_states = Matrix(positions.size(), spec.hidden);
  ds.labels.resize(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::copy(passes[i].hidden.begin(), passes[i].hidden.end(), ds.hidden_states.row(i).begin());
    ds.labels[i] = positions[i].toxic ? 1 : 0;
  }
  ds.meta = {{"model_id", "toy-" + std::to_string(spec.seed)},
             {"layer_id", "final"},
             {"extraction_position", "preceding-token"},
             {"label_source", "token-lexicon"},
             {"positives", ds.toxic_count()},
             {"negatives", ds.nontoxic_count()}};
  return ds;
}

LayerDump dump_layers(const ToyModelSpec& spec, const Corpus& corpus) {
  if (corpus.sequences.empty()) throw DataError("dump_layers: empty corpus");
  const auto positions = dump_positions(spec, corpus);
  const auto passes = run_positions(spec, corpus, positions);
  LayerDump out;
  out.layers.assign(2, Matrix(positions.size(), spec.hidden));
  out.mlp_acts = Matrix(positions.size(), spec.mlp_width);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::copy(passes[i].pooled.begin(), passes[i].pooled.end(), out.layers[0].row(i).begin());
    std::copy(passes[i].hidden.begin(), passes[i].hidden.end(), out.layers[1].row(i).begin());
    std::copy(passes[i].mlp.begin(), passes[i].mlp.end(), out.mlp_acts.row(i).begin());
  }
  return out;
}

double toxicity_rate(const ToyModelSpec& spec, std::span<const TokenSeq> prompts, const GenParams& gen,
                     const MlpHook& hook) {
  if (prompts.empty()) throw std::invalid_argument("toxicity_rate: no prompts");
  std::vector<std::uint8_t> hit(prompts.size(), 0);
  const auto count = static_cast<std::ptrdiff_t>(prompts.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    GenParams g = gen;
    g.seed = derive_seed(gen.seed, idx);
    const auto cont = generate(spec, prompts[idx], g, hook);
    hit[idx] = std::any_of(cont.begin(), cont.end(), [&](Token t) { return spec.is_toxic(t); }) ? 1 : 0;
  }
  const auto toxic = std::count(hit.begin(), hit.end(), std::uint8_t{1});
  return static_cast<double>(toxic) / static_cast<double>(prompts.size());
}

double perplexity(const ToyModelSpec& spec, const Corpus& corpus, const MlpHook& hook) {
  if (corpus.sequences.empty()) throw std::invalid_argument("perplexity: empty corpus");
  std::vector<double> nll(corpus.sequences.size(), 0.0);
  std::vector<std::size_t> counts(corpus.sequences.size(), 0);
  const auto count = static_cast<std::ptrdiff_t>(corpus.sequences.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t s = 0; s < count; ++s) {
    const auto& seq = corpus.sequences[static_cast<std::size_t>(s)];
    double total = 0.0;
    for (std::size_t p = 1; p < seq.size(); ++p) {
      const auto fp = forward(spec, std::span<const Token>(seq.data(), p), hook);
      total += log_sum_exp(fp.logits) - fp.logits[seq[p]];
    }
    nll[static_cast<std::size_t>(s)] = total;
    counts[static_cast<std::size_t>(s)] = seq.size() > 1 ? seq.size() - 1 : 0;
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < nll.size(); ++s) {
    sum += nll[s];
    n += counts[s];
  }
  if (n == 0) throw std::invalid_argument("perplexity: corpus has no predicted positions");
  return std::exp(sum / static_cast<double>(n));
}

PooledActivations pooled_mlp_activations(const ToyModelSpec& spec, const Corpus& corpus) {
  PooledActivations out;
  out.pooled = Matrix(corpus.sequences.size(), spec.mlp_width, -INFINITY);
  out.labels.resize(corpus.sequences.size());
  const auto count = static_cast<std::ptrdiff_t>(corpus.sequences.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t s = 0; s < count; ++s) {
    const auto idx = static_cast<std::size_t>(s);
    const auto& seq = corpus.sequences[idx];
    auto row = out.pooled.row(idx);
    for (std::size_t p = 1; p <= seq.size(); ++p) {
      const auto fp = forward(spec, std::span<const Token>(seq.data(), p));
      for (std::size_t n = 0; n < row.size(); ++n) row[n] = std::max(row[n], fp.mlp[n]);
    }
    out.labels[idx] = std::any_of(seq.begin(), seq.end(), [&](Token t) { return spec.is_toxic(t); }) ? 1 : 0;
  }
  return out;
}

ExpertScanInput expert_scan_input(const ToyModelSpec& spec, const Corpus& corpus) {
  auto pooled = pooled_mlp_activations(spec, corpus);
  ExpertScanInput in;
  in.neurons.pooled = std::move(pooled.pooled);
  in.neurons.labels = std::move(pooled.labels);
  in.layers.assign(2, Matrix(corpus.sequences.size(), spec.hidden));
  for (std::size_t s = 0; s < corpus.sequences.size(); ++s) {
    const auto fp = forward(spec, corpus.sequences[s]);
    std::copy(fp.pooled.begin(), fp.pooled.end(), in.layers[0].row(s).begin());
    std::copy(fp.hidden.begin(), fp.hidden.end(), in.layers[1].row(s).begin());
  }
  return in;
}

namespace {

std::vector<Token> neutral_tokens(const ToyModelSpec& spec) {
  std::vector<Token> out;
  for (Token t = 1; t < spec.vocab; ++t)
    if (!spec.is_toxic(t) && !spec.is_trigger(t)) out.push_back(t);
  return out;
}

}  // namespace

std::vector<TokenSeq> trigger_prompts(const ToyModelSpec& spec, std::size_t count, std::uint64_t seed) {
  if (spec.trigger_tokens.empty()) throw std::invalid_argument("trigger_prompts: model has no trigger tokens");
  const auto neutral = neutral_tokens(spec);
  Rng rng(seed);
  std::vector<TokenSeq> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    TokenSeq p{kBos};
    if (rng.below(2) == 1 && !neutral.empty()) p.push_back(neutral[rng.below(neutral.size())]);
    p.push_back(spec.trigger_tokens[rng.below(spec.trigger_tokens.size())]);
    out.push_back(std::move(p));
  }
  return out;
}

Corpus sample_corpus(const ToyModelSpec& spec, std::size_t count, std::size_t length, double trigger_fraction,
                     std::uint64_t seed) {
  const auto neutral = neutral_tokens(spec);
  if (neutral.empty()) throw std::invalid_argument("sample_corpus: no neutral tokens");
  Corpus c;
  c.sequences.resize(count);
  std::vector<TokenSeq> prompts(count);
  Rng rng(seed);
  for (auto& p : prompts) {
    p.push_back(kBos);
    const auto lead = rng.below(3);
    for (std::uint64_t i = 0; i < lead; ++i) p.push_back(neutral[rng.below(neutral.size())]);
    if (!spec.trigger_tokens.empty() && rng.uniform() < trigger_fraction)
      p.push_back(spec.trigger_tokens[rng.below(spec.trigger_tokens.size())]);
  }
  const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    TokenSeq seq = prompts[idx];
    if (seq.size() < length) {
      GenParams g{length - seq.size(), 1.0, false, derive_seed(seed, idx + 1)};
      const auto cont = generate(spec, seq, g);
      seq.insert(seq.end(), cont.begin(), cont.end());
    }
    c.sequences[idx] = std::move(seq);
  }
  return c;
}

Corpus neutral_corpus(const ToyModelSpec& spec, std::size_t count, std::size_t length, std::uint64_t seed) {
  Corpus out;
  for (std::uint64_t batch = 0; out.sequences.size() < count; ++batch) {
    if (batch == 64) throw DataError("neutral_corpus: model rarely produces neutral sequences");
    Corpus raw = sample_corpus(spec, count, length, 0.0, batch == 0 ? seed : derive_seed(seed, batch));
    for (auto& seq : raw.sequences) {
      if (out.sequences.size() == count) break;
      if (std::none_of(seq.begin(), seq.end(), [&](Token t) { return spec.is_toxic(t) || spec.is_trigger(t); }))
        out.sequences.push_back(std::move(seq));
    }
  }
  return out;
}

ActivationDataset planted_dataset(const ToyModelSpec& spec, std::size_t per_class, double noise,
                                  std::uint64_t seed) {
  if (spec.trigger_tokens.empty()) throw std::invalid_argument("planted_dataset: model has no trigger tokens");
  const auto neutral = neutral_tokens(spec);
  Rng rng(seed);
  ActivationDataset ds;
  ds.hidden_states = Matrix(2 * per_class, spec.hidden);
  ds.labels.resize(2 * per_class);
  for (std::size_t i = 0; i < per_class; ++i) {
    TokenSeq ctx{kBos};
    const auto lead = 1 + rng.below(4);
    for (std::uint64_t k = 0; k < lead; ++k) ctx.push_back(neutral[rng.below(neutral.size())]);
    for (int cls = 0; cls < 2; ++cls) {
      TokenSeq c = ctx;
      if (cls == 1) c.push_back(spec.trigger_tokens[rng.below(spec.trigger_tokens.size())]);
      const auto fp = forward(spec, c);
      const std::size_t row = 2 * i + static_cast<std::size_t>(cls);
      auto out = ds.hidden_states.row(row);
      for (std::size_t k = 0; k < spec.hidden; ++k) out[k] = fp.hidden[k] + noise * rng.normal();
      ds.labels[row] = static_cast<std::uint8_t>(cls);
    }
  }
  ds.meta = {{"model_id", "toy-" + std::to_string(spec.seed)},
             {"layer_id", "final"},
             {"extraction_position", "last-token"},
             {"label_source", "planted-trigger"},
             {"noise", noise}};
  return ds;
}

void save_toy_model(const std::filesystem::path& path, const ToyModelSpec& spec) {
  const json info = {{"vocab", spec.vocab},
                     {"hidden", spec.hidden},
                     {"mlp_width", spec.mlp_width},
                     {"toxic_tokens", spec.toxic_tokens},
                     {"trigger_tokens", spec.trigger_tokens},
                     {"expert_neurons", spec.expert_neurons},
                     {"planted_index", spec.planted_index},
                     {"seed", spec.seed}};
  const std::vector<TensorBlob> blobs = {matrix_blob("embedding", spec.embedding, DType::f64),
                                         matrix_blob("w1", spec.w1, DType::f64),
                                         matrix_blob("w2", spec.w2, DType::f64),
                                         weight_blob("lm_head", spec.head)};
  write_tensor_file(path, blobs, {{"toy_model", info.dump()}});
}

bool is_toy_checkpoint(const TensorFile& tf) noexcept { return tf.metadata().contains("toy_model"); }

ToyModelSpec load_toy_model(const TensorFile& tf, std::string_view head_name) {
  const auto it = tf.metadata().find("toy_model");
  if (it == tf.metadata().end()) throw DataError("checkpoint carries no toy_model metadata");
  json info;
  try {
    info = json::parse(it->second);
  } catch (const json::parse_error&) {
    throw DataError("toy_model metadata is not valid JSON");
  }
  ToyModelSpec spec;
  try {
    spec.vocab = info.at("vocab").get<std::size_t>();
    spec.hidden = info.at("hidden").get<std::size_t>();
    spec.mlp_width = info.at("mlp_width").get<std::size_t>();
    spec.toxic_tokens = info.at("toxic_tokens").get<std::vector<Token>>();
    spec.trigger_tokens = info.at("trigger_tokens").get<std::vector<Token>>();
    spec.expert_neurons = info.at("expert_neurons").get<std::vector<std::size_t>>();
    spec.planted_index = info.at("planted_index").get<std::size_t>();
    spec.seed = info.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("toy_model metadata: ") + e.what());
  }
  std::sort(spec.toxic_tokens.begin(), spec.toxic_tokens.end());
  std::sort(spec.trigger_tokens.begin(), spec.trigger_tokens.end());
  spec.embedding = load_matrix(tf, "embedding");
  spec.w1 = load_matrix(tf, "w1");
  spec.w2 = load_matrix(tf, "w2");
  spec.head = load_weight_matrix(tf, head_name);
  if (spec.embedding.rows() != spec.vocab || spec.embedding.cols() != spec.hidden ||
      spec.w1.rows() != spec.mlp_width || spec.w1.cols() != spec.hidden || spec.w2.rows() != spec.hidden ||
      spec.w2.cols() != spec.mlp_width || spec.head.rows() != spec.vocab || spec.head.cols() != spec.hidden)
    throw DataError("toy checkpoint tensors do not match the recorded sizes");
  return spec;
}

void write_corpus_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
  std::string text;
  for (const auto& seq : corpus.sequences) {
    text += json(seq).dump();
    text += '\n';
  }
  write_text_file(path, text);
}

Corpus read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      c.sequences.push_back(json::parse(line).get<TokenSeq>());
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace eshift

#pragma once

// A miniature language model with a planted toxic mechanism, built in
// closed form from a seed:
//
//   x      = mean of the context token embeddings
//   act    = gelu(W1 x)                  (the MLP activation site)
//   hidden = x + W2 act
//   logits = head hidden
//
// The head is U diag(sigma) Vt with a planted direction j*: u_{j*} is
// supported on the toxic tokens, and trigger tokens push the hidden state
// along v_{j*}. A handful of MLP "expert" neurons read v_{j*} and write
// back onto it. Direction 0 carries a shared fluency component that keeps
// neutral tokens ahead of toxic ones when no trigger is present.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "eshift/expert_id.hpp"
#include "eshift/matrix.hpp"
#include "eshift/tensor_store.hpp"

namespace eshift {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

inline constexpr Token kBos = 0;

struct ToyModelParams {
  std::size_t vocab = 64;
  std::size_t hidden = 16;
  std::size_t mlp_width = 64;
  std::size_t toxic_count = 4;
  std::size_t trigger_count = 4;
  std::size_t expert_count = 4;
  double trigger_strength = 3.0;  // v_{j*} coordinate of trigger embeddings
  double neutral_offset = 0.5;    // minus the v_{j*} coordinate of all other embeddings
  double fluency = 1.0;           // v_0 coordinate shared by every embedding
  double texture = 1.0;           // scale of the remaining embedding coordinates
};

struct ToyModelSpec {
  std::size_t vocab = 0;
  std::size_t hidden = 0;
  std::size_t mlp_width = 0;
  Matrix embedding;  // vocab x hidden
  Matrix w1;         // mlp_width x hidden
  Matrix w2;         // hidden x mlp_width
  WeightMatrix head;  // vocab x hidden
  std::vector<Token> toxic_tokens;
  std::vector<Token> trigger_tokens;
  std::vector<std::size_t> expert_neurons;  // planted MLP experts
  std::size_t planted_index = 0;            // j*, in descending-sigma order
  std::uint64_t seed = 0;

  bool is_toxic(Token t) const noexcept;
  bool is_trigger(Token t) const noexcept;
};

// Throws std::invalid_argument for infeasible parameters
// (vocab <= toxic + trigger + 1, hidden < 4, expert_count > mlp_width)
// and DataError if the construction cannot be tuned to meet its ranking
// guarantees.
ToyModelSpec build_toy_model(std::uint64_t seed, const ToyModelParams& params = {});

// Copy of `spec` with a different head.
ToyModelSpec with_head(const ToyModelSpec& spec, const WeightMatrix& head);

// Mutates the MLP activation vector in place.
using MlpHook = std::function<void(std::span<double>)>;

struct ForwardPass {
  std::vector<double> pooled;  // x
  std::vector<double> mlp;     // act, after any hook
  std::vector<double> hidden;
  std::vector<double> logits;
};

// An empty context is read as [BOS]. Throws std::out_of_range for token ids
// >= vocab.
ForwardPass forward(const ToyModelSpec& spec, std::span<const Token> context, const MlpHook& hook = {});

double gelu(double x) noexcept;

struct GenParams {
  std::size_t n_tokens = 8;
  double temperature = 1.0;
  bool greedy = false;
  std::uint64_t seed = 0;
};

// Returns only the continuation. Throws std::invalid_argument for
// n_tokens == 0 or temperature <= 0 when not greedy.
TokenSeq generate(const ToyModelSpec& spec, std::span<const Token> prompt, const GenParams& gen,
                  const MlpHook& hook = {});

struct Corpus {
  std::vector<TokenSeq> sequences;
};

// For every position whose next token is toxic, the preceding hidden state
// with label 1; then an equal number (seeded pick) of positions followed by
// a non-toxic token with label 0. Rows follow corpus order.
// Throws DataError("no positive samples") when no toxic successor exists.
ActivationDataset dump_activations(const ToyModelSpec& spec, const Corpus& corpus);

// Same rows as dump_activations: "layer.0" = pooled input x,
// "layer.1" = hidden state, plus the MLP activations.
struct LayerDump {
  std::vector<Matrix> layers;
  Matrix mlp_acts;
};
LayerDump dump_layers(const ToyModelSpec& spec, const Corpus& corpus);

// Fraction of prompts whose continuation contains at least one toxic token.
// Prompt i samples with seed derive_seed(gen.seed, i).
double toxicity_rate(const ToyModelSpec& spec, std::span<const TokenSeq> prompts, const GenParams& gen,
                     const MlpHook& hook = {});

// exp of the mean next-token negative log-likelihood over every position
// p >= 1 of every sequence.
double perplexity(const ToyModelSpec& spec, const Corpus& corpus, const MlpHook& hook = {});

// Per-sequence max-pooled MLP activations; label 1 when the sequence holds a
// toxic token.
struct PooledActivations {
  Matrix pooled;
  std::vector<std::uint8_t> labels;
};
PooledActivations pooled_mlp_activations(const ToyModelSpec& spec, const Corpus& corpus);

// One sample per sequence: max-pooled MLP activations, and as layers the
// pooled input x and the hidden state at the final position.
ExpertScanInput expert_scan_input(const ToyModelSpec& spec, const Corpus& corpus);

// Prompts [BOS, (neutral)?, trigger].
std::vector<TokenSeq> trigger_prompts(const ToyModelSpec& spec, std::size_t count, std::uint64_t seed);

// Sequences of `length` tokens sampled from the model. Each starts with
// [BOS] plus 0-2 neutral tokens; with probability `trigger_fraction` a
// trigger follows.
Corpus sample_corpus(const ToyModelSpec& spec, std::size_t count, std::size_t length, double trigger_fraction,
                     std::uint64_t seed);

// sample_corpus without triggers, keeping only sequences free of toxic and
// trigger tokens.
Corpus neutral_corpus(const ToyModelSpec& spec, std::size_t count, std::size_t length, std::uint64_t seed);

// Hidden states of random neutral contexts (label 0) and the same contexts
// with a trigger appended (label 1), plus isotropic Gaussian noise.
ActivationDataset planted_dataset(const ToyModelSpec& spec, std::size_t per_class, double noise,
                                  std::uint64_t seed);

// Checkpoint entries "embedding", "w1", "w2", "lm_head" (F64) with the token
// sets and planted index in the "toy_model" metadata key.
void save_toy_model(const std::filesystem::path& path, const ToyModelSpec& spec);
ToyModelSpec load_toy_model(const TensorFile& tf, std::string_view head_name = "lm_head");
bool is_toy_checkpoint(const TensorFile& tf) noexcept;

void write_corpus_jsonl(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus_jsonl(const std::filesystem::path& path);

}  // namespace eshift

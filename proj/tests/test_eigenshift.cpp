#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "eshift/eigenshift.hpp"
#include "eshift/error.hpp"
#include "eshift/toylm.hpp"
#include "oracles.hpp"

using namespace eshift;

namespace {

SvdFactors identity_factors(std::size_t d) {
  SvdFactors f;
  f.u = Matrix::identity(d);
  f.sigma.assign(d, 1.0);
  f.vt = Matrix::identity(d);
  return f;
}

ActivationDataset random_dataset(Rng& rng, std::size_t toxic, std::size_t clean, std::size_t d) {
  ActivationDataset ds;
  ds.hidden_states = oracle::random_matrix(rng, toxic + clean, d);
  for (std::size_t i = 0; i < toxic + clean; ++i) ds.labels.push_back(i < toxic ? 1 : 0);
  return ds;
}

DeltaScores scores_of(std::vector<double> delta) {
  DeltaScores s;
  s.delta = std::move(delta);
  return s;
}

}  // namespace

TEST(Projection, IdentityBasis) {
  ActivationDataset ds;
  ds.hidden_states = Matrix{{2, -1, 0}, {0, 0, 0}};
  ds.labels = {1, 0};
  const auto a = project_activations(identity_factors(3), ds);
  EXPECT_EQ(a, (Matrix{{2, -1, 0}, {0, 0, 0}}));
}

TEST(Projection, MatchesDotProductOracle) {
  Rng rng(10);
  const Matrix vt = oracle::random_orthogonal(rng, 4);
  SvdFactors f;
  f.vt = vt;
  f.sigma = {4, 3, 2, 1};
  f.u = Matrix::identity(4);
  const auto ds = random_dataset(rng, 5, 5, 4);
  const auto unit = project_activations(f, ds, ScoringVariant::unit_v);
  const auto scaled = project_activations(f, ds, ScoringVariant::sigma_scaled);
  for (std::size_t j = 0; j < 10; ++j)
    for (std::size_t i = 0; i < 4; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 4; ++k) dot += vt(i, k) * ds.hidden_states(j, k);
      EXPECT_NEAR(unit(j, i), dot, 1e-12);
      EXPECT_NEAR(scaled(j, i), f.sigma[i] * dot, 1e-12);
    }
  ActivationDataset wrong;
  wrong.hidden_states = Matrix(2, 3);
  wrong.labels = {0, 1};
  EXPECT_THROW(project_activations(f, wrong), std::invalid_argument);
}

TEST(DeltaScores, SmallCases) {
  ActivationDataset ds;
  ds.hidden_states = Matrix{{1, 0}, {0, 1}};
  ds.labels = {1, 0};
  const auto s = delta_scores(identity_factors(2), ds);
  EXPECT_EQ(s.delta, (std::vector<double>{1, -1}));

  ds.hidden_states = Matrix{{1, 2}, {3, 4}, {1, 2}, {3, 4}};
  ds.labels = {1, 1, 0, 0};
  EXPECT_EQ(delta_scores(identity_factors(2), ds).delta, (std::vector<double>{0, 0}));

  ds.labels = {1, 1, 1, 1};
  EXPECT_THROW(delta_scores(identity_factors(2), ds), DataError);
}

TEST(DeltaScores, MatchesMeansOracle) {
  Rng rng(6);
  const auto ds = random_dataset(rng, 6, 6, 8);
  SvdFactors f = identity_factors(8);
  f.vt = oracle::random_orthogonal(rng, 8);
  const auto s = delta_scores(f, ds);
  for (std::size_t i = 0; i < 8; ++i) {
    double tox = 0.0, clean = 0.0;
    for (std::size_t j = 0; j < 12; ++j) {
      double a = 0.0;
      for (std::size_t k = 0; k < 8; ++k) a += f.vt(i, k) * ds.hidden_states(j, k);
      (j < 6 ? tox : clean) += a / 6.0;
    }
    EXPECT_NEAR(s.delta[i], tox - clean, 1e-12);
    EXPECT_EQ(s.delta[i], s.mean_toxic[i] - s.mean_nontoxic[i]);
  }
}

TEST(DeltaScores, AntisymmetryAndScaleCovariance) {
  Rng rng(7);
  auto ds = random_dataset(rng, 20, 30, 6);
  SvdFactors f = identity_factors(6);
  f.vt = oracle::random_orthogonal(rng, 6);
  const auto base = delta_scores(f, ds);
  const InterventionPlan plan{0.0, TopK{3}, ScoringVariant::unit_v};

  auto flipped = ds;
  for (auto& l : flipped.labels) l = 1 - l;
  const auto neg = delta_scores(f, flipped);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(neg.delta[i], -base.delta[i], 1e-14);

  auto scaled = ds;
  for (double& v : scaled.hidden_states.data()) v *= 2.5;
  const auto sc = delta_scores(f, scaled);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(sc.delta[i], 2.5 * base.delta[i], 1e-12);
  EXPECT_EQ(select_targets(sc, plan), select_targets(base, plan));
}

TEST(SelectTargets, TopKAndTies) {
  const auto s = scores_of({0.5, -0.2, 0.9, 0.1});
  EXPECT_EQ(select_targets(s, {0.0, TopK{2}}), (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(select_targets(scores_of({1, 1, 1, 1}), {0.0, TopK{3}}), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(select_targets(s, {0.0, TopK{5}}), std::invalid_argument);
  EXPECT_THROW(select_targets(s, {0.0, TopK{0}}), std::invalid_argument);
}

TEST(SelectTargets, AblationGridAtFullWidth) {
  Rng rng(4096);
  std::vector<double> delta(4096);
  for (double& d : delta) d = rng.normal();
  const auto s = scores_of(delta);
  for (std::size_t k : {5u, 41u, 410u, 1024u}) {
    const auto t = select_targets(s, {0.0, TopK{k}});
    ASSERT_EQ(t.size(), k);
    for (std::size_t i = 1; i < k; ++i) EXPECT_GE(delta[t[i - 1]], delta[t[i]]);
  }
}

TEST(SelectTargets, PercentileMapping) {
  EXPECT_EQ(percentile_to_k(99.9, 4096), 5u);
  EXPECT_EQ(percentile_to_k(99.0, 4096), 41u);
  EXPECT_EQ(percentile_to_k(90.0, 4096), 410u);
  EXPECT_EQ(percentile_to_k(95.0, 100), 5u);
  EXPECT_EQ(percentile_to_k(50.0, 16), 8u);
  EXPECT_THROW(percentile_to_k(0.0, 16), std::invalid_argument);
  EXPECT_THROW(percentile_to_k(100.0, 16), std::invalid_argument);
  const auto s = scores_of({0.5, -0.2, 0.9, 0.1});
  EXPECT_EQ(select_targets(s, {0.0, Percentile{75.0}}), (std::vector<std::size_t>{2}));
}

TEST(SelectTargets, ExplicitPassThrough) {
  const auto s = scores_of({0.5, -0.2, 0.9, 0.1});
  EXPECT_EQ(select_targets(s, {0.0, ExplicitTargets{{3, 1}}}), (std::vector<std::size_t>{3, 1}));
  EXPECT_THROW(select_targets(s, {0.0, ExplicitTargets{{1, 1}}}), std::invalid_argument);
  EXPECT_THROW(select_targets(s, {0.0, ExplicitTargets{{4}}}), std::invalid_argument);
}

TEST(DampSpectrum, Examples) {
  SvdFactors f = identity_factors(4);
  f.sigma = {4, 3, 2, 1};
  auto g = damp_spectrum(f, {0, 3}, 0.5);
  EXPECT_EQ(g.sigma, (std::vector<double>{2, 3, 2, 0.5}));
  EXPECT_TRUE(g.post_intervention);
  EXPECT_EQ(g.base_sigma, f.sigma);
  EXPECT_EQ(g.u, f.u);
  EXPECT_EQ(g.vt, f.vt);
  EXPECT_EQ(damp_spectrum(f, {0, 1, 2, 3}, 1.0).sigma, f.sigma);
  EXPECT_EQ(damp_spectrum(f, {1}, -1.0).sigma, (std::vector<double>{4, -3, 2, 1}));
  EXPECT_THROW(damp_spectrum(f, {4}, 0.5), std::invalid_argument);
}

TEST(Reconstruct, ShortCircuitAndRankOne) {
  Rng rng(21);
  const Matrix w = oracle::random_matrix(rng, 9, 4);
  auto f = svd(w);
  f.source = std::make_shared<const Matrix>(w);
  EXPECT_EQ(reconstruct(f).values, w);
  EXPECT_EQ(reconstruct(damp_spectrum(f, {1, 2}, 1.0)).values, w);

  SvdFactors r1;
  r1.u = Matrix{{1}, {0}, {0}};
  r1.sigma = {2};
  r1.vt = Matrix{{1}};
  EXPECT_EQ(reconstruct(r1).values, (Matrix{{2}, {0}, {0}}));
}

TEST(Reconstruct, DampedMatchesMatmulOracle) {
  Rng rng(22);
  const Matrix w = oracle::random_matrix(rng, 30, 8);
  auto f = svd(w);
  f.source = std::make_shared<const Matrix>(w);
  const auto d = damp_spectrum(f, {0, 5}, 0.25);
  Matrix us = d.u;
  for (std::size_t r = 0; r < us.rows(); ++r)
    for (std::size_t c = 0; c < us.cols(); ++c) us(r, c) *= d.sigma[c];
  const Matrix expected = oracle::naive_matmul(us, d.vt);
  const Matrix got = reconstruct(d).values;
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data()[i], expected.data()[i], 1e-12);
  f.u = Matrix(3, 3);
  EXPECT_THROW(reconstruct(f), std::invalid_argument);
}

TEST(EigenShift, IdentityPlans) {
  Rng rng(30);
  const WeightMatrix w{oracle::random_matrix(rng, 40, 8), DType::f32};
  const auto ds = random_dataset(rng, 10, 10, 8);
  const auto empty = eigenshift(w, ds, {0.0, ExplicitTargets{}});
  EXPECT_EQ(empty.weights.values, w.values);
  EXPECT_TRUE(empty.targets.empty());
  const auto one = eigenshift(w, ds, {1.0, TopK{3}});
  EXPECT_EQ(one.weights.values, w.values);
  EXPECT_EQ(one.weights.dtype, DType::f32);
}

TEST(EigenShift, AnalyticFrobeniusIdentityAndLowRank) {
  Rng rng(31);
  const WeightMatrix w{oracle::random_matrix(rng, 60, 12), DType::f64};
  const auto ds = random_dataset(rng, 15, 25, 12);
  for (double alpha : {-2.0, -1.0, -0.5, 0.0, 0.1, 0.5, 0.9}) {
    const InterventionPlan plan{alpha, TopK{3}, ScoringVariant::unit_v};
    const auto r = eigenshift(w, ds, plan);
    double ss = 0.0;
    for (auto i : r.targets) ss += r.sigma[i] * r.sigma[i];
    const double expected = std::abs(1.0 - alpha) * std::sqrt(ss);
    EXPECT_NEAR(r.frobenius_delta, expected, 1e-9 * expected) << "alpha " << alpha;
    EXPECT_EQ(r.warnings.empty(), alpha >= 0.0) << "alpha " << alpha;

    Matrix diff = r.weights.values;
    for (std::size_t i = 0; i < diff.size(); ++i) diff.data()[i] -= w.values.data()[i];
    const auto ds_diff = svd(diff);
    EXPECT_LE(ds_diff.sigma[3], 1e-8 * r.sigma[0]);
  }
}

TEST(EigenShift, DeterministicBytes) {
  Rng rng(32);
  const WeightMatrix w{oracle::random_matrix(rng, 50, 10), DType::f32};
  const auto ds = random_dataset(rng, 12, 12, 10);
  const InterventionPlan plan{0.0, Percentile{80.0}, ScoringVariant::sigma_scaled};
  EXPECT_EQ(encode_values(eigenshift(w, ds, plan).weights.values.values(), DType::f32),
            encode_values(eigenshift(w, ds, plan).weights.values.values(), DType::f32));
}

TEST(EigenShift, PlantedHeadSuppressesOnlyToxicLogits) {
  const auto spec = build_toy_model(7);
  const auto corpus = sample_corpus(spec, 300, 12, 0.5, 5);
  const auto ds = dump_activations(spec, corpus);
  const auto r = eigenshift(spec.head, ds, {0.0, TopK{1}});
  ASSERT_EQ(r.targets, (std::vector<std::size_t>{spec.planted_index}));
  const auto shifted = with_head(spec, r.weights);

  const Token trig = spec.trigger_tokens.front();
  const Token ctx[2] = {kBos, trig};
  const auto before = forward(spec, ctx).logits;
  const auto after = forward(shifted, ctx).logits;
  double max_tox_before = -INFINITY, max_tox_after = -INFINITY;
  for (Token t = 0; t < spec.vocab; ++t) {
    if (spec.is_toxic(t)) {
      max_tox_before = std::max(max_tox_before, before[t]);
      max_tox_after = std::max(max_tox_after, after[t]);
    } else {
      EXPECT_LE(std::abs(after[t] - before[t]), 1e-6 * std::max(1.0, std::abs(before[t])));
    }
  }
  EXPECT_LT(max_tox_after, max_tox_before);

  const auto diag = diagnostics_json(r, {0.0, TopK{1}});
  EXPECT_EQ(diag["targets"][0], spec.planted_index);
  EXPECT_EQ(diag["k"], 1);
  EXPECT_TRUE(diag.contains("frobenius_delta"));
}

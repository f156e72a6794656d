#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "eshift/error.hpp"
#include "eshift/expert_id.hpp"
#include "eshift/tensor_store.hpp"
#include "oracles.hpp"

using namespace eshift;
namespace fs = std::filesystem;

namespace {

NeuronActivationTable table(Matrix pooled, std::vector<std::uint8_t> labels) {
  NeuronActivationTable t;
  t.pooled = std::move(pooled);
  t.labels = std::move(labels);
  return t;
}

// Textbook Lloyd with its own distance and update code, no tie tricks.
Matrix reference_lloyd(const Matrix& x, Matrix c) {
  std::vector<std::size_t> a(x.rows(), static_cast<std::size_t>(-1));
  for (int iter = 0; iter < 300; ++iter) {
    bool moved = false;
    for (std::size_t j = 0; j < x.rows(); ++j) {
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t k = 0; k < c.rows(); ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < x.cols(); ++i) d += (x(j, i) - c(k, i)) * (x(j, i) - c(k, i));
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      moved |= best != a[j];
      a[j] = best;
    }
    if (!moved) break;
    for (std::size_t k = 0; k < c.rows(); ++k) {
      std::vector<double> sum(x.cols(), 0.0);
      std::size_t n = 0;
      for (std::size_t j = 0; j < x.rows(); ++j)
        if (a[j] == k) {
          for (std::size_t i = 0; i < x.cols(); ++i) sum[i] += x(j, i);
          ++n;
        }
      if (n)
        for (std::size_t i = 0; i < x.cols(); ++i) c(k, i) = sum[i] / static_cast<double>(n);
    }
  }
  return c;
}

Matrix two_blobs(Rng& rng, std::size_t per, std::size_t d, double sep, double noise) {
  Matrix x(2 * per, d);
  for (std::size_t j = 0; j < 2 * per; ++j)
    for (std::size_t i = 0; i < d; ++i) x(j, i) = (j < per ? 0.0 : sep) + noise * rng.normal();
  return x;
}

std::vector<std::uint8_t> half_labels(std::size_t per) {
  std::vector<std::uint8_t> y(2 * per, 0);
  std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(per), 1);
  return y;
}

}  // namespace

TEST(NeuronExperts, ApExamples) {
  auto t = table(Matrix{{1, 0.5}, {1, 0.5}, {0, 0.5}, {0, 0.5}}, {1, 1, 0, 0});
  const auto r = neuron_experts_ap(t, 0.99);
  EXPECT_DOUBLE_EQ(r.ap[0], 1.0);
  EXPECT_TRUE(r.is_expert[0]);
  EXPECT_DOUBLE_EQ(r.ap[1], 0.5);  // prevalence
  EXPECT_FALSE(r.is_expert[1]);

  // Positives ranked 1st and 3rd.
  t = table(Matrix{{4}, {3}, {2}, {1}}, {1, 0, 1, 0});
  EXPECT_NEAR(neuron_experts_ap(t, 0.5).ap[0], (1.0 + 2.0 / 3.0) / 2.0, 1e-15);

  t.labels = {1, 1, 1, 1};
  EXPECT_THROW(neuron_experts_ap(t, 0.5), DataError);
}

TEST(NeuronExperts, AurocExamplesAndOracle) {
  const auto t = table(Matrix{{5, 1}, {6, 1}, {1, 1}, {2, 1}}, {1, 1, 0, 0});
  const auto r = neuron_experts_auroc(t, 0.5);
  EXPECT_DOUBLE_EQ(r.auroc[0], 1.0);
  EXPECT_DOUBLE_EQ(r.auroc[1], 0.5);
  EXPECT_EQ(r.is_expert, (std::vector<bool>{true, false}));
  EXPECT_EQ(r.best_by_auroc(), 0u);

  Rng rng(50);
  Matrix pooled(50, 30);
  std::vector<std::uint8_t> y(50);
  for (std::size_t j = 0; j < 50; ++j) {
    y[j] = static_cast<std::uint8_t>(j % 3 == 0);
    for (std::size_t m = 0; m < 30; ++m) pooled(j, m) = m % 2 ? rng.normal() : static_cast<double>(rng.below(4));
  }
  const auto big = table(pooled, y);
  const auto rs = neuron_experts_auroc(big, 0.5, Backend::serial);
  const auto ro = neuron_experts_auroc(big, 0.5, Backend::omp);
  EXPECT_EQ(rs.auroc, ro.auroc);
  EXPECT_EQ(rs.ap, ro.ap);
  for (std::size_t m = 0; m < 30; ++m) {
    std::vector<double> col(50);
    for (std::size_t j = 0; j < 50; ++j) col[j] = pooled(j, m);
    EXPECT_NEAR(rs.auroc[m], oracle::pairwise_auroc(col, y), 1e-12);
    EXPECT_NEAR(rs.ap[m], oracle::enumerated_ap(col, y), 1e-12);

    auto flipped = y;
    for (auto& l : flipped) l = 1 - l;
    EXPECT_NEAR(rs.auroc[m], 1.0 - auroc(col, flipped), 1e-12);
  }
}

TEST(NeuronExperts, ThresholdSurvey) {
  NeuronExpertReport r;
  r.auroc = {0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(auroc_threshold_survey(r, kDefaultSurveyThresholds), (std::vector<double>{0, 0, 0, 0}));
  r.auroc = {0.505, 0.515, 0.53, 0.6};
  EXPECT_EQ(auroc_threshold_survey(r, kDefaultSurveyThresholds), (std::vector<double>{100, 75, 50, 25}));
  EXPECT_EQ(kDefaultSurveyThresholds, (std::vector<double>{0.50, 0.51, 0.52, 0.55}));
}

TEST(NeuronExperts, ShuffledLabelNullStaysNearHalf) {
  Rng rng(2000);
  Matrix pooled = oracle::random_matrix(rng, 1000, 200);
  std::vector<std::uint8_t> y(1000);
  for (auto& l : y) l = static_cast<std::uint8_t>(rng.below(2));
  const auto r = neuron_experts_auroc(table(pooled, y), 0.5);
  const double thresholds[] = {0.55};
  EXPECT_LT(auroc_threshold_survey(r, thresholds)[0], 5.0);
}

TEST(KMeans, LloydMatchesReferenceFromSameInit) {
  Rng rng(8);
  Matrix x(120, 3);
  for (std::size_t j = 0; j < 120; ++j)
    for (std::size_t i = 0; i < 3; ++i) x(j, i) = static_cast<double>(j % 3) * 4.0 + rng.normal();
  const Matrix init = kmeans_plus_plus_init(x, 3, 99);
  const auto got = lloyd(x, init);
  const Matrix want = reference_lloyd(x, init);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.centroids.data()[i], want.data()[i], 1e-9);
}

TEST(KMeans, TiesGoToLowerIndexAndEmptyClusterKeepsCentroid) {
  const Matrix x{{0.0}, {2.0}};
  const auto r = lloyd(x, Matrix{{1.0}, {1.0}, {50.0}});
  EXPECT_EQ(r.assignment, (std::vector<std::size_t>{0, 0}));
  EXPECT_DOUBLE_EQ(r.centroids(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r.centroids(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(r.centroids(2, 0), 50.0);
}

TEST(KMeans, SeededAndRestartsNeverWorse) {
  Rng rng(4);
  const Matrix x = oracle::random_matrix(rng, 200, 5);
  const auto a = kmeans(x, 4, 7);
  const auto b = kmeans(x, 4, 7);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_LE(a.inertia, kmeans(x, 4, 7, 1).inertia);
  EXPECT_THROW(kmeans(x, 0, 7), std::invalid_argument);
}

TEST(Silhouette, HandComputedCases) {
  const Matrix sq{{0, 0}, {0, 1}, {4, 0}, {4, 1}};
  const std::vector<std::size_t> a = {0, 0, 1, 1};
  const double b = (4.0 + std::sqrt(17.0)) / 2.0;
  EXPECT_NEAR(silhouette(sq, a), (b - 1.0) / b, 1e-15);

  const Matrix far{{0, 0}, {1e-9, 0}, {100, 100}, {100, 100 + 1e-9}};
  EXPECT_NEAR(silhouette(far, a), 1.0, 1e-9);

  const Matrix two{{0}, {1}};
  EXPECT_EQ(silhouette(two, std::vector<std::size_t>{0, 1}), 0.0);
  EXPECT_THROW(silhouette(two, std::vector<std::size_t>{1, 1}), DataError);
}

TEST(Silhouette, MatchesFullOracle) {
  Rng rng(15);
  const Matrix x = oracle::random_matrix(rng, 90, 4);
  std::vector<std::size_t> a(90);
  for (std::size_t j = 0; j < 90; ++j) a[j] = j == 89 ? 3 : rng.below(3);
  EXPECT_NEAR(silhouette(x, a), oracle::full_silhouette(x, a), 1e-12);
}

TEST(LayerExpert, SeparableBlobs) {
  Rng rng(1);
  const Matrix x = two_blobs(rng, 50, 2, 10.0, 1e-3);
  const auto r = layer_expert(x, half_labels(50), 3);
  EXPECT_DOUBLE_EQ(r.expertise, 1.0);
  EXPECT_GT(r.silhouette, 0.99);
  EXPECT_DOUBLE_EQ(r.scores.f1, 1.0);
  EXPECT_FALSE(r.degenerate);
}

TEST(LayerExpert, IndependentLabelsNearHalf) {
  Rng rng(400);
  const Matrix x = two_blobs(rng, 200, 4, 3.0, 1.0);
  std::vector<std::uint8_t> y(400);
  for (auto& l : y) l = static_cast<std::uint8_t>(rng.below(2));
  const auto r = layer_expert(x, y, 5);
  EXPECT_GE(r.expertise, 0.5);
  EXPECT_LE(r.expertise, 0.55);
}

TEST(LayerExpert, RotationInvariant) {
  Rng rng(33);
  const Matrix x = two_blobs(rng, 60, 6, 2.0, 1.0);
  std::vector<std::uint8_t> y(120);
  for (std::size_t j = 0; j < 120; ++j) y[j] = static_cast<std::uint8_t>((j < 60) != (rng.below(5) == 0));
  const auto base = layer_expert(x, y, 11);
  for (int trial = 0; trial < 3; ++trial) {
    const Matrix q = oracle::random_orthogonal(rng, 6);
    const auto r = layer_expert(oracle::naive_matmul(x, q), y, 11);
    EXPECT_NEAR(r.expertise, base.expertise, 1e-12);
    EXPECT_NEAR(r.silhouette, base.silhouette, 1e-9);
  }
}

TEST(LayerExpert, DegenerateAndInvalidInputs) {
  const Matrix same(6, 3, 1.5);
  const auto r = layer_expert(same, std::vector<std::uint8_t>{1, 0, 1, 0, 1, 0}, 0);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.expertise, 0.5);
  EXPECT_THROW(layer_expert(same, std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1}, 0), DataError);
  EXPECT_THROW(layer_expert(same, std::vector<std::uint8_t>{1, 0}, 0), DataError);
}

TEST(LayerRanks, Normalization) {
  const std::vector<double> up = {0.1, 0.2, 0.3, 0.4, 0.5};
  EXPECT_EQ(normalize_layer_ranks(up), (std::vector<double>{0, 0.25, 0.5, 0.75, 1}));
  const std::vector<double> flat = {0.7, 0.7, 0.7};
  EXPECT_EQ(normalize_layer_ranks(flat), (std::vector<double>{0.5, 0.5, 0.5}));

  Rng rng(3);
  std::vector<double> s(11);
  for (double& v : s) v = static_cast<double>(rng.below(6));
  const auto got = normalize_layer_ranks(s);
  // Argsort oracle: average position of each value among the sorted scores.
  std::vector<double> sorted = s;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto lo = std::lower_bound(sorted.begin(), sorted.end(), s[i]) - sorted.begin();
    const auto hi = std::upper_bound(sorted.begin(), sorted.end(), s[i]) - sorted.begin() - 1;
    EXPECT_DOUBLE_EQ(got[i], (static_cast<double>(lo + hi) / 2.0) / 10.0);
  }
}

TEST(ScanIo, RoundTripAndErrors) {
  const auto dir = fs::temp_directory_path() / "eshift_scan_test";
  fs::create_directories(dir);
  ExpertScanInput in;
  Rng rng(12);
  in.neurons = table(oracle::random_matrix(rng, 8, 5), {1, 0, 1, 0, 1, 0, 1, 1});
  in.layers = {oracle::random_matrix(rng, 8, 3), oracle::random_matrix(rng, 8, 2)};
  write_expert_scan_input(dir / "scan.safetensors", in);
  const auto back = load_expert_scan_input(read_tensor_file(dir / "scan.safetensors"));
  EXPECT_EQ(back.neurons.labels, in.neurons.labels);
  ASSERT_EQ(back.layers.size(), 2u);
  for (std::size_t i = 0; i < in.neurons.pooled.size(); ++i)
    EXPECT_EQ(back.neurons.pooled.data()[i], static_cast<double>(static_cast<float>(in.neurons.pooled.data()[i])));
  EXPECT_EQ(back.layers[1].cols(), 2u);

  in.layers[0] = Matrix(7, 3);
  write_expert_scan_input(dir / "bad.safetensors", in);
  EXPECT_THROW(load_expert_scan_input(read_tensor_file(dir / "bad.safetensors")), DataError);
  fs::remove_all(dir);
}

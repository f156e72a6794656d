#pragma once

// Expert identification: per-neuron AP/AUROC scoring of sentence-pooled
// activations, and per-layer scoring through a two-cluster k-means of the
// layer's representations.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eshift/linalg.hpp"
#include "eshift/metrics.hpp"
#include "eshift/tensor_store.hpp"

namespace eshift {

// pooled(j, m) = max over token positions of neuron m on sample j.
struct NeuronActivationTable {
  Matrix pooled;
  std::vector<std::uint8_t> labels;
  std::string pooling = "max";
};

enum class ExpertCriterion { ap, auroc };

struct NeuronExpertReport {
  std::vector<double> ap;
  std::vector<double> auroc;
  ExpertCriterion criterion = ExpertCriterion::auroc;
  double threshold = 0.5;
  std::vector<bool> is_expert;  // score under `criterion` strictly above `threshold`

  std::size_t size() const noexcept { return auroc.size(); }
  std::size_t best_by_auroc() const;
};

// Both scores are computed for every neuron; only the flags differ.
// Throws DataError when the labels contain a single class.
NeuronExpertReport neuron_experts_ap(const NeuronActivationTable& tbl, double threshold,
                                     Backend backend = Backend::omp);
NeuronExpertReport neuron_experts_auroc(const NeuronActivationTable& tbl, double threshold,
                                        Backend backend = Backend::omp);

inline const std::vector<double> kDefaultSurveyThresholds = {0.50, 0.51, 0.52, 0.55};

// Percentage (0..100) of neurons with AUROC strictly above each threshold.
std::vector<double> auroc_threshold_survey(const NeuronExpertReport& report, std::span<const double> thresholds);

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

// Lloyd iterations from the given centroids until assignments stop
// changing. Nearest-centroid ties go to the lower index; an emptied cluster
// keeps its previous centroid.
KMeansResult lloyd(const Matrix& points, Matrix centroids, std::size_t max_iterations = 300);

// k-means++ seeding followed by lloyd(), best inertia over `restarts`
// seeded runs (earliest restart wins ties).
Matrix kmeans_plus_plus_init(const Matrix& points, std::size_t k, std::uint64_t seed);
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t restarts = 10);

struct LayerExpertReport {
  double expertise = 0.5;   // max(AUROC, 1 - AUROC) of the cluster membership
  double raw_auroc = 0.5;   // before orientation
  double silhouette = 0.0;
  Prf1 scores;              // oriented membership as a binary prediction
  std::vector<std::size_t> assignment;
  bool degenerate = false;  // all points identical, or clustering collapsed
};

LayerExpertReport layer_expert(const Matrix& h, std::span<const std::uint8_t> labels, std::uint64_t seed);

// Mean silhouette with Euclidean distance. Samples at most 2000 points
// (fixed seed) when larger; singleton clusters contribute 0. Throws
// DataError when fewer than two clusters are populated.
double silhouette(const Matrix& points, std::span<const std::size_t> assignment);

// Rank of each score mapped to rank / (L - 1), ties share the average rank.
std::vector<double> normalize_layer_ranks(std::span<const double> scores);

// Input of an expert scan: per-sample pooled neuron activations and one
// representation matrix per layer, sharing one label vector. Stored as
// "neuron_acts" (n x M), "layer.<l>" (n x d_l) and "labels" (n, U8).
struct ExpertScanInput {
  NeuronActivationTable neurons;
  std::vector<Matrix> layers;
};

// Errors: NotFoundError for missing entries, DataError for row-count or
// label mismatches.
ExpertScanInput load_expert_scan_input(const TensorFile& tf);
void write_expert_scan_input(const std::filesystem::path& path, const ExpertScanInput& in);

}  // namespace eshift

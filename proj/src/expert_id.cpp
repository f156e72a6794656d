#include "eshift/expert_id.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "eshift/error.hpp"
#include "eshift/rng.hpp"

namespace eshift {
namespace {

constexpr std::uint64_t kSilhouetteSeed = 0x5111u;
constexpr std::size_t kSilhouetteMaxPoints = 2000;

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void score_neuron(const NeuronActivationTable& tbl, std::size_t m, NeuronExpertReport& r) {
  std::vector<double> column(tbl.pooled.rows());
  for (std::size_t j = 0; j < column.size(); ++j) column[j] = tbl.pooled(j, m);
  r.ap[m] = average_precision(column, tbl.labels);
  r.auroc[m] = auroc(column, tbl.labels);
}

NeuronExpertReport score_neurons(const NeuronActivationTable& tbl, ExpertCriterion criterion, double threshold,
                                 Backend backend) {
  if (tbl.labels.size() != tbl.pooled.rows()) throw DataError("neuron table: label count does not match rows");
  const auto positives = std::count(tbl.labels.begin(), tbl.labels.end(), std::uint8_t{1});
  if (positives == 0 || static_cast<std::size_t>(positives) == tbl.labels.size())
    throw DataError("neuron experts: labels contain a single class");

  const std::size_t neurons = tbl.pooled.cols();
  NeuronExpertReport r;
  r.criterion = criterion;
  r.threshold = threshold;
  r.ap.resize(neurons);
  r.auroc.resize(neurons);
  if (backend == Backend::omp) {
    const auto count = static_cast<std::ptrdiff_t>(neurons);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t m = 0; m < count; ++m) score_neuron(tbl, static_cast<std::size_t>(m), r);
  } else {
    for (std::size_t m = 0; m < neurons; ++m) score_neuron(tbl, m, r);
  }
  const auto& scores = criterion == ExpertCriterion::ap ? r.ap : r.auroc;
  r.is_expert.resize(neurons);
  for (std::size_t m = 0; m < neurons; ++m) r.is_expert[m] = scores[m] > threshold;
  return r;
}

}  // namespace

std::size_t NeuronExpertReport::best_by_auroc() const {
  if (auroc.empty()) throw std::logic_error("empty neuron report");
  return static_cast<std::size_t>(std::max_element(auroc.begin(), auroc.end()) - auroc.begin());
}

NeuronExpertReport neuron_experts_ap(const NeuronActivationTable& tbl, double threshold, Backend backend) {
  return score_neurons(tbl, ExpertCriterion::ap, threshold, backend);
}

NeuronExpertReport neuron_experts_auroc(const NeuronActivationTable& tbl, double threshold, Backend backend) {
  return score_neurons(tbl, ExpertCriterion::auroc, threshold, backend);
}

std::vector<double> auroc_threshold_survey(const NeuronExpertReport& report, std::span<const double> thresholds) {
  if (report.auroc.empty()) throw std::invalid_argument("threshold survey: empty report");
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    const auto above = std::count_if(report.auroc.begin(), report.auroc.end(), [&](double a) { return a > t; });
    out.push_back(100.0 * static_cast<double>(above) / static_cast<double>(report.auroc.size()));
  }
  return out;
}

KMeansResult lloyd(const Matrix& points, Matrix centroids, std::size_t max_iterations) {
  const std::size_t n = points.rows();
  const std::size_t k = centroids.rows();
  const std::size_t d = points.cols();
  KMeansResult r;
  r.assignment.assign(n, 0);
  bool changed = true;
  std::size_t iter = 0;
  while (changed && iter < max_iterations) {
    changed = iter == 0;
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t best = 0;
      double best_d = squared_distance(points.row(j), centroids.row(0));
      for (std::size_t c = 1; c < k; ++c) {
        const double dist = squared_distance(points.row(j), centroids.row(c));
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      if (best != r.assignment[j]) {
        r.assignment[j] = best;
        changed = true;
      }
    }
    ++iter;
    if (!changed) break;
    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t j = 0; j < n; ++j) {
      auto s = sums.row(r.assignment[j]);
      const auto p = points.row(j);
      for (std::size_t i = 0; i < d; ++i) s[i] += p[i];
      ++counts[r.assignment[j]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto out = centroids.row(c);
      const auto s = sums.row(c);
      for (std::size_t i = 0; i < d; ++i) out[i] = s[i] / static_cast<double>(counts[c]);
    }
  }
  r.iterations = iter;
  r.inertia = 0.0;
  for (std::size_t j = 0; j < n; ++j) r.inertia += squared_distance(points.row(j), centroids.row(r.assignment[j]));
  r.centroids = std::move(centroids);
  return r;
}

Matrix kmeans_plus_plus_init(const Matrix& points, std::size_t k, std::uint64_t seed) {
  const std::size_t n = points.rows();
  if (k == 0 || n < k) throw std::invalid_argument("kmeans: need at least k points");
  Rng rng(seed);
  Matrix centroids(k, points.cols());
  auto take = [&](std::size_t c, std::size_t j) {
    std::copy(points.row(j).begin(), points.row(j).end(), centroids.row(c).begin());
  };
  take(0, static_cast<std::size_t>(rng.below(n)));
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      nearest[j] = std::min(nearest[j], squared_distance(points.row(j), centroids.row(c - 1)));
      total += nearest[j];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        acc += nearest[j];
        if (acc > target) {
          pick = j;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng.below(n));
    }
    take(c, pick);
  }
  return centroids;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t restarts) {
  if (restarts == 0) throw std::invalid_argument("kmeans: restarts must be positive");
  if (k == 0 || points.rows() < k) throw std::invalid_argument("kmeans: need at least k points");
  std::vector<KMeansResult> runs(restarts);
  const auto count = static_cast<std::ptrdiff_t>(restarts);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < count; ++r)
    runs[static_cast<std::size_t>(r)] =
        lloyd(points, kmeans_plus_plus_init(points, k, derive_seed(seed, static_cast<std::uint64_t>(r))));
  std::size_t best = 0;
  for (std::size_t r = 1; r < restarts; ++r)
    if (runs[r].inertia < runs[best].inertia) best = r;
  return std::move(runs[best]);
}

double silhouette(const Matrix& points, std::span<const std::size_t> assignment) {
  if (assignment.size() != points.rows()) throw std::invalid_argument("silhouette: assignment length mismatch");
  std::vector<std::size_t> idx(points.rows());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > kSilhouetteMaxPoints) {
    Rng rng(kSilhouetteSeed);
    rng.shuffle(idx);
    idx.resize(kSilhouetteMaxPoints);
    std::sort(idx.begin(), idx.end());
  }
  const std::size_t k = assignment.empty() ? 0 : *std::max_element(assignment.begin(), assignment.end()) + 1;
  std::vector<std::size_t> sizes(k, 0);
  for (auto j : idx) ++sizes[assignment[j]];
  if (std::count_if(sizes.begin(), sizes.end(), [](std::size_t s) { return s > 0; }) < 2)
    throw DataError("silhouette: need at least two populated clusters");

  double total = 0.0;
  std::vector<double> dist_sum(k);
  for (auto j : idx) {
    std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
    for (auto o : idx) {
      if (o == j) continue;
      dist_sum[assignment[o]] += std::sqrt(squared_distance(points.row(j), points.row(o)));
    }
    const std::size_t own = assignment[j];
    if (sizes[own] <= 1) continue;  // singleton: contributes 0
    const double a = dist_sum[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c)
      if (c != own && sizes[c] > 0) b = std::min(b, dist_sum[c] / static_cast<double>(sizes[c]));
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(idx.size());
}

LayerExpertReport layer_expert(const Matrix& h, std::span<const std::uint8_t> labels, std::uint64_t seed) {
  if (h.rows() < 2) throw DataError("layer expert: need at least two samples");
  if (labels.size() != h.rows()) throw DataError("layer expert: label count does not match rows");
  const auto positives = std::count(labels.begin(), labels.end(), std::uint8_t{1});
  if (positives == 0 || static_cast<std::size_t>(positives) == labels.size())
    throw DataError("layer expert: labels contain a single class");

  LayerExpertReport rep;
  bool identical = true;
  for (std::size_t j = 1; j < h.rows() && identical; ++j)
    identical = std::equal(h.row(j).begin(), h.row(j).end(), h.row(0).begin());
  if (identical) {
    rep.degenerate = true;
    rep.assignment.assign(h.rows(), 0);
    return rep;
  }

  auto km = kmeans(h, 2, seed);
  rep.assignment = km.assignment;
  const auto in_one = std::count(km.assignment.begin(), km.assignment.end(), std::size_t{1});
  if (in_one == 0 || static_cast<std::size_t>(in_one) == km.assignment.size()) {
    rep.degenerate = true;
    return rep;
  }

  std::vector<double> membership(h.rows());
  for (std::size_t j = 0; j < h.rows(); ++j) membership[j] = static_cast<double>(km.assignment[j]);
  rep.raw_auroc = auroc(membership, labels);
  const bool flip = rep.raw_auroc < 0.5;
  rep.expertise = flip ? 1.0 - rep.raw_auroc : rep.raw_auroc;

  std::vector<std::uint8_t> predicted(h.rows());
  for (std::size_t j = 0; j < h.rows(); ++j)
    predicted[j] = static_cast<std::uint8_t>((km.assignment[j] == 1) != flip);
  rep.scores = prf1(predicted, labels);
  rep.silhouette = silhouette(h, km.assignment);
  return rep;
}

std::vector<double> normalize_layer_ranks(std::span<const double> scores) {
  const std::size_t L = scores.size();
  if (L < 2) throw std::invalid_argument("normalize_layer_ranks: need at least two layers");
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> out(L);
  for (std::size_t i = 0; i < L;) {
    std::size_t j = i;
    while (j < L && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j - 1);
    for (std::size_t t = i; t < j; ++t) out[order[t]] = avg / static_cast<double>(L - 1);
    i = j;
  }
  return out;
}

}  // namespace eshift

namespace eshift {

ExpertScanInput load_expert_scan_input(const TensorFile& tf) {
  ExpertScanInput in;
  in.neurons.pooled = load_matrix(tf, "neuron_acts");
  const auto& le = tf.entry(kLabelsEntry);
  if (le.dtype != DType::u8 || le.shape.size() != 1) throw DataError("labels must be a rank-1 U8 entry");
  for (auto b : tf.payload(kLabelsEntry)) {
    const auto v = static_cast<std::uint8_t>(b);
    if (v > 1) throw DataError("invalid label " + std::to_string(v));
    in.neurons.labels.push_back(v);
  }
  if (in.neurons.labels.size() != in.neurons.pooled.rows())
    throw DataError("shape mismatch: neuron_acts has " + std::to_string(in.neurons.pooled.rows()) + " rows but " +
                    std::to_string(in.neurons.labels.size()) + " labels");
  for (std::size_t l = 0; tf.contains("layer." + std::to_string(l)); ++l) {
    in.layers.push_back(load_matrix(tf, "layer." + std::to_string(l)));
    if (in.layers.back().rows() != in.neurons.labels.size())
      throw DataError("shape mismatch: layer." + std::to_string(l) + " row count differs from labels");
  }
  return in;
}

void write_expert_scan_input(const std::filesystem::path& path, const ExpertScanInput& in) {
  std::vector<TensorBlob> blobs;
  blobs.push_back(matrix_blob("neuron_acts", in.neurons.pooled, DType::f32));
  TensorBlob labels{std::string(kLabelsEntry), DType::u8, {in.neurons.labels.size()}, {}};
  for (auto v : in.neurons.labels) labels.bytes.push_back(static_cast<std::byte>(v));
  blobs.push_back(std::move(labels));
  for (std::size_t l = 0; l < in.layers.size(); ++l)
    blobs.push_back(matrix_blob("layer." + std::to_string(l), in.layers[l], DType::f32));
  write_tensor_file(path, blobs, {{"pooling", in.neurons.pooling}});
}

}  // namespace eshift

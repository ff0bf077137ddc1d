#include "hide/statistics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hide {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

// Nearest centroid, lowest index on ties. Returns the objective contribution via `dist`.
std::size_t nearest(const Tensor2& centroids, std::span<const double> x, double& dist) {
  std::size_t best = 0;
  dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double dd = squared_distance(centroids.row(c), x);
    if (dd < dist) {
      dist = dd;
      best = c;
    }
  }
  return best;
}

void recompute_centroids(const Tensor2& reps, const std::vector<std::size_t>& assignment,
                         Tensor2& centroids) {
  Tensor2 sums(centroids.rows, centroids.cols);
  std::vector<std::size_t> counts(centroids.rows, 0);
  for (std::size_t i = 0; i < reps.rows; ++i) {
    auto s = sums.row(assignment[i]);
    auto r = reps.row(i);
    for (std::size_t j = 0; j < reps.cols; ++j) s[j] += r[j];
    ++counts[assignment[i]];
  }
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    if (counts[c] == 0) continue;  // empty cluster keeps its previous position
    auto dst = centroids.row(c);
    auto s = sums.row(c);
    for (std::size_t j = 0; j < centroids.cols; ++j) dst[j] = s[j] / static_cast<double>(counts[c]);
  }
}

}  // namespace

ClassStatistics fit_class_statistics(const Tensor2& reps, std::size_t k,
                                     std::optional<double> noise_sigma, std::uint64_t seed,
                                     KMeansTrace* trace) {
  if (k == 0) throw ConfigError("fit_class_statistics: K must be >= 1");
  if (reps.rows < k) {
    throw ConfigError("fit_class_statistics: " + std::to_string(reps.rows) +
                      " representations for K=" + std::to_string(k));
  }
  if (reps.cols == 0) throw DimensionError("fit_class_statistics: zero-dimensional representations");
  if (!reps.all_finite()) throw NumericError("fit_class_statistics: non-finite representation");
  if (noise_sigma && !(*noise_sigma >= 0.0)) {
    throw ConfigError("fit_class_statistics: noise_sigma must be >= 0");
  }

  const std::size_t n = reps.rows;
  Tensor2 centroids(k, reps.cols);

  // Furthest-point initialisation from a seeded first pick.
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t first = pick(rng);
  std::copy(reps.row(first).begin(), reps.row(first).end(), centroids.row(0).begin());
  std::vector<double> min_dist(n);
  for (std::size_t i = 0; i < n; ++i) min_dist[i] = squared_distance(reps.row(i), centroids.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    std::size_t far = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (min_dist[i] > min_dist[far]) far = i;
    }
    std::copy(reps.row(far).begin(), reps.row(far).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], squared_distance(reps.row(i), centroids.row(c)));
    }
  }

  std::vector<std::size_t> assignment(n);
  double objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dist = 0.0;
    assignment[i] = nearest(centroids, reps.row(i), dist);
    objective += dist;
  }
  if (trace != nullptr) {
    trace->objective.assign(1, objective);
    trace->converged = false;
  }

  std::size_t iterations = 0;
  bool converged = false;
  while (iterations < kMaxLloydIterations) {
    recompute_centroids(reps, assignment, centroids);
    ++iterations;
    bool changed = false;
    objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double dist = 0.0;
      const std::size_t a = nearest(centroids, reps.row(i), dist);
      objective += dist;
      if (a != assignment[i]) {
        assignment[i] = a;
        changed = true;
      }
    }
    if (trace != nullptr) trace->objective.push_back(objective);
    if (!changed) {
      converged = true;
      break;
    }
  }
  if (!converged) recompute_centroids(reps, assignment, centroids);

  ClassStatistics stats;
  stats.centroids = std::move(centroids);
  stats.counts.assign(k, 0);
  for (std::size_t a : assignment) ++stats.counts[a];

  stats.mean.assign(reps.cols, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const double w = static_cast<double>(stats.counts[c]);
    auto row = stats.centroids.row(c);
    for (std::size_t j = 0; j < reps.cols; ++j) stats.mean[j] += w * row[j];
  }
  for (double& m : stats.mean) m /= static_cast<double>(n);

  if (noise_sigma) {
    stats.noise_sigma = *noise_sigma;
  } else {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ss += squared_distance(reps.row(i), stats.centroids.row(assignment[i]));
    }
    stats.noise_sigma = std::sqrt(ss / static_cast<double>(n * reps.cols));
  }

  if (trace != nullptr) {
    trace->iterations = iterations;
    trace->converged = converged;
  }
  return stats;
}

Tensor2 sample_pseudo(const ClassStatistics& stats, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("sample_pseudo: n must be >= 1");
  if (stats.centroids.rows == 0 || stats.counts.size() != stats.centroids.rows) {
    throw StateError("sample_pseudo: statistics are not fitted");
  }
  std::uint64_t total = 0;
  for (auto c : stats.counts) total += c;
  if (total == 0) throw StateError("sample_pseudo: all centroid counts are zero");

  std::vector<double> weights(stats.counts.begin(), stats.counts.end());
  std::discrete_distribution<std::size_t> choose(weights.begin(), weights.end());
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor2 out(n, stats.dim());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = stats.centroids.rows == 1 ? 0 : choose(rng);
    auto src = stats.centroids.row(c);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) {
      dst[j] = stats.noise_sigma > 0.0 ? src[j] + stats.noise_sigma * noise(rng) : src[j];
    }
  }
  return out;
}

Tensor2 sample_pseudo(const ClassStatistics& stats, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_pseudo(stats, n, rng);
}

void StatStore::put_unadapted(ClassStatistics stats) {
  Key key{stats.task_id, stats.class_id};
  entries_[key].unadapted = std::move(stats);
}

void StatStore::put_adapted(ClassStatistics stats) {
  Key key{stats.task_id, stats.class_id};
  auto it = entries_.find(key);
  if (it == entries_.end() || !it->second.unadapted) {
    throw StateError("adapted statistics for class " + std::to_string(stats.class_id) +
                     " of task " + std::to_string(stats.task_id) +
                     " recorded before its unadapted statistics");
  }
  it->second.adapted = std::move(stats);
}

const ClassStatistics* StatStore::unadapted(std::uint32_t task, std::uint32_t cls) const {
  auto it = entries_.find({task, cls});
  if (it == entries_.end() || !it->second.unadapted) return nullptr;
  return &*it->second.unadapted;
}

const ClassStatistics* StatStore::adapted(std::uint32_t task, std::uint32_t cls) const {
  auto it = entries_.find({task, cls});
  if (it == entries_.end() || !it->second.adapted) return nullptr;
  return &*it->second.adapted;
}

}  // namespace hide

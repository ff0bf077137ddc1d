#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "hide/numerics.hpp"

namespace hide {

/// Centroids plus isotropic Gaussian noise approximating one class's representation
/// distribution (unadapted or adapted).
struct ClassStatistics {
  std::uint32_t class_id = 0;
  std::uint32_t task_id = 0;
  Tensor2 centroids;  // K x D
  std::vector<std::uint64_t> counts;
  double noise_sigma = 0.0;
  std::vector<double> mean;

  std::size_t dim() const noexcept { return centroids.cols; }
  bool operator==(const ClassStatistics&) const = default;
};

struct KMeansTrace {
  /// Sum of squared distances to the assigned centroid, one entry per Lloyd step.
  std::vector<double> objective;
  std::size_t iterations = 0;
  bool converged = false;
};

inline constexpr std::size_t kMaxLloydIterations = 100;

/// Seeded K-means (furthest-point init, Lloyd refinement). `noise_sigma` unset selects
/// the RMS per-coordinate within-cluster deviation.
ClassStatistics fit_class_statistics(const Tensor2& reps, std::size_t k,
                                     std::optional<double> noise_sigma, std::uint64_t seed,
                                     KMeansTrace* trace = nullptr);

/// n draws of (count-weighted centroid) + N(0, sigma^2 I).
Tensor2 sample_pseudo(const ClassStatistics& stats, std::size_t n, Rng& rng);
Tensor2 sample_pseudo(const ClassStatistics& stats, std::size_t n, std::uint64_t seed);

inline const std::vector<double>& class_mean(const ClassStatistics& stats) { return stats.mean; }

/// Unadapted (G-hat_c) and adapted (G_c) statistics keyed by (task, class).
class StatStore {
 public:
  struct Entry {
    std::optional<ClassStatistics> unadapted;
    std::optional<ClassStatistics> adapted;
    bool operator==(const Entry&) const = default;
  };
  using Key = std::pair<std::uint32_t, std::uint32_t>;

  void put_unadapted(ClassStatistics stats);
  /// Throws StateError when the unadapted statistics of the same class are missing.
  void put_adapted(ClassStatistics stats);

  const ClassStatistics* unadapted(std::uint32_t task, std::uint32_t cls) const;
  const ClassStatistics* adapted(std::uint32_t task, std::uint32_t cls) const;

  const std::map<Key, Entry>& entries() const noexcept { return entries_; }
  std::map<Key, Entry>& entries() noexcept { return entries_; }

  bool operator==(const StatStore&) const = default;

 private:
  std::map<Key, Entry> entries_;
};

}  // namespace hide

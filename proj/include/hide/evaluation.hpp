#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hide/data.hpp"

namespace hide {

struct ModelState;

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// Lower-triangular accuracy grid: columns()[t][i] is A_{i,t}, the accuracy on task i
/// after learning task t (both zero-based here).
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::vector<std::vector<double>> columns);

  /// Appends the evaluation after learning the next task; must hold one entry per seen task.
  void push_column(std::vector<double> accuracies);

  std::size_t num_tasks() const noexcept { return columns_.size(); }
  double at(std::size_t task, std::size_t after) const;
  const std::vector<std::vector<double>>& columns() const noexcept { return columns_; }

  bool operator==(const AccuracyMatrix&) const = default;

 private:
  std::vector<std::vector<double>> columns_;
};

/// AA_t with t one-based.
double average_accuracy(const AccuracyMatrix& m, std::size_t t);
double faa(const AccuracyMatrix& m);
double caa(const AccuracyMatrix& m);
/// Throws UndefinedMetricError for a single task.
double ffm(const AccuracyMatrix& m);

/// Accuracy per test set, all tasks so far. CIL/DIL predict without task identity; TIL
/// receives it.
std::vector<double> evaluate_scenario(const ModelState& state, std::span<const TaskData> tasks,
                                      Scenario scenario, std::size_t threads = 1);

/// Fraction of test samples whose task identity the TII head recovers.
double tii_accuracy(const ModelState& state, std::span<const TaskData> tasks);

struct MetricsReport {
  std::string label;
  Scenario scenario = Scenario::CIL;
  AccuracyMatrix matrix;
  double faa = 0.0;
  double caa = 0.0;
  /// Absent (NaN) for single-task runs.
  double ffm = 0.0;
};

MetricsReport make_report(const AccuracyMatrix& m, Scenario scenario, std::string label);
void write_metrics_report(const MetricsReport& report, const std::string& path);
MetricsReport read_metrics_report(const std::string& path);
std::string render_metrics_table(const MetricsReport& report);
std::string render_heatmap_svg(const MetricsReport& report);

}  // namespace hide

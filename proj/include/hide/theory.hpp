#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hide/data.hpp"
#include "hide/numerics.hpp"

namespace hide {

struct ModelState;

/// Per-sample categorical outputs of the three sub-problems.
/// CIL tables: class_probs runs over every (task, within-task class) pair in task-major order.
/// DIL tables: every task shares one label set and class_probs runs over that set.
struct ProbSample {
  std::vector<double> task_probs;                 // P(x in X_i)
  std::vector<std::vector<double>> within_probs;  // P(x in X_ij | x in X_i), one row per task
  std::vector<double> class_probs;                // P(x in X^c)
  std::size_t true_task = 0;
  std::size_t true_class = 0;  // index inside the true task's label set
  std::size_t true_label = 0;  // index into class_probs
  std::vector<double> gamma;   // DIL domain simplex; empty for CIL
};

struct ProbTable {
  Scenario scenario = Scenario::CIL;
  std::vector<ProbSample> samples;

  /// Throws DataError unless every distribution sums to 1 within 1e-9, indices are in range
  /// and (for DIL) gamma is a simplex.
  void validate() const;
};

struct ComponentEntropies {
  double h_wtp = 0.0;
  double h_tii = 0.0;
  double h_tap = 0.0;
  /// Some ground-truth probability was zero; the affected entropy is +inf.
  bool infinite = false;
};

inline constexpr double kBoundTolerance = 1e-9;

/// H_WTP, H_TII and H_TAP at the ground truth of one sample. For DIL rows the TII term is
/// the gamma-weighted cross-entropy and the WTP term is the gamma-weighted sum over tasks.
ComponentEntropies component_entropies(const ProbTable& table, std::size_t sample);

/// Max over samples of | -log(P(i)P(j|i)) - (H_WTP + H_TII) |. Samples with an infinite
/// component on both sides contribute zero.
double check_cil_identity(const ProbTable& table);

struct BoundReport {
  double delta = 0.0;  // E[H_WTP]
  double epsilon = 0.0;  // E[H_TII]
  double eta = 0.0;      // E[H_TAP]
  double l1 = 0.0;       // E[H_TAP]
  double l2 = 0.0;       // E[-log P(joint ground truth)]
  double loss = 0.0;     // max(L1, L2)
  double bound = 0.0;
  bool holds = true;
  double slack = 0.0;    // bound - loss
  bool infinite = false;
  /// Largest violation of the per-sample intermediate inequality (<= 0 when it holds).
  double intermediate_violation = 0.0;
  /// DIL only: same, for the tighter right-hand side that carries -H(gamma).
  double tight_violation = 0.0;
  /// Number of samples checked.
  std::size_t samples = 0;
};

/// L = max(L2, L1) <= max(delta + epsilon, eta) together with L2 == delta + epsilon.
BoundReport check_theorem1(const ProbTable& table);

/// Domain-incremental bound L <= max(delta + epsilon + log t, eta); also checks the per-sample
/// inequality -log sum_i P(i)P(j|i) <= sum_i gamma_i H_WTP,i + H_TII(gamma) + H(gamma).
BoundReport check_theorem3_dil(const ProbTable& table);

struct NecessityReport {
  bool applicable = true;
  bool holds = true;
  double xi = 0.0;
  double loss = 0.0;
  /// max over samples of H_WTP - c and H_TII - c, where c is the sample's joint CE.
  double worst_wtp_gap = 0.0;
  double worst_tii_gap = 0.0;
  std::string note;
};

/// Necessity direction: when the table's loss error is at most xi, each component
/// cross-entropy is bounded pointwise by the sample's joint CE and E[H_TAP] <= xi.
NecessityReport check_necessity(const ProbTable& table, double xi);

/// Max over samples of |H_TAP - H_WTP| when TAP is told the task identity (the joint
/// distribution renormalised over the true task's classes).
double til_reduction_deviation(const ProbTable& table);

struct RandomTableSpec {
  std::size_t samples = 100;
  std::size_t tasks = 4;
  std::size_t classes_per_task = 3;
  /// Dirichlet concentration range; draws below 1 create near-degenerate distributions.
  double min_concentration = 0.05;
  double max_concentration = 5.0;
};

ProbTable random_cil_table(Rng& rng, const RandomTableSpec& spec);
ProbTable random_dil_table(Rng& rng, const RandomTableSpec& spec);

/// Builds a table from the model's own softmax outputs on the given test sets (TII from
/// omega on unadapted representations, WTP from task-sliced psi on each e_i, TAP from the
/// two-stage predictor) and checks the matching bound.
BoundReport empirical_bounds_from_model(const ModelState& state, std::span<const TaskData> tasks);
ProbTable table_from_model(const ModelState& state, std::span<const TaskData> tasks);

}  // namespace hide

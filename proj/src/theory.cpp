#include "hide/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "hide/engine.hpp"

namespace hide {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kSumTolerance = 1e-9;

double neg_log(double p) { return p > 0.0 ? -std::log(p) : kInf; }

// gamma-weighted cross-entropy with the 0 * inf = 0 convention.
double weighted_neg_log(std::span<const double> weights, std::span<const double> probs) {
  double out = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] > 0.0) out += weights[i] * neg_log(probs[i]);
  }
  return out;
}

void check_distribution(std::span<const double> p, const char* what, std::size_t sample) {
  if (p.empty()) {
    throw DataError(std::string(what) + " of sample " + std::to_string(sample) + " is empty");
  }
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError(std::string(what) + " of sample " + std::to_string(sample) +
                      " has an entry outside [0, 1]");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    throw DataError(std::string(what) + " of sample " + std::to_string(sample) + " sums to " +
                    std::to_string(sum));
  }
}

double shannon(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

// Joint ground-truth probability: the Bayes product for CIL, the marginal over domains for DIL.
double joint_probability(const ProbTable& table, const ProbSample& s) {
  if (table.scenario == Scenario::DIL) {
    double p = 0.0;
    for (std::size_t i = 0; i < s.task_probs.size(); ++i) {
      p += s.task_probs[i] * s.within_probs[i][s.true_class];
    }
    return p;
  }
  return s.task_probs[s.true_task] * s.within_probs[s.true_task][s.true_class];
}

std::vector<double> dirichlet(Rng& rng, std::size_t n, double concentration) {
  std::gamma_distribution<double> g(concentration, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = std::max(g(rng), 1e-12);
  const double sum = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& v : out) v /= sum;
  return out;
}

double draw_concentration(Rng& rng, const RandomTableSpec& spec) {
  // Log-uniform so both peaked and flat distributions appear.
  std::uniform_real_distribution<double> u(std::log(spec.min_concentration),
                                           std::log(spec.max_concentration));
  return std::exp(u(rng));
}

}  // namespace

void ProbTable::validate() const {
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const ProbSample& s = samples[n];
    check_distribution(s.task_probs, "task distribution", n);
    if (s.within_probs.size() != s.task_probs.size()) {
      throw DataError("sample " + std::to_string(n) + " needs one within-task row per task");
    }
    for (const auto& row : s.within_probs) check_distribution(row, "within-task distribution", n);
    check_distribution(s.class_probs, "class distribution", n);
    if (s.true_task >= s.task_probs.size() ||
        s.true_class >= s.within_probs[s.true_task].size() ||
        s.true_label >= s.class_probs.size()) {
      throw DataError("ground truth of sample " + std::to_string(n) + " is out of range");
    }
    if (scenario == Scenario::DIL) {
      for (const auto& row : s.within_probs) {
        if (row.size() != s.within_probs.front().size()) {
          throw DataError("DIL sample " + std::to_string(n) + " has unequal label sets");
        }
      }
      if (s.gamma.size() != s.task_probs.size()) {
        throw DataError("DIL sample " + std::to_string(n) + " needs one gamma entry per domain");
      }
      check_distribution(s.gamma, "gamma", n);
    }
  }
}

ComponentEntropies component_entropies(const ProbTable& table, std::size_t sample) {
  const ProbSample& s = table.samples.at(sample);
  ComponentEntropies e;
  if (table.scenario == Scenario::DIL) {
    for (std::size_t i = 0; i < s.gamma.size(); ++i) {
      if (s.gamma[i] > 0.0) e.h_wtp += s.gamma[i] * neg_log(s.within_probs[i][s.true_class]);
    }
    e.h_tii = weighted_neg_log(s.gamma, s.task_probs);
  } else {
    e.h_wtp = neg_log(s.within_probs[s.true_task][s.true_class]);
    e.h_tii = neg_log(s.task_probs[s.true_task]);
  }
  e.h_tap = neg_log(s.class_probs[s.true_label]);
  e.infinite = std::isinf(e.h_wtp) || std::isinf(e.h_tii) || std::isinf(e.h_tap);
  return e;
}

double check_cil_identity(const ProbTable& table) {
  table.validate();
  if (table.scenario == Scenario::DIL) {
    throw ScenarioError("the cross-entropy identity applies to class-incremental tables");
  }
  double worst = 0.0;
  for (std::size_t n = 0; n < table.samples.size(); ++n) {
    const ComponentEntropies e = component_entropies(table, n);
    const double joint = neg_log(joint_probability(table, table.samples[n]));
    const double sum = e.h_wtp + e.h_tii;
    if (std::isinf(joint) && std::isinf(sum)) continue;
    worst = std::max(worst, std::abs(joint - sum));
  }
  return worst;
}

BoundReport check_theorem1(const ProbTable& table) {
  table.validate();
  if (table.scenario == Scenario::DIL) {
    throw ScenarioError("check_theorem1 expects a class-incremental table");
  }
  BoundReport r;
  r.samples = table.samples.size();
  if (r.samples == 0) return r;
  for (std::size_t n = 0; n < r.samples; ++n) {
    const ComponentEntropies e = component_entropies(table, n);
    r.delta += e.h_wtp;
    r.epsilon += e.h_tii;
    r.eta += e.h_tap;
    r.l2 += neg_log(joint_probability(table, table.samples[n]));
    r.infinite = r.infinite || e.infinite;
  }
  const double inv = 1.0 / static_cast<double>(r.samples);
  r.delta *= inv;
  r.epsilon *= inv;
  r.eta *= inv;
  r.l2 *= inv;
  r.l1 = r.eta;
  r.loss = std::max(r.l2, r.l1);
  r.bound = std::max(r.delta + r.epsilon, r.eta);
  if (r.infinite) {
    r.holds = true;
    r.slack = kInf;
    return r;
  }
  r.intermediate_violation = std::abs(r.l2 - (r.delta + r.epsilon));
  r.slack = r.bound - r.loss;
  r.holds = r.loss <= r.bound + kBoundTolerance && r.intermediate_violation <= kBoundTolerance;
  return r;
}

BoundReport check_theorem3_dil(const ProbTable& table) {
  if (table.scenario != Scenario::DIL) {
    throw ScenarioError("check_theorem3_dil expects a domain-incremental table");
  }
  table.validate();
  BoundReport r;
  r.samples = table.samples.size();
  if (r.samples == 0) return r;
  r.intermediate_violation = -kInf;
  r.tight_violation = -kInf;
  std::size_t domains = 0;
  for (std::size_t n = 0; n < r.samples; ++n) {
    const ProbSample& s = table.samples[n];
    domains = std::max(domains, s.task_probs.size());
    const ComponentEntropies e = component_entropies(table, n);
    const double joint = neg_log(joint_probability(table, s));
    r.delta += e.h_wtp;
    r.epsilon += e.h_tii;
    r.eta += e.h_tap;
    r.l2 += joint;
    r.infinite = r.infinite || e.infinite || std::isinf(joint);
    const double h_gamma = shannon(s.gamma);
    const double base = e.h_wtp + e.h_tii;
    if (!std::isinf(base)) {
      r.intermediate_violation = std::max(r.intermediate_violation, joint - (base + h_gamma));
      r.tight_violation = std::max(r.tight_violation, joint - (base - h_gamma));
    }
  }
  const double inv = 1.0 / static_cast<double>(r.samples);
  r.delta *= inv;
  r.epsilon *= inv;
  r.eta *= inv;
  r.l2 *= inv;
  r.l1 = r.eta;
  r.loss = std::max(r.l2, r.l1);
  r.bound = std::max(r.delta + r.epsilon + std::log(static_cast<double>(domains)), r.eta);
  if (r.infinite && std::isinf(r.bound)) {
    r.holds = true;
    r.slack = kInf;
    return r;
  }
  r.slack = r.bound - r.loss;
  r.holds = r.loss <= r.bound + kBoundTolerance && r.intermediate_violation <= kBoundTolerance &&
            r.tight_violation <= kBoundTolerance;
  return r;
}

NecessityReport check_necessity(const ProbTable& table, double xi) {
  table.validate();
  NecessityReport r;
  r.xi = xi;
  if (table.samples.empty()) {
    r.applicable = false;
    r.note = "empty table";
    return r;
  }
  double l1 = 0.0;
  double l2 = 0.0;
  std::vector<double> cell_ce(table.samples.size());
  for (std::size_t n = 0; n < table.samples.size(); ++n) {
    const ProbSample& s = table.samples[n];
    l1 += neg_log(s.class_probs[s.true_label]);
    l2 += neg_log(joint_probability(table, s));
    cell_ce[n] = neg_log(s.task_probs[s.true_task] * s.within_probs[s.true_task][s.true_class]);
  }
  const double inv = 1.0 / static_cast<double>(table.samples.size());
  l1 *= inv;
  l2 *= inv;
  r.loss = std::max(l1, l2);
  if (!(r.loss <= xi)) {
    r.applicable = false;
    r.note = "loss error " + std::to_string(r.loss) + " exceeds xi";
    return r;
  }
  r.worst_wtp_gap = -kInf;
  r.worst_tii_gap = -kInf;
  for (std::size_t n = 0; n < table.samples.size(); ++n) {
    const ProbSample& s = table.samples[n];
    const double c = cell_ce[n];
    if (std::isinf(c)) continue;
    // Per-sample components at the ground-truth task; for DIL this is gamma = one-hot.
    const double h_wtp = neg_log(s.within_probs[s.true_task][s.true_class]);
    const double h_tii = neg_log(s.task_probs[s.true_task]);
    r.worst_wtp_gap = std::max(r.worst_wtp_gap, h_wtp - c);
    r.worst_tii_gap = std::max(r.worst_tii_gap, h_tii - c);
  }
  r.holds = r.worst_wtp_gap <= kBoundTolerance && r.worst_tii_gap <= kBoundTolerance &&
            l1 <= xi + kBoundTolerance;
  return r;
}

double til_reduction_deviation(const ProbTable& table) {
  table.validate();
  double worst = 0.0;
  for (std::size_t n = 0; n < table.samples.size(); ++n) {
    const ProbSample& s = table.samples[n];
    const auto& row = s.within_probs[s.true_task];
    const double p_task = s.task_probs[s.true_task];
    // TAP restricted to the given task: joint cells of that task renormalised.
    double mass = 0.0;
    for (double w : row) mass += p_task * w;
    const double h_tap = neg_log(p_task * row[s.true_class] / mass);
    const double h_wtp = neg_log(row[s.true_class]);
    if (std::isinf(h_tap) && std::isinf(h_wtp)) continue;
    worst = std::max(worst, std::abs(h_tap - h_wtp));
  }
  return worst;
}

ProbTable random_cil_table(Rng& rng, const RandomTableSpec& spec) {
  if (spec.tasks == 0 || spec.classes_per_task == 0) {
    throw ConfigError("random tables need at least one task and one class");
  }
  ProbTable table;
  table.scenario = Scenario::CIL;
  std::uniform_int_distribution<std::size_t> pick_task(0, spec.tasks - 1);
  std::uniform_int_distribution<std::size_t> pick_class(0, spec.classes_per_task - 1);
  for (std::size_t n = 0; n < spec.samples; ++n) {
    ProbSample s;
    s.task_probs = dirichlet(rng, spec.tasks, draw_concentration(rng, spec));
    for (std::size_t i = 0; i < spec.tasks; ++i) {
      s.within_probs.push_back(dirichlet(rng, spec.classes_per_task, draw_concentration(rng, spec)));
    }
    s.class_probs = dirichlet(rng, spec.tasks * spec.classes_per_task, draw_concentration(rng, spec));
    s.true_task = pick_task(rng);
    s.true_class = pick_class(rng);
    s.true_label = s.true_task * spec.classes_per_task + s.true_class;
    table.samples.push_back(std::move(s));
  }
  return table;
}

ProbTable random_dil_table(Rng& rng, const RandomTableSpec& spec) {
  ProbTable table = random_cil_table(rng, spec);
  table.scenario = Scenario::DIL;
  std::bernoulli_distribution one_hot(0.2);
  for (auto& s : table.samples) {
    s.class_probs = dirichlet(rng, spec.classes_per_task, draw_concentration(rng, spec));
    s.true_label = s.true_class;
    if (one_hot(rng)) {
      s.gamma.assign(spec.tasks, 0.0);
      s.gamma[s.true_task] = 1.0;
    } else {
      s.gamma = dirichlet(rng, spec.tasks, draw_concentration(rng, spec));
    }
  }
  return table;
}

ProbTable table_from_model(const ModelState& state, std::span<const TaskData> tasks) {
  if (state.tasks.empty()) throw StateError("table_from_model: the model has not learned any task");
  if (tasks.size() > state.tasks.size()) {
    throw StateError("table_from_model: more test sets than learned tasks");
  }
  ProbTable table;
  table.scenario = state.scenario == Scenario::DIL ? Scenario::DIL : Scenario::CIL;
  const std::size_t T = state.tasks.size();
  for (std::size_t truth = 0; truth < tasks.size(); ++truth) {
    const TaskData& task = tasks[truth];
    for (std::size_t n = 0; n < task.test.size(); ++n) {
      const auto x = task.test.features.row(n);
      ProbSample s;
      s.task_probs = softmax(state.heads.tii.logits(forward_unadapted(state.backbone, x)));
      for (std::size_t i = 0; i < T; ++i) {
        const auto logits =
            state.heads.tap.logits(forward_adapted(state.backbone, x, state.peft_per_task[i]));
        const auto cols = state.task_columns(i);
        std::vector<double> local(cols.size());
        for (std::size_t j = 0; j < cols.size(); ++j) local[j] = logits[cols[j]];
        s.within_probs.push_back(softmax(local));
      }
      const std::uint32_t label = task.test.labels[n];
      const auto& classes = state.tasks[truth].classes;
      s.true_task = truth;
      s.true_class = static_cast<std::size_t>(std::find(classes.begin(), classes.end(), label) -
                                              classes.begin());
      if (s.true_class >= classes.size()) {
        throw DataError("test label " + std::to_string(label) + " is not a class of task " +
                        std::to_string(truth));
      }
      const Prediction p = predict(state, x);
      if (table.scenario == Scenario::DIL) {
        // Class probabilities follow the shared label set order of the first task.
        const auto cols = state.task_columns(0);
        for (std::size_t j = 0; j < cols.size(); ++j) s.class_probs.push_back(p.class_probs[cols[j]]);
        s.true_label = s.true_class;
        s.gamma = s.task_probs;
      } else {
        // Reorder psi columns into the task-major layout the table expects.
        for (std::size_t i = 0; i < T; ++i) {
          for (std::size_t c : state.task_columns(i)) s.class_probs.push_back(p.class_probs[c]);
        }
        s.true_label = 0;
        for (std::size_t i = 0; i < truth; ++i) s.true_label += state.tasks[i].classes.size();
        s.true_label += s.true_class;
      }
      table.samples.push_back(std::move(s));
    }
  }
  return table;
}

BoundReport empirical_bounds_from_model(const ModelState& state, std::span<const TaskData> tasks) {
  const ProbTable table = table_from_model(state, tasks);
  return table.scenario == Scenario::DIL ? check_theorem3_dil(table) : check_theorem1(table);
}

}  // namespace hide

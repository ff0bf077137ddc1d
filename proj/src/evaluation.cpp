#include "hide/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "hide/engine.hpp"

namespace hide {

AccuracyMatrix::AccuracyMatrix(std::vector<std::vector<double>> columns) {
  for (auto& c : columns) push_column(std::move(c));
}

void AccuracyMatrix::push_column(std::vector<double> accuracies) {
  if (accuracies.size() != columns_.size() + 1) {
    throw DimensionError("accuracy column " + std::to_string(columns_.size() + 1) + " has " +
                         std::to_string(accuracies.size()) + " entries");
  }
  for (double a : accuracies) {
    if (!(a >= 0.0 && a <= 1.0)) throw DataError("accuracy entries must lie in [0, 1]");
  }
  columns_.push_back(std::move(accuracies));
}

double AccuracyMatrix::at(std::size_t task, std::size_t after) const {
  if (after >= columns_.size() || task > after) {
    throw IndexError("A[" + std::to_string(task) + "][" + std::to_string(after) +
                     "] is outside the lower triangle of a " + std::to_string(columns_.size()) +
                     "-task matrix");
  }
  return columns_[after][task];
}

double average_accuracy(const AccuracyMatrix& m, std::size_t t) {
  if (t == 0 || t > m.num_tasks()) {
    throw IndexError("average_accuracy: t=" + std::to_string(t) + " outside [1, " +
                     std::to_string(m.num_tasks()) + "]");
  }
  const auto& col = m.columns()[t - 1];
  return std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(t);
}

double faa(const AccuracyMatrix& m) {
  if (m.num_tasks() == 0) throw UndefinedMetricError("FAA needs at least one task");
  return average_accuracy(m, m.num_tasks());
}

double caa(const AccuracyMatrix& m) {
  if (m.num_tasks() == 0) throw UndefinedMetricError("CAA needs at least one task");
  double sum = 0.0;
  for (std::size_t t = 1; t <= m.num_tasks(); ++t) sum += average_accuracy(m, t);
  return sum / static_cast<double>(m.num_tasks());
}

double ffm(const AccuracyMatrix& m) {
  const std::size_t T = m.num_tasks();
  if (T < 2) throw UndefinedMetricError("FFM is undefined for fewer than two tasks");
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < T; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t t = i; t + 1 < T; ++t) best = std::max(best, m.at(i, t));
    sum += best - m.at(i, T - 1);
  }
  return sum / static_cast<double>(T - 1);
}

namespace {

std::vector<std::uint32_t> labels_of(const TaskData& t) {
  return t.labels.empty() ? t.train.label_set() : t.labels;
}

void check_label_structure(std::span<const TaskData> tasks, Scenario scenario) {
  if (tasks.empty()) return;
  if (scenario == Scenario::DIL) {
    for (const auto& t : tasks) {
      if (labels_of(t) != labels_of(tasks.front())) {
        throw ScenarioError("DIL evaluation needs identical label sets across tasks");
      }
    }
    return;
  }
  std::vector<std::uint32_t> seen;
  for (const auto& t : tasks) {
    for (std::uint32_t c : labels_of(t)) {
      if (std::find(seen.begin(), seen.end(), c) != seen.end()) {
        throw ScenarioError(to_string(scenario) + " evaluation needs disjoint label sets; class " +
                            std::to_string(c) + " repeats");
      }
      seen.push_back(c);
    }
  }
}

double accuracy_on(const ModelState& state, const TaskData& task, std::size_t task_index,
                   Scenario scenario) {
  if (task.test.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t s = 0; s < task.test.size(); ++s) {
    const auto x = task.test.features.row(s);
    const Prediction p = scenario == Scenario::TIL ? predict_with_task(state, x, task_index)
                                                   : predict(state, x);
    if (p.label == task.test.labels[s]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(task.test.size());
}

}  // namespace

std::vector<double> evaluate_scenario(const ModelState& state, std::span<const TaskData> tasks,
                                      Scenario scenario, std::size_t threads) {
  check_label_structure(tasks, scenario);
  if (tasks.size() > state.tasks.size()) {
    throw StateError("evaluate_scenario: more test sets than learned tasks");
  }
  std::vector<double> out(tasks.size(), 0.0);
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, tasks.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) out[i] = accuracy_on(state, tasks[i], i, scenario);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < tasks.size(); i += workers) {
          out[i] = accuracy_on(state, tasks[i], i, scenario);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

double tii_accuracy(const ModelState& state, std::span<const TaskData> tasks) {
  std::size_t correct = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (std::size_t s = 0; s < tasks[i].test.size(); ++s) {
      const auto h = forward_unadapted(state.backbone, tasks[i].test.features.row(s));
      if (argmax(state.heads.tii.logits(h)) == i) ++correct;
      ++total;
    }
  }
  if (total == 0) throw DataError("tii_accuracy: no test samples");
  return static_cast<double>(correct) / static_cast<double>(total);
}

MetricsReport make_report(const AccuracyMatrix& m, Scenario scenario, std::string label) {
  MetricsReport r;
  r.label = std::move(label);
  r.scenario = scenario;
  r.matrix = m;
  r.faa = faa(m);
  r.caa = caa(m);
  r.ffm = m.num_tasks() >= 2 ? ffm(m) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

void write_metrics_report(const MetricsReport& report, const std::string& path) {
  nlohmann::json j;
  j["label"] = report.label;
  j["scenario"] = to_string(report.scenario);
  j["matrix"] = report.matrix.columns();
  j["faa"] = report.faa;
  j["caa"] = report.caa;
  j["ffm"] = std::isnan(report.ffm) ? nlohmann::json(nullptr) : nlohmann::json(report.ffm);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics report to " + path);
  out << std::setw(2) << j << '\n';
}

MetricsReport read_metrics_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read metrics report " + path);
  nlohmann::json j;
  try {
    in >> j;
    MetricsReport r;
    r.label = j.at("label").get<std::string>();
    r.scenario = scenario_from_string(j.at("scenario").get<std::string>());
    r.matrix = AccuracyMatrix(j.at("matrix").get<std::vector<std::vector<double>>>());
    r.faa = j.at("faa").get<double>();
    r.caa = j.at("caa").get<double>();
    r.ffm = j.at("ffm").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                  : j.at("ffm").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed metrics report " + path + ": " + e.what());
  }
}

std::string render_metrics_table(const MetricsReport& report) {
  const std::size_t T = report.matrix.num_tasks();
  std::ostringstream os;
  os << report.label << " (" << to_string(report.scenario) << ", " << T << " tasks)\n";
  os << "A[i][t]  ";
  for (std::size_t t = 0; t < T; ++t) os << std::setw(7) << ("t=" + std::to_string(t + 1));
  os << '\n';
  os << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < T; ++i) {
    os << std::setw(9) << std::left << ("task " + std::to_string(i + 1)) << std::right;
    for (std::size_t t = 0; t < T; ++t) {
      if (i <= t) {
        os << std::setw(7) << report.matrix.at(i, t);
      } else {
        os << std::setw(7) << ".";
      }
    }
    os << '\n';
  }
  os << "FAA " << report.faa << "  CAA " << report.caa << "  FFM ";
  if (std::isnan(report.ffm)) {
    os << "n/a";
  } else {
    os << report.ffm;
  }
  os << '\n';
  return os.str();
}

std::string render_heatmap_svg(const MetricsReport& report) {
  const std::size_t T = report.matrix.num_tasks();
  const int cell = 40;
  const int margin = 60;
  const int size = margin + static_cast<int>(T) * cell + 20;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 30
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << margin << "\" y=\"20\" font-size=\"13\">" << report.label << " ("
     << to_string(report.scenario) << ")</text>\n";
  for (std::size_t t = 0; t < T; ++t) {
    os << "<text x=\"" << margin + static_cast<int>(t) * cell + cell / 2 << "\" y=\"" << margin - 8
       << "\" text-anchor=\"middle\">t" << t + 1 << "</text>\n";
    os << "<text x=\"" << margin - 8 << "\" y=\"" << margin + static_cast<int>(t) * cell + cell / 2 + 4
       << "\" text-anchor=\"end\">task " << t + 1 << "</text>\n";
  }
  os << std::fixed << std::setprecision(2);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t t = i; t < T; ++t) {
      const double a = report.matrix.at(i, t);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - a)));
      const int x = margin + static_cast<int>(t) * cell;
      const int y = margin + static_cast<int>(i) * cell;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
         << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" stroke=\"white\"/>\n";
      os << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
         << "\" text-anchor=\"middle\" fill=\"" << (a > 0.5 ? "white" : "black") << "\">" << a
         << "</text>\n";
    }
  }
  os << "<text x=\"" << margin << "\" y=\"" << size + 15 << "\">FAA " << report.faa << "  CAA "
     << report.caa << "  FFM ";
  if (std::isnan(report.ffm)) {
    os << "n/a";
  } else {
    os << report.ffm;
  }
  os << "</text>\n</svg>\n";
  return os.str();
}

}  // namespace hide

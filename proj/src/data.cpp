#include "hide/data.hpp"

#include <algorithm>
#include <cctype>
#include <iterator>
#include <map>
#include <set>

#include "hide/errors.hpp"

namespace hide {

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::CIL: return "cil";
    case Scenario::DIL: return "dil";
    case Scenario::TIL: return "til";
  }
  return "unknown";
}

Scenario scenario_from_string(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "cil") return Scenario::CIL;
  if (lower == "dil") return Scenario::DIL;
  if (lower == "til") return Scenario::TIL;
  throw ConfigError("unknown scenario '" + name + "' (expected cil, dil or til)");
}

void EmbeddingDataset::append(std::span<const double> x, std::uint32_t label, std::uint32_t task) {
  if (dim == 0 && features.rows == 0) {
    dim = static_cast<std::uint32_t>(x.size());
    features = Tensor2(0, dim);
  }
  if (x.size() != dim) throw DimensionError("dataset sample has the wrong dimension");
  features.data.insert(features.data.end(), x.begin(), x.end());
  ++features.rows;
  labels.push_back(label);
  tasks.push_back(task);
  class_count = std::max(class_count, label + 1);
}

EmbeddingDataset EmbeddingDataset::subset(std::span<const std::size_t> indices) const {
  EmbeddingDataset out;
  out.dim = dim;
  out.class_count = class_count;
  out.features = Tensor2(0, dim);
  for (std::size_t i : indices) {
    if (i >= size()) throw IndexError("dataset subset index out of range");
    auto r = features.row(i);
    out.features.data.insert(out.features.data.end(), r.begin(), r.end());
    ++out.features.rows;
    out.labels.push_back(labels[i]);
    out.tasks.push_back(tasks[i]);
  }
  return out;
}

std::vector<std::uint32_t> EmbeddingDataset::label_set() const {
  std::set<std::uint32_t> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

void TaskStream::validate() const {
  if (tasks.empty()) throw ConfigError("task stream is empty");
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (std::size_t u = 0; u < t; ++u) {
      const auto& a = tasks[t].labels;
      const auto& b = tasks[u].labels;
      if (scenario == Scenario::DIL) {
        if (a != b) {
          throw ScenarioError("DIL requires identical label sets; task " + std::to_string(t) +
                              " differs from task " + std::to_string(u));
        }
      } else {
        std::vector<std::uint32_t> common;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
        if (!common.empty()) {
          throw ScenarioError(to_string(scenario) + " requires disjoint label sets; tasks " +
                              std::to_string(u) + " and " + std::to_string(t) + " share class " +
                              std::to_string(common.front()));
        }
      }
    }
  }
}

TaskStream stream_from_datasets(const EmbeddingDataset& train, const EmbeddingDataset& test,
                                Scenario scenario) {
  if (train.dim != test.dim && !test.empty()) {
    throw DimensionError("train and test files have different dimensions");
  }
  std::map<std::uint32_t, std::vector<std::size_t>> train_idx;
  std::map<std::uint32_t, std::vector<std::size_t>> test_idx;
  for (std::size_t i = 0; i < train.size(); ++i) train_idx[train.tasks[i]].push_back(i);
  for (std::size_t i = 0; i < test.size(); ++i) test_idx[test.tasks[i]].push_back(i);

  TaskStream stream;
  stream.scenario = scenario;
  for (const auto& [task, idx] : train_idx) {
    TaskData td;
    td.task_id = task;
    td.train = train.subset(idx);
    auto it = test_idx.find(task);
    td.test = it != test_idx.end() ? test.subset(it->second) : train.subset({});
    td.labels = td.train.label_set();
    stream.tasks.push_back(std::move(td));
  }
  stream.validate();
  return stream;
}

}  // namespace hide

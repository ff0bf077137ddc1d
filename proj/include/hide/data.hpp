#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hide/numerics.hpp"

namespace hide {

enum class Scenario : std::uint8_t { CIL = 0, DIL = 1, TIL = 2 };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

/// Labelled embedding samples; each row carries its class and task id.
struct EmbeddingDataset {
  std::uint32_t dim = 0;
  std::uint32_t class_count = 0;
  Tensor2 features;  // N x dim
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> tasks;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  void append(std::span<const double> x, std::uint32_t label, std::uint32_t task);
  EmbeddingDataset subset(std::span<const std::size_t> indices) const;
  /// Sorted distinct labels.
  std::vector<std::uint32_t> label_set() const;

  bool operator==(const EmbeddingDataset&) const = default;
};

struct TaskData {
  std::uint32_t task_id = 0;
  /// Upstream dataset this task comes from; selects the dataset-shared adapter.
  std::uint32_t dataset_id = 0;
  EmbeddingDataset train;
  EmbeddingDataset test;
  std::vector<std::uint32_t> labels;  // Y_t, sorted
};

struct TaskStream {
  Scenario scenario = Scenario::CIL;
  std::vector<TaskData> tasks;
  /// Classes never shown during the stream, reserved for few-shot episodes.
  EmbeddingDataset holdout;

  /// Throws ScenarioError when label sets break the scenario's rules
  /// (pairwise disjoint for CIL/TIL, identical for DIL).
  void validate() const;
};

/// Groups records by task id (ascending) into a stream.
TaskStream stream_from_datasets(const EmbeddingDataset& train, const EmbeddingDataset& test,
                                Scenario scenario);

}  // namespace hide

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hide/backbone.hpp"
#include "hide/data.hpp"
#include "hide/evaluation.hpp"
#include "hide/objectives.hpp"
#include "hide/statistics.hpp"

namespace hide {

enum class TapSchedule : std::uint8_t { PerEpoch = 0, PostHoc = 1 };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.005;
  PeftConfig peft;
  /// Centroids per class statistic.
  std::size_t centroids = 5;
  /// Unset: per-class RMS within-cluster deviation.
  std::optional<double> noise_sigma;
  std::size_t pseudo_per_class = 64;
  /// Per-class rows in each balanced TII/TAP minibatch.
  std::size_t pseudo_batch_per_class = 8;
  bool resample_each_epoch = true;
  CRConfig cr;
  SoftmaxScope wtp_scope = SoftmaxScope::TaskLocal;
  TapSchedule tap_schedule = TapSchedule::PerEpoch;
  /// Train a dataset-shared LoRA by sequential fine-tuning alongside e_t.
  bool shared_lora = false;
  std::size_t shared_lora_rank = 8;
  std::uint64_t seed = 0;

  /// Full-scale values (50 epochs, batch 128). The defaults above are desk-scale.
  static TrainConfig full_scale();
  void validate() const;

  bool operator==(const TrainConfig&) const = default;
};

struct TaskRecord {
  std::uint32_t task_id = 0;
  std::uint32_t dataset_id = 0;
  std::vector<std::uint32_t> classes;

  bool operator==(const TaskRecord&) const = default;
};

/// LoRA over the frozen backbone, fine-tuned sequentially with plain cross-entropy on
/// every task of one upstream dataset.
struct SharedAdapter {
  std::uint32_t dataset_id = 0;
  PeftParams lora;
  LinearHead head;
  std::vector<std::uint32_t> classes;

  bool operator==(const SharedAdapter&) const = default;
};

struct ModelState {
  ModelState(BackboneSurrogate backbone_, TrainConfig config_, Scenario scenario_)
      : backbone(std::move(backbone_)), config(std::move(config_)), scenario(scenario_) {}

  BackboneSurrogate backbone;
  TrainConfig config;
  Scenario scenario;
  std::vector<PeftParams> peft_per_task;
  std::vector<TaskRecord> tasks;
  /// psi output j predicts class class_columns[j].
  std::vector<std::uint32_t> class_columns;
  HeadParams heads;
  StatStore stats;
  std::vector<SharedAdapter> shared;
  /// Rows appended by train_sequence after each task.
  AccuracyMatrix accuracy;

  std::size_t column_of(std::uint32_t class_id) const;
  std::vector<std::size_t> task_columns(std::size_t task_index) const;
  const SharedAdapter* shared_for(std::uint32_t dataset_id) const;
};

struct EngineEvent {
  std::string kind;
  std::size_t task = 0;
  std::size_t epoch = 0;
  std::uint32_t class_id = 0;
  double value = 0.0;
};

using EventSink = std::function<void(const EngineEvent&)>;

/// One task of the training algorithm: unadapted statistics, e_t initialisation, E epochs
/// of (WTP, TII, TAP) updates, then adapted statistics.
void train_task(ModelState& state, const TaskData& task, const EventSink& sink = {});

struct SequenceResult {
  ModelState state;
  AccuracyMatrix accuracy;
};

ModelState make_state(const BackboneSurrogate& backbone, const TrainConfig& config,
                      Scenario scenario);

/// Trains the remaining tasks of `stream` (those beyond state.tasks.size()), evaluating
/// all seen test sets after each one.
void continue_sequence(ModelState& state, const TaskStream& stream, const EventSink& sink = {},
                       std::size_t threads = 1);

SequenceResult train_sequence(const TaskStream& stream, const TrainConfig& config,
                              const BackboneSurrogate& backbone, const EventSink& sink = {},
                              std::size_t threads = 1);

struct Prediction {
  std::size_t task_index = 0;
  std::uint32_t label = 0;
  std::vector<double> task_probs;
  std::vector<double> class_probs;
};

/// Two-stage inference: task identity from the unadapted representation, then the label
/// from the representation adapted by that task's parameters. DIL states marginalise the
/// within-task predictions over the task posterior.
Prediction predict(const ModelState& state, std::span<const double> x);

/// Task-identity-given inference restricted to that task's classes.
Prediction predict_with_task(const ModelState& state, std::span<const double> x,
                             std::size_t task_index);

/// Naive sequential fine-tuning: one PEFT set and one shared head trained with plain
/// cross-entropy task after task. Used as the forgetting reference.
AccuracyMatrix train_baseline_sequence(const TaskStream& stream, const TrainConfig& config,
                                       const BackboneSurrogate& backbone);

struct FewShotEpisode {
  EmbeddingDataset support;
  EmbeddingDataset query;
};

struct FewShotConfig {
  std::size_t steps = 100;
  double learning_rate = 0.05;
  bool use_shared_lora = true;
};

/// Draws an N-way K-shot episode from `pool` with `queries` query samples per class.
FewShotEpisode sample_episode(const EmbeddingDataset& pool, std::size_t ways, std::size_t shots,
                              std::size_t queries, std::uint64_t seed);

/// Fits a fresh N-way head on support representations (backbone + shared LoRA when
/// enabled) and returns query accuracy.
double few_shot_eval(const ModelState& state, const FewShotEpisode& episode,
                     const FewShotConfig& config);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

}  // namespace hide

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hide/backbone.hpp"
#include "hide/data.hpp"
#include "hide/engine.hpp"

namespace hide {

// ---------------------------------------------------------------------------------------
// Embedding files
//
//   offset 0   "HIDE"            4 bytes
//   offset 4   version           u16 LE (currently 1)
//   offset 6   dim               u32 LE
//   offset 10  sample_count      u32 LE
//   offset 14  class_count       u32 LE
//   offset 18  records           sample_count x { class_id u32, task_id u32, dim x f32 }
//
// Everything little-endian; the file must end exactly after the last record.
// ---------------------------------------------------------------------------------------

inline constexpr std::uint16_t kEmbeddingFileVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderBytes = 18;

std::vector<std::uint8_t> serialize_embeddings(const EmbeddingDataset& ds);
EmbeddingDataset parse_embeddings(std::span<const std::uint8_t> bytes);
void save_embeddings(const EmbeddingDataset& ds, const std::string& path);
EmbeddingDataset load_embeddings(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------------------
// Synthetic streams
// ---------------------------------------------------------------------------------------

struct SynthSpec {
  std::size_t tasks = 10;
  std::size_t classes_per_task = 2;
  std::size_t dim = 64;
  std::size_t samples_per_class = 100;
  /// Distance between class means, in units of sigma.
  double separation = 4.0;
  /// RMS radius of each class cluster.
  double sigma = 1.0;
  /// The class signal is repeated across this many equal chunks of each vector, so it
  /// lines up with the backbone's token grid. 1 gives an unstructured subspace of R^dim.
  std::size_t token_groups = 4;
  /// Dimension of the subspace holding the class means; 0 selects min(dim / token_groups, #means).
  std::size_t latent_dim = 0;
  /// Class-independent nuisance shared by every class (stream and holdout): a random
  /// nuisance_dim-dimensional subspace, orthogonal to the class means and repeated across
  /// the token chunks like them, with RMS radius nuisance_scale * sigma. 0 disables it.
  std::size_t nuisance_dim = 0;
  double nuisance_scale = 0.0;
  /// Extra classes generated with the same structure but withheld from the stream.
  std::size_t holdout_classes = 0;
  Scenario scenario = Scenario::CIL;
  double train_fraction = 0.8;

  void validate() const;
  bool operator==(const SynthSpec&) const = default;
};

/// Seeded Gaussian clusters, one per class (DIL: one per class and domain), split 80/20
/// per class into train and test. Class ids are task-major; DIL reuses 0..C-1 in every task.
TaskStream synth_stream(std::uint64_t seed, const SynthSpec& spec);

/// Class means actually used by synth_stream, one row per generated class (stream classes
/// first, holdout classes after). DIL streams get one row per (domain, class) pair.
Tensor2 synth_class_means(std::uint64_t seed, const SynthSpec& spec);

// ---------------------------------------------------------------------------------------
// Run configuration (JSON)
// ---------------------------------------------------------------------------------------

struct DataPaths {
  std::string train;
  std::string test;
  std::string holdout;
};

struct OutputPaths {
  std::string state;
  std::string metrics;
  std::string svg;
};

struct FewShotProtocol {
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t queries = 15;
  std::size_t episodes = 20;
  FewShotConfig finetune;
};

struct RunConfig {
  Scenario scenario = Scenario::CIL;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  BackboneConfig backbone;
  /// Backbone weights come from this seed; the run seed drives everything else.
  std::uint64_t backbone_seed = 0;
  TrainConfig train;
  /// Exactly one of `data` (embedding files) and `synthetic` is used; synthetic wins when set.
  std::optional<SynthSpec> synthetic;
  DataPaths data;
  OutputPaths output;
  FewShotProtocol fewshot;
};

/// Parses a RunConfig document; unknown keys anywhere raise ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& config);

/// Builds the task stream named by a config (synthetic or from embedding files).
TaskStream stream_from_config(const RunConfig& config);

// ---------------------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------------------

inline constexpr std::uint16_t kStateFileVersion = 1;

std::vector<std::uint8_t> serialize_state(const ModelState& state);
ModelState parse_state(std::span<const std::uint8_t> bytes);
void save_state(const ModelState& state, const std::string& path);
ModelState load_state(const std::string& path);

/// Canonical bytes of one PEFT parameter set (used for freezing checks).
std::vector<std::uint8_t> serialize_peft(const PeftParams& peft);

}  // namespace hide

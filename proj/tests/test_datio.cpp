#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <vector>

#include "hide/datio.hpp"
#include "hide/engine.hpp"

using namespace hide;

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, 4);
  put_u32(b, bits);
}

// One record of dimension 4: class 2, task 1, values 1.5, -2, 0.25, 3.
std::vector<std::uint8_t> minimal_file() {
  std::vector<std::uint8_t> b{'H', 'I', 'D', 'E'};
  put_u16(b, 1);
  put_u32(b, 4);
  put_u32(b, 1);
  put_u32(b, 3);
  put_u32(b, 2);
  put_u32(b, 1);
  for (float f : {1.5f, -2.0f, 0.25f, 3.0f}) put_f32(b, f);
  return b;
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 2;
  c.pseudo_per_class = 16;
  return c;
}

}  // namespace

TEST_CASE("hand-built embedding file") {
  const auto bytes = minimal_file();
  REQUIRE(bytes.size() == kEmbeddingHeaderBytes + 8 + 16);
  const EmbeddingDataset ds = parse_embeddings(bytes);
  CHECK(ds.dim == 4);
  CHECK(ds.class_count == 3);
  REQUIRE(ds.size() == 1);
  CHECK(ds.labels[0] == 2);
  CHECK(ds.tasks[0] == 1);
  CHECK(ds.features.data == std::vector<double>{1.5, -2.0, 0.25, 3.0});
  CHECK(serialize_embeddings(ds) == bytes);
}

TEST_CASE("embedding file errors") {
  auto bytes = minimal_file();
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    try {
      parse_embeddings(bytes);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("future version") {
    bytes[4] = 2;
    CHECK_THROWS_AS(parse_embeddings(bytes), VersionError);
  }
  SUBCASE("truncated payload") {
    bytes.pop_back();
    CHECK_THROWS_AS(parse_embeddings(bytes), FormatError);
  }
  SUBCASE("truncated header") {
    bytes.resize(10);
    CHECK_THROWS_AS(parse_embeddings(bytes), FormatError);
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(0);
    CHECK_THROWS_AS(parse_embeddings(bytes), FormatError);
  }
  SUBCASE("class id out of range") {
    bytes[kEmbeddingHeaderBytes] = 3;
    CHECK_THROWS_AS(parse_embeddings(bytes), FormatError);
  }
  SUBCASE("count mismatch") {
    bytes[10] = 2;
    CHECK_THROWS_AS(parse_embeddings(bytes), FormatError);
  }
}

TEST_CASE("embedding save and load round trip") {
  SynthSpec spec;
  spec.tasks = 2;
  spec.samples_per_class = 10;
  const TaskStream s = synth_stream(1, spec);
  EmbeddingDataset ds = s.tasks[0].train;
  // f32 on disk: values are rounded once, then stable.
  for (auto& v : ds.features.data) v = static_cast<double>(static_cast<float>(v));
  const auto path = temp_file("hide_datio_roundtrip.emb");
  save_embeddings(ds, path.string());
  const EmbeddingDataset back = load_embeddings(path.string());
  std::filesystem::remove(path);
  CHECK(back == ds);
}

TEST_CASE("synthetic streams") {
  SynthSpec spec;
  const TaskStream s = synth_stream(3, spec);
  REQUIRE(s.tasks.size() == 10);
  std::set<std::uint32_t> seen;
  for (const auto& t : s.tasks) {
    CHECK(t.labels.size() == 2);
    for (auto c : t.labels) CHECK(seen.insert(c).second);
    CHECK(t.train.size() == 160);
    CHECK(t.test.size() == 40);
  }
  CHECK(seen.size() == 20);
  CHECK_NOTHROW(s.validate());

  const Tensor2 means = synth_class_means(3, spec);
  REQUIRE(means.rows == 20);
  for (std::size_t a = 0; a < means.rows; ++a) {
    for (std::size_t b = a + 1; b < means.rows; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < means.cols; ++j) {
        d2 += (means(a, j) - means(b, j)) * (means(a, j) - means(b, j));
      }
      CHECK(std::sqrt(d2) >= spec.separation * spec.sigma - 1e-9);
    }
  }

  const TaskStream again = synth_stream(3, spec);
  CHECK(again.tasks[4].train == s.tasks[4].train);
  CHECK(again.tasks[9].test == s.tasks[9].test);
  CHECK_FALSE(synth_stream(4, spec).tasks[0].train == s.tasks[0].train);
}

TEST_CASE("synthetic spec validation") {
  SynthSpec spec;
  spec.tasks = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = SynthSpec{};
  spec.token_groups = 3;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = SynthSpec{};
  spec.scenario = Scenario::DIL;
  spec.holdout_classes = 2;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("zero separation leaves a nearest-mean classifier at chance") {
  SynthSpec spec;
  spec.tasks = 5;
  spec.separation = 0.0;
  const TaskStream s = synth_stream(5, spec);
  // Class means estimated on train, scored on test.
  std::vector<std::vector<double>> centre(10, std::vector<double>(spec.dim, 0.0));
  std::vector<double> count(10, 0.0);
  for (const auto& t : s.tasks) {
    for (std::size_t i = 0; i < t.train.size(); ++i) {
      for (std::size_t j = 0; j < spec.dim; ++j) centre[t.train.labels[i]][j] += t.train.features(i, j);
      count[t.train.labels[i]] += 1.0;
    }
  }
  for (std::size_t c = 0; c < 10; ++c) {
    for (auto& v : centre[c]) v /= count[c];
  }
  double correct = 0.0;
  double total = 0.0;
  for (const auto& t : s.tasks) {
    for (std::size_t i = 0; i < t.test.size(); ++i) {
      std::vector<double> neg_dist(10);
      for (std::size_t c = 0; c < 10; ++c) {
        double d = 0.0;
        for (std::size_t j = 0; j < spec.dim; ++j) {
          d += std::pow(t.test.features(i, j) - centre[c][j], 2);
        }
        neg_dist[c] = -d;
      }
      correct += argmax(neg_dist) == t.test.labels[i] ? 1.0 : 0.0;
      total += 1.0;
    }
  }
  CHECK(correct / total < 0.2);
}

TEST_CASE("DIL and holdout layouts") {
  SynthSpec spec;
  spec.tasks = 3;
  spec.samples_per_class = 10;
  spec.scenario = Scenario::DIL;
  const TaskStream dil = synth_stream(6, spec);
  CHECK(dil.tasks[0].labels == dil.tasks[2].labels);
  CHECK(dil.tasks[0].labels == std::vector<std::uint32_t>{0, 1});

  spec.scenario = Scenario::CIL;
  spec.holdout_classes = 4;
  const TaskStream cil = synth_stream(6, spec);
  CHECK(cil.holdout.label_set() == std::vector<std::uint32_t>{6, 7, 8, 9});
  CHECK(cil.holdout.size() == 40);
}

TEST_CASE("run config parsing") {
  SUBCASE("defaults") {
    const RunConfig c = parse_run_config("{}");
    CHECK(c.scenario == Scenario::CIL);
    CHECK(c.train.epochs == 20);
    CHECK(c.train.cr.temperature == 0.8);
    CHECK(c.train.cr.lambda == 0.1);
    CHECK(c.train.peft.prompt_len == 20);
    CHECK_FALSE(c.synthetic.has_value());
  }
  SUBCASE("values and round trip") {
    const RunConfig c = parse_run_config(R"({
      "scenario": "til", "seed": 7,
      "train": {"epochs": 4, "peft": {"kind": "lora", "lora_rank": 4},
                "wtp_scope": "global", "noise_sigma": 0.25},
      "synthetic": {"tasks": 3, "separation": 2.5},
      "fewshot": {"ways": 3}
    })");
    CHECK(c.scenario == Scenario::TIL);
    CHECK(c.train.seed == 7);
    CHECK(c.train.epochs == 4);
    CHECK(c.train.peft.kind == PeftKind::LoRA);
    CHECK(c.train.peft.lora_rank == 4);
    CHECK(c.train.wtp_scope == SoftmaxScope::Global);
    CHECK(c.train.noise_sigma == 0.25);
    REQUIRE(c.synthetic.has_value());
    CHECK(c.synthetic->tasks == 3);
    CHECK(c.synthetic->scenario == Scenario::TIL);
    CHECK(c.fewshot.ways == 3);

    const RunConfig back = parse_run_config(dump_run_config(c));
    CHECK(back.train == c.train);
    CHECK(back.synthetic == c.synthetic);
    CHECK(back.backbone == c.backbone);
    CHECK(dump_run_config(back) == dump_run_config(c));
  }
  SUBCASE("rejections") {
    CHECK_THROWS_AS(parse_run_config(R"({"epochs": 3})"), ConfigError);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"epoch": 3}})"), ConfigError);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"peft": {"kind": "bitfit"}}})"), ConfigError);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"epochs": -1}})"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
  }
}

TEST_CASE("model state persistence") {
  const auto bb = init_backbone(8, BackboneConfig{});
  SynthSpec spec;
  spec.tasks = 2;
  spec.samples_per_class = 30;
  const TaskStream stream = synth_stream(8, spec);
  TrainConfig cfg = quick_config();
  cfg.shared_lora = true;
  const auto r = train_sequence(stream, cfg, bb);

  const auto path = temp_file("hide_datio_state.bin");
  save_state(r.state, path.string());
  const ModelState back = load_state(path.string());
  std::filesystem::remove(path);
  CHECK(serialize_state(back) == serialize_state(r.state));
  CHECK(back.stats == r.state.stats);
  CHECK(back.accuracy == r.state.accuracy);

  Rng rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x(64);
    for (auto& v : x) v = n(rng);
    const Prediction a = predict(r.state, x);
    const Prediction b = predict(back, x);
    CHECK(a.label == b.label);
    CHECK(a.class_probs == b.class_probs);
    CHECK(a.task_probs == b.task_probs);
  }

  auto bytes = serialize_state(r.state);
  SUBCASE("truncation") {
    for (std::size_t cut : {std::size_t{3}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
      std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
      CHECK_THROWS_AS(parse_state(part), FormatError);
    }
  }
  SUBCASE("version") {
    bytes[4] = 9;
    CHECK_THROWS_AS(parse_state(bytes), VersionError);
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(1);
    CHECK_THROWS_AS(parse_state(bytes), FormatError);
  }
}

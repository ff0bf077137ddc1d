#include "hide/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hide/datio.hpp"
#include "hide/engine.hpp"
#include "hide/evaluation.hpp"
#include "hide/theory.hpp"

namespace hide {

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool verbose = false;
};

RunConfig resolve_config(const GlobalFlags& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  if (g.seed) {
    c.seed = *g.seed;
    c.train.seed = *g.seed;
  }
  if (g.deterministic) c.threads = 1;
  if (c.threads == 0) c.threads = 1;
  return c;
}

TaskStream resolve_stream(RunConfig& c) {
  if (!c.synthetic && c.data.train.empty()) c.synthetic = SynthSpec{};
  TaskStream stream = stream_from_config(c);
  const std::size_t dim = stream.tasks.front().train.dim;
  if (dim != c.backbone.input_dim) {
    throw ConfigError("data dimension " + std::to_string(dim) + " differs from backbone.input_dim " +
                      std::to_string(c.backbone.input_dim));
  }
  return stream;
}

EventSink make_sink(const GlobalFlags& g, std::ostream& out) {
  if (!g.verbose) return {};
  return [&out](const EngineEvent& e) {
    nlohmann::json j{{"event", e.kind}, {"task", e.task}, {"epoch", e.epoch},
                     {"class", e.class_id}, {"value", e.value}};
    out << j.dump() << '\n';
  };
}

void write_outputs(const MetricsReport& report, const OutputPaths& paths, std::ostream& out) {
  if (!paths.metrics.empty()) {
    write_metrics_report(report, paths.metrics);
    out << "metrics written to " << paths.metrics << '\n';
  }
  if (!paths.svg.empty()) {
    std::ofstream svg(paths.svg);
    if (!svg) throw DataError("cannot write " + paths.svg);
    svg << render_heatmap_svg(report);
    out << "heatmap written to " << paths.svg << '\n';
  }
}

// ---- subcommands ------------------------------------------------------------------------

struct GenArgs {
  std::string out_dir;
  std::optional<std::size_t> tasks, classes_per_task, dim, samples_per_class, holdout, token_groups,
      nuisance_dim;
  std::optional<double> separation, nuisance_scale;
  std::optional<std::string> scenario;
};

int cmd_gen(const GlobalFlags& g, const GenArgs& a, std::ostream& out) {
  RunConfig c = resolve_config(g);
  if (a.scenario) c.scenario = scenario_from_string(*a.scenario);
  SynthSpec spec = c.synthetic.value_or(SynthSpec{});
  if (a.tasks) spec.tasks = *a.tasks;
  if (a.classes_per_task) spec.classes_per_task = *a.classes_per_task;
  if (a.dim) spec.dim = *a.dim;
  if (a.samples_per_class) spec.samples_per_class = *a.samples_per_class;
  if (a.holdout) spec.holdout_classes = *a.holdout;
  if (a.token_groups) spec.token_groups = *a.token_groups;
  if (a.nuisance_dim) spec.nuisance_dim = *a.nuisance_dim;
  if (a.nuisance_scale) spec.nuisance_scale = *a.nuisance_scale;
  if (a.separation) spec.separation = *a.separation;
  spec.scenario = c.scenario;
  const TaskStream stream = synth_stream(c.seed, spec);

  EmbeddingDataset train, test;
  for (const auto& t : stream.tasks) {
    for (std::size_t i = 0; i < t.train.size(); ++i) {
      train.append(t.train.features.row(i), t.train.labels[i], t.train.tasks[i]);
    }
    for (std::size_t i = 0; i < t.test.size(); ++i) {
      test.append(t.test.features.row(i), t.test.labels[i], t.test.tasks[i]);
    }
  }
  const std::uint32_t classes = stream.tasks.front().train.class_count;
  train.class_count = test.class_count = classes;
  std::filesystem::create_directories(a.out_dir);
  const auto dir = std::filesystem::path(a.out_dir);
  save_embeddings(train, (dir / "train.emb").string());
  save_embeddings(test, (dir / "test.emb").string());
  out << "wrote " << train.size() << " train and " << test.size() << " test records ("
      << stream.tasks.size() << " " << to_string(stream.scenario) << " tasks, dim " << spec.dim
      << ") to " << a.out_dir << '\n';
  if (!stream.holdout.empty()) {
    save_embeddings(stream.holdout, (dir / "holdout.emb").string());
    out << "wrote " << stream.holdout.size() << " holdout records\n";
  }
  return kExitOk;
}

struct TrainArgs {
  std::string state, metrics, svg, resume, baseline_metrics;
};

int cmd_train(const GlobalFlags& g, const TrainArgs& a, std::ostream& out) {
  RunConfig c = resolve_config(g);
  if (!a.state.empty()) c.output.state = a.state;
  if (!a.metrics.empty()) c.output.metrics = a.metrics;
  if (!a.svg.empty()) c.output.svg = a.svg;
  const TaskStream stream = resolve_stream(c);
  const EventSink sink = make_sink(g, out);

  std::optional<ModelState> state;
  if (!a.resume.empty()) {
    state.emplace(load_state(a.resume));
    if (!(state->config == c.train)) {
      throw ConfigError("resumed state was trained with a different training configuration");
    }
  } else {
    state.emplace(make_state(init_backbone(c.backbone_seed, c.backbone), c.train, c.scenario));
  }
  continue_sequence(*state, stream, sink, c.threads);

  if (!c.output.state.empty()) {
    save_state(*state, c.output.state);
    out << "state written to " << c.output.state << '\n';
  }
  const MetricsReport report = make_report(state->accuracy, c.scenario, "hide");
  out << render_metrics_table(report);
  write_outputs(report, c.output, out);
  out << "TII accuracy " << std::fixed << std::setprecision(3)
      << tii_accuracy(*state, stream.tasks) << '\n';

  if (!a.baseline_metrics.empty()) {
    const AccuracyMatrix base =
        train_baseline_sequence(stream, c.train, init_backbone(c.backbone_seed, c.backbone));
    const MetricsReport br = make_report(base, c.scenario, "sequential baseline");
    out << render_metrics_table(br);
    write_metrics_report(br, a.baseline_metrics);
  }
  return kExitOk;
}

struct EvalArgs {
  std::string state;
  std::optional<std::string> scenario;
};

int cmd_eval(const GlobalFlags& g, const EvalArgs& a, std::ostream& out) {
  RunConfig c = resolve_config(g);
  const ModelState state = load_state(a.state);
  c.scenario = state.scenario;
  c.backbone.input_dim = state.backbone.config().input_dim;
  const TaskStream stream = resolve_stream(c);
  const Scenario scenario = a.scenario ? scenario_from_string(*a.scenario) : state.scenario;

  const std::size_t seen = std::min(stream.tasks.size(), state.tasks.size());
  const std::span<const TaskData> tasks(stream.tasks.data(), seen);
  const auto column = evaluate_scenario(state, tasks, scenario, c.threads);
  out << "final accuracies (" << to_string(scenario) << "):";
  out << std::fixed << std::setprecision(4);
  for (double v : column) out << ' ' << v;
  out << '\n';
  if (state.accuracy.num_tasks() > 0) {
    out << render_metrics_table(make_report(state.accuracy, state.scenario, "stored matrix"));
  }
  double mean = 0.0;
  for (double v : column) mean += v;
  out << "FAA (recomputed) " << mean / static_cast<double>(column.size()) << '\n';
  out << "TII accuracy " << tii_accuracy(state, tasks) << '\n';
  const BoundReport b = empirical_bounds_from_model(state, tasks);
  out << "empirical bound: L=" << b.loss << " bound=" << b.bound
      << (b.holds ? " holds" : " VIOLATED") << '\n';
  return b.holds ? kExitOk : kExitFailure;
}

struct PredictArgs {
  std::string state, input, output;
};

int cmd_predict(const GlobalFlags&, const PredictArgs& a, std::ostream& out) {
  const ModelState state = load_state(a.state);
  const EmbeddingDataset ds = load_embeddings(a.input);
  std::ofstream file;
  if (!a.output.empty()) {
    file.open(a.output);
    if (!file) throw DataError("cannot write " + a.output);
  }
  std::ostream& dst = a.output.empty() ? out : file;
  dst << "index,task,label,confidence\n";
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Prediction p = predict(state, ds.features.row(i));
    const double conf = *std::max_element(p.class_probs.begin(), p.class_probs.end());
    dst << i << ',' << p.task_index << ',' << p.label << ',' << std::setprecision(6) << conf << '\n';
    if (p.label == ds.labels[i]) ++correct;
  }
  if (!a.output.empty()) out << "predictions written to " << a.output << '\n';
  if (!ds.empty()) {
    out << "accuracy against file labels " << std::fixed << std::setprecision(4)
        << static_cast<double>(correct) / static_cast<double>(ds.size()) << '\n';
  }
  return kExitOk;
}

struct TheoremArgs {
  std::size_t tables = 10000;
  std::size_t samples = 8;
  std::size_t tasks = 4;
  std::size_t classes = 3;
  std::string state;
};

int cmd_check_theorems(const GlobalFlags& g, const TheoremArgs& a, std::ostream& out) {
  const RunConfig c = resolve_config(g);
  Rng rng(derive_seed(c.seed, 0x7e0));
  RandomTableSpec spec;
  spec.samples = a.samples;
  spec.tasks = a.tasks;
  spec.classes_per_task = a.classes;
  double identity = 0.0, til = 0.0;
  std::size_t th1_fail = 0, th3_fail = 0, nec_fail = 0, nec_skipped = 0, infinite = 0;
  double th1_slack = INFINITY, th3_slack = INFINITY;
  for (std::size_t n = 0; n < a.tables; ++n) {
    const ProbTable cil = random_cil_table(rng, spec);
    identity = std::max(identity, check_cil_identity(cil));
    til = std::max(til, til_reduction_deviation(cil));
    const BoundReport r1 = check_theorem1(cil);
    th1_fail += r1.holds ? 0 : 1;
    infinite += r1.infinite ? 1 : 0;
    th1_slack = std::min(th1_slack, r1.slack);
    const NecessityReport nr = check_necessity(cil, r1.loss);
    if (!nr.applicable) {
      ++nec_skipped;
    } else if (!nr.holds) {
      ++nec_fail;
    }
    const ProbTable dil = random_dil_table(rng, spec);
    const BoundReport r3 = check_theorem3_dil(dil);
    th3_fail += r3.holds ? 0 : 1;
    th3_slack = std::min(th3_slack, r3.slack);
    const NecessityReport nd = check_necessity(dil, std::max(r3.loss, 0.0));
    if (!nd.applicable) {
      ++nec_skipped;
    } else if (!nd.holds) {
      ++nec_fail;
    }
  }
  out << std::scientific << std::setprecision(3);
  out << "check                     result\n";
  out << "CIL identity max dev      " << identity << (identity <= 1e-9 ? "  ok" : "  FAIL") << '\n';
  out << "TIL reduction max dev     " << til << (til <= 1e-12 ? "  ok" : "  FAIL") << '\n';
  out << "CIL bound violations      " << th1_fail << " / " << a.tables << "  (min slack " << th1_slack
      << ", infinite " << infinite << ")\n";
  out << "DIL bound violations      " << th3_fail << " / " << a.tables << "  (min slack " << th3_slack
      << ")\n";
  out << "necessity violations      " << nec_fail << " (" << nec_skipped << " not applicable)\n";
  bool ok = identity <= 1e-9 && til <= 1e-12 && th1_fail == 0 && th3_fail == 0 && nec_fail == 0;

  if (!a.state.empty()) {
    RunConfig rc = c;
    const ModelState state = load_state(a.state);
    rc.scenario = state.scenario;
    rc.backbone.input_dim = state.backbone.config().input_dim;
    const TaskStream stream = resolve_stream(rc);
    const std::size_t seen = std::min(stream.tasks.size(), state.tasks.size());
    const BoundReport b = empirical_bounds_from_model(state, {stream.tasks.data(), seen});
    out << std::fixed << std::setprecision(4);
    out << "empirical delta " << b.delta << " epsilon " << b.epsilon << " eta " << b.eta
        << " L " << b.loss << " bound " << b.bound << (b.holds ? "  ok" : "  FAIL") << '\n';
    ok = ok && b.holds;
  }
  return ok ? kExitOk : kExitFailure;
}

struct FewShotArgs {
  std::string state;
  std::optional<std::size_t> ways, shots, queries, episodes;
  bool no_shared = false;
  bool random_labels = false;
};

int cmd_fewshot(const GlobalFlags& g, const FewShotArgs& a, std::ostream& out) {
  RunConfig c = resolve_config(g);
  const ModelState state = load_state(a.state);
  FewShotProtocol p = c.fewshot;
  if (a.ways) p.ways = *a.ways;
  if (a.shots) p.shots = *a.shots;
  if (a.queries) p.queries = *a.queries;
  if (a.episodes) p.episodes = *a.episodes;
  if (a.no_shared) p.finetune.use_shared_lora = false;
  if (p.episodes == 0) throw ConfigError("fewshot needs at least one episode");

  EmbeddingDataset pool;
  if (!c.data.holdout.empty()) {
    pool = load_embeddings(c.data.holdout);
  } else {
    c.scenario = state.scenario;
    c.backbone.input_dim = state.backbone.config().input_dim;
    pool = resolve_stream(c).holdout;
  }
  if (pool.empty()) throw ConfigError("fewshot needs a holdout pool (data.holdout or synthetic.holdout_classes)");

  double total = 0.0;
  for (std::size_t e = 0; e < p.episodes; ++e) {
    FewShotEpisode ep = sample_episode(pool, p.ways, p.shots, p.queries, derive_seed(c.seed, 0xf5, e));
    if (a.random_labels) {
      Rng rng(derive_seed(c.seed, 0xf6, e));
      std::shuffle(ep.query.labels.begin(), ep.query.labels.end(), rng);
    }
    const double acc = few_shot_eval(state, ep, p.finetune);
    total += acc;
    if (g.verbose) {
      out << nlohmann::json{{"event", "episode"}, {"index", e}, {"accuracy", acc}}.dump() << '\n';
    }
  }
  out << std::fixed << std::setprecision(4) << p.ways << "-way " << p.shots << "-shot accuracy over "
      << p.episodes << " episodes: " << total / static_cast<double>(p.episodes)
      << (p.finetune.use_shared_lora ? " (shared LoRA)" : " (frozen backbone)") << '\n';
  return kExitOk;
}

struct ReportArgs {
  std::string metrics, svg;
};

int cmd_report(const GlobalFlags&, const ReportArgs& a, std::ostream& out) {
  const MetricsReport r = read_metrics_report(a.metrics);
  out << render_metrics_table(r);
  if (!a.svg.empty()) {
    std::ofstream svg(a.svg);
    if (!svg) throw DataError("cannot write " + a.svg);
    svg << render_heatmap_svg(r);
    out << "heatmap written to " << a.svg << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical continual learning on frozen-backbone embeddings", "hide"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  GlobalFlags g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config_path, "RunConfig JSON file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "Override the run seed");
  app.add_flag("--deterministic", g.deterministic, "Force single-threaded evaluation");
  app.add_flag("--verbose", g.verbose, "Emit progress events as JSON lines on stdout");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Write a synthetic task stream as embedding files");
  gen_cmd->add_option("--out", gen.out_dir, "Output directory")->required();
  gen_cmd->add_option("--tasks", gen.tasks);
  gen_cmd->add_option("--classes-per-task", gen.classes_per_task);
  gen_cmd->add_option("--dim", gen.dim);
  gen_cmd->add_option("--samples-per-class", gen.samples_per_class);
  gen_cmd->add_option("--separation", gen.separation, "Class-mean distance in units of sigma");
  gen_cmd->add_option("--holdout-classes", gen.holdout);
  gen_cmd->add_option("--token-groups", gen.token_groups, "Chunks the class signal is repeated over");
  gen_cmd->add_option("--nuisance-dim", gen.nuisance_dim, "Dimension of the shared nuisance subspace");
  gen_cmd->add_option("--nuisance-scale", gen.nuisance_scale, "Nuisance radius in units of sigma");
  gen_cmd->add_option("--scenario", gen.scenario, "cil, dil or til");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train over the task stream and write state + metrics");
  train_cmd->add_option("--state", train.state, "Where to write the model state");
  train_cmd->add_option("--metrics", train.metrics, "Where to write the metrics report");
  train_cmd->add_option("--svg", train.svg, "Where to write the accuracy heatmap");
  train_cmd->add_option("--resume", train.resume, "Continue from a saved state")->check(CLI::ExistingFile);
  train_cmd->add_option("--baseline-metrics", train.baseline_metrics,
                        "Also train the sequential baseline and write its report here");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Re-evaluate a saved state on the configured test sets");
  eval_cmd->add_option("--state", eval.state)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--scenario", eval.scenario, "Evaluate under another scenario (e.g. til)");

  PredictArgs pred;
  auto* pred_cmd = app.add_subcommand("predict", "Predict labels for an embedding file");
  pred_cmd->add_option("--state", pred.state)->required()->check(CLI::ExistingFile);
  pred_cmd->add_option("--input", pred.input)->required()->check(CLI::ExistingFile);
  pred_cmd->add_option("--out", pred.output, "CSV output (stdout when omitted)");

  TheoremArgs th;
  auto* th_cmd = app.add_subcommand("check-theorems", "Run the numerical theory checks");
  th_cmd->add_option("--random-tables", th.tables, "Random tables per check")->check(CLI::PositiveNumber);
  th_cmd->add_option("--samples", th.samples, "Samples per table")->check(CLI::PositiveNumber);
  th_cmd->add_option("--tasks", th.tasks)->check(CLI::PositiveNumber);
  th_cmd->add_option("--classes", th.classes, "Classes per task")->check(CLI::PositiveNumber);
  th_cmd->add_option("--state", th.state, "Also check the empirical bound of a trained state")
      ->check(CLI::ExistingFile);

  FewShotArgs fs;
  auto* fs_cmd = app.add_subcommand("fewshot", "N-way K-shot episodes on holdout classes");
  fs_cmd->add_option("--state", fs.state)->required()->check(CLI::ExistingFile);
  fs_cmd->add_option("--ways", fs.ways);
  fs_cmd->add_option("--shots", fs.shots);
  fs_cmd->add_option("--queries", fs.queries);
  fs_cmd->add_option("--episodes", fs.episodes);
  fs_cmd->add_flag("--no-shared-lora", fs.no_shared, "Use the frozen backbone only");
  fs_cmd->add_flag("--random-labels", fs.random_labels, "Shuffle query labels (chance control)");

  ReportArgs rep;
  auto* rep_cmd = app.add_subcommand("report", "Render a metrics report as a table and SVG");
  rep_cmd->add_option("--metrics", rep.metrics)->required()->check(CLI::ExistingFile);
  rep_cmd->add_option("--svg", rep.svg);

  std::vector<std::string> argv_store{"hide"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (*gen_cmd) return cmd_gen(g, gen, out);
    if (*train_cmd) return cmd_train(g, train, out);
    if (*eval_cmd) return cmd_eval(g, eval, out);
    if (*pred_cmd) return cmd_predict(g, pred, out);
    if (*th_cmd) return cmd_check_theorems(g, th, out);
    if (*fs_cmd) return cmd_fewshot(g, fs, out);
    if (*rep_cmd) return cmd_report(g, rep, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace hide

#include "hide/engine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace hide {

namespace {

enum SeedTag : std::uint64_t {
  kSeedUnadapted = 1,
  kSeedPeft = 2,
  kSeedShuffle = 3,
  kSeedTii = 4,
  kSeedTap = 5,
  kSeedAdapted = 6,
  kSeedShared = 7,
  kSeedCurrentTap = 8,
  kSeedBaseline = 9,
  kSeedEpisode = 10,
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void emit(const EventSink& sink, const char* kind, std::size_t task, std::size_t epoch = 0,
          std::uint32_t class_id = 0, double value = 0.0) {
  if (sink) sink(EngineEvent{kind, task, epoch, class_id, value});
}

std::map<std::uint32_t, std::vector<std::size_t>> indices_by_class(const EmbeddingDataset& ds) {
  std::map<std::uint32_t, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ds.size(); ++i) out[ds.labels[i]].push_back(i);
  return out;
}

Tensor2 gather_rows(const Tensor2& m, std::span<const std::size_t> idx) {
  Tensor2 out(idx.size(), m.cols);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = m.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

Tensor2 representations(const BackboneSurrogate& backbone, const EmbeddingDataset& ds,
                        std::span<const std::size_t> idx, const PeftParams* peft) {
  Tensor2 out(idx.size(), backbone.config().output_dim());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto h = peft ? forward_adapted(backbone, ds.features.row(idx[r]), *peft)
                        : forward_unadapted(backbone, ds.features.row(idx[r]));
    std::copy(h.begin(), h.end(), out.row(r).begin());
  }
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Splits per-class pseudo sets into balanced minibatches and takes one Adam step each.
double run_pseudo_epoch(LinearHead& head, AdamState& opt, const std::vector<PseudoBatch>& batches,
                        std::size_t per_batch, bool task_identity) {
  if (batches.empty()) return 0.0;
  const std::size_t n = batches.front().samples.rows;
  std::vector<Tensor2*> params{&head.weight, &head.bias};
  double total = 0.0;
  std::size_t steps = 0;
  for (std::size_t start = 0; start < n; start += per_batch) {
    const std::size_t end = std::min(n, start + per_batch);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    std::vector<PseudoBatch> chunk;
    chunk.reserve(batches.size());
    for (const auto& pb : batches) chunk.push_back({pb.target, gather_rows(pb.samples, rows)});
    PseudoLossResult r = task_identity ? tii_loss(head, chunk) : tap_loss(head, chunk);
    GradBundle g;
    g.loss = r.loss;
    g.grads.emplace(0, std::move(r.grad_head.weight));
    g.grads.emplace(1, std::move(r.grad_head.bias));
    adam_step(opt, params, g);
    total += r.loss;
    ++steps;
  }
  return total / static_cast<double>(steps);
}

void ensure_head(LinearHead& head, std::size_t dim) {
  if (head.weight.rows == 0) head = LinearHead(dim, 0);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t s = splitmix64(base);
  s = splitmix64(s ^ a);
  s = splitmix64(s ^ b);
  return splitmix64(s ^ c);
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.epochs = 50;
  c.batch_size = 128;
  c.learning_rate = 0.005;
  return c;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (centroids == 0) throw ConfigError("centroids must be >= 1");
  if (pseudo_per_class == 0) throw ConfigError("pseudo_per_class must be >= 1");
  if (pseudo_batch_per_class == 0) throw ConfigError("pseudo_batch_per_class must be >= 1");
  if (noise_sigma && !(*noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (shared_lora && shared_lora_rank == 0) throw ConfigError("shared_lora_rank must be >= 1");
  cr.validate();
}

std::size_t ModelState::column_of(std::uint32_t class_id) const {
  auto it = std::find(class_columns.begin(), class_columns.end(), class_id);
  if (it == class_columns.end()) {
    throw DataError("class " + std::to_string(class_id) + " has not been observed");
  }
  return static_cast<std::size_t>(it - class_columns.begin());
}

std::vector<std::size_t> ModelState::task_columns(std::size_t task_index) const {
  std::vector<std::size_t> cols;
  for (std::uint32_t c : tasks.at(task_index).classes) cols.push_back(column_of(c));
  return cols;
}

const SharedAdapter* ModelState::shared_for(std::uint32_t dataset_id) const {
  for (const auto& s : shared) {
    if (s.dataset_id == dataset_id) return &s;
  }
  return nullptr;
}

ModelState make_state(const BackboneSurrogate& backbone, const TrainConfig& config,
                      Scenario scenario) {
  config.validate();
  ModelState state(backbone, config, scenario);
  const std::size_t dim = backbone.config().output_dim();
  state.heads.tii = LinearHead(dim, 0);
  state.heads.tap = LinearHead(dim, 0);
  return state;
}

void train_task(ModelState& state, const TaskData& task, const EventSink& sink) {
  const TrainConfig& cfg = state.config;
  cfg.validate();
  const BackboneSurrogate& backbone = state.backbone;
  const std::size_t dim = backbone.config().output_dim();

  if (task.train.empty()) throw DataError("train_task: task has no training samples");
  if (task.train.dim != backbone.config().input_dim) {
    throw DimensionError("train_task: samples have dimension " + std::to_string(task.train.dim) +
                         ", backbone expects " + std::to_string(backbone.config().input_dim));
  }
  const std::vector<std::uint32_t> labels = task.train.label_set();
  if (!task.labels.empty() && task.labels != labels) {
    throw DataError("train_task: a declared class of task " + std::to_string(task.task_id) +
                    " has no training samples");
  }
  if (state.scenario == Scenario::DIL) {
    if (!state.tasks.empty() && state.tasks.front().classes != labels) {
      throw ScenarioError("DIL tasks must share one label set");
    }
  } else {
    for (std::uint32_t c : labels) {
      if (std::find(state.class_columns.begin(), state.class_columns.end(), c) !=
          state.class_columns.end()) {
        throw ScenarioError("class " + std::to_string(c) + " of task " +
                            std::to_string(task.task_id) + " was already learned in an earlier task");
      }
    }
  }

  const std::size_t t = state.tasks.size();
  state.tasks.push_back(TaskRecord{task.task_id, task.dataset_id, labels});
  ensure_head(state.heads.tii, dim);
  ensure_head(state.heads.tap, dim);
  state.heads.tii.add_outputs(1);
  for (std::uint32_t c : labels) {
    if (std::find(state.class_columns.begin(), state.class_columns.end(), c) ==
        state.class_columns.end()) {
      state.class_columns.push_back(c);
      state.heads.tap.add_outputs(1);
    }
  }

  const auto by_class = indices_by_class(task.train);
  const std::uint32_t t32 = static_cast<std::uint32_t>(t);

  // Unadapted statistics come first.
  for (std::uint32_t c : labels) {
    const auto& idx = by_class.at(c);
    Tensor2 reps = representations(backbone, task.train, idx, nullptr);
    ClassStatistics s = fit_class_statistics(reps, std::min(cfg.centroids, reps.rows),
                                             cfg.noise_sigma,
                                             derive_seed(cfg.seed, kSeedUnadapted, t, c));
    s.class_id = c;
    s.task_id = t32;
    state.stats.put_unadapted(std::move(s));
    emit(sink, "fit_unadapted", t, 0, c);
  }

  state.peft_per_task.push_back(init_peft(cfg.peft, backbone.config(),
                                          t > 0 ? &state.peft_per_task[t - 1] : nullptr,
                                          derive_seed(cfg.seed, kSeedPeft)));
  emit(sink, "init_peft", t);
  PeftParams& peft = state.peft_per_task.back();

  SharedAdapter* shared = nullptr;
  if (cfg.shared_lora) {
    for (auto& s : state.shared) {
      if (s.dataset_id == task.dataset_id) shared = &s;
    }
    if (shared == nullptr) {
      PeftConfig lora_cfg;
      lora_cfg.kind = PeftKind::LoRA;
      lora_cfg.lora_rank = cfg.shared_lora_rank;
      SharedAdapter fresh;
      fresh.dataset_id = task.dataset_id;
      fresh.lora = init_peft(lora_cfg, backbone.config(), nullptr,
                             derive_seed(cfg.seed, kSeedShared, task.dataset_id));
      fresh.head = LinearHead(dim, 0);
      state.shared.push_back(std::move(fresh));
      shared = &state.shared.back();
    }
    for (std::uint32_t c : labels) {
      if (std::find(shared->classes.begin(), shared->classes.end(), c) == shared->classes.end()) {
        shared->classes.push_back(c);
        shared->head.add_outputs(1);
      }
    }
  }

  const std::vector<std::size_t> task_cols = state.task_columns(t);
  std::vector<std::size_t> shared_cols;
  if (shared) {
    shared_cols.resize(shared->classes.size());
    std::iota(shared_cols.begin(), shared_cols.end(), std::size_t{0});
  }
  auto shared_column = [&](std::uint32_t c) {
    return static_cast<std::size_t>(
        std::find(shared->classes.begin(), shared->classes.end(), c) - shared->classes.begin());
  };

  Tensor2 old_means(0, dim);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::uint32_t c : state.tasks[i].classes) {
      const ClassStatistics* s = state.stats.adapted(static_cast<std::uint32_t>(i), c);
      if (s == nullptr) throw StateError("missing adapted statistics of an earlier task");
      old_means.data.insert(old_means.data.end(), s->mean.begin(), s->mean.end());
      ++old_means.rows;
    }
  }

  LinearHead& omega = state.heads.tii;
  LinearHead& psi = state.heads.tap;
  AdamState wtp_opt = AdamState::with_learning_rate(cfg.learning_rate);
  AdamState tii_opt = AdamState::with_learning_rate(cfg.learning_rate);
  AdamState tap_opt = AdamState::with_learning_rate(cfg.learning_rate);
  AdamState shared_opt = AdamState::with_learning_rate(cfg.learning_rate);
  std::vector<Tensor2*> wtp_params = peft.tensors();
  wtp_params.push_back(&psi.weight);
  wtp_params.push_back(&psi.bias);
  std::vector<Tensor2*> shared_params;
  if (shared) {
    shared_params = shared->lora.tensors();
    shared_params.push_back(&shared->head.weight);
    shared_params.push_back(&shared->head.bias);
  }
  const WtpOptions wtp_options{cfg.cr, cfg.wtp_scope, true};
  WtpOptions plain_ce;
  plain_ce.cr.lambda = 0.0;
  plain_ce.scope = SoftmaxScope::Global;
  plain_ce.restrict_head_grad = false;

  auto tii_batches = [&](std::size_t epoch) {
    std::vector<PseudoBatch> out;
    Rng rng(derive_seed(cfg.seed, kSeedTii, t, epoch));
    for (std::size_t i = 0; i <= t; ++i) {
      for (std::uint32_t c : state.tasks[i].classes) {
        const ClassStatistics* s = state.stats.unadapted(static_cast<std::uint32_t>(i), c);
        out.push_back({i, sample_pseudo(*s, cfg.pseudo_per_class, rng)});
      }
    }
    return out;
  };
  // Previous tasks from G_c; the current task (when given) from this epoch's adapted reps.
  auto tap_batches = [&](std::size_t epoch, std::size_t upto,
                         const std::map<std::uint32_t, Tensor2>* current) {
    std::vector<PseudoBatch> out;
    Rng rng(derive_seed(cfg.seed, kSeedTap, t, epoch));
    for (std::size_t i = 0; i < upto; ++i) {
      for (std::uint32_t c : state.tasks[i].classes) {
        const ClassStatistics* s = state.stats.adapted(static_cast<std::uint32_t>(i), c);
        out.push_back({state.column_of(c), sample_pseudo(*s, cfg.pseudo_per_class, rng)});
      }
    }
    if (current != nullptr) {
      Rng pick_rng(derive_seed(cfg.seed, kSeedCurrentTap, t, epoch));
      for (const auto& [c, reps] : *current) {
        std::uniform_int_distribution<std::size_t> pick(0, reps.rows - 1);
        std::vector<std::size_t> rows(cfg.pseudo_per_class);
        for (auto& r : rows) r = pick(pick_rng);
        out.push_back({state.column_of(c), gather_rows(reps, rows)});
      }
    }
    return out;
  };

  std::vector<PseudoBatch> fixed_tii;
  if (!cfg.resample_each_epoch) fixed_tii = tii_batches(0);
  std::vector<PseudoBatch> fixed_tap_old;

  const std::size_t n = task.train.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, derive_seed(cfg.seed, kSeedShuffle, t, epoch));
    std::map<std::uint32_t, Tensor2> current;
    for (std::uint32_t c : labels) current.emplace(c, Tensor2(0, dim));
    double wtp_total = 0.0;
    std::size_t wtp_steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor2 inputs = gather_rows(task.train.features, idx);
      std::vector<std::size_t> targets;
      for (std::size_t i : idx) targets.push_back(state.column_of(task.train.labels[i]));

      WtpResult r = wtp_loss(backbone, peft, psi, inputs, targets, task_cols, old_means, wtp_options);
      adam_step(wtp_opt, wtp_params, r.bundle);
      wtp_total += r.bundle.loss;
      ++wtp_steps;
      for (std::size_t b = 0; b < idx.size(); ++b) {
        Tensor2& dst = current.at(task.train.labels[idx[b]]);
        dst.data.insert(dst.data.end(), r.reps.row(b).begin(), r.reps.row(b).end());
        ++dst.rows;
      }

      if (shared) {
        std::vector<std::size_t> shared_targets;
        for (std::size_t i : idx) shared_targets.push_back(shared_column(task.train.labels[i]));
        WtpResult sr = wtp_loss(backbone, shared->lora, shared->head, inputs, shared_targets,
                                shared_cols, Tensor2(0, dim), plain_ce);
        adam_step(shared_opt, shared_params, sr.bundle);
      }
    }
    emit(sink, "epoch_wtp", t, epoch, 0, wtp_total / static_cast<double>(wtp_steps));

    const std::vector<PseudoBatch> tii_set =
        cfg.resample_each_epoch ? tii_batches(epoch) : fixed_tii;
    const double tii_value =
        run_pseudo_epoch(omega, tii_opt, tii_set, cfg.pseudo_batch_per_class, true);
    emit(sink, "epoch_tii", t, epoch, 0, tii_value);

    if (cfg.tap_schedule == TapSchedule::PerEpoch) {
      std::vector<PseudoBatch> tap_set;
      if (cfg.resample_each_epoch || epoch == 0) {
        tap_set = tap_batches(epoch, t, &current);
        if (!cfg.resample_each_epoch) {
          fixed_tap_old.assign(tap_set.begin(), tap_set.end() - static_cast<std::ptrdiff_t>(labels.size()));
        }
      } else {
        tap_set = fixed_tap_old;
        auto fresh = tap_batches(epoch, 0, &current);
        tap_set.insert(tap_set.end(), fresh.begin(), fresh.end());
      }
      const double tap_value =
          run_pseudo_epoch(psi, tap_opt, tap_set, cfg.pseudo_batch_per_class, false);
      emit(sink, "epoch_tap", t, epoch, 0, tap_value);
    }
  }

  // Adapted statistics after the last epoch.
  for (std::uint32_t c : labels) {
    const auto& idx = by_class.at(c);
    Tensor2 reps = representations(backbone, task.train, idx, &peft);
    ClassStatistics s = fit_class_statistics(reps, std::min(cfg.centroids, reps.rows),
                                             cfg.noise_sigma,
                                             derive_seed(cfg.seed, kSeedAdapted, t, c));
    s.class_id = c;
    s.task_id = t32;
    state.stats.put_adapted(std::move(s));
    emit(sink, "fit_adapted", t, 0, c);
  }

  if (cfg.tap_schedule == TapSchedule::PostHoc) {
    std::vector<PseudoBatch> fixed;
    if (!cfg.resample_each_epoch) fixed = tap_batches(0, t + 1, nullptr);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      const auto tap_set = cfg.resample_each_epoch ? tap_batches(epoch, t + 1, nullptr) : fixed;
      const double tap_value =
          run_pseudo_epoch(psi, tap_opt, tap_set, cfg.pseudo_batch_per_class, false);
      emit(sink, "epoch_tap", t, epoch, 0, tap_value);
    }
  }
  emit(sink, "task_done", t);
}

void continue_sequence(ModelState& state, const TaskStream& stream, const EventSink& sink,
                       std::size_t threads) {
  stream.validate();
  if (stream.scenario != state.scenario) {
    throw ScenarioError("stream scenario " + to_string(stream.scenario) +
                        " differs from the model's " + to_string(state.scenario));
  }
  if (state.tasks.size() > stream.tasks.size()) {
    throw StateError("model has learned more tasks than the stream provides");
  }
  for (std::size_t t = state.tasks.size(); t < stream.tasks.size(); ++t) {
    train_task(state, stream.tasks[t], sink);
    auto column = evaluate_scenario(state, std::span(stream.tasks.data(), t + 1), stream.scenario,
                                    threads);
    for (std::size_t i = 0; i < column.size(); ++i) {
      emit(sink, "eval", t, 0, static_cast<std::uint32_t>(i), column[i]);
    }
    state.accuracy.push_column(std::move(column));
  }
}

SequenceResult train_sequence(const TaskStream& stream, const TrainConfig& config,
                              const BackboneSurrogate& backbone, const EventSink& sink,
                              std::size_t threads) {
  ModelState state = make_state(backbone, config, stream.scenario);
  continue_sequence(state, stream, sink, threads);
  AccuracyMatrix m = state.accuracy;
  return SequenceResult{std::move(state), std::move(m)};
}

Prediction predict(const ModelState& state, std::span<const double> x) {
  if (state.tasks.empty() || state.peft_per_task.size() != state.tasks.size()) {
    throw StateError("predict: the model has not learned any task");
  }
  Prediction p;
  const auto unadapted = forward_unadapted(state.backbone, x);
  p.task_probs = softmax(state.heads.tii.logits(unadapted));
  p.task_index = argmax(p.task_probs);

  if (state.scenario == Scenario::DIL) {
    std::vector<double> marginal(state.class_columns.size(), 0.0);
    for (std::size_t i = 0; i < state.tasks.size(); ++i) {
      const auto h = forward_adapted(state.backbone, x, state.peft_per_task[i]);
      const auto logits = state.heads.tap.logits(h);
      const auto cols = state.task_columns(i);
      std::vector<double> local(cols.size());
      for (std::size_t j = 0; j < cols.size(); ++j) local[j] = logits[cols[j]];
      const auto probs = softmax(local);
      for (std::size_t j = 0; j < cols.size(); ++j) marginal[cols[j]] += p.task_probs[i] * probs[j];
    }
    p.class_probs = std::move(marginal);
  } else {
    const auto h = forward_adapted(state.backbone, x, state.peft_per_task[p.task_index]);
    p.class_probs = softmax(state.heads.tap.logits(h));
  }
  p.label = state.class_columns[argmax(p.class_probs)];
  return p;
}

Prediction predict_with_task(const ModelState& state, std::span<const double> x,
                             std::size_t task_index) {
  if (task_index >= state.tasks.size() || task_index >= state.peft_per_task.size()) {
    throw StateError("predict_with_task: task " + std::to_string(task_index) + " is not learned");
  }
  Prediction p;
  p.task_index = task_index;
  p.task_probs.assign(state.tasks.size(), 0.0);
  p.task_probs[task_index] = 1.0;
  const auto h = forward_adapted(state.backbone, x, state.peft_per_task[task_index]);
  const auto logits = state.heads.tap.logits(h);
  const auto cols = state.task_columns(task_index);
  std::vector<double> local(cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) local[j] = logits[cols[j]];
  p.class_probs = softmax(local);
  p.label = state.tasks[task_index].classes[argmax(p.class_probs)];
  return p;
}

AccuracyMatrix train_baseline_sequence(const TaskStream& stream, const TrainConfig& config,
                                       const BackboneSurrogate& backbone) {
  stream.validate();
  config.validate();
  const std::size_t dim = backbone.config().output_dim();
  PeftParams peft = init_peft(config.peft, backbone.config(), nullptr,
                              derive_seed(config.seed, kSeedPeft));
  LinearHead head(dim, 0);
  std::vector<std::uint32_t> columns;
  auto column_of = [&](std::uint32_t c) {
    return static_cast<std::size_t>(std::find(columns.begin(), columns.end(), c) - columns.begin());
  };
  WtpOptions plain_ce;
  plain_ce.cr.lambda = 0.0;
  plain_ce.scope = SoftmaxScope::Global;
  plain_ce.restrict_head_grad = false;

  AccuracyMatrix matrix;
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    const TaskData& task = stream.tasks[t];
    if (task.train.empty()) throw DataError("baseline: task has no training samples");
    for (std::uint32_t c : task.train.label_set()) {
      if (std::find(columns.begin(), columns.end(), c) == columns.end()) {
        columns.push_back(c);
        head.add_outputs(1);
      }
    }
    std::vector<std::size_t> all_cols(columns.size());
    std::iota(all_cols.begin(), all_cols.end(), std::size_t{0});
    AdamState opt = AdamState::with_learning_rate(config.learning_rate);
    std::vector<Tensor2*> params = peft.tensors();
    params.push_back(&head.weight);
    params.push_back(&head.bias);

    const std::size_t n = task.train.size();
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      const auto order = shuffled(n, derive_seed(config.seed, kSeedBaseline, t, epoch));
      for (std::size_t start = 0; start < n; start += config.batch_size) {
        const std::size_t end = std::min(n, start + config.batch_size);
        std::span<const std::size_t> idx(order.data() + start, end - start);
        Tensor2 inputs = gather_rows(task.train.features, idx);
        std::vector<std::size_t> targets;
        for (std::size_t i : idx) targets.push_back(column_of(task.train.labels[i]));
        WtpResult r = wtp_loss(backbone, peft, head, inputs, targets, all_cols, Tensor2(0, dim),
                               plain_ce);
        adam_step(opt, params, r.bundle);
      }
    }

    std::vector<double> column;
    for (std::size_t i = 0; i <= t; ++i) {
      const TaskData& test_task = stream.tasks[i];
      std::vector<std::size_t> scope;
      if (stream.scenario == Scenario::TIL) {
        for (std::uint32_t c : test_task.labels) scope.push_back(column_of(c));
      } else {
        scope = all_cols;
      }
      std::size_t correct = 0;
      for (std::size_t s = 0; s < test_task.test.size(); ++s) {
        const auto h = forward_adapted(backbone, test_task.test.features.row(s), peft);
        const auto logits = head.logits(h);
        std::vector<double> local(scope.size());
        for (std::size_t j = 0; j < scope.size(); ++j) local[j] = logits[scope[j]];
        if (columns[scope[argmax(local)]] == test_task.test.labels[s]) ++correct;
      }
      column.push_back(test_task.test.empty()
                           ? 0.0
                           : static_cast<double>(correct) / static_cast<double>(test_task.test.size()));
    }
    matrix.push_column(std::move(column));
  }
  return matrix;
}

FewShotEpisode sample_episode(const EmbeddingDataset& pool, std::size_t ways, std::size_t shots,
                              std::size_t queries, std::uint64_t seed) {
  if (ways < 2) throw ConfigError("few-shot episodes need N >= 2 ways");
  if (shots < 1) throw ConfigError("few-shot episodes need K >= 1 shots");
  if (queries < 1) throw ConfigError("few-shot episodes need at least one query per class");
  auto by_class = indices_by_class(pool);
  std::vector<std::uint32_t> eligible;
  for (const auto& [c, idx] : by_class) {
    if (idx.size() >= shots + queries) eligible.push_back(c);
  }
  if (eligible.size() < ways) {
    throw DataError("pool has " + std::to_string(eligible.size()) + " classes with " +
                    std::to_string(shots + queries) + " samples; episode needs " +
                    std::to_string(ways));
  }
  Rng rng(derive_seed(seed, kSeedEpisode));
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(ways);
  std::sort(eligible.begin(), eligible.end());

  std::vector<std::size_t> support_idx;
  std::vector<std::size_t> query_idx;
  for (std::uint32_t c : eligible) {
    auto idx = by_class.at(c);
    std::shuffle(idx.begin(), idx.end(), rng);
    support_idx.insert(support_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
    query_idx.insert(query_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(shots),
                     idx.begin() + static_cast<std::ptrdiff_t>(shots + queries));
  }
  return FewShotEpisode{pool.subset(support_idx), pool.subset(query_idx)};
}

double few_shot_eval(const ModelState& state, const FewShotEpisode& episode,
                     const FewShotConfig& config) {
  const auto classes = episode.support.label_set();
  if (classes.size() < 2) throw DataError("few-shot support set needs N >= 2 classes");
  if (episode.query.empty()) throw DataError("few-shot query set is empty");
  for (std::uint32_t c : episode.query.label_set()) {
    if (!std::binary_search(classes.begin(), classes.end(), c)) {
      throw DataError("query class " + std::to_string(c) + " does not appear in the support set");
    }
  }
  for (std::uint32_t c : classes) {
    if (std::find(state.class_columns.begin(), state.class_columns.end(), c) !=
        state.class_columns.end()) {
      throw DataError("support class " + std::to_string(c) + " was seen during the stream");
    }
  }
  if (config.steps == 0 || !(config.learning_rate > 0.0)) {
    throw ConfigError("few-shot fine-tuning needs steps >= 1 and a positive learning rate");
  }

  const PeftParams* adapter = nullptr;
  if (config.use_shared_lora) {
    if (state.shared.empty()) throw StateError("model carries no dataset-shared LoRA");
    if (state.shared.size() == 1) {
      adapter = &state.shared.front().lora;
    } else {
      // Majority vote of the TII head over the support set picks the upstream dataset.
      std::map<std::uint32_t, std::size_t> votes;
      for (std::size_t s = 0; s < episode.support.size(); ++s) {
        const auto h = forward_unadapted(state.backbone, episode.support.features.row(s));
        const std::size_t task = argmax(state.heads.tii.logits(h));
        ++votes[state.tasks.at(task).dataset_id];
      }
      std::uint32_t best = votes.begin()->first;
      for (const auto& [id, count] : votes) {
        if (count > votes[best]) best = id;
      }
      const SharedAdapter* chosen = state.shared_for(best);
      adapter = chosen ? &chosen->lora : &state.shared.front().lora;
    }
  }

  auto reps_of = [&](const EmbeddingDataset& ds) {
    Tensor2 reps(ds.size(), state.backbone.config().output_dim());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto h = adapter ? forward_adapted(state.backbone, ds.features.row(i), *adapter)
                             : forward_unadapted(state.backbone, ds.features.row(i));
      std::copy(h.begin(), h.end(), reps.row(i).begin());
    }
    return reps;
  };
  auto local_label = [&](std::uint32_t c) {
    return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), c) -
                                    classes.begin());
  };

  const Tensor2 support = reps_of(episode.support);
  std::vector<std::size_t> targets;
  for (std::uint32_t c : episode.support.labels) targets.push_back(local_label(c));
  LinearHead head(support.cols, classes.size());
  AdamState opt = AdamState::with_learning_rate(config.learning_rate);
  std::vector<Tensor2*> params{&head.weight, &head.bias};
  for (std::size_t step = 0; step < config.steps; ++step) {
    HeadLossResult r = head_cross_entropy(head, support, targets);
    GradBundle g;
    g.loss = r.loss;
    g.grads.emplace(0, std::move(r.grad_head.weight));
    g.grads.emplace(1, std::move(r.grad_head.bias));
    adam_step(opt, params, g);
  }

  const Tensor2 query = reps_of(episode.query);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < query.rows; ++i) {
    if (argmax(head.logits(query.row(i))) == local_label(episode.query.labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(query.rows);
}

}  // namespace hide

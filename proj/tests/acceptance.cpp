// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hide/datio.hpp"
#include "hide/engine.hpp"
#include "hide/evaluation.hpp"
#include "hide/objectives.hpp"
#include "hide/theory.hpp"

using namespace hide;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void report(const char* name, bool ok, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <typename... Args>
std::string format(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- theory --------------------------------------------------------------------------

void identity_suite() {
  const auto start = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) worst = std::max(worst, check_cil_identity(random_cil_table(rng, {})));
  const double secs = seconds_since(start);
  report("identity", worst <= 1e-9 && secs < 10.0,
         format("10000 tables, max deviation %.3g, %.1f s", worst, secs));
}

void bound_suite() {
  const auto start = Clock::now();
  Rng rng(202);
  std::size_t t1_viol = 0, t3_viol = 0, nec_viol = 0, nec_skipped = 0;
  double worst_gap = -1e300;
  for (int i = 0; i < 10000; ++i) {
    const ProbTable cil = random_cil_table(rng, {});
    const BoundReport b1 = check_theorem1(cil);
    if (!b1.holds) ++t1_viol;
    const NecessityReport n = check_necessity(cil, b1.loss);
    if (!n.applicable) ++nec_skipped;
    if (!n.holds) ++nec_viol;
    worst_gap = std::max({worst_gap, n.worst_wtp_gap, n.worst_tii_gap});
    if (!check_theorem3_dil(random_dil_table(rng, {})).holds) ++t3_viol;
  }
  const double secs = seconds_since(start);
  report("bounds", t1_viol == 0 && t3_viol == 0 && nec_viol == 0 && nec_skipped == 0 && secs < 30.0,
         format("10000 CIL + 10000 DIL tables: CIL bound violations %zu, DIL bound violations %zu, necessity "
                "violations %zu (worst component-minus-joint %.3g), %.1f s",
                t1_viol, t3_viol, nec_viol, worst_gap, secs));
}

void til_reduction_suite() {
  Rng rng(303);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) worst = std::max(worst, til_reduction_deviation(random_cil_table(rng, {})));
  report("til-reduction", worst <= 1e-12, format("1000 tables, max |H_TAP - H_WTP| %.3g", worst));
}

// ---- gradients ------------------------------------------------------------------------

Tensor2 gaussian(Rng& rng, std::size_t r, std::size_t c, double scale) {
  Tensor2 t(r, c);
  fill_normal(t, scale, rng);
  return t;
}

void perturb(PeftParams& p, Rng& rng, double scale) {
  for (Tensor2* t : p.tensors()) axpy(1.0, gaussian(rng, t->rows, t->cols, scale), *t);
}

void gradient_suite() {
  const auto start = Clock::now();
  const BackboneConfig bc;
  const auto bb = init_backbone(404, bc);
  const std::size_t d = bc.output_dim();
  Rng rng(405);
  std::map<std::string, double> worst;

  for (int inst = 0; inst < 10; ++inst) {
    {
      const Tensor2 reps = gaussian(rng, 6, d, 0.5);
      const Tensor2 means = gaussian(rng, 4, d, 0.5);
      const auto r = cr_loss(reps, means, 0.8);
      auto f = [&](std::span<const double> x) {
        Tensor2 p = reps;
        std::copy(x.begin(), x.end(), p.data.begin());
        return cr_loss(p, means, 0.8).loss;
      };
      worst["cr"] = std::max(worst["cr"], finite_diff_check(f, reps.data, r.grad_reps.data));
    }
    {
      PeftConfig pc;
      pc.kind = static_cast<PeftKind>(inst % 4);
      PeftParams peft = init_peft(pc, bc, nullptr, inst);
      perturb(peft, rng, 0.1);
      LinearHead head(d, 4);
      fill_normal(head.weight, 0.3, rng);
      const Tensor2 x = gaussian(rng, 4, bc.input_dim, 1.0);
      const std::vector<std::size_t> targets{0, 1, 1, 0};
      const std::vector<std::size_t> cols{0, 1};
      const Tensor2 means = gaussian(rng, 3, d, 0.5);
      WtpOptions opt;
      opt.restrict_head_grad = false;
      const auto r = wtp_loss(bb, peft, head, x, targets, cols, means, opt);
      std::vector<const Tensor2*> params;
      for (const Tensor2* t : std::as_const(peft).tensors()) params.push_back(t);
      params.push_back(&head.weight);
      params.push_back(&head.bias);
      std::vector<const Tensor2*> grads;
      for (std::size_t h = 0; h < params.size(); ++h) grads.push_back(&r.bundle.grads.at(h));
      auto f = [&](std::span<const double> flat) {
        PeftParams p = peft;
        LinearHead hd = head;
        auto dst = p.tensors();
        dst.push_back(&hd.weight);
        dst.push_back(&hd.bias);
        unflatten(flat, dst);
        return wtp_loss(bb, p, hd, x, targets, cols, means, opt).bundle.loss;
      };
      worst["wtp"] = std::max(worst["wtp"], finite_diff_check(f, flatten(params), flatten(grads)));
    }
    for (int which = 0; which < 2; ++which) {
      const std::size_t outputs = 2 + static_cast<std::size_t>(inst % 5);
      LinearHead head(d, outputs);
      fill_normal(head.weight, 0.5, rng);
      fill_normal(head.bias, 0.5, rng);
      std::vector<PseudoBatch> batches;
      for (std::size_t c = 0; c < outputs; ++c) batches.push_back({c, gaussian(rng, 4, d, 1.0)});
      auto eval = [&](const LinearHead& h) {
        return which == 0 ? tii_loss(h, batches) : tap_loss(h, batches);
      };
      const auto r = eval(head);
      const Tensor2* hp[] = {&head.weight, &head.bias};
      const Tensor2* gp[] = {&r.grad_head.weight, &r.grad_head.bias};
      auto f = [&](std::span<const double> flat) {
        LinearHead h = head;
        Tensor2* dst[] = {&h.weight, &h.bias};
        unflatten(flat, dst);
        return eval(h).loss;
      };
      auto& slot = worst[which == 0 ? "tii" : "tap"];
      slot = std::max(slot, finite_diff_check(f, flatten(hp), flatten(gp)));
    }
    for (PeftKind kind : {PeftKind::Prompt, PeftKind::LoRA, PeftKind::FiLM, PeftKind::Adapter}) {
      PeftConfig pc;
      pc.kind = kind;
      PeftParams peft = init_peft(pc, bc, nullptr, inst);
      perturb(peft, rng, 0.2);
      const Tensor2 x = gaussian(rng, 1, bc.input_dim, 1.0);
      const Tensor2 w = gaussian(rng, 1, d, 1.0);
      ForwardCache cache;
      forward_adapted(bb, x.row(0), peft, &cache);
      PeftParams g = peft.zeros_like();
      backward_adapted(bb, cache, peft, w.row(0), g);
      auto f = [&](std::span<const double> flat) {
        PeftParams p = peft;
        unflatten(flat, p.tensors());
        return dot(forward_adapted(bb, x.row(0), p), w.row(0));
      };
      auto& slot = worst["peft-" + to_string(kind)];
      slot = std::max(slot, finite_diff_check(f, flatten(std::as_const(peft).tensors()),
                                              flatten(std::as_const(g).tensors())));
    }
  }
  const double secs = seconds_since(start);
  bool ok = secs < 60.0;
  std::string detail;
  for (const auto& [name, err] : worst) {
    ok = ok && err <= 1e-4;
    detail += name + " " + fmt("%.2g", err) + ", ";
  }
  report("gradients", ok, "10 instances each, max rel. error: " + detail + fmt("%.1f s", secs));
}

// ---- training runs --------------------------------------------------------------------

SynthSpec forgetting_stream(double separation) {
  SynthSpec s;  // 10 tasks, 2 classes per task, dim 64
  s.separation = separation;
  return s;
}

TrainConfig train_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  return c;
}

void freezing_suite() {
  const auto start = Clock::now();
  SynthSpec spec;
  spec.tasks = 5;
  const TaskStream stream = synth_stream(505, spec);
  const auto bb = init_backbone(505, BackboneConfig{});
  const auto weights = bb.weights();

  auto run = [&](std::vector<std::vector<std::uint8_t>>* snapshots) {
    ModelState state = make_state(bb, train_config(505), Scenario::CIL);
    EventSink sink = [&](const EngineEvent& e) {
      if (snapshots && e.kind == "task_done") snapshots->push_back(serialize_peft(state.peft_per_task[e.task]));
    };
    continue_sequence(state, stream, sink);
    return state;
  };
  std::vector<std::vector<std::uint8_t>> snapshots;
  const ModelState a = run(&snapshots);
  const ModelState b = run(nullptr);

  std::size_t frozen = 0;
  for (std::size_t k = 0; k + 1 < a.peft_per_task.size(); ++k) {
    if (serialize_peft(a.peft_per_task[k]) == snapshots[k]) ++frozen;
  }
  const bool backbone_same = a.backbone.weights().layers[0].value == weights.layers[0].value &&
                             a.backbone.weights().layers[1].ffn_out == weights.layers[1].ffn_out;
  const bool identical = serialize_state(a) == serialize_state(b);
  const double secs = seconds_since(start);
  report("freezing+determinism", frozen == 4 && identical && backbone_same && secs < 300.0,
         format("e_1..e_4 unchanged: %zu/4, state files identical: %s, backbone untouched: %s, "
                "%.1f s",
                frozen, identical ? "yes" : "no", backbone_same ? "yes" : "no", secs));
}

struct SeedRun {
  double faa = 0.0, ffm = 0.0, base_faa = 0.0, base_ffm = 0.0, tii = 0.0;
};

void training_suites() {
  const std::size_t seeds = 5;
  const auto start = Clock::now();
  std::vector<SeedRun> runs(seeds);
  bool bound_holds = false;
  std::string bound_detail;
  for (std::size_t s = 0; s < seeds; ++s) {
    const TaskStream stream = synth_stream(s, forgetting_stream(4.0));
    const auto bb = init_backbone(s, BackboneConfig{});
    const auto ours = train_sequence(stream, train_config(s), bb);
    const AccuracyMatrix base = train_baseline_sequence(stream, train_config(s), bb);
    runs[s] = {faa(ours.accuracy), ffm(ours.accuracy), faa(base), ffm(base),
               tii_accuracy(ours.state, stream.tasks)};
    if (s == 0) {
      const BoundReport b = empirical_bounds_from_model(ours.state, stream.tasks);
      bound_holds = b.holds;
      bound_detail = format("seed 0: L %.4f <= bound %.4f (delta %.4f, epsilon %.4f, eta %.4f)",
                            b.loss, b.bound, b.delta, b.epsilon, b.eta);
    }
  }
  SeedRun mean;
  for (const auto& r : runs) {
    mean.faa += r.faa / seeds;
    mean.ffm += r.ffm / seeds;
    mean.base_faa += r.base_faa / seeds;
    mean.base_ffm += r.base_ffm / seeds;
    mean.tii += r.tii / seeds;
  }
  const double secs = seconds_since(start);
  report("comparative-forgetting",
         mean.faa > mean.base_faa && mean.ffm < mean.base_ffm && secs < 600.0,
         format("5 seeds: FAA %.4f vs baseline %.4f, FFM %.4f vs baseline %.4f, %.1f s", mean.faa,
                mean.base_faa, mean.ffm, mean.base_ffm, secs));
  report("empirical-bound", bound_holds, bound_detail);

  // Task-identity accuracy as the clusters merge.
  std::vector<double> levels{4.0, 1.0, 0.0};
  std::vector<double> tii{mean.tii};
  for (std::size_t l = 1; l < levels.size(); ++l) {
    double acc = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      const TaskStream stream = synth_stream(s, forgetting_stream(levels[l]));
      const auto r = train_sequence(stream, train_config(s), init_backbone(s, BackboneConfig{}));
      acc += tii_accuracy(r.state, stream.tasks) / seeds;
    }
    tii.push_back(acc);
  }
  const double chance = 1.0 / 10.0;
  const bool monotone = tii[0] > tii[1] && tii[1] > tii[2];
  report("tii-efficacy", tii[0] >= 0.9 && monotone && tii[2] <= chance + 0.1,
         format("separation 4/1/0 sigma: TII %.4f / %.4f / %.4f (chance %.2f)", tii[0], tii[1],
                tii[2], chance));
}

void metrics_oracle() {
  const AccuracyMatrix m({{0.9}, {0.8, 0.7}});
  const double a = faa(m), c = caa(m), f = ffm(m);
  report("metrics-oracle", a == 0.75 && c == 0.825 && std::abs(f - 0.1) < 1e-15,
         format("FAA %.17g, CAA %.17g, FFM %.17g", a, c, f));
}

// Stream for the few-shot checks: holdout classes share the class subspace and a
// high-variance nuisance subspace with the stream, so upstream adaptation has something
// to transfer.
SynthSpec upstream_stream() {
  SynthSpec s;
  s.separation = 2.0;
  s.latent_dim = 8;
  s.nuisance_dim = 4;
  s.nuisance_scale = 3.0;
  s.holdout_classes = 10;
  return s;
}

void fewshot_suite() {
  const auto start = Clock::now();
  const std::size_t ways = 5, shots = 5, queries = 15;
  const std::size_t train_seeds = 5, episodes = 20;
  FewShotConfig on;
  FewShotConfig off;
  off.use_shared_lora = false;

  double chance = 0.0;
  std::size_t paired_ok = 0;
  std::string pairs;
  for (std::size_t s = 0; s < train_seeds; ++s) {
    const TaskStream stream = synth_stream(100 + s, upstream_stream());
    TrainConfig cfg = train_config(100 + s);
    cfg.shared_lora = true;
    const auto r = train_sequence(stream, cfg, init_backbone(100 + s, BackboneConfig{}));

    if (s == 0) {
      for (std::uint64_t e = 0; e < 50; ++e) {
        FewShotEpisode ep = sample_episode(stream.holdout, ways, shots, queries, e);
        Rng rng(derive_seed(e, 0xc4a));
        std::shuffle(ep.query.labels.begin(), ep.query.labels.end(), rng);
        chance += few_shot_eval(r.state, ep, on) / 50.0;
      }
    }
    double acc_on = 0.0, acc_off = 0.0;
    for (std::uint64_t e = 0; e < episodes; ++e) {
      const FewShotEpisode ep = sample_episode(stream.holdout, ways, shots, queries, 1000 + e);
      acc_on += few_shot_eval(r.state, ep, on) / episodes;
      acc_off += few_shot_eval(r.state, ep, off) / episodes;
    }
    if (acc_on >= acc_off) ++paired_ok;
    pairs += format("%.3f/%.3f ", acc_on, acc_off);
  }
  const double secs = seconds_since(start);
  report("fewshot", std::abs(chance - 0.2) <= 0.05 && paired_ok == train_seeds,
         format("query-label shuffle over 50 seeds: %.4f; shared LoRA on/off per seed: %s"
                "(on >= off in %zu/%zu), %.1f s",
                chance, pairs.c_str(), paired_ok, train_seeds, secs));
}

}  // namespace

int main() {
  const auto start = Clock::now();
  identity_suite();
  bound_suite();
  til_reduction_suite();
  gradient_suite();
  metrics_oracle();
  freezing_suite();
  training_suites();
  fewshot_suite();
  std::printf("%d failing criteria, %.1f s total\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}

#include <doctest.h>

#include <cmath>
#include <vector>

#include "hide/datio.hpp"
#include "hide/engine.hpp"
#include "hide/theory.hpp"

using namespace hide;

namespace {

const double kLn2 = std::log(2.0);
const double kLn4 = std::log(4.0);

ProbTable uniform_cil() {
  ProbSample s;
  s.task_probs = {0.5, 0.5};
  s.within_probs = {{0.5, 0.5}, {0.5, 0.5}};
  s.class_probs = {0.25, 0.25, 0.25, 0.25};
  s.true_task = 1;
  s.true_class = 0;
  s.true_label = 2;
  return ProbTable{Scenario::CIL, {s}};
}

ProbTable certain_cil() {
  ProbSample s;
  s.task_probs = {1.0, 0.0};
  s.within_probs = {{0.0, 1.0}, {0.5, 0.5}};
  s.class_probs = {0.0, 1.0, 0.0, 0.0};
  s.true_task = 0;
  s.true_class = 1;
  s.true_label = 1;
  return ProbTable{Scenario::CIL, {s}};
}

}  // namespace

TEST_CASE("component entropies of hand-built tables") {
  const auto u = component_entropies(uniform_cil(), 0);
  CHECK(std::abs(u.h_wtp - kLn2) < 1e-15);
  CHECK(std::abs(u.h_tii - kLn2) < 1e-15);
  CHECK(std::abs(u.h_tap - kLn4) < 1e-15);
  CHECK_FALSE(u.infinite);

  const auto c = component_entropies(certain_cil(), 0);
  CHECK(c.h_wtp == 0.0);
  CHECK(c.h_tii == 0.0);
  CHECK(c.h_tap == 0.0);

  ProbSample one;
  one.task_probs = {1.0};
  one.within_probs = {{0.3, 0.7}};
  one.class_probs = {0.3, 0.7};
  one.true_class = 1;
  one.true_label = 1;
  CHECK(component_entropies(ProbTable{Scenario::CIL, {one}}, 0).h_tii == 0.0);
}

TEST_CASE("zero ground-truth probability is flagged, not thrown") {
  ProbTable t = certain_cil();
  t.samples[0].true_class = 0;
  t.samples[0].true_label = 0;
  const auto e = component_entropies(t, 0);
  CHECK(e.infinite);
  CHECK(std::isinf(e.h_wtp));
  const auto rep = check_theorem1(t);
  CHECK(rep.infinite);
  CHECK(rep.holds);
}

TEST_CASE("table validation") {
  ProbTable t = uniform_cil();
  t.samples[0].task_probs = {0.6, 0.5};
  CHECK_THROWS_AS(t.validate(), DataError);
  t = uniform_cil();
  t.samples[0].true_label = 9;
  CHECK_THROWS_AS(t.validate(), DataError);
}

TEST_CASE("CIL identity") {
  CHECK(check_cil_identity(certain_cil()) == 0.0);
  CHECK(check_cil_identity(uniform_cil()) <= 1e-15);
  Rng rng(1);
  RandomTableSpec spec;
  spec.samples = 20;
  for (int i = 0; i < 1000; ++i) CHECK(check_cil_identity(random_cil_table(rng, spec)) <= 1e-9);
  CHECK_THROWS_AS(check_cil_identity(random_dil_table(rng, spec)), ScenarioError);
}

TEST_CASE("CIL loss bound") {
  const auto u = check_theorem1(uniform_cil());
  CHECK(std::abs(u.loss - kLn4) < 1e-15);
  CHECK(std::abs(u.bound - kLn4) < 1e-15);
  CHECK(std::abs(u.slack) < 1e-15);
  CHECK(u.holds);

  const auto c = check_theorem1(certain_cil());
  CHECK(c.loss == 0.0);
  CHECK(c.bound == 0.0);
  CHECK(c.holds);

  Rng rng(2);
  RandomTableSpec spec;
  spec.samples = 20;
  for (int i = 0; i < 1000; ++i) {
    const auto r = check_theorem1(random_cil_table(rng, spec));
    CHECK(r.holds);
    CHECK(std::abs(r.l2 - (r.delta + r.epsilon)) <= 1e-9);
    CHECK(r.delta >= 0.0);
    CHECK(r.epsilon >= 0.0);
    CHECK(r.eta >= 0.0);
  }
}

TEST_CASE("loss bound for domain-incremental tables") {
  SUBCASE("one domain reduces to the CIL bound") {
    ProbSample s;
    s.task_probs = {1.0};
    s.within_probs = {{0.2, 0.8}};
    s.class_probs = {0.3, 0.7};
    s.true_class = 1;
    s.true_label = 1;
    s.gamma = {1.0};
    ProbTable dil{Scenario::DIL, {s}};
    ProbTable cil = dil;
    cil.scenario = Scenario::CIL;
    cil.samples[0].gamma.clear();
    const auto a = check_theorem3_dil(dil);
    const auto b = check_theorem1(cil);
    CHECK(a.bound == doctest::Approx(b.bound).epsilon(1e-15));
    CHECK(a.holds);
  }
  SUBCASE("uniform gamma over two domains with perfect within-task prediction") {
    ProbSample s;
    s.task_probs = {0.5, 0.5};
    s.within_probs = {{1.0, 0.0}, {1.0, 0.0}};
    s.class_probs = {1.0, 0.0};
    s.gamma = {0.5, 0.5};
    ProbTable t{Scenario::DIL, {s}};
    const auto r = check_theorem3_dil(t);
    CHECK(r.l2 <= kLn2 + 1e-15);
    CHECK(r.holds);
  }
  SUBCASE("gamma must be a simplex") {
    Rng rng(3);
    ProbTable t = random_dil_table(rng, RandomTableSpec{});
    t.samples[0].gamma[0] += 0.5;
    CHECK_THROWS_AS(check_theorem3_dil(t), DataError);
  }
  SUBCASE("random tables") {
    Rng rng(4);
    RandomTableSpec spec;
    spec.samples = 20;
    for (int i = 0; i < 1000; ++i) {
      const auto r = check_theorem3_dil(random_dil_table(rng, spec));
      CHECK(r.holds);
      CHECK(r.tight_violation <= kBoundTolerance);
    }
  }
}

TEST_CASE("necessity inequalities") {
  const auto c = check_necessity(certain_cil(), 0.1);
  CHECK(c.applicable);
  CHECK(c.holds);

  const auto n = check_necessity(uniform_cil(), 0.1);
  CHECK_FALSE(n.applicable);
  CHECK(n.holds);

  Rng rng(5);
  RandomTableSpec spec;
  spec.samples = 20;
  for (int i = 0; i < 500; ++i) {
    const ProbTable t = random_cil_table(rng, spec);
    const double loss = check_theorem1(t).loss;
    const auto r = check_necessity(t, loss);
    CHECK(r.applicable);
    CHECK(r.holds);
    CHECK(r.worst_wtp_gap <= kBoundTolerance);
    CHECK(r.worst_tii_gap <= kBoundTolerance);
  }
}

TEST_CASE("TIL reduction") {
  Rng rng(6);
  RandomTableSpec spec;
  spec.samples = 20;
  CHECK(til_reduction_deviation(uniform_cil()) <= 1e-15);
  for (int i = 0; i < 300; ++i) CHECK(til_reduction_deviation(random_cil_table(rng, spec)) <= 1e-12);
}

TEST_CASE("random tables are valid and seeded") {
  Rng a(7), b(7);
  const ProbTable x = random_cil_table(a, RandomTableSpec{});
  const ProbTable y = random_cil_table(b, RandomTableSpec{});
  CHECK(x.samples.size() == 100);
  CHECK(x.samples[5].class_probs == y.samples[5].class_probs);
  CHECK_NOTHROW(x.validate());
  CHECK_NOTHROW(random_dil_table(a, RandomTableSpec{}).validate());
}

TEST_CASE("bounds computed from a model") {
  const auto bb = init_backbone(2, BackboneConfig{});
  SynthSpec spec;
  spec.tasks = 3;
  spec.samples_per_class = 40;
  const TaskStream stream = synth_stream(9, spec);
  TrainConfig cfg;
  cfg.epochs = 5;
  const auto r = train_sequence(stream, cfg, bb);

  SUBCASE("trained model") {
    const auto rep = empirical_bounds_from_model(r.state, stream.tasks);
    CHECK(rep.holds);
    CHECK(rep.samples == 3 * 2 * 8);
    CHECK_NOTHROW(table_from_model(r.state, stream.tasks).validate());
  }
  SUBCASE("zeroed heads give log category counts") {
    ModelState blank = r.state;
    blank.heads.tii.weight.fill(0.0);
    blank.heads.tii.bias.fill(0.0);
    blank.heads.tap.weight.fill(0.0);
    blank.heads.tap.bias.fill(0.0);
    const auto rep = empirical_bounds_from_model(blank, stream.tasks);
    CHECK(rep.epsilon == doctest::Approx(std::log(3.0)));
    CHECK(rep.delta == doctest::Approx(kLn2));
    CHECK(rep.eta == doctest::Approx(std::log(6.0)));
    CHECK(rep.holds);
  }
  SUBCASE("single task has no identity error") {
    const std::vector<TaskData> first{stream.tasks[0]};
    ModelState one = make_state(bb, cfg, Scenario::CIL);
    train_task(one, stream.tasks[0]);
    const auto rep = empirical_bounds_from_model(one, first);
    CHECK(rep.epsilon == 0.0);
    CHECK(rep.holds);
  }
}

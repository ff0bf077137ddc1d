#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hide/objectives.hpp"

using namespace hide;

namespace {

Tensor2 gaussian(Rng& rng, std::size_t r, std::size_t c, double scale) {
  Tensor2 t(r, c);
  fill_normal(t, scale, rng);
  return t;
}

LinearHead random_head(Rng& rng, std::size_t in, std::size_t out, double scale) {
  LinearHead h(in, out);
  fill_normal(h.weight, scale, rng);
  fill_normal(h.bias, scale, rng);
  return h;
}

std::vector<double> head_flat(const LinearHead& h) {
  const Tensor2* t[] = {&h.weight, &h.bias};
  return flatten(t);
}

LinearHead head_from_flat(const LinearHead& shape, std::span<const double> flat) {
  LinearHead h = shape;
  Tensor2* t[] = {&h.weight, &h.bias};
  unflatten(flat, t);
  return h;
}

std::vector<PseudoBatch> random_batches(Rng& rng, std::size_t classes, std::size_t per_class,
                                        std::size_t dim) {
  std::vector<PseudoBatch> out;
  for (std::size_t c = 0; c < classes; ++c) out.push_back({c, gaussian(rng, per_class, dim, 1.0)});
  return out;
}

}  // namespace

TEST_CASE("cr_loss hand values") {
  Tensor2 h(1, 2);
  h.data = {1.0, 0.0};
  CHECK(cr_loss(h, Tensor2(0, 2), 0.8).loss == 0.0);

  Tensor2 mu(1, 2);
  mu.data = {1.0, 0.0};
  const auto r = cr_loss(h, mu, 1.0);
  CHECK(std::abs(r.loss + std::log(2.0)) < 1e-15);
  CHECK(std::abs(r.loss + 0.693147) < 1e-6);

  CHECK_THROWS_AS(cr_loss(h, Tensor2(1, 3), 1.0), DimensionError);
  CHECK_THROWS_AS(cr_loss(h, mu, 0.0), ConfigError);
}

TEST_CASE("cr_loss is invariant to batch and mean order") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 reps = gaussian(rng, 6, 4, 1.0);
    const Tensor2 means = gaussian(rng, 5, 4, 1.0);
    const double base = cr_loss(reps, means, 0.8).loss;

    Tensor2 rr(6, 4), mm(5, 4);
    for (std::size_t r = 0; r < 6; ++r) {
      std::copy(reps.row(5 - r).begin(), reps.row(5 - r).end(), rr.row(r).begin());
    }
    for (std::size_t r = 0; r < 5; ++r) {
      std::copy(means.row((r + 2) % 5).begin(), means.row((r + 2) % 5).end(), mm.row(r).begin());
    }
    CHECK(std::abs(cr_loss(rr, means, 0.8).loss - base) <= 1e-12);
    CHECK(std::abs(cr_loss(reps, mm, 0.8).loss - base) <= 1e-12);
  }
}

TEST_CASE("cr_loss gradient matches finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 reps = gaussian(rng, 5, 6, 0.8);
    const Tensor2 means = gaussian(rng, 4, 6, 0.8);
    const auto r = cr_loss(reps, means, 0.8);
    auto loss = [&](std::span<const double> flat) {
      Tensor2 probe = reps;
      std::copy(flat.begin(), flat.end(), probe.data.begin());
      return cr_loss(probe, means, 0.8).loss;
    };
    CHECK(finite_diff_check(loss, reps.data, r.grad_reps.data) <= 1e-4);
  }
}

TEST_CASE("head_cross_entropy restricted to a column slice") {
  Rng rng(4);
  const LinearHead head = random_head(rng, 3, 6, 1.0);
  const Tensor2 reps = gaussian(rng, 4, 3, 1.0);
  const std::vector<std::size_t> cols{2, 3};
  const std::vector<std::size_t> targets{2, 3, 3, 2};
  const auto r = head_cross_entropy(head, reps, targets, cols);
  double expect = 0.0;
  for (std::size_t b = 0; b < 4; ++b) {
    const auto l = head.logits(reps.row(b));
    expect += cross_entropy(std::vector<double>{l[2], l[3]}, targets[b] - 2) / 4.0;
  }
  CHECK(std::abs(r.loss - expect) < 1e-14);
  for (std::size_t i = 0; i < 3; ++i) CHECK(r.grad_head.weight(i, 0) == 0.0);
  const std::vector<std::size_t> outside{0, 3, 3, 2};
  CHECK_THROWS_AS(head_cross_entropy(head, reps, outside, cols), DataError);
}

TEST_CASE("wtp_loss") {
  const BackboneConfig cfg;
  const auto bb = init_backbone(17, cfg);
  Rng rng(5);
  PeftConfig pc;
  pc.kind = PeftKind::LoRA;
  const PeftParams peft = init_peft(pc, cfg, nullptr, 1);
  const std::vector<std::size_t> cols{0, 1};

  SUBCASE("lambda 0.1 with CR = -ln 2 and CE = ln 2") {
    const Tensor2 x = gaussian(rng, 1, cfg.input_dim, 1.0);
    const auto h = forward_adapted(bb, x.row(0), peft);
    // A mean equal to h gives h.mu = h.h, so the single-sample CR term is log(1/2).
    const Tensor2 mu = Tensor2::from_row(h);
    const LinearHead zero_head(cfg.output_dim(), 2);
    WtpOptions opt;
    opt.cr = CRConfig{1.0, 0.1};
    const std::vector<std::size_t> target{1};
    const auto r = wtp_loss(bb, peft, zero_head, x, target, cols, mu, opt);
    CHECK(std::abs(r.ce - std::log(2.0)) < 1e-15);
    CHECK(std::abs(r.cr + std::log(2.0)) < 1e-15);
    CHECK(std::abs(r.bundle.loss - 0.9 * std::log(2.0)) < 1e-14);
    CHECK(std::abs(r.bundle.loss - 0.623832) < 1e-6);
  }

  SUBCASE("lambda 0 equals the plain cross-entropy") {
    const Tensor2 x = gaussian(rng, 5, cfg.input_dim, 1.0);
    const LinearHead head = random_head(rng, cfg.output_dim(), 4, 0.5);
    const std::vector<std::size_t> targets{0, 1, 1, 0, 1};
    WtpOptions opt;
    opt.cr.lambda = 0.0;
    const Tensor2 means = gaussian(rng, 3, cfg.output_dim(), 1.0);
    const auto r = wtp_loss(bb, peft, head, x, targets, cols, means, opt);
    Tensor2 reps(5, cfg.output_dim());
    for (std::size_t b = 0; b < 5; ++b) {
      const auto h = forward_adapted(bb, x.row(b), peft);
      std::copy(h.begin(), h.end(), reps.row(b).begin());
    }
    CHECK(r.bundle.loss == head_cross_entropy(head, reps, targets, cols).loss);
  }

  SUBCASE("labels outside the task are rejected") {
    const Tensor2 x = gaussian(rng, 1, cfg.input_dim, 1.0);
    const LinearHead head(cfg.output_dim(), 4);
    const std::vector<std::size_t> target{3};
    CHECK_THROWS_AS(wtp_loss(bb, peft, head, x, target, cols, Tensor2(0, cfg.output_dim()), {}),
                    DataError);
  }
}

TEST_CASE("wtp_loss gradient bundle matches finite differences") {
  const BackboneConfig cfg;
  const auto bb = init_backbone(23, cfg);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    PeftConfig pc;
    pc.kind = static_cast<PeftKind>(trial % 4);
    pc.prompt_len = 2;
    PeftParams peft = init_peft(pc, cfg, nullptr, trial);
    for (Tensor2* t : peft.tensors()) {
      Tensor2 noise(t->rows, t->cols);
      fill_normal(noise, 0.2, rng);
      axpy(1.0, noise, *t);
    }
    const LinearHead head = random_head(rng, cfg.output_dim(), 5, 0.3);
    const Tensor2 x = gaussian(rng, 3, cfg.input_dim, 1.0);
    const std::vector<std::size_t> targets{2, 3, 2};
    const std::vector<std::size_t> cols{2, 3};
    const Tensor2 means = gaussian(rng, 4, cfg.output_dim(), 0.5);
    WtpOptions opt;
    opt.scope = trial % 2 == 0 ? SoftmaxScope::TaskLocal : SoftmaxScope::Global;
    opt.restrict_head_grad = false;

    const auto r = wtp_loss(bb, peft, head, x, targets, cols, means, opt);
    std::vector<const Tensor2*> params;
    for (const Tensor2* t : std::as_const(peft).tensors()) params.push_back(t);
    params.push_back(&head.weight);
    params.push_back(&head.bias);
    std::vector<const Tensor2*> grads;
    for (std::size_t h = 0; h < params.size(); ++h) grads.push_back(&r.bundle.grads.at(h));

    const auto flat = flatten(params);
    auto loss = [&](std::span<const double> f) {
      PeftParams p = peft;
      LinearHead hd = head;
      std::vector<Tensor2*> dst = p.tensors();
      dst.push_back(&hd.weight);
      dst.push_back(&hd.bias);
      unflatten(f, dst);
      return wtp_loss(bb, p, hd, x, targets, cols, means, opt).bundle.loss;
    };
    FiniteDiffOptions fd;
    fd.max_coords = 80;
    fd.seed = trial;
    CAPTURE(trial);
    CHECK(finite_diff_check(loss, flat, flatten(grads), fd) <= 1e-4);
  }
}

TEST_CASE("tii_loss") {
  Rng rng(7);
  SUBCASE("zero head gives ln t") {
    for (std::size_t t = 1; t <= 5; ++t) {
      const LinearHead omega(4, t);
      const auto r = tii_loss(omega, random_batches(rng, t, 3, 4));
      CHECK(std::abs(r.loss - std::log(static_cast<double>(t))) < 1e-14);
    }
  }
  SUBCASE("single task has zero loss") {
    LinearHead omega = random_head(rng, 4, 1, 1.0);
    CHECK(tii_loss(omega, random_batches(rng, 1, 5, 4)).loss == 0.0);
  }
  SUBCASE("separable pseudo sets train to near zero") {
    std::vector<PseudoBatch> batches;
    for (std::size_t t = 0; t < 2; ++t) {
      Tensor2 s = gaussian(rng, 32, 4, 0.3);
      for (std::size_t r = 0; r < s.rows; ++r) s(r, 0) += t == 0 ? -3.0 : 3.0;
      batches.push_back({t, s});
    }
    LinearHead omega(4, 2);
    AdamState adam = AdamState::with_learning_rate(0.05);
    Tensor2* params[] = {&omega.weight, &omega.bias};
    for (int step = 0; step < 500; ++step) {
      const auto r = tii_loss(omega, batches);
      GradBundle g;
      g.grads[0] = r.grad_head.weight;
      g.grads[1] = r.grad_head.bias;
      adam_step(adam, params, g);
    }
    CHECK(tii_loss(omega, batches).loss < 0.01);
  }
  SUBCASE("unknown task and unbalanced batches are rejected") {
    const LinearHead omega(4, 2);
    auto batches = random_batches(rng, 2, 3, 4);
    batches[1].target = 5;
    CHECK_THROWS_AS(tii_loss(omega, batches), DataError);
    batches = random_batches(rng, 2, 3, 4);
    batches[0].samples = gaussian(rng, 2, 4, 1.0);
    CHECK_THROWS_AS(tii_loss(omega, batches), DataError);
  }
}

TEST_CASE("tap_loss") {
  Rng rng(8);
  SUBCASE("zero head gives ln C") {
    const LinearHead psi(3, 7);
    const auto r = tap_loss(psi, random_batches(rng, 7, 2, 3));
    CHECK(std::abs(r.loss - std::log(7.0)) < 1e-14);
  }
  SUBCASE("one class") {
    const LinearHead psi = random_head(rng, 3, 1, 1.0);
    CHECK(tap_loss(psi, random_batches(rng, 1, 4, 3)).loss == 0.0);
  }
  SUBCASE("normalised by the class count") {
    const LinearHead psi = random_head(rng, 3, 4, 1.0);
    const auto batches = random_batches(rng, 4, 5, 3);
    double expect = 0.0;
    for (const auto& b : batches) {
      for (std::size_t r = 0; r < b.samples.rows; ++r) {
        expect += cross_entropy(psi.logits(b.samples.row(r)), b.target) / 5.0;
      }
    }
    CHECK(std::abs(tap_loss(psi, batches).loss - expect / 4.0) < 1e-13);
  }
}

TEST_CASE("tii and tap gradients match finite differences") {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const LinearHead head = random_head(rng, 5, 2 + trial % 4, 0.7);
    const auto batches = random_batches(rng, head.out_dim(), 3, 5);
    for (int which = 0; which < 2; ++which) {
      auto eval = [&](const LinearHead& h) {
        return which == 0 ? tii_loss(h, batches) : tap_loss(h, batches);
      };
      const auto r = eval(head);
      auto loss = [&](std::span<const double> f) { return eval(head_from_flat(head, f)).loss; };
      CHECK(finite_diff_check(loss, head_flat(head), head_flat(r.grad_head)) <= 1e-4);
      CHECK(r.loss >= 0.0);
    }
  }
}

TEST_CASE("LinearHead growth keeps existing outputs") {
  Rng rng(10);
  LinearHead h = random_head(rng, 3, 2, 1.0);
  const Tensor2 x = gaussian(rng, 1, 3, 1.0);
  const auto before = h.logits(x.row(0));
  h.add_outputs(3);
  const auto after = h.logits(x.row(0));
  REQUIRE(after.size() == 5);
  CHECK(after[0] == before[0]);
  CHECK(after[1] == before[1]);
  CHECK(after[4] == 0.0);
}

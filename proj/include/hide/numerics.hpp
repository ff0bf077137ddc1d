#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "hide/errors.hpp"

namespace hide {

using Rng = std::mt19937_64;

/// Dense row-major matrix of doubles. Vectors are 1 x n.
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Tensor2 from_row(std::span<const double> values);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const noexcept { return data.size(); }
  bool same_shape(const Tensor2& other) const noexcept {
    return rows == other.rows && cols == other.cols;
  }
  bool all_finite() const noexcept;
  void fill(double v);

  bool operator==(const Tensor2&) const = default;
};

Tensor2 matmul(const Tensor2& a, const Tensor2& b);
/// aᵀ·b
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);
/// a·bᵀ
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
/// Adds a 1 x cols bias to every row.
void add_row_bias(Tensor2& m, const Tensor2& bias);
/// Column sums as a 1 x cols tensor.
Tensor2 column_sums(const Tensor2& m);
void axpy(double alpha, const Tensor2& x, Tensor2& y);

void fill_normal(Tensor2& t, double stddev, Rng& rng);

double dot(std::span<const double> a, std::span<const double> b);
double log_sum_exp(std::span<const double> values);

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);
double cross_entropy(std::span<const double> logits, std::size_t target);
/// d cross_entropy / d logits = softmax - onehot(target).
std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t target);

/// First index of the maximum. Ties resolve to the lowest index.
std::size_t argmax(std::span<const double> values);

/// Loss value plus one gradient per registered parameter handle.
struct GradBundle {
  double loss = 0.0;
  std::map<std::size_t, Tensor2> grads;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double learning_rate = 0.005;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor2> first_moment;
  std::vector<Tensor2> second_moment;

  static AdamState with_learning_rate(double lr) {
    AdamState s;
    s.learning_rate = lr;
    return s;
  }
};

/// One bias-corrected Adam update. Handles in `grads` index into `params`;
/// every parameter needs exactly one gradient of identical shape.
void adam_step(AdamState& state, std::span<Tensor2* const> params, const GradBundle& grads);

struct FiniteDiffOptions {
  double epsilon = 1e-5;
  /// 0 checks every coordinate, otherwise a seeded sample of this many.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Max over checked coordinates of |analytic - central difference| / (|analytic| + 1e-12).
double finite_diff_check(const std::function<double(std::span<const double>)>& loss_fn,
                         std::span<const double> params, std::span<const double> analytic_grad,
                         const FiniteDiffOptions& options = {});

std::vector<double> flatten(std::span<const Tensor2* const> tensors);
void unflatten(std::span<const double> flat, std::span<Tensor2* const> tensors);

}  // namespace hide

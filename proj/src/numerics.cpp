#include "hide/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace hide {

Tensor2 Tensor2::from_row(std::span<const double> values) {
  Tensor2 t(1, values.size());
  std::copy(values.begin(), values.end(), t.data.begin());
  return t;
}

bool Tensor2::all_finite() const noexcept {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void Tensor2::fill(double v) { std::fill(data.begin(), data.end(), v); }

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.rows) {
    throw DimensionError("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         " times " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
  }
  Tensor2 out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      const double* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b) {
  if (a.rows != b.rows) throw DimensionError("matmul_tn: row count mismatch");
  Tensor2 out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* arow = a.data.data() + k * a.cols;
    const double* brow = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      double* o = out.data.data() + i * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aki * brow[j];
    }
  }
  return out;
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.cols) throw DimensionError("matmul_nt: column count mismatch");
  Tensor2 out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) {
      out(i, j) = dot(a.row(i), b.row(j));
    }
  }
  return out;
}

void add_row_bias(Tensor2& m, const Tensor2& bias) {
  if (bias.rows != 1 || bias.cols != m.cols) throw DimensionError("add_row_bias: bias shape");
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) r[j] += bias.data[j];
  }
}

Tensor2 column_sums(const Tensor2& m) {
  Tensor2 out(1, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) out.data[j] += r[j];
  }
  return out;
}

void axpy(double alpha, const Tensor2& x, Tensor2& y) {
  if (!x.same_shape(y)) throw DimensionError("axpy: shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] += alpha * x.data[i];
}

void fill_normal(Tensor2& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data) v = dist(rng);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw DimensionError("log_sum_exp: empty input");
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double cross_entropy(std::span<const double> logits, std::size_t target) {
  if (logits.empty()) throw DimensionError("cross_entropy: empty logits");
  if (target >= logits.size()) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range " +
                     std::to_string(logits.size()));
  }
  // Clamp at zero: lse >= logits[target] in exact arithmetic.
  return std::max(0.0, log_sum_exp(logits) - logits[target]);
}

std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw IndexError("cross_entropy_grad: target out of range");
  auto g = softmax(logits);
  g[target] -= 1.0;
  return g;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw DimensionError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

void adam_step(AdamState& state, std::span<Tensor2* const> params, const GradBundle& grads) {
  if (state.learning_rate <= 0.0) throw ConfigError("adam_step: learning rate must be positive");
  if (grads.grads.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  if (state.first_moment.empty()) {
    for (const Tensor2* p : params) {
      state.first_moment.emplace_back(p->rows, p->cols);
      state.second_moment.emplace_back(p->rows, p->cols);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state tracks a different parameter count");
  }
  for (std::size_t h = 0; h < params.size(); ++h) {
    auto it = grads.grads.find(h);
    if (it == grads.grads.end()) throw DimensionError("adam_step: missing gradient for handle");
    if (!it->second.same_shape(*params[h]) || !state.first_moment[h].same_shape(*params[h])) {
      throw DimensionError("adam_step: gradient shape mismatch for handle " + std::to_string(h));
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t h = 0; h < params.size(); ++h) {
    const auto& g = grads.grads.at(h).data;
    auto& p = params[h]->data;
    auto& m = state.first_moment[h].data;
    auto& v = state.second_moment[h].data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

double finite_diff_check(const std::function<double(std::span<const double>)>& loss_fn,
                         std::span<const double> params, std::span<const double> analytic_grad,
                         const FiniteDiffOptions& options) {
  if (params.size() != analytic_grad.size()) {
    throw DimensionError("finite_diff_check: gradient length differs from parameter length");
  }
  if (options.epsilon < 1e-7 || options.epsilon > 1e-3) {
    throw ConfigError("finite_diff_check: epsilon must lie in [1e-7, 1e-3]");
  }
  std::vector<std::size_t> coords(params.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (options.max_coords != 0 && options.max_coords < coords.size()) {
    Rng rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  std::vector<double> probe(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + options.epsilon;
    const double up = loss_fn(probe);
    probe[i] = orig - options.epsilon;
    const double down = loss_fn(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite loss at coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * options.epsilon);
    const double rel = std::abs(analytic_grad[i] - numeric) / (std::abs(analytic_grad[i]) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

std::vector<double> flatten(std::span<const Tensor2* const> tensors) {
  std::vector<double> flat;
  for (const Tensor2* t : tensors) flat.insert(flat.end(), t->data.begin(), t->data.end());
  return flat;
}

void unflatten(std::span<const double> flat, std::span<Tensor2* const> tensors) {
  std::size_t offset = 0;
  for (Tensor2* t : tensors) {
    if (offset + t->size() > flat.size()) throw DimensionError("unflatten: buffer too short");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t->size(), t->data.begin());
    offset += t->size();
  }
  if (offset != flat.size()) throw DimensionError("unflatten: buffer too long");
}

}  // namespace hide

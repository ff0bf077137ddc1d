#include "hide/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hide {

void CRConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("contrastive lambda must be >= 0");
}

std::vector<double> LinearHead::logits(std::span<const double> h) const {
  if (h.size() != weight.rows) {
    throw DimensionError("head input has length " + std::to_string(h.size()) + ", expected " +
                         std::to_string(weight.rows));
  }
  std::vector<double> out(bias.data.begin(), bias.data.end());
  for (std::size_t i = 0; i < weight.rows; ++i) {
    const double hi = h[i];
    auto w = weight.row(i);
    for (std::size_t j = 0; j < weight.cols; ++j) out[j] += hi * w[j];
  }
  return out;
}

void LinearHead::add_outputs(std::size_t count) {
  Tensor2 w(weight.rows, weight.cols + count);
  for (std::size_t i = 0; i < weight.rows; ++i) {
    std::copy(weight.row(i).begin(), weight.row(i).end(), w.row(i).begin());
  }
  Tensor2 b(1, bias.cols + count);
  std::copy(bias.data.begin(), bias.data.end(), b.data.begin());
  weight = std::move(w);
  bias = std::move(b);
}

CRResult cr_loss(const Tensor2& reps, const Tensor2& old_means, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("cr_loss: temperature must be > 0");
  CRResult result;
  result.grad_reps = Tensor2(reps.rows, reps.cols);
  if (old_means.rows == 0 || reps.rows == 0) return result;
  if (old_means.cols != reps.cols) {
    throw DimensionError("cr_loss: representation dim " + std::to_string(reps.cols) +
                         " differs from mean dim " + std::to_string(old_means.cols));
  }

  const std::size_t batch = reps.rows;
  const std::size_t classes = old_means.rows;
  const std::size_t dim = reps.cols;
  const double inv_tau = 1.0 / temperature;
  const double inv_classes = 1.0 / static_cast<double>(classes);

  std::vector<double> mean_of_means(dim, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t j = 0; j < dim; ++j) mean_of_means[j] += old_means(c, j);
  }
  for (double& v : mean_of_means) v *= inv_classes;

  std::vector<double> scores(batch + classes);
  for (std::size_t b = 0; b < batch; ++b) {
    auto h = reps.row(b);
    for (std::size_t k = 0; k < batch; ++k) scores[k] = dot(h, reps.row(k)) * inv_tau;
    double mean_old = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      scores[batch + c] = dot(h, old_means.row(c)) * inv_tau;
      mean_old += scores[batch + c];
    }
    mean_old *= inv_classes;
    const double lse = log_sum_exp(scores);
    result.loss += mean_old - lse;

    const auto p = softmax(scores);
    auto gb = result.grad_reps.row(b);
    for (std::size_t j = 0; j < dim; ++j) gb[j] += mean_of_means[j] * inv_tau;
    for (std::size_t k = 0; k < batch; ++k) {
      // d(h_b . h_k)/d h_b = h_k and d/d h_k = h_b; the self term collects both.
      auto hk = reps.row(k);
      auto gk = result.grad_reps.row(k);
      const double w = p[k] * inv_tau;
      for (std::size_t j = 0; j < dim; ++j) {
        gb[j] -= w * hk[j];
        gk[j] -= w * h[j];
      }
    }
    for (std::size_t c = 0; c < classes; ++c) {
      auto mu = old_means.row(c);
      const double w = p[batch + c] * inv_tau;
      for (std::size_t j = 0; j < dim; ++j) gb[j] -= w * mu[j];
    }
  }
  return result;
}

HeadLossResult head_cross_entropy(const LinearHead& head, const Tensor2& reps,
                                  std::span<const std::size_t> targets,
                                  std::span<const std::size_t> columns) {
  if (targets.size() != reps.rows) throw DimensionError("head_cross_entropy: target count");
  if (reps.rows == 0) throw DataError("head_cross_entropy: empty batch");
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  if (cols.empty()) {
    cols.resize(head.out_dim());
    for (std::size_t j = 0; j < cols.size(); ++j) cols[j] = j;
  }
  for (std::size_t c : cols) {
    if (c >= head.out_dim()) throw IndexError("head_cross_entropy: column out of range");
  }

  HeadLossResult result;
  result.grad_reps = Tensor2(reps.rows, reps.cols);
  result.grad_head = LinearHead(head.in_dim(), head.out_dim());
  const double inv_batch = 1.0 / static_cast<double>(reps.rows);

  std::vector<double> sliced(cols.size());
  for (std::size_t b = 0; b < reps.rows; ++b) {
    auto pos = std::find(cols.begin(), cols.end(), targets[b]);
    if (pos == cols.end()) {
      throw DataError("label column " + std::to_string(targets[b]) +
                      " is outside the current softmax scope");
    }
    const std::size_t local_target = static_cast<std::size_t>(pos - cols.begin());
    const auto h = reps.row(b);
    const auto logits = head.logits(h);
    for (std::size_t j = 0; j < cols.size(); ++j) sliced[j] = logits[cols[j]];
    result.loss += cross_entropy(sliced, local_target) * inv_batch;
    const auto g = cross_entropy_grad(sliced, local_target);

    auto gh = result.grad_reps.row(b);
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const double gj = g[j] * inv_batch;
      const std::size_t col = cols[j];
      result.grad_head.bias.data[col] += gj;
      for (std::size_t i = 0; i < head.in_dim(); ++i) {
        result.grad_head.weight(i, col) += gj * h[i];
        gh[i] += gj * head.weight(i, col);
      }
    }
  }
  return result;
}

WtpResult wtp_loss(const BackboneSurrogate& backbone, const PeftParams& peft,
                   const LinearHead& head, const Tensor2& inputs,
                   std::span<const std::size_t> targets, std::span<const std::size_t> task_columns,
                   const Tensor2& old_means, const WtpOptions& options) {
  options.cr.validate();
  if (inputs.rows == 0) throw DataError("wtp_loss: empty batch");
  if (targets.size() != inputs.rows) throw DimensionError("wtp_loss: target count");
  if (task_columns.empty()) throw DataError("wtp_loss: current task has no classes");
  for (std::size_t t : targets) {
    if (std::find(task_columns.begin(), task_columns.end(), t) == task_columns.end()) {
      throw DataError("wtp_loss: label column " + std::to_string(t) +
                      " does not belong to the current task");
    }
  }

  const std::size_t dim = backbone.config().output_dim();
  std::vector<ForwardCache> caches(inputs.rows);
  Tensor2 reps(inputs.rows, dim);
  for (std::size_t b = 0; b < inputs.rows; ++b) {
    const auto h = forward_adapted(backbone, inputs.row(b), peft, &caches[b]);
    std::copy(h.begin(), h.end(), reps.row(b).begin());
  }

  const std::span<const std::size_t> scope =
      options.scope == SoftmaxScope::TaskLocal ? task_columns : std::span<const std::size_t>{};
  HeadLossResult ce = head_cross_entropy(head, reps, targets, scope);
  Tensor2 grad_reps = std::move(ce.grad_reps);

  WtpResult result;
  result.ce = ce.loss;
  if (options.cr.lambda > 0.0 && old_means.rows > 0) {
    CRResult cr = cr_loss(reps, old_means, options.cr.temperature);
    result.cr = cr.loss;
    axpy(options.cr.lambda, cr.grad_reps, grad_reps);
  }
  result.bundle.loss = result.ce + options.cr.lambda * result.cr;

  if (options.restrict_head_grad) {
    std::vector<bool> keep(head.out_dim(), false);
    for (std::size_t c : task_columns) keep.at(c) = true;
    for (std::size_t j = 0; j < head.out_dim(); ++j) {
      if (keep[j]) continue;
      ce.grad_head.bias.data[j] = 0.0;
      for (std::size_t i = 0; i < head.in_dim(); ++i) ce.grad_head.weight(i, j) = 0.0;
    }
  }

  PeftParams grad_peft = peft.zeros_like();
  for (std::size_t b = 0; b < inputs.rows; ++b) {
    backward_adapted(backbone, caches[b], peft, grad_reps.row(b), grad_peft);
  }
  std::size_t handle = 0;
  for (auto& t : grad_peft.raw()) result.bundle.grads.emplace(handle++, std::move(t));
  result.bundle.grads.emplace(handle++, std::move(ce.grad_head.weight));
  result.bundle.grads.emplace(handle++, std::move(ce.grad_head.bias));
  result.reps = std::move(reps);
  return result;
}

namespace {

PseudoLossResult pseudo_loss(const LinearHead& head, std::span<const PseudoBatch> batches,
                             const char* name) {
  PseudoLossResult result;
  result.grad_head = LinearHead(head.in_dim(), head.out_dim());
  if (batches.empty()) return result;
  const std::size_t per_class = batches.front().samples.rows;
  if (per_class == 0) throw DataError(std::string(name) + ": empty pseudo batch");
  for (const auto& pb : batches) {
    if (pb.samples.rows != per_class) {
      throw DataError(std::string(name) + ": pseudo batches must hold an equal count per class");
    }
    if (pb.target >= head.out_dim()) {
      throw DataError(std::string(name) + ": target " + std::to_string(pb.target) +
                      " is not a known output (head has " + std::to_string(head.out_dim()) + ")");
    }
    if (pb.samples.cols != head.in_dim()) throw DimensionError(std::string(name) + ": sample dim");
  }
  const double scale = 1.0 / static_cast<double>(batches.size() * per_class);
  for (const auto& pb : batches) {
    for (std::size_t s = 0; s < per_class; ++s) {
      const auto h = pb.samples.row(s);
      const auto logits = head.logits(h);
      result.loss += cross_entropy(logits, pb.target) * scale;
      const auto g = cross_entropy_grad(logits, pb.target);
      for (std::size_t j = 0; j < head.out_dim(); ++j) {
        const double gj = g[j] * scale;
        result.grad_head.bias.data[j] += gj;
        for (std::size_t i = 0; i < head.in_dim(); ++i) result.grad_head.weight(i, j) += gj * h[i];
      }
    }
  }
  return result;
}

}  // namespace

PseudoLossResult tii_loss(const LinearHead& omega, std::span<const PseudoBatch> batches) {
  return pseudo_loss(omega, batches, "tii_loss");
}

PseudoLossResult tap_loss(const LinearHead& psi, std::span<const PseudoBatch> batches) {
  return pseudo_loss(psi, batches, "tap_loss");
}

}  // namespace hide

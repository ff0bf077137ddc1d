#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hide/backbone.hpp"
#include "hide/numerics.hpp"

namespace hide {

struct CRConfig {
  double temperature = 0.8;
  double lambda = 0.1;

  void validate() const;
  bool operator==(const CRConfig&) const = default;
};

/// Linear output layer R^D -> R^C with weight D x C and bias 1 x C.
struct LinearHead {
  Tensor2 weight;
  Tensor2 bias;

  LinearHead() = default;
  LinearHead(std::size_t in_dim, std::size_t out_dim) : weight(in_dim, out_dim), bias(1, out_dim) {}

  std::size_t in_dim() const noexcept { return weight.rows; }
  std::size_t out_dim() const noexcept { return weight.cols; }
  std::vector<double> logits(std::span<const double> h) const;
  /// Appends zero-initialised outputs.
  void add_outputs(std::size_t count);

  bool operator==(const LinearHead&) const = default;
};

/// omega (task identity, one output per task) and psi (one output per observed class).
struct HeadParams {
  LinearHead tii;
  LinearHead tap;

  bool operator==(const HeadParams&) const = default;
};

struct CRResult {
  double loss = 0.0;
  Tensor2 grad_reps;  // same shape as the batch
};

/// Contrastive regularisation over a batch of adapted representations (rows of `reps`)
/// against the means of previously learned classes (rows of `old_means`):
///   sum_h mean_c log[ exp(h.mu_c/tau) / (sum_h' exp(h.h'/tau) + sum_c' exp(h.mu_c'/tau)) ]
/// where h' ranges over the whole batch, h itself included. Zero when there are no old means.
CRResult cr_loss(const Tensor2& reps, const Tensor2& old_means, double temperature);

enum class SoftmaxScope : std::uint8_t { TaskLocal = 0, Global = 1 };

struct HeadLossResult {
  double loss = 0.0;
  Tensor2 grad_reps;
  LinearHead grad_head;
};

/// Mean cross-entropy of `head` over rows of `reps`. `targets` are head output indices.
/// With a non-empty `columns`, the softmax runs over those outputs only and targets must
/// be members of it.
HeadLossResult head_cross_entropy(const LinearHead& head, const Tensor2& reps,
                                  std::span<const std::size_t> targets,
                                  std::span<const std::size_t> columns = {});

struct WtpOptions {
  CRConfig cr;
  SoftmaxScope scope = SoftmaxScope::TaskLocal;
  /// Zero the head gradient outside the current task's columns.
  bool restrict_head_grad = true;
};

struct WtpResult {
  /// Handles: 0..n-1 are the PEFT tensors in order, then head weight, then head bias.
  GradBundle bundle;
  /// Adapted representations of the batch, one row per input.
  Tensor2 reps;
  double ce = 0.0;
  double cr = 0.0;
};

/// L_CE(psi, e_t) + lambda * L_CR(e_t) on a labelled batch of raw inputs (rows of `inputs`).
/// `targets` index outputs of `head`; `task_columns` lists the outputs of the current task.
WtpResult wtp_loss(const BackboneSurrogate& backbone, const PeftParams& peft,
                   const LinearHead& head, const Tensor2& inputs,
                   std::span<const std::size_t> targets, std::span<const std::size_t> task_columns,
                   const Tensor2& old_means, const WtpOptions& options);

/// Balanced pseudo-representations of one class, labelled with a head output index
/// (task index for TII, class column for TAP).
struct PseudoBatch {
  std::size_t target = 0;
  Tensor2 samples;
};

struct PseudoLossResult {
  double loss = 0.0;
  LinearHead grad_head;
};

/// Class-count-normalised cross-entropy over per-class pseudo sets:
///   (1 / #classes) * sum_classes mean_{h in class} -log softmax(head(h))[target].
/// Requires an equal sample count per class.
PseudoLossResult tii_loss(const LinearHead& omega, std::span<const PseudoBatch> batches);
PseudoLossResult tap_loss(const LinearHead& psi, std::span<const PseudoBatch> batches);

}  // namespace hide

#include "hide/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace hide {

void BackboneConfig::validate() const {
  if (input_dim == 0 || num_layers == 0 || tokens == 0 || token_dim == 0 || ffn_dim == 0) {
    throw ConfigError("backbone dimensions must all be >= 1");
  }
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
}

BackboneSurrogate::BackboneSurrogate(BackboneConfig config, BackboneWeights weights,
                                     std::uint64_t seed)
    : config_(config), weights_(std::move(weights)), seed_(seed) {
  config_.validate();
  const std::size_t d = config_.token_dim;
  const std::size_t f = config_.ffn_dim;
  auto expect = [](const Tensor2& t, std::size_t r, std::size_t c, const char* name) {
    if (t.rows != r || t.cols != c) {
      throw ConfigError(std::string("backbone weight '") + name + "' has wrong shape");
    }
  };
  if (config_.input_dim != config_.token_grid_size()) {
    expect(weights_.input_projection, config_.input_dim, config_.token_grid_size(),
           "input_projection");
  } else if (weights_.input_projection.size() != 0) {
    throw ConfigError("input projection given although input_dim matches the token grid");
  }
  if (weights_.layers.size() != config_.num_layers) throw ConfigError("backbone layer count");
  for (const auto& l : weights_.layers) {
    expect(l.attn_norm.gain, 1, d, "attn_norm.gain");
    expect(l.attn_norm.bias, 1, d, "attn_norm.bias");
    expect(l.query, d, d, "query");
    expect(l.key, d, d, "key");
    expect(l.value, d, d, "value");
    expect(l.out, d, d, "out");
    expect(l.query_bias, 1, d, "query_bias");
    expect(l.key_bias, 1, d, "key_bias");
    expect(l.value_bias, 1, d, "value_bias");
    expect(l.out_bias, 1, d, "out_bias");
    expect(l.ffn_norm.gain, 1, d, "ffn_norm.gain");
    expect(l.ffn_norm.bias, 1, d, "ffn_norm.bias");
    expect(l.ffn_in, d, f, "ffn_in");
    expect(l.ffn_in_bias, 1, f, "ffn_in_bias");
    expect(l.ffn_out, f, d, "ffn_out");
    expect(l.ffn_out_bias, 1, d, "ffn_out_bias");
  }
  expect(weights_.final_norm.gain, 1, d, "final_norm.gain");
  expect(weights_.final_norm.bias, 1, d, "final_norm.bias");
}

BackboneWeights zero_backbone_weights(const BackboneConfig& config) {
  config.validate();
  const std::size_t d = config.token_dim;
  const std::size_t f = config.ffn_dim;
  BackboneWeights w;
  if (config.input_dim != config.token_grid_size()) {
    w.input_projection = Tensor2(config.input_dim, config.token_grid_size());
  }
  auto norm = [d] { return LayerNormParams{Tensor2(1, d, 1.0), Tensor2(1, d)}; };
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    EncoderLayerWeights lw;
    lw.attn_norm = norm();
    lw.query = Tensor2(d, d);
    lw.key = Tensor2(d, d);
    lw.value = Tensor2(d, d);
    lw.out = Tensor2(d, d);
    lw.query_bias = Tensor2(1, d);
    lw.key_bias = Tensor2(1, d);
    lw.value_bias = Tensor2(1, d);
    lw.out_bias = Tensor2(1, d);
    lw.ffn_norm = norm();
    lw.ffn_in = Tensor2(d, f);
    lw.ffn_in_bias = Tensor2(1, f);
    lw.ffn_out = Tensor2(f, d);
    lw.ffn_out_bias = Tensor2(1, d);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = norm();
  return w;
}

BackboneSurrogate init_backbone(std::uint64_t seed, const BackboneConfig& config) {
  BackboneWeights w = zero_backbone_weights(config);
  Rng rng(seed);
  const double d = static_cast<double>(config.token_dim);
  const double f = static_cast<double>(config.ffn_dim);
  if (w.input_projection.size() != 0) {
    fill_normal(w.input_projection, 1.0 / std::sqrt(static_cast<double>(config.input_dim)), rng);
  }
  for (auto& lw : w.layers) {
    fill_normal(lw.query, 1.0 / std::sqrt(d), rng);
    fill_normal(lw.key, 1.0 / std::sqrt(d), rng);
    fill_normal(lw.value, 1.0 / std::sqrt(d), rng);
    fill_normal(lw.out, 1.0 / std::sqrt(d), rng);
    fill_normal(lw.ffn_in, 1.0 / std::sqrt(d), rng);
    fill_normal(lw.ffn_out, 1.0 / std::sqrt(f), rng);
  }
  return BackboneSurrogate(config, std::move(w), seed);
}

std::string to_string(PeftKind kind) {
  switch (kind) {
    case PeftKind::Prompt: return "prompt";
    case PeftKind::LoRA: return "lora";
    case PeftKind::FiLM: return "film";
    case PeftKind::Adapter: return "adapter";
  }
  return "unknown";
}

PeftKind peft_kind_from_string(const std::string& name) {
  if (name == "prompt") return PeftKind::Prompt;
  if (name == "lora") return PeftKind::LoRA;
  if (name == "film") return PeftKind::FiLM;
  if (name == "adapter") return PeftKind::Adapter;
  throw ConfigError("unknown PEFT kind '" + name + "'");
}

std::size_t PeftParams::tensors_per_layer(PeftKind kind) {
  switch (kind) {
    case PeftKind::Prompt: return 1;
    case PeftKind::LoRA: return 2;
    case PeftKind::FiLM: return 2;
    case PeftKind::Adapter: return 4;
  }
  throw ConfigError("unknown PEFT kind");
}

PeftParams::PeftParams(PeftConfig config, const BackboneConfig& backbone)
    : config_(std::move(config)), num_layers_(backbone.num_layers), token_dim_(backbone.token_dim) {
  backbone.validate();
  const std::size_t d = token_dim_;
  switch (config_.kind) {
    case PeftKind::LoRA:
      if (config_.lora_rank == 0) throw ConfigError("lora_rank must be >= 1");
      break;
    case PeftKind::Adapter:
      if (config_.adapter_bottleneck == 0) throw ConfigError("adapter_bottleneck must be >= 1");
      break;
    default: break;
  }
  for (std::size_t l = 0; l < num_layers_; ++l) {
    switch (config_.kind) {
      case PeftKind::Prompt:
        tensors_.emplace_back(config_.prompt_len, d);
        break;
      case PeftKind::LoRA:
        tensors_.emplace_back(d, config_.lora_rank);
        tensors_.emplace_back(config_.lora_rank, d);
        break;
      case PeftKind::FiLM:
        tensors_.emplace_back(1, d, 1.0);
        tensors_.emplace_back(1, d);
        break;
      case PeftKind::Adapter:
        tensors_.emplace_back(d, config_.adapter_bottleneck);
        tensors_.emplace_back(1, config_.adapter_bottleneck);
        tensors_.emplace_back(config_.adapter_bottleneck, d);
        tensors_.emplace_back(1, d);
        break;
    }
  }
}

std::vector<Tensor2*> PeftParams::tensors() {
  std::vector<Tensor2*> out;
  for (auto& t : tensors_) out.push_back(&t);
  return out;
}

std::vector<const Tensor2*> PeftParams::tensors() const {
  std::vector<const Tensor2*> out;
  for (const auto& t : tensors_) out.push_back(&t);
  return out;
}

std::size_t PeftParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

PeftParams PeftParams::zeros_like() const {
  PeftParams z = *this;
  for (auto& t : z.tensors_) t.fill(0.0);
  return z;
}

void PeftParams::check_compatible(const BackboneConfig& backbone) const {
  if (num_layers_ != backbone.num_layers || token_dim_ != backbone.token_dim) {
    throw ConfigError("PEFT parameters were built for a different backbone configuration");
  }
  if (tensors_.size() != num_layers_ * tensors_per_layer(config_.kind)) {
    throw ConfigError("PEFT tensor count does not match its kind");
  }
}

PeftParams null_peft(const PeftConfig& config, const BackboneConfig& backbone) {
  PeftConfig c = config;
  if (c.kind == PeftKind::Prompt) c.prompt_len = 0;
  return PeftParams(c, backbone);
}

PeftParams init_peft(const PeftConfig& config, const BackboneConfig& backbone,
                     const PeftParams* previous, std::uint64_t seed) {
  if (previous != nullptr) {
    if (previous->config() != config) {
      throw ConfigError("init_peft: previous parameters have kind '" +
                        to_string(previous->kind()) + "' or a different configuration");
    }
    previous->check_compatible(backbone);
    return *previous;
  }
  PeftParams p(config, backbone);
  Rng rng(seed);
  const double d = static_cast<double>(backbone.token_dim);
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    switch (config.kind) {
      case PeftKind::Prompt:
        fill_normal(p.tensor(l, 0), 0.02, rng);
        break;
      case PeftKind::LoRA:
        fill_normal(p.tensor(l, 0), 1.0 / std::sqrt(d), rng);
        break;
      case PeftKind::FiLM:
        break;
      case PeftKind::Adapter:
        fill_normal(p.tensor(l, 0), 1.0 / std::sqrt(d), rng);
        break;
    }
  }
  return p;
}

Tensor2 embed_tokens(const BackboneConfig& config, std::span<const double> x) {
  if (x.size() != config.token_grid_size()) {
    throw DimensionError("embed_tokens: expected " + std::to_string(config.token_grid_size()) +
                         " values, got " + std::to_string(x.size()));
  }
  Tensor2 t(config.tokens, config.token_dim);
  std::copy(x.begin(), x.end(), t.data.begin());
  return t;
}

std::vector<double> flatten_tokens(const Tensor2& tokens) { return tokens.data; }

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * x * (1.0 + t);
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Tensor2 layer_norm(const Tensor2& x, const LayerNormParams& p, double eps, LayerNormCache* cache) {
  Tensor2 out(x.rows, x.cols);
  Tensor2 normalized(x.rows, x.cols);
  std::vector<double> inv_stds(x.rows);
  const double n = static_cast<double>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_stds[i] = inv;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double xh = (r[j] - mean) * inv;
      normalized(i, j) = xh;
      out(i, j) = p.gain.data[j] * xh + p.bias.data[j];
    }
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_stds);
  }
  return out;
}

Tensor2 layer_norm_backward(const Tensor2& grad_out, const LayerNormParams& p,
                            const LayerNormCache& cache) {
  Tensor2 dx(grad_out.rows, grad_out.cols);
  const double n = static_cast<double>(grad_out.cols);
  std::vector<double> dxhat(grad_out.cols);
  for (std::size_t i = 0; i < grad_out.rows; ++i) {
    double m1 = 0.0;
    double m2 = 0.0;
    for (std::size_t j = 0; j < grad_out.cols; ++j) {
      dxhat[j] = grad_out(i, j) * p.gain.data[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * cache.normalized(i, j);
    }
    m1 /= n;
    m2 /= n;
    for (std::size_t j = 0; j < grad_out.cols; ++j) {
      dx(i, j) = cache.inv_std[i] * (dxhat[j] - m1 - cache.normalized(i, j) * m2);
    }
  }
  return dx;
}

void softmax_rows(Tensor2& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    const auto p = softmax(r);
    std::copy(p.begin(), p.end(), r.begin());
  }
}

Tensor2 linear(const Tensor2& x, const Tensor2& w, const Tensor2& b) {
  Tensor2 y = matmul(x, w);
  add_row_bias(y, b);
  return y;
}

void add_into(Tensor2& dst, const Tensor2& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

std::vector<double> run_encoder(const BackboneSurrogate& backbone, std::span<const double> x,
                                const PeftParams* peft, ForwardCache* cache) {
  const BackboneConfig& cfg = backbone.config();
  const BackboneWeights& w = backbone.weights();
  if (x.size() != cfg.input_dim) {
    throw DimensionError("backbone input has length " + std::to_string(x.size()) +
                         ", expected " + std::to_string(cfg.input_dim));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw NumericError("backbone input contains a non-finite value");
  }
  if (peft != nullptr) peft->check_compatible(cfg);
  const PeftKind kind = peft != nullptr ? peft->kind() : PeftKind::Prompt;

  Tensor2 tokens;
  if (w.input_projection.size() != 0) {
    const Tensor2 projected = matmul(Tensor2::from_row(x), w.input_projection);
    tokens = embed_tokens(cfg, projected.data);
  } else {
    tokens = embed_tokens(cfg, x);
  }

  if (cache != nullptr) cache->layers.assign(cfg.num_layers, {});
  const std::size_t d = cfg.token_dim;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const EncoderLayerWeights& lw = w.layers[l];
    const std::size_t prompt_rows =
        (peft != nullptr && kind == PeftKind::Prompt) ? peft->tensor(l, 0).rows : 0;

    Tensor2 z(prompt_rows + tokens.rows, d);
    if (prompt_rows > 0) {
      const Tensor2& prompt = peft->tensor(l, 0);
      std::copy(prompt.data.begin(), prompt.data.end(), z.data.begin());
    }
    std::copy(tokens.data.begin(), tokens.data.end(),
              z.data.begin() + static_cast<std::ptrdiff_t>(prompt_rows * d));

    LayerNormCache attn_norm_cache;
    Tensor2 u = layer_norm(z, lw.attn_norm, cfg.layer_norm_eps, &attn_norm_cache);
    Tensor2 q = linear(u, lw.query, lw.query_bias);
    Tensor2 k = linear(u, lw.key, lw.key_bias);
    Tensor2 v = linear(u, lw.value, lw.value_bias);
    Tensor2 lora_hidden;
    if (peft != nullptr && kind == PeftKind::LoRA) {
      lora_hidden = matmul(u, peft->tensor(l, 0));
      const Tensor2 delta = matmul(lora_hidden, peft->tensor(l, 1));
      const double scaling = 1.0 / static_cast<double>(peft->config().lora_rank);
      for (std::size_t i = 0; i < v.size(); ++i) v.data[i] += scaling * delta.data[i];
    }

    Tensor2 probs = matmul_nt(q, k);
    for (double& s : probs.data) s *= attn_scale;
    softmax_rows(probs);
    Tensor2 attended = matmul(probs, v);
    Tensor2 residual1 = z;
    add_into(residual1, linear(attended, lw.out, lw.out_bias));

    LayerNormCache ffn_norm_cache;
    Tensor2 u2 = layer_norm(residual1, lw.ffn_norm, cfg.layer_norm_eps, &ffn_norm_cache);
    Tensor2 pre = linear(u2, lw.ffn_in, lw.ffn_in_bias);
    Tensor2 act = pre;
    for (double& a : act.data) a = gelu(a);
    Tensor2 residual2 = residual1;
    add_into(residual2, linear(act, lw.ffn_out, lw.ffn_out_bias));

    Tensor2 out = residual2;
    Tensor2 adapter_hidden;
    if (peft != nullptr && kind == PeftKind::Adapter) {
      adapter_hidden = linear(residual2, peft->tensor(l, 0), peft->tensor(l, 1));
      for (double& h : adapter_hidden.data) h = std::tanh(h);
      add_into(out, linear(adapter_hidden, peft->tensor(l, 2), peft->tensor(l, 3)));
    }
    Tensor2 pre_film;
    if (peft != nullptr && kind == PeftKind::FiLM) {
      pre_film = out;
      const Tensor2& gamma = peft->tensor(l, 0);
      const Tensor2& beta = peft->tensor(l, 1);
      for (std::size_t i = 0; i < out.rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) out(i, j) = out(i, j) * gamma.data[j] + beta.data[j];
      }
    }

    tokens = Tensor2(out.rows - prompt_rows, d);
    std::copy(out.data.begin() + static_cast<std::ptrdiff_t>(prompt_rows * d), out.data.end(),
              tokens.data.begin());

    if (cache != nullptr) {
      EncoderLayerCache& c = cache->layers[l];
      c.prompt_rows = prompt_rows;
      c.input = std::move(z);
      c.attn_norm = std::move(attn_norm_cache);
      c.normed = std::move(u);
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.probs = std::move(probs);
      c.attended = std::move(attended);
      c.lora_hidden = std::move(lora_hidden);
      c.residual1 = std::move(residual1);
      c.ffn_norm = std::move(ffn_norm_cache);
      c.ffn_normed = std::move(u2);
      c.ffn_pre = std::move(pre);
      c.ffn_act = std::move(act);
      c.residual2 = std::move(residual2);
      c.adapter_hidden = std::move(adapter_hidden);
      c.adapted = std::move(pre_film);
    }
  }

  Tensor2 normed =
      layer_norm(tokens, w.final_norm, cfg.layer_norm_eps, cache ? &cache->final_norm : nullptr);
  std::vector<double> pooled(d, 0.0);
  for (std::size_t i = 0; i < normed.rows; ++i) {
    for (std::size_t j = 0; j < d; ++j) pooled[j] += normed(i, j);
  }
  const double inv_rows = 1.0 / static_cast<double>(normed.rows);
  for (double& p : pooled) p *= inv_rows;
  return pooled;
}

}  // namespace

std::vector<double> forward_unadapted(const BackboneSurrogate& backbone,
                                      std::span<const double> x) {
  return run_encoder(backbone, x, nullptr, nullptr);
}

std::vector<double> forward_adapted(const BackboneSurrogate& backbone, std::span<const double> x,
                                    const PeftParams& peft, ForwardCache* cache) {
  return run_encoder(backbone, x, &peft, cache);
}

void backward_adapted(const BackboneSurrogate& backbone, const ForwardCache& cache,
                      const PeftParams& peft, std::span<const double> grad_output,
                      PeftParams& grad) {
  const BackboneConfig& cfg = backbone.config();
  const BackboneWeights& w = backbone.weights();
  const std::size_t d = cfg.token_dim;
  if (grad_output.size() != d) throw DimensionError("backward_adapted: gradient length");
  if (cache.layers.size() != cfg.num_layers) {
    throw StateError("backward_adapted: cache does not come from forward_adapted");
  }
  if (grad.kind() != peft.kind() || grad.raw().size() != peft.raw().size()) {
    throw ConfigError("backward_adapted: gradient accumulator does not match parameters");
  }
  const PeftKind kind = peft.kind();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor2 grad_pool(cfg.tokens, d);
  const double inv_rows = 1.0 / static_cast<double>(cfg.tokens);
  for (std::size_t i = 0; i < cfg.tokens; ++i) {
    for (std::size_t j = 0; j < d; ++j) grad_pool(i, j) = grad_output[j] * inv_rows;
  }
  Tensor2 grad_tokens = layer_norm_backward(grad_pool, w.final_norm, cache.final_norm);

  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const EncoderLayerCache& c = cache.layers[li];
    const EncoderLayerWeights& lw = w.layers[li];
    const std::size_t rows = c.prompt_rows + cfg.tokens;

    Tensor2 dout(rows, d);
    std::copy(grad_tokens.data.begin(), grad_tokens.data.end(),
              dout.data.begin() + static_cast<std::ptrdiff_t>(c.prompt_rows * d));

    if (kind == PeftKind::FiLM) {
      const Tensor2& gamma = peft.tensor(li, 0);
      Tensor2& dgamma = grad.tensor(li, 0);
      Tensor2& dbeta = grad.tensor(li, 1);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          dgamma.data[j] += dout(i, j) * c.adapted(i, j);
          dbeta.data[j] += dout(i, j);
          dout(i, j) *= gamma.data[j];
        }
      }
    }

    if (kind == PeftKind::Adapter) {
      const Tensor2& hidden = c.adapter_hidden;
      add_into(grad.tensor(li, 2), matmul_tn(hidden, dout));
      add_into(grad.tensor(li, 3), column_sums(dout));
      Tensor2 dpre = matmul_nt(dout, peft.tensor(li, 2));
      for (std::size_t i = 0; i < dpre.size(); ++i) {
        dpre.data[i] *= 1.0 - hidden.data[i] * hidden.data[i];
      }
      add_into(grad.tensor(li, 0), matmul_tn(c.residual2, dpre));
      add_into(grad.tensor(li, 1), column_sums(dpre));
      add_into(dout, matmul_nt(dpre, peft.tensor(li, 0)));
    }

    // residual2 = residual1 + ffn(residual1)
    Tensor2 dact = matmul_nt(dout, lw.ffn_out);
    for (std::size_t i = 0; i < dact.size(); ++i) dact.data[i] *= gelu_grad(c.ffn_pre.data[i]);
    Tensor2 du2 = matmul_nt(dact, lw.ffn_in);
    Tensor2 dres1 = dout;
    add_into(dres1, layer_norm_backward(du2, lw.ffn_norm, c.ffn_norm));

    // residual1 = z + attention(z)
    Tensor2 dattended = matmul_nt(dres1, lw.out);
    Tensor2 dprobs = matmul_nt(dattended, c.v);
    Tensor2 dv = matmul_tn(c.probs, dattended);
    Tensor2 dscores(rows, rows);
    for (std::size_t i = 0; i < rows; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < rows; ++j) inner += dprobs(i, j) * c.probs(i, j);
      for (std::size_t j = 0; j < rows; ++j) {
        dscores(i, j) = c.probs(i, j) * (dprobs(i, j) - inner) * attn_scale;
      }
    }
    Tensor2 dq = matmul(dscores, c.k);
    Tensor2 dk = matmul_tn(dscores, c.q);
    Tensor2 du = matmul_nt(dq, lw.query);
    add_into(du, matmul_nt(dk, lw.key));
    add_into(du, matmul_nt(dv, lw.value));

    if (kind == PeftKind::LoRA) {
      const double scaling = 1.0 / static_cast<double>(peft.config().lora_rank);
      Tensor2 db = matmul_tn(c.lora_hidden, dv);
      axpy(scaling, db, grad.tensor(li, 1));
      Tensor2 dhidden = matmul_nt(dv, peft.tensor(li, 1));
      for (double& v : dhidden.data) v *= scaling;
      add_into(grad.tensor(li, 0), matmul_tn(c.normed, dhidden));
      add_into(du, matmul_nt(dhidden, peft.tensor(li, 0)));
    }

    Tensor2 dz = dres1;
    add_into(dz, layer_norm_backward(du, lw.attn_norm, c.attn_norm));

    if (kind == PeftKind::Prompt && c.prompt_rows > 0) {
      Tensor2& dprompt = grad.tensor(li, 0);
      for (std::size_t i = 0; i < c.prompt_rows * d; ++i) dprompt.data[i] += dz.data[i];
    }
    grad_tokens = Tensor2(cfg.tokens, d);
    std::copy(dz.data.begin() + static_cast<std::ptrdiff_t>(c.prompt_rows * d), dz.data.end(),
              grad_tokens.data.begin());
  }
}

}  // namespace hide

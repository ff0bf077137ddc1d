#include "hide/datio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

namespace hide {

namespace {

// ---- little-endian byte helpers ---------------------------------------------------------

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void size(std::size_t v) { u64(static_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str(const std::string& s) {
    size(s.size());
    raw(s);
  }
  void tensor(const Tensor2& t) {
    size(t.rows);
    size(t.cols);
    for (double v : t.data) f64(v);
  }
  void u32s(const std::vector<std::uint32_t>& v) {
    size(v.size());
    for (auto x : v) u32(x);
  }
  void f64s(const std::vector<double>& v) {
    size(v.size());
    for (double x : v) f64(x);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated input while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(get(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  bool flag(const char* what) {
    const std::size_t at = pos_;
    const auto v = u8(what);
    if (v > 1) throw FormatError(std::string("invalid boolean for ") + what, at);
    return v == 1;
  }
  std::size_t size(const char* what, std::size_t bytes_per_item = 1) {
    const std::size_t at = pos_;
    const std::uint64_t v = u64(what);
    if (bytes_per_item > 0 && v > remaining() / bytes_per_item) {
      throw FormatError(std::string("count of ") + what + " exceeds the remaining payload", at);
    }
    return static_cast<std::size_t>(v);
  }
  std::string str(const char* what) {
    const std::size_t n = size(what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Tensor2 tensor(const char* what) {
    const std::size_t r = size(what, 0);
    const std::size_t c = size(what, 0);
    if (c != 0 && r > remaining() / 8 / c) {
      throw FormatError(std::string("tensor ") + what + " exceeds the remaining payload", pos_);
    }
    Tensor2 t(r, c);
    for (double& v : t.data) v = f64(what);
    return t;
  }
  std::vector<std::uint32_t> u32s(const char* what) {
    std::vector<std::uint32_t> v(size(what, 4));
    for (auto& x : v) x = u32(what);
    return v;
  }
  std::vector<double> f64s(const char* what) {
    std::vector<double> v(size(what, 8));
    for (auto& x : v) x = f64(what);
    return v;
  }
  void expect_end() const {
    if (remaining() != 0) {
      throw FormatError(std::to_string(remaining()) + " trailing bytes after the payload", pos_);
    }
  }

 private:
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

// ---- files ----------------------------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to " + path + " failed");
}

// ---- embedding files ------------------------------------------------------------------

std::vector<std::uint8_t> serialize_embeddings(const EmbeddingDataset& ds) {
  if (ds.features.rows != ds.size() || ds.tasks.size() != ds.size() ||
      (ds.size() > 0 && ds.features.cols != ds.dim)) {
    throw DimensionError("embedding dataset fields disagree in size");
  }
  ByteWriter w;
  w.raw("HIDE");
  w.u16(kEmbeddingFileVersion);
  w.u32(ds.dim);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] >= ds.class_count) {
      throw DataError("class id " + std::to_string(ds.labels[i]) + " >= class_count " +
                      std::to_string(ds.class_count));
    }
    w.u32(ds.labels[i]);
    w.u32(ds.tasks[i]);
    for (double v : ds.features.row(i)) w.f32(static_cast<float>(v));
  }
  return w.take();
}

EmbeddingDataset parse_embeddings(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), "HIDE", 4) != 0) throw FormatError("bad magic, expected HIDE", 0);
  for (int i = 0; i < 4; ++i) r.u8("magic");
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16("version");
  if (version != kEmbeddingFileVersion) {
    throw VersionError("unsupported embedding file version " + std::to_string(version),
                       version_at);
  }
  EmbeddingDataset ds;
  ds.dim = r.u32("dim");
  const std::uint32_t count = r.u32("sample_count");
  ds.class_count = r.u32("class_count");
  const std::uint64_t record = 8 + 4ULL * ds.dim;
  const std::uint64_t expected = record * count;
  if (r.remaining() != expected) {
    const std::uint64_t complete = std::min<std::uint64_t>(count, r.remaining() / record);
    throw FormatError("declared " + std::to_string(count) + " records of " +
                          std::to_string(record) + " bytes but the payload holds " +
                          std::to_string(r.remaining()) + " bytes",
                      kEmbeddingHeaderBytes + (r.remaining() < expected ? complete * record
                                                                        : expected));
  }
  ds.features = Tensor2(count, ds.dim);
  ds.labels.reserve(count);
  ds.tasks.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t cls = r.u32("class_id");
    if (cls >= ds.class_count) {
      throw FormatError("class id " + std::to_string(cls) + " >= class_count " +
                            std::to_string(ds.class_count),
                        at);
    }
    ds.labels.push_back(cls);
    ds.tasks.push_back(r.u32("task_id"));
    for (double& v : ds.features.row(i)) v = static_cast<double>(r.f32("feature"));
  }
  r.expect_end();
  return ds;
}

void save_embeddings(const EmbeddingDataset& ds, const std::string& path) {
  write_file(path, serialize_embeddings(ds));
}

EmbeddingDataset load_embeddings(const std::string& path) {
  return parse_embeddings(read_file(path));
}

// ---- synthetic streams ----------------------------------------------------------------

void SynthSpec::validate() const {
  if (tasks == 0 || classes_per_task == 0 || dim == 0 || samples_per_class == 0) {
    throw ConfigError("synthetic spec counts must all be >= 1");
  }
  if (!(separation >= 0.0)) throw ConfigError("separation must be >= 0");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie strictly between 0 and 1");
  }
  if (samples_per_class < 2) throw ConfigError("samples_per_class must be >= 2 for a split");
  if (token_groups == 0 || dim % token_groups != 0) {
    throw ConfigError("token_groups must divide dim");
  }
  if (latent_dim > dim / token_groups) throw ConfigError("latent_dim cannot exceed dim / token_groups");
  if (!(nuisance_scale >= 0.0)) throw ConfigError("nuisance_scale must be >= 0");
  if (nuisance_dim > 0) {
    const std::size_t classes = tasks * classes_per_task + holdout_classes;
    const std::size_t latent = latent_dim > 0 ? latent_dim : std::min(dim / token_groups, classes);
    if (latent + nuisance_dim > dim / token_groups) {
      throw ConfigError("class subspace plus nuisance_dim cannot exceed dim / token_groups");
    }
  }
  if (scenario == Scenario::DIL && holdout_classes > 0) {
    throw ConfigError("holdout classes contradict a DIL stream, whose label set is shared");
  }
}

namespace {

std::size_t stream_mean_count(const SynthSpec& spec) { return spec.tasks * spec.classes_per_task; }

// Orthonormal rows spanning a random k-dimensional subspace of R^dim (Gram-Schmidt).
Tensor2 random_basis(Rng& rng, std::size_t dim, std::size_t k) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor2 basis(k, dim);
  for (std::size_t r = 0; r < k; ++r) {
    auto v = basis.row(r);
    for (;;) {
      for (double& x : v) x = n01(rng);
      for (std::size_t p = 0; p < r; ++p) {
        const double proj = dot(v, basis.row(p));
        auto b = basis.row(p);
        for (std::size_t j = 0; j < dim; ++j) v[j] -= proj * b[j];
      }
      const double norm = std::sqrt(dot(v, v));
      if (norm > 1e-6) {
        for (double& x : v) x /= norm;
        break;
      }
    }
  }
  return basis;
}

// Repeats each row of a chunk-space basis across `groups` equal chunks, keeping unit norm.
Tensor2 tile_basis(const Tensor2& chunk_basis, std::size_t groups) {
  const std::size_t chunk = chunk_basis.cols;
  Tensor2 out(chunk_basis.rows, chunk * groups);
  const double scale = 1.0 / std::sqrt(static_cast<double>(groups));
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t j = 0; j < chunk; ++j) out(r, g * chunk + j) = scale * chunk_basis(r, j);
    }
  }
  return out;
}

struct SynthBases {
  Tensor2 classes;   // latent x dim
  Tensor2 nuisance;  // nuisance_dim x dim
  Rng rng;           // continues the stream that drew the bases
};

SynthBases synth_bases(std::uint64_t seed, const SynthSpec& spec) {
  const std::size_t count = stream_mean_count(spec) + spec.holdout_classes;
  const std::size_t chunk = spec.dim / spec.token_groups;
  const std::size_t latent = spec.latent_dim > 0 ? spec.latent_dim : std::min(chunk, count);
  SynthBases out{Tensor2(), Tensor2(0, spec.dim), Rng(derive_seed(seed, 0x5e, 1))};
  const Tensor2 chunk_basis = random_basis(out.rng, chunk, latent + spec.nuisance_dim);
  Tensor2 cls(latent, chunk);
  std::copy(chunk_basis.data.begin(), chunk_basis.data.begin() + static_cast<std::ptrdiff_t>(latent * chunk),
            cls.data.begin());
  out.classes = tile_basis(cls, spec.token_groups);
  if (spec.nuisance_dim > 0) {
    Tensor2 nui(spec.nuisance_dim, chunk);
    std::copy(chunk_basis.data.begin() + static_cast<std::ptrdiff_t>(latent * chunk),
              chunk_basis.data.end(), nui.data.begin());
    out.nuisance = tile_basis(nui, spec.token_groups);
  }
  return out;
}

}  // namespace

Tensor2 synth_class_means(std::uint64_t seed, const SynthSpec& spec) {
  spec.validate();
  const std::size_t count = stream_mean_count(spec) + spec.holdout_classes;
  SynthBases bases = synth_bases(seed, spec);
  Rng& rng = bases.rng;
  const Tensor2& basis = bases.classes;
  const std::size_t latent = basis.rows;
  const double gap = spec.separation * spec.sigma;
  Tensor2 coords(count, latent);
  if (count <= latent) {
    // Scaled orthonormal directions: every pair sits exactly `gap` apart.
    for (std::size_t m = 0; m < count; ++m) coords(m, m) = gap / std::sqrt(2.0);
  } else {
    // Rejection sampling with a spread whose typical pair distance is a little above `gap`;
    // the spread widens slowly whenever placement stalls.
    std::normal_distribution<double> n01(0.0, 1.0);
    double spread = 1.1 * gap / std::sqrt(2.0 * static_cast<double>(latent));
    std::size_t placed = 0;
    std::size_t stalled = 0;
    while (placed < count) {
      auto c = coords.row(placed);
      for (double& x : c) x = spread * n01(rng);
      bool ok = true;
      for (std::size_t o = 0; o < placed && ok; ++o) {
        double d2 = 0.0;
        auto other = coords.row(o);
        for (std::size_t j = 0; j < latent; ++j) d2 += (c[j] - other[j]) * (c[j] - other[j]);
        ok = std::sqrt(d2) >= gap;
      }
      if (ok) {
        ++placed;
        stalled = 0;
      } else if (++stalled % 200 == 0) {
        spread *= 1.02;
      }
    }
  }
  return matmul(coords, basis);
}

TaskStream synth_stream(std::uint64_t seed, const SynthSpec& spec) {
  spec.validate();
  const Tensor2 means = synth_class_means(seed, spec);
  const Tensor2 nuisance = synth_bases(seed, spec).nuisance;
  const double noise = spec.sigma / std::sqrt(static_cast<double>(spec.dim));
  const double nuisance_sd =
      nuisance.rows > 0
          ? spec.nuisance_scale * spec.sigma / std::sqrt(static_cast<double>(nuisance.rows))
          : 0.0;
  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(spec.samples_per_class))),
      1, spec.samples_per_class - 1);
  const bool dil = spec.scenario == Scenario::DIL;
  const auto stream_classes = static_cast<std::uint32_t>(
      dil ? spec.classes_per_task : spec.tasks * spec.classes_per_task);
  const auto total_classes = static_cast<std::uint32_t>(stream_classes + spec.holdout_classes);

  auto draw_class = [&](std::size_t mean_row, std::uint32_t label, std::uint32_t task,
                        EmbeddingDataset& train, EmbeddingDataset& test) {
    Rng rng(derive_seed(seed, 0x5e, 2, mean_row));
    Rng nuisance_rng(derive_seed(seed, 0x5e, 3, mean_row));
    std::normal_distribution<double> n01(0.0, 1.0);
    std::normal_distribution<double> nuisance_n01(0.0, 1.0);
    std::vector<double> x(spec.dim);
    const auto mu = means.row(mean_row);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      for (std::size_t j = 0; j < spec.dim; ++j) x[j] = mu[j] + noise * n01(rng);
      for (std::size_t k = 0; k < nuisance.rows; ++k) {
        const double z = nuisance_sd * nuisance_n01(nuisance_rng);
        const auto u = nuisance.row(k);
        for (std::size_t j = 0; j < spec.dim; ++j) x[j] += z * u[j];
      }
      (s < n_train ? train : test).append(x, label, task);
    }
  };
  auto empty_dataset = [&] {
    EmbeddingDataset ds;
    ds.dim = static_cast<std::uint32_t>(spec.dim);
    ds.features = Tensor2(0, spec.dim);
    ds.class_count = total_classes;
    return ds;
  };

  TaskStream stream;
  stream.scenario = spec.scenario;
  for (std::size_t t = 0; t < spec.tasks; ++t) {
    TaskData td;
    td.task_id = static_cast<std::uint32_t>(t);
    td.train = empty_dataset();
    td.test = empty_dataset();
    for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
      const std::size_t row = t * spec.classes_per_task + c;
      const auto label = static_cast<std::uint32_t>(dil ? c : row);
      draw_class(row, label, td.task_id, td.train, td.test);
      td.labels.push_back(label);
    }
    td.train.class_count = total_classes;
    td.test.class_count = total_classes;
    stream.tasks.push_back(std::move(td));
  }
  stream.holdout = empty_dataset();
  for (std::size_t h = 0; h < spec.holdout_classes; ++h) {
    const std::size_t row = stream_mean_count(spec) + h;
    draw_class(row, static_cast<std::uint32_t>(stream_classes + h),
               static_cast<std::uint32_t>(spec.tasks), stream.holdout, stream.holdout);
  }
  stream.holdout.class_count = total_classes;
  stream.validate();
  return stream;
}

// ---- run configuration ----------------------------------------------------------------

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) ==
        allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void read_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(where + "." + key + " must be a non-negative integer");
  }
  out = v.get<std::size_t>();
}

SoftmaxScope scope_from_string(const std::string& s) {
  if (s == "task_local") return SoftmaxScope::TaskLocal;
  if (s == "global") return SoftmaxScope::Global;
  throw ConfigError("wtp_scope must be task_local or global, got '" + s + "'");
}

std::string to_string(SoftmaxScope s) { return s == SoftmaxScope::TaskLocal ? "task_local" : "global"; }

TapSchedule schedule_from_string(const std::string& s) {
  if (s == "per_epoch") return TapSchedule::PerEpoch;
  if (s == "post_hoc") return TapSchedule::PostHoc;
  throw ConfigError("tap_schedule must be per_epoch or post_hoc, got '" + s + "'");
}

std::string to_string(TapSchedule s) { return s == TapSchedule::PerEpoch ? "per_epoch" : "post_hoc"; }

PeftConfig parse_peft(const json& j, PeftConfig out) {
  const std::string where = "train.peft";
  check_keys(j, {"kind", "prompt_len", "lora_rank", "adapter_bottleneck"}, where);
  if (j.contains("kind")) {
    std::string kind;
    read_opt(j, "kind", kind, where);
    out.kind = peft_kind_from_string(kind);
  }
  read_size(j, "prompt_len", out.prompt_len, where);
  read_size(j, "lora_rank", out.lora_rank, where);
  read_size(j, "adapter_bottleneck", out.adapter_bottleneck, where);
  return out;
}

TrainConfig parse_train(const json& j, TrainConfig out) {
  const std::string where = "train";
  check_keys(j,
             {"epochs", "batch_size", "learning_rate", "peft", "centroids", "noise_sigma",
              "pseudo_per_class", "pseudo_batch_per_class", "resample_each_epoch", "cr",
              "wtp_scope", "tap_schedule", "shared_lora", "shared_lora_rank"},
             where);
  read_size(j, "epochs", out.epochs, where);
  read_size(j, "batch_size", out.batch_size, where);
  read_opt(j, "learning_rate", out.learning_rate, where);
  if (j.contains("peft")) out.peft = parse_peft(j.at("peft"), out.peft);
  read_size(j, "centroids", out.centroids, where);
  if (j.contains("noise_sigma")) {
    if (j.at("noise_sigma").is_null()) {
      out.noise_sigma.reset();
    } else {
      double v = 0.0;
      read_opt(j, "noise_sigma", v, where);
      out.noise_sigma = v;
    }
  }
  read_size(j, "pseudo_per_class", out.pseudo_per_class, where);
  read_size(j, "pseudo_batch_per_class", out.pseudo_batch_per_class, where);
  read_opt(j, "resample_each_epoch", out.resample_each_epoch, where);
  if (j.contains("cr")) {
    check_keys(j.at("cr"), {"temperature", "lambda"}, "train.cr");
    read_opt(j.at("cr"), "temperature", out.cr.temperature, "train.cr");
    read_opt(j.at("cr"), "lambda", out.cr.lambda, "train.cr");
  }
  if (j.contains("wtp_scope")) {
    std::string s;
    read_opt(j, "wtp_scope", s, where);
    out.wtp_scope = scope_from_string(s);
  }
  if (j.contains("tap_schedule")) {
    std::string s;
    read_opt(j, "tap_schedule", s, where);
    out.tap_schedule = schedule_from_string(s);
  }
  read_opt(j, "shared_lora", out.shared_lora, where);
  read_size(j, "shared_lora_rank", out.shared_lora_rank, where);
  return out;
}

SynthSpec parse_synth(const json& j) {
  const std::string where = "synthetic";
  check_keys(j,
             {"tasks", "classes_per_task", "dim", "samples_per_class", "separation", "sigma",
              "token_groups", "latent_dim", "nuisance_dim", "nuisance_scale", "holdout_classes",
              "train_fraction"},
             where);
  SynthSpec s;
  read_size(j, "tasks", s.tasks, where);
  read_size(j, "classes_per_task", s.classes_per_task, where);
  read_size(j, "dim", s.dim, where);
  read_size(j, "samples_per_class", s.samples_per_class, where);
  read_opt(j, "separation", s.separation, where);
  read_opt(j, "sigma", s.sigma, where);
  read_size(j, "token_groups", s.token_groups, where);
  read_size(j, "latent_dim", s.latent_dim, where);
  read_size(j, "nuisance_dim", s.nuisance_dim, where);
  read_opt(j, "nuisance_scale", s.nuisance_scale, where);
  read_size(j, "holdout_classes", s.holdout_classes, where);
  read_opt(j, "train_fraction", s.train_fraction, where);
  return s;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j,
             {"scenario", "seed", "threads", "backbone", "backbone_seed", "train", "synthetic",
              "data", "output", "fewshot"},
             "config");
  RunConfig c;
  if (j.contains("scenario")) {
    std::string s;
    read_opt(j, "scenario", s, "config");
    c.scenario = scenario_from_string(s);
  }
  read_opt(j, "seed", c.seed, "config");
  read_size(j, "threads", c.threads, "config");
  read_opt(j, "backbone_seed", c.backbone_seed, "config");
  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    check_keys(b, {"input_dim", "num_layers", "tokens", "token_dim", "ffn_dim", "layer_norm_eps"},
               "backbone");
    read_size(b, "input_dim", c.backbone.input_dim, "backbone");
    read_size(b, "num_layers", c.backbone.num_layers, "backbone");
    read_size(b, "tokens", c.backbone.tokens, "backbone");
    read_size(b, "token_dim", c.backbone.token_dim, "backbone");
    read_size(b, "ffn_dim", c.backbone.ffn_dim, "backbone");
    read_opt(b, "layer_norm_eps", c.backbone.layer_norm_eps, "backbone");
  }
  if (j.contains("train")) c.train = parse_train(j.at("train"), c.train);
  if (j.contains("synthetic")) {
    c.synthetic = parse_synth(j.at("synthetic"));
    c.synthetic->scenario = c.scenario;
  }
  if (j.contains("data")) {
    check_keys(j.at("data"), {"train", "test", "holdout"}, "data");
    read_opt(j.at("data"), "train", c.data.train, "data");
    read_opt(j.at("data"), "test", c.data.test, "data");
    read_opt(j.at("data"), "holdout", c.data.holdout, "data");
  }
  if (j.contains("output")) {
    check_keys(j.at("output"), {"state", "metrics", "svg"}, "output");
    read_opt(j.at("output"), "state", c.output.state, "output");
    read_opt(j.at("output"), "metrics", c.output.metrics, "output");
    read_opt(j.at("output"), "svg", c.output.svg, "output");
  }
  if (j.contains("fewshot")) {
    const json& f = j.at("fewshot");
    check_keys(f, {"ways", "shots", "queries", "episodes", "steps", "learning_rate",
                   "use_shared_lora"},
               "fewshot");
    read_size(f, "ways", c.fewshot.ways, "fewshot");
    read_size(f, "shots", c.fewshot.shots, "fewshot");
    read_size(f, "queries", c.fewshot.queries, "fewshot");
    read_size(f, "episodes", c.fewshot.episodes, "fewshot");
    read_size(f, "steps", c.fewshot.finetune.steps, "fewshot");
    read_opt(f, "learning_rate", c.fewshot.finetune.learning_rate, "fewshot");
    read_opt(f, "use_shared_lora", c.fewshot.finetune.use_shared_lora, "fewshot");
  }
  c.train.seed = c.seed;
  c.backbone.validate();
  c.train.validate();
  if (c.synthetic) c.synthetic->validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_run_config(text);
}

std::string dump_run_config(const RunConfig& c) {
  json j;
  j["scenario"] = to_string(c.scenario);
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["backbone_seed"] = c.backbone_seed;
  j["backbone"] = {{"input_dim", c.backbone.input_dim},   {"num_layers", c.backbone.num_layers},
                   {"tokens", c.backbone.tokens},         {"token_dim", c.backbone.token_dim},
                   {"ffn_dim", c.backbone.ffn_dim},       {"layer_norm_eps", c.backbone.layer_norm_eps}};
  const TrainConfig& t = c.train;
  j["train"] = {
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"learning_rate", t.learning_rate},
      {"peft",
       {{"kind", to_string(t.peft.kind)},
        {"prompt_len", t.peft.prompt_len},
        {"lora_rank", t.peft.lora_rank},
        {"adapter_bottleneck", t.peft.adapter_bottleneck}}},
      {"centroids", t.centroids},
      {"noise_sigma", t.noise_sigma ? json(*t.noise_sigma) : json(nullptr)},
      {"pseudo_per_class", t.pseudo_per_class},
      {"pseudo_batch_per_class", t.pseudo_batch_per_class},
      {"resample_each_epoch", t.resample_each_epoch},
      {"cr", {{"temperature", t.cr.temperature}, {"lambda", t.cr.lambda}}},
      {"wtp_scope", to_string(t.wtp_scope)},
      {"tap_schedule", to_string(t.tap_schedule)},
      {"shared_lora", t.shared_lora},
      {"shared_lora_rank", t.shared_lora_rank}};
  if (c.synthetic) {
    const SynthSpec& s = *c.synthetic;
    j["synthetic"] = {{"tasks", s.tasks},
                      {"classes_per_task", s.classes_per_task},
                      {"dim", s.dim},
                      {"samples_per_class", s.samples_per_class},
                      {"separation", s.separation},
                      {"sigma", s.sigma},
                      {"token_groups", s.token_groups},
                      {"latent_dim", s.latent_dim},
                      {"nuisance_dim", s.nuisance_dim},
                      {"nuisance_scale", s.nuisance_scale},
                      {"holdout_classes", s.holdout_classes},
                      {"train_fraction", s.train_fraction}};
  }
  j["data"] = {{"train", c.data.train}, {"test", c.data.test}, {"holdout", c.data.holdout}};
  j["output"] = {{"state", c.output.state}, {"metrics", c.output.metrics}, {"svg", c.output.svg}};
  j["fewshot"] = {{"ways", c.fewshot.ways},
                  {"shots", c.fewshot.shots},
                  {"queries", c.fewshot.queries},
                  {"episodes", c.fewshot.episodes},
                  {"steps", c.fewshot.finetune.steps},
                  {"learning_rate", c.fewshot.finetune.learning_rate},
                  {"use_shared_lora", c.fewshot.finetune.use_shared_lora}};
  return j.dump(2) + "\n";
}

TaskStream stream_from_config(const RunConfig& config) {
  if (config.synthetic) {
    SynthSpec spec = *config.synthetic;
    spec.scenario = config.scenario;
    return synth_stream(config.seed, spec);
  }
  if (config.data.train.empty()) {
    throw ConfigError("config names neither a synthetic spec nor data.train");
  }
  const EmbeddingDataset train = load_embeddings(config.data.train);
  EmbeddingDataset test;
  if (!config.data.test.empty()) test = load_embeddings(config.data.test);
  TaskStream stream = stream_from_datasets(train, test, config.scenario);
  if (!config.data.holdout.empty()) stream.holdout = load_embeddings(config.data.holdout);
  return stream;
}

// ---- model state ----------------------------------------------------------------------

namespace {

constexpr std::string_view kStateMagic = "HIDS";

void write_norm(ByteWriter& w, const LayerNormParams& n) {
  w.tensor(n.gain);
  w.tensor(n.bias);
}

LayerNormParams read_norm(ByteReader& r) {
  LayerNormParams n;
  n.gain = r.tensor("layer norm gain");
  n.bias = r.tensor("layer norm bias");
  return n;
}

void write_peft_config(ByteWriter& w, const PeftConfig& c) {
  w.u8(static_cast<std::uint8_t>(c.kind));
  w.size(c.prompt_len);
  w.size(c.lora_rank);
  w.size(c.adapter_bottleneck);
  w.str(c.adapter_activation);
}

PeftConfig read_peft_config(ByteReader& r) {
  PeftConfig c;
  const std::size_t at = r.offset();
  const auto kind = r.u8("peft kind");
  if (kind > static_cast<std::uint8_t>(PeftKind::Adapter)) throw FormatError("unknown PEFT kind", at);
  c.kind = static_cast<PeftKind>(kind);
  c.prompt_len = r.size("prompt_len", 0);
  c.lora_rank = r.size("lora_rank", 0);
  c.adapter_bottleneck = r.size("adapter_bottleneck", 0);
  c.adapter_activation = r.str("adapter_activation");
  return c;
}

void write_peft(ByteWriter& w, const PeftParams& p) {
  write_peft_config(w, p.config());
  w.size(p.raw().size());
  for (const auto& t : p.raw()) w.tensor(t);
}

PeftParams read_peft(ByteReader& r, const BackboneConfig& bb) {
  const PeftConfig cfg = read_peft_config(r);
  const std::size_t at = r.offset();
  PeftParams p;
  try {
    p = PeftParams(cfg, bb);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid PEFT configuration: ") + e.what(), at);
  }
  const std::size_t n = r.size("peft tensor count", 16);
  if (n != p.raw().size()) throw FormatError("PEFT tensor count does not match its kind", at);
  for (auto& t : p.raw()) {
    const std::size_t tat = r.offset();
    Tensor2 loaded = r.tensor("peft tensor");
    if (!loaded.same_shape(t)) throw FormatError("PEFT tensor has the wrong shape", tat);
    t = std::move(loaded);
  }
  return p;
}

void write_head(ByteWriter& w, const LinearHead& h) {
  w.tensor(h.weight);
  w.tensor(h.bias);
}

LinearHead read_head(ByteReader& r) {
  LinearHead h;
  const std::size_t at = r.offset();
  h.weight = r.tensor("head weight");
  h.bias = r.tensor("head bias");
  if (h.bias.rows != 1 || h.bias.cols != h.weight.cols) {
    throw FormatError("head bias does not match its weight", at);
  }
  return h;
}

void write_stats(ByteWriter& w, const ClassStatistics& s) {
  w.u32(s.class_id);
  w.u32(s.task_id);
  w.tensor(s.centroids);
  w.size(s.counts.size());
  for (auto c : s.counts) w.u64(c);
  w.f64(s.noise_sigma);
  w.f64s(s.mean);
}

ClassStatistics read_stats(ByteReader& r) {
  ClassStatistics s;
  s.class_id = r.u32("class_id");
  s.task_id = r.u32("task_id");
  const std::size_t at = r.offset();
  s.centroids = r.tensor("centroids");
  s.counts.resize(r.size("counts", 8));
  for (auto& c : s.counts) c = r.u64("count");
  s.noise_sigma = r.f64("noise_sigma");
  s.mean = r.f64s("mean");
  if (s.counts.size() != s.centroids.rows || s.mean.size() != s.centroids.cols) {
    throw FormatError("class statistics fields disagree in size", at);
  }
  return s;
}

void write_train_config(ByteWriter& w, const TrainConfig& c) {
  w.size(c.epochs);
  w.size(c.batch_size);
  w.f64(c.learning_rate);
  write_peft_config(w, c.peft);
  w.size(c.centroids);
  w.u8(c.noise_sigma ? 1 : 0);
  w.f64(c.noise_sigma.value_or(0.0));
  w.size(c.pseudo_per_class);
  w.size(c.pseudo_batch_per_class);
  w.u8(c.resample_each_epoch ? 1 : 0);
  w.f64(c.cr.temperature);
  w.f64(c.cr.lambda);
  w.u8(static_cast<std::uint8_t>(c.wtp_scope));
  w.u8(static_cast<std::uint8_t>(c.tap_schedule));
  w.u8(c.shared_lora ? 1 : 0);
  w.size(c.shared_lora_rank);
  w.u64(c.seed);
}

TrainConfig read_train_config(ByteReader& r) {
  TrainConfig c;
  c.epochs = r.size("epochs", 0);
  c.batch_size = r.size("batch_size", 0);
  c.learning_rate = r.f64("learning_rate");
  c.peft = read_peft_config(r);
  c.centroids = r.size("centroids", 0);
  const bool has_sigma = r.flag("noise_sigma flag");
  const double sigma = r.f64("noise_sigma");
  if (has_sigma) c.noise_sigma = sigma;
  c.pseudo_per_class = r.size("pseudo_per_class", 0);
  c.pseudo_batch_per_class = r.size("pseudo_batch_per_class", 0);
  c.resample_each_epoch = r.flag("resample_each_epoch");
  c.cr.temperature = r.f64("cr temperature");
  c.cr.lambda = r.f64("cr lambda");
  const std::size_t at = r.offset();
  const auto scope = r.u8("wtp_scope");
  const auto schedule = r.u8("tap_schedule");
  if (scope > 1 || schedule > 1) throw FormatError("invalid training enum", at);
  c.wtp_scope = static_cast<SoftmaxScope>(scope);
  c.tap_schedule = static_cast<TapSchedule>(schedule);
  c.shared_lora = r.flag("shared_lora");
  c.shared_lora_rank = r.size("shared_lora_rank", 0);
  c.seed = r.u64("seed");
  return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_peft(const PeftParams& peft) {
  ByteWriter w;
  write_peft(w, peft);
  return w.take();
}

std::vector<std::uint8_t> serialize_state(const ModelState& s) {
  ByteWriter w;
  w.raw(kStateMagic);
  w.u16(kStateFileVersion);
  w.u8(static_cast<std::uint8_t>(s.scenario));

  const BackboneConfig& bc = s.backbone.config();
  w.size(bc.input_dim);
  w.size(bc.num_layers);
  w.size(bc.tokens);
  w.size(bc.token_dim);
  w.size(bc.ffn_dim);
  w.f64(bc.layer_norm_eps);
  w.u64(s.backbone.seed());
  const BackboneWeights& bw = s.backbone.weights();
  w.tensor(bw.input_projection);
  for (const auto& l : bw.layers) {
    write_norm(w, l.attn_norm);
    for (const Tensor2* t : {&l.query, &l.query_bias, &l.key, &l.key_bias, &l.value, &l.value_bias,
                             &l.out, &l.out_bias}) {
      w.tensor(*t);
    }
    write_norm(w, l.ffn_norm);
    for (const Tensor2* t : {&l.ffn_in, &l.ffn_in_bias, &l.ffn_out, &l.ffn_out_bias}) w.tensor(*t);
  }
  write_norm(w, bw.final_norm);

  write_train_config(w, s.config);

  w.size(s.tasks.size());
  for (const auto& t : s.tasks) {
    w.u32(t.task_id);
    w.u32(t.dataset_id);
    w.u32s(t.classes);
  }
  w.u32s(s.class_columns);
  write_head(w, s.heads.tii);
  write_head(w, s.heads.tap);
  w.size(s.peft_per_task.size());
  for (const auto& p : s.peft_per_task) write_peft(w, p);

  w.size(s.stats.entries().size());
  for (const auto& [key, entry] : s.stats.entries()) {
    w.u32(key.first);
    w.u32(key.second);
    w.u8(entry.unadapted ? 1 : 0);
    if (entry.unadapted) write_stats(w, *entry.unadapted);
    w.u8(entry.adapted ? 1 : 0);
    if (entry.adapted) write_stats(w, *entry.adapted);
  }

  w.size(s.shared.size());
  for (const auto& a : s.shared) {
    w.u32(a.dataset_id);
    write_peft(w, a.lora);
    write_head(w, a.head);
    w.u32s(a.classes);
  }

  w.size(s.accuracy.num_tasks());
  for (const auto& col : s.accuracy.columns()) w.f64s(col);
  return w.take();
}

ModelState parse_state(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kStateMagic.data(), 4) != 0) {
    throw FormatError("bad magic, expected HIDS", 0);
  }
  for (int i = 0; i < 4; ++i) r.u8("magic");
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16("version");
  if (version != kStateFileVersion) {
    throw VersionError("model state version " + std::to_string(version) +
                           " is not supported (this build reads version " +
                           std::to_string(kStateFileVersion) + ")",
                       version_at);
  }
  const std::size_t scenario_at = r.offset();
  const auto scenario = r.u8("scenario");
  if (scenario > 2) throw FormatError("unknown scenario", scenario_at);

  const std::size_t bb_at = r.offset();
  BackboneConfig bc;
  bc.input_dim = r.size("input_dim", 0);
  bc.num_layers = r.size("num_layers", 0);
  bc.tokens = r.size("tokens", 0);
  bc.token_dim = r.size("token_dim", 0);
  bc.ffn_dim = r.size("ffn_dim", 0);
  bc.layer_norm_eps = r.f64("layer_norm_eps");
  const std::uint64_t bb_seed = r.u64("backbone seed");
  if (bc.num_layers > r.remaining()) throw FormatError("implausible layer count", bb_at);
  BackboneWeights bw;
  bw.input_projection = r.tensor("input_projection");
  for (std::size_t l = 0; l < bc.num_layers; ++l) {
    EncoderLayerWeights lw;
    lw.attn_norm = read_norm(r);
    for (Tensor2* t : {&lw.query, &lw.query_bias, &lw.key, &lw.key_bias, &lw.value, &lw.value_bias,
                       &lw.out, &lw.out_bias}) {
      *t = r.tensor("attention weight");
    }
    lw.ffn_norm = read_norm(r);
    for (Tensor2* t : {&lw.ffn_in, &lw.ffn_in_bias, &lw.ffn_out, &lw.ffn_out_bias}) {
      *t = r.tensor("ffn weight");
    }
    bw.layers.push_back(std::move(lw));
  }
  bw.final_norm = read_norm(r);
  std::optional<BackboneSurrogate> backbone;
  try {
    backbone.emplace(bc, std::move(bw), bb_seed);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid backbone: ") + e.what(), bb_at);
  }

  const std::size_t cfg_at = r.offset();
  TrainConfig cfg = read_train_config(r);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid training configuration: ") + e.what(), cfg_at);
  }
  ModelState state(std::move(*backbone), cfg, static_cast<Scenario>(scenario));

  const std::size_t n_tasks = r.size("task count", 12);
  for (std::size_t i = 0; i < n_tasks; ++i) {
    TaskRecord t;
    t.task_id = r.u32("task_id");
    t.dataset_id = r.u32("dataset_id");
    t.classes = r.u32s("task classes");
    state.tasks.push_back(std::move(t));
  }
  state.class_columns = r.u32s("class columns");
  const std::size_t heads_at = r.offset();
  state.heads.tii = read_head(r);
  state.heads.tap = read_head(r);
  const std::size_t dim = bc.output_dim();
  if (state.heads.tii.in_dim() != dim || state.heads.tap.in_dim() != dim ||
      state.heads.tii.out_dim() != n_tasks || state.heads.tap.out_dim() != state.class_columns.size()) {
    throw FormatError("head shapes disagree with the task records", heads_at);
  }
  const std::size_t peft_at = r.offset();
  const std::size_t n_peft = r.size("peft count", 16);
  if (n_peft != n_tasks) throw FormatError("one PEFT set per task expected", peft_at);
  for (std::size_t i = 0; i < n_peft; ++i) state.peft_per_task.push_back(read_peft(r, bc));

  const std::size_t n_stats = r.size("statistics count", 10);
  for (std::size_t i = 0; i < n_stats; ++i) {
    const std::size_t at = r.offset();
    const StatStore::Key key{r.u32("stat task"), r.u32("stat class")};
    StatStore::Entry entry;
    if (r.flag("unadapted flag")) entry.unadapted = read_stats(r);
    if (r.flag("adapted flag")) entry.adapted = read_stats(r);
    if (state.stats.entries().count(key) != 0) throw FormatError("duplicate statistics entry", at);
    state.stats.entries().emplace(key, std::move(entry));
  }

  const std::size_t n_shared = r.size("shared adapter count", 4);
  for (std::size_t i = 0; i < n_shared; ++i) {
    SharedAdapter a;
    a.dataset_id = r.u32("shared dataset id");
    a.lora = read_peft(r, bc);
    a.head = read_head(r);
    a.classes = r.u32s("shared classes");
    state.shared.push_back(std::move(a));
  }

  const std::size_t acc_at = r.offset();
  const std::size_t n_cols = r.size("accuracy columns", 8);
  try {
    for (std::size_t i = 0; i < n_cols; ++i) state.accuracy.push_column(r.f64s("accuracy column"));
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("invalid accuracy matrix: ") + e.what(), acc_at);
  }
  r.expect_end();
  return state;
}

void save_state(const ModelState& state, const std::string& path) {
  write_file(path, serialize_state(state));
}

ModelState load_state(const std::string& path) { return parse_state(read_file(path)); }

}  // namespace hide

#pragma once

// Training loop, learning-rate schedule, Adam, checkpoints, evaluation and
// spectrogram image export.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "audioslots/autodiff.hpp"
#include "audioslots/config.hpp"
#include "audioslots/data.hpp"
#include "audioslots/dsp.hpp"
#include "audioslots/errors.hpp"
#include "audioslots/matching.hpp"
#include "audioslots/metrics.hpp"
#include "audioslots/model.hpp"
#include "audioslots/separation.hpp"

namespace audioslots::pipeline {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace fs = std::filesystem;
using model::AudioSlots;
using model::ModelConfig;

struct TrainConfig {
  std::size_t steps = 300000;
  std::size_t batch_size = 64;
  double base_lr = 2e-4;
  std::size_t warmup_steps = 2500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0 disables
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 1;
  double crop_seconds = 0.5;

  /// Settings for a single-core run of a few thousand steps.
  static TrainConfig desk() {
    TrainConfig c;
    c.steps = 5000;
    c.batch_size = 8;
    c.base_lr = 1e-3;
    c.warmup_steps = 100;
    return c;
  }

  void validate() const {
    audioslots::detail::require(steps >= 1, "steps must be >= 1");
    audioslots::detail::require(batch_size >= 1, "batch_size must be >= 1");
    audioslots::detail::require(warmup_steps < steps, "warmup_steps must be smaller than steps");
    audioslots::detail::require(base_lr >= 0.0 && std::isfinite(base_lr), "base_lr must be finite and >= 0");
    audioslots::detail::require(crop_seconds > 0.0, "crop_seconds must be positive");
  }

  config::KeyValues to_kv() const {
    config::KeyValues kv;
    kv["steps"] = std::to_string(steps);
    kv["batch_size"] = std::to_string(batch_size);
    kv["base_lr"] = config::format_double(base_lr);
    kv["warmup_steps"] = std::to_string(warmup_steps);
    kv["adam_beta1"] = config::format_double(adam_beta1);
    kv["adam_beta2"] = config::format_double(adam_beta2);
    kv["adam_eps"] = config::format_double(adam_eps);
    kv["seed"] = std::to_string(seed);
    kv["eval_every"] = std::to_string(eval_every);
    kv["checkpoint_every"] = std::to_string(checkpoint_every);
    kv["log_every"] = std::to_string(log_every);
    kv["crop_seconds"] = config::format_double(crop_seconds);
    return kv;
  }

  void apply(const config::KeyValues& kv) {
    config::read(kv, "steps", steps);
    config::read(kv, "batch_size", batch_size);
    config::read(kv, "base_lr", base_lr);
    config::read(kv, "warmup_steps", warmup_steps);
    config::read(kv, "adam_beta1", adam_beta1);
    config::read(kv, "adam_beta2", adam_beta2);
    config::read(kv, "adam_eps", adam_eps);
    config::read(kv, "seed", seed);
    config::read(kv, "eval_every", eval_every);
    config::read(kv, "checkpoint_every", checkpoint_every);
    config::read(kv, "log_every", log_every);
    config::read(kv, "crop_seconds", crop_seconds);
  }

  bool operator==(const TrainConfig&) const = default;
};

// ------------------------------------------------------------ schedule

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at `steps`.
inline double lr_schedule(const TrainConfig& c, std::size_t step) {
  audioslots::detail::require(step <= c.steps, "lr_schedule: step " + std::to_string(step) + " outside [0, " +
                                                   std::to_string(c.steps) + "]");
  if (step < c.warmup_steps)
    return c.base_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double progress =
      static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.steps - c.warmup_steps);
  return c.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- Adam

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t t = 0;

  bool empty() const { return m.empty(); }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter.
template <class T>
void adam_step(model::ParameterStore<T>& params, AdamState& st, double lr, const AdamHyper& h = {}) {
  if (st.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.value.size(), 0.0f);
      st.v.emplace_back(p.value.size(), 0.0f);
    }
  }
  audioslots::detail::require_shape(st.m.size() == params.size() && st.v.size() == params.size(),
                                    "adam state has " + std::to_string(st.m.size()) + " entries for " +
                                        std::to_string(params.size()) + " parameters");
  ++st.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    audioslots::detail::require_shape(p.grad.size() == p.value.size() && m.size() == p.value.size() &&
                                          v.size() == p.value.size(),
                                      "adam: shape mismatch for parameter " + p.name);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = static_cast<double>(p.grad.data[i]);
      const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double upd = lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps);
      p.value.data[i] = static_cast<T>(static_cast<double>(p.value.data[i]) - upd);
    }
  }
}

// ---------------------------------------------------------- checkpoint

inline constexpr char kCheckpointMagic[4] = {'A', 'S', 'L', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::vector<NamedTensor> params;
  std::optional<AdamState> optimizer;
  std::uint64_t step = 0;
};

namespace detail {

struct Writer {
  std::string buf;
  void bytes(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
  template <class U>
  void pod(U v) {
    bytes(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(const std::vector<float>& v) { bytes(v.data(), v.size() * sizeof(float)); }
};

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string where;
  void bytes(void* p, std::size_t n) {
    if (n > buf.size() - pos) throw IntegrityError(where + ": truncated checkpoint");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <class U>
  U pod() {
    U v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > buf.size() - pos) throw IntegrityError(where + ": truncated checkpoint");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  void floats(std::vector<float>& v) { bytes(v.data(), v.size() * sizeof(float)); }
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.pod(kCheckpointVersion);
  w.str(config::serialize(c.model.to_kv()));
  w.str(config::serialize(c.train.to_kv()));
  w.pod<std::uint64_t>(c.step);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    w.str(p.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape) w.pod<std::uint64_t>(d);
    w.floats(p.value.data);
  }
  w.pod<std::uint8_t>(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    audioslots::detail::require(c.optimizer->m.size() == c.params.size() && c.optimizer->v.size() == c.params.size(),
                                "checkpoint: optimizer state does not match parameters");
    w.pod<std::uint64_t>(c.optimizer->t);
    for (std::size_t k = 0; k < c.params.size(); ++k) {
      w.floats(c.optimizer->m[k]);
      w.floats(c.optimizer->v[k]);
    }
  }
  return w.buf;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf, const std::string& where = "checkpoint") {
  detail::Reader r{buf, 0, where};
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IntegrityError(where + ": bad magic, not a checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw UnsupportedFormat(where + ": checkpoint version " + std::to_string(version) + " is not supported");
  Checkpoint c;
  c.model.apply(config::parse(r.str()));
  c.train.apply(config::parse(r.str()));
  c.step = r.pod<std::uint64_t>();
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor p;
    p.name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw IntegrityError(where + ": implausible rank for " + p.name);
    Shape s(rank);
    for (auto& d : s) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    const std::size_t n = numel(s);
    if (n > (buf.size() - r.pos) / sizeof(float)) throw IntegrityError(where + ": truncated tensor " + p.name);
    p.value = Tensor<float>(s);
    r.floats(p.value.data);
    c.params.push_back(std::move(p));
  }
  if (r.pod<std::uint8_t>()) {
    AdamState st;
    st.t = r.pod<std::uint64_t>();
    for (const auto& p : c.params) {
      st.m.emplace_back(p.value.size());
      st.v.emplace_back(p.value.size());
      r.floats(st.m.back());
      r.floats(st.v.back());
    }
    c.optimizer = std::move(st);
  }
  if (r.pos != buf.size()) throw IntegrityError(where + ": trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  const std::string buf = serialize_checkpoint(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str(), path.string());
}

template <class T>
std::vector<NamedTensor> export_params(const model::ParameterStore<T>& ps) {
  std::vector<NamedTensor> out;
  for (const auto& p : ps) out.push_back({p.name, tensor_cast<float>(p.value)});
  return out;
}

/// Copies checkpoint tensors into a model built from the same config.
template <class T>
void import_params(model::ParameterStore<T>& ps, const std::vector<NamedTensor>& params) {
  audioslots::detail::require(params.size() == ps.size(), "checkpoint has " + std::to_string(params.size()) +
                                                              " tensors, model expects " + std::to_string(ps.size()));
  for (const auto& p : params) {
    auto* dst = ps.find(p.name);
    audioslots::detail::require(dst != nullptr, "checkpoint tensor " + p.name + " is not a model parameter");
    audioslots::detail::require_shape(dst->value.shape == p.value.shape, "checkpoint tensor " + p.name + " has shape " +
                                                                             to_string(p.value.shape) + ", model expects " +
                                                                             to_string(dst->value.shape));
    dst->value = tensor_cast<T>(p.value);
  }
}

template <class T>
AudioSlots<T> model_from_checkpoint(const Checkpoint& c) {
  AudioSlots<T> net(c.model);
  import_params(net.params(), c.params);
  return net;
}

// ------------------------------------------------------------ training

/// Model input [rows, frames] and targets [n, rows, frames] for one example.
struct TrainingPair {
  Tensor<float> input;
  Tensor<float> targets;
};

inline TrainingPair make_training_pair(const data::MixtureExample& ex, std::size_t rows) {
  TrainingPair p;
  p.input = separation::to_tensor<float>(separation::preprocess(ex.mixture, rows));
  const std::size_t n = ex.sources.size(), cells = p.input.size();
  p.targets = Tensor<float>({n, p.input.dim(0), p.input.dim(1)});
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = separation::preprocess(ex.sources[i], rows);
    std::copy(g.values.begin(), g.values.end(), p.targets.data.begin() + static_cast<long>(i * cells));
  }
  return p;
}

/// Deterministic batch order: a fresh seeded shuffle of the dataset per
/// epoch, consumed in order.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::uint64_t seed) : n_(dataset_size), rng_(seed) {}

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    pos_ = 0;
  }

  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct StepRecord {
  std::size_t step = 0;  // 0-based index of the update
  double loss = 0.0;     // mean PIT loss over the batch, before the update
  double lr = 0.0;
};

struct TrainHooks {
  std::ostream* log = nullptr;
  fs::path out_dir;  // checkpoints go here when non-empty
  // Called after every update; return false to stop early.
  std::function<bool(const StepRecord&)> on_step;
  // Called every eval_every steps with the current model.
  std::function<void(std::size_t step, AudioSlots<float>&)> on_eval;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> history;
};

inline std::string kv_line(const std::string& event, const config::KeyValues& kv) {
  std::string s = "event=" + event;
  for (const auto& [k, v] : kv) s += " " + k + "=" + v;
  return s;
}

inline Checkpoint snapshot(const AudioSlots<float>& net, const TrainConfig& tc, const AdamState& st,
                           std::uint64_t step) {
  Checkpoint c;
  c.model = net.config();
  c.train = tc;
  c.params = export_params(net.params());
  if (!st.empty()) c.optimizer = st;
  c.step = step;
  return c;
}

/// Mini-batch training with the permutation-invariant MSE loss. Update k
/// (0-based) uses lr_schedule(k + 1), so the last update runs at rate 0.
inline TrainResult train(const TrainConfig& tc, const ModelConfig& mc, const data::DatasetManifest& ds,
                         const TrainHooks& hooks = {}, const Checkpoint* resume = nullptr) {
  tc.validate();
  mc.validate();
  if (ds.size() == 0) throw NotFound("training dataset is empty");
  audioslots::detail::require(ds.n_sources == mc.n_slots, "dataset has " + std::to_string(ds.n_sources) +
                                                              " sources per mixture, model has " +
                                                              std::to_string(mc.n_slots) + " slots");
  AudioSlots<float> net(mc);
  AdamState adam;
  std::size_t start = 0;
  if (resume) {
    audioslots::detail::require(resume->model == mc, "resume: checkpoint model config differs");
    import_params(net.params(), resume->params);
    if (resume->optimizer) adam = *resume->optimizer;
    start = static_cast<std::size_t>(resume->step);
  }
  const AdamHyper hyper{tc.adam_beta1, tc.adam_beta2, tc.adam_eps};
  BatchSampler sampler(ds.size(), tc.seed);
  // Replay the sampler so a resumed run sees the same batches and crops.
  std::mt19937_64 crop_rng(data::detail::mix_seed(tc.seed, 1));
  std::vector<data::MixtureExample> cache(ds.size());
  std::vector<bool> cached(ds.size(), false);
  auto example = [&](std::size_t i) -> const data::MixtureExample& {
    if (!cached[i]) {
      cache[i] = data::load_example(ds, i);
      cached[i] = true;
    }
    return cache[i];
  };
  for (std::size_t s = 0; s < start; ++s)
    for (auto i : sampler.next(tc.batch_size)) (void)data::random_crop(example(i), tc.crop_seconds, crop_rng);

  if (hooks.log) {
    *hooks.log << kv_line("config", mc.to_kv()) << '\n';
    *hooks.log << kv_line("config", tc.to_kv()) << '\n';
    *hooks.log << "event=dataset examples=" << ds.size() << " sources=" << ds.n_sources << '\n';
  }

  TrainResult result;
  const float inv_b = 1.0f / static_cast<float>(tc.batch_size);
  for (std::size_t step = start; step < tc.steps; ++step) {
    net.params().zero_grad();
    double loss_sum = 0.0;
    for (auto i : sampler.next(tc.batch_size)) {
      const auto crop = data::random_crop(example(i), tc.crop_seconds, crop_rng);
      const auto pair = make_training_pair(crop, mc.freq_bins);
      ad::Tape<float> tape;
      const auto y = net.forward(tape, pair.input);
      const auto pit = matching::pit_mse_loss(y, pair.targets);
      const double l = pit.loss.value().item();
      if (!std::isfinite(l))
        throw NumericError("non-finite loss at step " + std::to_string(step) + " on example " + crop.id);
      loss_sum += l;
      tape.backward(pit.loss, inv_b);
    }
    const double lr = lr_schedule(tc, step + 1);
    adam_step(net.params(), adam, lr, hyper);
    const StepRecord rec{step, loss_sum / static_cast<double>(tc.batch_size), lr};
    result.history.push_back(rec);
    if (hooks.log && (tc.log_every == 0 || step % tc.log_every == 0 || step + 1 == tc.steps))
      *hooks.log << "event=step step=" << step << " loss=" << config::format_double(rec.loss)
                 << " lr=" << config::format_double(lr) << '\n';
    const bool last = step + 1 == tc.steps;
    if (hooks.on_eval && tc.eval_every && ((step + 1) % tc.eval_every == 0 || last)) hooks.on_eval(step + 1, net);
    if (!hooks.out_dir.empty() && tc.checkpoint_every && (step + 1) % tc.checkpoint_every == 0) {
      const auto path = hooks.out_dir / ("step_" + std::to_string(step + 1) + ".aslt");
      save_checkpoint(path, snapshot(net, tc, adam, step + 1));
      if (hooks.log) *hooks.log << "event=checkpoint step=" << step + 1 << " path=" << path.string() << '\n';
    }
    if (hooks.on_step && !hooks.on_step(rec)) {
      if (hooks.log) *hooks.log << "event=stop step=" << step << " reason=hook\n";
      break;
    }
  }
  const std::uint64_t done = result.history.empty() ? start : result.history.back().step + 1;
  result.checkpoint = snapshot(net, tc, adam, done);
  if (!hooks.out_dir.empty()) {
    const auto path = hooks.out_dir / "final.aslt";
    save_checkpoint(path, result.checkpoint);
    if (hooks.log) *hooks.log << "event=checkpoint step=" << done << " path=" << path.string() << '\n';
  }
  return result;
}

// ---------------------------------------------------------- evaluation

struct MetricSummary {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;
};

inline MetricSummary summarize(const std::vector<double>& v) {
  MetricSummary s;
  s.count = v.size();
  if (v.empty()) return s;
  s.mean = metrics::mean_of(v);
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stderr_ = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return s;
}

struct EvalRow {
  std::string system;  // "oracle" or "audioslots"
  separation::MaskType mask = separation::MaskType::Ibm;
  MetricSummary si_snr;
  MetricSummary si_snri;
  std::vector<metrics::EvalReport> per_example;
};

struct EvalSummary {
  std::vector<EvalRow> rows;

  const EvalRow* find(const std::string& system, separation::MaskType m) const {
    for (const auto& r : rows)
      if (r.system == system && r.mask == m) return &r;
    return nullptr;
  }
};

/// Separates every example with each mask type (chunk outputs aligned to
/// the references) and aggregates SI-SNR and SI-SNRi. With `oracle`, the
/// same is done from ground-truth spectrograms.
inline EvalSummary evaluate(AudioSlots<float>* net, const data::DatasetManifest& ds,
                            const std::vector<separation::MaskType>& masks, bool oracle, bool model_rows = true,
                            std::ostream* log = nullptr) {
  if (ds.size() == 0) throw NotFound("evaluation dataset is empty");
  if (model_rows) {
    audioslots::detail::require(net != nullptr, "evaluate: no model given");
    audioslots::detail::require(net->config().n_slots == ds.n_sources,
                                "evaluate: model has " + std::to_string(net->config().n_slots) + " slots, dataset has " +
                                    std::to_string(ds.n_sources) + " sources");
  }
  std::vector<std::pair<std::string, bool>> systems;
  if (oracle) systems.push_back({"oracle", true});
  if (model_rows) systems.push_back({"audioslots", false});
  EvalSummary out;
  for (const auto& [name, is_oracle] : systems)
    for (auto m : masks) out.rows.push_back({name, m, {}, {}, {}});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto ex = data::load_example(ds, i);
    for (auto& row : out.rows) {
      separation::SeparateOptions o;
      o.mask = row.mask;
      o.oracle = row.system == "oracle";
      o.references = ex.sources;
      const auto sep = separation::separate<float>(ex.mixture, o.oracle ? nullptr : net, o);
      auto rep = metrics::evaluate_separation(ex.sources, sep.sources, ex.mixture, separation::to_string(row.mask));
      rep.alignment = sep.alignment;
      row.per_example.push_back(std::move(rep));
    }
  }
  for (auto& row : out.rows) {
    std::vector<double> a, b;
    for (const auto& r : row.per_example) {
      a.push_back(r.mean_si_snr_db);
      b.push_back(r.mean_si_snri_db);
    }
    row.si_snr = summarize(a);
    row.si_snri = summarize(b);
    if (log)
      *log << "event=eval system=" << row.system << " examples=" << row.si_snr.count << " si_snr_"
           << separation::to_string(row.mask) << '=' << row.si_snr.mean << " si_snr_" << separation::to_string(row.mask)
           << "_stderr=" << row.si_snr.stderr_ << " si_snri_" << separation::to_string(row.mask) << '='
           << row.si_snri.mean << " si_snri_" << separation::to_string(row.mask)
           << "_stderr=" << row.si_snri.stderr_ << '\n';
  }
  return out;
}

// ------------------------------------------------------------- images

/// Binary PGM, width = frames, height = bins, bin 0 on the bottom row,
/// min-max normalized to 0..255.
inline void export_spectrogram_image(const dsp::Grid& g, const fs::path& path) {
  audioslots::detail::require(g.rows > 0 && g.cols > 0, "export_spectrogram_image: empty grid");
  float lo = g.values[0], hi = g.values[0];
  for (float v : g.values) {
    audioslots::detail::require(std::isfinite(v), "export_spectrogram_image: grid has non-finite values");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string out = "P5\n" + std::to_string(g.cols) + " " + std::to_string(g.rows) + "\n255\n";
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  for (std::size_t r = g.rows; r-- > 0;)
    for (std::size_t c = 0; c < g.cols; ++c) {
      const double x = range > 0.0 ? (static_cast<double>(g.at(r, c)) - lo) / range : 0.0;
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(x * 255.0))));
    }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write image " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace audioslots::pipeline

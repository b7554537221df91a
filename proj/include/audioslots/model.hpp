#pragma once

// The slot model: a residual convolutional encoder produces a coarse grid of
// features, a transformer refines a bank of learned queries against that grid
// into one embedding per source, and a spatial broadcast decoder renders each
// embedding into a compressed-magnitude spectrogram.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "audioslots/autodiff.hpp"
#include "audioslots/config.hpp"
#include "audioslots/errors.hpp"

namespace audioslots::model {

struct ModelConfig {
  std::size_t n_slots = 2;
  std::size_t slot_dim = 128;
  std::string encoder_preset = "small";
  std::vector<std::size_t> encoder_blocks = {2, 2, 2, 2};
  std::vector<std::size_t> encoder_channels = {16, 32, 64, 128};
  std::size_t root_kernel = 7;
  std::size_t norm_groups = 4;
  std::size_t transformer_layers = 4;
  std::size_t attention_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t fourier_bands = 4;
  std::vector<std::size_t> decoder_hidden = {256, 256, 256};
  std::size_t freq_bins = 256;
  std::size_t frames = 64;
  std::uint64_t init_seed = 0;

  std::size_t total_stride() const { return std::size_t{1} << (encoder_channels.size() - 1); }
  std::size_t grid_rows() const { return freq_bins / total_stride(); }
  std::size_t grid_cols() const { return frames / total_stride(); }
  std::size_t fourier_dim() const { return 4 * fourier_bands; }

  void validate() const {
    using audioslots::detail::require;
    require(n_slots >= 1, "n_slots must be >= 1");
    require(slot_dim >= 1 && attention_heads >= 1 && slot_dim % attention_heads == 0,
            "slot_dim must be divisible by attention_heads");
    require(!encoder_channels.empty() && encoder_blocks.size() == encoder_channels.size(),
            "encoder_blocks and encoder_channels must have the same non-zero length");
    for (auto b : encoder_blocks) require(b >= 1, "every encoder stage needs at least one block");
    for (auto c : encoder_channels) require(c >= 1, "encoder channel counts must be positive");
    require(root_kernel % 2 == 1, "root_kernel must be odd");
    require(norm_groups >= 1, "norm_groups must be >= 1");
    require(freq_bins % total_stride() == 0 && frames % total_stride() == 0,
            "freq_bins and frames must be divisible by the encoder stride " + std::to_string(total_stride()));
    require(!decoder_hidden.empty(), "decoder_hidden needs at least one layer");
    require(fourier_bands >= 1, "fourier_bands must be >= 1");
    require(ffn_mult >= 1, "ffn_mult must be >= 1");
  }

  /// Block counts of the named encoder preset.
  static std::vector<std::size_t> preset_blocks(const std::string& preset) {
    if (preset == "small") return {2, 2, 2, 2};
    if (preset == "resnet34") return {3, 4, 6, 3};
    throw InvalidArgument("unknown encoder preset: " + preset);
  }

  /// ResNet-34 stage layout with 4096-wide slots.
  static ModelConfig full() {
    ModelConfig c;
    c.encoder_preset = "resnet34";
    c.encoder_blocks = preset_blocks("resnet34");
    c.encoder_channels = {64, 128, 256, 512};
    c.slot_dim = 4096;
    c.attention_heads = 8;
    return c;
  }

  /// Reduced widths that train in minutes on one CPU core.
  static ModelConfig desk() {
    ModelConfig c;
    c.encoder_channels = {8, 16, 24, 32};
    c.slot_dim = 64;
    c.transformer_layers = 2;
    c.fourier_bands = 6;
    c.decoder_hidden = {48, 48};
    return c;
  }

  config::KeyValues to_kv() const {
    config::KeyValues kv;
    kv["n_slots"] = std::to_string(n_slots);
    kv["slot_dim"] = std::to_string(slot_dim);
    kv["encoder_preset"] = encoder_preset;
    kv["encoder_blocks"] = config::join(encoder_blocks);
    kv["encoder_channels"] = config::join(encoder_channels);
    kv["root_kernel"] = std::to_string(root_kernel);
    kv["norm_groups"] = std::to_string(norm_groups);
    kv["transformer_layers"] = std::to_string(transformer_layers);
    kv["attention_heads"] = std::to_string(attention_heads);
    kv["ffn_mult"] = std::to_string(ffn_mult);
    kv["fourier_bands"] = std::to_string(fourier_bands);
    kv["decoder_hidden"] = config::join(decoder_hidden);
    kv["freq_bins"] = std::to_string(freq_bins);
    kv["frames"] = std::to_string(frames);
    kv["init_seed"] = std::to_string(init_seed);
    return kv;
  }

  /// Applies keys present in kv on top of this config. A changed
  /// encoder_preset resets the block counts unless encoder_blocks is given.
  void apply(const config::KeyValues& kv) {
    const std::string old_preset = encoder_preset;
    config::read(kv, "encoder_preset", encoder_preset);
    if (encoder_preset != old_preset) encoder_blocks = preset_blocks(encoder_preset);
    config::read(kv, "n_slots", n_slots);
    config::read(kv, "slot_dim", slot_dim);
    config::read(kv, "encoder_blocks", encoder_blocks);
    config::read(kv, "encoder_channels", encoder_channels);
    config::read(kv, "root_kernel", root_kernel);
    config::read(kv, "norm_groups", norm_groups);
    config::read(kv, "transformer_layers", transformer_layers);
    config::read(kv, "attention_heads", attention_heads);
    config::read(kv, "ffn_mult", ffn_mult);
    config::read(kv, "fourier_bands", fourier_bands);
    config::read(kv, "decoder_hidden", decoder_hidden);
    config::read(kv, "freq_bins", freq_bins);
    config::read(kv, "frames", frames);
    config::read(kv, "init_seed", init_seed);
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Sinusoidal features of a position in the unit square. Layout: for u = f
/// then u = t, `bands` sines sin(2^b pi u) followed by `bands` cosines.
inline std::vector<double> fourier_features(double f, double t, std::size_t bands) {
  audioslots::detail::require(f >= 0.0 && f <= 1.0 && t >= 0.0 && t <= 1.0,
                              "fourier_features: position outside the unit square");
  std::vector<double> out;
  out.reserve(4 * bands);
  for (double u : {f, t}) {
    for (std::size_t b = 0; b < bands; ++b) out.push_back(std::sin(std::ldexp(std::numbers::pi, static_cast<int>(b)) * u));
    for (std::size_t b = 0; b < bands; ++b) out.push_back(std::cos(std::ldexp(std::numbers::pi, static_cast<int>(b)) * u));
  }
  return out;
}

/// Fourier features for every cell of a rows x cols grid, as [rows*cols, 4*bands].
template <class T>
Tensor<T> fourier_grid(std::size_t rows, std::size_t cols, std::size_t bands) {
  Tensor<T> g({rows * cols, 4 * bands});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double f = rows > 1 ? static_cast<double>(r) / static_cast<double>(rows - 1) : 0.0;
      const double t = cols > 1 ? static_cast<double>(c) / static_cast<double>(cols - 1) : 0.0;
      const auto ff = fourier_features(f, t, bands);
      for (std::size_t k = 0; k < ff.size(); ++k) g.data[(r * cols + c) * 4 * bands + k] = static_cast<T>(ff[k]);
    }
  return g;
}

/// Named parameters in creation order. Element addresses are stable once
/// construction is finished.
template <class T>
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    detail::require(index_.find(name) == index_.end(), "duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.emplace_back(std::move(name), std::move(value));
    return params_.size() - 1;
  }

  ad::Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const ad::Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  ad::Parameter<T>* find(const std::string& name) {
    const auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<ad::Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct FeatureGrid {
  ad::Var<T> features;  // [rows * cols, slot_dim], row-major over (f, t)
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// n slot embeddings [n, d]. Row order carries no meaning.
template <class T>
struct SlotSet {
  ad::Var<T> slots;
  std::size_t count() const { return slots.dim(0); }
  std::size_t dim() const { return slots.dim(1); }
};

/// Attention weights captured during infer_slots(), one [heads, n, keys]
/// tensor per attention call.
template <class T>
struct AttentionTrace {
  std::vector<Tensor<T>> self_attention;
  std::vector<Tensor<T>> cross_attention;
};

template <class T>
class AudioSlots {
 public:
  explicit AudioSlots(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    decoder_positions_ = fourier_grid<T>(cfg_.freq_bins, cfg_.frames, cfg_.fourier_bands);
    encoder_positions_ = fourier_grid<T>(cfg_.grid_rows(), cfg_.grid_cols(), cfg_.fourier_bands);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  /// Residual convolutional stack over a [freq_bins, frames] input. Root
  /// stride 1; each later stage halves both axes.
  FeatureGrid<T> encode_features(ad::Tape<T>& tape, const Tensor<T>& x) {
    detail::require_shape(x.shape == Shape({cfg_.freq_bins, cfg_.frames}),
                          "model input must be " + to_string({cfg_.freq_bins, cfg_.frames}) + ", got " +
                              to_string(x.shape));
    auto h = ad::reshape(tape.constant(x), {1, cfg_.freq_bins, cfg_.frames});
    h = ad::relu(norm(tape, root_.norm, ad::conv2d(h, p(tape, root_.kernel), 1, cfg_.root_kernel / 2)));
    for (const auto& blk : blocks_) {
      auto y = ad::relu(norm(tape, blk.norm1, ad::conv2d(h, p(tape, blk.conv1), blk.stride, 1)));
      y = norm(tape, blk.norm2, ad::conv2d(y, p(tape, blk.conv2), 1, 1));
      auto skip = blk.has_projection ? norm(tape, blk.proj_norm, ad::conv2d(h, p(tape, blk.proj), blk.stride, 0)) : h;
      h = ad::relu(ad::add(y, skip));
    }
    const std::size_t c = h.dim(0), rows = h.dim(1), cols = h.dim(2);
    auto flat = ad::transpose(ad::reshape(h, {c, rows * cols}));  // [cells, c]
    auto z = ad::add(linear(tape, feature_proj_, flat),
                     ad::matmul(tape.constant(encoder_positions_), p(tape, position_proj_)));
    return {z, rows, cols};
  }

  /// Transformer over the learned queries: per layer, pre-normalized
  /// self-attention among queries, cross-attention from queries to the
  /// feature grid (which supplies keys and values), and a feed-forward block,
  /// each with a residual connection.
  SlotSet<T> infer_slots(ad::Tape<T>& tape, const FeatureGrid<T>& z, AttentionTrace<T>* trace = nullptr) {
    auto q = p(tape, queries_);
    for (const auto& layer : layers_) {
      auto hq = layer_norm(tape, layer.self_norm, q);
      q = ad::add(q, attention(tape, layer.self_attn, hq, hq, trace ? &trace->self_attention : nullptr));
      hq = layer_norm(tape, layer.cross_norm, q);
      auto kv = layer_norm(tape, layer.memory_norm, z.features);
      q = ad::add(q, attention(tape, layer.cross_attn, hq, kv, trace ? &trace->cross_attention : nullptr));
      hq = layer_norm(tape, layer.ffn_norm, q);
      q = ad::add(q, linear(tape, layer.ffn_out, ad::relu(linear(tape, layer.ffn_in, hq))));
    }
    return {layer_norm(tape, final_norm_, q)};
  }

  /// Spatial broadcast decoder: each slot is tiled over the grid, joined
  /// with per-cell Fourier features and mapped to one value per cell by a
  /// shared MLP. Output [n, freq_bins, frames], linear (unclamped).
  ad::Var<T> broadcast_decode(ad::Tape<T>& tape, const SlotSet<T>& s) {
    detail::require_shape(s.slots.rank() == 2 && s.dim() == cfg_.slot_dim,
                          "slots must be [n, " + std::to_string(cfg_.slot_dim) + "]");
    const std::size_t n = s.count();
    // First layer on the concatenation [slot, position] splits into a slot
    // term (per slot) and a position term (per cell).
    auto slot_term = ad::matmul(ad::reshape(s.slots, {n, 1, cfg_.slot_dim}), p(tape, dec_first_.slot_w));
    auto pos_term = ad::add(ad::matmul(tape.constant(decoder_positions_), p(tape, dec_first_.pos_w)),
                            p(tape, dec_first_.bias));
    auto h = ad::relu(ad::add(slot_term, pos_term));  // [n, cells, hidden]
    for (const auto& l : dec_hidden_) h = ad::relu(linear(tape, l, h));
    auto out = linear(tape, dec_out_, h);  // [n, cells, 1]
    return ad::reshape(out, {n, cfg_.freq_bins, cfg_.frames});
  }

  /// Full model: [freq_bins, frames] -> [n_slots, freq_bins, frames].
  ad::Var<T> forward(ad::Tape<T>& tape, const Tensor<T>& x, AttentionTrace<T>* trace = nullptr) {
    return broadcast_decode(tape, infer_slots(tape, encode_features(tape, x), trace));
  }

 private:
  struct Linear {
    std::size_t w, b;
  };
  struct Norm {
    std::size_t scale, bias, groups;
  };
  struct Block {
    std::size_t conv1, conv2, proj = 0;
    Norm norm1, norm2, proj_norm{};
    std::size_t stride = 1;
    bool has_projection = false;
  };
  struct Attention {
    std::size_t wq, wk, wv;
    Linear out;
  };
  struct Layer {
    Norm self_norm, cross_norm, memory_norm, ffn_norm;
    Attention self_attn, cross_attn;
    Linear ffn_in, ffn_out;
  };
  struct DecoderFirst {
    std::size_t slot_w, pos_w, bias;
  };
  struct Root {
    std::size_t kernel;
    Norm norm;
  };

  ad::Var<T> p(ad::Tape<T>& tape, std::size_t idx) { return tape.parameter(store_[idx]); }

  ad::Var<T> linear(ad::Tape<T>& tape, const Linear& l, const ad::Var<T>& x) {
    return ad::add(ad::matmul(x, p(tape, l.w)), p(tape, l.b));
  }

  ad::Var<T> norm(ad::Tape<T>& tape, const Norm& n, const ad::Var<T>& x) {
    return ad::group_norm(x, n.groups, p(tape, n.scale), p(tape, n.bias));
  }

  ad::Var<T> layer_norm(ad::Tape<T>& tape, const Norm& n, const ad::Var<T>& x) {
    return ad::layer_norm(x, p(tape, n.scale), p(tape, n.bias));
  }

  ad::Var<T> attention(ad::Tape<T>& tape, const Attention& a, const ad::Var<T>& xq, const ad::Var<T>& xkv,
                       std::vector<Tensor<T>>* trace) {
    const std::size_t heads = cfg_.attention_heads, d = cfg_.slot_dim, dh = d / heads;
    const std::size_t nq = xq.dim(0), nk = xkv.dim(0);
    auto split = [&](const ad::Var<T>& x, std::size_t w, std::size_t rows) {
      return ad::permute(ad::reshape(ad::matmul(x, p(tape, w)), {rows, heads, dh}), {1, 0, 2});
    };
    auto q = split(xq, a.wq, nq);
    auto k = split(xkv, a.wk, nk);
    auto v = split(xkv, a.wv, nk);
    auto scores = ad::scale(ad::matmul(q, ad::transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto weights = ad::softmax(scores, -1);  // [heads, nq, nk]
    if (trace) trace->push_back(weights.value());
    auto ctx = ad::reshape(ad::permute(ad::matmul(weights, v), {1, 0, 2}), {nq, d});
    return linear(tape, a.out, ctx);
  }

  // Parameter construction --------------------------------------------------

  Tensor<T> normal(Shape s, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(dist(rng_));
    return t;
  }

  std::size_t conv_param(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
    return store_.add(name, normal({cout, cin, k, k}, std::sqrt(2.0 / static_cast<double>(cin * k * k))));
  }

  Norm norm_param(const std::string& name, std::size_t channels, std::size_t groups) {
    Norm n;
    n.scale = store_.add(name + ".scale", Tensor<T>({channels}, T{1}));
    n.bias = store_.add(name + ".bias", Tensor<T>({channels}, T{0}));
    n.groups = groups;
    return n;
  }

  Norm group_norm_param(const std::string& name, std::size_t channels) {
    std::size_t g = std::min(cfg_.norm_groups, channels);
    while (channels % g) --g;
    return norm_param(name, channels, g);
  }

  Linear linear_param(const std::string& name, std::size_t in, std::size_t out, double gain) {
    return {store_.add(name + ".w", normal({in, out}, gain / std::sqrt(static_cast<double>(in)))),
            store_.add(name + ".b", Tensor<T>({out}, T{0}))};
  }

  void build() {
    rng_.seed(cfg_.init_seed);
    const std::size_t d = cfg_.slot_dim;
    const auto& ch = cfg_.encoder_channels;

    root_.kernel = conv_param("encoder.root.conv", ch[0], 1, cfg_.root_kernel);
    root_.norm = group_norm_param("encoder.root.norm", ch[0]);
    std::size_t in = ch[0];
    for (std::size_t s = 0; s < ch.size(); ++s)
      for (std::size_t b = 0; b < cfg_.encoder_blocks[s]; ++b) {
        const std::string name = "encoder.stage" + std::to_string(s) + ".block" + std::to_string(b);
        Block blk;
        blk.stride = (s > 0 && b == 0) ? 2 : 1;
        blk.conv1 = conv_param(name + ".conv1", ch[s], in, 3);
        blk.norm1 = group_norm_param(name + ".norm1", ch[s]);
        blk.conv2 = conv_param(name + ".conv2", ch[s], ch[s], 3);
        blk.norm2 = group_norm_param(name + ".norm2", ch[s]);
        blk.has_projection = blk.stride != 1 || in != ch[s];
        if (blk.has_projection) {
          blk.proj = conv_param(name + ".proj", ch[s], in, 1);
          blk.proj_norm = group_norm_param(name + ".proj_norm", ch[s]);
        }
        blocks_.push_back(blk);
        in = ch[s];
      }
    feature_proj_ = linear_param("encoder.feature_proj", in, d, 1.0);
    position_proj_ = store_.add("encoder.position_proj",
                                normal({cfg_.fourier_dim(), d}, 1.0 / std::sqrt(static_cast<double>(cfg_.fourier_dim()))));

    queries_ = store_.add("slots.queries", normal({cfg_.n_slots, d}, 1.0));
    for (std::size_t l = 0; l < cfg_.transformer_layers; ++l) {
      const std::string name = "transformer.layer" + std::to_string(l);
      Layer layer;
      layer.self_norm = norm_param(name + ".self_norm", d, 1);
      layer.cross_norm = norm_param(name + ".cross_norm", d, 1);
      layer.memory_norm = norm_param(name + ".memory_norm", d, 1);
      layer.ffn_norm = norm_param(name + ".ffn_norm", d, 1);
      for (auto [attn, tag] : {std::pair{&layer.self_attn, ".self_attn"}, std::pair{&layer.cross_attn, ".cross_attn"}}) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        attn->wq = store_.add(name + tag + ".wq", normal({d, d}, sd));
        attn->wk = store_.add(name + tag + ".wk", normal({d, d}, sd));
        attn->wv = store_.add(name + tag + ".wv", normal({d, d}, sd));
        attn->out = linear_param(name + tag + ".out", d, d, 1.0);
      }
      layer.ffn_in = linear_param(name + ".ffn_in", d, cfg_.ffn_mult * d, std::sqrt(2.0));
      layer.ffn_out = linear_param(name + ".ffn_out", cfg_.ffn_mult * d, d, 1.0);
      layers_.push_back(layer);
    }
    final_norm_ = norm_param("transformer.final_norm", d, 1);

    const auto& hidden = cfg_.decoder_hidden;
    const double first_sd = std::sqrt(2.0 / static_cast<double>(d + cfg_.fourier_dim()));
    dec_first_.slot_w = store_.add("decoder.layer0.slot_w", normal({d, hidden[0]}, first_sd));
    dec_first_.pos_w = store_.add("decoder.layer0.pos_w", normal({cfg_.fourier_dim(), hidden[0]}, first_sd));
    dec_first_.bias = store_.add("decoder.layer0.b", Tensor<T>({hidden[0]}, T{0}));
    for (std::size_t l = 1; l < hidden.size(); ++l)
      dec_hidden_.push_back(linear_param("decoder.layer" + std::to_string(l), hidden[l - 1], hidden[l], std::sqrt(2.0)));
    dec_out_ = linear_param("decoder.out", hidden.back(), 1, 1.0);
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  std::mt19937_64 rng_;
  Tensor<T> decoder_positions_;
  Tensor<T> encoder_positions_;

  Root root_{};
  std::vector<Block> blocks_;
  Linear feature_proj_{};
  std::size_t position_proj_ = 0;
  std::size_t queries_ = 0;
  std::vector<Layer> layers_;
  Norm final_norm_{};
  DecoderFirst dec_first_{};
  std::vector<Linear> dec_hidden_;
  Linear dec_out_{};
};

}  // namespace audioslots::model

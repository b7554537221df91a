#pragma once

// Masks from per-source magnitude estimates, mask application, and chunked
// end-to-end separation of a mixture waveform.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "audioslots/dsp.hpp"
#include "audioslots/errors.hpp"
#include "audioslots/matching.hpp"
#include "audioslots/metrics.hpp"
#include "audioslots/model.hpp"

namespace audioslots::separation {

enum class MaskType { Ibm, Wiener };

inline std::string to_string(MaskType t) { return t == MaskType::Ibm ? "ibm" : "wiener"; }

inline MaskType parse_mask_type(const std::string& s) {
  if (s == "ibm") return MaskType::Ibm;
  if (s == "wiener") return MaskType::Wiener;
  throw InvalidArgument("unknown mask type '" + s + "' (expected ibm or wiener)");
}

struct MaskSet {
  std::vector<dsp::Grid> masks;
  MaskType type = MaskType::Ibm;
};

namespace detail {

inline void check_same_shapes(const std::vector<dsp::Grid>& g) {
  audioslots::detail::require(!g.empty(), "masks need at least one source");
  for (const auto& x : g)
    audioslots::detail::require_shape(x.same_shape(g.front()), "source grids differ in shape: " +
                                                                   std::to_string(x.rows) + "x" + std::to_string(x.cols) +
                                                                   " vs " + std::to_string(g.front().rows) + "x" +
                                                                   std::to_string(g.front().cols));
}

}  // namespace detail

/// One-hot per cell at the largest source; ties go to the lowest index.
/// Negative values count as 0.
inline MaskSet compute_ibm(const std::vector<dsp::Grid>& mags) {
  detail::check_same_shapes(mags);
  MaskSet m;
  m.type = MaskType::Ibm;
  m.masks.assign(mags.size(), dsp::Grid(mags[0].rows, mags[0].cols, 0.0f));
  for (std::size_t c = 0; c < mags[0].size(); ++c) {
    std::size_t best = 0;
    float best_v = std::max(mags[0].values[c], 0.0f);
    for (std::size_t i = 1; i < mags.size(); ++i) {
      const float v = std::max(mags[i].values[c], 0.0f);
      if (v > best_v) {
        best_v = v;
        best = i;
      }
    }
    m.masks[best].values[c] = 1.0f;
  }
  return m;
}

/// m_i^2 / sum_j m_j^2 per cell; cells where every source is 0 get 1/n.
inline MaskSet compute_wiener(const std::vector<dsp::Grid>& mags) {
  detail::check_same_shapes(mags);
  const std::size_t n = mags.size();
  MaskSet m;
  m.type = MaskType::Wiener;
  m.masks.assign(n, dsp::Grid(mags[0].rows, mags[0].cols, 0.0f));
  std::vector<double> sq(n);
  for (std::size_t c = 0; c < mags[0].size(); ++c) {
    double den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = std::max(static_cast<double>(mags[i].values[c]), 0.0);
      sq[i] = v * v;
      den += sq[i];
    }
    for (std::size_t i = 0; i < n; ++i)
      m.masks[i].values[c] = den > 0.0 ? static_cast<float>(sq[i] / den) : static_cast<float>(1.0 / static_cast<double>(n));
  }
  return m;
}

inline MaskSet compute_masks(const std::vector<dsp::Grid>& mags, MaskType t) {
  return t == MaskType::Ibm ? compute_ibm(mags) : compute_wiener(mags);
}

/// Scales the complex spectrogram by each real mask. Masks with one row
/// fewer than the spectrogram are extended by repeating their top row.
inline std::vector<dsp::ComplexSpectrogram> apply_mask(const MaskSet& m, const dsp::ComplexSpectrogram& s) {
  std::vector<dsp::ComplexSpectrogram> out;
  out.reserve(m.masks.size());
  for (const auto& mask : m.masks) {
    const dsp::Grid full = mask.rows + 1 == s.bins ? dsp::extend_rows(mask, s.bins) : mask;
    audioslots::detail::require_shape(full.rows == s.bins && full.cols == s.frames,
                                      "mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                                          " does not fit spectrogram " + std::to_string(s.bins) + "x" +
                                          std::to_string(s.frames));
    dsp::ComplexSpectrogram o = s;
    for (std::size_t c = 0; c < o.values.size(); ++c) o.values[c] *= full.values[c];
    out.push_back(std::move(o));
  }
  return out;
}

// -------------------------------------------------------------- pipeline

struct SeparateOptions {
  MaskType mask = MaskType::Wiener;
  // Use the reference spectrograms instead of model predictions.
  bool oracle = false;
  // Ground-truth sources: required in oracle mode; otherwise used only to
  // align chunk outputs.
  std::vector<dsp::Waveform> references;
  double chunk_seconds = 0.5;
};

struct SeparationResult {
  std::vector<dsp::Waveform> sources;
  std::string alignment;  // "reference", "slot-similarity" or "none" (single chunk)
};

/// Compressed magnitude of a waveform, cropped to `rows` bins.
inline dsp::CompressedMagnitude preprocess(const dsp::Waveform& w, std::size_t rows) {
  return dsp::crop_rows(dsp::compress(dsp::magnitude(dsp::stft(w))), rows);
}

template <class T>
Tensor<T> to_tensor(const dsp::Grid& g) {
  Tensor<T> t({g.rows, g.cols});
  for (std::size_t i = 0; i < g.size(); ++i) t.data[i] = static_cast<T>(g.values[i]);
  return t;
}

namespace detail {

inline double cosine(const float* a, const float* b, std::size_t d) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    ab += static_cast<double>(a[k]) * b[k];
    aa += static_cast<double>(a[k]) * a[k];
    bb += static_cast<double>(b[k]) * b[k];
  }
  return aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
}

inline bool is_silent(const dsp::Waveform& w) {
  return std::all_of(w.samples.begin(), w.samples.end(), [](float v) { return v == 0.0f; });
}

}  // namespace detail

/// Chunked separation. Each chunk: compressed mixture magnitude -> model (or
/// oracle references) -> decompress -> masks -> applied to the chunk's
/// complex mixture spectrogram -> iSTFT. Chunk outputs are put in a common
/// source order and concatenated.
template <class T>
SeparationResult separate(const dsp::Waveform& mixture, model::AudioSlots<T>* net, const SeparateOptions& opt) {
  const int rate = mixture.sample_rate_hz;
  audioslots::detail::require(rate == dsp::kDefaultSampleRate,
                              "separate: expected " + std::to_string(dsp::kDefaultSampleRate) + " Hz input, got " +
                                  std::to_string(rate));
  audioslots::detail::require(!mixture.empty(), "separate: empty mixture");
  audioslots::detail::require(!opt.oracle || !opt.references.empty(), "separate: oracle mode needs reference sources");
  audioslots::detail::require(opt.oracle || net != nullptr, "separate: no model given");
  for (const auto& r : opt.references) {
    audioslots::detail::require(r.sample_rate_hz == rate, "separate: reference sample rate differs from mixture");
    audioslots::detail::require_shape(r.size() == mixture.size(), "separate: reference length differs from mixture");
  }

  const dsp::ChunkList mix_chunks = dsp::chunk(mixture, opt.chunk_seconds);
  std::vector<dsp::ChunkList> ref_chunks;
  for (const auto& r : opt.references) ref_chunks.push_back(dsp::chunk(r, opt.chunk_seconds));

  const std::size_t rows = net ? net->config().freq_bins : dsp::kDefaultWindow / 2;
  const std::size_t n = opt.oracle ? opt.references.size() : net->config().n_slots;
  if (!opt.oracle && !opt.references.empty())
    audioslots::detail::require(opt.references.size() == n, "separate: " + std::to_string(opt.references.size()) +
                                                                " references for a " + std::to_string(n) + "-slot model");

  std::vector<dsp::ChunkList> out(n);
  for (auto& o : out) o.pad_len = mix_chunks.pad_len;
  std::vector<float> prev_slots;
  SeparationResult result;
  result.alignment = mix_chunks.chunks.size() == 1 && opt.references.empty() ? "none"
                     : opt.references.empty()                                ? "slot-similarity"
                                                                             : "reference";

  for (std::size_t c = 0; c < mix_chunks.chunks.size(); ++c) {
    const dsp::Waveform& chunk = mix_chunks.chunks[c];
    const dsp::ComplexSpectrogram spec = dsp::stft(chunk);
    std::vector<dsp::Grid> mags(n);
    std::vector<float> slots;
    std::size_t slot_dim = 0;
    if (opt.oracle) {
      for (std::size_t i = 0; i < n; ++i) mags[i] = dsp::decompress(preprocess(ref_chunks[i].chunks[c], rows));
    } else {
      const auto x = to_tensor<T>(preprocess(chunk, rows));
      ad::Tape<T> tape;
      tape.set_grad_enabled(false);
      const auto s = net->infer_slots(tape, net->encode_features(tape, x));
      const auto y = net->broadcast_decode(tape, s);
      const std::size_t cells = rows * y.dim(2);
      for (std::size_t i = 0; i < n; ++i) {
        dsp::Grid g(rows, y.dim(2));
        for (std::size_t k = 0; k < cells; ++k)
          g.values[k] = std::max(static_cast<float>(y.value().data[i * cells + k]), 0.0f);
        mags[i] = dsp::decompress(g);
      }
      slot_dim = s.dim();
      slots.resize(s.slots.value().size());
      for (std::size_t k = 0; k < slots.size(); ++k) slots[k] = static_cast<float>(s.slots.value().data[k]);
    }
    const auto masked = apply_mask(compute_masks(mags, opt.mask), spec);
    std::vector<dsp::Waveform> est;
    for (const auto& m : masked) est.push_back(dsp::istft(m));

    // order[j] = estimate placed at output position j.
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < n; ++j) order[j] = j;
    if (!opt.references.empty() && !opt.oracle) {
      std::vector<dsp::Waveform> refs;
      for (std::size_t j = 0; j < n; ++j) refs.push_back(ref_chunks[j].chunks[c]);
      const auto a = matching::match_by_score<dsp::Waveform>(
          refs, est,
          [](const dsp::Waveform& t, const dsp::Waveform& e) {
            return detail::is_silent(t) ? 0.0 : metrics::si_snr(t, e);
          },
          matching::Objective::Maximize);
      for (std::size_t i = 0; i < n; ++i) order[a.permutation[i]] = i;
    } else if (!opt.oracle && !prev_slots.empty()) {
      // Greedy: each previous slot in turn takes its most similar free slot.
      std::vector<bool> used(n, false);
      for (std::size_t j = 0; j < n; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t pick = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (used[i]) continue;
          const double s = detail::cosine(&prev_slots[j * slot_dim], &slots[i * slot_dim], slot_dim);
          if (s > best) {
            best = s;
            pick = i;
          }
        }
        used[pick] = true;
        order[j] = pick;
      }
    }
    if (!opt.oracle) {
      prev_slots.assign(slots.size(), 0.0f);
      for (std::size_t j = 0; j < n; ++j)
        std::copy_n(&slots[order[j] * slot_dim], slot_dim, &prev_slots[j * slot_dim]);
    }
    for (std::size_t j = 0; j < n; ++j) out[j].chunks.push_back(std::move(est[order[j]]));
  }
  for (auto& o : out) result.sources.push_back(dsp::stitch(o));
  return result;
}

}  // namespace audioslots::separation

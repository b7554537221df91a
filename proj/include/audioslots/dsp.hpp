#pragma once

// STFT analysis/synthesis, power-law magnitude compression, and chunking of
// waveforms into fixed-length non-overlapping pieces.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "audioslots/errors.hpp"

namespace audioslots::dsp {

namespace detail {
using audioslots::detail::require;
using audioslots::detail::require_shape;
}  // namespace detail

inline constexpr int kDefaultSampleRate = 16000;
inline constexpr std::size_t kDefaultWindow = 512;
inline constexpr std::size_t kDefaultHop = 125;
inline constexpr float kDefaultPower = 0.3f;

struct Waveform {
  std::vector<float> samples;
  int sample_rate_hz = kDefaultSampleRate;

  Waveform() = default;
  explicit Waveform(std::vector<float> s, int rate = kDefaultSampleRate)
      : samples(std::move(s)), sample_rate_hz(rate) {}

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  void validate() const {
    detail::require(sample_rate_hz > 0, "sample rate must be positive");
    for (float v : samples) detail::require(std::isfinite(v), "waveform contains non-finite samples");
  }
};

/// Row-major rows x cols grid of floats. Rows are frequency bins, columns are
/// frames.
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), values(r * c, fill) {}

  float& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t size() const { return values.size(); }
  bool same_shape(const Grid& o) const { return rows == o.rows && cols == o.cols; }
};

/// Linear-amplitude magnitudes |I|.
struct Magnitude : Grid {
  using Grid::Grid;
};

/// Magnitudes raised to the compression power; the model's input and target
/// representation.
struct CompressedMagnitude : Grid {
  using Grid::Grid;
};

struct ComplexSpectrogram {
  std::size_t bins = 0;    // F = window_len / 2 + 1
  std::size_t frames = 0;  // T
  std::vector<std::complex<float>> values;  // [bin][frame]
  std::size_t hop = kDefaultHop;
  std::size_t window_len = kDefaultWindow;
  std::size_t original_length = 0;
  int sample_rate_hz = kDefaultSampleRate;

  std::complex<float>& at(std::size_t f, std::size_t t) { return values[f * frames + t]; }
  const std::complex<float>& at(std::size_t f, std::size_t t) const { return values[f * frames + t]; }
};

struct ChunkList {
  std::vector<Waveform> chunks;
  std::size_t pad_len = 0;
};

/// Periodic Hann window, w[k] = 0.5 (1 - cos(2 pi k / n)).
inline std::vector<float> hann_window(std::size_t n) {
  detail::require(n >= 2, "hann_window needs n >= 2, got " + std::to_string(n));
  std::vector<float> w(n);
  for (std::size_t k = 0; k < n; ++k)
    w[k] = static_cast<float>(0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n))));
  return w;
}

namespace detail {

inline bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

// In-place iterative radix-2 FFT; sign = -1 forward, +1 inverse (unscaled).
inline void fft_pow2(std::vector<std::complex<double>>& a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  std::vector<std::complex<double>> tw(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    tw[k] = {std::cos(ang), std::sin(ang)};
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2, step = n / len;
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < half; ++k) {
        const auto wk = tw[k * step];
        const auto u = a[i + k];
        const auto v = a[i + k + half] * wk;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
  }
}

inline void dft(std::vector<std::complex<double>>& a, int sign) {
  if (is_pow2(a.size())) {
    fft_pow2(a, sign);
    return;
  }
  const std::size_t n = a.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>((k * j) % n) / static_cast<double>(n);
      acc += a[j] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  a = std::move(out);
}

// Index into a signal of length len under reflect padding (edge sample not
// repeated), valid for arbitrarily far out-of-range indices.
inline std::size_t reflect_index(long i, std::size_t len) {
  if (len == 1) return 0;
  const long period = 2 * (static_cast<long>(len) - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(len) ? m : period - m);
}

}  // namespace detail

/// Centered STFT: the signal is reflect-padded by window_len/2 on both sides
/// and framed every `hop` samples, giving floor(len / hop) frames of
/// window_len/2 + 1 one-sided bins.
inline ComplexSpectrogram stft(const Waveform& w, std::size_t window_len = kDefaultWindow,
                               std::size_t hop = kDefaultHop) {
  audioslots::detail::require(!w.empty(), "stft of an empty waveform");
  audioslots::detail::require(window_len >= 2 && window_len % 2 == 0, "stft window length must be even");
  audioslots::detail::require(hop >= 1 && hop <= window_len, "stft hop must be in [1, window_len]");
  const auto win = hann_window(window_len);
  const std::size_t len = w.size();
  const long pad = static_cast<long>(window_len / 2);

  ComplexSpectrogram s;
  s.bins = window_len / 2 + 1;
  s.frames = std::max<std::size_t>(1, len / hop);
  s.hop = hop;
  s.window_len = window_len;
  s.original_length = len;
  s.sample_rate_hz = w.sample_rate_hz;
  s.values.assign(s.bins * s.frames, {0.0f, 0.0f});

  std::vector<std::complex<double>> buf(window_len);
  for (std::size_t t = 0; t < s.frames; ++t) {
    const long start = static_cast<long>(t * hop) - pad;
    for (std::size_t k = 0; k < window_len; ++k) {
      const float x = w.samples[detail::reflect_index(start + static_cast<long>(k), len)];
      buf[k] = static_cast<double>(x) * static_cast<double>(win[k]);
    }
    detail::dft(buf, -1);
    for (std::size_t f = 0; f < s.bins; ++f) s.at(f, t) = std::complex<float>(buf[f]);
  }
  return s;
}

/// Weighted overlap-add inverse of stft(), normalized by the per-sample sum
/// of squared windows (floored at 1e-8) and truncated to original_length.
inline Waveform istft(const ComplexSpectrogram& s) {
  const std::size_t n = s.window_len;
  audioslots::detail::require(n >= 2 && n % 2 == 0 && s.bins == n / 2 + 1, "malformed spectrogram: bins do not match window");
  audioslots::detail::require(s.frames >= 1 && s.values.size() == s.bins * s.frames, "malformed spectrogram: value count");
  audioslots::detail::require(s.hop >= 1, "malformed spectrogram: hop");
  const auto win = hann_window(n);
  const std::size_t pad = n / 2;
  const std::size_t total = std::max((s.frames - 1) * s.hop + n, pad + s.original_length);
  std::vector<double> acc(total, 0.0), wsum(total, 0.0);
  std::vector<std::complex<double>> buf(n);
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (std::size_t f = 0; f < s.bins; ++f) buf[f] = std::complex<double>(s.at(f, t));
    for (std::size_t f = s.bins; f < n; ++f) buf[f] = std::conj(buf[n - f]);
    detail::dft(buf, +1);
    const std::size_t start = t * s.hop;
    for (std::size_t k = 0; k < n; ++k) {
      const double wk = win[k];
      acc[start + k] += buf[k].real() / static_cast<double>(n) * wk;
      wsum[start + k] += wk * wk;
    }
  }
  Waveform out;
  out.sample_rate_hz = s.sample_rate_hz;
  out.samples.resize(s.original_length);
  for (std::size_t i = 0; i < s.original_length; ++i)
    out.samples[i] = static_cast<float>(acc[i + pad] / std::max(wsum[i + pad], 1e-8));
  return out;
}

inline Magnitude magnitude(const ComplexSpectrogram& s) {
  Magnitude m(s.bins, s.frames);
  for (std::size_t i = 0; i < s.values.size(); ++i) m.values[i] = std::abs(s.values[i]);
  return m;
}

/// Elementwise m^power.
inline CompressedMagnitude compress(const Grid& m, float power = kDefaultPower) {
  CompressedMagnitude c(m.rows, m.cols);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    audioslots::detail::require(m.values[i] >= 0.0f, "compress: negative magnitude");
    c.values[i] = static_cast<float>(std::pow(static_cast<double>(m.values[i]), static_cast<double>(power)));
  }
  return c;
}

/// Elementwise c^(1/power), the inverse of compress().
inline Magnitude decompress(const Grid& c, float power = kDefaultPower) {
  Magnitude m(c.rows, c.cols);
  const double inv = 1.0 / static_cast<double>(power);
  for (std::size_t i = 0; i < c.values.size(); ++i) {
    audioslots::detail::require(c.values[i] >= 0.0f, "decompress: negative value");
    m.values[i] = static_cast<float>(std::pow(static_cast<double>(c.values[i]), inv));
  }
  return m;
}

/// First `rows` rows of a grid.
template <class G>
G crop_rows(const G& g, std::size_t rows) {
  audioslots::detail::require(rows <= g.rows, "crop_rows: more rows requested than available");
  G out;
  out.rows = rows;
  out.cols = g.cols;
  out.values.assign(g.values.begin(), g.values.begin() + static_cast<long>(rows * g.cols));
  return out;
}

/// Repeats the last row until the grid has `rows` rows.
template <class G>
G extend_rows(const G& g, std::size_t rows) {
  audioslots::detail::require(g.rows >= 1 && rows >= g.rows, "extend_rows: invalid target row count");
  G out = g;
  out.rows = rows;
  out.values.reserve(rows * g.cols);
  for (std::size_t r = g.rows; r < rows; ++r)
    out.values.insert(out.values.end(), g.values.end() - static_cast<long>(g.cols), g.values.end());
  return out;
}

inline std::size_t chunk_length(int sample_rate_hz, double chunk_seconds) {
  const auto len = static_cast<std::size_t>(std::llround(chunk_seconds * sample_rate_hz));
  audioslots::detail::require(len >= 1, "chunk length must be at least one sample");
  return len;
}

/// Splits into ceil(len / L) non-overlapping chunks of L samples, zero-padding
/// the last one.
inline ChunkList chunk(const Waveform& w, double chunk_seconds = 0.5) {
  audioslots::detail::require(!w.empty(), "chunk of an empty waveform");
  const std::size_t L = chunk_length(w.sample_rate_hz, chunk_seconds);
  const std::size_t n = (w.size() + L - 1) / L;
  ChunkList out;
  out.pad_len = n * L - w.size();
  out.chunks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Waveform c;
    c.sample_rate_hz = w.sample_rate_hz;
    c.samples.assign(L, 0.0f);
    const std::size_t begin = i * L, end = std::min(begin + L, w.size());
    std::copy(w.samples.begin() + static_cast<long>(begin), w.samples.begin() + static_cast<long>(end), c.samples.begin());
    out.chunks.push_back(std::move(c));
  }
  return out;
}

/// Concatenates chunks and drops the trailing padding.
inline Waveform stitch(const ChunkList& c) {
  audioslots::detail::require(!c.chunks.empty(), "stitch of an empty chunk list");
  const std::size_t L = c.chunks.front().size();
  for (const auto& ch : c.chunks) audioslots::detail::require(ch.size() == L, "stitch: chunks differ in length");
  audioslots::detail::require(c.pad_len < L, "stitch: pad_len must be smaller than the chunk length");
  Waveform out;
  out.sample_rate_hz = c.chunks.front().sample_rate_hz;
  out.samples.reserve(L * c.chunks.size());
  for (const auto& ch : c.chunks) out.samples.insert(out.samples.end(), ch.samples.begin(), ch.samples.end());
  out.samples.resize(out.samples.size() - c.pad_len);
  return out;
}

}  // namespace audioslots::dsp

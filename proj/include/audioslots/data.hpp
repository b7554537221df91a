#pragma once

// WAV I/O, directory datasets in the mix_clean/ s1/ s2/ layout, and
// synthetic harmonic mixtures.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "audioslots/dsp.hpp"
#include "audioslots/errors.hpp"

namespace audioslots::data {

namespace fs = std::filesystem;
using dsp::Waveform;

struct MixtureExample {
  Waveform mixture;
  std::vector<Waveform> sources;
  std::string id;

  void validate() const {
    audioslots::detail::require(!sources.empty(), "example " + id + " has no sources");
    for (const auto& s : sources) {
      audioslots::detail::require_shape(s.size() == mixture.size(), "example " + id + ": source and mixture lengths differ");
      audioslots::detail::require(s.sample_rate_hz == mixture.sample_rate_hz,
                                  "example " + id + ": source and mixture sample rates differ");
    }
  }
};

// ---------------------------------------------------------------- WAV

namespace detail {

inline std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

inline void put32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

/// Reads a RIFF/WAVE file holding 16-bit PCM, mono, at `expected_rate` Hz.
/// Samples are scaled by 1/32768. Chunks other than fmt and data are skipped.
inline Waveform read_wav(const fs::path& path, int expected_rate = dsp::kDefaultSampleRate) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (buf.size() < 12 || std::string(buf.begin(), buf.begin() + 4) != "RIFF" ||
      std::string(buf.begin() + 8, buf.begin() + 12) != "WAVE")
    throw UnsupportedFormat(where + "not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(buf.begin() + static_cast<long>(pos), buf.begin() + static_cast<long>(pos + 4));
    const std::size_t len = detail::le32(&buf[pos + 4]);
    const std::size_t body = pos + 8;
    if (body + len > buf.size()) {
      // Tolerate a truncated data chunk (common with streamed writers).
      if (id != "data") throw UnsupportedFormat(where + "chunk '" + id + "' overruns the file");
    }
    const std::size_t avail = std::min(len, buf.size() - body);
    if (id == "fmt ") {
      if (avail < 16) throw UnsupportedFormat(where + "fmt chunk too short");
      format = detail::le16(&buf[body]);
      channels = detail::le16(&buf[body + 2]);
      rate = detail::le32(&buf[body + 4]);
      bits = detail::le16(&buf[body + 14]);
      have_fmt = true;
    } else if (id == "data") {
      data = buf.data() + body;
      data_len = avail;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw UnsupportedFormat(where + "missing fmt chunk");
  if (format != 1 || bits != 16)
    throw UnsupportedFormat(where + "only 16-bit PCM is supported (format " + std::to_string(format) + ", " +
                            std::to_string(bits) + " bits)");
  if (channels != 1) throw UnsupportedFormat(where + "expected mono, got " + std::to_string(channels) + " channels");
  if (static_cast<int>(rate) != expected_rate)
    throw UnsupportedFormat(where + "expected " + std::to_string(expected_rate) + " Hz, got " + std::to_string(rate));
  if (!data) throw UnsupportedFormat(where + "missing data chunk");

  Waveform w;
  w.sample_rate_hz = static_cast<int>(rate);
  w.samples.resize(data_len / 2);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = static_cast<float>(static_cast<std::int16_t>(detail::le16(data + 2 * i))) / 32768.0f;
  return w;
}

/// Writes 16-bit PCM mono. Samples are rounded to nearest after scaling by
/// 32768 and saturated to the int16 range.
inline void write_wav(const fs::path& path, const Waveform& w) {
  w.validate();
  std::string out;
  const std::uint32_t data_len = static_cast<std::uint32_t>(w.size() * 2);
  out.reserve(44 + data_len);
  out += "RIFF";
  detail::put32(out, 36 + data_len);
  out += "WAVEfmt ";
  detail::put32(out, 16);
  detail::put16(out, 1);
  detail::put16(out, 1);
  detail::put32(out, static_cast<std::uint32_t>(w.sample_rate_hz));
  detail::put32(out, static_cast<std::uint32_t>(w.sample_rate_hz) * 2);
  detail::put16(out, 2);
  detail::put16(out, 16);
  out += "data";
  detail::put32(out, data_len);
  for (float v : w.samples) {
    const double q = std::clamp(std::nearbyint(static_cast<double>(v) * 32768.0), -32768.0, 32767.0);
    detail::put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------- synthesis

struct SynthConfig {
  double duration_seconds = 10.0;
  std::size_t n_sources = 2;
  int sample_rate_hz = dsp::kDefaultSampleRate;
  double f0_min_hz = 90.0;
  double f0_max_hz = 400.0;
  // Minimum distance between any harmonic of one source and any harmonic of
  // another; candidates closer than this are redrawn.
  double min_partial_gap_hz = 45.0;
  double peak = 0.9;
};

namespace detail {

// Uniform in [0, 1) from the top 53 bits, identical on every platform.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct Voice {
  double f0 = 0.0;
  std::size_t harmonics = 0;
};

inline double min_gap(const std::vector<Voice>& voices, double nyquist) {
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < voices.size(); ++a)
    for (std::size_t b = a + 1; b < voices.size(); ++b)
      for (std::size_t k = 1; k <= voices[a].harmonics; ++k)
        for (std::size_t l = 1; l <= voices[b].harmonics; ++l) {
          const double fa = voices[a].f0 * static_cast<double>(k), fb = voices[b].f0 * static_cast<double>(l);
          if (fa < nyquist && fb < nyquist) gap = std::min(gap, std::abs(fa - fb));
        }
  return gap;
}

}  // namespace detail

/// Sum of harmonic tones, one per source. Fundamentals come from disjoint
/// log-spaced sub-ranges of [f0_min, f0_max].
inline MixtureExample synth_example(std::uint64_t seed, const SynthConfig& cfg = {}) {
  audioslots::detail::require(cfg.n_sources >= 1, "synth: need at least one source");
  audioslots::detail::require(cfg.duration_seconds > 0.0, "synth: duration must be positive");
  audioslots::detail::require(cfg.sample_rate_hz > 0, "synth: sample rate must be positive");
  audioslots::detail::require(cfg.f0_min_hz > 0.0 && cfg.f0_max_hz > cfg.f0_min_hz, "synth: bad fundamental range");
  std::mt19937_64 rng(seed);
  const std::size_t n = cfg.n_sources;
  const std::size_t len = static_cast<std::size_t>(std::llround(cfg.duration_seconds * cfg.sample_rate_hz));
  const double sr = cfg.sample_rate_hz, nyquist = sr / 2.0;

  // Source order is shuffled so the low voice is not always source 0.
  std::vector<std::size_t> band(n);
  for (std::size_t i = 0; i < n; ++i) band[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(band[i - 1], band[rng() % i]);

  const double ratio = std::pow(cfg.f0_max_hz / cfg.f0_min_hz, 1.0 / static_cast<double>(n));
  std::vector<detail::Voice> voices(n), best;
  double best_gap = -1.0;
  for (int attempt = 0; attempt < 512; ++attempt) {
    for (std::size_t i = 0; i < n; ++i) {
      const double lo = cfg.f0_min_hz * std::pow(ratio, static_cast<double>(band[i]));
      // Leave a small guard between neighbouring sub-ranges.
      const double hi = lo * ratio / (band[i] + 1 < n ? 1.08 : 1.0);
      voices[i].f0 = std::exp(detail::uniform(rng, std::log(lo), std::log(hi)));
      voices[i].harmonics = 3 + static_cast<std::size_t>(rng() % 4);
    }
    const double gap = n > 1 ? detail::min_gap(voices, nyquist) : std::numeric_limits<double>::infinity();
    if (gap > best_gap) {
      best_gap = gap;
      best = voices;
    }
    if (gap >= cfg.min_partial_gap_hz) break;
  }
  voices = best;

  MixtureExample ex;
  ex.id = "synth-" + std::to_string(seed);
  std::vector<std::vector<double>> src(n, std::vector<double>(len, 0.0));
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = voices[i];
    const double decay = detail::uniform(rng, 0.45, 0.85);
    const double gain = detail::uniform(rng, 0.5, 1.0);
    const double env_rate = detail::uniform(rng, 0.3, 2.0);
    const double env_depth = detail::uniform(rng, 0.1, 0.5);
    const double env_phase = detail::uniform(rng, 0.0, two_pi);
    // Active span covers at least the middle 80% of the example.
    const double onset = detail::uniform(rng, 0.0, 0.1) * static_cast<double>(len);
    const double offset = detail::uniform(rng, 0.9, 1.0) * static_cast<double>(len);
    const double ramp = 0.01 * sr;
    std::vector<double> phase(v.harmonics);
    for (auto& p : phase) p = detail::uniform(rng, 0.0, two_pi);
    for (std::size_t t = 0; t < len; ++t) {
      const double ts = static_cast<double>(t) / sr;
      const double pos = static_cast<double>(t);
      if (pos < onset || pos >= offset) continue;
      const double edge = std::min({1.0, (pos - onset) / ramp, (offset - pos) / ramp});
      const double fade = 0.5 - 0.5 * std::cos(std::numbers::pi * edge);
      const double env = 1.0 - env_depth * (0.5 + 0.5 * std::sin(two_pi * env_rate * ts + env_phase));
      double acc = 0.0, amp = 1.0;
      for (std::size_t k = 0; k < v.harmonics; ++k, amp *= decay) {
        const double f = v.f0 * static_cast<double>(k + 1);
        if (f >= nyquist) break;
        acc += amp * std::sin(two_pi * f * ts + phase[k]);
      }
      src[i][t] = gain * fade * env * acc;
    }
  }

  double peak = 0.0;
  for (std::size_t t = 0; t < len; ++t) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += src[i][t];
    peak = std::max(peak, std::abs(m));
  }
  const double k = peak > 0.0 ? cfg.peak / peak : 1.0;
  ex.sources.assign(n, Waveform(std::vector<float>(len), cfg.sample_rate_hz));
  ex.mixture = Waveform(std::vector<float>(len, 0.0f), cfg.sample_rate_hz);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < len; ++t) ex.sources[i].samples[t] = static_cast<float>(src[i][t] * k);
  // The mixture is the float sum of the stored sources, so it is exact.
  for (std::size_t t = 0; t < len; ++t) {
    float m = 0.0f;
    for (std::size_t i = 0; i < n; ++i) m += ex.sources[i].samples[t];
    ex.mixture.samples[t] = m;
  }
  return ex;
}

// ------------------------------------------------------------ datasets

enum class Layout { LibriMix, Synthetic };

struct DatasetManifest {
  fs::path root;
  std::vector<std::string> ids;
  Layout layout = Layout::LibriMix;
  std::size_t n_sources = 2;
  // Synthetic layout only.
  std::uint64_t seed = 0;
  SynthConfig synth;

  std::size_t size() const { return ids.size(); }
};

namespace detail {

inline std::set<std::string> wav_names(const fs::path& dir) {
  std::set<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") out.insert(e.path().filename().string());
  return out;
}

}  // namespace detail

/// Scans root/mix_clean/*.wav with counterparts root/s1 ... root/sN.
inline DatasetManifest load_manifest(const fs::path& root, Layout layout = Layout::LibriMix) {
  audioslots::detail::require(layout == Layout::LibriMix, "load_manifest: use synthetic_manifest for synthetic data");
  if (!fs::is_directory(root)) throw NotFound("dataset root " + root.string() + " does not exist");
  DatasetManifest m;
  m.root = root;
  m.layout = layout;
  const auto mixes = detail::wav_names(root / "mix_clean");
  std::vector<std::set<std::string>> srcs;
  for (std::size_t k = 1; fs::is_directory(root / ("s" + std::to_string(k))); ++k)
    srcs.push_back(detail::wav_names(root / ("s" + std::to_string(k))));
  if (mixes.empty()) throw NotFound("no mixtures found under " + (root / "mix_clean").string());
  if (srcs.empty()) throw IntegrityError("no source directories s1/ ... under " + root.string());
  m.n_sources = srcs.size();

  std::vector<std::string> offenders;
  for (const auto& name : mixes)
    for (std::size_t k = 0; k < srcs.size(); ++k)
      if (!srcs[k].count(name)) offenders.push_back(name + " (missing s" + std::to_string(k + 1) + ")");
  for (std::size_t k = 0; k < srcs.size(); ++k)
    for (const auto& name : srcs[k])
      if (!mixes.count(name)) offenders.push_back("s" + std::to_string(k + 1) + "/" + name + " (no mixture)");
  if (!offenders.empty()) {
    std::string msg = "dataset " + root.string() + " has dangling files:";
    for (const auto& o : offenders) msg += " " + o;
    throw IntegrityError(msg);
  }
  for (const auto& name : mixes) m.ids.push_back(fs::path(name).stem().string());
  std::sort(m.ids.begin(), m.ids.end());
  return m;
}

/// In-memory dataset of `count` examples; example i uses a seed derived from
/// (seed, i).
inline DatasetManifest synthetic_manifest(std::uint64_t seed, std::size_t count, const SynthConfig& cfg = {}) {
  if (count == 0) throw NotFound("synthetic dataset with zero examples");
  DatasetManifest m;
  m.layout = Layout::Synthetic;
  m.seed = seed;
  m.synth = cfg;
  m.n_sources = cfg.n_sources;
  for (std::size_t i = 0; i < count; ++i) m.ids.push_back("synth-" + std::to_string(seed) + "-" + std::to_string(i));
  return m;
}

inline MixtureExample load_example(const DatasetManifest& m, std::size_t index) {
  audioslots::detail::require(index < m.size(), "example index out of range");
  MixtureExample ex;
  if (m.layout == Layout::Synthetic) {
    ex = synth_example(detail::mix_seed(m.seed, index), m.synth);
  } else {
    const std::string file = m.ids[index] + ".wav";
    ex.mixture = read_wav(m.root / "mix_clean" / file);
    for (std::size_t k = 1; k <= m.n_sources; ++k) ex.sources.push_back(read_wav(m.root / ("s" + std::to_string(k)) / file));
  }
  ex.id = m.ids[index];
  ex.validate();
  return ex;
}

/// Writes examples in the mix_clean/ s1/ s2/ layout.
inline void write_dataset(const fs::path& root, const std::vector<MixtureExample>& examples) {
  std::error_code ec;
  fs::create_directories(root / "mix_clean", ec);
  if (ec) throw IoError("cannot create " + (root / "mix_clean").string() + ": " + ec.message());
  for (const auto& ex : examples) {
    write_wav(root / "mix_clean" / (ex.id + ".wav"), ex.mixture);
    for (std::size_t k = 0; k < ex.sources.size(); ++k) {
      const auto dir = root / ("s" + std::to_string(k + 1));
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
      write_wav(dir / (ex.id + ".wav"), ex.sources[k]);
    }
  }
}

/// Crops mixture and sources at one shared random offset.
inline MixtureExample random_crop(const MixtureExample& ex, double seconds, std::mt19937_64& rng) {
  const std::size_t len = dsp::chunk_length(ex.mixture.sample_rate_hz, seconds);
  audioslots::detail::require(ex.mixture.size() >= len, "random_crop: example " + ex.id + " has " +
                                                            std::to_string(ex.mixture.size()) + " samples, need " +
                                                            std::to_string(len));
  const std::size_t off = static_cast<std::size_t>(rng() % (ex.mixture.size() - len + 1));
  auto cut = [&](const Waveform& w) {
    return Waveform(std::vector<float>(w.samples.begin() + static_cast<long>(off),
                                       w.samples.begin() + static_cast<long>(off + len)),
                    w.sample_rate_hz);
  };
  MixtureExample out;
  out.id = ex.id;
  out.mixture = cut(ex.mixture);
  for (const auto& s : ex.sources) out.sources.push_back(cut(s));
  return out;
}

}  // namespace audioslots::data

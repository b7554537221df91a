#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "audioslots/dsp.hpp"

using namespace audioslots;
using dsp::Waveform;

namespace {

Waveform noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Waveform w;
  w.samples.resize(n);
  for (auto& v : w.samples) v = u(rng);
  return w;
}

double interior_snr_db(const Waveform& ref, const Waveform& est, std::size_t margin) {
  double s = 0.0, e = 0.0;
  for (std::size_t i = margin; i + margin < ref.size(); ++i) {
    s += double(ref.samples[i]) * ref.samples[i];
    e += std::pow(double(ref.samples[i]) - est.samples[i], 2);
  }
  return 10.0 * std::log10(s / e);
}

}  // namespace

TEST(Hann, PeriodicEndpoints) {
  const auto w = dsp::hann_window(512);
  EXPECT_FLOAT_EQ(w[0], 0.0f);
  EXPECT_FLOAT_EQ(w[256], 1.0f);
  EXPECT_NEAR(w[128], 0.5f, 1e-7);
  EXPECT_NEAR(w[511], w[1], 1e-7);
}

TEST(Stft, HalfSecondGivesModelGrid) {
  const auto s = dsp::stft(noise(8000, 1));
  EXPECT_EQ(s.bins, 257u);
  EXPECT_EQ(s.frames, 64u);
}

TEST(Stft, SinePeaksAtItsBin) {
  Waveform w;
  w.samples.resize(8000);
  for (std::size_t i = 0; i < w.size(); ++i)
    w.samples[i] = static_cast<float>(std::sin(2 * std::numbers::pi * 1000.0 * double(i) / 16000.0));
  const auto m = dsp::magnitude(dsp::stft(w));
  std::size_t best = 0;
  for (std::size_t f = 0; f < m.rows; ++f)
    if (m.at(f, 32) > m.at(best, 32)) best = f;
  EXPECT_EQ(best, 32u);  // 1000 Hz / (16000 / 512)
}

TEST(Stft, ZeroSignalHasZeroSpectrum) {
  Waveform w(std::vector<float>(1000, 0.0f));
  const auto m = dsp::magnitude(dsp::stft(w));
  for (float v : m.values) EXPECT_EQ(v, 0.0f);
}

TEST(Stft, Errors) {
  EXPECT_THROW(dsp::stft(Waveform{}), InvalidArgument);
  EXPECT_THROW(dsp::stft(noise(100, 1), 511, 125), InvalidArgument);
}

TEST(Istft, RoundTripInterior) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto w = noise(8000, seed);
    const auto back = dsp::istft(dsp::stft(w));
    ASSERT_EQ(back.size(), w.size());
    EXPECT_GT(interior_snr_db(w, back, 256), 40.0);
  }
}

TEST(Istft, RoundTripLengthNotMultipleOfHop) {
  const auto w = noise(8061, 4);
  const auto back = dsp::istft(dsp::stft(w));
  ASSERT_EQ(back.size(), w.size());
  EXPECT_GT(interior_snr_db(w, back, 256), 40.0);
}

TEST(Compression, RoundTripAndValues) {
  dsp::Grid g(1, 3);
  g.values = {0.0f, 1.0f, 2.0f};
  const auto c = dsp::compress(g);
  EXPECT_EQ(c.values[0], 0.0f);
  EXPECT_EQ(c.values[1], 1.0f);
  EXPECT_NEAR(c.values[2], std::pow(2.0, 0.3), 1e-6);
  const auto back = dsp::decompress(c);
  EXPECT_NEAR(back.values[2], 2.0f, 2e-5f);
  g.values[0] = -1.0f;
  EXPECT_THROW(dsp::compress(g), InvalidArgument);
  EXPECT_THROW(dsp::decompress(g), InvalidArgument);
}

TEST(Compression, RelativeRoundTripOverRange) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> e(-8.0, 4.0);
  dsp::Grid g(1, 1000);
  for (auto& v : g.values) v = static_cast<float>(std::pow(10.0, e(rng)));
  const auto back = dsp::decompress(dsp::compress(g));
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_LT(std::abs(back.values[i] - g.values[i]) / g.values[i], 1e-5);
}

TEST(Rows, CropAndExtend) {
  dsp::Grid g(3, 2);
  g.values = {1, 2, 3, 4, 5, 6};
  const auto c = dsp::crop_rows(g, 2);
  EXPECT_EQ(c.values, (std::vector<float>{1, 2, 3, 4}));
  const auto e = dsp::extend_rows(c, 3);
  EXPECT_EQ(e.values, (std::vector<float>{1, 2, 3, 4, 3, 4}));
  EXPECT_THROW(dsp::crop_rows(g, 4), InvalidArgument);
}

TEST(Chunk, CountsAndPadding) {
  const auto w = noise(20000, 3);
  const auto c = dsp::chunk(w);
  EXPECT_EQ(c.chunks.size(), 3u);
  EXPECT_EQ(c.pad_len, 4000u);
  EXPECT_EQ(c.chunks[2].samples[3999], w.samples[19999]);
  EXPECT_EQ(c.chunks[2].samples[4000], 0.0f);
}

TEST(Chunk, StitchIsExactInverse) {
  for (std::size_t len : {1u, 7999u, 8000u, 8001u, 24000u, 160000u}) {
    const auto w = noise(len, len);
    const auto back = dsp::stitch(dsp::chunk(w));
    EXPECT_EQ(back.samples, w.samples) << len;
  }
}

TEST(Chunk, Errors) {
  EXPECT_THROW(dsp::chunk(Waveform{}), InvalidArgument);
  EXPECT_THROW(dsp::stitch(dsp::ChunkList{}), InvalidArgument);
}

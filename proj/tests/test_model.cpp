#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "audioslots/matching.hpp"
#include "audioslots/model.hpp"
#include "support/gradcheck.hpp"
#include "support/model_check.hpp"

using namespace audioslots;
using model::AudioSlots;
using model::ModelConfig;

namespace {

// Counts parameters from the layer description, independently of the model
// code: conv kernels without bias, GroupNorm/LayerNorm scale and bias, linear
// layers with bias.
std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.slot_dim, e = c.fourier_dim();
  std::size_t n = c.encoder_channels[0] * c.root_kernel * c.root_kernel + 2 * c.encoder_channels[0];
  std::size_t in = c.encoder_channels[0];
  for (std::size_t s = 0; s < c.encoder_channels.size(); ++s)
    for (std::size_t b = 0; b < c.encoder_blocks[s]; ++b) {
      const std::size_t out = c.encoder_channels[s];
      n += out * in * 9 + 2 * out + out * out * 9 + 2 * out;
      if ((s > 0 && b == 0) || in != out) n += out * in + 2 * out;
      in = out;
    }
  n += in * d + d + e * d;
  n += c.n_slots * d;
  const std::size_t per_attn = 3 * d * d + d * d + d;
  const std::size_t per_layer = 4 * 2 * d + 2 * per_attn + (d * c.ffn_mult * d + c.ffn_mult * d) + (c.ffn_mult * d * d + d);
  n += c.transformer_layers * per_layer + 2 * d;
  const auto& h = c.decoder_hidden;
  n += d * h[0] + e * h[0] + h[0];
  for (std::size_t l = 1; l < h.size(); ++l) n += h[l - 1] * h[l] + h[l];
  n += h.back() + 1;
  return n;
}

Tensor<float> random_input(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> x({c.freq_bins, c.frames});
  for (auto& v : x.data) v = u(rng);
  return x;
}

}  // namespace

TEST(FourierFeatures, WorkedExamples) {
  const auto o = model::fourier_features(0.0, 0.0, 4);
  ASSERT_EQ(o.size(), 16u);
  for (std::size_t u = 0; u < 2; ++u)
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_EQ(o[u * 8 + b], 0.0);
      EXPECT_EQ(o[u * 8 + 4 + b], 1.0);
    }
  const auto p = model::fourier_features(1.0, 0.0, 4);
  EXPECT_NEAR(p[0], 0.0, 1e-12);
  EXPECT_EQ(p[4], -1.0);
  EXPECT_THROW(model::fourier_features(1.5, 0.0, 4), InvalidArgument);
  EXPECT_THROW(model::fourier_features(0.5, -0.1, 4), InvalidArgument);
}

TEST(ModelConfig, DefaultsAndValidation) {
  const ModelConfig c;
  EXPECT_EQ(c.n_slots, 2u);
  EXPECT_EQ(c.slot_dim, 128u);
  EXPECT_EQ(c.fourier_dim(), 16u);
  EXPECT_EQ(c.total_stride(), 8u);
  EXPECT_EQ(c.grid_rows(), 32u);
  EXPECT_EQ(c.grid_cols(), 8u);
  EXPECT_EQ(ModelConfig::full().encoder_blocks, (std::vector<std::size_t>{3, 4, 6, 3}));
  EXPECT_EQ(ModelConfig::full().slot_dim, 4096u);
  ModelConfig bad;
  bad.attention_heads = 3;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = ModelConfig{};
  bad.frames = 60;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(ModelConfig, KeyValueRoundTrip) {
  auto c = ModelConfig::desk();
  c.init_seed = 77;
  ModelConfig back;
  back.apply(c.to_kv());
  EXPECT_EQ(back, c);
  config::KeyValues kv{{"encoder_preset", "resnet34"}};
  back.apply(kv);
  EXPECT_EQ(back.encoder_blocks, (std::vector<std::size_t>{3, 4, 6, 3}));
}

TEST(Model, ParameterCountsMatchLayerArithmetic) {
  for (const auto& c : {ModelConfig{}, ModelConfig::desk(), audioslots::testing::tiny_config()}) {
    AudioSlots<float> net(c);
    EXPECT_EQ(net.params().scalar_count(), expected_parameter_count(c));
  }
  // Frozen values, so unintended architecture changes show up here.
  EXPECT_EQ(AudioSlots<float>(ModelConfig::desk()).params().scalar_count(), 209977u);
  EXPECT_EQ(expected_parameter_count(ModelConfig{}), 1944817u);
  EXPECT_EQ(expected_parameter_count(ModelConfig::full()), 1098633921u);
}

TEST(Model, EncoderGridIs32By8) {
  AudioSlots<float> net(ModelConfig::desk());
  ad::Tape<float> t;
  const auto z = net.encode_features(t, random_input(net.config(), 1));
  EXPECT_EQ(z.rows, 32u);
  EXPECT_EQ(z.cols, 8u);
  EXPECT_EQ(z.features.shape(), (Shape{256, 64}));
  EXPECT_THROW(net.encode_features(t, Tensor<float>({128, 64})), ShapeError);
}

TEST(Model, ZeroInputGivesFiniteOutput) {
  AudioSlots<float> net(ModelConfig::desk());
  ad::Tape<float> t;
  const auto y = net.forward(t, Tensor<float>({256, 64}, 0.0f));
  EXPECT_EQ(y.shape(), (Shape{2, 256, 64}));
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Model, AttentionRowsAreProbabilityVectors) {
  AudioSlots<float> net(ModelConfig::desk());
  ad::Tape<float> t;
  model::AttentionTrace<float> trace;
  const auto s = net.infer_slots(t, net.encode_features(t, random_input(net.config(), 2)), &trace);
  EXPECT_EQ(s.count(), 2u);
  EXPECT_EQ(s.dim(), 64u);
  ASSERT_EQ(trace.cross_attention.size(), 2u);
  ASSERT_EQ(trace.self_attention.size(), 2u);
  for (const auto* list : {&trace.self_attention, &trace.cross_attention})
    for (const auto& w : *list) {
      const std::size_t keys = w.shape.back();
      for (std::size_t r = 0; r < w.size() / keys; ++r) {
        double sum = 0.0;
        for (std::size_t k = 0; k < keys; ++k) {
          EXPECT_GE(w.data[r * keys + k], 0.0f);
          sum += w.data[r * keys + k];
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
      }
    }
  EXPECT_EQ(trace.cross_attention[0].shape, (Shape{4, 2, 256}));
}

TEST(Model, DistinctInputsGiveDistinctSlots) {
  AudioSlots<float> net(ModelConfig::desk());
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ad::Tape<float> t;
    const auto a = net.infer_slots(t, net.encode_features(t, random_input(net.config(), seed)));
    const auto b = net.infer_slots(t, net.encode_features(t, random_input(net.config(), seed + 100)));
    EXPECT_NE(a.slots.value().data, b.slots.value().data);
  }
}

TEST(Model, QueriesAreDistinct) {
  AudioSlots<float> net(ModelConfig::desk());
  const auto& q = net.params().find("slots.queries")->value;
  EXPECT_NE(std::vector<float>(q.data.begin(), q.data.begin() + 64), std::vector<float>(q.data.begin() + 64, q.data.end()));
}

TEST(Model, DecoderIsPermutationEquivariantBitwise) {
  auto c = ModelConfig::desk();
  c.n_slots = 3;
  AudioSlots<float> net(c);
  std::mt19937_64 rng(3);
  Tensor<float> slots({3, c.slot_dim});
  std::normal_distribution<float> g;
  for (auto& v : slots.data) v = g(rng);
  ad::Tape<float> t;
  const auto base = net.broadcast_decode(t, {t.constant(slots)}).value();
  std::vector<std::size_t> perm{0, 1, 2};
  const std::size_t cells = 256 * 64;
  do {
    const auto permuted = ad::gather_rows(t.constant(slots), perm);
    const auto y = net.broadcast_decode(t, {permuted}).value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < cells; k += 97) ASSERT_EQ(y.data[i * cells + k], base.data[perm[i] * cells + k]);
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_TRUE(std::equal(y.data.begin() + long(i * cells), y.data.begin() + long((i + 1) * cells),
                             base.data.begin() + long(perm[i] * cells)));
  } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST(Model, IdenticalSlotsDecodeIdentically) {
  AudioSlots<float> net(ModelConfig::desk());
  Tensor<float> slots({2, 64}, 0.3f);
  ad::Tape<float> t;
  const auto y = net.broadcast_decode(t, {t.constant(slots)}).value();
  EXPECT_TRUE(std::equal(y.data.begin(), y.data.begin() + 16384, y.data.begin() + 16384));
}

TEST(Model, LossInvariantToSlotRelabeling) {
  AudioSlots<float> net(ModelConfig::desk());
  ad::Tape<float> t;
  const auto y = net.forward(t, random_input(net.config(), 4));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> targets({2, 256, 64});
  for (auto& v : targets.data) v = u(rng);
  const double a = matching::pit_mse_loss(y, targets).loss.value().item();
  const double b = matching::pit_mse_loss(ad::gather_rows(y, {1, 0}), targets).loss.value().item();
  EXPECT_EQ(a, b);
}

TEST(Model, DeterministicForward) {
  AudioSlots<float> a(ModelConfig::desk()), b(ModelConfig::desk());
  ad::Tape<float> t1, t2;
  const auto x = random_input(a.config(), 6);
  EXPECT_EQ(a.forward(t1, x).value().data, b.forward(t2, x).value().data);
}

TEST(Model, EveryEncoderParameterReceivesGradient) {
  const auto c = ModelConfig::desk();
  std::map<std::string, bool> touched;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cs = c;
    cs.init_seed = seed;
    AudioSlots<float> net(cs);
    net.params().zero_grad();
    ad::Tape<float> t;
    const auto y = net.forward(t, random_input(c, seed + 10));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor<float> targets(y.shape());
    for (auto& v : targets.data) v = u(rng);
    t.backward(matching::pit_mse_loss(y, targets).loss);
    for (const auto& p : net.params()) {
      if (p.name.rfind("encoder.", 0) != 0) continue;
      bool nz = false;
      for (float g : p.grad.data) nz = nz || g != 0.0f;
      touched[p.name] = touched[p.name] || nz;
    }
  }
  ASSERT_FALSE(touched.empty());
  for (const auto& [name, ok] : touched) EXPECT_TRUE(ok) << name;
}

TEST(Model, TinyEndToEndGradientCheck) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto r = audioslots::testing::tiny_model_grad_check(seed);
    EXPECT_LT(r.max_rel_error, 1e-3) << seed;
    EXPECT_GT(r.checked, 50u);
  }
}

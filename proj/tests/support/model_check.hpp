#pragma once

// End-to-end gradient check of a tiny model against central differences.

#include <algorithm>
#include <cmath>
#include <random>

#include "audioslots/matching.hpp"
#include "audioslots/model.hpp"
#include "support/gradcheck.hpp"

namespace audioslots::testing {

inline model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.n_slots = 2;
  c.slot_dim = 8;
  c.encoder_blocks = {1, 1};
  c.encoder_channels = {4, 8};
  c.root_kernel = 3;
  c.norm_groups = 2;
  c.transformer_layers = 1;
  c.attention_heads = 2;
  c.ffn_mult = 2;
  c.fourier_bands = 2;
  c.decoder_hidden = {8};
  c.freq_bins = 16;
  c.frames = 8;
  return c;
}

struct ModelCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Perturbs `per_tensor` random entries of every parameter tensor and
/// compares dL/dtheta for L = PIT-MSE(forward(x), targets).
inline ModelCheck tiny_model_grad_check(std::uint64_t seed, std::size_t per_tensor = 3, double h = 1e-6) {
  auto cfg = tiny_config();
  cfg.init_seed = seed;
  model::AudioSlots<double> net(cfg);
  std::mt19937_64 rng(seed + 17);
  const auto x = random_tensor({cfg.freq_bins, cfg.frames}, rng, 0.0, 1.0);
  const auto y = random_tensor({cfg.n_slots, cfg.freq_bins, cfg.frames}, rng, 0.0, 1.0);
  auto loss_of = [&]() {
    ad::Tape<double> tape;
    return matching::pit_mse_loss(net.forward(tape, x), y).loss.value().item();
  };
  net.params().zero_grad();
  {
    ad::Tape<double> tape;
    const auto pit = matching::pit_mse_loss(net.forward(tape, x), y);
    tape.backward(pit.loss);
  }
  ModelCheck r;
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto& p : net.params()) {
    std::vector<std::size_t> idx(p.value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(per_tensor, idx.size()));
    for (auto i : idx) {
      const double orig = p.value.data[i];
      p.value.data[i] = orig + h;
      const double up = loss_of();
      p.value.data[i] = orig - h;
      const double down = loss_of();
      p.value.data[i] = orig;
      const double numeric = (up - down) / (2 * h), a = p.grad.data[i];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
      ++r.checked;
    }
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  r.max_rel_error = denom > 0.0 ? std::sqrt(diff) / denom : std::sqrt(diff);
  return r;
}

}  // namespace audioslots::testing

#pragma once

// Central finite-difference checks for tape gradients (double precision).

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "audioslots/autodiff.hpp"

namespace audioslots::testing {

using Fn = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Values bounded away from zero, for kinks such as relu.
inline Tensor<double> random_tensor_away_from_zero(const Shape& s, std::mt19937_64& rng, double margin = 0.05) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  Tensor<double> t(s);
  for (auto& v : t.data) v = (rng() & 1 ? 1.0 : -1.0) * u(rng);
  return t;
}

/// Scalarizes an arbitrary output with fixed random weights so that every
/// output element contributes a distinct coefficient.
inline ad::Var<double> weighted_sum(ad::Tape<double>& tape, const ad::Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

struct GradCheckResult {
  double max_rel_error = 0.0;  // over inputs: ||analytic - numeric|| / max(||analytic||, ||numeric||)
  std::size_t checked = 0;
};

/// Compares d f / d inputs against central differences with step h.
/// `max_entries` limits how many entries per input are perturbed (0 = all).
inline GradCheckResult grad_check(const Fn& f, const std::vector<Tensor<double>>& inputs, double h = 1e-6,
                                  std::size_t max_entries = 0, std::uint64_t pick_seed = 0) {
  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vs;
    for (const auto& x : xs) vs.push_back(tape.variable(x));
    return f(tape, vs).value().item();
  };
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> vs;
  for (const auto& x : inputs) vs.push_back(tape.variable(x));
  const auto loss = f(tape, vs);
  tape.backward(loss);

  GradCheckResult r;
  std::mt19937_64 pick(pick_seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = tape.grad(vs[k]);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) idx.push_back(i);
    if (max_entries && idx.size() > max_entries) {
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(max_entries);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (auto i : idx) {
      auto xs = inputs;
      xs[k].data[i] += h;
      const double up = eval(xs);
      xs[k].data[i] -= 2 * h;
      const double down = eval(xs);
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data[i];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
      ++r.checked;
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nn));
    const double rel = denom > 0.0 ? std::sqrt(diff) / denom : std::sqrt(diff);
    r.max_rel_error = std::max(r.max_rel_error, rel);
  }
  return r;
}

}  // namespace audioslots::testing

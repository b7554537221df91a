#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "audioslots/dsp.hpp"
#include "audioslots/errors.hpp"
#include "audioslots/matching.hpp"

namespace audioslots::metrics {

namespace detail {
using audioslots::detail::require;
using audioslots::detail::require_shape;
}  // namespace detail

inline constexpr double kSiSnrEps = 1e-8;
inline constexpr double kSiSnrClampDb = 60.0;

namespace detail {

// Snap to a 2^-32 dB grid. Values within +-60 dB then have exact
// differences and sums in double precision.
inline double snap_db(double x) { return std::ldexp(std::nearbyint(std::ldexp(x, 32)), -32); }

}  // namespace detail

/// Scale-invariant SNR in dB: alpha = <y, yhat> / |y|^2, then
/// 10 log10(|alpha y|^2 / (|alpha y - yhat|^2 + eps)), clamped to +-60 dB.
inline double si_snr(const std::vector<float>& y, const std::vector<float>& yhat) {
  if (y.size() != yhat.size())
    throw ShapeError("si_snr: target has " + std::to_string(y.size()) + " samples, estimate has " +
                     std::to_string(yhat.size()));
  double yy = 0.0, yh = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    yy += static_cast<double>(y[i]) * static_cast<double>(y[i]);
    yh += static_cast<double>(y[i]) * static_cast<double>(yhat[i]);
  }
  if (!(yy > 0.0)) throw InvalidArgument("si_snr: target is all zeros");
  const double alpha = yh / yy;
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double s = alpha * static_cast<double>(y[i]);
    const double e = s - static_cast<double>(yhat[i]);
    sig += s * s;
    err += e * e;
  }
  if (!(sig > 0.0)) return -kSiSnrClampDb;
  const double db = 10.0 * std::log10(sig / (err + kSiSnrEps));
  return detail::snap_db(std::clamp(db, -kSiSnrClampDb, kSiSnrClampDb));
}

inline double si_snr(const dsp::Waveform& y, const dsp::Waveform& yhat) { return si_snr(y.samples, yhat.samples); }

/// Improvement of an estimate over using the mixture itself as the estimate.
inline double si_snri(const dsp::Waveform& y, const dsp::Waveform& yhat, const dsp::Waveform& mixture) {
  return si_snr(y, yhat) - si_snr(y, mixture);
}

struct EvalReport {
  std::string mask_type;
  std::vector<double> si_snr_db;   // per target source
  std::vector<double> si_snri_db;  // per target source
  double mean_si_snr_db = 0.0;
  double mean_si_snri_db = 0.0;
  matching::Assignment assignment;  // estimate index -> target index
  std::string alignment = "reference";
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Matches estimates to targets by maximal total SI-SNR and reports SI-SNR
/// and SI-SNRi per target under that matching.
inline EvalReport evaluate_separation(const std::vector<dsp::Waveform>& targets,
                                      const std::vector<dsp::Waveform>& estimates, const dsp::Waveform& mixture,
                                      std::string mask_type = "") {
  audioslots::detail::require(targets.size() == estimates.size(),
                              "evaluate_separation: target and estimate counts differ");
  const std::size_t n = targets.size();
  EvalReport r;
  r.mask_type = std::move(mask_type);
  r.assignment = matching::match_by_score<dsp::Waveform>(
      targets, estimates, [](const dsp::Waveform& t, const dsp::Waveform& e) { return si_snr(t, e); },
      matching::Objective::Maximize);
  std::vector<std::size_t> est_for_target(n);
  for (std::size_t i = 0; i < n; ++i) est_for_target[r.assignment.permutation[i]] = i;
  r.si_snr_db.resize(n);
  r.si_snri_db.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    r.si_snr_db[j] = si_snr(targets[j], estimates[est_for_target[j]]);
    r.si_snri_db[j] = r.si_snr_db[j] - si_snr(targets[j], mixture);
  }
  r.mean_si_snr_db = mean_of(r.si_snr_db);
  r.mean_si_snri_db = mean_of(r.si_snri_db);
  return r;
}

/// One `key=value` line.
inline std::string to_text(const EvalReport& r) {
  std::ostringstream os;
  const std::string sfx = r.mask_type.empty() ? "" : "_" + r.mask_type;
  os << "event=eval mask=" << (r.mask_type.empty() ? "none" : r.mask_type) << " alignment=" << r.alignment
     << " si_snr" << sfx << '=' << r.mean_si_snr_db << " si_snri" << sfx << '=' << r.mean_si_snri_db;
  for (std::size_t j = 0; j < r.si_snr_db.size(); ++j)
    os << " s" << j + 1 << "_si_snr=" << r.si_snr_db[j] << " s" << j + 1 << "_si_snri=" << r.si_snri_db[j];
  return os.str();
}

inline nlohmann::json to_json(const EvalReport& r) {
  const std::string sfx = r.mask_type.empty() ? "" : "_" + r.mask_type;
  nlohmann::json j;
  j["mask_type"] = r.mask_type;
  j["alignment"] = r.alignment;
  j["si_snr" + sfx] = r.mean_si_snr_db;
  j["si_snri" + sfx] = r.mean_si_snri_db;
  j["per_source_si_snr"] = r.si_snr_db;
  j["per_source_si_snri"] = r.si_snri_db;
  j["assignment"] = r.assignment.permutation;
  return j;
}

}  // namespace audioslots::metrics

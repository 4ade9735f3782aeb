#pragma once

// Arithmetic intensity (flops per byte moved) and the resulting compute
// efficiency for a given bandwidth, assuming no compute/communication overlap.

#include <cmath>
#include <string_view>
#include <vector>

#include "infinisim/error.hpp"
#include "infinisim/memory_model.hpp"

namespace infinisim {

inline constexpr double kDefaultPeakFlops = 70e12;

enum class AitKind { ParamGrad, OptimizerStates, ActivationCkpt };

constexpr std::string_view ait_kind_name(AitKind k) noexcept {
  switch (k) {
    case AitKind::ParamGrad: return "param";
    case AitKind::OptimizerStates: return "opt";
    case AitKind::ActivationCkpt: return "act";
  }
  return "?";
}

struct EfficiencyPoint {
  double bandwidth = 0.0;  ///< bytes/s
  double ait = 0.0;        ///< flops/byte
  double peak_tp = 0.0;    ///< flops/s
  double efficiency = 0.0;
};

/// Forward, backward and recompute: 2 * 4 * bsz * seq * params = 96 bsz seq nl hd^2.
inline double compute_per_iter(const ModelConfig& cfg) {
  return 8.0 * cfg.bsz * static_cast<double>(cfg.seq) * static_cast<double>(param_count(cfg));
}

inline double ait(AitKind kind, const ModelConfig& cfg) {
  cfg.validate();
  const double tokens = static_cast<double>(cfg.seq) * cfg.bsz;
  switch (kind) {
    case AitKind::ParamGrad: return tokens;
    case AitKind::OptimizerStates: return tokens / 4.0;
    case AitKind::ActivationCkpt: return 24.0 * static_cast<double>(cfg.hd) * static_cast<double>(cfg.ci);
  }
  throw DomainError("unknown ait kind");
}

/// ait*bw / (ait*bw + peak)
inline double efficiency(double ait_value, double bw, double peak_tp) {
  if (!(ait_value > 0.0)) throw DomainError("efficiency: ait must be > 0");
  if (!(peak_tp > 0.0)) throw DomainError("efficiency: peak_tp must be > 0");
  if (bw < 0.0 || std::isnan(bw)) throw DomainError("efficiency: bandwidth must be >= 0");
  if (std::isinf(bw)) return 1.0;
  const double moved = ait_value * bw;
  return moved / (moved + peak_tp);
}

/// Bandwidth needed to reach `target_eff`; the inverse of efficiency().
inline double required_bandwidth(double ait_value, double peak_tp, double target_eff) {
  if (!(target_eff > 0.0 && target_eff < 1.0)) throw DomainError("required_bandwidth: target efficiency must be in (0,1)");
  if (!(ait_value > 0.0)) throw DomainError("required_bandwidth: ait must be > 0");
  if (!(peak_tp > 0.0)) throw DomainError("required_bandwidth: peak_tp must be > 0");
  return (target_eff / (1.0 - target_eff)) * peak_tp / ait_value;
}

/// Log-spaced grid of `points` values from lo to hi inclusive.
inline std::vector<double> log_grid(double lo, double hi, int points) {
  if (!(lo > 0.0) || !(hi > lo) || points < 2) throw DomainError("log_grid: need 0 < lo < hi and points >= 2");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(points));
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (int i = 0; i < points; ++i) {
    if (i == 0) out.push_back(lo);
    else if (i == points - 1) out.push_back(hi);
    else out.push_back(std::pow(10.0, a + (b - a) * i / (points - 1)));
  }
  return out;
}

/// One row per (cfg, bw) pair, cfg-major.
inline std::vector<EfficiencyPoint> efficiency_sweep(AitKind kind, const std::vector<ModelConfig>& cfgs,
                                                     double peak_tp, const std::vector<double>& bws) {
  if (cfgs.empty() || bws.empty()) throw DomainError("efficiency_sweep: grids must be nonempty");
  std::vector<EfficiencyPoint> rows;
  rows.reserve(cfgs.size() * bws.size());
  for (const auto& cfg : cfgs) {
    const double a = ait(kind, cfg);
    for (double bw : bws) rows.push_back({bw, a, peak_tp, efficiency(a, bw, peak_tp)});
  }
  return rows;
}

}  // namespace infinisim

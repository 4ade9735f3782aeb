#pragma once

// Capacity planning across device-placement strategies: which tiers hold
// which model states, how much each tier must hold, the largest model that
// fits, and the bandwidth available to fetch partitioned parameters.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "infinisim/efficiency_model.hpp"
#include "infinisim/error.hpp"
#include "infinisim/memory_model.hpp"

namespace infinisim {

enum class TierKind : std::uint8_t { Device = 0, Host = 1, Nvme = 2 };

constexpr std::string_view tier_name(TierKind t) noexcept {
  switch (t) {
    case TierKind::Device: return "device";
    case TierKind::Host: return "host";
    case TierKind::Nvme: return "nvme";
  }
  return "?";
}

inline constexpr std::array<TierKind, 3> kAllTiers = {TierKind::Device, TierKind::Host, TierKind::Nvme};

/// Hardware description. Defaults model a single DGX-2-like node.
struct ClusterConfig {
  std::int64_t nodes = 1;
  std::int64_t devices_per_node = 16;
  double device_mem_bytes = 32e9;
  double host_mem_bytes_per_node = 1.5e12;
  double nvme_bytes_per_node = 28e12;
  double pcie_bw_per_device = 12e9;      ///< exclusive per-device PCIe link
  double host_mem_bw_per_node = 48e9;    ///< aggregate PCIe bandwidth to host memory
  double nvme_bw_per_node = 25e9;
  double device_device_bw = 300e9;
  double peak_tp_per_device = kDefaultPeakFlops;

  std::int64_t world_size() const noexcept { return nodes * devices_per_node; }

  void validate() const {
    if (nodes < 1 || devices_per_node < 1) throw DomainError("cluster: nodes and devices_per_node must be >= 1");
    const double fields[] = {device_mem_bytes,     host_mem_bytes_per_node, nvme_bytes_per_node,
                             pcie_bw_per_device,   host_mem_bw_per_node,    nvme_bw_per_node,
                             device_device_bw,     peak_tp_per_device};
    for (double f : fields) {
      if (!(f > 0.0) || !std::isfinite(f)) throw DomainError("cluster: capacities and bandwidths must be positive");
    }
  }
};

enum class Strategy { DataParallel = 0, Zero2, ZeroOffload, ThreeD, Zero3, ZeroInfCpu, ZeroInfNvme };

inline constexpr std::array<Strategy, 7> kAllStrategies = {
    Strategy::DataParallel, Strategy::Zero2,      Strategy::ZeroOffload, Strategy::ThreeD,
    Strategy::Zero3,        Strategy::ZeroInfCpu, Strategy::ZeroInfNvme};

constexpr std::string_view strategy_name(Strategy s) noexcept {
  switch (s) {
    case Strategy::DataParallel: return "data-parallel";
    case Strategy::Zero2: return "zero-2";
    case Strategy::ZeroOffload: return "zero-offload";
    case Strategy::ThreeD: return "3d-parallel";
    case Strategy::Zero3: return "zero-3";
    case Strategy::ZeroInfCpu: return "zero-inf-cpu";
    case Strategy::ZeroInfNvme: return "zero-inf-nvme";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (strategy_name(s) == name) return s;
  }
  throw DomainError("unknown strategy '" + std::string(name) + "'");
}

/// One row of the device-placement table.
struct PlacementRow {
  Strategy strategy;
  std::string_view opt_grad_devices;
  bool opt_grad_partitioned;
  std::string_view param_devices;
  bool param_partitioned;
};

inline constexpr std::array<PlacementRow, 7> kPlacementTable = {{
    {Strategy::DataParallel, "GPU", false, "GPU", false},
    {Strategy::Zero2, "GPU", true, "GPU", false},
    {Strategy::ZeroOffload, "CPU,GPU", true, "GPU", false},
    {Strategy::ThreeD, "GPU", true, "GPU", true},
    {Strategy::Zero3, "GPU", true, "GPU", true},
    {Strategy::ZeroInfCpu, "CPU,GPU", true, "CPU,GPU", true},
    {Strategy::ZeroInfNvme, "NVMe,CPU,GPU", true, "NVMe,CPU,GPU", true},
}};

inline const PlacementRow& placement_row(Strategy s) { return kPlacementTable[static_cast<std::size_t>(s)]; }

/// Strategy plus the sub-option for where ZeroInfNvme keeps fp16 parameters.
struct StrategyOptions {
  Strategy strategy = Strategy::DataParallel;
  TierKind nvme_param_tier = TierKind::Nvme;  ///< Host or Nvme; only read for ZeroInfNvme
};

/// Tier holding parameters when they are not in use.
inline TierKind param_tier(const StrategyOptions& s) {
  switch (s.strategy) {
    case Strategy::ZeroInfCpu: return TierKind::Host;
    case Strategy::ZeroInfNvme: return s.nvme_param_tier;
    default: return TierKind::Device;
  }
}

/// Tier holding optimizer states (and, by default, gradients).
inline TierKind optimizer_tier(const StrategyOptions& s) {
  switch (s.strategy) {
    case Strategy::ZeroOffload:
    case Strategy::ZeroInfCpu: return TierKind::Host;
    case Strategy::ZeroInfNvme: return TierKind::Nvme;
    default: return TierKind::Device;
  }
}

/// Slowest tier the strategy keeps model states in.
inline TierKind slowest_tier(const StrategyOptions& s) {
  return std::max(param_tier(s), optimizer_tier(s));
}

inline constexpr double kFrameworkOverheadBytes = 2e9;

/// Shape of a model with the parameter count left free.
struct TemplateShape {
  std::int64_t nl = 128;
  std::int64_t attn_heads = 16;
  std::int64_t seq = 1024;
  double bsz = 1.0;
  std::int64_t ci = 1;

  static TemplateShape of(const ModelConfig& cfg) { return {cfg.nl, cfg.attn_heads, cfg.seq, cfg.bsz, cfg.ci}; }
};

/// Per-device working memory: mswm / tiles + awm + framework overhead. `hd` may be
/// fractional when derived from a parameter count.
inline double working_memory_bytes(double hd, const TemplateShape& t, std::int64_t tiles = 1) {
  const double mswm = 16.0 * hd * hd / static_cast<double>(tiles);
  const double awm = 2.0 * t.bsz * static_cast<double>(t.seq) * static_cast<double>(t.ci) *
                     (16.0 * hd + 2.0 * static_cast<double>(t.attn_heads) * static_cast<double>(t.seq));
  return std::ceil(mswm) + std::ceil(awm) + kFrameworkOverheadBytes;
}

struct TierDemand {
  TierKind tier;
  double demand = 0.0;    ///< bytes, per device for Device, per node for Host/Nvme
  double capacity = 0.0;
};

/// Resident model-state demand per tier for `params` parameters, plus device working memory.
inline std::array<TierDemand, 3> tier_demands(const ClusterConfig& c, const StrategyOptions& s, double params,
                                              double working_mem) {
  const double n = static_cast<double>(c.world_size());
  const double nodes = static_cast<double>(c.nodes);
  double dev = 0.0, host = 0.0, nvme = 0.0;
  switch (s.strategy) {
    case Strategy::DataParallel: dev = 20.0 * params; break;
    case Strategy::Zero2: dev = 2.0 * params + 18.0 * params / n; break;
    case Strategy::ZeroOffload:
      dev = 2.0 * params;
      host = 18.0 * params / nodes;
      break;
    case Strategy::ThreeD:
    case Strategy::Zero3: dev = 20.0 * params / n; break;
    case Strategy::ZeroInfCpu: host = 20.0 * params / nodes; break;
    case Strategy::ZeroInfNvme:
      if (s.nvme_param_tier == TierKind::Host) {
        host = 2.0 * params / nodes;
        nvme = 18.0 * params / nodes;
      } else {
        nvme = 20.0 * params / nodes;
      }
      break;
  }
  return {{{TierKind::Device, std::ceil(dev) + working_mem, c.device_mem_bytes},
           {TierKind::Host, std::ceil(host), c.host_mem_bytes_per_node},
           {TierKind::Nvme, std::ceil(nvme), c.nvme_bytes_per_node}}};
}

/// Aggregate bandwidth for bringing one parameter from `source` into device memory.
/// Broadcast funnels the whole parameter through one owner's PCIe link; allgather
/// lets every device fetch its shard in parallel over a shared intra-node link.
inline double effective_param_bandwidth(const ClusterConfig& c, TierKind source, bool partitioned) {
  c.validate();
  const double world = static_cast<double>(c.world_size());
  const double nodes = static_cast<double>(c.nodes);
  if (source == TierKind::Device) {
    return partitioned ? world * c.device_device_bw : c.device_device_bw;
  }
  const double source_bw = source == TierKind::Host ? c.host_mem_bw_per_node : c.nvme_bw_per_node;
  if (!partitioned) return std::min(c.pcie_bw_per_device, source_bw);
  const double shared_pcie =
      std::min(c.pcie_bw_per_device, c.host_mem_bw_per_node / static_cast<double>(c.devices_per_node));
  return std::min(world * shared_pcie, nodes * source_bw);
}

/// Per-device bandwidth at which a strategy moves each kind of state; +inf where
/// the state never leaves device memory.
inline double state_bandwidth_per_device(const ClusterConfig& c, const StrategyOptions& s, AitKind kind) {
  const double world = static_cast<double>(c.world_size());
  const double inf = std::numeric_limits<double>::infinity();
  auto tier_bw = [&](TierKind t) {
    return t == TierKind::Device ? inf : effective_param_bandwidth(c, t, true) / world;
  };
  switch (kind) {
    case AitKind::ParamGrad: {
      const TierKind t = param_tier(s);
      if (t == TierKind::Device) return world > 1 ? c.device_device_bw : inf;
      return tier_bw(t);
    }
    case AitKind::OptimizerStates: return tier_bw(optimizer_tier(s));
    case AitKind::ActivationCkpt:
      // checkpoints go to host memory only under the infinity strategies
      return (s.strategy == Strategy::ZeroInfCpu || s.strategy == Strategy::ZeroInfNvme) ? tier_bw(TierKind::Host)
                                                                                        : inf;
  }
  return inf;
}

struct FeasibilityReport {
  StrategyOptions strategy;
  bool fits = false;
  std::array<TierDemand, 3> tiers{};
  std::string binding_constraint;
  bool working_memory_ok = false;
  bool act_ckpt_fits_host = false;  ///< informational, not part of `fits`
  double predicted_efficiency = 0.0;
};

namespace detail {

inline FeasibilityReport assess(const ClusterConfig& c, const StrategyOptions& s, double params, double hd,
                                const TemplateShape& t, std::int64_t tiles, const ModelConfig* cfg) {
  FeasibilityReport r;
  r.strategy = s;
  const double wm = working_memory_bytes(hd, t, tiles);
  r.working_memory_ok = wm <= c.device_mem_bytes;
  r.tiers = tier_demands(c, s, params, wm);
  r.fits = r.working_memory_ok;
  double worst = -1.0;
  for (const auto& d : r.tiers) {
    if (d.demand > d.capacity) r.fits = false;
    const double ratio = d.demand / d.capacity;
    if (ratio > worst) {
      worst = ratio;
      r.binding_constraint = std::string(tier_name(d.tier));
    }
  }
  if (!r.working_memory_ok) r.binding_constraint = "working_memory";
  if (cfg) {
    const double per_node_ckpt =
        static_cast<double>(activation_checkpoint_bytes(*cfg)) * static_cast<double>(c.devices_per_node);
    r.act_ckpt_fits_host = per_node_ckpt + r.tiers[1].demand <= c.host_mem_bytes_per_node;
    double eff = 1.0;
    for (AitKind k : {AitKind::ParamGrad, AitKind::OptimizerStates, AitKind::ActivationCkpt}) {
      eff = std::min(eff, efficiency(ait(k, *cfg), state_bandwidth_per_device(c, s, k), c.peak_tp_per_device));
    }
    r.predicted_efficiency = eff;
  }
  return r;
}

}  // namespace detail

inline FeasibilityReport feasibility(const ModelConfig& cfg, const ClusterConfig& c, const StrategyOptions& s,
                                     std::int64_t tiles = 1) {
  cfg.validate();
  c.validate();
  if (tiles < 1) throw DomainError("feasibility: tiling factor must be >= 1");
  return detail::assess(c, s, static_cast<double>(param_count(cfg)), static_cast<double>(cfg.hd),
                        TemplateShape::of(cfg), tiles, &cfg);
}

inline FeasibilityReport feasibility(const ModelConfig& cfg, const ClusterConfig& c, Strategy s,
                                     std::int64_t tiles = 1) {
  return feasibility(cfg, c, StrategyOptions{s}, tiles);
}

/// Largest parameter count that fits, found by bisection over the count with the
/// hidden size implied by `params = 12 nl hd^2`. Returns 0 when nothing fits.
inline std::uint64_t max_model_params(const ClusterConfig& c, const StrategyOptions& s,
                                      const TemplateShape& t = {}) {
  c.validate();
  auto fits = [&](std::uint64_t params) {
    const double p = static_cast<double>(params);
    const double hd = std::sqrt(p / (12.0 * static_cast<double>(t.nl)));
    return detail::assess(c, s, p, hd, t, 1, nullptr).fits;
  };
  if (!fits(1)) return 0;
  std::uint64_t lo = 1;
  std::uint64_t hi = 1;
  while (fits(hi)) {
    lo = hi;
    if (hi > (std::uint64_t{1} << 62)) return hi;
    hi *= 2;
  }
  // invariant: fits(lo) && !fits(hi)
  for (int i = 0; i < 64 && hi - lo > 1; ++i) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    (fits(mid) ? lo : hi) = mid;
  }
  return lo;
}

inline std::uint64_t max_model_params(const ClusterConfig& c, Strategy s, const TemplateShape& t = {}) {
  return max_model_params(c, StrategyOptions{s}, t);
}

/// Reports for every strategy, best first: fitting strategies, then higher predicted
/// efficiency, then faster slowest tier, then table order.
inline std::vector<FeasibilityReport> recommend(const ModelConfig& cfg, const ClusterConfig& c,
                                                TierKind nvme_param_tier = TierKind::Nvme) {
  std::vector<FeasibilityReport> out;
  for (Strategy s : kAllStrategies) out.push_back(feasibility(cfg, c, StrategyOptions{s, nvme_param_tier}));
  std::stable_sort(out.begin(), out.end(), [](const FeasibilityReport& a, const FeasibilityReport& b) {
    if (a.fits != b.fits) return a.fits;
    if (a.predicted_efficiency != b.predicted_efficiency) return a.predicted_efficiency > b.predicted_efficiency;
    const auto ta = slowest_tier(a.strategy), tb = slowest_tier(b.strategy);
    if (ta != tb) return ta < tb;
    return a.strategy.strategy < b.strategy.strategy;
  });
  return out;
}

struct FutureHardwareRow {
  double multiplier = 1.0;
  double peak_per_device = 0.0;
  double slow_mem_bw_per_device = 0.0;
  double slow_mem_bw_aggregate = 0.0;
  double device_device_bw = 0.0;
};

/// Reference workloads for the future-hardware table: optimizer traffic is sized for
/// batch 2 at 90% efficiency, parameter traffic for batch 1 at 50%.
struct FutureHardwareRefs {
  ModelConfig opt_ref{1, 8192, 64, 1024, 2.0, 1};
  double opt_target_eff = 0.9;
  ModelConfig param_ref{1, 8192, 64, 1024, 1.0, 1};
  double param_target_eff = 0.5;
};

inline std::vector<FutureHardwareRow> future_hardware_table(const ClusterConfig& c,
                                                            const std::vector<double>& multipliers,
                                                            const FutureHardwareRefs& refs = {}) {
  c.validate();
  const double world = static_cast<double>(c.world_size());
  std::vector<FutureHardwareRow> rows;
  for (double k : multipliers) {
    if (!(k > 0.0)) throw DomainError("future_hardware_table: multipliers must be > 0");
    FutureHardwareRow r;
    r.multiplier = k;
    r.peak_per_device = k * c.peak_tp_per_device;
    const double aggregate =
        required_bandwidth(ait(AitKind::OptimizerStates, refs.opt_ref), r.peak_per_device, refs.opt_target_eff);
    r.slow_mem_bw_per_device = aggregate / world;
    r.slow_mem_bw_aggregate = r.slow_mem_bw_per_device * world;
    r.device_device_bw =
        required_bandwidth(ait(AitKind::ParamGrad, refs.param_ref), r.peak_per_device, refs.param_target_eff);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace infinisim

#pragma once

// Operator-sequence tracing, nc/cg/gg prefetch planning and a deterministic
// list-scheduling simulator over four FIFO resource lanes.
//
// Stages of one operator:
//   nc  NVMe -> host          (nvme lane)
//   cg  host -> device        (pcie lane)
//   gg  device allgather      (fabric lane)
//   compute                   (compute lane)
//   reduce_scatter of grads   (fabric lane, backward only)
//   grad_offload              (pcie lane, backward only)
//   act_offload               (pcie lane, optional checkpoint offload)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "infinisim/error.hpp"
#include "infinisim/memory_model.hpp"
#include "infinisim/placement_planner.hpp"

namespace infinisim {

enum class Stage { Nc = 0, Cg, Gg, Compute, ReduceScatter, GradOffload, ActOffload };
enum class Lane { Nvme = 0, Pcie, Fabric, Compute };

inline constexpr std::size_t kStageCount = 7;
inline constexpr std::size_t kLaneCount = 4;

constexpr std::string_view stage_name(Stage s) noexcept {
  switch (s) {
    case Stage::Nc: return "nc";
    case Stage::Cg: return "cg";
    case Stage::Gg: return "gg";
    case Stage::Compute: return "compute";
    case Stage::ReduceScatter: return "reduce_scatter";
    case Stage::GradOffload: return "grad_offload";
    case Stage::ActOffload: return "act_offload";
  }
  return "?";
}

constexpr std::string_view lane_name(Lane l) noexcept {
  switch (l) {
    case Lane::Nvme: return "nvme";
    case Lane::Pcie: return "pcie";
    case Lane::Fabric: return "fabric";
    case Lane::Compute: return "compute";
  }
  return "?";
}

constexpr Lane lane_of(Stage s) noexcept {
  switch (s) {
    case Stage::Nc: return Lane::Nvme;
    case Stage::Cg:
    case Stage::GradOffload:
    case Stage::ActOffload: return Lane::Pcie;
    case Stage::Gg:
    case Stage::ReduceScatter: return Lane::Fabric;
    case Stage::Compute: return Lane::Compute;
  }
  return Lane::Compute;
}

enum class Direction { Forward, Backward };

struct Operator {
  int id = 0;
  std::string param_key;
  double param_bytes = 0.0;
  double compute_flops = 0.0;
};

struct OperatorSequence {
  Direction direction = Direction::Forward;
  std::vector<Operator> ops;

  std::size_t size() const noexcept { return ops.size(); }
};

/// One traced layer: the parameter it reads and its forward cost.
struct LayerCost {
  std::string param_key;
  double param_bytes = 0.0;
  double forward_flops = 0.0;
};

struct Trace {
  OperatorSequence forward;
  OperatorSequence backward;
};

/// Forward order as given; backward reverses it with twice the forward flops.
/// Backward ids restart at 0 so they stay strictly increasing in execution order;
/// `param_key` identifies the layer.
inline Trace trace_schedule(const std::vector<LayerCost>& layers) {
  if (layers.empty()) throw DomainError("trace_schedule: model has no layers");
  Trace t;
  t.forward.direction = Direction::Forward;
  t.backward.direction = Direction::Backward;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (!(l.param_bytes > 0.0) || !(l.forward_flops > 0.0)) {
      throw DomainError("trace_schedule: layer " + std::to_string(i) + " needs positive bytes and flops");
    }
    t.forward.ops.push_back({static_cast<int>(i), l.param_key, l.param_bytes, l.forward_flops});
  }
  for (std::size_t i = layers.size(); i-- > 0;) {
    const auto& l = layers[i];
    t.backward.ops.push_back({static_cast<int>(t.backward.ops.size()), l.param_key, l.param_bytes, 2.0 * l.forward_flops});
  }
  return t;
}

/// One layer per transformer block: 12 hd^2 fp16 parameters and 2 * tokens * params flops.
inline std::vector<LayerCost> transformer_layers(const ModelConfig& cfg) {
  cfg.validate();
  const double params = 12.0 * static_cast<double>(cfg.hd) * static_cast<double>(cfg.hd);
  const double flops = 2.0 * cfg.bsz * static_cast<double>(cfg.seq) * params;
  std::vector<LayerCost> out;
  for (std::int64_t i = 0; i < cfg.nl; ++i) out.push_back({"block" + std::to_string(i), 2.0 * params, flops});
  return out;
}

struct PrefetchDepths {
  int nc = 3;
  int cg = 2;
  int gg = 1;

  void validate() const {
    if (!(nc >= cg && cg >= gg && gg >= 1)) throw DomainError("prefetch depths must satisfy nc >= cg >= gg >= 1");
  }
};

struct Issue {
  Stage stage;
  int op;
};

/// Fetch issue schedule: `eager` at time zero, then `at_start[i]` when op i begins computing.
struct PrefetchPlan {
  PrefetchDepths depths;
  int ops = 0;
  std::vector<Issue> eager;
  std::vector<std::vector<Issue>> at_start;
};

inline PrefetchPlan plan_prefetch(int ops, PrefetchDepths depths = {}) {
  depths.validate();
  if (ops < 1) throw DomainError("plan_prefetch: empty operator sequence");
  PrefetchPlan p;
  p.depths = depths;
  p.ops = ops;
  for (int j = 0; j < std::min(depths.nc, ops); ++j) {
    p.eager.push_back({Stage::Nc, j});
    if (j < depths.cg) p.eager.push_back({Stage::Cg, j});
    if (j < depths.gg) p.eager.push_back({Stage::Gg, j});
  }
  p.at_start.resize(static_cast<std::size_t>(ops));
  for (int i = 0; i < ops; ++i) {
    auto& v = p.at_start[static_cast<std::size_t>(i)];
    if (i + depths.nc < ops) v.push_back({Stage::Nc, i + depths.nc});
    if (i + depths.cg < ops) v.push_back({Stage::Cg, i + depths.cg});
    if (i + depths.gg < ops) v.push_back({Stage::Gg, i + depths.gg});
  }
  return p;
}

inline PrefetchPlan plan_prefetch(const OperatorSequence& seq, PrefetchDepths depths = {}) {
  return plan_prefetch(static_cast<int>(seq.size()), depths);
}

/// Seconds spent in each stage of one operator.
struct StageCosts {
  std::array<double, kStageCount> seconds{};

  double& operator[](Stage s) { return seconds[static_cast<std::size_t>(s)]; }
  double operator[](Stage s) const { return seconds[static_cast<std::size_t>(s)]; }
};

struct CostOptions {
  bool act_offload = false;
  double act_ckpt_bytes_per_op = 0.0;
};

/// Per-lane costs for fetching one operator's parameters from `source` and running it.
inline StageCosts stage_costs(const ClusterConfig& c, TierKind source, const Operator& op, CostOptions opt = {}) {
  c.validate();
  const double world = static_cast<double>(c.world_size());
  const double shard = op.param_bytes / world;
  const double nvme_share = c.nvme_bw_per_node / static_cast<double>(c.devices_per_node);
  const double pcie_share =
      std::min(c.pcie_bw_per_device, c.host_mem_bw_per_node / static_cast<double>(c.devices_per_node));
  StageCosts s;
  s[Stage::Nc] = source == TierKind::Nvme ? shard / nvme_share : 0.0;
  s[Stage::Cg] = source != TierKind::Device ? shard / pcie_share : 0.0;
  s[Stage::Gg] = world > 1 ? op.param_bytes / c.device_device_bw : 0.0;
  s[Stage::Compute] = op.compute_flops / c.peak_tp_per_device;
  s[Stage::ReduceScatter] = s[Stage::Gg];
  s[Stage::GradOffload] = source != TierKind::Device ? shard / pcie_share : 0.0;
  s[Stage::ActOffload] = opt.act_offload ? opt.act_ckpt_bytes_per_op / pcie_share : 0.0;
  return s;
}

inline std::vector<StageCosts> stage_costs(const ClusterConfig& c, TierKind source, const OperatorSequence& seq,
                                           CostOptions opt = {}) {
  std::vector<StageCosts> out;
  for (const auto& op : seq.ops) out.push_back(stage_costs(c, source, op, opt));
  return out;
}

struct TimelineEvent {
  int op = 0;
  Stage stage = Stage::Compute;
  Lane lane = Lane::Compute;
  double start = 0.0;
  double end = 0.0;
};

struct Timeline {
  std::vector<TimelineEvent> events;
  double total_time = 0.0;
  double serial_time = 0.0;  ///< sum of every stage cost

  double speedup() const { return total_time > 0.0 ? serial_time / total_time : 1.0; }

  double lane_busy(Lane l) const {
    double s = 0.0;
    for (const auto& e : events) {
      if (e.lane == l) s += e.end - e.start;
    }
    return s;
  }
};

struct SimOptions {
  bool overlap = true;
  /// Upper bound on parameter bytes fetched but not yet consumed; nc issue is
  /// delayed until enough earlier operators finish. Infinite by default.
  double prefetch_budget_bytes = std::numeric_limits<double>::infinity();
};

namespace detail {

// Issue points in processing order: eager < start(0) < end(0) < start(1) < ...
inline int start_point(int op) { return 2 * op + 1; }
inline int end_point(int op) { return 2 * op + 2; }

struct Pending {
  int point;
  int sub;  // order within a point
  int seq;  // tie-break: insertion order
  Stage stage;
  int op;
};

inline Timeline run_schedule(const OperatorSequence& seq, const PrefetchPlan& plan, const std::vector<StageCosts>& costs,
                             const SimOptions& opt, bool backward) {
  const int n = static_cast<int>(seq.size());
  if (plan.ops != n || static_cast<int>(costs.size()) != n) {
    throw DomainError("simulate: plan, costs and operator sequence disagree in length");
  }
  for (const auto& c : costs) {
    for (double v : c.seconds) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("simulate: stage costs must be finite and >= 0");
    }
  }

  // Operator m_j whose completion frees enough budget for op j's fetch (-1: none needed).
  std::vector<int> release_after(static_cast<std::size_t>(n), -1);
  if (std::isfinite(opt.prefetch_budget_bytes)) {
    for (int j = 0; j < n; ++j) {
      double sum = 0.0;
      int m = j;
      while (m >= 0 && sum + seq.ops[static_cast<std::size_t>(m)].param_bytes <= opt.prefetch_budget_bytes) {
        sum += seq.ops[static_cast<std::size_t>(m)].param_bytes;
        --m;
      }
      release_after[static_cast<std::size_t>(j)] = std::min(m, j - 1);
    }
  }

  std::vector<Pending> order;
  int counter = 0;
  auto add_fetch = [&](int planned_point, Stage s, int j) {
    const int m = release_after[static_cast<std::size_t>(j)];
    if (m >= 0 && end_point(m) > planned_point) {
      order.push_back({end_point(m), 3, counter++, s, j});
    } else {
      order.push_back({planned_point, 1, counter++, s, j});
    }
  };
  for (const auto& is : plan.eager) add_fetch(0, is.stage, is.op);
  for (int i = 0; i < n; ++i) {
    order.push_back({start_point(i), 0, counter++, Stage::Compute, i});
    for (const auto& is : plan.at_start[static_cast<std::size_t>(i)]) add_fetch(start_point(i), is.stage, is.op);
    if (backward) {
      order.push_back({end_point(i), 0, counter++, Stage::ReduceScatter, i});
      order.push_back({end_point(i), 1, counter++, Stage::GradOffload, i});
    }
    order.push_back({end_point(i), 2, counter++, Stage::ActOffload, i});
  }
  std::stable_sort(order.begin(), order.end(), [](const Pending& a, const Pending& b) {
    if (a.point != b.point) return a.point < b.point;
    if (a.sub != b.sub) return a.sub < b.sub;
    return a.seq < b.seq;
  });

  constexpr double kUnset = -1.0;
  std::vector<std::array<double, kStageCount>> end(static_cast<std::size_t>(n));
  for (auto& e : end) e.fill(kUnset);
  std::vector<double> compute_start(static_cast<std::size_t>(n), kUnset);
  std::array<double, kLaneCount> lane_free{};
  double serial_clock = 0.0;

  Timeline tl;
  for (const auto& c : costs) {
    for (double v : c.seconds) tl.serial_time += v;
  }
  if (!backward) {
    for (const auto& c : costs) tl.serial_time -= c[Stage::ReduceScatter] + c[Stage::GradOffload];
  }

  auto issue_time = [&](const Pending& p) -> double {
    if (p.point == 0) return 0.0;
    const int op = (p.point - 1) / 2;
    const bool is_start = (p.point % 2) == 1;
    if (is_start) return compute_start[static_cast<std::size_t>(op)];
    return end[static_cast<std::size_t>(op)][static_cast<std::size_t>(Stage::Compute)];
  };

  auto dep_ready = [&](Stage s, int op) -> double {
    const auto& e = end[static_cast<std::size_t>(op)];
    auto need = [&](Stage d) {
      const double v = e[static_cast<std::size_t>(d)];
      if (v == kUnset) throw Error("simulate: internal dependency order violated");
      return v;
    };
    switch (s) {
      case Stage::Nc: return 0.0;
      case Stage::Cg: return need(Stage::Nc);
      case Stage::Gg: return need(Stage::Cg);
      case Stage::Compute: return op > 0 ? std::max(need(Stage::Gg), end[static_cast<std::size_t>(op - 1)][3]) : need(Stage::Gg);
      case Stage::ReduceScatter: return need(Stage::Compute);
      case Stage::GradOffload: return need(Stage::ReduceScatter);
      case Stage::ActOffload: return need(Stage::Compute);
    }
    return 0.0;
  };

  for (const auto& p : order) {
    const double cost = costs[static_cast<std::size_t>(p.op)][p.stage];
    const Lane lane = lane_of(p.stage);
    double start;
    if (opt.overlap) {
      start = std::max(issue_time(p), dep_ready(p.stage, p.op));
      if (cost > 0.0 || p.stage == Stage::Compute) start = std::max(start, lane_free[static_cast<std::size_t>(lane)]);
    } else {
      (void)dep_ready(p.stage, p.op);
      start = serial_clock;
    }
    const double finish = start + cost;
    end[static_cast<std::size_t>(p.op)][static_cast<std::size_t>(p.stage)] = finish;
    if (p.stage == Stage::Compute) compute_start[static_cast<std::size_t>(p.op)] = start;
    if (cost > 0.0 || p.stage == Stage::Compute) {
      lane_free[static_cast<std::size_t>(lane)] = finish;
      serial_clock = finish;
      tl.events.push_back({seq.ops[static_cast<std::size_t>(p.op)].id, p.stage, lane, start, finish});
    }
    tl.total_time = std::max(tl.total_time, finish);
  }
  return tl;
}

}  // namespace detail

/// Forward pass schedule. With overlap off every stage runs back to back.
inline Timeline simulate(const OperatorSequence& seq, const PrefetchPlan& plan, const std::vector<StageCosts>& costs,
                         SimOptions opt = {}) {
  return detail::run_schedule(seq, plan, costs, opt, false);
}

/// Backward pass schedule: gradients of op i are reduce-scattered and offloaded while
/// later operators compute.
inline Timeline simulate_backward(const OperatorSequence& seq, const PrefetchPlan& plan,
                                  const std::vector<StageCosts>& costs, SimOptions opt = {}) {
  return detail::run_schedule(seq, plan, costs, opt, true);
}

/// Empty string when the timeline is a valid schedule, otherwise the first violation.
inline std::string verify_timeline(const Timeline& tl) {
  std::array<std::vector<const TimelineEvent*>, kLaneCount> lanes;
  for (const auto& e : tl.events) {
    if (e.lane != lane_of(e.stage)) return "stage " + std::string(stage_name(e.stage)) + " on wrong lane";
    if (e.end < e.start) return "event ends before it starts";
    lanes[static_cast<std::size_t>(e.lane)].push_back(&e);
  }
  constexpr double eps = 1e-12;
  for (auto& lane : lanes) {
    std::sort(lane.begin(), lane.end(),
              [](auto* a, auto* b) { return a->start != b->start ? a->start < b->start : a->end < b->end; });
    for (std::size_t i = 1; i < lane.size(); ++i) {
      if (lane[i]->start + eps * std::max(1.0, std::abs(lane[i]->start)) < lane[i - 1]->end) {
        return "overlap on lane " + std::string(lane_name(lane[i]->lane)) + " at op " + std::to_string(lane[i]->op);
      }
    }
  }
  // per-op dependency chains, skipping stages absent from the timeline
  std::vector<std::array<const TimelineEvent*, kStageCount>> by_op;
  for (const auto& e : tl.events) {
    if (e.op < 0) return "negative op id";
    if (static_cast<std::size_t>(e.op) >= by_op.size()) by_op.resize(static_cast<std::size_t>(e.op) + 1, {});
    by_op[static_cast<std::size_t>(e.op)][static_cast<std::size_t>(e.stage)] = &e;
  }
  const std::array<Stage, 4> fetch = {Stage::Nc, Stage::Cg, Stage::Gg, Stage::Compute};
  const std::array<Stage, 3> grads = {Stage::Compute, Stage::ReduceScatter, Stage::GradOffload};
  auto check_chain = [&](const auto& st, const auto& chain, int op) -> std::string {
    const TimelineEvent* prev = nullptr;
    for (Stage s : chain) {
      const auto* cur = st[static_cast<std::size_t>(s)];
      if (!cur) continue;
      if (prev && cur->start + eps * std::max(1.0, std::abs(cur->start)) < prev->end) {
        return "op " + std::to_string(op) + ": " + std::string(stage_name(s)) + " starts before " +
               std::string(stage_name(prev->stage)) + " ends";
      }
      prev = cur;
    }
    return {};
  };
  for (std::size_t op = 0; op < by_op.size(); ++op) {
    if (auto msg = check_chain(by_op[op], fetch, static_cast<int>(op)); !msg.empty()) return msg;
    if (auto msg = check_chain(by_op[op], grads, static_cast<int>(op)); !msg.empty()) return msg;
  }
  return {};
}

inline void write_timeline_csv(std::ostream& os, const Timeline& tl) {
  os << "op,stage,lane,start_s,end_s\n";
  char buf[128];
  for (const auto& e : tl.events) {
    std::snprintf(buf, sizeof buf, "%d,%s,%s,%.12g,%.12g\n", e.op, std::string(stage_name(e.stage)).c_str(),
                  std::string(lane_name(e.lane)).c_str(), e.start, e.end);
    os << buf;
  }
}

inline void write_timeline_summary(std::ostream& os, const Timeline& tl) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "total_s,serial_s,speedup\n%.12g,%.12g,%.6f\n", tl.total_time, tl.serial_time,
                tl.speedup());
  os << buf;
}

}  // namespace infinisim

#pragma once

// Command-line surface: plan, sweep, simulate and train. `run_cli` takes the
// arguments after the program name and returns the process exit code, so the
// whole surface can be driven in-process.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "infinisim/efficiency_model.hpp"
#include "infinisim/error.hpp"
#include "infinisim/flat_config.hpp"
#include "infinisim/memory_model.hpp"
#include "infinisim/overlap_engine.hpp"
#include "infinisim/placement_planner.hpp"
#include "infinisim/tier_store.hpp"
#include "infinisim/train_harness.hpp"

namespace infinisim::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kInfeasible = 2, kMismatch = 3, kStorage = 4 };

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string num(double v) { return fmt("%.12g", v); }

/// Writes to `path`, or to `fallback` when path is empty.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : os_(&fallback) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
      if (!*file_) throw ConfigError("cannot open '" + path + "' for writing");
      os_ = file_.get();
    }
  }
  std::ostream& operator*() { return *os_; }
  bool is_file() const { return file_ != nullptr; }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* os_;
};

inline PrefetchDepths parse_depths(const std::string& s) {
  std::vector<int> v;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      v.push_back(static_cast<int>(parse_config_number(part)));
    } catch (const DomainError&) {
      throw ConfigError("--depths expects three integers like 3,2,1");
    }
  }
  if (v.size() != 3) throw ConfigError("--depths expects three integers like 3,2,1");
  PrefetchDepths d{v[0], v[1], v[2]};
  try {
    d.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return d;
}

inline TierKind parse_tier(const std::string& s) {
  if (s == "device") return TierKind::Device;
  if (s == "host") return TierKind::Host;
  if (s == "nvme") return TierKind::Nvme;
  throw ConfigError("unknown tier '" + s + "' (device|host|nvme)");
}

}  // namespace detail

struct PlanArgs {
  std::string model;
  std::string cluster;
  std::string strategy;
  std::string csv;
  std::int64_t tiles = 1;
};

inline int cmd_plan(const PlanArgs& a, std::ostream& out) {
  const ModelConfig cfg = model_config_from(FlatConfig::load(a.model));
  const ClusterConfig cluster = a.cluster.empty() ? ClusterConfig{} : cluster_config_from(FlatConfig::load(a.cluster));
  const MemoryReport mem = memory_report(cfg);
  out << "model: nl=" << cfg.nl << " hd=" << cfg.hd << " heads=" << cfg.attn_heads << " seq=" << cfg.seq
      << " bsz=" << detail::num(cfg.bsz) << " ci=" << cfg.ci << "\n";
  out << "cluster: " << cluster.nodes << " node(s) x " << cluster.devices_per_node << " devices\n";
  out << "parameters:           " << mem.params << "\n";
  out << "model states:         " << format_bytes(static_cast<double>(mem.model_state_bytes)) << "\n";
  out << "activation ckpt:      " << format_bytes(static_cast<double>(mem.act_ckpt_bytes)) << "\n";
  out << "full activations:     " << format_bytes(static_cast<double>(mem.full_activation_bytes)) << "\n";
  out << "model-state working:  " << format_bytes(static_cast<double>(mem.mswm_bytes)) << "\n";
  out << "activation working:   " << format_bytes(static_cast<double>(mem.awm_bytes)) << "\n\n";

  std::vector<FeasibilityReport> reports;
  if (!a.strategy.empty()) {
    Strategy s;
    try {
      s = parse_strategy(a.strategy);
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    reports.push_back(feasibility(cfg, cluster, StrategyOptions{s}, a.tiles));
  } else {
    for (Strategy s : kAllStrategies) reports.push_back(feasibility(cfg, cluster, StrategyOptions{s}, a.tiles));
  }

  char line[256];
  std::snprintf(line, sizeof line, "%-14s %-5s %-21s %-21s %-21s %-15s %s\n", "strategy", "fits", "device (demand/cap)",
                "host (demand/cap)", "nvme (demand/cap)", "binding", "efficiency");
  out << line;
  for (const auto& r : reports) {
    std::string cells[3];
    for (std::size_t t = 0; t < 3; ++t) {
      cells[t] = format_bytes(r.tiers[t].demand) + "/" + format_bytes(r.tiers[t].capacity);
    }
    std::snprintf(line, sizeof line, "%-14s %-5s %-21s %-21s %-21s %-15s %.3f\n",
                  std::string(strategy_name(r.strategy.strategy)).c_str(), r.fits ? "true" : "false", cells[0].c_str(),
                  cells[1].c_str(), cells[2].c_str(), r.binding_constraint.c_str(), r.predicted_efficiency);
    out << line;
  }
  bool any = false;
  for (const auto& r : reports) any = any || r.fits;
  if (a.strategy.empty()) {
    const auto ranked = recommend(cfg, cluster);
    out << "\nrecommendation: "
        << (ranked.front().fits ? std::string(strategy_name(ranked.front().strategy.strategy)) : "none fits") << "\n";
  }

  if (!a.csv.empty()) {
    detail::Sink csv(a.csv, out);
    *csv << "strategy,fits,device_demand,device_capacity,host_demand,host_capacity,nvme_demand,nvme_capacity,"
            "binding,predicted_efficiency\n";
    for (const auto& r : reports) {
      *csv << strategy_name(r.strategy.strategy) << ',' << (r.fits ? "true" : "false");
      for (const auto& t : r.tiers) *csv << ',' << detail::num(t.demand) << ',' << detail::num(t.capacity);
      *csv << ',' << r.binding_constraint << ',' << detail::num(r.predicted_efficiency) << '\n';
    }
  }
  return any ? kOk : kInfeasible;
}

struct SweepArgs {
  std::string kind = "param";
  double bw_min = 1e9;
  double bw_max = 1e13;
  int points = 41;
  double peak = kDefaultPeakFlops;
  std::string model;
  std::int64_t hd = 8192;
  std::int64_t seq = 1024;
  double bsz = 1.0;
  std::int64_t ci = 1;
  std::optional<double> target_eff;
  std::string out;
};

inline AitKind parse_ait_kind(const std::string& s) {
  if (s == "param") return AitKind::ParamGrad;
  if (s == "opt") return AitKind::OptimizerStates;
  if (s == "act") return AitKind::ActivationCkpt;
  throw ConfigError("--kind must be param, opt or act");
}

inline int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  const AitKind kind = parse_ait_kind(a.kind);
  if (!(a.bw_min > 0.0) || !(a.bw_min < a.bw_max)) throw ConfigError("need 0 < --bw-min < --bw-max");
  if (a.points < 2) throw ConfigError("--points must be >= 2");
  if (!(a.peak > 0.0)) throw ConfigError("--peak must be > 0");
  ModelConfig cfg{1, a.hd, 1, a.seq, a.bsz, a.ci};
  if (!a.model.empty()) cfg = model_config_from(FlatConfig::load(a.model));
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  const double ai = ait(kind, cfg);
  detail::Sink sink(a.out, out);
  *sink << "ait,bw_bytes_per_s,peak_flops,efficiency\n";
  for (double bw : log_grid(a.bw_min, a.bw_max, a.points)) {
    *sink << detail::num(ai) << ',' << detail::num(bw) << ',' << detail::num(a.peak) << ','
          << detail::num(efficiency(ai, bw, a.peak)) << '\n';
  }
  if (a.target_eff) {
    if (!(*a.target_eff > 0.0 && *a.target_eff < 1.0)) throw ConfigError("--target-eff must be in (0, 1)");
    std::ostream& note = sink.is_file() ? out : err;
    note << "required_bw_at_eff " << detail::num(*a.target_eff) << " = "
         << detail::fmt("%.3g", required_bandwidth(ai, a.peak, *a.target_eff)) << " B/s\n";
  }
  return kOk;
}

struct SimulateArgs {
  std::string model;
  std::string cluster;
  std::string depths = "3,2,1";
  bool no_overlap = false;
  bool backward = false;
  std::string tier = "nvme";
  int synthetic = 0;  ///< > 0: that many ops with unit cost on every active lane
  std::string prefetch_budget;  ///< bytes; empty means unlimited
  std::string out;
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  const PrefetchDepths depths = detail::parse_depths(a.depths);
  const TierKind tier = detail::parse_tier(a.tier);
  const ClusterConfig cluster = a.cluster.empty() ? ClusterConfig{} : cluster_config_from(FlatConfig::load(a.cluster));
  Trace trace;
  std::vector<StageCosts> costs;
  if (a.synthetic > 0) {
    std::vector<LayerCost> layers;
    for (int i = 0; i < a.synthetic; ++i) layers.push_back({"op" + std::to_string(i), 1.0, 1.0});
    trace = trace_schedule(layers);
    const auto& seq = a.backward ? trace.backward : trace.forward;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      StageCosts s;
      s[Stage::Nc] = tier == TierKind::Nvme ? 1.0 : 0.0;
      s[Stage::Cg] = tier != TierKind::Device ? 1.0 : 0.0;
      s[Stage::Gg] = 1.0;
      s[Stage::Compute] = 1.0;
      if (a.backward) {
        s[Stage::ReduceScatter] = 1.0;
        s[Stage::GradOffload] = tier != TierKind::Device ? 1.0 : 0.0;
      }
      costs.push_back(s);
    }
  } else {
    if (a.model.empty()) throw ConfigError("simulate needs --model or --synthetic N");
    const ModelConfig cfg = model_config_from(FlatConfig::load(a.model));
    trace = trace_schedule(transformer_layers(cfg));
    costs = stage_costs(cluster, tier, a.backward ? trace.backward : trace.forward);
  }
  const auto& seq = a.backward ? trace.backward : trace.forward;
  const PrefetchPlan plan = plan_prefetch(seq, depths);
  SimOptions opt;
  opt.overlap = !a.no_overlap;
  if (!a.prefetch_budget.empty()) {
    try {
      opt.prefetch_budget_bytes = parse_config_number(a.prefetch_budget);
    } catch (const DomainError& e) {
      throw ConfigError(std::string("--prefetch-budget: ") + e.what());
    }
    if (!(opt.prefetch_budget_bytes > 0.0)) throw ConfigError("--prefetch-budget must be > 0");
  }
  const Timeline tl = a.backward ? simulate_backward(seq, plan, costs, opt) : simulate(seq, plan, costs, opt);
  detail::Sink sink(a.out, out);
  write_timeline_csv(*sink, tl);
  if (sink.is_file()) {
    write_timeline_summary(out, tl);
  } else {
    out << '\n';
    write_timeline_summary(out, tl);
  }
  return kOk;
}

struct TrainArgs {
  std::string model;
  std::int64_t ranks = 1;
  std::string tier = "device";
  std::int64_t steps = 50;
  std::int64_t seed = 7;
  std::string baseline_digest;
  std::string nvme_root;
  std::string loss_csv;
  std::string digest_out;
  std::int64_t corrupt_shard_after = 0;  ///< fault injection: damage one shard file after this step
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const FlatConfig doc = FlatConfig::load(a.model);
  const ModelSpec spec = model_spec_from(doc);
  if (a.ranks < 1) throw ConfigError("--ranks must be >= 1");
  if (a.steps < 0) throw ConfigError("--steps must be >= 0");
  TrainConfig tc;
  tc.world = static_cast<std::size_t>(a.ranks);
  try {
    tc.placement = parse_placement(a.tier);
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  tc.steps = static_cast<std::size_t>(a.steps);
  tc.seed = static_cast<std::uint64_t>(a.seed);
  tc.samples = static_cast<std::size_t>(doc.get_int("run", "samples", 32));
  tc.step.micro_batches = static_cast<std::size_t>(doc.get_int("run", "micro_batches", 4));
  tc.step.chunk_elems = static_cast<std::size_t>(doc.get_int("run", "chunk_elems", 64));
  tc.hyper.lr = static_cast<float>(doc.get_number("run", "lr", tc.hyper.lr));
  tc.hyper.beta1 = static_cast<float>(doc.get_number("run", "beta1", tc.hyper.beta1));
  tc.hyper.beta2 = static_cast<float>(doc.get_number("run", "beta2", tc.hyper.beta2));
  tc.hyper.eps = static_cast<float>(doc.get_number("run", "eps", tc.hyper.eps));
  if (tc.step.micro_batches % tc.world != 0) {
    throw ConfigError("--ranks must divide micro_batches (" + std::to_string(tc.step.micro_batches) + ")");
  }
  if (a.corrupt_shard_after > 0 && tc.placement.opt_tier != TierKind::Nvme) {
    throw ConfigError("--corrupt-shard-after needs --tier nvme");
  }

  std::filesystem::path root = a.nvme_root;
  bool temp_root = false;
  if (root.empty()) root = resolve_nvme_root({});
  if (root.empty()) {
    root = std::filesystem::temp_directory_path() / ("infinisim-" + std::to_string(::getpid()));
    temp_root = true;
  }
  struct Cleanup {
    std::filesystem::path p;
    bool on;
    ~Cleanup() {
      std::error_code ec;
      if (on) std::filesystem::remove_all(p, ec);
    }
  } cleanup{root, temp_root};

  StoreOptions so;
  so.nvme_root = root;
  TierStore store(so);
  if (a.corrupt_shard_after > 0) {
    tc.after_step = [&](std::size_t step, PartitionedModel& m) {
      if (static_cast<std::int64_t>(step) != a.corrupt_shard_after) return;
      const auto path = store.shard_path(m.groups.front().master.shard_key(0));
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      if (!f) throw IoError("fault injection: cannot open " + path.string());
      f.seekp(0);
      f.write("XXXX", 4);
    };
  }

  const TrainResult res = run_training(spec, tc, store);
  {
    detail::Sink csv(a.loss_csv, out);
    *csv << "step,loss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i) *csv << i << ',' << detail::num(res.losses[i]) << '\n';
  }
  out << "digest " << res.final_digest << "\n";
  if (!a.digest_out.empty()) {
    std::ofstream f(a.digest_out, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + a.digest_out + "'");
    f << res.final_digest << "\n";
  }
  if (!a.baseline_digest.empty()) {
    std::ifstream f(a.baseline_digest);
    std::string expected;
    if (!f || !(f >> expected)) throw ConfigError("cannot read baseline digest '" + a.baseline_digest + "'");
    if (expected == "digest" && !(f >> expected)) throw ConfigError("baseline digest file is empty");
    if (expected != res.final_digest) {
      err << "digest mismatch: expected " << expected << ", got " << res.final_digest << "\n";
      return kMismatch;
    }
    out << "digest matches baseline\n";
  }
  return kOk;
}

namespace detail {
inline const CLI::Validator& suffixed_number() {
  static const CLI::Validator v(
      [](std::string& text) -> std::string {
        try {
          text = fmt("%.17g", parse_config_number(text));
        } catch (const DomainError& e) {
          return e.what();
        }
        return {};
      },
      "NUMBER");
  return v;
}
}  // namespace detail

/// Parses `args` (without the program name), runs the command, maps errors to exit codes.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"infinisim: memory, bandwidth and offload planning for large-model training"};
  app.require_subcommand(1);
  app.footer(
      "Units: sizes in bytes, bandwidths in bytes/s, throughput in flops/s. Numbers accept '_' separators and\n"
      "K/M/G/T suffixes (powers of 1000). Exit codes: 0 ok, 1 usage/config, 2 infeasible plan,\n"
      "3 digest mismatch, 4 storage I/O.");

  PlanArgs plan;
  auto* p = app.add_subcommand("plan", "memory report and per-strategy feasibility");
  p->add_option("--model", plan.model, "model config ([model] nl, hd, heads, seq, bsz, ci)")->required();
  p->add_option("--cluster", plan.cluster, "cluster config ([cluster] ...); default is one 16-device node");
  p->add_option("--strategy", plan.strategy, "report a single strategy (e.g. zero-inf-nvme)");
  p->add_option("--csv", plan.csv, "also write the feasibility table as CSV");
  p->add_option("--tiles", plan.tiles, "tiling factor for working memory")->check(CLI::PositiveNumber);

  SweepArgs sweep;
  std::string target;
  auto* s = app.add_subcommand("sweep", "efficiency vs bandwidth CSV (log-spaced bandwidth grid)");
  s->add_option("--kind", sweep.kind, "param | opt | act");
  s->add_option("--bw-min", sweep.bw_min, "lowest bandwidth, bytes/s")->transform(detail::suffixed_number());
  s->add_option("--bw-max", sweep.bw_max, "highest bandwidth, bytes/s")->transform(detail::suffixed_number());
  s->add_option("--points", sweep.points, "grid points (>= 2)");
  s->add_option("--peak", sweep.peak, "peak device throughput, flops/s")->transform(detail::suffixed_number());
  s->add_option("--model", sweep.model, "model config; overrides --hd/--seq/--bsz/--ci");
  s->add_option("--hd", sweep.hd, "hidden dimension");
  s->add_option("--seq", sweep.seq, "sequence length");
  s->add_option("--bsz", sweep.bsz, "per-device batch")->transform(detail::suffixed_number());
  s->add_option("--ci", sweep.ci, "blocks per activation checkpoint");
  s->add_option("--target-eff", target, "also print the bandwidth needed for this efficiency");
  s->add_option("--out", sweep.out, "CSV path (default stdout)");

  SimulateArgs sim;
  auto* m = app.add_subcommand("simulate", "overlap timeline for one pass");
  m->add_option("--model", sim.model, "transformer model config");
  m->add_option("--cluster", sim.cluster, "cluster config");
  m->add_option("--depths", sim.depths, "prefetch depths nc,cg,gg (default 3,2,1)");
  m->add_flag("--no-overlap", sim.no_overlap, "run every stage back to back");
  m->add_flag("--backward", sim.backward, "simulate the backward pass");
  m->add_option("--tier", sim.tier, "parameter source tier: nvme | host | device");
  m->add_option("--synthetic", sim.synthetic, "N operators with unit cost on every active lane");
  m->add_option("--prefetch-budget", sim.prefetch_budget,
                 "cap on fetched-but-unconsumed parameter bytes (default unlimited)");
  m->add_option("--out", sim.out, "timeline CSV path (default stdout)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "partitioned, offloaded training of a toy model");
  t->add_option("--model", train.model, "toy model config ([model] layers, layerN.in/out/act/tiles, tied)")->required();
  t->add_option("--ranks", train.ranks, "simulated data-parallel ranks");
  t->add_option("--tier", train.tier, "tier for all model states: device | host | nvme");
  t->add_option("--steps", train.steps, "training steps");
  t->add_option("--seed", train.seed, "seed for init and data");
  t->add_option("--baseline-digest", train.baseline_digest, "file with the expected digest; exit 3 on mismatch");
  t->add_option("--nvme-root", train.nvme_root, "directory for NVMe shards (else $INFINISIM_NVME_ROOT, else temp)");
  t->add_option("--loss-csv", train.loss_csv, "write step,loss CSV here (default stdout)");
  t->add_option("--digest-out", train.digest_out, "write the final digest to this file");
  t->add_option("--corrupt-shard-after", train.corrupt_shard_after, "fault injection: damage a shard after step K");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*p) return cmd_plan(plan, out);
    if (*s) {
      if (!target.empty()) sweep.target_eff = parse_config_number(target);
      return cmd_sweep(sweep, out, err);
    }
    if (*m) return cmd_simulate(sim, out);
    if (*t) return cmd_train(train, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "storage error: " << e.what() << "\n";
    return kStorage;
  } catch (const CapacityExceeded& e) {
    err << "storage error: " << e.what() << "\n";
    return kStorage;
  } catch (const KeyNotFound& e) {
    err << "storage error: " << e.what() << "\n";
    return kStorage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "storage error: " << e.what() << "\n";
    return kStorage;
  }
  return kUsage;
}

}  // namespace infinisim::cli

#include <gtest/gtest.h>

#include <map>
#include <random>

#include "infinisim/overlap_engine.hpp"
#include "overlap_oracle.hpp"

using namespace infinisim;
using namespace infinisim::testing;

namespace {

OperatorSequence uniform_seq(int n, Direction dir = Direction::Forward) {
  OperatorSequence s;
  s.direction = dir;
  for (int i = 0; i < n; ++i) s.ops.push_back({i, "p" + std::to_string(i), 1.0, 1.0});
  return s;
}

std::vector<StageCosts> balanced(int n, double c, bool backward = false) {
  std::vector<StageCosts> v(static_cast<std::size_t>(n));
  for (auto& s : v) {
    s[Stage::Nc] = s[Stage::Cg] = s[Stage::Gg] = s[Stage::Compute] = c;
    if (backward) s[Stage::ReduceScatter] = s[Stage::GradOffload] = c;
  }
  return v;
}

}  // namespace

TEST(Trace, ForwardAndReversedBackward) {
  const auto t = trace_schedule({{"a", 1, 1}, {"b", 2, 2}, {"c", 3, 3}});
  ASSERT_EQ(t.forward.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(t.forward.ops[i].id, i);
  EXPECT_EQ(t.backward.ops[0].param_key, "c");
  EXPECT_EQ(t.backward.ops[2].param_key, "a");
  EXPECT_EQ(t.backward.ops[0].compute_flops, 6.0);
  EXPECT_EQ(t.backward.direction, Direction::Backward);
  const auto tied = trace_schedule({{"w", 1, 1}, {"x", 1, 1}, {"w", 1, 1}});
  EXPECT_EQ(tied.forward.ops[0].param_key, tied.forward.ops[2].param_key);
  const auto again = trace_schedule({{"a", 1, 1}, {"b", 2, 2}, {"c", 3, 3}});
  EXPECT_EQ(again.forward.ops[1].param_key, t.forward.ops[1].param_key);
  EXPECT_THROW(trace_schedule({}), DomainError);
  EXPECT_THROW(trace_schedule({{"a", 0, 1}}), DomainError);
}

TEST(Prefetch, IssueSetsAndClipping) {
  const auto p = plan_prefetch(5);
  ASSERT_EQ(p.at_start[0].size(), 3u);
  EXPECT_EQ(p.at_start[0][0].stage, Stage::Nc);
  EXPECT_EQ(p.at_start[0][0].op, 3);
  EXPECT_EQ(p.at_start[0][1].op, 2);
  EXPECT_EQ(p.at_start[0][2].op, 1);
  EXPECT_TRUE(p.at_start[4].empty());
  EXPECT_EQ(p.eager.size(), 6u);  // nc 0..2, cg 0..1, gg 0
  const auto one = plan_prefetch(1);
  ASSERT_EQ(one.eager.size(), 3u);
  EXPECT_EQ(one.eager[0].stage, Stage::Nc);
  EXPECT_EQ(one.eager[1].stage, Stage::Cg);
  EXPECT_EQ(one.eager[2].stage, Stage::Gg);
  const auto jit = plan_prefetch(4, {1, 1, 1});
  EXPECT_EQ(jit.at_start[0].size(), 3u);
  for (const auto& is : jit.at_start[0]) EXPECT_EQ(is.op, 1);
  EXPECT_THROW(plan_prefetch(3, {1, 2, 1}), DomainError);
  EXPECT_THROW(plan_prefetch(3, {2, 2, 0}), DomainError);
  EXPECT_THROW(plan_prefetch(0), DomainError);
}

TEST(Prefetch, EveryOpFetchedOnceInDependencyOrder) {
  for (int n : {1, 2, 3, 4, 9}) {
    const auto p = plan_prefetch(n, {4, 2, 1});
    std::map<std::pair<int, int>, int> pos;
    int k = 0;
    for (const auto& is : p.eager) pos[{is.op, (int)is.stage}] = k++;
    for (const auto& v : p.at_start)
      for (const auto& is : v) pos[{is.op, (int)is.stage}] = k++;
    EXPECT_EQ(pos.size(), 3u * n);
    for (int j = 0; j < n; ++j) {
      EXPECT_LT((pos[{j, (int)Stage::Nc}]), (pos[{j, (int)Stage::Cg}]));
      EXPECT_LT((pos[{j, (int)Stage::Cg}]), (pos[{j, (int)Stage::Gg}]));
    }
  }
}

TEST(StageCostModel, LanesAndLinearity) {
  ClusterConfig c;
  Operator op{0, "w", 64.0 * 1024 * 1024 * 16, 1e12};
  const auto s = stage_costs(c, TierKind::Nvme, op);
  EXPECT_NEAR(s[Stage::Nc], 64.0 * 1024 * 1024 / (25e9 / 16), 1e-15);
  EXPECT_NEAR(s[Stage::Nc], 0.042, 0.002);
  EXPECT_DOUBLE_EQ(s[Stage::Cg], 64.0 * 1024 * 1024 / 3e9);
  EXPECT_DOUBLE_EQ(s[Stage::Gg], op.param_bytes / 300e9);
  EXPECT_DOUBLE_EQ(s[Stage::Compute], 1e12 / 70e12);
  EXPECT_EQ(stage_costs(c, TierKind::Host, op)[Stage::Nc], 0.0);
  const auto d = stage_costs(c, TierKind::Device, op);
  EXPECT_EQ(d[Stage::Nc], 0.0);
  EXPECT_EQ(d[Stage::Cg], 0.0);
  op.param_bytes *= 2;
  const auto s2 = stage_costs(c, TierKind::Nvme, op);
  for (Stage st : {Stage::Nc, Stage::Cg, Stage::Gg}) EXPECT_DOUBLE_EQ(s2[st], 2 * s[st]);
}

TEST(Simulate, MatchesTickOracleOnRandomIntegerCosts) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 9);
    const int nc = 1 + static_cast<int>(rng() % 4);
    const int cg = 1 + static_cast<int>(rng() % nc);
    const int gg = 1 + static_cast<int>(rng() % cg);
    const bool backward = trial % 2 == 1;
    std::vector<std::array<int, kStageCount>> ic(static_cast<std::size_t>(n));
    for (auto& a : ic) {
      for (auto& x : a) x = 1 + static_cast<int>(rng() % 5);
    }
    const auto plan = plan_prefetch(n, {nc, cg, gg});
    auto costs = to_costs(ic);
    for (auto& c : costs) c[Stage::ActOffload] = 0.0;
    int total = 0;
    const auto oracle = tick_oracle(plan, ic, backward, &total);
    const auto seq = uniform_seq(n);
    const auto tl = backward ? simulate_backward(seq, plan, costs) : simulate(seq, plan, costs);
    ASSERT_EQ(tl.total_time, total) << "trial " << trial;
    for (const auto& e : tl.events) {
      const auto& o = oracle.at({e.op, (int)e.stage});
      ASSERT_EQ(e.start, o.first) << "trial " << trial << " op " << e.op << " " << stage_name(e.stage);
      ASSERT_EQ(e.end, o.second);
    }
    EXPECT_EQ(verify_timeline(tl), "");
  }
}

TEST(Simulate, BalancedCostsFollowHandRecurrence) {
  for (int n = 1; n <= 12; ++n) {
    const auto seq = uniform_seq(n);
    const auto tl = simulate(seq, plan_prefetch(n), balanced(n, 1.0));
    EXPECT_DOUBLE_EQ(tl.total_time, n + 3.0) << n;
    EXPECT_DOUBLE_EQ(tl.serial_time, 4.0 * n);
  }
  const auto tl = simulate(uniform_seq(64), plan_prefetch(64), balanced(64, 0.25));
  EXPECT_GE(tl.speedup(), 3.5);
  EXPECT_LE(tl.speedup(), 4.0);
  EXPECT_NEAR(tl.speedup(), 4.0 * 64 / 67, 1e-12);
  // steady state: compute of consecutive ops one cost apart
  double prev = -1;
  for (const auto& e : tl.events) {
    if (e.stage != Stage::Compute) continue;
    if (prev >= 0 && e.op > 3) EXPECT_DOUBLE_EQ(e.start - prev, 0.25);
    prev = e.start;
  }
}

TEST(Simulate, BackwardBalancedSteadyStateIsMaxStageCost) {
  const int n = 40;
  auto costs = balanced(n, 1.0, true);
  const auto tl = simulate_backward(uniform_seq(n, Direction::Backward), plan_prefetch(n), costs);
  EXPECT_EQ(verify_timeline(tl), "");
  std::vector<double> starts;
  for (const auto& e : tl.events)
    if (e.stage == Stage::Compute) starts.push_back(e.start);
  ASSERT_EQ(starts.size(), static_cast<std::size_t>(n));
  // fabric carries gg and rs: two units per op in steady state
  for (std::size_t i = 10; i < starts.size(); ++i) EXPECT_DOUBLE_EQ(starts[i] - starts[i - 1], 2.0);
  EXPECT_LE(tl.total_time, tl.serial_time);
  EXPECT_GE(tl.total_time, lane_lower_bound(costs, true));
  // pcie carries cg and grad_offload, so halve those too to get one unit per lane per op
  for (auto& c : costs) {
    c[Stage::Gg] = c[Stage::ReduceScatter] = 0.5;
    c[Stage::Cg] = c[Stage::GradOffload] = 0.5;
  }
  const auto tl2 = simulate_backward(uniform_seq(n, Direction::Backward), plan_prefetch(n), costs);
  starts.clear();
  for (const auto& e : tl2.events)
    if (e.stage == Stage::Compute) starts.push_back(e.start);
  for (std::size_t i = 10; i < starts.size(); ++i) EXPECT_DOUBLE_EQ(starts[i] - starts[i - 1], 1.0);
}

TEST(Simulate, RandomCostVectorsRespectBounds) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 32);
    const bool backward = trial % 2 == 1;
    std::vector<StageCosts> costs(static_cast<std::size_t>(n));
    for (auto& c : costs) {
      for (auto& x : c.seconds) x = (rng() % 5 == 0) ? 0.0 : u(rng);
    }
    const auto seq = uniform_seq(n);
    const auto plan = plan_prefetch(n);
    const auto tl = backward ? simulate_backward(seq, plan, costs) : simulate(seq, plan, costs);
    SimOptions off;
    off.overlap = false;
    const auto serial = backward ? simulate_backward(seq, plan, costs, off) : simulate(seq, plan, costs, off);
    EXPECT_LE(tl.total_time, serial.total_time * (1 + 1e-12));
    EXPECT_NEAR(serial.total_time, tl.serial_time, 1e-9 * std::max(1.0, tl.serial_time));
    EXPECT_GE(tl.total_time * (1 + 1e-12), lane_lower_bound(costs, backward));
    ASSERT_EQ(verify_timeline(tl), "") << trial;
    ASSERT_EQ(verify_timeline(serial), "") << trial;
  }
}

TEST(Simulate, MonotoneInEachStageCost) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 10);
    std::vector<StageCosts> costs(static_cast<std::size_t>(n));
    for (auto& c : costs)
      for (auto& x : c.seconds) x = u(rng);
    const auto seq = uniform_seq(n);
    const auto plan = plan_prefetch(n);
    const double base = simulate_backward(seq, plan, costs).total_time;
    costs[rng() % n].seconds[rng() % kStageCount] += u(rng);
    EXPECT_GE(simulate_backward(seq, plan, costs).total_time, base);
  }
}

TEST(Simulate, DegenerateCosts) {
  const int n = 6;
  auto costs = balanced(n, 0.0);
  for (int i = 0; i < n; ++i) costs[i][Stage::Compute] = 1.0 + i;
  const auto tl = simulate(uniform_seq(n), plan_prefetch(n), costs);
  EXPECT_DOUBLE_EQ(tl.total_time, 21.0);
  EXPECT_EQ(tl.events.size(), static_cast<std::size_t>(n));
  const auto bw = simulate_backward(uniform_seq(n), plan_prefetch(n), costs);
  EXPECT_DOUBLE_EQ(bw.total_time, 21.0);
  SimOptions off;
  off.overlap = false;
  auto b = balanced(n, 1.0);
  const auto serial = simulate(uniform_seq(n), plan_prefetch(n), b, off);
  EXPECT_DOUBLE_EQ(serial.total_time, 4.0 * n);
  EXPECT_DOUBLE_EQ(serial.speedup(), 1.0);
  b[0][Stage::Cg] = -1;
  EXPECT_THROW(simulate(uniform_seq(n), plan_prefetch(n), b), DomainError);
  EXPECT_THROW(simulate(uniform_seq(n), plan_prefetch(n + 1), balanced(n, 1.0)), DomainError);
}

TEST(Simulate, DeviceTierLeavesNvmeAndPcieIdle) {
  ModelConfig m;
  m.nl = 8;
  m.hd = 1024;
  const auto t = trace_schedule(transformer_layers(m));
  ClusterConfig c;
  const auto tl = simulate(t.forward, plan_prefetch(t.forward), stage_costs(c, TierKind::Device, t.forward));
  EXPECT_EQ(tl.lane_busy(Lane::Nvme), 0.0);
  EXPECT_EQ(tl.lane_busy(Lane::Pcie), 0.0);
  EXPECT_GT(tl.lane_busy(Lane::Fabric), 0.0);
  EXPECT_EQ(verify_timeline(tl), "");
  c.nodes = 1;
  c.devices_per_node = 1;
  const auto single = simulate(t.forward, plan_prefetch(t.forward), stage_costs(c, TierKind::Device, t.forward));
  EXPECT_EQ(single.lane_busy(Lane::Fabric), 0.0);
}

TEST(Simulate, ActivationOffloadLoadsPcie) {
  ModelConfig m;
  m.nl = 4;
  m.hd = 2048;
  const auto t = trace_schedule(transformer_layers(m));
  ClusterConfig c;
  CostOptions co;
  co.act_offload = true;
  co.act_ckpt_bytes_per_op = 2.0 * m.bsz * m.seq * m.hd;
  const auto without = simulate(t.forward, plan_prefetch(t.forward), stage_costs(c, TierKind::Host, t.forward));
  const auto with = simulate(t.forward, plan_prefetch(t.forward), stage_costs(c, TierKind::Host, t.forward, co));
  EXPECT_GT(with.lane_busy(Lane::Pcie), without.lane_busy(Lane::Pcie));
  EXPECT_GE(with.total_time, without.total_time);
  EXPECT_EQ(verify_timeline(with), "");
}

TEST(Simulate, PrefetchBudgetDelaysFetches) {
  const int n = 10;
  const auto seq = uniform_seq(n);
  const auto costs = balanced(n, 1.0);
  const auto free_run = simulate(seq, plan_prefetch(n), costs);
  SimOptions tight;
  tight.prefetch_budget_bytes = 1.0;
  const auto limited = simulate(seq, plan_prefetch(n), costs, tight);
  EXPECT_EQ(verify_timeline(limited), "");
  EXPECT_GT(limited.total_time, free_run.total_time);
  std::map<std::pair<int, int>, const TimelineEvent*> by;
  for (const auto& e : limited.events) by[{e.op, (int)e.stage}] = &e;
  for (int j = 1; j < n; ++j) {
    EXPECT_GE((by[{j, (int)Stage::Nc}]->start), (by[{j - 1, (int)Stage::Compute}]->end));
  }
  SimOptions roomy;
  roomy.prefetch_budget_bytes = 100.0;
  EXPECT_DOUBLE_EQ(simulate(seq, plan_prefetch(n), costs, roomy).total_time, free_run.total_time);
}

TEST(Verify, DetectsViolations) {
  Timeline tl;
  tl.events.push_back({0, Stage::Nc, Lane::Nvme, 0, 2});
  tl.events.push_back({1, Stage::Nc, Lane::Nvme, 1, 3});
  EXPECT_NE(verify_timeline(tl), "");
  tl.events = {{0, Stage::Nc, Lane::Nvme, 0, 2}, {0, Stage::Cg, Lane::Pcie, 1, 3}};
  EXPECT_NE(verify_timeline(tl), "");
  tl.events = {{0, Stage::Nc, Lane::Pcie, 0, 2}};
  EXPECT_NE(verify_timeline(tl), "");
  tl.events = {{0, Stage::Compute, Lane::Compute, 0, 2}, {0, Stage::ReduceScatter, Lane::Fabric, 1, 3}};
  EXPECT_NE(verify_timeline(tl), "");
  tl.events = {{0, Stage::Nc, Lane::Nvme, 0, 2}, {0, Stage::Cg, Lane::Pcie, 2, 3}};
  EXPECT_EQ(verify_timeline(tl), "");
}

TEST(Output, CsvAndSummary) {
  const auto tl = simulate(uniform_seq(2), plan_prefetch(2), balanced(2, 1.0));
  std::ostringstream os, sum;
  write_timeline_csv(os, tl);
  write_timeline_summary(sum, tl);
  EXPECT_EQ(os.str().substr(0, 29), "op,stage,lane,start_s,end_s\n0");
  EXPECT_EQ(sum.str(), "total_s,serial_s,speedup\n5,8,1.600000\n");
}

// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "shardshift/comms.hpp"
#include "shardshift/kvcache.hpp"
#include "shardshift/simulator.hpp"
#include "shardshift/weights.hpp"
#include "oracles.hpp"
#include "sim_support.hpp"

using namespace shardshift;
using namespace testsim;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  std::string failures;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      failures += (failures.empty() ? "" : "; ") + what;
      pass = false;
    }
  }
};

using Criterion = std::function<void(Verdict&)>;

bool has_code(const std::function<void()>& fn, ErrorCode code) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

// ---- 1 --------------------------------------------------------------------------

void block_bytes(Verdict& v) {
  const auto spec = llama70b_preset();
  const std::uint64_t d = kv_elems_per_token(spec);
  int cases = 0;
  for (int b : {4, 16}) {
    const BlockGeometry g{b, d, spec.elem_bytes};
    const std::uint64_t m_block = static_cast<std::uint64_t>(b) * d * static_cast<std::uint64_t>(spec.elem_bytes);
    for (int p : {1, 2, 4, 8}) {
      const auto bp = static_cast<std::uint64_t>(adapt_block_size(p, b));
      v.require(bp == static_cast<std::uint64_t>(p) * b, "B(p) != p*B_base");
      v.require(d % static_cast<std::uint64_t>(p) == 0, "D not divisible by p");
      v.require(bp * (d / p) * spec.elem_bytes == m_block, "B(p)*(D/p)*P != M_block");
      v.require(g.block_bytes_at(p) == m_block, "block_bytes_at differs");
      ++cases;
    }
  }
  v.require(adapt_block_size(1, 4) == 4 && adapt_block_size(2, 4) == 8 && adapt_block_size(4, 4) == 16,
            "4/8/16 token example");
  v.detail << cases << " (p, B_base) cases exact; 4/8/16 example reproduced";
}

// ---- 2 --------------------------------------------------------------------------

void group_enumeration(Verdict& v) {
  const auto four = enumerate_tp_groups(4, std::vector<int>{2, 4});
  v.require(four == std::vector<RankTuple>{{0, 1}, {2, 3}, {0, 1, 2, 3}}, "N=4 groups");
  const auto eight = enumerate_tp_groups(8, std::vector<int>{2, 4, 8});
  v.require(eight.size() == 7, "N=8 yields " + std::to_string(eight.size()) + " groups");
  auto pool = GroupPool::build(four, 0.0);
  v.require(has_code([&] { pool.get(RankTuple{1, 2}); }, ErrorCode::UnknownGroup), "[1,2] not rejected");
  v.detail << "N=4 -> " << four.size() << " groups, N=8 -> " << eight.size() << " groups, [1,2] -> UnknownGroup";
}

// ---- 3 --------------------------------------------------------------------------

void tp_equivalence(Verdict& v) {
  double worst = 0;
  int instances = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    ModelSpec s;
    s.num_layers = 1 + static_cast<int>(rng() % 3);
    const int heads = 4 * (1 + static_cast<int>(rng() % 2));
    const int head_dim = 2 + static_cast<int>(rng() % 3);
    const auto store = WeightStore::load(s, seed, ToyDims{heads * head_dim, heads, head_dim, 4 * heads * head_dim});
    Matrix x(1 + static_cast<int>(rng() % 6), heads * head_dim);
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& e : x.data) e = u(rng);
    const auto dense = oracle::dense_forward(store, x);
    for (int m : {1, 2, 4}) {
      std::vector<const WeightStore*> stores(static_cast<std::size_t>(m), &store);
      RankTuple group;
      for (int r = 0; r < m; ++r) group.push_back(r);
      GroupHandle h(group);
      const auto out = tp_forward_toy(stores, group, x, m > 1 ? &h : nullptr);
      worst = std::max(worst, oracle::max_abs_diff(out, dense));
    }
    ++instances;
  }
  v.require(worst <= 1e-9, "max error above 1e-9");
  v.detail << instances << " instances x m in {1,2,4}, max |err| = " << worst;
}

// ---- 4 --------------------------------------------------------------------------

void zero_copy(Verdict& v) {
  std::mt19937_64 rng(4);
  ModelSpec s;
  s.num_layers = 2;
  auto store = WeightStore::load(s, 1, ToyDims{16, 4, 4});
  const auto bytes = store.alloc_bytes_total();
  const std::vector<int> supported{2, 4};

  KVCacheAdaptor kv(BlockGeometry{16, 64, 2}, 4, 256);
  const RankTuple all{0, 1, 2, 3};
  for (RequestId id = 0; id < 8; ++id)
    kv.allocate(id, 50 + static_cast<std::int64_t>(rng() % 400), 1, std::vector<Rank>{static_cast<Rank>(id % 4)}, 8);

  int copied = 0;
  const int degrees[] = {1, 2, 4};
  for (int i = 0; i < 1000; ++i) {
    const int m = degrees[rng() % 3];
    switch_weight_mode(store, m, static_cast<int>(rng() % static_cast<unsigned>(m)), supported);
    const RequestId id = static_cast<RequestId>(rng() % 8);
    RemapReport rep;
    if (rng() % 2 == 0) {
      const int start = static_cast<int>(rng() % static_cast<unsigned>(4 / m)) * m;
      const RankTuple hosts(all.begin() + start, all.begin() + start + m);
      rep = kv.remap_on_switch(id, m, RemapPolicy::Recompute, hosts);
    } else {
      rep = kv.remap_on_switch(id, kv.entry(id).tp_degree, RemapPolicy::PreserveResident);
    }
    copied += rep.blocks_copied;
  }
  kv.check_invariants();

  // The scheduler path: a randomized hinted trace drives live switches.
  std::mt19937_64 trng(44);
  RandomTraceSpec ts;
  ts.requests = 200;
  ts.horizon_ms = 8'000;
  ts.tp_fraction = 0.5;
  SchedulerOptions o;
  o.strategy = SwitchStrategy::SoftPreempt;
  Scheduler sched(llama70b_fp8_preset(), deployment(4, {2, 4}), CostModel{}, o);
  drive(sched, random_requests(trng, ts));
  std::size_t switches = 0;
  for (const auto& d : sched.decisions())
    if (d.event == DecisionKind::SetTP || d.event == DecisionKind::ResetTP) ++switches;

  v.require(store.generation() == 1, "weight generation changed");
  v.require(store.alloc_bytes_total() == bytes, "weight bytes changed");
  v.require(kv.realloc_count() == 0 && sched.kv().realloc_count() == 0, "pool reallocated");
  v.require(copied == 0, "blocks copied");
  v.detail << "1000 switches: generation " << store.generation() << ", bytes constant, realloc_count "
           << kv.realloc_count() << ", blocks_copied " << copied << "; scheduler run with " << switches
           << " live switches, realloc_count " << sched.kv().realloc_count();
}

// ---- 5 --------------------------------------------------------------------------

struct PreemptTally {
  int hard_instances = 0, hard_exact = 0, soft_recomputes = 0, soft_exact = 0;
};

void hard_preempt_instance(std::mt19937_64& rng, Verdict& v, PreemptTally& t) {
  const CostModel c;
  const int prompt = 50 + static_cast<int>(rng() % 1500);
  const int output = 10 + static_cast<int>(rng() % 150);
  const auto alone = replay_alone(c, 0, prompt, output);
  const double h_at = to_ms(alone.back()) * std::uniform_real_distribution<double>(0.02, 0.9)(rng);
  SchedulerOptions o;
  o.strategy = SwitchStrategy::HardPreempt;
  Scheduler s(llama70b_fp8_preset(), deployment(2, {2}), c, o);
  drive(s, {make_request(0, 0, prompt, output), make_request(1, 0, prompt, output),
            make_request(2, std::floor(h_at), 20 + static_cast<int>(rng() % 800), 1 + static_cast<int>(rng() % 60),
                         ParallelMode::tp(2), Priority::High)});
  SimTime paused = -1, resumed = -1;
  std::int64_t resume_tokens = -1;
  for (const auto& d : s.decisions()) {
    if (d.request != 0) continue;
    if (d.event == DecisionKind::Pause) paused = d.time;
    if (d.event == DecisionKind::Resume) {
      resumed = d.time;
      resume_tokens = d.tokens;
    }
  }
  if (paused < 0) return;  // request 0 finished before the preemption landed
  ++t.hard_instances;
  const SimTime h_finish = s.records().at(2).finish;
  const SimTime expected = alone.back() + (h_finish - paused) + from_ms(15);
  const auto& a = s.records().at(0);
  const bool ok = resume_tokens == 0 && a.recomputed_tokens == 0 && resumed == h_finish + from_ms(15) &&
                  a.finish == expected && s.records().at(1).finish == expected;
  if (ok) ++t.hard_exact;
  v.require(ok, "hard preempt timing mismatch (prompt " + std::to_string(prompt) + ")");
}

bool exactly_once(const Scheduler& s, Verdict& v, PreemptTally& t) {
  std::map<RequestId, int> next;
  std::map<RequestId, std::vector<SimTime>> emit_times;
  for (const auto& e : s.events()) {
    if (e.kind != SimEventKind::Emit) continue;
    if (e.token_index != next[e.request]) return false;
    ++next[e.request];
    emit_times[e.request].push_back(e.time);
  }
  for (const auto& [id, rec] : s.records()) {
    if (rec.rejected) continue;
    if (next[id] != rec.request.output_tokens || rec.emitted != rec.request.output_tokens) return false;
  }
  for (const auto& d : s.decisions()) {
    if (d.event == DecisionKind::Resume && d.tokens != 0) v.require(false, "resume with recompute");
    if (d.event != DecisionKind::Recompute) continue;
    ++t.soft_recomputes;
    const auto& times = emit_times[d.request];
    const int before = static_cast<int>(std::upper_bound(times.begin(), times.end(), d.time) - times.begin());
    const auto& rec = s.records().at(d.request);
    const bool ok = d.tokens == rec.request.prompt_tokens + before && rec.speculative_tokens == before;
    if (ok) ++t.soft_exact;
    v.require(ok, "recompute count differs from speculative KV");
  }
  return true;
}

void preemption(Verdict& v) {
  PreemptTally t;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 300; ++i) hard_preempt_instance(rng, v, t);

  const std::vector<std::pair<SwitchStrategy, ModePolicy>> mixes{
      {SwitchStrategy::Sequential, ModeFromRequest{}},
      {SwitchStrategy::SoftPreempt, ModeFromRequest{}},
      {SwitchStrategy::HardPreempt, ModeFromRequest{}},
      {SwitchStrategy::SoftPreempt, LoadAdaptive{3.0, 9.0, 1'000.0, 0.15}},
  };
  int traces = 0, once = 0;
  for (int i = 0; i < 10'000; ++i) {
    std::mt19937_64 trng(1'000'000 + static_cast<std::uint64_t>(i));
    RandomTraceSpec ts;
    ts.requests = 4 + static_cast<int>(trng() % 10);
    ts.horizon_ms = 600;
    ts.prompt_max = 500;
    ts.output_max = 24;
    const auto& [strategy, policy] = mixes[static_cast<std::size_t>(i) % mixes.size()];
    SchedulerOptions o;
    o.strategy = strategy;
    o.policy = policy;
    o.keep_event_log = true;
    Scheduler s(llama70b_fp8_preset(), deployment(4, {2, 4}), CostModel{}, o);
    drive(s, random_requests(trng, ts));
    ++traces;
    if (exactly_once(s, v, t)) ++once;
  }
  v.require(once == traces, "exactly-once violated in " + std::to_string(traces - once) + " traces");
  v.require(t.hard_instances >= 200, "too few hard preemptions exercised");
  v.require(t.soft_recomputes > 0, "no soft recompute exercised");
  v.detail << "hard: " << t.hard_exact << "/" << t.hard_instances << " exact; soft: " << t.soft_exact << "/"
           << t.soft_recomputes << " recomputes equal speculative KV; exactly-once " << once << "/" << traces
           << " traces";
}

// ---- 6 --------------------------------------------------------------------------

void deadlock_freedom(Verdict& v) {
  std::uint64_t min_steps = UINT64_MAX, setp = 0, mismatches = 0;
  bool uniform = true;
  const SwitchStrategy strategies[] = {SwitchStrategy::Sequential, SwitchStrategy::SoftPreempt,
                                       SwitchStrategy::HardPreempt};
  for (std::size_t k = 0; k < 3; ++k) {
    std::mt19937_64 rng(600 + k);
    RandomTraceSpec ts;
    ts.requests = 9'000;
    ts.horizon_ms = 600'000;
    ts.prompt_max = 1'500;
    ts.output_max = 80;
    ts.tp_fraction = 0.4;
    ts.high_fraction = 0.05;
    ts.degrees = {2, 4, 8};
    SchedulerOptions o;
    o.strategy = strategies[k];
    o.keep_event_log = false;
    Scheduler s(llama70b_fp8_preset(), deployment(8, {2, 4, 8}), CostModel{}, o);
    drive(s, random_requests(rng, ts), [&](const IterationView& view) {
      std::size_t next = 0;
      for (const auto& msg : view.report->broadcasts) {
        const std::size_t n = msg.group.size();
        for (std::size_t i = 0; i < n && next + i < view.report->acks.size(); ++i) {
          if (view.report->acks[next + i].effective_epoch != msg.epoch) uniform = false;
        }
        if (msg.kind == ControlKind::SetTP) ++setp;
        next += n;
      }
      if (next != view.report->acks.size()) uniform = false;
    });
    min_steps = std::min(min_steps, s.steps_executed());
    mismatches += s.pool().log().mismatches;
  }

  // The detector itself: a stale sequence number must surface as MismatchFault.
  auto t = generate_trace([] {
    WorkloadSpec w;
    w.num_requests = 20;
    w.tp_request_fraction = 1.0;
    w.tp_hint_degree = 2;
    return w;
  }());
  auto cfg = named_config("priority");
  cfg.fault_unit = 0;
  const bool detected = has_code([&] { run_simulation(t, cfg); }, ErrorCode::MismatchFault);

  v.require(min_steps >= 100'000, "a run had only " + std::to_string(min_steps) + " steps");
  v.require(mismatches == 0, "collective mismatches observed");
  v.require(uniform, "SetTP acks disagree on the effective epoch");
  v.require(setp > 0, "no SetTP exercised");
  v.require(detected, "injected fault not detected");
  v.detail << "3 runs, >= " << min_steps << " steps each, " << setp << " SetTP broadcasts with uniform epochs, "
           << mismatches << " mismatches; injected stale collective detected";
}

// ---- 7 --------------------------------------------------------------------------

void capacity(Verdict& v) {
  const auto spec = llama70b_preset();
  DeploymentConfig cfg;
  cfg.num_engines = 8;
  cfg.supported_tp_degrees = {2, 4, 8};
  const auto c2 = max_context(spec, cfg, 2, false);
  const auto c4 = max_context(spec, cfg, 4, false);
  const auto c8 = max_context(spec, cfg, 8, false);
  const auto dyn = max_context(spec, cfg, 8, true);
  const double gap = 1.0 - static_cast<double>(dyn) / static_cast<double>(c8);
  v.require(c2 <= c4 && c4 <= c8, "not monotone");
  v.require(c8 >= 4 * c2, "8TP/2TP below 4");
  v.require(gap >= 0 && gap <= 0.17, "dynamic gap above 17%");
  const std::pair<std::int64_t, double> targets[] = {{c2, 264e3}, {c4, 959e3}, {c8, 2.3e6}, {dyn, 1.9e6}};
  double worst = 0;
  for (const auto& [got, want] : targets) worst = std::max(worst, std::abs(static_cast<double>(got) / want - 1.0));
  v.require(worst <= 0.35, "calibration outside +-35%");
  v.detail << "2/4/8TP = " << c2 << "/" << c4 << "/" << c8 << ", dynamic " << dyn << ", 8TP/2TP "
           << static_cast<double>(c8) / static_cast<double>(c2) << ", gap " << gap * 100 << "%, worst target deviation "
           << worst * 100 << "%";
}

// ---- 8 --------------------------------------------------------------------------

void switching_latency(Verdict& v) {
  const DeploymentConfig d = deployment(4, {2, 4});
  Trace t;
  t.requests.push_back(make_request(0, 10, 500, 10, ParallelMode::tp(2)));
  // Saturating the DP engines forces the TP2 group to split again.
  for (RequestId id = 1; id <= 60; ++id) t.requests.push_back(make_request(id, 2'000, 500, 200));
  const auto r = run_simulation(t, named_config("priority", llama70b_fp8_preset(), d));
  std::vector<SimTime> broadcast_at, effective_at;
  int sets = 0, resets = 0;
  for (const auto& dec : r.decisions) {
    if (dec.time > 0 && (dec.event == DecisionKind::SetTP || dec.event == DecisionKind::ResetTP)) {
      broadcast_at.push_back(dec.time);
      (dec.event == DecisionKind::SetTP ? sets : resets)++;
    }
  }
  for (const auto& e : r.events)
    if (e.kind == SimEventKind::SwitchEffective && e.unit == 0) effective_at.push_back(e.time);
  bool exact = !broadcast_at.empty() && broadcast_at.size() <= effective_at.size();
  for (std::size_t i = 0; exact && i < broadcast_at.size(); ++i)
    exact = effective_at[i] - broadcast_at[i] == from_ms(d.switch_latency_ms);
  v.require(exact, "live switch did not take exactly switch_latency_ms");
  v.require(sets > 0 && resets > 0, "both switch directions must be exercised");

  const CostModel c;
  double min_ratio = 1e300;
  std::ostringstream ratios;
  for (const auto& [p, cold] : c.cold_start_ms) {
    const double ratio = cold / d.switch_latency_ms;
    min_ratio = std::min(min_ratio, ratio);
    ratios << " " << p << "TP:" << static_cast<long long>(ratio);
  }
  v.require(min_ratio >= 1e4, "cold/live ratio " + std::to_string(min_ratio) + " below 1e4 for the 8TP preset");
  v.detail << sets << " SetTP and " << resets << " ResetTP live switches at exactly " << d.switch_latency_ms << " ms; cold/live ratios"
           << ratios.str();
}

// ---- 9 --------------------------------------------------------------------------

void end_to_end(Verdict& v) {
  const auto trace = generate_trace(WorkloadSpec{});
  const auto results =
      compare_configs(trace, {named_config("static_dp"), named_config("static_tp"), named_config("dynamic")});
  const auto& dp = results[0].summary;
  const auto& tp = results[1].summary;
  const auto& dyn = results[2].summary;
  const double a = dyn.peak_throughput_tps / dp.peak_throughput_tps;
  const double b = dyn.low_mean_ttft_ms / tp.low_mean_ttft_ms;
  const double c = tp.high_p90_ttft_ms / dyn.high_p90_ttft_ms;
  const double d = dyn.median_tpot_ms / dp.median_tpot_ms;
  v.require(a >= 0.90, "(a) peak throughput");
  v.require(b <= 1.2, "(b) low-load TTFT");
  v.require(c >= 1.5, "(c) burst P90 TTFT");
  v.require(d <= 0.7, "(d) median TPOT");
  for (const auto& r : results) v.require(r.summary.completed == 4000, r.label + " did not complete every request");
  v.detail.precision(3);
  v.detail << "(a) " << a << " >= 0.9, (b) " << b << " <= 1.2, (c) " << c << " >= 1.5, (d) " << d << " <= 0.7";
}

// ---- 10 -------------------------------------------------------------------------

void mixed_priority(Verdict& v) {
  WorkloadSpec w;
  w.num_requests = 2'000;
  w.seed = 7;
  w.low_rate_min = w.high_rate_min = 3.0;
  w.low_rate_max = w.high_rate_max = 5.0;
  w.output_min = 512;
  w.output_max = 1'100;
  w.high_priority_fraction = 0.03;
  w.tp_hint_degree = 2;
  const auto trace = generate_trace(w);
  const auto results = compare_configs(trace, {named_config("static_tp"), named_config("priority")});
  const auto& tp = results[0].summary;
  const auto& pr = results[1].summary;
  const double a = pr.high_priority_mean_ttft_ms / tp.high_priority_mean_ttft_ms;
  const double b = tp.mean_ttft_ms / pr.mean_ttft_ms;
  v.require(a <= 1.3, "priority TTFT above 1.3x static TP");
  v.require(b >= 5.0, "all-request TTFT gain below 5x");
  v.detail.precision(4);
  v.detail << "priority-class TTFT " << pr.high_priority_mean_ttft_ms << " ms vs static TP "
           << tp.high_priority_mean_ttft_ms << " ms (ratio " << a << " <= 1.3); all-request TTFT " << pr.mean_ttft_ms
           << " ms vs " << tp.mean_ttft_ms << " ms (" << b << "x >= 5)";
}

}  // namespace

int main() {
  const std::pair<const char*, Criterion> criteria[] = {
      {"block-byte invariance", block_bytes},
      {"group enumeration", group_enumeration},
      {"TP numeric equivalence", tp_equivalence},
      {"zero-copy switching", zero_copy},
      {"preemption semantics", preemption},
      {"deadlock freedom", deadlock_freedom},
      {"capacity model", capacity},
      {"switching latency", switching_latency},
      {"end-to-end trends", end_to_end},
      {"mixed-priority run", mixed_priority},
  };
  int failed = 0;
  int index = 0;
  for (const auto& [name, fn] : criteria) {
    ++index;
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      fn(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!v.pass) ++failed;
    std::string text = v.detail.str();
    if (!v.pass) text += " | failed: " + v.failures;
    std::printf("%s %2d %s: %s [%.2f s]\n", v.pass ? "PASS" : "FAIL", index, name, text.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", index - failed, index);
  return failed == 0 ? 0 : 1;
}

#include "shardshift/simulator.hpp"

#include <algorithm>

namespace shardshift {

SimConfig named_config(const std::string& name, const ModelSpec& spec, const DeploymentConfig& deployment,
                       const CostModel& cost) {
  SimConfig c;
  c.label = name;
  c.spec = spec;
  c.deployment = deployment;
  c.cost = cost;
  if (name == "static_dp") {
    c.options.policy = StaticLayout{1};
  } else if (name == "static_tp") {
    c.options.policy = StaticLayout{deployment.num_engines};
    if (!deployment.supports(deployment.num_engines)) {
      throw Error(ErrorCode::UnsupportedDegree, "static_tp needs degree " + std::to_string(deployment.num_engines));
    }
  } else if (name == "dynamic") {
    c.options.policy = LoadAdaptive{};
    c.options.strategy = SwitchStrategy::SoftPreempt;
  } else if (name == "dynamic_seq") {
    c.options.policy = LoadAdaptive{};
    c.options.strategy = SwitchStrategy::Sequential;
  } else if (name == "dynamic_hard") {
    c.options.policy = LoadAdaptive{};
    c.options.strategy = SwitchStrategy::HardPreempt;
  } else if (name == "priority") {
    c.options.policy = ModeFromRequest{};
    c.options.strategy = SwitchStrategy::HardPreempt;
  } else {
    throw Error(ErrorCode::ConfigError, "unknown configuration '" + name + "'");
  }
  return c;
}

std::vector<std::string> config_names() {
  return {"static_dp", "static_tp", "dynamic", "dynamic_seq", "dynamic_hard", "priority"};
}

SimResult run_simulation(const Trace& trace, const SimConfig& config) {
  Scheduler sched(config.spec, config.deployment, config.cost, config.options);
  if (config.fault_unit) sched.inject_collective_fault(*config.fault_unit);
  std::vector<Request> arrivals = trace.requests;
  std::stable_sort(arrivals.begin(), arrivals.end(), [](const Request& a, const Request& b) {
    return a.arrival_time != b.arrival_time ? a.arrival_time < b.arrival_time : a.id < b.id;
  });

  std::size_t next = 0;
  SimTime now = 0;
  while (true) {
    const auto wake = sched.next_wakeup();
    const bool more = next < arrivals.size();
    if (!more && !wake) {
      if (sched.quiescent()) break;
      // Nothing scheduled: one more pass lets pending transitions apply.
      const auto before = sched.decisions().size();
      const auto rep = sched.schedule_iteration(now);
      if (!sched.next_wakeup() && rep.idle && sched.decisions().size() == before && !sched.quiescent()) {
        throw Error(ErrorCode::ConfigError, "simulation stalled with work outstanding: " + sched.describe());
      }
      continue;
    }
    SimTime t = wake.value_or(arrivals.empty() ? 0 : arrivals.back().arrival_time);
    if (more) t = std::min(t, arrivals[next].arrival_time);
    if (!wake) t = arrivals[next].arrival_time;
    now = std::max(now, t);
    while (next < arrivals.size() && arrivals[next].arrival_time <= now) sched.submit(arrivals[next++]);
    sched.schedule_iteration(now);
  }

  SimResult res;
  res.label = config.label;
  res.records.reserve(sched.records().size());
  for (const auto& [id, r] : sched.records()) res.records.push_back(r);
  res.summary = summarize(config.label, res.records, trace);
  res.decisions = sched.decisions();
  res.events = sched.events();
  res.collectives = sched.pool().log().records;
  res.iterations = sched.iterations();
  res.steps = sched.steps_executed();
  res.group_constructions_after_startup = sched.group_constructions_after_startup();
  res.pool_startup_ms = sched.pool().startup_cost_ms();
  res.end_time = now;
  res.kv_dump = sched.kv().dump();
  return res;
}

std::vector<SimResult> compare_configs(const Trace& trace, const std::vector<SimConfig>& configs) {
  if (configs.size() < 2) throw Error(ErrorCode::ConfigError, "comparison needs at least two configurations");
  std::vector<SimResult> out;
  out.reserve(configs.size());
  for (const auto& c : configs) out.push_back(run_simulation(trace, c));
  return out;
}

}  // namespace shardshift

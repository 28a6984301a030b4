#pragma once

#include <optional>
#include <string>
#include <vector>

#include "shardshift/metrics.hpp"
#include "shardshift/scheduler.hpp"
#include "shardshift/workload.hpp"

namespace shardshift {

struct SimConfig {
  std::string label = "dynamic";
  ModelSpec spec = llama70b_fp8_preset();
  DeploymentConfig deployment{};
  CostModel cost{};
  SchedulerOptions options{};
  /// Makes the TP unit starting at this rank post a stale collective.
  std::optional<Rank> fault_unit;
};

/// Named deployments: static_dp, static_tp (one full-width group),
/// dynamic (load adaptive, soft preempt), dynamic_seq, dynamic_hard and
/// priority (modes from the request, hard preempt).
SimConfig named_config(const std::string& name, const ModelSpec& spec = llama70b_fp8_preset(),
                       const DeploymentConfig& deployment = {}, const CostModel& cost = {});
std::vector<std::string> config_names();

struct SimResult {
  std::string label;
  std::vector<RequestRecord> records;  // by request id
  MetricsSummary summary;
  std::vector<DecisionRecord> decisions;
  std::vector<SimEvent> events;
  std::vector<CollectiveRecord> collectives;
  std::uint64_t iterations = 0;
  std::uint64_t steps = 0;
  std::uint64_t group_constructions_after_startup = 0;
  double pool_startup_ms = 0;
  SimTime end_time = 0;
  std::string kv_dump;  // block table at the end of the run
};

/// Event-driven replay: the scheduler iterates at every arrival and at every
/// step or switch completion until all requests finish or are rejected.
SimResult run_simulation(const Trace& trace, const SimConfig& config);

/// Needs at least two configurations.
std::vector<SimResult> compare_configs(const Trace& trace, const std::vector<SimConfig>& configs);

}  // namespace shardshift

#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shardshift/scheduler.hpp"
#include "shardshift/workload.hpp"

namespace shardshift {

/// Linear interpolation between closest ranks; q in [0, 1].
double percentile(std::vector<double> values, double q);

struct MetricsSummary {
  std::string label;
  int completed = 0;
  int rejected = 0;
  double mean_ttft_ms = 0;
  double median_ttft_ms = 0;
  double p90_ttft_ms = 0;
  double mean_tpot_ms = 0;
  double median_tpot_ms = 0;  // median over requests with more than one output token
  double mean_ilt_ms = 0;     // over every inter-token interval
  double p99_ilt_ms = 0;
  double mean_queue_ms = 0;
  double peak_throughput_tps = 0;  // most tokens emitted in any 1 s window
  double mean_throughput_tps = 0;
  double makespan_ms = 0;
  // Phase attribution by arrival time.
  double low_mean_ttft_ms = 0;
  double low_p90_ttft_ms = 0;
  double high_mean_ttft_ms = 0;
  double high_p90_ttft_ms = 0;
  // Priority classes.
  double high_priority_mean_ttft_ms = 0;
  double normal_priority_mean_ttft_ms = 0;
  double high_priority_median_tpot_ms = 0;
  double normal_priority_median_tpot_ms = 0;
};

MetricsSummary summarize(const std::string& label, std::span<const RequestRecord> records, const Trace& trace);

/// Largest number of timestamps inside any half-open window of `window` length.
std::size_t max_in_window(std::vector<SimTime> times, SimTime window);

/// CSV rows: time_ms,metric,label,value. Summary rows carry the makespan as
/// time; `throughput_tps` rows are 1 s bins.
void write_metrics_header(std::ostream& os);
void write_metrics(std::ostream& os, const MetricsSummary& m, std::span<const RequestRecord> records);

}  // namespace shardshift

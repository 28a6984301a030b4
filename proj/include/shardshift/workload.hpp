#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "shardshift/core.hpp"

namespace shardshift {

/// Alternating calm / burst arrival phases with uniform request sizes.
struct WorkloadSpec {
  int num_requests = 4000;
  double phase_ms = 60'000.0;
  double low_rate_min = 2.0;
  double low_rate_max = 5.0;
  double high_rate_min = 10.0;
  double high_rate_max = 30.0;
  bool start_with_burst = false;
  int prompt_min = 128;
  int prompt_max = 4000;
  int output_min = 64;
  int output_max = 512;
  double high_priority_fraction = 0.0;
  /// Normal requests that carry a TP hint.
  double tp_request_fraction = 0.0;
  /// Degree of every TP hint; High priority requests always carry one.
  int tp_hint_degree = 4;
  std::uint64_t seed = 1;
};

struct PhaseSpan {
  SimTime start = 0;
  SimTime end = 0;
  bool burst = false;
  double rate_rps = 0.0;
};

struct Trace {
  std::vector<Request> requests;  // sorted by (arrival_time, id)
  std::vector<PhaseSpan> phases;

  /// Phase containing `t`; the last phase extends to infinity.
  const PhaseSpan* phase_at(SimTime t) const;
};

Trace generate_trace(const WorkloadSpec& spec);

/// CSV: id,arrival_ms,prompt_tokens,output_tokens,priority,mode_hint with the
/// phase schedule as leading `# phase,start_ms,end_ms,kind,rate` comment lines.
void write_trace(const Trace& trace, std::ostream& os);
Trace read_trace(std::istream& is);
void save_trace(const Trace& trace, const std::string& path);
Trace load_trace(const std::string& path);

}  // namespace shardshift

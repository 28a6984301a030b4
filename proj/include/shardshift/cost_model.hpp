#pragma once

#include <map>
#include <variant>

#include "shardshift/core.hpp"

namespace shardshift {

struct PrefillPhase {
  std::int64_t tokens = 0;
};

struct DecodePhase {
  int batch = 1;
};

using StepPhase = std::variant<PrefillPhase, DecodePhase>;

/// Parametric step-time model for one engine (p = 1) or a TP group of degree p.
/// Absolute values are a calibration surface, not measurements.
struct CostModel {
  double prefill_tokens_per_ms_per_engine = 30.0;
  double decode_ms_per_token_dp = 12.0;
  /// Extra decode time per additional sequence in the batch at p = 1.
  double decode_ms_per_extra_seq = 0.08;
  /// Prefill chunk budget per step (chunked prefill).
  std::int64_t prefill_chunk_tokens = 512;
  /// Concurrent sequences one engine or TP group can batch.
  int max_batch = 24;

  std::map<int, double> tp_prefill_speedup{{2, 0.92}, {4, 0.80}, {8, 0.65}};
  std::map<int, double> tp_decode_speedup{{2, 0.56}, {4, 0.43}, {8, 0.27}};
  /// Multiplier on the per-sequence decode term under TP (all-reduce volume grows with batch).
  std::map<int, double> tp_batch_penalty{{2, 1.10}, {4, 3.00}, {8, 2.40}};
  std::map<int, double> tp_comm_overhead_ms{{2, 0.5}, {4, 1.0}, {8, 1.8}};

  /// One-time construction of a pooled communicator at startup.
  double group_init_ms = 1'500.0;
  /// Cold restart with a new layout (weight reload plus communicator init).
  std::map<int, double> cold_start_ms{{2, 292'380.0}, {4, 211'970.0}, {8, 146'540.0}};

  double prefill_speedup(int p) const;
  double decode_speedup(int p) const;
  double batch_penalty(int p) const;
  double comm_overhead_ms(int p) const;
  double cold_start(int p) const;

  /// Time of one engine step that prefills `prefill_tokens` (one chunk) and
  /// decodes one token for each of `decode_batch` sequences at degree p.
  SimTime mixed_step(std::int64_t prefill_tokens, int decode_batch, int p) const;

  /// Prefill: sum of chunk steps; Decode: one step over the batch.
  SimTime step_time(const StepPhase& phase, int p) const;

  /// Output tokens per second of `units` saturated groups of degree p.
  double saturated_decode_tokens_per_s(int p, int units) const;
};

}  // namespace shardshift

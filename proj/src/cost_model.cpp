#include "shardshift/cost_model.hpp"

#include <algorithm>

namespace shardshift {

namespace {

double lookup(const std::map<int, double>& m, int p, double at_one) {
  if (p <= 1) return at_one;
  if (auto it = m.find(p); it != m.end()) return it->second;
  throw Error(ErrorCode::UnsupportedDegree, "cost model has no entry for degree " + std::to_string(p));
}

}  // namespace

double CostModel::prefill_speedup(int p) const { return lookup(tp_prefill_speedup, p, 1.0); }
double CostModel::decode_speedup(int p) const { return lookup(tp_decode_speedup, p, 1.0); }
double CostModel::batch_penalty(int p) const { return lookup(tp_batch_penalty, p, 1.0); }
double CostModel::comm_overhead_ms(int p) const { return lookup(tp_comm_overhead_ms, p, 0.0); }
double CostModel::cold_start(int p) const { return lookup(cold_start_ms, p, cold_start_ms.begin()->second); }

SimTime CostModel::mixed_step(std::int64_t prefill_tokens, int decode_batch, int p) const {
  double ms = 0.0;
  if (prefill_tokens > 0) {
    ms += static_cast<double>(prefill_tokens) / (prefill_tokens_per_ms_per_engine * p * prefill_speedup(p));
  }
  if (decode_batch > 0) {
    ms += decode_ms_per_token_dp * decode_speedup(p) +
          decode_ms_per_extra_seq * (decode_batch - 1) * batch_penalty(p) / p;
  }
  if (prefill_tokens > 0 || decode_batch > 0) ms += comm_overhead_ms(p);
  return from_ms(ms);
}

SimTime CostModel::step_time(const StepPhase& phase, int p) const {
  if (p < 1) throw Error(ErrorCode::UnsupportedDegree, "degree must be positive");
  if (const auto* pre = std::get_if<PrefillPhase>(&phase)) {
    SimTime total = 0;
    for (std::int64_t done = 0; done < pre->tokens; done += prefill_chunk_tokens) {
      total += mixed_step(std::min(prefill_chunk_tokens, pre->tokens - done), 0, p);
    }
    return total;
  }
  return mixed_step(0, std::get<DecodePhase>(phase).batch, p);
}

double CostModel::saturated_decode_tokens_per_s(int p, int units) const {
  const double step_ms = to_ms(mixed_step(0, max_batch, p));
  return units * max_batch * 1000.0 / step_ms;
}

}  // namespace shardshift

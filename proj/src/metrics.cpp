#include "shardshift/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>

namespace shardshift {

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

std::size_t max_in_window(std::vector<SimTime> times, SimTime window) {
  std::sort(times.begin(), times.end());
  std::size_t best = 0, lo = 0;
  for (std::size_t hi = 0; hi < times.size(); ++hi) {
    while (times[hi] - times[lo] >= window) ++lo;
    best = std::max(best, hi - lo + 1);
  }
  return best;
}

namespace {

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

MetricsSummary summarize(const std::string& label, std::span<const RequestRecord> records, const Trace& trace) {
  MetricsSummary m;
  m.label = label;
  std::vector<double> ttft, tpot, ilt, queue, low, high, ttft_hi, ttft_lo, tpot_hi, tpot_lo;
  std::vector<SimTime> emits;
  SimTime first_arrival = -1, last_finish = 0;
  for (const auto& r : records) {
    if (r.rejected) {
      ++m.rejected;
      continue;
    }
    if (r.finish < 0) continue;
    ++m.completed;
    const auto& q = r.request;
    if (first_arrival < 0 || q.arrival_time < first_arrival) first_arrival = q.arrival_time;
    last_finish = std::max(last_finish, r.finish);
    const double t = to_ms(r.first_token - q.arrival_time);
    ttft.push_back(t);
    queue.push_back(to_ms(r.first_scheduled - q.arrival_time));
    (q.priority == Priority::High ? ttft_hi : ttft_lo).push_back(t);
    const auto* phase = trace.phase_at(q.arrival_time);
    ((phase && phase->burst) ? high : low).push_back(t);
    if (r.emit_times.size() > 1) {
      const double per = to_ms(r.emit_times.back() - r.emit_times.front()) / static_cast<double>(r.emit_times.size() - 1);
      tpot.push_back(per);
      (q.priority == Priority::High ? tpot_hi : tpot_lo).push_back(per);
      for (std::size_t i = 1; i < r.emit_times.size(); ++i) ilt.push_back(to_ms(r.emit_times[i] - r.emit_times[i - 1]));
    }
    emits.insert(emits.end(), r.emit_times.begin(), r.emit_times.end());
  }
  m.mean_ttft_ms = mean(ttft);
  m.median_ttft_ms = percentile(ttft, 0.5);
  m.p90_ttft_ms = percentile(ttft, 0.9);
  m.mean_tpot_ms = mean(tpot);
  m.median_tpot_ms = percentile(tpot, 0.5);
  m.mean_ilt_ms = mean(ilt);
  m.p99_ilt_ms = percentile(ilt, 0.99);
  m.mean_queue_ms = mean(queue);
  m.low_mean_ttft_ms = mean(low);
  m.low_p90_ttft_ms = percentile(low, 0.9);
  m.high_mean_ttft_ms = mean(high);
  m.high_p90_ttft_ms = percentile(high, 0.9);
  m.high_priority_mean_ttft_ms = mean(ttft_hi);
  m.normal_priority_mean_ttft_ms = mean(ttft_lo);
  m.high_priority_median_tpot_ms = percentile(tpot_hi, 0.5);
  m.normal_priority_median_tpot_ms = percentile(tpot_lo, 0.5);
  m.peak_throughput_tps = static_cast<double>(max_in_window(emits, from_ms(1000.0)));
  if (m.completed > 0) {
    m.makespan_ms = to_ms(last_finish - first_arrival);
    if (m.makespan_ms > 0) m.mean_throughput_tps = static_cast<double>(emits.size()) * 1000.0 / m.makespan_ms;
  }
  return m;
}

void write_metrics_header(std::ostream& os) { os << "time_ms,metric,label,value\n"; }

void write_metrics(std::ostream& os, const MetricsSummary& m, std::span<const RequestRecord> records) {
  std::map<std::int64_t, int> bins;
  for (const auto& r : records) {
    for (SimTime t : r.emit_times) ++bins[t / from_ms(1000.0)];
  }
  os << std::fixed << std::setprecision(3);
  for (const auto& [sec, n] : bins) os << sec * 1000.0 << ",throughput_tps," << m.label << ',' << n << '\n';
  const std::pair<const char*, double> rows[] = {
      {"completed", m.completed},
      {"rejected", m.rejected},
      {"mean_ttft_ms", m.mean_ttft_ms},
      {"median_ttft_ms", m.median_ttft_ms},
      {"p90_ttft_ms", m.p90_ttft_ms},
      {"mean_tpot_ms", m.mean_tpot_ms},
      {"median_tpot_ms", m.median_tpot_ms},
      {"mean_ilt_ms", m.mean_ilt_ms},
      {"p99_ilt_ms", m.p99_ilt_ms},
      {"mean_queue_ms", m.mean_queue_ms},
      {"peak_throughput_tps", m.peak_throughput_tps},
      {"mean_throughput_tps", m.mean_throughput_tps},
      {"low_mean_ttft_ms", m.low_mean_ttft_ms},
      {"low_p90_ttft_ms", m.low_p90_ttft_ms},
      {"high_mean_ttft_ms", m.high_mean_ttft_ms},
      {"high_p90_ttft_ms", m.high_p90_ttft_ms},
      {"high_priority_mean_ttft_ms", m.high_priority_mean_ttft_ms},
      {"normal_priority_mean_ttft_ms", m.normal_priority_mean_ttft_ms},
      {"high_priority_median_tpot_ms", m.high_priority_median_tpot_ms},
      {"normal_priority_median_tpot_ms", m.normal_priority_median_tpot_ms},
  };
  for (const auto& [name, v] : rows) os << m.makespan_ms << ',' << name << ',' << m.label << ',' << v << '\n';
}

}  // namespace shardshift

#include "shardshift/workload.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

namespace shardshift {

const PhaseSpan* Trace::phase_at(SimTime t) const {
  for (const auto& p : phases) {
    if (t >= p.start && t < p.end) return &p;
  }
  return phases.empty() ? nullptr : &phases.back();
}

Trace generate_trace(const WorkloadSpec& spec) {
  if (spec.num_requests < 0 || spec.phase_ms <= 0 || spec.prompt_min < 1 || spec.prompt_max < spec.prompt_min ||
      spec.output_min < 1 || spec.output_max < spec.output_min || spec.low_rate_min <= 0 ||
      spec.low_rate_max < spec.low_rate_min || spec.high_rate_min <= 0 || spec.high_rate_max < spec.high_rate_min || spec.tp_hint_degree < 1) {
    throw Error(ErrorCode::ConfigError, "invalid workload spec");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> prompt(spec.prompt_min, spec.prompt_max);
  std::uniform_int_distribution<int> output(spec.output_min, spec.output_max);
  std::bernoulli_distribution high(spec.high_priority_fraction);
  std::bernoulli_distribution tp_hint(spec.tp_request_fraction);

  Trace trace;
  const SimTime phase_len = from_ms(spec.phase_ms);
  bool burst = spec.start_with_burst;
  SimTime phase_start = 0;
  double t_ms = 0.0;
  while (static_cast<int>(trace.requests.size()) < spec.num_requests) {
    const double rate = burst ? std::uniform_real_distribution<double>(spec.high_rate_min, spec.high_rate_max)(rng)
                              : std::uniform_real_distribution<double>(spec.low_rate_min, spec.low_rate_max)(rng);
    trace.phases.push_back({phase_start, phase_start + phase_len, burst, rate});
    std::exponential_distribution<double> gap(rate / 1000.0);
    t_ms = to_ms(phase_start);
    while (static_cast<int>(trace.requests.size()) < spec.num_requests) {
      t_ms += gap(rng);
      if (from_ms(t_ms) >= phase_start + phase_len) break;
      Request r;
      r.id = static_cast<RequestId>(trace.requests.size());
      r.arrival_time = from_ms(t_ms);
      r.prompt_tokens = prompt(rng);
      r.output_tokens = output(rng);
      r.priority = high(rng) ? Priority::High : Priority::Normal;
      const bool hinted = spec.tp_request_fraction > 0.0 && tp_hint(rng);
      r.mode = r.priority == Priority::High || hinted ? ParallelMode::tp(spec.tp_hint_degree) : ParallelMode::dp();
      trace.requests.push_back(r);
    }
    phase_start += phase_len;
    burst = !burst;
  }
  return trace;
}

void write_trace(const Trace& trace, std::ostream& os) {
  os << std::fixed << std::setprecision(3);
  for (const auto& p : trace.phases) {
    os << "# phase," << to_ms(p.start) << ',' << to_ms(p.end) << ',' << (p.burst ? "high" : "low") << ','
       << p.rate_rps << '\n';
  }
  os << "id,arrival_ms,prompt_tokens,output_tokens,priority,mode_hint\n";
  for (const auto& r : trace.requests) {
    os << r.id << ',' << to_ms(r.arrival_time) << ',' << r.prompt_tokens << ',' << r.output_tokens << ','
       << to_string(r.priority) << ',' << to_string(r.mode) << '\n';
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

template <typename T>
T parse_field(const std::string& s, const char* what) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw Error(ErrorCode::ConfigError, std::string("bad ") + what + " '" + s + "'");
  return v;
}

ParallelMode parse_mode(const std::string& s) {
  if (s == "dp" || s == "DP") return ParallelMode::dp();
  if (s.size() > 2 && (s.rfind("tp", 0) == 0 || s.rfind("TP", 0) == 0)) {
    const int degree = parse_field<int>(s.substr(2), "mode hint");
    if (degree >= 1) return ParallelMode::tp(degree);
  }
  throw Error(ErrorCode::ConfigError, "bad mode hint '" + s + "'");
}

}  // namespace

Trace read_trace(std::istream& is) {
  Trace trace;
  std::set<RequestId> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      if (line.rfind("# phase,", 0) == 0) {
        const auto f = split_csv(line.substr(8));
        if (f.size() != 4) throw Error(ErrorCode::ConfigError, "phase line needs 4 fields");
        if (f[2] != "high" && f[2] != "low") throw Error(ErrorCode::ConfigError, "bad phase kind '" + f[2] + "'");
        trace.phases.push_back({from_ms(parse_field<double>(f[0], "phase start")),
                                from_ms(parse_field<double>(f[1], "phase end")), f[2] == "high",
                                parse_field<double>(f[3], "phase rate")});
        continue;
      }
      if (line[0] == '#' || line.rfind("id,", 0) == 0) continue;
      const auto f = split_csv(line);
      if (f.size() != 6) throw Error(ErrorCode::ConfigError, "expected 6 fields");
      Request r;
      r.id = parse_field<RequestId>(f[0], "id");
      r.arrival_time = from_ms(parse_field<double>(f[1], "arrival"));
      r.prompt_tokens = parse_field<int>(f[2], "prompt_tokens");
      r.output_tokens = parse_field<int>(f[3], "output_tokens");
      if (f[4] == "high") {
        r.priority = Priority::High;
      } else if (f[4] == "normal") {
        r.priority = Priority::Normal;
      } else {
        throw Error(ErrorCode::ConfigError, "bad priority '" + f[4] + "'");
      }
      r.mode = parse_mode(f[5]);
      if (r.prompt_tokens < 1 || r.output_tokens < 1 || r.arrival_time < 0) {
        throw Error(ErrorCode::ConfigError, "non-positive size or negative arrival");
      }
      if (!ids.insert(r.id).second) throw Error(ErrorCode::ConfigError, "duplicate id " + f[0]);
      trace.requests.push_back(r);
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigError, "trace line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception&) {
      throw Error(ErrorCode::ConfigError, "trace line " + std::to_string(lineno) + ": malformed number");
    }
  }
  std::stable_sort(trace.requests.begin(), trace.requests.end(), [](const Request& a, const Request& b) {
    return a.arrival_time != b.arrival_time ? a.arrival_time < b.arrival_time : a.id < b.id;
  });
  return trace;
}

void save_trace(const Trace& trace, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_trace(trace, os);
}

Trace load_trace(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot read " + path);
  return read_trace(is);
}

}  // namespace shardshift

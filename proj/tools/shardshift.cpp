#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "shardshift/kvcache.hpp"
#include "shardshift/simulator.hpp"

using namespace shardshift;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitFault = 3;

struct DeploymentFlags {
  std::string config_path;
  std::string preset;
  std::vector<int> degrees;
  int engines = 0;
  double switch_ms = -1;

  void attach(CLI::App* cmd, const std::string& default_preset) {
    preset = default_preset;
    cmd->add_option("-c,--config", config_path, "key = value deployment file")->check(CLI::ExistingFile);
    cmd->add_option("-m,--model", preset, "model preset")->capture_default_str();
    cmd->add_option("--degrees", degrees, "supported TP degrees")->delimiter(',');
    cmd->add_option("--engines", engines, "number of engines")->check(CLI::PositiveNumber);
    cmd->add_option("--switch-latency", switch_ms, "live switch latency in ms")->check(CLI::NonNegativeNumber);
  }

  ConfigFile resolve() const {
    ConfigFile base{preset_by_name(preset), DeploymentConfig{}};
    ConfigFile cfg = config_path.empty() ? base : load_config(config_path, base);
    if (!degrees.empty()) cfg.deployment.supported_tp_degrees = degrees;
    if (engines > 0) cfg.deployment.num_engines = engines;
    if (switch_ms >= 0) cfg.deployment.switch_latency_ms = switch_ms;
    return cfg;
  }
};

/// Prints every violated invariant; returns false when any exist.
bool check_deployment(const ConfigFile& cfg) {
  const auto v = validate_deployment(cfg.model, cfg.deployment);
  for (const auto& e : v.errors) std::cerr << "error: " << to_string(e.code) << ": " << e.detail << "\n";
  return v.ok();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  return f;
}

ModePolicy parse_policy(const std::string& s, int max_degree) {
  if (s == "adaptive") return LoadAdaptive{};
  if (s == "request") return ModeFromRequest{};
  if (s == "dp") return StaticLayout{1};
  if (s == "tp") return StaticLayout{max_degree};
  if (s.rfind("tp", 0) == 0) {
    try {
      return StaticLayout{std::stoi(s.substr(2))};
    } catch (const std::exception&) {
    }
  }
  throw Error(ErrorCode::ConfigError, "unknown policy '" + s + "' (adaptive, request, dp, tp, tpN)");
}

void print_summary(std::ostream& os, const MetricsSummary& m) {
  os << std::fixed << std::setprecision(2);
  os << "config                " << m.label << "\n"
     << "completed             " << m.completed << "\n"
     << "rejected              " << m.rejected << "\n"
     << "mean_ttft_ms          " << m.mean_ttft_ms << "\n"
     << "p90_ttft_ms           " << m.p90_ttft_ms << "\n"
     << "low_mean_ttft_ms      " << m.low_mean_ttft_ms << "\n"
     << "low_p90_ttft_ms       " << m.low_p90_ttft_ms << "\n"
     << "high_mean_ttft_ms     " << m.high_mean_ttft_ms << "\n"
     << "high_p90_ttft_ms      " << m.high_p90_ttft_ms << "\n"
     << "median_tpot_ms        " << m.median_tpot_ms << "\n"
     << "mean_ilt_ms           " << m.mean_ilt_ms << "\n"
     << "mean_queue_ms         " << m.mean_queue_ms << "\n"
     << "peak_throughput_tps   " << m.peak_throughput_tps << "\n";
  if (m.high_priority_mean_ttft_ms > 0) {
    os << "priority_mean_ttft_ms " << m.high_priority_mean_ttft_ms << "\n"
       << "priority_tpot_ms      " << m.high_priority_median_tpot_ms << "\n"
       << "normal_mean_ttft_ms   " << m.normal_priority_mean_ttft_ms << "\n"
       << "normal_tpot_ms        " << m.normal_priority_median_tpot_ms << "\n";
  }
  os.unsetf(std::ios::floatfield);
}

std::vector<std::pair<std::string, double>> summary_rows(const MetricsSummary& m) {
  return {{"completed", m.completed},
          {"rejected", m.rejected},
          {"mean_ttft_ms", m.mean_ttft_ms},
          {"p90_ttft_ms", m.p90_ttft_ms},
          {"low_mean_ttft_ms", m.low_mean_ttft_ms},
          {"low_p90_ttft_ms", m.low_p90_ttft_ms},
          {"high_mean_ttft_ms", m.high_mean_ttft_ms},
          {"high_p90_ttft_ms", m.high_p90_ttft_ms},
          {"median_tpot_ms", m.median_tpot_ms},
          {"mean_ilt_ms", m.mean_ilt_ms},
          {"mean_queue_ms", m.mean_queue_ms},
          {"peak_throughput_tps", m.peak_throughput_tps},
          {"priority_mean_ttft_ms", m.high_priority_mean_ttft_ms},
          {"priority_median_tpot_ms", m.high_priority_median_tpot_ms},
          {"normal_mean_ttft_ms", m.normal_priority_mean_ttft_ms},
          {"normal_median_tpot_ms", m.normal_priority_median_tpot_ms}};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shardshift: dynamic-parallelism serving simulator"};
  app.require_subcommand(1);

  // gen
  WorkloadSpec ws;
  std::string gen_out = "-";
  auto* gen = app.add_subcommand("gen", "generate a synthetic bursty trace");
  gen->add_option("--seed", ws.seed)->capture_default_str();
  gen->add_option("-n,--requests", ws.num_requests)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--phase-ms", ws.phase_ms)->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--low-min", ws.low_rate_min)->check(CLI::PositiveNumber);
  gen->add_option("--low-max", ws.low_rate_max)->check(CLI::PositiveNumber);
  gen->add_option("--high-min", ws.high_rate_min)->check(CLI::PositiveNumber);
  gen->add_option("--high-max", ws.high_rate_max)->check(CLI::PositiveNumber);
  gen->add_option("--prompt-min", ws.prompt_min)->check(CLI::PositiveNumber);
  gen->add_option("--prompt-max", ws.prompt_max)->check(CLI::PositiveNumber);
  gen->add_option("--output-min", ws.output_min)->check(CLI::PositiveNumber);
  gen->add_option("--output-max", ws.output_max)->check(CLI::PositiveNumber);
  gen->add_option("--priority-fraction", ws.high_priority_fraction)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--tp-fraction", ws.tp_request_fraction, "normal requests hinted to TP")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--tp-degree", ws.tp_hint_degree, "degree of TP hints")->check(CLI::PositiveNumber);
  gen->add_flag("--start-with-burst", ws.start_with_burst);
  gen->add_option("-o,--out", gen_out, "trace file, '-' for stdout")->capture_default_str();

  // run
  DeploymentFlags run_dep;
  std::string run_trace, run_label = "dynamic", run_strategy, run_policy, run_out, run_decisions, run_events,
                         run_collectives, run_kv;
  int run_fault = -1;
  auto* run = app.add_subcommand("run", "simulate one configuration on a trace");
  run->add_option("trace", run_trace, "trace file")->required();
  run_dep.attach(run, "llama70b-fp8");
  run->add_option("-l,--label", run_label, "named configuration")->check(CLI::IsMember(config_names()))
      ->capture_default_str();
  run->add_option("--strategy", run_strategy, "sequential, soft_preempt or hard_preempt");
  run->add_option("--policy", run_policy, "adaptive, request, dp, tp or tpN");
  run->add_option("-o,--out", run_out, "metrics CSV");
  run->add_option("--decisions", run_decisions, "decision log");
  run->add_option("--events", run_events, "simulation event log");
  run->add_option("--collectives", run_collectives, "collective log");
  run->add_option("--kv-dump", run_kv, "final block table dump");
  run->add_option("--inject-fault", run_fault, "TP unit (first rank) that posts a stale collective")
      ->group("");

  // compare
  DeploymentFlags cmp_dep;
  std::string cmp_trace, cmp_out;
  std::vector<std::string> cmp_labels;
  auto* cmp = app.add_subcommand("compare", "simulate several configurations on one trace");
  cmp->add_option("trace", cmp_trace, "trace file")->required();
  cmp->add_option("labels", cmp_labels, "named configurations")->required()->check(CLI::IsMember(config_names()));
  cmp_dep.attach(cmp, "llama70b-fp8");
  cmp->add_option("-o,--out", cmp_out, "comparison CSV, stdout when omitted");

  // capacity
  DeploymentFlags cap_dep;
  bool cap_dynamic = false;
  auto* cap = app.add_subcommand("capacity", "longest servable context per TP degree");
  cap_dep.attach(cap, "llama70b");
  cap->add_flag("--dynamic", cap_dynamic, "add the reconfigurable-deployment row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) {
      if (ws.prompt_min > ws.prompt_max || ws.output_min > ws.output_max || ws.low_rate_min > ws.low_rate_max ||
          ws.high_rate_min > ws.high_rate_max) {
        throw Error(ErrorCode::ConfigError, "range minimum exceeds maximum");
      }
      const auto trace = generate_trace(ws);
      if (gen_out == "-") {
        write_trace(trace, std::cout);
      } else {
        save_trace(trace, gen_out);
      }
      return kExitOk;
    }

    if (*run) {
      const auto dep = run_dep.resolve();
      if (!check_deployment(dep)) return kExitValidation;
      const auto trace = load_trace(run_trace);
      auto cfg = named_config(run_label, dep.model, dep.deployment);
      if (!run_strategy.empty()) cfg.options.strategy = parse_strategy(run_strategy);
      if (!run_policy.empty()) cfg.options.policy = parse_policy(run_policy, dep.deployment.max_degree());
      cfg.options.keep_collective_log = !run_collectives.empty();
      if (run_fault >= 0) cfg.fault_unit = run_fault;

      const auto res = run_simulation(trace, cfg);
      print_summary(std::cout, res.summary);
      if (!run_out.empty()) {
        auto f = open_out(run_out);
        write_metrics_header(f);
        write_metrics(f, res.summary, res.records);
      }
      if (!run_decisions.empty()) {
        auto f = open_out(run_decisions);
        for (const auto& d : res.decisions) f << format_decision(d) << "\n";
      }
      if (!run_events.empty()) {
        auto f = open_out(run_events);
        for (const auto& e : res.events) f << format_event(e) << "\n";
      }
      if (!run_collectives.empty()) {
        auto f = open_out(run_collectives);
        for (const auto& c : res.collectives) f << format_collective_record(c) << "\n";
      }
      if (!run_kv.empty()) {
        auto f = open_out(run_kv);
        f << res.kv_dump;
      }
      return kExitOk;
    }

    if (*cmp) {
      const auto dep = cmp_dep.resolve();
      if (!check_deployment(dep)) return kExitValidation;
      const auto trace = load_trace(cmp_trace);
      std::vector<SimConfig> configs;
      for (const auto& l : cmp_labels) configs.push_back(named_config(l, dep.model, dep.deployment));
      const auto results = compare_configs(trace, configs);

      std::ofstream file;
      if (!cmp_out.empty()) file = open_out(cmp_out);
      std::ostream& os = cmp_out.empty() ? std::cout : file;
      os << "metric";
      for (const auto& l : cmp_labels) os << "," << l;
      os << "\n";
      const auto names = summary_rows(results.front().summary);
      for (std::size_t row = 0; row < names.size(); ++row) {
        os << names[row].first;
        for (const auto& r : results) os << "," << fmt(summary_rows(r.summary)[row].second);
        os << "\n";
      }
      return kExitOk;
    }

    if (*cap) {
      auto dep = cap_dep.resolve();
      // Capacity is per group; the engine count only needs to admit the widest degree.
      if (cap_dep.engines == 0) dep.deployment.num_engines = std::max(dep.deployment.num_engines, dep.deployment.max_degree());
      if (!check_deployment(dep)) return kExitValidation;
      const CostModel cost;
      const auto& d = dep.deployment;
      std::cout << "layout,degree,max_context_tokens,live_switch_ms,cold_start_ms,cold_over_live\n";
      auto row = [&](const std::string& layout, int p, bool dyn) {
        const double cold = cost.cold_start(p);
        std::cout << layout << "," << p << "," << max_context(dep.model, d, p, dyn) << "," << fmt(d.switch_latency_ms)
                  << "," << fmt(cold) << "," << fmt(d.switch_latency_ms > 0 ? cold / d.switch_latency_ms : 0.0)
                  << "\n";
      };
      std::vector<int> degrees = d.supported_tp_degrees;
      std::sort(degrees.begin(), degrees.end());
      for (int p : degrees) row("static_tp" + std::to_string(p), p, false);
      if (cap_dynamic) row("dynamic", d.max_degree(), true);
      return kExitOk;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::MismatchFault ? kExitFault : kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}

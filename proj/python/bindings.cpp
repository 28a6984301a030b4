#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "shardshift/kvcache.hpp"
#include "shardshift/comms.hpp"
#include "shardshift/simulator.hpp"

namespace py = pybind11;
using namespace shardshift;

namespace {

py::dict summary_dict(const MetricsSummary& m) {
  py::dict d;
  d["label"] = m.label;
  d["completed"] = m.completed;
  d["rejected"] = m.rejected;
  d["mean_ttft_ms"] = m.mean_ttft_ms;
  d["median_ttft_ms"] = m.median_ttft_ms;
  d["p90_ttft_ms"] = m.p90_ttft_ms;
  d["mean_tpot_ms"] = m.mean_tpot_ms;
  d["median_tpot_ms"] = m.median_tpot_ms;
  d["mean_ilt_ms"] = m.mean_ilt_ms;
  d["p99_ilt_ms"] = m.p99_ilt_ms;
  d["mean_queue_ms"] = m.mean_queue_ms;
  d["peak_throughput_tps"] = m.peak_throughput_tps;
  d["mean_throughput_tps"] = m.mean_throughput_tps;
  d["makespan_ms"] = m.makespan_ms;
  d["low_mean_ttft_ms"] = m.low_mean_ttft_ms;
  d["low_p90_ttft_ms"] = m.low_p90_ttft_ms;
  d["high_mean_ttft_ms"] = m.high_mean_ttft_ms;
  d["high_p90_ttft_ms"] = m.high_p90_ttft_ms;
  d["high_priority_mean_ttft_ms"] = m.high_priority_mean_ttft_ms;
  d["normal_priority_mean_ttft_ms"] = m.normal_priority_mean_ttft_ms;
  return d;
}

SimConfig make_config(const std::string& name, const std::string& preset, const DeploymentConfig& deployment,
                      const std::optional<std::string>& strategy) {
  auto cfg = named_config(name, preset_by_name(preset), deployment);
  if (strategy) cfg.options.strategy = parse_strategy(*strategy);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Discrete-event simulator for dynamic TP/DP switching in LLM serving";

  static py::exception<Error> error(m, "ShardshiftError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const py::object cls = error;
      py::object exc = cls(e.what());
      exc.attr("code") = std::string(to_string(e.code()));
      PyErr_SetObject(cls.ptr(), exc.ptr());
    }
  });

  py::class_<ModelSpec>(m, "ModelSpec")
      .def_readonly("name", &ModelSpec::name)
      .def_readonly("num_layers", &ModelSpec::num_layers)
      .def_readonly("hidden_dim", &ModelSpec::hidden_dim)
      .def_readonly("num_kv_heads", &ModelSpec::num_kv_heads)
      .def_readonly("head_dim", &ModelSpec::head_dim)
      .def_readonly("elem_bytes", &ModelSpec::elem_bytes)
      .def_readonly("weight_bytes", &ModelSpec::weight_bytes);
  m.def("preset", &preset_by_name, py::arg("name"));
  m.def("preset_names", &preset_names);
  m.def("kv_bytes_per_token", &kv_bytes_per_token);

  py::class_<DeploymentConfig>(m, "DeploymentConfig")
      .def(py::init<>())
      .def_readwrite("num_engines", &DeploymentConfig::num_engines)
      .def_readwrite("supported_tp_degrees", &DeploymentConfig::supported_tp_degrees)
      .def_readwrite("gpu_mem_bytes", &DeploymentConfig::gpu_mem_bytes)
      .def_readwrite("mem_utilization", &DeploymentConfig::mem_utilization)
      .def_readwrite("b_base", &DeploymentConfig::b_base)
      .def_readwrite("switch_latency_ms", &DeploymentConfig::switch_latency_ms)
      .def_readwrite("reconfig_reserve_bytes", &DeploymentConfig::reconfig_reserve_bytes);

  py::class_<WorkloadSpec>(m, "WorkloadSpec")
      .def(py::init<>())
      .def_readwrite("num_requests", &WorkloadSpec::num_requests)
      .def_readwrite("phase_ms", &WorkloadSpec::phase_ms)
      .def_readwrite("low_rate_min", &WorkloadSpec::low_rate_min)
      .def_readwrite("low_rate_max", &WorkloadSpec::low_rate_max)
      .def_readwrite("high_rate_min", &WorkloadSpec::high_rate_min)
      .def_readwrite("high_rate_max", &WorkloadSpec::high_rate_max)
      .def_readwrite("start_with_burst", &WorkloadSpec::start_with_burst)
      .def_readwrite("prompt_min", &WorkloadSpec::prompt_min)
      .def_readwrite("prompt_max", &WorkloadSpec::prompt_max)
      .def_readwrite("output_min", &WorkloadSpec::output_min)
      .def_readwrite("output_max", &WorkloadSpec::output_max)
      .def_readwrite("high_priority_fraction", &WorkloadSpec::high_priority_fraction)
      .def_readwrite("tp_request_fraction", &WorkloadSpec::tp_request_fraction)
      .def_readwrite("tp_hint_degree", &WorkloadSpec::tp_hint_degree)
      .def_readwrite("seed", &WorkloadSpec::seed);

  py::class_<Request>(m, "Request")
      .def_readonly("id", &Request::id)
      .def_property_readonly("arrival_ms", [](const Request& r) { return to_ms(r.arrival_time); })
      .def_readonly("prompt_tokens", &Request::prompt_tokens)
      .def_readonly("output_tokens", &Request::output_tokens)
      .def_property_readonly("priority", [](const Request& r) { return std::string(to_string(r.priority)); })
      .def_property_readonly("mode", [](const Request& r) { return to_string(r.mode); });

  py::class_<Trace>(m, "Trace")
      .def_readonly("requests", &Trace::requests)
      .def("__len__", [](const Trace& t) { return t.requests.size(); })
      .def("save", [](const Trace& t, const std::string& path) { save_trace(t, path); });
  m.def("generate_trace", &generate_trace, py::arg("spec") = WorkloadSpec{});
  m.def("load_trace", &load_trace, py::arg("path"));

  py::class_<SimResult>(m, "SimResult")
      .def_readonly("label", &SimResult::label)
      .def_readonly("iterations", &SimResult::iterations)
      .def_readonly("steps", &SimResult::steps)
      .def_readonly("group_constructions_after_startup", &SimResult::group_constructions_after_startup)
      .def_property_readonly("end_ms", [](const SimResult& r) { return to_ms(r.end_time); })
      .def_property_readonly("summary", [](const SimResult& r) { return summary_dict(r.summary); })
      .def_property_readonly("decisions", [](const SimResult& r) {
        std::vector<std::string> out;
        out.reserve(r.decisions.size());
        for (const auto& d : r.decisions) out.push_back(format_decision(d));
        return out;
      });

  m.def("config_names", &config_names);
  m.def(
      "run",
      [](const Trace& trace, const std::string& config, const std::string& preset, const DeploymentConfig& deployment,
         const std::optional<std::string>& strategy) {
        py::gil_scoped_release release;
        return run_simulation(trace, make_config(config, preset, deployment, strategy));
      },
      py::arg("trace"), py::arg("config") = "dynamic", py::arg("preset") = "llama70b-fp8",
      py::arg("deployment") = DeploymentConfig{}, py::arg("strategy") = std::nullopt);
  m.def(
      "compare",
      [](const Trace& trace, const std::vector<std::string>& configs, const std::string& preset,
         const DeploymentConfig& deployment) {
        std::vector<SimConfig> cfgs;
        for (const auto& c : configs) cfgs.push_back(make_config(c, preset, deployment, std::nullopt));
        py::gil_scoped_release release;
        return compare_configs(trace, cfgs);
      },
      py::arg("trace"), py::arg("configs"), py::arg("preset") = "llama70b-fp8",
      py::arg("deployment") = DeploymentConfig{});

  m.def("adapt_block_size", &adapt_block_size, py::arg("p"), py::arg("b_base"));
  m.def(
      "max_context",
      [](const std::string& preset, const DeploymentConfig& cfg, int p, bool dynamic) {
        return max_context(preset_by_name(preset), cfg, p, dynamic);
      },
      py::arg("preset"), py::arg("deployment"), py::arg("p"), py::arg("dynamic") = false);
  m.def(
      "enumerate_tp_groups",
      [](int n, const std::vector<int>& degrees) { return enumerate_tp_groups(n, degrees); }, py::arg("num_engines"),
      py::arg("degrees"));
}

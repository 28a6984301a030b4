#include "shardshift/core.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace shardshift {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::IndivisibleTPDegree: return "IndivisibleTPDegree";
    case ErrorCode::ZeroMemory: return "ZeroMemory";
    case ErrorCode::EmptyDegreeSet: return "EmptyDegreeSet";
    case ErrorCode::InvalidMemUtilization: return "InvalidMemUtilization";
    case ErrorCode::InvalidModelSpec: return "InvalidModelSpec";
    case ErrorCode::ToyDimsTooLarge: return "ToyDimsTooLarge";
    case ErrorCode::RankOutOfRange: return "RankOutOfRange";
    case ErrorCode::IndivisibleExtent: return "IndivisibleExtent";
    case ErrorCode::GroupSizeMismatch: return "GroupSizeMismatch";
    case ErrorCode::UnsupportedDegree: return "UnsupportedDegree";
    case ErrorCode::OutOfBlocks: return "OutOfBlocks";
    case ErrorCode::DoubleAllocate: return "DoubleAllocate";
    case ErrorCode::UnknownRequest: return "UnknownRequest";
    case ErrorCode::WeightsExceedMemory: return "WeightsExceedMemory";
    case ErrorCode::UnknownGroup: return "UnknownGroup";
    case ErrorCode::MismatchFault: return "MismatchFault";
    case ErrorCode::EpochSkew: return "EpochSkew";
    case ErrorCode::NoFeasibleDegree: return "NoFeasibleDegree";
    case ErrorCode::InvalidTransition: return "InvalidTransition";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

std::uint64_t kv_elems_per_token(const ModelSpec& spec) {
  return 2ULL * static_cast<std::uint64_t>(spec.num_layers) * static_cast<std::uint64_t>(spec.num_kv_heads) *
         static_cast<std::uint64_t>(spec.head_dim);
}

std::uint64_t kv_bytes_per_token(const ModelSpec& spec) {
  return kv_elems_per_token(spec) * static_cast<std::uint64_t>(spec.elem_bytes);
}

std::string to_string(ParallelMode mode) {
  return mode.is_tp() ? "tp" + std::to_string(mode.degree) : "dp";
}

std::string_view to_string(Priority p) { return p == Priority::High ? "high" : "normal"; }

std::string_view to_string(RequestState s) {
  switch (s) {
    case RequestState::Queued: return "Queued";
    case RequestState::Running: return "Running";
    case RequestState::Paused: return "Paused";
    case RequestState::SpeculativeDP: return "SpeculativeDP";
    case RequestState::Finished: return "Finished";
  }
  return "?";
}

bool is_legal_transition(RequestState from, RequestState to) {
  using S = RequestState;
  switch (from) {
    case S::Queued: return to == S::Running || to == S::SpeculativeDP;
    case S::Running: return to == S::Finished || to == S::Paused;
    case S::Paused: return to == S::Running;
    case S::SpeculativeDP: return to == S::Running;
    case S::Finished: return false;
  }
  return false;
}

void Request::transition(RequestState to) {
  if (!is_legal_transition(state, to)) {
    throw Error(ErrorCode::InvalidTransition, "request " + std::to_string(id) + ": " +
                                                  std::string(to_string(state)) + " -> " +
                                                  std::string(to_string(to)));
  }
  state = to;
}

int DeploymentConfig::max_degree() const {
  int best = 1;
  for (int p : supported_tp_degrees) best = std::max(best, p);
  return best;
}

bool DeploymentConfig::supports(int degree) const {
  return degree == 1 ||
         std::find(supported_tp_degrees.begin(), supported_tp_degrees.end(), degree) != supported_tp_degrees.end();
}

ValidationResult validate_deployment(const ModelSpec& spec, const DeploymentConfig& cfg) {
  ValidationResult out;
  auto fail = [&](ErrorCode c, std::string d) { out.errors.push_back({c, std::move(d)}); };

  if (spec.num_layers <= 0 || spec.hidden_dim <= 0 || spec.num_kv_heads <= 0 || spec.head_dim <= 0 ||
      spec.elem_bytes <= 0 || spec.max_model_len <= 0) {
    fail(ErrorCode::InvalidModelSpec, "all model counts must be positive");
  } else if (spec.hidden_dim % spec.head_dim != 0) {
    fail(ErrorCode::InvalidModelSpec, "hidden_dim must be a multiple of head_dim");
  }
  if (spec.weight_bytes == 0) fail(ErrorCode::InvalidModelSpec, "weight_bytes must be positive");
  if (cfg.num_engines <= 0) fail(ErrorCode::ConfigError, "num_engines must be positive");
  if (cfg.gpus_per_engine != 1) fail(ErrorCode::ConfigError, "gpus_per_engine must be 1");
  if (cfg.b_base <= 0) fail(ErrorCode::ConfigError, "b_base must be positive");
  if (cfg.switch_latency_ms < 0) fail(ErrorCode::ConfigError, "switch_latency_ms must be non-negative");
  if (cfg.gpu_mem_bytes == 0) fail(ErrorCode::ZeroMemory, "gpu_mem_bytes is zero");
  if (!(cfg.mem_utilization > 0.0 && cfg.mem_utilization <= 1.0)) {
    fail(ErrorCode::InvalidMemUtilization, "mem_utilization must be in (0, 1]");
  }
  if (cfg.supported_tp_degrees.empty()) fail(ErrorCode::EmptyDegreeSet, "supported_tp_degrees is empty");
  for (int p : cfg.supported_tp_degrees) {
    if (p < 1) {
      fail(ErrorCode::IndivisibleTPDegree, "degree " + std::to_string(p) + " is not positive");
      continue;
    }
    if (cfg.num_engines > 0 && cfg.num_engines % p != 0) {
      fail(ErrorCode::IndivisibleTPDegree,
           "degree " + std::to_string(p) + " does not divide num_engines " + std::to_string(cfg.num_engines));
    }
    if (spec.num_kv_heads > 0 && spec.num_kv_heads % p != 0) {
      fail(ErrorCode::IndivisibleTPDegree,
           "degree " + std::to_string(p) + " does not divide num_kv_heads " + std::to_string(spec.num_kv_heads));
    }
  }
  if (out.errors.empty()) out.config = cfg;
  return out;
}

ModelSpec llama70b_preset() {
  return {"llama70b", 80, 8192, 8, 128, 2, 140'000'000'000ULL, 4'000'000};
}

ModelSpec llama70b_fp8_preset() {
  auto s = llama70b_preset();
  s.name = "llama70b-fp8";
  s.weight_bytes = 70'000'000'000ULL;
  s.elem_bytes = 1;  // fp8 KV cache
  return s;
}

ModelSpec moe120b_preset() {
  // Geometry only; expert routing is not modeled.
  return {"moe120b", 36, 2880, 8, 64, 2, 65'000'000'000ULL, 131'072};
}

ModelSpec nemotron8b_preset() {
  return {"nemotron8b", 32, 4096, 8, 128, 2, 16'000'000'000ULL, 4'000'000};
}

std::vector<std::string> preset_names() { return {"llama70b", "llama70b-fp8", "moe120b", "nemotron8b"}; }

ModelSpec preset_by_name(std::string_view name) {
  if (name == "llama70b") return llama70b_preset();
  if (name == "llama70b-fp8") return llama70b_fp8_preset();
  if (name == "moe120b") return moe120b_preset();
  if (name == "nemotron8b") return nemotron8b_preset();
  throw Error(ErrorCode::ConfigError, "unknown model preset '" + std::string(name) + "'");
}

namespace {

std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size()) {
    throw Error(ErrorCode::ConfigError, "bad value for '" + key + "': '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    double d = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, "bad value for '" + key + "': '" + value + "'");
  }
}

std::uint64_t parse_bytes(const std::string& key, const std::string& value) {
  // Accept plain integers and scientific notation such as 141e9.
  if (value.find_first_of("eE.") != std::string::npos) {
    double d = parse_double(key, value);
    if (d < 0) throw Error(ErrorCode::ConfigError, "negative byte count for '" + key + "'");
    return static_cast<std::uint64_t>(d + 0.5);
  }
  return parse_number<std::uint64_t>(key, value);
}

}  // namespace

ConfigFile parse_config(std::string_view text, ConfigFile cfg) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto stripped = trim(line);
    if (stripped.empty()) continue;
    auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": expected key = value");
    }
    auto key = trim(std::string_view(stripped).substr(0, eq));
    auto value = trim(std::string_view(stripped).substr(eq + 1));
    auto& m = cfg.model;
    auto& d = cfg.deployment;
    if (key == "name") m.name = value;
    else if (key == "num_layers") m.num_layers = parse_number<int>(key, value);
    else if (key == "hidden_dim") m.hidden_dim = parse_number<int>(key, value);
    else if (key == "num_kv_heads") m.num_kv_heads = parse_number<int>(key, value);
    else if (key == "head_dim") m.head_dim = parse_number<int>(key, value);
    else if (key == "elem_bytes") m.elem_bytes = parse_number<int>(key, value);
    else if (key == "weight_bytes") m.weight_bytes = parse_bytes(key, value);
    else if (key == "max_model_len") m.max_model_len = parse_number<std::int64_t>(key, value);
    else if (key == "num_engines") d.num_engines = parse_number<int>(key, value);
    else if (key == "gpus_per_engine") d.gpus_per_engine = parse_number<int>(key, value);
    else if (key == "supported_tp_degrees") {
      d.supported_tp_degrees.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        auto t = trim(item);
        if (!t.empty()) d.supported_tp_degrees.push_back(parse_number<int>(key, t));
      }
    } else if (key == "gpu_mem_bytes") d.gpu_mem_bytes = parse_bytes(key, value);
    else if (key == "mem_utilization") d.mem_utilization = parse_double(key, value);
    else if (key == "b_base") d.b_base = parse_number<int>(key, value);
    else if (key == "switch_latency_ms") d.switch_latency_ms = parse_double(key, value);
    else if (key == "reconfig_reserve_bytes") d.reconfig_reserve_bytes = parse_bytes(key, value);
    else throw Error(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return cfg;
}

ConfigFile load_config(const std::string& path, ConfigFile defaults) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config(buf.str(), std::move(defaults));
}

}  // namespace shardshift

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace shardshift {

// Simulated time is an integer count of microseconds; public surfaces speak milliseconds.
using SimTime = std::int64_t;

constexpr SimTime from_ms(double ms) { return static_cast<SimTime>(ms * 1000.0 + (ms >= 0 ? 0.5 : -0.5)); }
constexpr double to_ms(SimTime t) { return static_cast<double>(t) / 1000.0; }

using RequestId = std::int64_t;
using Rank = int;

enum class ErrorCode {
  IndivisibleTPDegree,
  ZeroMemory,
  EmptyDegreeSet,
  InvalidMemUtilization,
  InvalidModelSpec,
  ToyDimsTooLarge,
  RankOutOfRange,
  IndivisibleExtent,
  GroupSizeMismatch,
  UnsupportedDegree,
  OutOfBlocks,
  DoubleAllocate,
  UnknownRequest,
  WeightsExceedMemory,
  UnknownGroup,
  MismatchFault,
  EpochSkew,
  NoFeasibleDegree,
  InvalidTransition,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

struct ModelSpec {
  std::string name = "toy";
  int num_layers = 1;
  int hidden_dim = 8;     // D
  int num_kv_heads = 2;   // H_base
  int head_dim = 4;
  int elem_bytes = 2;     // P_size
  std::uint64_t weight_bytes = 1;
  std::int64_t max_model_len = 4096;
};

/// Total KV bytes per token over the whole model: 2 (K and V) x layers x kv heads x head_dim x elem bytes.
std::uint64_t kv_bytes_per_token(const ModelSpec& spec);

/// Elements of K and V stored per token across all layers at TP degree 1.
std::uint64_t kv_elems_per_token(const ModelSpec& spec);

enum class Priority { Normal, High };

/// Parallel mode of a request or engine. degree == 1 is DP; degree > 1 is TP(degree).
struct ParallelMode {
  int degree = 1;
  bool is_tp() const { return degree > 1; }
  static ParallelMode dp() { return {1}; }
  static ParallelMode tp(int n) { return {n}; }
  friend bool operator==(ParallelMode, ParallelMode) = default;
};

std::string to_string(ParallelMode mode);
std::string_view to_string(Priority p);

enum class RequestState { Queued, Running, Paused, SpeculativeDP, Finished };

std::string_view to_string(RequestState s);

/// Legal request state transitions. Everything else throws InvalidTransition.
bool is_legal_transition(RequestState from, RequestState to);

struct Request {
  RequestId id = 0;
  SimTime arrival_time = 0;
  int prompt_tokens = 1;
  int output_tokens = 1;
  Priority priority = Priority::Normal;
  ParallelMode mode{};
  RequestState state = RequestState::Queued;

  void transition(RequestState to);
  friend bool operator==(const Request&, const Request&) = default;
};

struct DeploymentConfig {
  int num_engines = 4;
  int gpus_per_engine = 1;
  std::vector<int> supported_tp_degrees{2, 4};
  std::uint64_t gpu_mem_bytes = 141'000'000'000ULL;
  double mem_utilization = 0.9;
  int b_base = 16;
  double switch_latency_ms = 15.0;
  std::uint64_t reconfig_reserve_bytes = 16'000'000'000ULL;

  int max_degree() const;
  bool supports(int degree) const;
};

struct ConfigViolation {
  ErrorCode code;
  std::string detail;
};

/// Either the validated config or the full list of violated invariants.
struct ValidationResult {
  std::optional<DeploymentConfig> config;
  std::vector<ConfigViolation> errors;
  bool ok() const { return config.has_value(); }
};

ValidationResult validate_deployment(const ModelSpec& spec, const DeploymentConfig& cfg);

struct EngineState {
  Rank engine_id = 0;
  ParallelMode current_mode{};
  std::vector<Rank> group;  // empty in DP mode
  int rank_in_group = 0;
  std::vector<RequestId> active_requests;
  SimTime busy_until = 0;
};

// Model presets. Geometry approximates the public model cards; weight bytes are dense totals.
ModelSpec llama70b_preset();       // fp16 weights, used by the capacity table
ModelSpec llama70b_fp8_preset();   // fp8 weights and KV; one replica fits per engine
ModelSpec moe120b_preset();
ModelSpec nemotron8b_preset();
ModelSpec preset_by_name(std::string_view name);
std::vector<std::string> preset_names();

/// Flat `key = value` document. Keys are the snake_case field names of ModelSpec and
/// DeploymentConfig; unknown keys and malformed values throw ConfigError.
struct ConfigFile {
  ModelSpec model;
  DeploymentConfig deployment;
};

ConfigFile parse_config(std::string_view text, ConfigFile defaults = {});
ConfigFile load_config(const std::string& path, ConfigFile defaults = {});

}  // namespace shardshift

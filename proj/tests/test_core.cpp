#include <doctest.h>

#include <array>
#include <set>

#include "shardshift/core.hpp"

using namespace shardshift;

namespace {

ModelSpec spec_with_heads(int h) {
  ModelSpec s = llama70b_preset();
  s.num_kv_heads = h;
  return s;
}

bool has_code(const ValidationResult& v, ErrorCode c) {
  for (const auto& e : v.errors)
    if (e.code == c) return true;
  return false;
}

}  // namespace

TEST_CASE("validate_deployment accepts divisible degrees") {
  DeploymentConfig cfg;
  cfg.num_engines = 4;
  cfg.supported_tp_degrees = {2, 4};
  CHECK(validate_deployment(spec_with_heads(8), cfg).ok());

  cfg.num_engines = 8;
  cfg.supported_tp_degrees = {2, 4, 8};
  CHECK(validate_deployment(spec_with_heads(8), cfg).ok());
}

TEST_CASE("validate_deployment reports every violated invariant") {
  DeploymentConfig cfg;
  cfg.supported_tp_degrees = {3};
  auto v = validate_deployment(spec_with_heads(8), cfg);
  CHECK_FALSE(v.ok());
  CHECK(has_code(v, ErrorCode::IndivisibleTPDegree));

  cfg.supported_tp_degrees = {};
  CHECK(has_code(validate_deployment(spec_with_heads(8), cfg), ErrorCode::EmptyDegreeSet));

  cfg = {};
  cfg.gpu_mem_bytes = 0;
  CHECK(has_code(validate_deployment(spec_with_heads(8), cfg), ErrorCode::ZeroMemory));

  cfg = {};
  cfg.mem_utilization = 1.5;
  CHECK(has_code(validate_deployment(spec_with_heads(8), cfg), ErrorCode::InvalidMemUtilization));

  // Degree divides the engine count but not the KV heads.
  cfg = {};
  cfg.num_engines = 8;
  cfg.supported_tp_degrees = {8};
  CHECK(has_code(validate_deployment(spec_with_heads(4), cfg), ErrorCode::IndivisibleTPDegree));

  cfg = {};
  cfg.gpu_mem_bytes = 0;
  cfg.supported_tp_degrees = {};
  CHECK(validate_deployment(spec_with_heads(8), cfg).errors.size() >= 2);
}

TEST_CASE("validate_deployment is total over a parameter grid") {
  for (int n : {0, 1, 2, 3, 4, 8}) {
    for (int h : {1, 2, 8}) {
      for (std::vector<int> degrees : {std::vector<int>{}, {2}, {2, 4}, {3}, {8}, {0}}) {
        for (double util : {0.0, 0.5, 1.0, 1.1}) {
          DeploymentConfig cfg;
          cfg.num_engines = n;
          cfg.supported_tp_degrees = degrees;
          cfg.mem_utilization = util;
          const auto v = validate_deployment(spec_with_heads(h), cfg);
          CHECK(v.ok() != !v.errors.empty());
        }
      }
    }
  }
}

TEST_CASE("kv_bytes_per_token") {
  ModelSpec s;
  s.num_layers = 80;
  s.num_kv_heads = 8;
  s.head_dim = 128;
  s.elem_bytes = 2;
  CHECK(kv_bytes_per_token(s) == 327'680);

  s.num_layers = 1;
  s.num_kv_heads = 1;
  s.head_dim = 1;
  s.elem_bytes = 1;
  CHECK(kv_bytes_per_token(s) == 2);

  s.num_layers = 32;
  s.num_kv_heads = 8;
  s.head_dim = 128;
  s.elem_bytes = 2;
  CHECK(kv_bytes_per_token(s) == 131'072);

  CHECK(kv_bytes_per_token(llama70b_preset()) == 327'680);
  CHECK(kv_bytes_per_token(nemotron8b_preset()) == 131'072);
}

TEST_CASE("request state machine is exactly the legal graph") {
  using S = RequestState;
  const std::array all{S::Queued, S::Running, S::Paused, S::SpeculativeDP, S::Finished};
  const std::set<std::pair<S, S>> legal{{S::Queued, S::Running},     {S::Queued, S::SpeculativeDP},
                                        {S::Running, S::Finished},   {S::Running, S::Paused},
                                        {S::Paused, S::Running},     {S::SpeculativeDP, S::Running}};
  for (S from : all) {
    for (S to : all) {
      const bool expect = legal.count({from, to}) != 0;
      CHECK(is_legal_transition(from, to) == expect);
      Request r;
      r.state = from;
      if (expect) {
        r.transition(to);
        CHECK(r.state == to);
      } else {
        CHECK_THROWS_AS(r.transition(to), Error);
        CHECK(r.state == from);
      }
    }
  }
}

TEST_CASE("time conversion round trips at microsecond resolution") {
  CHECK(from_ms(15.0) == 15'000);
  CHECK(to_ms(from_ms(0.001)) == doctest::Approx(0.001));
  CHECK(from_ms(-2.5) == -2'500);
}

TEST_CASE("parse_config reads every key and rejects unknown ones") {
  const auto cfg = parse_config(R"(
    # deployment
    name = custom
    num_layers = 4
    hidden_dim = 64
    num_kv_heads = 4
    head_dim = 16
    elem_bytes = 1
    weight_bytes = 1e9
    max_model_len = 8192
    num_engines = 8
    gpus_per_engine = 1
    supported_tp_degrees = 2, 4
    gpu_mem_bytes = 80e9
    mem_utilization = 0.85
    b_base = 8
    switch_latency_ms = 20
    reconfig_reserve_bytes = 1000
  )");
  CHECK(cfg.model.name == "custom");
  CHECK(cfg.model.num_layers == 4);
  CHECK(cfg.model.weight_bytes == 1'000'000'000ULL);
  CHECK(cfg.deployment.num_engines == 8);
  CHECK(cfg.deployment.supported_tp_degrees == std::vector<int>{2, 4});
  CHECK(cfg.deployment.gpu_mem_bytes == 80'000'000'000ULL);
  CHECK(cfg.deployment.mem_utilization == doctest::Approx(0.85));
  CHECK(cfg.deployment.b_base == 8);
  CHECK(cfg.deployment.switch_latency_ms == doctest::Approx(20));
  CHECK(cfg.deployment.reconfig_reserve_bytes == 1000);

  CHECK_THROWS_AS(parse_config("colour = blue"), Error);
  CHECK_THROWS_AS(parse_config("num_engines = four"), Error);
  CHECK_THROWS_AS(parse_config("num_engines"), Error);
  CHECK_THROWS_AS(load_config("/nonexistent/shardshift.cfg"), Error);
}

TEST_CASE("presets resolve by name") {
  for (const auto& name : preset_names()) CHECK(preset_by_name(name).name == name);
  CHECK_THROWS_AS(preset_by_name("gpt2"), Error);
  CHECK(to_string(ParallelMode::tp(4)) == "tp4");
  CHECK(to_string(ParallelMode::dp()) == "dp");
}

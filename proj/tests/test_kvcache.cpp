#include <doctest.h>

#include <random>

#include "shardshift/kvcache.hpp"
#include "oracles.hpp"

using namespace shardshift;

namespace {

ModelSpec unit_spec() {
  ModelSpec s;
  s.num_layers = 1;
  s.num_kv_heads = 1;
  s.head_dim = 1;
  s.elem_bytes = 1;
  s.hidden_dim = 1;
  s.weight_bytes = 200;
  return s;
}

KVCacheAdaptor pool(int b_base, int engines, int blocks_each, std::uint64_t width = 64, int elem_bytes = 2) {
  return KVCacheAdaptor(BlockGeometry{b_base, width, elem_bytes}, engines, blocks_each);
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::ConfigError;
}

const std::vector<Rank> e0{0};
const std::vector<Rank> e01{0, 1};
const std::vector<Rank> e0123{0, 1, 2, 3};

}  // namespace

TEST_CASE("block size scales with degree and bytes stay fixed") {
  CHECK(adapt_block_size(1, 4) == 4);
  CHECK(adapt_block_size(2, 4) == 8);
  CHECK(adapt_block_size(4, 4) == 16);
  CHECK(adapt_block_size(1, 16) == 16);
  CHECK(adapt_block_size(8, 16) == 128);

  const std::uint64_t d = 8192;
  for (int b : {4, 16}) {
    const BlockGeometry g{b, d, 2};
    for (int p : {1, 2, 4, 8}) CHECK(g.block_bytes_at(p) == g.block_bytes());
    CHECK(g.block_bytes_at(8) == 8ULL * static_cast<std::uint64_t>(b) * (d / 8) * 2);
  }
}

TEST_CASE("allocate sizes by ceil division") {
  auto kv = pool(4, 4, 16);
  CHECK(kv.allocate(1, 9, 1, e0).block_ids.size() == 3);
  const auto& e = kv.allocate(2, 9, 2, e01);
  CHECK(e.logical_blocks() == 2);
  CHECK(e.block_capacity == 8);
  CHECK(e.block_ids.size() == 4);  // one physical block per member per logical block
  kv.check_invariants();

  auto tiny = pool(4, 1, 1);
  CHECK(code_of([&] { tiny.allocate(1, 100, 1, e0); }) == ErrorCode::OutOfBlocks);
  CHECK(tiny.free_blocks() == 1);
  CHECK(code_of([&] { kv.allocate(1, 1, 1, e0); }) == ErrorCode::DoubleAllocate);
  CHECK(code_of([&] { kv.allocate(9, 1, 2, e0); }) == ErrorCode::GroupSizeMismatch);
}

TEST_CASE("DP blocks stay on the owning engine; TP draws from every member") {
  auto kv = pool(4, 4, 8);
  const std::vector<Rank> e2{2};
  for (int b : kv.allocate(1, 20, 1, e2).block_ids) CHECK(b / 8 == 2);
  const auto& tp = kv.allocate(2, 40, 4, e0123);
  std::vector<int> per(4, 0);
  for (int b : tp.block_ids) ++per[static_cast<std::size_t>(b / 8)];
  CHECK(per == std::vector<int>{3, 3, 3, 3});
}

TEST_CASE("append_tokens pulls a block only when the tail fills") {
  auto kv = pool(4, 1, 16);
  kv.allocate(1, 4, 1, e0);
  CHECK(kv.append_tokens(1, 1).block_ids.size() == 2);
  kv.allocate(2, 3, 1, e0);
  CHECK(kv.append_tokens(2, 1).block_ids.size() == 1);

  auto kv8 = pool(4, 2, 16);
  kv8.allocate(3, 0, 2, e01);
  CHECK(kv8.entry(3).logical_blocks() == 0);
  CHECK(kv8.append_tokens(3, 17).logical_blocks() == 3);
  kv8.check_invariants();

  auto full = pool(4, 1, 1);
  full.allocate(1, 4, 1, e0);
  CHECK(code_of([&] { full.append_tokens(1, 1); }) == ErrorCode::OutOfBlocks);
  CHECK(full.entry(1).tokens_stored == 4);
}

TEST_CASE("dump reproduces the example block table") {
  auto kv = pool(4, 1, 4);
  kv.allocate(1, 4, 1, e0);
  kv.allocate(0, 4, 1, e0);
  kv.allocate(2, 3, 1, e0);
  kv.append_tokens(0, 1);
  CHECK(kv.dump() == "0,1,4,5,1,3\n1,1,4,4,0\n2,1,4,3,2\n");
}

TEST_CASE("remap reports") {
  auto kv = pool(4, 4, 32);
  kv.allocate(1, 30, 1, e0);
  const auto before = kv.entry(1).block_ids;
  auto rep = kv.remap_on_switch(1, 1, RemapPolicy::PreserveResident);
  CHECK(rep == RemapReport{1, 0, 0});
  CHECK(kv.entry(1).paused);
  rep = kv.remap_on_switch(1, 1, RemapPolicy::PreserveResident);
  CHECK(rep == RemapReport{1, 0, 0});
  CHECK_FALSE(kv.entry(1).paused);
  CHECK(kv.entry(1).block_ids == before);

  kv.allocate(2, 40, 1, std::vector<Rank>{1});
  rep = kv.remap_on_switch(2, 2, RemapPolicy::Recompute, e01);
  CHECK(rep.tokens_to_recompute == 40);
  CHECK(rep.blocks_copied == 0);
  CHECK(kv.entry(2).tp_degree == 2);
  CHECK(kv.entry(2).block_capacity == 8);
  CHECK(kv.entry(2).logical_blocks() == 5);
  kv.check_invariants();

  kv.allocate(4, 10, 1, std::vector<Rank>{3}, 8);
  kv.remap_on_switch(4, 4, RemapPolicy::Recompute, e0123);
  CHECK(kv.entry(4).h_req == 2);
  CHECK(kv.entry(4).block_capacity * kv.entry(4).h_req == 4 * 8);
  kv.free(4);

  kv.allocate(3, 0, 1, std::vector<Rank>{2});
  CHECK(kv.remap_on_switch(3, 4, RemapPolicy::Recompute, e0123) == RemapReport{});
  CHECK(kv.remap_on_switch(3, 4, RemapPolicy::PreserveResident) == RemapReport{});

  CHECK(code_of([&] { kv.remap_on_switch(77, 1, RemapPolicy::PreserveResident); }) == ErrorCode::UnknownRequest);
  CHECK(kv.realloc_count() == 0);
}

TEST_CASE("free returns blocks") {
  auto kv = pool(4, 2, 8);
  kv.allocate(1, 12, 1, e0);
  CHECK(kv.free(1) == 3);
  CHECK(kv.free_blocks() == 16);
  CHECK(code_of([&] { kv.free(1); }) == ErrorCode::UnknownRequest);
}

TEST_CASE("random pool traffic agrees with a counting ledger") {
  std::mt19937_64 rng(2024);
  const int engines = 4, each = 64, b_base = 4;
  auto kv = pool(b_base, engines, each);
  oracle::BlockLedger ledger;
  ledger.b_base = b_base;
  ledger.free_per_engine.assign(engines, each);

  std::vector<RequestId> live;
  RequestId next = 0;
  int ops = 0;
  while (next < 10'000) {
    const auto pick = rng() % 10;
    if (pick < 4 || live.empty()) {
      const int p = std::vector<int>{1, 1, 2, 4}[rng() % 4];
      std::vector<Rank> hosts;
      const int start = static_cast<int>(rng() % static_cast<unsigned>(engines / p)) * p;
      for (int i = 0; i < p; ++i) hosts.push_back(start + i);
      const std::int64_t tokens = static_cast<std::int64_t>(rng() % 200);
      const RequestId id = next++;
      const bool ok = ledger.allocate(id, tokens, p, {hosts.begin(), hosts.end()});
      if (ok) {
        kv.allocate(id, tokens, p, hosts);
        live.push_back(id);
      } else {
        CHECK_THROWS_AS(kv.allocate(id, tokens, p, hosts), Error);
      }
    } else if (pick < 7) {
      const auto id = live[rng() % live.size()];
      const std::int64_t n = static_cast<std::int64_t>(rng() % 20);
      if (ledger.append(id, n)) {
        kv.append_tokens(id, n);
      } else {
        CHECK_THROWS_AS(kv.append_tokens(id, n), Error);
      }
    } else {
      const auto idx = rng() % live.size();
      const auto id = live[idx];
      CHECK(kv.free(id) == ledger.release(id));
      live.erase(live.begin() + static_cast<std::ptrdiff_t>(idx));
    }
    CHECK(kv.free_blocks() == ledger.total_free());
    CHECK(kv.allocated_blocks() + kv.free_blocks() == kv.num_blocks());
    if (++ops % 500 == 0) kv.check_invariants();
  }
  for (auto id : live) kv.free(id);
  CHECK(kv.free_blocks() == kv.num_blocks());
  CHECK(kv.realloc_count() == 0);
  kv.check_invariants();
}

TEST_CASE("max_context arithmetic") {
  auto s = unit_spec();
  DeploymentConfig cfg;
  cfg.gpu_mem_bytes = 1'000;
  cfg.mem_utilization = 1.0;
  cfg.reconfig_reserve_bytes = 0;
  cfg.b_base = 1;
  CHECK(max_context(s, cfg, 1, false) == 400);  // 800 free bytes / (K + V at 1 byte)

  s.weight_bytes = 1'000;
  CHECK(code_of([&] { max_context(s, cfg, 1, false); }) == ErrorCode::WeightsExceedMemory);

  // Hand arithmetic for the fp16 70B preset on 141 GB at 0.9 utilisation:
  // p=2: 2 * (126.9e9 - 70e9) / 327680 = 347290.04 -> floor to 32 -> 347264
  // p=8: 8 * (126.9e9 - 17.5e9) / 327680 = 2670898.4 -> floor to 128 -> 2670848
  const auto llama = llama70b_preset();
  const DeploymentConfig def;
  CHECK(max_context(llama, def, 2, false) == 347'264);
  CHECK(max_context(llama, def, 8, false) == 2'670'848);
  CHECK(max_context(llama, def, 8, false) >= 4 * max_context(llama, def, 2, false));
  CHECK(max_context(llama, def, 8, true) < max_context(llama, def, 8, false));
  CHECK(code_of([&] { max_context(llama, def, 1, false); }) == ErrorCode::WeightsExceedMemory);
}

TEST_CASE("max_context is nondecreasing in degree when weights fit") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    ModelSpec s = llama70b_preset();
    s.weight_bytes = 1'000'000'000ULL * (1 + rng() % 200);
    DeploymentConfig cfg;
    cfg.mem_utilization = 0.5 + 0.5 * static_cast<double>(rng() % 100) / 100.0;
    for (bool dynamic : {false, true}) {
      std::int64_t prev = -1;
      for (int p : {1, 2, 4, 8}) {
        std::int64_t c = -1;
        try {
          c = max_context(s, cfg, p, dynamic);
        } catch (const Error&) {
          continue;
        }
        if (prev >= 0) CHECK(c >= prev);
        prev = c;
      }
    }
  }
}

TEST_CASE("blocks_per_engine leaves the reserve free") {
  const auto s = llama70b_fp8_preset();
  const DeploymentConfig cfg;
  const int n = blocks_per_engine(s, cfg);
  const auto geom = BlockGeometry::for_model(s, cfg.b_base);
  const long double budget = 141e9L * 0.9L - 70e9L - 16e9L;
  CHECK(n == static_cast<int>(budget / geom.block_bytes()));
  CHECK(code_of([&] { blocks_per_engine(llama70b_preset(), cfg); }) == ErrorCode::WeightsExceedMemory);
}

#include "shardshift/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace shardshift {

std::uint64_t BlockGeometry::block_bytes_at(int p) const {
  return static_cast<std::uint64_t>(adapt_block_size(p, b_base)) * (width_elems / static_cast<std::uint64_t>(p)) *
         static_cast<std::uint64_t>(elem_bytes);
}

BlockGeometry BlockGeometry::for_model(const ModelSpec& spec, int b_base) {
  return {b_base, kv_elems_per_token(spec), spec.elem_bytes};
}

KVCacheAdaptor::KVCacheAdaptor(BlockGeometry geometry, int num_engines, int blocks_per_engine)
    : geometry_(geometry),
      block_bytes_(geometry.block_bytes()),
      num_engines_(num_engines),
      blocks_per_engine_(blocks_per_engine),
      free_(static_cast<std::size_t>(num_engines)) {
  if (num_engines <= 0 || blocks_per_engine < 0 || geometry.b_base <= 0) {
    throw Error(ErrorCode::ConfigError, "invalid block pool dimensions");
  }
  for (int e = 0; e < num_engines; ++e) {
    auto& fl = free_[static_cast<std::size_t>(e)];
    fl.resize(static_cast<std::size_t>(blocks_per_engine));
    std::iota(fl.begin(), fl.end(), e * blocks_per_engine);  // ascending order is already a min-heap
  }
}

const TableEntry& KVCacheAdaptor::entry(RequestId req) const {
  auto it = table_.find(req);
  if (it == table_.end()) throw Error(ErrorCode::UnknownRequest, "request " + std::to_string(req));
  return it->second;
}

TableEntry& KVCacheAdaptor::mutable_entry(RequestId req) {
  auto it = table_.find(req);
  if (it == table_.end()) throw Error(ErrorCode::UnknownRequest, "request " + std::to_string(req));
  return it->second;
}

std::int64_t KVCacheAdaptor::blocks_for(std::int64_t tokens, int p) const {
  const auto cap = adapt_block_size(p, geometry_.b_base);
  return (tokens + cap - 1) / cap;
}

bool KVCacheAdaptor::can_allocate(std::int64_t logical_blocks, std::span<const Rank> engines) const {
  for (Rank e : engines) {
    if (static_cast<std::int64_t>(free_[static_cast<std::size_t>(e)].size()) < logical_blocks) return false;
  }
  return true;
}

int KVCacheAdaptor::free_blocks() const {
  int n = 0;
  for (const auto& f : free_) n += static_cast<int>(f.size());
  return n;
}

int KVCacheAdaptor::free_blocks(Rank engine) const { return static_cast<int>(free_[static_cast<std::size_t>(engine)].size()); }

void KVCacheAdaptor::check_engines(std::span<const Rank> engines, int p) const {
  if (p < 1 || static_cast<int>(engines.size()) != p) {
    throw Error(ErrorCode::GroupSizeMismatch,
                "degree " + std::to_string(p) + " needs " + std::to_string(p) + " hosting engines");
  }
  for (Rank e : engines) {
    if (e < 0 || e >= num_engines_) throw Error(ErrorCode::RankOutOfRange, "engine " + std::to_string(e));
  }
}

void KVCacheAdaptor::take_blocks(TableEntry& e, std::int64_t logical_blocks) {
  if (!can_allocate(logical_blocks, e.engines)) {
    throw Error(ErrorCode::OutOfBlocks, "request " + std::to_string(e.request) + " needs " +
                                            std::to_string(logical_blocks) + " more blocks");
  }
  for (std::int64_t b = 0; b < logical_blocks; ++b) {
    for (Rank eng : e.engines) {
      auto& fl = free_[static_cast<std::size_t>(eng)];
      std::pop_heap(fl.begin(), fl.end(), std::greater<>{});
      e.block_ids.push_back(fl.back());
      fl.pop_back();
      ++allocated_;
    }
  }
}

void KVCacheAdaptor::release_blocks(const std::vector<int>& ids) {
  for (int id : ids) {
    auto& fl = free_[static_cast<std::size_t>(id / blocks_per_engine_)];
    fl.push_back(id);
    std::push_heap(fl.begin(), fl.end(), std::greater<>{});
    --allocated_;
  }
}

const TableEntry& KVCacheAdaptor::allocate(RequestId req, std::int64_t tokens_needed, int p,
                                           std::span<const Rank> engines, int h_req) {
  if (table_.count(req)) throw Error(ErrorCode::DoubleAllocate, "request " + std::to_string(req));
  check_engines(engines, p);
  TableEntry e;
  e.request = req;
  e.tp_degree = p;
  e.block_capacity = adapt_block_size(p, geometry_.b_base);
  e.h_req = h_req;
  e.engines.assign(engines.begin(), engines.end());
  take_blocks(e, blocks_for(tokens_needed, p));
  e.tokens_stored = tokens_needed;
  return table_.emplace(req, std::move(e)).first->second;
}

const TableEntry& KVCacheAdaptor::append_tokens(RequestId req, std::int64_t n) {
  auto& e = mutable_entry(req);
  const auto need = blocks_for(e.tokens_stored + n, e.tp_degree) - e.logical_blocks();
  if (need > 0) take_blocks(e, need);
  e.tokens_stored += n;
  return e;
}

RemapReport KVCacheAdaptor::remap_on_switch(RequestId req, int new_p, RemapPolicy policy,
                                            std::span<const Rank> new_engines) {
  auto& e = mutable_entry(req);
  RemapReport rep;
  if (policy == RemapPolicy::PreserveResident) {
    e.paused = !e.paused;
    if (e.tokens_stored > 0) rep.metadata_updates = 1;
    return rep;
  }
  check_engines(new_engines, new_p);
  const auto needed = blocks_for(e.tokens_stored, new_p);
  // Blocks released by this entry become available to its own re-derivation.
  for (Rank eng : new_engines) {
    auto owned = std::count_if(e.block_ids.begin(), e.block_ids.end(),
                               [&](int id) { return id / blocks_per_engine_ == eng; });
    if (static_cast<std::int64_t>(free_[static_cast<std::size_t>(eng)].size()) + owned < needed) {
      throw Error(ErrorCode::OutOfBlocks, "request " + std::to_string(req) + " cannot be re-laid out");
    }
  }
  release_blocks(e.block_ids);
  e.block_ids.clear();
  if (e.h_req > 0) e.h_req = e.h_req * e.tp_degree / new_p;  // keeps B(p) * h_req fixed
  e.tp_degree = new_p;
  e.block_capacity = adapt_block_size(new_p, geometry_.b_base);
  e.engines.assign(new_engines.begin(), new_engines.end());
  e.paused = false;
  take_blocks(e, needed);
  if (e.tokens_stored > 0) {
    rep.metadata_updates = 1;
    rep.tokens_to_recompute = e.tokens_stored;
  }
  return rep;
}

int KVCacheAdaptor::free(RequestId req) {
  auto it = table_.find(req);
  if (it == table_.end()) throw Error(ErrorCode::UnknownRequest, "request " + std::to_string(req));
  const int n = static_cast<int>(it->second.block_ids.size());
  release_blocks(it->second.block_ids);
  table_.erase(it);
  return n;
}

std::string KVCacheAdaptor::dump() const {
  std::vector<RequestId> ids;
  ids.reserve(table_.size());
  for (const auto& [id, e] : table_) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  std::ostringstream os;
  for (auto id : ids) {
    const auto& e = table_.at(id);
    os << id << ',' << e.tp_degree << ',' << e.block_capacity << ',' << e.tokens_stored;
    for (int b : e.block_ids) os << ',' << b;
    os << '\n';
  }
  return os.str();
}

void KVCacheAdaptor::check_invariants() const {
  std::vector<char> seen(static_cast<std::size_t>(num_blocks()), 0);
  int free_count = 0;
  for (int eng = 0; eng < num_engines_; ++eng) {
    for (int id : free_[static_cast<std::size_t>(eng)]) {
      if (id / blocks_per_engine_ != eng) throw Error(ErrorCode::ConfigError, "block on wrong free list");
      seen[static_cast<std::size_t>(id)] = 1;
      ++free_count;
    }
  }
  int used = 0;
  for (const auto& [id, e] : table_) {
    if (e.block_capacity != adapt_block_size(e.tp_degree, geometry_.b_base)) {
      throw Error(ErrorCode::ConfigError, "entry capacity is not p * b_base");
    }
    if (e.tokens_stored > static_cast<std::int64_t>(e.logical_blocks()) * e.block_capacity) {
      throw Error(ErrorCode::ConfigError, "entry stores more tokens than its blocks hold");
    }
    if (e.logical_blocks() != blocks_for(e.tokens_stored, e.tp_degree) &&
        !(e.tokens_stored == 0 && e.logical_blocks() == 0)) {
      throw Error(ErrorCode::ConfigError, "entry holds blocks beyond its tail");
    }
    for (int b : e.block_ids) {
      if (seen[static_cast<std::size_t>(b)]) throw Error(ErrorCode::ConfigError, "block both free and allocated");
      seen[static_cast<std::size_t>(b)] = 1;
      ++used;
    }
  }
  if (used != allocated_ || used + free_count != num_blocks()) {
    throw Error(ErrorCode::ConfigError, "block conservation violated");
  }
}

std::int64_t max_context(const ModelSpec& spec, const DeploymentConfig& cfg, int p, bool dynamic_mode) {
  if (p < 1) throw Error(ErrorCode::UnsupportedDegree, "degree must be positive");
  const long double budget = static_cast<long double>(cfg.gpu_mem_bytes) * cfg.mem_utilization;
  long double free_bytes = budget - static_cast<long double>(spec.weight_bytes) / p;
  if (dynamic_mode) free_bytes -= static_cast<long double>(cfg.reconfig_reserve_bytes);
  if (free_bytes <= 0) {
    throw Error(ErrorCode::WeightsExceedMemory, "no KV memory left at degree " + std::to_string(p));
  }
  const auto tokens =
      static_cast<std::int64_t>(std::floor(p * std::floor(free_bytes) / static_cast<long double>(kv_bytes_per_token(spec))));
  const auto block = adapt_block_size(p, cfg.b_base);
  return tokens / block * block;
}

int blocks_per_engine(const ModelSpec& spec, const DeploymentConfig& cfg) {
  const long double budget = static_cast<long double>(cfg.gpu_mem_bytes) * cfg.mem_utilization -
                             static_cast<long double>(spec.weight_bytes) -
                             static_cast<long double>(cfg.reconfig_reserve_bytes);
  if (budget <= 0) throw Error(ErrorCode::WeightsExceedMemory, "weights do not fit on one engine");
  const auto geom = BlockGeometry::for_model(spec, cfg.b_base);
  return static_cast<int>(std::floor(budget / static_cast<long double>(geom.block_bytes())));
}

}  // namespace shardshift

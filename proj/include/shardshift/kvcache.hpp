#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "shardshift/core.hpp"

namespace shardshift {

/// Tokens per block at TP degree p: p * b_base.
constexpr std::int64_t adapt_block_size(int p, int b_base) { return static_cast<std::int64_t>(p) * b_base; }

/// Physical block geometry. `width_elems` is the per-device element count of
/// one token's KV at degree 1; a device at degree p stores width_elems / p.
struct BlockGeometry {
  int b_base = 16;
  std::uint64_t width_elems = 0;
  int elem_bytes = 2;

  std::uint64_t block_bytes() const { return static_cast<std::uint64_t>(b_base) * width_elems * elem_bytes; }
  /// B(p) * (width / p) * elem_bytes; equals block_bytes() for every p dividing width.
  std::uint64_t block_bytes_at(int p) const;

  static BlockGeometry for_model(const ModelSpec& spec, int b_base);
};

enum class RemapPolicy { PreserveResident, Recompute };

struct RemapReport {
  int metadata_updates = 0;
  int blocks_copied = 0;
  std::int64_t tokens_to_recompute = 0;
  friend bool operator==(const RemapReport&, const RemapReport&) = default;
};

struct TableEntry {
  RequestId request = 0;
  int tp_degree = 1;
  std::int64_t block_capacity = 0;  // B(p)
  int h_req = 0;                    // carried for audit; does not change block bytes
  std::int64_t tokens_stored = 0;
  bool paused = false;
  std::vector<Rank> engines;        // hosting engines, size == tp_degree
  std::vector<int> block_ids;       // physical ids, logical-block-major, one per hosting engine

  int logical_blocks() const { return tp_degree > 0 ? static_cast<int>(block_ids.size()) / tp_degree : 0; }
};

/// Single physical block pool partitioned by engine plus the per-request
/// logical table. Block ids in [e * blocks_per_engine, (e+1) * blocks_per_engine)
/// live on engine e. Allocation always takes the lowest free id.
class KVCacheAdaptor {
 public:
  KVCacheAdaptor(BlockGeometry geometry, int num_engines, int blocks_per_engine);

  /// Blocks for `tokens_needed` tokens at degree p, drawn from every engine in
  /// `engines` (one engine in DP). Sets tokens_stored = tokens_needed.
  const TableEntry& allocate(RequestId req, std::int64_t tokens_needed, int p, std::span<const Rank> engines,
                             int h_req = 0);
  const TableEntry& append_tokens(RequestId req, std::int64_t n);
  /// PreserveResident toggles the paused flag and leaves blocks untouched.
  /// Recompute re-derives the block list for the same tokens_stored under
  /// `new_p` on `new_engines`. Never copies blocks.
  RemapReport remap_on_switch(RequestId req, int new_p, RemapPolicy policy, std::span<const Rank> new_engines = {});
  /// Returns the number of physical blocks released.
  int free(RequestId req);

  bool has(RequestId req) const { return table_.count(req) != 0; }
  const TableEntry& entry(RequestId req) const;

  /// Logical blocks needed for `tokens` at degree p.
  std::int64_t blocks_for(std::int64_t tokens, int p) const;
  /// True when `logical_blocks` more blocks fit on every engine in `engines`.
  bool can_allocate(std::int64_t logical_blocks, std::span<const Rank> engines) const;

  const BlockGeometry& geometry() const { return geometry_; }
  std::uint64_t block_bytes() const { return block_bytes_; }
  int num_engines() const { return num_engines_; }
  int blocks_per_engine() const { return blocks_per_engine_; }
  int num_blocks() const { return num_engines_ * blocks_per_engine_; }
  int free_blocks() const;
  int free_blocks(Rank engine) const;
  int allocated_blocks() const { return allocated_; }
  std::uint64_t realloc_count() const { return realloc_count_; }
  std::size_t num_requests() const { return table_.size(); }

  /// One line per request, sorted by id: req_id,p,B(p),tokens_stored,block_ids...
  std::string dump() const;

  /// Cross-checks free lists against the table. Throws on any violation.
  void check_invariants() const;

 private:
  BlockGeometry geometry_;
  std::uint64_t block_bytes_;
  int num_engines_;
  int blocks_per_engine_;
  int allocated_ = 0;
  std::uint64_t realloc_count_ = 0;
  std::vector<std::vector<int>> free_;  // per engine; min-heaps under std::greater
  std::unordered_map<RequestId, TableEntry> table_;

  TableEntry& mutable_entry(RequestId req);
  void take_blocks(TableEntry& e, std::int64_t logical_blocks);
  void release_blocks(const std::vector<int>& ids);
  void check_engines(std::span<const Rank> engines, int p) const;
};

/// Longest context servable by one group of degree p:
/// free = gpu_mem * util - weight_bytes / p - (reserve if dynamic), per device;
/// tokens = floor(p * free / kv_bytes_per_token), floored to a multiple of B(p).
std::int64_t max_context(const ModelSpec& spec, const DeploymentConfig& cfg, int p, bool dynamic_mode);

/// Blocks each engine contributes to the shared pool when every engine holds a
/// full weight replica and the reconfiguration reserve.
int blocks_per_engine(const ModelSpec& spec, const DeploymentConfig& cfg);

}  // namespace shardshift

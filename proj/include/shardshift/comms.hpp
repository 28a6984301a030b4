#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "shardshift/core.hpp"

namespace shardshift {

using RankTuple = std::vector<Rank>;

/// The aligned contiguous segments [k*p, (k+1)*p) for every p in `degrees`, in
/// degree order. Strided or unaligned tuples are never produced.
std::vector<RankTuple> enumerate_tp_groups(int num_engines, std::span<const int> degrees);

std::string format_group(std::span<const Rank> group);  // "0-1-2-3"

enum class CollectiveOp { AllReduce, Barrier };
std::string_view to_string(CollectiveOp op);

struct CollectiveRecord {
  SimTime time = 0;
  RankTuple group;
  CollectiveOp op = CollectiveOp::AllReduce;
  std::uint64_t seq = 0;
  std::string status;  // "ok" or "mismatch"
};

/// Line format: time_ms,group,op,seq,status
std::string format_collective_record(const CollectiveRecord& r);

struct CollectiveLog {
  bool enabled = true;
  std::uint64_t completed = 0;
  std::uint64_t mismatches = 0;
  std::vector<CollectiveRecord> records;
};

/// One pre-built collective channel. A collective completes only once every
/// member has posted the same (op, seq); any divergence raises MismatchFault
/// at the moment it becomes observable.
class GroupHandle {
 public:
  explicit GroupHandle(RankTuple members, CollectiveLog* log = nullptr);

  const RankTuple& members() const { return members_; }
  std::size_t size() const { return members_.size(); }
  std::uint64_t seq() const { return seq_; }
  bool contains(Rank r) const;

  void post(Rank rank, CollectiveOp op, std::uint64_t seq, std::vector<double> payload = {}, SimTime now = 0);
  bool ready() const;
  /// Element-wise sum of the posted payloads; clears postings and advances seq.
  std::vector<double> complete(SimTime now = 0);

 private:
  struct Posting {
    bool posted = false;
    CollectiveOp op = CollectiveOp::AllReduce;
    std::uint64_t seq = 0;
    std::vector<double> payload;
  };

  RankTuple members_;
  std::uint64_t seq_ = 0;
  std::vector<Posting> pending_;
  CollectiveLog* log_ = nullptr;

  [[noreturn]] void fault(SimTime now, CollectiveOp op, std::uint64_t seq, const std::string& detail);
};

/// Convenience: every member posts its payload for the handle's next sequence
/// number, and every member receives the sum.
std::vector<std::vector<double>> all_reduce(GroupHandle& handle, std::span<const std::vector<double>> payloads,
                                            SimTime now = 0);

struct RankTupleHash {
  std::size_t operator()(const RankTuple& t) const noexcept;
};

class GroupPool {
 public:
  static constexpr std::uint64_t kDefaultHostMemBytes = 2'000'000;

  static GroupPool build(const std::vector<RankTuple>& groups, double init_cost_ms,
                         std::uint64_t host_mem_bytes_each = kDefaultHostMemBytes);

  GroupHandle& get(std::span<const Rank> members);
  const GroupHandle& get(std::span<const Rank> members) const;
  bool contains(std::span<const Rank> members) const;

  std::size_t size() const { return handles_.size(); }
  double startup_cost_ms() const { return static_cast<double>(handles_.size()) * init_cost_ms_; }
  std::uint64_t host_mem_bytes() const { return handles_.size() * host_mem_each_; }
  std::uint64_t constructions() const { return constructions_; }
  std::vector<RankTuple> keys() const;

  CollectiveLog& log() { return *log_; }
  const CollectiveLog& log() const { return *log_; }

 private:
  double init_cost_ms_ = 0;
  std::uint64_t host_mem_each_ = kDefaultHostMemBytes;
  std::uint64_t constructions_ = 0;
  std::unique_ptr<CollectiveLog> log_ = std::make_unique<CollectiveLog>();
  std::unordered_map<RankTuple, std::unique_ptr<GroupHandle>, RankTupleHash> handles_;
};

// ---- control plane -------------------------------------------------------

enum class ControlKind { Heartbeat, SetTP, ResetTP, WorkloadSync };

struct ControlMessage {
  ControlKind kind = ControlKind::Heartbeat;
  int degree = 1;
  RankTuple group;
  std::uint64_t epoch = 0;
  std::uint64_t queue_digest = 0;
};

struct LocalQueue {
  Rank engine = 0;
  std::uint64_t epoch = 0;
  std::vector<Request> requests;
};

struct SyncResult {
  std::vector<Request> order;          // globally agreed arrivals of this epoch
  std::vector<std::uint64_t> digests;  // one per engine, all equal
};

/// FNV-1a over the request id sequence.
std::uint64_t queue_digest(std::span<const Request> order);
std::uint64_t queue_digest(std::span<const RequestId> ids);

/// Merge the engines' local queues into the order every engine observes:
/// High priority first, then (arrival_time, id). Any engine reporting an epoch
/// other than `epoch` raises EpochSkew.
SyncResult sync_workload(std::span<const LocalQueue> queues, std::uint64_t epoch);

struct ModeAck {
  Rank engine = 0;
  std::uint64_t effective_epoch = 0;
  ParallelMode mode{};
  bool changed = false;
};

/// Apply SetTP / ResetTP to the addressed engines at `msg.epoch`. SetTP must
/// name a pooled group (UnknownGroup otherwise); ResetTP addresses msg.group and
/// is a no-op for members already in DP.
std::vector<ModeAck> broadcast_mode(std::span<EngineState> engines, const ControlMessage& msg, const GroupPool& pool);

}  // namespace shardshift

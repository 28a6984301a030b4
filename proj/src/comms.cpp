#include "shardshift/comms.hpp"

#include <algorithm>
#include <sstream>

namespace shardshift {

std::vector<RankTuple> enumerate_tp_groups(int num_engines, std::span<const int> degrees) {
  std::vector<RankTuple> out;
  for (int p : degrees) {
    if (p < 1 || num_engines % p != 0) {
      throw Error(ErrorCode::IndivisibleTPDegree,
                  "degree " + std::to_string(p) + " does not divide " + std::to_string(num_engines));
    }
    for (int k = 0; k < num_engines / p; ++k) {
      RankTuple g(static_cast<std::size_t>(p));
      for (int i = 0; i < p; ++i) g[static_cast<std::size_t>(i)] = k * p + i;
      out.push_back(std::move(g));
    }
  }
  return out;
}

std::string format_group(std::span<const Rank> group) {
  std::string s;
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(group[i]);
  }
  return s;
}

std::string_view to_string(CollectiveOp op) { return op == CollectiveOp::AllReduce ? "all_reduce" : "barrier"; }

std::string format_collective_record(const CollectiveRecord& r) {
  std::ostringstream os;
  os.precision(3);
  os << std::fixed << to_ms(r.time) << ',' << format_group(r.group) << ',' << to_string(r.op) << ',' << r.seq << ',' << r.status;
  return os.str();
}

GroupHandle::GroupHandle(RankTuple members, CollectiveLog* log)
    : members_(std::move(members)), pending_(members_.size()), log_(log) {}

bool GroupHandle::contains(Rank r) const {
  return std::find(members_.begin(), members_.end(), r) != members_.end();
}

void GroupHandle::fault(SimTime now, CollectiveOp op, std::uint64_t seq, const std::string& detail) {
  if (log_) {
    ++log_->mismatches;
    if (log_->enabled) log_->records.push_back({now, members_, op, seq, "mismatch"});
  }
  for (auto& p : pending_) p = Posting{};
  throw Error(ErrorCode::MismatchFault, "group " + format_group(members_) + ": " + detail);
}

void GroupHandle::post(Rank rank, CollectiveOp op, std::uint64_t seq, std::vector<double> payload, SimTime now) {
  auto it = std::find(members_.begin(), members_.end(), rank);
  if (it == members_.end()) {
    fault(now, op, seq, "rank " + std::to_string(rank) + " is not a member");
  }
  auto& slot = pending_[static_cast<std::size_t>(it - members_.begin())];
  if (slot.posted) fault(now, op, seq, "rank " + std::to_string(rank) + " posted twice");
  if (seq != seq_) {
    fault(now, op, seq,
          "rank " + std::to_string(rank) + " posted seq " + std::to_string(seq) + ", expected " + std::to_string(seq_));
  }
  for (const auto& other : pending_) {
    if (!other.posted) continue;
    if (other.op != op || other.seq != seq) {
      fault(now, op, seq,
            "expected " + std::string(to_string(other.op)) + "#" + std::to_string(other.seq) + ", observed " +
                std::string(to_string(op)) + "#" + std::to_string(seq));
    }
    if (op == CollectiveOp::AllReduce && other.payload.size() != payload.size()) {
      fault(now, op, seq, "payload length mismatch");
    }
  }
  slot = Posting{true, op, seq, std::move(payload)};
}

bool GroupHandle::ready() const {
  return std::all_of(pending_.begin(), pending_.end(), [](const Posting& p) { return p.posted; });
}

std::vector<double> GroupHandle::complete(SimTime now) {
  if (!ready()) fault(now, CollectiveOp::AllReduce, seq_, "collective completed before every member posted");
  std::vector<double> sum = pending_.front().payload;
  for (std::size_t m = 1; m < pending_.size(); ++m) {
    const auto& p = pending_[m].payload;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += p[i];
  }
  auto op = pending_.front().op;
  if (log_) {
    ++log_->completed;
    if (log_->enabled) log_->records.push_back({now, members_, op, seq_, "ok"});
  }
  for (auto& p : pending_) p = Posting{};
  ++seq_;
  return sum;
}

std::vector<std::vector<double>> all_reduce(GroupHandle& handle, std::span<const std::vector<double>> payloads,
                                            SimTime now) {
  if (payloads.size() != handle.size()) {
    throw Error(ErrorCode::GroupSizeMismatch, "expected " + std::to_string(handle.size()) + " payloads");
  }
  const auto seq = handle.seq();
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    handle.post(handle.members()[i], CollectiveOp::AllReduce, seq, payloads[i], now);
  }
  auto sum = handle.complete(now);
  return std::vector<std::vector<double>>(handle.size(), sum);
}

std::size_t RankTupleHash::operator()(const RankTuple& t) const noexcept {
  std::size_t h = 1469598103934665603ULL;
  for (Rank r : t) {
    h ^= static_cast<std::size_t>(r) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return h;
}

GroupPool GroupPool::build(const std::vector<RankTuple>& groups, double init_cost_ms, std::uint64_t host_mem_bytes_each) {
  GroupPool pool;
  pool.init_cost_ms_ = init_cost_ms;
  pool.host_mem_each_ = host_mem_bytes_each;
  for (const auto& g : groups) {
    if (pool.handles_.count(g)) continue;
    pool.handles_.emplace(g, std::make_unique<GroupHandle>(g, pool.log_.get()));
    ++pool.constructions_;
  }
  return pool;
}

GroupHandle& GroupPool::get(std::span<const Rank> members) {
  auto it = handles_.find(RankTuple(members.begin(), members.end()));
  if (it == handles_.end()) throw Error(ErrorCode::UnknownGroup, "no pooled group " + format_group(members));
  return *it->second;
}

const GroupHandle& GroupPool::get(std::span<const Rank> members) const {
  return const_cast<GroupPool*>(this)->get(members);
}

bool GroupPool::contains(std::span<const Rank> members) const {
  return handles_.count(RankTuple(members.begin(), members.end())) != 0;
}

std::vector<RankTuple> GroupPool::keys() const {
  std::vector<RankTuple> out;
  for (const auto& [k, v] : handles_) out.push_back(k);
  std::sort(out.begin(), out.end(), [](const RankTuple& a, const RankTuple& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  return out;
}

std::uint64_t queue_digest(std::span<const RequestId> ids) {
  std::uint64_t h = 1469598103934665603ULL;
  for (RequestId id : ids) {
    auto v = static_cast<std::uint64_t>(id);
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::uint64_t queue_digest(std::span<const Request> order) {
  std::vector<RequestId> ids;
  ids.reserve(order.size());
  for (const auto& r : order) ids.push_back(r.id);
  return queue_digest(std::span<const RequestId>(ids));
}

SyncResult sync_workload(std::span<const LocalQueue> queues, std::uint64_t epoch) {
  SyncResult out;
  for (const auto& q : queues) {
    if (q.epoch != epoch) {
      throw Error(ErrorCode::EpochSkew, "engine " + std::to_string(q.engine) + " synced at epoch " +
                                            std::to_string(q.epoch) + ", expected " + std::to_string(epoch));
    }
    out.order.insert(out.order.end(), q.requests.begin(), q.requests.end());
  }
  std::sort(out.order.begin(), out.order.end(), [](const Request& a, const Request& b) {
    if (a.priority != b.priority) return a.priority == Priority::High;
    if (a.arrival_time != b.arrival_time) return a.arrival_time < b.arrival_time;
    return a.id < b.id;
  });
  // Each engine computes the digest over its own copy of the merged order.
  for (std::size_t i = 0; i < queues.size(); ++i) {
    std::vector<Request> copy = out.order;
    out.digests.push_back(queue_digest(std::span<const Request>(copy)));
  }
  return out;
}

std::vector<ModeAck> broadcast_mode(std::span<EngineState> engines, const ControlMessage& msg, const GroupPool& pool) {
  std::vector<ModeAck> acks;
  if (msg.kind == ControlKind::SetTP) {
    if (!pool.contains(msg.group)) throw Error(ErrorCode::UnknownGroup, "no pooled group " + format_group(msg.group));
    for (std::size_t i = 0; i < msg.group.size(); ++i) {
      Rank r = msg.group[i];
      if (r < 0 || static_cast<std::size_t>(r) >= engines.size()) {
        throw Error(ErrorCode::UnknownGroup, "rank " + std::to_string(r) + " out of range");
      }
      auto& e = engines[static_cast<std::size_t>(r)];
      e.current_mode = ParallelMode::tp(static_cast<int>(msg.group.size()));
      e.group = msg.group;
      e.rank_in_group = static_cast<int>(i);
      acks.push_back({r, msg.epoch, e.current_mode, true});
    }
  } else if (msg.kind == ControlKind::ResetTP) {
    for (Rank r : msg.group) {
      if (r < 0 || static_cast<std::size_t>(r) >= engines.size()) {
        throw Error(ErrorCode::UnknownGroup, "rank " + std::to_string(r) + " out of range");
      }
      auto& e = engines[static_cast<std::size_t>(r)];
      bool changed = e.current_mode.is_tp();
      e.current_mode = ParallelMode::dp();
      e.group.clear();
      e.rank_in_group = 0;
      acks.push_back({r, msg.epoch, e.current_mode, changed});
    }
  }
  return acks;
}

}  // namespace shardshift

#pragma once

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "shardshift/comms.hpp"
#include "shardshift/core.hpp"
#include "shardshift/cost_model.hpp"
#include "shardshift/kvcache.hpp"

namespace shardshift {

enum class SwitchStrategy { Sequential, SoftPreempt, HardPreempt };
std::string_view to_string(SwitchStrategy s);
SwitchStrategy parse_strategy(std::string_view s);

/// Requests run in the mode they carry.
struct ModeFromRequest {};

/// Windowed arrival rate drives a ladder of regimes from the widest TP degree
/// (calm) down to DP (burst). With one supported degree the ladder is
/// {TP(max), DP}: rate < low_rps selects TP, rate >= high_rps selects DP and
/// the band between keeps the previous regime. Intermediate degrees, when
/// present, take evenly spaced boundaries between low_rps and high_rps, each
/// with a `hysteresis` fraction of slack on the way back up.
struct LoadAdaptive {
  double low_rps = 8.0;
  double high_rps = 24.0;
  double window_ms = 10'000.0;
  double hysteresis = 0.15;
};

/// Baseline deployments: every request runs at `degree` on a layout built at startup.
struct StaticLayout {
  int degree = 1;
};

using ModePolicy = std::variant<ModeFromRequest, LoadAdaptive, StaticLayout>;

struct KVParams {
  std::int64_t b_req = 0;
  int h_req = 0;
};

/// B_req = B_base * N_eng, H_req = H_base / N_eng.
KVParams kv_params(int b_base, int h_base, int n_eng);

struct LoadEstimate {
  double arrival_rps = 0.0;
};

/// Inputs assign_mode needs beyond the request: the degree ladder, the token
/// capacity of one group at each degree, and the hysteresis state.
struct ModeContext {
  std::vector<int> degrees;                     // supported TP degrees
  std::map<int, std::int64_t> capacity_tokens;  // degree (incl. 1) -> max tokens per request
  int regime = -1;                              // ladder index; -1 = uninitialized

  std::vector<int> ladder() const;  // widest degree first, 1 last
  int max_degree() const;
};

/// Per-request parallel mode. High priority -> TP(max); requests that exceed
/// one engine's capacity -> smallest degree that fits (NoFeasibleDegree if
/// none); otherwise the policy's answer. ModeFromRequest returns req.mode.
ParallelMode assign_mode(const Request& req, const LoadEstimate& load, const ModePolicy& policy, ModeContext& ctx);

/// Update the ladder regime from the windowed rate (LoadAdaptive only).
int update_regime(const LoadAdaptive& policy, const LoadEstimate& load, ModeContext& ctx);

// ---- transition planning ---------------------------------------------------

struct TransitionPlan {
  SwitchStrategy strategy = SwitchStrategy::Sequential;
  SimTime switch_at = 0;
  std::vector<SimTime> idle_before_switch;  // per member
  // Soft preempt
  int speculating_member = -1;
  std::int64_t speculative_tokens = 0;   // output tokens emitted in DP before the switch
  std::int64_t tokens_to_recompute = 0;  // KV laid out in DP at the switch (prompt + speculative)
  // Hard preempt
  std::vector<RequestId> paused;
};

/// Straggler wait: switch once every member is free.
TransitionPlan switch_sequential(std::span<const SimTime> busy_until, SimTime now);

/// The member that frees up first runs the pending request in DP until the
/// straggler finishes; the switch lands on that member's next step boundary.
/// Falls back to a sequential plan with no idle window.
TransitionPlan switch_soft_preempt(std::span<const SimTime> busy_until, SimTime now, const Request& pending,
                                   const CostModel& cost);

/// Pause every running request at the members' next safe points and switch at the latest one.
TransitionPlan switch_hard_preempt(std::span<const SimTime> next_safe_point,
                                   std::span<const std::vector<RequestId>> running, SimTime now);

// ---- logs ----------------------------------------------------------------

enum class DecisionKind { SetTP, ResetTP, Pause, Resume, Speculate, Recompute, RejectPreempt, Reject };
std::string_view to_string(DecisionKind k);

struct DecisionRecord {
  SimTime time = 0;
  std::uint64_t iteration = 0;
  DecisionKind event = DecisionKind::SetTP;
  RequestId request = -1;
  RankTuple group;
  std::uint64_t epoch = 0;
  std::int64_t tokens = 0;  // Recompute: tokens_to_recompute; Resume: tokens_to_recompute of the remap
};

/// Line format: time_ms,iteration,event,req_id,group
std::string format_decision(const DecisionRecord& r);

enum class SimEventKind { Arrival, StepComplete, SwitchEffective, Pause, Resume, Emit, Finish };
std::string_view to_string(SimEventKind k);

struct SimEvent {
  SimTime time = 0;
  SimEventKind kind = SimEventKind::Arrival;
  RequestId request = -1;
  int token_index = -1;
  Rank unit = -1;  // first rank of the executing unit
  int degree = 0;
};

std::string format_event(const SimEvent& e);

// ---- scheduler -------------------------------------------------------------

struct SchedulerOptions {
  SwitchStrategy strategy = SwitchStrategy::Sequential;
  ModePolicy policy = ModeFromRequest{};
  /// Hard preempt only fires for High priority requests unless this is false.
  bool hard_preempt_high_only = true;
  /// Under HardPreempt, DP admissions leave this fraction of each engine's
  /// blocks free so a preempting group can admit beside the paused requests.
  double preempt_reserve_fraction = 0.15;
  /// Overrides the pool size derived from memory (tests use small pools).
  int blocks_per_engine = -1;
  bool keep_event_log = true;
  bool keep_collective_log = false;
};

/// Forming transition: `degree` 1 splits a TP group back into DP engines.
struct PendingTransition {
  RankTuple segment;
  int degree = 1;
  bool hard = false;
  std::size_t reserved = 0;     // TP requests waiting on it
  std::size_t speculating = 0;  // requests running ahead in DP
};

struct RequestRecord {
  Request request;
  ParallelMode assigned{};
  SimTime first_scheduled = -1;
  SimTime first_token = -1;
  SimTime finish = -1;
  int emitted = 0;
  bool rejected = false;
  bool speculated = false;
  std::int64_t recomputed_tokens = 0;
  std::int64_t speculative_tokens = 0;
  int pauses = 0;
  std::vector<SimTime> emit_times;
};

struct IterationReport {
  std::uint64_t iteration = 0;
  std::uint64_t epoch = 0;
  SimTime time = 0;
  bool idle = true;
  std::size_t q_wait = 0;
  std::uint64_t q_wait_digest = 0;
  bool flag_set_tp = false;
  bool flag_reset_tp = false;
  int n_eng = 1;
  int n_tp = 1;
  KVParams kv{};  // of the last request processed
  int admitted = 0;
  std::vector<ControlMessage> broadcasts;
  std::vector<ModeAck> acks;  // one per addressed engine, in broadcast order
  int steps_started = 0;
  int tokens_emitted = 0;
  std::vector<RequestId> finished;
};

/// The serving loop coordinator. Each call to schedule_iteration runs input
/// ingestion, workload sync, mode determination, KV parameterization and
/// allocation, mode signaling, execution and output publication, in that order.
/// Engines are grouped into units (one DP engine, or an aligned TP group) that
/// step independently; mode changes apply only when every affected unit sits
/// between steps.
class Scheduler {
 public:
  Scheduler(ModelSpec spec, DeploymentConfig cfg, CostModel cost, SchedulerOptions opts);

  /// Hand a request to the input socket (Q_in).
  void submit(const Request& req);
  IterationReport schedule_iteration(SimTime now);
  /// Earliest pending step or switch completion.
  std::optional<SimTime> next_wakeup() const;
  /// No queued, running, paused or switching work remains.
  bool quiescent() const;
  /// One-line summary of units, transitions and queues for diagnostics.
  std::string describe() const;

  const std::vector<DecisionRecord>& decisions() const { return decisions_; }
  const std::vector<SimEvent>& events() const { return events_; }
  const std::map<RequestId, RequestRecord>& records() const { return records_; }
  const KVCacheAdaptor& kv() const { return kv_; }
  const GroupPool& pool() const { return pool_; }
  GroupPool& pool() { return pool_; }
  const std::vector<EngineState>& engines() const { return engines_; }
  std::uint64_t iterations() const { return iteration_; }
  std::uint64_t steps_executed() const { return steps_executed_; }
  int regime() const { return mode_ctx_.regime; }
  std::vector<PendingTransition> pending_transitions() const;
  std::uint64_t group_constructions_after_startup() const { return pool_.constructions() - constructions_at_start_; }

  /// Testing hook: the next TP step on the unit starting at `rank` posts a
  /// stale sequence number from its last member.
  void inject_collective_fault(Rank unit_start) { fault_unit_ = unit_start; }

 private:
  enum class UnitPhase { Idle, Stepping, Switching };

  struct StepSlice {
    RequestId request;
    std::int64_t prefill_tokens = 0;
    bool decode = false;
  };

  struct Unit {
    RankTuple members;
    int degree = 1;
    UnitPhase phase = UnitPhase::Idle;
    SimTime busy_until = 0;
    std::vector<RequestId> running;
    std::vector<StepSlice> step;
    int transition = -1;        // forming transition that absorbs this unit
    bool preempting = false;    // TP group formed by hard preempt
    bool sealed = false;        // preempting group has started; admits nothing further
    std::uint64_t seq_view = 0; // members' local view of the collective seq
  };

  struct Transition {
    int id = 0;
    RankTuple segment;
    int degree = 1;  // 1 = split into DP engines
    bool hard = false;
    SimTime started = 0;
    std::vector<RequestId> reserved;
    std::vector<RequestId> speculating;
  };

  struct Live {
    std::int64_t prefilled = 0;
    std::int64_t prefill_target = 0;
    bool recomputing = false;
    Rank unit = -1;
    int transition = -1;  // speculating toward this transition
  };

  ModelSpec spec_;
  DeploymentConfig cfg_;
  CostModel cost_;
  SchedulerOptions opts_;
  KVCacheAdaptor kv_;
  GroupPool pool_;
  std::uint64_t constructions_at_start_ = 0;
  std::vector<EngineState> engines_;
  std::map<Rank, Unit> units_;        // keyed by first member
  std::vector<Rank> unit_of_;         // engine -> unit key
  std::vector<std::vector<RequestId>> paused_;  // per engine
  std::map<int, Transition> transitions_;
  int next_transition_ = 0;

  std::vector<std::vector<Request>> q_in_;  // per engine input socket
  std::vector<RequestId> q_wait_;
  std::map<RequestId, RequestRecord> records_;
  std::map<RequestId, Live> live_;
  std::deque<SimTime> recent_arrivals_;
  std::set<RequestId> preempt_rejected_;
  ModeContext mode_ctx_;

  std::uint64_t iteration_ = 0;
  std::uint64_t epoch_ = 0;
  std::uint64_t steps_executed_ = 0;
  std::optional<Rank> fault_unit_;
  std::vector<DecisionRecord> decisions_;
  std::vector<SimEvent> events_;
  std::vector<SimEvent> pending_events_;

  void build_initial_layout();
  Unit& unit_at(Rank engine) { return units_.at(unit_of_[static_cast<std::size_t>(engine)]); }
  void add_unit(RankTuple members, UnitPhase phase, SimTime busy_until);
  void log_decision(SimTime now, DecisionKind k, RequestId req, const RankTuple& group, std::int64_t tokens = 0);
  void log_event(SimTime t, SimEventKind k, RequestId req, int token, const Unit* u);

  void complete_due(SimTime now, IterationReport& rep);
  void finish_step(Unit& u, SimTime now, IterationReport& rep);
  void finish_switch(Unit& u, SimTime now);
  void emit_token(RequestRecord& rec, Unit& u, SimTime now, IterationReport& rep);
  void finish_request(RequestId id, Unit& u, SimTime now, IterationReport& rep);

  ParallelMode mode_for(const RequestRecord& rec, const LoadEstimate& load);
  bool try_place(RequestRecord& rec, ParallelMode mode, SimTime now);
  bool admit(RequestRecord& rec, Unit& u, SimTime now, bool speculative);
  bool has_headroom(const Unit& u, std::int64_t tokens) const;
  bool has_free_slot(int degree, Priority priority) const;
  bool segment_fits(const RankTuple& segment, std::int64_t tokens, int degree) const;
  void request_transition(RequestRecord& rec, ParallelMode mode, SimTime now);
  void request_splits(const std::set<int>& demanded, bool any_unplaced, SimTime now);
  void cancel_stale_transitions(const std::set<int>& demanded);
  void sync_engine_states();
  std::int64_t future_blocks(Rank engine) const;
  std::optional<RankTuple> pick_segment(int degree, bool hard) const;
  std::vector<Rank> units_intersecting(const RankTuple& segment) const;
  void start_speculation(SimTime now);
  void apply_ready_transitions(SimTime now, IterationReport& rep);
  bool transition_ready(const Transition& t) const;
  void apply_transition(Transition& t, SimTime now, IterationReport& rep);
  void execute(SimTime now, IterationReport& rep);
  double arrival_rate(SimTime now) const;
};

}  // namespace shardshift

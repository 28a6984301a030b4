#include "shardshift/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <tuple>

namespace shardshift {

std::string_view to_string(SwitchStrategy s) {
  switch (s) {
    case SwitchStrategy::Sequential: return "sequential";
    case SwitchStrategy::SoftPreempt: return "soft";
    case SwitchStrategy::HardPreempt: return "hard";
  }
  return "?";
}

SwitchStrategy parse_strategy(std::string_view s) {
  if (s == "sequential") return SwitchStrategy::Sequential;
  if (s == "soft" || s == "soft_preempt") return SwitchStrategy::SoftPreempt;
  if (s == "hard" || s == "hard_preempt") return SwitchStrategy::HardPreempt;
  throw Error(ErrorCode::ConfigError, "unknown switch strategy '" + std::string(s) + "'");
}

KVParams kv_params(int b_base, int h_base, int n_eng) {
  if (n_eng < 1 || h_base % n_eng != 0) {
    throw Error(ErrorCode::IndivisibleTPDegree,
                std::to_string(h_base) + " heads do not split over " + std::to_string(n_eng) + " engines");
  }
  return {static_cast<std::int64_t>(b_base) * n_eng, h_base / n_eng};
}

// ---- mode assignment --------------------------------------------------------

std::vector<int> ModeContext::ladder() const {
  std::vector<int> l(degrees.begin(), degrees.end());
  std::sort(l.begin(), l.end(), std::greater<>());
  l.erase(std::unique(l.begin(), l.end()), l.end());
  l.erase(std::remove_if(l.begin(), l.end(), [](int d) { return d <= 1; }), l.end());
  l.push_back(1);
  return l;
}

int ModeContext::max_degree() const {
  int m = 1;
  for (int d : degrees) m = std::max(m, d);
  return m;
}

namespace {

std::int64_t capacity_of(const ModeContext& ctx, int degree) {
  auto it = ctx.capacity_tokens.find(degree);
  return it == ctx.capacity_tokens.end() ? std::numeric_limits<std::int64_t>::max() : it->second;
}

// Smallest degree >= `from` whose group capacity holds `need` tokens.
ParallelMode smallest_fitting(const ModeContext& ctx, std::int64_t need, int from) {
  std::vector<int> cands{1};
  cands.insert(cands.end(), ctx.degrees.begin(), ctx.degrees.end());
  std::sort(cands.begin(), cands.end());
  for (int d : cands) {
    if (d >= from && capacity_of(ctx, d) >= need) return {d};
  }
  throw Error(ErrorCode::NoFeasibleDegree, "request of " + std::to_string(need) + " tokens exceeds every group");
}

}  // namespace

int update_regime(const LoadAdaptive& policy, const LoadEstimate& load, ModeContext& ctx) {
  const int k = static_cast<int>(ctx.ladder().size()) - 1;  // boundaries
  if (k == 0) return ctx.regime = 0;
  const double r = load.arrival_rps;
  auto up = [&](int i) {
    if (k == 1) return policy.high_rps;
    return policy.low_rps + (policy.high_rps - policy.low_rps) * i / (k - 1);
  };
  auto down = [&](int i) { return k == 1 ? policy.low_rps : up(i) * (1.0 - policy.hysteresis); };
  if (ctx.regime < 0) {
    if (k == 1) return ctx.regime = r < policy.low_rps ? 0 : 1;
    int c = 0;
    while (c < k && r >= up(c)) ++c;
    return ctx.regime = c;
  }
  int c = std::min(ctx.regime, k);
  while (c < k && r >= up(c)) ++c;
  while (c > 0 && r < down(c - 1)) --c;
  return ctx.regime = c;
}

ParallelMode assign_mode(const Request& req, const LoadEstimate& load, const ModePolicy& policy, ModeContext& ctx) {
  if (std::holds_alternative<ModeFromRequest>(policy)) return req.mode;
  if (const auto* s = std::get_if<StaticLayout>(&policy)) return {s->degree};

  const auto& la = std::get<LoadAdaptive>(policy);
  const std::int64_t need = static_cast<std::int64_t>(req.prompt_tokens) + req.output_tokens;
  if (need > capacity_of(ctx, 1)) return smallest_fitting(ctx, need, 2);
  if (req.priority == Priority::High) return smallest_fitting(ctx, need, ctx.max_degree());
  const auto ladder = ctx.ladder();
  const int regime = update_regime(la, load, ctx);
  return smallest_fitting(ctx, need, ladder[static_cast<std::size_t>(regime)]);
}

// ---- transition planning ----------------------------------------------------

TransitionPlan switch_sequential(std::span<const SimTime> busy_until, SimTime now) {
  TransitionPlan plan;
  plan.strategy = SwitchStrategy::Sequential;
  plan.switch_at = now;
  for (SimTime b : busy_until) plan.switch_at = std::max(plan.switch_at, b);
  for (SimTime b : busy_until) plan.idle_before_switch.push_back(plan.switch_at - std::max(now, b));
  return plan;
}

TransitionPlan switch_soft_preempt(std::span<const SimTime> busy_until, SimTime now, const Request& pending,
                                   const CostModel& cost) {
  TransitionPlan plan = switch_sequential(busy_until, now);
  if (busy_until.empty()) return plan;
  const auto first = std::min_element(busy_until.begin(), busy_until.end());
  const SimTime straggler = plan.switch_at;
  const SimTime start = std::max(now, *first);
  if (straggler - start <= 0) return plan;

  plan.strategy = SwitchStrategy::SoftPreempt;
  plan.speculating_member = static_cast<int>(first - busy_until.begin());
  // Replay the member's steps: a step that starts before the straggler
  // finishes runs to completion, and the switch waits for it.
  SimTime t = start;
  std::int64_t prefilled = 0;
  std::int64_t emitted = 0;
  while (t < straggler && emitted < pending.output_tokens) {
    if (prefilled < pending.prompt_tokens) {
      const auto chunk = std::min<std::int64_t>(cost.prefill_chunk_tokens, pending.prompt_tokens - prefilled);
      t += std::max<SimTime>(1, cost.mixed_step(chunk, 0, 1));
      prefilled += chunk;
      if (prefilled == pending.prompt_tokens) emitted = 1;
    } else {
      t += std::max<SimTime>(1, cost.mixed_step(0, 1, 1));
      ++emitted;
    }
  }
  plan.switch_at = std::max(straggler, t);
  plan.speculative_tokens = emitted;
  const bool done = emitted == pending.output_tokens;
  plan.tokens_to_recompute = done ? 0 : pending.prompt_tokens + emitted;
  plan.idle_before_switch.assign(busy_until.size(), 0);
  for (std::size_t i = 0; i < busy_until.size(); ++i) {
    const SimTime free_at = static_cast<int>(i) == plan.speculating_member ? t : std::max(now, busy_until[i]);
    plan.idle_before_switch[i] = plan.switch_at - std::max(now, free_at);
  }
  return plan;
}

TransitionPlan switch_hard_preempt(std::span<const SimTime> next_safe_point,
                                   std::span<const std::vector<RequestId>> running, SimTime now) {
  TransitionPlan plan = switch_sequential(next_safe_point, now);
  plan.strategy = SwitchStrategy::HardPreempt;
  for (const auto& r : running) plan.paused.insert(plan.paused.end(), r.begin(), r.end());
  return plan;
}

// ---- logs -------------------------------------------------------------------

std::string_view to_string(DecisionKind k) {
  switch (k) {
    case DecisionKind::SetTP: return "SetTP";
    case DecisionKind::ResetTP: return "ResetTP";
    case DecisionKind::Pause: return "Pause";
    case DecisionKind::Resume: return "Resume";
    case DecisionKind::Speculate: return "Speculate";
    case DecisionKind::Recompute: return "Recompute";
    case DecisionKind::RejectPreempt: return "RejectPreempt";
    case DecisionKind::Reject: return "Reject";
  }
  return "?";
}

std::string format_decision(const DecisionRecord& r) {
  std::ostringstream os;
  os.precision(3);
  os << std::fixed << to_ms(r.time) << ',' << r.iteration << ',' << to_string(r.event) << ',' << r.request << ','
     << format_group(r.group);
  return os.str();
}

std::string_view to_string(SimEventKind k) {
  switch (k) {
    case SimEventKind::Arrival: return "Arrival";
    case SimEventKind::StepComplete: return "StepComplete";
    case SimEventKind::SwitchEffective: return "SwitchEffective";
    case SimEventKind::Pause: return "Pause";
    case SimEventKind::Resume: return "Resume";
    case SimEventKind::Emit: return "Emit";
    case SimEventKind::Finish: return "Finish";
  }
  return "?";
}

std::string format_event(const SimEvent& e) {
  std::ostringstream os;
  os.precision(3);
  os << std::fixed << to_ms(e.time) << ',' << to_string(e.kind) << ',' << e.request << ',' << e.token_index << ','
     << e.unit << ',' << e.degree;
  return os.str();
}

// ---- scheduler --------------------------------------------------------------

namespace {

bool intersects(const RankTuple& a, const RankTuple& b) {
  for (Rank x : a) {
    if (std::find(b.begin(), b.end(), x) != b.end()) return true;
  }
  return false;
}

void erase_id(std::vector<RequestId>& v, RequestId id) { v.erase(std::remove(v.begin(), v.end(), id), v.end()); }

}  // namespace

Scheduler::Scheduler(ModelSpec spec, DeploymentConfig cfg, CostModel cost, SchedulerOptions opts)
    : spec_(std::move(spec)),
      cfg_(std::move(cfg)),
      cost_(std::move(cost)),
      opts_(std::move(opts)),
      kv_(BlockGeometry::for_model(spec_, cfg_.b_base), cfg_.num_engines,
          opts_.blocks_per_engine > 0 ? opts_.blocks_per_engine : blocks_per_engine(spec_, cfg_)),
      pool_(GroupPool::build(enumerate_tp_groups(cfg_.num_engines, cfg_.supported_tp_degrees), cost_.group_init_ms)) {
  const auto v = validate_deployment(spec_, cfg_);
  if (!v.ok()) throw Error(v.errors.front().code, v.errors.front().detail);
  pool_.log().enabled = opts_.keep_collective_log;

  const auto n = static_cast<std::size_t>(cfg_.num_engines);
  engines_.resize(n);
  for (std::size_t e = 0; e < n; ++e) engines_[e].engine_id = static_cast<Rank>(e);
  unit_of_.assign(n, -1);
  paused_.resize(n);
  q_in_.resize(n);

  mode_ctx_.degrees = cfg_.supported_tp_degrees;
  const std::int64_t per_engine = kv_.blocks_per_engine();
  mode_ctx_.capacity_tokens[1] = per_engine * cfg_.b_base;
  for (int d : cfg_.supported_tp_degrees) mode_ctx_.capacity_tokens[d] = per_engine * adapt_block_size(d, cfg_.b_base);

  build_initial_layout();
  constructions_at_start_ = pool_.constructions();
}

void Scheduler::build_initial_layout() {
  int degree = 1;
  if (const auto* s = std::get_if<StaticLayout>(&opts_.policy)) degree = s->degree;
  if (degree > 1 && (!cfg_.supports(degree) || cfg_.num_engines % degree != 0)) {
    throw Error(ErrorCode::UnsupportedDegree, "static layout degree " + std::to_string(degree));
  }
  for (Rank start = 0; start < cfg_.num_engines; start += degree) {
    RankTuple members(static_cast<std::size_t>(degree));
    std::iota(members.begin(), members.end(), start);
    if (degree > 1) {
      const ControlMessage msg{ControlKind::SetTP, degree, members, 0, 0};
      broadcast_mode(engines_, msg, pool_);
      log_decision(0, DecisionKind::SetTP, -1, members);
    }
    add_unit(members, UnitPhase::Idle, 0);
  }
}

void Scheduler::add_unit(RankTuple members, UnitPhase phase, SimTime busy_until) {
  Unit u;
  u.degree = static_cast<int>(members.size());
  u.phase = phase;
  u.busy_until = busy_until;
  if (u.degree > 1) u.seq_view = pool_.get(members).seq();
  const Rank key = members.front();
  for (Rank m : members) unit_of_[static_cast<std::size_t>(m)] = key;
  u.members = std::move(members);
  units_[key] = std::move(u);
}

void Scheduler::log_decision(SimTime now, DecisionKind k, RequestId req, const RankTuple& group, std::int64_t tokens) {
  decisions_.push_back({now, iteration_, k, req, group, epoch_, tokens});
}

void Scheduler::log_event(SimTime t, SimEventKind k, RequestId req, int token, const Unit* u) {
  if (!opts_.keep_event_log) return;
  pending_events_.push_back({t, k, req, token, u ? u->members.front() : -1, u ? u->degree : 0});
}

void Scheduler::submit(const Request& req) {
  if (records_.count(req.id)) throw Error(ErrorCode::ConfigError, "duplicate request id " + std::to_string(req.id));
  if (req.prompt_tokens < 1 || req.output_tokens < 1) {
    throw Error(ErrorCode::ConfigError, "request " + std::to_string(req.id) + " needs prompt and output tokens");
  }
  RequestRecord rec;
  rec.request = req;
  rec.request.state = RequestState::Queued;
  records_.emplace(req.id, std::move(rec));
  const auto engine = static_cast<std::size_t>(req.id % cfg_.num_engines);
  q_in_[engine].push_back(req);
  recent_arrivals_.push_back(req.arrival_time);
  log_event(req.arrival_time, SimEventKind::Arrival, req.id, -1, nullptr);
}

double Scheduler::arrival_rate(SimTime now) const {
  const auto* la = std::get_if<LoadAdaptive>(&opts_.policy);
  const double window_ms = la ? la->window_ms : 10'000.0;
  const SimTime lo = now - from_ms(window_ms);
  const auto n = std::count_if(recent_arrivals_.begin(), recent_arrivals_.end(),
                               [&](SimTime t) { return t > lo && t <= now; });
  return static_cast<double>(n) * 1000.0 / window_ms;
}

std::optional<SimTime> Scheduler::next_wakeup() const {
  std::optional<SimTime> t;
  for (const auto& [k, u] : units_) {
    if (u.phase != UnitPhase::Idle && (!t || u.busy_until < *t)) t = u.busy_until;
  }
  return t;
}

bool Scheduler::quiescent() const {
  if (!q_wait_.empty()) return false;
  for (const auto& q : q_in_) {
    if (!q.empty()) return false;
  }
  for (const auto& p : paused_) {
    if (!p.empty()) return false;
  }
  for (const auto& [k, u] : units_) {
    if (u.phase != UnitPhase::Idle || !u.running.empty()) return false;
  }
  return true;
}

IterationReport Scheduler::schedule_iteration(SimTime now) {
  ++iteration_;
  IterationReport rep;
  rep.iteration = iteration_;
  rep.time = now;

  complete_due(now, rep);

  // Input ingestion and workload sync: every engine reports its local arrivals
  // for this epoch and all adopt the merged order.
  ++epoch_;
  std::vector<LocalQueue> queues(q_in_.size());
  for (std::size_t e = 0; e < q_in_.size(); ++e) {
    queues[e].engine = static_cast<Rank>(e);
    queues[e].epoch = epoch_;
    queues[e].requests = std::move(q_in_[e]);
    q_in_[e].clear();
  }
  const auto sync = sync_workload(queues, epoch_);
  for (const auto& r : sync.order) q_wait_.push_back(r.id);
  rep.epoch = epoch_;
  rep.q_wait_digest = sync.digests.empty() ? 0 : sync.digests.front();

  const auto* adaptive = std::get_if<LoadAdaptive>(&opts_.policy);
  const SimTime horizon = now - from_ms(adaptive ? adaptive->window_ms : 10'000.0);
  while (!recent_arrivals_.empty() && recent_arrivals_.front() <= horizon) recent_arrivals_.pop_front();
  const LoadEstimate load{arrival_rate(now)};
  if (const auto* la = std::get_if<LoadAdaptive>(&opts_.policy)) update_regime(*la, load, mode_ctx_);

  // Mode determination, KV parameterization and allocation. A request that
  // cannot be placed does not block later requests of other modes.
  for (auto& [id, t] : transitions_) t.reserved.clear();
  std::set<int> demanded;
  bool any_unplaced = false;
  std::vector<RequestId> still_waiting;
  std::set<int> saturated;  // (degree, priority) keys whose every eligible unit is at max_batch
  for (RequestId id : q_wait_) {
    auto& rec = records_.at(id);
    ParallelMode mode;
    try {
      mode = mode_for(rec, load);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoFeasibleDegree) throw;
      rec.rejected = true;
      log_decision(now, DecisionKind::Reject, id, {});
      continue;
    }
    rec.assigned = mode;
    rep.flag_set_tp = mode.is_tp();
    rep.flag_reset_tp = !mode.is_tp();
    rep.n_eng = rep.n_tp = mode.degree;
    rep.kv = kv_params(cfg_.b_base, spec_.num_kv_heads, mode.degree);
    const int slot_key = mode.degree * 2 + (rec.request.priority == Priority::High ? 1 : 0);
    if (!saturated.count(slot_key) && try_place(rec, mode, now)) {
      ++rep.admitted;
      continue;
    }
    if (!saturated.count(slot_key) && !has_free_slot(mode.degree, rec.request.priority)) saturated.insert(slot_key);
    still_waiting.push_back(id);
    demanded.insert(mode.degree);
    any_unplaced = true;
    request_transition(rec, mode, now);
  }
  q_wait_ = std::move(still_waiting);
  request_splits(demanded, any_unplaced, now);
  cancel_stale_transitions(demanded);
  if (opts_.strategy == SwitchStrategy::SoftPreempt) start_speculation(now);

  // Mode signaling, then execution.
  apply_ready_transitions(now, rep);
  execute(now, rep);

  rep.q_wait = q_wait_.size();
  rep.idle = rep.steps_started == 0 && rep.admitted == 0 && rep.broadcasts.empty() && rep.tokens_emitted == 0;
  sync_engine_states();

  std::stable_sort(pending_events_.begin(), pending_events_.end(), [](const SimEvent& a, const SimEvent& b) {
    return a.time < b.time;
  });
  events_.insert(events_.end(), pending_events_.begin(), pending_events_.end());
  pending_events_.clear();
  return rep;
}

// ---- completion ---------------------------------------------------------------

void Scheduler::complete_due(SimTime now, IterationReport& rep) {
  for (auto& [key, u] : units_) {
    if (u.phase == UnitPhase::Idle || u.busy_until > now) continue;
    if (u.phase == UnitPhase::Stepping) {
      finish_step(u, now, rep);
    } else {
      finish_switch(u, now);
    }
  }
}

void Scheduler::finish_step(Unit& u, SimTime now, IterationReport& rep) {
  u.phase = UnitPhase::Idle;
  log_event(now, SimEventKind::StepComplete, -1, -1, &u);
  const auto slices = std::move(u.step);
  u.step.clear();
  for (const auto& s : slices) {
    auto& rec = records_.at(s.request);
    auto& live = live_.at(s.request);
    if (s.prefill_tokens > 0) {
      live.prefilled += s.prefill_tokens;
      if (live.prefilled >= live.prefill_target) {
        live.recomputing = false;
        if (rec.emitted == 0) emit_token(rec, u, now, rep);
      }
    }
    if (s.decode) emit_token(rec, u, now, rep);
    if (rec.emitted >= rec.request.output_tokens) finish_request(s.request, u, now, rep);
  }
}

void Scheduler::finish_switch(Unit& u, SimTime now) {
  u.phase = UnitPhase::Idle;
  log_event(now, SimEventKind::SwitchEffective, -1, -1, &u);
  if (u.degree != 1) return;
  auto& paused = paused_[static_cast<std::size_t>(u.members.front())];
  for (RequestId id : paused) {
    auto& rec = records_.at(id);
    kv_.remap_on_switch(id, 1, RemapPolicy::PreserveResident);
    rec.request.transition(RequestState::Running);
    live_.at(id).unit = u.members.front();
    u.running.push_back(id);
    log_decision(now, DecisionKind::Resume, id, u.members);
    log_event(now, SimEventKind::Resume, id, -1, &u);
  }
  paused.clear();
}

void Scheduler::emit_token(RequestRecord& rec, Unit& u, SimTime now, IterationReport& rep) {
  const int index = rec.emitted++;
  rec.emit_times.push_back(now);
  if (rec.first_token < 0) rec.first_token = now;
  if (rec.emitted < rec.request.output_tokens) kv_.append_tokens(rec.request.id, 1);
  log_event(now, SimEventKind::Emit, rec.request.id, index, &u);
  ++rep.tokens_emitted;
}

void Scheduler::finish_request(RequestId id, Unit& u, SimTime now, IterationReport& rep) {
  auto& rec = records_.at(id);
  auto& live = live_.at(id);
  if (rec.request.state == RequestState::SpeculativeDP) {
    // Completed entirely during speculation: it ran as an ordinary DP request.
    rec.request.transition(RequestState::Running);
    if (auto it = transitions_.find(live.transition); it != transitions_.end()) erase_id(it->second.speculating, id);
  }
  rec.request.transition(RequestState::Finished);
  rec.finish = now;
  kv_.free(id);
  erase_id(u.running, id);
  live_.erase(id);
  log_event(now, SimEventKind::Finish, id, -1, &u);
  rep.finished.push_back(id);
}

// ---- placement ------------------------------------------------------------------

ParallelMode Scheduler::mode_for(const RequestRecord& rec, const LoadEstimate& load) {
  const ParallelMode mode = assign_mode(rec.request, load, opts_.policy, mode_ctx_);
  if (mode.degree > 1 && (!cfg_.supports(mode.degree) || cfg_.num_engines % mode.degree != 0)) {
    throw Error(ErrorCode::NoFeasibleDegree, "degree " + std::to_string(mode.degree) + " is not deployable");
  }
  const std::int64_t need = static_cast<std::int64_t>(rec.request.prompt_tokens) + rec.request.output_tokens;
  if (need > mode_ctx_.capacity_tokens.at(mode.degree)) {
    throw Error(ErrorCode::NoFeasibleDegree, "request exceeds the capacity of " + to_string(mode));
  }
  return mode;
}

std::int64_t Scheduler::future_blocks(Rank engine) const {
  std::int64_t total = 0;
  auto add = [&](RequestId id) {
    const auto& rec = records_.at(id);
    const auto& e = kv_.entry(id);
    const std::int64_t full = static_cast<std::int64_t>(rec.request.prompt_tokens) + rec.request.output_tokens;
    total += std::max<std::int64_t>(0, kv_.blocks_for(full, e.tp_degree) - e.logical_blocks());
  };
  const auto& u = units_.at(unit_of_[static_cast<std::size_t>(engine)]);
  for (RequestId id : u.running) add(id);
  for (RequestId id : paused_[static_cast<std::size_t>(engine)]) add(id);
  return total;
}

bool Scheduler::has_headroom(const Unit& u, std::int64_t tokens) const {
  auto need = kv_.blocks_for(tokens, u.degree);
  if (u.degree == 1 && opts_.strategy == SwitchStrategy::HardPreempt) {
    need += static_cast<std::int64_t>(opts_.preempt_reserve_fraction * kv_.blocks_per_engine());
  }
  for (Rank m : u.members) {
    if (kv_.free_blocks(m) - future_blocks(m) < need) return false;
  }
  return true;
}

bool Scheduler::admit(RequestRecord& rec, Unit& u, SimTime now, bool speculative) {
  const auto& r = rec.request;
  if (!has_headroom(u, static_cast<std::int64_t>(r.prompt_tokens) + r.output_tokens)) return false;
  const auto h = kv_params(cfg_.b_base, spec_.num_kv_heads, u.degree).h_req;
  kv_.allocate(r.id, r.prompt_tokens, u.degree, u.members, h);
  rec.request.transition(speculative ? RequestState::SpeculativeDP : RequestState::Running);
  if (rec.first_scheduled < 0) rec.first_scheduled = now;
  Live live;
  live.prefill_target = r.prompt_tokens;
  live.unit = u.members.front();
  live_[r.id] = live;
  u.running.push_back(r.id);
  return true;
}

bool Scheduler::try_place(RequestRecord& rec, ParallelMode mode, SimTime now) {
  Unit* best = nullptr;
  for (auto& [key, u] : units_) {
    if (u.degree != mode.degree || u.transition >= 0) continue;
    if (u.preempting && (u.sealed || rec.request.priority != Priority::High)) continue;
    if (static_cast<int>(u.running.size()) >= cost_.max_batch) continue;
    if (u.degree == 1 && !paused_[static_cast<std::size_t>(key)].empty()) continue;
    if (!best || u.running.size() < best->running.size()) best = &u;
  }
  return best && admit(rec, *best, now, false);
}

bool Scheduler::segment_fits(const RankTuple& segment, std::int64_t tokens, int degree) const {
  const auto need = kv_.blocks_for(tokens, degree);
  for (Rank m : segment) {
    if (kv_.free_blocks(m) - future_blocks(m) < need) return false;
  }
  return true;
}

bool Scheduler::has_free_slot(int degree, Priority priority) const {
  for (const auto& [key, u] : units_) {
    if (u.degree != degree || u.transition >= 0) continue;
    if (u.preempting && (u.sealed || priority != Priority::High)) continue;
    if (static_cast<int>(u.running.size()) < cost_.max_batch) return true;
  }
  return false;
}

std::vector<Rank> Scheduler::units_intersecting(const RankTuple& segment) const {
  std::vector<Rank> keys;
  for (const auto& [key, u] : units_) {
    if (intersects(u.members, segment)) keys.push_back(key);
  }
  return keys;
}

std::optional<RankTuple> Scheduler::pick_segment(int degree, bool hard) const {
  const int degrees[] = {degree};
  std::optional<RankTuple> best;
  std::tuple<std::int64_t, std::int64_t> best_score{};
  for (const auto& seg : enumerate_tp_groups(cfg_.num_engines, degrees)) {
    bool ok = true;
    std::int64_t straggler = 0, total = 0;
    for (Rank key : units_intersecting(seg)) {
      const auto& u = units_.at(key);
      if (u.transition >= 0 || u.preempting || (u.degree == degree && u.members == seg)) ok = false;
      if (hard && u.degree > 1) ok = false;
      for (Rank m : u.members) {
        if (!paused_[static_cast<std::size_t>(m)].empty()) ok = false;
      }
      if (!ok) break;
      for (RequestId id : u.running) {
        const auto& rec = records_.at(id);
        const auto& live = live_.at(id);
        const std::int64_t left = (rec.request.output_tokens - rec.emitted) +
                                  (live.prefill_target - live.prefilled) / std::max<std::int64_t>(1, cost_.prefill_chunk_tokens / 64);
        straggler = std::max(straggler, left);
        total += left;
      }
    }
    if (!ok) continue;
    const auto score = std::make_tuple(straggler, total);
    if (!best || score < best_score) {
      best = seg;
      best_score = score;
    }
  }
  return best;
}

void Scheduler::request_transition(RequestRecord& rec, ParallelMode mode, SimTime now) {
  if (!mode.is_tp() || std::holds_alternative<StaticLayout>(opts_.policy)) return;
  const RequestId id = rec.request.id;
  bool hard = opts_.strategy == SwitchStrategy::HardPreempt &&
              (!opts_.hard_preempt_high_only || rec.request.priority == Priority::High);

  for (auto& [tid, t] : transitions_) {
    if (t.degree != mode.degree || t.hard != hard) continue;
    if (static_cast<int>(t.reserved.size() + t.speculating.size()) >= cost_.max_batch) continue;
    t.reserved.push_back(id);
    return;
  }
  const std::int64_t need = static_cast<std::int64_t>(rec.request.prompt_tokens) + rec.request.output_tokens;
  auto seg = pick_segment(mode.degree, hard);
  // Paused requests keep their blocks, so preempting only helps if the request fits beside them.
  if (seg && hard && !segment_fits(*seg, need, mode.degree)) return;
  if (!seg && hard) {
    if (preempt_rejected_.insert(id).second) log_decision(now, DecisionKind::RejectPreempt, id, {});
    hard = false;
    for (auto& [tid, t] : transitions_) {
      if (t.degree != mode.degree || t.hard) continue;
      if (static_cast<int>(t.reserved.size() + t.speculating.size()) >= cost_.max_batch) continue;
      t.reserved.push_back(id);
      return;
    }
    seg = pick_segment(mode.degree, false);
  }
  if (!seg) return;
  Transition t;
  t.id = next_transition_++;
  t.segment = *seg;
  t.degree = mode.degree;
  t.hard = hard;
  t.started = now;
  t.reserved.push_back(id);
  for (Rank key : units_intersecting(t.segment)) units_.at(key).transition = t.id;
  transitions_.emplace(t.id, std::move(t));
}

void Scheduler::request_splits(const std::set<int>& demanded, bool any_unplaced, SimTime now) {
  if (std::holds_alternative<StaticLayout>(opts_.policy)) return;
  for (auto& [key, u] : units_) {
    if (u.degree == 1 || u.transition >= 0) continue;
    const bool unused = !u.preempting && any_unplaced && !demanded.count(u.degree);
    // Every admissible High request was placed earlier in this iteration.
    const bool preempt_done = u.preempting && u.running.empty();
    if (!unused && !preempt_done) continue;
    Transition t;
    t.id = next_transition_++;
    t.segment = u.members;
    t.degree = 1;
    t.started = now;
    u.transition = t.id;
    transitions_.emplace(t.id, std::move(t));
  }
}

void Scheduler::cancel_stale_transitions(const std::set<int>& demanded) {
  std::vector<int> stale;
  for (const auto& [id, t] : transitions_) {
    if (t.degree > 1 && t.reserved.empty() && t.speculating.empty()) stale.push_back(id);
    if (t.degree == 1) {
      const auto& u = units_.at(t.segment.front());
      if (!u.preempting && demanded.count(u.degree)) stale.push_back(id);
    }
  }
  for (int id : stale) {
    for (auto& [key, u] : units_) {
      if (u.transition == id) u.transition = -1;
    }
    transitions_.erase(id);
  }
}

void Scheduler::start_speculation(SimTime now) {
  for (auto& [tid, t] : transitions_) {
    if (t.degree == 1 || t.hard || t.reserved.empty()) continue;
    std::vector<Rank> idle;
    for (Rank key : units_intersecting(t.segment)) {
      const auto& u = units_.at(key);
      if (u.degree == 1 && u.running.empty() && paused_[static_cast<std::size_t>(key)].empty()) idle.push_back(key);
    }
    if (idle.empty()) continue;
    std::vector<RequestId> keep;
    std::size_t next = 0;
    for (RequestId id : t.reserved) {
      bool placed = false;
      for (std::size_t tries = 0; tries < idle.size() && !placed; ++tries) {
        auto& u = units_.at(idle[next++ % idle.size()]);
        if (static_cast<int>(u.running.size()) >= cost_.max_batch) continue;
        auto& rec = records_.at(id);
        if (!admit(rec, u, now, true)) continue;
        rec.speculated = true;
        live_.at(id).transition = t.id;
        t.speculating.push_back(id);
        erase_id(q_wait_, id);
        log_decision(now, DecisionKind::Speculate, id, t.segment);
        placed = true;
      }
      if (!placed) keep.push_back(id);
    }
    t.reserved = std::move(keep);
  }
}

// ---- mode signaling ---------------------------------------------------------------

bool Scheduler::transition_ready(const Transition& t) const {
  for (Rank key : units_intersecting(t.segment)) {
    const auto& u = units_.at(key);
    if (u.phase != UnitPhase::Idle) return false;
    if (t.hard) continue;  // running requests get paused in place
    for (RequestId id : u.running) {
      if (live_.at(id).transition != t.id) return false;
    }
  }
  return true;
}

void Scheduler::apply_ready_transitions(SimTime now, IterationReport& rep) {
  std::vector<int> ready;
  for (const auto& [id, t] : transitions_) {
    if (transition_ready(t)) ready.push_back(id);
  }
  for (int id : ready) {
    apply_transition(transitions_.at(id), now, rep);
    transitions_.erase(id);
  }
}

void Scheduler::apply_transition(Transition& t, SimTime now, IterationReport& rep) {
  const SimTime effective = now + from_ms(cfg_.switch_latency_ms);
  const auto keys = units_intersecting(t.segment);
  std::vector<RankTuple> leftovers;

  for (Rank key : keys) {
    auto& u = units_.at(key);
    if (t.hard) {
      for (RequestId id : u.running) {
        auto& rec = records_.at(id);
        kv_.remap_on_switch(id, 1, RemapPolicy::PreserveResident);
        rec.request.transition(RequestState::Paused);
        ++rec.pauses;
        live_.at(id).unit = -1;
        paused_[static_cast<std::size_t>(key)].push_back(id);
        log_decision(now, DecisionKind::Pause, id, t.segment);
        log_event(now, SimEventKind::Pause, id, -1, &u);
      }
      u.running.clear();
    }
    const bool contained = std::all_of(u.members.begin(), u.members.end(), [&](Rank m) {
      return std::find(t.segment.begin(), t.segment.end(), m) != t.segment.end();
    });
    if (u.degree > 1 && (!contained || t.degree == 1)) {
      const ControlMessage msg{ControlKind::ResetTP, 1, u.members, epoch_, 0};
      const auto acks = broadcast_mode(engines_, msg, pool_);
      rep.acks.insert(rep.acks.end(), acks.begin(), acks.end());
      rep.broadcasts.push_back(msg);
      log_decision(now, DecisionKind::ResetTP, -1, u.members);
    }
    if (!contained) {
      for (Rank m : u.members) {
        if (std::find(t.segment.begin(), t.segment.end(), m) == t.segment.end()) leftovers.push_back({m});
      }
    }
  }
  for (Rank key : keys) units_.erase(key);

  if (t.degree > 1) {
    const ControlMessage msg{ControlKind::SetTP, t.degree, t.segment, epoch_, 0};
    const auto acks = broadcast_mode(engines_, msg, pool_);
    rep.acks.insert(rep.acks.end(), acks.begin(), acks.end());
    rep.broadcasts.push_back(msg);
    log_decision(now, DecisionKind::SetTP, -1, t.segment);
    add_unit(t.segment, UnitPhase::Switching, effective);
    auto& u = units_.at(t.segment.front());
    u.preempting = t.hard;
    for (RequestId id : t.speculating) {
      auto& rec = records_.at(id);
      const auto report = kv_.remap_on_switch(id, t.degree, RemapPolicy::Recompute, t.segment);
      rec.request.transition(RequestState::Running);
      rec.recomputed_tokens += report.tokens_to_recompute;
      rec.speculative_tokens = rec.emitted;
      auto& live = live_.at(id);
      live.prefilled = 0;
      live.prefill_target = report.tokens_to_recompute;
      live.recomputing = true;
      live.unit = u.members.front();
      live.transition = -1;
      u.running.push_back(id);
      log_decision(now, DecisionKind::Recompute, id, t.segment, report.tokens_to_recompute);
    }
  } else {
    for (Rank m : t.segment) add_unit({m}, UnitPhase::Switching, effective);
  }
  for (auto& m : leftovers) add_unit(m, UnitPhase::Switching, effective);
}

// ---- execution --------------------------------------------------------------------

void Scheduler::execute(SimTime now, IterationReport& rep) {
  for (auto& [key, u] : units_) {
    if (u.phase != UnitPhase::Idle || u.running.empty()) continue;
    if (u.transition >= 0 && transitions_.at(u.transition).hard) continue;  // held for the pause

    std::int64_t budget = cost_.prefill_chunk_tokens;
    std::int64_t prefill_total = 0;
    int decodes = 0;
    std::vector<StepSlice> slices;
    for (RequestId id : u.running) {
      const auto& live = live_.at(id);
      StepSlice s{id, 0, false};
      if (live.prefilled < live.prefill_target) {
        s.prefill_tokens = std::min(budget, live.prefill_target - live.prefilled);
        budget -= s.prefill_tokens;
        prefill_total += s.prefill_tokens;
      } else {
        s.decode = true;
        ++decodes;
      }
      if (s.prefill_tokens > 0 || s.decode) slices.push_back(s);
    }
    if (slices.empty()) continue;

    if (u.degree > 1) {
      auto& group = pool_.get(u.members);
      const bool fault = fault_unit_ && *fault_unit_ == key;
      for (std::size_t i = 0; i < u.members.size(); ++i) {
        const bool stale = fault && i + 1 == u.members.size();
        group.post(u.members[i], CollectiveOp::AllReduce, stale ? u.seq_view + 1 : u.seq_view, {}, now);
      }
      group.complete(now);
      ++u.seq_view;
    }

    const SimTime dt = std::max<SimTime>(1, cost_.mixed_step(prefill_total, decodes, u.degree));
    u.step = std::move(slices);
    u.sealed = u.preempting;
    u.phase = UnitPhase::Stepping;
    u.busy_until = now + dt;
    ++rep.steps_started;
    ++steps_executed_;
  }
}

std::vector<PendingTransition> Scheduler::pending_transitions() const {
  std::vector<PendingTransition> out;
  for (const auto& [id, t] : transitions_) {
    out.push_back({t.segment, t.degree, t.hard, t.reserved.size(), t.speculating.size()});
  }
  return out;
}

void Scheduler::sync_engine_states() {
  for (auto& e : engines_) e.active_requests.clear();
  for (const auto& [key, u] : units_) {
    for (Rank m : u.members) {
      auto& e = engines_[static_cast<std::size_t>(m)];
      e.busy_until = u.phase == UnitPhase::Idle ? 0 : u.busy_until;
      e.active_requests = u.running;
    }
  }
}

std::string Scheduler::describe() const {
  std::ostringstream os;
  os << "q_wait=" << q_wait_.size();
  for (const auto& [key, u] : units_) {
    os << " unit[" << format_group(u.members) << " phase=" << static_cast<int>(u.phase) << " running=" << u.running.size()
       << " transition=" << u.transition << (u.preempting ? " preempting" : "") << (u.sealed ? " sealed" : "") << ']';
  }
  for (const auto& [id, t] : transitions_) {
    os << " transition[" << id << ' ' << format_group(t.segment) << " degree=" << t.degree << (t.hard ? " hard" : "")
       << " reserved=" << t.reserved.size() << " speculating=" << t.speculating.size() << ']';
  }
  for (std::size_t e = 0; e < paused_.size(); ++e) {
    if (!paused_[e].empty()) os << " paused[" << e << "]=" << paused_[e].size();
  }
  if (!q_wait_.empty()) {
    const auto& r = records_.at(q_wait_.front()).request;
    os << " head=" << r.id << ' ' << to_string(r.priority) << ' ' << to_string(records_.at(r.id).assigned);
  }
  return os.str();
}

}  // namespace shardshift

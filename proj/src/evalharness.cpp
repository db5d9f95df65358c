#include "sima/evalharness.hpp"

#include <algorithm>

namespace sima::eval {

bool ocr_evaluate(std::span<const TextEvent> events, const OcrSpec& spec,
                  std::span<const ActionEvent> actions) {
  if (spec.patterns.empty()) return false;
  std::vector<std::regex> patterns;
  patterns.reserve(spec.patterns.size());
  for (const auto& p : spec.patterns) patterns.emplace_back(p);

  auto action_ok = [&](std::int64_t event_tick) {
    if (!spec.action) return true;
    // The text at tick T was produced by the action applied at T-1.
    for (const auto& a : actions) {
      if (a.tick < event_tick && a.tick >= event_tick - spec.action->within_ticks &&
          a.keys.has(spec.action->key)) {
        return true;
      }
    }
    return false;
  };

  std::size_t next = 0;
  for (const auto& e : events) {
    if (!std::regex_search(e.text, patterns[next])) continue;
    if (next + 1 < patterns.size()) {
      ++next;
    } else if (action_ok(e.tick)) {
      return true;
    }
  }
  return false;
}

EpisodeEvaluator::EpisodeEvaluator(const TaskSpec& task, const WorldState& initial)
    : task_(task), log_offset_(initial.log.size()),
      origin_{initial.avatar.x, initial.avatar.y, initial.avatar.facing} {
  task_.evaluator.validate();
  if (const auto* gt = std::get_if<GroundTruthSpec>(&task_.evaluator.body)) {
    worlds::validate_refs(initial, *gt);
  }
  if (const auto* ocr = std::get_if<OcrSpec>(&task_.evaluator.body)) {
    for (const auto& f : ocr->forbidden) forbidden_.emplace_back(f);
  }
  for (const auto& d : task_.distractor_ids) {
    const Entity* e = initial.find_label(d);
    if (e == nullptr) throw SpecError("distractor '" + d + "' not present in initial state");
    distractor_entities_.push_back(e->id);
  }
}

std::optional<EpisodeStatus> EpisodeEvaluator::update(const WorldState& state, const ActionEvent& applied,
                                                      const Observation& obs) {
  if (verdict_) return verdict_;
  actions_.push_back(applied);
  events_.insert(events_.end(), obs.text_events.begin(), obs.text_events.end());

  auto decide = [&](EpisodeStatus s) {
    verdict_ = s;
    decided_at_ = state.tick;
    return verdict_;
  };

  std::span<const InteractionRecord> log(state.log);
  log = log.subspan(std::min(log_offset_, log.size()));
  for (const auto& rec : log) {
    if (rec.kind == Primitive::kInteract &&
        std::find(distractor_entities_.begin(), distractor_entities_.end(), rec.entity) !=
            distractor_entities_.end()) {
      return decide(EpisodeStatus::kDistractorFailure);
    }
  }

  if (const auto* gt = std::get_if<GroundTruthSpec>(&task_.evaluator.body)) {
    worlds::GoalStatus g;
    if (state.origin == origin_) {
      g = worlds::check_goal(state, *gt, log);
    } else {
      WorldState view = state;
      view.origin = origin_;
      g = worlds::check_goal(view, *gt, log);
    }
    if (g == worlds::GoalStatus::kSuccess) return decide(EpisodeStatus::kSuccess);
    if (g == worlds::GoalStatus::kDistractorFailure) return decide(EpisodeStatus::kDistractorFailure);
    if (g == worlds::GoalStatus::kFailure) return decide(EpisodeStatus::kFailure);
    return std::nullopt;
  }
  if (const auto* ocr = std::get_if<OcrSpec>(&task_.evaluator.body)) {
    for (const auto& e : obs.text_events) {
      for (const auto& f : forbidden_) {
        if (std::regex_search(e.text, f)) return decide(EpisodeStatus::kDistractorFailure);
      }
    }
    if (!obs.text_events.empty() && ocr_evaluate(events_, *ocr, actions_)) {
      return decide(EpisodeStatus::kSuccess);
    }
  }
  return std::nullopt;
}

net::TickMonitor EpisodeEvaluator::monitor() {
  return [this](const WorldState& s, const ActionEvent& a, const Observation& o) { return update(s, a, o); };
}

// ---------------------------------------------------------------------------

namespace {

/// Adds a fixed simulated compute time to any client.
class TimedClient : public net::Client {
 public:
  TimedClient(net::Client& inner, double ms) : inner_(inner), ms_(ms) {}
  void on_start(const net::SessionConfig& c, const std::string& i) override { inner_.on_start(c, i); }
  std::optional<net::ActionChunk> on_observation(const Observation& o) override {
    return inner_.on_observation(o);
  }
  void on_instruction(const std::string& t) override { inner_.on_instruction(t); }
  double compute_ms(std::int64_t tick) override { return ms_ + inner_.compute_ms(tick); }

 private:
  net::Client& inner_;
  double ms_;
};

std::string trace_ref(const TaskSpec& task, std::uint64_t seed) {
  return task.task_id + "#" + std::to_string(seed);
}

}  // namespace

EpisodeRecord run_episode(const ClientFactory& agent, const TaskSpec& task, std::uint64_t seed,
                          const EpisodeOptions& options) {
  EpisodeRecord rec;
  rec.task_id = task.task_id;
  rec.seed = seed;
  WorldState initial = instantiate_task(task, seed);
  EpisodeEvaluator evaluator(task, initial);

  net::SessionSpec spec;
  spec.initial = initial;
  spec.task_id = task.task_id;
  spec.seed = seed;
  spec.instruction = task.instruction;
  spec.budget_ticks = task.budget_ticks;
  spec.config = options.config;
  spec.config.record = options.keep_trajectory;
  spec.role = net::Role::kAgent;
  spec.monitor = evaluator.monitor();
  spec.jitter_seed = options.jitter_seed;

  try {
    auto client = agent(task, initial);
    TimedClient timed(*client, options.compute_ms);
    auto result = net::run_simulated_session(spec, timed);
    rec.outcome.status = result.status;
    rec.outcome.ticks_used = static_cast<int>(result.metrics.ticks);
    rec.outcome.trace_ref = trace_ref(task, seed);
    rec.metrics = result.metrics;
    if (options.keep_trajectory) rec.trajectory = std::move(result.trajectory);
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception& e) {
    rec.outcome.status = EpisodeStatus::kFailure;
    rec.outcome.trace_ref = trace_ref(task, seed) + " agent error: " + e.what();
  }
  return rec;
}

SwitchResult switch_test(const ClientFactory& agent, const TaskSpec& task_a, const TaskSpec& task_b,
                         std::int64_t switch_tick, std::uint64_t seed, const EpisodeOptions& options) {
  if (task_a.save_state_ref != task_b.save_state_ref) {
    throw SpecError("switch test tasks must share an initial state");
  }
  SwitchResult out;
  if (switch_tick >= task_a.budget_ticks) {
    out.degenerate = true;
    out.outcome = run_episode(agent, task_a, seed, options).outcome;
    return out;
  }
  WorldState initial = instantiate_task(task_a, seed);
  EpisodeEvaluator eval_a(task_a, initial);
  std::optional<EpisodeEvaluator> eval_b;
  if (switch_tick <= 0) eval_b.emplace(task_b, initial);

  net::SessionSpec spec;
  spec.initial = initial;
  spec.task_id = task_a.task_id + "->" + task_b.task_id;
  spec.seed = seed;
  spec.instruction = task_a.instruction;
  spec.interrupts.push_back({std::max<std::int64_t>(switch_tick, 0), task_b.instruction});
  spec.budget_ticks = task_a.budget_ticks;
  spec.config = options.config;
  spec.config.record = false;
  spec.jitter_seed = options.jitter_seed;
  spec.monitor = [&](const WorldState& s, const ActionEvent& a,
                     const Observation& o) -> std::optional<EpisodeStatus> {
    // s.tick - 1 is the tick whose action was just applied.
    const bool after_switch = s.tick - 1 >= switch_tick;
    auto before = eval_a.verdict();
    auto va = eval_a.update(s, a, o);
    if (after_switch && !before && va == EpisodeStatus::kSuccess) return EpisodeStatus::kFailure;
    if (eval_b && after_switch) return eval_b->update(s, a, o);
    // B is judged only on what happens from the switch on.
    if (!eval_b && s.tick >= switch_tick) eval_b.emplace(task_b, s);
    return std::nullopt;
  };

  try {
    auto client = agent(task_a, initial);
    TimedClient timed(*client, options.compute_ms);
    auto result = net::run_simulated_session(spec, timed);
    out.outcome.status = result.status;
    out.outcome.ticks_used = static_cast<int>(result.metrics.ticks);
    out.outcome.trace_ref = trace_ref(task_b, seed);
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception& e) {
    out.outcome.status = EpisodeStatus::kFailure;
    out.outcome.trace_ref = trace_ref(task_b, seed) + " agent error: " + e.what();
  }
  return out;
}

}  // namespace sima::eval

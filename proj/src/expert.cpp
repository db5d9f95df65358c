#include <deque>

#include "sima/datapipe.hpp"
#include "sima/evalharness.hpp"
#include "sima/worlds.hpp"

namespace sima::data {

namespace {

using worlds::Pose;

enum class NavAction : std::uint8_t { kForward, kTurnLeft, kTurnRight, kStrafeLeft, kStrafeRight, kBack };
constexpr std::array<NavAction, 6> kPreference = {NavAction::kForward,    NavAction::kTurnLeft,
                                                  NavAction::kTurnRight,  NavAction::kStrafeLeft,
                                                  NavAction::kStrafeRight, NavAction::kBack};

CellPos move_delta(NavAction a, int facing) {
  CellPos f = facing_delta(facing);
  CellPos r = right_delta(facing);
  switch (a) {
    case NavAction::kForward: return f;
    case NavAction::kBack: return {-f.x, -f.y};
    case NavAction::kStrafeLeft: return {-r.x, -r.y};
    case NavAction::kStrafeRight: return r;
    default: return {0, 0};
  }
}

Pose successor(const WorldState& s, Pose p, NavAction a) {
  if (a == NavAction::kTurnLeft) return {p.x, p.y, (p.facing + 3) % 4};
  if (a == NavAction::kTurnRight) return {p.x, p.y, (p.facing + 1) % 4};
  CellPos d = move_delta(a, p.facing);
  CellPos n{p.x + d.x, p.y + d.y};
  if (!s.walkable(n)) return p;
  return {n.x, n.y, p.facing};
}

ActionEvent nav_event(std::int64_t tick, NavAction a) {
  ActionEvent e = noop_action(tick);
  switch (a) {
    case NavAction::kForward: e.keys.set(Key::kW); break;
    case NavAction::kBack: e.keys.set(Key::kS); break;
    case NavAction::kStrafeLeft: e.keys.set(Key::kA); break;
    case NavAction::kStrafeRight: e.keys.set(Key::kD); break;
    case NavAction::kTurnLeft: e.mouse_dx = -kMouseMax; break;
    case NavAction::kTurnRight: e.mouse_dx = kMouseMax; break;
  }
  return e;
}

/// Shortest-path step towards any pose satisfying `goal`. Distances come from
/// a reverse breadth-first search over (x, y, facing); ties break by the
/// fixed preference order, so the choice depends on the state alone.
/// Returns nullopt when already at a goal pose or no goal is reachable.
template <typename GoalFn>
std::optional<ActionEvent> navigate(const WorldState& s, GoalFn&& goal) {
  const int n = s.width * s.height * 4;
  auto idx = [&](const Pose& p) { return (p.y * s.width + p.x) * 4 + p.facing; };
  std::vector<int> dist(static_cast<std::size_t>(n), -1);
  std::deque<Pose> q;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      if (!s.walkable({x, y})) continue;
      for (int f = 0; f < 4; ++f) {
        Pose p{x, y, f};
        if (goal(p)) {
          dist[static_cast<std::size_t>(idx(p))] = 0;
          q.push_back(p);
        }
      }
    }
  }
  while (!q.empty()) {
    Pose cur = q.front();
    q.pop_front();
    int dc = dist[static_cast<std::size_t>(idx(cur))];
    auto visit = [&](Pose p) {
      auto& d = dist[static_cast<std::size_t>(idx(p))];
      if (d < 0) {
        d = dc + 1;
        q.push_back(p);
      }
    };
    visit({cur.x, cur.y, (cur.facing + 1) % 4});
    visit({cur.x, cur.y, (cur.facing + 3) % 4});
    for (NavAction a : {NavAction::kForward, NavAction::kBack, NavAction::kStrafeLeft, NavAction::kStrafeRight}) {
      CellPos d = move_delta(a, cur.facing);
      CellPos prev{cur.x - d.x, cur.y - d.y};
      if (s.walkable(prev)) visit({prev.x, prev.y, cur.facing});
    }
  }
  const auto& av = s.avatar;
  Pose here{av.x, av.y, av.facing};
  int dh = dist[static_cast<std::size_t>(idx(here))];
  if (dh <= 0) return std::nullopt;
  for (NavAction a : kPreference) {
    Pose next = successor(s, here, a);
    if (dist[static_cast<std::size_t>(idx(next))] == dh - 1) return nav_event(s.tick, a);
  }
  return std::nullopt;
}

/// Edge-triggered inputs need a release tick between presses.
ActionEvent press(const WorldState& s, Key k) {
  ActionEvent e = noop_action(s.tick);
  if (!s.avatar.prev_keys.has(k)) e.keys.set(k);
  return e;
}

ActionEvent click(const WorldState& s) {
  ActionEvent e = noop_action(s.tick);
  e.left_button = !s.avatar.prev_left;
  return e;
}

ActionEvent right_click(const WorldState& s) {
  ActionEvent e = noop_action(s.tick);
  e.right_button = !s.avatar.prev_right;
  return e;
}

ActionEvent interact_with(const WorldState& s, CellPos cell, ActionEvent (*act)(const WorldState&)) {
  auto step = navigate(s, [&](const Pose& p) { return worlds::pose_targets(s, p, cell); });
  if (step) return *step;
  if (worlds::pose_targets(s, {s.avatar.x, s.avatar.y, s.avatar.facing}, cell)) return act(s);
  return noop_action(s.tick);
}

ActionEvent key_action(const WorldState& s, Key k) { return press(s, k); }

ActionEvent use_key(const WorldState& s) { return press(s, Key::kE); }
ActionEvent craft_key(const WorldState& s) { return press(s, Key::kF); }

Key hotbar_key(Tool t) {
  switch (t) {
    case Tool::kAxe: return Key::k1;
    case Tool::kPick: return Key::k2;
    case Tool::kBeam: return Key::k3;
    case Tool::kHands: return Key::k4;
  }
  return Key::k4;
}

ActionEvent get_hold_of(const WorldState& s, std::uint16_t id) {
  const auto& av = s.avatar;
  if (av.held == id) return noop_action(s.tick);
  if (av.held != kNoEntity) {
    // Put the wrong item down in front, turning until there is room.
    CellPos f = facing_delta(av.facing);
    if (s.walkable({av.x + f.x, av.y + f.y})) return right_click(s);
    return nav_event(s.tick, NavAction::kTurnLeft);
  }
  const Entity* e = s.find(id);
  if (e == nullptr || !e->placed()) return noop_action(s.tick);
  return interact_with(s, {e->x, e->y}, click);
}

std::uint16_t entity_ref(const WorldState& s, const std::string& ref) {
  return worlds::resolve_ref(s, ref).entity;
}

ActionEvent ground_truth_action(const GroundTruthSpec& gt, const WorldState& s) {
  const auto& av = s.avatar;
  const std::string& p = gt.predicate;
  if (p == "moved_forward") {
    ActionEvent e = noop_action(s.tick);
    e.keys.set(Key::kW);
    return e;
  }
  if (p == "turned_left") return nav_event(s.tick, NavAction::kTurnLeft);
  if (p == "turned_right") return nav_event(s.tick, NavAction::kTurnRight);
  if (p == "looked_up" || p == "looked_down") {
    ActionEvent e = noop_action(s.tick);
    e.mouse_dy = static_cast<std::int8_t>(p == "looked_up" ? kMouseMax : -kMouseMax);
    return e;
  }
  if (p == "jumped") return press(s, Key::kSpace);
  if (p == "crouched") {
    ActionEvent e = noop_action(s.tick);
    e.keys.set(Key::kC);
    return e;
  }
  if (p == "menu_open") return av.menu_open ? noop_action(s.tick) : press(s, Key::kEsc);
  if (p == "near") {
    const Entity* t = s.find(entity_ref(s, gt.targets.at(0)));
    if (t == nullptr || !t->placed()) return noop_action(s.tick);
    auto step = navigate(s, [&](const Pose& pose) {
      return std::abs(pose.x - t->x) + std::abs(pose.y - t->y) <= 1;
    });
    return step.value_or(noop_action(s.tick));
  }
  if (p == "holding") return get_hold_of(s, entity_ref(s, gt.targets.at(0)));
  if (p == "chopped") {
    const Entity* carrot = s.find(entity_ref(s, gt.targets.at(0)));
    if (carrot == nullptr || carrot->chopped) return noop_action(s.tick);
    const Entity* knife = nullptr;
    for (const auto& e : s.entities) {
      if (e.type == ObjectType::kKnife) knife = &e;
    }
    if (knife == nullptr) return noop_action(s.tick);
    if (av.held != knife->id) return get_hold_of(s, knife->id);
    return interact_with(s, {carrot->x, carrot->y}, click);
  }
  if (p == "attached") {
    std::uint16_t top = entity_ref(s, gt.targets.at(0));
    std::uint16_t bottom = entity_ref(s, gt.targets.at(1));
    const Entity* t = s.find(top);
    if (t->attached_to == bottom) return noop_action(s.tick);
    if (av.held != top) return get_hold_of(s, top);
    const Entity* b = s.find(bottom);
    if (b == nullptr || !b->placed()) return noop_action(s.tick);
    return interact_with(s, {b->x, b->y}, click);
  }
  if (p == "equipped") {
    Tool want = worlds::resolve_ref(s, gt.targets.at(0)).tool;
    return av.equipped == want ? noop_action(s.tick) : key_action(s, hotbar_key(want));
  }
  return noop_action(s.tick);
}

ActionEvent ocr_action(const OcrSpec& ocr, const WorldState& s) {
  if (ocr.patterns.empty()) return noop_action(s.tick);
  const std::string& pat = ocr.patterns.front();
  if (pat.starts_with("Planks")) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        if (s.terrain_at({x, y}) == Terrain::kBench) return interact_with(s, {x, y}, craft_key);
      }
    }
    return noop_action(s.tick);
  }
  struct Node {
    const char* prefix;
    ObjectType type;
    Tool tool;
  };
  constexpr std::array<Node, 4> kNodes = {{{"Wood", ObjectType::kTree, Tool::kAxe},
                                           {"Stone", ObjectType::kRock, Tool::kPick},
                                           {"Carbon", ObjectType::kCarbon, Tool::kBeam},
                                           {"Berries", ObjectType::kBerryBush, Tool::kHands}}};
  for (const auto& n : kNodes) {
    if (!pat.starts_with(n.prefix)) continue;
    if (s.avatar.equipped != n.tool) return key_action(s, hotbar_key(n.tool));
    for (const auto& e : s.entities) {
      if (e.type == n.type && e.placed() && e.quantity > 0) return interact_with(s, {e.x, e.y}, use_key);
    }
  }
  return noop_action(s.tick);
}

}  // namespace

ActionEvent expert_action(const TaskSpec& task, const WorldState& state) {
  if (const auto* gt = std::get_if<GroundTruthSpec>(&task.evaluator.body)) return ground_truth_action(*gt, state);
  if (const auto* ocr = std::get_if<OcrSpec>(&task.evaluator.body)) return ocr_action(*ocr, state);
  return noop_action(state.tick);
}

ExpertResult scripted_expert(const TaskSpec& task, std::uint64_t seed, int tail_ticks) {
  ExpertResult out;
  WorldState state = instantiate_task(task, seed);
  eval::EpisodeEvaluator evaluator(task, state);
  auto& traj = out.trajectory;
  traj.header.world = state.world;
  traj.header.seed = seed;
  traj.header.task_id = task.task_id;
  traj.header.role = net::Role::kPlayer;
  traj.header.config.offset_k = 0;
  traj.header.initial_state = save(state);

  auto record = [&](const ActionEvent& a) {
    Observation obs = advance(state, a);
    traj.actions.push_back(a);
    for (const auto& e : obs.text_events) traj.text_events.push_back(e);
    traj.observations.push_back(obs);
    return obs;
  };

  while (state.tick < task.budget_ticks) {
    ActionEvent a = expert_action(task, state);
    Observation obs = record(a);
    if (auto v = evaluator.update(state, a, obs)) {
      out.status = *v;
      break;
    }
  }
  if (!evaluator.verdict()) out.status = EpisodeStatus::kTimeout;
  if (out.status == EpisodeStatus::kSuccess) {
    out.success_tick = evaluator.decided_at();
    for (int i = 0; i < tail_ticks; ++i) record(noop_action(state.tick));
  }
  if (traj.ticks() > 0) traj.segments.push_back({0, traj.ticks(), task.instruction, net::SegmentSource::kScripted});
  traj.end = net::EndEpisode{net::end_reason_for(out.status), traj.ticks()};
  return out;
}

// ---------------------------------------------------------------------------

ExpertClient::ExpertClient(TaskSpec task, WorldState initial)
    : task_(std::move(task)), shadow_(std::move(initial)) {}

void ExpertClient::on_start(const net::SessionConfig& config, const std::string& /*instruction*/) {
  offset_k_ = config.offset_k;
}

void ExpertClient::on_instruction(const std::string& text) {
  for (const auto& t : worlds::registry_list(task_.world)) {
    if (t.save_state_ref == task_.save_state_ref && t.instruction == text) {
      task_ = t;
      replan_ = true;
      return;
    }
  }
}

std::optional<net::ActionChunk> ExpertClient::on_observation(const Observation& obs) {
  const std::int64_t start = obs.tick + offset_k_;
  if (replan_) {
    // Forget plans the server has not committed to and rewind the shadow.
    auto snap = snapshots_.find(start);
    if (snap != snapshots_.end()) {
      shadow_ = snap->second;
      planned_.erase(planned_.lower_bound(start), planned_.end());
      snapshots_.erase(snapshots_.upper_bound(start), snapshots_.end());
    }
    replan_ = false;
  }
  while (shadow_.tick < start + net::kChunkLen) {
    const std::int64_t t = shadow_.tick;
    snapshots_[t] = shadow_;
    ActionEvent a;
    auto it = planned_.find(t);
    if (it != planned_.end()) {
      a = it->second;
    } else if (t < start) {
      // Nothing of ours covers this tick: the server repeats the held inputs.
      a = noop_action(t);
      a.keys = shadow_.avatar.prev_keys;
      a.left_button = shadow_.avatar.prev_left;
      a.right_button = shadow_.avatar.prev_right;
    } else {
      a = expert_action(task_, shadow_);
      planned_[t] = a;
    }
    advance(shadow_, a);
  }
  net::ActionChunk chunk{obs.tick, {}};
  for (std::int64_t t = start; t < start + net::kChunkLen; ++t) chunk.actions.push_back(planned_.at(t));
  snapshots_.erase(snapshots_.begin(), snapshots_.lower_bound(obs.tick));
  return chunk;
}

}  // namespace sima::data

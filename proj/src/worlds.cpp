#include "sima/worlds.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "json.hpp"

namespace sima::worlds {

namespace {

bool liftable(const WorldState& s, const Entity& e) {
  switch (s.world) {
    case WorldKind::kPlayRoom:
      return e.type == ObjectType::kCube || e.type == ObjectType::kBall ||
             e.type == ObjectType::kKnife;
    case WorldKind::kBuildLab: return e.type == ObjectType::kBlock;
    case WorldKind::kHarvest: return false;
  }
  return false;
}

Tool tool_for(ObjectType node) {
  switch (node) {
    case ObjectType::kTree: return Tool::kAxe;
    case ObjectType::kRock: return Tool::kPick;
    case ObjectType::kCarbon: return Tool::kBeam;
    default: return Tool::kHands;
  }
}

std::optional<Resource> resource_for(ObjectType node) {
  switch (node) {
    case ObjectType::kTree: return Resource::kWood;
    case ObjectType::kRock: return Resource::kStone;
    case ObjectType::kCarbon: return Resource::kCarbon;
    case ObjectType::kBerryBush: return Resource::kBerries;
    default: return std::nullopt;
  }
}

std::int32_t harvest_yield(WorldState& s, ObjectType node) {
  switch (node) {
    case ObjectType::kTree: return 1;
    case ObjectType::kRock: return 1 + static_cast<std::int32_t>(s.next_random() % 2);
    case ObjectType::kCarbon: return 20 + static_cast<std::int32_t>(s.next_random() % 11);
    case ObjectType::kBerryBush: return 1 + static_cast<std::int32_t>(s.next_random() % 3);
    default: return 0;
  }
}

void pick_up(WorldState& s, Entity& e, InteractEffect& fx) {
  if (e.attached_to != kNoEntity) {
    fx.text.push_back({0, "Detached " + e.label()});
    e.attached_to = kNoEntity;
    fx.kind = InteractEffect::Kind::kDetach;
  } else {
    fx.kind = InteractEffect::Kind::kPickUp;
  }
  e.x = -1;
  e.y = -1;
  s.avatar.held = e.id;
  fx.text.push_back({0, "Picked up " + e.label()});
}

}  // namespace

InteractEffect interact(WorldState& state, CellPos target, Verb verb) {
  InteractEffect fx;
  auto& av = state.avatar;
  const int dist = std::abs(target.x - av.x) + std::abs(target.y - av.y);
  if (dist == 0 || dist > kReachCells || !state.in_bounds(target)) {
    fx.kind = InteractEffect::Kind::kOutOfReach;
    state.log.push_back({state.tick, Primitive::kInteract, kNoEntity, 1});
    return fx;
  }

  if (verb == Verb::kDrop) {
    Entity* held = state.find(av.held);
    if (held != nullptr && dist == 1 && state.walkable(target)) {
      held->x = static_cast<std::int8_t>(target.x);
      held->y = static_cast<std::int8_t>(target.y);
      av.held = kNoEntity;
      fx.kind = InteractEffect::Kind::kDrop;
      fx.entity = held->id;
      fx.text.push_back({0, "Dropped " + held->label()});
      state.log.push_back({state.tick, Primitive::kDrop, held->id, 0});
    }
    return fx;
  }

  if (verb == Verb::kCraft) {
    if (state.terrain_at(target) == Terrain::kBench) {
      state.log.push_back({state.tick, Primitive::kCraft, kNoEntity, 0});
      auto& wood = state.inventory[static_cast<std::size_t>(Resource::kWood)];
      if (wood >= 2) {
        wood -= 2;
        state.inventory[static_cast<std::size_t>(Resource::kPlanks)] += 1;
        fx.kind = InteractEffect::Kind::kCraft;
        fx.text.push_back({0, "Planks +1"});
      }
    }
    return fx;
  }

  const Entity* visible = state.entity_at(target);
  if (visible == nullptr) return fx;  // empty cell or bare terrain: nothing happens
  Entity& e = *state.find(visible->id);
  fx.entity = e.id;
  state.log.push_back({state.tick, Primitive::kInteract, e.id, 0});

  switch (state.world) {
    case WorldKind::kPlayRoom: {
      Entity* held = state.find(av.held);
      if (e.type == ObjectType::kCarrot && !e.chopped && held != nullptr &&
          held->type == ObjectType::kKnife && state.terrain_at(target) == Terrain::kBoard) {
        e.chopped = true;
        fx.kind = InteractEffect::Kind::kChop;
        fx.text.push_back({0, "Carrot chopped"});
      } else if (verb == Verb::kGrab && held == nullptr && liftable(state, e)) {
        pick_up(state, e, fx);
      }
      break;
    }
    case WorldKind::kBuildLab: {
      if (e.type != ObjectType::kBlock) break;
      Entity* held = state.find(av.held);
      if (held == nullptr) {
        if (verb == Verb::kGrab) pick_up(state, e, fx);
      } else if (held->type == ObjectType::kBlock) {
        // `e` is the topmost block on the cell, so its top connector is free.
        held->x = e.x;
        held->y = e.y;
        held->attached_to = e.id;
        av.held = kNoEntity;
        fx.kind = InteractEffect::Kind::kAttach;
        fx.entity = held->id;
        fx.text.push_back({0, "Attached " + held->label() + " to " + e.label()});
      }
      break;
    }
    case WorldKind::kHarvest: {
      auto res = resource_for(e.type);
      if (!res || av.equipped != tool_for(e.type) || e.quantity <= 0) break;
      std::int32_t amount = std::min(e.quantity, harvest_yield(state, e.type));
      e.quantity -= amount;
      state.inventory[static_cast<std::size_t>(*res)] += amount;
      fx.kind = InteractEffect::Kind::kHarvest;
      fx.text.push_back({0, std::string(resource_label(*res)) + " +" + std::to_string(amount)});
      break;
    }
  }
  return fx;
}

// ---------------------------------------------------------------------------
// Goals

namespace {

const std::set<std::string, std::less<>> kPredicates = {
    "moved_forward", "turned_left", "turned_right", "looked_up", "looked_down", "jumped",
    "crouched", "menu_open", "near", "holding", "chopped", "attached", "equipped"};

}  // namespace

bool is_known_predicate(std::string_view predicate) { return kPredicates.contains(predicate); }

ResolvedRef resolve_ref(const WorldState& state, const std::string& ref) {
  ResolvedRef out;
  if (ref.starts_with("act:")) {
    auto p = primitive_from_name(ref.substr(4));
    if (!p) throw SpecError("unknown primitive reference '" + ref + "'");
    out.kind = ResolvedRef::Kind::kPrimitive;
    out.primitive = *p;
    return out;
  }
  if (ref.starts_with("tool:")) {
    auto t = tool_from_name(ref.substr(5));
    if (!t) throw SpecError("unknown tool reference '" + ref + "'");
    out.kind = ResolvedRef::Kind::kTool;
    out.tool = *t;
    return out;
  }
  const Entity* e = state.find_label(ref);
  if (e == nullptr) throw SpecError("dangling entity reference '" + ref + "'");
  out.kind = ResolvedRef::Kind::kEntity;
  out.entity = e->id;
  return out;
}

void validate_refs(const WorldState& state, const GroundTruthSpec& spec) {
  for (const auto& r : spec.targets) resolve_ref(state, r);
  for (const auto& r : spec.distractors) resolve_ref(state, r);
  std::size_t need = 0;
  if (spec.predicate == "near" || spec.predicate == "holding" || spec.predicate == "chopped" ||
      spec.predicate == "equipped") {
    need = 1;
  } else if (spec.predicate == "attached") {
    need = 2;
  }
  if (spec.targets.size() < need) throw SpecError("predicate " + spec.predicate + " needs targets");
}

GoalStatus check_goal(const WorldState& state, const GroundTruthSpec& spec,
                      std::span<const InteractionRecord> log) {
  for (const auto& ref : spec.distractors) {
    ResolvedRef d = resolve_ref(state, ref);
    for (const auto& rec : log) {
      bool hit = false;
      switch (d.kind) {
        case ResolvedRef::Kind::kEntity:
          hit = rec.kind == Primitive::kInteract && rec.entity == d.entity;
          break;
        case ResolvedRef::Kind::kPrimitive: hit = rec.kind == d.primitive; break;
        case ResolvedRef::Kind::kTool:
          hit = rec.kind == Primitive::kEquip && rec.arg == static_cast<std::uint8_t>(d.tool);
          break;
      }
      if (hit) return GoalStatus::kDistractorFailure;
    }
  }

  const auto& av = state.avatar;
  const auto& o = state.origin;
  auto target_entity = [&](std::size_t i) -> const Entity* {
    return state.find(resolve_ref(state, spec.targets.at(i)).entity);
  };
  auto logged = [&](Primitive p) {
    return std::any_of(log.begin(), log.end(), [p](const auto& r) { return r.kind == p; });
  };

  bool done = false;
  const std::string& p = spec.predicate;
  if (p == "moved_forward") {
    CellPos d = facing_delta(o.facing);
    done = (av.x - o.x) * d.x + (av.y - o.y) * d.y >= 3;
  } else if (p == "turned_left") {
    done = av.facing == (o.facing + 3) % 4;
  } else if (p == "turned_right") {
    done = av.facing == (o.facing + 1) % 4;
  } else if (p == "looked_up") {
    done = av.pitch == 1;
  } else if (p == "looked_down") {
    done = av.pitch == -1;
  } else if (p == "jumped") {
    done = logged(Primitive::kJump);
  } else if (p == "crouched") {
    done = logged(Primitive::kCrouch);
  } else if (p == "menu_open") {
    done = av.menu_open;
  } else if (p == "near") {
    const Entity* e = target_entity(0);
    done = e != nullptr && e->placed() && std::abs(e->x - av.x) + std::abs(e->y - av.y) <= 1;
  } else if (p == "holding") {
    const Entity* e = target_entity(0);
    done = e != nullptr && av.held == e->id;
  } else if (p == "chopped") {
    const Entity* e = target_entity(0);
    done = e != nullptr && e->chopped;
  } else if (p == "attached") {
    const Entity* top = target_entity(0);
    const Entity* bottom = target_entity(1);
    done = top != nullptr && bottom != nullptr && top->attached_to == bottom->id;
  } else if (p == "equipped") {
    done = av.equipped == resolve_ref(state, spec.targets.at(0)).tool;
  } else {
    throw SpecError("unknown predicate " + p);
  }
  return done ? GoalStatus::kSuccess : GoalStatus::kOngoing;
}

// ---------------------------------------------------------------------------
// Layouts

std::string Layout::ref() const { return std::string(world_name(world)) + "/" + std::to_string(index); }

const std::vector<Layout>& layouts() {
  static const std::vector<Layout> kLayouts = [] {
    std::vector<Layout> out;
    using OT = ObjectType;
    using C = Color;
    const std::array<std::array<LayoutObject, 3>, 3> playroom_items = {{
        {{{OT::kCube, C::kGreen}, {OT::kCube, C::kBlue}, {OT::kBall, C::kRed}}},
        {{{OT::kCube, C::kRed}, {OT::kBall, C::kYellow}, {OT::kBall, C::kBlue}}},
        {{{OT::kCube, C::kYellow}, {OT::kCube, C::kPurple}, {OT::kBall, C::kGreen}}},
    }};
    for (int i = 0; i < 3; ++i) {
      Layout l{WorldKind::kPlayRoom, i, {}, {}, true, 1, 0, 0};
      for (const auto& o : playroom_items[static_cast<std::size_t>(i)]) l.objects.push_back(o);
      l.objects.push_back({OT::kKnife, C::kGrey});
      l.objects.push_back({OT::kCarrot, C::kOrange});
      out.push_back(l);
    }
    const std::array<std::array<Color, 4>, 3> block_colors = {{
        {C::kRed, C::kBlue, C::kGreen, C::kYellow},
        {C::kPurple, C::kOrange, C::kRed, C::kWhite},
        {C::kCyan, C::kPink, C::kBlue, C::kYellow},
    }};
    for (int i = 0; i < 3; ++i) {
      Layout l{WorldKind::kBuildLab, i, {}, {}, false, 0, 0, 0};
      for (Color c : block_colors[static_cast<std::size_t>(i)]) l.objects.push_back({OT::kBlock, c});
      out.push_back(l);
    }
    for (int i = 0; i < 3; ++i) {
      Layout l{WorldKind::kHarvest, i, {}, {}, false, 0, 1, 2};
      l.objects = {{OT::kTree, C::kBrown, 5},
                   {OT::kRock, C::kGrey, 5},
                   {OT::kCarbon, C::kBlack, 100},
                   {OT::kBerryBush, C::kRed, 6}};
      l.inventory[static_cast<std::size_t>(Resource::kWood)] = 2;
      out.push_back(l);
    }
    return out;
  }();
  return kLayouts;
}

const Layout& find_layout(const std::string& save_state_ref) {
  for (const auto& l : layouts()) {
    if (l.ref() == save_state_ref) return l;
  }
  throw SpecError("unresolvable save_state_ref '" + save_state_ref + "'");
}

bool pose_targets(const WorldState& state, const Pose& pose, CellPos cell) {
  CellPos d = facing_delta(pose.facing);
  for (int dist = 1; dist <= kReachCells; ++dist) {
    CellPos p{pose.x + d.x * dist, pose.y + d.y * dist};
    if (!state.in_bounds(p)) return false;
    if (state.entity_at(p) != nullptr || state.terrain_at(p) != Terrain::kFloor) return p == cell;
  }
  return false;
}

namespace {

constexpr int kWorldSide = 10;

/// Floor cells reachable from `start` by walking.
std::set<std::pair<int, int>> reachable_cells(const WorldState& s, CellPos start) {
  std::set<std::pair<int, int>> seen{{start.x, start.y}};
  std::deque<CellPos> q{start};
  while (!q.empty()) {
    CellPos c = q.front();
    q.pop_front();
    for (int f = 0; f < 4; ++f) {
      CellPos d = facing_delta(f);
      CellPos n{c.x + d.x, c.y + d.y};
      if (s.walkable(n) && seen.insert({n.x, n.y}).second) q.push_back(n);
    }
  }
  return seen;
}

bool targetable_from(const WorldState& s, const std::set<std::pair<int, int>>& cells, CellPos goal) {
  for (auto [x, y] : cells) {
    for (int f = 0; f < 4; ++f) {
      if (pose_targets(s, {x, y, f}, goal)) return true;
    }
  }
  return false;
}

bool adjacent_to_any(const std::vector<CellPos>& taken, CellPos p) {
  return std::any_of(taken.begin(), taken.end(), [&](CellPos t) {
    return std::abs(t.x - p.x) + std::abs(t.y - p.y) <= 1;
  });
}

std::optional<WorldState> try_place(const Layout& layout, std::mt19937_64& rng) {
  WorldState s;
  s.world = layout.world;
  s.width = kWorldSide;
  s.height = kWorldSide;
  s.terrain.assign(static_cast<std::size_t>(kWorldSide * kWorldSide), Terrain::kFloor);
  for (int y = 0; y < kWorldSide; ++y) {
    for (int x = 0; x < kWorldSide; ++x) {
      if (x == 0 || y == 0 || x == kWorldSide - 1 || y == kWorldSide - 1) s.set_terrain({x, y}, Terrain::kWall);
    }
  }
  std::vector<CellPos> reserved;
  auto uniform = [&](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };

  if (layout.partition) {
    // A wall splitting the interior into two rooms joined by a two-cell doorway.
    bool vertical = layout.index % 2 == 0;
    int line = uniform(4, 5);
    int door = uniform(1, kWorldSide - 3);
    for (int i = 1; i < kWorldSide - 1; ++i) {
      if (i == door || i == door + 1) {
        reserved.push_back(vertical ? CellPos{line, i} : CellPos{i, line});
        continue;
      }
      s.set_terrain(vertical ? CellPos{line, i} : CellPos{i, line}, Terrain::kWall);
    }
  }

  auto random_free = [&](bool spaced) -> std::optional<CellPos> {
    for (int attempt = 0; attempt < 200; ++attempt) {
      CellPos p{uniform(1, kWorldSide - 2), uniform(1, kWorldSide - 2)};
      if (s.terrain_at(p) != Terrain::kFloor || s.entity_at(p) != nullptr) continue;
      if (spaced && adjacent_to_any(reserved, p)) continue;
      if (std::find(reserved.begin(), reserved.end(), p) != reserved.end()) continue;
      return p;
    }
    return std::nullopt;
  };

  std::vector<CellPos> boards;
  auto place_terrain = [&](Terrain t, int count, std::vector<CellPos>* out) {
    for (int i = 0; i < count; ++i) {
      auto p = random_free(true);
      if (!p) return false;
      s.set_terrain(*p, t);
      reserved.push_back(*p);
      if (out) out->push_back(*p);
    }
    return true;
  };
  if (!place_terrain(Terrain::kBoard, layout.boards, &boards)) return std::nullopt;
  if (!place_terrain(Terrain::kBench, layout.benches, nullptr)) return std::nullopt;
  if (!place_terrain(Terrain::kWater, layout.water, nullptr)) return std::nullopt;

  std::size_t board_i = 0;
  for (const auto& obj : layout.objects) {
    Entity e;
    e.id = s.next_entity_id++;
    e.type = obj.type;
    e.color = obj.color;
    e.quantity = obj.quantity;
    CellPos p;
    if (obj.type == ObjectType::kCarrot && board_i < boards.size()) {
      p = boards[board_i++];
    } else {
      auto free = random_free(true);
      if (!free) return std::nullopt;
      p = *free;
      reserved.push_back(p);
    }
    e.x = static_cast<std::int8_t>(p.x);
    e.y = static_cast<std::int8_t>(p.y);
    s.entities.push_back(e);
  }
  s.inventory = layout.inventory;

  // Avatar: a free cell with three walkable cells ahead.
  bool placed = false;
  for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
    auto p = random_free(false);
    if (!p) return std::nullopt;
    int facing = uniform(0, 3);
    CellPos d = facing_delta(facing);
    bool clear = true;
    for (int k = 1; k <= 3; ++k) clear = clear && s.walkable({p->x + d.x * k, p->y + d.y * k});
    if (!clear) continue;
    s.avatar.x = static_cast<std::int8_t>(p->x);
    s.avatar.y = static_cast<std::int8_t>(p->y);
    s.avatar.facing = static_cast<std::uint8_t>(facing);
    placed = true;
  }
  if (!placed) return std::nullopt;

  // Every object and bench must be targetable from the avatar's reachable area.
  auto cells = reachable_cells(s, {s.avatar.x, s.avatar.y});
  for (const auto& e : s.entities) {
    if (!targetable_from(s, cells, {e.x, e.y})) return std::nullopt;
    // Objects must also have a walkable neighbour reachable by the avatar.
    bool near = false;
    for (int f = 0; f < 4; ++f) {
      CellPos d = facing_delta(f);
      near = near || cells.contains({e.x + d.x, e.y + d.y});
    }
    if (!near) return std::nullopt;
  }
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      if (s.terrain_at({x, y}) == Terrain::kBench && !targetable_from(s, cells, {x, y})) return std::nullopt;
    }
  }
  return s;
}

}  // namespace

}  // namespace sima::worlds

namespace sima {

WorldState instantiate_task(const TaskSpec& spec, std::uint64_t seed) {
  const auto& layout = worlds::find_layout(spec.save_state_ref);
  std::mt19937_64 rng(fnv1a64(spec.save_state_ref) ^ (seed * 0x9e3779b97f4a7c15ULL));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto s = worlds::try_place(layout, rng);
    if (!s) continue;
    s->rng_state = static_cast<std::uint32_t>(1 + rng() % 2147483646ULL);
    s->origin = {s->avatar.x, s->avatar.y, s->avatar.facing};
    for (const auto& d : spec.distractor_ids) {
      if (s->find_label(d) == nullptr) throw SpecError("distractor '" + d + "' missing from layout");
    }
    if (const auto* gt = std::get_if<GroundTruthSpec>(&spec.evaluator.body)) worlds::validate_refs(*s, *gt);
    return *s;
  }
  throw SpecError("could not place layout " + spec.save_state_ref);
}

}  // namespace sima

namespace sima::worlds {

// ---------------------------------------------------------------------------
// Registry

namespace {

const std::array<std::string_view, 11> kMovementPrimitives = {
    "move_forward", "move_back", "strafe_left", "strafe_right", "turn_left", "turn_right",
    "look_up", "look_down", "jump", "crouch", "menu"};

std::vector<std::string> movement_distractors(std::string_view except) {
  std::vector<std::string> out;
  for (auto p : kMovementPrimitives) {
    if (p != except) out.push_back("act:" + std::string(p));
  }
  return out;
}

std::string slugify(std::string_view text) {
  std::string out;
  for (char c : text) out += (c == ' ') ? '-' : c;
  return out;
}

TaskSpec ground_truth_task(const Layout& l, std::string instruction, SkillCategory skill,
                           std::string predicate, std::vector<std::string> targets,
                           std::vector<std::string> distractors) {
  TaskSpec t;
  t.task_id = l.ref() + "/" + slugify(instruction);
  t.world = l.world;
  t.save_state_ref = l.ref();
  t.instruction = std::move(instruction);
  for (const auto& d : distractors) {
    if (!d.starts_with("act:") && !d.starts_with("tool:")) t.distractor_ids.push_back(d);
  }
  t.evaluator.body = GroundTruthSpec{std::move(predicate), std::move(targets), std::move(distractors)};
  t.skill = skill;
  return t;
}

std::string label_of(const LayoutObject& o) {
  return std::string(color_name(o.color)) + " " + std::string(object_type_name(o.type));
}

std::vector<TaskSpec> build_registry() {
  std::vector<TaskSpec> out;
  for (const auto& l : layouts()) {
    using S = SkillCategory;
    out.push_back(ground_truth_task(l, "move forward", S::kMovement, "moved_forward", {},
                                    movement_distractors("move_forward")));
    out.push_back(ground_truth_task(l, "turn left", S::kMovement, "turned_left", {},
                                    movement_distractors("turn_left")));
    out.push_back(ground_truth_task(l, "turn right", S::kMovement, "turned_right", {},
                                    movement_distractors("turn_right")));
    out.push_back(ground_truth_task(l, "look up", S::kLook, "looked_up", {},
                                    movement_distractors("look_up")));
    out.push_back(ground_truth_task(l, "look down", S::kLook, "looked_down", {},
                                    movement_distractors("look_down")));
    out.push_back(ground_truth_task(l, "jump", S::kMovement, "jumped", {},
                                    movement_distractors("jump")));
    out.push_back(ground_truth_task(l, "crouch", S::kMovement, "crouched", {},
                                    movement_distractors("crouch")));
    out.push_back(ground_truth_task(l, "open the menu", S::kMenuInventory, "menu_open", {},
                                    movement_distractors("menu")));

    auto others = [&](std::initializer_list<std::string> keep, bool liftables_only) {
      std::vector<std::string> d;
      for (const auto& o : l.objects) {
        std::string lab = label_of(o);
        if (std::find(keep.begin(), keep.end(), lab) != keep.end()) continue;
        if (liftables_only && o.type == ObjectType::kCarrot) continue;
        d.push_back(lab);
      }
      return d;
    };

    if (l.world == WorldKind::kPlayRoom) {
      std::vector<std::string> items;
      for (std::size_t i = 0; i < 3; ++i) items.push_back(label_of(l.objects[i]));
      std::string knife = label_of(l.objects[3]);
      std::string carrot = label_of(l.objects[4]);
      for (std::size_t i : {0u, 2u}) {
        out.push_back(ground_truth_task(l, "go to the " + items[i], S::kNavigation, "near",
                                        {items[i]}, others({items[i]}, true)));
      }
      for (std::size_t i = 0; i < 3; ++i) {
        out.push_back(ground_truth_task(l, "lift the " + items[i], S::kObjectManagement, "holding",
                                        {items[i]}, others({items[i]}, true)));
      }
      out.push_back(ground_truth_task(l, "use the knife to chop the carrot", S::kToolUse, "chopped",
                                      {carrot, knife}, others({knife, carrot}, true)));
    } else if (l.world == WorldKind::kBuildLab) {
      std::vector<std::string> b;
      for (const auto& o : l.objects) b.push_back(label_of(o));
      out.push_back(ground_truth_task(l, "go to the " + b[0], S::kNavigation, "near", {b[0]}, others({b[0]}, false)));
      out.push_back(ground_truth_task(l, "go to the " + b[2], S::kNavigation, "near", {b[2]}, others({b[2]}, false)));
      out.push_back(ground_truth_task(l, "pick up the " + b[1], S::kObjectManagement, "holding", {b[1]},
                                      others({b[1]}, false)));
      out.push_back(ground_truth_task(l, "pick up the " + b[3], S::kObjectManagement, "holding", {b[3]},
                                      others({b[3]}, false)));
      out.push_back(ground_truth_task(l, "put the " + b[0] + " on the " + b[1], S::kConstruction,
                                      "attached", {b[0], b[1]}, others({b[0], b[1]}, false)));
      out.push_back(ground_truth_task(l, "put the " + b[2] + " on the " + b[3], S::kConstruction,
                                      "attached", {b[2], b[3]}, others({b[2], b[3]}, false)));
    } else {
      struct Gather {
        const char* instruction;
        ObjectType node;
        const char* pattern;
      };
      const std::array<Gather, 4> gathers = {{{"collect wood", ObjectType::kTree, "Wood \\+\\d+"},
                                              {"mine stone", ObjectType::kRock, "Stone \\+\\d+"},
                                              {"mine carbon", ObjectType::kCarbon, "Carbon \\+\\d+"},
                                              {"pick berries", ObjectType::kBerryBush, "Berries \\+\\d+"}}};
      for (const auto& g : gathers) {
        TaskSpec t;
        t.task_id = l.ref() + "/" + slugify(g.instruction);
        t.world = l.world;
        t.save_state_ref = l.ref();
        t.instruction = g.instruction;
        t.skill = S::kResourceGathering;
        OcrSpec ocr;
        ocr.patterns = {g.pattern};
        for (const auto& other : gathers) {
          if (other.node == g.node) continue;
          ocr.forbidden.emplace_back(other.pattern);
          for (const auto& o : l.objects) {
            if (o.type == other.node) t.distractor_ids.push_back(label_of(o));
          }
        }
        ocr.action = ActionPredicate{Key::kE, 5};
        t.evaluator.body = ocr;
        out.push_back(t);
      }
      const std::array<Tool, 3> equip = {Tool::kAxe, Tool::kPick, Tool::kBeam};
      Tool want = equip[static_cast<std::size_t>(l.index % 3)];
      std::vector<std::string> tool_distractors;
      for (Tool t : equip) {
        if (t != want) tool_distractors.push_back("tool:" + std::string(tool_name(t)));
      }
      out.push_back(ground_truth_task(l, "equip the " + std::string(tool_name(want)), S::kToolUse,
                                      "equipped", {"tool:" + std::string(tool_name(want))},
                                      tool_distractors));
      TaskSpec craft;
      craft.task_id = l.ref() + "/craft-planks";
      craft.world = l.world;
      craft.save_state_ref = l.ref();
      craft.instruction = "craft planks";
      craft.skill = S::kGameProgression;
      OcrSpec ocr;
      ocr.patterns = {"Planks \\+\\d+"};
      for (const auto& g : gathers) ocr.forbidden.emplace_back(g.pattern);
      ocr.action = ActionPredicate{Key::kF, 5};
      craft.evaluator.body = ocr;
      craft.distractor_ids = {label_of(l.objects[0]), label_of(l.objects[1])};
      out.push_back(craft);
    }
  }
  return out;
}

}  // namespace

std::vector<TaskSpec> registry_list(std::optional<WorldKind> world) {
  static const std::vector<TaskSpec> kAll = build_registry();
  if (!world) return kAll;
  std::vector<TaskSpec> out;
  std::copy_if(kAll.begin(), kAll.end(), std::back_inserter(out),
               [&](const TaskSpec& t) { return t.world == *world; });
  return out;
}

const TaskSpec& find_task(const std::string& task_id) {
  static const std::vector<TaskSpec> kAll = registry_list();
  for (const auto& t : kAll) {
    if (t.task_id == task_id) return t;
  }
  throw SpecError("unknown task '" + task_id + "'");
}

// ---------------------------------------------------------------------------
// Registry file

namespace {

constexpr int kRegistryVersion = 1;

nlohmann::json evaluator_to_json(const EvaluatorSpec& ev) {
  nlohmann::json j;
  if (const auto* gt = std::get_if<GroundTruthSpec>(&ev.body)) {
    j["kind"] = "ground_truth";
    j["predicate"] = gt->predicate;
    j["targets"] = gt->targets;
    j["distractors"] = gt->distractors;
  } else if (const auto* ocr = std::get_if<OcrSpec>(&ev.body)) {
    j["kind"] = "ocr_pattern";
    j["patterns"] = ocr->patterns;
    j["forbidden"] = ocr->forbidden;
    if (ocr->action) {
      j["action"] = {{"key", key_name(ocr->action->key)}, {"within_ticks", ocr->action->within_ticks}};
    }
  } else {
    j["kind"] = "judged";
    j["rubric"] = std::get<JudgedSpec>(ev.body).rubric;
  }
  return j;
}

EvaluatorSpec evaluator_from_json(const nlohmann::json& j) {
  EvaluatorSpec ev;
  auto kind = j.at("kind").get<std::string>();
  if (kind == "ground_truth") {
    ev.body = GroundTruthSpec{j.at("predicate").get<std::string>(),
                              j.value("targets", std::vector<std::string>{}),
                              j.value("distractors", std::vector<std::string>{})};
  } else if (kind == "ocr_pattern") {
    OcrSpec ocr;
    ocr.patterns = j.at("patterns").get<std::vector<std::string>>();
    ocr.forbidden = j.value("forbidden", std::vector<std::string>{});
    if (j.contains("action")) {
      auto key = key_from_name(j["action"].at("key").get<std::string>());
      if (!key) throw SpecError("unknown key in action predicate");
      ocr.action = ActionPredicate{*key, j["action"].value("within_ticks", 5)};
    }
    ev.body = ocr;
  } else if (kind == "judged") {
    ev.body = JudgedSpec{j.at("rubric").get<std::string>()};
  } else {
    throw SpecError("unknown evaluator kind '" + kind + "'");
  }
  return ev;
}

}  // namespace

std::string task_to_json(const TaskSpec& t) {
  nlohmann::ordered_json j;
  j["task_id"] = t.task_id;
  j["world_id"] = world_name(t.world);
  j["save_state_ref"] = t.save_state_ref;
  j["instruction"] = t.instruction;
  j["evaluator_spec"] = evaluator_to_json(t.evaluator);
  j["distractor_ids"] = t.distractor_ids;
  j["budget_ticks"] = t.budget_ticks;
  j["skill_category"] = skill_name(t.skill);
  return j.dump();
}

TaskSpec task_from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("registry record is not JSON: ") + e.what());
  }
  try {
    TaskSpec t;
    t.task_id = j.at("task_id").get<std::string>();
    auto world = world_from_name(j.at("world_id").get<std::string>());
    if (!world) throw SpecError("unknown world in task " + t.task_id);
    t.world = *world;
    t.save_state_ref = j.at("save_state_ref").get<std::string>();
    t.instruction = j.at("instruction").get<std::string>();
    t.evaluator = evaluator_from_json(j.at("evaluator_spec"));
    t.distractor_ids = j.value("distractor_ids", std::vector<std::string>{});
    t.budget_ticks = j.value("budget_ticks", kDefaultBudgetTicks);
    auto skill = skill_from_name(j.at("skill_category").get<std::string>());
    if (!skill) throw SpecError("unknown skill category in task " + t.task_id);
    t.skill = *skill;
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("bad registry record: ") + e.what());
  }
}

void save_registry(const std::string& path, const std::vector<TaskSpec>& tasks) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << nlohmann::json{{"format", "sima-task-registry"}, {"version", kRegistryVersion}}.dump() << "\n";
  for (const auto& t : tasks) out << task_to_json(t) << "\n";
}

std::vector<TaskSpec> load_registry(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open registry " + path);
  std::string line;
  if (!std::getline(in, line)) throw SpecError("empty registry file");
  auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "sima-task-registry") {
    throw SpecError("missing registry header");
  }
  if (header.value("version", 0) != kRegistryVersion) throw SpecError("unsupported registry version");
  std::vector<TaskSpec> out;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(task_from_json(line));
  }
  return out;
}

}  // namespace sima::worlds

#include "sima/worldcore.hpp"

#include <algorithm>
#include <random>
#include <regex>

#include "sima/worlds.hpp"

namespace sima {

namespace {

constexpr std::array<std::string_view, kKeyCount> kKeyNames = {
    "W", "A", "S", "D", "SPACE", "E", "Q", "R", "F", "C", "1", "2", "3", "4", "SHIFT", "ESC"};

constexpr std::array<std::string_view, static_cast<int>(Color::kCount)> kColorNames = {
    "none", "red", "green", "blue", "yellow", "purple", "orange", "white", "brown", "grey",
    "black", "pink", "cyan"};

constexpr std::array<std::string_view, kSkillCategoryCount> kSkillNames = {
    "movement", "navigation", "resource gathering", "object management", "tool use",
    "construction", "menu/inventory", "look", "game progression"};

constexpr std::array<std::string_view, 15> kPrimitiveNames = {
    "move_forward", "move_back", "strafe_left", "strafe_right", "turn_left",
    "turn_right", "look_up", "look_down", "jump", "crouch",
    "menu", "equip", "interact", "drop", "craft"};

constexpr std::uint16_t kSaveVersion = 1;
constexpr std::string_view kSaveMagic = "MWSV";

template <std::size_t N>
std::optional<std::size_t> index_of(const std::array<std::string_view, N>& names,
                                    std::string_view name) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == name) return i;
  }
  return std::nullopt;
}

}  // namespace

std::string_view key_name(Key key) { return kKeyNames[static_cast<std::size_t>(key)]; }

std::optional<Key> key_from_name(std::string_view name) {
  if (auto i = index_of(kKeyNames, name)) return static_cast<Key>(*i);
  return std::nullopt;
}

int KeySet::count() const { return __builtin_popcount(bits_); }

void ActionEvent::validate() const {
  if (tick < 0) throw ProtocolError("action tick is negative");
  if (mouse_dx < -kMouseMax || mouse_dx > kMouseMax || mouse_dy < -kMouseMax ||
      mouse_dy > kMouseMax) {
    throw ProtocolError("mouse bucket out of range");
  }
}

ActionEvent noop_action(std::int64_t tick) {
  ActionEvent a;
  a.tick = tick;
  return a;
}

ActionEvent restamp(ActionEvent a, std::int64_t tick) {
  a.tick = tick;
  return a;
}

ActionEvent held_action(const ActionEvent& previous, std::int64_t tick) {
  ActionEvent a = previous;
  a.tick = tick;
  a.mouse_dx = 0;
  a.mouse_dy = 0;
  return a;
}

std::string describe_action(const ActionEvent& a) {
  std::string out = "t" + std::to_string(a.tick) + "[";
  bool first = true;
  for (int k = 0; k < kKeyCount; ++k) {
    if (!a.keys.has(static_cast<Key>(k))) continue;
    if (!first) out += "+";
    out += key_name(static_cast<Key>(k));
    first = false;
  }
  out += "] dx=" + std::to_string(a.mouse_dx) + " dy=" + std::to_string(a.mouse_dy);
  if (a.left_button) out += " LMB";
  if (a.right_button) out += " RMB";
  return out;
}

std::string_view color_name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }

std::optional<Color> color_from_name(std::string_view name) {
  if (auto i = index_of(kColorNames, name)) return static_cast<Color>(*i);
  return std::nullopt;
}

void Frame::validate() const {
  for (const Cell& c : cells) {
    if (c.symbol >= kSymbolCount || c.color >= kColorCount) {
      throw Error("frame cell out of range");
    }
  }
  for (const auto& line : overlay_text) {
    if (line.size() > kMaxOverlayChars) throw Error("overlay text longer than 80 chars");
  }
}

std::uint64_t frame_hash(const Frame& frame) {
  std::array<std::uint8_t, kFrameCells * 2> bytes{};
  for (std::size_t i = 0; i < frame.cells.size(); ++i) {
    bytes[2 * i] = frame.cells[i].symbol;
    bytes[2 * i + 1] = frame.cells[i].color;
  }
  return fnv1a64(bytes);
}

std::string_view world_name(WorldKind w) {
  switch (w) {
    case WorldKind::kPlayRoom: return "playroom";
    case WorldKind::kBuildLab: return "buildlab";
    case WorldKind::kHarvest: return "harvest";
  }
  return "unknown";
}

std::optional<WorldKind> world_from_name(std::string_view name) {
  for (int i = 0; i < kWorldKindCount; ++i) {
    if (world_name(static_cast<WorldKind>(i)) == name) return static_cast<WorldKind>(i);
  }
  return std::nullopt;
}

std::string_view object_type_name(ObjectType t) {
  switch (t) {
    case ObjectType::kCube: return "cube";
    case ObjectType::kBall: return "ball";
    case ObjectType::kKnife: return "knife";
    case ObjectType::kCarrot: return "carrot";
    case ObjectType::kBlock: return "block";
    case ObjectType::kTree: return "tree";
    case ObjectType::kRock: return "rock";
    case ObjectType::kCarbon: return "carbon deposit";
    case ObjectType::kBerryBush: return "berry bush";
  }
  return "object";
}

std::string_view tool_name(Tool t) {
  switch (t) {
    case Tool::kHands: return "hands";
    case Tool::kAxe: return "axe";
    case Tool::kPick: return "pick";
    case Tool::kBeam: return "beam";
  }
  return "hands";
}

std::optional<Tool> tool_from_name(std::string_view name) {
  for (int i = 0; i < 4; ++i) {
    if (tool_name(static_cast<Tool>(i)) == name) return static_cast<Tool>(i);
  }
  return std::nullopt;
}

std::string_view resource_label(Resource r) {
  switch (r) {
    case Resource::kWood: return "Wood";
    case Resource::kStone: return "Stone";
    case Resource::kCarbon: return "Carbon";
    case Resource::kBerries: return "Berries";
    case Resource::kPlanks: return "Planks";
  }
  return "?";
}

std::string_view primitive_name(Primitive p) { return kPrimitiveNames[static_cast<std::size_t>(p)]; }

std::optional<Primitive> primitive_from_name(std::string_view name) {
  if (auto i = index_of(kPrimitiveNames, name)) return static_cast<Primitive>(*i);
  return std::nullopt;
}

std::string Entity::label() const {
  return std::string(color_name(color)) + " " + std::string(object_type_name(type));
}

const Entity* WorldState::find(std::uint16_t id) const {
  for (const auto& e : entities) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

Entity* WorldState::find(std::uint16_t id) {
  for (auto& e : entities) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

const Entity* WorldState::find_label(std::string_view label) const {
  for (const auto& e : entities) {
    if (e.label() == label) return &e;
  }
  return nullptr;
}

namespace {

bool is_resource_node(ObjectType t) {
  return t == ObjectType::kTree || t == ObjectType::kRock || t == ObjectType::kCarbon ||
         t == ObjectType::kBerryBush;
}

bool visible(const Entity& e) {
  if (!e.placed()) return false;
  return !(is_resource_node(e.type) && e.quantity <= 0);
}

}  // namespace

const Entity* WorldState::entity_at(CellPos p) const {
  const Entity* top = nullptr;
  for (const auto& e : entities) {
    if (!visible(e) || e.x != p.x || e.y != p.y) continue;
    bool covered = std::any_of(entities.begin(), entities.end(), [&](const Entity& o) {
      return o.attached_to == e.id && o.placed();
    });
    if (!covered) top = &e;
  }
  return top;
}

bool WorldState::walkable(CellPos p) const {
  return in_bounds(p) && terrain_at(p) == Terrain::kFloor && entity_at(p) == nullptr;
}

std::uint32_t WorldState::next_random() {
  std::minstd_rand engine(rng_state);
  rng_state = static_cast<std::uint32_t>(engine());
  return rng_state;
}

CellPos facing_delta(int facing) {
  switch (facing & 3) {
    case 0: return {0, -1};
    case 1: return {1, 0};
    case 2: return {0, 1};
    default: return {-1, 0};
  }
}

CellPos right_delta(int facing) { return facing_delta(facing + 1); }

std::optional<CellPos> crosshair_target(const WorldState& state) {
  const auto& av = state.avatar;
  CellPos d = facing_delta(av.facing);
  for (int dist = 1; dist <= kReachCells; ++dist) {
    CellPos p{av.x + d.x * dist, av.y + d.y * dist};
    if (!state.in_bounds(p)) return std::nullopt;
    if (state.entity_at(p) != nullptr || state.terrain_at(p) != Terrain::kFloor) return p;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

Observation advance(WorldState& state, const ActionEvent& action) {
  if (action.tick != state.tick) {
    throw ProtocolError("action for tick " + std::to_string(action.tick) + " applied at tick " +
                        std::to_string(state.tick));
  }
  action.validate();

  auto& av = state.avatar;
  std::vector<TextEvent> events;
  const std::int64_t now = state.tick;
  auto record = [&](Primitive p, std::uint16_t entity = kNoEntity, std::uint8_t arg = 0) {
    state.log.push_back({now, p, entity, arg});
  };
  auto pressed = [&](Key k) { return action.keys.has(k) && !av.prev_keys.has(k); };

  if (pressed(Key::kEsc)) {
    av.menu_open = !av.menu_open;
    record(Primitive::kMenu, kNoEntity, av.menu_open ? 1 : 0);
  }

  constexpr std::array<std::pair<Key, Tool>, 4> kHotbar = {{
      {Key::k1, Tool::kAxe}, {Key::k2, Tool::kPick}, {Key::k3, Tool::kBeam}, {Key::k4, Tool::kHands}}};
  for (auto [key, tool] : kHotbar) {
    if (action.keys.has(key) && av.equipped != tool) {
      av.equipped = tool;
      record(Primitive::kEquip, kNoEntity, static_cast<std::uint8_t>(tool));
      break;
    }
  }

  av.yaw_accum = static_cast<std::int8_t>(av.yaw_accum + action.mouse_dx);
  if (av.yaw_accum <= -kMouseMax) {
    av.yaw_accum = static_cast<std::int8_t>(av.yaw_accum + kMouseMax);
    av.facing = static_cast<std::uint8_t>((av.facing + 3) % 4);
    record(Primitive::kTurnLeft);
  } else if (av.yaw_accum >= kMouseMax) {
    av.yaw_accum = static_cast<std::int8_t>(av.yaw_accum - kMouseMax);
    av.facing = static_cast<std::uint8_t>((av.facing + 1) % 4);
    record(Primitive::kTurnRight);
  }

  av.pitch_accum = static_cast<std::int8_t>(av.pitch_accum + action.mouse_dy);
  if (av.pitch_accum >= kMouseMax) {
    av.pitch_accum = static_cast<std::int8_t>(av.pitch_accum - kMouseMax);
    av.pitch = static_cast<std::int8_t>(std::min(1, av.pitch + 1));
    record(Primitive::kLookUp);
  } else if (av.pitch_accum <= -kMouseMax) {
    av.pitch_accum = static_cast<std::int8_t>(av.pitch_accum + kMouseMax);
    av.pitch = static_cast<std::int8_t>(std::max(-1, av.pitch - 1));
    record(Primitive::kLookDown);
  }

  if (av.airborne > 0) --av.airborne;
  if (pressed(Key::kSpace) && av.airborne == 0) {
    av.airborne = 2;
    record(Primitive::kJump);
  }

  bool crouch = action.keys.has(Key::kC);
  if (crouch && !av.crouching) record(Primitive::kCrouch);
  av.crouching = crouch;

  // At most one cell per tick; W > S > A > D.
  struct Move {
    Key key;
    Primitive prim;
    CellPos delta;
  };
  const CellPos fwd = facing_delta(av.facing);
  const CellPos right = right_delta(av.facing);
  const std::array<Move, 4> moves = {{{Key::kW, Primitive::kMoveForward, fwd},
                                      {Key::kS, Primitive::kMoveBack, {-fwd.x, -fwd.y}},
                                      {Key::kA, Primitive::kStrafeLeft, {-right.x, -right.y}},
                                      {Key::kD, Primitive::kStrafeRight, right}}};
  for (const auto& m : moves) {
    if (!action.keys.has(m.key)) continue;
    record(m.prim);
    CellPos target{av.x + m.delta.x, av.y + m.delta.y};
    if (state.walkable(target)) {
      av.x = static_cast<std::int8_t>(target.x);
      av.y = static_cast<std::int8_t>(target.y);
    }
    break;
  }

  auto run_verb = [&](worlds::Verb verb) {
    auto target = crosshair_target(state);
    if (!target) {
      if (verb != worlds::Verb::kDrop) return;
      target = CellPos{av.x + fwd.x, av.y + fwd.y};
    }
    auto effect = worlds::interact(state, *target, verb);
    for (auto& t : effect.text) events.push_back(std::move(t));
  };

  if (action.left_button && !av.prev_left) run_verb(worlds::Verb::kGrab);
  if (pressed(Key::kE)) run_verb(worlds::Verb::kUse);
  if (pressed(Key::kF)) run_verb(worlds::Verb::kCraft);
  if (action.right_button && !av.prev_right) {
    CellPos front{av.x + fwd.x, av.y + fwd.y};
    auto effect = worlds::interact(state, front, worlds::Verb::kDrop);
    for (auto& t : effect.text) events.push_back(std::move(t));
  }

  av.prev_keys = action.keys;
  av.prev_left = action.left_button;
  av.prev_right = action.right_button;
  state.tick += 1;
  for (auto& e : events) e.tick = state.tick;

  Observation obs;
  obs.tick = state.tick;
  obs.frame = render(state, events);
  obs.text_events = std::move(events);
  return obs;
}

StepResult step(const WorldState& state, const ActionEvent& action) {
  StepResult out{state, {}};
  out.observation = advance(out.state, action);
  return out;
}

Observation observe(const WorldState& state) {
  Observation obs;
  obs.tick = state.tick;
  obs.frame = render(state);
  return obs;
}

namespace {

Symbol entity_symbol(const Entity& e) {
  switch (e.type) {
    case ObjectType::kCube: return Symbol::kCube;
    case ObjectType::kBall: return Symbol::kBall;
    case ObjectType::kKnife: return Symbol::kKnife;
    case ObjectType::kCarrot: return e.chopped ? Symbol::kChoppedCarrot : Symbol::kCarrot;
    case ObjectType::kBlock: return e.attached_to != kNoEntity ? Symbol::kStackedBlock : Symbol::kBlock;
    case ObjectType::kTree: return Symbol::kTree;
    case ObjectType::kRock: return Symbol::kRock;
    case ObjectType::kCarbon: return Symbol::kCarbon;
    case ObjectType::kBerryBush: return Symbol::kBerryBush;
  }
  return Symbol::kVoid;
}

Cell terrain_cell(Terrain t) {
  switch (t) {
    case Terrain::kFloor: return {static_cast<std::uint8_t>(Symbol::kFloor), 0};
    case Terrain::kWall:
      return {static_cast<std::uint8_t>(Symbol::kWall), static_cast<std::uint8_t>(Color::kGrey)};
    case Terrain::kBoard:
      return {static_cast<std::uint8_t>(Symbol::kBoard), static_cast<std::uint8_t>(Color::kBrown)};
    case Terrain::kBench:
      return {static_cast<std::uint8_t>(Symbol::kBench), static_cast<std::uint8_t>(Color::kOrange)};
    case Terrain::kWater:
      return {static_cast<std::uint8_t>(Symbol::kWater), static_cast<std::uint8_t>(Color::kBlue)};
  }
  return {};
}

Cell make_cell(Symbol s, int color) {
  return {static_cast<std::uint8_t>(s), static_cast<std::uint8_t>(std::clamp(color, 0, kColorCount - 1))};
}

}  // namespace

Frame render(const WorldState& state, const std::vector<TextEvent>& recent_text) {
  Frame f;
  const auto& av = state.avatar;
  const CellPos fwd = facing_delta(av.facing);
  const CellPos right = right_delta(av.facing);
  for (int r = 0; r < kFrameSize - 1; ++r) {
    for (int c = 0; c < kFrameSize; ++c) {
      int ahead = 7 - r;
      int side = c - 8;
      CellPos p{av.x + ahead * fwd.x + side * right.x, av.y + ahead * fwd.y + side * right.y};
      Cell cell{};
      if (state.in_bounds(p)) {
        if (const Entity* e = state.entity_at(p)) {
          cell = make_cell(entity_symbol(*e), static_cast<int>(e->color));
        } else {
          cell = terrain_cell(state.terrain_at(p));
        }
      }
      f.at(r, c) = cell;
    }
  }
  f.at(7, 8) = make_cell(Symbol::kAvatar, static_cast<int>(av.crouching ? Color::kGrey : Color::kWhite));

  constexpr int kHud = kFrameSize - 1;
  if (const Entity* held = state.find(av.held)) {
    f.at(kHud, 0) = make_cell(entity_symbol(*held), static_cast<int>(held->color));
  }
  f.at(kHud, 1) = make_cell(Symbol::kHudPitch, av.pitch + 1);
  if (av.menu_open) f.at(kHud, 2) = make_cell(Symbol::kHudMenu, static_cast<int>(Color::kWhite));
  constexpr std::array<Symbol, 4> kToolSymbols = {Symbol::kHands, Symbol::kAxe, Symbol::kPick,
                                                  Symbol::kBeam};
  f.at(kHud, 3) = make_cell(kToolSymbols[static_cast<std::size_t>(av.equipped)], 0);
  if (av.crouching) f.at(kHud, 4) = make_cell(Symbol::kHudCrouch, static_cast<int>(Color::kWhite));
  if (av.airborne > 0) f.at(kHud, 5) = make_cell(Symbol::kHudJump, av.airborne);
  constexpr std::array<Symbol, kResourceCount> kResourceSymbols = {
      Symbol::kHudWood, Symbol::kHudStone, Symbol::kHudCarbon, Symbol::kHudBerries, Symbol::kHudPlanks};
  for (int i = 0; i < kResourceCount; ++i) {
    f.at(kHud, 6 + i) = make_cell(kResourceSymbols[static_cast<std::size_t>(i)],
                                  std::min(state.inventory[static_cast<std::size_t>(i)], 15));
  }

  if (av.menu_open) f.overlay_text.emplace_back("MENU");
  for (const auto& t : recent_text) f.overlay_text.push_back(t.text.substr(0, kMaxOverlayChars));
  return f;
}

// ---------------------------------------------------------------------------
// Save / load

namespace {

void write_state(ByteWriter& w, const WorldState& s) {
  w.u8(static_cast<std::uint8_t>(s.world));
  w.i64(s.tick);
  w.u32(s.rng_state);
  w.u16(static_cast<std::uint16_t>(s.width));
  w.u16(static_cast<std::uint16_t>(s.height));
  for (Terrain t : s.terrain) w.u8(static_cast<std::uint8_t>(t));
  const auto& a = s.avatar;
  w.i8(a.x);
  w.i8(a.y);
  w.u8(a.facing);
  w.i8(a.pitch);
  w.i8(a.yaw_accum);
  w.i8(a.pitch_accum);
  w.boolean(a.crouching);
  w.u8(a.airborne);
  w.u16(a.held);
  w.u8(static_cast<std::uint8_t>(a.equipped));
  w.boolean(a.menu_open);
  w.u16(a.prev_keys.bits());
  w.boolean(a.prev_left);
  w.boolean(a.prev_right);
  w.i8(s.origin.x);
  w.i8(s.origin.y);
  w.u8(s.origin.facing);
  w.u32(static_cast<std::uint32_t>(s.entities.size()));
  for (const auto& e : s.entities) {
    w.u16(e.id);
    w.u8(static_cast<std::uint8_t>(e.type));
    w.u8(static_cast<std::uint8_t>(e.color));
    w.i8(e.x);
    w.i8(e.y);
    w.i32(e.quantity);
    w.boolean(e.chopped);
    w.u16(e.attached_to);
  }
  for (auto v : s.inventory) w.i32(v);
  w.u32(static_cast<std::uint32_t>(s.log.size()));
  for (const auto& r : s.log) {
    w.i64(r.tick);
    w.u8(static_cast<std::uint8_t>(r.kind));
    w.u16(r.entity);
    w.u8(r.arg);
  }
  w.u16(s.next_entity_id);
}

template <typename E>
E read_enum(ByteReader& r, int count, const char* what) {
  auto v = r.u8();
  if (v >= count) r.fail(DecodeErrorKind::kMalformed, std::string("bad ") + what);
  return static_cast<E>(v);
}

WorldState read_state(ByteReader& r) {
  WorldState s;
  s.world = read_enum<WorldKind>(r, kWorldKindCount, "world kind");
  s.tick = r.i64();
  s.rng_state = r.u32();
  s.width = r.u16();
  s.height = r.u16();
  if (s.width <= 0 || s.height <= 0 || s.width > 64 || s.height > 64) {
    r.fail(DecodeErrorKind::kMalformed, "bad world dimensions");
  }
  s.terrain.resize(static_cast<std::size_t>(s.width * s.height));
  for (auto& t : s.terrain) t = read_enum<Terrain>(r, 5, "terrain");
  auto& a = s.avatar;
  a.x = r.i8();
  a.y = r.i8();
  a.facing = r.u8();
  a.pitch = r.i8();
  a.yaw_accum = r.i8();
  a.pitch_accum = r.i8();
  a.crouching = r.boolean();
  a.airborne = r.u8();
  a.held = r.u16();
  a.equipped = read_enum<Tool>(r, 4, "tool");
  a.menu_open = r.boolean();
  a.prev_keys = KeySet(r.u16());
  a.prev_left = r.boolean();
  a.prev_right = r.boolean();
  s.origin.x = r.i8();
  s.origin.y = r.i8();
  s.origin.facing = r.u8();
  auto n = r.u32();
  if (n > r.remaining()) r.fail(DecodeErrorKind::kTruncated, "entity count");
  s.entities.resize(n);
  for (auto& e : s.entities) {
    e.id = r.u16();
    e.type = read_enum<ObjectType>(r, 9, "object type");
    e.color = read_enum<Color>(r, static_cast<int>(Color::kCount), "color");
    e.x = r.i8();
    e.y = r.i8();
    e.quantity = r.i32();
    e.chopped = r.boolean();
    e.attached_to = r.u16();
  }
  for (auto& v : s.inventory) v = r.i32();
  auto logn = r.u32();
  if (logn > r.remaining()) r.fail(DecodeErrorKind::kTruncated, "log count");
  s.log.resize(logn);
  for (auto& rec : s.log) {
    rec.tick = r.i64();
    rec.kind = read_enum<Primitive>(r, 15, "primitive");
    rec.entity = r.u16();
    rec.arg = r.u8();
  }
  s.next_entity_id = r.u16();
  return s;
}

}  // namespace

std::vector<std::uint8_t> save(const WorldState& state) {
  ByteWriter body;
  write_state(body, state);
  ByteWriter w;
  w.raw(kSaveMagic);
  w.u16(kSaveVersion);
  w.bytes(body.data());
  return w.take();
}

WorldState load(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(kSaveMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kSaveMagic.begin())) {
    throw DecodeError(DecodeErrorKind::kBadMagic, 0, "expected MWSV");
  }
  auto version = r.u16();
  if (version != kSaveVersion) {
    throw DecodeError(DecodeErrorKind::kBadVersion, 4, "save version " + std::to_string(version));
  }
  auto len = r.u32();
  auto payload = r.raw(len);
  r.expect_done();
  ByteReader body(payload, 10);
  WorldState s = read_state(body);
  body.expect_done();
  return s;
}

// ---------------------------------------------------------------------------
// Tasks

std::string_view skill_name(SkillCategory s) { return kSkillNames[static_cast<std::size_t>(s)]; }

std::optional<SkillCategory> skill_from_name(std::string_view name) {
  if (auto i = index_of(kSkillNames, name)) return static_cast<SkillCategory>(*i);
  return std::nullopt;
}

std::string_view status_name(EpisodeStatus s) {
  switch (s) {
    case EpisodeStatus::kSuccess: return "success";
    case EpisodeStatus::kFailure: return "failure";
    case EpisodeStatus::kTimeout: return "timeout";
    case EpisodeStatus::kDistractorFailure: return "distractor_failure";
  }
  return "failure";
}

std::optional<EpisodeStatus> status_from_name(std::string_view name) {
  for (int i = 0; i < 4; ++i) {
    if (status_name(static_cast<EpisodeStatus>(i)) == name) return static_cast<EpisodeStatus>(i);
  }
  return std::nullopt;
}

void EvaluatorSpec::validate() const {
  if (const auto* gt = std::get_if<GroundTruthSpec>(&body)) {
    if (!worlds::is_known_predicate(gt->predicate)) {
      throw SpecError("unknown ground-truth predicate '" + gt->predicate + "'");
    }
  } else if (const auto* ocr = std::get_if<OcrSpec>(&body)) {
    if (ocr->patterns.empty()) throw SpecError("ocr evaluator without patterns");
    for (const auto* list : {&ocr->patterns, &ocr->forbidden}) {
      for (const auto& p : *list) {
        try {
          std::regex re(p);
        } catch (const std::regex_error& e) {
          throw SpecError("pattern '" + p + "' does not compile: " + e.what());
        }
      }
    }
    if (ocr->action && ocr->action->within_ticks < 0) throw SpecError("negative action window");
  } else if (const auto* judged = std::get_if<JudgedSpec>(&body)) {
    if (judged->rubric.empty()) throw SpecError("judged evaluator without rubric");
  }
}

void TaskSpec::validate() const {
  if (task_id.empty()) throw SpecError("task without id");
  if (budget_ticks <= 0) throw SpecError("task " + task_id + ": budget must be positive");
  if (static_cast<int>(skill) >= kSkillCategoryCount) throw SpecError("bad skill category");
  evaluator.validate();
  const auto& layout = worlds::find_layout(save_state_ref);
  if (layout.world != world) throw SpecError("task " + task_id + ": save state is for another world");
}

}  // namespace sima

#pragma once

// Shared environment contract: the human-compatible action space, symbolic
// frames, world state, save/load and the deterministic tick function.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sima/common.hpp"

namespace sima {

inline constexpr int kFrameSize = 16;
inline constexpr int kFrameCells = kFrameSize * kFrameSize;
inline constexpr int kSymbolCount = 64;
inline constexpr int kColorCount = 16;
inline constexpr int kKeyCount = 16;
inline constexpr int kMouseBuckets = 7;
inline constexpr int kMouseMax = 3;
inline constexpr int kTickHz = 10;
inline constexpr int kDefaultBudgetTicks = 100;
inline constexpr int kReachCells = 2;
inline constexpr std::size_t kMaxOverlayChars = 80;

// ---------------------------------------------------------------------------
// Actions

enum class Key : std::uint8_t {
  kW, kA, kS, kD, kSpace, kE, kQ, kR, kF, kC, k1, k2, k3, k4, kShift, kEsc
};

std::string_view key_name(Key key);
std::optional<Key> key_from_name(std::string_view name);

class KeySet {
 public:
  constexpr KeySet() = default;
  constexpr explicit KeySet(std::uint16_t bits) : bits_(bits) {}
  KeySet(std::initializer_list<Key> keys) {
    for (Key k : keys) set(k);
  }

  bool has(Key k) const { return (bits_ >> static_cast<int>(k)) & 1u; }
  void set(Key k, bool on = true) {
    auto m = static_cast<std::uint16_t>(1u << static_cast<int>(k));
    bits_ = on ? static_cast<std::uint16_t>(bits_ | m) : static_cast<std::uint16_t>(bits_ & ~m);
  }
  std::uint16_t bits() const { return bits_; }
  bool empty() const { return bits_ == 0; }
  int count() const;
  bool operator==(const KeySet&) const = default;

 private:
  std::uint16_t bits_ = 0;
};

/// One tick of keyboard-and-mouse input. Mouse motion is bucketed to -3..3.
struct ActionEvent {
  std::int64_t tick = 0;
  KeySet keys;
  std::int8_t mouse_dx = 0;
  std::int8_t mouse_dy = 0;
  bool left_button = false;
  bool right_button = false;

  bool is_noop() const {
    return keys.empty() && mouse_dx == 0 && mouse_dy == 0 && !left_button && !right_button;
  }
  void validate() const;
  bool operator==(const ActionEvent&) const = default;
};

ActionEvent noop_action(std::int64_t tick);
/// Same inputs, restamped to `tick`.
ActionEvent restamp(ActionEvent a, std::int64_t tick);
/// Key-hold continuation: keys and buttons persist, mouse deltas reset to zero.
ActionEvent held_action(const ActionEvent& previous, std::int64_t tick);
std::string describe_action(const ActionEvent& a);

// ---------------------------------------------------------------------------
// Observations

enum class Symbol : std::uint8_t {
  kVoid = 0,
  kFloor,
  kWall,
  kBoard,
  kBench,
  kWater,
  kAvatar,
  kCube,
  kBall,
  kKnife,
  kCarrot,
  kChoppedCarrot,
  kBlock,
  kStackedBlock,
  kTree,
  kRock,
  kCarbon,
  kBerryBush,
  kAxe,
  kPick,
  kBeam,
  kHands,
  kHudPitch,
  kHudMenu,
  kHudCrouch,
  kHudJump,
  kHudWood,
  kHudStone,
  kHudCarbon,
  kHudBerries,
  kHudPlanks,
  kCount
};
static_assert(static_cast<int>(Symbol::kCount) <= kSymbolCount);

enum class Color : std::uint8_t {
  kNone = 0, kRed, kGreen, kBlue, kYellow, kPurple, kOrange, kWhite, kBrown, kGrey, kBlack,
  kPink, kCyan, kCount
};
static_assert(static_cast<int>(Color::kCount) <= kColorCount);

std::string_view color_name(Color c);
std::optional<Color> color_from_name(std::string_view name);

struct Cell {
  std::uint8_t symbol = 0;
  std::uint8_t color = 0;
  bool operator==(const Cell&) const = default;
};

/// Egocentric 16x16 symbolic screen. Rows 0..14 are the view (avatar at
/// row 7, column 8, facing up the screen); row 15 is the HUD.
struct Frame {
  std::array<Cell, kFrameCells> cells{};
  std::vector<std::string> overlay_text;

  Cell& at(int row, int col) { return cells[static_cast<std::size_t>(row * kFrameSize + col)]; }
  const Cell& at(int row, int col) const {
    return cells[static_cast<std::size_t>(row * kFrameSize + col)];
  }
  void validate() const;
  bool operator==(const Frame&) const = default;
};

/// 64-bit FNV-1a over the row-major (symbol, color) cell bytes.
std::uint64_t frame_hash(const Frame& frame);

struct TextEvent {
  std::int64_t tick = 0;
  std::string text;
  bool operator==(const TextEvent&) const = default;
};

struct Observation {
  std::int64_t tick = 0;
  Frame frame;
  std::vector<TextEvent> text_events;
  bool operator==(const Observation&) const = default;
};

// ---------------------------------------------------------------------------
// World state

enum class WorldKind : std::uint8_t { kPlayRoom = 0, kBuildLab = 1, kHarvest = 2 };
inline constexpr int kWorldKindCount = 3;

std::string_view world_name(WorldKind w);
std::optional<WorldKind> world_from_name(std::string_view name);

enum class Terrain : std::uint8_t { kFloor = 0, kWall, kBoard, kBench, kWater };

enum class ObjectType : std::uint8_t {
  kCube, kBall, kKnife, kCarrot, kBlock, kTree, kRock, kCarbon, kBerryBush
};
std::string_view object_type_name(ObjectType t);

enum class Tool : std::uint8_t { kHands = 0, kAxe, kPick, kBeam };
std::string_view tool_name(Tool t);
std::optional<Tool> tool_from_name(std::string_view name);

enum class Resource : std::uint8_t { kWood = 0, kStone, kCarbon, kBerries, kPlanks };
inline constexpr int kResourceCount = 5;
std::string_view resource_label(Resource r);

/// Primitive behaviours recorded in the interaction log. Ground-truth
/// evaluators read this log to detect distractor contact.
enum class Primitive : std::uint8_t {
  kMoveForward, kMoveBack, kStrafeLeft, kStrafeRight, kTurnLeft, kTurnRight, kLookUp,
  kLookDown, kJump, kCrouch, kMenu, kEquip, kInteract, kDrop, kCraft
};
std::string_view primitive_name(Primitive p);
std::optional<Primitive> primitive_from_name(std::string_view name);

struct CellPos {
  int x = 0;
  int y = 0;
  bool operator==(const CellPos&) const = default;
};

inline constexpr std::uint16_t kNoEntity = 0;

struct Entity {
  std::uint16_t id = kNoEntity;
  ObjectType type = ObjectType::kCube;
  Color color = Color::kNone;
  std::int8_t x = -1;  // -1 while held
  std::int8_t y = -1;
  std::int32_t quantity = 0;
  bool chopped = false;
  std::uint16_t attached_to = kNoEntity;  // block below this one in an assembly

  bool placed() const { return x >= 0 && y >= 0; }
  std::string label() const;
  bool operator==(const Entity&) const = default;
};

struct InteractionRecord {
  std::int64_t tick = 0;
  Primitive kind = Primitive::kInteract;
  std::uint16_t entity = kNoEntity;
  std::uint8_t arg = 0;
  bool operator==(const InteractionRecord&) const = default;
};

struct Avatar {
  std::int8_t x = 0;
  std::int8_t y = 0;
  std::uint8_t facing = 0;  // 0 north, 1 east, 2 south, 3 west
  std::int8_t pitch = 0;    // -1 down, 0 level, 1 up
  std::int8_t yaw_accum = 0;
  std::int8_t pitch_accum = 0;
  bool crouching = false;
  std::uint8_t airborne = 0;
  std::uint16_t held = kNoEntity;
  Tool equipped = Tool::kHands;
  bool menu_open = false;
  KeySet prev_keys;
  bool prev_left = false;
  bool prev_right = false;
  bool operator==(const Avatar&) const = default;
};

/// Where the episode started; movement goals are measured against it.
struct EpisodeOrigin {
  std::int8_t x = 0;
  std::int8_t y = 0;
  std::uint8_t facing = 0;
  bool operator==(const EpisodeOrigin&) const = default;
};

struct WorldState {
  WorldKind world = WorldKind::kPlayRoom;
  std::int64_t tick = 0;
  std::uint32_t rng_state = 1;  // std::minstd_rand state, always in [1, 2^31-2]
  int width = 0;
  int height = 0;
  std::vector<Terrain> terrain;
  Avatar avatar;
  EpisodeOrigin origin;
  std::vector<Entity> entities;
  std::array<std::int32_t, kResourceCount> inventory{};
  std::vector<InteractionRecord> log;
  std::uint16_t next_entity_id = 1;

  bool in_bounds(CellPos p) const { return p.x >= 0 && p.y >= 0 && p.x < width && p.y < height; }
  Terrain terrain_at(CellPos p) const {
    return terrain[static_cast<std::size_t>(p.y * width + p.x)];
  }
  void set_terrain(CellPos p, Terrain t) { terrain[static_cast<std::size_t>(p.y * width + p.x)] = t; }
  const Entity* find(std::uint16_t id) const;
  Entity* find(std::uint16_t id);
  const Entity* find_label(std::string_view label) const;
  /// Topmost placed entity on a cell (the visible one), or nullptr.
  const Entity* entity_at(CellPos p) const;
  /// Floor terrain with no placed entity.
  bool walkable(CellPos p) const;
  std::uint32_t next_random();
  bool operator==(const WorldState&) const = default;
};

CellPos facing_delta(int facing);
CellPos right_delta(int facing);

/// The cell the avatar's crosshair targets: the first cell within reach that
/// holds an entity or non-floor terrain.
std::optional<CellPos> crosshair_target(const WorldState& state);

struct StepResult {
  WorldState state;
  Observation observation;
};

/// Pure tick function. Requires `action.tick == state.tick`.
StepResult step(const WorldState& state, const ActionEvent& action);
/// In-place variant of step; returns the observation of the new tick.
Observation advance(WorldState& state, const ActionEvent& action);
/// Observation of the current tick with no text events.
Observation observe(const WorldState& state);
Frame render(const WorldState& state, const std::vector<TextEvent>& recent_text = {});

/// Save-state binary: "MWSV", u16 version, u32 length, canonical payload.
std::vector<std::uint8_t> save(const WorldState& state);
WorldState load(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Tasks

enum class SkillCategory : std::uint8_t {
  kMovement = 0, kNavigation, kResourceGathering, kObjectManagement, kToolUse, kConstruction,
  kMenuInventory, kLook, kGameProgression
};
inline constexpr int kSkillCategoryCount = 9;
std::string_view skill_name(SkillCategory s);
std::optional<SkillCategory> skill_from_name(std::string_view name);

struct GroundTruthSpec {
  std::string predicate;
  std::vector<std::string> targets;
  std::vector<std::string> distractors;
  bool operator==(const GroundTruthSpec&) const = default;
};

struct ActionPredicate {
  Key key = Key::kE;
  int within_ticks = 5;
  bool operator==(const ActionPredicate&) const = default;
};

struct OcrSpec {
  std::vector<std::string> patterns;
  /// Text that counts as interacting with a distractor when seen before success.
  std::vector<std::string> forbidden;
  std::optional<ActionPredicate> action;
  bool operator==(const OcrSpec&) const = default;
};

struct JudgedSpec {
  std::string rubric;
  bool operator==(const JudgedSpec&) const = default;
};

enum class EvaluatorKind : std::uint8_t { kGroundTruth = 0, kOcrPattern, kJudged };

struct EvaluatorSpec {
  std::variant<GroundTruthSpec, OcrSpec, JudgedSpec> body;

  EvaluatorKind kind() const { return static_cast<EvaluatorKind>(body.index()); }
  /// Patterns compile, predicate ids are known.
  void validate() const;
  bool operator==(const EvaluatorSpec&) const = default;
};

struct TaskSpec {
  std::string task_id;
  WorldKind world = WorldKind::kPlayRoom;
  std::string save_state_ref;
  std::string instruction;
  EvaluatorSpec evaluator;
  std::vector<std::string> distractor_ids;
  int budget_ticks = kDefaultBudgetTicks;
  SkillCategory skill = SkillCategory::kMovement;

  void validate() const;
  bool operator==(const TaskSpec&) const = default;
};

enum class EpisodeStatus : std::uint8_t { kSuccess = 0, kFailure, kTimeout, kDistractorFailure };
std::string_view status_name(EpisodeStatus s);
std::optional<EpisodeStatus> status_from_name(std::string_view name);

struct EpisodeOutcome {
  EpisodeStatus status = EpisodeStatus::kFailure;
  int ticks_used = 0;
  std::string trace_ref;
  bool operator==(const EpisodeOutcome&) const = default;
};

/// Builds the initial state of `spec` with placement randomised by `seed`.
/// Throws SpecError for an unresolvable save_state_ref.
WorldState instantiate_task(const TaskSpec& spec, std::uint64_t seed);

}  // namespace sima

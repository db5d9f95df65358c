#pragma once

// The three instructable worlds (PlayRoom, BuildLab, Harvest), their
// interaction rules, ground-truth goal checks and the task registry.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sima/worldcore.hpp"

namespace sima::worlds {

enum class Verb : std::uint8_t { kGrab, kUse, kCraft, kDrop };

struct InteractEffect {
  enum class Kind : std::uint8_t {
    kNone, kOutOfReach, kPickUp, kDrop, kChop, kAttach, kDetach, kHarvest, kCraft
  };
  Kind kind = Kind::kNone;
  std::uint16_t entity = kNoEntity;
  std::vector<TextEvent> text;
};

/// Applies the world-specific effect of `verb` on `target`. Targets beyond
/// the reach radius produce a recorded no-op, mirroring games.
InteractEffect interact(WorldState& state, CellPos target, Verb verb = Verb::kGrab);

enum class GoalStatus : std::uint8_t { kOngoing, kSuccess, kFailure, kDistractorFailure };

/// A ground-truth reference: an entity label ("green cube"), a primitive
/// ("act:turn_right") or a tool ("tool:axe").
struct ResolvedRef {
  enum class Kind : std::uint8_t { kEntity, kPrimitive, kTool };
  Kind kind = Kind::kEntity;
  std::uint16_t entity = kNoEntity;
  Primitive primitive = Primitive::kInteract;
  Tool tool = Tool::kHands;
};

ResolvedRef resolve_ref(const WorldState& state, const std::string& ref);

/// Evaluates a ground-truth spec against the current state and the
/// interaction log. Distractor contact anywhere in the log dominates.
GoalStatus check_goal(const WorldState& state, const GroundTruthSpec& spec,
                      std::span<const InteractionRecord> log);

/// Throws SpecError when the spec references entities absent from `state`.
void validate_refs(const WorldState& state, const GroundTruthSpec& spec);

bool is_known_predicate(std::string_view predicate);

// ---------------------------------------------------------------------------
// Layouts and registry

struct LayoutObject {
  ObjectType type;
  Color color;
  std::int32_t quantity = 1;
};

struct Layout {
  WorldKind world;
  int index = 0;
  std::vector<LayoutObject> objects;
  std::array<std::int32_t, kResourceCount> inventory{};
  bool partition = false;  // PlayRoom internal wall with doorway
  int boards = 0;
  int benches = 0;
  int water = 0;

  std::string ref() const;
};

const std::vector<Layout>& layouts();
const Layout& find_layout(const std::string& save_state_ref);

std::vector<TaskSpec> registry_list(std::optional<WorldKind> world = std::nullopt);
const TaskSpec& find_task(const std::string& task_id);

/// Registry file: a version header line followed by one JSON object per task.
void save_registry(const std::string& path, const std::vector<TaskSpec>& tasks);
std::vector<TaskSpec> load_registry(const std::string& path);
std::string task_to_json(const TaskSpec& task);
TaskSpec task_from_json(const std::string& line);

// ---------------------------------------------------------------------------
// Reachability helpers shared with the scripted expert.

/// Avatar pose used by planners.
struct Pose {
  int x = 0;
  int y = 0;
  int facing = 0;
  bool operator==(const Pose&) const = default;
};

/// True when the avatar at `pose` would target `cell` with its crosshair.
bool pose_targets(const WorldState& state, const Pose& pose, CellPos cell);

}  // namespace sima::worlds

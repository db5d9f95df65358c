#pragma once

// Session layer between a real-time world and its clients: the binary wire
// protocol, offset action scheduling, simulated and wall-clock session
// drivers, trajectory recording and replay.

#include <array>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "sima/worldcore.hpp"

namespace sima::net {

inline constexpr std::array<std::uint8_t, 4> kWireMagic = {'S', 'M', 'W', 'P'};
inline constexpr std::uint16_t kProtocolVersion = 1;
/// magic(4) + version(2) + variant(1) + body length(4)
inline constexpr std::size_t kWireHeaderSize = 11;
inline constexpr int kChunkLen = 8;

enum class Role : std::uint8_t { kPlayer, kSetter, kSolver, kInstructor, kAnnotator, kJudge, kAgent };
std::string_view role_name(Role r);
std::optional<Role> role_from_name(std::string_view name);

struct LatencyModel {
  double obs_delay_ms = 0.0;
  double action_delay_ms = 0.0;
  double jitter_ms = 0.0;
  bool operator==(const LatencyModel&) const = default;
};

struct SessionConfig {
  int tick_hz = kTickHz;
  LatencyModel latency;
  int offset_k = 2;
  bool record = true;

  double tick_ms() const { return 1000.0 / tick_hz; }
  void validate() const;
  bool operator==(const SessionConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Messages

struct Hello {
  std::uint16_t version = kProtocolVersion;
  Role role = Role::kPlayer;
  std::string client_name;
  bool operator==(const Hello&) const = default;
};

/// A chunk of per-tick actions computed from observation `computed_at`.
struct ActionChunk {
  std::int64_t computed_at = 0;
  std::vector<ActionEvent> actions;
  bool operator==(const ActionChunk&) const = default;
};

struct Instruction {
  std::string text;
  bool operator==(const Instruction&) const = default;
};

struct Reset {
  std::string task_id;
  std::uint64_t seed = 0;
  bool operator==(const Reset&) const = default;
};

struct LoadState {
  std::vector<std::uint8_t> save_bytes;
  bool operator==(const LoadState&) const = default;
};

struct Interrupt {
  std::string text;
  bool operator==(const Interrupt&) const = default;
};

enum class EndReason : std::uint8_t {
  kSuccess, kFailure, kTimeout, kDistractorFailure, kDisconnect, kShutdown
};
std::string_view end_reason_name(EndReason r);
EndReason end_reason_for(EpisodeStatus s);

struct EndEpisode {
  EndReason reason = EndReason::kTimeout;
  std::int64_t tick = 0;
  bool operator==(const EndEpisode&) const = default;
};

struct JudgeRequest {
  std::string episode_id;
  std::string rubric;
  bool operator==(const JudgeRequest&) const = default;
};

using Message = std::variant<Hello, SessionConfig, Observation, ActionChunk, Instruction, Reset,
                             LoadState, TextEvent, Interrupt, EndEpisode, JudgeRequest>;
inline constexpr std::uint8_t kVariantCount = std::variant_size_v<Message>;

std::string_view message_name(const Message& m);

std::vector<std::uint8_t> encode(const Message& msg);
/// Decodes exactly one message occupying all of `bytes`.
Message decode(std::span<const std::uint8_t> bytes);
/// Stream framing: total size of the first frame once its header is
/// available, validating magic and version; nullopt while incomplete.
std::optional<std::size_t> frame_size(std::span<const std::uint8_t> prefix);

// ---------------------------------------------------------------------------
// Offset scheduling

/// Action i of a chunk computed from observation `computed_at` is scheduled
/// for tick computed_at + offset_k + i.
std::vector<std::pair<std::int64_t, ActionEvent>> schedule_offset_action(
    const std::vector<ActionEvent>& chunk, std::int64_t computed_at, int offset_k);

/// Per-session schedule. A newer chunk preempts every unexecuted slot of
/// older chunks from its first scheduled tick on. Ticks with no scheduled
/// action continue the previous keys with zero mouse motion.
class ActionSchedule {
 public:
  explicit ActionSchedule(int offset_k) : offset_k_(offset_k) {}

  /// Returns false when the chunk is stale (older than one already installed).
  bool install(const ActionChunk& chunk);

  struct Applied {
    ActionEvent action;
    bool scheduled = false;
    std::int64_t computed_at = -1;
  };
  Applied take(std::int64_t tick);

  /// Slots currently scheduled, for inspection.
  std::map<std::int64_t, std::pair<ActionEvent, std::int64_t>> slots() const { return slots_; }

 private:
  int offset_k_;
  std::int64_t newest_stamp_ = -1;
  std::map<std::int64_t, std::pair<ActionEvent, std::int64_t>> slots_;
  ActionEvent last_;
};

// ---------------------------------------------------------------------------
// Trajectories

enum class SegmentSource : std::uint8_t { kLive, kPosthoc, kSetter, kScripted };
std::string_view segment_source_name(SegmentSource s);
std::optional<SegmentSource> segment_source_from_name(std::string_view name);

struct InstructionSegment {
  std::int64_t t0 = 0;
  std::int64_t t1 = 0;
  std::string text;
  SegmentSource source = SegmentSource::kScripted;
  bool operator==(const InstructionSegment&) const = default;
};

struct TrajectoryHeader {
  WorldKind world = WorldKind::kPlayRoom;
  std::uint64_t seed = 0;
  std::string task_id;
  SessionConfig config;
  Role role = Role::kAgent;
  std::vector<std::uint8_t> initial_state;  // save() bytes of the tick-0 state
  bool operator==(const TrajectoryHeader&) const = default;
};

/// `actions[t]` is the action applied at tick t and `observations[t]` the
/// observation emitted after it, so both streams have one entry per elapsed
/// tick. The tick-0 observation is rendered from the initial state.
struct Trajectory {
  TrajectoryHeader header;
  std::vector<Observation> observations;
  std::vector<ActionEvent> actions;
  std::vector<TextEvent> text_events;
  std::vector<InstructionSegment> segments;
  std::optional<EndEpisode> end;

  std::int64_t ticks() const { return static_cast<std::int64_t>(actions.size()); }
  WorldState initial_state() const { return load(header.initial_state); }
  /// Frame shown at tick `t` (0..ticks()).
  Frame frame_at(std::int64_t t) const;
  void validate() const;
  bool operator==(const Trajectory&) const = default;
};

class ReplayDivergence : public Error {
 public:
  ReplayDivergence(std::int64_t tick, const std::string& detail);
  std::int64_t tick() const { return tick_; }

 private:
  std::int64_t tick_;
};

/// Re-executes the recorded actions and returns the post-step frame hashes.
/// Throws ReplayDivergence at the first tick whose hash differs.
std::vector<std::uint64_t> replay(const Trajectory& traj);

/// Container: "MWTR" header record, then length-prefixed records; a sidecar
/// "<path>.idx" lists record offsets.
class TrajectoryWriter {
 public:
  TrajectoryWriter(const std::string& path, const TrajectoryHeader& header);
  ~TrajectoryWriter();
  TrajectoryWriter(const TrajectoryWriter&) = delete;
  TrajectoryWriter& operator=(const TrajectoryWriter&) = delete;

  void append_step(const ActionEvent& applied, const Observation& obs);
  void append_segment(const InstructionSegment& seg);
  void append_end(const EndEpisode& end);
  void flush();
  void close();

 private:
  void record(std::uint8_t type, const std::vector<std::uint8_t>& body);

  std::string path_;
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file_;
  std::vector<std::pair<std::uint8_t, std::uint64_t>> index_;
  std::uint64_t offset_ = 0;
  bool closed_ = false;
};

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj);
Trajectory decode_trajectory(std::span<const std::uint8_t> bytes);
void write_trajectory(const std::string& path, const Trajectory& traj);
Trajectory read_trajectory(const std::string& path);
/// Record offsets from the sidecar index.
std::vector<std::pair<std::uint8_t, std::uint64_t>> read_trajectory_index(const std::string& path);

// ---------------------------------------------------------------------------
// Sessions

/// Client seen by a session driver. Clients never see the world state.
class Client {
 public:
  virtual ~Client() = default;
  virtual void on_start(const SessionConfig& /*config*/, const std::string& /*instruction*/) {}
  /// Returns the chunk computed from `obs`, if any.
  virtual std::optional<ActionChunk> on_observation(const Observation& obs) = 0;
  /// Interrupt or new instruction mid-episode.
  virtual void on_instruction(const std::string& /*text*/) {}
  /// Simulated compute time spent on the observation at `tick`.
  virtual double compute_ms(std::int64_t /*tick*/) { return 0.0; }
};

/// Called after every tick with the post-step state; returns a terminal
/// status to end the episode.
using TickMonitor = std::function<std::optional<EpisodeStatus>(
    const WorldState& state, const ActionEvent& applied, const Observation& obs)>;

struct InstructionChange {
  std::int64_t tick = 0;  // takes effect for observations at or after this tick
  std::string text;
};

struct SessionMetrics {
  std::int64_t ticks = 0;
  std::int64_t scheduled_ticks = 0;  // ticks whose action came from a chunk
  std::int64_t missed_ticks = 0;     // ticks >= offset_k without a scheduled action
  std::int64_t chunks_received = 0;
  std::int64_t stale_chunks = 0;
  std::int64_t observations_dropped = 0;  // coalesced in the client inbox
  std::int64_t overruns = 0;
  double mean_lag_ticks = 0.0;  // applied tick minus computed_at, over scheduled ticks

  double on_time_ratio() const {
    return ticks == 0 ? 1.0 : static_cast<double>(scheduled_ticks) / static_cast<double>(ticks);
  }
};

struct SessionResult {
  Trajectory trajectory;
  SessionMetrics metrics;
  EpisodeStatus status = EpisodeStatus::kTimeout;
  WorldState final_state;
};

struct SessionSpec {
  WorldState initial;
  std::string task_id;
  std::uint64_t seed = 0;
  std::string instruction;
  std::vector<InstructionChange> interrupts;
  int budget_ticks = kDefaultBudgetTicks;
  SessionConfig config;
  Role role = Role::kAgent;
  TickMonitor monitor;
  std::uint64_t jitter_seed = 0;
};

/// Discrete-event session on a virtual clock: the world ticks every
/// tick_ms, observations and actions travel with the configured delays, and
/// a busy client only ever picks up the newest waiting observation.
SessionResult run_simulated_session(const SessionSpec& spec, Client& client);

// ---------------------------------------------------------------------------
// Wall-clock sessions over message channels

/// Bidirectional ordered message pipe.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual bool send(const Message& msg) = 0;
  /// Blocks up to `timeout` for a message; nullopt on timeout or close.
  virtual std::optional<Message> receive(std::chrono::milliseconds timeout) = 0;
  virtual bool closed() const = 0;
  virtual void close() = 0;
};

/// Thread-safe in-process channel pair; each end reads what the other sends.
std::pair<std::shared_ptr<Channel>, std::shared_ptr<Channel>> make_channel_pair();

/// Channel over a connected stream socket carrying wire-encoded frames.
std::shared_ptr<Channel> make_socket_channel(int fd);

struct RealtimeOptions {
  /// Set to request a graceful stop (session ends with kShutdown).
  std::shared_ptr<std::atomic<bool>> stop;
  /// Streams the recording to disk while the session runs.
  std::string record_path;
};

/// Wall-clock session: steps the world every tick period regardless of the
/// client, sending observations and applying whatever actions have arrived.
SessionResult run_realtime_session(const SessionSpec& spec, Channel& channel,
                                   const RealtimeOptions& options = {});

/// Client side of a wall-clock session: feeds observations to `client`,
/// sleeping for its compute time, and sends back chunks. Returns the
/// EndEpisode message, or nullopt if the channel closed first.
std::optional<EndEpisode> drive_client(Channel& channel, Client& client);

}  // namespace sima::net

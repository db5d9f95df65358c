#pragma once

// Turning sessions into training data: scripted demonstrations, filtering,
// mixture sampling, example tiling and instruction clustering.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sima/netproto.hpp"
#include "sima/worldcore.hpp"

namespace sima::data {

// ---------------------------------------------------------------------------
// Scripted expert

/// Action the expert takes in `state` (stamped state.tick). A pure function
/// of the task and the state, so plans stay consistent under replanning.
ActionEvent expert_action(const TaskSpec& task, const WorldState& state);

struct ExpertResult {
  net::Trajectory trajectory;
  EpisodeStatus status = EpisodeStatus::kFailure;
  std::int64_t success_tick = -1;
};

/// Runs the expert synchronously on instantiate_task(task, seed) until the
/// evaluator succeeds or the budget runs out, then idles `tail_ticks`.
ExpertResult scripted_expert(const TaskSpec& task, std::uint64_t seed, int tail_ticks = 4);

/// The expert as a session client. It cannot see the world, so it keeps a
/// shadow copy of the initial state and rolls it forward with its own
/// schedule to plan offset_k ticks ahead.
class ExpertClient : public net::Client {
 public:
  ExpertClient(TaskSpec task, WorldState initial);

  void on_start(const net::SessionConfig& config, const std::string& instruction) override;
  std::optional<net::ActionChunk> on_observation(const Observation& obs) override;
  void on_instruction(const std::string& text) override;

 private:
  TaskSpec task_;
  WorldState shadow_;
  int offset_k_ = 2;
  std::map<std::int64_t, ActionEvent> planned_;
  std::map<std::int64_t, WorldState> snapshots_;  // shadow before each tick
  bool replan_ = false;
};

// ---------------------------------------------------------------------------
// Annotation segments and filtering

struct AnnotationSegment {
  std::string trajectory_id;
  std::int64_t t0 = 0;
  std::int64_t t1 = 0;
  std::string instruction;
  net::SegmentSource source = net::SegmentSource::kScripted;
  std::string annotator_id;

  void validate() const;
  bool operator==(const AnnotationSegment&) const = default;
};

inline constexpr std::int64_t kMaxSegmentTicks = 100;

/// Upload format: one JSON object per line with the fields above.
std::vector<AnnotationSegment> parse_annotations(const std::string& text);
std::string annotation_to_json(const AnnotationSegment& s);

std::vector<AnnotationSegment> segments_of(const net::Trajectory& traj, const std::string& trajectory_id);

struct FilterRules {
  std::int64_t idle_ticks = 30;
  int min_tokens = 2;
  /// Scripted segments carry registry instructions, which may be one word.
  bool scripted_skip_min_tokens = false;
  std::int64_t max_ticks = kMaxSegmentTicks;
};

struct FilterReport {
  std::int64_t idle_spans = 0;
  std::int64_t idle_ticks_removed = 0;
  std::int64_t short_instructions = 0;
  std::int64_t split_segments = 0;
  bool rejected = false;
  std::string reject_reason;
};

struct FilterResult {
  std::vector<AnnotationSegment> kept;
  FilterReport report;
};

/// Removes idle spans (>= idle_ticks of no-op actions with an unchanged
/// frame), drops instructions under min_tokens and splits segments longer
/// than max_ticks into consecutive pieces so no active tick is lost.
FilterResult filter(const net::Trajectory& traj, const std::vector<AnnotationSegment>& segments,
                    const FilterRules& rules = {});

std::vector<std::string> tokenize(std::string_view text);

// ---------------------------------------------------------------------------
// Mixtures

struct ManifestEntry {
  std::string world;
  std::string collection;
  std::string path;
  double weight = 1.0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string preprocessing_version = "1";
  std::uint64_t seed = 0;

  void validate() const;
  /// Mixture probabilities per entry, summing to 1.
  std::vector<double> probabilities() const;
};

DatasetManifest parse_manifest(const std::string& json_text);
std::string manifest_to_json(const DatasetManifest& m);

/// Draws (entry, segment) pairs: entry by weight, segment uniformly.
class DatasetSampler {
 public:
  DatasetSampler(const DatasetManifest& manifest, std::vector<std::size_t> segment_counts,
                 std::uint64_t seed);
  std::pair<std::size_t, std::size_t> next();

 private:
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> pick_;
  std::vector<std::size_t> counts_;
};

/// Throws SpecError if an entry with positive weight has no segments.
DatasetSampler build_dataset(const DatasetManifest& manifest,
                             const std::vector<std::size_t>& segment_counts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Examples

struct ExampleConfig {
  int chunk_len = net::kChunkLen;
  int offset_k = 2;
  /// Distance between consecutive target windows; chunk_len tiles exactly.
  int stride = net::kChunkLen;
  /// Number of earlier frames kept as memory context.
  int memory = 2;
};

struct TrainingExample {
  WorldKind world = WorldKind::kPlayRoom;
  std::string instruction;
  std::int64_t obs_tick = 0;
  Frame frame;
  std::vector<Frame> memory;  // oldest first, at most ExampleConfig::memory
  std::vector<ActionEvent> pending;  // actions already committed for [obs, obs + k)
  std::vector<ActionEvent> targets;  // ticks [obs + k, obs + k + chunk_len)
  std::vector<bool> mask;            // false for padding
  std::vector<bool> goal_label;
  bool goal_known = false;
};

/// Tiles the segment's target ticks [t0, t1) into chunks. Each chunk is
/// predicted from the observation offset_k ticks earlier.
std::vector<TrainingExample> make_examples(const net::Trajectory& traj, const AnnotationSegment& seg,
                                           const ExampleConfig& config = {});

/// Binary shard of training examples with a version header and a free-form
/// provenance string (the producing config as JSON).
std::vector<std::uint8_t> encode_examples(const std::vector<TrainingExample>& examples,
                                          std::string_view provenance = {});
std::vector<TrainingExample> decode_examples(std::span<const std::uint8_t> bytes);

struct Shard {
  std::string provenance;
  std::vector<TrainingExample> examples;
};
Shard decode_shard(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Instruction clustering

/// Hashed character 3-gram embedding, L2-normalised.
std::vector<double> ngram_embedding(std::string_view text, std::size_t dims = 256);
double cosine_distance(const std::vector<double>& a, const std::vector<double>& b);

struct Merge {
  std::size_t a = 0;  // cluster ids: 0..n-1 leaves, n.. merged clusters
  std::size_t b = 0;
  double height = 0.0;
  std::size_t size = 0;
};

struct Hierarchy {
  std::vector<std::string> items;
  std::vector<Merge> merges;  // n-1 merges in order
  /// Nested JSON tree for the cluster-wheel report.
  std::string report_json() const;
};

/// Average-linkage agglomerative clustering on cosine distance.
Hierarchy cluster_instructions(const std::vector<std::string>& instructions);

}  // namespace sima::data

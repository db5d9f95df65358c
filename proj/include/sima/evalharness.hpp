#pragma once

// Episode evaluators (ground truth, text-event OCR, human judgments), the
// evaluation drivers, statistics and the ablation suite.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "sima/netproto.hpp"
#include "sima/worldcore.hpp"
#include "sima/worlds.hpp"

namespace sima::eval {

// ---------------------------------------------------------------------------
// Evaluators

/// True iff every pattern matches some event, in order, and the optional
/// action predicate holds for the event matching the last pattern.
/// `actions` is indexed by tick.
bool ocr_evaluate(std::span<const TextEvent> events, const OcrSpec& spec,
                  std::span<const ActionEvent> actions = {});

/// Tracks one episode tick by tick. The first terminal verdict is final.
class EpisodeEvaluator {
 public:
  EpisodeEvaluator(const TaskSpec& task, const WorldState& initial);

  /// Feed the post-step state, the action applied on that step and the
  /// emitted observation. Returns the verdict once decided.
  std::optional<EpisodeStatus> update(const WorldState& state, const ActionEvent& applied,
                                      const Observation& obs);
  std::optional<EpisodeStatus> verdict() const { return verdict_; }
  /// Tick count at which the verdict was reached.
  std::int64_t decided_at() const { return decided_at_; }

  /// Adapter for session drivers.
  net::TickMonitor monitor();

 private:
  TaskSpec task_;
  std::size_t log_offset_ = 0;
  EpisodeOrigin origin_;
  std::vector<std::uint16_t> distractor_entities_;
  std::optional<EpisodeStatus> verdict_;
  std::int64_t decided_at_ = -1;
  std::vector<TextEvent> events_;
  std::vector<ActionEvent> actions_;
  std::vector<std::regex> forbidden_;
};

// ---------------------------------------------------------------------------
// Agents under evaluation

/// Builds a fresh client for one episode of `task`.
using ClientFactory =
    std::function<std::unique_ptr<net::Client>(const TaskSpec& task, const WorldState& initial)>;

struct EpisodeOptions {
  net::SessionConfig config;
  /// Simulated client compute time per observation.
  double compute_ms = 0.0;
  std::uint64_t jitter_seed = 0;
  bool keep_trajectory = false;
};

struct EpisodeRecord {
  std::string task_id;
  std::uint64_t seed = 0;
  EpisodeOutcome outcome;
  net::SessionMetrics metrics;
  std::optional<net::Trajectory> trajectory;
};

/// Runs one episode on the simulated session clock. Exceptions thrown by
/// the agent become a failure with the diagnostic in trace_ref.
EpisodeRecord run_episode(const ClientFactory& agent, const TaskSpec& task, std::uint64_t seed,
                          const EpisodeOptions& options = {});

/// Instruction A from tick 0, interrupted by B at `switch_tick`. Success iff
/// B succeeds within budget and A is not completed after the switch.
struct SwitchResult {
  EpisodeOutcome outcome;
  bool degenerate = false;  // switch_tick >= budget: plain evaluation of A
};
SwitchResult switch_test(const ClientFactory& agent, const TaskSpec& task_a, const TaskSpec& task_b,
                         std::int64_t switch_tick, std::uint64_t seed, const EpisodeOptions& options = {});

// ---------------------------------------------------------------------------
// Statistics

struct RateCI {
  double rate = 0.0;
  double ci95 = 0.0;  // normal-approximation half-width
  double lo = 0.0;    // rate - ci95 clipped to [0, 1]
  double hi = 0.0;
  std::size_t n = 0;
};

RateCI success_rate(std::size_t successes, std::size_t n);
RateCI success_rate(std::span<const EpisodeOutcome> outcomes);
/// Rate over per-item scores in [0,1] (e.g. per-task success fractions).
RateCI mean_rate(std::span<const double> scores);

enum class Rating : std::uint8_t { kSuccess, kFailure };

struct JudgmentRecord {
  std::string episode_id;
  std::string judge_id;
  Rating rating = Rating::kFailure;
  std::string note;
  bool operator==(const JudgmentRecord&) const = default;
};

/// Strict majority of success ratings; ties count as failure. Throws
/// SpecError on an empty list or a duplicate judge.
bool aggregate_judgments(std::span<const JudgmentRecord> records);

/// One record per line: {"episode_id","judge_id","rating","note"}. Throws
/// SpecError on duplicates (episode, judge) or malformed lines.
std::vector<JudgmentRecord> parse_judgments(const std::string& text);
std::string judgment_to_json(const JudgmentRecord& r);

struct RelativeScore {
  std::map<std::string, double> per_world;  // percent of specialist
  std::vector<std::string> excluded;        // specialist rate 0
  double aggregate = 0.0;                   // unweighted mean over included worlds
};
RelativeScore normalize_vs_specialist(const std::map<std::string, double>& agent_rates,
                                      const std::map<std::string, double>& specialist_rates);

enum class PermutationMode : std::uint8_t { kPooled, kPaired };

struct PermutationResult {
  double p = 1.0;
  double statistic = 0.0;  // mean(a) - mean(b)
  bool exhaustive = false;
  std::uint64_t resamples = 0;
};

/// Two-sided permutation test on the difference of means. Pooled mode
/// relabels the pooled scores; paired mode flips signs of a[i]-b[i].
/// Enumerates exhaustively when the permutation count is at most
/// `exhaustive_limit`, otherwise Monte Carlo with p = (1+hits)/(1+n).
PermutationResult permutation_test(std::span<const double> a, std::span<const double> b,
                                   std::uint64_t n_resamples = 10000, std::uint64_t seed = 0,
                                   PermutationMode mode = PermutationMode::kPooled,
                                   std::uint64_t exhaustive_limit = 100000);

}  // namespace sima::eval

#pragma once

// Data collection for training runs, policy probes and the ablation suite
// (multiworld, specialists, no-language, held-out world, guidance scale).

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sima/agent.hpp"
#include "sima/datapipe.hpp"
#include "sima/evalharness.hpp"

namespace sima::eval {

// ---------------------------------------------------------------------------
// Demonstrations

struct CollectOptions {
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  data::ExampleConfig examples;
  data::FilterRules rules = [] {
    data::FilterRules r;
    r.scripted_skip_min_tokens = true;
    return r;
  }();
  /// Session settings for the expert client; offset_k matches the agent.
  net::SessionConfig session;
};

struct Collection {
  /// Examples per world, indexed by WorldKind.
  std::array<std::vector<data::TrainingExample>, kWorldKindCount> examples;
  data::FilterReport filter;
  std::int64_t episodes = 0;
  std::int64_t expert_failures = 0;
  std::vector<std::string> failed;  // task#seed of failed demonstrations
};

/// Runs the expert as a session client on every task x seed and turns the
/// recorded sessions into examples.
Collection collect_demonstrations(const std::vector<TaskSpec>& tasks, const CollectOptions& options);

/// One demonstration trajectory (expert client on the simulated session).
net::SessionResult expert_session(const TaskSpec& task, std::uint64_t seed, const net::SessionConfig& session);

/// Trains a fresh policy on the examples of `worlds`, one equally weighted
/// mixture entry per world, sampling with config.seed.
agent::Policy train_on_worlds(const Collection& data, const std::vector<WorldKind>& worlds,
                              const agent::AgentConfig& config, std::int64_t steps,
                              const std::function<void(const agent::StepMetrics&)>& on_log = {});

// ---------------------------------------------------------------------------
// Probes

/// One forward pass; true iff the first action of the argmax chunk
/// satisfies `predicate`.
bool static_probe(const agent::Policy& policy, const Frame& frame, const std::string& instruction,
                  const std::function<bool(const ActionEvent&)>& predicate);

/// Mean negative log-likelihood per unmasked step.
double logprob_eval(const agent::Policy& policy, const std::vector<data::TrainingExample>& examples);

/// Session client factory running `policy` with guidance scale `cfg_scale`.
ClientFactory agent_factory(const agent::Policy& policy, double cfg_scale);

// ---------------------------------------------------------------------------
// Ablation suite

struct TaskResult {
  std::string task_id;
  WorldKind world = WorldKind::kPlayRoom;
  SkillCategory skill = SkillCategory::kMovement;
  std::uint64_t seed = 0;
  EpisodeStatus status = EpisodeStatus::kFailure;
  int ticks = 0;
};

struct ConditionResult {
  std::string name;
  std::vector<std::string> agents;          // checkpoint identifiers
  std::vector<WorldKind> worlds;            // worlds evaluated
  std::vector<TaskResult> episodes;
  std::map<std::string, RateCI> per_world;  // keyed by world name
  std::map<std::string, RateCI> per_skill;
  RateCI overall;
  /// Per-task success fraction, keyed by task id.
  std::map<std::string, double> per_task;
};

struct EvalReport {
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> eval_seeds;
  std::vector<ConditionResult> conditions;
  /// Multiworld relative to each specialist, percent.
  RelativeScore relative;
  /// (multiworld, specialist) permutation p per world.
  std::map<std::string, PermutationResult> specialist_p;
  /// (multiworld, no-language) permutation p on the full suite.
  std::optional<PermutationResult> no_language_p;
  std::vector<std::string> skipped;  // conditions without checkpoints
  std::uint64_t permutation_seed = 0;
  std::uint64_t permutation_resamples = 10000;
  /// Producing config as JSON.
  std::string provenance;

  const ConditionResult* find(const std::string& name) const;
  std::string to_json() const;
};

/// One evaluated condition: an agent (or several seeds of it, averaged per
/// task) on a set of worlds.
struct ConditionSpec {
  std::string name;
  std::vector<std::string> checkpoints;  // one per training seed
  std::vector<WorldKind> worlds;
  double cfg_scale = 1.0;
};

struct AblationConfig {
  std::vector<ConditionSpec> conditions;
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> eval_seeds = {1000, 1001, 1002};
  EpisodeOptions episode;
  std::uint64_t permutation_seed = 0;
  std::uint64_t permutation_resamples = 10000;
};

/// Evaluates each condition on every registry task of its worlds. Missing
/// checkpoints skip the condition and are listed in the report. The
/// statistics need conditions named "multiworld", "specialist:<world>" and
/// "no_language".
EvalReport run_ablation_suite(const AblationConfig& config);

/// {"train_seeds", "eval_seeds", "permutation_seed", "permutation_resamples",
///  "compute_ms", "session": {"offset_k", "tick_hz", latency fields},
///  "conditions": [{"name", "checkpoints", "worlds", "cfg_scale"}]}.
/// Relative checkpoint paths resolve against `base_dir`.
AblationConfig ablation_config_from_json(const std::string& text, const std::string& base_dir = "");
std::string ablation_config_to_json(const AblationConfig& config);

/// Recomputes rates, relative scores and p-values from stored episodes.
void finalize_report(EvalReport& report, std::uint64_t permutation_seed, std::uint64_t resamples);

/// Loads a report written by EvalReport::to_json and recomputes its
/// statistics with the stored permutation settings.
EvalReport report_from_json(const std::string& text);

/// Bar chart of per-world success with 95% intervals for every condition.
std::string render_svg(const EvalReport& report);
/// Plain-text summary table.
std::string render_summary(const EvalReport& report);

}  // namespace sima::eval

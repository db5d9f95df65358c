#pragma once

// The instructable policy: frame and instruction encoders, attention over a
// sliding memory of past states, a factored 8-step action head with a goal
// completion head, behavioural cloning, classifier-free guidance and the
// latency-compensated act loop.

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sima/datapipe.hpp"
#include "sima/netproto.hpp"
#include "sima/worldcore.hpp"

namespace sima::agent {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Logits per chunk step: 16 key logits, 7 mouse-x buckets, 7 mouse-y
/// buckets, 2 button logits.
inline constexpr int kStepWidth = kKeyCount + 2 * kMouseBuckets + 2;
inline constexpr int kDxOffset = kKeyCount;
inline constexpr int kDyOffset = kKeyCount + kMouseBuckets;
inline constexpr int kButtonOffset = kKeyCount + 2 * kMouseBuckets;

struct AgentConfig {
  int embed_dim = 64;
  int memory_window = 16;
  int chunk_len = net::kChunkLen;
  int key_count = kKeyCount;
  int mouse_buckets = kMouseBuckets;
  double cfg_scale = 1.0;
  double instruction_dropout = 0.1;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  int cell_dim = 8;
  int encoder_hidden = 128;
  int instr_dim = 64;
  int vocab_buckets = 1024;
  int trunk_hidden = 128;
  /// Committed actions fed to the policy; equals the session offset_k.
  int pending_ticks = 2;
  /// False for the no-language ablation: every instruction reads as empty.
  bool use_language = true;
  double goal_weight = 0.1;
  double grad_clip = 5.0;
  int batch_size = 32;

  void validate() const;
  std::string to_json() const;
  static AgentConfig from_json(const std::string& text);
  bool operator==(const AgentConfig&) const = default;
};

/// Flat parameter vector with a named layout. Matrices are column-major.
class Parameters {
 public:
  struct Block {
    std::string name;
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  };

  Parameters() = default;
  explicit Parameters(const AgentConfig& config);

  /// Scaled-uniform initialisation from config.seed.
  void initialise(std::uint64_t seed);

  const std::vector<Block>& layout() const { return layout_; }
  const Block& block(const std::string& name) const;
  Eigen::Map<Mat> mat(const std::string& name);
  Eigen::Map<const Mat> mat(const std::string& name) const;

  Vec& flat() { return flat_; }
  const Vec& flat() const { return flat_; }
  std::uint64_t hash() const;

 private:
  std::vector<Block> layout_;
  std::map<std::string, std::size_t> index_;
  Vec flat_;
};

struct PolicyLogits {
  int chunk_len = net::kChunkLen;
  Vec data;  // chunk_len x kStepWidth, step-major

  explicit PolicyLogits(int chunk = net::kChunkLen) : chunk_len(chunk), data(Vec::Zero(chunk * kStepWidth)) {}
  auto step(int s) { return data.segment(s * kStepWidth, kStepWidth); }
  auto step(int s) const { return data.segment(s * kStepWidth, kStepWidth); }
};

/// pi_cfg = cond + lambda * (cond - uncond), elementwise on every logit.
PolicyLogits cfg_combine(const PolicyLogits& cond, const PolicyLogits& uncond, double lambda);

/// Argmax decoding; action i is stamped first_tick + i.
std::vector<ActionEvent> decode_argmax(const PolicyLogits& logits, std::int64_t first_tick);
/// Sampling at temperature 1.
std::vector<ActionEvent> decode_sample(const PolicyLogits& logits, std::int64_t first_tick, std::mt19937_64& rng);

/// Ring of past state vectors; ticks strictly increase.
struct MemoryState {
  std::deque<std::pair<std::int64_t, Vec>> entries;
  void push(std::int64_t tick, const Vec& state, int window);
  std::size_t size() const { return entries.size(); }
};

struct ForwardOutput {
  PolicyLogits logits;
  Vec goal_prob;  // per chunk step
  MemoryState memory;
};

/// Per-step binary features of one action: keys, one-hot mouse buckets, buttons.
Vec action_features(const ActionEvent& a);

class Policy {
 public:
  explicit Policy(const AgentConfig& config);
  Policy(const AgentConfig& config, Parameters params);

  const AgentConfig& config() const { return config_; }
  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }

  Vec encode_observation(const Frame& frame) const;
  /// Batched encoding, one column per frame.
  Mat encode_observations(const std::vector<const Frame*>& frames) const;
  /// Lower-cased whitespace tokens hashed into the vocabulary and mean
  /// pooled; empty text (or a no-language agent) gives the null vector.
  Vec encode_instruction(const std::string& text) const;
  /// Feature vector for the actions committed to the next pending_ticks ticks.
  Vec pending_features(const std::vector<ActionEvent>& pending) const;

  /// The returned memory has `state` appended at the tick after the
  /// newest entry; the act loop pushes with real observation ticks instead.
  ForwardOutput forward(const Vec& state, const Vec& instruction, const MemoryState& memory,
                        const Vec& pending) const;

 private:
  AgentConfig config_;
  Parameters params_;
};

// ---------------------------------------------------------------------------
// Losses and gradients

/// One training input with memory already encoded (memory states are
/// constants for the gradient).
struct LossInput {
  Frame frame;
  std::vector<Vec> memory;  // oldest first
  std::string instruction;
  std::vector<ActionEvent> pending;
  std::vector<ActionEvent> targets;
  std::vector<bool> mask;
  std::vector<bool> goal_label;
  bool goal_known = false;
};

/// Sum over unmasked steps of key/button binary cross-entropy plus mouse
/// categorical cross-entropy.
double action_loss(const PolicyLogits& logits, const std::vector<ActionEvent>& targets,
                   const std::vector<bool>& mask);

/// action_loss plus goal_weight times the goal-head binary cross-entropy on
/// unmasked steps when the label is known. A fully masked chunk costs 0.
double bc_loss(const PolicyLogits& logits, const Vec& goal_logits, const LossInput& in, double goal_weight);

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

/// Mean loss over the batch and its analytic gradient.
LossGrad loss_and_grad(const Policy& policy, const std::vector<LossInput>& batch);
/// Mean loss only, through the same batched path.
double batch_loss(const Policy& policy, const std::vector<LossInput>& batch);

/// Loss inputs for a batch, memory encoded with the current parameters.
/// With `dropout_rng` each instruction is blanked with probability
/// instruction_dropout.
std::vector<LossInput> prepare_inputs(const Policy& policy, const std::vector<data::TrainingExample>& batch,
                                      std::mt19937_64* dropout_rng = nullptr);

// ---------------------------------------------------------------------------
// Training

struct StepMetrics {
  std::int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  bool rejected = false;
};

class Trainer {
 public:
  explicit Trainer(Policy& policy);

  /// One SGD-with-momentum step. Instructions are blanked with probability
  /// instruction_dropout per example.
  StepMetrics train_step(const std::vector<data::TrainingExample>& batch);

  std::int64_t step() const { return step_; }
  const Policy& policy() const { return policy_; }
  const Vec& velocity() const { return velocity_; }
  std::mt19937_64& rng() { return rng_; }

  void restore(std::int64_t step, Vec velocity, const std::string& rng_state);
  std::string rng_state() const;

 private:
  Policy& policy_;
  Vec velocity_;
  std::int64_t step_ = 0;
  std::mt19937_64 rng_;
};

struct TrainOptions {
  std::int64_t steps = 2000;
  /// Called every log_every steps (and on the last step).
  std::int64_t log_every = 100;
  std::function<void(const StepMetrics&)> on_log;
};

/// Trains on examples grouped by collection; `sampler` draws (collection,
/// example) pairs.
std::vector<StepMetrics> train(Trainer& trainer, const std::vector<std::vector<data::TrainingExample>>& collections,
                               data::DatasetSampler& sampler, const TrainOptions& options);

/// Checkpoint: "SMCK", version, config JSON, provenance, named layout, flat
/// parameters, then optimiser state.
void save_checkpoint(const std::string& path, const Policy& policy, const Trainer* trainer = nullptr,
                     std::string_view provenance = {});
struct Checkpoint {
  Policy policy;
  std::int64_t step = 0;
  Vec velocity;
  std::string rng_state;
  std::string provenance;
};
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Acting

struct ActOptions {
  double cfg_scale = 1.0;
  int offset_k = 2;
  bool sample = false;
  std::uint64_t seed = 0;
};

/// Session client running the policy: one forward (two with guidance) per
/// observation, the chunk scheduled offset_k ticks ahead, memory kept for
/// the episode and interrupts applied to the next forward.
class AgentClient : public net::Client {
 public:
  AgentClient(const Policy& policy, ActOptions options);

  void on_start(const net::SessionConfig& config, const std::string& instruction) override;
  std::optional<net::ActionChunk> on_observation(const Observation& obs) override;
  void on_instruction(const std::string& text) override;

  const std::string& instruction() const { return instruction_; }
  const MemoryState& memory() const { return memory_; }

 private:
  /// What this client expects to be applied at `tick` given its own chunks.
  ActionEvent assumed_action(std::int64_t tick) const;

  const Policy& policy_;
  ActOptions options_;
  std::string instruction_;
  Vec instruction_vec_;
  MemoryState memory_;
  std::map<std::int64_t, ActionEvent> sent_;
  std::mt19937_64 rng_;
};

}  // namespace sima::agent

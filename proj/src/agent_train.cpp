#include <cmath>
#include <limits>
#include <sstream>

#include "sima/agent.hpp"

namespace sima::agent {

Trainer::Trainer(Policy& policy)
    : policy_(policy),
      velocity_(Vec::Zero(policy.params().flat().size())),
      rng_(policy.config().seed ^ 0x7f4a7c159e3779b9ULL) {}

std::vector<LossInput> prepare_inputs(const Policy& policy, const std::vector<data::TrainingExample>& batch,
                                      std::mt19937_64* dropout_rng) {
  const auto& c = policy.config();
  std::vector<const Frame*> frames;
  for (const auto& ex : batch) {
    std::size_t keep = std::min(ex.memory.size(), static_cast<std::size_t>(c.memory_window));
    for (std::size_t i = ex.memory.size() - keep; i < ex.memory.size(); ++i) frames.push_back(&ex.memory[i]);
  }
  Mat encoded = policy.encode_observations(frames);

  std::vector<LossInput> out;
  out.reserve(batch.size());
  std::bernoulli_distribution drop(c.instruction_dropout);
  Eigen::Index col = 0;
  for (const auto& ex : batch) {
    if (static_cast<int>(ex.targets.size()) != c.chunk_len) throw Error("example chunk does not match chunk_len");
    LossInput in;
    in.frame = ex.frame;
    std::size_t keep = std::min(ex.memory.size(), static_cast<std::size_t>(c.memory_window));
    for (std::size_t i = 0; i < keep; ++i) in.memory.push_back(encoded.col(col++));
    in.instruction = ex.instruction;
    if (dropout_rng && c.instruction_dropout > 0.0 && drop(*dropout_rng)) in.instruction.clear();
    in.pending = ex.pending;
    in.targets = ex.targets;
    in.mask = ex.mask;
    in.goal_label = ex.goal_label;
    in.goal_known = ex.goal_known;
    out.push_back(std::move(in));
  }
  return out;
}

StepMetrics Trainer::train_step(const std::vector<data::TrainingExample>& batch) {
  const auto& c = policy_.config();
  StepMetrics m;
  m.step = step_;
  auto inputs = prepare_inputs(policy_, batch, &rng_);
  LossGrad lg;
  try {
    lg = loss_and_grad(policy_, inputs);
  } catch (const Error&) {
    m.rejected = true;
    m.loss = std::numeric_limits<double>::quiet_NaN();
    ++step_;
    return m;
  }
  m.loss = lg.loss;
  m.grad_norm = lg.grad.norm();
  if (!std::isfinite(m.loss) || !std::isfinite(m.grad_norm)) {
    m.rejected = true;
    ++step_;
    return m;
  }
  if (m.grad_norm > c.grad_clip) lg.grad *= c.grad_clip / m.grad_norm;
  velocity_ = c.momentum * velocity_ + lg.grad;
  policy_.params().flat() -= c.learning_rate * velocity_;
  ++step_;
  return m;
}

void Trainer::restore(std::int64_t step, Vec velocity, const std::string& rng_state) {
  if (velocity.size() != velocity_.size()) throw ConfigError("optimiser state does not match parameters");
  step_ = step;
  velocity_ = std::move(velocity);
  std::istringstream in(rng_state);
  in >> rng_;
  if (!in) throw ConfigError("bad optimiser rng state");
}

std::string Trainer::rng_state() const {
  std::ostringstream out;
  out << rng_;
  return out.str();
}

std::vector<StepMetrics> train(Trainer& trainer, const std::vector<std::vector<data::TrainingExample>>& collections,
                               data::DatasetSampler& sampler, const TrainOptions& options) {
  std::vector<StepMetrics> log;
  const int batch_size = trainer.policy().config().batch_size;
  std::vector<data::TrainingExample> batch;
  for (std::int64_t i = 0; i < options.steps; ++i) {
    batch.clear();
    for (int b = 0; b < batch_size; ++b) {
      auto [entry, index] = sampler.next();
      batch.push_back(collections.at(entry).at(index));
    }
    StepMetrics m = trainer.train_step(batch);
    if (m.rejected || (options.log_every > 0 && (i % options.log_every == 0)) || i + 1 == options.steps) {
      log.push_back(m);
      if (options.on_log) options.on_log(m);
    }
  }
  return log;
}

namespace {
constexpr std::uint16_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const Policy& policy, const Trainer* trainer,
                     std::string_view provenance) {
  ByteWriter w;
  w.raw(std::string_view("SMCK"));
  w.u16(kCheckpointVersion);
  w.str(policy.config().to_json());
  w.str(provenance);
  const auto& layout = policy.params().layout();
  w.u32(static_cast<std::uint32_t>(layout.size()));
  for (const auto& b : layout) {
    w.str(b.name);
    w.u32(static_cast<std::uint32_t>(b.rows));
    w.u32(static_cast<std::uint32_t>(b.cols));
  }
  const Vec& flat = policy.params().flat();
  w.u64(static_cast<std::uint64_t>(flat.size()));
  for (Eigen::Index i = 0; i < flat.size(); ++i) w.f64(flat[i]);
  w.boolean(trainer != nullptr);
  if (trainer) {
    w.i64(trainer->step());
    for (Eigen::Index i = 0; i < trainer->velocity().size(); ++i) w.f64(trainer->velocity()[i]);
    w.str(trainer->rng_state());
  }
  write_file_bytes(path, w.data());
}

Checkpoint load_checkpoint(const std::string& path) {
  auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), "SMCK")) {
    throw DecodeError(DecodeErrorKind::kBadMagic, 0, path + " is not a checkpoint");
  }
  std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw DecodeError(DecodeErrorKind::kBadVersion, 4, "checkpoint version " + std::to_string(version));
  }
  AgentConfig config = AgentConfig::from_json(r.str());
  std::string provenance = r.str();
  Parameters params(config);
  std::uint32_t blocks = r.u32();
  if (blocks != params.layout().size()) r.fail(DecodeErrorKind::kMalformed, "layout size");
  for (const auto& b : params.layout()) {
    std::string name = r.str();
    int rows = static_cast<int>(r.u32());
    int cols = static_cast<int>(r.u32());
    if (name != b.name || rows != b.rows || cols != b.cols) {
      r.fail(DecodeErrorKind::kMalformed, "layout block " + name + " does not match config");
    }
  }
  std::uint64_t n = r.u64();
  if (n != static_cast<std::uint64_t>(params.flat().size())) r.fail(DecodeErrorKind::kMalformed, "parameter count");
  for (Eigen::Index i = 0; i < params.flat().size(); ++i) params.flat()[i] = r.f64();
  Checkpoint ck{Policy(config, std::move(params)), 0, Vec(), "", std::move(provenance)};
  if (r.boolean()) {
    ck.step = r.i64();
    ck.velocity.resize(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < ck.velocity.size(); ++i) ck.velocity[i] = r.f64();
    ck.rng_state = r.str();
  }
  r.expect_done();
  return ck;
}

}  // namespace sima::agent

#include <cmath>

#include "json.hpp"
#include "sima/agent.hpp"

namespace sima::agent {

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// log(1 + e^x) without overflow.
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

int cell_index(const Cell& c) { return c.symbol * kColorCount + c.color; }

std::vector<int> token_ids(const std::string& text, int buckets) {
  std::vector<int> ids;
  for (const auto& tok : data::tokenize(text)) {
    ids.push_back(static_cast<int>(fnv1a64(tok) % static_cast<std::uint64_t>(buckets)));
  }
  return ids;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void AgentConfig::validate() const {
  if (embed_dim <= 0 || memory_window < 0 || chunk_len <= 0 || cell_dim <= 0 || encoder_hidden <= 0 ||
      instr_dim <= 0 || vocab_buckets <= 0 || trunk_hidden <= 0 || pending_ticks < 0 || batch_size <= 0) {
    throw ConfigError("agent dimensions must be positive");
  }
  if (key_count != kKeyCount || mouse_buckets != kMouseBuckets) {
    throw ConfigError("key_count and mouse_buckets are fixed by the action space");
  }
  if (!(instruction_dropout >= 0.0 && instruction_dropout < 1.0)) {
    throw ConfigError("instruction_dropout must be in [0, 1)");
  }
  if (!(cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be >= 0");
  if (!(learning_rate > 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("learning_rate must be positive and momentum in [0, 1)");
  }
  if (!(goal_weight >= 0.0) || !(grad_clip > 0.0)) throw ConfigError("goal_weight and grad_clip out of range");
}

std::string AgentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["embed_dim"] = embed_dim;
  j["memory_window"] = memory_window;
  j["chunk_len"] = chunk_len;
  j["key_count"] = key_count;
  j["mouse_buckets"] = mouse_buckets;
  j["cfg_scale"] = cfg_scale;
  j["instruction_dropout"] = instruction_dropout;
  j["learning_rate"] = learning_rate;
  j["momentum"] = momentum;
  j["seed"] = seed;
  j["cell_dim"] = cell_dim;
  j["encoder_hidden"] = encoder_hidden;
  j["instr_dim"] = instr_dim;
  j["vocab_buckets"] = vocab_buckets;
  j["trunk_hidden"] = trunk_hidden;
  j["pending_ticks"] = pending_ticks;
  j["use_language"] = use_language;
  j["goal_weight"] = goal_weight;
  j["grad_clip"] = grad_clip;
  j["batch_size"] = batch_size;
  return j.dump();
}

AgentConfig AgentConfig::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("agent config is not a JSON object");
  AgentConfig c;
  try {
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.memory_window = j.value("memory_window", c.memory_window);
    c.chunk_len = j.value("chunk_len", c.chunk_len);
    c.key_count = j.value("key_count", c.key_count);
    c.mouse_buckets = j.value("mouse_buckets", c.mouse_buckets);
    c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
    c.instruction_dropout = j.value("instruction_dropout", c.instruction_dropout);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    c.cell_dim = j.value("cell_dim", c.cell_dim);
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.instr_dim = j.value("instr_dim", c.instr_dim);
    c.vocab_buckets = j.value("vocab_buckets", c.vocab_buckets);
    c.trunk_hidden = j.value("trunk_hidden", c.trunk_hidden);
    c.pending_ticks = j.value("pending_ticks", c.pending_ticks);
    c.use_language = j.value("use_language", c.use_language);
    c.goal_weight = j.value("goal_weight", c.goal_weight);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.batch_size = j.value("batch_size", c.batch_size);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("agent config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

Parameters::Parameters(const AgentConfig& c) {
  c.validate();
  const int D = c.embed_dim;
  const int I = c.instr_dim;
  auto add = [&](const std::string& name, int rows, int cols) {
    Block b{name, 0, rows, cols};
    b.offset = layout_.empty() ? 0 : layout_.back().offset + layout_.back().size();
    index_[name] = layout_.size();
    layout_.push_back(b);
  };
  add("cell_embed", c.cell_dim, kSymbolCount * kColorCount);
  add("enc_w1", c.encoder_hidden, kFrameCells * c.cell_dim);
  add("enc_b1", c.encoder_hidden, 1);
  add("enc_w2", D, c.encoder_hidden);
  add("enc_b2", D, 1);
  add("tok_embed", I, c.vocab_buckets);
  add("null_instr", I, 1);
  add("pend_w", D, c.pending_ticks * kStepWidth);
  add("pend_b", D, 1);
  add("gate_w", D, I);
  add("gate_b", D, 1);
  add("att_q", D, D + I);
  add("att_k", D, D);
  add("att_v", D, D);
  add("trunk_w1", c.trunk_hidden, 3 * D + I);
  add("trunk_b1", c.trunk_hidden, 1);
  add("trunk_w2", c.trunk_hidden, c.trunk_hidden);
  add("trunk_b2", c.trunk_hidden, 1);
  add("head_w", c.chunk_len * kStepWidth, c.trunk_hidden);
  add("head_b", c.chunk_len * kStepWidth, 1);
  add("goal_w", c.chunk_len, c.trunk_hidden);
  add("goal_b", c.chunk_len, 1);
  flat_ = Vec::Zero(static_cast<Eigen::Index>(layout_.back().offset + layout_.back().size()));
  initialise(c.seed);
}

void Parameters::initialise(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const auto& b : layout_) {
    double scale;
    if (b.cols == 1) {
      scale = b.name == "null_instr" ? 0.5 : 0.0;
    } else if (b.name == "cell_embed" || b.name == "tok_embed") {
      scale = 1.0;
    } else {
      scale = std::sqrt(6.0 / (b.rows + b.cols));
      if (b.name == "head_w" || b.name == "goal_w") scale *= 0.1;
    }
    std::uniform_real_distribution<double> u(-scale, scale);
    for (std::size_t i = 0; i < b.size(); ++i) {
      flat_[static_cast<Eigen::Index>(b.offset + i)] = scale == 0.0 ? 0.0 : u(rng);
    }
  }
}

const Parameters::Block& Parameters::block(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no parameter block '" + name + "'");
  return layout_[it->second];
}

Eigen::Map<Mat> Parameters::mat(const std::string& name) {
  const Block& b = block(name);
  return Eigen::Map<Mat>(flat_.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<const Mat> Parameters::mat(const std::string& name) const {
  const Block& b = block(name);
  return Eigen::Map<const Mat>(flat_.data() + b.offset, b.rows, b.cols);
}

std::uint64_t Parameters::hash() const {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(flat_.data()),
                                               static_cast<std::size_t>(flat_.size()) * sizeof(double)));
}

// ---------------------------------------------------------------------------
// Logits

PolicyLogits cfg_combine(const PolicyLogits& cond, const PolicyLogits& uncond, double lambda) {
  if (cond.chunk_len != uncond.chunk_len || cond.data.size() != uncond.data.size()) {
    throw Error("cfg_combine: logits shapes differ");
  }
  PolicyLogits out(cond.chunk_len);
  out.data = cond.data + lambda * (cond.data - uncond.data);
  return out;
}

std::vector<ActionEvent> decode_argmax(const PolicyLogits& logits, std::int64_t first_tick) {
  std::vector<ActionEvent> out;
  for (int s = 0; s < logits.chunk_len; ++s) {
    auto l = logits.step(s);
    ActionEvent a;
    a.tick = first_tick + s;
    for (int k = 0; k < kKeyCount; ++k) a.keys.set(static_cast<Key>(k), l[k] > 0.0);
    Eigen::Index dx = 0, dy = 0;
    l.segment(kDxOffset, kMouseBuckets).maxCoeff(&dx);
    l.segment(kDyOffset, kMouseBuckets).maxCoeff(&dy);
    a.mouse_dx = static_cast<std::int8_t>(dx - kMouseMax);
    a.mouse_dy = static_cast<std::int8_t>(dy - kMouseMax);
    a.left_button = l[kButtonOffset] > 0.0;
    a.right_button = l[kButtonOffset + 1] > 0.0;
    out.push_back(a);
  }
  return out;
}

std::vector<ActionEvent> decode_sample(const PolicyLogits& logits, std::int64_t first_tick, std::mt19937_64& rng) {
  std::vector<ActionEvent> out;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto categorical = [&](auto seg) {
    std::vector<double> w(static_cast<std::size_t>(seg.size()));
    double mx = seg.maxCoeff();
    for (Eigen::Index i = 0; i < seg.size(); ++i) w[static_cast<std::size_t>(i)] = std::exp(seg[i] - mx);
    std::discrete_distribution<int> d(w.begin(), w.end());
    return d(rng);
  };
  for (int s = 0; s < logits.chunk_len; ++s) {
    auto l = logits.step(s);
    ActionEvent a;
    a.tick = first_tick + s;
    for (int k = 0; k < kKeyCount; ++k) a.keys.set(static_cast<Key>(k), u(rng) < sigmoid(l[k]));
    a.mouse_dx = static_cast<std::int8_t>(categorical(l.segment(kDxOffset, kMouseBuckets)) - kMouseMax);
    a.mouse_dy = static_cast<std::int8_t>(categorical(l.segment(kDyOffset, kMouseBuckets)) - kMouseMax);
    a.left_button = u(rng) < sigmoid(l[kButtonOffset]);
    a.right_button = u(rng) < sigmoid(l[kButtonOffset + 1]);
    out.push_back(a);
  }
  return out;
}

void MemoryState::push(std::int64_t tick, const Vec& state, int window) {
  if (!entries.empty() && tick <= entries.back().first) throw Error("memory ticks must increase");
  if (window <= 0) return;
  entries.emplace_back(tick, state);
  while (entries.size() > static_cast<std::size_t>(window)) entries.pop_front();
}

Vec action_features(const ActionEvent& a) {
  Vec f = Vec::Zero(kStepWidth);
  for (int k = 0; k < kKeyCount; ++k) f[k] = a.keys.has(static_cast<Key>(k)) ? 1.0 : 0.0;
  f[kDxOffset + a.mouse_dx + kMouseMax] = 1.0;
  f[kDyOffset + a.mouse_dy + kMouseMax] = 1.0;
  f[kButtonOffset] = a.left_button ? 1.0 : 0.0;
  f[kButtonOffset + 1] = a.right_button ? 1.0 : 0.0;
  return f;
}

// ---------------------------------------------------------------------------
// Network

namespace {

struct EncoderCache {
  Mat x, u1, h1, s;
};

Mat frame_inputs(const Parameters& p, const std::vector<const Frame*>& frames, int cell_dim) {
  auto emb = p.mat("cell_embed");
  Mat x(kFrameCells * cell_dim, static_cast<Eigen::Index>(frames.size()));
  for (std::size_t b = 0; b < frames.size(); ++b) {
    for (int c = 0; c < kFrameCells; ++c) {
      x.block(c * cell_dim, static_cast<Eigen::Index>(b), cell_dim, 1) =
          emb.col(cell_index(frames[b]->cells[static_cast<std::size_t>(c)]));
    }
  }
  return x;
}

EncoderCache encode_frames(const Parameters& p, const std::vector<const Frame*>& frames, int cell_dim) {
  EncoderCache e;
  e.x = frame_inputs(p, frames, cell_dim);
  e.u1 = (p.mat("enc_w1") * e.x).colwise() + p.mat("enc_b1").col(0);
  e.h1 = e.u1.cwiseMax(0.0);
  e.s = ((p.mat("enc_w2") * e.h1).colwise() + p.mat("enc_b2").col(0)).array().tanh().matrix();
  return e;
}

struct HeadCache {
  Mat S, G, PF, P, gamma, C, Q, SG, xbar, att, Z, T1, T2, L, GL;
  std::vector<Mat> X;  // per example: memory columns then the current state
  std::vector<Mat> K;
  std::vector<Vec> alpha;
};

/// Instruction vectors, attention, trunk and heads for a batch of states.
HeadCache run_head(const Parameters& p, const AgentConfig& c, const Mat& S, const Mat& G, const Mat& PF,
                   const std::vector<std::vector<Vec>>& memories) {
  HeadCache h;
  const int D = c.embed_dim;
  const auto B = S.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  h.S = S;
  h.G = G;
  h.PF = PF;
  h.P = ((p.mat("pend_w") * PF).colwise() + p.mat("pend_b").col(0)).array().tanh().matrix();
  h.gamma = ((p.mat("gate_w") * G).colwise() + p.mat("gate_b").col(0)).unaryExpr([](double v) { return sigmoid(v); });
  h.C = S.cwiseProduct(h.gamma);
  h.SG.resize(D + c.instr_dim, B);
  h.SG << S, G;
  h.Q = p.mat("att_q") * h.SG;
  h.xbar.resize(D, B);
  auto wk = p.mat("att_k");
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& mem = memories[static_cast<std::size_t>(b)];
    Mat X(D, static_cast<Eigen::Index>(mem.size()) + 1);
    for (std::size_t j = 0; j < mem.size(); ++j) X.col(static_cast<Eigen::Index>(j)) = mem[j];
    X.col(X.cols() - 1) = S.col(b);
    Mat K = wk * X;
    Vec a = (K.transpose() * h.Q.col(b)) * scale;
    a = (a.array() - a.maxCoeff()).exp().matrix();
    a /= a.sum();
    h.xbar.col(b) = X * a;
    h.X.push_back(std::move(X));
    h.K.push_back(std::move(K));
    h.alpha.push_back(std::move(a));
  }
  h.att = p.mat("att_v") * h.xbar;
  h.Z.resize(3 * D + c.instr_dim, B);
  h.Z << h.C, h.att, G, h.P;
  h.T1 = ((p.mat("trunk_w1") * h.Z).colwise() + p.mat("trunk_b1").col(0)).cwiseMax(0.0);
  h.T2 = ((p.mat("trunk_w2") * h.T1).colwise() + p.mat("trunk_b2").col(0)).cwiseMax(0.0);
  h.L = (p.mat("head_w") * h.T2).colwise() + p.mat("head_b").col(0);
  h.GL = (p.mat("goal_w") * h.T2).colwise() + p.mat("goal_b").col(0);
  return h;
}

void check_finite(const Mat& m, const char* what, const Parameters& p) {
  if (!m.allFinite()) {
    throw Error(std::string("non-finite ") + what + " (parameter norm " + std::to_string(p.flat().norm()) + ")");
  }
}

}  // namespace

Policy::Policy(const AgentConfig& config) : config_(config), params_(config) {}

Policy::Policy(const AgentConfig& config, Parameters params) : config_(config), params_(std::move(params)) {
  config_.validate();
  Parameters reference(config_);
  if (reference.flat().size() != params_.flat().size()) throw ConfigError("parameters do not match config");
}

Vec Policy::encode_observation(const Frame& frame) const {
  return encode_frames(params_, {&frame}, config_.cell_dim).s.col(0);
}

Mat Policy::encode_observations(const std::vector<const Frame*>& frames) const {
  if (frames.empty()) return Mat(config_.embed_dim, 0);
  return encode_frames(params_, frames, config_.cell_dim).s;
}

Vec Policy::encode_instruction(const std::string& text) const {
  auto ids = config_.use_language ? token_ids(text, config_.vocab_buckets) : std::vector<int>{};
  if (ids.empty()) return params_.mat("null_instr").col(0);
  auto tok = params_.mat("tok_embed");
  Vec v = Vec::Zero(config_.instr_dim);
  for (int id : ids) v += tok.col(id);
  return v / static_cast<double>(ids.size());
}

Vec Policy::pending_features(const std::vector<ActionEvent>& pending) const {
  const int k = config_.pending_ticks;
  Vec f = Vec::Zero(k * kStepWidth);
  // Right-aligned: the last entry is the action just before the chunk.
  const int n = static_cast<int>(pending.size());
  for (int i = 0; i < std::min(k, n); ++i) {
    f.segment((k - 1 - i) * kStepWidth, kStepWidth) = action_features(pending[static_cast<std::size_t>(n - 1 - i)]);
  }
  return f;
}

ForwardOutput Policy::forward(const Vec& state, const Vec& instruction, const MemoryState& memory,
                              const Vec& pending) const {
  std::vector<Vec> mem;
  for (const auto& [tick, v] : memory.entries) mem.push_back(v);
  HeadCache h = run_head(params_, config_, state, instruction, pending, {mem});
  check_finite(h.L, "logits", params_);
  ForwardOutput out{PolicyLogits(config_.chunk_len), Vec(), memory};
  out.logits.data = h.L.col(0);
  out.goal_prob = h.GL.col(0).unaryExpr([](double v) { return sigmoid(v); });
  std::int64_t tick = memory.entries.empty() ? 0 : memory.entries.back().first + 1;
  out.memory.push(tick, state, config_.memory_window);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

/// Loss of one example and, if requested, its gradient w.r.t. the action
/// and goal logits.
double example_loss(const Eigen::Ref<const Vec>& L, const Eigen::Ref<const Vec>& GL, const LossInput& in,
                    double goal_weight, int chunk_len, Vec* dL, Vec* dGL) {
  if (static_cast<int>(in.targets.size()) != chunk_len || static_cast<int>(in.mask.size()) != chunk_len) {
    throw Error("target chunk does not match chunk_len");
  }
  double loss = 0.0;
  if (dL) dL->setZero(L.size());
  if (dGL) dGL->setZero(GL.size());
  for (int s = 0; s < chunk_len; ++s) {
    if (!in.mask[static_cast<std::size_t>(s)]) continue;
    const ActionEvent& t = in.targets[static_cast<std::size_t>(s)];
    const int base = s * kStepWidth;
    auto binary = [&](int i, bool y) {
      double l = L[base + i];
      loss += softplus(l) - (y ? l : 0.0);
      if (dL) (*dL)[base + i] = sigmoid(l) - (y ? 1.0 : 0.0);
    };
    for (int k = 0; k < kKeyCount; ++k) binary(k, t.keys.has(static_cast<Key>(k)));
    binary(kButtonOffset, t.left_button);
    binary(kButtonOffset + 1, t.right_button);
    auto categorical = [&](int off, int target) {
      auto seg = L.segment(base + off, kMouseBuckets);
      double mx = seg.maxCoeff();
      double lse = mx + std::log((seg.array() - mx).exp().sum());
      loss += lse - seg[target];
      if (dL) {
        for (int i = 0; i < kMouseBuckets; ++i) {
          (*dL)[base + off + i] = std::exp(seg[i] - lse) - (i == target ? 1.0 : 0.0);
        }
      }
    };
    categorical(kDxOffset, t.mouse_dx + kMouseMax);
    categorical(kDyOffset, t.mouse_dy + kMouseMax);
    if (in.goal_known && goal_weight > 0.0) {
      bool y = in.goal_label[static_cast<std::size_t>(s)];
      double g = GL[s];
      loss += goal_weight * (softplus(g) - (y ? g : 0.0));
      if (dGL) (*dGL)[s] = goal_weight * (sigmoid(g) - (y ? 1.0 : 0.0));
    }
  }
  return loss;
}

struct BatchState {
  EncoderCache enc;
  HeadCache head;
  std::vector<std::vector<int>> tokens;
};

BatchState run_batch(const Policy& policy, const std::vector<LossInput>& batch) {
  const auto& c = policy.config();
  const auto& p = policy.params();
  BatchState st;
  std::vector<const Frame*> frames;
  for (const auto& in : batch) frames.push_back(&in.frame);
  st.enc = encode_frames(p, frames, c.cell_dim);
  const auto B = static_cast<Eigen::Index>(batch.size());
  Mat G(c.instr_dim, B);
  Mat PF(c.pending_ticks * kStepWidth, B);
  std::vector<std::vector<Vec>> memories;
  auto tok = p.mat("tok_embed");
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& in = batch[static_cast<std::size_t>(b)];
    auto ids = c.use_language ? token_ids(in.instruction, c.vocab_buckets) : std::vector<int>{};
    if (ids.empty()) {
      G.col(b) = p.mat("null_instr").col(0);
    } else {
      Vec v = Vec::Zero(c.instr_dim);
      for (int id : ids) v += tok.col(id);
      G.col(b) = v / static_cast<double>(ids.size());
    }
    st.tokens.push_back(std::move(ids));
    PF.col(b) = policy.pending_features(in.pending);
    std::vector<Vec> mem = in.memory;
    if (static_cast<int>(mem.size()) > c.memory_window) {
      mem.erase(mem.begin(), mem.end() - c.memory_window);
    }
    memories.push_back(std::move(mem));
  }
  st.head = run_head(p, c, st.enc.s, G, PF, memories);
  return st;
}

}  // namespace

double action_loss(const PolicyLogits& logits, const std::vector<ActionEvent>& targets, const std::vector<bool>& mask) {
  LossInput in;
  in.targets = targets;
  in.mask = mask;
  Vec gl = Vec::Zero(logits.chunk_len);
  return example_loss(logits.data, gl, in, 0.0, logits.chunk_len, nullptr, nullptr);
}

double bc_loss(const PolicyLogits& logits, const Vec& goal_logits, const LossInput& in, double goal_weight) {
  return example_loss(logits.data, goal_logits, in, goal_weight, logits.chunk_len, nullptr, nullptr);
}

double batch_loss(const Policy& policy, const std::vector<LossInput>& batch) {
  if (batch.empty()) throw Error("empty batch");
  BatchState st = run_batch(policy, batch);
  const auto& c = policy.config();
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto i = static_cast<Eigen::Index>(b);
    total += example_loss(st.head.L.col(i), st.head.GL.col(i), batch[b], c.goal_weight, c.chunk_len, nullptr, nullptr);
  }
  return total / static_cast<double>(batch.size());
}

LossGrad loss_and_grad(const Policy& policy, const std::vector<LossInput>& batch) {
  if (batch.empty()) throw Error("empty batch");
  const auto& c = policy.config();
  const auto& p = policy.params();
  const int D = c.embed_dim;
  const int I = c.instr_dim;
  BatchState st = run_batch(policy, batch);
  HeadCache& h = st.head;
  check_finite(h.L, "logits", p);
  const auto B = static_cast<Eigen::Index>(batch.size());
  const double inv_b = 1.0 / static_cast<double>(B);

  LossGrad out;
  Mat dL(h.L.rows(), B), dGL(h.GL.rows(), B);
  for (Eigen::Index b = 0; b < B; ++b) {
    Vec gl, ggl;
    out.loss += example_loss(h.L.col(b), h.GL.col(b), batch[static_cast<std::size_t>(b)], c.goal_weight,
                             c.chunk_len, &gl, &ggl);
    dL.col(b) = gl * inv_b;
    dGL.col(b) = ggl * inv_b;
  }
  out.loss *= inv_b;

  Parameters grad = p;
  grad.flat().setZero();
  auto g = [&](const char* name) { return grad.mat(name); };

  // Heads and trunk.
  g("head_w") = dL * h.T2.transpose();
  g("head_b") = dL.rowwise().sum();
  g("goal_w") = dGL * h.T2.transpose();
  g("goal_b") = dGL.rowwise().sum();
  Mat dT2 = p.mat("head_w").transpose() * dL + p.mat("goal_w").transpose() * dGL;
  Mat dV2 = dT2.cwiseProduct((h.T2.array() > 0.0).cast<double>().matrix());
  g("trunk_w2") = dV2 * h.T1.transpose();
  g("trunk_b2") = dV2.rowwise().sum();
  Mat dT1 = p.mat("trunk_w2").transpose() * dV2;
  Mat dV1 = dT1.cwiseProduct((h.T1.array() > 0.0).cast<double>().matrix());
  g("trunk_w1") = dV1 * h.Z.transpose();
  g("trunk_b1") = dV1.rowwise().sum();
  Mat dZ = p.mat("trunk_w1").transpose() * dV1;
  Mat dC = dZ.topRows(D);
  Mat dAtt = dZ.middleRows(D, D);
  Mat dG = dZ.middleRows(2 * D, I);
  Mat dP = dZ.bottomRows(D);

  // Pending actions.
  Mat dUp = dP.cwiseProduct((1.0 - h.P.array().square()).matrix());
  g("pend_w") = dUp * h.PF.transpose();
  g("pend_b") = dUp.rowwise().sum();

  // Gate.
  Mat dS = dC.cwiseProduct(h.gamma);
  Mat dUg = dC.cwiseProduct(h.S).cwiseProduct((h.gamma.array() * (1.0 - h.gamma.array())).matrix());
  g("gate_w") = dUg * h.G.transpose();
  g("gate_b") = dUg.rowwise().sum();
  dG += p.mat("gate_w").transpose() * dUg;

  // Attention.
  g("att_v") = dAtt * h.xbar.transpose();
  Mat dXbar = p.mat("att_v").transpose() * dAtt;
  Mat dQ(D, B);
  Mat dWk = Mat::Zero(D, D);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  auto wk = p.mat("att_k");
  for (Eigen::Index b = 0; b < B; ++b) {
    const Mat& X = h.X[static_cast<std::size_t>(b)];
    const Mat& K = h.K[static_cast<std::size_t>(b)];
    const Vec& a = h.alpha[static_cast<std::size_t>(b)];
    const Eigen::Index last = X.cols() - 1;
    Vec dAlpha = X.transpose() * dXbar.col(b);
    dS.col(b) += a[last] * dXbar.col(b);
    Vec dScore = a.cwiseProduct((dAlpha.array() - a.dot(dAlpha)).matrix());
    dQ.col(b) = K * dScore * scale;
    Mat dK = h.Q.col(b) * dScore.transpose() * scale;
    dWk += dK * X.transpose();
    dS.col(b) += wk.transpose() * dK.col(last);
  }
  g("att_k") = dWk;
  g("att_q") = dQ * h.SG.transpose();
  Mat dSG = p.mat("att_q").transpose() * dQ;
  dS += dSG.topRows(D);
  dG += dSG.bottomRows(I);

  // Observation encoder.
  Mat dU2 = dS.cwiseProduct((1.0 - st.enc.s.array().square()).matrix());
  g("enc_w2") = dU2 * st.enc.h1.transpose();
  g("enc_b2") = dU2.rowwise().sum();
  Mat dH1 = p.mat("enc_w2").transpose() * dU2;
  Mat dU1 = dH1.cwiseProduct((st.enc.u1.array() > 0.0).cast<double>().matrix());
  g("enc_w1") = dU1 * st.enc.x.transpose();
  g("enc_b1") = dU1.rowwise().sum();
  Mat dX = p.mat("enc_w1").transpose() * dU1;
  auto dEmb = grad.mat("cell_embed");
  for (Eigen::Index b = 0; b < B; ++b) {
    const Frame& f = batch[static_cast<std::size_t>(b)].frame;
    for (int cell = 0; cell < kFrameCells; ++cell) {
      dEmb.col(cell_index(f.cells[static_cast<std::size_t>(cell)])) += dX.block(cell * c.cell_dim, b, c.cell_dim, 1);
    }
  }

  // Instruction embedding.
  auto dTok = grad.mat("tok_embed");
  auto dNull = grad.mat("null_instr");
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& ids = st.tokens[static_cast<std::size_t>(b)];
    if (ids.empty()) {
      dNull.col(0) += dG.col(b);
    } else {
      for (int id : ids) dTok.col(id) += dG.col(b) / static_cast<double>(ids.size());
    }
  }

  out.grad = std::move(grad.flat());
  return out;
}

}  // namespace sima::agent

#include "sima/agent.hpp"

namespace sima::agent {

AgentClient::AgentClient(const Policy& policy, ActOptions options)
    : policy_(policy), options_(options), rng_(options.seed) {
  if (!(options_.cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be >= 0");
  instruction_vec_ = policy_.encode_instruction("");
}

void AgentClient::on_start(const net::SessionConfig& config, const std::string& instruction) {
  options_.offset_k = config.offset_k;
  memory_ = {};
  sent_.clear();
  on_instruction(instruction);
}

void AgentClient::on_instruction(const std::string& text) {
  instruction_ = text;
  instruction_vec_ = policy_.encode_instruction(text);
}

ActionEvent AgentClient::assumed_action(std::int64_t tick) const {
  auto it = sent_.upper_bound(tick);
  if (it == sent_.begin()) return noop_action(tick);
  --it;
  return it->first == tick ? it->second : held_action(it->second, tick);
}

std::optional<net::ActionChunk> AgentClient::on_observation(const Observation& obs) {
  const std::int64_t o = obs.tick;
  const int k = options_.offset_k;
  Vec state = policy_.encode_observation(obs.frame);
  std::vector<ActionEvent> pending;
  for (std::int64_t t = o; t < o + k; ++t) pending.push_back(assumed_action(t));
  Vec pf = policy_.pending_features(pending);

  PolicyLogits logits = policy_.forward(state, instruction_vec_, memory_, pf).logits;
  if (options_.cfg_scale != 0.0 && policy_.config().use_language) {
    Vec null = policy_.encode_instruction("");
    PolicyLogits uncond = policy_.forward(state, null, memory_, pf).logits;
    logits = cfg_combine(logits, uncond, options_.cfg_scale);
  }
  auto actions = options_.sample ? decode_sample(logits, o + k, rng_) : decode_argmax(logits, o + k);

  // A newer chunk replaces everything from its first tick on.
  sent_.erase(sent_.lower_bound(o + k), sent_.end());
  for (const auto& a : actions) sent_[a.tick] = a;
  sent_.erase(sent_.begin(), sent_.lower_bound(o - 1));
  memory_.push(o, state, policy_.config().memory_window);
  return net::ActionChunk{o, std::move(actions)};
}

}  // namespace sima::agent

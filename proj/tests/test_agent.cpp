#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "doctest.h"
#include "sima/agent.hpp"
#include "sima/evalharness.hpp"
#include "sima/worlds.hpp"
#include "support.hpp"

using namespace sima;
using namespace sima::agent;

namespace {

AgentConfig small_config(std::uint64_t seed = 1) {
  AgentConfig c;
  c.embed_dim = 12;
  c.encoder_hidden = 16;
  c.cell_dim = 3;
  c.instr_dim = 10;
  c.vocab_buckets = 64;
  c.trunk_hidden = 16;
  c.memory_window = 3;
  c.seed = seed;
  c.batch_size = 4;
  return c;
}

/// Expert examples from a couple of tasks, so targets and goals are real.
std::vector<data::TrainingExample> expert_examples(int memory = 3) {
  std::vector<data::TrainingExample> out;
  for (const char* id : {"playroom/0/lift-the-green-cube", "harvest/0/collect-wood"}) {
    auto r = data::scripted_expert(worlds::find_task(id), 0);
    auto seg = data::segments_of(r.trajectory, "t")[0];
    data::ExampleConfig ec;
    ec.stride = 1;
    ec.memory = memory;
    for (auto& e : data::make_examples(r.trajectory, seg, ec)) out.push_back(std::move(e));
  }
  REQUIRE(out.size() >= 8);
  return out;
}

PolicyLogits random_logits(std::mt19937_64& rng, double scale = 3.0) {
  std::normal_distribution<double> n(0.0, scale);
  PolicyLogits l;
  for (Eigen::Index i = 0; i < l.data.size(); ++i) l.data[i] = n(rng);
  return l;
}

}  // namespace

TEST_CASE("guidance combines logits elementwise") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto cond = random_logits(rng);
    auto uncond = random_logits(rng);
    const double lambda = (trial % 5) * 0.75;
    auto out = cfg_combine(cond, uncond, lambda);
    for (Eigen::Index i = 0; i < out.data.size(); ++i) {
      CHECK(out.data[i] == doctest::Approx(cond.data[i] + lambda * (cond.data[i] - uncond.data[i])));
    }
    CHECK(cfg_combine(cond, uncond, 0.0).data == cond.data);
    CHECK(cfg_combine(cond, cond, lambda).data == cond.data);
  }
  // Worked example: cond 2, uncond 1, lambda 1.5 -> 3.5.
  PolicyLogits c, u;
  c.data.setConstant(2.0);
  u.data.setConstant(1.0);
  CHECK(cfg_combine(c, u, 1.5).data[7] == doctest::Approx(3.5));
  CHECK_THROWS_AS(cfg_combine(PolicyLogits(4), PolicyLogits(8), 1.0), Error);
}

TEST_CASE("argmax decoding reads signs and bucket maxima") {
  PolicyLogits l(2);
  l.data.setConstant(-1.0);
  l.step(0)[static_cast<int>(Key::kW)] = 0.5;
  l.step(0)[kDxOffset + 0] = 4.0;  // dx = -3
  l.step(0)[kDyOffset + 6] = 4.0;  // dy = +3
  l.step(1)[kButtonOffset] = 2.0;
  auto a = decode_argmax(l, 10);
  REQUIRE(a.size() == 2);
  CHECK(a[0].tick == 10);
  CHECK(a[0].keys == KeySet{Key::kW});
  CHECK(a[0].mouse_dx == -3);
  CHECK(a[0].mouse_dy == 3);
  CHECK(a[1].tick == 11);
  CHECK(a[1].left_button);
  CHECK_FALSE(a[1].right_button);
}

TEST_CASE("action loss closed forms") {
  const double ln2 = std::numbers::ln2;
  const double ln7 = std::log(7.0);
  std::vector<ActionEvent> targets;
  for (int i = 0; i < net::kChunkLen; ++i) targets.push_back(noop_action(i));

  SUBCASE("zero logits cost 18 ln 2 + 2 ln 7 per unmasked step") {
    PolicyLogits zero;
    std::vector<bool> mask = {true, true, true, false, false, false, false, false};
    CHECK(action_loss(zero, targets, mask) == doctest::Approx(3 * (18 * ln2 + 2 * ln7)));
  }
  SUBCASE("a fully masked chunk costs nothing") {
    std::mt19937_64 rng(1);
    CHECK(action_loss(random_logits(rng), targets, std::vector<bool>(8, false)) == 0.0);
  }
  SUBCASE("confident correct logits cost almost nothing") {
    PolicyLogits l;
    for (int s = 0; s < 8; ++s) {
      auto st = l.step(s);
      st.setConstant(-40.0);
      st[kDxOffset + kMouseMax] = 40.0;
      st[kDyOffset + kMouseMax] = 40.0;
    }
    CHECK(action_loss(l, targets, std::vector<bool>(8, true)) < 1e-12);
  }
  SUBCASE("saturated wrong logits stay finite and grow linearly") {
    PolicyLogits l;
    std::vector<bool> one = {true, false, false, false, false, false, false, false};
    l.step(0)[static_cast<int>(Key::kW)] = 1000.0;  // wrong: target has no keys
    double loss = action_loss(l, targets, one);
    REQUIRE(std::isfinite(loss));
    CHECK(loss == doctest::Approx(1000.0 + 17 * ln2 + 2 * ln7));
  }
}

TEST_CASE("goal head adds weighted binary cross-entropy on known labels") {
  LossInput in;
  for (int i = 0; i < 8; ++i) in.targets.push_back(noop_action(i));
  in.mask = std::vector<bool>(8, true);
  in.goal_label = std::vector<bool>(8, true);
  PolicyLogits zero;
  Vec gl = Vec::Zero(8);
  const double base = action_loss(zero, in.targets, in.mask);
  CHECK(bc_loss(zero, gl, in, 0.5) == doctest::Approx(base));
  in.goal_known = true;
  CHECK(bc_loss(zero, gl, in, 0.5) == doctest::Approx(base + 0.5 * 8 * std::numbers::ln2));
}

TEST_CASE("analytic gradient matches central differences") {
  Policy policy(small_config(3));
  auto examples = expert_examples();
  std::vector<data::TrainingExample> batch(examples.begin(), examples.begin() + 6);
  auto inputs = prepare_inputs(policy, batch);
  inputs[0].goal_known = true;
  auto lg = loss_and_grad(policy, inputs);
  CHECK(lg.loss == doctest::Approx(batch_loss(policy, inputs)));

  std::mt19937_64 rng(17);
  Vec& theta = policy.params().flat();
  std::uniform_int_distribution<Eigen::Index> pick(0, theta.size() - 1);
  const double h = 1e-5;
  int checked = 0;
  for (const auto& block : policy.params().layout()) {
    // At least one coordinate per named block, then random ones.
    for (int rep = 0; rep < 2; ++rep) {
      Eigen::Index i = static_cast<Eigen::Index>(block.offset) +
                       static_cast<Eigen::Index>(rng() % block.size());
      const double keep = theta[i];
      theta[i] = keep + h;
      const double up = batch_loss(policy, inputs);
      theta[i] = keep - h;
      const double down = batch_loss(policy, inputs);
      theta[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(numeric - lg.grad[i]) / std::max(1e-6, std::abs(numeric) + std::abs(lg.grad[i]));
      CHECK_MESSAGE(rel < 1e-4, block.name << "[" << i - static_cast<Eigen::Index>(block.offset) << "] analytic "
                                            << lg.grad[i] << " numeric " << numeric);
      ++checked;
    }
  }
  CHECK(checked >= 20);
}

TEST_CASE("memory keeps the newest window entries") {
  MemoryState m;
  for (int t = 0; t < 6; ++t) m.push(t, Vec::Constant(2, t), 4);
  REQUIRE(m.size() == 4);
  CHECK(m.entries.front().first == 2);
  CHECK(m.entries.back().first == 5);
  CHECK_THROWS_AS(m.push(5, Vec::Zero(2), 4), Error);
  MemoryState none;
  none.push(0, Vec::Zero(2), 0);
  CHECK(none.size() == 0);
}

TEST_CASE("forward grows memory and is deterministic") {
  Policy a(small_config(9)), b(small_config(9));
  CHECK(a.params().hash() == b.params().hash());
  CHECK(Policy(small_config(10)).params().hash() != a.params().hash());
  Frame f = observe(test::task_state("playroom/0/turn-left", 0)).frame;
  Vec s = a.encode_observation(f);
  CHECK(s.size() == a.config().embed_dim);
  Vec g = a.encode_instruction("Lift the GREEN cube");
  CHECK(g == a.encode_instruction("lift   the green cube"));
  Vec pf = a.pending_features({noop_action(0), noop_action(1)});
  MemoryState mem;
  for (int t = 0; t < 5; ++t) {
    auto out = a.forward(s, g, mem, pf);
    auto again = b.forward(s, g, mem, pf);
    CHECK(out.logits.data == again.logits.data);
    CHECK(out.goal_prob.size() == 8);
    CHECK(out.memory.size() == std::min<std::size_t>(mem.size() + 1, 3));
    mem = out.memory;
  }
}

TEST_CASE("blanked instructions and the no-language agent share the null embedding") {
  auto c = small_config();
  Policy p(c);
  const Vec null = p.encode_instruction("");
  CHECK(p.encode_instruction("   ") == null);
  CHECK(p.encode_instruction("chop the carrot") != null);
  c.use_language = false;
  Policy mute(c);
  CHECK(mute.encode_instruction("chop the carrot") == mute.encode_instruction(""));

  // Dropout blanks whole instructions, and a blanked example costs exactly
  // what it costs with its instruction removed by hand.
  auto examples = expert_examples();
  c = small_config();
  c.instruction_dropout = 0.5;
  Policy drop(c);
  std::mt19937_64 rng(1);
  auto dropped = prepare_inputs(drop, examples, &rng);
  auto manual = examples;
  int blanked = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (dropped[i].instruction.empty()) {
      manual[i].instruction.clear();
      ++blanked;
    } else {
      CHECK(dropped[i].instruction == examples[i].instruction);
    }
  }
  CHECK(blanked > 0);
  CHECK(blanked < static_cast<int>(examples.size()));
  CHECK(batch_loss(drop, dropped) == batch_loss(drop, prepare_inputs(drop, manual)));
}

TEST_CASE("training reduces the loss on a fixed batch") {
  auto c = small_config(4);
  c.learning_rate = 0.05;
  c.instruction_dropout = 0.0;
  Policy policy(c);
  Trainer trainer(policy);
  auto examples = expert_examples();
  std::vector<data::TrainingExample> batch(examples.begin(), examples.begin() + 8);
  const double before = batch_loss(policy, prepare_inputs(policy, batch));
  for (int i = 0; i < 200; ++i) REQUIRE_FALSE(trainer.train_step(batch).rejected);
  const double after = batch_loss(policy, prepare_inputs(policy, batch));
  CHECK(after < 0.5 * before);
  CHECK(trainer.step() == 200);
}

TEST_CASE("identical seeds give bit-identical training") {
  auto examples = expert_examples();
  std::vector<data::TrainingExample> batch(examples.begin(), examples.begin() + 4);
  Policy a(small_config(2)), b(small_config(2));
  Trainer ta(a), tb(b);
  for (int i = 0; i < 20; ++i) {
    ta.train_step(batch);
    tb.train_step(batch);
  }
  CHECK(a.params().flat() == b.params().flat());
}

TEST_CASE("checkpoint round trip and exact resume") {
  auto examples = expert_examples();
  std::vector<data::TrainingExample> batch(examples.begin(), examples.begin() + 4);
  auto c = small_config(6);
  c.instruction_dropout = 0.5;  // exercises the restored rng
  Policy straight(c);
  Trainer ts(straight);
  for (int i = 0; i < 20; ++i) ts.train_step(batch);

  Policy first(c);
  Trainer tf(first);
  for (int i = 0; i < 10; ++i) tf.train_step(batch);
  const std::string path = "test_agent_resume.smck";
  save_checkpoint(path, first, &tf, R"({"note":"unit"})");
  auto ck = load_checkpoint(path);
  CHECK(ck.provenance == R"({"note":"unit"})");
  CHECK(ck.step == 10);
  CHECK(ck.policy.config() == c);
  CHECK(ck.policy.params().flat() == first.params().flat());
  Trainer tr(ck.policy);
  tr.restore(ck.step, ck.velocity, ck.rng_state);
  for (int i = 0; i < 10; ++i) tr.train_step(batch);
  CHECK(ck.policy.params().flat() == straight.params().flat());

  auto bytes = read_file_bytes(path);
  bytes.resize(bytes.size() / 2);
  write_file_bytes(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), DecodeError);
  std::filesystem::remove(path);
}

TEST_CASE("config JSON round trip and validation") {
  auto c = small_config(12);
  c.cfg_scale = 2.5;
  c.use_language = false;
  CHECK(AgentConfig::from_json(c.to_json()) == c);
  c.memory_window = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(AgentConfig::from_json("[1,2]"), ConfigError);
}

TEST_CASE("agent client in a session") {
  Policy policy(small_config(8));
  const TaskSpec& task = worlds::find_task("buildlab/0/go-to-the-red-block");

  SUBCASE("lambda 0 emits the conditional argmax") {
    AgentClient client(policy, {0.0, 2, false, 0});
    net::SessionConfig sc;
    client.on_start(sc, task.instruction);
    Observation obs = observe(instantiate_task(task, 0));
    auto chunk = client.on_observation(obs);
    REQUIRE(chunk.has_value());
    Vec pf = policy.pending_features({noop_action(0), noop_action(1)});
    auto out = policy.forward(policy.encode_observation(obs.frame), policy.encode_instruction(task.instruction),
                              MemoryState{}, pf);
    CHECK(chunk->actions == decode_argmax(out.logits, 2));
    CHECK(chunk->computed_at == 0);
  }

  SUBCASE("an interrupt swaps the instruction and keeps memory") {
    AgentClient client(policy, {1.0, 2, false, 0});
    client.on_start({}, task.instruction);
    WorldState s = instantiate_task(task, 1);
    client.on_observation(observe(s));
    advance(s, noop_action(0));
    client.on_observation(observe(s));
    client.on_instruction("turn left");
    CHECK(client.instruction() == "turn left");
    CHECK(client.memory().size() == 2);
  }

  SUBCASE("150 ms of action latency misses no ticks at k = 2") {
    net::SessionSpec spec;
    spec.initial = instantiate_task(task, 2);
    spec.task_id = task.task_id;
    spec.instruction = task.instruction;
    spec.budget_ticks = 200;
    spec.config.latency.action_delay_ms = 150;
    AgentClient client(policy, {1.0, 2, false, 0});
    auto r = net::run_simulated_session(spec, client);
    CHECK(r.metrics.ticks == 200);
    CHECK(r.metrics.missed_ticks == 0);
    CHECK(r.metrics.stale_chunks == 0);
  }
}

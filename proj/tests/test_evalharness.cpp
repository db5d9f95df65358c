#include <bit>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "sima/ablation.hpp"
#include "sima/evalharness.hpp"
#include "sima/worlds.hpp"
#include "support.hpp"

using namespace sima;
using namespace sima::eval;

namespace {

ActionEvent press(std::int64_t tick, Key k) {
  ActionEvent a = noop_action(tick);
  a.keys.set(k);
  return a;
}

ClientFactory expert_factory() {
  return [](const TaskSpec& task, const WorldState& initial) -> std::unique_ptr<net::Client> {
    return std::make_unique<data::ExpertClient>(task, initial);
  };
}

/// An expert that never hears about instruction changes.
class DeafExpert : public net::Client {
 public:
  DeafExpert(const TaskSpec& task, const WorldState& initial) : inner_(task, initial) {}
  void on_start(const net::SessionConfig& c, const std::string& i) override { inner_.on_start(c, i); }
  std::optional<net::ActionChunk> on_observation(const Observation& o) override { return inner_.on_observation(o); }

 private:
  data::ExpertClient inner_;
};

class ThrowingClient : public net::Client {
 public:
  std::optional<net::ActionChunk> on_observation(const Observation& o) override {
    if (o.tick >= 3) throw std::runtime_error("policy exploded");
    return std::nullopt;
  }
};

/// Oracle: enumerate every relabelling by bitmask.
double pooled_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> all(a);
  all.insert(all.end(), b.begin(), b.end());
  const auto n = all.size();
  auto mean = [](double s, std::size_t k) { return s / static_cast<double>(k); };
  double sa = 0, sb = 0;
  for (double x : a) sa += x;
  for (double x : b) sb += x;
  const double obs = mean(sa, a.size()) - mean(sb, b.size());
  std::uint64_t hits = 0, total = 0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != a.size()) continue;
    double s1 = 0, s2 = 0;
    for (std::size_t i = 0; i < n; ++i) ((mask >> i) & 1 ? s1 : s2) += all[i];
    ++total;
    if (std::abs(mean(s1, a.size()) - mean(s2, b.size())) >= std::abs(obs) - 1e-12) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

double paired_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = a.size();
  double obs = 0;
  for (std::size_t i = 0; i < n; ++i) obs += a[i] - b[i];
  std::uint64_t hits = 0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += ((mask >> i) & 1 ? -1.0 : 1.0) * (a[i] - b[i]);
    if (std::abs(s) >= std::abs(obs) - 1e-12) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(std::uint64_t{1} << n);
}

agent::AgentConfig tiny_config(std::uint64_t seed, bool language = true) {
  agent::AgentConfig c;
  c.embed_dim = 8;
  c.encoder_hidden = 8;
  c.cell_dim = 2;
  c.instr_dim = 8;
  c.vocab_buckets = 32;
  c.trunk_hidden = 8;
  c.memory_window = 2;
  c.seed = seed;
  c.use_language = language;
  return c;
}

}  // namespace

TEST_CASE("OCR patterns match in order") {
  OcrSpec spec;
  spec.patterns = {"^Wood \\+1$", "^Planks \\+1$"};
  std::vector<TextEvent> good = {{2, "Wood +1"}, {3, "Stone +1"}, {9, "Planks +1"}};
  std::vector<TextEvent> reversed = {{2, "Planks +1"}, {9, "Wood +1"}};
  CHECK(ocr_evaluate(good, spec));
  CHECK_FALSE(ocr_evaluate(reversed, spec));
  CHECK_FALSE(ocr_evaluate({}, spec));
  CHECK_FALSE(ocr_evaluate(good, OcrSpec{}));

  SUBCASE("the action predicate looks back from the final event") {
    spec.action = ActionPredicate{Key::kE, 3};
    std::vector<ActionEvent> actions;
    for (int t = 0; t < 12; ++t) actions.push_back(noop_action(t));
    CHECK_FALSE(ocr_evaluate(good, spec, actions));
    actions[8] = press(8, Key::kE);  // the text at 9 came from the action at 8
    CHECK(ocr_evaluate(good, spec, actions));
    actions[8] = noop_action(8);
    actions[5] = press(5, Key::kE);  // 4 ticks back, outside the window
    CHECK_FALSE(ocr_evaluate(good, spec, actions));
    actions[6] = press(6, Key::kE);
    CHECK(ocr_evaluate(good, spec, actions));
  }
}

TEST_CASE("episodes with the expert succeed and agent crashes become failures") {
  const TaskSpec& task = worlds::find_task("harvest/2/collect-wood");
  auto r = run_episode(expert_factory(), task, 7);
  CHECK(r.outcome.status == EpisodeStatus::kSuccess);
  CHECK(r.outcome.ticks_used <= task.budget_ticks);

  auto crash = run_episode([](const TaskSpec&, const WorldState&) { return std::make_unique<ThrowingClient>(); },
                           task, 7);
  CHECK(crash.outcome.status == EpisodeStatus::kFailure);
  CHECK(crash.outcome.trace_ref.find("policy exploded") != std::string::npos);
}

TEST_CASE("instruction switch test") {
  const TaskSpec& a = worlds::find_task("playroom/0/lift-the-green-cube");
  const TaskSpec& b = worlds::find_task("playroom/0/go-to-the-red-ball");
  // Seed 3 places the green cube seven ticks away, so a switch at tick 1
  // lands before any lifting action is committed.
  CHECK(switch_test(expert_factory(), a, b, 1, 3).outcome.status == EpisodeStatus::kSuccess);
  auto deaf = [](const TaskSpec& t, const WorldState& s) -> std::unique_ptr<net::Client> {
    return std::make_unique<DeafExpert>(t, s);
  };
  CHECK(switch_test(deaf, a, b, 1, 3).outcome.status != EpisodeStatus::kSuccess);
  auto late = switch_test(expert_factory(), a, b, a.budget_ticks, 1);
  CHECK(late.degenerate);
  CHECK(late.outcome.status == EpisodeStatus::kSuccess);
  CHECK_THROWS_AS(switch_test(expert_factory(), a, worlds::find_task("playroom/1/turn-left"), 3, 1), SpecError);
}

TEST_CASE("static probe and uniform-policy log-likelihood") {
  agent::Policy policy(tiny_config(1));
  // A policy with zero head weights puts every logit at 0.
  policy.params().mat("head_w").setZero();
  policy.params().mat("head_b").setZero();
  Frame f = observe(test::task_state("playroom/0/jump", 0)).frame;
  CHECK(static_probe(policy, f, "jump", [](const ActionEvent& e) { return e.keys.empty(); }));
  CHECK_FALSE(static_probe(policy, f, "jump", [](const ActionEvent& e) { return e.keys.has(Key::kSpace) && e.keys.empty(); }));

  auto r = data::scripted_expert(worlds::find_task("playroom/0/jump"), 0);
  auto ex = data::make_examples(r.trajectory, data::segments_of(r.trajectory, "t")[0]);
  const double uniform = 16 * std::numbers::ln2 + 2 * std::log(7.0) + 2 * std::numbers::ln2;
  CHECK(logprob_eval(policy, ex) == doctest::Approx(uniform));
  CHECK_THROWS_AS(logprob_eval(policy, {}), Error);
}

TEST_CASE("success rates carry normal-approximation intervals") {
  auto r = success_rate(34, 100);
  CHECK(r.rate == doctest::Approx(0.34));
  CHECK(r.ci95 == doctest::Approx(1.96 * std::sqrt(0.34 * 0.66 / 100)));
  CHECK(r.ci95 == doctest::Approx(0.0928).epsilon(1e-3));
  auto all = success_rate(10, 10);
  CHECK(all.ci95 == 0.0);
  CHECK(all.hi == 1.0);
  CHECK(success_rate(1, 50).lo == 0.0);
  CHECK_THROWS_AS(success_rate(0, 0), Error);
  CHECK_THROWS_AS(success_rate(3, 2), Error);
  std::vector<double> scores = {1.0, 0.5, 0.0, 1.0};
  CHECK(mean_rate(scores).rate == doctest::Approx(0.625));
}

TEST_CASE("judgments aggregate by strict majority") {
  // Every pattern of up to five judges against a direct majority count.
  for (int n = 1; n <= 5; ++n) {
    for (int mask = 0; mask < (1 << n); ++mask) {
      std::vector<JudgmentRecord> recs;
      for (int j = 0; j < n; ++j) {
        recs.push_back({"ep", "judge" + std::to_string(j), (mask >> j) & 1 ? Rating::kSuccess : Rating::kFailure, ""});
      }
      CHECK(aggregate_judgments(recs) == (2 * std::popcount(static_cast<unsigned>(mask)) > n));
    }
  }
  CHECK_THROWS_AS(aggregate_judgments({}), SpecError);
  std::vector<JudgmentRecord> dup = {{"ep", "j", Rating::kSuccess, ""}, {"ep", "j", Rating::kFailure, ""}};
  CHECK_THROWS_AS(aggregate_judgments(dup), SpecError);
}

TEST_CASE("judgment upload format") {
  JudgmentRecord a{"ep-1", "judge-a", Rating::kSuccess, "clean \"lift\""};
  JudgmentRecord b{"ep-1", "judge-b", Rating::kFailure, ""};
  auto parsed = parse_judgments(judgment_to_json(a) + "\n" + judgment_to_json(b) + "\n");
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0] == a);
  CHECK(parsed[1] == b);
  CHECK_THROWS_AS(parse_judgments(judgment_to_json(a) + "\n" + judgment_to_json(a)), SpecError);
  CHECK_THROWS_AS(parse_judgments(R"({"episode_id":"e","judge_id":"j","rating":"maybe"})"), SpecError);
  CHECK_THROWS_AS(parse_judgments(R"({"episode_id":"e"})"), SpecError);
}

TEST_CASE("scores relative to the specialist") {
  auto r = normalize_vs_specialist({{"playroom", 0.3}, {"buildlab", 0.5}, {"harvest", 0.2}},
                                   {{"playroom", 0.6}, {"buildlab", 0.4}, {"harvest", 0.0}});
  CHECK(r.per_world.at("playroom") == doctest::Approx(50.0));
  CHECK(r.per_world.at("buildlab") == doctest::Approx(125.0));
  CHECK(r.excluded == std::vector<std::string>{"harvest"});
  CHECK(r.aggregate == doctest::Approx(87.5));
  CHECK_THROWS_AS(normalize_vs_specialist({}, {{"playroom", 0.5}}), SpecError);
}

TEST_CASE("permutation test against an enumeration oracle") {
  SUBCASE("worked cases") {
    std::vector<double> ones = {1, 1, 1}, zeros = {0, 0, 0};
    auto p = permutation_test(ones, zeros);
    CHECK(p.exhaustive);
    CHECK(p.p == doctest::Approx(0.1));  // 2 of 20 splits are as extreme
    CHECK(p.statistic == doctest::Approx(1.0));
    auto q = permutation_test(ones, zeros, 10000, 0, PermutationMode::kPaired);
    CHECK(q.p == doctest::Approx(0.25));  // 2 of 8 sign patterns
    CHECK(permutation_test(ones, ones).p == doctest::Approx(1.0));
  }
  SUBCASE("random exhaustive cases") {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<int> score(0, 3);
    for (int trial = 0; trial < 40; ++trial) {
      std::vector<double> a(3 + rng() % 5), b(3 + rng() % 5);
      for (auto& x : a) x = score(rng) / 3.0;
      for (auto& x : b) x = score(rng) / 3.0;
      CHECK(permutation_test(a, b).p == doctest::Approx(pooled_oracle(a, b)));
      b.resize(a.size(), 0.5);
      CHECK(permutation_test(a, b, 100, 0, PermutationMode::kPaired).p == doctest::Approx(paired_oracle(a, b)));
    }
  }
  SUBCASE("Monte Carlo agrees with enumeration") {
    std::vector<double> a = {1, 0.66, 1, 0.33, 1, 1, 0.66}, b = {0.33, 0, 0.66, 0.33, 0, 1, 0};
    const double exact = pooled_oracle(a, b);
    auto mc = permutation_test(a, b, 20000, 5, PermutationMode::kPooled, 10);
    CHECK_FALSE(mc.exhaustive);
    CHECK(mc.resamples == 20000);
    CHECK(std::abs(mc.p - exact) < 0.02);
    CHECK(mc.p > 0.0);
    auto again = permutation_test(a, b, 20000, 5, PermutationMode::kPooled, 10);
    CHECK(again.p == mc.p);
    auto paired_mc = permutation_test(a, b, 20000, 5, PermutationMode::kPaired, 10);
    CHECK(std::abs(paired_mc.p - paired_oracle(a, b)) < 0.02);
  }
  CHECK_THROWS_AS(permutation_test(std::vector<double>{}, std::vector<double>{1.0}), Error);
  CHECK_THROWS_AS(permutation_test(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, 10, 0,
                                   PermutationMode::kPaired),
                  Error);
}

TEST_CASE("ablation report: schema, reproducibility and regeneration") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "sima_eval_report_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (int i = 0; i < 3; ++i) {
    agent::Policy p(tiny_config(static_cast<std::uint64_t>(i), i != 2));
    agent::save_checkpoint((dir / ("agent" + std::to_string(i) + ".smck")).string(), p);
  }
  const std::string cfg_text = R"({
    "train_seeds": [0],
    "eval_seeds": [1000],
    "permutation_seed": 3,
    "permutation_resamples": 500,
    "session": {"offset_k": 2},
    "conditions": [
      {"name": "multiworld", "checkpoints": ["agent0.smck"], "worlds": ["playroom", "harvest"]},
      {"name": "specialist:playroom", "checkpoints": ["agent1.smck"], "worlds": ["playroom"]},
      {"name": "no_language", "checkpoints": ["agent2.smck"], "worlds": ["playroom", "harvest"]},
      {"name": "zero_shot:harvest", "checkpoints": ["missing.smck"], "worlds": ["harvest"]}
    ]})";
  auto config = ablation_config_from_json(cfg_text, dir.string());
  REQUIRE(config.conditions.size() == 4);
  CHECK(config.conditions[0].checkpoints[0] == (dir / "agent0.smck").string());
  CHECK(config.episode.config.offset_k == 2);

  auto report = run_ablation_suite(config);
  CHECK(report.skipped == std::vector<std::string>{"zero_shot:harvest"});
  REQUIRE(report.conditions.size() == 3);
  const auto* multi = report.find("multiworld");
  REQUIRE(multi != nullptr);
  CHECK(multi->episodes.size() == 2 * 42);
  CHECK(multi->per_world.at("playroom").n == 42);
  CHECK(report.specialist_p.contains("playroom"));
  CHECK(report.no_language_p.has_value());

  auto json = nlohmann::json::parse(report.to_json());
  for (const char* key : {"format", "version", "train_seeds", "eval_seeds", "conditions", "skipped",
                          "relative_to_specialist", "specialist_p", "no_language_p", "permutation_seed",
                          "permutation_resamples", "provenance"}) {
    CHECK_MESSAGE(json.contains(key), key);
  }
  for (const auto& c : json["conditions"]) {
    for (const char* key : {"name", "agents", "worlds", "per_world", "per_skill", "overall", "episodes"}) {
      CHECK_MESSAGE(c.contains(key), key);
    }
  }

  SUBCASE("a second run with the same inputs is byte-identical") {
    CHECK(run_ablation_suite(config).to_json() == report.to_json());
  }
  SUBCASE("statistics regenerate exactly from the stored episodes") {
    auto back = report_from_json(report.to_json());
    CHECK(back.to_json() == report.to_json());
    CHECK(render_svg(back) == render_svg(report));
    CHECK(render_summary(back) == render_summary(report));
    CHECK(render_svg(report).find("<svg") == 0);
  }
  SUBCASE("the config round-trips through its JSON form") {
    auto again = ablation_config_from_json(ablation_config_to_json(config));
    CHECK(ablation_config_to_json(again) == ablation_config_to_json(config));
  }
  CHECK_THROWS_AS(ablation_config_from_json(R"({"conditions": []})"), ConfigError);
  fs::remove_all(dir);
}

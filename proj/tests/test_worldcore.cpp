#include <chrono>
#include <random>

#include "doctest.h"
#include "sima/worldcore.hpp"
#include "sima/worlds.hpp"
#include "support.hpp"

using namespace sima;

TEST_CASE("noop step advances the tick and is deterministic") {
  WorldState s = test::task_state("playroom/0/lift-the-green-cube", 42);
  auto a = step(s, noop_action(0));
  auto b = step(s, noop_action(0));
  CHECK(a.state.tick == 1);
  CHECK(a.state == b.state);
  CHECK(save(a.state) == save(b.state));
  CHECK(a.observation.tick == 1);
  // No animated cells exist, so a noop leaves the frame as it was.
  CHECK(a.observation.frame == observe(s).frame);
}

TEST_CASE("holding W moves at most one cell per tick") {
  for (const char* id : {"playroom/0/move-forward", "buildlab/1/move-forward", "harvest/2/move-forward"}) {
    WorldState s = test::task_state(id, 3);
    const int x0 = s.avatar.x, y0 = s.avatar.y;
    int prev_x = x0, prev_y = y0;
    for (int t = 0; t < 5; ++t) {
      ActionEvent a = noop_action(s.tick);
      a.keys.set(Key::kW);
      advance(s, a);
      CHECK(std::abs(s.avatar.x - prev_x) + std::abs(s.avatar.y - prev_y) <= 1);
      prev_x = s.avatar.x;
      prev_y = s.avatar.y;
    }
    int moved = std::abs(s.avatar.x - x0) + std::abs(s.avatar.y - y0);
    CHECK(moved <= 5);
    // Displacement is along the initial facing only.
    CellPos d = facing_delta(s.origin.facing);
    CHECK((s.avatar.x - x0) * d.y == (s.avatar.y - y0) * d.x);
  }
}

TEST_CASE("step rejects an action stamped for another tick") {
  WorldState s = test::task_state("playroom/0/turn-left", 0);
  CHECK_THROWS_AS(step(s, noop_action(1)), ProtocolError);
  advance(s, noop_action(0));
  CHECK_THROWS_AS(step(s, noop_action(0)), ProtocolError);
}

TEST_CASE("action validation") {
  ActionEvent a;
  a.mouse_dx = 4;
  CHECK_THROWS_AS(a.validate(), ProtocolError);
  a.mouse_dx = -3;
  a.tick = -1;
  CHECK_THROWS_AS(a.validate(), ProtocolError);
  a.tick = 0;
  CHECK_NOTHROW(a.validate());
}

TEST_CASE("held action keeps keys and buttons and drops mouse motion") {
  ActionEvent a = noop_action(3);
  a.keys = KeySet{Key::kW, Key::kShift};
  a.mouse_dx = 2;
  a.mouse_dy = -1;
  a.left_button = true;
  ActionEvent h = held_action(a, 4);
  CHECK(h.tick == 4);
  CHECK(h.keys == a.keys);
  CHECK(h.left_button);
  CHECK(h.mouse_dx == 0);
  CHECK(h.mouse_dy == 0);
}

TEST_CASE("key names round-trip") {
  for (int k = 0; k < kKeyCount; ++k) {
    auto key = static_cast<Key>(k);
    CHECK(key_from_name(key_name(key)) == key);
  }
  CHECK_FALSE(key_from_name("TAB").has_value());
}

TEST_CASE("save/load round trip and idempotence") {
  WorldState s = test::task_state("harvest/1/collect-wood", 5);
  auto bytes = save(s);
  CHECK(bytes.size() > 6);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MWSV");
  WorldState back = load(bytes);
  CHECK(back == s);
  CHECK(save(back) == bytes);
}

TEST_CASE("truncated and corrupt save states raise decode errors") {
  auto bytes = save(test::task_state("buildlab/0/pick-up-the-blue-block", 1));
  CHECK_THROWS_AS(load(std::span<const std::uint8_t>()), DecodeError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      load(std::span<const std::uint8_t>(bytes.data(), cut));
      FAIL("expected a decode error");
    } catch (const DecodeError& e) {
      CHECK(e.offset() <= cut);
    }
  }
  auto bad = bytes;
  bad[0] = 'X';
  try {
    load(bad);
    FAIL("expected bad magic");
  } catch (const DecodeError& e) {
    CHECK(e.kind() == DecodeErrorKind::kBadMagic);
  }
}

TEST_CASE("states differing only in rng state serialise differently") {
  WorldState a = test::task_state("playroom/1/turn-left", 0);
  WorldState b = a;
  b.next_random();
  REQUIRE(a.rng_state != b.rng_state);
  CHECK(save(a) != save(b));
}

TEST_CASE("instantiate_task places the target and every distractor") {
  const TaskSpec& task = worlds::find_task("playroom/0/lift-the-green-cube");
  WorldState s = instantiate_task(task, 7);
  const Entity* target = s.find_label("green cube");
  REQUIRE(target != nullptr);
  CHECK(target->placed());
  int other_colour = 0;
  for (const auto& ref : task.distractor_ids) {
    const Entity* d = s.find_label(ref);
    REQUIRE_MESSAGE(d != nullptr, ref);
    CHECK(d->placed());
    if (d->color != Color::kGreen) ++other_colour;
  }
  CHECK(other_colour >= 1);
}

TEST_CASE("instantiate_task is deterministic per seed and varies across seeds") {
  const TaskSpec& task = worlds::find_task("playroom/0/lift-the-green-cube");
  CHECK(save(instantiate_task(task, 1)) == save(instantiate_task(task, 1)));
  auto positions = [](const WorldState& s) {
    std::vector<std::pair<int, int>> p;
    for (const auto& e : s.entities) p.emplace_back(e.x, e.y);
    p.emplace_back(s.avatar.x, s.avatar.y);
    return p;
  };
  CHECK(positions(instantiate_task(task, 1)) != positions(instantiate_task(task, 2)));
}

TEST_CASE("unresolvable save_state_ref is a spec error") {
  TaskSpec t = worlds::find_task("playroom/0/turn-left");
  t.save_state_ref = "playroom/99";
  CHECK_THROWS_AS(instantiate_task(t, 0), SpecError);
}

TEST_CASE("frame hash is FNV-1a over row-major cell bytes") {
  Frame f = observe(test::task_state("harvest/0/mine-stone", 2)).frame;
  CHECK(frame_hash(f) == test::reference_frame_hash(f));
  Frame g = f;
  g.at(3, 4).color = static_cast<std::uint8_t>((g.at(3, 4).color + 1) % kColorCount);
  CHECK(frame_hash(g) != frame_hash(f));
}

TEST_CASE("random rollouts keep frames valid, text events ordered and save/load closed") {
  // 3 worlds x 9 layouts' worth of episodes, 10^5 ticks in total.
  std::mt19937_64 rng(2024);
  const auto tasks = worlds::registry_list();
  std::int64_t ticks = 0;
  std::size_t episode = 0;
  double slowest_ms = 0.0;
  while (ticks < 100000) {
    const TaskSpec& task = tasks[(episode * 7) % tasks.size()];
    WorldState s = instantiate_task(task, episode);
    for (int t = 0; t < 250; ++t, ++ticks) {
      auto start = std::chrono::steady_clock::now();
      std::int64_t before = s.tick;
      Observation obs = advance(s, test::random_action(rng, s.tick));
      slowest_ms = std::max(slowest_ms,
                            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
      REQUIRE_NOTHROW(obs.frame.validate());
      REQUIRE(obs.tick == before + 1);
      for (const auto& ev : obs.text_events) {
        REQUIRE(ev.tick <= obs.tick);
        REQUIRE(ev.tick > before);
      }
      for (const auto& line : obs.frame.overlay_text) REQUIRE(line.size() <= kMaxOverlayChars);
      if (t % 50 == 49) REQUIRE(load(save(s)) == s);
    }
    ++episode;
  }
  // Real-time contract: a step fits well inside the 100 ms tick.
  CHECK(slowest_ms < 100.0);
}

TEST_CASE("replaying the same action sequence reproduces the frame hashes") {
  std::mt19937_64 rng(9);
  WorldState a = test::task_state("buildlab/2/move-forward", 4);
  WorldState b = a;
  for (int t = 0; t < 300; ++t) {
    ActionEvent act = test::random_action(rng, a.tick);
    auto oa = advance(a, act);
    auto ob = advance(b, act);
    REQUIRE(frame_hash(oa.frame) == frame_hash(ob.frame));
  }
  CHECK(a == b);
}

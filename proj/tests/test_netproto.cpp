#include <sys/socket.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "doctest.h"
#include "sima/netproto.hpp"
#include "sima/worlds.hpp"
#include "support.hpp"

using namespace sima;
using namespace sima::net;

namespace {

std::string random_text(std::mt19937_64& rng, std::size_t max_len = 24) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> ch(32, 126);
  std::string s(len(rng), ' ');
  for (auto& c : s) c = static_cast<char>(ch(rng));
  return s;
}

Frame random_frame(std::mt19937_64& rng) {
  Frame f;
  for (auto& c : f.cells) {
    c.symbol = static_cast<std::uint8_t>(rng() % kSymbolCount);
    c.color = static_cast<std::uint8_t>(rng() % kColorCount);
  }
  for (std::size_t i = rng() % 3; i > 0; --i) f.overlay_text.push_back(random_text(rng, 40));
  return f;
}

Message random_message(std::mt19937_64& rng, std::size_t variant) {
  switch (variant) {
    case 0: return Hello{kProtocolVersion, static_cast<Role>(rng() % 7), random_text(rng)};
    case 1: {
      SessionConfig c;
      c.tick_hz = 1 + static_cast<int>(rng() % 60);
      c.latency = {static_cast<double>(rng() % 500) / 2, static_cast<double>(rng() % 500) / 4,
                   static_cast<double>(rng() % 100)};
      c.offset_k = static_cast<int>(rng() % 6);
      c.record = rng() % 2;
      return c;
    }
    case 2: {
      Observation o;
      o.tick = static_cast<std::int64_t>(rng() % 100000);
      o.frame = random_frame(rng);
      for (std::size_t i = rng() % 3; i > 0; --i) o.text_events.push_back({o.tick, random_text(rng)});
      return o;
    }
    case 3: {
      ActionChunk c;
      c.computed_at = static_cast<std::int64_t>(rng() % 1000);
      for (int i = 0; i < kChunkLen; ++i) c.actions.push_back(test::random_action(rng, c.computed_at + 2 + i, 0.3));
      return c;
    }
    case 4: return Instruction{random_text(rng, 60)};
    case 5: return Reset{random_text(rng), rng()};
    case 6: {
      LoadState l;
      l.save_bytes.resize(rng() % 200);
      for (auto& b : l.save_bytes) b = static_cast<std::uint8_t>(rng());
      return l;
    }
    case 7: return TextEvent{static_cast<std::int64_t>(rng() % 1000), random_text(rng)};
    case 8: return Interrupt{random_text(rng)};
    case 9: return EndEpisode{static_cast<EndReason>(rng() % 6), static_cast<std::int64_t>(rng() % 1000)};
    default: return JudgeRequest{random_text(rng), random_text(rng, 80)};
  }
}

class SilentClient : public Client {
 public:
  std::optional<ActionChunk> on_observation(const Observation&) override { return std::nullopt; }
};

/// Holds W for a whole chunk on every observation, after `compute` ms.
class WalkerClient : public Client {
 public:
  explicit WalkerClient(double compute = 0.0) : compute_(compute) {}
  void on_start(const SessionConfig& config, const std::string&) override { k_ = config.offset_k; }
  std::optional<ActionChunk> on_observation(const Observation& obs) override {
    ActionChunk c{obs.tick, {}};
    for (int i = 0; i < kChunkLen; ++i) {
      ActionEvent a = noop_action(obs.tick + k_ + i);
      a.keys.set(i % 2 ? Key::kW : Key::kD);
      c.actions.push_back(a);
    }
    return c;
  }
  double compute_ms(std::int64_t) override { return compute_; }

 private:
  double compute_;
  int k_ = 2;
};

SessionSpec spec_for(const std::string& task_id, std::uint64_t seed, int budget, SessionConfig config = {}) {
  SessionSpec s;
  s.initial = test::task_state(task_id, seed);
  s.task_id = task_id;
  s.seed = seed;
  s.instruction = worlds::find_task(task_id).instruction;
  s.budget_ticks = budget;
  s.config = config;
  return s;
}

std::vector<std::uint8_t> read_golden(const std::string& name) {
  return read_file_bytes(std::string(SIMA_SOURCE_DIR) + "/tests/golden/" + name);
}

}  // namespace

TEST_CASE("every variant round-trips with fuzzed payloads and encodes canonically") {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 10000; ++i) {
    Message m = random_message(rng, static_cast<std::size_t>(i) % kVariantCount);
    auto bytes = encode(m);
    REQUIRE(frame_size(bytes) == bytes.size());
    Message back = decode(bytes);
    REQUIRE(back == m);
    REQUIRE(encode(back) == bytes);
  }
}

TEST_CASE("decode errors are typed") {
  auto kind_of = [](std::span<const std::uint8_t> b) {
    try {
      decode(b);
    } catch (const DecodeError& e) {
      return e.kind();
    }
    FAIL("decode accepted bad input");
    return DecodeErrorKind::kMalformed;
  };
  CHECK(kind_of({}) == DecodeErrorKind::kTruncated);
  auto hello = encode(Hello{kProtocolVersion, Role::kPlayer, "x"});
  CHECK(kind_of(std::span(hello).first(hello.size() - 1)) == DecodeErrorKind::kTruncated);
  auto bad_magic = hello;
  bad_magic[1] = 'X';
  CHECK(kind_of(bad_magic) == DecodeErrorKind::kBadMagic);
  auto bad_version = hello;
  bad_version[4] = 9;
  CHECK(kind_of(bad_version) == DecodeErrorKind::kBadVersion);
  auto bad_variant = hello;
  bad_variant[6] = kVariantCount;
  try {
    decode(bad_variant);
    FAIL("unknown variant accepted");
  } catch (const DecodeError& e) {
    CHECK(e.kind() == DecodeErrorKind::kUnknownVariant);
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
}

TEST_CASE("frame_size waits for the header and validates it") {
  auto bytes = encode(Instruction{"go to the tree"});
  CHECK_FALSE(frame_size(std::span(bytes).first(kWireHeaderSize - 1)).has_value());
  CHECK(frame_size(std::span(bytes).first(kWireHeaderSize)) == bytes.size());
}

TEST_CASE("Hello encoding matches the golden file") {
  Hello h{kProtocolVersion, Role::kPlayer, "playclient"};
  auto bytes = encode(h);
  auto golden = read_golden("hello.bin");
  CHECK(bytes == golden);
  // Independent layout check: magic, version, variant 0, body length, body.
  ByteWriter w;
  w.raw(std::string_view("SMWP"));
  w.u16(1);
  w.u8(0);
  ByteWriter body;
  body.u16(1);
  body.u8(static_cast<std::uint8_t>(Role::kPlayer));
  body.str("playclient");
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.raw(body.data());
  CHECK(w.data() == golden);
}

TEST_CASE("golden gateway stream splits into the documented messages") {
  auto bytes = read_golden("instructor_stream.bin");
  std::vector<Message> expected = {Hello{kProtocolVersion, Role::kInstructor, "playclient"},
                                   Instruction{"go to the tree"}, Interrupt{"chop the carrot"}};
  std::vector<Message> got;
  std::size_t at = 0;
  while (at < bytes.size()) {
    auto n = frame_size(std::span(bytes).subspan(at));
    REQUIRE(n.has_value());
    got.push_back(decode(std::span(bytes).subspan(at, *n)));
    at += *n;
  }
  CHECK(got == expected);
}

TEST_CASE("session config validation") {
  SessionConfig c;
  CHECK_NOTHROW(c.validate());
  c.tick_hz = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.latency.action_delay_ms = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.offset_k = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("offset scheduling arithmetic") {
  std::vector<ActionEvent> chunk;
  for (int i = 0; i < kChunkLen; ++i) chunk.push_back(noop_action(0));
  auto s = schedule_offset_action(chunk, 10, 2);
  REQUIRE(s.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(s[static_cast<std::size_t>(i)].first == 12 + i);
    CHECK(s[static_cast<std::size_t>(i)].second.tick == 12 + i);
  }
}

TEST_CASE("a newer chunk preempts the unexecuted tail of an older one") {
  auto make = [](std::int64_t at, Key key) {
    ActionChunk c{at, {}};
    for (int i = 0; i < kChunkLen; ++i) {
      ActionEvent a = noop_action(at + 2 + i);
      a.keys.set(key);
      c.actions.push_back(a);
    }
    return c;
  };
  ActionSchedule sched(2);
  CHECK(sched.install(make(10, Key::kW)));
  CHECK(sched.install(make(14, Key::kD)));
  // Enumerated oracle: ticks 12..15 from the first chunk, 16..23 from the second.
  for (std::int64_t t = 12; t <= 23; ++t) {
    auto applied = sched.take(t);
    CHECK(applied.scheduled);
    CHECK(applied.computed_at == (t <= 15 ? 10 : 14));
    CHECK(applied.action.keys.has(t <= 15 ? Key::kW : Key::kD));
  }
  // Past the last slot the keys keep being held with no mouse motion.
  auto after = sched.take(24);
  CHECK_FALSE(after.scheduled);
  CHECK(after.action.keys.has(Key::kD));
  CHECK(after.action.mouse_dx == 0);
  // Stale chunks are refused.
  CHECK_FALSE(sched.install(make(12, Key::kS)));
}

TEST_CASE("k = 0 with an instant client is synchronous control") {
  SessionConfig c;
  c.offset_k = 0;
  auto spec = spec_for("playroom/0/move-forward", 1, 40, c);
  WalkerClient client;
  auto r = run_simulated_session(spec, client);
  CHECK(r.metrics.missed_ticks == 0);
  CHECK(r.metrics.scheduled_ticks == 40);
  CHECK(r.metrics.mean_lag_ticks == doctest::Approx(0.0));
}

TEST_CASE("a silent client does not stop the clock") {
  auto spec = spec_for("harvest/0/turn-left", 0, 57);
  SilentClient client;
  auto r = run_simulated_session(spec, client);
  CHECK(r.metrics.ticks == 57);
  CHECK(r.final_state.tick == 57);
  CHECK(r.trajectory.observations.size() == 57);
  CHECK(r.trajectory.actions.size() == 57);
  CHECK(r.status == EpisodeStatus::kTimeout);
  for (const auto& a : r.trajectory.actions) CHECK(a.is_noop());
}

TEST_CASE("150 ms action latency at 100 ms ticks with k = 2 keeps actions on schedule") {
  SessionConfig c;
  c.latency.action_delay_ms = 150;
  auto spec = spec_for("buildlab/1/move-forward", 2, 1000, c);
  WalkerClient client;
  auto r = run_simulated_session(spec, client);
  const double on_time = 1.0 - static_cast<double>(r.metrics.missed_ticks) / static_cast<double>(r.metrics.ticks - 2);
  CHECK(on_time >= 0.99);
  CHECK(r.metrics.stale_chunks == 0);
}

TEST_CASE("lag is monotone in the injected delay") {
  double prev = -1.0;
  for (double d : {0.0, 40.0, 90.0, 140.0, 180.0, 260.0, 420.0}) {
    SessionConfig c;
    c.latency.action_delay_ms = d;
    auto spec = spec_for("playroom/2/move-forward", 0, 300, c);
    WalkerClient client(20.0);
    auto r = run_simulated_session(spec, client);
    CHECK(r.metrics.mean_lag_ticks >= prev);
    prev = r.metrics.mean_lag_ticks;
  }
}

TEST_CASE("compute time changes only which ticks actions land on") {
  // Wall-clock independence: world semantics are the same function of the
  // applied action stream whatever the client latency was.
  for (double compute : {0.0, 130.0, 260.0}) {
    auto spec = spec_for("playroom/1/move-forward", 3, 80);
    WalkerClient client(compute);
    auto r = run_simulated_session(spec, client);
    WorldState s = spec.initial;
    for (std::size_t t = 0; t < r.trajectory.actions.size(); ++t) {
      Observation o = advance(s, r.trajectory.actions[t]);
      REQUIRE(frame_hash(o.frame) == frame_hash(r.trajectory.observations[t].frame));
    }
    CHECK(s == r.final_state);
  }
}

TEST_CASE("replay reproduces recorded frames and catches tampering") {
  std::mt19937_64 rng(3);
  auto spec = spec_for("harvest/1/collect-wood", 4, 60);
  WalkerClient client;
  auto r = run_simulated_session(spec, client);
  auto hashes = replay(r.trajectory);
  REQUIRE(hashes.size() == 60);
  for (std::size_t t = 0; t < hashes.size(); ++t) CHECK(hashes[t] == frame_hash(r.trajectory.observations[t].frame));

  for (int trial = 0; trial < 20; ++trial) {
    Trajectory bad = r.trajectory;
    std::size_t t = rng() % bad.actions.size();
    ActionEvent& a = bad.actions[t];
    ActionEvent original = a;
    do {
      a = test::random_action(rng, a.tick, 0.4);
    } while (a == original);
    try {
      replay(bad);
      // A tampered action can be harmless (e.g. blocked movement).
    } catch (const ReplayDivergence& e) {
      CHECK(e.tick() >= static_cast<std::int64_t>(t));
    }
  }
  // Moving the avatar the other way always diverges.
  Trajectory bad = r.trajectory;
  for (auto& a : bad.actions) {
    a.keys = KeySet{Key::kA};
    a.mouse_dx = 3;
  }
  CHECK_THROWS_AS(replay(bad), ReplayDivergence);
}

TEST_CASE("empty trajectory replays to an empty hash sequence") {
  auto spec = spec_for("playroom/0/turn-left", 0, 0);
  SilentClient client;
  auto r = run_simulated_session(spec, client);
  CHECK(r.trajectory.ticks() == 0);
  CHECK(replay(r.trajectory).empty());
}

TEST_CASE("trajectory container round trip with sidecar index") {
  SessionConfig c;
  c.latency = {30, 60, 10};
  auto spec = spec_for("buildlab/0/put-the-red-block-on-the-blue-block", 1, 45, c);
  spec.interrupts = {{20, "pick up the blue block"}};
  spec.jitter_seed = 5;
  WalkerClient client(30);
  auto r = run_simulated_session(spec, client);
  REQUIRE(r.trajectory.segments.size() == 2);
  CHECK(r.trajectory.segments[0].source == SegmentSource::kScripted);
  CHECK(r.trajectory.segments[1].source == SegmentSource::kLive);
  CHECK(r.trajectory.segments[1].t0 == 20);

  auto bytes = encode_trajectory(r.trajectory);
  CHECK(decode_trajectory(bytes) == r.trajectory);
  const std::string path = "test_roundtrip.mwtr";
  write_trajectory(path, r.trajectory);
  CHECK(read_trajectory(path) == r.trajectory);
  auto index = read_trajectory_index(path);
  CHECK(index.size() >= r.trajectory.actions.size());
  for (std::size_t i = 1; i < index.size(); ++i) CHECK(index[i].second > index[i - 1].second);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".idx");
}

TEST_CASE("streaming writer produces the same trajectory as the recorder") {
  auto spec = spec_for("playroom/2/turn-right", 2, 30);
  WalkerClient client;
  auto r = run_simulated_session(spec, client);
  const std::string path = "test_stream.mwtr";
  {
    TrajectoryWriter w(path, r.trajectory.header);
    for (std::size_t t = 0; t < r.trajectory.actions.size(); ++t) {
      w.append_step(r.trajectory.actions[t], r.trajectory.observations[t]);
    }
    for (const auto& s : r.trajectory.segments) w.append_segment(s);
    w.append_end(*r.trajectory.end);
  }
  CHECK(read_trajectory(path) == r.trajectory);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".idx");
}

TEST_CASE("wall-clock session over an in-process channel") {
  SessionConfig c;
  c.tick_hz = 100;
  auto spec = spec_for("playroom/0/move-forward", 0, 50, c);
  auto [server_end, client_end] = make_channel_pair();
  std::optional<EndEpisode> client_end_msg;
  std::thread t([&, ch = client_end] {
    WalkerClient client;
    client_end_msg = drive_client(*ch, client);
  });
  auto r = run_realtime_session(spec, *server_end);
  t.join();
  CHECK(r.metrics.ticks == 50);
  REQUIRE(client_end_msg.has_value());
  CHECK(client_end_msg->reason == EndReason::kTimeout);
  CHECK(r.metrics.chunks_received > 0);
  CHECK(replay(r.trajectory).size() == 50);
}

TEST_CASE("client disconnect ends the session with EndEpisode(disconnect)") {
  SessionConfig c;
  c.tick_hz = 100;
  auto spec = spec_for("harvest/2/turn-left", 0, 1000, c);
  auto [server_end, client_end] = make_channel_pair();
  std::thread t([ch = client_end] {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    ch->close();
  });
  const std::string path = "test_disconnect.mwtr";
  RealtimeOptions opts;
  opts.record_path = path;
  auto r = run_realtime_session(spec, *server_end, opts);
  t.join();
  REQUIRE(r.trajectory.end.has_value());
  CHECK(r.trajectory.end->reason == EndReason::kDisconnect);
  CHECK(r.metrics.ticks < 1000);
  auto on_disk = read_trajectory(path);
  REQUIRE(on_disk.end.has_value());
  CHECK(on_disk.end->reason == EndReason::kDisconnect);
  CHECK(on_disk.actions == r.trajectory.actions);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".idx");
}

TEST_CASE("socket channel carries wire frames") {
  int fds[2];
  REQUIRE(::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) == 0);
  auto a = make_socket_channel(fds[0]);
  auto b = make_socket_channel(fds[1]);
  std::mt19937_64 rng(1);
  std::vector<Message> sent;
  for (int i = 0; i < 200; ++i) {
    sent.push_back(random_message(rng, static_cast<std::size_t>(i) % kVariantCount));
    REQUIRE(a->send(sent.back()));
  }
  for (const auto& m : sent) {
    auto got = b->receive(std::chrono::milliseconds(1000));
    REQUIRE(got.has_value());
    CHECK(*got == m);
  }
  a->close();
  CHECK_FALSE(b->receive(std::chrono::milliseconds(200)).has_value());
  CHECK(b->closed());
}

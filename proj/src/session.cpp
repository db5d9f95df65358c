#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <queue>
#include <random>
#include <thread>

#include "sima/netproto.hpp"

namespace sima::net {

namespace {

/// Shared bookkeeping for both session drivers.
class Recorder {
 public:
  explicit Recorder(const SessionSpec& spec) : spec_(spec) {
    auto& h = result_.trajectory.header;
    h.world = spec.initial.world;
    h.seed = spec.seed;
    h.task_id = spec.task_id;
    h.config = spec.config;
    h.role = spec.role;
    h.initial_state = save(spec.initial);
    changes_.push_back({0, spec.instruction});
  }

  void on_tick(const ActionSchedule::Applied& applied, const Observation& obs) {
    auto& m = result_.metrics;
    ++m.ticks;
    if (applied.scheduled) {
      ++m.scheduled_ticks;
      lag_sum_ += static_cast<double>(applied.action.tick - applied.computed_at);
    } else if (applied.action.tick >= spec_.config.offset_k) {
      ++m.missed_ticks;
    }
    if (spec_.config.record) {
      result_.trajectory.actions.push_back(applied.action);
      result_.trajectory.observations.push_back(obs);
      for (const auto& e : obs.text_events) result_.trajectory.text_events.push_back(e);
    }
  }

  void instruction_changed(std::int64_t tick, const std::string& text) { changes_.push_back({tick, text}); }

  SessionResult finish(WorldState state, EpisodeStatus status, std::optional<EndReason> reason = {}) {
    auto& m = result_.metrics;
    m.mean_lag_ticks = m.scheduled_ticks == 0 ? 0.0 : lag_sum_ / static_cast<double>(m.scheduled_ticks);
    result_.status = status;
    result_.final_state = std::move(state);
    auto& traj = result_.trajectory;
    traj.end = EndEpisode{reason.value_or(end_reason_for(status)), m.ticks};
    if (spec_.config.record) {
      for (std::size_t i = 0; i < changes_.size(); ++i) {
        std::int64_t t0 = changes_[i].tick;
        std::int64_t t1 = i + 1 < changes_.size() ? changes_[i + 1].tick : m.ticks;
        if (t1 > t0 && !changes_[i].text.empty()) {
          traj.segments.push_back({t0, t1, changes_[i].text, i == 0 ? SegmentSource::kScripted : SegmentSource::kLive});
        }
      }
    }
    return std::move(result_);
  }

  SessionMetrics& metrics() { return result_.metrics; }

 private:
  const SessionSpec& spec_;
  SessionResult result_;
  std::vector<InstructionChange> changes_;
  double lag_sum_ = 0.0;
};

enum class EventType : std::uint8_t { kChunkArrive = 0, kObsArrive = 1, kClientDone = 2, kTick = 3 };

struct SimEvent {
  double time;
  EventType type;
  std::uint64_t seq;
  std::int64_t tick = 0;
  std::optional<ActionChunk> chunk;

  bool operator>(const SimEvent& o) const {
    if (time != o.time) return time > o.time;
    if (type != o.type) return type > o.type;
    return seq > o.seq;
  }
};

}  // namespace

SessionResult run_simulated_session(const SessionSpec& spec, Client& client) {
  spec.config.validate();
  const double period = spec.config.tick_ms();
  const auto& lat = spec.config.latency;
  std::mt19937_64 jitter_rng(spec.jitter_seed);
  std::uniform_real_distribution<double> jitter(0.0, lat.jitter_ms);
  auto delay = [&](double base) { return base + (lat.jitter_ms > 0 ? jitter(jitter_rng) : 0.0); };

  Recorder rec(spec);
  WorldState state = spec.initial;
  ActionSchedule schedule(spec.config.offset_k);
  std::priority_queue<SimEvent, std::vector<SimEvent>, std::greater<>> events;
  std::uint64_t seq = 0;
  std::map<std::int64_t, Observation> in_flight;
  double last_obs_arrival = 0.0;
  double last_chunk_arrival = 0.0;

  auto emit_observation = [&](double now, Observation obs) {
    double at = std::max(now + delay(lat.obs_delay_ms), last_obs_arrival);
    last_obs_arrival = at;
    std::int64_t tick = obs.tick;
    in_flight.emplace(tick, std::move(obs));
    events.push({at, EventType::kObsArrive, seq++, tick, std::nullopt});
  };

  client.on_start(spec.config, spec.instruction);
  std::size_t next_change = 0;
  std::optional<Observation> inbox;
  bool busy = false;

  auto start_compute = [&](double now) {
    if (busy || !inbox) return;
    Observation obs = std::move(*inbox);
    inbox.reset();
    while (next_change < spec.interrupts.size() && spec.interrupts[next_change].tick <= obs.tick) {
      client.on_instruction(spec.interrupts[next_change].text);
      ++next_change;
    }
    busy = true;
    auto chunk = client.on_observation(obs);
    double done = now + std::max(0.0, client.compute_ms(obs.tick));
    events.push({done, EventType::kClientDone, seq++, obs.tick, std::move(chunk)});
  };

  if (spec.budget_ticks <= 0) return rec.finish(state, EpisodeStatus::kTimeout);
  for (const auto& c : spec.interrupts) rec.instruction_changed(c.tick, c.text);

  emit_observation(0.0, observe(state));
  events.push({period, EventType::kTick, seq++, 0, std::nullopt});
  std::optional<EpisodeStatus> terminal;

  while (!events.empty()) {
    SimEvent ev = events.top();
    events.pop();
    switch (ev.type) {
      case EventType::kObsArrive: {
        auto it = in_flight.find(ev.tick);
        if (inbox) ++rec.metrics().observations_dropped;
        inbox = std::move(it->second);
        in_flight.erase(it);
        start_compute(ev.time);
        break;
      }
      case EventType::kClientDone: {
        busy = false;
        if (ev.chunk) {
          double at = std::max(ev.time + delay(lat.action_delay_ms), last_chunk_arrival);
          last_chunk_arrival = at;
          events.push({at, EventType::kChunkArrive, seq++, ev.tick, std::move(ev.chunk)});
        }
        start_compute(ev.time);
        break;
      }
      case EventType::kChunkArrive: {
        ++rec.metrics().chunks_received;
        if (!schedule.install(*ev.chunk)) ++rec.metrics().stale_chunks;
        break;
      }
      case EventType::kTick: {
        auto applied = schedule.take(ev.tick);
        Observation obs = advance(state, applied.action);
        rec.on_tick(applied, obs);
        if (spec.monitor) terminal = spec.monitor(state, applied.action, obs);
        if (terminal || state.tick >= spec.budget_ticks) {
          return rec.finish(state, terminal.value_or(EpisodeStatus::kTimeout));
        }
        emit_observation(ev.time, std::move(obs));
        events.push({ev.time + period, EventType::kTick, seq++, state.tick, std::nullopt});
        break;
      }
    }
  }
  return rec.finish(state, EpisodeStatus::kTimeout);
}

// ---------------------------------------------------------------------------
// Channels

namespace {

struct PipeState {
  std::mutex mu;
  std::condition_variable cv;
  std::array<std::deque<Message>, 2> queues;
  bool closed = false;
};

class PipeEnd : public Channel {
 public:
  PipeEnd(std::shared_ptr<PipeState> s, int side) : s_(std::move(s)), side_(side) {}
  ~PipeEnd() override { close(); }

  bool send(const Message& msg) override {
    std::lock_guard lock(s_->mu);
    if (s_->closed) return false;
    s_->queues[static_cast<std::size_t>(1 - side_)].push_back(msg);
    s_->cv.notify_all();
    return true;
  }

  std::optional<Message> receive(std::chrono::milliseconds timeout) override {
    std::unique_lock lock(s_->mu);
    auto& q = s_->queues[static_cast<std::size_t>(side_)];
    s_->cv.wait_for(lock, timeout, [&] { return !q.empty() || s_->closed; });
    if (q.empty()) return std::nullopt;
    Message m = std::move(q.front());
    q.pop_front();
    return m;
  }

  bool closed() const override {
    std::lock_guard lock(s_->mu);
    return s_->closed && s_->queues[static_cast<std::size_t>(side_)].empty();
  }

  void close() override {
    std::lock_guard lock(s_->mu);
    s_->closed = true;
    s_->cv.notify_all();
  }

 private:
  std::shared_ptr<PipeState> s_;
  int side_;
};

class SocketChannel : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {}
  ~SocketChannel() override {
    close();
    ::close(fd_);
  }

  bool send(const Message& msg) override {
    auto bytes = encode(msg);
    std::lock_guard lock(write_mu_);
    if (closed_) return false;
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        closed_ = true;
        return false;
      }
      sent += static_cast<std::size_t>(n);
    }
    return true;
  }

  std::optional<Message> receive(std::chrono::milliseconds timeout) override {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      if (auto m = take_buffered()) return m;
      if (closed_) return std::nullopt;
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() < 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      int r = ::poll(&p, 1, static_cast<int>(left.count()));
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) return std::nullopt;
      std::uint8_t buf[4096];
      ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
      if (n <= 0) {
        closed_ = true;
        continue;
      }
      buffer_.insert(buffer_.end(), buf, buf + n);
    }
  }

  bool closed() const override { return closed_ && !complete_frame_buffered(); }

  void close() override {
    if (!closed_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  bool complete_frame_buffered() const {
    auto size = frame_size(buffer_);
    return size && buffer_.size() >= *size;
  }

  std::optional<Message> take_buffered() {
    std::optional<std::size_t> size;
    try {
      size = frame_size(buffer_);
    } catch (const DecodeError&) {
      closed_ = true;
      buffer_.clear();
      throw;
    }
    if (!size || buffer_.size() < *size) return std::nullopt;
    Message m = decode(std::span<const std::uint8_t>(buffer_.data(), *size));
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(*size));
    return m;
  }

  int fd_;
  std::atomic<bool> closed_{false};
  std::mutex write_mu_;
  std::vector<std::uint8_t> buffer_;
};

}  // namespace

std::pair<std::shared_ptr<Channel>, std::shared_ptr<Channel>> make_channel_pair() {
  auto s = std::make_shared<PipeState>();
  return {std::make_shared<PipeEnd>(s, 0), std::make_shared<PipeEnd>(s, 1)};
}

std::shared_ptr<Channel> make_socket_channel(int fd) { return std::make_shared<SocketChannel>(fd); }

// ---------------------------------------------------------------------------
// Wall-clock driver

SessionResult run_realtime_session(const SessionSpec& spec, Channel& channel, const RealtimeOptions& options) {
  using Clock = std::chrono::steady_clock;
  spec.config.validate();
  const auto period = std::chrono::duration<double, std::milli>(spec.config.tick_ms());
  const auto& lat = spec.config.latency;
  std::mt19937_64 jitter_rng(spec.jitter_seed);
  std::uniform_real_distribution<double> jitter(0.0, lat.jitter_ms);
  auto delay = [&](double base) {
    return std::chrono::duration<double, std::milli>(base + (lat.jitter_ms > 0 ? jitter(jitter_rng) : 0.0));
  };

  Recorder rec(spec);
  WorldState state = spec.initial;
  ActionSchedule schedule(spec.config.offset_k);
  std::unique_ptr<TrajectoryWriter> writer;
  if (!options.record_path.empty()) {
    TrajectoryHeader h;
    h.world = state.world;
    h.seed = spec.seed;
    h.task_id = spec.task_id;
    h.config = spec.config;
    h.role = spec.role;
    h.initial_state = save(state);
    writer = std::make_unique<TrajectoryWriter>(options.record_path, h);
  }

  // Injected latency: messages are held until their release time.
  std::deque<std::pair<Clock::time_point, Message>> outbound;
  std::deque<std::pair<Clock::time_point, ActionChunk>> inbound;

  auto flush_outbound = [&](Clock::time_point now) {
    while (!outbound.empty() && outbound.front().first <= now) {
      if (!channel.send(outbound.front().second)) return false;
      outbound.pop_front();
    }
    return true;
  };

  auto end_with = [&](EpisodeStatus status, EndReason reason) {
    SessionResult r = rec.finish(state, status, reason);
    EndEpisode end{reason, state.tick};
    channel.send(end);
    if (writer) {
      for (const auto& s : r.trajectory.segments) writer->append_segment(s);
      writer->append_end(end);
      writer->close();
    }
    return r;
  };

  channel.send(Hello{kProtocolVersion, spec.role, "simactl"});
  channel.send(spec.config);
  channel.send(Instruction{spec.instruction});
  if (spec.budget_ticks <= 0) return end_with(EpisodeStatus::kTimeout, EndReason::kTimeout);
  for (const auto& c : spec.interrupts) rec.instruction_changed(c.tick, c.text);

  const auto start = Clock::now();
  outbound.emplace_back(start + std::chrono::duration_cast<Clock::duration>(delay(lat.obs_delay_ms)), observe(state));
  std::size_t next_change = 0;

  for (std::int64_t tau = 0; tau < spec.budget_ticks; ++tau) {
    const auto deadline = start + std::chrono::duration_cast<Clock::duration>(period * static_cast<double>(tau + 1));
    while (true) {
      auto now = Clock::now();
      if (!flush_outbound(now)) return end_with(EpisodeStatus::kFailure, EndReason::kDisconnect);
      while (!inbound.empty() && inbound.front().first <= now) {
        ++rec.metrics().chunks_received;
        if (!schedule.install(inbound.front().second)) ++rec.metrics().stale_chunks;
        inbound.pop_front();
      }
      if (now >= deadline) break;
      if (options.stop && options.stop->load()) return end_with(EpisodeStatus::kFailure, EndReason::kShutdown);
      auto wake = deadline;
      if (!outbound.empty()) wake = std::min(wake, outbound.front().first);
      if (!inbound.empty()) wake = std::min(wake, inbound.front().first);
      auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(wake - now);
      auto msg = channel.receive(std::max(wait, std::chrono::milliseconds(0)));
      if (!msg) {
        if (channel.closed()) return end_with(EpisodeStatus::kFailure, EndReason::kDisconnect);
        continue;
      }
      if (auto* chunk = std::get_if<ActionChunk>(&*msg)) {
        inbound.emplace_back(Clock::now() + std::chrono::duration_cast<Clock::duration>(delay(lat.action_delay_ms)),
                             std::move(*chunk));
      } else if (auto* intr = std::get_if<Interrupt>(&*msg)) {
        rec.instruction_changed(tau + 1, intr->text);
      } else if (auto* ins = std::get_if<Instruction>(&*msg)) {
        rec.instruction_changed(tau + 1, ins->text);
      } else if (std::holds_alternative<EndEpisode>(*msg)) {
        return end_with(EpisodeStatus::kFailure, EndReason::kDisconnect);
      }
    }

    auto step_start = Clock::now();
    auto applied = schedule.take(tau);
    Observation obs = advance(state, applied.action);
    rec.on_tick(applied, obs);
    if (writer) writer->append_step(applied.action, obs);
    std::optional<EpisodeStatus> terminal;
    if (spec.monitor) terminal = spec.monitor(state, applied.action, obs);
    if (Clock::now() - step_start > period) ++rec.metrics().overruns;
    if (terminal) return end_with(*terminal, end_reason_for(*terminal));
    if (state.tick >= spec.budget_ticks) break;

    while (next_change < spec.interrupts.size() && spec.interrupts[next_change].tick <= state.tick) {
      channel.send(Interrupt{spec.interrupts[next_change].text});
      ++next_change;
    }
    outbound.emplace_back(Clock::now() + std::chrono::duration_cast<Clock::duration>(delay(lat.obs_delay_ms)),
                          std::move(obs));
  }
  return end_with(EpisodeStatus::kTimeout, EndReason::kTimeout);
}

std::optional<EndEpisode> drive_client(Channel& channel, Client& client) {
  SessionConfig config;
  bool started = false;
  while (true) {
    auto msg = channel.receive(std::chrono::milliseconds(100));
    if (!msg) {
      if (channel.closed()) return std::nullopt;
      continue;
    }
    if (auto* c = std::get_if<SessionConfig>(&*msg)) {
      config = *c;
    } else if (auto* ins = std::get_if<Instruction>(&*msg)) {
      if (!started) {
        client.on_start(config, ins->text);
        started = true;
      } else {
        client.on_instruction(ins->text);
      }
    } else if (auto* intr = std::get_if<Interrupt>(&*msg)) {
      client.on_instruction(intr->text);
    } else if (auto* end = std::get_if<EndEpisode>(&*msg)) {
      return *end;
    } else if (auto* obs = std::get_if<Observation>(&*msg)) {
      // Coalesce: only the newest waiting observation is worth computing on.
      Observation newest = std::move(*obs);
      while (auto more = channel.receive(std::chrono::milliseconds(0))) {
        if (auto* o = std::get_if<Observation>(&*more)) {
          newest = std::move(*o);
        } else if (auto* e = std::get_if<EndEpisode>(&*more)) {
          return *e;
        } else if (auto* i = std::get_if<Interrupt>(&*more)) {
          client.on_instruction(i->text);
        }
      }
      auto chunk = client.on_observation(newest);
      double ms = client.compute_ms(newest.tick);
      if (ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
      if (chunk && !channel.send(*chunk)) return std::nullopt;
    }
  }
}

}  // namespace sima::net

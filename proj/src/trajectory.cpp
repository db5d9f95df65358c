#include <algorithm>
#include <cerrno>
#include <cstring>
#include <map>

#include "sima/netproto.hpp"

namespace sima::net {

namespace {

constexpr std::string_view kTrajMagic = "MWTR";
constexpr std::string_view kIndexMagic = "MWTI";
constexpr std::uint16_t kTrajVersion = 1;

enum RecordType : std::uint8_t { kStepRecord = 1, kSegmentRecord = 2, kEndRecord = 3 };

std::vector<std::uint8_t> header_bytes(const TrajectoryHeader& h) {
  ByteWriter payload;
  payload.u8(static_cast<std::uint8_t>(h.world));
  payload.u64(h.seed);
  payload.str(h.task_id);
  payload.i32(h.config.tick_hz);
  payload.f64(h.config.latency.obs_delay_ms);
  payload.f64(h.config.latency.action_delay_ms);
  payload.f64(h.config.latency.jitter_ms);
  payload.i32(h.config.offset_k);
  payload.boolean(h.config.record);
  payload.u8(static_cast<std::uint8_t>(h.role));
  payload.bytes(h.initial_state);

  ByteWriter w;
  w.raw(kTrajMagic);
  w.u16(kTrajVersion);
  w.bytes(payload.data());
  return w.take();
}

std::vector<std::uint8_t> step_body(const ActionEvent& a, const Observation& o) {
  // Reuse the wire encoding for both halves; it is canonical and versioned.
  ByteWriter w;
  w.bytes(encode(ActionChunk{a.tick, {a}}));
  w.bytes(encode(o));
  return w.take();
}

std::vector<std::uint8_t> segment_body(const InstructionSegment& s) {
  ByteWriter w;
  w.i64(s.t0);
  w.i64(s.t1);
  w.str(s.text);
  w.u8(static_cast<std::uint8_t>(s.source));
  return w.take();
}

std::vector<std::uint8_t> end_body(const EndEpisode& e) { return encode(e); }

void put_record(ByteWriter& w, std::uint8_t type, const std::vector<std::uint8_t>& body) {
  w.u8(type);
  w.bytes(body);
}

}  // namespace

Frame Trajectory::frame_at(std::int64_t t) const {
  if (t < 0 || t > ticks()) throw Error("frame_at: tick " + std::to_string(t) + " out of range");
  if (t == 0) return render(initial_state());
  return observations[static_cast<std::size_t>(t - 1)].frame;
}

void Trajectory::validate() const {
  if (observations.size() != actions.size()) {
    throw Error("trajectory has " + std::to_string(observations.size()) + " observations for " +
                std::to_string(actions.size()) + " ticks");
  }
  for (std::size_t t = 0; t < actions.size(); ++t) {
    if (actions[t].tick != static_cast<std::int64_t>(t)) throw Error("action stream out of order");
    if (observations[t].tick != static_cast<std::int64_t>(t) + 1) {
      throw Error("observation stream out of order");
    }
  }
  std::map<SegmentSource, std::int64_t> last_end;
  for (const auto& s : segments) {
    if (s.t0 < 0 || s.t1 <= s.t0) throw Error("segment with empty span");
    auto it = last_end.find(s.source);
    if (it != last_end.end() && s.t0 < it->second) throw Error("overlapping segments for one source");
    last_end[s.source] = s.t1;
  }
}

ReplayDivergence::ReplayDivergence(std::int64_t tick, const std::string& detail)
    : Error("replay diverged at tick " + std::to_string(tick) + ": " + detail), tick_(tick) {}

std::vector<std::uint64_t> replay(const Trajectory& traj) {
  std::vector<std::uint64_t> hashes;
  if (traj.actions.empty()) return hashes;
  if (traj.observations.size() != traj.actions.size()) {
    throw ReplayDivergence(0, "stream lengths differ");
  }
  WorldState state = traj.initial_state();
  hashes.reserve(traj.actions.size());
  for (std::size_t t = 0; t < traj.actions.size(); ++t) {
    Observation obs;
    try {
      obs = advance(state, traj.actions[t]);
    } catch (const ProtocolError& e) {
      throw ReplayDivergence(static_cast<std::int64_t>(t), e.what());
    }
    std::uint64_t h = frame_hash(obs.frame);
    if (h != frame_hash(traj.observations[t].frame)) {
      throw ReplayDivergence(static_cast<std::int64_t>(t), "frame hash mismatch");
    }
    hashes.push_back(h);
  }
  return hashes;
}

// ---------------------------------------------------------------------------
// Container

TrajectoryWriter::TrajectoryWriter(const std::string& path, const TrajectoryHeader& header)
    : path_(path), file_(std::fopen(path.c_str(), "wb"), &std::fclose) {
  if (!file_) throw Error("cannot write " + path + ": " + std::strerror(errno));
  auto bytes = header_bytes(header);
  std::fwrite(bytes.data(), 1, bytes.size(), file_.get());
  offset_ = bytes.size();
}

TrajectoryWriter::~TrajectoryWriter() {
  try {
    close();
  } catch (...) {
  }
}

void TrajectoryWriter::record(std::uint8_t type, const std::vector<std::uint8_t>& body) {
  if (closed_) throw Error("trajectory writer already closed");
  ByteWriter w;
  put_record(w, type, body);
  index_.emplace_back(type, offset_);
  if (std::fwrite(w.data().data(), 1, w.size(), file_.get()) != w.size()) {
    throw Error("short write to " + path_);
  }
  offset_ += w.size();
}

void TrajectoryWriter::append_step(const ActionEvent& applied, const Observation& obs) {
  record(kStepRecord, step_body(applied, obs));
}

void TrajectoryWriter::append_segment(const InstructionSegment& seg) {
  record(kSegmentRecord, segment_body(seg));
}

void TrajectoryWriter::append_end(const EndEpisode& end) { record(kEndRecord, end_body(end)); }

void TrajectoryWriter::flush() {
  if (!closed_) std::fflush(file_.get());
}

void TrajectoryWriter::close() {
  if (closed_) return;
  closed_ = true;
  file_.reset();
  ByteWriter w;
  w.raw(kIndexMagic);
  w.u16(kTrajVersion);
  w.u32(static_cast<std::uint32_t>(index_.size()));
  for (auto [type, off] : index_) {
    w.u8(type);
    w.u64(off);
  }
  write_file_bytes(path_ + ".idx", w.data());
}

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj) {
  ByteWriter w;
  w.raw(header_bytes(traj.header));
  for (std::size_t t = 0; t < traj.actions.size(); ++t) {
    put_record(w, kStepRecord, step_body(traj.actions[t], traj.observations.at(t)));
  }
  for (const auto& s : traj.segments) put_record(w, kSegmentRecord, segment_body(s));
  if (traj.end) put_record(w, kEndRecord, end_body(*traj.end));
  return w.take();
}

Trajectory decode_trajectory(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(std::min<std::size_t>(4, r.remaining()));
  if (magic.size() < 4 || !std::equal(magic.begin(), magic.end(), kTrajMagic.begin())) {
    throw DecodeError(DecodeErrorKind::kBadMagic, 0, "expected MWTR");
  }
  if (r.u16() != kTrajVersion) throw DecodeError(DecodeErrorKind::kBadVersion, 4, "trajectory version");
  Trajectory traj;
  {
    std::size_t at = r.offset() + 4;
    auto payload = r.bytes();
    ByteReader h(payload, at);
    auto& hd = traj.header;
    std::uint8_t world = h.u8();
    if (world >= kWorldKindCount) h.fail(DecodeErrorKind::kMalformed, "world id");
    hd.world = static_cast<WorldKind>(world);
    hd.seed = h.u64();
    hd.task_id = h.str();
    hd.config.tick_hz = h.i32();
    hd.config.latency.obs_delay_ms = h.f64();
    hd.config.latency.action_delay_ms = h.f64();
    hd.config.latency.jitter_ms = h.f64();
    hd.config.offset_k = h.i32();
    hd.config.record = h.boolean();
    std::uint8_t role = h.u8();
    if (role > static_cast<std::uint8_t>(Role::kAgent)) h.fail(DecodeErrorKind::kMalformed, "role");
    hd.role = static_cast<Role>(role);
    hd.initial_state = h.bytes();
    h.expect_done();
  }
  while (!r.done()) {
    std::uint8_t type = r.u8();
    std::size_t at = r.offset() + 4;
    auto body = r.bytes();
    ByteReader b(body, at);
    switch (type) {
      case kStepRecord: {
        auto chunk = std::get<ActionChunk>(decode(b.bytes()));
        auto obs = std::get<Observation>(decode(b.bytes()));
        if (chunk.actions.size() != 1) b.fail(DecodeErrorKind::kMalformed, "step record action count");
        traj.actions.push_back(chunk.actions[0]);
        for (const auto& e : obs.text_events) traj.text_events.push_back(e);
        traj.observations.push_back(std::move(obs));
        break;
      }
      case kSegmentRecord: {
        InstructionSegment s;
        s.t0 = b.i64();
        s.t1 = b.i64();
        s.text = b.str();
        std::uint8_t src = b.u8();
        if (src > static_cast<std::uint8_t>(SegmentSource::kScripted)) {
          b.fail(DecodeErrorKind::kMalformed, "segment source");
        }
        s.source = static_cast<SegmentSource>(src);
        traj.segments.push_back(std::move(s));
        break;
      }
      case kEndRecord: traj.end = std::get<EndEpisode>(decode(body)); continue;
      default: r.fail(DecodeErrorKind::kMalformed, "record type " + std::to_string(type));
    }
    b.expect_done();
  }
  return traj;
}

void write_trajectory(const std::string& path, const Trajectory& traj) {
  TrajectoryWriter w(path, traj.header);
  for (std::size_t t = 0; t < traj.actions.size(); ++t) w.append_step(traj.actions[t], traj.observations.at(t));
  for (const auto& s : traj.segments) w.append_segment(s);
  if (traj.end) w.append_end(*traj.end);
  w.close();
}

Trajectory read_trajectory(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return decode_trajectory(bytes);
}

std::vector<std::pair<std::uint8_t, std::uint64_t>> read_trajectory_index(const std::string& path) {
  auto bytes = read_file_bytes(path + ".idx");
  ByteReader r(bytes);
  auto magic = r.raw(std::min<std::size_t>(4, r.remaining()));
  if (magic.size() < 4 || !std::equal(magic.begin(), magic.end(), kIndexMagic.begin())) {
    throw DecodeError(DecodeErrorKind::kBadMagic, 0, "expected MWTI");
  }
  if (r.u16() != kTrajVersion) throw DecodeError(DecodeErrorKind::kBadVersion, 4, "index version");
  std::uint32_t n = r.u32();
  std::vector<std::pair<std::uint8_t, std::uint64_t>> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint8_t type = r.u8();
    out.emplace_back(type, r.u64());
  }
  r.expect_done();
  return out;
}

}  // namespace sima::net

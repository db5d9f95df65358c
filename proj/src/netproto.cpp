#include "sima/netproto.hpp"

#include <algorithm>

namespace sima::net {

namespace {

constexpr std::array<std::string_view, 7> kRoleNames = {"player",    "setter", "solver", "instructor",
                                                        "annotator", "judge",  "agent"};
constexpr std::array<std::string_view, 6> kEndNames = {"success",            "failure",    "timeout",
                                                       "distractor_failure", "disconnect", "shutdown"};
constexpr std::array<std::string_view, kVariantCount> kMessageNames = {
    "Hello",     "SessionConfig", "Observation", "Action",     "Instruction", "Reset",
    "LoadState", "TextEvent",     "Interrupt",   "EndEpisode", "JudgeRequest"};
constexpr std::array<std::string_view, 4> kSourceNames = {"live", "posthoc", "setter", "scripted"};

}  // namespace

std::string_view role_name(Role r) { return kRoleNames.at(static_cast<std::size_t>(r)); }

std::optional<Role> role_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRoleNames.size(); ++i) {
    if (kRoleNames[i] == name) return static_cast<Role>(i);
  }
  return std::nullopt;
}

std::string_view end_reason_name(EndReason r) { return kEndNames.at(static_cast<std::size_t>(r)); }

EndReason end_reason_for(EpisodeStatus s) {
  switch (s) {
    case EpisodeStatus::kSuccess: return EndReason::kSuccess;
    case EpisodeStatus::kFailure: return EndReason::kFailure;
    case EpisodeStatus::kTimeout: return EndReason::kTimeout;
    case EpisodeStatus::kDistractorFailure: return EndReason::kDistractorFailure;
  }
  return EndReason::kFailure;
}

std::string_view segment_source_name(SegmentSource s) {
  return kSourceNames.at(static_cast<std::size_t>(s));
}

std::optional<SegmentSource> segment_source_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kSourceNames.size(); ++i) {
    if (kSourceNames[i] == name) return static_cast<SegmentSource>(i);
  }
  return std::nullopt;
}

std::string_view message_name(const Message& m) { return kMessageNames.at(m.index()); }

void SessionConfig::validate() const {
  if (tick_hz <= 0) throw ConfigError("tick_hz must be positive");
  if (latency.obs_delay_ms < 0 || latency.action_delay_ms < 0 || latency.jitter_ms < 0) {
    throw ConfigError("latency delays must be non-negative");
  }
  if (offset_k < 0) throw ConfigError("offset_k must be non-negative");
}

// ---------------------------------------------------------------------------
// Codec

namespace {

void put_action(ByteWriter& w, const ActionEvent& a) {
  w.i64(a.tick);
  w.u16(a.keys.bits());
  w.i8(a.mouse_dx);
  w.i8(a.mouse_dy);
  w.u8(static_cast<std::uint8_t>((a.left_button ? 1 : 0) | (a.right_button ? 2 : 0)));
}

ActionEvent get_action(ByteReader& r) {
  ActionEvent a;
  a.tick = r.i64();
  a.keys = KeySet(r.u16());
  a.mouse_dx = r.i8();
  a.mouse_dy = r.i8();
  std::uint8_t buttons = r.u8();
  if (buttons > 3) r.fail(DecodeErrorKind::kMalformed, "button bits");
  a.left_button = buttons & 1;
  a.right_button = buttons & 2;
  if (a.tick < 0 || std::abs(a.mouse_dx) > kMouseMax || std::abs(a.mouse_dy) > kMouseMax) {
    r.fail(DecodeErrorKind::kMalformed, "action field out of range");
  }
  return a;
}

void put_config(ByteWriter& w, const SessionConfig& c) {
  w.i32(c.tick_hz);
  w.f64(c.latency.obs_delay_ms);
  w.f64(c.latency.action_delay_ms);
  w.f64(c.latency.jitter_ms);
  w.i32(c.offset_k);
  w.boolean(c.record);
}

SessionConfig get_config(ByteReader& r) {
  SessionConfig c;
  c.tick_hz = r.i32();
  c.latency.obs_delay_ms = r.f64();
  c.latency.action_delay_ms = r.f64();
  c.latency.jitter_ms = r.f64();
  c.offset_k = r.i32();
  c.record = r.boolean();
  return c;
}

/// Element counts are bounded by the bytes left so corrupt input cannot
/// trigger huge allocations.
std::uint32_t get_count(ByteReader& r, std::size_t min_element_size) {
  std::uint32_t n = r.u32();
  if (static_cast<std::uint64_t>(n) * min_element_size > r.remaining()) {
    r.fail(DecodeErrorKind::kTruncated, "count " + std::to_string(n) + " exceeds buffer");
  }
  return n;
}

void put_observation(ByteWriter& w, const Observation& o) {
  w.i64(o.tick);
  for (const auto& c : o.frame.cells) {
    w.u8(c.symbol);
    w.u8(c.color);
  }
  w.u32(static_cast<std::uint32_t>(o.frame.overlay_text.size()));
  for (const auto& s : o.frame.overlay_text) w.str(s);
  w.u32(static_cast<std::uint32_t>(o.text_events.size()));
  for (const auto& e : o.text_events) {
    w.i64(e.tick);
    w.str(e.text);
  }
}

Observation get_observation(ByteReader& r) {
  Observation o;
  o.tick = r.i64();
  for (auto& c : o.frame.cells) {
    c.symbol = r.u8();
    c.color = r.u8();
    if (c.symbol >= kSymbolCount || c.color >= kColorCount) {
      r.fail(DecodeErrorKind::kMalformed, "cell id out of range");
    }
  }
  std::uint32_t n = get_count(r, 4);
  for (std::uint32_t i = 0; i < n; ++i) o.frame.overlay_text.push_back(r.str());
  n = get_count(r, 12);
  for (std::uint32_t i = 0; i < n; ++i) {
    TextEvent e;
    e.tick = r.i64();
    e.text = r.str();
    o.text_events.push_back(std::move(e));
  }
  return o;
}

struct BodyEncoder {
  ByteWriter& w;
  void operator()(const Hello& m) {
    w.u16(m.version);
    w.u8(static_cast<std::uint8_t>(m.role));
    w.str(m.client_name);
  }
  void operator()(const SessionConfig& m) { put_config(w, m); }
  void operator()(const Observation& m) { put_observation(w, m); }
  void operator()(const ActionChunk& m) {
    w.i64(m.computed_at);
    w.u32(static_cast<std::uint32_t>(m.actions.size()));
    for (const auto& a : m.actions) put_action(w, a);
  }
  void operator()(const Instruction& m) { w.str(m.text); }
  void operator()(const Reset& m) {
    w.str(m.task_id);
    w.u64(m.seed);
  }
  void operator()(const LoadState& m) { w.bytes(m.save_bytes); }
  void operator()(const TextEvent& m) {
    w.i64(m.tick);
    w.str(m.text);
  }
  void operator()(const Interrupt& m) { w.str(m.text); }
  void operator()(const EndEpisode& m) {
    w.u8(static_cast<std::uint8_t>(m.reason));
    w.i64(m.tick);
  }
  void operator()(const JudgeRequest& m) {
    w.str(m.episode_id);
    w.str(m.rubric);
  }
};

Message decode_body(std::uint8_t variant, ByteReader& r) {
  switch (variant) {
    case 0: {
      Hello h;
      h.version = r.u16();
      std::uint8_t role = r.u8();
      if (role >= kRoleNames.size()) r.fail(DecodeErrorKind::kMalformed, "role");
      h.role = static_cast<Role>(role);
      h.client_name = r.str();
      return h;
    }
    case 1: return get_config(r);
    case 2: return get_observation(r);
    case 3: {
      ActionChunk c;
      c.computed_at = r.i64();
      std::uint32_t n = get_count(r, 13);
      for (std::uint32_t i = 0; i < n; ++i) c.actions.push_back(get_action(r));
      return c;
    }
    case 4: return Instruction{r.str()};
    case 5: {
      Reset m;
      m.task_id = r.str();
      m.seed = r.u64();
      return m;
    }
    case 6: return LoadState{r.bytes()};
    case 7: {
      TextEvent e;
      e.tick = r.i64();
      e.text = r.str();
      return e;
    }
    case 8: return Interrupt{r.str()};
    case 9: {
      EndEpisode m;
      std::uint8_t reason = r.u8();
      if (reason >= kEndNames.size()) r.fail(DecodeErrorKind::kMalformed, "end reason");
      m.reason = static_cast<EndReason>(reason);
      m.tick = r.i64();
      return m;
    }
    case 10: {
      JudgeRequest m;
      m.episode_id = r.str();
      m.rubric = r.str();
      return m;
    }
    default: break;
  }
  r.fail(DecodeErrorKind::kUnknownVariant, "variant " + std::to_string(variant));
}

struct WireHeader {
  std::uint8_t variant;
  std::uint32_t body_len;
};

WireHeader read_header(ByteReader& r) {
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kWireMagic.begin())) {
    throw DecodeError(DecodeErrorKind::kBadMagic, 0, "expected SMWP");
  }
  std::uint16_t version = r.u16();
  if (version != kProtocolVersion) {
    throw DecodeError(DecodeErrorKind::kBadVersion, 4,
                      "peer speaks version " + std::to_string(version) + ", this build speaks " +
                          std::to_string(kProtocolVersion));
  }
  std::uint8_t variant = r.u8();
  if (variant >= kVariantCount) {
    throw DecodeError(DecodeErrorKind::kUnknownVariant, 6,
                      "variant " + std::to_string(variant) + " unknown to protocol version " +
                          std::to_string(kProtocolVersion));
  }
  return {variant, r.u32()};
}

}  // namespace

std::vector<std::uint8_t> encode(const Message& msg) {
  ByteWriter w;
  w.raw(kWireMagic);
  w.u16(kProtocolVersion);
  w.u8(static_cast<std::uint8_t>(msg.index()));
  w.u32(0);
  std::visit(BodyEncoder{w}, msg);
  w.patch_u32(7, static_cast<std::uint32_t>(w.size() - kWireHeaderSize));
  return w.take();
}

Message decode(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  WireHeader h = read_header(r);
  if (r.remaining() < h.body_len) {
    throw DecodeError(DecodeErrorKind::kTruncated, bytes.size(),
                      "body needs " + std::to_string(h.body_len) + " bytes");
  }
  if (r.remaining() > h.body_len) {
    throw DecodeError(DecodeErrorKind::kMalformed, kWireHeaderSize + h.body_len, "trailing bytes");
  }
  ByteReader body(r.raw(h.body_len), kWireHeaderSize);
  Message m = decode_body(h.variant, body);
  body.expect_done();
  return m;
}

std::optional<std::size_t> frame_size(std::span<const std::uint8_t> prefix) {
  if (prefix.size() < kWireHeaderSize) {
    // Reject garbage as soon as the magic bytes disagree.
    for (std::size_t i = 0; i < std::min<std::size_t>(prefix.size(), 4); ++i) {
      if (prefix[i] != kWireMagic[i]) throw DecodeError(DecodeErrorKind::kBadMagic, 0, "expected SMWP");
    }
    return std::nullopt;
  }
  ByteReader r(prefix.first(kWireHeaderSize));
  WireHeader h = read_header(r);
  return kWireHeaderSize + h.body_len;
}

// ---------------------------------------------------------------------------
// Scheduling

std::vector<std::pair<std::int64_t, ActionEvent>> schedule_offset_action(
    const std::vector<ActionEvent>& chunk, std::int64_t computed_at, int offset_k) {
  std::vector<std::pair<std::int64_t, ActionEvent>> out;
  out.reserve(chunk.size());
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    std::int64_t t = computed_at + offset_k + static_cast<std::int64_t>(i);
    out.emplace_back(t, restamp(chunk[i], t));
  }
  return out;
}

bool ActionSchedule::install(const ActionChunk& chunk) {
  if (chunk.computed_at <= newest_stamp_) return false;
  newest_stamp_ = chunk.computed_at;
  auto slots = schedule_offset_action(chunk.actions, chunk.computed_at, offset_k_);
  if (slots.empty()) return true;
  slots_.erase(slots_.lower_bound(slots.front().first), slots_.end());
  for (auto& [t, a] : slots) slots_[t] = {a, chunk.computed_at};
  return true;
}

ActionSchedule::Applied ActionSchedule::take(std::int64_t tick) {
  slots_.erase(slots_.begin(), slots_.lower_bound(tick));
  Applied out;
  auto it = slots_.find(tick);
  if (it != slots_.end()) {
    out.action = it->second.first;
    out.scheduled = true;
    out.computed_at = it->second.second;
    slots_.erase(it);
  } else {
    out.action = held_action(last_, tick);
  }
  last_ = out.action;
  return out;
}

}  // namespace sima::net

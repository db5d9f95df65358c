#include "sima/datapipe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "sima/evalharness.hpp"
#include "sima/worlds.hpp"

namespace sima::data {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Annotations

void AnnotationSegment::validate() const {
  if (trajectory_id.empty()) throw SpecError("annotation without trajectory_id");
  if (t0 < 0 || t1 <= t0) {
    throw SpecError("annotation span [" + std::to_string(t0) + ", " + std::to_string(t1) + ") is empty");
  }
  if (t1 - t0 > kMaxSegmentTicks) {
    throw SpecError("annotation spans " + std::to_string(t1 - t0) + " ticks, limit is " +
                    std::to_string(kMaxSegmentTicks));
  }
  if (source == net::SegmentSource::kLive) throw SpecError("annotation source must be posthoc, setter or scripted");
}

std::string annotation_to_json(const AnnotationSegment& s) {
  nlohmann::ordered_json j;
  j["trajectory_id"] = s.trajectory_id;
  j["t0"] = s.t0;
  j["t1"] = s.t1;
  j["instruction"] = s.instruction;
  j["source"] = net::segment_source_name(s.source);
  j["annotator_id"] = s.annotator_id;
  return j.dump();
}

std::vector<AnnotationSegment> parse_annotations(const std::string& text) {
  std::vector<AnnotationSegment> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "annotation line " + std::to_string(lineno);
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw SpecError(where + " is not JSON");
    AnnotationSegment s;
    try {
      s.trajectory_id = j.at("trajectory_id").get<std::string>();
      s.t0 = j.at("t0").get<std::int64_t>();
      s.t1 = j.at("t1").get<std::int64_t>();
      s.instruction = j.at("instruction").get<std::string>();
      auto src = net::segment_source_from_name(j.at("source").get<std::string>());
      if (!src) throw SpecError(where + ": unknown source");
      s.source = *src;
      s.annotator_id = j.value("annotator_id", "");
    } catch (const json::exception& e) {
      throw SpecError(where + ": " + e.what());
    }
    try {
      s.validate();
    } catch (const SpecError& e) {
      throw SpecError(where + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<AnnotationSegment> segments_of(const net::Trajectory& traj, const std::string& trajectory_id) {
  std::vector<AnnotationSegment> out;
  for (const auto& s : traj.segments) {
    AnnotationSegment a;
    a.trajectory_id = trajectory_id;
    a.t0 = s.t0;
    a.t1 = s.t1;
    a.instruction = s.text;
    // A live instruction came from whoever was instructing during the session.
    a.source = s.source == net::SegmentSource::kLive ? net::SegmentSource::kSetter : s.source;
    a.annotator_id = std::string(net::role_name(traj.header.role));
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

FilterResult filter(const net::Trajectory& traj, const std::vector<AnnotationSegment>& segments,
                    const FilterRules& rules) {
  FilterResult out;
  try {
    traj.validate();
    net::replay(traj);
  } catch (const Error& e) {
    out.report.rejected = true;
    out.report.reject_reason = e.what();
    return out;
  }

  const std::int64_t n = traj.ticks();
  std::vector<std::uint64_t> hashes(static_cast<std::size_t>(n + 1));
  for (std::int64_t t = 0; t <= n; ++t) hashes[static_cast<std::size_t>(t)] = frame_hash(traj.frame_at(t));

  // Idle runs over the whole trajectory, so a second pass sees the same runs.
  std::vector<bool> idle(static_cast<std::size_t>(n), false);
  for (std::int64_t t = 0; t < n;) {
    auto quiet = [&](std::int64_t u) {
      auto i = static_cast<std::size_t>(u);
      return traj.actions[i].is_noop() && hashes[i] == hashes[i + 1];
    };
    if (!quiet(t)) {
      ++t;
      continue;
    }
    std::int64_t end = t;
    while (end < n && quiet(end)) ++end;
    if (end - t >= rules.idle_ticks) {
      ++out.report.idle_spans;
      out.report.idle_ticks_removed += end - t;
      for (std::int64_t u = t; u < end; ++u) idle[static_cast<std::size_t>(u)] = true;
    }
    t = end;
  }

  for (const auto& seg : segments) {
    bool exempt = rules.scripted_skip_min_tokens && seg.source == net::SegmentSource::kScripted;
    if (!exempt && static_cast<int>(tokenize(seg.instruction).size()) < rules.min_tokens) {
      ++out.report.short_instructions;
      continue;
    }
    std::int64_t lo = std::max<std::int64_t>(seg.t0, 0);
    std::int64_t hi = std::min(seg.t1, n);
    std::int64_t t = lo;
    while (t < hi) {
      if (idle[static_cast<std::size_t>(t)]) {
        ++t;
        continue;
      }
      std::int64_t end = t;
      while (end < hi && !idle[static_cast<std::size_t>(end)]) ++end;
      if (end - t > rules.max_ticks) ++out.report.split_segments;
      for (std::int64_t a = t; a < end; a += rules.max_ticks) {
        AnnotationSegment piece = seg;
        piece.t0 = a;
        piece.t1 = std::min(a + rules.max_ticks, end);
        out.kept.push_back(std::move(piece));
      }
      t = end;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixtures

void DatasetManifest::validate() const {
  if (entries.empty()) throw ConfigError("manifest has no entries");
  for (const auto& e : entries) {
    if (!world_from_name(e.world)) throw ConfigError("manifest: unknown world '" + e.world + "'");
    if (!(e.weight > 0.0) || !std::isfinite(e.weight)) {
      throw ConfigError("manifest: weight of " + e.collection + " must be positive");
    }
  }
}

std::vector<double> DatasetManifest::probabilities() const {
  validate();
  double total = 0.0;
  for (const auto& e : entries) total += e.weight;
  std::vector<double> p;
  p.reserve(entries.size());
  for (const auto& e : entries) p.push_back(e.weight / total);
  return p;
}

DatasetManifest parse_manifest(const std::string& json_text) {
  auto j = json::parse(json_text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("manifest is not a JSON object");
  DatasetManifest m;
  try {
    if (j.value("format", "") != "sima-dataset-manifest") throw ConfigError("manifest: wrong format tag");
    m.preprocessing_version = j.value("preprocessing_version", "1");
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.world = e.at("world").get<std::string>();
      entry.collection = e.at("collection").get<std::string>();
      entry.path = e.value("path", "");
      entry.weight = e.value("weight", 1.0);
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = "sima-dataset-manifest";
  j["version"] = 1;
  j["preprocessing_version"] = m.preprocessing_version;
  j["seed"] = m.seed;
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    nlohmann::ordered_json o;
    o["world"] = e.world;
    o["collection"] = e.collection;
    o["path"] = e.path;
    o["weight"] = e.weight;
    j["entries"].push_back(std::move(o));
  }
  return j.dump(2) + "\n";
}

DatasetSampler::DatasetSampler(const DatasetManifest& manifest, std::vector<std::size_t> segment_counts,
                               std::uint64_t seed)
    : rng_(seed), counts_(std::move(segment_counts)) {
  manifest.validate();
  if (counts_.size() != manifest.entries.size()) throw ConfigError("segment counts do not match manifest");
  std::vector<double> w;
  for (const auto& e : manifest.entries) w.push_back(e.weight);
  pick_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
}

std::pair<std::size_t, std::size_t> DatasetSampler::next() {
  std::size_t entry = pick_(rng_);
  std::uniform_int_distribution<std::size_t> seg(0, counts_[entry] - 1);
  return {entry, seg(rng_)};
}

DatasetSampler build_dataset(const DatasetManifest& manifest, const std::vector<std::size_t>& segment_counts,
                             std::uint64_t seed) {
  manifest.validate();
  if (segment_counts.size() != manifest.entries.size()) {
    throw SpecError("segment counts do not match manifest entries");
  }
  for (std::size_t i = 0; i < segment_counts.size(); ++i) {
    if (segment_counts[i] == 0) {
      throw SpecError("collection '" + manifest.entries[i].collection + "' has weight but no segments");
    }
  }
  return DatasetSampler(manifest, segment_counts, seed);
}

// ---------------------------------------------------------------------------
// Examples

namespace {

/// Registry task that the segment's instruction refers to, if any.
std::optional<TaskSpec> task_for_segment(const net::Trajectory& traj, const std::string& instruction) {
  try {
    const TaskSpec& base = worlds::find_task(traj.header.task_id);
    if (base.instruction == instruction) return base;
    for (const auto& t : worlds::registry_list(base.world)) {
      if (t.save_state_ref == base.save_state_ref && t.instruction == instruction) return t;
    }
  } catch (const Error&) {
  }
  return std::nullopt;
}

/// Action tick at which the segment's goal was completed, or -1.
std::int64_t success_action_tick(const net::Trajectory& traj, const AnnotationSegment& seg,
                                 bool& known) {
  known = false;
  auto task = task_for_segment(traj, seg.instruction);
  if (!task || task->evaluator.kind() == EvaluatorKind::kJudged) return -1;
  WorldState state = traj.initial_state();
  for (std::int64_t t = 0; t < seg.t0; ++t) advance(state, traj.actions[static_cast<std::size_t>(t)]);
  try {
    eval::EpisodeEvaluator ev(*task, state);
    known = true;
    for (std::int64_t t = seg.t0; t < seg.t1; ++t) {
      const auto& a = traj.actions[static_cast<std::size_t>(t)];
      Observation obs = advance(state, a);
      auto v = ev.update(state, a, obs);
      if (v) return *v == EpisodeStatus::kSuccess ? t : -1;
    }
  } catch (const SpecError&) {
    known = false;
  }
  return -1;
}

}  // namespace

std::vector<TrainingExample> make_examples(const net::Trajectory& traj, const AnnotationSegment& seg,
                                           const ExampleConfig& config) {
  if (config.chunk_len <= 0 || config.stride <= 0 || config.offset_k < 0 || config.memory < 0) {
    throw ConfigError("invalid example config");
  }
  std::vector<TrainingExample> out;
  const std::int64_t n = traj.ticks();
  // Ticks before offset_k are never driven by a policy chunk.
  const std::int64_t t0 = std::max<std::int64_t>(seg.t0, config.offset_k);
  const std::int64_t t1 = std::min(seg.t1, n);
  if (t1 - t0 < 1) return out;

  bool known = false;
  AnnotationSegment clipped = seg;
  clipped.t1 = t1;
  const std::int64_t success = success_action_tick(traj, clipped, known);

  for (std::int64_t s = t0; s < t1; s += config.stride) {
    TrainingExample ex;
    ex.world = traj.header.world;
    ex.instruction = seg.instruction;
    ex.obs_tick = s - config.offset_k;
    ex.frame = traj.frame_at(ex.obs_tick);
    for (std::int64_t m = config.memory; m >= 1; --m) {
      if (ex.obs_tick - m >= 0) ex.memory.push_back(traj.frame_at(ex.obs_tick - m));
    }
    for (std::int64_t t = ex.obs_tick; t < s; ++t) ex.pending.push_back(traj.actions[static_cast<std::size_t>(t)]);
    ex.goal_known = known;
    for (int i = 0; i < config.chunk_len; ++i) {
      std::int64_t t = s + i;
      bool real = t < t1;
      ex.targets.push_back(real ? traj.actions[static_cast<std::size_t>(t)] : noop_action(t));
      ex.mask.push_back(real);
      ex.goal_label.push_back(known && success >= 0 && t >= success);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

constexpr std::uint16_t kShardVersion = 1;

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
  std::uint8_t b = r.u8();
  if (b > 3) r.fail(DecodeErrorKind::kMalformed, "button bits");
  a.left_button = b & 1;
  a.right_button = b & 2;
  return a;
}

void put_frame(ByteWriter& w, const Frame& f) {
  for (const auto& c : f.cells) {
    w.u8(c.symbol);
    w.u8(c.color);
  }
  w.u32(static_cast<std::uint32_t>(f.overlay_text.size()));
  for (const auto& s : f.overlay_text) w.str(s);
}

Frame get_frame(ByteReader& r) {
  Frame f;
  for (auto& c : f.cells) {
    c.symbol = r.u8();
    c.color = r.u8();
  }
  std::uint32_t n = r.u32();
  if (n > r.remaining()) r.fail(DecodeErrorKind::kMalformed, "overlay count");
  for (std::uint32_t i = 0; i < n; ++i) f.overlay_text.push_back(r.str());
  return f;
}

std::uint32_t get_count(ByteReader& r) {
  std::uint32_t n = r.u32();
  if (n > r.remaining()) r.fail(DecodeErrorKind::kMalformed, "count exceeds remaining bytes");
  return n;
}

}  // namespace

std::vector<std::uint8_t> encode_examples(const std::vector<TrainingExample>& examples,
                                          std::string_view provenance) {
  ByteWriter w;
  w.raw(std::string_view("MWEX"));
  w.u16(kShardVersion);
  w.str(provenance);
  w.u32(static_cast<std::uint32_t>(examples.size()));
  for (const auto& ex : examples) {
    w.u8(static_cast<std::uint8_t>(ex.world));
    w.str(ex.instruction);
    w.i64(ex.obs_tick);
    put_frame(w, ex.frame);
    w.u32(static_cast<std::uint32_t>(ex.memory.size()));
    for (const auto& f : ex.memory) put_frame(w, f);
    w.u32(static_cast<std::uint32_t>(ex.pending.size()));
    for (const auto& a : ex.pending) put_action(w, a);
    w.u32(static_cast<std::uint32_t>(ex.targets.size()));
    for (std::size_t i = 0; i < ex.targets.size(); ++i) {
      put_action(w, ex.targets[i]);
      w.boolean(ex.mask[i]);
      w.boolean(ex.goal_label[i]);
    }
    w.boolean(ex.goal_known);
  }
  return w.take();
}

std::vector<TrainingExample> decode_examples(std::span<const std::uint8_t> bytes) {
  return decode_shard(bytes).examples;
}

Shard decode_shard(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), "MWEX")) {
    throw DecodeError(DecodeErrorKind::kBadMagic, 0, "not an example shard");
  }
  std::uint16_t version = r.u16();
  if (version != kShardVersion) {
    throw DecodeError(DecodeErrorKind::kBadVersion, 4, "example shard version " + std::to_string(version));
  }
  Shard shard;
  shard.provenance = r.str();
  std::uint32_t count = get_count(r);
  auto& out = shard.examples;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    TrainingExample ex;
    std::uint8_t world = r.u8();
    if (world >= kWorldKindCount) r.fail(DecodeErrorKind::kMalformed, "world id");
    ex.world = static_cast<WorldKind>(world);
    ex.instruction = r.str();
    ex.obs_tick = r.i64();
    ex.frame = get_frame(r);
    for (std::uint32_t i = 0, n = get_count(r); i < n; ++i) ex.memory.push_back(get_frame(r));
    for (std::uint32_t i = 0, n = get_count(r); i < n; ++i) ex.pending.push_back(get_action(r));
    for (std::uint32_t i = 0, n = get_count(r); i < n; ++i) {
      ex.targets.push_back(get_action(r));
      ex.mask.push_back(r.boolean());
      ex.goal_label.push_back(r.boolean());
    }
    ex.goal_known = r.boolean();
    out.push_back(std::move(ex));
  }
  r.expect_done();
  return shard;
}

}  // namespace sima::data

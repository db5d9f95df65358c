#include "sima/ablation.hpp"

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "sima/worlds.hpp"

namespace sima::eval {

using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Demonstrations

net::SessionResult expert_session(const TaskSpec& task, std::uint64_t seed, const net::SessionConfig& session) {
  WorldState initial = instantiate_task(task, seed);
  EpisodeEvaluator evaluator(task, initial);
  net::SessionSpec spec;
  spec.initial = initial;
  spec.task_id = task.task_id;
  spec.seed = seed;
  spec.instruction = task.instruction;
  spec.budget_ticks = task.budget_ticks;
  spec.config = session;
  spec.config.record = true;
  spec.role = net::Role::kPlayer;
  spec.monitor = evaluator.monitor();
  spec.jitter_seed = seed;
  data::ExpertClient client(task, initial);
  return net::run_simulated_session(spec, client);
}

Collection collect_demonstrations(const std::vector<TaskSpec>& tasks, const CollectOptions& options) {
  Collection out;
  for (const auto& task : tasks) {
    for (std::uint64_t seed : options.seeds) {
      ++out.episodes;
      auto result = expert_session(task, seed, options.session);
      if (result.status != EpisodeStatus::kSuccess) {
        ++out.expert_failures;
        out.failed.push_back(task.task_id + "#" + std::to_string(seed));
        continue;
      }
      const std::string id = task.task_id + "#" + std::to_string(seed);
      auto filtered = data::filter(result.trajectory, data::segments_of(result.trajectory, id), options.rules);
      out.filter.idle_spans += filtered.report.idle_spans;
      out.filter.idle_ticks_removed += filtered.report.idle_ticks_removed;
      out.filter.short_instructions += filtered.report.short_instructions;
      out.filter.split_segments += filtered.report.split_segments;
      if (filtered.report.rejected) {
        out.failed.push_back(id + " rejected: " + filtered.report.reject_reason);
        continue;
      }
      auto& bucket = out.examples[static_cast<std::size_t>(task.world)];
      for (const auto& seg : filtered.kept) {
        auto ex = data::make_examples(result.trajectory, seg, options.examples);
        bucket.insert(bucket.end(), std::make_move_iterator(ex.begin()), std::make_move_iterator(ex.end()));
      }
    }
  }
  return out;
}

agent::Policy train_on_worlds(const Collection& data, const std::vector<WorldKind>& worlds,
                              const agent::AgentConfig& config, std::int64_t steps,
                              const std::function<void(const agent::StepMetrics&)>& on_log) {
  data::DatasetManifest manifest;
  manifest.seed = config.seed;
  std::vector<std::vector<data::TrainingExample>> collections;
  std::vector<std::size_t> counts;
  for (WorldKind w : worlds) {
    manifest.entries.push_back({std::string(world_name(w)), "expert", "", 1.0});
    collections.push_back(data.examples[static_cast<std::size_t>(w)]);
    counts.push_back(collections.back().size());
  }
  auto sampler = data::build_dataset(manifest, counts, config.seed);
  agent::Policy policy(config);
  agent::Trainer trainer(policy);
  agent::TrainOptions options;
  options.steps = steps;
  options.log_every = std::max<std::int64_t>(1, steps / 10);
  options.on_log = on_log;
  agent::train(trainer, collections, sampler, options);
  return policy;
}

// ---------------------------------------------------------------------------
// Probes

bool static_probe(const agent::Policy& policy, const Frame& frame, const std::string& instruction,
                  const std::function<bool(const ActionEvent&)>& predicate) {
  agent::Vec state = policy.encode_observation(frame);
  agent::Vec pending = policy.pending_features({});
  auto out = policy.forward(state, policy.encode_instruction(instruction), {}, pending);
  auto chunk = agent::decode_argmax(out.logits, 0);
  return predicate(chunk.front());
}

double logprob_eval(const agent::Policy& policy, const std::vector<data::TrainingExample>& examples) {
  if (examples.empty()) throw Error("logprob_eval needs held-out examples");
  double total = 0.0;
  std::int64_t steps = 0;
  constexpr std::size_t kBatch = 64;
  for (std::size_t i = 0; i < examples.size(); i += kBatch) {
    std::vector<data::TrainingExample> batch(examples.begin() + static_cast<std::ptrdiff_t>(i),
                                             examples.begin() + static_cast<std::ptrdiff_t>(std::min(i + kBatch, examples.size())));
    auto inputs = agent::prepare_inputs(policy, batch);
    for (const auto& in : inputs) {
      agent::MemoryState mem;
      std::int64_t t = 0;
      for (const auto& v : in.memory) mem.push(t++, v, policy.config().memory_window);
      auto out = policy.forward(policy.encode_observation(in.frame), policy.encode_instruction(in.instruction), mem,
                                policy.pending_features(in.pending));
      total += agent::action_loss(out.logits, in.targets, in.mask);
      for (bool m : in.mask) steps += m ? 1 : 0;
    }
  }
  if (steps == 0) throw Error("logprob_eval: every step is padding");
  return total / static_cast<double>(steps);
}

ClientFactory agent_factory(const agent::Policy& policy, double cfg_scale) {
  return [&policy, cfg_scale](const TaskSpec&, const WorldState&) {
    agent::ActOptions opts;
    opts.cfg_scale = cfg_scale;
    return std::make_unique<agent::AgentClient>(policy, opts);
  };
}

// ---------------------------------------------------------------------------
// Suite

const ConditionResult* EvalReport::find(const std::string& name) const {
  for (const auto& c : conditions) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

namespace {

void summarise(ConditionResult& c) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> world, skill, task;
  std::size_t wins = 0;
  for (const auto& e : c.episodes) {
    bool ok = e.status == EpisodeStatus::kSuccess;
    wins += ok;
    auto bump = [&](auto& m, const std::string& k) {
      m[k].first += ok;
      m[k].second += 1;
    };
    bump(world, std::string(world_name(e.world)));
    bump(skill, std::string(skill_name(e.skill)));
    bump(task, e.task_id);
  }
  c.per_world.clear();
  c.per_skill.clear();
  c.per_task.clear();
  for (const auto& [k, v] : world) c.per_world[k] = success_rate(v.first, v.second);
  for (const auto& [k, v] : skill) c.per_skill[k] = success_rate(v.first, v.second);
  for (const auto& [k, v] : task) c.per_task[k] = static_cast<double>(v.first) / static_cast<double>(v.second);
  c.overall = c.episodes.empty() ? RateCI{} : success_rate(wins, c.episodes.size());
}

std::vector<double> task_scores(const ConditionResult& c, std::optional<std::string> world) {
  std::vector<double> out;
  for (const auto& [id, score] : c.per_task) {
    if (world && id.rfind(*world + "/", 0) != 0) continue;
    out.push_back(score);
  }
  return out;
}

}  // namespace

void finalize_report(EvalReport& report, std::uint64_t permutation_seed, std::uint64_t resamples) {
  for (auto& c : report.conditions) summarise(c);
  report.relative = {};
  report.specialist_p.clear();
  report.no_language_p.reset();
  const ConditionResult* multi = report.find("multiworld");
  if (!multi) return;
  std::map<std::string, double> agent_rates, specialist_rates;
  for (int w = 0; w < kWorldKindCount; ++w) {
    std::string name(world_name(static_cast<WorldKind>(w)));
    const ConditionResult* spec = report.find("specialist:" + name);
    if (!spec || !spec->per_world.contains(name) || !multi->per_world.contains(name)) continue;
    agent_rates[name] = multi->per_world.at(name).rate;
    specialist_rates[name] = spec->per_world.at(name).rate;
    auto a = task_scores(*multi, name);
    auto b = task_scores(*spec, name);
    if (!a.empty() && !b.empty()) report.specialist_p[name] = permutation_test(a, b, resamples, permutation_seed);
  }
  if (!specialist_rates.empty()) report.relative = normalize_vs_specialist(agent_rates, specialist_rates);
  if (const ConditionResult* nolang = report.find("no_language")) {
    auto a = task_scores(*multi, std::nullopt);
    auto b = task_scores(*nolang, std::nullopt);
    if (!a.empty() && !b.empty()) report.no_language_p = permutation_test(a, b, resamples, permutation_seed);
  }
}

EvalReport run_ablation_suite(const AblationConfig& config) {
  EvalReport report;
  report.train_seeds = config.train_seeds;
  report.eval_seeds = config.eval_seeds;
  report.permutation_seed = config.permutation_seed;
  report.permutation_resamples = config.permutation_resamples;
  report.provenance = ablation_config_to_json(config);
  std::map<std::string, std::shared_ptr<agent::Policy>> cache;
  for (const auto& cond : config.conditions) {
    std::vector<std::shared_ptr<agent::Policy>> policies;
    bool missing = false;
    for (const auto& path : cond.checkpoints) {
      if (!std::filesystem::exists(path)) {
        missing = true;
        break;
      }
      auto& slot = cache[path];
      if (!slot) slot = std::make_shared<agent::Policy>(agent::load_checkpoint(path).policy);
      policies.push_back(slot);
    }
    if (missing || policies.empty()) {
      report.skipped.push_back(cond.name);
      continue;
    }
    ConditionResult result;
    result.name = cond.name;
    for (const auto& path : cond.checkpoints) result.agents.push_back(std::filesystem::path(path).filename().string());
    result.worlds = cond.worlds;
    for (WorldKind w : cond.worlds) {
      for (const auto& task : worlds::registry_list(w)) {
        for (const auto& policy : policies) {
          auto factory = agent_factory(*policy, cond.cfg_scale);
          for (std::uint64_t seed : config.eval_seeds) {
            EpisodeOptions opts = config.episode;
            opts.keep_trajectory = false;
            auto rec = run_episode(factory, task, seed, opts);
            result.episodes.push_back(
                {task.task_id, task.world, task.skill, seed, rec.outcome.status, rec.outcome.ticks_used});
          }
        }
      }
    }
    report.conditions.push_back(std::move(result));
  }
  finalize_report(report, config.permutation_seed, config.permutation_resamples);
  return report;
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {

ojson rate_json(const RateCI& r) {
  ojson j;
  j["rate"] = r.rate;
  j["ci95"] = r.ci95;
  j["lo"] = r.lo;
  j["hi"] = r.hi;
  j["n"] = r.n;
  return j;
}

ojson perm_json(const PermutationResult& p) {
  ojson j;
  j["p"] = p.p;
  j["statistic"] = p.statistic;
  j["exhaustive"] = p.exhaustive;
  j["resamples"] = p.resamples;
  return j;
}

}  // namespace

std::string EvalReport::to_json() const {
  ojson j;
  j["format"] = "sima-eval-report";
  j["version"] = 1;
  j["train_seeds"] = train_seeds;
  j["eval_seeds"] = eval_seeds;
  j["permutation_seed"] = permutation_seed;
  j["permutation_resamples"] = permutation_resamples;
  j["provenance"] = provenance;
  j["conditions"] = ojson::array();
  for (const auto& c : conditions) {
    ojson cj;
    cj["name"] = c.name;
    cj["agents"] = c.agents;
    cj["worlds"] = ojson::array();
    for (WorldKind w : c.worlds) cj["worlds"].push_back(world_name(w));
    cj["overall"] = rate_json(c.overall);
    cj["per_world"] = ojson::object();
    for (const auto& [k, v] : c.per_world) cj["per_world"][k] = rate_json(v);
    cj["per_skill"] = ojson::object();
    for (const auto& [k, v] : c.per_skill) cj["per_skill"][k] = rate_json(v);
    cj["per_task"] = c.per_task;
    cj["episodes"] = ojson::array();
    for (const auto& e : c.episodes) {
      ojson ej;
      ej["task_id"] = e.task_id;
      ej["seed"] = e.seed;
      ej["status"] = status_name(e.status);
      ej["ticks"] = e.ticks;
      cj["episodes"].push_back(std::move(ej));
    }
    j["conditions"].push_back(std::move(cj));
  }
  ojson rel;
  rel["per_world"] = relative.per_world;
  rel["excluded"] = relative.excluded;
  rel["aggregate"] = relative.aggregate;
  j["relative_to_specialist"] = std::move(rel);
  j["specialist_p"] = ojson::object();
  for (const auto& [k, v] : specialist_p) j["specialist_p"][k] = perm_json(v);
  j["no_language_p"] = no_language_p ? perm_json(*no_language_p) : ojson();
  j["skipped"] = skipped;
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("format", "") != "sima-eval-report") {
    throw ConfigError("not an evaluation report");
  }
  EvalReport r;
  try {
    r.train_seeds = j.at("train_seeds").get<std::vector<std::uint64_t>>();
    r.eval_seeds = j.at("eval_seeds").get<std::vector<std::uint64_t>>();
    r.skipped = j.at("skipped").get<std::vector<std::string>>();
    r.permutation_seed = j.at("permutation_seed").get<std::uint64_t>();
    r.permutation_resamples = j.at("permutation_resamples").get<std::uint64_t>();
    r.provenance = j.value("provenance", "");
    for (const auto& cj : j.at("conditions")) {
      ConditionResult c;
      c.name = cj.at("name").get<std::string>();
      c.agents = cj.at("agents").get<std::vector<std::string>>();
      for (const auto& w : cj.at("worlds")) {
        auto kind = world_from_name(w.get<std::string>());
        if (!kind) throw ConfigError("report: unknown world");
        c.worlds.push_back(*kind);
      }
      for (const auto& ej : cj.at("episodes")) {
        TaskResult e;
        e.task_id = ej.at("task_id").get<std::string>();
        const TaskSpec& task = worlds::find_task(e.task_id);
        e.world = task.world;
        e.skill = task.skill;
        e.seed = ej.at("seed").get<std::uint64_t>();
        auto st = status_from_name(ej.at("status").get<std::string>());
        if (!st) throw ConfigError("report: unknown status");
        e.status = *st;
        e.ticks = ej.at("ticks").get<int>();
        c.episodes.push_back(std::move(e));
      }
      r.conditions.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("report: ") + e.what());
  }
  finalize_report(r, r.permutation_seed, r.permutation_resamples);
  return r;
}

AblationConfig ablation_config_from_json(const std::string& text, const std::string& base_dir) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("ablation config is not a JSON object");
  AblationConfig c;
  try {
    c.train_seeds = j.value("train_seeds", c.train_seeds);
    c.eval_seeds = j.value("eval_seeds", c.eval_seeds);
    c.permutation_seed = j.value("permutation_seed", c.permutation_seed);
    c.permutation_resamples = j.value("permutation_resamples", c.permutation_resamples);
    c.episode.compute_ms = j.value("compute_ms", 0.0);
    if (j.contains("session")) {
      const auto& sj = j.at("session");
      c.episode.config.offset_k = sj.value("offset_k", c.episode.config.offset_k);
      c.episode.config.tick_hz = sj.value("tick_hz", c.episode.config.tick_hz);
      c.episode.config.latency.obs_delay_ms = sj.value("obs_delay_ms", 0.0);
      c.episode.config.latency.action_delay_ms = sj.value("action_delay_ms", 0.0);
      c.episode.config.latency.jitter_ms = sj.value("jitter_ms", 0.0);
    }
    for (const auto& cj : j.at("conditions")) {
      ConditionSpec cond;
      cond.name = cj.at("name").get<std::string>();
      for (const auto& p : cj.at("checkpoints")) {
        std::filesystem::path path(p.get<std::string>());
        if (path.is_relative() && !base_dir.empty()) path = std::filesystem::path(base_dir) / path;
        cond.checkpoints.push_back(path.string());
      }
      for (const auto& w : cj.at("worlds")) {
        auto kind = world_from_name(w.get<std::string>());
        if (!kind) throw ConfigError("ablation config: unknown world '" + w.get<std::string>() + "'");
        cond.worlds.push_back(*kind);
      }
      cond.cfg_scale = cj.value("cfg_scale", 1.0);
      if (!(cond.cfg_scale >= 0.0)) throw ConfigError("ablation config: cfg_scale must be >= 0");
      c.conditions.push_back(std::move(cond));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation config: ") + e.what());
  }
  if (c.conditions.empty()) throw ConfigError("ablation config has no conditions");
  if (c.eval_seeds.empty()) throw ConfigError("ablation config has no eval seeds");
  c.episode.config.validate();
  return c;
}

std::string ablation_config_to_json(const AblationConfig& config) {
  ojson j;
  j["train_seeds"] = config.train_seeds;
  j["eval_seeds"] = config.eval_seeds;
  j["permutation_seed"] = config.permutation_seed;
  j["permutation_resamples"] = config.permutation_resamples;
  j["compute_ms"] = config.episode.compute_ms;
  const auto& s = config.episode.config;
  j["session"] = {{"offset_k", s.offset_k}, {"tick_hz", s.tick_hz}, {"obs_delay_ms", s.latency.obs_delay_ms},
                  {"action_delay_ms", s.latency.action_delay_ms}, {"jitter_ms", s.latency.jitter_ms}};
  j["conditions"] = ojson::array();
  for (const auto& c : config.conditions) {
    ojson cj;
    cj["name"] = c.name;
    cj["checkpoints"] = c.checkpoints;
    cj["worlds"] = ojson::array();
    for (WorldKind w : c.worlds) cj["worlds"].push_back(world_name(w));
    cj["cfg_scale"] = c.cfg_scale;
    j["conditions"].push_back(std::move(cj));
  }
  return j.dump();
}

std::string render_svg(const EvalReport& report) {
  const int bar = 14, gap = 4, group_gap = 30, height = 260, top = 30, base = 220;
  std::vector<std::string> worlds_seen;
  for (int w = 0; w < kWorldKindCount; ++w) worlds_seen.emplace_back(world_name(static_cast<WorldKind>(w)));
  const int n = static_cast<int>(report.conditions.size());
  const int group_w = n * (bar + gap);
  const int width = 60 + static_cast<int>(worlds_seen.size()) * (group_w + group_gap) + 220;
  static const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                   "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};
  std::ostringstream s;
  s << std::fixed << std::setprecision(1);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  s << "<line x1=\"50\" y1=\"" << base << "\" x2=\"" << width - 220 << "\" y2=\"" << base << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    double y = base - (base - top) * t / 4.0;
    s << "<text x=\"10\" y=\"" << y + 4 << "\" font-size=\"10\">" << t * 25 << "%</text>\n";
  }
  for (std::size_t w = 0; w < worlds_seen.size(); ++w) {
    int x0 = 60 + static_cast<int>(w) * (group_w + group_gap);
    s << "<text x=\"" << x0 << "\" y=\"" << base + 16 << "\" font-size=\"11\">" << worlds_seen[w] << "</text>\n";
    for (int c = 0; c < n; ++c) {
      const auto& cond = report.conditions[static_cast<std::size_t>(c)];
      auto it = cond.per_world.find(worlds_seen[w]);
      if (it == cond.per_world.end()) continue;
      const RateCI& r = it->second;
      double x = x0 + c * (bar + gap);
      double h = (base - top) * r.rate;
      s << "<rect x=\"" << x << "\" y=\"" << base - h << "\" width=\"" << bar << "\" height=\"" << h
        << "\" fill=\"" << kPalette[c % 10] << "\"/>\n";
      double xm = x + bar / 2.0;
      s << "<line x1=\"" << xm << "\" y1=\"" << base - (base - top) * r.hi << "\" x2=\"" << xm << "\" y2=\""
        << base - (base - top) * r.lo << "\" stroke=\"black\"/>\n";
    }
  }
  for (int c = 0; c < n; ++c) {
    int y = top + c * 16;
    int x = width - 200;
    s << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[c % 10]
      << "\"/>\n";
    s << "<text x=\"" << x + 14 << "\" y=\"" << y << "\" font-size=\"11\">"
      << report.conditions[static_cast<std::size_t>(c)].name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string render_summary(const EvalReport& report) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3);
  s << std::left << std::setw(26) << "condition" << std::setw(20) << "overall";
  for (int w = 0; w < kWorldKindCount; ++w) s << std::setw(20) << world_name(static_cast<WorldKind>(w));
  s << "\n";
  for (const auto& c : report.conditions) {
    s << std::setw(26) << c.name;
    std::ostringstream o;
    o << std::fixed << std::setprecision(3) << c.overall.rate << " +/- " << c.overall.ci95;
    s << std::setw(20) << o.str();
    for (int w = 0; w < kWorldKindCount; ++w) {
      auto it = c.per_world.find(std::string(world_name(static_cast<WorldKind>(w))));
      std::ostringstream cell;
      if (it != c.per_world.end()) cell << std::fixed << std::setprecision(3) << it->second.rate << " +/- " << it->second.ci95;
      else cell << "-";
      s << std::setw(20) << cell.str();
    }
    s << "\n";
  }
  if (!report.relative.per_world.empty()) {
    s << "multiworld relative to specialist:";
    for (const auto& [w, v] : report.relative.per_world) s << " " << w << "=" << v << "%";
    s << " mean=" << report.relative.aggregate << "%\n";
  }
  for (const auto& [w, p] : report.specialist_p) s << "permutation p (multiworld vs specialist, " << w << "): " << p.p << "\n";
  if (report.no_language_p) s << "permutation p (multiworld vs no_language): " << report.no_language_p->p << "\n";
  for (const auto& name : report.skipped) s << "skipped (missing checkpoint): " << name << "\n";
  return s.str();
}

}  // namespace sima::eval

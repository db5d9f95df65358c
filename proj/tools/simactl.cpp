// simactl: serve sessions, collect demonstrations, train, evaluate, replay
// and report. Exit codes: 0 ok, 1 config error, 2 runtime error.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "sima/ablation.hpp"
#include "sima/server.hpp"
#include "sima/worlds.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace sima;

namespace {

constexpr const char* kToolVersion = "1.0.0";

std::atomic<bool> g_interrupted{false};
extern "C" void on_signal(int) { g_interrupted = true; }

std::string read_text(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("file not found: " + path);
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_bytes(path.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<WorldKind> parse_worlds(const std::string& csv) {
  std::vector<WorldKind> out;
  std::stringstream in(csv);
  std::string name;
  while (std::getline(in, name, ',')) {
    if (name.empty()) continue;
    auto w = world_from_name(name);
    if (!w) throw ConfigError("unknown world '" + name + "'");
    out.push_back(*w);
  }
  if (out.empty()) throw ConfigError("no worlds selected");
  return out;
}

/// "0-4" or "0,1,7" or a mix.
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream in(text);
  std::string part;
  try {
    while (std::getline(in, part, ',')) {
      if (part.empty()) continue;
      auto dash = part.find('-');
      if (dash == std::string::npos) {
        out.push_back(std::stoull(part));
      } else {
        std::uint64_t a = std::stoull(part.substr(0, dash)), b = std::stoull(part.substr(dash + 1));
        if (b < a) throw ConfigError("bad seed range " + part);
        for (std::uint64_t s = a; s <= b; ++s) out.push_back(s);
      }
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad seed list '" + text + "'");
  }
  if (out.empty()) throw ConfigError("no seeds selected");
  return out;
}

json provenance(const std::string& command, json config, std::uint64_t seed) {
  json p;
  p["tool"] = "simactl";
  p["version"] = kToolVersion;
  p["command"] = command;
  p["seed"] = seed;
  p["config"] = std::move(config);
  return p;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  int port = 7070;
  int http_port = 8080;
  std::string worlds = "playroom,buildlab,harvest";
  std::string out = "sessions";
  std::string static_dir;
  int offset_k = 2;
  int max_sessions = 8;
};

int cmd_serve(const ServeArgs& a) {
  net::ServerOptions o;
  o.port = a.port;
  o.http_port = a.http_port;
  o.worlds = parse_worlds(a.worlds);
  o.out_dir = a.out;
  o.static_dir = a.static_dir;
  o.session.offset_k = a.offset_k;
  o.max_sessions = a.max_sessions;
  net::Server server(o);
  server.start();
  std::cout << "wire " << server.port() << " http " << server.http_port() << std::endl;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  spdlog::info("shutting down, {} sessions running", server.active_sessions());
  server.stop();
  for (const auto& r : server.finished()) {
    std::cout << r.id << " " << r.task_id << " " << net::end_reason_name(r.end.reason) << " " << r.trajectory_path
              << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// collect

struct CollectArgs {
  std::string manifest;
  std::string seeds = "0-4";
  std::string out = "data";
  std::string tasks;  // optional comma list of task-id prefixes
  int stride = 1;
  int memory = 4;
  int offset_k = 2;
};

int cmd_collect(const CollectArgs& a) {
  data::DatasetManifest manifest = data::parse_manifest(read_text(a.manifest));
  manifest.validate();
  auto seeds = parse_seeds(a.seeds);
  std::vector<std::string> prefixes;
  {
    std::stringstream in(a.tasks);
    std::string p;
    while (std::getline(in, p, ',')) {
      if (!p.empty()) prefixes.push_back(p);
    }
  }

  eval::CollectOptions options;
  options.seeds = seeds;
  options.examples.stride = a.stride;
  options.examples.memory = a.memory;
  options.examples.offset_k = a.offset_k;
  options.session.offset_k = a.offset_k;
  options.session.validate();

  json config;
  config["manifest"] = json::parse(data::manifest_to_json(manifest));
  config["seeds"] = seeds;
  config["tasks"] = prefixes;
  config["examples"] = {{"stride", a.stride}, {"memory", a.memory}, {"offset_k", a.offset_k}};

  const fs::path out(a.out);
  data::DatasetManifest written = manifest;
  json filter_report = json::object();
  std::vector<std::string> instructions;
  std::size_t shards = 0;
  std::set<std::string> seen_tasks;
  for (std::size_t e = 0; e < manifest.entries.size(); ++e) {
    const auto& entry = manifest.entries[e];
    WorldKind world = *world_from_name(entry.world);
    std::vector<TaskSpec> tasks;
    for (auto& t : worlds::registry_list(world)) {
      bool keep = prefixes.empty();
      for (const auto& p : prefixes) keep = keep || t.task_id.starts_with(p);
      if (keep) tasks.push_back(t);
    }
    if (tasks.empty()) throw ConfigError("no tasks selected for " + entry.world);
    const std::string rel = entry.path.empty() ? entry.world + "/" + entry.collection : entry.path;
    written.entries[e].path = rel;
    fs::create_directories(out / rel);
    json report = {{"episodes", 0}, {"shards", 0}, {"examples", 0}, {"idle_spans", 0}, {"short_instructions", 0},
                   {"split_segments", 0}};
    for (const auto& task : tasks) {
      if (seen_tasks.insert(task.task_id).second) instructions.push_back(task.instruction);
      for (std::uint64_t seed : seeds) {
        eval::CollectOptions one = options;
        one.seeds = {seed};
        auto col = eval::collect_demonstrations({task}, one);
        if (col.expert_failures > 0) throw Error("expert failed on " + col.failed.front());
        const auto& ex = col.examples[static_cast<std::size_t>(world)];
        report["episodes"] = report["episodes"].get<int>() + 1;
        report["idle_spans"] = report["idle_spans"].get<std::int64_t>() + col.filter.idle_spans;
        report["short_instructions"] = report["short_instructions"].get<std::int64_t>() + col.filter.short_instructions;
        report["split_segments"] = report["split_segments"].get<std::int64_t>() + col.filter.split_segments;
        if (ex.empty()) continue;
        std::string name = task.task_id.substr(task.task_id.find('/') + 1);
        std::replace(name.begin(), name.end(), '/', '_');
        name += "_s" + std::to_string(seed) + ".mwex";
        auto prov = provenance("collect", config, seed);
        prov["task_id"] = task.task_id;
        write_file_bytes((out / rel / name).string(), data::encode_examples(ex, prov.dump()));
        report["shards"] = report["shards"].get<int>() + 1;
        report["examples"] = report["examples"].get<std::size_t>() + ex.size();
        ++shards;
      }
    }
    filter_report[entry.world + "/" + entry.collection] = report;
    spdlog::info("{}: {} shards", rel, report["shards"].get<int>());
  }
  write_text(out / "manifest.json", data::manifest_to_json(written));
  json fr = {{"provenance", provenance("collect", config, manifest.seed)}, {"collections", filter_report}};
  write_text(out / "filter_report.json", fr.dump(2) + "\n");
  if (instructions.size() >= 2) {
    write_text(out / "instruction_clusters.json", data::cluster_instructions(instructions).report_json());
  }
  std::cout << "shards " << shards << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out = "runs/agent";
  std::string manifest;  // overrides the config
  std::string worlds;    // restricts manifest entries
  std::string resume;
  std::int64_t steps = -1;
  std::int64_t seed = -1;
  bool no_language = false;
};

std::vector<std::vector<data::TrainingExample>> load_collections(const data::DatasetManifest& m, const fs::path& base) {
  std::vector<std::vector<data::TrainingExample>> out;
  for (const auto& e : m.entries) {
    fs::path dir = base / e.path;
    if (!fs::is_directory(dir)) throw ConfigError("collection directory missing: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (f.path().extension() == ".mwex") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<data::TrainingExample> examples;
    for (const auto& f : files) {
      auto ex = data::decode_examples(read_file_bytes(f.string()));
      examples.insert(examples.end(), std::make_move_iterator(ex.begin()), std::make_move_iterator(ex.end()));
    }
    out.push_back(std::move(examples));
  }
  return out;
}

int cmd_train(const TrainArgs& a) {
  auto cj = nlohmann::json::parse(read_text(a.config), nullptr, false);
  if (cj.is_discarded() || !cj.is_object()) throw ConfigError("train config is not a JSON object");
  const fs::path config_dir = fs::path(a.config).parent_path();
  agent::AgentConfig config = agent::AgentConfig::from_json(cj.value("agent", nlohmann::json::object()).dump());
  if (a.seed >= 0) config.seed = static_cast<std::uint64_t>(a.seed);
  if (a.no_language) config.use_language = false;
  config.validate();
  std::int64_t steps = a.steps >= 0 ? a.steps : cj.value("steps", std::int64_t{2000});
  std::int64_t log_every = cj.value("log_every", std::int64_t{100});
  std::string manifest_path = a.manifest;
  if (manifest_path.empty()) {
    if (!cj.contains("manifest")) throw ConfigError("train config names no manifest");
    fs::path p = cj.at("manifest").get<std::string>();
    manifest_path = (p.is_relative() ? config_dir / p : p).string();
  }
  data::DatasetManifest manifest = data::parse_manifest(read_text(manifest_path));
  if (!a.worlds.empty()) {
    auto keep = parse_worlds(a.worlds);
    std::erase_if(manifest.entries, [&](const data::ManifestEntry& e) {
      return std::find(keep.begin(), keep.end(), *world_from_name(e.world)) == keep.end();
    });
  }
  manifest.validate();
  auto collections = load_collections(manifest, fs::path(manifest_path).parent_path());
  std::vector<std::size_t> counts;
  for (const auto& c : collections) counts.push_back(c.size());
  auto sampler = data::build_dataset(manifest, counts, config.seed);

  // Fast evaluation signal: the first few tasks of each trained world.
  int fast_tasks = cj.value("fast_eval_tasks", 3);
  std::int64_t fast_every = cj.value("fast_eval_every", std::int64_t{0});
  std::vector<TaskSpec> fast;
  for (const auto& e : manifest.entries) {
    auto tasks = worlds::registry_list(*world_from_name(e.world));
    for (int i = 0; i < fast_tasks && i < static_cast<int>(tasks.size()); ++i) fast.push_back(tasks[static_cast<std::size_t>(i)]);
  }

  std::optional<agent::Checkpoint> resumed;
  if (!a.resume.empty()) resumed = agent::load_checkpoint(a.resume);
  agent::Policy policy = resumed ? resumed->policy : agent::Policy(config);
  if (resumed && policy.config().to_json() != config.to_json()) {
    throw ConfigError("resume checkpoint was trained with a different agent config");
  }
  agent::Trainer trainer(policy);
  if (resumed && resumed->velocity.size() > 0) trainer.restore(resumed->step, resumed->velocity, resumed->rng_state);
  // Skip the draws the resumed run already consumed.
  for (std::int64_t i = 0; i < trainer.step() * config.batch_size; ++i) sampler.next();

  json run_config;
  run_config["agent"] = json::parse(config.to_json());
  run_config["manifest"] = json::parse(data::manifest_to_json(manifest));
  run_config["steps"] = steps;
  const auto prov = provenance("train", run_config, config.seed).dump();

  const fs::path out(a.out);
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl", resumed ? std::ios::app : std::ios::trunc);
  agent::TrainOptions options;
  options.steps = steps - trainer.step();
  options.log_every = log_every;
  options.on_log = [&](const agent::StepMetrics& m) {
    json line = {{"step", m.step}, {"loss", m.loss}, {"grad_norm", m.grad_norm}, {"rejected", m.rejected}};
    if (fast_every > 0 && !fast.empty() && m.step % fast_every == 0) {
      int ok = 0;
      for (const auto& t : fast) {
        ok += eval::run_episode(eval::agent_factory(trainer.policy(), config.cfg_scale), t, 900).outcome.status ==
              EpisodeStatus::kSuccess;
      }
      line["fast_eval_success"] = static_cast<double>(ok) / static_cast<double>(fast.size());
    }
    metrics << line.dump() << "\n" << std::flush;
    spdlog::info("step {} loss {:.4f}", m.step, m.loss);
  };
  if (options.steps < 0) throw ConfigError("checkpoint is already past the requested step count");
  auto log = agent::train(trainer, collections, sampler, options);
  for (const auto& m : log) {
    if (m.rejected) throw Error("training diverged at step " + std::to_string(m.step) + " (non-finite loss)");
  }
  agent::save_checkpoint((out / "checkpoint.smck").string(), policy, &trainer, prov);
  write_text(out / "config.json", prov + "\n");
  std::cout << "checkpoint " << (out / "checkpoint.smck").string() << " step " << trainer.step() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval / report / replay

void write_report(const eval::EvalReport& report, const fs::path& out) {
  write_text(out / "report.json", report.to_json());
  write_text(out / "report.svg", eval::render_svg(report));
  write_text(out / "summary.txt", eval::render_summary(report));
}

int cmd_eval(const std::string& conditions, const std::string& out) {
  auto config = eval::ablation_config_from_json(read_text(conditions), fs::path(conditions).parent_path().string());
  auto report = eval::run_ablation_suite(config);
  report.provenance = provenance("eval", json::parse(eval::ablation_config_to_json(config)), config.permutation_seed).dump();
  for (const auto& s : report.skipped) spdlog::warn("condition {} skipped: checkpoint missing", s);
  write_report(report, out);
  std::cout << eval::render_summary(report);
  return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  auto report = eval::report_from_json(read_text(in));
  write_report(report, out);
  std::cout << eval::render_summary(report);
  return 0;
}

int cmd_replay(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("file not found: " + path);
  auto traj = net::read_trajectory(path);
  auto hashes = net::replay(traj);
  std::cout << "task " << traj.header.task_id << " seed " << traj.header.seed << " ticks " << traj.ticks();
  if (traj.end) std::cout << " end " << net::end_reason_name(traj.end->reason);
  std::cout << " final_hash " << std::hex << (hashes.empty() ? 0 : hashes.back()) << std::dec << "\nreplay ok\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simactl: sessions, data, training and evaluation for the grid-world agent"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "run the session server");
  s->add_option("--port", serve.port, "wire protocol port (0 picks one)");
  s->add_option("--http-port", serve.http_port, "gateway/upload port (-1 disables)");
  s->add_option("--worlds", serve.worlds, "comma-separated worlds");
  s->add_option("--out", serve.out, "directory for recordings and uploads");
  s->add_option("--static", serve.static_dir, "playclient asset directory");
  s->add_option("--offset-k", serve.offset_k);
  s->add_option("--max-sessions", serve.max_sessions);

  CollectArgs collect;
  auto* c = app.add_subcommand("collect", "run scripted experts and write example shards");
  c->add_option("--manifest", collect.manifest, "dataset manifest")->required();
  c->add_option("--seeds", collect.seeds, "e.g. 0-4 or 0,3,9");
  c->add_option("--out", collect.out);
  c->add_option("--tasks", collect.tasks, "comma-separated task id prefixes");
  c->add_option("--stride", collect.stride);
  c->add_option("--memory", collect.memory);
  c->add_option("--offset-k", collect.offset_k);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train an agent");
  t->add_option("--config", train.config, "train config JSON")->required();
  t->add_option("--out", train.out);
  t->add_option("--manifest", train.manifest, "collected manifest (overrides config)");
  t->add_option("--worlds", train.worlds, "train on these worlds only");
  t->add_option("--resume", train.resume, "checkpoint to continue from");
  t->add_option("--steps", train.steps);
  t->add_option("--seed", train.seed);
  t->add_flag("--no-language", train.no_language, "ablate the instruction");

  std::string conditions, eval_out = "reports";
  auto* e = app.add_subcommand("eval", "run the ablation suite");
  e->add_option("--conditions", conditions, "ablation config JSON")->required();
  e->add_option("--out", eval_out);

  std::string trajectory;
  auto* r = app.add_subcommand("replay", "replay a recorded trajectory and check its frames");
  r->add_option("--trajectory", trajectory)->required();

  std::string report_in, report_out = "reports";
  auto* rp = app.add_subcommand("report", "regenerate report files from a stored report");
  rp->add_option("--in", report_in)->required();
  rp->add_option("--out", report_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 1;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%H:%M:%S %l] %v");

  try {
    if (*s) return cmd_serve(serve);
    if (*c) return cmd_collect(collect);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(conditions, eval_out);
    if (*r) return cmd_replay(trajectory);
    if (*rp) return cmd_report(report_in, report_out);
  } catch (const ConfigError& ex) {
    spdlog::error("config error: {}", ex.what());
    return 1;
  } catch (const std::exception& ex) {
    spdlog::error("{}", ex.what());
    return 2;
  }
  return 0;
}

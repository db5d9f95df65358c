#include "sima/server.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <spdlog/spdlog.h>

#include "httplib.h"
#include "json.hpp"
#include "sima/datapipe.hpp"
#include "sima/evalharness.hpp"
#include "sima/worlds.hpp"

namespace sima::net {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<std::uint8_t> concat_frames(const std::vector<Message>& messages) {
  std::vector<std::uint8_t> out;
  for (const auto& m : messages) {
    auto bytes = encode(m);
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
  return out;
}

std::vector<Message> split_frames(std::span<const std::uint8_t> bytes) {
  std::vector<Message> out;
  std::size_t at = 0;
  while (at < bytes.size()) {
    auto size = frame_size(bytes.subspan(at));
    if (!size || at + *size > bytes.size()) {
      throw DecodeError(DecodeErrorKind::kTruncated, at, "incomplete frame in gateway body");
    }
    out.push_back(decode(bytes.subspan(at, *size)));
    at += *size;
  }
  return out;
}

std::shared_ptr<Channel> connect_tcp(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0) {
    throw Error("cannot resolve " + host + ": " + gai_strerror(rc));
  }
  int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0 || ::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
    std::string why = std::strerror(errno);
    if (fd >= 0) ::close(fd);
    ::freeaddrinfo(res);
    throw Error("cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
  }
  ::freeaddrinfo(res);
  return make_socket_channel(fd);
}

// ---------------------------------------------------------------------------

struct Server::Impl {
  httplib::Server http;
  std::mutex gateway_mu;
  std::map<std::string, std::shared_ptr<Channel>> gateway;  // client ends, by session id
  std::mutex upload_mu;
};

Server::Server(ServerOptions options)
    : options_(std::move(options)), impl_(std::make_unique<Impl>()), stop_(std::make_shared<std::atomic<bool>>(false)) {
  options_.session.validate();
  if (options_.worlds.empty()) throw ConfigError("server needs at least one world");
  if (options_.max_sessions < 1) throw ConfigError("max_sessions must be >= 1");
  if (!options_.static_dir.empty() && !fs::is_directory(options_.static_dir)) {
    throw ConfigError("static asset directory " + options_.static_dir + " does not exist");
  }
}

Server::~Server() { stop(); }

void Server::start() {
  fs::create_directories(options_.out_dir);
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error(std::string("socket: ") + std::strerror(errno));
  int yes = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(options_.port));
  if (::inet_pton(AF_INET, options_.host.c_str(), &addr.sin_addr) != 1) {
    throw ConfigError("host must be an IPv4 address: " + options_.host);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
    std::string why = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw Error("port " + std::to_string(options_.port) + " unavailable: " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  if (options_.http_port >= 0) start_http();
  accept_thread_ = std::thread([this] { accept_loop(); });
  spdlog::info("serving wire protocol on {}:{}", options_.host, port_);
}

void Server::stop() {
  if (stop_->exchange(true)) return;
  if (http_port_ >= 0) impl_->http.stop();
  if (http_thread_.joinable()) http_thread_.join();
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::thread> running;
  {
    std::lock_guard lock(mu_);
    running.swap(sessions_);
  }
  for (auto& t : running) t.join();
  {
    std::lock_guard lock(impl_->gateway_mu);
    for (auto& [id, ch] : impl_->gateway) ch->close();
    impl_->gateway.clear();
  }
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
  spdlog::info("server stopped");
}

std::vector<SessionRecord> Server::finished() const {
  std::lock_guard lock(mu_);
  return finished_;
}

void Server::accept_loop() {
  while (!stop_->load()) {
    pollfd p{listen_fd_, POLLIN, 0};
    int r = ::poll(&p, 1, 100);
    if (r <= 0) continue;
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    std::string id = "session-" + std::to_string(next_id_++);
    auto channel = make_socket_channel(fd);
    std::lock_guard lock(mu_);
    sessions_.emplace_back([this, channel, id] { serve_connection(channel, id); });
  }
}

namespace {

bool world_allowed(const std::vector<WorldKind>& worlds, WorldKind w) {
  return std::find(worlds.begin(), worlds.end(), w) != worlds.end();
}

}  // namespace

void Server::serve_connection(std::shared_ptr<Channel> channel, std::string id) {
  struct Active {
    std::atomic<int>& n;
    explicit Active(std::atomic<int>& c) : n(c) { ++n; }
    ~Active() { --n; }
  } active(active_);

  if (active_.load() > options_.max_sessions) {
    spdlog::warn("{}: refused, {} sessions already running", id, options_.max_sessions);
    channel->send(EndEpisode{EndReason::kFailure, 0});
    channel->close();
    return;
  }

  std::optional<Hello> hello;
  std::optional<Reset> reset;
  std::optional<LoadState> load_state;
  std::optional<std::string> instruction;
  const auto deadline = std::chrono::steady_clock::now() + options_.handshake_timeout;
  try {
    while (!reset && !(load_state && instruction)) {
      if (stop_->load() || std::chrono::steady_clock::now() >= deadline) {
        spdlog::warn("{}: no session request before handshake ended", id);
        channel->close();
        return;
      }
      auto msg = channel->receive(std::chrono::milliseconds(100));
      if (!msg) {
        if (channel->closed()) return;
        continue;
      }
      if (auto* h = std::get_if<Hello>(&*msg)) {
        if (h->version != kProtocolVersion) throw ProtocolError("client speaks version " + std::to_string(h->version));
        if (h->role == Role::kJudge || h->role == Role::kAnnotator) {
          throw ProtocolError("role " + std::string(role_name(h->role)) + " does not play sessions");
        }
        hello = *h;
      } else if (!hello) {
        throw ProtocolError("expected Hello, got " + std::string(message_name(*msg)));
      } else if (auto* r = std::get_if<Reset>(&*msg)) {
        reset = *r;
      } else if (auto* l = std::get_if<LoadState>(&*msg)) {
        load_state = *l;
      } else if (auto* ins = std::get_if<Instruction>(&*msg)) {
        instruction = ins->text;
      } else {
        throw ProtocolError("unexpected " + std::string(message_name(*msg)) + " before the session starts");
      }
    }

    SessionSpec spec;
    spec.config = options_.session;
    spec.role = hello->role;
    std::optional<eval::EpisodeEvaluator> evaluator;
    if (reset) {
      const TaskSpec& task = worlds::find_task(reset->task_id);
      if (!world_allowed(options_.worlds, task.world)) {
        throw ProtocolError("world " + std::string(world_name(task.world)) + " is not served");
      }
      spec.initial = instantiate_task(task, reset->seed);
      spec.task_id = task.task_id;
      spec.seed = reset->seed;
      spec.instruction = instruction.value_or(task.instruction);
      spec.budget_ticks = task.budget_ticks;
      evaluator.emplace(task, spec.initial);
      spec.monitor = evaluator->monitor();
    } else {
      spec.initial = load(load_state->save_bytes);
      if (!world_allowed(options_.worlds, spec.initial.world)) {
        throw ProtocolError("world " + std::string(world_name(spec.initial.world)) + " is not served");
      }
      spec.task_id = "free-play";
      spec.instruction = *instruction;
    }
    spec.jitter_seed = spec.seed;

    RealtimeOptions rt;
    rt.stop = stop_;
    rt.record_path = (fs::path(options_.out_dir) / (id + ".mwtr")).string();
    spdlog::info("{}: {} seed {} role {}", id, spec.task_id, spec.seed, role_name(spec.role));
    SessionResult result = run_realtime_session(spec, *channel, rt);
    SessionRecord rec{id, spec.task_id, spec.seed, spec.role, rt.record_path,
                      result.trajectory.end.value_or(EndEpisode{})};
    spdlog::info("{}: ended {} at tick {}", id, end_reason_name(rec.end.reason), rec.end.tick);
    channel->close();
    std::lock_guard lock(mu_);
    finished_.push_back(std::move(rec));
  } catch (const Error& e) {
    spdlog::warn("{}: {}", id, e.what());
    channel->send(EndEpisode{EndReason::kFailure, 0});
    channel->close();
  }
}

// ---------------------------------------------------------------------------
// HTTP: gateway, uploads, task list, recordings, static assets

void Server::start_http() {
  auto& http = impl_->http;
  if (!options_.static_dir.empty()) http.set_mount_point("/", options_.static_dir);

  http.Get("/tasks", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (WorldKind w : options_.worlds) {
      for (const auto& t : worlds::registry_list(w)) {
        out.push_back({{"task_id", t.task_id}, {"world", world_name(t.world)}, {"instruction", t.instruction}});
      }
    }
    res.set_content(out.dump(), "application/json");
  });

  http.Get(R"(/trajectories/([A-Za-z0-9_-]+\.mwtr))", [this](const httplib::Request& req, httplib::Response& res) {
    fs::path p = fs::path(options_.out_dir) / req.matches[1].str();
    if (!fs::exists(p)) {
      res.status = 404;
      return;
    }
    auto bytes = read_file_bytes(p.string());
    res.set_content(std::string(bytes.begin(), bytes.end()), "application/octet-stream");
  });

  http.Post("/gateway/open", [this](const httplib::Request&, httplib::Response& res) {
    if (stop_->load()) {
      res.status = 503;
      return;
    }
    auto [client_end, server_end] = make_channel_pair();
    std::string id = "session-" + std::to_string(next_id_++);
    {
      std::lock_guard lock(impl_->gateway_mu);
      impl_->gateway[id] = client_end;
    }
    {
      std::lock_guard lock(mu_);
      sessions_.emplace_back([this, server_end, id] { serve_connection(server_end, id); });
    }
    res.set_content(json{{"id", id}}.dump(), "application/json");
  });

  auto gateway_channel = [this](const std::string& id) -> std::shared_ptr<Channel> {
    std::lock_guard lock(impl_->gateway_mu);
    auto it = impl_->gateway.find(id);
    return it == impl_->gateway.end() ? nullptr : it->second;
  };

  http.Post(R"(/gateway/([A-Za-z0-9_-]+)/send)", [gateway_channel](const httplib::Request& req, httplib::Response& res) {
    auto ch = gateway_channel(req.matches[1].str());
    if (!ch) {
      res.status = 404;
      return;
    }
    try {
      std::span<const std::uint8_t> body(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size());
      for (const auto& m : split_frames(body)) {
        if (!ch->send(m)) {
          res.status = 410;
          return;
        }
      }
      res.status = 204;
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(e.what(), "text/plain");
    }
  });

  http.Get(R"(/gateway/([A-Za-z0-9_-]+)/recv)", [this, gateway_channel](const httplib::Request& req,
                                                                         httplib::Response& res) {
    const std::string id = req.matches[1].str();
    auto ch = gateway_channel(id);
    if (!ch) {
      res.status = 404;
      return;
    }
    int timeout_ms = 1000;
    if (req.has_param("timeout_ms")) timeout_ms = std::clamp(std::atoi(req.get_param_value("timeout_ms").c_str()), 0, 30000);
    std::vector<Message> got;
    if (auto m = ch->receive(std::chrono::milliseconds(timeout_ms))) {
      got.push_back(std::move(*m));
      while (auto more = ch->receive(std::chrono::milliseconds(0))) got.push_back(std::move(*more));
    }
    if (got.empty() && ch->closed()) {
      std::lock_guard lock(impl_->gateway_mu);
      impl_->gateway.erase(id);
      res.status = 410;
      return;
    }
    auto bytes = concat_frames(got);
    res.set_content(std::string(bytes.begin(), bytes.end()), "application/octet-stream");
  });

  auto append_lines = [this](const std::string& file, const std::vector<std::string>& lines) {
    std::lock_guard lock(impl_->upload_mu);
    std::ofstream out(fs::path(options_.out_dir) / file, std::ios::app);
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw Error("cannot write " + file);
  };

  http.Post("/upload/judgments", [append_lines](const httplib::Request& req, httplib::Response& res) {
    try {
      auto records = eval::parse_judgments(req.body);
      std::vector<std::string> lines;
      for (const auto& r : records) lines.push_back(eval::judgment_to_json(r));
      append_lines("judgments.jsonl", lines);
      res.set_content(json{{"accepted", records.size()}}.dump(), "application/json");
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  });

  http.Post("/upload/annotations", [append_lines](const httplib::Request& req, httplib::Response& res) {
    try {
      auto segments = data::parse_annotations(req.body);
      for (std::size_t i = 0; i < segments.size(); ++i) {
        segments[i].validate();
        for (std::size_t j = 0; j < i; ++j) {
          const auto& a = segments[i];
          const auto& b = segments[j];
          if (a.trajectory_id == b.trajectory_id && a.annotator_id == b.annotator_id && a.t0 < b.t1 && b.t0 < a.t1) {
            throw SpecError("overlapping segments from annotator '" + a.annotator_id + "' on " + a.trajectory_id);
          }
        }
      }
      std::vector<std::string> lines;
      for (const auto& s : segments) lines.push_back(data::annotation_to_json(s));
      append_lines("annotations.jsonl", lines);
      res.set_content(json{{"accepted", segments.size()}}.dump(), "application/json");
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  });

  if (options_.http_port == 0) {
    http_port_ = http.bind_to_any_port(options_.host);
  } else {
    http_port_ = http.bind_to_port(options_.host, options_.http_port) ? options_.http_port : -1;
  }
  if (http_port_ < 0) throw Error("http port " + std::to_string(options_.http_port) + " unavailable");
  http_thread_ = std::thread([this] { impl_->http.listen_after_bind(); });
  spdlog::info("serving http on {}:{}", options_.host, http_port_);
}

}  // namespace sima::net

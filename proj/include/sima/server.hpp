#pragma once

// Long-running session endpoint: the wire protocol over TCP, an HTTP
// gateway carrying the same frames for browsers, static assets and the
// judgment/annotation upload endpoints.

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "sima/netproto.hpp"

namespace sima::net {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 0;            // TCP wire protocol; 0 picks a free port
  int http_port = -1;      // gateway/uploads/static; -1 disables, 0 picks a free port
  std::vector<WorldKind> worlds = {WorldKind::kPlayRoom, WorldKind::kBuildLab, WorldKind::kHarvest};
  std::string out_dir = "sessions";  // trajectories and uploads
  std::string static_dir;            // playclient assets, optional
  SessionConfig session;
  int max_sessions = 8;
  /// How long a new connection may take to send Hello and Reset.
  std::chrono::milliseconds handshake_timeout{10000};
};

struct SessionRecord {
  std::string id;
  std::string task_id;
  std::uint64_t seed = 0;
  Role role = Role::kPlayer;
  std::string trajectory_path;
  EndEpisode end;
};

/// Sessions start when a client sends Hello followed by Reset{task_id, seed}
/// (or LoadState plus an Instruction for free play). Each session runs on its
/// own thread with its own world and recording.
class Server {
 public:
  explicit Server(ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds the listeners; throws Error when a port is in use.
  void start();
  /// Stops accepting, ends running sessions with kShutdown, flushes their
  /// recordings and joins every thread.
  void stop();

  int port() const { return port_; }
  int http_port() const { return http_port_; }
  std::vector<SessionRecord> finished() const;
  int active_sessions() const { return active_.load(); }

 private:
  struct Impl;
  void accept_loop();
  void serve_connection(std::shared_ptr<Channel> channel, std::string id);
  void start_http();

  ServerOptions options_;
  std::unique_ptr<Impl> impl_;
  int listen_fd_ = -1;
  int port_ = -1;
  int http_port_ = -1;
  std::shared_ptr<std::atomic<bool>> stop_;
  std::atomic<int> active_{0};
  std::atomic<std::uint64_t> next_id_{0};
  std::thread accept_thread_;
  std::thread http_thread_;
  mutable std::mutex mu_;
  std::vector<std::thread> sessions_;
  std::vector<SessionRecord> finished_;
};

/// Connects to a server's wire port.
std::shared_ptr<Channel> connect_tcp(const std::string& host, int port);

/// Gateway framing for browsers: the bodies of POST /gateway/<id>/send and
/// GET /gateway/<id>/recv are concatenated wire frames, byte-for-byte the
/// same as on the TCP port.
std::vector<std::uint8_t> concat_frames(const std::vector<Message>& messages);
std::vector<Message> split_frames(std::span<const std::uint8_t> bytes);

}  // namespace sima::net

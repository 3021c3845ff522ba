#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fedvib/fed/wire.hpp"

namespace fedvib::fed {

using PeerId = std::uint64_t;
using Millis = std::chrono::milliseconds;

/// Counts every frame that crosses a transport, in encoded bytes.
class TrafficMeter {
 public:
  struct Record {
    MessageType type;
    std::size_t bytes;
    bool upstream;  // client -> aggregator
  };

  void record(MessageType type, std::size_t bytes, bool upstream);

  std::uint64_t total_bytes() const;
  std::uint64_t upstream_bytes() const;
  std::uint64_t downstream_bytes() const;
  std::uint64_t frame_count() const;
  std::vector<Record> records() const;

 private:
  mutable std::mutex mu_;
  std::vector<Record> records_;
  std::uint64_t up_ = 0;
  std::uint64_t down_ = 0;
};

struct ServerEvent {
  enum class Kind { message, disconnected };
  Kind kind = Kind::message;
  PeerId peer = 0;
  std::optional<Message> message;
};

/// Aggregator side of a transport.
class ServerTransport {
 public:
  virtual ~ServerTransport() = default;
  /// Next event, or nullopt when nothing arrived within `timeout`.
  virtual std::optional<ServerEvent> poll(Millis timeout) = 0;
  virtual void send(PeerId peer, const Message& message) = 0;
  virtual void close(PeerId peer) = 0;
};

/// Training-node side of a transport.
class ClientTransport {
 public:
  virtual ~ClientTransport() = default;
  /// Throws TransportError when the aggregator is unreachable.
  virtual void connect() = 0;
  virtual void send(const Message& message) = 0;
  /// Next message, or nullopt on timeout. Throws TransportError when the
  /// connection is gone.
  virtual std::optional<Message> receive(Millis timeout) = 0;
  virtual void close() = 0;
};

// --- in-process ----------------------------------------------------------------

/// Message queues shared by one aggregator endpoint and any number of client
/// endpoints. Every message is encoded to a frame and decoded on delivery so
/// the bytes exchanged are exactly those of a socket transport.
class InProcessHub : public std::enable_shared_from_this<InProcessHub> {
 public:
  static std::shared_ptr<InProcessHub> create(TrafficMeter* meter = nullptr);

  std::unique_ptr<ServerTransport> server();
  /// A new client endpoint; connect() fails while `reachable` is false.
  std::unique_ptr<ClientTransport> client();

  void set_reachable(bool reachable);

  // Non-blocking helpers for deterministic single-threaded drivers.
  std::optional<ServerEvent> try_server_event();
  std::optional<Message> try_client_message(PeerId peer);
  bool idle() const;

 private:
  friend class InProcessServer;
  friend class InProcessClient;
  explicit InProcessHub(TrafficMeter* meter) : meter_(meter) {}

  void detach(PeerId peer, bool notify_server = true);
  void to_server(PeerId peer, const Message& message);
  void to_client(PeerId peer, const Message& message);
  std::optional<ServerEvent> wait_server(Millis timeout);
  std::optional<Message> wait_client(PeerId peer, Millis timeout);

  mutable std::mutex mu_;
  std::condition_variable cv_;
  TrafficMeter* meter_;
  bool reachable_ = true;
  PeerId next_peer_ = 1;
  std::deque<std::pair<PeerId, std::optional<Bytes>>> server_inbox_;  // nullopt = disconnect
  std::map<PeerId, std::deque<Bytes>> client_inbox_;
  std::map<PeerId, bool> connected_;
};

// --- stream sockets ----------------------------------------------------------

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// Parses "host:port"; throws ConfigError.
Endpoint parse_endpoint(const std::string& text);

struct RetryPolicy {
  std::size_t max_attempts = 5;
  Millis initial_backoff{100};
  double backoff_factor = 2.0;
  Millis max_backoff{2000};
};

/// Length-framed TCP server. Listens on construction; `port()` reports the
/// bound port when 0 was requested.
class TcpServer : public ServerTransport {
 public:
  explicit TcpServer(const Endpoint& listen, TrafficMeter* meter = nullptr);
  ~TcpServer() override;
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  std::uint16_t port() const { return port_; }

  std::optional<ServerEvent> poll(Millis timeout) override;
  void send(PeerId peer, const Message& message) override;
  void close(PeerId peer) override;

 private:
  struct Connection {
    int fd;
    Bytes buffer;
  };

  std::optional<ServerEvent> next_buffered();

  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  TrafficMeter* meter_;
  PeerId next_peer_ = 1;
  std::map<PeerId, Connection> connections_;
  std::deque<ServerEvent> pending_;
};

class TcpClient : public ClientTransport {
 public:
  explicit TcpClient(Endpoint aggregator, TrafficMeter* meter = nullptr);
  ~TcpClient() override;
  TcpClient(const TcpClient&) = delete;
  TcpClient& operator=(const TcpClient&) = delete;

  /// Single connection attempt; throws TransportError on failure.
  void connect() override;
  void send(const Message& message) override;
  std::optional<Message> receive(Millis timeout) override;
  void close() override;

 private:
  Endpoint endpoint_;
  TrafficMeter* meter_;
  int fd_ = -1;
  Bytes buffer_;
};

/// Extracts one complete frame from the front of `buffer`, if present.
std::optional<Bytes> take_frame(Bytes& buffer);

}  // namespace fedvib::fed

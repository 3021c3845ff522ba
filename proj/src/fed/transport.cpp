#include "fedvib/fed/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "fedvib/errors.hpp"

namespace fedvib::fed {

void TrafficMeter::record(MessageType type, std::size_t bytes, bool upstream) {
  std::lock_guard lock(mu_);
  records_.push_back({type, bytes, upstream});
  (upstream ? up_ : down_) += bytes;
}

std::uint64_t TrafficMeter::total_bytes() const {
  std::lock_guard lock(mu_);
  return up_ + down_;
}

std::uint64_t TrafficMeter::upstream_bytes() const {
  std::lock_guard lock(mu_);
  return up_;
}

std::uint64_t TrafficMeter::downstream_bytes() const {
  std::lock_guard lock(mu_);
  return down_;
}

std::uint64_t TrafficMeter::frame_count() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::vector<TrafficMeter::Record> TrafficMeter::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

std::optional<Bytes> take_frame(Bytes& buffer) {
  if (buffer.size() < kFrameHeaderSize) return std::nullopt;
  const FrameHeader h = decode_frame_header(buffer);
  const std::size_t total = kFrameHeaderSize + std::size_t(h.payload_len);
  if (buffer.size() < total) return std::nullopt;
  Bytes frame(buffer.begin(), buffer.begin() + std::ptrdiff_t(total));
  buffer.erase(buffer.begin(), buffer.begin() + std::ptrdiff_t(total));
  return frame;
}

// --- in-process ----------------------------------------------------------------

class InProcessServer : public ServerTransport {
 public:
  explicit InProcessServer(std::shared_ptr<InProcessHub> hub) : hub_(std::move(hub)) {}
  std::optional<ServerEvent> poll(Millis timeout) override { return hub_->wait_server(timeout); }
  void send(PeerId peer, const Message& message) override { hub_->to_client(peer, message); }
  void close(PeerId peer) override { hub_->detach(peer, false); }

 private:
  std::shared_ptr<InProcessHub> hub_;
};

class InProcessClient : public ClientTransport {
 public:
  explicit InProcessClient(std::shared_ptr<InProcessHub> hub) : hub_(std::move(hub)) {}
  ~InProcessClient() override { close(); }

  void connect() override {
    if (peer_) return;
    std::lock_guard lock(hub_->mu_);
    if (!hub_->reachable_) throw TransportError("in-process aggregator is not reachable");
    peer_ = hub_->next_peer_++;
    hub_->connected_[peer_] = true;
    hub_->client_inbox_[peer_];
  }

  void send(const Message& message) override {
    if (!peer_) throw TransportError("send on an unconnected client");
    hub_->to_server(peer_, message);
  }

  std::optional<Message> receive(Millis timeout) override {
    if (!peer_) throw TransportError("receive on an unconnected client");
    return hub_->wait_client(peer_, timeout);
  }

  void close() override {
    if (!peer_) return;
    hub_->detach(peer_);
    peer_ = 0;
  }

  PeerId peer() const { return peer_; }

 private:
  std::shared_ptr<InProcessHub> hub_;
  PeerId peer_ = 0;
};

std::shared_ptr<InProcessHub> InProcessHub::create(TrafficMeter* meter) {
  return std::shared_ptr<InProcessHub>(new InProcessHub(meter));
}

std::unique_ptr<ServerTransport> InProcessHub::server() {
  return std::make_unique<InProcessServer>(shared_from_this());
}

std::unique_ptr<ClientTransport> InProcessHub::client() {
  return std::make_unique<InProcessClient>(shared_from_this());
}

void InProcessHub::set_reachable(bool reachable) {
  std::lock_guard lock(mu_);
  reachable_ = reachable;
}

void InProcessHub::detach(PeerId peer, bool notify_server) {
  {
    std::lock_guard lock(mu_);
    auto it = connected_.find(peer);
    if (it == connected_.end() || !it->second) return;
    it->second = false;
    if (notify_server) server_inbox_.emplace_back(peer, std::nullopt);
  }
  cv_.notify_all();
}

void InProcessHub::to_server(PeerId peer, const Message& message) {
  Bytes frame = encode_frame(message);
  {
    std::lock_guard lock(mu_);
    if (!connected_[peer]) throw TransportError("in-process client is disconnected");
    if (meter_) meter_->record(type_of(message), frame.size(), true);
    server_inbox_.emplace_back(peer, std::move(frame));
  }
  cv_.notify_all();
}

void InProcessHub::to_client(PeerId peer, const Message& message) {
  Bytes frame = encode_frame(message);
  {
    std::lock_guard lock(mu_);
    auto it = connected_.find(peer);
    if (it == connected_.end() || !it->second) {
      throw TransportError("peer " + std::to_string(peer) + " is not connected");
    }
    if (meter_) meter_->record(type_of(message), frame.size(), false);
    client_inbox_[peer].push_back(std::move(frame));
  }
  cv_.notify_all();
}

std::optional<ServerEvent> InProcessHub::try_server_event() { return wait_server(Millis{0}); }

std::optional<Message> InProcessHub::try_client_message(PeerId peer) { return wait_client(peer, Millis{0}); }

bool InProcessHub::idle() const {
  std::lock_guard lock(mu_);
  if (!server_inbox_.empty()) return false;
  return std::all_of(client_inbox_.begin(), client_inbox_.end(), [](const auto& kv) { return kv.second.empty(); });
}

std::optional<ServerEvent> InProcessHub::wait_server(Millis timeout) {
  std::unique_lock lock(mu_);
  if (!cv_.wait_for(lock, timeout, [this] { return !server_inbox_.empty(); })) return std::nullopt;
  auto [peer, frame] = std::move(server_inbox_.front());
  server_inbox_.pop_front();
  lock.unlock();
  ServerEvent ev;
  ev.peer = peer;
  if (!frame) {
    ev.kind = ServerEvent::Kind::disconnected;
  } else {
    ev.message = decode_frame(*frame);
  }
  return ev;
}

std::optional<Message> InProcessHub::wait_client(PeerId peer, Millis timeout) {
  std::unique_lock lock(mu_);
  auto& inbox = client_inbox_[peer];
  const bool ready = cv_.wait_for(lock, timeout, [&] { return !inbox.empty() || !connected_[peer]; });
  if (!ready) return std::nullopt;
  if (inbox.empty()) throw TransportError("in-process connection closed");
  Bytes frame = std::move(inbox.front());
  inbox.pop_front();
  lock.unlock();
  return decode_frame(frame);
}

// --- sockets -------------------------------------------------------------------

namespace {

[[noreturn]] void sys_fail(const std::string& what) {
  throw TransportError(what + ": " + std::strerror(errno));
}

void write_all(int fd, const Bytes& bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        pollfd p{fd, POLLOUT, 0};
        ::poll(&p, 1, 1000);
        continue;
      }
      sys_fail("send");
    }
    off += std::size_t(n);
  }
}

/// Appends whatever is readable; returns false on orderly shutdown or error.
bool read_some(int fd, Bytes& buffer) {
  std::uint8_t chunk[65536];
  for (;;) {
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, MSG_DONTWAIT);
    if (n > 0) {
      buffer.insert(buffer.end(), chunk, chunk + n);
      if (std::size_t(n) < sizeof chunk) return true;
      continue;
    }
    if (n == 0) return false;
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) return true;
    return false;
  }
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

sockaddr_in resolve(const Endpoint& e) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(e.host.c_str(), nullptr, &hints, &res);
  if (rc != 0 || !res) throw TransportError("cannot resolve '" + e.host + "': " + ::gai_strerror(rc));
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(e.port);
  return addr;
}

}  // namespace

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw ConfigError("endpoint '" + text + "' is not host:port");
  Endpoint e;
  e.host = text.substr(0, colon);
  if (e.host.empty()) e.host = "0.0.0.0";
  const std::string port = text.substr(colon + 1);
  try {
    std::size_t used = 0;
    const unsigned long p = std::stoul(port, &used);
    if (used != port.size() || p > 65535) throw ConfigError("");
    e.port = std::uint16_t(p);
  } catch (const std::exception&) {
    throw ConfigError("endpoint '" + text + "' has an invalid port");
  }
  return e;
}

TcpServer::TcpServer(const Endpoint& listen, TrafficMeter* meter) : meter_(meter) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) sys_fail("socket");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = resolve(listen);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
    const int err = errno;
    ::close(listen_fd_);
    errno = err;
    sys_fail("bind " + listen.host + ":" + std::to_string(listen.port));
  }
  if (::listen(listen_fd_, 64) < 0) sys_fail("listen");
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpServer::~TcpServer() {
  for (auto& [peer, c] : connections_) ::close(c.fd);
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

std::optional<ServerEvent> TcpServer::next_buffered() {
  if (!pending_.empty()) {
    ServerEvent ev = std::move(pending_.front());
    pending_.pop_front();
    return ev;
  }
  for (auto it = connections_.begin(); it != connections_.end(); ++it) {
    auto& c = it->second;
    try {
      if (auto frame = take_frame(c.buffer)) {
        Message message = decode_frame(*frame);
        if (meter_) meter_->record(type_of(message), frame->size(), true);
        return ServerEvent{ServerEvent::Kind::message, it->first, std::move(message)};
      }
    } catch (const ParseError&) {
      // A peer that sends garbage is dropped.
      const PeerId peer = it->first;
      ::close(c.fd);
      connections_.erase(it);
      return ServerEvent{ServerEvent::Kind::disconnected, peer, std::nullopt};
    }
  }
  return std::nullopt;
}

std::optional<ServerEvent> TcpServer::poll(Millis timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (auto ev = next_buffered()) return ev;
    std::vector<pollfd> fds;
    std::vector<PeerId> peers;
    fds.push_back({listen_fd_, POLLIN, 0});
    for (auto& [peer, c] : connections_) {
      fds.push_back({c.fd, POLLIN, 0});
      peers.push_back(peer);
    }
    const auto left =
        std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now()).count();
    const int rc = ::poll(fds.data(), fds.size(), int(std::max<long long>(0, left)));
    if (rc < 0 && errno != EINTR) sys_fail("poll");
    if (rc <= 0) {
      if (std::chrono::steady_clock::now() >= deadline) return std::nullopt;
      continue;
    }
    if (fds[0].revents & POLLIN) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd >= 0) {
        set_nodelay(fd);
        connections_[next_peer_++] = Connection{fd, {}};
      }
    }
    for (std::size_t i = 1; i < fds.size(); ++i) {
      if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      auto it = connections_.find(peers[i - 1]);
      if (it == connections_.end()) continue;
      if (!read_some(it->second.fd, it->second.buffer)) {
        // Deliver complete frames that arrived before the hang-up first.
        while (true) {
          std::optional<Message> message;
          std::size_t size = 0;
          try {
            auto frame = take_frame(it->second.buffer);
            if (!frame) break;
            size = frame->size();
            message = decode_frame(*frame);
          } catch (const ParseError&) {
            break;
          }
          if (meter_) meter_->record(type_of(*message), size, true);
          pending_.push_back({ServerEvent::Kind::message, it->first, std::move(message)});
        }
        pending_.push_back({ServerEvent::Kind::disconnected, it->first, std::nullopt});
        ::close(it->second.fd);
        connections_.erase(it);
      }
    }
  }
}

void TcpServer::send(PeerId peer, const Message& message) {
  auto it = connections_.find(peer);
  if (it == connections_.end()) throw TransportError("peer " + std::to_string(peer) + " is not connected");
  const Bytes frame = encode_frame(message);
  write_all(it->second.fd, frame);
  if (meter_) meter_->record(type_of(message), frame.size(), false);
}

void TcpServer::close(PeerId peer) {
  auto it = connections_.find(peer);
  if (it == connections_.end()) return;
  ::close(it->second.fd);
  connections_.erase(it);
}

TcpClient::TcpClient(Endpoint aggregator, TrafficMeter* meter)
    : endpoint_(std::move(aggregator)), meter_(meter) {}

TcpClient::~TcpClient() { close(); }

void TcpClient::connect() {
  if (fd_ >= 0) return;
  const sockaddr_in addr = resolve(endpoint_);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) sys_fail("socket");
  if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    const int err = errno;
    ::close(fd);
    errno = err;
    sys_fail("connect " + endpoint_.host + ":" + std::to_string(endpoint_.port));
  }
  set_nodelay(fd);
  fd_ = fd;
}

void TcpClient::send(const Message& message) {
  if (fd_ < 0) throw TransportError("send on an unconnected client");
  const Bytes frame = encode_frame(message);
  write_all(fd_, frame);
  if (meter_) meter_->record(type_of(message), frame.size(), true);
}

std::optional<Message> TcpClient::receive(Millis timeout) {
  if (fd_ < 0) throw TransportError("receive on an unconnected client");
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (auto frame = take_frame(buffer_)) {
      Message message = decode_frame(*frame);
      if (meter_) meter_->record(type_of(message), frame->size(), false);
      return message;
    }
    const auto left =
        std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now()).count();
    if (left <= 0) return std::nullopt;
    pollfd p{fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, int(left));
    if (rc < 0 && errno != EINTR) sys_fail("poll");
    if (rc > 0 && !read_some(fd_, buffer_)) {
      if (auto frame = take_frame(buffer_)) {
        Message message = decode_frame(*frame);
        if (meter_) meter_->record(type_of(message), frame->size(), false);
        return message;
      }
      close();
      throw TransportError("aggregator closed the connection");
    }
  }
}

void TcpClient::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
  buffer_.clear();
}

}  // namespace fedvib::fed

#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "dml/error.hpp"
#include "dml/server.hpp"
#include "dml/wire.hpp"

namespace dml {

/// How a node reaches the parameter server.
class ServerEndpoint {
 public:
  virtual ~ServerEndpoint() = default;
  virtual Reply pull(std::uint32_t node_id) = 0;
  virtual Reply push_swap(std::uint32_t node_id, const Theta& theta) = 0;
  /// Bytes sent and received so far, counted as encoded frames.
  virtual std::uint64_t bytes_on_wire() const = 0;
};

/// Direct calls into a ParameterServer living in this process. Byte counts
/// are the sizes the same exchange would have on the TCP transport.
class InProcessEndpoint final : public ServerEndpoint {
 public:
  explicit InProcessEndpoint(ParameterServer& server) : server_(&server) {}

  Reply pull(std::uint32_t node_id) override {
    bytes_ += wire::request_frame_size(0) + wire::response_frame_size(server_->param_size());
    return server_->pull(node_id);
  }

  Reply push_swap(std::uint32_t node_id, const Theta& theta) override {
    const auto dim = static_cast<std::size_t>(theta.values().size());
    bytes_ += wire::request_frame_size(dim);
    Reply r = server_->push_swap(node_id, theta);
    bytes_ += wire::response_frame_size(dim);
    return r;
  }

  std::uint64_t bytes_on_wire() const override { return bytes_; }

 private:
  ParameterServer* server_;
  std::uint64_t bytes_ = 0;
};

namespace detail {

inline constexpr std::uint32_t kMaxFrameBody = 64u << 20;

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }

  void close() noexcept {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

inline void send_all(int fd, const wire::Bytes& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("send failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

// False on clean EOF before the first byte.
inline bool recv_exact(int fd, std::uint8_t* dst, std::size_t len) {
  std::size_t off = 0;
  while (off < len) {
    const ssize_t n = ::recv(fd, dst + off, len - off, 0);
    if (n == 0) {
      if (off == 0) return false;
      throw IoError("connection closed mid-frame");
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("recv failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

// Reads one frame body; nullopt on clean EOF.
inline std::optional<wire::Bytes> read_frame(int fd) {
  std::array<std::uint8_t, 4> prefix{};
  if (!recv_exact(fd, prefix.data(), prefix.size())) return std::nullopt;
  const std::uint32_t len = wire::decode_length(prefix);
  if (len > kMaxFrameBody) throw IoError("frame of " + std::to_string(len) + " bytes exceeds limit");
  wire::Bytes body(len);
  if (len > 0 && !recv_exact(fd, body.data(), len)) throw IoError("connection closed mid-frame");
  return body;
}

}  // namespace detail

/// Serves a ParameterServer over TCP on 127.0.0.1 until `stop()` or a
/// SHUTDOWN request. One thread per connection.
class TcpServer {
 public:
  TcpServer(ParameterServer& server, std::uint16_t port = 0) : server_(&server) {
    detail::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw IoError(std::string("socket failed: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw IoError("bind to port " + std::to_string(port) + " failed: " + std::strerror(errno));
    }
    if (::listen(s.fd(), 64) != 0) throw IoError(std::string("listen failed: ") + std::strerror(errno));
    socklen_t len = sizeof addr;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    listener_ = std::move(s);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  ~TcpServer() { stop(); }

  std::uint16_t port() const noexcept { return port_; }

  /// Idempotent; call from the owning thread only.
  void stop() {
    stopping_ = true;
    ::shutdown(listener_.fd(), SHUT_RDWR);
    {
      std::lock_guard lock(conn_mu_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(conn_mu_);
      workers.swap(workers_);
    }
    for (auto& w : workers) w.join();
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;
      }
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(conn_mu_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      conn_fds_.push_back(fd);
      workers_.emplace_back([this, fd] { serve(fd); });
    }
  }

  void serve(int fd) {
    detail::Socket conn(fd);
    try {
      while (auto body = detail::read_frame(fd)) {
        bool shutdown = false;
        detail::send_all(fd, handle(*body, shutdown));
        if (shutdown) {
          stopping_ = true;
          ::shutdown(listener_.fd(), SHUT_RDWR);
          break;
        }
      }
    } catch (const Error&) {
      // Peer vanished or sent an oversized frame; drop the connection.
    }
    std::lock_guard lock(conn_mu_);
    std::erase(conn_fds_, fd);
    conn.close();
  }

  wire::Bytes handle(const wire::Bytes& body, bool& shutdown) {
    wire::Request req;
    try {
      req = wire::decode_request(body);
    } catch (const InvalidArgument& e) {
      const bool bad_op = !body.empty() && body[0] != 0x01 && body[0] != 0x02 && body[0] != 0x03;
      return wire::encode(wire::ErrorResponse{bad_op ? wire::ErrorCode::unknown_opcode : wire::ErrorCode::malformed,
                                              e.what()});
    }
    switch (req.op) {
      case wire::Opcode::pull: {
        const Reply r = server_->pull(req.node_id);
        return wire::encode(wire::Response{r.t, wire::to_values(r.theta.values())});
      }
      case wire::Opcode::push_swap: {
        if (req.values.size() != server_->param_size()) {
          return wire::encode(wire::ErrorResponse{
              wire::ErrorCode::dimension_mismatch,
              "pushed " + std::to_string(req.values.size()) + " values, server holds " +
                  std::to_string(server_->param_size())});
        }
        try {
          const Reply r = server_->push_swap(req.node_id, Theta(wire::from_values(req.values)));
          return wire::encode(wire::Response{r.t, wire::to_values(r.theta.values())});
        } catch (const InvalidArgument& e) {
          return wire::encode(wire::ErrorResponse{wire::ErrorCode::invalid_value, e.what()});
        }
      }
      case wire::Opcode::shutdown:
        shutdown = true;
        return wire::encode(wire::Response{server_->t(), {}});
      default:
        return wire::encode(wire::ErrorResponse{wire::ErrorCode::unknown_opcode, "unexpected opcode"});
    }
  }

  ParameterServer* server_;
  detail::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex conn_mu_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> workers_;
};

/// Client side of the TCP transport. One connection, used from one thread.
class TcpEndpoint final : public ServerEndpoint {
 public:
  TcpEndpoint(const std::string& host, std::uint16_t port) {
    detail::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw IoError(std::string("socket failed: ") + std::strerror(errno));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      throw IoError("invalid IPv4 address '" + host + "'");
    }
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw IoError("connect to " + host + ":" + std::to_string(port) + " failed: " + std::strerror(errno));
    }
    const int one = 1;
    ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    sock_ = std::move(s);
  }

  Reply pull(std::uint32_t node_id) override {
    const auto resp = round_trip(wire::Request{wire::Opcode::pull, node_id, {}});
    return {Theta(wire::from_values(resp.values)), resp.t};
  }

  Reply push_swap(std::uint32_t node_id, const Theta& theta) override {
    const auto resp = round_trip(wire::Request{wire::Opcode::push_swap, node_id, wire::to_values(theta.values())});
    return {Theta(wire::from_values(resp.values)), resp.t};
  }

  /// Asks the server process to stop accepting work.
  void shutdown_server() { round_trip(wire::Request{wire::Opcode::shutdown, 0, {}}); }

  std::uint64_t bytes_on_wire() const override { return bytes_; }

 private:
  wire::Response round_trip(const wire::Request& req) {
    const auto frame = wire::encode(req);
    detail::send_all(sock_.fd(), frame);
    bytes_ += frame.size();
    auto body = detail::read_frame(sock_.fd());
    if (!body) throw IoError("server closed the connection");
    bytes_ += body->size() + 4;
    auto decoded = wire::decode_response(*body);
    if (auto* err = std::get_if<wire::ErrorResponse>(&decoded)) {
      if (err->code == wire::ErrorCode::dimension_mismatch || err->code == wire::ErrorCode::invalid_value) {
        throw InvalidArgument("server rejected request: " + err->message);
      }
      throw IoError("server error " + std::to_string(static_cast<int>(err->code)) + ": " + err->message);
    }
    return std::get<wire::Response>(std::move(decoded));
  }

  detail::Socket sock_;
  std::uint64_t bytes_ = 0;
};

}  // namespace dml

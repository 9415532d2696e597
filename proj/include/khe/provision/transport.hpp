#pragma once

// Byte-stream transport. The protocol only needs send-all / receive-exactly;
// TCP is the real one, tests plug in pipes and recorders.

#include <cerrno>
#include <charconv>
#include <chrono>
#include <cstring>
#include <memory>
#include <string>
#include <string_view>
#include <utility>

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "khe/bytes.hpp"
#include "khe/error.hpp"

namespace khe::provision {

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send_all(ByteView data) = 0;
  /// Throws TransportError if the peer closes before n bytes arrive.
  virtual Bytes recv_exact(std::size_t n) = 0;
};

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  /// "host:port"; IPv6 literals as "[::1]:port".
  static Endpoint parse(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon == 0)
      throw Error(ErrorCode::InvalidRequest, "endpoint must be host:port");
    std::string_view host = text.substr(0, colon), port = text.substr(colon + 1);
    if (host.size() >= 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
    unsigned value = 0;
    auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
    if (ec != std::errc() || p != port.data() + port.size() || value > 65535)
      throw Error(ErrorCode::InvalidRequest, "bad port");
    return Endpoint{std::string(host), static_cast<std::uint16_t>(value)};
  }

  std::string to_string() const { return host + ":" + std::to_string(port); }
};

class TcpStream final : public Transport {
 public:
  explicit TcpStream(int fd) : fd_(fd) {}
  TcpStream(TcpStream&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  TcpStream& operator=(TcpStream&&) = delete;
  ~TcpStream() override {
    if (fd_ >= 0) ::close(fd_);
  }

  static TcpStream connect(const Endpoint& ep) {
    addrinfo hints{};
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    std::string port = std::to_string(ep.port);
    if (int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res); rc != 0)
      throw Error(ErrorCode::TransportError, std::string("resolve: ") + gai_strerror(rc));
    int fd = -1;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
      fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw Error(ErrorCode::TransportError, "connect to " + ep.to_string());
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return TcpStream(fd);
  }

  /// Receive timeout; a stalled peer then surfaces as TransportError.
  void set_timeout(std::chrono::milliseconds t) {
    timeval tv{static_cast<time_t>(t.count() / 1000), static_cast<suseconds_t>(t.count() % 1000 * 1000)};
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  }

  void send_all(ByteView data) override {
    std::size_t off = 0;
    while (off < data.size()) {
      ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorCode::TransportError, std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
  }

  Bytes recv_exact(std::size_t n) override {
    Bytes out(n);
    std::size_t off = 0;
    while (off < n) {
      ssize_t r = ::recv(fd_, out.data() + off, n - off, 0);
      if (r < 0 && errno == EINTR) continue;
      if (r == 0) throw Error(ErrorCode::TransportError, "connection closed");
      if (r < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) throw Error(ErrorCode::TransportError, "timed out");
      if (r < 0) throw Error(ErrorCode::TransportError, std::strerror(errno));
      off += static_cast<std::size_t>(r);
    }
    return out;
  }

 private:
  int fd_;
};

class TcpListener {
 public:
  /// Port 0 picks a free port; see port().
  explicit TcpListener(const Endpoint& ep) {
    addrinfo hints{};
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    std::string port = std::to_string(ep.port);
    const char* host = ep.host.empty() ? nullptr : ep.host.c_str();
    if (int rc = ::getaddrinfo(host, port.c_str(), &hints, &res); rc != 0)
      throw Error(ErrorCode::TransportError, std::string("resolve: ") + gai_strerror(rc));
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
      fd_ = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd_ < 0) continue;
      int one = 1;
      ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(fd_, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd_, 8) == 0) break;
      ::close(fd_);
      fd_ = -1;
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) throw Error(ErrorCode::TransportError, "listen on " + ep.to_string());

    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = addr.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
                                       : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }

  std::uint16_t port() const noexcept { return port_; }

  TcpStream accept() {
    for (;;) {
      int fd = ::accept(fd_, nullptr, nullptr);
      if (fd >= 0) return TcpStream(fd);
      if (errno != EINTR) throw Error(ErrorCode::TransportError, std::strerror(errno));
    }
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

}  // namespace khe::provision

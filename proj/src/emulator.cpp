#include "flexicup/emulator.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>

#include "flexicup/error.hpp"

namespace flexicup::device {

namespace {

std::uint64_t steady_now_us() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

void send_all(int fd, const std::vector<std::uint8_t>& bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw SessionError("send failed: " + std::string(std::strerror(errno)));
    }
    off += static_cast<std::size_t>(n);
  }
}

std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
  const auto colon = endpoint.rfind(':');
  if (colon == std::string::npos)
    throw ParamError("endpoint must be host:port, got '" + endpoint + "'");
  return {endpoint.substr(0, colon), endpoint.substr(colon + 1)};
}

}  // namespace

EmulatorServer::EmulatorServer(scene::Scene scene, scene::ConfigId config_id,
                               const physics::ConfigRegistry& registry)
    : scene_(std::move(scene)), config_id_(config_id), registry_(registry) {
  scene_.validate();
}

EmulatorServer::~EmulatorServer() {
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

void EmulatorServer::listen(const std::string& endpoint) {
  const auto [host, port] = split_endpoint(endpoint);

  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.empty() ? nullptr : host.c_str(), port.c_str(), &hints, &res) != 0)
    throw IoError("cannot resolve endpoint " + endpoint);

  listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (listen_fd_ < 0) {
    ::freeaddrinfo(res);
    throw IoError("socket creation failed");
  }
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) != 0) {
    ::freeaddrinfo(res);
    throw IoError("bind failed for " + endpoint + ": " + std::strerror(errno));
  }
  ::freeaddrinfo(res);
  if (::listen(listen_fd_, 1) != 0) throw IoError("listen failed");

  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

std::string EmulatorServer::endpoint() const {
  return "127.0.0.1:" + std::to_string(port_);
}

std::uint64_t EmulatorServer::serve_one() {
  if (listen_fd_ < 0) throw SessionError("server is not listening");
  pollfd pfd{listen_fd_, POLLIN, 0};
  while (!stop_.load()) {
    const int r = ::poll(&pfd, 1, 100);
    if (r < 0 && errno != EINTR) throw IoError("poll failed on listen socket");
    if (r > 0 && (pfd.revents & POLLIN)) {
      const int client = ::accept(listen_fd_, nullptr, nullptr);
      if (client < 0) continue;
      frames_sent_ = 0;
      run_session(client);
      ::close(client);
      return frames_sent_;
    }
  }
  return 0;
}

void EmulatorServer::serve_forever() {
  while (!stop_.load()) serve_one();
}

void EmulatorServer::run_session(int client_fd) {
  const int one = 1;
  ::setsockopt(client_fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));

  EmulatorCore core(scene_, config_id_, registry_);
  wire::StreamDecoder decoder;
  std::uint8_t rx[65536];
  std::uint32_t state_seq = 0;

  // Frames keep a wall-clock cadence; the core's virtual clock advances by
  // exactly one period per frame so timestamps stay deterministic.
  std::uint64_t next_frame_at = steady_now_us();
  std::uint64_t frames_since_state = 0;

  for (;;) {
    const std::uint64_t now = steady_now_us();
    int wait_ms = 0;
    if (next_frame_at > now)
      wait_ms = static_cast<int>((next_frame_at - now) / 1000);

    pollfd pfd{client_fd, POLLIN, 0};
    const int r = ::poll(&pfd, 1, wait_ms);
    if (r < 0 && errno != EINTR) return;

    if (r > 0 && (pfd.revents & (POLLIN | POLLHUP | POLLERR))) {
      const ssize_t n = ::recv(client_fd, rx, sizeof(rx), 0);
      if (n == 0) return;  // client disconnected
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        return;
      }
      decoder.feed(rx, static_cast<std::size_t>(n));
      while (auto msg = decoder.next()) {
        const auto result = core.apply(*msg);
        try {
          if (result.ok) {
            send_all(client_fd, wire::encode_message(wire::MsgType::Ack, msg->seq, {}));
          } else {
            send_all(client_fd,
                     wire::encode_message(wire::MsgType::Err, msg->seq,
                                          wire::encode_err_payload(result.code,
                                                                   result.detail)));
          }
        } catch (const SessionError&) {
          return;
        }
      }
    }

    if (steady_now_us() >= next_frame_at) {
      core.tick_us(core.frame_period_us());
      const auto frame = core.capture_frame();
      try {
        send_all(client_fd, wire::encode_message(wire::MsgType::Frame, frame.seq,
                                                 wire::encode_frame_payload(frame)));
        ++frames_sent_;
        // STATE telemetry interleaved at 10 Hz.
        if (++frames_since_state >= static_cast<std::uint64_t>(
                std::max(1.0, core.frame_rate_hz() / 10.0))) {
          frames_since_state = 0;
          send_all(client_fd,
                   wire::encode_message(wire::MsgType::State, ++state_seq,
                                        wire::encode_state_payload(core.state())));
        }
      } catch (const SessionError&) {
        return;
      }
      next_frame_at += core.frame_period_us();
      const std::uint64_t after = steady_now_us();
      if (next_frame_at + 5 * core.frame_period_us() < after)
        next_frame_at = after;  // fell far behind: drop the backlog
    }
  }
}

}  // namespace flexicup::device

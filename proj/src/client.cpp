#include "flexicup/client.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <cstring>

#include "flexicup/error.hpp"

namespace flexicup::device {

namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

DeviceClient::~DeviceClient() { close(); }

void DeviceClient::connect(const std::string& endpoint) {
  std::string ep = endpoint;
  if (ep.empty()) {
    const char* env = std::getenv("FLEXICUP_ENDPOINT");
    if (env == nullptr || *env == '\0')
      throw ParamError("no endpoint given and FLEXICUP_ENDPOINT is unset");
    ep = env;
  }
  const auto colon = ep.rfind(':');
  if (colon == std::string::npos)
    throw ParamError("endpoint must be host:port, got '" + ep + "'");
  const std::string host = ep.substr(0, colon);
  const std::string port = ep.substr(colon + 1);

  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0)
    throw IoError("cannot resolve " + ep);
  fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd_ < 0) {
    ::freeaddrinfo(res);
    throw IoError("socket creation failed");
  }
  if (::connect(fd_, res->ai_addr, res->ai_addrlen) != 0) {
    ::freeaddrinfo(res);
    ::close(fd_);
    fd_ = -1;
    throw SessionError("connect to " + ep + " failed: " + std::strerror(errno));
  }
  ::freeaddrinfo(res);
  const int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

void DeviceClient::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

bool DeviceClient::pump(int timeout_ms) {
  if (fd_ < 0) throw SessionError("client is not connected");
  pollfd pfd{fd_, POLLIN, 0};
  const int r = ::poll(&pfd, 1, timeout_ms);
  if (r < 0) {
    if (errno == EINTR) return false;
    throw IoError("poll failed");
  }
  if (r == 0) return false;
  std::uint8_t rx[65536];
  const ssize_t n = ::recv(fd_, rx, sizeof(rx), 0);
  if (n == 0) {
    close();
    throw SessionError("emulator closed the connection");
  }
  if (n < 0) {
    if (errno == EINTR || errno == EAGAIN) return false;
    throw IoError("recv failed");
  }
  decoder_.feed(rx, static_cast<std::size_t>(n));
  while (auto msg = decoder_.next()) {
    switch (msg->type) {
      case wire::MsgType::Frame: {
        auto frame = wire::decode_frame_payload(msg->payload);
        if (pending_frame_ && pending_frame_->seq > last_delivered_seq_)
          ++dropped_;  // overwritten before delivery
        pending_frame_ = std::move(frame);
        break;
      }
      case wire::MsgType::State:
        latest_state_ = wire::decode_state_payload(msg->payload);
        ++state_count_;
        break;
      case wire::MsgType::Ack:
        last_ack_ = {msg->seq, CommandStatus{}};
        break;
      case wire::MsgType::Err: {
        CommandStatus status;
        status.ok = false;
        status.code = wire::decode_err_code(msg->payload);
        status.detail.assign(msg->payload.begin() + 1, msg->payload.end());
        last_ack_ = {msg->seq, status};
        break;
      }
      default:
        break;  // commands are never server->client; ignore
    }
  }
  return true;
}

void DeviceClient::send_command(wire::MsgType type, std::uint32_t seq,
                                const std::vector<std::uint8_t>& payload) {
  if (fd_ < 0) throw SessionError("client is not connected");
  const auto bytes = wire::encode_message(type, seq, payload);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      close();
      throw SessionError("send failed");
    }
    off += static_cast<std::size_t>(n);
  }
}

CommandStatus DeviceClient::wait_ack(std::uint32_t seq, int timeout_ms) {
  const auto deadline = now_ms() + timeout_ms;
  for (;;) {
    if (last_ack_ && last_ack_->first == seq) {
      const auto status = last_ack_->second;
      last_ack_.reset();
      return status;
    }
    const auto left = deadline - now_ms();
    if (left <= 0) throw TimeoutError("no ACK for command seq " + std::to_string(seq));
    pump(static_cast<int>(left));
  }
}

CommandStatus DeviceClient::set_led(bool on) {
  const auto seq = next_cmd_seq_++;
  send_command(wire::MsgType::CmdLed, seq, wire::encode_bool_payload(on));
  return wait_ack(seq, 1000);
}

CommandStatus DeviceClient::set_valve(bool open) {
  const auto seq = next_cmd_seq_++;
  send_command(wire::MsgType::CmdValve, seq, wire::encode_bool_payload(open));
  return wait_ack(seq, 1000);
}

CommandStatus DeviceClient::set_cam(const wire::CamPayload& cam) {
  const auto seq = next_cmd_seq_++;
  send_command(wire::MsgType::CmdCam, seq, wire::encode_cam_payload(cam));
  return wait_ack(seq, 1000);
}

CommandStatus DeviceClient::move_to(double x_cm, double y_cm, double z_cm,
                                    double tilt_deg) {
  const auto seq = next_cmd_seq_++;
  send_command(wire::MsgType::CmdMove, seq,
               wire::encode_move_payload({x_cm, y_cm, z_cm, tilt_deg}));
  return wait_ack(seq, 1000);
}

sensor::Frame DeviceClient::next_frame(int timeout_ms) {
  return next_frame_after(last_delivered_seq_, timeout_ms);
}

sensor::Frame DeviceClient::next_frame_after(std::uint32_t after_seq, int timeout_ms) {
  const auto deadline = now_ms() + timeout_ms;
  for (;;) {
    if (pending_frame_ && pending_frame_->seq > after_seq) {
      auto frame = std::move(*pending_frame_);
      pending_frame_.reset();
      last_delivered_seq_ = frame.seq;
      return frame;
    }
    const auto left = deadline - now_ms();
    if (left <= 0) throw TimeoutError("no frame after seq " + std::to_string(after_seq));
    pump(static_cast<int>(left));
  }
}

wire::StatePayload DeviceClient::state(int timeout_ms) {
  const auto deadline = now_ms() + timeout_ms;
  const auto entry_count = state_count_;
  while (state_count_ == entry_count) {
    const auto left = deadline - now_ms();
    if (left <= 0) throw TimeoutError("no STATE telemetry received");
    pump(static_cast<int>(left));
  }
  return *latest_state_;
}

}  // namespace flexicup::device

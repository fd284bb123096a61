#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "flexicup/sensor.hpp"
#include "flexicup/wire.hpp"

namespace flexicup::device {

struct CommandStatus {
  bool ok = true;
  wire::ErrCode code = wire::ErrCode::Malformed;
  std::string detail;
};

// Blocking client for one emulator session. Frames may be dropped (only
// the newest undelivered frame is kept) but never reordered.
class DeviceClient {
 public:
  DeviceClient() = default;
  ~DeviceClient();
  DeviceClient(const DeviceClient&) = delete;
  DeviceClient& operator=(const DeviceClient&) = delete;

  // endpoint "host:port"; empty uses $FLEXICUP_ENDPOINT.
  void connect(const std::string& endpoint = "");
  void close();
  bool connected() const { return fd_ >= 0; }

  CommandStatus set_led(bool on);
  CommandStatus set_valve(bool open);
  CommandStatus set_cam(const wire::CamPayload& cam);
  CommandStatus move_to(double x_cm, double y_cm, double z_cm, double tilt_deg);

  // Newest frame with seq > after_seq (default: newer than the last one
  // delivered). Throws TimeoutError after timeout_ms.
  sensor::Frame next_frame(int timeout_ms = 1000);
  sensor::Frame next_frame_after(std::uint32_t after_seq, int timeout_ms = 1000);

  // Waits for the next STATE message so the caller sees fresh telemetry.
  wire::StatePayload state(int timeout_ms = 1000);

  // Most recent STATE already received, without waiting for a new one.
  const std::optional<wire::StatePayload>& cached_state() const { return latest_state_; }

  std::uint32_t last_frame_seq() const { return last_delivered_seq_; }
  // Highest frame seq observed so far, delivered or still pending. A frame
  // with a larger seq is guaranteed to be newer than the last command ack.
  std::uint32_t latest_seen_seq() const {
    return pending_frame_ && pending_frame_->seq > last_delivered_seq_
               ? pending_frame_->seq
               : last_delivered_seq_;
  }
  std::size_t dropped_frames() const { return dropped_; }

 private:
  void send_command(wire::MsgType type, std::uint32_t seq,
                    const std::vector<std::uint8_t>& payload);
  CommandStatus wait_ack(std::uint32_t seq, int timeout_ms);
  // Read whatever is available (blocking up to timeout); dispatch into
  // pending frame/state/ack slots. Returns false on timeout.
  bool pump(int timeout_ms);

  int fd_ = -1;
  wire::StreamDecoder decoder_;
  std::uint32_t next_cmd_seq_ = 0;
  std::optional<sensor::Frame> pending_frame_;
  std::optional<wire::StatePayload> latest_state_;
  std::uint64_t state_count_ = 0;
  std::optional<std::pair<std::uint32_t, CommandStatus>> last_ack_;
  std::uint32_t last_delivered_seq_ = 0;
  std::size_t dropped_ = 0;
};

}  // namespace flexicup::device

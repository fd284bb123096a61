#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flexicup/scene.hpp"
#include "flexicup/sensor.hpp"

namespace flexicup::wire {

enum class MsgType : std::uint8_t {
  Frame = 0x01,
  State = 0x02,
  CmdLed = 0x10,
  CmdValve = 0x11,
  CmdCam = 0x12,
  CmdMove = 0x13,
  Ack = 0x20,
  Err = 0x21,
};

bool msg_type_valid(std::uint8_t raw);

enum class ErrCode : std::uint8_t {
  Malformed = 0x01,
  OutOfBounds = 0x02,
  Unsupported = 0x03,
};

constexpr std::uint8_t kMagic0 = 0x46;
constexpr std::uint8_t kMagic1 = 0x43;
constexpr std::uint8_t kVersion = 0x01;
constexpr std::size_t kHeaderLen = 12;
constexpr std::size_t kMaxPayload = 2'000'000;

struct Message {
  MsgType type = MsgType::Ack;
  std::uint32_t seq = 0;
  std::vector<std::uint8_t> payload;
};

// IEEE CRC-32 (reflected 0xEDB88320, init and final xor 0xFFFFFFFF).
std::uint32_t crc32(const std::uint8_t* data, std::size_t len);

// header + payload + crc; throws ProtocolError on oversize payload or
// invalid type.
std::vector<std::uint8_t> encode_message(MsgType type, std::uint32_t seq,
                                         const std::vector<std::uint8_t>& payload);

// Incremental decoder: feed bytes, pop complete messages. Garbage and
// corrupt frames are skipped by resynchronizing on the magic bytes.
class StreamDecoder {
 public:
  void feed(const std::uint8_t* data, std::size_t len);
  void feed(const std::vector<std::uint8_t>& data);
  // Next complete valid message, or nullopt when more bytes are needed.
  std::optional<Message> next();

  std::size_t corrupt_count() const { return corrupt_; }
  std::size_t buffered_bytes() const { return buf_.size() - start_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t start_ = 0;   // consumed prefix
  std::size_t corrupt_ = 0;
  void compact();
};

// Telemetry snapshot carried by STATE messages. The first eight scalars
// form the policy state vector s = [x, y, z, tilt, led, valve, pressure,
// attached].
struct StatePayload {
  double x_cm = 0.0;
  double y_cm = 0.0;
  double z_cm = 0.0;
  double tilt_deg = 0.0;
  bool led_on = false;
  bool valve_open = false;
  double pressure_kpa = 101.325;
  bool attached = false;
  double battery_fraction = 1.0;
  scene::SuctionMode mode = scene::SuctionMode::Vacuum;
  scene::ConfigId config_id = scene::ConfigId::I;

  std::array<double, 8> vector() const;
};

struct CamPayload {
  double exposure_gain = 1.0;
  double rate_hz = 30.0;
  std::uint8_t downscale = 1;
};

struct MovePayload {
  double x_cm = 0.0;
  double y_cm = 0.0;
  double z_cm = 0.0;
  double tilt_deg = 0.0;
};

std::vector<std::uint8_t> encode_frame_payload(const sensor::Frame& frame);
sensor::Frame decode_frame_payload(const std::vector<std::uint8_t>& payload);

std::vector<std::uint8_t> encode_state_payload(const StatePayload& state);
StatePayload decode_state_payload(const std::vector<std::uint8_t>& payload);

std::vector<std::uint8_t> encode_bool_payload(bool value);
bool decode_bool_payload(const std::vector<std::uint8_t>& payload);

std::vector<std::uint8_t> encode_cam_payload(const CamPayload& cam);
CamPayload decode_cam_payload(const std::vector<std::uint8_t>& payload);

std::vector<std::uint8_t> encode_move_payload(const MovePayload& move);
MovePayload decode_move_payload(const std::vector<std::uint8_t>& payload);

std::vector<std::uint8_t> encode_err_payload(ErrCode code, const std::string& detail);
ErrCode decode_err_code(const std::vector<std::uint8_t>& payload);

}  // namespace flexicup::wire

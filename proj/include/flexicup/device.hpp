#pragma once

#include <cstdint>
#include <string>

#include "flexicup/physics.hpp"
#include "flexicup/registry.hpp"
#include "flexicup/scene.hpp"
#include "flexicup/sensor.hpp"
#include "flexicup/wire.hpp"

namespace flexicup::device {

// Outcome of applying one command to the device core.
struct CommandResult {
  bool ok = true;
  wire::ErrCode code = wire::ErrCode::Malformed;
  std::string detail;
};

// One emulated device: scene + suction model + renderer + mutable state.
// Drives a virtual microsecond clock so sessions replay deterministically;
// the socket server maps it onto wall time, benches step it directly.
class EmulatorCore {
 public:
  EmulatorCore(scene::Scene scene, scene::ConfigId config_id,
               const physics::ConfigRegistry& registry = physics::ConfigRegistry::defaults());

  const wire::StatePayload& state() const { return state_; }
  const scene::Scene& scene() const { return renderer_.scene(); }
  const physics::SuctionConfig& suction() const { return suction_; }
  double frame_rate_hz() const { return rate_hz_; }
  std::uint64_t now_us() const { return now_us_; }
  std::uint64_t frame_period_us() const {
    return static_cast<std::uint64_t>(1e6 / rate_hz_);
  }

  // Command handlers; each returns ok or an error and leaves state
  // untouched on failure.
  CommandResult set_led(bool on);
  CommandResult set_valve(bool open);
  CommandResult set_cam(const wire::CamPayload& cam);
  CommandResult move_to(const wire::MovePayload& move);
  CommandResult apply(const wire::Message& msg);  // dispatch by type

  // Advance the virtual clock; drains the battery in proportion.
  void tick_us(std::uint64_t dt_us);

  // Render a frame at the current state and clock; bumps the frame seq.
  sensor::Frame capture_frame();
  std::uint32_t last_frame_seq() const { return frame_seq_; }

  // Contact snapshot at the current pose (fresh evaluation).
  physics::ContactResult contact() const;
  double holding_force_newton() const;

 private:
  void refresh_attachment(bool allow_attach);

  sensor::Renderer renderer_;
  physics::SuctionConfig suction_;
  wire::StatePayload state_;
  double rate_hz_ = 30.0;
  int downscale_ = 1;
  sensor::CameraIntrinsics base_intr_;
  std::uint64_t now_us_ = 0;
  std::uint32_t frame_seq_ = 0;
};

}  // namespace flexicup::device

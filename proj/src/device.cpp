#include "flexicup/device.hpp"

#include <algorithm>
#include <cmath>

#include "flexicup/error.hpp"

namespace flexicup::device {

namespace {
// Linear battery drain: one hour of 30 Hz streaming from full.
constexpr double kBatterySecondsAt30Hz = 3600.0;
constexpr double kMaxZCm = 15.0;
constexpr double kMaxTiltDeg = 20.0;
}  // namespace

EmulatorCore::EmulatorCore(scene::Scene scene, scene::ConfigId config_id,
                           const physics::ConfigRegistry& registry)
    : renderer_(std::move(scene), sensor::CameraIntrinsics{},
                physics::make_config(registry.get(config_id))),
      suction_(physics::make_config(registry.get(config_id))) {
  base_intr_ = sensor::CameraIntrinsics{};
  state_.mode = suction_.cup.mode;
  state_.config_id = config_id;
  const auto& s = renderer_.scene();
  state_.x_cm = s.width_cm / 2.0;
  state_.y_cm = s.height_cm / 2.0;
  state_.z_cm = 5.0;
}

CommandResult EmulatorCore::set_led(bool on) {
  state_.led_on = on;
  return {};
}

CommandResult EmulatorCore::set_valve(bool open) {
  state_.valve_open = open;
  refresh_attachment(open);
  return {};
}

CommandResult EmulatorCore::set_cam(const wire::CamPayload& cam) {
  if (!(cam.exposure_gain > 0.0 && cam.exposure_gain <= 16.0))
    return {false, wire::ErrCode::Malformed, "exposure_gain out of range"};
  if (!(cam.rate_hz >= 1.0 && cam.rate_hz <= 240.0))
    return {false, wire::ErrCode::Malformed, "rate_hz out of range"};
  if (cam.downscale != 1 && cam.downscale != 2 && cam.downscale != 4)
    return {false, wire::ErrCode::Malformed, "downscale must be 1, 2 or 4"};
  rate_hz_ = cam.rate_hz;
  if (cam.downscale != downscale_) {
    downscale_ = cam.downscale;
    renderer_.set_intrinsics(base_intr_.downscaled(downscale_));
  }
  renderer_.set_exposure_gain(cam.exposure_gain);
  return {};
}

CommandResult EmulatorCore::move_to(const wire::MovePayload& move) {
  const auto& s = renderer_.scene();
  if (!std::isfinite(move.x_cm) || !std::isfinite(move.y_cm) ||
      !std::isfinite(move.z_cm) || !std::isfinite(move.tilt_deg))
    return {false, wire::ErrCode::Malformed, "non-finite pose"};
  if (!s.in_bounds(move.x_cm, move.y_cm))
    return {false, wire::ErrCode::OutOfBounds, "pose outside workspace"};
  state_.x_cm = move.x_cm;
  state_.y_cm = move.y_cm;
  // Height and tilt are actuator-limited rather than rejected.
  state_.z_cm = std::clamp(move.z_cm, 0.0, kMaxZCm);
  state_.tilt_deg = std::clamp(move.tilt_deg, -kMaxTiltDeg, kMaxTiltDeg);
  if (state_.valve_open && !state_.attached) refresh_attachment(true);
  return {};
}

CommandResult EmulatorCore::apply(const wire::Message& msg) {
  try {
    switch (msg.type) {
      case wire::MsgType::CmdLed:
        return set_led(wire::decode_bool_payload(msg.payload));
      case wire::MsgType::CmdValve:
        return set_valve(wire::decode_bool_payload(msg.payload));
      case wire::MsgType::CmdCam:
        return set_cam(wire::decode_cam_payload(msg.payload));
      case wire::MsgType::CmdMove:
        return move_to(wire::decode_move_payload(msg.payload));
      default:
        return {false, wire::ErrCode::Unsupported, "not a command"};
    }
  } catch (const ProtocolError& e) {
    return {false, wire::ErrCode::Malformed, e.what()};
  }
}

void EmulatorCore::refresh_attachment(bool allow_attach) {
  if (!state_.valve_open) {
    state_.attached = false;
    state_.pressure_kpa = suction_.p_atm_kpa;
    return;
  }
  if (state_.attached) return;  // holds until the valve closes
  if (!allow_attach) return;
  const auto snap = contact();
  const auto decision = physics::attach_decision(
      snap, suction_, true, renderer_.scene().object_mass_kg);
  state_.attached = decision.attached;
  state_.pressure_kpa = suction_.p_atm_kpa - suction_.vacuum_dp_kpa * snap.seal_quality;
}

void EmulatorCore::tick_us(std::uint64_t dt_us) {
  now_us_ += dt_us;
  const double dt_s = static_cast<double>(dt_us) * 1e-6;
  const double drain = dt_s / kBatterySecondsAt30Hz * (rate_hz_ / 30.0);
  state_.battery_fraction = std::max(0.0, state_.battery_fraction - drain);
}

sensor::Frame EmulatorCore::capture_frame() {
  ++frame_seq_;
  const scene::Pose pose{state_.x_cm, state_.y_cm, state_.z_cm, state_.tilt_deg};
  return renderer_.render(pose, state_.led_on, frame_seq_, now_us_);
}

physics::ContactResult EmulatorCore::contact() const {
  const scene::Pose pose{state_.x_cm, state_.y_cm, state_.z_cm, state_.tilt_deg};
  return physics::contact_state(renderer_.scene(), pose, suction_);
}

double EmulatorCore::holding_force_newton() const {
  return physics::holding_force(contact(), suction_, state_.valve_open);
}

}  // namespace flexicup::device

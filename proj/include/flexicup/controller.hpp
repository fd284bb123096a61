#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "flexicup/perception.hpp"
#include "flexicup/scene.hpp"
#include "flexicup/sensor.hpp"
#include "flexicup/wire.hpp"

namespace flexicup::controller {

enum class Phase {
  Approach,
  Descend,
  TactileVerify,
  Ascend,
  StepSearch,
  BoundaryAdjust,
  Attach,
  Lift,
  Transport,
  Place,
  Done,
  Fail,
};

enum class FailureReason { None, SearchExhausted, AttachFailed, DropDuringTransport, Timeout };

const char* to_string(Phase phase);
const char* to_string(FailureReason reason);
Phase phase_from_string(const std::string& s);
FailureReason failure_reason_from_string(const std::string& s);

// LED state each phase requires; frames seen inside the phase carry the
// matching modality.
bool phase_led_on(Phase phase);

struct Params {
  double step_cm = 1.0;          // search lattice pitch
  double z_search_cm = 0.5;      // hover clearance above the local surface
  double z_transport_cm = 5.0;   // carry clearance above the pickup surface
  double coverage_min = 0.8;     // tactile verification gate
  double flatness_min = 0.7;
  double place_x_cm = 4.0;
  double place_y_cm = 4.0;
  int budget = -1;               // search moves allowed; -1 = lattice size
  int max_approach_hops = 6;
  double offset_done = 0.05;     // annulus offset treated as "overhead"
  // The controller only commits to positions with step_cm of clearance
  // beyond the rim. The renderer is noise-free, so by default a single
  // obstacle-dark pixel inside the rim+step image disk vetoes the descend.
  double prescreen_dark_max = 0.0;
  double cam_rate_hz = 240.0;    // episode camera setup
  int cam_downscale = 2;
  int wall_timeout_ms = 120000;
};

struct Command {
  enum class Type { None, Led, Valve, Move };
  Type type = Type::None;
  bool on = false;       // Led / Valve
  scene::Pose target;    // Move
};

// Slim device view the FSM consumes; run_episode fills it from tracked
// command effects plus fresh telemetry where attachment matters.
struct DeviceView {
  double x_cm = 0.0;
  double y_cm = 0.0;
  double z_cm = 0.0;
  double tilt_deg = 0.0;
  bool led_on = false;
  bool valve_open = false;
  bool attached = false;
  double pressure_kpa = 101.325;  // latest telemetry, carried into records

  std::array<double, 8> vector() const {
    return {x_cm,           y_cm,
            z_cm,           tilt_deg,
            led_on ? 1.0 : 0.0, valve_open ? 1.0 : 0.0,
            pressure_kpa,   attached ? 1.0 : 0.0};
  }
};

struct ControllerState {
  Phase phase = Phase::Approach;
  FailureReason failure = FailureReason::None;

  scene::Scene scene;
  scene::CupFootprint cup;
  Params params;

  // Search lattice: row-major grid of candidate positions, serpentine order
  // rotated so the episode's start cell comes first.
  std::vector<std::pair<double, double>> lattice;  // order of visit
  int lattice_nx = 0;
  int lattice_ny = 0;
  double lattice_x0 = 0.0;
  double lattice_y0 = 0.0;
  std::size_t cursor = 0;            // next serpentine candidate to try
  std::set<int> visited;             // lattice indices already ruled out
  int steps_taken = 0;               // search moves issued (StepSearch + BoundaryAdjust)
  int budget = 0;

  int approach_hops = 0;
  bool at_search_height = false;     // Approach reached z_search
  bool retreating = false;           // Attach failed, valve already closed
  int attach_attempts = 0;
  int attach_failures = 0;

  // Lattice index of the position the device currently occupies (-1 while
  // off-lattice during approach).
  int current_index = -1;
};

// Seeds the FSM at the device's initial position; the lattice spans every
// position where the rim disk fits inside the workspace.
ControllerState make_controller(const scene::Scene& scene, const scene::CupFootprint& cup,
                                const Params& params, double start_x_cm, double start_y_cm);

struct StepResult {
  Command command;
  ControllerState next;
};

// Pure transition: one frame + device view in, one command out. Throws
// ModalityError when the frame does not match the LED state it was taken
// under (a sequencing bug, not a recoverable condition).
StepResult controller_step(const ControllerState& cstate, const sensor::Frame& frame,
                           const DeviceView& dstate);

// One trajectory sample: device state before the command, the phase the
// command belongs to, and the action as [dx, dy, dz, dtilt, i_t, u_t].
struct TrajectoryRecord {
  std::uint64_t timestamp_us = 0;
  std::array<double, 8> state{};
  Phase phase = Phase::Approach;
  std::array<double, 6> action{};
};

struct EpisodeResult {
  bool success = false;
  int steps_taken = 0;
  FailureReason failure_reason = FailureReason::None;
  std::vector<TrajectoryRecord> trajectory;
  int controller_steps = 0;
  std::string note;
};

// Drives controller_step against a live emulator session until Done/Fail.
// Wall-clock timeout or connection loss turns into Fail(Timeout) with a note.
EpisodeResult run_episode(const std::string& endpoint, const scene::Scene& scene,
                          const scene::CupFootprint& cup, const Params& params = {});

// JSON-lines trajectory: one {"timestamp_us", "state", "phase", "action"}
// object per line.
std::string trajectory_to_jsonl(const std::vector<TrajectoryRecord>& trajectory);
std::vector<TrajectoryRecord> trajectory_from_jsonl(const std::string& text);
void save_trajectory(const std::vector<TrajectoryRecord>& trajectory, const std::string& path);
std::vector<TrajectoryRecord> load_trajectory(const std::string& path);

}  // namespace flexicup::controller

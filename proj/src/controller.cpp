#include "flexicup/controller.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "flexicup/client.hpp"
#include "flexicup/error.hpp"

namespace flexicup::controller {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kObstacleDarkLevel = 80.0;  // obstacle 40 vs marker 120, clear 200
constexpr double kMaxTiltDeg = 20.0;
constexpr double kMaxHopCm = 25.0;

double surface_cm(const scene::Scene& s, double x, double y) {
  return scene::surface_height_mm(s, x, y) / 10.0;
}

double hover_z(const ControllerState& c, double x, double y) {
  return surface_cm(c.scene, x, y) + c.params.z_search_cm;
}

double contact_z(const ControllerState& c, double x, double y) {
  return surface_cm(c.scene, x, y);
}

double descend_tilt(const ControllerState& c) {
  return std::clamp(c.scene.incline_deg, -kMaxTiltDeg, kMaxTiltDeg);
}

Command move_cmd(double x, double y, double z, double tilt) {
  Command cmd;
  cmd.type = Command::Type::Move;
  cmd.target = {x, y, z, tilt};
  return cmd;
}

Command led_cmd(bool on) {
  Command cmd;
  cmd.type = Command::Type::Led;
  cmd.on = on;
  return cmd;
}

Command valve_cmd(bool open) {
  Command cmd;
  cmd.type = Command::Type::Valve;
  cmd.on = open;
  return cmd;
}

int lattice_index_near(const ControllerState& c, double x, double y) {
  if (c.lattice_nx == 0 || c.lattice_ny == 0) return -1;
  const double step = c.params.step_cm;
  const int i = static_cast<int>(std::lround((x - c.lattice_x0) / step));
  const int j = static_cast<int>(std::lround((y - c.lattice_y0) / step));
  if (i < 0 || i >= c.lattice_nx || j < 0 || j >= c.lattice_ny) return -1;
  return j * c.lattice_nx + i;
}

std::pair<double, double> lattice_pos(const ControllerState& c, int index) {
  const int i = index % c.lattice_nx;
  const int j = index / c.lattice_nx;
  return {c.lattice_x0 + i * c.params.step_cm, c.lattice_y0 + j * c.params.step_cm};
}

void mark_visited(ControllerState& c, double x, double y) {
  const int idx = lattice_index_near(c, x, y);
  if (idx >= 0) c.visited.insert(idx);
}

// Fraction of obstacle-dark pixels inside the image disk covering the rim
// plus one step of clearance.
double footprint_dark_fraction(const ControllerState& c, const sensor::Frame& frame,
                               double cam_height_cm) {
  const auto& z = frame.zones;
  const double f = z.peripheral_outer_px / (kPi / 2.0);
  const double clear_radius_cm = c.cup.rim_outer_cm + c.params.step_cm;
  const double theta = std::atan(clear_radius_cm / std::max(cam_height_cm, 0.5));
  // Shrink by half a pixel so an obstacle starting exactly at the clearance
  // radius cannot bleed a boundary pixel into the disk.
  const double r_px = std::max(f * theta - 0.5, 1.0);
  const double r2 = r_px * r_px;
  long dark = 0;
  long total = 0;
  for (int py = 0; py < frame.height_px; ++py) {
    for (int px = 0; px < frame.width_px; ++px) {
      const double dx = px + 0.5 - z.center_x_px;
      const double dy = py + 0.5 - z.center_y_px;
      if (dx * dx + dy * dy > r2) continue;
      ++total;
      if (frame.at(px, py) < kObstacleDarkLevel) ++dark;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(dark) / static_cast<double>(total);
}

// Dead-reckoned ground distance of the detected marker from the fisheye
// radius it appeared at: r = f·theta, d = h·tan(theta).
double marker_distance_cm(const sensor::Frame& frame, double offset_norm, double cam_height_cm) {
  const auto& z = frame.zones;
  const double f = z.peripheral_outer_px / (kPi / 2.0);
  const double span = z.peripheral_outer_px - z.central_radius_px;
  const double r_px = z.central_radius_px + offset_norm * span;
  const double theta = std::min(r_px / f, 1.4);
  return std::min(cam_height_cm * std::tan(theta), kMaxHopCm);
}

bool verify_ok(const perception::ContactSegmentation& seg, const Params& p) {
  return seg.coverage >= p.coverage_min && seg.flatness >= p.flatness_min;
}

// Next unvisited search position: edge-hint neighbor first, else the
// serpentine order. Updates cursor; returns lattice index or -1.
int choose_next(ControllerState& c, const std::optional<perception::StepHint>& hint,
                int current_idx) {
  if (hint && hint->from_edges && current_idx >= 0) {
    const int i = current_idx % c.lattice_nx;
    const int j = current_idx / c.lattice_nx;
    int ni = i;
    int nj = j;
    if (std::abs(hint->dx) >= std::abs(hint->dy)) {
      ni += hint->dx >= 0.0 ? 1 : -1;
    } else {
      nj += hint->dy >= 0.0 ? 1 : -1;
    }
    if (ni >= 0 && ni < c.lattice_nx && nj >= 0 && nj < c.lattice_ny) {
      const int idx = nj * c.lattice_nx + ni;
      if (!c.visited.count(idx)) return idx;
    }
  }
  while (c.cursor < c.lattice.size()) {
    const int idx = lattice_index_near(c, c.lattice[c.cursor].first, c.lattice[c.cursor].second);
    ++c.cursor;
    if (idx >= 0 && !c.visited.count(idx)) return idx;
  }
  return -1;
}

StepResult fail_result(ControllerState next, FailureReason reason) {
  next.phase = Phase::Fail;
  next.failure = reason;
  return {Command{}, std::move(next)};
}

}  // namespace

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Approach: return "Approach";
    case Phase::Descend: return "Descend";
    case Phase::TactileVerify: return "TactileVerify";
    case Phase::Ascend: return "Ascend";
    case Phase::StepSearch: return "StepSearch";
    case Phase::BoundaryAdjust: return "BoundaryAdjust";
    case Phase::Attach: return "Attach";
    case Phase::Lift: return "Lift";
    case Phase::Transport: return "Transport";
    case Phase::Place: return "Place";
    case Phase::Done: return "Done";
    case Phase::Fail: return "Fail";
  }
  return "?";
}

const char* to_string(FailureReason reason) {
  switch (reason) {
    case FailureReason::None: return "None";
    case FailureReason::SearchExhausted: return "SearchExhausted";
    case FailureReason::AttachFailed: return "AttachFailed";
    case FailureReason::DropDuringTransport: return "DropDuringTransport";
    case FailureReason::Timeout: return "Timeout";
  }
  return "?";
}

Phase phase_from_string(const std::string& s) {
  for (const Phase p : {Phase::Approach, Phase::Descend, Phase::TactileVerify, Phase::Ascend,
                        Phase::StepSearch, Phase::BoundaryAdjust, Phase::Attach, Phase::Lift,
                        Phase::Transport, Phase::Place, Phase::Done, Phase::Fail}) {
    if (s == to_string(p)) return p;
  }
  throw ParamError("unknown phase: " + s);
}

FailureReason failure_reason_from_string(const std::string& s) {
  for (const FailureReason r :
       {FailureReason::None, FailureReason::SearchExhausted, FailureReason::AttachFailed,
        FailureReason::DropDuringTransport, FailureReason::Timeout}) {
    if (s == to_string(r)) return r;
  }
  throw ParamError("unknown failure reason: " + s);
}

bool phase_led_on(Phase phase) {
  switch (phase) {
    case Phase::Descend:
    case Phase::TactileVerify:
    case Phase::Attach:
      return true;
    default:
      return false;
  }
}

ControllerState make_controller(const scene::Scene& scene, const scene::CupFootprint& cup,
                                const Params& params, double start_x_cm, double start_y_cm) {
  if (params.step_cm <= 0.0) throw ParamError("step_cm must be positive");
  scene.validate();

  ControllerState c;
  c.scene = scene;
  c.cup = cup;
  c.params = params;

  // Candidate lattice: cell-center aligned, rim disk fully inside the board.
  const double cell = scene.cell_cm;
  const double rim = cup.rim_outer_cm;
  const double step = params.step_cm;
  const double lo_x = cell * (std::floor(rim / cell) + 0.5) >= rim
                          ? cell * (std::floor(rim / cell) + 0.5)
                          : cell * (std::floor(rim / cell) + 1.5);
  const double lo_y = lo_x;
  const auto count_along = [&](double lo, double extent) {
    int n = 0;
    while (lo + n * step <= extent - lo + 1e-9) ++n;
    return n;
  };
  c.lattice_x0 = lo_x;
  c.lattice_y0 = lo_y;
  c.lattice_nx = count_along(lo_x, scene.width_cm);
  c.lattice_ny = count_along(lo_y, scene.height_cm);
  if (c.lattice_nx <= 0 || c.lattice_ny <= 0) {
    c.budget = 0;  // cup larger than the board: nothing to search
    return c;
  }

  // Serpentine base order, rotated so the start cell leads.
  std::vector<std::pair<double, double>> order;
  order.reserve(static_cast<std::size_t>(c.lattice_nx) * c.lattice_ny);
  for (int j = 0; j < c.lattice_ny; ++j) {
    for (int k = 0; k < c.lattice_nx; ++k) {
      const int i = (j % 2 == 0) ? k : c.lattice_nx - 1 - k;
      order.emplace_back(c.lattice_x0 + i * step, c.lattice_y0 + j * step);
    }
  }
  const int si = std::clamp(static_cast<int>(std::lround((start_x_cm - c.lattice_x0) / step)), 0,
                            c.lattice_nx - 1);
  const int sj = std::clamp(static_cast<int>(std::lround((start_y_cm - c.lattice_y0) / step)), 0,
                            c.lattice_ny - 1);
  std::size_t k0 = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const int idx = lattice_index_near(c, order[k].first, order[k].second);
    if (idx == sj * c.lattice_nx + si) {
      k0 = k;
      break;
    }
  }
  c.lattice.reserve(order.size());
  c.lattice.insert(c.lattice.end(), order.begin() + static_cast<std::ptrdiff_t>(k0), order.end());
  c.lattice.insert(c.lattice.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k0));

  c.budget = params.budget >= 0 ? params.budget : static_cast<int>(c.lattice.size());
  c.current_index = lattice_index_near(c, start_x_cm, start_y_cm);
  return c;
}

StepResult controller_step(const ControllerState& cstate, const sensor::Frame& frame,
                           const DeviceView& dstate) {
  const auto expected =
      dstate.led_on ? sensor::Modality::Tactile : sensor::Modality::Vision;
  if (frame.modality != expected) {
    throw ModalityError(std::string("frame modality does not match LED state in phase ") +
                        to_string(cstate.phase));
  }

  ControllerState n = cstate;
  const Params& p = cstate.params;

  switch (cstate.phase) {
    case Phase::Approach: {
      if (!cstate.at_search_height) {
        n.at_search_height = true;
        return {move_cmd(dstate.x_cm, dstate.y_cm, hover_z(n, dstate.x_cm, dstate.y_cm), 0.0), n};
      }
      const auto det = perception::detect_target(frame);
      if (det.found && cstate.approach_hops < p.max_approach_hops) {
        const double h = dstate.z_cm + sensor::RenderParams{}.cam_height_above_rim_cm -
                         surface_cm(n.scene, dstate.x_cm, dstate.y_cm);
        const double d = marker_distance_cm(frame, det.offset_norm, h);
        const double rim = n.cup.rim_outer_cm;
        const double tx = std::clamp(dstate.x_cm + d * std::cos(det.bearing_rad), rim,
                                     n.scene.width_cm - rim);
        const double ty = std::clamp(dstate.y_cm + d * std::sin(det.bearing_rad), rim,
                                     n.scene.height_cm - rim);
        ++n.approach_hops;
        return {move_cmd(tx, ty, hover_z(n, tx, ty), 0.0), n};
      }
      // Marker below (or nothing in view): descend here if the spot has
      // clearance, otherwise go straight to searching.
      const double h = dstate.z_cm + sensor::RenderParams{}.cam_height_above_rim_cm -
                       surface_cm(n.scene, dstate.x_cm, dstate.y_cm);
      if (footprint_dark_fraction(n, frame, h) <= p.prescreen_dark_max) {
        n.phase = Phase::Descend;
        n.current_index = lattice_index_near(n, dstate.x_cm, dstate.y_cm);
        return {led_cmd(true), n};
      }
      mark_visited(n, dstate.x_cm, dstate.y_cm);
      n.phase = Phase::StepSearch;
      return controller_step(n, frame, dstate);
    }

    case Phase::Descend: {
      n.phase = Phase::TactileVerify;
      return {move_cmd(dstate.x_cm, dstate.y_cm, contact_z(n, dstate.x_cm, dstate.y_cm),
                       descend_tilt(n)),
              n};
    }

    case Phase::TactileVerify: {
      const auto seg = perception::segment_contact(frame);
      if (verify_ok(seg, p)) {
        n.phase = Phase::Attach;
        ++n.attach_attempts;
        return {valve_cmd(true), n};
      }
      mark_visited(n, dstate.x_cm, dstate.y_cm);
      n.phase = Phase::Ascend;
      return {led_cmd(false), n};
    }

    case Phase::Attach: {
      if (cstate.retreating) {
        n.retreating = false;
        mark_visited(n, dstate.x_cm, dstate.y_cm);
        ++n.attach_failures;
        n.phase = Phase::Ascend;
        return {led_cmd(false), n};
      }
      const auto seg = perception::segment_contact(frame);
      if (dstate.attached && verify_ok(seg, p)) {
        n.phase = Phase::Lift;
        return {led_cmd(false), n};
      }
      n.retreating = true;
      return {valve_cmd(false), n};
    }

    case Phase::Ascend: {
      const double target = hover_z(n, dstate.x_cm, dstate.y_cm);
      if (dstate.z_cm < target - 0.05) {
        return {move_cmd(dstate.x_cm, dstate.y_cm, target, 0.0), n};
      }
      n.phase = Phase::StepSearch;
      return controller_step(n, frame, dstate);
    }

    case Phase::StepSearch:
    case Phase::BoundaryAdjust: {
      const int here = lattice_index_near(n, dstate.x_cm, dstate.y_cm);
      if (here >= 0 && !n.visited.count(here)) {
        const double h = dstate.z_cm + sensor::RenderParams{}.cam_height_above_rim_cm -
                         surface_cm(n.scene, dstate.x_cm, dstate.y_cm);
        if (footprint_dark_fraction(n, frame, h) <= p.prescreen_dark_max) {
          n.phase = Phase::Descend;
          n.current_index = here;
          return {led_cmd(true), n};
        }
        n.visited.insert(here);
      }
      if (n.budget <= 0) return fail_result(std::move(n), FailureReason::SearchExhausted);
      std::optional<perception::StepHint> hint;
      const auto h = perception::edge_step_hint(frame);
      if (h.from_edges) hint = h;
      const int next_idx = choose_next(n, hint, here);
      if (next_idx < 0) return fail_result(std::move(n), FailureReason::SearchExhausted);
      const auto [tx, ty] = lattice_pos(n, next_idx);
      const double dist = std::hypot(tx - dstate.x_cm, ty - dstate.y_cm);
      n.phase = dist <= 1.5 * p.step_cm ? Phase::StepSearch : Phase::BoundaryAdjust;
      --n.budget;
      ++n.steps_taken;
      n.current_index = next_idx;
      return {move_cmd(tx, ty, hover_z(n, tx, ty), 0.0), n};
    }

    case Phase::Lift: {
      n.phase = Phase::Transport;
      const double z = surface_cm(n.scene, dstate.x_cm, dstate.y_cm) + p.z_transport_cm;
      return {move_cmd(dstate.x_cm, dstate.y_cm, std::min(z, 15.0), 0.0), n};
    }

    case Phase::Transport: {
      if (!dstate.attached) return fail_result(std::move(n), FailureReason::DropDuringTransport);
      n.phase = Phase::Place;
      return {move_cmd(p.place_x_cm, p.place_y_cm, dstate.z_cm, 0.0), n};
    }

    case Phase::Place: {
      if (!dstate.attached) return fail_result(std::move(n), FailureReason::DropDuringTransport);
      n.phase = Phase::Done;
      return {valve_cmd(false), n};
    }

    case Phase::Done:
    case Phase::Fail:
      return {Command{}, n};
  }
  return {Command{}, n};
}

EpisodeResult run_episode(const std::string& endpoint, const scene::Scene& scene,
                          const scene::CupFootprint& cup, const Params& params) {
  using clock = std::chrono::steady_clock;
  EpisodeResult result;
  ControllerState cstate;
  bool started = false;
  const auto t0 = clock::now();
  const auto elapsed_ms = [&] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() - t0).count();
  };

  device::DeviceClient client;
  try {
    client.connect(endpoint);
    wire::CamPayload cam;
    cam.exposure_gain = 1.0;
    cam.rate_hz = params.cam_rate_hz;
    cam.downscale = static_cast<std::uint8_t>(params.cam_downscale);
    if (const auto st = client.set_cam(cam); !st.ok) {
      throw SessionError("camera setup rejected: " + st.detail);
    }
    const auto s0 = client.state(2000);
    DeviceView view;
    view.x_cm = s0.x_cm;
    view.y_cm = s0.y_cm;
    view.z_cm = s0.z_cm;
    view.tilt_deg = s0.tilt_deg;
    view.led_on = s0.led_on;
    view.valve_open = s0.valve_open;
    view.attached = s0.attached;
    view.pressure_kpa = s0.pressure_kpa;

    cstate = make_controller(scene, cup, params, s0.x_cm, s0.y_cm);
    started = true;
    // Loose runaway guard; the tight per-board bound is a tested property.
    const int step_cap = 2 * static_cast<int>(cstate.lattice.size()) + 100;

    while (cstate.phase != Phase::Done && cstate.phase != Phase::Fail) {
      if (elapsed_ms() > params.wall_timeout_ms) {
        cstate.phase = Phase::Fail;
        cstate.failure = FailureReason::Timeout;
        result.note = "wall-clock timeout";
        break;
      }
      if (result.controller_steps >= step_cap) {
        cstate.phase = Phase::Fail;
        cstate.failure = FailureReason::SearchExhausted;
        result.note = "controller step cap reached";
        break;
      }

      const auto frame = client.next_frame_after(client.latest_seen_seq(), 2000);
      const bool needs_attach_state = cstate.phase == Phase::Attach ||
                                      cstate.phase == Phase::Lift ||
                                      cstate.phase == Phase::Transport ||
                                      cstate.phase == Phase::Place;
      if (needs_attach_state) {
        const auto s = client.state(2000);
        view.x_cm = s.x_cm;
        view.y_cm = s.y_cm;
        view.z_cm = s.z_cm;
        view.tilt_deg = s.tilt_deg;
        view.led_on = s.led_on;
        view.valve_open = s.valve_open;
        view.attached = s.attached;
        view.pressure_kpa = s.pressure_kpa;
      } else if (const auto& s = client.cached_state(); s) {
        view.pressure_kpa = s->pressure_kpa;
      }

      auto [cmd, next] = controller_step(cstate, frame, view);

      TrajectoryRecord rec;
      rec.timestamp_us = frame.timestamp_us;
      rec.state = view.vector();
      rec.phase = next.phase;
      rec.action = {0.0, 0.0, 0.0, 0.0, view.led_on ? 1.0 : 0.0, view.valve_open ? 1.0 : 0.0};

      device::CommandStatus st;
      switch (cmd.type) {
        case Command::Type::None:
          st.ok = true;
          break;
        case Command::Type::Led:
          st = client.set_led(cmd.on);
          view.led_on = cmd.on;
          rec.action[4] = cmd.on ? 1.0 : 0.0;
          break;
        case Command::Type::Valve:
          st = client.set_valve(cmd.on);
          view.valve_open = cmd.on;
          rec.action[5] = cmd.on ? 1.0 : 0.0;
          break;
        case Command::Type::Move:
          st = client.move_to(cmd.target.x_cm, cmd.target.y_cm, cmd.target.z_cm,
                              cmd.target.tilt_deg);
          rec.action[0] = cmd.target.x_cm - view.x_cm;
          rec.action[1] = cmd.target.y_cm - view.y_cm;
          rec.action[2] = cmd.target.z_cm - view.z_cm;
          rec.action[3] = cmd.target.tilt_deg - view.tilt_deg;
          view.x_cm = cmd.target.x_cm;
          view.y_cm = cmd.target.y_cm;
          view.z_cm = cmd.target.z_cm;
          view.tilt_deg = cmd.target.tilt_deg;
          break;
      }
      if (!st.ok) {
        throw SessionError(std::string("device rejected command in phase ") +
                           to_string(next.phase) + ": " + st.detail);
      }

      result.trajectory.push_back(std::move(rec));
      cstate = std::move(next);
      ++result.controller_steps;
    }
  } catch (const Error& e) {
    if (!started) cstate = ControllerState{};
    cstate.phase = Phase::Fail;
    cstate.failure = FailureReason::Timeout;
    result.note = e.what();
  }

  result.success = cstate.phase == Phase::Done;
  result.steps_taken = cstate.steps_taken;
  result.failure_reason = result.success ? FailureReason::None : cstate.failure;
  if (!result.success && result.failure_reason == FailureReason::None) {
    result.failure_reason = FailureReason::Timeout;
  }
  return result;
}

std::string trajectory_to_jsonl(const std::vector<TrajectoryRecord>& trajectory) {
  std::ostringstream out;
  for (const auto& rec : trajectory) {
    nlohmann::json j;
    j["timestamp_us"] = rec.timestamp_us;
    j["state"] = rec.state;
    j["phase"] = to_string(rec.phase);
    j["action"] = rec.action;
    out << j.dump() << '\n';
  }
  return out.str();
}

std::vector<TrajectoryRecord> trajectory_from_jsonl(const std::string& text) {
  std::vector<TrajectoryRecord> records;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrajectoryRecord rec;
      rec.timestamp_us = j.at("timestamp_us").get<std::uint64_t>();
      const auto state = j.at("state").get<std::vector<double>>();
      const auto action = j.at("action").get<std::vector<double>>();
      if (state.size() != rec.state.size() || action.size() != rec.action.size()) {
        throw ParamError("trajectory record has wrong vector lengths");
      }
      std::copy(state.begin(), state.end(), rec.state.begin());
      std::copy(action.begin(), action.end(), rec.action.begin());
      rec.phase = phase_from_string(j.at("phase").get<std::string>());
      records.push_back(rec);
    } catch (const nlohmann::json::exception& e) {
      throw ParamError(std::string("bad trajectory line: ") + e.what());
    }
  }
  return records;
}

void save_trajectory(const std::vector<TrajectoryRecord>& trajectory, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << trajectory_to_jsonl(trajectory);
  if (!out) throw IoError("failed writing " + path);
}

std::vector<TrajectoryRecord> load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return trajectory_from_jsonl(buf.str());
}

}  // namespace flexicup::controller

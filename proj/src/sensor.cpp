#include "flexicup/sensor.hpp"

#include <algorithm>
#include <cmath>

#include "flexicup/error.hpp"

namespace flexicup::sensor {

namespace {
constexpr double kDeg2Rad = M_PI / 180.0;

inline std::uint8_t quantize(double value, double gain) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(value * gain), 0L, 255L));
}

// Bilinear sample of a grid_n x grid_n field over [-r, r]^2; clamped at the
// border, zero-extended outside the membrane square.
inline double sample_grid(const std::vector<double>& grid, int n, double r,
                          double u_cm, double v_cm) {
  const double step = 2.0 * r / n;
  const double gx = (u_cm + r) / step - 0.5;
  const double gy = (v_cm + r) / step - 0.5;
  const int x0 = static_cast<int>(std::floor(gx));
  const int y0 = static_cast<int>(std::floor(gy));
  const double fx = gx - x0;
  const double fy = gy - y0;
  auto at = [&](int x, int y) -> double {
    if (x < 0 || x >= n || y < 0 || y >= n) return 0.0;
    return grid[static_cast<std::size_t>(y) * n + x];
  };
  return at(x0, y0) * (1 - fx) * (1 - fy) + at(x0 + 1, y0) * fx * (1 - fy) +
         at(x0, y0 + 1) * (1 - fx) * fy + at(x0 + 1, y0 + 1) * fx * fy;
}

struct Light {
  double x, y, z;
};

std::vector<Light> side_lights(const RenderParams& p) {
  const double ce = std::cos(p.light_elevation_deg * kDeg2Rad);
  const double se = std::sin(p.light_elevation_deg * kDeg2Rad);
  // Grazing illumination: a flat membrane catches nothing, tilted flanks
  // facing a light catch it in proportion to their slope.
  const Light all[4] = {Light{ce, 0.0, -se}, Light{0.0, ce, -se},
                        Light{-ce, 0.0, -se}, Light{0.0, -ce, -se}};
  std::vector<Light> active;
  for (int i = 0; i < 4; ++i)
    if (p.light_mask & (1u << i)) active.push_back(all[i]);
  return active;
}

double shade_point(const std::vector<double>& deformation, int grid_n,
                   double membrane_r, double u, double v, double delta_cm,
                   const std::vector<Light>& lights,
                   const RenderParams& p) {
  if (grid_n <= 0) return p.tactile_ambient;  // no contact data: flat membrane
  const double d = sample_grid(deformation, grid_n, membrane_r, u, v);
  double value = p.tactile_ambient;
  value += p.contact_weight * std::min(d / p.contact_sat_mm, 1.0);
  // Normal from central differences; heights in mm, offsets in mm.
  const double ddx = sample_grid(deformation, grid_n, membrane_r, u + delta_cm, v) -
                     sample_grid(deformation, grid_n, membrane_r, u - delta_cm, v);
  const double ddy = sample_grid(deformation, grid_n, membrane_r, u, v + delta_cm) -
                     sample_grid(deformation, grid_n, membrane_r, u, v - delta_cm);
  const double sx = ddx / (2.0 * delta_cm * 10.0);
  const double sy = ddy / (2.0 * delta_cm * 10.0);
  const double inv_len = 1.0 / std::sqrt(sx * sx + sy * sy + 1.0);
  const double nx = -sx * inv_len;
  const double ny = -sy * inv_len;
  const double nz = inv_len;
  for (const auto& l : lights) {
    const double ndotl = nx * l.x + ny * l.y + nz * l.z;
    if (ndotl > 0.0) value += p.light_weight * ndotl;
  }
  return value;
}

}  // namespace

double CameraIntrinsics::f_px_per_rad() const {
  return zones.peripheral_outer_px / (fov_deg / 2.0 * kDeg2Rad);
}

CameraIntrinsics CameraIntrinsics::downscaled(int factor) const {
  if (factor != 1 && factor != 2 && factor != 4)
    throw ParamError("downscale factor must be 1, 2 or 4");
  CameraIntrinsics out = *this;
  out.width_px = width_px / factor;
  out.height_px = height_px / factor;
  out.zones.center_x_px = zones.center_x_px / factor;
  out.zones.center_y_px = zones.center_y_px / factor;
  out.zones.central_radius_px = zones.central_radius_px / factor;
  out.zones.peripheral_outer_px = zones.peripheral_outer_px / factor;
  return out;
}

std::pair<double, double> fisheye_project(double theta_rad, double phi_rad,
                                          const CameraIntrinsics& intr) {
  if (!(theta_rad >= 0.0 && theta_rad <= M_PI / 2.0 + 1e-12))
    throw ParamError("fisheye_project: theta outside [0, pi/2]");
  const double radius = intr.f_px_per_rad() * theta_rad;
  return {intr.zones.center_x_px + radius * std::cos(phi_rad),
          intr.zones.center_y_px + radius * std::sin(phi_rad)};
}

std::vector<std::uint8_t> synth_tactile_shading(
    const std::vector<double>& deformation_mm, int grid_n,
    double membrane_radius_cm, int out_size_px, const RenderParams& params) {
  if (grid_n <= 0 ||
      deformation_mm.size() != static_cast<std::size_t>(grid_n) * grid_n)
    throw ParamError("synth_tactile_shading: deformation grid shape mismatch");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(out_size_px) * out_size_px, 0);
  const auto lights = side_lights(params);
  const double half = out_size_px / 2.0;
  const double px_to_cm = membrane_radius_cm / half;
  for (int y = 0; y < out_size_px; ++y) {
    for (int x = 0; x < out_size_px; ++x) {
      const double u = (x + 0.5 - half) * px_to_cm;
      const double v = (y + 0.5 - half) * px_to_cm;
      if (u * u + v * v > membrane_radius_cm * membrane_radius_cm) continue;
      const double value = shade_point(deformation_mm, grid_n, membrane_radius_cm,
                                       u, v, px_to_cm, lights, params);
      out[static_cast<std::size_t>(y) * out_size_px + x] = quantize(value, 1.0);
    }
  }
  return out;
}

Renderer::Renderer(scene::Scene scene, const CameraIntrinsics& intr,
                   physics::SuctionConfig config, RenderParams params)
    : scene_(std::move(scene)),
      intr_(intr),
      config_(std::move(config)),
      params_(params) {
  scene_.validate();
  config_.validate();
  obstacles_ = scene::obstacle_mask(scene_);
  build_tables();
}

void Renderer::set_intrinsics(const CameraIntrinsics& intr) {
  intr_ = intr;
  build_tables();
}

void Renderer::set_exposure_gain(double gain) {
  if (!(gain > 0.0)) throw ParamError("exposure gain must be positive");
  intr_.exposure_gain = gain;
}

void Renderer::build_tables() {
  const int w = intr_.width_px;
  const int h = intr_.height_px;
  const auto count = static_cast<std::size_t>(w) * h;
  zone_.assign(count, 0);
  dir_x_.assign(count, 0.f);
  dir_y_.assign(count, 0.f);
  dir_z_.assign(count, 0.f);
  mem_u_.assign(count, 0.f);
  mem_v_.assign(count, 0.f);

  const double f = intr_.f_px_per_rad();
  const double cx = intr_.zones.center_x_px;
  const double cy = intr_.zones.center_y_px;
  const double central_r = intr_.zones.central_radius_px;
  const double outer_r = intr_.zones.peripheral_outer_px;
  const double mem_r = config_.cup.membrane_radius_cm;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      const double r = std::sqrt(dx * dx + dy * dy);
      if (r > outer_r) continue;
      zone_[i] = r <= central_r ? 2 : 1;
      const double theta = std::min(r / f, M_PI / 2.0);
      const double phi = std::atan2(dy, dx);
      const double s = std::sin(theta);
      dir_x_[i] = static_cast<float>(s * std::cos(phi));
      dir_y_[i] = static_cast<float>(s * std::sin(phi));
      dir_z_[i] = static_cast<float>(-std::cos(theta));
      if (zone_[i] == 2) {
        const double rho = r / central_r * mem_r;
        mem_u_[i] = static_cast<float>(rho * std::cos(phi));
        mem_v_[i] = static_cast<float>(rho * std::sin(phi));
      }
    }
  }
}

Frame Renderer::render(const scene::Pose& pose, bool led_on, std::uint32_t seq,
                       std::uint64_t timestamp_us) const {
  if (led_on) {
    const auto contact = physics::contact_state(scene_, pose, config_);
    return render(pose, led_on, seq, timestamp_us, contact);
  }
  static const physics::ContactResult empty{};
  return render(pose, led_on, seq, timestamp_us, empty);
}

Frame Renderer::render(const scene::Pose& pose, bool led_on, std::uint32_t seq,
                       std::uint64_t timestamp_us,
                       const physics::ContactResult& contact) const {
  Frame frame;
  frame.width_px = intr_.width_px;
  frame.height_px = intr_.height_px;
  frame.pixels.assign(static_cast<std::size_t>(intr_.width_px) * intr_.height_px, 0);
  frame.modality = led_on ? Modality::Tactile : Modality::Vision;
  frame.seq = seq;
  frame.timestamp_us = timestamp_us;
  frame.zones = intr_.zones;

  const double gain = intr_.exposure_gain;
  const double tilt = pose.tilt_deg * kDeg2Rad;
  const double ct = std::cos(tilt);
  const double st = std::sin(tilt);
  const double k_incline = std::tan(scene_.incline_deg * kDeg2Rad);
  // Camera center above the rim plane, board base plane at base height.
  const double ox = pose.x_cm;
  const double oy = pose.y_cm;
  const double oz = pose.z_cm + params_.cam_height_above_rim_cm;
  const double base_cm = 0.0;  // vision plane sits at the board datum
  const double marker_r2 = params_.marker_radius_cm * params_.marker_radius_cm;

  const auto lights = side_lights(params_);
  const double central_r = intr_.zones.central_radius_px;
  const double mem_r = config_.cup.membrane_radius_cm;
  const double px_to_cm = mem_r / central_r;
  const int nx = scene_.nx();
  const int ny = scene_.ny();
  const double inv_cell = 1.0 / scene_.cell_cm;

  const std::size_t count = frame.pixels.size();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t zone = zone_[i];
    if (zone == 0) continue;

    if (zone == 2 && led_on) {
      const double value = shade_point(contact.deformation_mm, contact.grid_n,
                                       mem_r, mem_u_[i], mem_v_[i], px_to_cm,
                                       lights, params_);
      frame.pixels[i] = quantize(value, gain);
      continue;
    }

    // Vision ray-cast onto the (possibly inclined) base plane.
    double dx = dir_x_[i];
    const double dy = dir_y_[i];
    double dz = dir_z_[i];
    if (st != 0.0) {
      // Cup tilt lifts the +x rim edge, pivoting the boresight toward +x.
      const double rx = dx * ct - dz * st;
      const double rz = dx * st + dz * ct;
      dx = rx;
      dz = rz;
    }
    double value = params_.surround_value;
    const double denom = k_incline * dx - dz;
    if (denom > 1e-9) {
      const double t = (oz - base_cm - k_incline * ox) / denom;
      if (t > 0.0) {
        const double hx = ox + t * dx;
        const double hy = oy + t * dy;
        const int cix = static_cast<int>(hx * inv_cell);
        const int ciy = static_cast<int>(hy * inv_cell);
        if (hx >= 0.0 && hy >= 0.0 && cix < nx && ciy < ny) {
          const double mx = hx - scene_.target_x_cm;
          const double my = hy - scene_.target_y_cm;
          if (mx * mx + my * my <= marker_r2)
            value = params_.marker_value;
          else
            value = obstacles_[static_cast<std::size_t>(ciy) * nx + cix]
                        ? params_.obstacle_value
                        : params_.clear_value;
        }
      }
    }
    if (zone == 1 && led_on) value *= params_.peripheral_dim;
    frame.pixels[i] = quantize(value, gain);
  }
  return frame;
}

Frame render_frame(const scene::Scene& scene, const scene::Pose& pose,
                   bool led_on, const CameraIntrinsics& intr,
                   const physics::SuctionConfig& config, std::uint32_t seq,
                   std::uint64_t timestamp_us) {
  Renderer renderer(scene, intr, config);
  return renderer.render(pose, led_on, seq, timestamp_us);
}

double tactile_resolution_px_per_cm2(const CameraIntrinsics& intr,
                                     const scene::CupFootprint& cup) {
  const double cx = intr.zones.center_x_px;
  const double cy = intr.zones.center_y_px;
  const double r = intr.zones.central_radius_px;
  long count = 0;
  for (int y = 0; y < intr.height_px; ++y) {
    for (int x = 0; x < intr.width_px; ++x) {
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r) ++count;
    }
  }
  const double area = M_PI * cup.membrane_radius_cm * cup.membrane_radius_cm;
  return count / area;
}

}  // namespace flexicup::sensor

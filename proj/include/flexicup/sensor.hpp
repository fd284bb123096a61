#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "flexicup/physics.hpp"
#include "flexicup/scene.hpp"

namespace flexicup::sensor {

enum class Modality : std::uint8_t { Vision = 0, Tactile = 1 };

struct ZoneGeometry {
  int center_x_px = 512;
  int center_y_px = 384;
  int central_radius_px = 280;
  int peripheral_outer_px = 380;
};

// Equidistant fisheye: image radius = f * theta, f fixed by the zone
// geometry so the rim of the lens disk maps to fov/2.
struct CameraIntrinsics {
  int width_px = 1024;
  int height_px = 768;
  double fov_deg = 180.0;
  ZoneGeometry zones;
  double exposure_gain = 1.0;

  double f_px_per_rad() const;
  // Same optics at 1/factor resolution (factor in {1, 2, 4}).
  CameraIntrinsics downscaled(int factor) const;
};

struct Frame {
  int width_px = 0;
  int height_px = 0;
  std::vector<std::uint8_t> pixels;  // row-major grayscale
  Modality modality = Modality::Vision;
  std::uint32_t seq = 0;
  std::uint64_t timestamp_us = 0;
  ZoneGeometry zones;

  std::uint8_t at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * width_px + x];
  }
};

// Palette and photometric constants for the synthetic views.
struct RenderParams {
  double surround_value = 15.0;   // rays leaving the board
  double clear_value = 200.0;
  double obstacle_value = 40.0;
  double marker_value = 120.0;
  double marker_radius_cm = 1.25;
  double cam_height_above_rim_cm = 3.0;
  double tactile_ambient = 30.0;
  double contact_weight = 90.0;       // brightness of a fully indented patch
  double contact_sat_mm = 1.0;        // indentation that saturates brightness
  double light_weight = 60.0;         // per side LED
  // Low grazing angle: membrane-compliance slopes (~0.27 max) must clear
  // tan(elevation) for flank highlights to appear at all.
  double light_elevation_deg = 10.0;
  unsigned light_mask = 0xF;          // bit i: LED at azimuth 90*i degrees
  double peripheral_dim = 0.5;        // annulus attenuation in tactile mode
};

// pixel = center + f*theta * (cos phi, sin phi). Throws on theta outside
// [0, pi/2].
std::pair<double, double> fisheye_project(double theta_rad, double phi_rad,
                                          const CameraIntrinsics& intr);

// Photometric tactile image of a deformation height field: four grazing
// side LEDs over surface normals plus a saturating indentation brightness
// term. Renders the membrane disk into a square raster of the given size;
// pixels outside the disk are 0.
std::vector<std::uint8_t> synth_tactile_shading(
    const std::vector<double>& deformation_mm, int grid_n,
    double membrane_radius_cm, int out_size_px,
    const RenderParams& params = {});

// Caches per-pixel un-projection tables for one intrinsics setting.
class Renderer {
 public:
  Renderer(scene::Scene scene, const CameraIntrinsics& intr,
           physics::SuctionConfig config, RenderParams params = {});

  const CameraIntrinsics& intrinsics() const { return intr_; }
  void set_intrinsics(const CameraIntrinsics& intr);
  void set_exposure_gain(double gain);
  const scene::Scene& scene() const { return scene_; }

  // Contact computed internally (convenience path).
  Frame render(const scene::Pose& pose, bool led_on, std::uint32_t seq,
               std::uint64_t timestamp_us) const;
  // Reuses a contact snapshot the caller already has.
  Frame render(const scene::Pose& pose, bool led_on, std::uint32_t seq,
               std::uint64_t timestamp_us,
               const physics::ContactResult& contact) const;

 private:
  void build_tables();

  scene::Scene scene_;
  CameraIntrinsics intr_;
  physics::SuctionConfig config_;
  RenderParams params_;
  std::vector<std::uint8_t> obstacles_;

  // Per-pixel: zone id (0 outside, 1 annulus, 2 central), ray direction,
  // membrane coordinates for the central disk.
  std::vector<std::uint8_t> zone_;
  std::vector<float> dir_x_, dir_y_, dir_z_;
  std::vector<float> mem_u_, mem_v_;
};

// One-off convenience wrapper.
Frame render_frame(const scene::Scene& scene, const scene::Pose& pose,
                   bool led_on, const CameraIntrinsics& intr,
                   const physics::SuctionConfig& config,
                   std::uint32_t seq = 0, std::uint64_t timestamp_us = 0);

// Central-disk pixels per cm^2 of membrane for a configuration.
double tactile_resolution_px_per_cm2(const CameraIntrinsics& intr,
                                     const scene::CupFootprint& cup);

}  // namespace flexicup::sensor

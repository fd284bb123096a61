#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace flexicup::scene {

// Floating end-effector pose: the cup rim plane sits at height z_cm above
// the board datum, tilted about the workspace y-axis.
struct Pose {
  double x_cm = 0.0;
  double y_cm = 0.0;
  double z_cm = 0.0;
  double tilt_deg = 0.0;
};

enum class SuctionMode { Vacuum, Bernoulli };
enum class ConfigId { I = 0, II = 1, III = 2, IV = 3 };

const char* to_string(SuctionMode mode);
const char* to_string(ConfigId id);
SuctionMode suction_mode_from_string(const std::string& s);
ConfigId config_id_from_string(const std::string& s);

// Bottom-housing geometry and force rating for one modular configuration.
struct CupFootprint {
  double membrane_radius_cm = 1.14;
  double rim_inner_cm = 1.7;
  double rim_outer_cm = 2.0;
  SuctionMode mode = SuctionMode::Vacuum;
  ConfigId config_id = ConfigId::I;
  double f_max_newton = 34.3;
  std::string provenance = "paper";  // "paper" | "assumed"
};

// Obstacle cells rise this far above the board base; taller than the
// membrane can comply with, so any obstacle under the rim breaks the seal.
constexpr double kObstacleHeightMm = 5.0;

// Planar workspace: a height grid plus a global incline about the y-axis
// (surface rises along +x). Heights are absolute mm above the datum.
struct Scene {
  double width_cm = 20.0;
  double height_cm = 20.0;
  double cell_cm = 1.0;
  std::vector<double> heights_mm;  // row-major, ny rows of nx
  double incline_deg = 0.0;
  double target_x_cm = 10.0;
  double target_y_cm = 10.0;
  double object_mass_kg = 0.5;
  std::uint64_t seed = 0;

  int nx() const;
  int ny() const;
  bool in_bounds(double x_cm, double y_cm) const;
  int cell_index(double x_cm, double y_cm) const;  // -1 if outside

  // Cells rising past a small tolerance above the flat datum are obstacles.
  bool cell_is_obstacle(int ix, int iy) const;
  bool cell_is_obstacle(int index) const;

  void validate() const;  // throws ParamError on broken invariants
};

// Seeded obstacle board. The first round(coverage * cells) entries of a
// seed-determined permutation become obstacles, so boards generated from
// the same seed nest as coverage grows.
Scene generate_board(double coverage, double width_cm, double height_cm,
                     std::uint64_t seed, double cell_cm = 1.0);

// Grid height plus incline contribution at a point. Throws BoundsError
// outside the workspace.
double surface_height_mm(const Scene& s, double x_cm, double y_cm);

// True when every cell intersecting the open disk is obstacle-free and the
// disk lies inside the workspace.
bool disk_clear(const Scene& s, double x_cm, double y_cm, double radius_cm);

// Brute-force rasterization oracle: all grid cell centers where the
// rim-outer disk is clear and in bounds. Sorted (iy, ix) pairs.
std::vector<std::pair<int, int>> feasible_positions(const Scene& s,
                                                    const CupFootprint& cup);

// Cell center in workspace cm.
std::pair<double, double> cell_center(const Scene& s, int ix, int iy);

// Per-cell obstacle flags, base height hoisted out for hot loops.
std::vector<std::uint8_t> obstacle_mask(const Scene& s);

std::string to_json(const Scene& s);
Scene scene_from_json(const std::string& text);
void save_scene(const Scene& s, const std::string& path);
Scene load_scene(const std::string& path);

}  // namespace flexicup::scene

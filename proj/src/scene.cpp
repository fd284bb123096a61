#include "flexicup/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "flexicup/error.hpp"
#include "flexicup/rng.hpp"

namespace flexicup::scene {

namespace {
constexpr double kDeg2Rad = M_PI / 180.0;
constexpr double kObstacleEpsMm = 0.5;
}  // namespace

const char* to_string(SuctionMode mode) {
  return mode == SuctionMode::Vacuum ? "vacuum" : "bernoulli";
}

const char* to_string(ConfigId id) {
  switch (id) {
    case ConfigId::I: return "I";
    case ConfigId::II: return "II";
    case ConfigId::III: return "III";
    case ConfigId::IV: return "IV";
  }
  return "?";
}

SuctionMode suction_mode_from_string(const std::string& s) {
  if (s == "vacuum") return SuctionMode::Vacuum;
  if (s == "bernoulli") return SuctionMode::Bernoulli;
  throw ParamError("unknown suction mode: " + s);
}

ConfigId config_id_from_string(const std::string& s) {
  if (s == "I") return ConfigId::I;
  if (s == "II") return ConfigId::II;
  if (s == "III") return ConfigId::III;
  if (s == "IV") return ConfigId::IV;
  throw ParamError("unknown config id: " + s);
}

int Scene::nx() const {
  return static_cast<int>(std::ceil(width_cm / cell_cm - 1e-9));
}

int Scene::ny() const {
  return static_cast<int>(std::ceil(height_cm / cell_cm - 1e-9));
}

bool Scene::in_bounds(double x_cm, double y_cm) const {
  return x_cm >= 0.0 && x_cm <= width_cm && y_cm >= 0.0 && y_cm <= height_cm;
}

int Scene::cell_index(double x_cm, double y_cm) const {
  if (!in_bounds(x_cm, y_cm)) return -1;
  int ix = std::min(static_cast<int>(x_cm / cell_cm), nx() - 1);
  int iy = std::min(static_cast<int>(y_cm / cell_cm), ny() - 1);
  return iy * nx() + ix;
}

bool Scene::cell_is_obstacle(int ix, int iy) const {
  return cell_is_obstacle(iy * nx() + ix);
}

bool Scene::cell_is_obstacle(int index) const {
  return heights_mm[static_cast<std::size_t>(index)] > kObstacleEpsMm;
}

void Scene::validate() const {
  if (width_cm <= 0.0 || height_cm <= 0.0 || cell_cm <= 0.0)
    throw ParamError("scene extents and cell pitch must be positive");
  if (incline_deg < 0.0 || incline_deg > 15.0)
    throw ParamError("incline_deg must lie in [0, 15]");
  const auto cells = static_cast<std::size_t>(nx()) * static_cast<std::size_t>(ny());
  if (heights_mm.size() != cells)
    throw ParamError("heights grid does not match ceil(width/cell) x ceil(height/cell)");
  for (double h : heights_mm)
    if (!(h >= 0.0)) throw ParamError("heights must be nonnegative");
  if (!in_bounds(target_x_cm, target_y_cm))
    throw ParamError("target outside workspace");
  if (object_mass_kg < 0.0) throw ParamError("object_mass_kg must be nonnegative");
}

Scene generate_board(double coverage, double width_cm, double height_cm,
                     std::uint64_t seed, double cell_cm) {
  if (!(coverage >= 0.0 && coverage <= 1.0))
    throw ParamError("coverage must lie in [0, 1]");
  if (!(width_cm >= 4.0 * cell_cm) || !(height_cm >= 4.0 * cell_cm))
    throw ParamError("board extents must be at least 4 cells");

  Scene s;
  s.width_cm = width_cm;
  s.height_cm = height_cm;
  s.cell_cm = cell_cm;
  s.seed = seed;
  s.target_x_cm = width_cm / 2.0;
  s.target_y_cm = height_cm / 2.0;

  const int total = s.nx() * s.ny();
  s.heights_mm.assign(static_cast<std::size_t>(total), 0.0);

  // Fisher-Yates permutation; the obstacle set for coverage a is a prefix
  // of the one for coverage b > a under the same seed.
  std::vector<int> order(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (int i = total - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  const int n_obstacles = static_cast<int>(std::llround(coverage * total));
  for (int k = 0; k < n_obstacles; ++k)
    s.heights_mm[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] =
        kObstacleHeightMm;
  return s;
}

double surface_height_mm(const Scene& s, double x_cm, double y_cm) {
  const int idx = s.cell_index(x_cm, y_cm);
  if (idx < 0) throw BoundsError("surface_height query outside workspace");
  const double incline_mm = 10.0 * x_cm * std::tan(s.incline_deg * kDeg2Rad);
  return s.heights_mm[static_cast<std::size_t>(idx)] + incline_mm;
}

bool disk_clear(const Scene& s, double x_cm, double y_cm, double radius_cm) {
  if (x_cm - radius_cm < 0.0 || x_cm + radius_cm > s.width_cm ||
      y_cm - radius_cm < 0.0 || y_cm + radius_cm > s.height_cm)
    return false;
  const double c = s.cell_cm;
  const int ix0 = std::max(0, static_cast<int>((x_cm - radius_cm) / c));
  const int ix1 = std::min(s.nx() - 1, static_cast<int>((x_cm + radius_cm) / c));
  const int iy0 = std::max(0, static_cast<int>((y_cm - radius_cm) / c));
  const int iy1 = std::min(s.ny() - 1, static_cast<int>((y_cm + radius_cm) / c));
  const double r2 = radius_cm * radius_cm - 1e-9;
  for (int iy = iy0; iy <= iy1; ++iy) {
    for (int ix = ix0; ix <= ix1; ++ix) {
      const double cx = std::clamp(x_cm, ix * c, (ix + 1) * c);
      const double cy = std::clamp(y_cm, iy * c, (iy + 1) * c);
      const double dx = x_cm - cx;
      const double dy = y_cm - cy;
      if (dx * dx + dy * dy < r2 && s.cell_is_obstacle(ix, iy)) return false;
    }
  }
  return true;
}

std::vector<std::pair<int, int>> feasible_positions(const Scene& s,
                                                    const CupFootprint& cup) {
  std::vector<std::pair<int, int>> out;
  for (int iy = 0; iy < s.ny(); ++iy) {
    for (int ix = 0; ix < s.nx(); ++ix) {
      const auto [cx, cy] = cell_center(s, ix, iy);
      if (disk_clear(s, cx, cy, cup.rim_outer_cm)) out.emplace_back(iy, ix);
    }
  }
  return out;
}

std::pair<double, double> cell_center(const Scene& s, int ix, int iy) {
  return {(ix + 0.5) * s.cell_cm, (iy + 0.5) * s.cell_cm};
}

std::vector<std::uint8_t> obstacle_mask(const Scene& s) {
  std::vector<std::uint8_t> mask(s.heights_mm.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = s.heights_mm[i] > kObstacleEpsMm ? 1 : 0;
  return mask;
}

std::string to_json(const Scene& s) {
  nlohmann::json j;
  j["width_cm"] = s.width_cm;
  j["height_cm"] = s.height_cm;
  j["cell_cm"] = s.cell_cm;
  j["incline_deg"] = s.incline_deg;
  j["heights"] = s.heights_mm;
  j["target"] = {s.target_x_cm, s.target_y_cm};
  j["object_mass_kg"] = s.object_mass_kg;
  j["seed"] = s.seed;
  return j.dump();
}

Scene scene_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("scene JSON parse failure: ") + e.what());
  }
  Scene s;
  try {
    s.width_cm = j.at("width_cm").get<double>();
    s.height_cm = j.at("height_cm").get<double>();
    s.cell_cm = j.at("cell_cm").get<double>();
    s.incline_deg = j.at("incline_deg").get<double>();
    s.heights_mm = j.at("heights").get<std::vector<double>>();
    s.target_x_cm = j.at("target").at(0).get<double>();
    s.target_y_cm = j.at("target").at(1).get<double>();
    s.object_mass_kg = j.at("object_mass_kg").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("scene JSON missing field: ") + e.what());
  }
  s.validate();
  return s;
}

void save_scene(const Scene& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open scene file for writing: " + path);
  f << to_json(s);
}

Scene load_scene(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open scene file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return scene_from_json(ss.str());
}

}  // namespace flexicup::scene

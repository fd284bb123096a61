#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "flexicup/error.hpp"
#include "flexicup/registry.hpp"
#include "flexicup/scene.hpp"

using namespace flexicup;
using scene::Scene;

namespace {

int count_obstacles(const Scene& s) {
  int n = 0;
  for (int i = 0; i < s.nx() * s.ny(); ++i)
    if (s.cell_is_obstacle(i)) ++n;
  return n;
}

// Independent feasibility oracle: dense point rasterization of the disk
// instead of the closest-point-per-cell test used by the library.
bool disk_clear_brute(const Scene& s, double cx, double cy, double r) {
  const int steps = 400;
  for (int iy = 0; iy <= steps; ++iy) {
    for (int ix = 0; ix <= steps; ++ix) {
      const double px = cx + (2.0 * ix / steps - 1.0) * r;
      const double py = cy + (2.0 * iy / steps - 1.0) * r;
      const double dx = px - cx;
      const double dy = py - cy;
      if (dx * dx + dy * dy >= r * r) continue;
      if (!s.in_bounds(px, py)) return false;
      const int idx = s.cell_index(px, py);
      if (idx < 0 || s.cell_is_obstacle(idx)) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("generate_board coverage extremes") {
  const auto empty = scene::generate_board(0.0, 20.0, 20.0, 7);
  CHECK(empty.nx() == 20);
  CHECK(empty.ny() == 20);
  CHECK(count_obstacles(empty) == 0);
  for (double h : empty.heights_mm) CHECK(h == 0.0);

  const auto full = scene::generate_board(1.0, 20.0, 20.0, 7);
  CHECK(count_obstacles(full) == 400);
  for (double h : full.heights_mm) CHECK(h == scene::kObstacleHeightMm);
}

TEST_CASE("generate_board quarter coverage is exact and seed-stable") {
  const auto a = scene::generate_board(0.25, 20.0, 20.0, 7);
  CHECK(count_obstacles(a) == 100);
  const auto b = scene::generate_board(0.25, 20.0, 20.0, 7);
  CHECK(a.heights_mm == b.heights_mm);
  const auto c = scene::generate_board(0.25, 20.0, 20.0, 8);
  CHECK(a.heights_mm != c.heights_mm);
}

TEST_CASE("generate_board nests across coverage for one seed") {
  const auto lo = scene::generate_board(0.25, 20.0, 20.0, 42);
  const auto hi = scene::generate_board(0.5, 20.0, 20.0, 42);
  CHECK(count_obstacles(hi) == 200);
  for (int i = 0; i < 400; ++i)
    if (lo.cell_is_obstacle(i)) CHECK(hi.cell_is_obstacle(i));
}

TEST_CASE("surface height: flat, inclined, obstacle") {
  auto s = scene::generate_board(0.0, 20.0, 20.0, 1);
  CHECK(scene::surface_height_mm(s, 3.7, 11.2) == 0.0);

  s.incline_deg = 15.0;
  CHECK(scene::surface_height_mm(s, 10.0, 5.0) ==
        doctest::Approx(100.0 * std::tan(15.0 * M_PI / 180.0)));
  CHECK(scene::surface_height_mm(s, 10.0, 5.0) == doctest::Approx(26.79).epsilon(1e-3));

  auto ob = scene::generate_board(1.0, 20.0, 20.0, 1);
  CHECK(scene::surface_height_mm(ob, 10.0, 5.0) ==
        doctest::Approx(scene::kObstacleHeightMm));
  CHECK_THROWS_AS(scene::surface_height_mm(s, -1.0, 5.0), BoundsError);
  CHECK_THROWS_AS(scene::surface_height_mm(s, 5.0, 20.5), BoundsError);
}

TEST_CASE("obstacle flags follow the height grid") {
  const auto full = scene::generate_board(1.0, 20.0, 20.0, 3);
  CHECK(count_obstacles(full) == 400);
  const auto mask = scene::obstacle_mask(full);
  CHECK(std::count(mask.begin(), mask.end(), 1) == 400);
}

TEST_CASE("feasible_positions on empty and full boards") {
  scene::CupFootprint cup;  // rim_outer 2 cm
  const auto empty = scene::generate_board(0.0, 20.0, 20.0, 5);
  const auto feas = scene::feasible_positions(empty, cup);
  // Disk of radius 2 around a cell center (i+0.5) stays inside iff
  // center in [2, 18] -> centers 2.5 .. 17.5 -> 16 cells per axis.
  CHECK(feas.size() == 16u * 16u);
  for (const auto& [iy, ix] : feas) {
    CHECK(ix >= 2);
    CHECK(ix <= 17);
    CHECK(iy >= 2);
    CHECK(iy <= 17);
  }

  const auto full = scene::generate_board(1.0, 20.0, 20.0, 5);
  CHECK(scene::feasible_positions(full, cup).empty());
}

TEST_CASE("single clear patch leaves exactly the center position") {
  auto s = scene::generate_board(1.0, 20.0, 20.0, 9);
  // Clear exactly the cells a 4 cm diameter disk at the center cell's
  // center touches; the rim disk fits there and nowhere else.
  const double px = 10.5, py = 10.5;
  for (int iy = 0; iy < 20; ++iy) {
    for (int ix = 0; ix < 20; ++ix) {
      const double qx = std::clamp(px, double(ix), double(ix + 1));
      const double qy = std::clamp(py, double(iy), double(iy + 1));
      const double dx = qx - px;
      const double dy = qy - py;
      if (dx * dx + dy * dy < 4.0) s.heights_mm[iy * 20 + ix] = 0.0;
    }
  }
  scene::CupFootprint cup;
  const auto feas = scene::feasible_positions(s, cup);
  REQUIRE(feas.size() == 1);
  CHECK(feas[0].first == 10);   // iy
  CHECK(feas[0].second == 10);  // ix
  CHECK(disk_clear_brute(s, px, py, cup.rim_outer_cm));
  CHECK_FALSE(disk_clear_brute(s, px + 1.0, py, cup.rim_outer_cm));
}

TEST_CASE("feasible_positions agrees with brute rasterization oracle") {
  scene::CupFootprint cup;
  const auto s = scene::generate_board(0.3, 12.0, 12.0, 77);
  const auto feas = scene::feasible_positions(s, cup);
  std::set<std::pair<int, int>> fast(feas.begin(), feas.end());
  for (int iy = 0; iy < s.ny(); ++iy) {
    for (int ix = 0; ix < s.nx(); ++ix) {
      const auto [cx, cy] = scene::cell_center(s, ix, iy);
      const bool brute = disk_clear_brute(s, cx, cy, cup.rim_outer_cm);
      const bool got = fast.count({iy, ix}) > 0;
      CHECK_MESSAGE(brute == got, "cell (", ix, ",", iy, ")");
    }
  }
}

TEST_CASE("scene json round trip") {
  auto s = scene::generate_board(0.4, 20.0, 20.0, 123);
  s.incline_deg = 7.5;
  s.target_x_cm = 4.0;
  s.target_y_cm = 16.0;
  s.object_mass_kg = 1.25;
  const auto text = scene::to_json(s);
  const auto back = scene::scene_from_json(text);
  CHECK(back.width_cm == s.width_cm);
  CHECK(back.height_cm == s.height_cm);
  CHECK(back.cell_cm == s.cell_cm);
  CHECK(back.heights_mm == s.heights_mm);
  CHECK(back.incline_deg == s.incline_deg);
  CHECK(back.target_x_cm == s.target_x_cm);
  CHECK(back.target_y_cm == s.target_y_cm);
  CHECK(back.object_mass_kg == s.object_mass_kg);
  CHECK(back.seed == s.seed);
  // Serialization is deterministic.
  CHECK(scene::to_json(back) == text);
}

TEST_CASE("scene json rejects malformed input") {
  CHECK_THROWS_AS(scene::scene_from_json("{"), Error);
  CHECK_THROWS_AS(scene::scene_from_json("{\"width_cm\": 20}"), Error);
  // heights length mismatch
  CHECK_THROWS_AS(
      scene::scene_from_json(
          R"({"width_cm":2,"height_cm":2,"cell_cm":1,"incline_deg":0,)"
          R"("heights":[0,0,0],"target":[1,1],"object_mass_kg":0.5,"seed":0})"),
      Error);
}

TEST_CASE("scene file save/load") {
  const auto s = scene::generate_board(0.25, 10.0, 10.0, 55);
  const std::string path = "test_scene_tmp.json";
  scene::save_scene(s, path);
  const auto back = scene::load_scene(path);
  CHECK(back.heights_mm == s.heights_mm);
  std::remove(path.c_str());
  CHECK_THROWS_AS(scene::load_scene("no_such_file.json"), IoError);
}

TEST_CASE("config registry defaults and round trip") {
  const auto reg = physics::ConfigRegistry::defaults();
  const auto& c1 = reg.get(scene::ConfigId::I);
  CHECK(c1.f_max_newton == 34.3);
  CHECK(c1.mode == scene::SuctionMode::Vacuum);
  CHECK(c1.provenance == "paper");
  CHECK(reg.get(scene::ConfigId::II).provenance == "assumed");
  CHECK(reg.get(scene::ConfigId::III).mode == scene::SuctionMode::Bernoulli);
  CHECK(reg.get(scene::ConfigId::IV).f_max_newton == doctest::Approx(0.8));

  const auto text = reg.to_json();
  const auto back = physics::ConfigRegistry::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.get(scene::ConfigId::I).rim_outer_cm == c1.rim_outer_cm);
}

TEST_CASE("enum string round trips") {
  CHECK(scene::suction_mode_from_string("vacuum") == scene::SuctionMode::Vacuum);
  CHECK(scene::suction_mode_from_string("bernoulli") ==
        scene::SuctionMode::Bernoulli);
  CHECK(scene::config_id_from_string("I") == scene::ConfigId::I);
  CHECK(scene::config_id_from_string("IV") == scene::ConfigId::IV);
  CHECK_THROWS_AS(scene::suction_mode_from_string("magnet"), ParamError);
  CHECK_THROWS_AS(scene::config_id_from_string("V"), ParamError);
}

TEST_CASE("validate catches broken scenes") {
  auto s = scene::generate_board(0.0, 20.0, 20.0, 1);
  s.heights_mm.pop_back();
  CHECK_THROWS_AS(s.validate(), ParamError);
  auto t = scene::generate_board(0.0, 20.0, 20.0, 1);
  t.cell_cm = 0.0;
  CHECK_THROWS_AS(t.validate(), ParamError);
}

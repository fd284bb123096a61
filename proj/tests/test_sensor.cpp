#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "flexicup/error.hpp"
#include "flexicup/physics.hpp"
#include "flexicup/registry.hpp"
#include "flexicup/scene.hpp"
#include "flexicup/sensor.hpp"

using namespace flexicup;
using scene::Pose;
using sensor::CameraIntrinsics;
using sensor::Frame;
using sensor::Modality;
using sensor::RenderParams;

namespace {

physics::SuctionConfig config_i() {
  return physics::make_config(
      physics::ConfigRegistry::defaults().get(scene::ConfigId::I));
}

// Gaussian bump height field on the physics contact grid layout.
std::vector<double> bump_grid(int n, double r_cm, double cx_cm, double cy_cm,
                              double height_mm, double sigma_cm) {
  std::vector<double> g(static_cast<std::size_t>(n) * n, 0.0);
  const double step = 2.0 * r_cm / n;
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const double u = -r_cm + (ix + 0.5) * step;
      const double v = -r_cm + (iy + 0.5) * step;
      const double d2 = (u - cx_cm) * (u - cx_cm) + (v - cy_cm) * (v - cy_cm);
      g[static_cast<std::size_t>(iy) * n + ix] =
          height_mm * std::exp(-0.5 * d2 / (sigma_cm * sigma_cm));
    }
  }
  return g;
}

bool in_central(const CameraIntrinsics& intr, int x, int y) {
  const double dx = x + 0.5 - intr.zones.center_x_px;
  const double dy = y + 0.5 - intr.zones.center_y_px;
  return dx * dx + dy * dy <=
         double(intr.zones.central_radius_px) * intr.zones.central_radius_px;
}

bool in_lens(const CameraIntrinsics& intr, int x, int y) {
  const double dx = x + 0.5 - intr.zones.center_x_px;
  const double dy = y + 0.5 - intr.zones.center_y_px;
  return dx * dx + dy * dy <=
         double(intr.zones.peripheral_outer_px) * intr.zones.peripheral_outer_px;
}

}  // namespace

TEST_CASE("fisheye projection anchor angles") {
  CameraIntrinsics intr;
  auto [x0, y0] = sensor::fisheye_project(0.0, 0.0, intr);
  CHECK(x0 == doctest::Approx(512.0));
  CHECK(y0 == doctest::Approx(384.0));

  auto [x1, y1] = sensor::fisheye_project(M_PI / 2.0, 0.0, intr);
  CHECK(x1 == doctest::Approx(512.0 + 380.0));
  CHECK(y1 == doctest::Approx(384.0));

  auto [x2, y2] = sensor::fisheye_project(M_PI / 4.0, 0.0, intr);
  CHECK(x2 == doctest::Approx(512.0 + 190.0));

  auto [x3, y3] = sensor::fisheye_project(M_PI / 4.0, M_PI / 2.0, intr);
  CHECK(x3 == doctest::Approx(512.0));
  CHECK(y3 == doctest::Approx(384.0 + 190.0));

  CHECK_THROWS_AS(sensor::fisheye_project(-0.1, 0.0, intr), ParamError);
  CHECK_THROWS_AS(sensor::fisheye_project(2.0, 0.0, intr), ParamError);
}

TEST_CASE("tactile pixel density near the advertised figure") {
  CameraIntrinsics intr;
  const auto cup = physics::ConfigRegistry::defaults().get(scene::ConfigId::I);
  const double density = sensor::tactile_resolution_px_per_cm2(intr, cup);
  CHECK(std::abs(density - 60248.0) / 60248.0 < 0.05);
}

TEST_CASE("vision frame over a clear board: uniform central disk, gain clamps") {
  auto s = scene::generate_board(0.0, 40.0, 40.0, 1);
  s.target_x_cm = 35.0;  // marker outside the central field of view
  s.target_y_cm = 35.0;
  sensor::Renderer renderer(s, CameraIntrinsics{}, config_i());
  const auto frame = renderer.render(Pose{20.0, 20.0, 1.0, 0.0}, false, 1, 0);

  CHECK(frame.modality == Modality::Vision);
  CHECK(frame.width_px == 1024);
  CHECK(frame.height_px == 768);
  const auto& intr = renderer.intrinsics();
  int checked = 0;
  for (int y = 0; y < frame.height_px; y += 7) {
    for (int x = 0; x < frame.width_px; x += 7) {
      if (!in_lens(intr, x, y)) {
        CHECK(frame.at(x, y) == 0);
      } else if (in_central(intr, x, y)) {
        CHECK(frame.at(x, y) == 200);
        ++checked;
      }
    }
  }
  CHECK(checked > 1000);

  renderer.set_exposure_gain(2.0);
  const auto bright = renderer.render(Pose{20.0, 20.0, 1.0, 0.0}, false, 2, 0);
  CHECK(bright.at(512, 384) == 255);  // 200 * 2 clamped
  CHECK_THROWS_AS(renderer.set_exposure_gain(0.0), ParamError);
}

TEST_CASE("marker and obstacles show up at the right palette values") {
  auto s = scene::generate_board(0.0, 20.0, 20.0, 2);
  s.target_x_cm = 10.0;
  s.target_y_cm = 10.0;
  s.heights_mm[10 * 20 + 14] = scene::kObstacleHeightMm;  // cell (14,10)
  sensor::Renderer renderer(s, CameraIntrinsics{}, config_i());
  const auto frame = renderer.render(Pose{10.0, 10.0, 1.0, 0.0}, false, 1, 0);

  // Nadir pixel looks straight down at the marker.
  CHECK(frame.at(512, 384) == 120);
  // Ray toward the obstacle cell center (14.5, 10): lateral 4.5 cm at
  // 4 cm camera height -> theta = atan(4.5/4), phi = 0.
  const auto [ox, oy] =
      sensor::fisheye_project(std::atan2(4.5, 4.0), 0.0, renderer.intrinsics());
  CHECK(frame.at(int(ox), int(oy)) == 40);
  // Halfway out to the obstacle: clear board.
  const auto [cx, cy] =
      sensor::fisheye_project(std::atan2(2.5, 4.0), 0.0, renderer.intrinsics());
  CHECK(frame.at(int(cx), int(cy)) == 200);
}

TEST_CASE("camera tilt swings the nadir marker across the image") {
  auto s = scene::generate_board(0.0, 20.0, 20.0, 3);
  s.target_x_cm = 10.0;
  s.target_y_cm = 10.0;
  sensor::Renderer renderer(s, CameraIntrinsics{}, config_i());

  // Tilt 10 deg with the camera 8 cm up: boresight lands 8*tan(10 deg)
  // = 1.41 cm toward +x, past the 1.25 cm marker radius.
  const auto tilted = renderer.render(Pose{10.0, 10.0, 5.0, 10.0}, false, 1, 0);
  CHECK(tilted.at(512, 384) != 120);
  // World-down appears at theta = tilt on the -x side: x = 512 - f*tilt.
  const double f = renderer.intrinsics().f_px_per_rad();
  const int mx = static_cast<int>(512.0 - f * 10.0 * M_PI / 180.0);
  CHECK(tilted.at(mx, 384) == 120);

  const auto level = renderer.render(Pose{10.0, 10.0, 5.0, 0.0}, false, 2, 0);
  CHECK(level.at(512, 384) == 120);
}

TEST_CASE("matching tilt on an incline recenters the view") {
  auto s = scene::generate_board(0.0, 20.0, 20.0, 4);
  s.incline_deg = 10.0;
  s.target_x_cm = 10.0;
  s.target_y_cm = 10.0;
  sensor::Renderer renderer(s, CameraIntrinsics{}, config_i());
  const double z_surf = 10.0 * std::tan(10.0 * M_PI / 180.0);
  const auto frame =
      renderer.render(Pose{10.0, 10.0, z_surf + 5.0, 10.0}, false, 1, 0);
  // Boresight is perpendicular to the inclined surface; it still exits
  // through the marker directly below along the tilted axis? No: it hits
  // uphill of the nadir point, so the nadir marker shifts -x in the image
  // by less than the flat-board tilt case. Just require it stays visible
  // and the overall view is mostly clear board.
  int marker_px = 0, clear_px = 0;
  for (int y = 0; y < frame.height_px; y += 3)
    for (int x = 0; x < frame.width_px; x += 3) {
      if (frame.at(x, y) == 120) ++marker_px;
      if (frame.at(x, y) == 200) ++clear_px;
    }
  CHECK(marker_px > 20);
  CHECK(clear_px > 10000);
}

TEST_CASE("led off/on switches modality; out-of-lens stays dark") {
  const auto s = scene::generate_board(0.0, 20.0, 20.0, 5);
  sensor::Renderer renderer(s, CameraIntrinsics{}, config_i());
  const Pose hover{10.5, 10.5, 5.0, 0.0};  // far above: zero contact

  const auto vision = renderer.render(hover, false, 1, 0);
  const auto tactile = renderer.render(hover, true, 2, 0);
  CHECK(vision.modality == Modality::Vision);
  CHECK(tactile.modality == Modality::Tactile);
  CHECK(tactile.seq == 2);

  const auto& intr = renderer.intrinsics();
  bool central_differs = false;
  for (int y = 0; y < 768; y += 5) {
    for (int x = 0; x < 1024; x += 5) {
      if (!in_lens(intr, x, y)) {
        CHECK(vision.at(x, y) == 0);
        CHECK(tactile.at(x, y) == 0);
      } else if (in_central(intr, x, y)) {
        // Unlit membrane shows the ambient level only.
        CHECK(tactile.at(x, y) == 30);
        if (tactile.at(x, y) != vision.at(x, y)) central_differs = true;
      }
    }
  }
  CHECK(central_differs);
}

TEST_CASE("flush contact: uniform saturated plateau, lights only touch the rim band") {
  const auto s = scene::generate_board(0.0, 20.0, 20.0, 6);
  const auto cfg = config_i();
  sensor::Renderer renderer(s, CameraIntrinsics{}, cfg);
  const Pose flush{10.5, 10.5, 0.0, 0.0};
  const auto contact = physics::contact_state(s, flush, cfg);
  REQUIRE(contact.seal_quality == 1.0);
  const auto frame = renderer.render(flush, true, 1, 0, contact);

  // Interior of the membrane maps to the inner part of the central disk.
  const auto& intr = renderer.intrinsics();
  const double inner_px = intr.zones.central_radius_px *
                          (cfg.cup.membrane_radius_cm - 0.55) /
                          cfg.cup.membrane_radius_cm;
  int plateau = 0;
  for (int y = 0; y < 768; y += 2) {
    for (int x = 0; x < 1024; x += 2) {
      const double dx = x + 0.5 - intr.zones.center_x_px;
      const double dy = y + 0.5 - intr.zones.center_y_px;
      if (dx * dx + dy * dy > inner_px * inner_px) continue;
      CHECK(frame.at(x, y) == 120);  // ambient 30 + saturated contact 90
      ++plateau;
    }
  }
  CHECK(plateau > 2000);

  // With the side lights off, only the membrane-edge band changes.
  RenderParams dark;
  dark.light_weight = 0.0;
  sensor::Renderer no_lights(s, CameraIntrinsics{}, cfg, dark);
  const auto frame2 = no_lights.render(flush, true, 1, 0, contact);
  int edge_diffs = 0;
  for (int y = 0; y < 768; ++y) {
    for (int x = 0; x < 1024; ++x) {
      if (frame.at(x, y) == frame2.at(x, y)) continue;
      ++edge_diffs;
      const double dx = x + 0.5 - intr.zones.center_x_px;
      const double dy = y + 0.5 - intr.zones.center_y_px;
      CHECK(std::sqrt(dx * dx + dy * dy) > inner_px);
    }
  }
  CHECK(edge_diffs > 0);
}

TEST_CASE("synthetic shading: zero deformation is flat ambient") {
  const int n = 64, out = 96;
  std::vector<double> zero(n * n, 0.0);
  const auto img = sensor::synth_tactile_shading(zero, n, 1.14, out);
  for (int y = 0; y < out; ++y) {
    for (int x = 0; x < out; ++x) {
      const double u = x + 0.5 - out / 2.0;
      const double v = y + 0.5 - out / 2.0;
      const bool inside = (u * u + v * v) <= (out / 2.0) * (out / 2.0) * 0.999;
      if (inside)
        CHECK(img[y * out + x] == 30);
      else if ((u * u + v * v) > (out / 2.0) * (out / 2.0))
        CHECK(img[y * out + x] == 0);
    }
  }
}

TEST_CASE("synthetic shading: bump flank facing a light is bright, far side dark") {
  const int n = 64, out = 128;
  const double r = 1.14;
  // Steep 1 mm bump (sigma 1 mm) offset toward +x, lit by the +x LED only.
  const auto g = bump_grid(n, r, 0.3, 0.0, 1.0, 0.1);
  RenderParams params;
  params.light_mask = 0x1;
  const auto img = sensor::synth_tactile_shading(g, n, r, out, params);

  auto px = [&](double u_cm, double v_cm) {
    const int x = static_cast<int>((u_cm / r) * (out / 2.0) + out / 2.0);
    const int y = static_cast<int>((v_cm / r) * (out / 2.0) + out / 2.0);
    return static_cast<int>(img[y * out + x]);
  };

  const int peak = px(0.3, 0.0);
  const int plus_flank = px(0.3 + 0.1, 0.0);   // slope faces the +x light
  const int minus_flank = px(0.3 - 0.1, 0.0);  // slope faces away from it
  // Both flanks sit at the same height, so the contact term matches; the
  // +x flank additionally catches the +x light.
  CHECK(plus_flank > minus_flank + 15);
  CHECK(peak >= 110);  // near-saturated contact brightness at the crest
  CHECK(peak > plus_flank);
}

TEST_CASE("synthetic shading: quarter-turn symmetry with light relabeling") {
  const int n = 64, out = 128;
  const double r = 1.14;
  const auto gx = bump_grid(n, r, 0.35, 0.0, 1.0, 0.12);
  const auto gy = bump_grid(n, r, 0.0, 0.35, 1.0, 0.12);
  RenderParams lit_x, lit_y;
  lit_x.light_mask = 0x1;  // +x LED
  lit_y.light_mask = 0x2;  // +y LED: the quarter-turn relabeling of +x
  const auto img_x = sensor::synth_tactile_shading(gx, n, r, out, lit_x);
  const auto img_y = sensor::synth_tactile_shading(gy, n, r, out, lit_y);
  // Rotating the field 90 deg CCW maps pixel (x,y) -> (out-1-y, x).
  int worst = 0;
  for (int y = 0; y < out; ++y) {
    for (int x = 0; x < out; ++x) {
      const int rx = out - 1 - y;
      const int ry = x;
      worst = std::max(worst, std::abs(int(img_y[ry * out + rx]) -
                                       int(img_x[y * out + x])));
    }
  }
  CHECK(worst <= 1);
}

TEST_CASE("synthetic shading: doubling a saturated plateau changes only the flanks") {
  const int n = 64, out = 128;
  const double r = 1.14;
  // Smooth-edged plateau: full 1 mm inside 0.4 cm, linear falloff to 0.6 cm.
  auto plateau = [&](double scale) {
    std::vector<double> g(n * n, 0.0);
    const double step = 2.0 * r / n;
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix) {
        const double u = -r + (ix + 0.5) * step;
        const double v = -r + (iy + 0.5) * step;
        const double rho = std::sqrt(u * u + v * v);
        const double h = std::clamp((0.6 - rho) / 0.2, 0.0, 1.0);
        g[iy * n + ix] = scale * h;
      }
    return g;
  };
  const auto img1 = sensor::synth_tactile_shading(plateau(1.0), n, r, out);
  const auto img2 = sensor::synth_tactile_shading(plateau(2.0), n, r, out);

  auto radius_cm = [&](int x, int y) {
    const double u = (x + 0.5 - out / 2.0) / (out / 2.0) * r;
    const double v = (y + 0.5 - out / 2.0) / (out / 2.0) * r;
    return std::sqrt(u * u + v * v);
  };
  int flank_changes = 0;
  for (int y = 0; y < out; ++y) {
    for (int x = 0; x < out; ++x) {
      const double rho = radius_cm(x, y);
      if (rho < 0.3 || rho > 0.75) {
        // Plateau top and untouched floor: normals and saturation identical.
        CHECK(img1[y * out + x] == img2[y * out + x]);
      } else if (img1[y * out + x] != img2[y * out + x]) {
        ++flank_changes;
      }
    }
  }
  CHECK(flank_changes > 50);
}

TEST_CASE("downscaled intrinsics keep the optics consistent") {
  CameraIntrinsics full;
  const auto half = full.downscaled(2);
  CHECK(half.width_px == 512);
  CHECK(half.height_px == 384);
  CHECK(half.zones.central_radius_px == 140);
  CHECK(half.zones.peripheral_outer_px == 190);
  CHECK(half.f_px_per_rad() == doctest::Approx(full.f_px_per_rad() / 2.0));
  CHECK_THROWS_AS(full.downscaled(3), ParamError);

  const auto s = scene::generate_board(0.0, 20.0, 20.0, 8);
  sensor::Renderer renderer(s, half, config_i());
  const auto frame = renderer.render(Pose{10.0, 10.0, 1.0, 0.0}, false, 1, 0);
  CHECK(frame.width_px == 512);
  CHECK(frame.at(256, 192) == 120);  // marker still at the nadir
}

TEST_CASE("render is deterministic") {
  auto s = scene::generate_board(0.3, 20.0, 20.0, 9);
  s.incline_deg = 7.0;
  sensor::Renderer renderer(s, CameraIntrinsics{}, config_i());
  const Pose pose{9.0, 11.0, 0.3, 5.0};
  const auto a = renderer.render(pose, true, 1, 0);
  const auto b = renderer.render(pose, true, 1, 0);
  CHECK(a.pixels == b.pixels);
}

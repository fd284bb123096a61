#include "flexicup/physics.hpp"

#include <algorithm>
#include <cmath>

#include "flexicup/error.hpp"

namespace flexicup::physics {

namespace {
constexpr double kDeg2Rad = M_PI / 180.0;
// Standoff assigned to rim samples hanging off the board.
constexpr double kOffBoardStandoffMm = 50.0;

void gaussian_smooth_inplace(std::vector<double>& grid, int n, double sigma_cells) {
  if (sigma_cells <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_cells)));
  std::vector<double> kernel(static_cast<std::size_t>(radius) + 1);
  double sum = 0.0;
  for (int k = 0; k <= radius; ++k) {
    kernel[static_cast<std::size_t>(k)] =
        std::exp(-0.5 * (k / sigma_cells) * (k / sigma_cells));
    sum += (k == 0 ? 1.0 : 2.0) * kernel[static_cast<std::size_t>(k)];
  }
  for (auto& v : kernel) v /= sum;

  std::vector<double> tmp(grid.size());
  // horizontal pass
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double acc = kernel[0] * grid[static_cast<std::size_t>(y * n + x)];
      for (int k = 1; k <= radius; ++k) {
        const double w = kernel[static_cast<std::size_t>(k)];
        if (x - k >= 0) acc += w * grid[static_cast<std::size_t>(y * n + x - k)];
        if (x + k < n) acc += w * grid[static_cast<std::size_t>(y * n + x + k)];
      }
      tmp[static_cast<std::size_t>(y * n + x)] = acc;
    }
  }
  // vertical pass
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double acc = kernel[0] * tmp[static_cast<std::size_t>(y * n + x)];
      for (int k = 1; k <= radius; ++k) {
        const double w = kernel[static_cast<std::size_t>(k)];
        if (y - k >= 0) acc += w * tmp[static_cast<std::size_t>((y - k) * n + x)];
        if (y + k < n) acc += w * tmp[static_cast<std::size_t>((y + k) * n + x)];
      }
      grid[static_cast<std::size_t>(y * n + x)] = acc;
    }
  }
}

bool obstacle_in_disk(const scene::Scene& s, double x_cm, double y_cm,
                      double radius_cm) {
  const double c = s.cell_cm;
  const auto mask = scene::obstacle_mask(s);
  const int ix0 = std::max(0, static_cast<int>(std::floor((x_cm - radius_cm) / c)));
  const int ix1 = std::min(s.nx() - 1, static_cast<int>(std::floor((x_cm + radius_cm) / c)));
  const int iy0 = std::max(0, static_cast<int>(std::floor((y_cm - radius_cm) / c)));
  const int iy1 = std::min(s.ny() - 1, static_cast<int>(std::floor((y_cm + radius_cm) / c)));
  const double r2 = radius_cm * radius_cm - 1e-9;
  for (int iy = iy0; iy <= iy1; ++iy) {
    for (int ix = ix0; ix <= ix1; ++ix) {
      if (!mask[static_cast<std::size_t>(iy * s.nx() + ix)]) continue;
      const double cx = std::clamp(x_cm, ix * c, (ix + 1) * c);
      const double cy = std::clamp(y_cm, iy * c, (iy + 1) * c);
      const double dx = x_cm - cx;
      const double dy = y_cm - cy;
      if (dx * dx + dy * dy < r2) return true;
    }
  }
  return false;
}

}  // namespace

void SuctionConfig::validate() const {
  if (!(cup.membrane_radius_cm > 0.0) ||
      !(cup.membrane_radius_cm <= cup.rim_inner_cm) ||
      !(cup.rim_inner_cm < cup.rim_outer_cm))
    throw ParamError("cup radii must satisfy membrane <= rim_inner < rim_outer");
  if (!(cup.f_max_newton > 0.0)) throw ParamError("f_max_newton must be positive");
  if (!(p_atm_kpa > 0.0)) throw ParamError("p_atm_kpa must be positive");
  if (!(seal_threshold > 0.0 && seal_threshold < 1.0))
    throw ParamError("seal_threshold must lie in (0, 1)");
  if (!(seal_gap_tolerance_mm > 0.0) || !(max_indent_mm > 0.0) ||
      !(sigma_membrane_mm >= 0.0) || !(contact_eps_mm > 0.0))
    throw ParamError("contact model parameters out of range");
  if (grid_n < 8) throw ParamError("grid_n must be at least 8");
}

SuctionConfig make_config(const scene::CupFootprint& cup) {
  SuctionConfig c;
  c.cup = cup;
  c.bernoulli_k = cup.f_max_newton;  // saturates to f_max at touch
  c.validate();
  return c;
}

double ContactResult::coverage() const {
  if (grid_n == 0) return 0.0;
  int disk = 0, contact = 0;
  const double r = membrane_radius_cm;
  const double step = 2.0 * r / grid_n;
  for (int iy = 0; iy < grid_n; ++iy) {
    for (int ix = 0; ix < grid_n; ++ix) {
      const double u = -r + (ix + 0.5) * step;
      const double v = -r + (iy + 0.5) * step;
      if (u * u + v * v > r * r) continue;
      ++disk;
      if (contact_mask[static_cast<std::size_t>(iy * grid_n + ix)]) ++contact;
    }
  }
  return disk == 0 ? 0.0 : static_cast<double>(contact) / disk;
}

ContactResult contact_state(const scene::Scene& s, const scene::Pose& pose,
                            const SuctionConfig& config) {
  config.validate();
  ContactResult out;
  const int n = config.grid_n;
  const double r = config.cup.membrane_radius_cm;
  out.grid_n = n;
  out.membrane_radius_cm = r;
  out.deformation_mm.assign(static_cast<std::size_t>(n) * n, 0.0);
  out.contact_mask.assign(static_cast<std::size_t>(n) * n, 0);

  const double tilt = pose.tilt_deg * kDeg2Rad;
  const double ct = std::cos(tilt);
  const double st = std::sin(tilt);
  const double step = 2.0 * r / n;

  // Raw indentation over the membrane disk.
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const double u = -r + (ix + 0.5) * step;
      const double v = -r + (iy + 0.5) * step;
      if (u * u + v * v > r * r) continue;
      const double wx = pose.x_cm + u * ct;
      const double wy = pose.y_cm + v;
      if (!s.in_bounds(wx, wy)) continue;
      const double rim_mm = 10.0 * (pose.z_cm + u * st);
      const double surf_mm = surface_height_mm(s, wx, wy);
      const double raw = std::clamp(surf_mm + config.membrane_bulge_mm - rim_mm,
                                    0.0, config.max_indent_mm);
      out.deformation_mm[static_cast<std::size_t>(iy * n + ix)] = raw;
    }
  }

  // Compliance smoothing, normalized against the contact support. The
  // normalization keeps a uniform flush contact exactly uniform out to the
  // membrane border, while the half-fraction cut keeps the boundary of a
  // partial contact where it actually lies instead of bleeding one kernel
  // width into free space.
  const double sigma_cells = config.sigma_membrane_mm / (10.0 * step);
  std::vector<double> contact_sup(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> disk_sup(static_cast<std::size_t>(n) * n, 0.0);
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const double u = -r + (ix + 0.5) * step;
      const double v = -r + (iy + 0.5) * step;
      if (u * u + v * v > r * r) continue;
      const auto idx = static_cast<std::size_t>(iy * n + ix);
      disk_sup[idx] = 1.0;
      if (out.deformation_mm[idx] > 0.0) contact_sup[idx] = 1.0;
    }
  }
  gaussian_smooth_inplace(out.deformation_mm, n, sigma_cells);
  gaussian_smooth_inplace(contact_sup, n, sigma_cells);
  gaussian_smooth_inplace(disk_sup, n, sigma_cells);
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const double u = -r + (ix + 0.5) * step;
      const double v = -r + (iy + 0.5) * step;
      const auto idx = static_cast<std::size_t>(iy * n + ix);
      if (u * u + v * v > r * r || disk_sup[idx] <= 0.0 ||
          contact_sup[idx] < 0.5 * disk_sup[idx]) {
        out.deformation_mm[idx] = 0.0;
        continue;
      }
      double d = out.deformation_mm[idx] / contact_sup[idx];
      if (d < 0.0) d = 0.0;
      out.deformation_mm[idx] = d;
      out.contact_mask[idx] = d > config.contact_eps_mm ? 1 : 0;
    }
  }

  // Rim annulus standoff.
  const int n_radial = 4;
  const int n_azimuth = 96;
  int in_contact = 0;
  double gap_sum = 0.0;
  for (int ir = 0; ir < n_radial; ++ir) {
    const double rho = config.cup.rim_inner_cm +
                       (ir + 0.5) * (config.cup.rim_outer_cm - config.cup.rim_inner_cm) / n_radial;
    for (int ia = 0; ia < n_azimuth; ++ia) {
      const double phi = 2.0 * M_PI * ia / n_azimuth;
      const double u = rho * std::cos(phi);
      const double v = rho * std::sin(phi);
      const double wx = pose.x_cm + u * ct;
      const double wy = pose.y_cm + v;
      double gap;
      if (!s.in_bounds(wx, wy)) {
        gap = kOffBoardStandoffMm;
      } else {
        const double rim_mm = 10.0 * (pose.z_cm + u * st);
        gap = std::max(0.0, rim_mm - surface_height_mm(s, wx, wy));
      }
      gap_sum += gap;
      if (gap <= config.seal_gap_tolerance_mm) ++in_contact;
    }
  }
  const int rim_samples = n_radial * n_azimuth;
  out.rim_contact_fraction = static_cast<double>(in_contact) / rim_samples;
  out.gap_mm = gap_sum / rim_samples;

  out.clear_under_cup = scene::disk_clear(s, pose.x_cm, pose.y_cm, config.cup.rim_outer_cm);
  const bool blocked = obstacle_in_disk(s, pose.x_cm, pose.y_cm, config.cup.rim_outer_cm);
  out.seal_quality = blocked ? 0.0 : out.rim_contact_fraction;
  if (out.gap_mm > config.seal_gap_tolerance_mm) out.seal_quality = 0.0;
  return out;
}

double holding_force(const ContactResult& contact, const SuctionConfig& config,
                     bool valve_open) {
  if (!valve_open) return 0.0;
  if (config.cup.mode == scene::SuctionMode::Vacuum)
    return config.cup.f_max_newton * contact.seal_quality;
  if (!contact.clear_under_cup) return 0.0;
  const double lift = config.bernoulli_k / (contact.gap_mm + config.gap0_mm);
  return std::clamp(lift, 0.0, config.cup.f_max_newton);
}

AttachDecision attach_decision(const ContactResult& contact,
                               const SuctionConfig& config, bool valve_open,
                               double object_mass_kg) {
  AttachDecision d;
  d.force_newton = holding_force(contact, config, valve_open);
  d.attached = valve_open && contact.seal_quality >= config.seal_threshold &&
               d.force_newton >= object_mass_kg * kGravity;
  return d;
}

}  // namespace flexicup::physics

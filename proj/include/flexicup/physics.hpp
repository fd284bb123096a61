#pragma once

#include <vector>

#include "flexicup/scene.hpp"

namespace flexicup::physics {

// Tunable contact/seal model parameters shared by both suction modes.
struct SuctionConfig {
  scene::CupFootprint cup;
  double p_atm_kpa = 101.325;
  double vacuum_dp_kpa = 40.0;
  double bernoulli_k = 34.3;          // N*mm; F = min(f_max, k / (gap + gap0))
  double gap0_mm = 0.5;
  double seal_gap_tolerance_mm = 1.0;
  double seal_threshold = 0.9;
  double max_indent_mm = 2.0;
  double sigma_membrane_mm = 1.5;
  double contact_eps_mm = 0.05;
  // The membrane bulges this far below the rim plane at rest, so a rim
  // resting exactly on a flat surface still produces uniform indentation.
  double membrane_bulge_mm = 1.0;
  int grid_n = 64;                    // contact grid resolution (grid_n x grid_n)

  void validate() const;
};

SuctionConfig make_config(const scene::CupFootprint& cup);

// Membrane contact snapshot at one pose. Grids cover the square
// [-membrane_radius, +membrane_radius]^2 in cup-local cm, row-major,
// grid_n x grid_n; samples outside the membrane disk are zero.
struct ContactResult {
  int grid_n = 0;
  double membrane_radius_cm = 0.0;
  std::vector<double> deformation_mm;     // smoothed indentation height field
  std::vector<std::uint8_t> contact_mask;  // deformation > contact_eps
  double seal_quality = 0.0;               // in [0, 1]
  double rim_contact_fraction = 0.0;       // in [0, 1]
  double gap_mm = 0.0;                     // mean rim standoff
  bool clear_under_cup = false;            // no obstacle inside rim-outer disk

  double coverage() const;  // contact samples / membrane-disk samples
};

// Deformation, seal quality and rim standoff for a cup pose over a scene.
// Degenerate poses produce a zero-contact result rather than an error.
ContactResult contact_state(const scene::Scene& s, const scene::Pose& pose,
                            const SuctionConfig& config);

// Holding force in newtons. Vacuum: F = f_max * seal_quality while the
// valve is open. Bernoulli: saturating inverse-gap lift over a clear rigid
// region, zero otherwise.
double holding_force(const ContactResult& contact, const SuctionConfig& config,
                     bool valve_open);

// Attachment decision for one evaluation of the contact state.
struct AttachDecision {
  bool attached = false;
  double force_newton = 0.0;
};

AttachDecision attach_decision(const ContactResult& contact,
                               const SuctionConfig& config, bool valve_open,
                               double object_mass_kg);

constexpr double kGravity = 9.81;

}  // namespace flexicup::physics

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flexicup/controller.hpp"
#include "flexicup/perception.hpp"
#include "flexicup/policy.hpp"
#include "flexicup/scene.hpp"

namespace flexicup::bench {

// One controller episode inside a suite, with the board seed that made it.
struct TrialOutcome {
  std::uint64_t board_seed = 0;
  bool success = false;
  int steps = 0;
  bool oracle_feasible = false;
  std::string failure;
};

struct GraspCondition {
  std::string mode;
  double coverage = 0.0;
  int trials = 0;
  int successes = 0;
  double success_rate = 0.0;
  double mean_steps = 0.0;
  int oracle_agreed = 0;
  double oracle_agreement = 0.0;
  std::vector<TrialOutcome> outcomes;
};

struct ConfusionMatrix {
  std::string fusion;
  std::vector<std::string> labels;        // library id order
  std::vector<std::vector<int>> counts;   // rows: truth, cols: prediction
  double accuracy = 0.0;
};

struct PolicyEntry {
  std::string ablation;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
};

// Sections are filled by whichever suite ran; serialization order is fixed
// and byte-stable given the seed, except for runtime_seconds.
struct BenchReport {
  std::string schema = "flexicup-bench/1";
  std::string config;
  std::uint64_t seed = 0;
  double runtime_seconds = 0.0;

  std::vector<GraspCondition> conditions;
  double oracle_agreement = 0.0;
  double mean_steps = 0.0;

  std::vector<ConfusionMatrix> confusions;
  std::vector<PolicyEntry> policy;

  std::vector<std::string> reference_lines;  // labeled hardware numbers
  std::vector<std::string> warnings;         // soft assertions that failed

  std::string to_json(bool with_runtime = true) const;
  std::string to_csv() const;
  // Writes <path> as JSON plus a sibling .csv with the same stem.
  void save(const std::string& json_path) const;
  std::string summary() const;  // short human-readable digest
};

// True when some cell center admits the rim-outer disk plus an extra
// clearance margin, i.e. the scripted controller's committable predicate.
bool margin_feasible(const scene::Scene& s, const scene::CupFootprint& cup,
                     double margin_cm);

struct GraspOpts {
  std::vector<scene::SuctionMode> modes = {scene::SuctionMode::Vacuum,
                                           scene::SuctionMode::Bernoulli};
  std::vector<double> coverages = {0.25, 0.5, 0.75};
  int trials = 30;
  std::uint64_t seed = 1;
  int parallel = 2;  // concurrent emulator sessions
  controller::Params params;
};

// Fresh seeded board per trial, one emulator session each, scripted
// controller throughout. Success is compared against margin_feasible.
BenchReport bench_grasping(const GraspOpts& opts);

// 13 archetypes x `variations` noisy renders per fusion mode through the
// nearest-centroid classifier. Empty library_path uses the built-in set.
BenchReport bench_classification(std::uint64_t seed, int variations = 10,
                                 const std::string& library_path = "");

struct PolicyBenchOpts {
  std::vector<policy::Ablation> ablations = {policy::Ablation::Full,
                                             policy::Ablation::WorkspaceOnly};
  std::string params_dir;  // expects <dir>/<ablation>.bin/.json pairs
  int episodes = 30;
  std::uint64_t seed = 1;
  policy::DemoSpec family;  // evaluation scene family (seed overridden)
  int max_actions = 160;
};

// Loads trained parameters per ablation and rolls out the evaluation
// family. Missing parameter files raise IoError.
BenchReport bench_policy_ablation(const PolicyBenchOpts& opts);

}  // namespace flexicup::bench

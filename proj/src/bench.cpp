#include "flexicup/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "flexicup/emulator.hpp"
#include "flexicup/error.hpp"
#include "flexicup/registry.hpp"

namespace flexicup::bench {

namespace {

using Clock = std::chrono::steady_clock;

scene::CupFootprint cup_for_mode(scene::SuctionMode mode) {
  const auto& reg = physics::ConfigRegistry::defaults();
  for (auto id : {scene::ConfigId::I, scene::ConfigId::II, scene::ConfigId::III,
                  scene::ConfigId::IV})
    if (reg.get(id).mode == mode) return reg.get(id);
  throw ParamError("no configuration for the requested mode");
}

nlohmann::json condition_to_json(const GraspCondition& c) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : c.outcomes)
    trials.push_back({{"board_seed", t.board_seed},
                      {"success", t.success},
                      {"steps", t.steps},
                      {"oracle_feasible", t.oracle_feasible},
                      {"failure", t.failure}});
  return {{"mode", c.mode},
          {"coverage", c.coverage},
          {"trials", c.trials},
          {"successes", c.successes},
          {"success_rate", c.success_rate},
          {"mean_steps", c.mean_steps},
          {"oracle_agreed", c.oracle_agreed},
          {"oracle_agreement", c.oracle_agreement},
          {"outcomes", trials}};
}

}  // namespace

std::string BenchReport::to_json(bool with_runtime) const {
  nlohmann::json j;
  j["schema"] = schema;
  j["config"] = config;
  j["seed"] = seed;
  if (with_runtime) j["runtime_seconds"] = runtime_seconds;
  if (!conditions.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& c : conditions) arr.push_back(condition_to_json(c));
    j["conditions"] = arr;
    j["oracle_agreement"] = oracle_agreement;
    j["mean_steps"] = mean_steps;
  }
  if (!confusions.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& c : confusions)
      arr.push_back({{"fusion", c.fusion},
                     {"labels", c.labels},
                     {"counts", c.counts},
                     {"accuracy", c.accuracy}});
    j["confusions"] = arr;
  }
  if (!policy.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& p : policy)
      arr.push_back({{"ablation", p.ablation},
                     {"episodes", p.episodes},
                     {"successes", p.successes},
                     {"success_rate", p.success_rate}});
    j["policy"] = arr;
  }
  j["hardware_reference"] = reference_lines;
  j["warnings"] = warnings;
  return j.dump(2) + "\n";
}

std::string BenchReport::to_csv() const {
  std::ostringstream out;
  out << "schema," << schema << "\nseed," << seed << "\n";
  if (!conditions.empty()) {
    out << "mode,coverage,trials,successes,success_rate,mean_steps,oracle_agreement\n";
    for (const auto& c : conditions)
      out << c.mode << ',' << c.coverage << ',' << c.trials << ',' << c.successes
          << ',' << c.success_rate << ',' << c.mean_steps << ','
          << c.oracle_agreement << "\n";
  }
  if (!confusions.empty()) {
    out << "fusion,accuracy\n";
    for (const auto& c : confusions) out << c.fusion << ',' << c.accuracy << "\n";
  }
  if (!policy.empty()) {
    out << "ablation,episodes,successes,success_rate\n";
    for (const auto& p : policy)
      out << p.ablation << ',' << p.episodes << ',' << p.successes << ','
          << p.success_rate << "\n";
  }
  for (const auto& r : reference_lines) out << "reference," << r << "\n";
  for (const auto& w : warnings) out << "warning," << w << "\n";
  return out.str();
}

void BenchReport::save(const std::string& json_path) const {
  std::ofstream jf(json_path);
  if (!jf) throw IoError("cannot write " + json_path);
  jf << to_json();
  if (!jf) throw IoError("failed writing " + json_path);

  std::string csv_path = json_path;
  const auto dot = csv_path.rfind('.');
  if (dot != std::string::npos && csv_path.find('/', dot) == std::string::npos)
    csv_path.resize(dot);
  csv_path += ".csv";
  std::ofstream cf(csv_path);
  if (!cf) throw IoError("cannot write " + csv_path);
  cf << to_csv();
  if (!cf) throw IoError("failed writing " + csv_path);
}

std::string BenchReport::summary() const {
  std::ostringstream out;
  out << config << " (seed " << seed << ", " << runtime_seconds << " s)\n";
  for (const auto& c : conditions)
    out << "  " << c.mode << " @ coverage " << c.coverage << ": " << c.successes
        << "/" << c.trials << " success, mean steps " << c.mean_steps
        << ", oracle agreement " << c.oracle_agreement << "\n";
  if (!conditions.empty())
    out << "  overall oracle agreement " << oracle_agreement << "\n";
  for (const auto& c : confusions)
    out << "  " << c.fusion << ": accuracy " << c.accuracy << "\n";
  for (const auto& p : policy)
    out << "  " << p.ablation << ": " << p.successes << "/" << p.episodes
        << " success\n";
  for (const auto& r : reference_lines) out << "  reference: " << r << "\n";
  for (const auto& w : warnings) out << "  warning: " << w << "\n";
  return out.str();
}

bool margin_feasible(const scene::Scene& s, const scene::CupFootprint& cup,
                     double margin_cm) {
  const double radius = cup.rim_outer_cm + margin_cm;
  for (int iy = 0; iy < s.ny(); ++iy)
    for (int ix = 0; ix < s.nx(); ++ix) {
      const auto [cx, cy] = scene::cell_center(s, ix, iy);
      if (scene::disk_clear(s, cx, cy, radius)) return true;
    }
  return false;
}

namespace {

TrialOutcome run_trial(scene::SuctionMode mode, double coverage,
                       std::uint64_t board_seed, const controller::Params& params) {
  const auto cup = cup_for_mode(mode);
  auto board = scene::generate_board(coverage, 20.0, 20.0, board_seed);
  TrialOutcome out;
  out.board_seed = board_seed;
  out.oracle_feasible = margin_feasible(board, cup, params.step_cm);

  device::EmulatorServer server(board, cup.config_id);
  server.listen("127.0.0.1:0");
  std::thread th([&] { server.serve_one(); });
  auto result = controller::run_episode(server.endpoint(), board, cup, params);
  server.stop();
  th.join();

  out.success = result.success;
  out.steps = result.steps_taken;
  if (!result.success) out.failure = controller::to_string(result.failure_reason);
  return out;
}

}  // namespace

BenchReport bench_grasping(const GraspOpts& opts) {
  if (opts.trials < 0) throw ParamError("trials must be >= 0");
  const auto t0 = Clock::now();
  BenchReport report;
  report.seed = opts.seed;
  {
    std::ostringstream cfg;
    cfg << "grasp suite: " << opts.trials << " trials per condition, "
        << opts.modes.size() << " modes x " << opts.coverages.size()
        << " coverages, step " << opts.params.step_cm << " cm";
    report.config = cfg.str();
  }
  report.reference_lines.push_back(
      "hardware grasp success, original device: vacuum 90.0%, bernoulli 86.7% "
      "(not comparable to simulation)");

  int cond_index = 0;
  std::size_t total_agreed = 0, total_trials = 0;
  double total_steps = 0.0;
  for (const auto mode : opts.modes) {
    for (const double coverage : opts.coverages) {
      GraspCondition cond;
      cond.mode = scene::to_string(mode);
      cond.coverage = coverage;
      cond.trials = opts.trials;
      cond.outcomes.assign(opts.trials, {});

      const int workers = std::clamp(opts.parallel, 1, 8);
      std::atomic<int> next{0};
      auto work = [&] {
        for (int i = next.fetch_add(1); i < opts.trials; i = next.fetch_add(1)) {
          const std::uint64_t board_seed =
              opts.seed + 7919ULL * cond_index + static_cast<std::uint64_t>(i);
          cond.outcomes[i] = run_trial(mode, coverage, board_seed, opts.params);
        }
      };
      std::vector<std::thread> pool;
      for (int w = 1; w < workers; ++w) pool.emplace_back(work);
      work();
      for (auto& th : pool) th.join();

      for (const auto& t : cond.outcomes) {
        cond.successes += t.success;
        cond.oracle_agreed += t.success == t.oracle_feasible;
        cond.mean_steps += t.steps;
      }
      if (opts.trials > 0) {
        cond.success_rate = static_cast<double>(cond.successes) / opts.trials;
        cond.oracle_agreement = static_cast<double>(cond.oracle_agreed) / opts.trials;
        cond.mean_steps /= opts.trials;
      }
      total_agreed += cond.oracle_agreed;
      total_trials += opts.trials;
      total_steps += cond.mean_steps * opts.trials;
      report.conditions.push_back(std::move(cond));
      ++cond_index;
    }
  }
  if (total_trials > 0) {
    report.oracle_agreement = static_cast<double>(total_agreed) / total_trials;
    report.mean_steps = total_steps / total_trials;
  }
  report.runtime_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return report;
}

namespace {

sensor::Frame perturb_frame(const sensor::Frame& canon, std::uint64_t seed) {
  sensor::Frame f = canon;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 3.0);
  for (auto& px : f.pixels) {
    if (px == 0) continue;  // keep the out-of-lens mask intact
    const double v = std::round(px + n(rng));
    px = static_cast<std::uint8_t>(std::clamp(v, 1.0, 255.0));
  }
  return f;
}

}  // namespace

BenchReport bench_classification(std::uint64_t seed, int variations,
                                 const std::string& library_path) {
  if (variations < 1) throw ParamError("variations must be >= 1");
  const auto t0 = Clock::now();
  const auto lib = library_path.empty() ? perception::ObjectLibrary::defaults()
                                        : perception::ObjectLibrary::load(library_path);
  const auto& archetypes = lib.archetypes();
  const int n = static_cast<int>(archetypes.size());

  BenchReport report;
  report.seed = seed;
  {
    std::ostringstream cfg;
    cfg << "classification suite: " << n << " archetypes x " << variations
        << " variations per fusion mode";
    report.config = cfg.str();
  }

  const perception::Fusion fusions[3] = {perception::Fusion::VisionOnly,
                                         perception::Fusion::TactileOnly,
                                         perception::Fusion::Fused};
  const char* names[3] = {"vision-only", "tactile-only", "fused"};
  ConfusionMatrix mats[3];
  for (int m = 0; m < 3; ++m) {
    mats[m].fusion = names[m];
    for (const auto& a : archetypes) mats[m].labels.push_back(a.id);
    mats[m].counts.assign(n, std::vector<int>(n, 0));
  }

  for (int ai = 0; ai < n; ++ai) {
    const auto vision = lib.vision_frame(archetypes[ai].id);
    const auto tactile = lib.tactile_frame(archetypes[ai].id);
    for (int v = 0; v < variations; ++v) {
      const std::uint64_t vseed =
          seed * 1315423911ULL + static_cast<std::uint64_t>(ai) * 131 + v;
      const auto vf = perturb_frame(vision, vseed);
      const auto tf = perturb_frame(tactile, vseed ^ 0xabcdef12345ULL);
      for (int m = 0; m < 3; ++m) {
        const auto cls = perception::classify_object(lib, vf, tf, fusions[m]);
        const auto it = std::find(mats[m].labels.begin(), mats[m].labels.end(),
                                  cls.label);
        mats[m].counts[ai][it - mats[m].labels.begin()] += 1;
      }
    }
  }

  for (int m = 0; m < 3; ++m) {
    int diag = 0;
    for (int i = 0; i < n; ++i) diag += mats[m].counts[i][i];
    mats[m].accuracy = static_cast<double>(diag) / (n * variations);
    report.confusions.push_back(mats[m]);
  }

  const double fused = report.confusions[2].accuracy;
  if (fused < report.confusions[0].accuracy || fused < report.confusions[1].accuracy)
    report.warnings.push_back("fused accuracy fell below a single modality");
  report.runtime_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return report;
}

BenchReport bench_policy_ablation(const PolicyBenchOpts& opts) {
  if (opts.episodes < 0) throw ParamError("episodes must be >= 0");
  const auto t0 = Clock::now();
  BenchReport report;
  report.seed = opts.seed;
  {
    std::ostringstream cfg;
    cfg << "policy ablation suite: " << opts.episodes
        << " inclined-transport episodes per configuration";
    report.config = cfg.str();
  }
  report.reference_lines.push_back(
      "hardware policy success, original device: full 73.3%, workspace camera "
      "only 66.7% (not comparable to simulation)");

  const auto sched = policy::make_cosine_schedule();
  policy::DemoSpec family = opts.family;
  family.seed = opts.seed;
  family.count = std::max(opts.episodes, 1);

  for (const auto ablation : opts.ablations) {
    const std::string prefix =
        opts.params_dir + "/" + policy::to_string(ablation);
    const auto params = policy::load_params(prefix);
    if (params.cfg.ablation != ablation)
      throw ParamError(std::string("parameter file at ") + prefix +
                       " holds a different ablation");
    PolicyEntry entry;
    entry.ablation = policy::to_string(ablation);
    entry.episodes = opts.episodes;
    for (int i = 0; i < opts.episodes; ++i) {
      const auto board = policy::demo_scene(family, i);
      const auto result = policy::policy_rollout(board, params, sched, {},
                                                 opts.seed * 131 + i,
                                                 opts.max_actions);
      entry.successes += result.success;
    }
    if (opts.episodes > 0)
      entry.success_rate = static_cast<double>(entry.successes) / opts.episodes;
    report.policy.push_back(entry);
  }

  const PolicyEntry* full = nullptr;
  const PolicyEntry* ws = nullptr;
  double lowest = 2.0;
  std::string lowest_name;
  for (const auto& p : report.policy) {
    if (p.ablation == policy::to_string(policy::Ablation::Full)) full = &p;
    if (p.ablation == policy::to_string(policy::Ablation::WorkspaceOnly)) ws = &p;
    if (p.success_rate < lowest) {
      lowest = p.success_rate;
      lowest_name = p.ablation;
    }
  }
  if (full && ws && opts.episodes > 0) {
    if (full->success_rate < ws->success_rate)
      report.warnings.push_back("full configuration scored below workspace-only");
    if (ws->success_rate > lowest)
      report.warnings.push_back("workspace-only was not the lowest configuration");
  }
  report.runtime_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return report;
}

}  // namespace flexicup::bench

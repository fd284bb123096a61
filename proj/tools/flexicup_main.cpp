#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flexicup/bench.hpp"
#include "flexicup/emulator.hpp"
#include "flexicup/error.hpp"
#include "flexicup/policy.hpp"
#include "flexicup/scene.hpp"

namespace {

using namespace flexicup;

policy::Ablation parse_ablation(const std::string& name) {
  if (name == "no-attn") return policy::Ablation::NoAttention;  // CLI shorthand
  return policy::ablation_from_string(name);
}

void emit(const bench::BenchReport& report, const std::string& out_path) {
  std::fputs(report.summary().c_str(), stdout);
  if (!out_path.empty()) {
    report.save(out_path);
    std::printf("wrote %s (+ csv)\n", out_path.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wireless multimodal suction cup: emulator, benches, policy tools"};
  app.require_subcommand(1);

  // ---- bench ----
  auto* cmd_bench = app.add_subcommand("bench", "experiment suites");
  cmd_bench->require_subcommand(1);

  bench::GraspOpts grasp_opts;
  std::vector<std::string> grasp_modes = {"vacuum", "bernoulli"};
  std::string grasp_out;
  auto* cmd_grasp = cmd_bench->add_subcommand("grasp", "scripted grasp suite");
  cmd_grasp->add_option("--modes", grasp_modes, "suction modes")->delimiter(',');
  cmd_grasp->add_option("--coverages", grasp_opts.coverages, "obstacle coverages")
      ->delimiter(',');
  cmd_grasp->add_option("--trials", grasp_opts.trials, "trials per condition");
  cmd_grasp->add_option("--seed", grasp_opts.seed, "suite seed");
  cmd_grasp->add_option("--parallel", grasp_opts.parallel, "concurrent sessions");
  cmd_grasp->add_option("--step", grasp_opts.params.step_cm, "search lattice pitch");
  cmd_grasp->add_option("--out", grasp_out, "report path (.json, writes .csv too)");

  std::uint64_t classify_seed = 1;
  int classify_variations = 10;
  std::string classify_library, classify_out;
  auto* cmd_classify = cmd_bench->add_subcommand("classify", "fusion classification");
  cmd_classify->add_option("--seed", classify_seed, "variation seed");
  cmd_classify->add_option("--variations", classify_variations, "renders per archetype");
  cmd_classify->add_option("--library", classify_library, "object library json");
  cmd_classify->add_option("--out", classify_out, "report path");

  bench::PolicyBenchOpts pol_opts;
  std::vector<std::string> pol_ablations = {"full", "workspace-only"};
  std::string pol_out;
  auto* cmd_polbench = cmd_bench->add_subcommand("policy", "policy ablation suite");
  cmd_polbench->add_option("--params-dir", pol_opts.params_dir,
                           "directory with <ablation>.bin/.json")->required();
  cmd_polbench->add_option("--ablation", pol_ablations, "configurations to score")
      ->delimiter(',');
  cmd_polbench->add_option("--episodes", pol_opts.episodes, "episodes per config");
  cmd_polbench->add_option("--seed", pol_opts.seed, "evaluation seed");
  cmd_polbench->add_option("--out", pol_out, "report path");

  // ---- demo ----
  auto* cmd_demo = app.add_subcommand("demo", "demonstration collection");
  cmd_demo->require_subcommand(1);
  policy::DemoSpec demo_spec;
  std::string demo_dir = "demos";
  auto* cmd_collect = cmd_demo->add_subcommand("collect", "scripted demonstrations");
  cmd_collect->add_option("--n", demo_spec.count, "demonstrations to keep");
  cmd_collect->add_option("--seed", demo_spec.seed, "family seed");
  cmd_collect->add_option("--coverage", demo_spec.coverage, "obstacle coverage");
  cmd_collect->add_option("--incline-min", demo_spec.incline_min_deg, "degrees");
  cmd_collect->add_option("--incline-max", demo_spec.incline_max_deg, "degrees");
  cmd_collect->add_option("--out-dir", demo_dir, "output directory");

  // ---- policy train ----
  auto* cmd_policy = app.add_subcommand("policy", "diffusion policy tools");
  cmd_policy->require_subcommand(1);
  std::string train_demos, train_out = "params/full", train_ablation = "full";
  policy::TrainOpts train_opts;
  train_opts.epochs = 60;
  std::uint64_t init_seed = 2024;
  auto* cmd_train = cmd_policy->add_subcommand("train", "train one configuration");
  cmd_train->add_option("--demos", train_demos, "demo directory")->required();
  cmd_train->add_option("--out", train_out, "parameter path prefix");
  cmd_train->add_option("--ablation", train_ablation, "configuration");
  cmd_train->add_option("--epochs", train_opts.epochs, "training epochs");
  cmd_train->add_option("--batch", train_opts.batch, "batch size");
  cmd_train->add_option("--lr", train_opts.lr, "learning rate");
  cmd_train->add_option("--seed", train_opts.seed, "shuffle/noise seed");
  cmd_train->add_option("--init-seed", init_seed, "weight init seed");

  // ---- emulate ----
  std::string emu_scene, emu_listen, emu_config = "I";
  auto* cmd_emulate = app.add_subcommand("emulate", "serve one device over TCP");
  cmd_emulate->add_option("--scene", emu_scene, "scene json")->required();
  cmd_emulate->add_option("--listen", emu_listen, "host:port (0 picks a port)");
  cmd_emulate->add_option("--config", emu_config, "cup configuration I..IV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_grasp->parsed()) {
      grasp_opts.modes.clear();
      for (const auto& m : grasp_modes)
        grasp_opts.modes.push_back(scene::suction_mode_from_string(m));
      emit(bench::bench_grasping(grasp_opts), grasp_out);
    } else if (cmd_classify->parsed()) {
      emit(bench::bench_classification(classify_seed, classify_variations,
                                       classify_library),
           classify_out);
    } else if (cmd_polbench->parsed()) {
      pol_opts.ablations.clear();
      for (const auto& a : pol_ablations)
        pol_opts.ablations.push_back(parse_ablation(a));
      emit(bench::bench_policy_ablation(pol_opts), pol_out);
    } else if (cmd_collect->parsed()) {
      const auto demos = policy::collect_demos(demo_spec);
      policy::save_demos(demo_dir, demos);
      std::printf("kept %zu demonstrations under %s\n", demos.size(),
                  demo_dir.c_str());
    } else if (cmd_train->parsed()) {
      policy::PolicyConfig cfg;
      cfg.ablation = parse_ablation(train_ablation);
      const auto demos = policy::load_demos(train_demos);
      const auto data = policy::build_dataset(demos, cfg);
      std::printf("dataset: %zu windows from %zu demonstrations\n", data.size(),
                  demos.size());
      auto params = policy::PolicyParams::init(cfg, init_seed);
      const auto sched = policy::make_cosine_schedule();
      const auto report = policy::train_policy(params, data, sched, train_opts);
      policy::save_params(params, train_out);
      std::printf("trained %s: loss %.4f -> %.4f over %d epochs; wrote %s.bin/.json\n",
                  policy::to_string(cfg.ablation), report.initial_loss,
                  report.final_loss, train_opts.epochs, train_out.c_str());
    } else if (cmd_emulate->parsed()) {
      if (emu_listen.empty()) {
        const char* env = std::getenv("FLEXICUP_ENDPOINT");
        emu_listen = env ? env : "127.0.0.1:7700";
      }
      device::EmulatorServer server(scene::load_scene(emu_scene),
                                    scene::config_id_from_string(emu_config));
      server.listen(emu_listen);
      std::printf("serving on %s\n", server.endpoint().c_str());
      std::fflush(stdout);
      server.serve_forever();
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

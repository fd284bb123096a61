#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "flexicup/controller.hpp"
#include "flexicup/scene.hpp"
#include "flexicup/sensor.hpp"

namespace flexicup::policy {

// Structural ablations of the observation pathway. Dropping an encoder
// removes its parameters entirely; the missing feature enters fusion as a
// zero vector. WorkspaceOnly also skips the fusion stage.
enum class Ablation { Full, NoAttention, NoPeripheral, NoCentral, WorkspaceOnly };

const char* to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct PolicyConfig {
  int d_model = 32;          // feature width (paper-scale 512 selectable)
  int heads = 4;             // attention heads (paper-scale 8)
  int history = 2;           // H_o observation history (paper-scale 8)
  int horizon = 8;           // H_p action chunk length (paper-scale 48)
  int img_px = 64;           // square side of the three observation images
  std::array<int, 3> conv_ch = {8, 16, 32};  // three conv stages, stride 2
  int denoiser_hidden = 128;
  int t_embed = 16;          // sinusoidal timestep embedding width
  Ablation ablation = Ablation::Full;
  // Verification aid: swap every ReLU for identity so the whole net (under
  // WorkspaceOnly, which has no softmax) becomes linear in its parameters.
  bool identity_activations = false;

  static PolicyConfig paper_scale();  // 512-d, 8 heads, H_o 8, H_p 48
  static PolicyConfig micro();        // < 2000 parameters for grad checks

  int action_dim() const { return 6; }
  int chunk_len() const { return horizon * action_dim(); }
  int cond_per_obs() const;  // fused conditioning width per observation
  int denoiser_in() const;
  void validate() const;  // throws ParamError on inconsistent shapes
};

// One learnable tensor: weights, gradient accumulator, momentum buffer.
struct ParamBlock {
  std::string name;
  std::vector<int> shape;
  std::vector<double> w, g, v;

  std::size_t size() const { return w.size(); }
};

struct PolicyParams {
  PolicyConfig cfg;
  std::vector<ParamBlock> blocks;

  static PolicyParams init(const PolicyConfig& cfg, std::uint64_t seed);

  std::size_t param_count() const;
  ParamBlock* find(const std::string& name);
  const ParamBlock* find(const std::string& name) const;
};

// s_t alongside the three camera views; images row-major in [0, 1].
struct ObservationBundle {
  std::vector<double> workspace_img;   // top-down orthographic scene render
  std::vector<double> central_img;     // central-disk crop (vision or tactile)
  std::vector<double> peripheral_img;  // annulus unwrap, rows = radius
  std::array<double, 8> state_vec{};   // [x y z tilt led valve pressure attached]
};

struct Features {
  std::vector<double> workspace, central, peripheral, state;
};

Features encode_observation(const ObservationBundle& obs, const PolicyParams& params);

// Self-attention over the two-token sequence {central, peripheral}:
// per-head softmax over keys, concat heads, output projection, mean pool.
std::vector<double> attention_fuse(const std::vector<double>& f_central,
                                   const std::vector<double>& f_peripheral,
                                   const PolicyParams& params);

// Pre-pool internals for verification: per-token outputs and the
// heads x 2 x 2 softmax weight tensor.
struct AttentionTrace {
  std::vector<double> tokens_out;  // 2 x d
  std::vector<double> weights;     // heads x query x key
};
AttentionTrace attention_trace(const std::vector<double>& f_central,
                               const std::vector<double>& f_peripheral,
                               const PolicyParams& params);

// Cosine noise schedule: betas from the squared-cosine profile (clipped at
// 0.999), alphas_bar their cumulative product — strictly decreasing in (0,1].
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas, alphas, alphas_bar;
};
NoiseSchedule make_cosine_schedule(int T = 50, double s = 0.008);

// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise. Throws on t out of range.
std::vector<double> forward_diffuse(const std::vector<double>& chunk, int t,
                                    const std::vector<double>& noise,
                                    const NoiseSchedule& schedule);

// One training example: H_o observations (oldest first, borrowed) plus the
// H_p x 6 action chunk that followed.
struct Sample {
  std::vector<const ObservationBundle*> obs;
  const double* chunk = nullptr;
};

// One SGD+momentum step on the DDPM epsilon-prediction MSE; t and noise
// drawn per item. Returns the batch loss; throws DivergenceError when the
// loss goes non-finite.
double train_step(PolicyParams& params, const std::vector<Sample>& batch,
                  const NoiseSchedule& schedule, double lr, std::mt19937_64& rng);

// Deterministic variant with caller-fixed timesteps and noises (one per
// item); the randomized overload draws them and delegates here.
double train_step_fixed(PolicyParams& params, const std::vector<Sample>& batch,
                        const std::vector<int>& ts,
                        const std::vector<std::vector<double>>& noises,
                        const NoiseSchedule& schedule, double lr);

struct ActionChunk {
  int history = 0;
  int horizon = 0;
  std::vector<double> actions;  // horizon x 6 row-major

  const double* row(int i) const { return actions.data() + i * 6; }
};

// DDPM ancestral sampling from unit noise, T reverse steps, deterministic
// given the seed. Pose deltas clamped to [-1, 1] cm/deg, i/u to [0, 1].
ActionChunk sample_chunk(const PolicyParams& params,
                         const std::vector<ObservationBundle>& history,
                         const NoiseSchedule& schedule, std::uint64_t seed);

// Central-difference audit of every parameter (h = 1e-5). The scale knob
// multiplies the analytic attention gradients — a fault-injection hook for
// the negative-control test; 1.0 means honest gradients.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::map<std::string, double> per_block;
};
GradCheckReport grad_check(PolicyParams& params, const std::vector<Sample>& batch,
                           const NoiseSchedule& schedule,
                           double attention_backward_scale = 1.0,
                           double fd_step = 1e-5);

// Little-endian float64 image of every block in declaration order, plus a
// JSON sidecar (prefix.json) carrying the config and the layer table.
void save_params(const PolicyParams& params, const std::string& path_prefix);
PolicyParams load_params(const std::string& path_prefix);

// ---- Observations -------------------------------------------------------

// Top-down orthographic grayscale of the board: clear/obstacle/marker at
// the camera palette levels, normalized to [0, 1].
std::vector<double> render_workspace(const scene::Scene& scene, int img_px);

// Assemble a bundle from a prerendered workspace image, a fisheye frame
// (central crop + annulus unwrap resampled to img_px), and the state vector.
ObservationBundle bundle_observation(const std::vector<double>& workspace_img,
                                     const sensor::Frame& frame,
                                     const std::array<double, 8>& state_vec,
                                     int img_px);

// ---- Demonstrations -----------------------------------------------------

struct DemoEpisode {
  scene::Scene scene;
  std::vector<controller::TrajectoryRecord> records;
};

// Inclined-transport scene family: seeded obstacle boards on a slope with
// the target vicinity cleared so the scripted controller succeeds quickly.
struct DemoSpec {
  int count = 50;
  std::uint64_t seed = 101;
  double coverage = 0.18;
  double incline_min_deg = 5.0;
  double incline_max_deg = 15.0;
  double clear_radius_cm = 3.5;
  double width_cm = 20.0;
  double height_cm = 20.0;
};

scene::Scene demo_scene(const DemoSpec& spec, int index);

// Scripted demonstrations: runs the grasp controller over loopback on each
// demo scene; episodes that fail are skipped and replaced (fresh seeds).
std::vector<DemoEpisode> collect_demos(const DemoSpec& spec,
                                       const scene::CupFootprint& cup = {},
                                       const controller::Params& cparams = {});

void save_demos(const std::string& dir, const std::vector<DemoEpisode>& demos);
std::vector<DemoEpisode> load_demos(const std::string& dir);

// Windows of (H_o observations, H_p-step chunk) over the densified demo
// trajectories: moves longer than 1 cm/deg are split into unit sub-steps so
// every chunk entry respects the action clamp; observations re-rendered at
// the recorded poses.
struct Dataset {
  int history = 0;
  int horizon = 0;
  std::vector<ObservationBundle> bundles;
  std::vector<std::vector<int>> windows;    // bundle indices, oldest first
  std::vector<std::vector<double>> chunks;  // horizon x 6 each

  std::size_t size() const { return windows.size(); }
  Sample sample(std::size_t i) const;
};
Dataset build_dataset(const std::vector<DemoEpisode>& demos, const PolicyConfig& cfg,
                      const scene::CupFootprint& cup = {});

// ---- Training & evaluation ----------------------------------------------

struct TrainOpts {
  int epochs = 120;
  int batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 7;
};
struct TrainReport {
  std::vector<double> epoch_loss;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};
TrainReport train_policy(PolicyParams& params, const Dataset& data,
                         const NoiseSchedule& schedule, const TrainOpts& opts);

// Closed-loop rollout against an in-process emulator: sample a chunk,
// execute half of it, resample. Success means releasing the object at the
// place target after a verified attach, without dropping it on the way.
struct RolloutResult {
  bool success = false;
  int actions_executed = 0;
  std::string note;
};
RolloutResult policy_rollout(const scene::Scene& scene, const PolicyParams& params,
                             const NoiseSchedule& schedule,
                             const scene::CupFootprint& cup, std::uint64_t seed,
                             int max_actions = 120);

}  // namespace flexicup::policy

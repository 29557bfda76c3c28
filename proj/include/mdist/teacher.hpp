#pragma once

#include <optional>
#include <vector>

#include "mdist/checkpoint.hpp"
#include "mdist/envs.hpp"
#include "mdist/netcore.hpp"

namespace mdist {

using Flags = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Advantage estimation
// ---------------------------------------------------------------------------

struct GaeOutput {
  Vec advantages;
  Vec returns;  // advantages + values
};

/// TD residuals delta_t = r_t + gamma V(s_{t+1})(1 - done_t) - V(s_t), folded
/// backwards as A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}.
/// `values` has T + 1 entries; the last is the bootstrap V(s_T).
GaeOutput compute_gae(const Vec& rewards, const Vec& values, const Flags& dones, double gamma, double lambda);

/// Mean, std-normalized copy (std guarded at 1e-8).
Vec normalize_advantages(const Vec& adv);

// ---------------------------------------------------------------------------
// Clipped surrogate shared by the teacher update and the student objective.
// ---------------------------------------------------------------------------

struct ClipResult {
  double surrogate = 0.0;      // mean of min(r A, clip(r) A); to be maximized
  double clip_fraction = 0.0;  // share of samples with |r - 1| > eps
  Vec d_logp;                  // d surrogate / d log pi_new per sample
};

ClipResult clipped_surrogate(const Vec& logp_new, const Vec& logp_old, const Vec& adv, double eps);

// ---------------------------------------------------------------------------
// Teacher networks
// ---------------------------------------------------------------------------

struct TeacherConfig {
  int hidden_dim = 256;
  int hidden_layers = 2;
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  double lr = 3e-4;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double value_scale = 1.0;
  int epochs = 4;
  int minibatches = 4;
  int episodes_per_iter = 16;
  int iterations = 200;
  int eval_every = 10;
  int eval_episodes = 20;

  bool operator==(const TeacherConfig&) const = default;
};

/// Shared-parameter actor (observation + agent one-hot) and a centralized
/// critic on the joint state.
struct TeacherNets {
  Network actor;
  Network critic;
  ParamStore actor_params;
  ParamStore critic_params;
  int n_agents = 0;
  double value_scale = 1.0;  // critic output times this is a return in env units

  int obs_dim() const { return actor.spec().input_dim - n_agents; }
  /// Appends the agent one-hot.
  Vec actor_input(const Vec& obs, int agent) const;
  double value(const Vec& state) const;
};

TeacherNets make_teacher(const Environment& env, const TeacherConfig& cfg, Rng& rng);
Checkpoint teacher_checkpoint(const TeacherNets& nets, std::uint64_t seed, const std::string& metadata);
TeacherNets teacher_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// One episode collected with the stochastic teacher.
struct Trajectory {
  int n_agents = 0;
  std::vector<Vec> states;       // s_t
  std::vector<Vec> next_states;  // s_{t+1}
  std::vector<std::vector<Vec>> obs;  // [t][agent] full observations
  std::vector<std::vector<int>> actions;
  std::vector<std::vector<double>> log_probs;
  std::vector<std::vector<std::uint8_t>> active;
  Vec values;                    // V_T(s_t), recorded at collection
  double bootstrap_value = 0.0;  // V_T(s_T) when truncated, else 0
  Vec rewards;
  Flags dones;
  std::optional<bool> win;

  int length() const { return static_cast<int>(rewards.size()); }
  double episode_return() const { return rewards.sum(); }
};

/// Runs `n_episodes` episodes in lockstep, sampling every active agent's
/// action from the teacher policy and recording V_T(s).
std::vector<Trajectory> collect_rollouts(const Environment& env_proto, const TeacherNets& teacher, int n_episodes,
                                         Rng& rng);

struct UpdateMetrics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};

UpdateMetrics mappo_update(TeacherNets& teacher, const std::vector<Trajectory>& batch, const TeacherConfig& cfg,
                           Rng& rng);

struct TeacherIteration {
  int iteration = 0;
  double return_mean = 0.0;
  double return_std = 0.0;
  double eval_return = 0.0;
  double win_rate = 0.0;
  UpdateMetrics update;
};

struct TeacherTraining {
  TeacherNets nets;
  std::vector<TeacherIteration> history;
};

/// Full Stage-1 loop. Throws kDivergence when returns or losses go non-finite.
TeacherTraining train_teacher(const EnvConfig& env_cfg, const TeacherConfig& cfg, std::uint64_t seed);

}  // namespace mdist

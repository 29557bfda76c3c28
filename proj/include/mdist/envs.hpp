#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdist/common.hpp"

namespace mdist {

using Vec2 = Eigen::Vector2d;

/// Observation feature blocks: own (O), ally (A), enemy (E), landmark (L).
enum class Block { kOwn, kAlly, kEnemy, kLandmark };

std::string_view to_string(Block b);
Block block_from_string(std::string_view s);

struct FeatureBlock {
  Block kind;
  int offset;
  int length;
};
using BlockLayout = std::vector<FeatureBlock>;

/// What every agent sees after a reset or step. The reward is one shared scalar.
struct StepOutcome {
  std::vector<Vec> observations;  // full per-agent observations o_T
  Vec state;                      // joint state s
  double reward = 0.0;
  bool done = false;
  std::optional<bool> win;
  int invalid_actions = 0;  // attacks that were resolved as no-ops
};

// ---------------------------------------------------------------------------
// Cooperative navigation ("spread")
//
// Observation of agent i (length 4 + 2n + 2(n-1)):
//   [pos.x, pos.y, vel.x, vel.y | landmark_k - pos for k in 0..n-1 |
//    pos_j - pos for j != i in index order]
// State: [pos, vel for each agent | landmark positions | t / horizon]
// Actions: 0 noop, 1 +x, 2 -x, 3 +y, 4 -y.
// ---------------------------------------------------------------------------

struct SpreadConfig {
  int n_agents = 3;
  int horizon = 25;
  double accel = 0.5;
  double damping = 0.85;
  double dt = 0.2;
};

struct SpreadState {
  std::vector<Vec2> pos, vel, landmarks;
  int timestep = 0;
};

inline constexpr int kSpreadActions = 5;

std::pair<StepOutcome, SpreadState> spread_reset(const SpreadConfig& cfg, std::uint64_t seed);
std::pair<StepOutcome, SpreadState> spread_step(const SpreadConfig& cfg, const SpreadState& state,
                                                std::span<const int> actions);
/// Observations, joint state and the distance reward for a state (no dynamics).
StepOutcome spread_observe(const SpreadConfig& cfg, const SpreadState& state);
double spread_reward(const SpreadState& state);
BlockLayout spread_layout(const SpreadConfig& cfg);

// ---------------------------------------------------------------------------
// Combat micromanagement ("skirmish")
//
// Observation of ally i (length 3 + 3(na-1) + 4 ne), all zero when dead:
//   [pos.x, pos.y, hp/max_hp | per other ally: dx, dy, hp/max_hp |
//    per enemy: dx, dy, hp/max_hp, in_range]
// Dead units contribute zeros to their slots.
// State: [per ally: x, y, hp/max_hp | per enemy: x, y, hp/max_hp | t / horizon]
// Actions: 0 noop, 1 +x, 2 -x, 3 +y, 4 -y, 5 + j attack enemy j.
// ---------------------------------------------------------------------------

struct SkirmishConfig {
  int n_allies = 3;
  int n_enemies = 3;
  int horizon = 60;
  double max_hp = 10.0;
  double attack_range = 0.4;
  double damage = 1.0;
  double move_step = 0.15;
  int attack_cooldown = 0;  // steps a unit waits after attacking
  double win_bonus = 10.0;
  double kill_bonus = 2.0;
  double reward_max = 20.0;
};

struct Unit {
  Vec2 pos = Vec2::Zero();
  double hp = 0.0;
  int cooldown = 0;
  bool alive() const { return hp > 0.0; }
};

struct SkirmishState {
  std::vector<Unit> allies, enemies;
  int timestep = 0;
};

std::pair<StepOutcome, SkirmishState> skirmish_reset(const SkirmishConfig& cfg, std::uint64_t seed);
std::pair<StepOutcome, SkirmishState> skirmish_step(const SkirmishConfig& cfg, const SkirmishState& state,
                                                    std::span<const int> actions);
StepOutcome skirmish_observe(const SkirmishConfig& cfg, const SkirmishState& state);
BlockLayout skirmish_layout(const SkirmishConfig& cfg);
/// Multiplier that makes a won episode total exactly reward_max.
double skirmish_reward_scale(const SkirmishConfig& cfg);

// ---------------------------------------------------------------------------
// Observation masking
// ---------------------------------------------------------------------------

/// Visible feature blocks for one agent. With `subset` set, a random count in
/// [min_keep, max_keep] of the features inside those blocks (all blocks when
/// `blocks` is empty) stays visible, resampled once per episode.
struct AgentMask {
  std::vector<Block> blocks;
  std::optional<std::pair<int, int>> subset;

  bool operator==(const AgentMask&) const = default;
};

struct MaskSpec {
  std::vector<AgentMask> agents;

  /// Full observation for every agent.
  static MaskSpec full(int n_agents);
  void validate(const BlockLayout& layout, int n_agents) const;
  bool operator==(const MaskSpec&) const = default;
};

/// 0/1 visibility vector for one episode.
Vec sample_visibility(const AgentMask& mask, const BlockLayout& layout, Rng& episode_rng);
/// Number of features a student can see at most (its compact input width).
int max_visible(const AgentMask& mask, const BlockLayout& layout);

Vec apply_mask(const Vec& o_full, const Vec& visibility);
Vec apply_mask(const Vec& o_full, const AgentMask& mask, const BlockLayout& layout, Rng& episode_rng);

/// Per-agent visibility drawn once at episode start.
class EpisodeMask {
 public:
  EpisodeMask() = default;
  EpisodeMask(const MaskSpec& spec, const BlockLayout& layout, Rng& episode_rng);
  Vec apply(int agent, const Vec& o_full) const { return apply_mask(o_full, visibility_.at(agent)); }
  const Vec& visibility(int agent) const { return visibility_.at(agent); }

 private:
  std::vector<Vec> visibility_;
};

// ---------------------------------------------------------------------------
// Polymorphic wrapper used by the trainers.
// ---------------------------------------------------------------------------

struct EnvConfig {
  std::string name = "spread";  // "spread" | "skirmish"
  SpreadConfig spread;
  SkirmishConfig skirmish;
  MaskSpec masks;  // empty = full observation
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual StepOutcome reset(std::uint64_t seed) = 0;
  virtual StepOutcome step(std::span<const int> actions) = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;

  virtual std::string name() const = 0;
  virtual int n_agents() const = 0;
  virtual int obs_dim() const = 0;
  virtual int state_dim() const = 0;
  virtual int num_actions() const = 0;
  virtual int horizon() const = 0;
  virtual BlockLayout layout() const = 0;
  /// Agents whose actions matter this step (living units).
  virtual std::vector<bool> active() const = 0;
};

std::unique_ptr<Environment> make_env(const EnvConfig& cfg);

}  // namespace mdist

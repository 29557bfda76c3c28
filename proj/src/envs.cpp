#include "mdist/envs.hpp"

#include <algorithm>
#include <limits>

namespace mdist {

std::string_view to_string(Block b) {
  switch (b) {
    case Block::kOwn: return "own";
    case Block::kAlly: return "ally";
    case Block::kEnemy: return "enemy";
    case Block::kLandmark: return "landmark";
  }
  return "?";
}

Block block_from_string(std::string_view s) {
  if (s == "own" || s == "O") return Block::kOwn;
  if (s == "ally" || s == "A") return Block::kAlly;
  if (s == "enemy" || s == "E") return Block::kEnemy;
  if (s == "landmark" || s == "L") return Block::kLandmark;
  throw Error(ErrorCode::kConfig, "unknown feature block '" + std::string(s) + "'");
}

namespace {

Vec2 direction(int action) {
  switch (action) {
    case 1: return {1.0, 0.0};
    case 2: return {-1.0, 0.0};
    case 3: return {0.0, 1.0};
    case 4: return {0.0, -1.0};
    default: return Vec2::Zero();
  }
}

Vec2 clamp_arena(const Vec2& p) { return p.cwiseMax(-1.0).cwiseMin(1.0); }

Vec2 random_point(Rng& rng, double x0, double x1, double y0, double y1) {
  const double x = uniform(rng, x0, x1);
  const double y = uniform(rng, y0, y1);
  return {x, y};
}

}  // namespace

// ---------------------------------------------------------------------------
// spread
// ---------------------------------------------------------------------------

BlockLayout spread_layout(const SpreadConfig& cfg) {
  const int n = cfg.n_agents;
  return {{Block::kOwn, 0, 4}, {Block::kLandmark, 4, 2 * n}, {Block::kAlly, 4 + 2 * n, 2 * (n - 1)}};
}

double spread_reward(const SpreadState& s) {
  double total = 0.0;
  for (const Vec2& lm : s.landmarks) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec2& p : s.pos) best = std::min(best, (p - lm).norm());
    total += best;
  }
  return -total;
}

StepOutcome spread_observe(const SpreadConfig& cfg, const SpreadState& s) {
  const int n = cfg.n_agents;
  StepOutcome out;
  const int obs_len = 4 + 2 * n + 2 * (n - 1);
  for (int i = 0; i < n; ++i) {
    Vec o(obs_len);
    o.segment<2>(0) = s.pos[i];
    o.segment<2>(2) = s.vel[i];
    for (int k = 0; k < n; ++k) o.segment<2>(4 + 2 * k) = s.landmarks[k] - s.pos[i];
    int slot = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      o.segment<2>(4 + 2 * n + 2 * slot++) = s.pos[j] - s.pos[i];
    }
    out.observations.push_back(std::move(o));
  }
  out.state.resize(6 * n + 1);
  for (int i = 0; i < n; ++i) {
    out.state.segment<2>(4 * i) = s.pos[i];
    out.state.segment<2>(4 * i + 2) = s.vel[i];
  }
  for (int k = 0; k < n; ++k) out.state.segment<2>(4 * n + 2 * k) = s.landmarks[k];
  out.state[6 * n] = static_cast<double>(s.timestep) / cfg.horizon;
  out.reward = spread_reward(s);
  out.done = s.timestep >= cfg.horizon;
  return out;
}

std::pair<StepOutcome, SpreadState> spread_reset(const SpreadConfig& cfg, std::uint64_t seed) {
  if (cfg.n_agents < 2) throw Error(ErrorCode::kInvalidArgument, "spread needs at least 2 agents");
  Rng rng(seed);
  SpreadState s;
  for (int i = 0; i < cfg.n_agents; ++i) {
    s.pos.push_back(random_point(rng, -1, 1, -1, 1));
    s.vel.push_back(Vec2::Zero());
  }
  for (int k = 0; k < cfg.n_agents; ++k) s.landmarks.push_back(random_point(rng, -1, 1, -1, 1));
  StepOutcome out = spread_observe(cfg, s);
  out.reward = 0.0;
  return {std::move(out), std::move(s)};
}

std::pair<StepOutcome, SpreadState> spread_step(const SpreadConfig& cfg, const SpreadState& state,
                                                std::span<const int> actions) {
  check_dim("spread action vector", cfg.n_agents, static_cast<Eigen::Index>(actions.size()));
  SpreadState s = state;
  for (int i = 0; i < cfg.n_agents; ++i) {
    const int a = actions[i];
    if (a < 0 || a >= kSpreadActions)
      throw Error(ErrorCode::kInvalidArgument, "invalid spread action " + std::to_string(a));
    s.vel[i] = cfg.damping * s.vel[i] + cfg.accel * cfg.dt * direction(a);
    s.pos[i] = clamp_arena(s.pos[i] + cfg.dt * s.vel[i]);
  }
  s.timestep += 1;
  StepOutcome out = spread_observe(cfg, s);
  return {std::move(out), std::move(s)};
}

// ---------------------------------------------------------------------------
// skirmish
// ---------------------------------------------------------------------------

BlockLayout skirmish_layout(const SkirmishConfig& cfg) {
  const int ally_len = 3 * (cfg.n_allies - 1);
  BlockLayout layout{{Block::kOwn, 0, 3}};
  if (ally_len > 0) layout.push_back({Block::kAlly, 3, ally_len});
  layout.push_back({Block::kEnemy, 3 + ally_len, 4 * cfg.n_enemies});
  return layout;
}

double skirmish_reward_scale(const SkirmishConfig& cfg) {
  const double raw_max = cfg.n_enemies * cfg.max_hp + cfg.kill_bonus * cfg.n_enemies + cfg.win_bonus;
  return cfg.reward_max / raw_max;
}

StepOutcome skirmish_observe(const SkirmishConfig& cfg, const SkirmishState& s) {
  const int na = cfg.n_allies, ne = cfg.n_enemies;
  const int obs_len = 3 + 3 * (na - 1) + 4 * ne;
  StepOutcome out;
  for (int i = 0; i < na; ++i) {
    Vec o = Vec::Zero(obs_len);
    const Unit& me = s.allies[i];
    if (me.alive()) {
      o.segment<2>(0) = me.pos;
      o[2] = me.hp / cfg.max_hp;
      int slot = 0;
      for (int j = 0; j < na; ++j) {
        if (j == i) continue;
        const Unit& u = s.allies[j];
        if (u.alive()) {
          o.segment<2>(3 + 3 * slot) = u.pos - me.pos;
          o[3 + 3 * slot + 2] = u.hp / cfg.max_hp;
        }
        ++slot;
      }
      const int base = 3 + 3 * (na - 1);
      for (int j = 0; j < ne; ++j) {
        const Unit& u = s.enemies[j];
        if (!u.alive()) continue;
        const Vec2 d = u.pos - me.pos;
        o.segment<2>(base + 4 * j) = d;
        o[base + 4 * j + 2] = u.hp / cfg.max_hp;
        o[base + 4 * j + 3] = d.norm() <= cfg.attack_range ? 1.0 : 0.0;
      }
    }
    out.observations.push_back(std::move(o));
  }
  out.state.resize(3 * (na + ne) + 1);
  for (int i = 0; i < na; ++i) {
    out.state.segment<2>(3 * i) = s.allies[i].pos;
    out.state[3 * i + 2] = s.allies[i].hp / cfg.max_hp;
  }
  for (int j = 0; j < ne; ++j) {
    out.state.segment<2>(3 * (na + j)) = s.enemies[j].pos;
    out.state[3 * (na + j) + 2] = s.enemies[j].hp / cfg.max_hp;
  }
  out.state[3 * (na + ne)] = static_cast<double>(s.timestep) / cfg.horizon;
  const bool allies_dead = std::none_of(s.allies.begin(), s.allies.end(), [](const Unit& u) { return u.alive(); });
  const bool enemies_dead = std::none_of(s.enemies.begin(), s.enemies.end(), [](const Unit& u) { return u.alive(); });
  out.done = allies_dead || enemies_dead || s.timestep >= cfg.horizon;
  if (out.done) out.win = enemies_dead;
  return out;
}

std::pair<StepOutcome, SkirmishState> skirmish_reset(const SkirmishConfig& cfg, std::uint64_t seed) {
  if (cfg.n_allies < 1 || cfg.n_enemies < 1)
    throw Error(ErrorCode::kInvalidArgument, "skirmish team sizes must be positive");
  Rng rng(seed);
  SkirmishState s;
  for (int i = 0; i < cfg.n_allies; ++i) s.allies.push_back({random_point(rng, -0.9, -0.6, -0.5, 0.5), cfg.max_hp, 0});
  for (int j = 0; j < cfg.n_enemies; ++j) s.enemies.push_back({random_point(rng, 0.6, 0.9, -0.5, 0.5), cfg.max_hp, 0});
  StepOutcome out = skirmish_observe(cfg, s);
  return {std::move(out), std::move(s)};
}

std::pair<StepOutcome, SkirmishState> skirmish_step(const SkirmishConfig& cfg, const SkirmishState& state,
                                                    std::span<const int> actions) {
  const int na = cfg.n_allies, ne = cfg.n_enemies;
  check_dim("skirmish action vector", na, static_cast<Eigen::Index>(actions.size()));
  for (int a : actions)
    if (a < 0 || a >= 5 + ne) throw Error(ErrorCode::kInvalidArgument, "invalid skirmish action " + std::to_string(a));

  SkirmishState s = state;
  std::vector<double> dmg_enemy(ne, 0.0), dmg_ally(na, 0.0);
  std::vector<Vec2> ally_move(na, Vec2::Zero()), enemy_move(ne, Vec2::Zero());
  std::vector<bool> ally_attacked(na, false), enemy_attacked(ne, false);
  int invalid = 0;

  // Decisions are made on the pre-step snapshot and resolved simultaneously.
  for (int i = 0; i < na; ++i) {
    const Unit& me = state.allies[i];
    if (!me.alive()) continue;
    const int a = actions[i];
    if (a >= 5) {
      const int j = a - 5;
      const Unit& target = state.enemies[j];
      if (target.alive() && me.cooldown == 0 && (target.pos - me.pos).norm() <= cfg.attack_range) {
        dmg_enemy[j] += cfg.damage;
        ally_attacked[i] = true;
      } else {
        ++invalid;
      }
    } else {
      ally_move[i] = cfg.move_step * direction(a);
    }
  }
  for (int j = 0; j < ne; ++j) {
    const Unit& me = state.enemies[j];
    if (!me.alive()) continue;
    int target = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < na; ++i) {
      if (!state.allies[i].alive()) continue;
      const double d = (state.allies[i].pos - me.pos).norm();
      if (d < best) {
        best = d;
        target = i;
      }
    }
    if (target < 0) continue;
    if (best <= cfg.attack_range) {
      if (me.cooldown == 0) {
        dmg_ally[target] += cfg.damage;
        enemy_attacked[j] = true;
      }
    } else {
      const Vec2 d = state.allies[target].pos - me.pos;
      enemy_move[j] = d / best * std::min(cfg.move_step, best);
    }
  }

  double dealt = 0.0;
  int kills = 0;
  for (int j = 0; j < ne; ++j) {
    Unit& u = s.enemies[j];
    if (!u.alive()) continue;
    const double d = std::min(u.hp, dmg_enemy[j]);
    dealt += d;
    u.hp -= d;
    if (!u.alive()) {
      u.hp = 0.0;
      ++kills;
    }
  }
  for (int i = 0; i < na; ++i) {
    Unit& u = s.allies[i];
    if (!u.alive()) continue;
    u.hp = std::max(0.0, u.hp - dmg_ally[i]);
  }
  auto settle = [&cfg](Unit& u, bool attacked, const Vec2& move) {
    if (attacked) {
      u.cooldown = cfg.attack_cooldown;
    } else if (u.cooldown > 0) {
      --u.cooldown;
    }
    if (u.alive()) u.pos = clamp_arena(u.pos + move);
  };
  for (int i = 0; i < na; ++i) settle(s.allies[i], ally_attacked[i], ally_move[i]);
  for (int j = 0; j < ne; ++j) settle(s.enemies[j], enemy_attacked[j], enemy_move[j]);
  s.timestep += 1;

  StepOutcome out = skirmish_observe(cfg, s);
  const bool won = out.win.value_or(false);
  out.reward = skirmish_reward_scale(cfg) * (dealt + cfg.kill_bonus * kills + (won ? cfg.win_bonus : 0.0));
  out.invalid_actions = invalid;
  return {std::move(out), std::move(s)};
}

// ---------------------------------------------------------------------------
// masking
// ---------------------------------------------------------------------------

MaskSpec MaskSpec::full(int n_agents) {
  MaskSpec m;
  m.agents.assign(n_agents, AgentMask{{Block::kOwn, Block::kAlly, Block::kEnemy, Block::kLandmark}, std::nullopt});
  return m;
}

namespace {

const FeatureBlock* find_block(const BlockLayout& layout, Block kind) {
  for (const auto& b : layout)
    if (b.kind == kind) return &b;
  return nullptr;
}

// Candidate feature indices for a mask; full-observation masks may name
// blocks an env lacks (MaskSpec::full lists all four).
std::vector<int> candidate_indices(const AgentMask& mask, const BlockLayout& layout, bool strict) {
  std::vector<int> idx;
  if (mask.blocks.empty()) {
    for (const auto& b : layout)
      for (int k = 0; k < b.length; ++k) idx.push_back(b.offset + k);
  } else {
    for (Block kind : mask.blocks) {
      const FeatureBlock* b = find_block(layout, kind);
      if (!b) {
        if (strict) throw Error(ErrorCode::kInvalidArgument, "mask references missing block '" + std::string(to_string(kind)) + "'");
        continue;
      }
      for (int k = 0; k < b->length; ++k) idx.push_back(b->offset + k);
    }
  }
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

bool is_full_listing(const AgentMask& mask) { return mask.blocks.size() == 4 && !mask.subset; }

int layout_width(const BlockLayout& layout) {
  int w = 0;
  for (const auto& b : layout) w = std::max(w, b.offset + b.length);
  return w;
}

}  // namespace

void MaskSpec::validate(const BlockLayout& layout, int n_agents) const {
  if (static_cast<int>(agents.size()) != n_agents)
    throw Error(ErrorCode::kInvalidArgument, "mask table covers " + std::to_string(agents.size()) + " agents, env has " +
                                                  std::to_string(n_agents));
  for (const auto& m : agents) {
    const auto idx = candidate_indices(m, layout, !is_full_listing(m));
    if (m.subset) {
      const auto [lo, hi] = *m.subset;
      if (lo < 1 || hi < lo || hi > static_cast<int>(idx.size()))
        throw Error(ErrorCode::kInvalidArgument, "subset range must satisfy 1 <= min <= max <= visible features");
    } else if (idx.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "mask leaves an agent with no visible features");
    }
  }
}

Vec sample_visibility(const AgentMask& mask, const BlockLayout& layout, Rng& episode_rng) {
  auto idx = candidate_indices(mask, layout, !is_full_listing(mask));
  Vec vis = Vec::Zero(layout_width(layout));
  if (mask.subset) {
    const int keep = uniform_int(episode_rng, mask.subset->first, mask.subset->second);
    for (int k = 0; k < keep; ++k) {
      const int pick = uniform_int(episode_rng, k, static_cast<int>(idx.size()) - 1);
      std::swap(idx[k], idx[pick]);
    }
    idx.resize(keep);
  }
  for (int i : idx) vis[i] = 1.0;
  return vis;
}

int max_visible(const AgentMask& mask, const BlockLayout& layout) {
  if (mask.subset) return mask.subset->second;
  return static_cast<int>(candidate_indices(mask, layout, !is_full_listing(mask)).size());
}

Vec apply_mask(const Vec& o_full, const Vec& visibility) {
  check_dim("observation length vs mask", visibility.size(), o_full.size());
  // Select rather than multiply so masked entries are exactly +0.0.
  Vec out(o_full.size());
  for (Eigen::Index i = 0; i < o_full.size(); ++i) out[i] = visibility[i] != 0.0 ? o_full[i] : 0.0;
  return out;
}

Vec apply_mask(const Vec& o_full, const AgentMask& mask, const BlockLayout& layout, Rng& episode_rng) {
  return apply_mask(o_full, sample_visibility(mask, layout, episode_rng));
}

EpisodeMask::EpisodeMask(const MaskSpec& spec, const BlockLayout& layout, Rng& episode_rng) {
  for (const auto& m : spec.agents) visibility_.push_back(sample_visibility(m, layout, episode_rng));
}

// ---------------------------------------------------------------------------
// Environment wrappers
// ---------------------------------------------------------------------------

namespace {

class SpreadEnv final : public Environment {
 public:
  explicit SpreadEnv(SpreadConfig cfg) : cfg_(cfg) {}
  StepOutcome reset(std::uint64_t seed) override {
    auto [out, s] = spread_reset(cfg_, seed);
    state_ = std::move(s);
    return out;
  }
  StepOutcome step(std::span<const int> actions) override {
    auto [out, s] = spread_step(cfg_, state_, actions);
    state_ = std::move(s);
    return out;
  }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<SpreadEnv>(*this); }
  std::string name() const override { return "spread"; }
  int n_agents() const override { return cfg_.n_agents; }
  int obs_dim() const override { return 4 + 2 * cfg_.n_agents + 2 * (cfg_.n_agents - 1); }
  int state_dim() const override { return 6 * cfg_.n_agents + 1; }
  int num_actions() const override { return kSpreadActions; }
  int horizon() const override { return cfg_.horizon; }
  BlockLayout layout() const override { return spread_layout(cfg_); }
  std::vector<bool> active() const override { return std::vector<bool>(cfg_.n_agents, true); }

 private:
  SpreadConfig cfg_;
  SpreadState state_;
};

class SkirmishEnv final : public Environment {
 public:
  explicit SkirmishEnv(SkirmishConfig cfg) : cfg_(cfg) {}
  StepOutcome reset(std::uint64_t seed) override {
    auto [out, s] = skirmish_reset(cfg_, seed);
    state_ = std::move(s);
    return out;
  }
  StepOutcome step(std::span<const int> actions) override {
    auto [out, s] = skirmish_step(cfg_, state_, actions);
    state_ = std::move(s);
    return out;
  }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<SkirmishEnv>(*this); }
  std::string name() const override { return "skirmish"; }
  int n_agents() const override { return cfg_.n_allies; }
  int obs_dim() const override { return 3 + 3 * (cfg_.n_allies - 1) + 4 * cfg_.n_enemies; }
  int state_dim() const override { return 3 * (cfg_.n_allies + cfg_.n_enemies) + 1; }
  int num_actions() const override { return 5 + cfg_.n_enemies; }
  int horizon() const override { return cfg_.horizon; }
  BlockLayout layout() const override { return skirmish_layout(cfg_); }
  std::vector<bool> active() const override {
    std::vector<bool> a;
    for (const auto& u : state_.allies) a.push_back(u.alive());
    return a;
  }

 private:
  SkirmishConfig cfg_;
  SkirmishState state_;
};

}  // namespace

std::unique_ptr<Environment> make_env(const EnvConfig& cfg) {
  std::unique_ptr<Environment> env;
  if (cfg.name == "spread") {
    if (cfg.spread.n_agents < 2) throw Error(ErrorCode::kConfig, "spread needs at least 2 agents");
    env = std::make_unique<SpreadEnv>(cfg.spread);
  } else if (cfg.name == "skirmish") {
    if (cfg.skirmish.n_allies < 1 || cfg.skirmish.n_enemies < 1)
      throw Error(ErrorCode::kConfig, "skirmish team sizes must be positive");
    env = std::make_unique<SkirmishEnv>(cfg.skirmish);
  } else {
    throw Error(ErrorCode::kConfig, "unknown env '" + cfg.name + "'");
  }
  if (!cfg.masks.agents.empty()) cfg.masks.validate(env->layout(), env->n_agents());
  return env;
}

}  // namespace mdist

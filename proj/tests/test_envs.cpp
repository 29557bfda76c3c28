#include <array>
#include <functional>
#include <set>

#include "doctest.h"
#include "mdist/envs.hpp"

using namespace mdist;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kCorrupt;  // sentinel: nothing thrown
}

}  // namespace

TEST_CASE("spread reset layout and determinism") {
  const SpreadConfig cfg;
  const auto [o, s] = spread_reset(cfg, 11);
  REQUIRE(o.observations.size() == 3);
  for (const Vec& obs : o.observations) CHECK(obs.size() == 14);
  CHECK(o.state.size() == 19);
  CHECK(s.landmarks.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(s.vel[i].isZero());
    CHECK(s.pos[i].cwiseAbs().maxCoeff() <= 1.0);
    CHECK(s.landmarks[i].cwiseAbs().maxCoeff() <= 1.0);
    CHECK(o.observations[i].segment<2>(4 + 2 * i) == s.landmarks[i] - s.pos[i]);
  }
  const auto [o2, s2] = spread_reset(cfg, 11);
  CHECK(o2.state == o.state);
  CHECK(spread_reset(cfg, 12).first.state != o.state);
  CHECK(code_of([] { spread_reset({.n_agents = 1}, 0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("spread hand-computed reward") {
  SpreadState s;
  s.pos = {{0, 0}, {-0.9, -0.9}, {0.9, -0.9}};
  s.vel.assign(3, Vec2::Zero());
  s.landmarks = {{0, 1}, {-0.9, -0.9}, {0.9, -0.9}};
  CHECK(spread_reward(s) == doctest::Approx(-1.0).epsilon(1e-15));
  s.pos[0] = {0, 1};
  CHECK(spread_reward(s) == 0.0);
}

TEST_CASE("spread reward is nonpositive along random rollouts") {
  const SpreadConfig cfg;
  Rng rng(1);
  auto [o, s] = spread_reset(cfg, 3);
  for (int t = 0; t < cfg.horizon; ++t) {
    std::array<int, 3> a{uniform_int(rng, 0, 4), uniform_int(rng, 0, 4), uniform_int(rng, 0, 4)};
    auto [o2, s2] = spread_step(cfg, s, a);
    CHECK(o2.reward <= 0.0);
    CHECK(o2.done == (t + 1 == cfg.horizon));
    s = s2;
  }
}

TEST_CASE("spread dynamics: acceleration, damping, clamping") {
  const SpreadConfig cfg;
  SpreadState s;
  s.pos = {{0, 0}, {0.99, 0}, {0, 0}};
  s.vel = {{0, 0}, {0.5, 0}, {0, 0.2}};
  s.landmarks.assign(3, Vec2::Zero());
  const std::array<int, 3> a{1, 1, 0};
  const auto [o, n] = spread_step(cfg, s, a);
  CHECK(n.vel[0].x() == doctest::Approx(cfg.accel * cfg.dt));
  CHECK(n.pos[0].x() == doctest::Approx(cfg.dt * cfg.accel * cfg.dt));
  CHECK(n.pos[1].x() == 1.0);
  CHECK(n.vel[2].y() == doctest::Approx(cfg.damping * 0.2));
  CHECK(n.timestep == 1);

  const std::array<int, 3> bad{0, 5, 0};
  CHECK(code_of([&] { spread_step(cfg, s, bad); }) == ErrorCode::kInvalidArgument);
  const std::array<int, 2> short_vec{0, 0};
  CHECK(code_of([&] { spread_step(cfg, s, short_vec); }) == ErrorCode::kDimensionMismatch);
}

TEST_CASE("episode traces are a pure function of seed and actions") {
  for (const char* name : {"spread", "skirmish"}) {
    EnvConfig cfg;
    cfg.name = name;
    auto a = make_env(cfg), b = make_env(cfg);
    StepOutcome oa = a->reset(99), ob = b->reset(99);
    Rng rng(5);
    std::vector<int> act(a->n_agents());
    while (!oa.done) {
      for (int& x : act) x = uniform_int(rng, 0, a->num_actions() - 1);
      oa = a->step(act);
      ob = b->step(act);
      CHECK(oa.state == ob.state);
      CHECK(oa.reward == ob.reward);
      CHECK(oa.done == ob.done);
    }
  }
}

TEST_CASE("skirmish reset layout") {
  const SkirmishConfig cfg;
  const auto [o, s] = skirmish_reset(cfg, 4);
  for (const Vec& obs : o.observations) CHECK(obs.size() == 21);
  for (const Unit& u : s.allies) {
    CHECK(u.hp == 10.0);
    CHECK(u.pos.x() < 0.0);
  }
  for (const Unit& u : s.enemies) {
    CHECK(u.hp == 10.0);
    CHECK(u.pos.x() > 0.0);
  }
  CHECK(skirmish_reset(cfg, 4).first.state == o.state);
  CHECK(code_of([] { skirmish_reset({.n_allies = 0}, 0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("skirmish out of range with all no-ops gives zero reward") {
  const SkirmishConfig cfg;
  auto [o, s] = skirmish_reset(cfg, 8);
  const std::array<int, 3> noop{0, 0, 0};
  const auto [o2, s2] = skirmish_step(cfg, s, noop);
  CHECK(o2.reward == 0.0);
  CHECK(s2.timestep == 1);
  for (int i = 0; i < 3; ++i) {
    CHECK(s2.allies[i].pos == s.allies[i].pos);
    CHECK(s2.allies[i].hp == s.allies[i].hp);
    CHECK(s2.enemies[i].hp == s.enemies[i].hp);
  }
}

TEST_CASE("skirmish lone enemy kill ends the episode with the win bonus") {
  const SkirmishConfig cfg{.n_allies = 1, .n_enemies = 1};
  SkirmishState s;
  s.allies = {{{0.0, 0.0}, 10.0, 0}};
  s.enemies = {{{0.3, 0.0}, 1.0, 0}};
  const std::array<int, 1> attack{5};
  const auto [o, n] = skirmish_step(cfg, s, attack);
  CHECK(o.done);
  REQUIRE(o.win.has_value());
  CHECK(*o.win);
  CHECK(o.reward == doctest::Approx(skirmish_reward_scale(cfg) * (1.0 + cfg.kill_bonus + cfg.win_bonus)));
  // Resolution is simultaneous, so the dying enemy still lands its hit.
  CHECK(n.allies[0].hp == 9.0);
}

TEST_CASE("skirmish attack out of range is a flagged no-op") {
  const SkirmishConfig cfg{.n_allies = 1, .n_enemies = 1};
  SkirmishState s;
  s.allies = {{{-0.5, 0.0}, 10.0, 0}};
  s.enemies = {{{0.5, 0.0}, 10.0, 0}};
  const std::array<int, 1> attack{5};
  const auto [o, n] = skirmish_step(cfg, s, attack);
  CHECK(o.invalid_actions == 1);
  CHECK(o.reward == 0.0);
  CHECK(n.enemies[0].hp == 10.0);
  CHECK(n.allies[0].pos == s.allies[0].pos);
  const std::array<int, 1> bad{6};
  CHECK(code_of([&] { skirmish_step(cfg, s, bad); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("skirmish return bound and hp conservation under random play") {
  EnvConfig cfg;
  cfg.name = "skirmish";
  auto env = make_env(cfg);
  Rng rng(2);
  std::vector<int> act(3);
  for (int ep = 0; ep < 200; ++ep) {
    StepOutcome o = env->reset(ep);
    double ret = 0.0;
    auto team_hp = [](const Vec& state, int first) {
      return state[first * 3 + 2] + state[first * 3 + 5] + state[first * 3 + 8];
    };
    double allies = team_hp(o.state, 0), enemies = team_hp(o.state, 3);
    while (!o.done) {
      // Aggressive random play: mostly move right or attack.
      for (int& a : act) a = uniform01(rng) < 0.5 ? 1 : uniform_int(rng, 0, 7);
      o = env->step(act);
      ret += o.reward;
      CHECK(team_hp(o.state, 0) <= allies);
      CHECK(team_hp(o.state, 3) <= enemies);
      allies = team_hp(o.state, 0);
      enemies = team_hp(o.state, 3);
    }
    CHECK(ret <= cfg.skirmish.reward_max + 1e-9);
  }
}

TEST_CASE("full mask is the identity") {
  const auto layout = skirmish_layout({});
  Rng rng(1);
  const Vec o = Vec::LinSpaced(21, 1.0, 21.0);
  const EpisodeMask m(MaskSpec::full(3), layout, rng);
  for (int i = 0; i < 3; ++i) CHECK(m.apply(i, o) == o);
}

TEST_CASE("enemy-only mask on 3v3 keeps exactly indices 9..20") {
  const auto layout = skirmish_layout({});
  Rng rng(1);
  const Vec o = Vec::LinSpaced(21, 1.0, 21.0);
  const Vec m = apply_mask(o, AgentMask{{Block::kEnemy}, std::nullopt}, layout, rng);
  CHECK(m.head(9).isZero());
  CHECK(m.tail(12) == o.tail(12));
  CHECK(max_visible(AgentMask{{Block::kEnemy}, std::nullopt}, layout) == 12);
}

TEST_CASE("random-subset mask keeps 8 to 10 features, fixed within an episode") {
  const auto layout = spread_layout({});
  const Vec o = Vec::LinSpaced(14, 1.0, 14.0);
  MaskSpec spec;
  spec.agents.assign(3, AgentMask{{}, std::make_pair(8, 10)});
  std::set<int> seen;
  for (std::uint64_t ep = 0; ep < 200; ++ep) {
    Rng rng(ep);
    const EpisodeMask m(spec, layout, rng);
    const Vec first = m.apply(0, o);
    const int kept = static_cast<int>((first.array() != 0.0).count());
    CHECK(kept >= 8);
    CHECK(kept <= 10);
    seen.insert(kept);
    CHECK(m.apply(0, 2.0 * o) == 2.0 * first);
  }
  CHECK(seen.size() == 3);
}

TEST_CASE("masking is idempotent") {
  const auto layout = spread_layout({});
  Rng rng(3);
  for (int k = 0; k < 50; ++k) {
    const Vec o = Vec::Random(14);
    const Vec vis = sample_visibility(AgentMask{{Block::kOwn, Block::kAlly}, std::make_pair(3, 6)}, layout, rng);
    CHECK(apply_mask(apply_mask(o, vis), vis) == apply_mask(o, vis));
  }
}

TEST_CASE("mask referencing a missing block is rejected") {
  const auto layout = skirmish_layout({});
  Rng rng(1);
  CHECK(code_of([&] { sample_visibility(AgentMask{{Block::kLandmark}, std::nullopt}, layout, rng); }) ==
        ErrorCode::kInvalidArgument);
  EnvConfig cfg;
  cfg.name = "skirmish";
  cfg.masks.agents.assign(3, AgentMask{{Block::kLandmark}, std::nullopt});
  CHECK(code_of([&] { make_env(cfg); }) == ErrorCode::kInvalidArgument);
  cfg.masks.agents.resize(2);
  CHECK(code_of([&] { make_env(cfg); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("block strings round trip") {
  for (Block b : {Block::kOwn, Block::kAlly, Block::kEnemy, Block::kLandmark})
    CHECK(block_from_string(to_string(b)) == b);
  CHECK(block_from_string("E") == Block::kEnemy);
  CHECK(code_of([] { block_from_string("x"); }) == ErrorCode::kConfig);
}

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mdist/resource.hpp"

using namespace mdist;

namespace {

std::int64_t run_episode_flops(Policy& policy, const Environment& proto, std::uint64_t seed, std::int64_t* steps) {
  auto env = proto.clone();
  Rng rng(seed);
  StepOutcome o = env->reset(seed);
  policy.begin_episode(rng);
  std::vector<int> actions(env->n_agents());
  const std::uint64_t before = flop_counter();
  *steps = 0;
  while (!o.done) {
    policy.act(o, env->active(), actions, true, rng);
    o = env->step(actions);
    ++*steps;
  }
  return static_cast<std::int64_t>(flop_counter() - before);
}

}  // namespace

TEST_CASE("parameter counts follow the stated conventions") {
  CHECK(affine_params(4, 3) == 15);
  const NetworkSpec gru{.input_dim = 14, .hidden_dim = 32, .hidden_layers = 1, .action_dim = 5, .recurrent = true};
  const auto cell = layer_costs(gru).front();
  CHECK(cell.name == "gru");
  CHECK(cell.params == 3 * ((14 + 32) * 32 + 32));
  CHECK(cell.params == 4512);
  CHECK(count_params(gru) == 4512 + affine_params(32, 5));

  const NetworkSpec teacher{.input_dim = 20, .hidden_dim = 256, .hidden_layers = 2, .action_dim = 5};
  const NetworkSpec student{.input_dim = 20, .hidden_dim = 32, .hidden_layers = 2, .action_dim = 5};
  CHECK(count_params(teacher) > 25 * count_params(student));

  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    NetworkSpec s;
    s.input_dim = uniform_int(rng, 1, 30);
    s.hidden_dim = uniform_int(rng, 1, 40);
    s.recurrent = uniform01(rng) < 0.5;
    s.hidden_layers = s.recurrent ? 1 : uniform_int(rng, 0, 3);
    s.action_dim = uniform_int(rng, 0, 9);
    s.has_value_head = uniform01(rng) < 0.3;
    if (s.action_dim == 0 && !s.has_value_head) s.action_dim = 1;
    CHECK(count_params(s) == Network(s).num_params());
    CHECK(count_params(s) > 0);
  }
}

TEST_CASE("forward FLOPs follow the stated conventions") {
  CHECK(affine_flops(14, 32) + affine_flops(32, 5) == 1216);
  const NetworkSpec ff{.input_dim = 14, .hidden_dim = 32, .hidden_layers = 1, .action_dim = 5};
  CHECK(flops_forward(ff) == 1216 + 4 * 32);
  const NetworkSpec gru{.input_dim = 14, .hidden_dim = 32, .hidden_layers = 1, .action_dim = 5, .recurrent = true};
  CHECK(flops_forward(gru) == 6 * 32 * (14 + 32) + 17 * 32 + 2 * 32 * 5);
  CHECK(flops_forward(gru, 7) < flops_forward(gru));

  for (bool recurrent : {false, true}) {
    std::int64_t prev = 0;
    for (int h = 1; h <= 300; h += 7) {
      const NetworkSpec s{.input_dim = 14, .hidden_dim = h, .hidden_layers = 2, .action_dim = 5,
                          .recurrent = recurrent};
      NetworkSpec spec = s;
      if (recurrent) spec.hidden_layers = 1;
      const std::int64_t f = flops_forward(spec);
      CHECK(f > prev);
      CHECK(f == flops_forward(spec));
      prev = f;
    }
  }
  const auto layers = layer_costs(ff);
  std::int64_t total = 0;
  for (const LayerCost& l : layers) total += l.flops;
  CHECK(total == flops_forward(ff));
  CHECK(std::string(kFlopConvention).find("MAC=2") != std::string::npos);
}

TEST_CASE("teacher to student forward-FLOPs ratio on both observation sizes") {
  for (const std::string name : {"spread", "skirmish"}) {
    EnvConfig cfg;
    cfg.name = name;
    auto env = make_env(cfg);
    Rng rng(2);
    const TeacherNets t = make_teacher(*env, TeacherConfig{}, rng);
    const int n = env->n_agents();
    const StudentSet s = make_students(env->obs_dim(), env->num_actions(),
                                       std::vector<StudentShape>(n, StudentShape{env->obs_dim(), 32}), true, 4,
                                       t.actor.spec().embedding_dim(), rng);
    const double ratio = static_cast<double>(teacher_cost(t, 1).flops_per_forward) /
                         static_cast<double>(student_cost(s, 1).flops_per_forward);
    MESSAGE(name, " teacher/student forward FLOPs ratio ", ratio);
    CHECK(ratio >= 10.0);
  }
}

TEST_CASE("episode FLOPs agree with the execution counter") {
  EnvConfig cfg;
  cfg.spread.n_agents = 2;
  cfg.spread.horizon = 12;
  auto env = make_env(cfg);
  Rng rng(3);
  const TeacherNets t = make_teacher(*env, TeacherConfig{.hidden_dim = 16, .hidden_layers = 2}, rng);
  TeacherPolicy tp(t);
  std::int64_t steps = 0;
  const std::int64_t teacher_counted = run_episode_flops(tp, *env, 5, &steps);
  const CostReport tc = teacher_cost(t, static_cast<int>(steps));
  CHECK(teacher_counted == tc.flops_per_episode);
  CHECK(tc.flops_per_episode == tc.flops_per_forward * steps * env->n_agents());

  for (bool recurrent : {true, false}) {
    const StudentSet s = make_students(env->obs_dim(), env->num_actions(), {{5, 8}, {env->obs_dim(), 4}}, recurrent,
                                       2, t.actor.spec().embedding_dim(), rng);
    StudentPolicy sp(s, MaskSpec{}, env->layout(), 1.0);
    const std::int64_t student_counted = run_episode_flops(sp, *env, 5, &steps);
    CHECK(student_counted == student_cost(s, static_cast<int>(steps)).flops_per_episode);
  }
}

TEST_CASE("timing harness") {
  EnvConfig cfg;
  auto env = make_env(cfg);
  NoopPolicy noop;
  CHECK_THROWS_AS(measure_tps(noop, *env, 0, 1), Error);
  const TimingStats calib = measure_tps(noop, *env, 5, 1);
  CHECK(calib.episodes == 5);
  CHECK(calib.steps == 5 * cfg.spread.horizon);
  CHECK(calib.mean_ms < 0.005);

  Rng rng(4);
  const TeacherNets t = make_teacher(*env, TeacherConfig{}, rng);
  TeacherPolicy tp(t);
  std::vector<double> means;
  for (int k = 0; k < 5; ++k) means.push_back(measure_tps(tp, *env, 40, 10 + k, 3).mean_ms);
  const Eigen::Map<const Vec> m(means.data(), static_cast<Eigen::Index>(means.size()));
  const double cv = std::sqrt((m.array() - m.mean()).square().mean()) / m.mean();
  MESSAGE("teacher ms/step ", m.mean(), " cv ", cv);
  CHECK(m.minCoeff() > calib.mean_ms);
  CHECK(cv < 0.2);
}

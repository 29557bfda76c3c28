#include "mdist/resource.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace mdist {

std::int64_t affine_params(int in, int out) { return static_cast<std::int64_t>(in) * out + out; }

std::int64_t affine_flops(int in, int out) { return 2 * static_cast<std::int64_t>(in) * out; }

std::vector<LayerCost> layer_costs(const NetworkSpec& spec, const std::string& prefix) {
  spec.validate();
  std::vector<LayerCost> out;
  const std::int64_t h = spec.hidden_dim;
  if (spec.recurrent) {
    const std::int64_t in = spec.input_dim;
    out.push_back({prefix + "gru", 3 * ((in + h) * h + h), 2 * 3 * h * (in + h) + 12 * h + 5 * h});
  } else {
    int in = spec.input_dim;
    for (int l = 0; l < spec.hidden_layers; ++l) {
      out.push_back({prefix + "hidden" + std::to_string(l), affine_params(in, spec.hidden_dim),
                     affine_flops(in, spec.hidden_dim) + 4 * h});
      in = spec.hidden_dim;
    }
  }
  const int e = spec.embedding_dim();
  if (spec.action_dim > 0)
    out.push_back({prefix + "policy_head", affine_params(e, spec.action_dim), affine_flops(e, spec.action_dim)});
  if (spec.has_value_head) out.push_back({prefix + "value_head", affine_params(e, 1), affine_flops(e, 1)});
  return out;
}

std::int64_t count_params(const NetworkSpec& spec) {
  std::int64_t n = 0;
  for (const LayerCost& l : layer_costs(spec)) n += l.params;
  return n;
}

std::int64_t flops_forward(const NetworkSpec& spec, int input_dim) {
  NetworkSpec s = spec;
  s.input_dim = input_dim;
  std::int64_t n = 0;
  for (const LayerCost& l : layer_costs(s)) n += l.flops;
  return n;
}

CostReport teacher_cost(const TeacherNets& teacher, int steps) {
  CostReport r;
  r.label = "teacher";
  r.layers = layer_costs(teacher.actor.spec(), "actor/");
  r.params = count_params(teacher.actor.spec());
  r.flops_per_forward = flops_forward(teacher.actor.spec());
  r.flops_per_episode = r.flops_per_forward * teacher.n_agents * steps;
  return r;
}

CostReport student_cost(const StudentSet& students, int steps) {
  CostReport r;
  r.label = "student";
  for (std::size_t i = 0; i < students.agents.size(); ++i) {
    const Student& s = students.agents[i];
    const std::string p = "agent" + std::to_string(i) + "/";
    auto al = layer_costs(s.aligner.spec(), p + "aligner/");
    auto ac = layer_costs(s.actor.spec(), p + "actor/");
    r.layers.insert(r.layers.end(), al.begin(), al.end());
    r.layers.insert(r.layers.end(), ac.begin(), ac.end());
    const std::int64_t f = flops_forward(s.aligner.spec()) + flops_forward(s.actor.spec());
    r.params += count_params(s.aligner.spec()) + count_params(s.actor.spec());
    r.flops_per_forward = std::max(r.flops_per_forward, f);
    r.flops_per_episode += f * steps;
  }
  return r;
}

TimingStats measure_tps(Policy& policy, const Environment& env_proto, int n_episodes, std::uint64_t seed,
                        int warmup) {
  if (n_episodes < 1) throw Error(ErrorCode::kInvalidArgument, "timing needs at least one episode");
  using clock = std::chrono::steady_clock;
  auto env = env_proto.clone();
  std::vector<int> actions(env->n_agents());
  std::vector<double> samples;
  for (int ep = 0; ep < warmup + n_episodes; ++ep) {
    const std::uint64_t ep_seed = derive_seed(seed, static_cast<std::uint64_t>(ep));
    Rng rng(derive_seed(ep_seed, 1));
    StepOutcome o = env->reset(ep_seed);
    policy.begin_episode(rng);
    while (!o.done) {
      const std::vector<bool> active = env->active();
      const auto t0 = clock::now();
      policy.act(o, active, actions, true, rng);
      const auto t1 = clock::now();
      if (ep >= warmup) samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      o = env->step(actions);
    }
  }
  TimingStats st;
  st.episodes = n_episodes;
  st.steps = static_cast<std::int64_t>(samples.size());
  const Eigen::Map<const Vec> v(samples.data(), static_cast<Eigen::Index>(samples.size()));
  st.mean_ms = v.mean();
  st.std_ms = std::sqrt((v.array() - st.mean_ms).square().mean());
  return st;
}

}  // namespace mdist

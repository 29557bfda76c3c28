#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdist/distill.hpp"
#include "mdist/netcore.hpp"
#include "mdist/policy.hpp"
#include "mdist/teacher.hpp"

namespace mdist {

// Counting conventions (also printed in every cost report):
//   multiply-accumulate = 2 FLOPs, bias adds free; affine in->out = 2 in out
//   tanh activation in a feedforward layer = 4 FLOPs per unit
//   gated-recurrent step = 2 * 3h (in + h) + 12h (gate nonlinearities) + 5h (elementwise)
//   policy head = 2 e A, value head = 2 e
inline constexpr const char* kFlopConvention =
    "MAC=2 FLOPs; affine 2*in*out; tanh 4/unit; GRU 6h(in+h)+17h; heads 2*e*out";

std::int64_t affine_params(int in, int out);
std::int64_t affine_flops(int in, int out);
std::int64_t count_params(const NetworkSpec& spec);
/// Forward cost of one step for the given input width (spec.input_dim is ignored).
std::int64_t flops_forward(const NetworkSpec& spec, int input_dim);
inline std::int64_t flops_forward(const NetworkSpec& spec) { return flops_forward(spec, spec.input_dim); }

struct LayerCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

std::vector<LayerCost> layer_costs(const NetworkSpec& spec, const std::string& prefix = "");

struct TimingStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::int64_t steps = 0;
  int episodes = 0;
};

struct CostReport {
  std::string label;
  std::int64_t params = 0;
  std::int64_t flops_per_forward = 0;  // one agent's decision (largest agent for heterogeneous sets)
  std::int64_t flops_per_episode = 0;  // summed over agents and `steps`
  TimingStats timing;
  std::vector<LayerCost> layers;
};

/// Execution-time cost of the teacher actor (the critic is training-only).
CostReport teacher_cost(const TeacherNets& teacher, int steps);
/// Aligner + actor for every student.
CostReport student_cost(const StudentSet& students, int steps);

/// Times Policy::act per decision step over n_episodes after `warmup`
/// untimed episodes. The environment step is outside the timed region.
TimingStats measure_tps(Policy& policy, const Environment& env_proto, int n_episodes, std::uint64_t seed,
                        int warmup = 1);

}  // namespace mdist

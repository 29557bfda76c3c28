#pragma once

#include <span>
#include <vector>

#include "mdist/distill.hpp"
#include "mdist/envs.hpp"
#include "mdist/teacher.hpp"

namespace mdist {

/// Decentralized execution interface: one call per environment step.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void begin_episode(Rng& rng) = 0;
  /// Fills one action per agent; inactive agents get 0.
  virtual void act(const StepOutcome& obs, const std::vector<bool>& active, std::span<int> actions, bool greedy,
                   Rng& rng) = 0;
};

/// Teacher actor on full observations at temperature 1.
class TeacherPolicy final : public Policy {
 public:
  explicit TeacherPolicy(const TeacherNets& nets) : nets_(nets) {}
  void begin_episode(Rng&) override {}
  void act(const StepOutcome& obs, const std::vector<bool>& active, std::span<int> actions, bool greedy,
           Rng& rng) override;

 private:
  const TeacherNets& nets_;
};

/// Students on masked observations; each agent carries its own hidden state.
class StudentPolicy final : public Policy {
 public:
  StudentPolicy(const StudentSet& students, MaskSpec masks, BlockLayout layout, double tau);
  void begin_episode(Rng& rng) override;
  void act(const StepOutcome& obs, const std::vector<bool>& active, std::span<int> actions, bool greedy,
           Rng& rng) override;

 private:
  const StudentSet& students_;
  MaskSpec masks_;
  BlockLayout layout_;
  double tau_;
  EpisodeMask episode_mask_;
  std::vector<Vec> hidden_;
  Vec x_, logits_;
};

class RandomPolicy final : public Policy {
 public:
  explicit RandomPolicy(int num_actions) : num_actions_(num_actions) {}
  void begin_episode(Rng&) override {}
  void act(const StepOutcome& obs, const std::vector<bool>& active, std::span<int> actions, bool greedy,
           Rng& rng) override;

 private:
  int num_actions_;
};

/// Always action 0; used to calibrate the timing harness.
class NoopPolicy final : public Policy {
 public:
  void begin_episode(Rng&) override {}
  void act(const StepOutcome&, const std::vector<bool>&, std::span<int> actions, bool, Rng&) override;
};

/// Per-agent action counts, bucketed by timestep: hist[agent](bucket, action).
using ActionHistogram = std::vector<Mat>;

struct EvalResult {
  double return_mean = 0.0;
  double return_std = 0.0;
  double win_rate = 0.0;  // 0 for envs without a win condition
  std::vector<double> returns;
  ActionHistogram histogram;
};

/// Runs n_episodes with seeds derived from `seed`.
EvalResult evaluate(Policy& policy, const Environment& env_proto, int n_episodes, bool greedy, std::uint64_t seed,
                    int bucket_width = 5);

/// Mean over agents and buckets of the Jensen-Shannon distance (base 2)
/// between normalized action distributions; empty buckets are skipped.
double histogram_js_distance(const ActionHistogram& a, const ActionHistogram& b);

}  // namespace mdist

#include "mdist/policy.hpp"

#include <algorithm>
#include <cmath>

namespace mdist {

namespace {

int argmax(const Vec& v) {
  Eigen::Index best = 0;
  v.maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

void TeacherPolicy::act(const StepOutcome& obs, const std::vector<bool>& active, std::span<int> actions, bool greedy,
                        Rng& rng) {
  Vec hidden, logits;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    actions[i] = 0;
    if (!active[i]) continue;
    nets_.actor.infer(nets_.actor_params, nets_.actor_input(obs.observations[i], static_cast<int>(i)), hidden,
                      logits);
    actions[i] = greedy ? argmax(logits) : sample_categorical(softmax_temp(logits, 1.0), rng);
  }
}

StudentPolicy::StudentPolicy(const StudentSet& students, MaskSpec masks, BlockLayout layout, double tau)
    : students_(students), masks_(std::move(masks)), layout_(std::move(layout)), tau_(tau) {
  if (masks_.agents.empty()) masks_ = MaskSpec::full(static_cast<int>(students_.agents.size()));
  check_dim("mask table agents", static_cast<Eigen::Index>(students_.agents.size()),
            static_cast<Eigen::Index>(masks_.agents.size()));
}

void StudentPolicy::begin_episode(Rng& rng) {
  episode_mask_ = EpisodeMask(masks_, layout_, rng);
  hidden_.assign(students_.agents.size(), Vec());
}

void StudentPolicy::act(const StepOutcome& obs, const std::vector<bool>& active, std::span<int> actions, bool greedy,
                        Rng& rng) {
  Vec none;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    actions[i] = 0;
    if (!active[i]) continue;
    const Student& s = students_.agents[i];
    const Vec o = episode_mask_.apply(static_cast<int>(i), obs.observations[i]);
    s.aligner.infer(s.aligner_params, o, none, x_);
    s.actor.infer(s.actor_params, x_, hidden_[i], logits_);
    actions[i] = greedy ? argmax(logits_) : sample_categorical(softmax_temp(logits_, tau_), rng);
  }
}

void RandomPolicy::act(const StepOutcome&, const std::vector<bool>& active, std::span<int> actions, bool, Rng& rng) {
  for (std::size_t i = 0; i < actions.size(); ++i) actions[i] = active[i] ? uniform_int(rng, 0, num_actions_ - 1) : 0;
}

void NoopPolicy::act(const StepOutcome&, const std::vector<bool>&, std::span<int> actions, bool, Rng&) {
  std::fill(actions.begin(), actions.end(), 0);
}

EvalResult evaluate(Policy& policy, const Environment& env_proto, int n_episodes, bool greedy, std::uint64_t seed,
                    int bucket_width) {
  if (n_episodes < 1) throw Error(ErrorCode::kInvalidArgument, "evaluation needs at least one episode");
  if (bucket_width < 1) throw Error(ErrorCode::kInvalidArgument, "histogram bucket width must be positive");
  const int n = env_proto.n_agents();
  const int buckets = (env_proto.horizon() + bucket_width - 1) / bucket_width;
  EvalResult out;
  out.histogram.assign(n, Mat::Zero(buckets, env_proto.num_actions()));
  auto env = env_proto.clone();
  std::vector<int> actions(n);
  int wins = 0;
  for (int ep = 0; ep < n_episodes; ++ep) {
    const std::uint64_t ep_seed = derive_seed(seed, static_cast<std::uint64_t>(ep));
    Rng rng(derive_seed(ep_seed, 1));
    StepOutcome o = env->reset(ep_seed);
    policy.begin_episode(rng);
    double ret = 0.0;
    for (int t = 0; !o.done; ++t) {
      const std::vector<bool> active = env->active();
      policy.act(o, active, actions, greedy, rng);
      const int bucket = std::min(t / bucket_width, buckets - 1);
      for (int i = 0; i < n; ++i)
        if (active[i]) out.histogram[i](bucket, actions[i]) += 1.0;
      o = env->step(actions);
      ret += o.reward;
    }
    if (o.win.value_or(false)) ++wins;
    out.returns.push_back(ret);
  }
  const Moments r = moments(out.returns);
  out.return_mean = r.mean;
  out.return_std = r.std;
  out.win_rate = static_cast<double>(wins) / n_episodes;
  return out;
}

double histogram_js_distance(const ActionHistogram& a, const ActionHistogram& b) {
  check_dim("histogram agents", static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    check_dim("histogram rows", a[i].rows(), b[i].rows());
    check_dim("histogram columns", a[i].cols(), b[i].cols());
    for (Eigen::Index k = 0; k < a[i].rows(); ++k) {
      const double sa = a[i].row(k).sum(), sb = b[i].row(k).sum();
      if (sa <= 0.0 || sb <= 0.0) continue;
      const RowVec p = a[i].row(k) / sa, q = b[i].row(k) / sb;
      const RowVec m = 0.5 * (p + q);
      double js = 0.0;
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        if (p[j] > 0) js += 0.5 * p[j] * std::log2(p[j] / m[j]);
        if (q[j] > 0) js += 0.5 * q[j] * std::log2(q[j] / m[j]);
      }
      total += std::sqrt(std::max(js, 0.0));
      ++count;
    }
  }
  return count > 0 ? total / count : 0.0;
}

}  // namespace mdist

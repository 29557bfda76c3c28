#include "mdist/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdist/policy.hpp"

namespace mdist {

GaeOutput compute_gae(const Vec& rewards, const Vec& values, const Flags& dones, double gamma, double lambda) {
  const Eigen::Index T = rewards.size();
  check_dim("values length (T + 1)", T + 1, values.size());
  check_dim("dones length", T, static_cast<Eigen::Index>(dones.size()));
  GaeOutput out{Vec(T), Vec(T)};
  double next = 0.0;
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const double keep = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * values[t + 1] * keep - values[t];
    next = delta + gamma * lambda * keep * next;
    out.advantages[t] = next;
  }
  out.returns = out.advantages + values.head(T);
  return out;
}

Vec normalize_advantages(const Vec& adv) {
  if (adv.size() == 0) return adv;
  const double mean = adv.mean();
  const double var = (adv.array() - mean).square().mean();
  return (adv.array() - mean) / std::max(std::sqrt(var), 1e-8);
}

ClipResult clipped_surrogate(const Vec& logp_new, const Vec& logp_old, const Vec& adv, double eps) {
  const Eigen::Index n = logp_new.size();
  check_dim("old log-prob count", n, logp_old.size());
  check_dim("advantage count", n, adv.size());
  ClipResult out;
  out.d_logp = Vec::Zero(n);
  if (n == 0) return out;
  int clipped = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double raw = logp_new[k] - logp_old[k];
    const double log_ratio = std::clamp(raw, -20.0, 20.0);
    const double r = std::exp(log_ratio);
    const double rc = std::clamp(r, 1.0 - eps, 1.0 + eps);
    const double a = adv[k];
    const bool use_clipped = rc * a < r * a;
    out.surrogate += use_clipped ? rc * a : r * a;
    if (!use_clipped && raw == log_ratio) out.d_logp[k] = r * a / static_cast<double>(n);
    if (std::abs(r - 1.0) > eps) ++clipped;
  }
  out.surrogate /= static_cast<double>(n);
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
  return out;
}

Vec TeacherNets::actor_input(const Vec& obs, int agent) const {
  Vec x = Vec::Zero(obs.size() + n_agents);
  x.head(obs.size()) = obs;
  x[obs.size() + agent] = 1.0;
  return x;
}

double TeacherNets::value(const Vec& state) const {
  return value_scale * critic_forward(critic, critic_params, state);
}

TeacherNets make_teacher(const Environment& env, const TeacherConfig& cfg, Rng& rng) {
  NetworkSpec actor{.input_dim = env.obs_dim() + env.n_agents(),
                    .hidden_dim = cfg.hidden_dim,
                    .hidden_layers = cfg.hidden_layers,
                    .action_dim = env.num_actions()};
  NetworkSpec critic{.input_dim = env.state_dim(),
                     .hidden_dim = cfg.hidden_dim,
                     .hidden_layers = cfg.hidden_layers,
                     .action_dim = 0,
                     .has_value_head = true};
  TeacherNets nets{Network(actor), Network(critic), {}, {}, env.n_agents(), cfg.value_scale};
  nets.actor_params = nets.actor.make_params(rng);
  nets.critic_params = nets.critic.make_params(rng);
  return nets;
}

Checkpoint teacher_checkpoint(const TeacherNets& nets, std::uint64_t seed, const std::string& metadata) {
  Checkpoint ckpt;
  ckpt.seed = seed;
  ckpt.metadata = metadata;
  ckpt.add_network("actor", nets.actor.spec(), nets.actor_params);
  ckpt.add_network("critic", nets.critic.spec(), nets.critic_params);
  ckpt.add_matrix("n_agents", Mat::Constant(1, 1, nets.n_agents));
  ckpt.add_matrix("value_scale", Mat::Constant(1, 1, nets.value_scale));
  return ckpt;
}

TeacherNets teacher_from_checkpoint(const Checkpoint& ckpt) {
  for (const char* name : {"actor", "critic", "n_agents", "value_scale"})
    if (!ckpt.contains(name)) throw Error(ErrorCode::kCorrupt, std::string("teacher checkpoint lacks '") + name + "'");
  const int n_agents = static_cast<int>(ckpt.matrix("n_agents")(0, 0));
  TeacherNets nets{Network(ckpt.spec("actor")), Network(ckpt.spec("critic")), ckpt.params("actor"),
                   ckpt.params("critic"), n_agents, ckpt.matrix("value_scale")(0, 0)};
  if (!(nets.value_scale > 0.0) || n_agents < 1 || nets.actor.spec().input_dim <= n_agents || !nets.critic.spec().has_value_head)
    throw Error(ErrorCode::kCorrupt, "teacher checkpoint has inconsistent shapes");
  return nets;
}

std::vector<Trajectory> collect_rollouts(const Environment& env_proto, const TeacherNets& teacher, int n_episodes,
                                         Rng& rng) {
  const int n = env_proto.n_agents();
  std::vector<std::unique_ptr<Environment>> envs;
  std::vector<StepOutcome> current;
  std::vector<Trajectory> trajs(n_episodes);
  for (int e = 0; e < n_episodes; ++e) {
    envs.push_back(env_proto.clone());
    current.push_back(envs.back()->reset(rng()));
    trajs[e].n_agents = n;
  }
  std::vector<bool> running(n_episodes, true);
  const int obs_dim = env_proto.obs_dim();
  while (std::any_of(running.begin(), running.end(), [](bool b) { return b; })) {
    std::vector<std::pair<int, int>> slots;  // (episode, agent)
    std::vector<int> live;
    std::vector<std::vector<bool>> act_mask(n_episodes);
    for (int e = 0; e < n_episodes; ++e) {
      if (!running[e]) continue;
      live.push_back(e);
      act_mask[e] = envs[e]->active();
      for (int i = 0; i < n; ++i)
        if (act_mask[e][i]) slots.emplace_back(e, i);
    }
    Mat states(env_proto.state_dim(), static_cast<Eigen::Index>(live.size()));
    for (std::size_t k = 0; k < live.size(); ++k) states.col(k) = current[live[k]].state;
    const Trace values = teacher.critic.forward(teacher.critic_params, {states});
    Mat x(obs_dim + n, static_cast<Eigen::Index>(slots.size()));
    for (std::size_t k = 0; k < slots.size(); ++k)
      x.col(k) = teacher.actor_input(current[slots[k].first].observations[slots[k].second], slots[k].second);
    Mat logits;
    if (!slots.empty()) logits = teacher.actor.forward(teacher.actor_params, {x}).logits[0];

    std::vector<std::vector<int>> actions(n_episodes, std::vector<int>(n, 0));
    std::vector<std::vector<double>> logps(n_episodes, std::vector<double>(n, 0.0));
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const Vec logp = log_softmax_temp(logits.col(k), 1.0);
      const int a = sample_categorical(logp.array().exp().matrix(), rng);
      actions[slots[k].first][slots[k].second] = a;
      logps[slots[k].first][slots[k].second] = logp[a];
    }
    for (std::size_t k = 0; k < live.size(); ++k) {
      const int e = live[k];
      Trajectory& tr = trajs[e];
      tr.states.push_back(current[e].state);
      tr.obs.push_back(current[e].observations);
      tr.actions.push_back(actions[e]);
      tr.log_probs.push_back(logps[e]);
      std::vector<std::uint8_t> active(n);
      for (int i = 0; i < n; ++i) active[i] = act_mask[e][i] ? 1 : 0;
      tr.active.push_back(active);
      tr.values.conservativeResize(tr.values.size() + 1);
      tr.values[tr.values.size() - 1] = values.value[0](k);
      current[e] = envs[e]->step(actions[e]);
      tr.next_states.push_back(current[e].state);
      tr.rewards.conservativeResize(tr.rewards.size() + 1);
      tr.rewards[tr.rewards.size() - 1] = current[e].reward;
      tr.dones.push_back(current[e].done ? 1 : 0);
      if (current[e].done) {
        running[e] = false;
        tr.win = current[e].win;
      }
    }
  }
  return trajs;
}

namespace {

struct ActorSample {
  int traj, t, agent;
  double adv;
};

}  // namespace

UpdateMetrics mappo_update(TeacherNets& teacher, const std::vector<Trajectory>& batch, const TeacherConfig& cfg,
                           Rng& rng) {
  std::vector<ActorSample> actor_samples;
  std::vector<std::pair<int, int>> critic_samples;
  std::vector<Vec> returns(batch.size());
  std::vector<double> raw_adv;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Trajectory& tr = batch[b];
    Vec v(tr.length() + 1);
    v.head(tr.length()) = tr.values;
    v[tr.length()] = tr.bootstrap_value;
    const GaeOutput g =
        compute_gae(tr.rewards / teacher.value_scale, v, tr.dones, cfg.gamma, cfg.lambda);
    returns[b] = g.returns;
    for (int t = 0; t < tr.length(); ++t) {
      critic_samples.emplace_back(static_cast<int>(b), t);
      for (int i = 0; i < tr.n_agents; ++i) {
        if (!tr.active[t][i]) continue;
        actor_samples.push_back({static_cast<int>(b), t, i, g.advantages[t]});
        raw_adv.push_back(g.advantages[t]);
      }
    }
  }
  const Vec norm = normalize_advantages(Eigen::Map<const Vec>(raw_adv.data(), static_cast<Eigen::Index>(raw_adv.size())));
  for (std::size_t k = 0; k < actor_samples.size(); ++k) actor_samples[k].adv = norm[k];

  UpdateMetrics m;
  int updates = 0;
  const AdamConfig adam{.lr = cfg.lr};
  const int n_actions = teacher.actor.spec().action_dim;
  std::vector<std::size_t> a_idx(actor_samples.size()), c_idx(critic_samples.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(a_idx.begin(), a_idx.end(), 0);
    std::iota(c_idx.begin(), c_idx.end(), 0);
    std::shuffle(a_idx.begin(), a_idx.end(), rng);
    std::shuffle(c_idx.begin(), c_idx.end(), rng);
    for (int mb = 0; mb < cfg.minibatches; ++mb) {
      const std::size_t a0 = a_idx.size() * mb / cfg.minibatches, a1 = a_idx.size() * (mb + 1) / cfg.minibatches;
      const std::size_t c0 = c_idx.size() * mb / cfg.minibatches, c1 = c_idx.size() * (mb + 1) / cfg.minibatches;
      if (a1 == a0 || c1 == c0) continue;

      const Eigen::Index na = static_cast<Eigen::Index>(a1 - a0);
      Mat x(teacher.actor.spec().input_dim, na);
      Vec old_logp(na), adv(na);
      std::vector<int> acts(na);
      for (Eigen::Index k = 0; k < na; ++k) {
        const ActorSample& s = actor_samples[a_idx[a0 + k]];
        const Trajectory& tr = batch[s.traj];
        x.col(k) = teacher.actor_input(tr.obs[s.t][s.agent], s.agent);
        old_logp[k] = tr.log_probs[s.t][s.agent];
        adv[k] = s.adv;
        acts[k] = tr.actions[s.t][s.agent];
      }
      const Trace at = teacher.actor.forward(teacher.actor_params, {x});
      Vec new_logp(na);
      Mat probs(n_actions, na), logps(n_actions, na);
      for (Eigen::Index k = 0; k < na; ++k) {
        logps.col(k) = log_softmax_temp(at.logits[0].col(k), 1.0);
        probs.col(k) = logps.col(k).array().exp();
        new_logp[k] = logps(acts[k], k);
      }
      const ClipResult clip = clipped_surrogate(new_logp, old_logp, adv, cfg.clip);
      Mat d_logits = Mat::Zero(n_actions, na);
      double ent_sum = 0.0;
      for (Eigen::Index k = 0; k < na; ++k) {
        const double h = -(probs.col(k).array() * logps.col(k).array()).sum();
        ent_sum += h;
        Vec onehot = Vec::Zero(n_actions);
        onehot[acts[k]] = 1.0;
        d_logits.col(k) = -clip.d_logp[k] * (onehot - probs.col(k));
        // d(-c H)/dz = c p (log p + H)
        d_logits.col(k).array() +=
            cfg.entropy_coef / na * probs.col(k).array() * (logps.col(k).array() + h);
      }
      m.approx_kl += (old_logp - new_logp).mean();

      const Eigen::Index nc = static_cast<Eigen::Index>(c1 - c0);
      Mat s(teacher.critic.spec().input_dim, nc);
      Vec target(nc);
      for (Eigen::Index k = 0; k < nc; ++k) {
        const auto [b, t] = critic_samples[c_idx[c0 + k]];
        s.col(k) = batch[b].states[t];
        target[k] = returns[b][t];
      }
      const Trace ct = teacher.critic.forward(teacher.critic_params, {s});
      const RowVec err = ct.value[0] - target.transpose();
      const double vloss = err.squaredNorm() / nc;

      if (!std::isfinite(clip.surrogate) || !std::isfinite(vloss) || !std::isfinite(ent_sum))
        throw Error(ErrorCode::kDivergence, "teacher update produced a non-finite loss");

      teacher.actor_params.zero_grad();
      teacher.critic_params.zero_grad();
      teacher.actor.backward(teacher.actor_params, at, Upstream{{d_logits}, {}, {}});
      teacher.critic.backward(teacher.critic_params, ct, Upstream{{}, {}, {cfg.value_coef * 2.0 / nc * err}});
      clip_grad_norm(teacher.actor_params, cfg.max_grad_norm);
      clip_grad_norm(teacher.critic_params, cfg.max_grad_norm);
      adam_step(teacher.actor_params, adam);
      adam_step(teacher.critic_params, adam);

      m.policy_loss += -clip.surrogate;
      m.value_loss += vloss;
      m.entropy += ent_sum / na;
      m.clip_fraction += clip.clip_fraction;
      ++updates;
    }
  }
  if (updates > 0) {
    m.policy_loss /= updates;
    m.value_loss /= updates;
    m.entropy /= updates;
    m.clip_fraction /= updates;
    m.approx_kl /= updates;
  }
  return m;
}

TeacherTraining train_teacher(const EnvConfig& env_cfg, const TeacherConfig& cfg, std::uint64_t seed) {
  EnvConfig full = env_cfg;
  full.masks = {};
  const auto env = make_env(full);
  Rng init_rng(derive_seed(seed, 1));
  Rng rollout_rng(derive_seed(seed, 2));
  Rng update_rng(derive_seed(seed, 3));
  TeacherTraining out{make_teacher(*env, cfg, init_rng), {}};
  std::optional<TeacherNets> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto trajs = collect_rollouts(*env, out.nets, cfg.episodes_per_iter, rollout_rng);
    TeacherIteration rec;
    rec.iteration = it;
    Vec rets(static_cast<Eigen::Index>(trajs.size()));
    for (std::size_t k = 0; k < trajs.size(); ++k) rets[k] = trajs[k].episode_return();
    rec.return_mean = rets.mean();
    rec.return_std = std::sqrt((rets.array() - rec.return_mean).square().mean());
    if (!std::isfinite(rec.return_mean)) throw Error(ErrorCode::kDivergence, "teacher returns went non-finite");
    rec.update = mappo_update(out.nets, trajs, cfg, update_rng);
    rec.eval_return = std::numeric_limits<double>::quiet_NaN();
    rec.win_rate = std::numeric_limits<double>::quiet_NaN();
    const bool last = it + 1 == cfg.iterations;
    if (cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || last)) {
      TeacherPolicy policy(out.nets);
      const EvalResult ev = evaluate(policy, *env, cfg.eval_episodes, true, derive_seed(seed, 4));
      rec.eval_return = ev.return_mean;
      rec.win_rate = ev.win_rate;
      const double score = ev.win_rate * 1e6 + ev.return_mean;
      if (score > best_score) {
        best_score = score;
        best = out.nets;
      }
    }
    out.history.push_back(rec);
  }
  if (best) out.nets = std::move(*best);
  return out;
}

}  // namespace mdist

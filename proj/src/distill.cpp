#include "mdist/distill.hpp"

#include <cmath>
#include <limits>
#include <optional>

#include "mdist/policy.hpp"

namespace mdist {

// ---------------------------------------------------------------------------
// Loss kernels
// ---------------------------------------------------------------------------

namespace {

// d cos(a, b) / d a with the same norm floors as cosine().
Vec cosine_grad(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  const double fa = std::max(na, kNormFloor), fb = std::max(nb, kNormFloor);
  const Eigen::Index m = std::min(a.size(), b.size());
  Vec g = Vec::Zero(a.size());
  g.head(m) = b.head(m) / (fa * fb);
  if (na >= kNormFloor) g -= (a.head(m).dot(b.head(m)) / (fa * fb)) * a / (na * na);
  return g;
}

}  // namespace

double structure_loss(const std::vector<Vec>& phi_teacher, const std::vector<Vec>& phi_student,
                      std::vector<Vec>* d_student) {
  const std::size_t n = phi_teacher.size();
  check_dim("structure loss agent count", static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(phi_student.size()));
  if (d_student) {
    d_student->clear();
    for (const Vec& p : phi_student) d_student->push_back(Vec::Zero(p.size()));
  }
  double loss = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double diff = cosine(phi_teacher[i], phi_teacher[j]) - cosine(phi_student[i], phi_student[j]);
      loss += diff * diff;
      if (d_student) {
        (*d_student)[i] -= 2.0 * diff * cosine_grad(phi_student[i], phi_student[j]);
        (*d_student)[j] -= 2.0 * diff * cosine_grad(phi_student[j], phi_student[i]);
      }
    }
  }
  return loss;
}

Vec role_distribution(const Mat& projection, const Vec& phi, double tau_role) {
  check_dim("role projection columns", projection.cols(), phi.size());
  return softmax_temp(projection * phi, tau_role);
}

double role_loss(const Vec& rho_teacher, const Vec& rho_student) { return policy_kl(rho_teacher, rho_student); }

ClipResult ppo_ratio_loss(const Vec& logp_student, const Vec& logp_behavior, const Vec& adv, double eps,
                          int* clamped) {
  if (clamped) {
    for (Eigen::Index k = 0; k < logp_student.size() && k < logp_behavior.size(); ++k)
      if (std::abs(logp_student[k] - logp_behavior[k]) > 20.0) ++*clamped;
  }
  return clipped_surrogate(logp_student, logp_behavior, adv, eps);
}

// ---------------------------------------------------------------------------
// Students
// ---------------------------------------------------------------------------

void DistillWeights::validate() const {
  for (double w : {alpha, beta, lambda_str, lambda_role, zeta, ppo})
    if (!std::isfinite(w) || w < 0.0) throw Error(ErrorCode::kConfig, "distillation weights must be finite and >= 0");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw Error(ErrorCode::kConfig, "tau must be > 0");
  if (!(tau_role > 0.0) || !std::isfinite(tau_role)) throw Error(ErrorCode::kConfig, "tau_role must be > 0");
  if (!(gamma >= 0.0 && gamma <= 1.0) || !(lambda_gae >= 0.0 && lambda_gae <= 1.0))
    throw Error(ErrorCode::kConfig, "gamma and lambda_gae must lie in [0, 1]");
  if (!(clip > 0.0) || !std::isfinite(clip)) throw Error(ErrorCode::kConfig, "clip radius must be > 0");
}

Eigen::Map<const Mat> Student::role_matrix() const {
  const Vec& v = role_params.values();
  return Eigen::Map<const Mat>(v.data(), roles, roles > 0 ? v.size() / roles : 0);
}

Mat orthonormal_rows(int rows, int cols, Rng& rng) {
  if (rows > cols) throw Error(ErrorCode::kInvalidArgument, "cannot make more orthonormal rows than columns");
  Mat g(cols, rows);
  for (Eigen::Index j = 0; j < g.cols(); ++j)
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      // Box-Muller from the portable uniform source.
      const double u1 = std::max(uniform01(rng), 1e-300), u2 = uniform01(rng);
      g(i, j) = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(cols, rows);
  return q.transpose();
}

StudentSet make_students(int obs_dim, int action_dim, const std::vector<StudentShape>& shapes, bool recurrent,
                         int roles, int teacher_embedding_dim, Rng& rng) {
  if (roles < 2) throw Error(ErrorCode::kConfig, "role count K must be >= 2");
  StudentSet set;
  for (const StudentShape& sh : shapes) {
    NetworkSpec aligner{.input_dim = obs_dim, .hidden_dim = 1, .hidden_layers = 0, .action_dim = sh.input_dim};
    NetworkSpec actor{.input_dim = sh.input_dim,
                      .hidden_dim = sh.hidden_dim,
                      .hidden_layers = 1,
                      .action_dim = action_dim,
                      .recurrent = recurrent};
    Student s{Network(aligner), {}, Network(actor), {}, ParamStore(static_cast<Eigen::Index>(roles) * sh.hidden_dim),
              roles};
    s.aligner_params = s.aligner.make_params(rng);
    s.actor_params = s.actor.make_params(rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(sh.hidden_dim));
    Vec& u = s.role_params.mutable_values();
    for (Eigen::Index k = 0; k < u.size(); ++k) u[k] = uniform(rng, -bound, bound);
    set.agents.push_back(std::move(s));
  }
  set.teacher_roles = orthonormal_rows(roles, teacher_embedding_dim, rng);
  return set;
}

Checkpoint students_checkpoint(const StudentSet& students, std::uint64_t seed, const std::string& metadata) {
  Checkpoint ckpt;
  ckpt.seed = seed;
  ckpt.metadata = metadata;
  for (std::size_t i = 0; i < students.agents.size(); ++i) {
    const Student& s = students.agents[i];
    const std::string p = "agent" + std::to_string(i) + "/";
    ckpt.add_network(p + "aligner", s.aligner.spec(), s.aligner_params);
    ckpt.add_network(p + "actor", s.actor.spec(), s.actor_params);
    ckpt.add_matrix(p + "roles", s.role_matrix());
  }
  ckpt.add_matrix("teacher_roles", students.teacher_roles);
  return ckpt;
}

StudentSet students_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.contains("teacher_roles")) throw Error(ErrorCode::kCorrupt, "student checkpoint lacks teacher_roles");
  StudentSet set;
  set.teacher_roles = ckpt.matrix("teacher_roles");
  for (int i = 0;; ++i) {
    const std::string p = "agent" + std::to_string(i) + "/";
    if (!ckpt.contains(p + "actor")) break;
    const Mat u = ckpt.matrix(p + "roles");
    Student s{Network(ckpt.spec(p + "aligner")), ckpt.params(p + "aligner"), Network(ckpt.spec(p + "actor")),
              ckpt.params(p + "actor"), ParamStore(u.size()), static_cast<int>(u.rows())};
    s.role_params.mutable_values() = Eigen::Map<const Vec>(u.data(), u.size());
    if (s.aligner.spec().action_dim != s.actor.spec().input_dim || u.rows() != set.teacher_roles.rows() ||
        u.cols() != s.actor.spec().embedding_dim())
      throw Error(ErrorCode::kCorrupt, "student checkpoint has inconsistent shapes");
    set.agents.push_back(std::move(s));
  }
  if (set.agents.empty()) throw Error(ErrorCode::kCorrupt, "student checkpoint holds no agents");
  return set;
}

// ---------------------------------------------------------------------------
// Stage-2 objective
// ---------------------------------------------------------------------------

Vec teacher_advantages(const ExpertBuffer& buffer, const Segment& seg, double gamma, double lambda) {
  if (seg.episode >= buffer.episodes.size()) throw Error(ErrorCode::kInvalidArgument, "segment episode out of range");
  const auto& ep = buffer.episodes[seg.episode];
  if (seg.length == 0 || seg.start + seg.length > ep.size())
    throw Error(ErrorCode::kInvalidArgument, "segment outside its episode");
  const Eigen::Index T = static_cast<Eigen::Index>(seg.length);
  Vec r(T), v(T + 1);
  Flags done(seg.length);
  for (Eigen::Index t = 0; t < T; ++t) {
    const ExpertRecord& rec = ep[seg.start + t];
    r[t] = rec.reward;
    v[t] = rec.value;
    done[t] = rec.done ? 1 : 0;
    if (!std::isfinite(rec.value) || !std::isfinite(rec.next_value))
      throw Error(ErrorCode::kInvalidArgument, "segment lacks stored teacher values");
  }
  v[T] = ep[seg.start + seg.length - 1].next_value;
  return compute_gae(r, v, done, gamma, lambda).advantages;
}

double LossBreakdown::weighted_sum(const DistillWeights& w) const {
  return -w.ppo * ppo.sum() + (w.alpha * kl.sum() + w.beta * ce.sum()) + w.lambda_str * structure +
         w.lambda_role * role - w.zeta * entropy.sum();
}

namespace {

struct AgentPass {
  Trace aligner_trace, actor_trace;
  std::vector<Mat> d_logits, d_embedding;
  Mat d_roles;
};

}  // namespace

LossBreakdown stage2_loss(const ExpertBuffer& buffer, const std::vector<Segment>& batch, StudentSet& students,
                          const DistillWeights& w, const Stage2Options& opts) {
  w.validate();
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty minibatch");
  const int n = static_cast<int>(students.agents.size());
  check_dim("student count", buffer.metadata.n_agents, n);
  const std::size_t L = batch.front().length;
  for (const Segment& s : batch) {
    if (s.length != L) throw Error(ErrorCode::kInvalidArgument, "minibatch segments must share one length");
    if (s.episode >= buffer.episodes.size() || s.start + s.length > buffer.episodes[s.episode].size())
      throw Error(ErrorCode::kInvalidArgument, "segment outside its episode");
  }
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  const std::size_t T = L;
  auto rec = [&](Eigen::Index b, std::size_t t) -> const ExpertRecord& {
    return buffer.episodes[batch[b].episode][batch[b].start + t];
  };

  // Teacher-guided advantages, one per (segment, step), shared by all agents.
  Mat adv(T, B);
  for (Eigen::Index b = 0; b < B; ++b) adv.col(b) = teacher_advantages(buffer, batch[b], w.gamma, w.lambda_gae);
  if (w.normalize_advantages) {
    const Vec flat = normalize_advantages(Eigen::Map<const Vec>(adv.data(), adv.size()));
    adv = Eigen::Map<const Mat>(flat.data(), T, B);
  }

  // Forward every student through its aligner.
  std::vector<AgentPass> pass(n);
  for (int i = 0; i < n; ++i) {
    Student& s = students.agents[i];
    std::vector<Mat> obs(T, Mat(buffer.metadata.obs_dim, B));
    for (std::size_t t = 0; t < T; ++t)
      for (Eigen::Index b = 0; b < B; ++b) obs[t].col(b) = rec(b, t).agents[i].obs_masked;
    pass[i].aligner_trace = s.aligner.forward(s.aligner_params, obs);
    Mat h0;
    if (s.actor.spec().recurrent && opts.burn_in) {
      h0 = Mat::Zero(s.actor.spec().hidden_dim, B);
      Vec none, x, logits, hidden;
      for (Eigen::Index b = 0; b < B; ++b) {
        hidden = Vec::Zero(s.actor.spec().hidden_dim);
        const auto& ep = buffer.episodes[batch[b].episode];
        for (std::size_t t = 0; t < batch[b].start; ++t) {
          s.aligner.infer(s.aligner_params, ep[t].agents[i].obs_masked, none, x);
          s.actor.infer(s.actor_params, x, hidden, logits);
        }
        h0.col(b) = hidden;
      }
    }
    pass[i].actor_trace = s.actor.forward(s.actor_params, pass[i].aligner_trace.logits, h0);
    const Eigen::Index A = s.actor.spec().action_dim;
    const Eigen::Index E = s.actor.spec().embedding_dim();
    pass[i].d_logits.assign(T, Mat::Zero(A, B));
    pass[i].d_embedding.assign(T, Mat::Zero(E, B));
    pass[i].d_roles = Mat::Zero(s.roles, E);
  }

  LossBreakdown out;
  out.ppo = out.kl = out.ce = out.entropy = Vec::Zero(n);
  const double S = static_cast<double>(B) * static_cast<double>(T);
  double clip_sum = 0.0;
  int clip_agents = 0;

  // Per-agent policy terms: PPO surrogate, KL, CE, entropy.
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<std::size_t, Eigen::Index>> idx;
    for (std::size_t t = 0; t < T; ++t)
      for (Eigen::Index b = 0; b < B; ++b)
        if (rec(b, t).agents[i].active) idx.emplace_back(t, b);
    if (idx.empty()) continue;
    const double M = static_cast<double>(idx.size());
    const Eigen::Index m = static_cast<Eigen::Index>(idx.size());
    Vec logp_s(m), logp_b(m), a_vec(m);
    std::vector<Vec> p_s(m), lp_s(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto [t, b] = idx[k];
      const AgentRecord& ar = rec(b, t).agents[i];
      lp_s[k] = log_softmax_temp(pass[i].actor_trace.logits[t].col(b), w.tau);
      p_s[k] = lp_s[k].array().exp();
      const Vec p_t = softmax_temp(ar.teacher_logits, w.tau);
      logp_s[k] = lp_s[k][ar.action];
      logp_b[k] = ar.behavior_logp;
      a_vec[k] = adv(t, b);
      const double h = entropy(p_s[k]);
      out.kl[i] += policy_kl(p_t, p_s[k]) / M;
      out.ce[i] += policy_ce(p_t, p_s[k]) / M;
      out.entropy[i] += h / M;
      auto dl = pass[i].d_logits[t].col(b);
      dl += (w.alpha + w.beta) / (w.tau * M) * (p_s[k] - p_t);
      dl.array() += w.zeta / (w.tau * M) * p_s[k].array() * (lp_s[k].array() + h);
    }
    const ClipResult clip = ppo_ratio_loss(logp_s, logp_b, a_vec, w.clip, &out.clamped_ratios);
    out.ppo[i] = clip.surrogate;
    clip_sum += clip.clip_fraction;
    ++clip_agents;
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto [t, b] = idx[k];
      Vec g = -p_s[k];
      g[rec(b, t).agents[i].action] += 1.0;
      pass[i].d_logits[t].col(b) -= w.ppo * clip.d_logp[k] / w.tau * g;
    }
  }
  out.clip_fraction = clip_agents > 0 ? clip_sum / clip_agents : 0.0;

  // Cross-agent terms: structure and role alignment, averaged over (segment, step).
  for (std::size_t t = 0; t < T; ++t) {
    for (Eigen::Index b = 0; b < B; ++b) {
      const ExpertRecord& r = rec(b, t);
      std::vector<int> live;
      std::vector<Vec> phi_t, phi_s;
      for (int i = 0; i < n; ++i) {
        if (!r.agents[i].active) continue;
        live.push_back(i);
        phi_t.push_back(r.agents[i].teacher_embedding);
        phi_s.push_back(pass[i].actor_trace.embedding[t].col(b));
      }
      std::vector<Vec> d_phi;
      out.structure += structure_loss(phi_t, phi_s, &d_phi) / S;
      for (std::size_t k = 0; k < live.size(); ++k) {
        const int i = live[k];
        const Student& s = students.agents[i];
        const Mat u_s = s.role_matrix();
        const Vec rho_t = role_distribution(students.teacher_roles, phi_t[k], w.tau_role);
        const Vec rho_s = role_distribution(u_s, phi_s[k], w.tau_role);
        out.role += role_loss(rho_t, rho_s) / S;
        const Vec dz = w.lambda_role / (w.tau_role * S) * (rho_s - rho_t);
        pass[i].d_roles += dz * phi_s[k].transpose();
        auto de = pass[i].d_embedding[t].col(b);
        de += u_s.transpose() * dz;
        de += w.lambda_str / S * d_phi[k];
      }
    }
  }

  out.total = out.weighted_sum(w);
  bool finite = std::isfinite(out.total);
  for (const Vec* v : {&out.ppo, &out.kl, &out.ce, &out.entropy}) finite = finite && v->allFinite();
  if (!finite || !std::isfinite(out.structure) || !std::isfinite(out.role)) {
    std::string msg = "non-finite stage-2 loss: total=" + std::to_string(out.total) +
                      " structure=" + std::to_string(out.structure) + " role=" + std::to_string(out.role);
    for (int i = 0; i < n; ++i)
      msg += " | agent " + std::to_string(i) + " ppo=" + std::to_string(out.ppo[i]) + " kl=" +
             std::to_string(out.kl[i]) + " ce=" + std::to_string(out.ce[i]) + " H=" + std::to_string(out.entropy[i]);
    throw Error(ErrorCode::kDivergence, msg);
  }

  // Backward: actor -> aligner, plus the role projections.
  for (int i = 0; i < n; ++i) {
    Student& s = students.agents[i];
    std::vector<Mat> d_x;
    s.actor.backward(s.actor_params, pass[i].actor_trace, Upstream{pass[i].d_logits, pass[i].d_embedding, {}}, &d_x);
    s.aligner.backward(s.aligner_params, pass[i].aligner_trace, Upstream{d_x, {}, {}});
    s.role_params.mutable_grads() += Eigen::Map<const Vec>(pass[i].d_roles.data(), pass[i].d_roles.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage-2 driver
// ---------------------------------------------------------------------------

namespace {

std::vector<ParamStore*> all_stores(StudentSet& set) {
  std::vector<ParamStore*> out;
  for (Student& s : set.agents) {
    out.push_back(&s.aligner_params);
    out.push_back(&s.actor_params);
    out.push_back(&s.role_params);
  }
  return out;
}

}  // namespace

DistillResult distill_run(const EnvConfig& env_cfg, const DistillConfig& cfg, const ExpertBuffer& buffer,
                          std::uint64_t teacher_hash, std::uint64_t seed) {
  if (buffer.metadata.teacher_hash != teacher_hash)
    throw Error(ErrorCode::kHashMismatch, "buffer was recorded from a different teacher checkpoint (" +
                                              hex64(buffer.metadata.teacher_hash) + " vs " + hex64(teacher_hash) +
                                              ")");
  cfg.weights.validate();
  const auto env = make_env(env_cfg);
  const int n = env->n_agents();
  check_dim("buffer agent count", n, buffer.metadata.n_agents);
  check_dim("buffer observation width", env->obs_dim(), buffer.metadata.obs_dim);
  if (static_cast<int>(cfg.hidden_dims.size()) != n)
    throw Error(ErrorCode::kConfig, "distill.hidden_dims needs one entry per agent");
  if (!cfg.input_dims.empty() && static_cast<int>(cfg.input_dims.size()) != n)
    throw Error(ErrorCode::kConfig, "distill.input_dims needs one entry per agent (or none)");
  if (cfg.iterations < 1 || cfg.batch_size < 1) throw Error(ErrorCode::kConfig, "distill budget must be positive");

  const MaskSpec masks = env_cfg.masks.agents.empty() ? MaskSpec::full(n) : env_cfg.masks;
  const BlockLayout layout = env->layout();
  std::vector<StudentShape> shapes;
  for (int i = 0; i < n; ++i) {
    const int in = cfg.input_dims.empty() ? max_visible(masks.agents[i], layout) : cfg.input_dims[i];
    shapes.push_back({in, cfg.hidden_dims[i]});
  }

  DistillResult out;
  out.buffer_hash_before = buffer.content_hash();
  Rng init_rng(derive_seed(seed, 11));
  Rng sample_rng(derive_seed(seed, 12));
  out.students = make_students(env->obs_dim(), env->num_actions(), shapes, cfg.recurrent, cfg.roles,
                               buffer.metadata.embedding_dim, init_rng);
  const Stage2Options opts{.burn_in = cfg.burn_in};
  int low_entropy = 0;
  std::optional<StudentSet> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.iterations; ++it) {
    const double progress = cfg.iterations > 1 ? static_cast<double>(it) / (cfg.iterations - 1) : 1.0;
    const AdamConfig adam{.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_end_fraction) * progress)};
    const auto batch = sample_minibatch(buffer, cfg.batch_size, cfg.segment_length, sample_rng);
    auto stores = all_stores(out.students);
    for (ParamStore* p : stores) p->zero_grad();
    DistillIteration row;
    row.iteration = it;
    row.loss = stage2_loss(buffer, batch, out.students, cfg.weights, opts);
    double sq = 0.0;
    for (ParamStore* p : stores) sq += p->grads().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw Error(ErrorCode::kDivergence, "non-finite student gradient at iteration " +
                                                                      std::to_string(it));
    if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm)
      for (ParamStore* p : stores) p->mutable_grads() *= cfg.max_grad_norm / norm;
    for (ParamStore* p : stores) adam_step(*p, adam);

    const double mean_h = row.loss.entropy.mean();
    low_entropy = mean_h < cfg.entropy_floor ? low_entropy + 1 : 0;
    if (cfg.collapse_patience > 0 && low_entropy >= cfg.collapse_patience)
      throw Error(ErrorCode::kDivergence, "student entropy collapsed below " + std::to_string(cfg.entropy_floor) +
                                              " nats for " + std::to_string(low_entropy) + " iterations");

    row.eval_return = std::numeric_limits<double>::quiet_NaN();
    row.eval_win_rate = std::numeric_limits<double>::quiet_NaN();
    const bool last = it + 1 == cfg.iterations;
    if (cfg.eval_every > 0 && cfg.eval_episodes > 0 && ((it + 1) % cfg.eval_every == 0 || last)) {
      StudentPolicy policy(out.students, masks, layout, cfg.weights.tau);
      const EvalResult ev = evaluate(policy, *env, cfg.eval_episodes, true, derive_seed(seed, 13));
      row.eval_return = ev.return_mean;
      row.eval_win_rate = ev.win_rate;
      const double score = ev.win_rate * 1e6 + ev.return_mean;
      if (cfg.keep_best && score > best_score) {
        best_score = score;
        best = out.students;
        out.selected_iteration = it;
      }
    }
    out.history.push_back(std::move(row));
  }
  if (best) {
    out.students = std::move(*best);
  } else {
    out.selected_iteration = cfg.iterations - 1;
  }
  out.buffer_hash_after = buffer.content_hash();
  return out;
}

}  // namespace mdist

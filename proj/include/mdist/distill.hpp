#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mdist/buffer.hpp"
#include "mdist/checkpoint.hpp"
#include "mdist/netcore.hpp"
#include "mdist/teacher.hpp"

namespace mdist {

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kNormFloor = 1e-8;

// ---------------------------------------------------------------------------
// Loss kernels
// ---------------------------------------------------------------------------

/// D_KL(p_teacher || p_student); student entries floored inside the log.
template <typename DerivedT, typename DerivedS>
typename DerivedT::Scalar policy_kl(const Eigen::MatrixBase<DerivedT>& p_teacher,
                                    const Eigen::MatrixBase<DerivedS>& p_student) {
  using Scalar = typename DerivedT::Scalar;
  check_dim("policy_kl distribution length", p_teacher.size(), p_student.size());
  Scalar kl(0);
  for (Eigen::Index a = 0; a < p_teacher.size(); ++a) {
    if (p_teacher[a] <= Scalar(0)) continue;
    kl += p_teacher[a] * (std::log(p_teacher[a]) - std::log(std::max<Scalar>(p_student[a], kProbFloor)));
  }
  return kl;
}

/// -sum_a p_teacher(a) log p_student(a).
template <typename DerivedT, typename DerivedS>
typename DerivedT::Scalar policy_ce(const Eigen::MatrixBase<DerivedT>& p_teacher,
                                    const Eigen::MatrixBase<DerivedS>& p_student) {
  using Scalar = typename DerivedT::Scalar;
  check_dim("policy_ce distribution length", p_teacher.size(), p_student.size());
  Scalar ce(0);
  for (Eigen::Index a = 0; a < p_teacher.size(); ++a)
    ce -= p_teacher[a] * std::log(std::max<Scalar>(p_student[a], kProbFloor));
  return ce;
}

/// Cosine similarity with each norm floored at 1e-8. Vectors of different
/// lengths are compared as if the shorter one were zero-padded.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Eigen::Index m = std::min(a.size(), b.size());
  return a.head(m).dot(b.head(m)) / (std::max<Scalar>(a.norm(), kNormFloor) * std::max<Scalar>(b.norm(), kNormFloor));
}

/// sum_{j<i} (cos(phiT_i, phiT_j) - cos(phiS_i, phiS_j))^2. Fewer than two
/// agents gives 0. When d_student is given it receives d loss / d phiS_i.
double structure_loss(const std::vector<Vec>& phi_teacher, const std::vector<Vec>& phi_student,
                      std::vector<Vec>* d_student = nullptr);

/// softmax(U phi / tau_role).
Vec role_distribution(const Mat& projection, const Vec& phi, double tau_role);

/// D_KL(rho_teacher || rho_student).
double role_loss(const Vec& rho_teacher, const Vec& rho_student);

/// PPO clip objective on stored actions with log-ratios clamped to +-20.
/// `clamped`, when given, counts clamped ratios.
ClipResult ppo_ratio_loss(const Vec& logp_student, const Vec& logp_behavior, const Vec& adv, double eps,
                          int* clamped = nullptr);

// ---------------------------------------------------------------------------
// Students
// ---------------------------------------------------------------------------

struct DistillWeights {
  double alpha = 1.0;  // KL
  double beta = 0.5;   // CE
  double lambda_str = 0.1;
  double lambda_role = 0.1;
  double zeta = 0.01;  // entropy
  double tau = 2.0;    // policy temperature
  double tau_role = 1.0;
  double gamma = 0.99;
  double lambda_gae = 0.95;
  double clip = 0.2;
  double ppo = 1.0;  // weight on the surrogate; 1 in the standard objective
  bool normalize_advantages = true;

  void validate() const;
  bool operator==(const DistillWeights&) const = default;
};

/// One decentralized student: aligner g_i -> actor, plus its role projection U_S.
struct Student {
  Network aligner;  // affine: masked observation -> student input
  ParamStore aligner_params;
  Network actor;
  ParamStore actor_params;
  ParamStore role_params;  // U_S, roles x embedding_dim, column-major
  int roles = 0;

  Eigen::Map<const Mat> role_matrix() const;
};

struct StudentSet {
  std::vector<Student> agents;
  Mat teacher_roles;  // U_T, frozen, roles x teacher embedding dim
};

struct StudentShape {
  int input_dim;   // aligner output / actor input
  int hidden_dim;  // 16 or 32 in the shipped presets
};

StudentSet make_students(int obs_dim, int action_dim, const std::vector<StudentShape>& shapes, bool recurrent,
                         int roles, int teacher_embedding_dim, Rng& rng);
/// Rows of U_T are orthonormal.
Mat orthonormal_rows(int rows, int cols, Rng& rng);

Checkpoint students_checkpoint(const StudentSet& students, std::uint64_t seed, const std::string& metadata);
StudentSet students_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Stage-2 objective
// ---------------------------------------------------------------------------

/// GAE over a segment from stored teacher values only.
Vec teacher_advantages(const ExpertBuffer& buffer, const Segment& seg, double gamma, double lambda);

struct LossBreakdown {
  double total = 0.0;
  Vec ppo, kl, ce, entropy;  // per agent, batch means
  double structure = 0.0;
  double role = 0.0;
  int clamped_ratios = 0;
  double clip_fraction = 0.0;

  /// Recomputes the weighted sum from the components.
  double weighted_sum(const DistillWeights& w) const;
};

struct Stage2Options {
  bool burn_in = true;  // warm recurrent students up on the episode prefix
};

/// Evaluates the Stage-2 objective on a minibatch and accumulates its gradient
/// into every student's actor, aligner and role stores (callers zero grads).
LossBreakdown stage2_loss(const ExpertBuffer& buffer, const std::vector<Segment>& batch, StudentSet& students,
                          const DistillWeights& weights, const Stage2Options& opts = {});

// ---------------------------------------------------------------------------
// Stage-2 driver
// ---------------------------------------------------------------------------

struct DistillConfig {
  std::vector<int> hidden_dims{16, 16, 16};  // per agent
  std::vector<int> input_dims;               // per agent; empty = visible feature count
  bool recurrent = true;
  int roles = 4;
  DistillWeights weights;
  double lr = 1e-3;
  double lr_end_fraction = 1.0;  // learning rate decays linearly to lr * this at the last iteration
  double max_grad_norm = 1.0;
  int iterations = 1500;
  int batch_size = 32;
  int segment_length = 16;
  bool burn_in = true;
  int eval_every = 250;
  int eval_episodes = 20;
  bool keep_best = false;  // return the snapshot with the best periodic evaluation
  double entropy_floor = 0.01;
  int collapse_patience = 200;

  bool operator==(const DistillConfig&) const = default;
};

struct DistillIteration {
  int iteration = 0;
  LossBreakdown loss;
  double eval_return = 0.0;
  double eval_win_rate = 0.0;
};

struct DistillResult {
  StudentSet students;
  int selected_iteration = -1;  // iteration of the returned snapshot
  std::vector<DistillIteration> history;
  std::uint64_t buffer_hash_before = 0;
  std::uint64_t buffer_hash_after = 0;
};

/// Runs Stage 2. `teacher_hash` must equal the buffer's recorded teacher hash.
/// Periodic greedy evaluation uses env_cfg with its mask table.
DistillResult distill_run(const EnvConfig& env_cfg, const DistillConfig& cfg, const ExpertBuffer& buffer,
                          std::uint64_t teacher_hash, std::uint64_t seed);

}  // namespace mdist

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "mdist/common.hpp"

namespace mdist {

// ---------------------------------------------------------------------------
// Probability kernels. Templated on the Eigen expression so they work for
// vectors, matrix columns and mapped buffers alike.
// ---------------------------------------------------------------------------

/// Softmax of logits / tau with max-subtraction. Rejects tau <= 0.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax_temp(
    const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > Scalar(0))) throw Error(ErrorCode::kInvalidArgument, "softmax temperature must be > 0");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z = logits / tau;
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

/// log softmax(logits / tau), stable.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax_temp(
    const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > Scalar(0))) throw Error(ErrorCode::kInvalidArgument, "softmax temperature must be > 0");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z = logits / tau;
  const Scalar m = z.maxCoeff();
  const Scalar lse = m + std::log((z.array() - m).exp().sum());
  z.array() -= lse;
  return z;
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
template <typename Derived>
typename Derived::Scalar entropy(const Eigen::MatrixBase<Derived>& p) {
  using Scalar = typename Derived::Scalar;
  Scalar h(0);
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > Scalar(0)) h -= p[i] * std::log(p[i]);
  return h;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

enum class EmbeddingTap { kFinalHidden };

/// Architecture of an actor or critic.
///
/// Feedforward nets stack `hidden_layers` tanh layers of width `hidden_dim`
/// (zero layers gives a plain affine map whose embedding is the input).
/// Recurrent nets use one gated-recurrent cell of width `hidden_dim`.
/// Heads: a linear policy head with `action_dim` outputs (0 = none) and an
/// optional scalar value head, both reading the embedding.
struct NetworkSpec {
  int input_dim = 1;
  int hidden_dim = 1;
  int hidden_layers = 1;
  int action_dim = 1;
  bool recurrent = false;
  bool has_value_head = false;
  EmbeddingTap embedding_tap = EmbeddingTap::kFinalHidden;

  void validate() const;
  int embedding_dim() const;
  bool operator==(const NetworkSpec&) const = default;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Flat parameter vector with gradient and adaptive-moment slots.
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(Eigen::Index size);

  Eigen::Index size() const { return values_.size(); }
  const Vec& values() const { return values_; }
  // Any mutable access invalidates forward traces taken before it.
  Vec& mutable_values();
  const Vec& grads() const { return grads_; }
  Vec& mutable_grads() { return grads_; }
  const Vec& moment1() const { return moment1_; }
  const Vec& moment2() const { return moment2_; }
  std::uint64_t step_count() const { return step_count_; }
  std::uint64_t version() const { return version_; }

  void zero_grad() { grads_.setZero(); }

 private:
  friend void adam_step(ParamStore&, const AdamConfig&);
  Vec values_, grads_, moment1_, moment2_;
  std::uint64_t step_count_ = 0;
  std::uint64_t version_ = 0;
};

/// Bias-corrected adaptive-moment update. A non-finite gradient throws
/// kNonFinite and leaves the store untouched.
void adam_step(ParamStore& params, const AdamConfig& cfg);

/// Rescales grads so their L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(ParamStore& params, double max_norm);

/// Per-step activations kept for the backward pass.
struct StepCache {
  Mat input;
  std::vector<Mat> layer_out;  // feedforward: output of each hidden layer
  Mat h_prev, z, r, n;         // recurrent cell
};

/// Batched forward result over T steps; columns are batch entries.
struct Trace {
  std::vector<Mat> logits;     // action_dim x B per step
  std::vector<Mat> embedding;  // embedding_dim x B per step
  std::vector<RowVec> value;   // 1 x B per step when the net has a value head
  Mat final_hidden;            // recurrent state after the last step

 private:
  friend class Network;
  std::vector<StepCache> cache_;
  const ParamStore* source_ = nullptr;
  std::uint64_t version_ = 0;
};

/// Upstream gradients for Network::backward. Empty vectors (or empty
/// matrices at a step) stand for zero.
struct Upstream {
  std::vector<Mat> logits;
  std::vector<Mat> embedding;
  std::vector<RowVec> value;
};

class Network {
 public:
  explicit Network(NetworkSpec spec);

  const NetworkSpec& spec() const { return spec_; }
  Eigen::Index num_params() const { return total_; }

  /// Zero-initialized store of the right length.
  ParamStore make_params() const { return ParamStore(total_); }
  /// Uniform in +-1/sqrt(fan_in) per weight block.
  void init_params(ParamStore& params, Rng& rng) const;
  ParamStore make_params(Rng& rng) const;

  /// inputs[t] is input_dim x B. h0 is hidden_dim x B (empty = zeros).
  Trace forward(const ParamStore& params, const std::vector<Mat>& inputs, const Mat& h0 = Mat()) const;

  /// Accumulates d(loss)/d(params) into params.grads(). The trace must come
  /// from forward() on this same store with no update in between.
  void backward(ParamStore& params, const Trace& trace, const Upstream& up,
                std::vector<Mat>* d_inputs = nullptr) const;

  /// Single-sample inference without caches. `hidden` is carried for
  /// recurrent nets. Adds executed FLOPs to flop_counter().
  void infer(const ParamStore& params, const Eigen::Ref<const Vec>& x, Vec& hidden, Vec& logits,
             double* value = nullptr) const;

 private:
  struct Block {
    Eigen::Index offset, rows, cols;
  };
  Eigen::Map<const Mat> weight(const Vec& v, const Block& b) const;
  Eigen::Map<const Vec> bias(const Vec& v, const Block& b) const;

  NetworkSpec spec_;
  // Feedforward: (W, b) per hidden layer. Recurrent: Wx, U, b.
  std::vector<Block> weights_, biases_;
  Block policy_w_{}, policy_b_{}, value_w_{}, value_b_{};
  Eigen::Index total_ = 0;
};

/// Executed-FLOP counter for infer(), per thread.
std::uint64_t& flop_counter();

/// Result of one step of an actor, as returned by actor_forward.
struct ForwardResult {
  Vec logits;
  Vec embedding;
  std::optional<double> value;
};

/// Runs an actor over obs_seq (T x input_dim rows), carrying the hidden state.
std::vector<ForwardResult> actor_forward(const Network& net, const ParamStore& params, const Mat& obs_seq,
                                         const Vec& initial_hidden);

/// Scalar value estimate of a critic for one joint state.
double critic_forward(const Network& net, const ParamStore& params, const Vec& state);

}  // namespace mdist

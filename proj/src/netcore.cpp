#include "mdist/netcore.hpp"

#include <atomic>

namespace mdist {

namespace {

std::uint64_t next_version() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

Mat sigmoid(const Mat& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

}  // namespace

void NetworkSpec::validate() const {
  if (input_dim < 1 || hidden_dim < 1)
    throw Error(ErrorCode::kInvalidArgument, "network dims must be >= 1");
  if (hidden_layers < 0 || action_dim < 0)
    throw Error(ErrorCode::kInvalidArgument, "hidden_layers and action_dim must be >= 0");
  if (action_dim == 0 && !has_value_head)
    throw Error(ErrorCode::kInvalidArgument, "network needs a policy head or a value head");
}

int NetworkSpec::embedding_dim() const {
  if (recurrent || hidden_layers > 0) return hidden_dim;
  return input_dim;
}

ParamStore::ParamStore(Eigen::Index size)
    : values_(Vec::Zero(size)),
      grads_(Vec::Zero(size)),
      moment1_(Vec::Zero(size)),
      moment2_(Vec::Zero(size)),
      version_(next_version()) {}

Vec& ParamStore::mutable_values() {
  version_ = next_version();
  return values_;
}

void adam_step(ParamStore& p, const AdamConfig& cfg) {
  if (!p.grads_.allFinite()) throw Error(ErrorCode::kNonFinite, "non-finite gradient; update aborted");
  p.step_count_ += 1;
  const double t = static_cast<double>(p.step_count_);
  p.moment1_ = cfg.beta1 * p.moment1_ + (1.0 - cfg.beta1) * p.grads_;
  p.moment2_ = cfg.beta2 * p.moment2_ + (1.0 - cfg.beta2) * p.grads_.cwiseProduct(p.grads_);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  p.values_.array() -= cfg.lr * (p.moment1_.array() / c1) / ((p.moment2_.array() / c2).sqrt() + cfg.eps);
  p.version_ = next_version();
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  const double norm = params.grads().norm();
  if (max_norm > 0.0 && norm > max_norm) params.mutable_grads() *= max_norm / norm;
  return norm;
}

std::uint64_t& flop_counter() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

Network::Network(NetworkSpec spec) : spec_(spec) {
  spec_.validate();
  auto take = [this](Eigen::Index rows, Eigen::Index cols) {
    Block b{total_, rows, cols};
    total_ += rows * cols;
    return b;
  };
  const Eigen::Index h = spec_.hidden_dim;
  if (spec_.recurrent) {
    weights_.push_back(take(3 * h, spec_.input_dim));
    weights_.push_back(take(3 * h, h));
    biases_.push_back(take(3 * h, 1));
  } else {
    Eigen::Index in = spec_.input_dim;
    for (int l = 0; l < spec_.hidden_layers; ++l) {
      weights_.push_back(take(h, in));
      biases_.push_back(take(h, 1));
      in = h;
    }
  }
  const Eigen::Index e = spec_.embedding_dim();
  if (spec_.action_dim > 0) {
    policy_w_ = take(spec_.action_dim, e);
    policy_b_ = take(spec_.action_dim, 1);
  }
  if (spec_.has_value_head) {
    value_w_ = take(1, e);
    value_b_ = take(1, 1);
  }
}

Eigen::Map<const Mat> Network::weight(const Vec& v, const Block& b) const {
  return Eigen::Map<const Mat>(v.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<const Vec> Network::bias(const Vec& v, const Block& b) const {
  return Eigen::Map<const Vec>(v.data() + b.offset, b.rows);
}

void Network::init_params(ParamStore& params, Rng& rng) const {
  check_dim("parameter store length", total_, params.size());
  Vec& v = params.mutable_values();
  auto fill = [&](const Block& b, double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < b.rows * b.cols; ++i) v[b.offset + i] = uniform(rng, -bound, bound);
  };
  if (spec_.recurrent) {
    fill(weights_[0], spec_.input_dim);
    fill(weights_[1], spec_.hidden_dim);
    fill(biases_[0], spec_.hidden_dim);
  } else {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      fill(weights_[l], static_cast<double>(weights_[l].cols));
      fill(biases_[l], static_cast<double>(weights_[l].cols));
    }
  }
  const double e = spec_.embedding_dim();
  if (spec_.action_dim > 0) {
    fill(policy_w_, e);
    fill(policy_b_, e);
  }
  if (spec_.has_value_head) {
    fill(value_w_, e);
    fill(value_b_, e);
  }
}

ParamStore Network::make_params(Rng& rng) const {
  ParamStore p(total_);
  init_params(p, rng);
  return p;
}

Trace Network::forward(const ParamStore& params, const std::vector<Mat>& inputs, const Mat& h0) const {
  check_dim("parameter store length", total_, params.size());
  const Vec& v = params.values();
  Trace tr;
  tr.source_ = &params;
  tr.version_ = params.version();
  const std::size_t steps = inputs.size();
  if (steps == 0) return tr;
  const Eigen::Index batch = inputs[0].cols();
  const Eigen::Index h = spec_.hidden_dim;

  Mat hidden;
  if (spec_.recurrent) {
    if (h0.size() == 0) {
      hidden = Mat::Zero(h, batch);
    } else {
      check_dim("initial hidden rows", h, h0.rows());
      check_dim("initial hidden cols", batch, h0.cols());
      hidden = h0;
    }
  }

  tr.cache_.resize(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const Mat& x = inputs[t];
    check_dim("observation length", spec_.input_dim, x.rows());
    check_dim("batch size", batch, x.cols());
    StepCache& c = tr.cache_[t];
    c.input = x;
    Mat emb;
    if (spec_.recurrent) {
      auto wx = weight(v, weights_[0]);
      auto u = weight(v, weights_[1]);
      auto b = bias(v, biases_[0]);
      Mat gx = wx * x;
      gx.colwise() += b;
      Mat gh = u.topRows(2 * h) * hidden;
      c.h_prev = hidden;
      c.z = sigmoid(gx.topRows(h) + gh.topRows(h));
      c.r = sigmoid(gx.middleRows(h, h) + gh.bottomRows(h));
      Mat rh = c.r.cwiseProduct(hidden);
      c.n = (gx.bottomRows(h) + u.bottomRows(h) * rh).array().tanh().matrix();
      hidden = (1.0 - c.z.array()) * c.n.array() + c.z.array() * hidden.array();
      emb = hidden;
    } else {
      Mat a = x;
      for (std::size_t l = 0; l < weights_.size(); ++l) {
        Mat pre = weight(v, weights_[l]) * a;
        pre.colwise() += bias(v, biases_[l]);
        a = pre.array().tanh().matrix();
        c.layer_out.push_back(a);
      }
      emb = std::move(a);
    }
    if (spec_.action_dim > 0) {
      Mat lg = weight(v, policy_w_) * emb;
      lg.colwise() += bias(v, policy_b_);
      tr.logits.push_back(std::move(lg));
    }
    if (spec_.has_value_head) {
      RowVec val = weight(v, value_w_) * emb;
      val.array() += v[value_b_.offset];
      tr.value.push_back(std::move(val));
    }
    tr.embedding.push_back(std::move(emb));
  }
  if (spec_.recurrent) tr.final_hidden = hidden;
  return tr;
}

void Network::backward(ParamStore& params, const Trace& tr, const Upstream& up, std::vector<Mat>* d_inputs) const {
  if (tr.source_ != &params || tr.version_ != params.version())
    throw Error(ErrorCode::kStaleCache, "forward trace does not match current parameters");
  const Vec& v = params.values();
  Vec& g = params.mutable_grads();
  auto gmat = [&g](const Block& b) { return Eigen::Map<Mat>(g.data() + b.offset, b.rows, b.cols); };
  auto gvec = [&g](const Block& b) { return Eigen::Map<Vec>(g.data() + b.offset, b.rows); };

  const std::size_t steps = tr.cache_.size();
  if (d_inputs) d_inputs->assign(steps, Mat());
  const Eigen::Index h = spec_.hidden_dim;
  auto has = [](const auto& vec, std::size_t t) { return t < vec.size() && vec[t].size() > 0; };

  Mat dh_next;  // gradient flowing into the hidden state from step t+1
  for (std::size_t tt = steps; tt-- > 0;) {
    const StepCache& c = tr.cache_[tt];
    const Mat& emb = tr.embedding[tt];
    Mat demb = Mat::Zero(emb.rows(), emb.cols());
    if (has(up.embedding, tt)) demb += up.embedding[tt];
    if (spec_.action_dim > 0 && has(up.logits, tt)) {
      const Mat& dl = up.logits[tt];
      gmat(policy_w_) += dl * emb.transpose();
      gvec(policy_b_) += dl.rowwise().sum();
      demb += weight(v, policy_w_).transpose() * dl;
    }
    if (spec_.has_value_head && has(up.value, tt)) {
      const RowVec& dv = up.value[tt];
      gmat(value_w_) += dv * emb.transpose();
      g[value_b_.offset] += dv.sum();
      demb += weight(v, value_w_).transpose() * dv;
    }

    if (spec_.recurrent) {
      Mat dh = demb;
      if (dh_next.size() > 0) dh += dh_next;
      auto u = weight(v, weights_[1]);
      Mat dn = dh.cwiseProduct((1.0 - c.z.array()).matrix());
      Mat dz = dh.cwiseProduct(c.h_prev - c.n);
      Mat dh_prev = dh.cwiseProduct(c.z);
      Mat dgates(3 * h, dh.cols());
      dgates.bottomRows(h) = dn.array() * (1.0 - c.n.array().square());
      Mat rh = c.r.cwiseProduct(c.h_prev);
      gmat(weights_[1]).bottomRows(h) += dgates.bottomRows(h) * rh.transpose();
      Mat drh = u.bottomRows(h).transpose() * dgates.bottomRows(h);
      Mat dr = drh.cwiseProduct(c.h_prev);
      dh_prev += drh.cwiseProduct(c.r);
      dgates.topRows(h) = dz.array() * c.z.array() * (1.0 - c.z.array());
      dgates.middleRows(h, h) = dr.array() * c.r.array() * (1.0 - c.r.array());
      gmat(weights_[1]).topRows(2 * h) += dgates.topRows(2 * h) * c.h_prev.transpose();
      dh_prev += u.topRows(2 * h).transpose() * dgates.topRows(2 * h);
      gmat(weights_[0]) += dgates * c.input.transpose();
      gvec(biases_[0]) += dgates.rowwise().sum();
      if (d_inputs) (*d_inputs)[tt] = weight(v, weights_[0]).transpose() * dgates;
      dh_next = std::move(dh_prev);
    } else {
      Mat da = std::move(demb);
      for (std::size_t l = weights_.size(); l-- > 0;) {
        const Mat& out = c.layer_out[l];
        Mat dpre = da.array() * (1.0 - out.array().square());
        const Mat& in = l == 0 ? c.input : c.layer_out[l - 1];
        gmat(weights_[l]) += dpre * in.transpose();
        gvec(biases_[l]) += dpre.rowwise().sum();
        da = weight(v, weights_[l]).transpose() * dpre;
      }
      if (d_inputs) (*d_inputs)[tt] = std::move(da);
    }
  }
}

void Network::infer(const ParamStore& params, const Eigen::Ref<const Vec>& x, Vec& hidden, Vec& logits,
                    double* value) const {
  check_dim("observation length", spec_.input_dim, x.size());
  const Vec& v = params.values();
  const Eigen::Index h = spec_.hidden_dim;
  std::uint64_t& flops = flop_counter();
  Vec emb;
  if (spec_.recurrent) {
    if (hidden.size() != h) hidden = Vec::Zero(h);
    auto u = weight(v, weights_[1]);
    Vec gx = weight(v, weights_[0]) * x + bias(v, biases_[0]);
    Vec gh = u.topRows(2 * h) * hidden;
    Vec z = (1.0 + (-(gx.head(h) + gh.head(h))).array().exp()).inverse().matrix();
    Vec r = (1.0 + (-(gx.segment(h, h) + gh.tail(h))).array().exp()).inverse().matrix();
    Vec n = (gx.tail(h) + u.bottomRows(h) * r.cwiseProduct(hidden)).array().tanh().matrix();
    hidden = (1.0 - z.array()) * n.array() + z.array() * hidden.array();
    emb = hidden;
    flops += 2 * static_cast<std::uint64_t>(3 * h) * (x.size() + h) + 12 * h + 5 * h;
  } else {
    emb = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      emb = (weight(v, weights_[l]) * emb + bias(v, biases_[l])).array().tanh().matrix();
      flops += 2 * static_cast<std::uint64_t>(weights_[l].rows * weights_[l].cols) + 4 * weights_[l].rows;
    }
  }
  if (spec_.action_dim > 0) {
    logits = weight(v, policy_w_) * emb + bias(v, policy_b_);
    flops += 2 * static_cast<std::uint64_t>(policy_w_.rows * policy_w_.cols);
  }
  if (spec_.has_value_head && value) {
    *value = weight(v, value_w_).row(0).dot(emb) + v[value_b_.offset];
    flops += 2 * static_cast<std::uint64_t>(value_w_.cols);
  }
}

std::vector<ForwardResult> actor_forward(const Network& net, const ParamStore& params, const Mat& obs_seq,
                                         const Vec& initial_hidden) {
  const NetworkSpec& spec = net.spec();
  check_dim("observation columns", spec.input_dim, obs_seq.cols());
  if (spec.recurrent) check_dim("initial hidden length", spec.hidden_dim, initial_hidden.size());
  std::vector<Mat> inputs;
  for (Eigen::Index t = 0; t < obs_seq.rows(); ++t) inputs.push_back(obs_seq.row(t).transpose());
  Mat h0;
  if (spec.recurrent) h0 = initial_hidden;
  Trace tr = net.forward(params, inputs, h0);
  std::vector<ForwardResult> out(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (spec.action_dim > 0) out[t].logits = tr.logits[t].col(0);
    out[t].embedding = tr.embedding[t].col(0);
    if (spec.has_value_head) out[t].value = tr.value[t](0);
  }
  return out;
}

double critic_forward(const Network& net, const ParamStore& params, const Vec& state) {
  if (!net.spec().has_value_head) throw Error(ErrorCode::kInvalidArgument, "network has no value head");
  check_dim("state length", net.spec().input_dim, state.size());
  Trace tr = net.forward(params, {state});
  return tr.value[0](0);
}

}  // namespace mdist

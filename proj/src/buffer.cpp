#include "mdist/buffer.hpp"

#include <cmath>
#include <cstring>

namespace mdist {

namespace {

constexpr char kMagic[8] = {'M', 'D', 'B', 'U', 'F', '\0', '\0', '\0'};

bool same_bits(const Vec& a, const Vec& b) {
  return a.size() == b.size() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

void write_vec(ByteWriter& w, const Vec& v, Eigen::Index expected, const char* what) {
  check_dim(what, expected, v.size());
  w.f64s(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

Vec read_vec(ByteReader& r, Eigen::Index n) {
  Vec v(n);
  r.f64s(std::span<double>(v.data(), static_cast<std::size_t>(n)));
  return v;
}

std::string encode_metadata(const BufferMetadata& m) {
  ByteWriter w;
  w.u64(m.config_hash);
  w.u64(m.env_config_hash);
  w.u64(m.teacher_hash);
  w.u64(m.seed);
  w.str(m.mask_table);
  w.i32(m.n_agents);
  w.i32(m.state_dim);
  w.i32(m.obs_dim);
  w.i32(m.action_dim);
  w.i32(m.embedding_dim);
  return w.bytes();
}

}  // namespace

bool AgentRecord::operator==(const AgentRecord& o) const {
  return action == o.action && active == o.active && same_bits(behavior_logp, o.behavior_logp) &&
         same_bits(obs_full, o.obs_full) && same_bits(obs_masked, o.obs_masked) &&
         same_bits(teacher_logits, o.teacher_logits) && same_bits(teacher_embedding, o.teacher_embedding);
}

bool ExpertRecord::operator==(const ExpertRecord& o) const {
  return done == o.done && same_bits(reward, o.reward) && same_bits(value, o.value) &&
         same_bits(next_value, o.next_value) && same_bits(state, o.state) && same_bits(next_state, o.next_state) &&
         agents == o.agents;
}

std::size_t ExpertBuffer::size() const {
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.size();
  return n;
}

std::size_t ExpertBuffer::shortest_episode() const {
  if (episodes.empty()) return 0;
  std::size_t n = episodes.front().size();
  for (const auto& ep : episodes) n = std::min(n, ep.size());
  return n;
}

std::uint64_t ExpertBuffer::content_hash() const { return fnv1a(encode_buffer(*this)); }

ExpertBuffer record_expert(const Environment& env_proto, const TeacherNets& teacher, const MaskSpec& masks,
                           int n_episodes, const BufferMetadata& provenance) {
  if (n_episodes < 1) throw Error(ErrorCode::kInvalidArgument, "expert collection needs at least one episode");
  const int n = env_proto.n_agents();
  check_dim("teacher agent count", n, teacher.n_agents);
  check_dim("teacher observation width", env_proto.obs_dim(), teacher.obs_dim());
  const MaskSpec table = masks.agents.empty() ? MaskSpec::full(n) : masks;
  const BlockLayout layout = env_proto.layout();
  table.validate(layout, n);

  ExpertBuffer buf;
  buf.metadata = provenance;
  buf.metadata.n_agents = n;
  buf.metadata.state_dim = env_proto.state_dim();
  buf.metadata.obs_dim = env_proto.obs_dim();
  buf.metadata.action_dim = env_proto.num_actions();
  buf.metadata.embedding_dim = teacher.actor.spec().embedding_dim();
  const std::uint64_t seed = provenance.seed;
  auto env = env_proto.clone();
  auto value_of = [&](const Vec& s) { return teacher.value(s); };
  for (int ep = 0; ep < n_episodes; ++ep) {
    const std::uint64_t ep_seed = derive_seed(seed, static_cast<std::uint64_t>(ep));
    Rng mask_rng(derive_seed(ep_seed, 1));
    Rng act_rng(derive_seed(ep_seed, 2));
    const EpisodeMask mask(table, layout, mask_rng);
    StepOutcome o = env->reset(ep_seed);
    double v = value_of(o.state);
    std::vector<ExpertRecord> records;
    std::vector<int> actions(n);
    while (!o.done) {
      const std::vector<bool> active = env->active();
      Mat x(teacher.actor.spec().input_dim, n);
      for (int i = 0; i < n; ++i) x.col(i) = teacher.actor_input(o.observations[i], i);
      const Trace tr = teacher.actor.forward(teacher.actor_params, {x});
      ExpertRecord rec;
      rec.state = o.state;
      rec.value = v;
      for (int i = 0; i < n; ++i) {
        AgentRecord ar;
        ar.obs_full = o.observations[i];
        ar.obs_masked = mask.apply(i, o.observations[i]);
        ar.teacher_logits = tr.logits[0].col(i);
        ar.teacher_embedding = tr.embedding[0].col(i);
        ar.active = active[i];
        if (active[i]) {
          const Vec logp = log_softmax_temp(ar.teacher_logits, 1.0);
          ar.action = sample_categorical(logp.array().exp().matrix(), act_rng);
          ar.behavior_logp = logp[ar.action];
        }
        actions[i] = ar.action;
        rec.agents.push_back(std::move(ar));
      }
      o = env->step(actions);
      rec.next_state = o.state;
      rec.reward = o.reward;
      rec.done = o.done;
      v = value_of(o.state);
      rec.next_value = v;
      records.push_back(std::move(rec));
    }
    buf.episodes.push_back(std::move(records));
  }
  return buf;
}

std::string encode_buffer(const ExpertBuffer& buffer) {
  const BufferMetadata& m = buffer.metadata;
  ByteWriter w;
  w.raw(std::string_view(kMagic, sizeof(kMagic)));
  w.u32(kBufferVersion);
  const std::string meta = encode_metadata(m);
  w.raw(meta);
  w.u64(fnv1a(meta));
  w.u64(buffer.episodes.size());
  for (const auto& ep : buffer.episodes) {
    w.u64(ep.size());
    for (const ExpertRecord& r : ep) {
      write_vec(w, r.state, m.state_dim, "record state");
      write_vec(w, r.next_state, m.state_dim, "record next state");
      w.f64(r.reward);
      w.u8(r.done ? 1 : 0);
      w.f64(r.value);
      w.f64(r.next_value);
      check_dim("record agent count", m.n_agents, static_cast<Eigen::Index>(r.agents.size()));
      for (const AgentRecord& a : r.agents) {
        w.u8(a.active ? 1 : 0);
        w.i32(a.action);
        w.f64(a.behavior_logp);
        write_vec(w, a.obs_full, m.obs_dim, "record full observation");
        write_vec(w, a.obs_masked, m.obs_dim, "record masked observation");
        write_vec(w, a.teacher_logits, m.action_dim, "record teacher logits");
        write_vec(w, a.teacher_embedding, m.embedding_dim, "record teacher embedding");
      }
    }
  }
  w.u64(fnv1a(w.bytes()));
  return w.bytes();
}

namespace {

ExpertBuffer decode_buffer_body(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::kCorrupt, "not an expert buffer (bad magic)");
  r.raw(sizeof(kMagic));
  const std::uint32_t version = r.u32();
  if (version != kBufferVersion)
    throw Error(ErrorCode::kVersionMismatch,
                "buffer version " + std::to_string(version) + ", expected " + std::to_string(kBufferVersion));
  ExpertBuffer buf;
  BufferMetadata& m = buf.metadata;
  const std::size_t meta_begin = r.position();
  m.config_hash = r.u64();
  m.env_config_hash = r.u64();
  m.teacher_hash = r.u64();
  m.seed = r.u64();
  m.mask_table = r.str();
  m.n_agents = r.i32();
  m.state_dim = r.i32();
  m.obs_dim = r.i32();
  m.action_dim = r.i32();
  m.embedding_dim = r.i32();
  const std::size_t meta_end = r.position();
  if (r.u64() != fnv1a(bytes.substr(meta_begin, meta_end - meta_begin)))
    throw Error(ErrorCode::kHashMismatch, "buffer metadata does not match its recorded hash");
  constexpr std::int32_t kMaxDim = 1 << 20;
  for (std::int32_t d : {m.n_agents, m.state_dim, m.obs_dim, m.action_dim, m.embedding_dim})
    if (d < 0 || d > kMaxDim) throw Error(ErrorCode::kCorrupt, "buffer metadata has an invalid dimension");

  const std::size_t record_bytes =
      8 * (2 * static_cast<std::size_t>(m.state_dim) + 3) + 1 +
      static_cast<std::size_t>(m.n_agents) * (1 + 4 + 8 * (1 + 2 * static_cast<std::size_t>(m.obs_dim) +
                                                          static_cast<std::size_t>(m.action_dim) +
                                                          static_cast<std::size_t>(m.embedding_dim)));
  const std::uint64_t n_episodes = r.u64();
  if (n_episodes > r.remaining() / 8) throw Error(ErrorCode::kCorrupt, "buffer episode count exceeds file size");
  for (std::uint64_t e = 0; e < n_episodes; ++e) {
    const std::uint64_t len = r.u64();
    if (len > r.remaining() / std::max<std::size_t>(record_bytes, 1))
      throw Error(ErrorCode::kCorrupt, "buffer episode length exceeds file size");
    std::vector<ExpertRecord> ep(len);
    for (ExpertRecord& rec : ep) {
      rec.state = read_vec(r, m.state_dim);
      rec.next_state = read_vec(r, m.state_dim);
      rec.reward = r.f64();
      rec.done = r.u8() != 0;
      rec.value = r.f64();
      rec.next_value = r.f64();
      rec.agents.resize(m.n_agents);
      for (AgentRecord& a : rec.agents) {
        a.active = r.u8() != 0;
        a.action = r.i32();
        a.behavior_logp = r.f64();
        a.obs_full = read_vec(r, m.obs_dim);
        a.obs_masked = read_vec(r, m.obs_dim);
        a.teacher_logits = read_vec(r, m.action_dim);
        a.teacher_embedding = read_vec(r, m.embedding_dim);
        if (a.action < 0 || a.action >= std::max(m.action_dim, 1))
          throw Error(ErrorCode::kCorrupt, "buffer record has an out-of-range action");
      }
    }
    buf.episodes.push_back(std::move(ep));
  }
  const std::size_t body_end = r.position();
  const std::uint64_t stored = r.u64();
  if (r.remaining() != 0) throw Error(ErrorCode::kCorrupt, "trailing bytes after buffer checksum");
  if (stored != fnv1a(bytes.substr(0, body_end))) throw Error(ErrorCode::kCorrupt, "buffer checksum mismatch");
  return buf;
}

}  // namespace

ExpertBuffer decode_buffer(std::string_view bytes) {
  try {
    return decode_buffer_body(bytes);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kCorrupt) throw;
    const std::string detail = e.what();
    throw Error(ErrorCode::kCorrupt, "corrupt buffer (" + detail.substr(detail.find(": ") + 2) + ")");
  }
}

void save_buffer(const ExpertBuffer& buffer, const std::string& path) { write_file(path, encode_buffer(buffer)); }

ExpertBuffer load_buffer(const std::string& path) { return decode_buffer(read_file(path)); }

std::vector<Segment> sample_minibatch(const ExpertBuffer& buffer, int batch_size, int segment_length, Rng& rng) {
  if (batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch size must be positive");
  if (segment_length < 1) throw Error(ErrorCode::kInvalidArgument, "segment length must be positive");
  if (buffer.episodes.empty()) throw Error(ErrorCode::kInvalidArgument, "cannot sample from an empty buffer");
  std::vector<std::size_t> eligible;
  std::size_t longest = 0;
  for (std::size_t e = 0; e < buffer.episodes.size(); ++e) {
    longest = std::max(longest, buffer.episodes[e].size());
    if (buffer.episodes[e].size() >= static_cast<std::size_t>(segment_length)) eligible.push_back(e);
  }
  if (eligible.empty())
    throw Error(ErrorCode::kInvalidArgument, "segment length " + std::to_string(segment_length) +
                                                 " exceeds the longest episode (" + std::to_string(longest) + ")");
  std::vector<Segment> out;
  out.reserve(batch_size);
  const int n_eps = static_cast<int>(eligible.size());
  for (int k = 0; k < batch_size; ++k) {
    const std::size_t e = eligible[static_cast<std::size_t>(uniform_int(rng, 0, n_eps - 1))];
    const int last = static_cast<int>(buffer.episodes[e].size()) - segment_length;
    out.push_back({e, static_cast<std::size_t>(uniform_int(rng, 0, last)), static_cast<std::size_t>(segment_length)});
  }
  return out;
}

void check_segment(const ExpertBuffer& buffer, const Segment& seg) {
  if (seg.episode >= buffer.episodes.size()) throw Error(ErrorCode::kInvalidArgument, "segment episode out of range");
  const auto& ep = buffer.episodes[seg.episode];
  if (seg.start + seg.length > ep.size()) throw Error(ErrorCode::kInvalidArgument, "segment crosses episode end");
  for (std::size_t t = seg.start; t < seg.start + seg.length; ++t) {
    const ExpertRecord& r = ep[t];
    if (t + 1 < ep.size()) {
      if (r.done) throw Error(ErrorCode::kCorrupt, "done flag set before the episode end");
      if (!same_bits(r.next_value, ep[t + 1].value))
        throw Error(ErrorCode::kCorrupt, "stored V(s') does not chain to the next V(s)");
    }
    for (const AgentRecord& a : r.agents) {
      if (!a.active) continue;
      const Vec logp = log_softmax_temp(a.teacher_logits, 1.0);
      if (std::abs(logp[a.action] - a.behavior_logp) > 1e-9)
        throw Error(ErrorCode::kCorrupt, "stored log-prob does not match stored logits");
      for (Eigen::Index j = 0; j < a.obs_full.size(); ++j)
        if (a.obs_masked[j] != 0.0 && a.obs_masked[j] != a.obs_full[j])
          throw Error(ErrorCode::kCorrupt, "masked observation entry differs from the full observation");
    }
  }
}

}  // namespace mdist

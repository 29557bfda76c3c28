#pragma once

#include <string>
#include <vector>

#include "mdist/envs.hpp"
#include "mdist/teacher.hpp"

namespace mdist {

inline constexpr std::uint32_t kBufferVersion = 1;

/// Per-agent slice of an expert record.
struct AgentRecord {
  Vec obs_full;    // o_T
  Vec obs_masked;  // o_S = apply_mask(o_T)
  int action = 0;
  double behavior_logp = 0.0;  // log pi_T(a | o_T) at collection time
  Vec teacher_logits;
  Vec teacher_embedding;  // phi_T
  bool active = true;

  bool operator==(const AgentRecord& o) const;
};

struct ExpertRecord {
  Vec state;       // s
  Vec next_state;  // s'
  double reward = 0.0;
  bool done = false;
  double value = 0.0;       // V_T(s)
  double next_value = 0.0;  // V_T(s')
  std::vector<AgentRecord> agents;

  bool operator==(const ExpertRecord& o) const;
};

struct BufferMetadata {
  std::uint64_t config_hash = 0;  // experiment config the buffer was produced under
  std::uint64_t env_config_hash = 0;
  std::uint64_t teacher_hash = 0;
  std::uint64_t seed = 0;
  std::string mask_table;  // JSON text of the mask table used for o_S
  std::int32_t n_agents = 0;
  std::int32_t state_dim = 0;
  std::int32_t obs_dim = 0;
  std::int32_t action_dim = 0;
  std::int32_t embedding_dim = 0;

  bool operator==(const BufferMetadata&) const = default;
};

struct ExpertBuffer {
  BufferMetadata metadata;
  std::vector<std::vector<ExpertRecord>> episodes;

  std::size_t size() const;
  std::size_t shortest_episode() const;
  /// FNV-1a of the encoded buffer; constant while the buffer is untouched.
  std::uint64_t content_hash() const;
  bool operator==(const ExpertBuffer&) const = default;
};

/// Rolls out the frozen teacher stochastically and stores everything Stage 2
/// needs. Hash and seed fields of `provenance` are copied into the metadata;
/// shape fields are filled in from the environment and teacher.
ExpertBuffer record_expert(const Environment& env_proto, const TeacherNets& teacher, const MaskSpec& masks,
                           int n_episodes, const BufferMetadata& provenance);

/// Layout (little-endian):
///   "MDBUF\0\0\0" | u32 version | metadata block | u64 FNV-1a(metadata block)
///   u64 episode count | per episode: u64 length | fixed-width records
///   u64 FNV-1a of every preceding byte
/// metadata block: u64 config hash | u64 env hash | u64 teacher hash | u64 seed | str mask table |
///   i32 n_agents, state_dim, obs_dim, action_dim, embedding_dim
/// record: f64[state_dim] s | f64[state_dim] s' | f64 r | u8 done | f64 V(s) |
///   f64 V(s') | per agent: u8 active | i32 action | f64 logp |
///   f64[obs_dim] o_T | f64[obs_dim] o_S | f64[action_dim] logits |
///   f64[embedding_dim] phi_T
std::string encode_buffer(const ExpertBuffer& buffer);
/// Throws kCorrupt, kVersionMismatch or kHashMismatch.
ExpertBuffer decode_buffer(std::string_view bytes);
void save_buffer(const ExpertBuffer& buffer, const std::string& path);
ExpertBuffer load_buffer(const std::string& path);

/// A contiguous window of one episode.
struct Segment {
  std::size_t episode = 0;
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Uniform episode among those at least segment_length long, then uniform
/// start; segments never cross an episode boundary.
std::vector<Segment> sample_minibatch(const ExpertBuffer& buffer, int batch_size, int segment_length, Rng& rng);

/// Checks the record invariants on a segment (stored log-prob reproduces
/// from stored logits, V(s') chains to the next V(s), masked entries zero).
void check_segment(const ExpertBuffer& buffer, const Segment& seg);

}  // namespace mdist

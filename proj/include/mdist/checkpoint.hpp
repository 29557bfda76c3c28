#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdist/netcore.hpp"

namespace mdist {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// One named tensor in a checkpoint. Network parameters carry their spec;
/// plain matrices (role projections) do not.
struct CheckpointEntry {
  std::string name;
  std::optional<NetworkSpec> spec;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;
  Vec values;

  bool operator==(const CheckpointEntry& o) const;
};

/// Layout (all little-endian):
///   "MDCKPT\0\0" | u32 version | u64 seed | str metadata | u32 entry count
///   per entry: str name | u8 has_spec | [i32 input, hidden, layers, actions,
///              u8 recurrent, u8 value_head, u8 tap] | u64 rows | u64 cols |
///              rows*cols f64 (column-major)
///   u64 FNV-1a of every preceding byte
struct Checkpoint {
  std::uint64_t seed = 0;
  std::string metadata;  // JSON text: config hash, role, frozen flag
  std::vector<CheckpointEntry> entries;

  void add_network(const std::string& name, const NetworkSpec& spec, const ParamStore& params);
  void add_matrix(const std::string& name, const Mat& m);
  const CheckpointEntry& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  /// Rebuilds a parameter store (fresh moments) from a network entry.
  ParamStore params(const std::string& name) const;
  NetworkSpec spec(const std::string& name) const;
  Mat matrix(const std::string& name) const;

  bool operator==(const Checkpoint&) const = default;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws kCorrupt (bad magic, truncation, checksum) or kVersionMismatch.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// FNV-1a over a file's bytes; the provenance hash recorded by downstream artifacts.
std::uint64_t file_hash(const std::string& path);

}  // namespace mdist

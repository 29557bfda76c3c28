#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mdist/distill.hpp"
#include "mdist/envs.hpp"
#include "mdist/teacher.hpp"

namespace mdist {

inline constexpr const char* kEnvOverridePrefix = "MDIST_";

struct BufferSection {
  int episodes = 200;

  bool operator==(const BufferSection&) const = default;
};

struct EvalSection {
  int episodes = 50;
  bool greedy = true;
  int bucket_width = 5;  // timesteps per heatmap row
  int tps_episodes = 5;
  bool ablation = false;  // also distill with alpha = beta = lambda_str = lambda_role = 0

  bool operator==(const EvalSection&) const = default;
};

/// Everything a run needs; serialized as JSON (schema in README).
struct ExperimentConfig {
  std::string name = "experiment";
  EnvConfig env;
  TeacherConfig teacher;
  BufferSection buffer;
  DistillConfig distill;  // distill.segment_length lives under "buffer" in the file
  EvalSection eval;
  std::vector<std::uint64_t> seeds{0};

  /// Throws kConfig on inconsistent agent counts, student widths outside
  /// {16, 32}, invalid masks or non-positive budgets.
  void validate() const;
};

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

std::string config_to_json(const ExperimentConfig& cfg);
/// Unknown keys are rejected; missing keys keep their defaults.
ExperimentConfig config_from_json(const std::string& text);

/// Applies KEY=VALUE overrides where KEY is a path with "__" between levels,
/// e.g. DISTILL__WEIGHTS__ALPHA. Values are parsed as JSON, falling back to a
/// plain string.
std::string apply_overrides(const std::string& json_text, const std::vector<std::pair<std::string, std::string>>& kv);
/// Overrides from process environment variables starting with `prefix`.
std::vector<std::pair<std::string, std::string>> env_overrides(const std::string& prefix = kEnvOverridePrefix);

/// Reads a config file and applies environment overrides.
ExperimentConfig load_config(const std::string& path, bool use_env = true);

/// FNV-1a over the canonical (sorted-key, compact) serialization.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::uint64_t env_config_hash(const EnvConfig& env);

std::string mask_table_json(const MaskSpec& masks);
MaskSpec mask_table_from_json(const std::string& text);

}  // namespace mdist

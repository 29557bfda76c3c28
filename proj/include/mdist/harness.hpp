#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdist/config.hpp"

namespace mdist {

enum class Stage { kTeacher, kCollect, kDistill, kEvaluate, kReport, kAll };

Stage stage_from_string(const std::string& s);
std::string_view to_string(Stage s);

/// File names inside one seed directory.
namespace artifact {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kTeacher = "teacher.ckpt";
inline constexpr const char* kTeacherMetrics = "teacher_metrics.csv";
inline constexpr const char* kBuffer = "buffer.bin";
inline constexpr const char* kStudents = "students.ckpt";
inline constexpr const char* kDistillMetrics = "distill_metrics.csv";
inline constexpr const char* kAblation = "students_ablation.ckpt";
inline constexpr const char* kAblationMetrics = "distill_ablation_metrics.csv";
inline constexpr const char* kEval = "eval.csv";
inline constexpr const char* kCosts = "costs.csv";
inline constexpr const char* kTiming = "timing.csv";
inline constexpr const char* kSummary = "summary.json";
}  // namespace artifact

struct SummaryRecord {
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  double teacher_return = 0.0, teacher_win_rate = 0.0;
  double student_return = 0.0, student_win_rate = 0.0;
  double random_return = 0.0, random_win_rate = 0.0;
  double return_retention_pct = 0.0;
  double win_retention_pct = 0.0;
  std::int64_t teacher_flops = 0, student_flops = 0;
  std::int64_t teacher_params = 0, student_params = 0;
  double flops_ratio = 0.0;
  double js_student = 0.0;  // heatmap distance to the teacher
  std::optional<double> js_ablation;
  std::optional<double> ablation_return, ablation_win_rate;
  // Wall-clock, machine dependent and excluded from determinism checks.
  double teacher_ms = 0.0, student_ms = 0.0;

  /// Every field except the timings.
  bool same_outcome(const SummaryRecord& o) const;
};

std::string summary_to_json(const SummaryRecord& s);
SummaryRecord summary_from_json(const std::string& text);

struct RunArtifacts {
  std::string dir;
  std::optional<SummaryRecord> summary;  // set once the evaluate stage has run
};

/// Seed directory used by run_pipeline: <out_dir>/seed_<seed>.
std::string seed_dir(const std::string& out_dir, std::uint64_t seed);

/// Runs one stage (or every stage in order). Under kAll, stages whose
/// artifacts already exist with matching provenance are skipped. Single
/// stages throw kStageDependency when an upstream artifact is missing.
RunArtifacts run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                          Stage stage = Stage::kAll);

/// Runs every configured seed and writes <out_dir>/summary.csv with one row
/// per seed plus a mean/std aggregate row.
std::vector<SummaryRecord> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

/// Aggregate row text for a summary column: "mean±std".
std::string mean_std(const std::vector<double>& v);

/// Checks that every artifact in a seed directory embeds the config hash and
/// seed. Returns one message per problem (empty when clean).
std::vector<std::string> verify_provenance(const std::string& dir, const ExperimentConfig& cfg, std::uint64_t seed);

/// 0 ok, 2 config, 3 stage dependency, 4 divergence, 1 anything else.
int exit_code_for(ErrorCode code);

}  // namespace mdist

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "mdist/buffer.hpp"
#include "mdist/checkpoint.hpp"
#include "mdist/config.hpp"
#include "mdist/distill.hpp"
#include "mdist/harness.hpp"
#include "mdist/report.hpp"

namespace fs = std::filesystem;
using namespace mdist;

namespace {

std::string ckpt_metadata(std::uint64_t hash, std::uint64_t seed, const std::string& role) {
  return "{\"config_hash\":\"" + hex64(hash) + "\",\"config_name\":\"cli\",\"role\":\"" + role +
         "\",\"seed\":" + std::to_string(seed) + "}";
}

void print_summary(const SummaryRecord& s) {
  std::cout << "seed " << s.seed << ": teacher return " << s.teacher_return << " win " << s.teacher_win_rate
            << " | student return " << s.student_return << " win " << s.student_win_rate << " | retention "
            << s.return_retention_pct << "% (return), " << s.win_retention_pct << "% (win) | FLOPs ratio "
            << s.flops_ratio << " | ms/step " << s.teacher_ms << " -> " << s.student_ms << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage multi-agent policy distillation"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs", stage = "all";
  std::optional<std::uint64_t> seed;
  std::string teacher_ckpt, buffer_path, out_path;
  int episodes = 0;

  auto* train = app.add_subcommand("train-teacher", "Stage 1: MAPPO teacher with a centralized critic");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--seed", seed, "run seed (default: first configured seed)");
  train->add_option("--out-dir", out_dir, "artifact root");

  auto* collect = app.add_subcommand("collect", "roll out the frozen teacher into an expert buffer");
  collect->add_option("--config", config_path, "experiment config (JSON)")->required();
  collect->add_option("--teacher-ckpt", teacher_ckpt, "frozen teacher checkpoint")->required();
  collect->add_option("--episodes", episodes, "episodes to record (default: buffer.episodes)");
  collect->add_option("--seed", seed, "run seed");
  collect->add_option("--out", out_path, "buffer file")->required();

  auto* distill = app.add_subcommand("distill", "Stage 2: critic-free student distillation");
  distill->add_option("--config", config_path, "experiment config (JSON)")->required();
  distill->add_option("--buffer", buffer_path, "expert buffer")->required();
  distill->add_option("--teacher-ckpt", teacher_ckpt, "teacher checkpoint the buffer came from")->required();
  distill->add_option("--out-dir", out_dir, "where students.ckpt and distill_metrics.csv go");
  distill->add_option("--seed", seed, "run seed");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate teacher, students and baselines of one seed");
  evaluate->add_option("--config", config_path, "experiment config (JSON)")->required();
  evaluate->add_option("--seed", seed, "run seed");
  evaluate->add_option("--out-dir", out_dir, "artifact root");

  auto* report = app.add_subcommand("report", "render CSV tables and SVG plots for a seed directory");
  report->add_option("--out-dir", out_dir, "seed directory (contains eval.csv)")->required();

  auto* run = app.add_subcommand("run", "full pipeline");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--seed", seed, "single seed (default: every configured seed)");
  run->add_option("--out-dir", out_dir, "artifact root");
  run->add_option("--stage", stage, "teacher | collect | distill | evaluate | report | all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*report) {
      write_report(out_dir);
      std::cout << "report written to " << (fs::path(out_dir) / "report").string() << "\n";
      return 0;
    }
    const ExperimentConfig cfg = load_config(config_path);
    const std::uint64_t s = seed.value_or(cfg.seeds.front());
    const std::uint64_t hash = config_hash(cfg);

    if (*train) {
      run_pipeline(cfg, s, out_dir, Stage::kTeacher);
      std::cout << "teacher written to " << seed_dir(out_dir, s) << "\n";
    } else if (*collect) {
      const Checkpoint ck = load_checkpoint(teacher_ckpt);
      const TeacherNets teacher = teacher_from_checkpoint(ck);
      const auto env = make_env(cfg.env);
      BufferMetadata prov;
      prov.config_hash = hash;
      prov.env_config_hash = env_config_hash(cfg.env);
      prov.teacher_hash = file_hash(teacher_ckpt);
      prov.seed = derive_seed(s, 200);
      prov.mask_table = mask_table_json(cfg.env.masks);
      const ExpertBuffer buf =
          record_expert(*env, teacher, cfg.env.masks, episodes > 0 ? episodes : cfg.buffer.episodes, prov);
      save_buffer(buf, out_path);
      std::cout << "recorded " << buf.episodes.size() << " episodes (" << buf.size() << " steps) to " << out_path
                << "\n";
    } else if (*distill) {
      if (!fs::exists(buffer_path)) throw Error(ErrorCode::kStageDependency, "stage dependency unmet: " + buffer_path);
      if (!fs::exists(teacher_ckpt)) throw Error(ErrorCode::kStageDependency, "stage dependency unmet: " + teacher_ckpt);
      const ExpertBuffer buf = load_buffer(buffer_path);
      const DistillResult res = distill_run(cfg.env, cfg.distill, buf, file_hash(teacher_ckpt), derive_seed(s, 300));
      fs::create_directories(out_dir);
      std::vector<std::vector<std::string>> rows;
      for (const auto& h : res.history)
        rows.push_back({std::to_string(h.iteration), fmt(h.loss.total), fmt(h.loss.ppo.sum()), fmt(h.loss.kl.sum()),
                        fmt(h.loss.ce.sum()), fmt(h.loss.structure), fmt(h.loss.role), fmt(h.loss.entropy.sum()),
                        fmt(h.eval_return), fmt(h.eval_win_rate)});
      write_csv((fs::path(out_dir) / artifact::kDistillMetrics).string(), hash, s,
                {"iter", "L_total", "L_PPO", "L_KL", "L_CE", "L_str", "L_role", "H", "eval_return", "eval_win_rate"},
                rows);
      save_checkpoint(students_checkpoint(res.students, s, ckpt_metadata(hash, s, "student")),
                      (fs::path(out_dir) / artifact::kStudents).string());
      std::cout << "students written to " << out_dir << "\n";
    } else if (*evaluate) {
      const RunArtifacts a = run_pipeline(cfg, s, out_dir, Stage::kEvaluate);
      print_summary(*a.summary);
    } else if (*run) {
      const Stage st = stage_from_string(stage);
      if (seed || st != Stage::kAll) {
        const RunArtifacts a = run_pipeline(cfg, s, out_dir, st);
        if (a.summary) print_summary(*a.summary);
      } else {
        for (const SummaryRecord& rec : run_experiment(cfg, out_dir)) print_summary(rec);
        std::cout << "summary: " << (fs::path(out_dir) / "summary.csv").string() << "\n";
      }
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

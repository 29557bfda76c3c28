#include "mdist/harness.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>

#include "json.hpp"
#include "mdist/buffer.hpp"
#include "mdist/checkpoint.hpp"
#include "mdist/policy.hpp"
#include "mdist/report.hpp"
#include "mdist/resource.hpp"

namespace fs = std::filesystem;

namespace mdist {

using nlohmann::json;

Stage stage_from_string(const std::string& s) {
  if (s == "teacher" || s == "train-teacher") return Stage::kTeacher;
  if (s == "collect") return Stage::kCollect;
  if (s == "distill") return Stage::kDistill;
  if (s == "evaluate") return Stage::kEvaluate;
  if (s == "report") return Stage::kReport;
  if (s == "all") return Stage::kAll;
  throw Error(ErrorCode::kConfig, "unknown stage '" + s + "'");
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kTeacher: return "teacher";
    case Stage::kCollect: return "collect";
    case Stage::kDistill: return "distill";
    case Stage::kEvaluate: return "evaluate";
    case Stage::kReport: return "report";
    case Stage::kAll: return "all";
  }
  return "?";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig: return 2;
    case ErrorCode::kStageDependency: return 3;
    case ErrorCode::kDivergence:
    case ErrorCode::kNonFinite: return 4;
    default: return 1;
  }
}

namespace {

bool same_double(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

bool same_opt(const std::optional<double>& a, const std::optional<double>& b) {
  return a.has_value() == b.has_value() && (!a || same_double(*a, *b));
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_from(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

}  // namespace

bool SummaryRecord::same_outcome(const SummaryRecord& o) const {
  return seed == o.seed && config_hash == o.config_hash && same_double(teacher_return, o.teacher_return) &&
         same_double(teacher_win_rate, o.teacher_win_rate) && same_double(student_return, o.student_return) &&
         same_double(student_win_rate, o.student_win_rate) && same_double(random_return, o.random_return) &&
         same_double(random_win_rate, o.random_win_rate) &&
         same_double(return_retention_pct, o.return_retention_pct) &&
         same_double(win_retention_pct, o.win_retention_pct) && teacher_flops == o.teacher_flops &&
         student_flops == o.student_flops && teacher_params == o.teacher_params &&
         student_params == o.student_params && same_double(flops_ratio, o.flops_ratio) &&
         same_double(js_student, o.js_student) && same_opt(js_ablation, o.js_ablation) &&
         same_opt(ablation_return, o.ablation_return) && same_opt(ablation_win_rate, o.ablation_win_rate);
}

std::string summary_to_json(const SummaryRecord& s) {
  json j;
  j["seed"] = s.seed;
  j["config_hash"] = hex64(s.config_hash);
  j["teacher_return"] = num_or_null(s.teacher_return);
  j["teacher_win_rate"] = num_or_null(s.teacher_win_rate);
  j["student_return"] = num_or_null(s.student_return);
  j["student_win_rate"] = num_or_null(s.student_win_rate);
  j["random_return"] = num_or_null(s.random_return);
  j["random_win_rate"] = num_or_null(s.random_win_rate);
  j["return_retention_pct"] = num_or_null(s.return_retention_pct);
  j["win_retention_pct"] = num_or_null(s.win_retention_pct);
  j["teacher_flops"] = s.teacher_flops;
  j["student_flops"] = s.student_flops;
  j["teacher_params"] = s.teacher_params;
  j["student_params"] = s.student_params;
  j["flops_ratio"] = num_or_null(s.flops_ratio);
  j["flop_convention"] = kFlopConvention;
  j["js_student"] = num_or_null(s.js_student);
  j["js_ablation"] = s.js_ablation ? num_or_null(*s.js_ablation) : json(nullptr);
  j["ablation_return"] = s.ablation_return ? num_or_null(*s.ablation_return) : json(nullptr);
  j["ablation_win_rate"] = s.ablation_win_rate ? num_or_null(*s.ablation_win_rate) : json(nullptr);
  j["teacher_ms_per_step"] = s.teacher_ms;
  j["student_ms_per_step"] = s.student_ms;
  return j.dump(2) + "\n";
}

SummaryRecord summary_from_json(const std::string& text) {
  SummaryRecord s;
  try {
    const json j = json::parse(text);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    s.teacher_return = num_from(j.at("teacher_return"));
    s.teacher_win_rate = num_from(j.at("teacher_win_rate"));
    s.student_return = num_from(j.at("student_return"));
    s.student_win_rate = num_from(j.at("student_win_rate"));
    s.random_return = num_from(j.at("random_return"));
    s.random_win_rate = num_from(j.at("random_win_rate"));
    s.return_retention_pct = num_from(j.at("return_retention_pct"));
    s.win_retention_pct = num_from(j.at("win_retention_pct"));
    s.teacher_flops = j.at("teacher_flops").get<std::int64_t>();
    s.student_flops = j.at("student_flops").get<std::int64_t>();
    s.teacher_params = j.at("teacher_params").get<std::int64_t>();
    s.student_params = j.at("student_params").get<std::int64_t>();
    s.flops_ratio = num_from(j.at("flops_ratio"));
    s.js_student = num_from(j.at("js_student"));
    if (!j.at("js_ablation").is_null()) s.js_ablation = j.at("js_ablation").get<double>();
    if (!j.at("ablation_return").is_null()) s.ablation_return = j.at("ablation_return").get<double>();
    if (!j.at("ablation_win_rate").is_null()) s.ablation_win_rate = j.at("ablation_win_rate").get<double>();
    s.teacher_ms = j.at("teacher_ms_per_step").get<double>();
    s.student_ms = j.at("student_ms_per_step").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("malformed summary record: ") + e.what());
  }
  return s;
}

std::string seed_dir(const std::string& out_dir, std::uint64_t seed) {
  return (fs::path(out_dir) / ("seed_" + std::to_string(seed))).string();
}

namespace {

struct Ctx {
  const ExperimentConfig& cfg;
  std::uint64_t seed;
  std::uint64_t hash;
  fs::path dir;

  std::string path(const char* name) const { return (dir / name).string(); }
  bool exists(const char* name) const { return fs::exists(dir / name); }
  std::string metadata(const std::string& role) const {
    json j{{"role", role}, {"config_hash", hex64(hash)}, {"seed", seed}, {"config_name", cfg.name}};
    if (role == "teacher") j["frozen"] = true;
    return j.dump();
  }
  void require(const char* name, Stage stage) const {
    if (!exists(name))
      throw Error(ErrorCode::kStageDependency, "stage dependency unmet: " + std::string(to_string(stage)) +
                                                   " needs " + path(name));
  }
};

void check_ckpt_provenance(const Ctx& c, const Checkpoint& ck, const std::string& file) {
  json meta;
  try {
    meta = json::parse(ck.metadata);
  } catch (const json::exception&) {
    throw Error(ErrorCode::kCorrupt, file + ": checkpoint metadata is not JSON");
  }
  if (meta.value("config_hash", std::string()) != hex64(c.hash) || ck.seed != c.seed)
    throw Error(ErrorCode::kConfig,
                file + " was produced under a different config or seed; use a fresh --out-dir");
}

TeacherNets load_teacher(const Ctx& c) {
  const Checkpoint ck = load_checkpoint(c.path(artifact::kTeacher));
  check_ckpt_provenance(c, ck, c.path(artifact::kTeacher));
  return teacher_from_checkpoint(ck);
}

void write_teacher_metrics(const Ctx& c, const std::vector<TeacherIteration>& hist) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& h : hist)
    rows.push_back({std::to_string(h.iteration), fmt(h.return_mean), fmt(h.return_std), fmt(h.eval_return),
                    fmt(h.win_rate), fmt(h.update.policy_loss), fmt(h.update.value_loss), fmt(h.update.entropy),
                    fmt(h.update.clip_fraction), fmt(h.update.approx_kl)});
  write_csv(c.path(artifact::kTeacherMetrics), c.hash, c.seed,
            {"iter", "return_mean", "return_std", "eval_return", "eval_win_rate", "policy_loss", "value_loss",
             "entropy", "clip_fraction", "approx_kl"},
            rows);
}

void stage_teacher(const Ctx& c) {
  const TeacherTraining tt = train_teacher(c.cfg.env, c.cfg.teacher, derive_seed(c.seed, 100));
  write_teacher_metrics(c, tt.history);
  const std::string p = c.path(artifact::kTeacher);
  if (fs::exists(p)) fs::permissions(p, fs::perms::owner_write, fs::perm_options::add);
  save_checkpoint(teacher_checkpoint(tt.nets, c.seed, c.metadata("teacher")), p);
  fs::permissions(p, fs::perms::owner_read | fs::perms::group_read | fs::perms::others_read,
                  fs::perm_options::replace);
}

void stage_collect(const Ctx& c) {
  c.require(artifact::kTeacher, Stage::kCollect);
  const TeacherNets teacher = load_teacher(c);
  const auto env = make_env(c.cfg.env);
  BufferMetadata prov;
  prov.config_hash = c.hash;
  prov.env_config_hash = env_config_hash(c.cfg.env);
  prov.teacher_hash = file_hash(c.path(artifact::kTeacher));
  prov.seed = derive_seed(c.seed, 200);
  prov.mask_table = mask_table_json(c.cfg.env.masks);
  const ExpertBuffer buf = record_expert(*env, teacher, c.cfg.env.masks, c.cfg.buffer.episodes, prov);
  save_buffer(buf, c.path(artifact::kBuffer));
}

void write_distill_metrics(const Ctx& c, const char* name, const std::vector<DistillIteration>& hist) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& h : hist) {
    const LossBreakdown& l = h.loss;
    rows.push_back({std::to_string(h.iteration), fmt(l.total), fmt(l.ppo.sum()), fmt(l.kl.sum()), fmt(l.ce.sum()),
                    fmt(l.structure), fmt(l.role), fmt(l.entropy.sum()), fmt(h.eval_return), fmt(h.eval_win_rate)});
  }
  write_csv(c.path(name), c.hash, c.seed,
            {"iter", "L_total", "L_PPO", "L_KL", "L_CE", "L_str", "L_role", "H", "eval_return", "eval_win_rate"},
            rows);
}

void check_buffer_provenance(const Ctx& c, const ExpertBuffer& buf) {
  if (buf.metadata.config_hash != c.hash || buf.metadata.seed != derive_seed(c.seed, 200))
    throw Error(ErrorCode::kConfig, c.path(artifact::kBuffer) +
                                        " was produced under a different config or seed; use a fresh --out-dir");
}

void stage_distill(const Ctx& c) {
  c.require(artifact::kTeacher, Stage::kDistill);
  c.require(artifact::kBuffer, Stage::kDistill);
  const ExpertBuffer buf = load_buffer(c.path(artifact::kBuffer));
  check_buffer_provenance(c, buf);
  const std::uint64_t teacher_hash = file_hash(c.path(artifact::kTeacher));
  const DistillResult res = distill_run(c.cfg.env, c.cfg.distill, buf, teacher_hash, derive_seed(c.seed, 300));
  write_distill_metrics(c, artifact::kDistillMetrics, res.history);
  save_checkpoint(students_checkpoint(res.students, c.seed, c.metadata("student")), c.path(artifact::kStudents));
  if (c.cfg.eval.ablation) {
    DistillConfig ab = c.cfg.distill;
    ab.weights.alpha = ab.weights.beta = ab.weights.lambda_str = ab.weights.lambda_role = 0.0;
    const DistillResult ar = distill_run(c.cfg.env, ab, buf, teacher_hash, derive_seed(c.seed, 300));
    write_distill_metrics(c, artifact::kAblationMetrics, ar.history);
    save_checkpoint(students_checkpoint(ar.students, c.seed, c.metadata("ablation")), c.path(artifact::kAblation));
  }
}

StudentSet load_students(const Ctx& c, const char* name) {
  const Checkpoint ck = load_checkpoint(c.path(name));
  check_ckpt_provenance(c, ck, c.path(name));
  return students_from_checkpoint(ck);
}

double return_retention(double student, double teacher, double random) {
  return 100.0 * (student - random) / (teacher - random);
}

double win_retention(double student, double teacher) {
  return teacher > 0.0 ? 100.0 * student / teacher : std::numeric_limits<double>::quiet_NaN();
}

SummaryRecord stage_evaluate(const Ctx& c) {
  c.require(artifact::kTeacher, Stage::kEvaluate);
  c.require(artifact::kStudents, Stage::kEvaluate);
  if (c.cfg.eval.ablation) c.require(artifact::kAblation, Stage::kEvaluate);
  const TeacherNets teacher = load_teacher(c);
  const StudentSet students = load_students(c, artifact::kStudents);
  EnvConfig full = c.cfg.env;
  full.masks = {};
  const auto env = make_env(full);
  const BlockLayout layout = env->layout();
  const EvalSection& ev = c.cfg.eval;
  const std::uint64_t eval_seed = derive_seed(c.seed, 400);
  const double tau = c.cfg.distill.weights.tau;

  struct Entry {
    std::string name;
    EvalResult result;
  };
  std::vector<Entry> entries;
  TeacherPolicy tp(teacher);
  entries.push_back({"teacher", evaluate(tp, *env, ev.episodes, ev.greedy, eval_seed, ev.bucket_width)});
  StudentPolicy sp(students, c.cfg.env.masks, layout, tau);
  entries.push_back({"student", evaluate(sp, *env, ev.episodes, ev.greedy, eval_seed, ev.bucket_width)});
  RandomPolicy rp(env->num_actions());
  entries.push_back({"random", evaluate(rp, *env, ev.episodes, false, eval_seed, ev.bucket_width)});
  std::optional<StudentSet> ablation;
  if (ev.ablation) {
    ablation = load_students(c, artifact::kAblation);
    StudentPolicy ap(*ablation, c.cfg.env.masks, layout, tau);
    entries.push_back({"ablation", evaluate(ap, *env, ev.episodes, ev.greedy, eval_seed, ev.bucket_width)});
  }

  std::vector<std::vector<std::string>> rows;
  for (const Entry& e : entries) {
    rows.push_back({e.name, fmt(e.result.return_mean), fmt(e.result.return_std), fmt(e.result.win_rate),
                    std::to_string(ev.episodes)});
    write_csv(c.path(("heatmap_" + e.name + ".csv").c_str()), c.hash, c.seed, {"agent", "bucket", "action", "count"},
              histogram_rows(e.result.histogram));
  }
  write_csv(c.path(artifact::kEval), c.hash, c.seed, {"policy", "return_mean", "return_std", "win_rate", "episodes"},
            rows);

  const CostReport tc = teacher_cost(teacher, env->horizon());
  const CostReport sc = student_cost(students, env->horizon());
  std::vector<std::vector<std::string>> cost_rows;
  for (const CostReport* r : {&tc, &sc})
    cost_rows.push_back({r->label, std::to_string(r->params), std::to_string(r->flops_per_forward),
                         std::to_string(r->flops_per_episode)});
  write_csv(c.path(artifact::kCosts), c.hash, c.seed, {"model", "params", "flops_per_forward", "flops_per_episode"},
            cost_rows);

  const TimingStats tt = measure_tps(tp, *env, ev.tps_episodes, eval_seed);
  const TimingStats st = measure_tps(sp, *env, ev.tps_episodes, eval_seed);
  write_csv(c.path(artifact::kTiming), c.hash, c.seed, {"model", "ms_per_step_mean", "ms_per_step_std", "steps"},
            {{"teacher", fmt(tt.mean_ms), fmt(tt.std_ms), std::to_string(tt.steps)},
             {"student", fmt(st.mean_ms), fmt(st.std_ms), std::to_string(st.steps)}});

  SummaryRecord s;
  s.seed = c.seed;
  s.config_hash = c.hash;
  const EvalResult& te = entries[0].result;
  const EvalResult& se = entries[1].result;
  const EvalResult& re = entries[2].result;
  s.teacher_return = te.return_mean;
  s.teacher_win_rate = te.win_rate;
  s.student_return = se.return_mean;
  s.student_win_rate = se.win_rate;
  s.random_return = re.return_mean;
  s.random_win_rate = re.win_rate;
  s.return_retention_pct = return_retention(se.return_mean, te.return_mean, re.return_mean);
  s.win_retention_pct = win_retention(se.win_rate, te.win_rate);
  s.teacher_flops = tc.flops_per_forward;
  s.student_flops = sc.flops_per_forward;
  s.teacher_params = tc.params;
  s.student_params = sc.params;
  s.flops_ratio = static_cast<double>(tc.flops_per_forward) / static_cast<double>(sc.flops_per_forward);
  s.js_student = histogram_js_distance(se.histogram, te.histogram);
  if (ev.ablation) {
    const EvalResult& ae = entries[3].result;
    s.js_ablation = histogram_js_distance(ae.histogram, te.histogram);
    s.ablation_return = ae.return_mean;
    s.ablation_win_rate = ae.win_rate;
  }
  s.teacher_ms = tt.mean_ms;
  s.student_ms = st.mean_ms;
  write_file(c.path(artifact::kSummary), summary_to_json(s));
  return s;
}

bool teacher_ready(const Ctx& c) {
  if (!c.exists(artifact::kTeacher)) return false;
  load_teacher(c);
  return true;
}

bool buffer_ready(const Ctx& c) {
  if (!c.exists(artifact::kBuffer)) return false;
  check_buffer_provenance(c, load_buffer(c.path(artifact::kBuffer)));
  return true;
}

bool students_ready(const Ctx& c) {
  if (!c.exists(artifact::kStudents) || !c.exists(artifact::kDistillMetrics)) return false;
  load_students(c, artifact::kStudents);
  if (c.cfg.eval.ablation) {
    if (!c.exists(artifact::kAblation)) return false;
    load_students(c, artifact::kAblation);
  }
  return true;
}

void run_stage(const std::string& name, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    throw Error(e.code(), "stage '" + name + "' failed: " + e.what());
  }
}

}  // namespace

RunArtifacts run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir, Stage stage) {
  cfg.validate();
  Ctx c{cfg, seed, config_hash(cfg), fs::path(seed_dir(out_dir, seed))};
  fs::create_directories(c.dir);
  json cj = json::parse(config_to_json(cfg));
  cj["provenance"] = {{"config_hash", hex64(c.hash)}, {"seed", seed}};
  write_file(c.path(artifact::kConfig), cj.dump(2) + "\n");

  RunArtifacts out;
  out.dir = c.dir.string();
  const bool all = stage == Stage::kAll;
  if (stage == Stage::kTeacher || (all && !teacher_ready(c))) run_stage("teacher", [&] { stage_teacher(c); });
  if (stage == Stage::kCollect || (all && !buffer_ready(c))) run_stage("collect", [&] { stage_collect(c); });
  if (stage == Stage::kDistill || (all && !students_ready(c))) run_stage("distill", [&] { stage_distill(c); });
  if (stage == Stage::kEvaluate || all) run_stage("evaluate", [&] { out.summary = stage_evaluate(c); });
  if (stage == Stage::kReport || all) {
    run_stage("report", [&] {
      c.require(artifact::kEval, Stage::kReport);
      write_report(out.dir);
    });
  }
  if (!out.summary && c.exists(artifact::kSummary)) out.summary = summary_from_json(read_file(c.path(artifact::kSummary)));
  return out;
}

std::string mean_std(const std::vector<double>& v) {
  if (v.empty()) return "nan";
  const Moments m = moments(v);
  return fmt(m.mean) + "±" + fmt(m.std);
}

std::vector<SummaryRecord> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  std::vector<SummaryRecord> out;
  for (std::uint64_t seed : cfg.seeds) {
    RunArtifacts a = run_pipeline(cfg, seed, out_dir);
    out.push_back(*a.summary);
  }
  const std::vector<std::string> header{"seed",          "teacher_return",     "teacher_win_rate",
                                        "student_return", "student_win_rate",  "random_return",
                                        "return_retention_pct", "win_retention_pct", "flops_ratio",
                                        "js_student",     "teacher_ms",        "student_ms"};
  std::vector<std::vector<std::string>> rows;
  std::vector<std::vector<double>> cols(header.size() - 1);
  for (const SummaryRecord& s : out) {
    const std::vector<double> vals{s.teacher_return,       s.teacher_win_rate,  s.student_return,
                                   s.student_win_rate,     s.random_return,     s.return_retention_pct,
                                   s.win_retention_pct,    s.flops_ratio,       s.js_student,
                                   s.teacher_ms,           s.student_ms};
    std::vector<std::string> row{std::to_string(s.seed)};
    for (std::size_t k = 0; k < vals.size(); ++k) {
      row.push_back(fmt(vals[k]));
      cols[k].push_back(vals[k]);
    }
    rows.push_back(row);
  }
  std::vector<std::string> agg{"mean±std"};
  for (const auto& col : cols) agg.push_back(mean_std(col));
  rows.push_back(agg);
  fs::create_directories(out_dir);
  write_csv((fs::path(out_dir) / "summary.csv").string(), config_hash(cfg), cfg.seeds.front(), header, rows);
  return out;
}

std::vector<std::string> verify_provenance(const std::string& dir, const ExperimentConfig& cfg, std::uint64_t seed) {
  std::vector<std::string> problems;
  const std::uint64_t hash = config_hash(cfg);
  auto complain = [&](const fs::path& p, const std::string& what) { problems.push_back(p.string() + ": " + what); };
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path p = entry.path();
    const std::string ext = p.extension().string();
    try {
      if (ext == ".csv" || ext == ".svg") {
        std::uint64_t h = 0, s = 0;
        if (!parse_provenance(read_file(p.string()), h, s)) {
          complain(p, "no provenance line");
        } else if (h != hash || s != seed) {
          complain(p, "provenance " + hex64(h) + "/" + std::to_string(s) + " does not match");
        }
      } else if (ext == ".ckpt") {
        const Checkpoint ck = load_checkpoint(p.string());
        const json meta = json::parse(ck.metadata);
        if (meta.value("config_hash", std::string()) != hex64(hash) || ck.seed != seed ||
            meta.value("seed", std::uint64_t{0}) != seed)
          complain(p, "checkpoint provenance does not match");
      } else if (ext == ".bin") {
        const ExpertBuffer b = load_buffer(p.string());
        if (b.metadata.config_hash != hash || b.metadata.seed != derive_seed(seed, 200))
          complain(p, "buffer provenance does not match");
      } else if (ext == ".json") {
        const json j = json::parse(read_file(p.string()));
        const json& prov = j.contains("provenance") ? j.at("provenance") : j;
        if (prov.value("config_hash", std::string()) != hex64(hash) || prov.value("seed", std::uint64_t{0}) != seed)
          complain(p, "json provenance does not match");
      }
    } catch (const std::exception& e) {
      complain(p, e.what());
    }
  }
  return problems;
}

}  // namespace mdist

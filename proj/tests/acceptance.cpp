#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include "fd_util.hpp"
#include "mdist/buffer.hpp"
#include "mdist/harness.hpp"
#include "mdist/resource.hpp"
#include "synth_util.hpp"

namespace fs = std::filesystem;
using namespace mdist;
using namespace mdist::testing;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v, int precision = 3) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + num(v[i], precision);
  return out + "]";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ExperimentConfig acceptance_config(const std::string& file) {
  return load_config((fs::path(MDIST_SOURCE_DIR) / "configs" / "acceptance" / file).string(), false);
}

// ---------------------------------------------------------------------------

Verdict retention(const std::vector<SummaryRecord>& spread) {
  std::vector<double> r;
  for (const SummaryRecord& s : spread) r.push_back(s.return_retention_pct / 100.0);
  const double m = mean(r);
  return {m >= 0.85, "normalized return retention per seed " + list(r) + ", mean " + num(m) + " (need >= 0.85)"};
}

Verdict win_gap(const std::vector<SummaryRecord>& skirmish) {
  std::vector<double> t, s;
  for (const SummaryRecord& r : skirmish) {
    t.push_back(r.teacher_win_rate);
    s.push_back(r.student_win_rate);
  }
  const double gap = 100.0 * (mean(t) - mean(s));
  return {gap <= 6.0, "teacher win " + list(t) + ", student win " + list(s) + ", mean gap " + num(gap, 3) +
                          " points (need <= 6)"};
}

double counted_ratio(const ExperimentConfig& cfg) {
  auto env = make_env(cfg.env);
  Rng rng(0);
  const TeacherNets t = make_teacher(*env, cfg.teacher, rng);
  const int n = env->n_agents();
  const MaskSpec masks = cfg.env.masks.agents.empty() ? MaskSpec::full(n) : cfg.env.masks;
  std::vector<StudentShape> shapes;
  for (int i = 0; i < n; ++i)
    shapes.push_back({cfg.distill.input_dims.empty() ? max_visible(masks.agents[i], env->layout())
                                                     : cfg.distill.input_dims[i],
                      cfg.distill.hidden_dims[i]});
  const StudentSet s = make_students(env->obs_dim(), env->num_actions(), shapes, cfg.distill.recurrent,
                                     cfg.distill.roles, t.actor.spec().embedding_dim(), rng);
  return static_cast<double>(teacher_cost(t, 1).flops_per_forward) /
         static_cast<double>(student_cost(s, 1).flops_per_forward);
}

Verdict flops(const ExperimentConfig& spread, const ExperimentConfig& skirmish) {
  const auto t0 = std::chrono::steady_clock::now();
  const double sp = counted_ratio(spread), sk = counted_ratio(skirmish);
  const double secs = seconds_since(t0);
  return {sp >= 20.0 && sk >= 10.0 && secs < 1.0, "spread " + num(sp) + "x (need >= 20), skirmish " + num(sk) +
                                                      "x (need >= 10), counted in " + num(secs, 2) + " s"};
}

Verdict latency(const std::vector<SummaryRecord>& spread, const std::vector<SummaryRecord>& skirmish) {
  bool ok = true;
  std::string detail;
  for (const auto& [name, runs] : {std::pair{"spread", &spread}, std::pair{"skirmish", &skirmish}}) {
    std::vector<double> t, s;
    for (const SummaryRecord& r : *runs) {
      t.push_back(r.teacher_ms);
      s.push_back(r.student_ms);
    }
    const double mt = median(t), ms = median(s);
    const double margin = 1.0 - ms / mt;
    ok = ok && margin >= 0.15;
    detail += std::string(detail.empty() ? "" : "; ") + name + " median ms/step teacher " + num(mt) + ", student " +
              num(ms) + " (" + num(100.0 * margin, 3) + "% faster, need >= 15%)";
  }
  return {ok, detail};
}

Verdict gae_oracle() {
  Vec r(2), v(3);
  r << 1.0, 0.0;
  v << 0.5, 0.2, 0.0;
  const Flags d{0, 1};
  const Vec hand = compute_gae(r, v, d, 0.9, 0.95).advantages;
  const double hand_err = std::max(std::abs(hand[0] - 0.509), std::abs(hand[1] + 0.2));

  Rng rng(5);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const int T = uniform_int(rng, 1, 64);
    const double gamma = uniform(rng, 0.5, 1.0), lambda = uniform(rng, 0.0, 1.0);
    const Vec rew = random_vec(T, rng), val = random_vec(T + 1, rng);
    Flags done(T);
    for (int t = 0; t < T; ++t) done[t] = uniform01(rng) < 0.1;
    const Vec fast = compute_gae(rew, val, done, gamma, lambda).advantages;
    for (int t = 0; t < T; ++t) {
      // A_t = sum_l (gamma lambda)^l delta_{t+l}, truncated at the first terminal.
      double sum = 0.0, w = 1.0;
      for (int l = t; l < T; ++l) {
        const double mask = done[l] ? 0.0 : 1.0;
        sum += w * (rew[l] + gamma * val[l + 1] * mask - val[l]);
        if (done[l]) break;
        w *= gamma * lambda;
      }
      worst = std::max(worst, std::abs(sum - fast[t]));
    }
  }
  return {hand_err < 1e-12 && worst < 1e-9, "hand case error " + num(hand_err, 2) +
                                                 ", worst recursion vs double-sum error " + num(worst, 2) +
                                                 " over 1000 trajectories (need < 1e-9)"};
}

Verdict gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<DistillWeights> variants = stage2_weight_variants();
  double worst = 0.0, abs_diff = 0.0;
  int checks = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (bool recurrent : {false, true}) {
      Rng rng(5000 + seed);
      SynthShape sh;
      sh.dead_prob = 0.15;
      const ExpertBuffer buf = synthetic_buffer(sh, rng);
      StudentSet set = synthetic_students(sh, recurrent, rng);
      const auto batch = random_segments(buf, 3, 4, rng);
      for (const DistillWeights& w : variants) {
        worst = std::max(worst, worst_stage2_error(buf, batch, set, w, Stage2Options{.burn_in = false}, &abs_diff));
        ++checks;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0,
          std::to_string(checks) + " finite-difference checks (20 seeds, 7 weightings, FF and GRU students, "
                                   "actor + aligner + role stores), worst relative error " +
              num(worst, 2) + " (differences under 1e-8 absolute are ignored; largest absolute difference " +
              num(abs_diff, 2) + "), " + num(secs, 3) + " s"};
}

Verdict identities() {
  Rng rng(6);
  double ce_gap = 0.0, min_kl = 0.0, self_kl = 0.0, rot = 0.0, sum_gap = 0.0;
  for (int k = 0; k < 5000; ++k) {
    const int n = uniform_int(rng, 2, 9);
    Vec p(n), q(n);
    for (int i = 0; i < n; ++i) {
      p[i] = uniform(rng, 0.001, 1.0);
      q[i] = uniform(rng, 0.001, 1.0);
    }
    p /= p.sum();
    q /= q.sum();
    ce_gap = std::max(ce_gap, std::abs(policy_ce(p, q) - policy_kl(p, q) - entropy(p)));
    min_kl = std::min(min_kl, policy_kl(p, q));
    self_kl = std::max(self_kl, std::abs(policy_kl(p, p)));
  }
  for (int k = 0; k < 200; ++k) {
    const int n = uniform_int(rng, 2, 5), d = uniform_int(rng, 2, 16);
    const Mat R = orthonormal_rows(d, d, rng);
    std::vector<Vec> a, b;
    for (int i = 0; i < n; ++i) {
      a.push_back(random_vec(d, rng));
      b.push_back(R * a.back());
    }
    rot = std::max(rot, structure_loss(a, b));
  }
  for (int k = 0; k < 50; ++k) {
    SynthShape sh;
    sh.dead_prob = 0.2;
    const ExpertBuffer buf = synthetic_buffer(sh, rng);
    StudentSet set = synthetic_students(sh, k % 2 == 0, rng);
    DistillWeights w{.alpha = uniform(rng, 0, 2), .beta = uniform(rng, 0, 2), .lambda_str = uniform(rng, 0, 2),
                     .lambda_role = uniform(rng, 0, 2), .zeta = uniform(rng, 0, 0.5)};
    const LossBreakdown lb = stage2_loss(buf, random_segments(buf, 4, 4, rng), set, w);
    const double hand = -w.ppo * lb.ppo.sum() + w.alpha * lb.kl.sum() + w.beta * lb.ce.sum() +
                        w.lambda_str * lb.structure + w.lambda_role * lb.role - w.zeta * lb.entropy.sum();
    sum_gap = std::max(sum_gap, std::abs(lb.total - hand));
  }
  const bool ok = ce_gap < 1e-10 && min_kl >= 0.0 && self_kl == 0.0 && rot < 1e-10 && sum_gap < 1e-10;
  return {ok, "max |CE - KL - H| " + num(ce_gap, 2) + ", min KL " + num(min_kl, 2) + ", max KL(p,p) " +
                  num(self_kl, 2) + ", max rotated structure loss " + num(rot, 2) + ", max |total - weighted sum| " +
                  num(sum_gap, 2)};
}

Verdict frozen_and_reproducible(const ExperimentConfig& cfg, const std::string& root) {
  const std::uint64_t seed = cfg.seeds.front();
  const fs::path dir = seed_dir(root, seed);
  const std::string teacher = (dir / artifact::kTeacher).string();
  const std::uint64_t teacher_before = file_hash(teacher);
  const std::uint64_t buffer_before = file_hash((dir / artifact::kBuffer).string());
  const std::uint64_t students_before = file_hash((dir / artifact::kStudents).string());
  run_pipeline(cfg, seed, root, Stage::kDistill);
  const bool frozen = file_hash(teacher) == teacher_before &&
                      file_hash((dir / artifact::kBuffer).string()) == buffer_before;
  const bool redistill = file_hash((dir / artifact::kStudents).string()) == students_before;

  const fs::path again = fs::path(root) / "rerun";
  fs::remove_all(again);
  const RunArtifacts a = run_pipeline(cfg, seed, again.string());
  const RunArtifacts b = run_pipeline(cfg, seed, root, Stage::kEvaluate);
  bool same = a.summary && b.summary && a.summary->same_outcome(*b.summary);
  const fs::path d2 = seed_dir(again.string(), seed);
  for (const char* f : {artifact::kTeacher, artifact::kTeacherMetrics, artifact::kBuffer, artifact::kStudents,
                        artifact::kDistillMetrics, artifact::kEval, artifact::kCosts})
    if (fs::exists(dir / f) || fs::exists(d2 / f))
      same = same && file_hash((dir / f).string()) == file_hash((d2 / f).string());
  return {frozen && redistill && same,
          std::string("teacher/buffer bytes unchanged by stage 2: ") + (frozen ? "yes" : "NO") +
              "; re-distillation identical: " + (redistill ? "yes" : "NO") +
              "; fresh full rerun identical (summary + artifacts): " + (same ? "yes" : "NO")};
}

template <typename F>
std::string expect_error(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return std::string(to_string(e.code()));
  } catch (const std::exception& e) {
    return std::string("untyped: ") + e.what();
  }
  return "no error";
}

Verdict serialization(const std::string& seed_directory) {
  const fs::path dir(seed_directory);
  bool ok = true;
  std::string detail;
  const std::string buf_bytes = read_file((dir / artifact::kBuffer).string());
  const ExpertBuffer buf = decode_buffer(buf_bytes);
  ok = ok && encode_buffer(buf) == buf_bytes;
  for (const char* f : {artifact::kTeacher, artifact::kStudents}) {
    const std::string bytes = read_file((dir / f).string());
    ok = ok && encode_checkpoint(decode_checkpoint(bytes)) == bytes;
  }
  detail += std::string("round trips ") + (ok ? "bit-exact" : "DIFFER");

  const std::string ck_bytes = read_file((dir / artifact::kStudents).string());
  Rng rng(9);
  int typed = 0, total = 0;
  std::vector<std::string> untyped;
  auto probe = [&](const std::string& kind, const std::string& bytes) {
    const std::string r = kind == "buffer" ? expect_error([&] { decode_buffer(bytes); })
                                           : expect_error([&] { decode_checkpoint(bytes); });
    ++total;
    if (r.rfind("untyped", 0) == 0 || r == "no error")
      untyped.push_back(kind + ": " + r);
    else
      ++typed;
  };
  for (const auto& [kind, bytes] : {std::pair{std::string("buffer"), buf_bytes},
                                    std::pair{std::string("checkpoint"), ck_bytes}}) {
    for (int k = 0; k < 100; ++k) probe(kind, bytes.substr(0, uniform_int(rng, 0, static_cast<int>(bytes.size()) - 1)));
    for (int k = 0; k < 100; ++k) {
      std::string c = bytes;
      const int at = uniform_int(rng, 0, static_cast<int>(c.size()) - 1);
      c[at] = static_cast<char>(c[at] ^ (1 << uniform_int(rng, 0, 7)));
      probe(kind, c);
    }
    std::string v = bytes;
    v[8] = static_cast<char>(v[8] + 1);
    const std::string version = kind == "buffer" ? expect_error([&] { decode_buffer(v); })
                                                 : expect_error([&] { decode_checkpoint(v); });
    ok = ok && version == to_string(ErrorCode::kVersionMismatch);
    detail += "; " + kind + " version bump -> " + version;
  }
  ok = ok && untyped.empty();
  detail += "; " + std::to_string(typed) + "/" + std::to_string(total) + " truncations and bit flips raised typed errors";
  if (!untyped.empty()) detail += " (first failure: " + untyped.front() + ")";
  return {ok, detail};
}

Verdict coordination(const std::vector<SummaryRecord>& runs) {
  std::vector<double> s, a;
  for (const SummaryRecord& r : runs) {
    s.push_back(r.js_student);
    a.push_back(r.js_ablation.value_or(std::nan("")));
  }
  const double ms = mean(s), ma = mean(a);
  return {ms < ma, "skirmish heatmap JS distance to teacher: distilled " + list(s) + " mean " + num(ms) +
                       ", ablation " + list(a) + " mean " + num(ma)};
}

std::vector<SummaryRecord> run_all(const ExperimentConfig& cfg, const std::string& root) {
  std::cerr << "running " << cfg.name << " (" << cfg.seeds.size() << " seeds) under " << root << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SummaryRecord> out = run_experiment(cfg, root);
  std::cerr << cfg.name << " done in " << num(seconds_since(t0), 4) << " s\n";
  return out;
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, std::function<Verdict()>>> criteria;
  ExperimentConfig spread, skirmish;
  std::vector<SummaryRecord> spread_runs, skirmish_runs;
  const std::string spread_root = "acceptance_runs/spread", skirmish_root = "acceptance_runs/skirmish";
  std::string setup_error;
  try {
    spread = acceptance_config("spread_lh.json");
    skirmish = acceptance_config("skirmish_lha.json");
    spread_runs = run_all(spread, spread_root);
    skirmish_runs = run_all(skirmish, skirmish_root);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_runs = [&](std::function<Verdict()> f) {
    return [f, &setup_error]() -> Verdict {
      if (!setup_error.empty()) return {false, "pipeline runs failed: " + setup_error};
      return f();
    };
  };

  criteria.emplace_back("spread LH h=16 retention", needs_runs([&] { return retention(spread_runs); }));
  criteria.emplace_back("skirmish LH+A win-rate gap", needs_runs([&] { return win_gap(skirmish_runs); }));
  criteria.emplace_back("forward-FLOPs ratio", needs_runs([&] { return flops(spread, skirmish); }));
  criteria.emplace_back("latency direction", needs_runs([&] { return latency(spread_runs, skirmish_runs); }));
  criteria.emplace_back("GAE oracle", gae_oracle);
  criteria.emplace_back("gradient suite", gradients);
  criteria.emplace_back("loss identities", identities);
  criteria.emplace_back("frozen teacher and determinism",
                        needs_runs([&] { return frozen_and_reproducible(skirmish, skirmish_root); }));
  criteria.emplace_back("serialization",
                        needs_runs([&] { return serialization(seed_dir(spread_root, spread.seeds.front())); }));
  criteria.emplace_back("coordination signal", needs_runs([&] { return coordination(skirmish_runs); }));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << i + 1 << " (" << criteria[i].first
              << "): " << v.detail << std::endl;
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed in "
            << num(seconds_since(t0), 4) << " s" << std::endl;
  return failed == 0 ? 0 : 1;
}

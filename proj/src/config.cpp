#include "mdist/config.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "json.hpp"

extern char** environ;

namespace mdist {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object and rejects anything it did not ask for.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorCode::kConfig, "'" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kConfig, "'" + path_ + "." + key + "': " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw Error(ErrorCode::kConfig, "unknown config key '" + path_ + "." + k + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json masks_to_json(const MaskSpec& m) {
  json arr = json::array();
  for (const AgentMask& a : m.agents) {
    json e;
    json blocks = json::array();
    for (Block b : a.blocks) blocks.push_back(std::string(to_string(b)));
    e["blocks"] = blocks;
    if (a.subset) e["subset"] = {a.subset->first, a.subset->second};
    arr.push_back(e);
  }
  return arr;
}

MaskSpec masks_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw Error(ErrorCode::kConfig, "'" + path + "' must be an array");
  MaskSpec m;
  for (std::size_t i = 0; i < j.size(); ++i) {
    AgentMask a;
    Fields f(j[i], path + "[" + std::to_string(i) + "]");
    std::vector<std::string> blocks;
    f.get("blocks", blocks);
    for (const auto& b : blocks) {
      try {
        a.blocks.push_back(block_from_string(b));
      } catch (const Error& e) {
        throw Error(ErrorCode::kConfig, f.path("blocks") + ": " + e.what());
      }
    }
    if (const json* s = f.sub("subset")) {
      if (!s->is_array() || s->size() != 2) throw Error(ErrorCode::kConfig, f.path("subset") + " must be [min, max]");
      a.subset = std::make_pair((*s)[0].get<int>(), (*s)[1].get<int>());
    }
    m.agents.push_back(std::move(a));
  }
  return m;
}

json to_json_tree(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  const SpreadConfig& sp = c.env.spread;
  const SkirmishConfig& sk = c.env.skirmish;
  j["env"] = {
      {"name", c.env.name},
      {"spread",
       {{"n_agents", sp.n_agents}, {"horizon", sp.horizon}, {"accel", sp.accel}, {"damping", sp.damping}, {"dt", sp.dt}}},
      {"skirmish",
       {{"n_allies", sk.n_allies},
        {"n_enemies", sk.n_enemies},
        {"horizon", sk.horizon},
        {"max_hp", sk.max_hp},
        {"attack_range", sk.attack_range},
        {"damage", sk.damage},
        {"move_step", sk.move_step},
        {"attack_cooldown", sk.attack_cooldown},
        {"win_bonus", sk.win_bonus},
        {"kill_bonus", sk.kill_bonus},
        {"reward_max", sk.reward_max}}},
      {"masks", masks_to_json(c.env.masks)}};
  const TeacherConfig& t = c.teacher;
  j["teacher"] = {{"hidden_dim", t.hidden_dim},
                  {"hidden_layers", t.hidden_layers},
                  {"gamma", t.gamma},
                  {"lambda", t.lambda},
                  {"clip", t.clip},
                  {"lr", t.lr},
                  {"entropy_coef", t.entropy_coef},
                  {"value_coef", t.value_coef},
                  {"max_grad_norm", t.max_grad_norm},
                  {"value_scale", t.value_scale},
                  {"epochs", t.epochs},
                  {"minibatches", t.minibatches},
                  {"episodes_per_iter", t.episodes_per_iter},
                  {"iterations", t.iterations},
                  {"eval_every", t.eval_every},
                  {"eval_episodes", t.eval_episodes}};
  j["buffer"] = {{"episodes", c.buffer.episodes}, {"segment_length", c.distill.segment_length}};
  const DistillConfig& d = c.distill;
  const DistillWeights& w = d.weights;
  j["distill"] = {{"hidden_dims", d.hidden_dims},
                  {"input_dims", d.input_dims},
                  {"recurrent", d.recurrent},
                  {"roles", d.roles},
                  {"lr", d.lr},
                  {"lr_end_fraction", d.lr_end_fraction},
                  {"max_grad_norm", d.max_grad_norm},
                  {"iterations", d.iterations},
                  {"batch_size", d.batch_size},
                  {"burn_in", d.burn_in},
                  {"eval_every", d.eval_every},
                  {"eval_episodes", d.eval_episodes},
                  {"keep_best", d.keep_best},
                  {"entropy_floor", d.entropy_floor},
                  {"collapse_patience", d.collapse_patience},
                  {"weights",
                   {{"alpha", w.alpha},
                    {"beta", w.beta},
                    {"lambda_str", w.lambda_str},
                    {"lambda_role", w.lambda_role},
                    {"zeta", w.zeta},
                    {"tau", w.tau},
                    {"tau_role", w.tau_role},
                    {"gamma", w.gamma},
                    {"lambda_gae", w.lambda_gae},
                    {"clip", w.clip},
                    {"ppo", w.ppo},
                    {"normalize_advantages", w.normalize_advantages}}}};
  j["eval"] = {{"episodes", c.eval.episodes},
               {"greedy", c.eval.greedy},
               {"bucket_width", c.eval.bucket_width},
               {"tps_episodes", c.eval.tps_episodes},
               {"ablation", c.eval.ablation}};
  j["seeds"] = c.seeds;
  return j;
}

ExperimentConfig from_json_tree(const json& j) {
  ExperimentConfig c;
  Fields top(j, "config");
  top.get("name", c.name);
  if (const json* e = top.sub("env")) {
    Fields f(*e, "env");
    f.get("name", c.env.name);
    if (const json* s = f.sub("spread")) {
      Fields g(*s, "env.spread");
      g.get("n_agents", c.env.spread.n_agents);
      g.get("horizon", c.env.spread.horizon);
      g.get("accel", c.env.spread.accel);
      g.get("damping", c.env.spread.damping);
      g.get("dt", c.env.spread.dt);
    }
    if (const json* s = f.sub("skirmish")) {
      Fields g(*s, "env.skirmish");
      SkirmishConfig& k = c.env.skirmish;
      g.get("n_allies", k.n_allies);
      g.get("n_enemies", k.n_enemies);
      g.get("horizon", k.horizon);
      g.get("max_hp", k.max_hp);
      g.get("attack_range", k.attack_range);
      g.get("damage", k.damage);
      g.get("move_step", k.move_step);
      g.get("attack_cooldown", k.attack_cooldown);
      g.get("win_bonus", k.win_bonus);
      g.get("kill_bonus", k.kill_bonus);
      g.get("reward_max", k.reward_max);
    }
    if (const json* m = f.sub("masks")) c.env.masks = masks_from_json(*m, "env.masks");
  }
  if (const json* tj = top.sub("teacher")) {
    Fields f(*tj, "teacher");
    TeacherConfig& t = c.teacher;
    f.get("hidden_dim", t.hidden_dim);
    f.get("hidden_layers", t.hidden_layers);
    f.get("gamma", t.gamma);
    f.get("lambda", t.lambda);
    f.get("clip", t.clip);
    f.get("lr", t.lr);
    f.get("entropy_coef", t.entropy_coef);
    f.get("value_coef", t.value_coef);
    f.get("max_grad_norm", t.max_grad_norm);
    f.get("value_scale", t.value_scale);
    f.get("epochs", t.epochs);
    f.get("minibatches", t.minibatches);
    f.get("episodes_per_iter", t.episodes_per_iter);
    f.get("iterations", t.iterations);
    f.get("eval_every", t.eval_every);
    f.get("eval_episodes", t.eval_episodes);
  }
  if (const json* bj = top.sub("buffer")) {
    Fields f(*bj, "buffer");
    f.get("episodes", c.buffer.episodes);
    f.get("segment_length", c.distill.segment_length);
  }
  if (const json* dj = top.sub("distill")) {
    Fields f(*dj, "distill");
    DistillConfig& d = c.distill;
    f.get("hidden_dims", d.hidden_dims);
    f.get("input_dims", d.input_dims);
    f.get("recurrent", d.recurrent);
    f.get("roles", d.roles);
    f.get("lr", d.lr);
    f.get("lr_end_fraction", d.lr_end_fraction);
    f.get("max_grad_norm", d.max_grad_norm);
    f.get("iterations", d.iterations);
    f.get("batch_size", d.batch_size);
    f.get("burn_in", d.burn_in);
    f.get("eval_every", d.eval_every);
    f.get("eval_episodes", d.eval_episodes);
    f.get("keep_best", d.keep_best);
    f.get("entropy_floor", d.entropy_floor);
    f.get("collapse_patience", d.collapse_patience);
    if (const json* wj = f.sub("weights")) {
      Fields g(*wj, "distill.weights");
      DistillWeights& w = d.weights;
      g.get("alpha", w.alpha);
      g.get("beta", w.beta);
      g.get("lambda_str", w.lambda_str);
      g.get("lambda_role", w.lambda_role);
      g.get("zeta", w.zeta);
      g.get("tau", w.tau);
      g.get("tau_role", w.tau_role);
      g.get("gamma", w.gamma);
      g.get("lambda_gae", w.lambda_gae);
      g.get("clip", w.clip);
      g.get("ppo", w.ppo);
      g.get("normalize_advantages", w.normalize_advantages);
    }
  }
  if (const json* ej = top.sub("eval")) {
    Fields f(*ej, "eval");
    f.get("episodes", c.eval.episodes);
    f.get("greedy", c.eval.greedy);
    f.get("bucket_width", c.eval.bucket_width);
    f.get("tps_episodes", c.eval.tps_episodes);
    f.get("ablation", c.eval.ablation);
  }
  top.get("seeds", c.seeds);
  return c;
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfig, what + " is not valid JSON: " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  std::unique_ptr<Environment> e;
  try {
    e = make_env(env);
  } catch (const Error& err) {
    throw Error(ErrorCode::kConfig, std::string("env: ") + err.what());
  }
  const int n = e->n_agents();
  if (!env.masks.agents.empty() && static_cast<int>(env.masks.agents.size()) != n)
    throw Error(ErrorCode::kConfig, "env.masks lists " + std::to_string(env.masks.agents.size()) +
                                        " agents but the env has " + std::to_string(n));
  if (static_cast<int>(distill.hidden_dims.size()) != n)
    throw Error(ErrorCode::kConfig, "distill.hidden_dims lists " + std::to_string(distill.hidden_dims.size()) +
                                        " agents but the env has " + std::to_string(n));
  for (int h : distill.hidden_dims)
    if (h != 16 && h != 32) throw Error(ErrorCode::kConfig, "student hidden dims must be 16 or 32");
  if (!distill.input_dims.empty() && static_cast<int>(distill.input_dims.size()) != n)
    throw Error(ErrorCode::kConfig, "distill.input_dims must list every agent or be empty");
  for (int d : distill.input_dims)
    if (d < 1) throw Error(ErrorCode::kConfig, "distill.input_dims entries must be positive");
  try {
    distill.weights.validate();
  } catch (const Error& err) {
    throw Error(ErrorCode::kConfig, std::string("distill.weights: ") + err.what());
  }
  if (distill.roles < 2) throw Error(ErrorCode::kConfig, "distill.roles must be >= 2");
  if (teacher.hidden_dim < 1 || teacher.hidden_layers < 1)
    throw Error(ErrorCode::kConfig, "teacher needs at least one hidden layer of positive width");
  if (teacher.iterations < 1 || teacher.episodes_per_iter < 1 || teacher.epochs < 1 || teacher.minibatches < 1)
    throw Error(ErrorCode::kConfig, "teacher budget must be positive");
  if (buffer.episodes < 1) throw Error(ErrorCode::kConfig, "buffer.episodes must be positive");
  if (distill.segment_length < 1 || distill.segment_length > e->horizon())
    throw Error(ErrorCode::kConfig, "buffer.segment_length must lie in [1, horizon]");
  if (distill.iterations < 1 || distill.batch_size < 1) throw Error(ErrorCode::kConfig, "distill budget must be positive");
  if (!(distill.lr_end_fraction >= 0.0 && distill.lr_end_fraction <= 1.0))
    throw Error(ErrorCode::kConfig, "distill.lr_end_fraction must be in [0, 1]");
  if (eval.episodes < 1 || eval.bucket_width < 1 || eval.tps_episodes < 1)
    throw Error(ErrorCode::kConfig, "eval episodes and bucket width must be positive");
  if (seeds.empty()) throw Error(ErrorCode::kConfig, "seeds must not be empty");
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json_tree(a) == to_json_tree(b); }

std::string config_to_json(const ExperimentConfig& cfg) { return to_json_tree(cfg).dump(2) + "\n"; }

ExperimentConfig config_from_json(const std::string& text) { return from_json_tree(parse_json(text, "config")); }

std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::pair<std::string, std::string>>& kv) {
  json j = parse_json(json_text, "config");
  for (const auto& [key, value] : kv) {
    std::string pointer;
    std::size_t pos = 0;
    while (pos <= key.size()) {
      const std::size_t next = key.find("__", pos);
      std::string part = key.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      std::transform(part.begin(), part.end(), part.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (part.empty()) throw Error(ErrorCode::kConfig, "malformed override key '" + key + "'");
      pointer += "/" + part;
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    const json::json_pointer ptr(pointer);
    const json::json_pointer parent = ptr.parent_pointer();
    if (!j.contains(parent) || !j.at(parent).is_object())
      throw Error(ErrorCode::kConfig, "override '" + key + "' does not name a config key");
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::parse_error&) {
      parsed = value;
    }
    j[ptr] = parsed;
  }
  return j.dump(2);
}

std::vector<std::pair<std::string, std::string>> env_overrides(const std::string& prefix) {
  std::vector<std::pair<std::string, std::string>> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind(prefix, 0) != 0) continue;
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    out.emplace_back(entry.substr(prefix.size(), eq - prefix.size()), entry.substr(eq + 1));
  }
  std::sort(out.begin(), out.end());
  return out;
}

ExperimentConfig load_config(const std::string& path, bool use_env) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, e.what());
  }
  ExperimentConfig cfg = config_from_json(text);
  // Overrides address the fully populated tree so keys left at their defaults can be set too.
  if (use_env) cfg = config_from_json(apply_overrides(to_json_tree(cfg).dump(), env_overrides()));
  cfg.validate();
  return cfg;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(to_json_tree(cfg).dump()); }

std::uint64_t env_config_hash(const EnvConfig& env) {
  ExperimentConfig c;
  c.env = env;
  return fnv1a(to_json_tree(c)["env"].dump());
}

std::string mask_table_json(const MaskSpec& masks) { return masks_to_json(masks).dump(); }

MaskSpec mask_table_from_json(const std::string& text) {
  return masks_from_json(parse_json(text, "mask table"), "masks");
}

}  // namespace mdist

#include "tap/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace tap {

namespace {

using nlohmann::json;

/// Reads optional keys from one JSON object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw ConfigError(field(key), "expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

std::vector<std::string> mechanism_names(const std::vector<Mechanism>& ms) {
  std::vector<std::string> out;
  for (auto m : ms) out.push_back(to_string(m));
  return out;
}

json evaluator_json(const EvaluatorConfig& e) {
  return {{"evaluator", to_string(e.kind)},    {"k", e.k},
          {"ridge_lambda", e.ridge_lambda},    {"logistic_lambda", e.logistic_lambda},
          {"logistic_iters", e.logistic_iters}, {"logistic_lr", e.logistic_lr},
          {"mlp_hidden", e.mlp_hidden},        {"mlp_epochs", e.mlp_epochs},
          {"mlp_lr", e.mlp_lr},                {"mlp_patience", e.mlp_patience}};
}

void read_evaluator(Reader& r, EvaluatorConfig& e) {
  std::string kind = to_string(e.kind);
  r.get("evaluator", kind);
  try {
    e.kind = evaluator_kind_from_string(kind);
  } catch (const Error&) {
    throw ConfigError(r.field("evaluator"), "unknown evaluator '" + kind + "'");
  }
  r.get("k", e.k);
  r.get("ridge_lambda", e.ridge_lambda);
  r.get("logistic_lambda", e.logistic_lambda);
  r.get("logistic_iters", e.logistic_iters);
  r.get("logistic_lr", e.logistic_lr);
  r.get("mlp_hidden", e.mlp_hidden);
  r.get("mlp_epochs", e.mlp_epochs);
  r.get("mlp_lr", e.mlp_lr);
  r.get("mlp_patience", e.mlp_patience);
  check(e.k >= 1, r.field("k"), "must be >= 1");
  check(e.ridge_lambda > 0, r.field("ridge_lambda"), "must be > 0");
  check(e.logistic_lambda >= 0, r.field("logistic_lambda"), "must be >= 0");
  check(e.mlp_hidden >= 1, r.field("mlp_hidden"), "must be >= 1");
}

}  // namespace

json RunSpec::to_json() const {
  json ds = {{"params", dataset.params}};
  if (!dataset.builtin.empty()) ds["builtin"] = dataset.builtin;
  if (!dataset.csv.empty()) {
    ds["csv"] = dataset.csv;
    ds["schema"] = dataset.schema;
  }
  const auto& d = diffusion;
  const auto& p = tap.policy;
  const auto& g = tap.gate;
  json plugin = evaluator_json(tap.plugin.evaluator);
  plugin["folds"] = tap.plugin.folds;
  plugin["alpha"] = tap.plugin.alpha;
  return {
      {"dataset", ds},
      {"n_real", n_real},
      {"seeds", seeds},
      {"mechanism", to_string(mechanism)},
      {"n_syn", n_syn},
      {"output", output},
      {"encoder", {{"clip_lo", clip_lo}, {"clip_hi", clip_hi}, {"target_bins", target_bins}}},
      {"diffusion",
       {{"num_steps", d.num_steps}, {"beta_min", d.beta_min}, {"beta_max", d.beta_max},
        {"hidden_width", d.hidden_width}, {"hidden_layers", d.hidden_layers}, {"train_steps", d.train_steps},
        {"batch_size", d.batch_size}, {"learning_rate", d.learning_rate}, {"hard_mix", d.hard_mix},
        {"important_k", d.important_k}, {"bootstraps", d.bootstraps}, {"x0_clip", d.x0_clip}}},
      {"tap",
       {{"horizon", tap.horizon}, {"window", tap.window}, {"tau", tap.tau}, {"candidates", tap.candidates},
        {"alpha_level", tap.alpha_level}, {"desired_mixture", tap.desired_mixture}, {"use_gate", tap.use_gate},
        {"windowed_commit", tap.windowed_commit}, {"learn", tap.learn}, {"gate_window", tap.gate_window}}},
      {"plugin", plugin},
      {"gate",
       {{"p_min", g.p_min}, {"margin", g.margin}, {"use_margin", g.use_margin},
        {"residual_percentile", g.residual_percentile}, {"diversity_threshold", g.diversity_threshold},
        {"logical_rules", g.logical_rules}}},
      {"policy",
       {{"hidden_width", p.hidden_width}, {"hidden_layers", p.hidden_layers}, {"learning_rate", p.learning_rate},
        {"weight_decay", p.weight_decay}, {"max_grad_norm", p.max_grad_norm}, {"beta", p.beta},
        {"log_std_min", p.log_std_min}, {"log_std_max", p.log_std_max}, {"replay_size", p.replay_size}}},
      {"feedback",
       {{"quantile", tap.feedback_quantile}, {"window", tap.feedback_window}, {"min_events", tap.feedback_min_events},
        {"baseline_decay", tap.baseline_decay}}},
      {"hard_inpaint", {{"rho", hard_rho}, {"fraction", hard_fraction}}},
      {"smote", {{"k", smote_k}}},
      {"downstream", evaluator_json(downstream)},
      {"experiment",
       {{"ladder", mechanism_names(ladder)},
        {"sensitivity_window", sensitivity_window},
        {"sensitivity_tau", sensitivity_tau}}},
      {"threads", threads},
      {"deterministic", deterministic},
  };
}

RunSpec parse_run_spec(const json& j) {
  RunSpec s;
  Reader root(j, "");

  {
    Reader r = root.child("dataset");
    check(root.has("dataset"), "dataset", "required");
    r.get("builtin", s.dataset.builtin);
    r.get("csv", s.dataset.csv);
    r.get("schema", s.dataset.schema);
    if (const json* p = r.raw("params")) {
      check(p->is_object(), "dataset.params", "expected an object");
      s.dataset.params = *p;
    }
    r.finish();
    check(s.dataset.builtin.empty() != s.dataset.csv.empty(), "dataset", "set exactly one of 'builtin' and 'csv'");
    if (!s.dataset.builtin.empty()) {
      auto names = builtin_names();
      check(std::find(names.begin(), names.end(), s.dataset.builtin) != names.end(), "dataset.builtin",
            "unknown generator '" + s.dataset.builtin + "'");
    } else {
      check(!s.dataset.schema.empty(), "dataset.schema", "required with 'csv'");
    }
  }

  root.get("n_real", s.n_real);
  check(s.n_real >= 5, "n_real", "must be >= 5");
  root.get("seeds", s.seeds);
  check(!s.seeds.empty(), "seeds", "must not be empty");
  std::string mech = to_string(s.mechanism);
  root.get("mechanism", mech);
  try {
    s.mechanism = mechanism_from_string(mech);
  } catch (const Error&) {
    throw ConfigError("mechanism", "unknown mechanism '" + mech + "'");
  }
  root.get("n_syn", s.n_syn);
  root.get("output", s.output);
  root.get("threads", s.threads);
  check(s.threads >= 1, "threads", "must be >= 1");
  root.get("deterministic", s.deterministic);

  {
    Reader r = root.child("encoder");
    r.get("clip_lo", s.clip_lo);
    r.get("clip_hi", s.clip_hi);
    r.get("target_bins", s.target_bins);
    r.finish();
    check(s.clip_lo >= 0 && s.clip_lo < s.clip_hi && s.clip_hi <= 1, "encoder.clip_lo",
          "need 0 <= clip_lo < clip_hi <= 1");
    check(s.target_bins >= 1, "encoder.target_bins", "must be >= 1");
  }
  {
    auto& d = s.diffusion;
    Reader r = root.child("diffusion");
    r.get("num_steps", d.num_steps);
    r.get("beta_min", d.beta_min);
    r.get("beta_max", d.beta_max);
    r.get("hidden_width", d.hidden_width);
    r.get("hidden_layers", d.hidden_layers);
    r.get("train_steps", d.train_steps);
    r.get("batch_size", d.batch_size);
    r.get("learning_rate", d.learning_rate);
    r.get("hard_mix", d.hard_mix);
    r.get("important_k", d.important_k);
    r.get("bootstraps", d.bootstraps);
    r.get("x0_clip", d.x0_clip);
    r.finish();
    check(d.num_steps >= 1, "diffusion.num_steps", "must be >= 1");
    check(d.beta_min > 0 && d.beta_min <= d.beta_max && d.beta_max < 1, "diffusion.beta_min",
          "need 0 < beta_min <= beta_max < 1");
    check(d.hidden_width >= 1, "diffusion.hidden_width", "must be >= 1");
    check(d.batch_size >= 1, "diffusion.batch_size", "must be >= 1");
    check(d.hard_mix >= 0 && d.hard_mix <= 1, "diffusion.hard_mix", "must lie in [0, 1]");
    check(d.bootstraps >= 1, "diffusion.bootstraps", "must be >= 1");
    check(d.x0_clip > 0, "diffusion.x0_clip", "must be > 0");
  }
  {
    auto& t = s.tap;
    Reader r = root.child("tap");
    r.get("horizon", t.horizon);
    r.get("window", t.window);
    r.get("tau", t.tau);
    r.get("candidates", t.candidates);
    r.get("alpha_level", t.alpha_level);
    r.get("desired_mixture", t.desired_mixture);
    r.get("use_gate", t.use_gate);
    r.get("windowed_commit", t.windowed_commit);
    r.get("learn", t.learn);
    r.get("gate_window", t.gate_window);
    r.finish();
    check(t.window >= 1, "tap.window", "must be >= 1");
    check(t.candidates >= 1, "tap.candidates", "must be >= 1");
    check(t.alpha_level > 0 && t.alpha_level < 1, "tap.alpha_level", "must lie in (0, 1)");
    check(t.gate_window >= 1, "tap.gate_window", "must be >= 1");
    for (double w : t.desired_mixture) check(w >= 0, "tap.desired_mixture", "entries must be >= 0");
  }
  {
    Reader r = root.child("plugin");
    read_evaluator(r, s.tap.plugin.evaluator);
    r.get("folds", s.tap.plugin.folds);
    r.get("alpha", s.tap.plugin.alpha);
    r.finish();
    check(s.tap.plugin.folds >= 2, "plugin.folds", "must be >= 2");
    check(s.tap.plugin.alpha > 0 && s.tap.plugin.alpha <= 1, "plugin.alpha", "must lie in (0, 1]");
  }
  {
    auto& g = s.tap.gate;
    Reader r = root.child("gate");
    r.get("p_min", g.p_min);
    r.get("margin", g.margin);
    r.get("use_margin", g.use_margin);
    r.get("residual_percentile", g.residual_percentile);
    r.get("diversity_threshold", g.diversity_threshold);
    r.get("logical_rules", g.logical_rules);
    r.finish();
    check(g.p_min >= 0 && g.p_min <= 1, "gate.p_min", "must lie in [0, 1]");
    check(g.residual_percentile >= 0 && g.residual_percentile <= 100, "gate.residual_percentile",
          "must lie in [0, 100]");
    check(g.diversity_threshold >= 0, "gate.diversity_threshold", "must be >= 0");
  }
  {
    auto& p = s.tap.policy;
    Reader r = root.child("policy");
    r.get("hidden_width", p.hidden_width);
    r.get("hidden_layers", p.hidden_layers);
    r.get("learning_rate", p.learning_rate);
    r.get("weight_decay", p.weight_decay);
    r.get("max_grad_norm", p.max_grad_norm);
    r.get("beta", p.beta);
    r.get("log_std_min", p.log_std_min);
    r.get("log_std_max", p.log_std_max);
    r.get("replay_size", p.replay_size);
    r.finish();
    check(p.hidden_width >= 1, "policy.hidden_width", "must be >= 1");
    check(p.learning_rate > 0, "policy.learning_rate", "must be > 0");
    check(p.max_grad_norm > 0, "policy.max_grad_norm", "must be > 0");
    check(p.beta > 0, "policy.beta", "must be > 0");
    check(p.log_std_min < p.log_std_max, "policy.log_std_min", "must be below log_std_max");
    check(p.replay_size >= 1, "policy.replay_size", "must be >= 1");
  }
  {
    auto& t = s.tap;
    Reader r = root.child("feedback");
    r.get("quantile", t.feedback_quantile);
    r.get("window", t.feedback_window);
    r.get("min_events", t.feedback_min_events);
    r.get("baseline_decay", t.baseline_decay);
    r.finish();
    check(t.feedback_quantile >= 0 && t.feedback_quantile <= 1, "feedback.quantile", "must lie in [0, 1]");
    check(t.feedback_window >= 1, "feedback.window", "must be >= 1");
    check(t.baseline_decay >= 0 && t.baseline_decay < 1, "feedback.baseline_decay", "must lie in [0, 1)");
  }
  {
    Reader r = root.child("hard_inpaint");
    r.get("rho", s.hard_rho);
    r.get("fraction", s.hard_fraction);
    r.finish();
    check(s.hard_rho >= 0 && s.hard_rho <= 1, "hard_inpaint.rho", "must lie in [0, 1]");
    check(s.hard_fraction > 0 && s.hard_fraction <= 1, "hard_inpaint.fraction", "must lie in (0, 1]");
  }
  {
    Reader r = root.child("smote");
    r.get("k", s.smote_k);
    r.finish();
    check(s.smote_k >= 1, "smote.k", "must be >= 1");
  }
  {
    Reader r = root.child("downstream");
    read_evaluator(r, s.downstream);
    r.finish();
  }
  {
    Reader r = root.child("experiment");
    std::vector<std::string> ladder = mechanism_names(s.ladder);
    r.get("ladder", ladder);
    s.ladder.clear();
    for (const auto& name : ladder) {
      try {
        s.ladder.push_back(mechanism_from_string(name));
      } catch (const Error&) {
        throw ConfigError("experiment.ladder", "unknown mechanism '" + name + "'");
      }
    }
    r.get("sensitivity_window", s.sensitivity_window);
    r.get("sensitivity_tau", s.sensitivity_tau);
    r.finish();
    for (auto k : s.sensitivity_window) check(k >= 1, "experiment.sensitivity_window", "entries must be >= 1");
  }
  root.finish();
  s.tap.n_syn = s.n_syn;
  return s;
}

RunSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("malformed JSON: ") + e.what());
  }
  return parse_run_spec(j);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const RunSpec& spec) {
  json j = spec.to_json();
  // Output location and parallelism do not change results.
  j.erase("output");
  j.erase("threads");
  return fnv1a(j.dump());
}

std::vector<std::string> builtin_names() {
  return {"two-gauss-2class", "ring-4class", "piecewise-regression", "adversarial-tail"};
}

namespace {

template <typename T>
T param(const json& params, const char* key, T fallback) {
  if (!params.contains(key)) return fallback;
  try {
    return params.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("dataset.params.") + key, "wrong type");
  }
}

void check_params(const json& params, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : params.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
      throw ConfigError("dataset.params." + key, "unknown key");
    }
  }
}

ColumnSpec numeric(std::string name) {
  ColumnSpec c;
  c.name = std::move(name);
  c.kind = ColumnKind::numeric;
  return c;
}

ColumnSpec categorical(std::string name, std::vector<std::string> vocab) {
  ColumnSpec c;
  c.name = std::move(name);
  c.kind = ColumnKind::categorical;
  c.vocabulary = std::move(vocab);
  return c;
}

struct GaussParams {
  std::size_t rows;
  double separation;
  std::size_t informative;
  std::size_t noise_dims;
  bool with_category;
  double flip_fraction;
};

GaussParams gauss_params(const json& p, bool adversarial) {
  if (adversarial) {
    check_params(p, {"rows", "separation", "informative", "noise_dims", "categorical", "flip_fraction"});
  } else {
    check_params(p, {"rows", "separation", "informative", "noise_dims", "categorical"});
  }
  GaussParams g{param<std::size_t>(p, "rows", 2000),        param<double>(p, "separation", 2.5),
                param<std::size_t>(p, "informative", 2),    param<std::size_t>(p, "noise_dims", 3),
                param<bool>(p, "categorical", true),        param<double>(p, "flip_fraction", adversarial ? 0.15 : 0.0)};
  check(g.rows >= 10, "dataset.params.rows", "must be >= 10");
  check(g.informative >= 1, "dataset.params.informative", "must be >= 1");
  check(g.flip_fraction >= 0 && g.flip_fraction <= 0.5, "dataset.params.flip_fraction", "must lie in [0, 0.5]");
  return g;
}

std::vector<std::size_t> flips_for(const GaussParams& g, std::uint64_t seed) {
  auto count = static_cast<std::size_t>(std::llround(g.flip_fraction * static_cast<double>(g.rows)));
  Rng r = Rng(seed).split(0xF11B);
  auto perm = r.permutation(g.rows);
  perm.resize(count);
  std::sort(perm.begin(), perm.end());
  return perm;
}

Table gauss_table(const GaussParams& g, std::uint64_t seed) {
  auto schema = std::make_shared<Schema>();
  const std::size_t d = g.informative + g.noise_dims;
  for (std::size_t i = 0; i < d; ++i) schema->columns.push_back(numeric("x" + std::to_string(i)));
  if (g.with_category) schema->columns.push_back(categorical("tag", {"a", "b", "c"}));
  schema->columns.push_back(categorical("label", {"c0", "c1"}));
  schema->label = schema->columns.size() - 1;
  schema->task = TaskKind::classification;
  schema->validate();

  Rng rng(seed);
  const double shift = g.separation / 2.0 / std::sqrt(static_cast<double>(g.informative));
  std::vector<std::size_t> flips = flips_for(g, seed);
  Table t(schema);
  for (std::size_t i = 0; i < g.rows; ++i) {
    Rng r = rng.split(i);
    std::size_t y = r.bernoulli(0.5) ? 1 : 0;
    Record rec;
    for (std::size_t k = 0; k < d; ++k) {
      double mean = k < g.informative ? (y == 1 ? shift : -shift) : 0.0;
      rec.emplace_back(r.normal(mean, 1.0));
    }
    if (g.with_category) rec.emplace_back(std::string(1, static_cast<char>('a' + r.uniform_index(3))));
    if (std::binary_search(flips.begin(), flips.end(), i)) y = 1 - y;
    rec.emplace_back(y == 1 ? std::string("c1") : std::string("c0"));
    t.append(std::move(rec), Provenance::real);
  }
  return t;
}

Table ring_table(const json& p, std::uint64_t seed) {
  check_params(p, {"rows", "radius", "noise", "noise_dims"});
  auto rows = param<std::size_t>(p, "rows", 2000);
  double radius = param<double>(p, "radius", 3.0);
  double noise = param<double>(p, "noise", 0.5);
  auto noise_dims = param<std::size_t>(p, "noise_dims", 2);
  check(rows >= 10, "dataset.params.rows", "must be >= 10");
  auto schema = std::make_shared<Schema>();
  schema->columns.push_back(numeric("x0"));
  schema->columns.push_back(numeric("x1"));
  for (std::size_t i = 0; i < noise_dims; ++i) schema->columns.push_back(numeric("z" + std::to_string(i)));
  schema->columns.push_back(categorical("label", {"q0", "q1", "q2", "q3"}));
  schema->label = schema->columns.size() - 1;
  schema->task = TaskKind::classification;
  Rng rng(seed);
  Table t(schema);
  for (std::size_t i = 0; i < rows; ++i) {
    Rng r = rng.split(i);
    double theta = r.uniform(0.0, 2.0 * std::numbers::pi);
    double rad = radius + r.normal(0.0, noise);
    Record rec{rad * std::cos(theta), rad * std::sin(theta)};
    for (std::size_t k = 0; k < noise_dims; ++k) rec.emplace_back(r.normal());
    auto q = std::min<std::size_t>(3, static_cast<std::size_t>(theta / (std::numbers::pi / 2.0)));
    rec.emplace_back("q" + std::to_string(q));
    t.append(std::move(rec), Provenance::real);
  }
  return t;
}

Table piecewise_table(const json& p, std::uint64_t seed) {
  check_params(p, {"rows", "noise", "noise_dims"});
  auto rows = param<std::size_t>(p, "rows", 2000);
  double noise = param<double>(p, "noise", 0.3);
  auto noise_dims = param<std::size_t>(p, "noise_dims", 2);
  check(rows >= 10, "dataset.params.rows", "must be >= 10");
  auto schema = std::make_shared<Schema>();
  schema->columns.push_back(numeric("x0"));
  schema->columns.push_back(numeric("x1"));
  for (std::size_t i = 0; i < noise_dims; ++i) schema->columns.push_back(numeric("z" + std::to_string(i)));
  schema->columns.push_back(numeric("y"));
  schema->label = schema->columns.size() - 1;
  schema->task = TaskKind::regression;
  Rng rng(seed);
  Table t(schema);
  for (std::size_t i = 0; i < rows; ++i) {
    Rng r = rng.split(i);
    double x0 = r.uniform(-3.0, 3.0);
    double x1 = r.normal();
    Record rec{x0, x1};
    for (std::size_t k = 0; k < noise_dims; ++k) rec.emplace_back(r.normal());
    double f = x0 < 0.0 ? -x0 : 2.0 * x0;
    rec.emplace_back(f + 0.5 * x1 + r.normal(0.0, noise));
    t.append(std::move(rec), Provenance::real);
  }
  return t;
}

}  // namespace

Table builtin_dataset(const std::string& name, const json& params, std::uint64_t seed) {
  if (!params.is_object()) throw ConfigError("dataset.params", "expected an object");
  if (name == "two-gauss-2class") return gauss_table(gauss_params(params, false), seed);
  if (name == "adversarial-tail") return gauss_table(gauss_params(params, true), seed);
  if (name == "ring-4class") return ring_table(params, seed);
  if (name == "piecewise-regression") return piecewise_table(params, seed);
  throw Error("unknown builtin dataset '" + name + "'");
}

std::vector<std::size_t> flipped_rows(const json& params, std::uint64_t seed) {
  return flips_for(gauss_params(params, true), seed);
}

Table load_dataset(const DatasetSpec& spec) {
  if (!spec.builtin.empty()) {
    auto seed = param<std::uint64_t>(spec.params, "seed", 0);
    json p = spec.params;
    p.erase("seed");
    return builtin_dataset(spec.builtin, p, seed);
  }
  auto slurp = [](const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("dataset", "cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  return load_table(slurp(spec.csv), slurp(spec.schema));
}

double MetricsReport::utility() const {
  if (predictors.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : predictors) total += task == TaskKind::classification ? p.accuracy : -p.rmse;
  return total / static_cast<double>(predictors.size());
}

double accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred) {
  if (truth.size() != pred.size() || truth.empty()) throw Error("accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double macro_f1(std::span<const std::size_t> truth, std::span<const std::size_t> pred, std::size_t num_classes) {
  if (truth.size() != pred.size() || truth.empty()) throw Error("macro_f1: size mismatch or empty");
  std::vector<double> tp(num_classes), fp(num_classes), fn(num_classes);
  std::vector<bool> seen(num_classes, false);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    seen[truth[i]] = seen[pred[i]] = true;
    if (truth[i] == pred[i]) {
      tp[truth[i]] += 1;
    } else {
      fp[pred[i]] += 1;
      fn[truth[i]] += 1;
    }
  }
  double total = 0.0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (!seen[c]) continue;
    ++classes;
    total += 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]);
  }
  return total / static_cast<double>(classes);
}

double rmse(std::span<const double> truth, std::span<const double> pred) {
  if (truth.size() != pred.size() || truth.empty()) throw Error("rmse: size mismatch or empty");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (truth[i] - pred[i]) * (truth[i] - pred[i]);
  return std::sqrt(s / static_cast<double>(truth.size()));
}

double mae(std::span<const double> truth, std::span<const double> pred) {
  if (truth.size() != pred.size() || truth.empty()) throw Error("mae: size mismatch or empty");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - pred[i]);
  return s / static_cast<double>(truth.size());
}

MetricsReport downstream_metrics(const Table& train, const Table& val, const Table& test, const Encoder& encoder,
                                 const EvaluatorConfig& base, std::uint64_t seed) {
  MetricsReport report;
  report.task = encoder.targets().task;
  const bool cls = report.task == TaskKind::classification;
  const std::size_t C = cls ? encoder.num_conditions() : 0;
  LabeledMatrix tm = LabeledMatrix::from_table(encoder, train);
  LabeledMatrix vm = LabeledMatrix::from_table(encoder, val);
  LabeledMatrix sm = LabeledMatrix::from_table(encoder, test);
  for (EvaluatorConfig cfg : proxy_suite(report.task, seed)) {
    EvaluatorKind kind = cfg.kind;
    cfg = base;
    cfg.kind = kind;
    cfg.seed = seed;
    Evaluator ev = Evaluator::fit(cfg, tm, C, &vm);
    auto preds = ev.predict_all(sm.x);
    PredictorMetrics m;
    m.predictor = to_string(kind);
    if (cls) {
      std::vector<std::size_t> yhat;
      for (const auto& p : preds) {
        Eigen::Index arg = 0;
        p.probs.maxCoeff(&arg);
        yhat.push_back(static_cast<std::size_t>(arg));
      }
      m.accuracy = accuracy(sm.cls, yhat);
      m.macro_f1 = macro_f1(sm.cls, yhat, C);
    } else {
      std::vector<double> truth(sm.y.data(), sm.y.data() + sm.y.size());
      std::vector<double> yhat;
      for (const auto& p : preds) yhat.push_back(p.mean);
      m.rmse = rmse(truth, yhat);
      m.mae = mae(truth, yhat);
    }
    report.predictors.push_back(m);
  }
  return report;
}

MechanismContext SeedContext::mechanism_context(const RunSpec& spec) const {
  MechanismContext ctx;
  ctx.encoder = &encoder;
  ctx.train = &splits.train;
  ctx.denoiser = &denoiser;
  ctx.schedule = &schedule;
  ctx.diffusion = &diffusion;
  ctx.important = important;
  ctx.tap = spec.tap;
  ctx.tap.n_syn = spec.n_syn;
  ctx.tap.seed = seed;
  ctx.hard_rho = spec.hard_rho;
  ctx.hard_fraction = spec.hard_fraction;
  ctx.smote_k = spec.smote_k;
  return ctx;
}

SeedContext prepare_seed(const RunSpec& spec, const Table& dataset, std::uint64_t seed) {
  SeedContext s;
  s.seed = seed;
  s.diffusion = spec.diffusion;
  Splits raw = scarcity_split(dataset, spec.n_real, seed);
  s.schema = std::make_shared<const Schema>(fit_encoder(raw.train, spec.clip_lo, spec.clip_hi));
  s.splits.train = raw.train.with_schema(s.schema);
  s.splits.val = raw.val.with_schema(s.schema);
  s.splits.test = raw.test.with_schema(s.schema);
  s.encoder = Encoder(s.schema, make_target_space(s.splits.train, spec.target_bins));
  s.schedule = build_schedule(s.diffusion.num_steps, s.diffusion.beta_min, s.diffusion.beta_max);
  Rng rng = Rng(seed).split(0xBAC4B07E);
  Rng train_rng = rng.split(0);
  s.denoiser = train_denoiser(s.splits.train, s.encoder, s.schedule, s.diffusion, train_rng);
  std::size_t features = s.schema->feature_indices().size();
  std::size_t k = s.diffusion.important_k ? s.diffusion.important_k : (features + 2) / 3;
  Rng mi_rng = rng.split(1);
  s.important = important_columns(s.splits.train, s.encoder, mi_rng, k, s.diffusion.bootstraps);
  return s;
}

double injected_tail_risk(const SeedContext& seed, const RunSpec& spec, const Table& injected) {
  if (injected.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t C =
      seed.encoder.targets().task == TaskKind::classification ? seed.encoder.num_conditions() : 0;
  LabeledMatrix real = LabeledMatrix::from_table(seed.encoder, seed.splits.train);
  Evaluator ev = Evaluator::fit(spec.tap.plugin.evaluator, real, C);
  LabeledMatrix inj = LabeledMatrix::from_table(seed.encoder, injected);
  DiagnosticScores rs = score_rows(ev, real, real);
  DiagnosticScores is = score_rows(ev, inj, real);
  return tail_risk(is.s_con, rs.s_con, 0.2);
}

MechanismResult evaluate_mechanism(const RunSpec& spec, const SeedContext& seed, Mechanism m, const RunConfig& tap,
                                   const MetricsReport& real_only) {
  MechanismContext ctx = seed.mechanism_context(spec);
  ctx.tap = tap;
  ctx.tap.n_syn = spec.n_syn;
  MechanismResult r;
  r.mechanism = m;
  r.seed = seed.seed;
  r.output = run_mechanism(m, spec.n_syn, ctx, seed.seed * 1000003ULL + static_cast<std::uint64_t>(m));
  r.injected = r.output.synthetic.size();
  Table augmented = seed.splits.train;
  augmented.append_table(r.output.synthetic);
  r.metrics = downstream_metrics(augmented, seed.splits.val, seed.splits.test, seed.encoder, spec.downstream,
                                 seed.seed);
  r.gain = r.metrics.utility() - real_only.utility();
  r.tail_risk = injected_tail_risk(seed, spec, r.output.synthetic);
  return r;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// ---- commands ---------------------------------------------------------------

std::vector<std::string> command_names() {
  return {"train-backbone", "augment", "evaluate", "ladder", "calibrate", "ablate", "sensitivity"};
}

namespace {

namespace fs = std::filesystem;

class Outputs {
 public:
  Outputs(fs::path dir, const RunSpec& spec, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
    fs::create_directories(dir_);
    manifest_ = {{"command", command_},
                 {"config_hash", hash_hex(config_hash(spec))},
                 {"seeds", spec.seeds},
                 {"config", spec.to_json()},
                 {"averaging", "mean and sample std over seeds"},
                 {"artifacts", json::array()}};
  }

  void write(const std::string& rel, const std::string& content) {
    fs::path p = dir_ / rel;
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << content;
    if (!out) throw Error("cannot write '" + p.string() + "'");
    std::lock_guard lock(mu_);
    manifest_["artifacts"].push_back({{"path", rel}, {"fnv1a", hash_hex(fnv1a(content))}, {"bytes", content.size()}});
  }

  void finish(const std::string& status, const std::string& message = "") {
    std::lock_guard lock(mu_);
    manifest_["status"] = status;
    if (!message.empty()) manifest_["error"] = message;
    auto& arts = manifest_["artifacts"];
    std::sort(arts.begin(), arts.end(), [](const json& a, const json& b) { return a["path"] < b["path"]; });
    std::ofstream out(dir_ / "manifest.json");
    out << manifest_.dump(2) << '\n';
  }

  static std::string hash_hex(std::uint64_t h) {
    std::ostringstream ss;
    ss << std::hex;
    ss.width(16);
    ss.fill('0');
    ss << h;
    return ss.str();
  }

 private:
  fs::path dir_;
  std::string command_;
  json manifest_;
  std::mutex mu_;
};

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

struct Stats {
  double mean = 0.0;
  double std = 0.0;
  double se = 0.0;
};

Stats stats_of(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    s.se = s.std / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

json stats_json(const std::vector<double>& v) {
  Stats s = stats_of(v);
  return {{"mean", s.mean}, {"std", s.std}, {"se", s.se}, {"n", v.size()}};
}

void metrics_rows(std::ostringstream& csv, const std::string& mech, std::uint64_t seed, const MetricsReport& m) {
  for (const auto& p : m.predictors) {
    if (m.task == TaskKind::classification) {
      csv << mech << ',' << seed << ',' << p.predictor << ",accuracy," << num(p.accuracy) << '\n';
      csv << mech << ',' << seed << ',' << p.predictor << ",macro_f1," << num(p.macro_f1) << '\n';
    } else {
      csv << mech << ',' << seed << ',' << p.predictor << ",rmse," << num(p.rmse) << '\n';
      csv << mech << ',' << seed << ',' << p.predictor << ",mae," << num(p.mae) << '\n';
    }
  }
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

struct Prepared {
  std::vector<SeedContext> seeds;
  std::vector<MetricsReport> real_only;
};

Prepared prepare_all(const RunSpec& spec, const Table& dataset, bool with_real_only) {
  Prepared p;
  p.seeds.resize(spec.seeds.size());
  p.real_only.resize(spec.seeds.size());
  parallel_for(spec.seeds.size(), spec.threads, [&](std::size_t i) {
    p.seeds[i] = prepare_seed(spec, dataset, spec.seeds[i]);
    if (with_real_only) {
      const auto& s = p.seeds[i];
      p.real_only[i] = downstream_metrics(s.splits.train, s.splits.val, s.splits.test, s.encoder, spec.downstream,
                                          s.seed);
    }
  });
  return p;
}

void cmd_train_backbone(const RunSpec& spec, const Table& dataset, Outputs& out) {
  Prepared p = prepare_all(spec, dataset, false);
  for (const auto& s : p.seeds) {
    json ck = s.denoiser.to_json();
    ck["important_columns"] = s.important;
    ck["final_loss"] = s.denoiser.loss_log.empty() ? 0.0 : s.denoiser.loss_log.back();
    out.write(seed_dir(s.seed) + "/backbone.json", ck.dump());
  }
}

void cmd_augment(const RunSpec& spec, const Table& dataset, Outputs& out) {
  Prepared p = prepare_all(spec, dataset, false);
  std::vector<MechanismOutput> results(p.seeds.size());
  parallel_for(p.seeds.size(), spec.threads, [&](std::size_t i) {
    const auto& s = p.seeds[i];
    results[i] = run_mechanism(spec.mechanism, spec.n_syn, s.mechanism_context(spec),
                               s.seed * 1000003ULL + static_cast<std::uint64_t>(spec.mechanism));
  });
  json summary = json::array();
  for (std::size_t i = 0; i < p.seeds.size(); ++i) {
    const auto& s = p.seeds[i];
    Table aug = s.splits.train;
    aug.append_table(results[i].synthetic);
    out.write(seed_dir(s.seed) + "/augmented.csv", to_csv(aug));
    json entry = {{"seed", s.seed}, {"synthetic_rows", results[i].synthetic.size()}};
    if (results[i].trace) {
      out.write(seed_dir(s.seed) + "/trace.jsonl", results[i].trace->to_jsonl());
      entry["trace_hash"] = Outputs::hash_hex(results[i].trace->hash());
      entry["shortfall"] = results[i].trace->shortfall;
    }
    summary.push_back(entry);
  }
  out.write("augment_summary.json", summary.dump(2));
}

void cmd_evaluate(const RunSpec& spec, const Table& dataset, Outputs& out) {
  Prepared p = prepare_all(spec, dataset, true);
  std::vector<MechanismResult> results(p.seeds.size());
  parallel_for(p.seeds.size(), spec.threads, [&](std::size_t i) {
    results[i] = evaluate_mechanism(spec, p.seeds[i], spec.mechanism, spec.tap, p.real_only[i]);
  });
  std::ostringstream csv;
  csv << "mechanism,seed,predictor,metric,value\n";
  json summary = {{"mechanism", to_string(spec.mechanism)}};
  std::map<std::string, std::vector<double>> agg;
  for (std::size_t i = 0; i < results.size(); ++i) {
    metrics_rows(csv, "real", spec.seeds[i], p.real_only[i]);
    metrics_rows(csv, to_string(spec.mechanism), spec.seeds[i], results[i].metrics);
    for (const auto& m : results[i].metrics.predictors) {
      if (results[i].metrics.task == TaskKind::classification) {
        agg[m.predictor + ".accuracy"].push_back(m.accuracy);
        agg[m.predictor + ".macro_f1"].push_back(m.macro_f1);
      } else {
        agg[m.predictor + ".rmse"].push_back(m.rmse);
        agg[m.predictor + ".mae"].push_back(m.mae);
      }
    }
    agg["gain"].push_back(results[i].gain);
  }
  for (const auto& [k, v] : agg) summary["metrics"][k] = stats_json(v);
  out.write("metrics.csv", csv.str());
  out.write("metrics_summary.json", summary.dump(2));
}

void cmd_ladder(const RunSpec& spec, const Table& dataset, Outputs& out) {
  Prepared p = prepare_all(spec, dataset, true);
  const std::size_t M = spec.ladder.size();
  std::vector<MechanismResult> results(p.seeds.size() * M);
  parallel_for(results.size(), spec.threads, [&](std::size_t idx) {
    std::size_t i = idx / M;
    results[idx] = evaluate_mechanism(spec, p.seeds[i], spec.ladder[idx % M], spec.tap, p.real_only[i]);
  });
  std::ostringstream csv;
  csv << "mechanism,seed,metric,value\n";
  std::map<std::string, std::vector<double>> gains;
  for (const auto& r : results) {
    csv << to_string(r.mechanism) << ',' << r.seed << ",gain," << num(r.gain) << '\n';
    csv << to_string(r.mechanism) << ',' << r.seed << ",injected," << r.injected << '\n';
    csv << to_string(r.mechanism) << ',' << r.seed << ",tail_risk," << num(r.tail_risk) << '\n';
    gains[to_string(r.mechanism)].push_back(r.gain);
  }
  json summary;
  for (const auto& [k, v] : gains) summary[k] = stats_json(v);
  out.write("ladder.csv", csv.str());
  out.write("ladder_summary.json", summary.dump(2));
}

void cmd_calibrate(const RunSpec& spec, const Table& dataset, Outputs& out) {
  Prepared p = prepare_all(spec, dataset, false);
  std::vector<std::vector<CalibrationCheck>> per(p.seeds.size());
  parallel_for(p.seeds.size(), spec.threads, [&](std::size_t i) {
    const auto& s = p.seeds[i];
    MechanismOutput o = run_mechanism(Mechanism::tap, spec.n_syn, s.mechanism_context(spec),
                                      s.seed * 1000003ULL + static_cast<std::uint64_t>(Mechanism::tap));
    auto suite = proxy_suite(s.encoder.targets().task, s.seed);
    per[i] = calibration_checks(*o.trace, s.encoder, s.splits.train, s.splits.val, suite);
  });
  std::vector<CalibrationCheck> all;
  for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
  CalibrationReport rep = summarize_calibration(all);
  std::ostringstream csv;
  csv << "seed,window,estimate,epsilon,proxy,covered\n";
  for (const auto& c : rep.checks) {
    csv << c.seed << ',' << c.window << ',' << num(c.estimate) << ',' << num(c.epsilon) << ',' << num(c.proxy) << ','
        << (c.covered ? 1 : 0) << '\n';
  }
  out.write("calibration.csv", csv.str());
  out.write("calibration_report.json",
            json{{"checks", rep.checks.size()}, {"coverage", rep.coverage}, {"mae", rep.mae},
                 {"mean_epsilon", rep.mean_epsilon}}
                .dump(2));
}

void cmd_ablate(const RunSpec& spec, const Table& dataset, Outputs& out) {
  Prepared p = prepare_all(spec, dataset, true);
  struct Variant {
    std::string name;
    RunConfig cfg;
  };
  std::vector<Variant> variants;
  variants.push_back({"full", spec.tap});
  variants.push_back({"no-gate", spec.tap});
  variants.back().cfg.use_gate = false;
  variants.push_back({"no-commit", spec.tap});
  variants.back().cfg.windowed_commit = false;
  variants.push_back({"no-learn", spec.tap});
  variants.back().cfg.learn = false;
  const std::size_t V = variants.size();
  std::vector<MechanismResult> results(p.seeds.size() * V);
  parallel_for(results.size(), spec.threads, [&](std::size_t idx) {
    std::size_t i = idx / V;
    results[idx] = evaluate_mechanism(spec, p.seeds[i], Mechanism::tap, variants[idx % V].cfg, p.real_only[i]);
  });
  std::ostringstream csv;
  csv << "variant,seed,metric,value\n";
  json summary;
  for (std::size_t v = 0; v < V; ++v) {
    std::vector<double> gains, tails;
    double wins = 0.0;
    for (std::size_t i = 0; i < p.seeds.size(); ++i) {
      const auto& r = results[i * V + v];
      csv << variants[v].name << ',' << r.seed << ",gain," << num(r.gain) << '\n';
      csv << variants[v].name << ',' << r.seed << ",tail_risk," << num(r.tail_risk) << '\n';
      csv << variants[v].name << ',' << r.seed << ",injected," << r.injected << '\n';
      gains.push_back(r.gain);
      if (!std::isnan(r.tail_risk)) tails.push_back(r.tail_risk);
      wins += r.gain > 0 ? 1.0 : 0.0;
    }
    summary[variants[v].name] = {{"gain", stats_json(gains)},
                                 {"tail_risk", stats_json(tails)},
                                 {"win_rate", wins / static_cast<double>(p.seeds.size())}};
  }
  out.write("ablation.csv", csv.str());
  out.write("ablation_summary.json", summary.dump(2));
}

void cmd_sensitivity(const RunSpec& spec, const Table& dataset, Outputs& out) {
  Prepared p = prepare_all(spec, dataset, true);
  struct Setting {
    std::string grid;
    std::string key;
    RunConfig cfg;
  };
  std::vector<Setting> settings;
  for (auto k : spec.sensitivity_window) {
    RunConfig c = spec.tap;
    c.window = k;
    settings.push_back({"K", std::to_string(k), c});
  }
  for (double t : spec.sensitivity_tau) {
    RunConfig c = spec.tap;
    c.tau = t;
    settings.push_back({"tau", num(t), c});
  }
  const std::size_t S = settings.size();
  std::vector<MechanismResult> results(p.seeds.size() * S);
  parallel_for(results.size(), spec.threads, [&](std::size_t idx) {
    std::size_t i = idx / S;
    results[idx] = evaluate_mechanism(spec, p.seeds[i], Mechanism::tap, settings[idx % S].cfg, p.real_only[i]);
  });
  std::ostringstream csv;
  csv << "grid,setting,seed,utility\n";
  std::map<std::string, std::map<std::string, double>> grids;
  for (std::size_t s = 0; s < S; ++s) {
    double total = 0.0;
    for (std::size_t i = 0; i < p.seeds.size(); ++i) {
      const auto& r = results[i * S + s];
      csv << settings[s].grid << ',' << settings[s].key << ',' << r.seed << ',' << num(r.metrics.utility()) << '\n';
      total += r.metrics.utility();
    }
    grids[settings[s].grid][settings[s].key] = total / static_cast<double>(p.seeds.size());
  }
  json report;
  const std::map<std::string, std::string> defaults{{"K", std::to_string(spec.tap.window)}, {"tau", num(spec.tap.tau)}};
  for (const auto& [grid, values] : grids) {
    report[grid]["values"] = values;
    auto it = defaults.find(grid);
    if (values.count(it->second)) {
      report[grid]["worst_drop"] = worst_drop(values, it->second);
    } else {
      report[grid]["worst_drop"] = nullptr;
      report[grid]["note"] = "default setting not in grid";
    }
  }
  out.write("sensitivity.csv", csv.str());
  out.write("sensitivity_report.json", report.dump(2));
}

}  // namespace

int run_command(const CommandOptions& options) {
  RunSpec spec;
  try {
    auto names = command_names();
    if (std::find(names.begin(), names.end(), options.command) == names.end()) {
      throw ConfigError("command", "unknown command '" + options.command + "'");
    }
    if (!options.config) throw ConfigError("--config", "required");
    spec = load_run_spec(*options.config);
    if (!options.seeds.empty()) spec.seeds = options.seeds;
    if (options.out) {
      spec.output = *options.out;
    } else if (const char* env = std::getenv("TAP_OUT_DIR"); env && *env) {
      spec.output = env;
    }
    if (options.mechanism) {
      try {
        spec.mechanism = mechanism_from_string(*options.mechanism);
      } catch (const Error&) {
        throw ConfigError("--mechanism", "unknown mechanism '" + *options.mechanism + "'");
      }
    }
    if (options.threads) {
      if (*options.threads < 1) throw ConfigError("--threads", "must be >= 1");
      spec.threads = *options.threads;
    }
    if (options.deterministic) spec.deterministic = true;
    if (spec.deterministic) spec.threads = 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::config_error);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::config_error);
  }

  Table dataset;
  try {
    dataset = load_dataset(spec.dataset);
    if (spec.n_real > dataset.size()) throw ConfigError("n_real", "exceeds the dataset size");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::config_error);
  } catch (const std::exception& e) {
    std::cerr << "config error: dataset: " << e.what() << '\n';
    return static_cast<int>(ExitCode::config_error);
  }

  std::unique_ptr<Outputs> out;
  try {
    out = std::make_unique<Outputs>(spec.output, spec, options.command);
    const auto& c = options.command;
    if (c == "train-backbone") cmd_train_backbone(spec, dataset, *out);
    else if (c == "augment") cmd_augment(spec, dataset, *out);
    else if (c == "evaluate") cmd_evaluate(spec, dataset, *out);
    else if (c == "ladder") cmd_ladder(spec, dataset, *out);
    else if (c == "calibrate") cmd_calibrate(spec, dataset, *out);
    else if (c == "ablate") cmd_ablate(spec, dataset, *out);
    else if (c == "sensitivity") cmd_sensitivity(spec, dataset, *out);
    out->finish("ok");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (out) out->finish("failed", e.what());
    return static_cast<int>(ExitCode::compute_failure);
  }
  return static_cast<int>(ExitCode::ok);
}

}  // namespace tap

#include "tap/controller.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

namespace tap {

void RunConfig::validate() const {
  if (window < 1) throw Error("run config: window must be >= 1");
  if (candidates < 1) throw Error("run config: candidates must be >= 1");
  if (!(alpha_level > 0.0 && alpha_level < 1.0)) throw Error("run config: alpha_level must lie in (0, 1)");
  if (plugin.folds < 1) throw Error("run config: folds must be >= 1");
  if (!(plugin.alpha > 0.0 && plugin.alpha <= 1.0)) throw Error("run config: alpha must lie in (0, 1]");
  if (!(feedback_quantile >= 0.0 && feedback_quantile <= 1.0)) {
    throw Error("run config: feedback_quantile must lie in [0, 1]");
  }
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw Error("run config: baseline_decay must lie in [0, 1)");
  for (double w : desired_mixture) {
    if (!(w >= 0.0)) throw Error("run config: desired_mixture entries must be >= 0");
  }
  gate.validate();
}

std::size_t default_horizon(std::size_t n_syn, std::size_t candidates, std::size_t window) {
  if (candidates == 0 || window == 0) throw Error("default_horizon: candidates and window must be positive");
  std::size_t t = (2 * n_syn + candidates - 1) / candidates;
  t = (t + window - 1) / window * window;
  return std::clamp<std::size_t>(t, std::min<std::size_t>(window, 200), 200);
}

std::size_t RunConfig::effective_horizon() const {
  return horizon > 0 ? horizon : default_horizon(n_syn, candidates, window);
}

bool commit_decision(const UtilityEstimate& estimate, double tau) {
  return estimate.value > tau + estimate.epsilon;
}

CommitCheck commit_check(PluginEstimator& estimator, const LabeledMatrix& pool, double tau) {
  CommitCheck out;
  out.estimate = estimator.utility(pool);
  out.commit = !pool.empty() && commit_decision(out.estimate, tau);
  if (out.commit) estimator.commit(pool);
  return out;
}

nlohmann::json record_to_json(const Record& r) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : r) {
    if (std::holds_alternative<double>(c)) {
      j.push_back(std::get<double>(c));
    } else {
      j.push_back(std::get<std::string>(c));
    }
  }
  return j;
}

Record record_from_json(const nlohmann::json& j, const Schema& schema) {
  if (!j.is_array() || j.size() != schema.columns.size()) throw Error("record has the wrong number of cells");
  Record r;
  for (std::size_t c = 0; c < j.size(); ++c) {
    if (schema.columns[c].is_numeric()) {
      r.emplace_back(j[c].get<double>());
    } else {
      r.emplace_back(j[c].get<std::string>());
    }
  }
  return r;
}

namespace {

nlohmann::json estimate_json(const UtilityEstimate& e) {
  nlohmann::json eps = std::isfinite(e.epsilon) ? nlohmann::json(e.epsilon) : nlohmann::json("inf");
  return {{"value", e.value}, {"epsilon", eps}, {"per_fold", e.per_fold}};
}

nlohmann::json action_json(const Action& a) {
  return {{"condition", a.condition}, {"template", to_string(a.tmpl)}, {"rho", a.rho}, {"rho_raw", a.rho_raw}};
}

const char* label_name(Feedback f) {
  switch (f) {
    case Feedback::desirable: return "+1";
    case Feedback::undesirable: return "-1";
    case Feedback::skip: return "skip";
  }
  return "skip";
}

}  // namespace

std::string RunTrace::to_jsonl() const {
  std::ostringstream out;
  out << nlohmann::json{{"type", "header"}, {"seed", seed}, {"horizon", horizon}}.dump() << '\n';
  for (const auto& s : steps) {
    nlohmann::json batch = nlohmann::json::array();
    for (const auto& r : s.batch) batch.push_back(record_to_json(r));
    nlohmann::json j{{"type", "step"},
                     {"step", s.step},
                     {"buffer_size", s.buffer_size},
                     {"state", s.state.to_json()},
                     {"action", action_json(s.action)},
                     {"logp", s.logp},
                     {"logp_reference", s.logp_reference},
                     {"proposed", s.proposed},
                     {"admitted", s.admitted},
                     {"reasons", s.reasons},
                     {"utility", estimate_json(s.utility)},
                     {"advantage", s.feedback.advantage},
                     {"kappa", s.feedback.kappa},
                     {"feedback", label_name(s.feedback.label)},
                     {"updated", s.updated},
                     {"kto_loss", s.kto_loss},
                     {"batch", batch}};
    out << j.dump() << '\n';
  }
  for (const auto& w : windows) {
    nlohmann::json pool = nlohmann::json::array();
    for (const auto& r : w.pool) pool.push_back(record_to_json(r));
    nlohmann::json j{{"type", "window"},     {"index", w.index},          {"step", w.step},
                     {"pool_size", w.pool_size}, {"estimate", estimate_json(w.estimate)},
                     {"commit", w.commit},   {"early", w.early},          {"buffer_size", w.buffer_size},
                     {"loss_after", w.loss_after}, {"pool", pool}};
    out << j.dump() << '\n';
  }
  out << nlohmann::json{{"type", "summary"},
                        {"committed", committed},
                        {"shortfall", shortfall},
                        {"loss_trajectory", loss_trajectory},
                        {"evaluator_fits", counters.fits},
                        {"evaluator_predictions", counters.predictions}}
             .dump()
      << '\n';
  return out.str();
}

std::uint64_t RunTrace::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_jsonl()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

void append_columns(Eigen::MatrixXd& m, const Eigen::MatrixXd& extra) {
  if (extra.cols() == 0) return;
  if (m.cols() == 0) {
    m = extra;
    return;
  }
  Eigen::MatrixXd out(m.rows(), m.cols() + extra.cols());
  out << m, extra;
  m = std::move(out);
}

Table rows_to_table(const std::shared_ptr<const Schema>& schema, const std::vector<Record>& rows, Provenance tag) {
  Table t(schema);
  for (const auto& r : rows) t.append(r, tag);
  return t;
}

}  // namespace

RunResult run_tap(const RunConfig& config, const TapInputs& in) {
  config.validate();
  if (!in.encoder || !in.train || !in.denoiser || !in.schedule || !in.diffusion) {
    throw Error("run_tap: missing inputs");
  }
  const Encoder& enc = *in.encoder;
  const Table& train = *in.train;
  if (train.empty()) throw Error("run_tap: empty training table");
  const auto& schema = train.schema_ptr();
  const std::size_t C = enc.num_conditions();
  const std::size_t T = config.effective_horizon();
  const std::size_t K = config.windowed_commit ? config.window : 1;

  PluginConfig pcfg = config.plugin;
  pcfg.alpha_level = config.alpha_level;
  Rng master(config.seed);
  PluginEstimator plugin(enc, train, pcfg, master.split(1).next_u64());
  Rng policy_rng = master.split(2);
  PolicyNet policy(C, config.policy, policy_rng);
  AdamW optimizer(policy.net(), AdamConfig{config.policy.learning_rate, 0.9, 0.999, 1e-8, config.policy.weight_decay});
  AdvantageTracker tracker(config.feedback_window, config.feedback_quantile, config.feedback_min_events,
                           config.baseline_decay);
  GateStats stats(config.gate_window);
  std::deque<FeedbackEvent> replay;

  RunResult result;
  result.committed = Table(schema);
  RunTrace& trace = result.trace;
  trace.seed = config.seed;
  trace.horizon = T;

  Table data = train;  // D_t
  Eigen::MatrixXd d0_features = enc.feature_matrix(train);
  Eigen::MatrixXd buffer_features;
  std::vector<Record> pool;
  Eigen::MatrixXd pool_features;
  std::vector<std::size_t> real_conditions = enc.conditions(train);

  std::optional<GateContext> gate;
  std::optional<ProposalContext> proposals;
  auto rebuild = [&] {
    LabeledMatrix dm = LabeledMatrix::from_table(enc, data);
    std::vector<Provenance> prov(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) prov[i] = data.provenance(i);
    gate.emplace(enc, dm, prov, pcfg.evaluator, config.gate);
    proposals.emplace(make_proposal_context(data, enc, *in.denoiser, *in.schedule, *in.diffusion, gate->evaluator(),
                                            in.important));
  };
  rebuild();
  trace.loss_trajectory.push_back(plugin.loss());

  std::size_t windows = 0;
  auto check_pool = [&](std::size_t step, bool early) {
    std::size_t room = config.n_syn - result.committed.size();
    std::vector<Record> evaluated(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(room, pool.size())));
    Table pool_table = rows_to_table(schema, evaluated, Provenance::synthetic);
    LabeledMatrix pm = LabeledMatrix::from_table(enc, pool_table);
    WindowRecord w;
    w.index = windows++;
    w.step = step;
    w.pool_size = evaluated.size();
    w.early = early;
    if (config.windowed_commit) {
      CommitCheck cc = commit_check(plugin, pm, config.tau);
      w.estimate = cc.estimate;
      w.commit = cc.commit;
    } else {
      w.estimate = plugin.utility(pm);
      w.commit = !evaluated.empty();
      if (w.commit) plugin.commit(pm);
    }
    if (w.commit) {
      result.committed.append_table(pool_table);
      data.append_table(pool_table);
      append_columns(buffer_features, pm.x);
      rebuild();
    }
    trace.commits.times.push_back(step);
    trace.commits.sizes.push_back(evaluated.size());
    trace.commits.utilities.push_back(w.estimate.value);
    trace.commits.epsilons.push_back(w.estimate.epsilon);
    trace.commits.accepted.push_back(w.commit);
    w.buffer_size = result.committed.size();
    w.loss_after = plugin.loss();
    trace.loss_trajectory.push_back(w.loss_after);
    w.pool = std::move(evaluated);
    trace.windows.push_back(std::move(w));
    pool.clear();
    pool_features.resize(0, 0);
  };

  for (std::size_t t = 1; t <= T && result.committed.size() < config.n_syn; ++t) {
    Rng step_rng = master.split(1000 + t);
    StepRecord rec;
    rec.step = t;
    rec.buffer_size = result.committed.size();

    const Eigen::MatrixXd& reference = buffer_features.cols() > 0 ? buffer_features : d0_features;
    std::vector<std::size_t> data_conditions = proposals->row_conditions;
    const FocusedSets& focused = plugin.focused();
    StateInputs si;
    si.num_conditions = C;
    si.data_conditions = data_conditions;
    si.desired = config.desired_mixture;
    si.real_conditions = real_conditions;
    si.focused_uncertainty = focused.uncertainty;
    si.gate_stats = &stats;
    si.pool = &pool_features;
    si.reference = &reference;
    rec.state = compute_state(si);

    Rng action_rng = step_rng.split(1);
    SampledAction sa = policy_sample(policy, rec.state, action_rng);
    rec.action = sa.action;
    rec.logp = sa.logp;
    rec.logp_reference = reference_policy(rec.state, config.policy.reference).logp(sa.action);

    Rng propose_rng = step_rng.split(2);
    auto props = propose_batch(*proposals, sa.action, config.candidates, propose_rng);
    std::vector<Record> candidates;
    candidates.reserve(props.size());
    for (auto& p : props) candidates.push_back(std::move(p.record));
    rec.proposed = candidates.size();

    std::vector<Record> admitted;
    if (config.use_gate) {
      Eigen::MatrixXd refs = buffer_features;
      append_columns(refs, pool_features);
      if (refs.cols() == 0) refs.resize(static_cast<Eigen::Index>(enc.feature_width()), 0);
      GateBatchResult gb = gate_batch(candidates, *gate, refs, stats, sa.action.tmpl);
      for (const auto& v : gb.verdicts) ++rec.reasons[to_string(v.reason)];
      for (std::size_t i : gb.admitted) admitted.push_back(candidates[i]);
    } else {
      stats.record(sa.action.tmpl, candidates.size(), candidates.size());
      rec.reasons["ok"] = candidates.size();
      admitted = candidates;
    }
    rec.admitted = admitted.size();

    Table batch_table = rows_to_table(schema, admitted, Provenance::synthetic);
    LabeledMatrix bm = LabeledMatrix::from_table(enc, batch_table);
    rec.utility = plugin.utility(bm);
    rec.feedback = make_feedback(rec.utility.value, tracker);

    if (config.learn && rec.feedback.label != Feedback::skip) {
      FeedbackEvent ev;
      ev.state = rec.state;
      ev.action = sa.action;
      ev.logp_policy = sa.logp;
      ev.logp_reference = rec.logp_reference;
      ev.advantage = rec.feedback.advantage;
      ev.kappa = rec.feedback.kappa;
      ev.label = rec.feedback.label;
      replay.push_back(std::move(ev));
      if (replay.size() > config.policy.replay_size) replay.pop_front();
      std::vector<FeedbackEvent> batch(replay.begin(), replay.end());
      rec.kto_loss = kto_update(policy, batch, config.policy.beta, optimizer);
      rec.updated = true;
    }

    pool.insert(pool.end(), admitted.begin(), admitted.end());
    append_columns(pool_features, bm.x);
    rec.batch = std::move(admitted);
    trace.steps.push_back(std::move(rec));

    bool boundary = t % K == 0 || t == T;
    bool budget = result.committed.size() + pool.size() >= config.n_syn;
    if (boundary || budget) check_pool(t, !boundary);
  }

  trace.committed = result.committed.size();
  trace.shortfall = config.n_syn - std::min(config.n_syn, trace.committed);
  trace.counters = plugin.counters();
  result.augmented = train;
  result.augmented.append_table(result.committed);
  result.policy = std::move(policy);
  return result;
}

AuditReport telescoping_audit(const RunTrace& trace, const Table& augmented, const Encoder& encoder,
                              const Table& real_train, const PluginConfig& config, std::uint64_t fold_seed,
                              double tolerance) {
  const std::size_t C = encoder.targets().task == TaskKind::classification ? encoder.num_conditions() : 0;
  LabeledMatrix real = LabeledMatrix::from_table(encoder, real_train);
  FoldPlan folds = make_folds(real.size(), config.folds, fold_seed);
  LabeledMatrix none = real.subset(std::vector<std::size_t>{});
  FocusedSets focus;
  auto l0 = fold_losses(real, none, folds, config, C, nullptr, &focus);

  std::vector<std::size_t> synthetic_rows;
  for (std::size_t i = 0; i < augmented.size(); ++i) {
    if (augmented.provenance(i) == Provenance::synthetic) synthetic_rows.push_back(i);
  }
  LabeledMatrix final_syn = LabeledMatrix::from_table(encoder, augmented.subset(synthetic_rows));
  auto lT = fold_losses(real, final_syn, folds, config, C, &focus);

  AuditReport report;
  report.lhs = mean_fold_loss(l0) - mean_fold_loss(lT);

  LabeledMatrix buffer = none;
  std::vector<double> before = l0;
  for (const auto& w : trace.windows) {
    if (!w.commit || w.pool.empty()) {
      report.window_utilities.push_back(0.0);
      continue;
    }
    Table pool_table = rows_to_table(real_train.schema_ptr(), w.pool, Provenance::synthetic);
    LabeledMatrix next = buffer.concat(LabeledMatrix::from_table(encoder, pool_table));
    auto after = fold_losses(real, next, folds, config, C, &focus);
    double u = mean_fold_loss(before) - mean_fold_loss(after);
    report.window_utilities.push_back(u);
    report.rhs += u;
    buffer = std::move(next);
    before = std::move(after);
  }
  report.residual = std::abs(report.lhs - report.rhs);
  report.passed = report.residual < tolerance;
  return report;
}

}  // namespace tap

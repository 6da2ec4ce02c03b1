#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tap/diffusion.hpp"
#include "tap/evaluator.hpp"
#include "tap/gates.hpp"
#include "tap/policy.hpp"
#include "tap/table.hpp"

namespace tap {

struct RunConfig {
  std::size_t horizon = 0;  // 0 derives T from the budget
  std::size_t window = 20;
  double tau = 0.0;
  std::size_t n_syn = 500;
  std::size_t candidates = 16;
  double alpha_level = 0.05;
  std::vector<double> desired_mixture;  // empty means uniform
  PluginConfig plugin;
  GateConfig gate;
  PolicyConfig policy;
  std::size_t gate_window = 200;
  std::size_t feedback_window = 200;
  double feedback_quantile = 0.6;
  std::size_t feedback_min_events = 10;
  double baseline_decay = 0.9;
  // Ablations.
  bool use_gate = true;
  bool windowed_commit = true;
  bool learn = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t effective_horizon() const;
};

/// ceil(n_syn / (n * 0.5)) rounded up to a multiple of K, capped at 200.
std::size_t default_horizon(std::size_t n_syn, std::size_t candidates, std::size_t window);

struct StepRecord {
  std::size_t step = 0;
  std::size_t buffer_size = 0;  // |B| when the step started
  StateSummary state;
  Action action;
  double logp = 0.0;
  double logp_reference = 0.0;
  std::size_t proposed = 0;
  std::size_t admitted = 0;
  std::map<std::string, std::size_t> reasons;
  std::vector<Record> batch;  // admitted rows S_t
  UtilityEstimate utility;
  FeedbackResult feedback;
  bool updated = false;
  double kto_loss = 0.0;
};

struct WindowRecord {
  std::size_t index = 0;
  std::size_t step = 0;
  std::size_t pool_size = 0;
  std::vector<Record> pool;  // rows evaluated at the check, after budget truncation
  UtilityEstimate estimate;
  bool commit = false;
  bool early = false;  // triggered by the budget rather than the window boundary
  std::size_t buffer_size = 0;  // after the decision
  double loss_after = 0.0;
};

struct CommitLog {
  std::vector<std::size_t> times;
  std::vector<std::size_t> sizes;
  std::vector<double> utilities;
  std::vector<double> epsilons;
  std::vector<bool> accepted;
};

struct RunTrace {
  std::uint64_t seed = 0;
  std::size_t horizon = 0;
  std::vector<StepRecord> steps;
  std::vector<WindowRecord> windows;
  CommitLog commits;
  std::vector<double> loss_trajectory;  // L(D_0) followed by L(D_t) after each check
  std::size_t committed = 0;
  std::size_t shortfall = 0;
  EvalCounters counters;

  /// One JSON object per line: header, steps, windows, summary.
  std::string to_jsonl() const;
  /// FNV-1a of the JSONL text.
  std::uint64_t hash() const;
};

struct TapInputs {
  const Encoder* encoder = nullptr;
  const Table* train = nullptr;  // D_0, real rows
  const Denoiser* denoiser = nullptr;
  const NoiseSchedule* schedule = nullptr;
  const DiffusionConfig* diffusion = nullptr;
  std::vector<std::size_t> important;
};

struct RunResult {
  Table augmented;  // D_0 followed by the committed rows
  Table committed;
  RunTrace trace;
  PolicyNet policy;
};

RunResult run_tap(const RunConfig& config, const TapInputs& inputs);

/// Strict commit rule: value > tau + epsilon.
bool commit_decision(const UtilityEstimate& estimate, double tau);

struct CommitCheck {
  bool commit = false;
  UtilityEstimate estimate;
};

/// Pooled utility of `pool` against the estimator's D_t; commits into the
/// estimator when accepted.
CommitCheck commit_check(PluginEstimator& estimator, const LabeledMatrix& pool, double tau);

struct AuditReport {
  double lhs = 0.0;  // L(D_0) - L(D_T)
  double rhs = 0.0;  // sum of committed window utilities
  std::vector<double> window_utilities;
  double residual = 0.0;
  bool passed = false;
};

/// Recomputes both sides of the telescoping identity with a frozen loss
/// functional: fixed folds and focused query sets taken from D_0.
AuditReport telescoping_audit(const RunTrace& trace, const Table& augmented, const Encoder& encoder,
                              const Table& real_train, const PluginConfig& config, std::uint64_t fold_seed,
                              double tolerance = 1e-9);

nlohmann::json record_to_json(const Record& r);
Record record_from_json(const nlohmann::json& j, const Schema& schema);

}  // namespace tap

#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tap/diffusion.hpp"
#include "tap/evaluator.hpp"
#include "tap/table.hpp"

namespace tap {

struct GateConfig {
  double p_min = 0.3;
  double margin = 0.1;
  /// When false only p_min applies to the candidate's label probability.
  bool use_margin = true;
  double residual_percentile = 95.0;
  double diversity_threshold = 0.1;
  /// Predicates such as "a <= b" or "age >= 0" over numeric columns.
  std::vector<std::string> logical_rules;

  void validate() const;
};

enum class GateReason { ok, type, range, plausibility, residual, diversity, logical };
std::string to_string(GateReason reason);

struct GateVerdict {
  bool pass = true;
  GateReason reason = GateReason::ok;
};

struct LogicalRule {
  std::size_t lhs = 0;
  std::string op;
  std::optional<std::size_t> rhs_column;
  double rhs_value = 0.0;
  std::string text;

  bool holds(const Record& record) const;
};

LogicalRule parse_rule(const std::string& text, const Schema& schema);

/// Sliding per-template record of proposed/passed outcomes.
class GateStats {
 public:
  explicit GateStats(std::size_t window = 200) : window_(window) {}

  void record(MaskTemplate tmpl, std::size_t proposed, std::size_t passed);
  /// Pass rate over the window; 0.5 before any proposal.
  double pass_rate(MaskTemplate tmpl) const;
  std::size_t proposed(MaskTemplate tmpl) const;
  std::size_t passed(MaskTemplate tmpl) const;
  std::size_t window() const { return window_; }

 private:
  std::size_t window_;
  std::deque<bool> outcomes_[2];
};

/// Gate state fixed within a window: the evaluator conditioned on D_t and the
/// regression residual threshold derived from the real training rows.
class GateContext {
 public:
  GateContext(const Encoder& encoder, const LabeledMatrix& data, std::span<const Provenance> provenance,
              const EvaluatorConfig& evaluator, GateConfig config);

  const Encoder& encoder() const { return *encoder_; }
  const GateConfig& config() const { return config_; }
  const Evaluator& evaluator() const { return evaluator_; }
  double residual_threshold() const { return residual_threshold_; }

  /// Checks in order type, range, plausibility/residual, diversity, logical.
  /// `references` holds encoded feature columns of the committed buffer and
  /// current pool.
  GateVerdict check(const Record& candidate, const Eigen::MatrixXd& references) const;

 private:
  const Encoder* encoder_;
  GateConfig config_;
  Evaluator evaluator_;
  double residual_threshold_ = 0.0;
  std::vector<LogicalRule> rules_;
};

struct GateBatchResult {
  std::vector<std::size_t> admitted;  // indices into the candidate list, in order
  std::vector<GateVerdict> verdicts;
};

/// Gates a batch in input order; admitted candidates join the diversity
/// references for later candidates in the same batch.
GateBatchResult gate_batch(std::span<const Record> candidates, const GateContext& ctx,
                           const Eigen::MatrixXd& references, GateStats& stats, MaskTemplate tmpl);

}  // namespace tap

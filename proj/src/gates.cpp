#include "tap/gates.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace tap {

void GateConfig::validate() const {
  if (!(p_min >= 0.0 && p_min <= 1.0)) throw Error("gate config: p_min must lie in [0, 1]");
  if (!(residual_percentile >= 0.0 && residual_percentile <= 100.0)) {
    throw Error("gate config: residual_percentile must lie in [0, 100]");
  }
  if (diversity_threshold < 0.0) throw Error("gate config: diversity_threshold must be >= 0");
}

std::string to_string(GateReason reason) {
  switch (reason) {
    case GateReason::ok: return "ok";
    case GateReason::type: return "type";
    case GateReason::range: return "range";
    case GateReason::plausibility: return "plausibility";
    case GateReason::residual: return "residual";
    case GateReason::diversity: return "diversity";
    case GateReason::logical: return "logical";
  }
  return "ok";
}

bool LogicalRule::holds(const Record& record) const {
  double a = as_number(record[lhs]);
  double b = rhs_column ? as_number(record[*rhs_column]) : rhs_value;
  if (op == "<=") return a <= b;
  if (op == "<") return a < b;
  if (op == ">=") return a >= b;
  if (op == ">") return a > b;
  if (op == "==") return a == b;
  if (op == "!=") return a != b;
  return false;
}

LogicalRule parse_rule(const std::string& text, const Schema& schema) {
  std::istringstream in(text);
  std::string lhs, op, rhs;
  if (!(in >> lhs >> op >> rhs)) throw Error("logical rule '" + text + "': expected '<column> <op> <column|number>'");
  static const char* ops[] = {"<=", "<", ">=", ">", "==", "!="};
  if (std::find(std::begin(ops), std::end(ops), op) == std::end(ops)) {
    throw Error("logical rule '" + text + "': unknown operator '" + op + "'");
  }
  LogicalRule rule;
  rule.text = text;
  rule.op = op;
  rule.lhs = schema.index_of(lhs);
  if (!schema.columns[rule.lhs].is_numeric()) throw Error("logical rule '" + text + "': column must be numeric");
  try {
    std::size_t pos = 0;
    rule.rhs_value = std::stod(rhs, &pos);
    if (pos != rhs.size()) throw std::invalid_argument(rhs);
  } catch (const std::exception&) {
    rule.rhs_column = schema.index_of(rhs);
    if (!schema.columns[*rule.rhs_column].is_numeric()) {
      throw Error("logical rule '" + text + "': column must be numeric");
    }
  }
  return rule;
}

void GateStats::record(MaskTemplate tmpl, std::size_t proposed, std::size_t passed) {
  auto& q = outcomes_[static_cast<int>(tmpl)];
  for (std::size_t i = 0; i < proposed; ++i) {
    q.push_back(i < passed);
    if (q.size() > window_) q.pop_front();
  }
}

std::size_t GateStats::proposed(MaskTemplate tmpl) const { return outcomes_[static_cast<int>(tmpl)].size(); }

std::size_t GateStats::passed(MaskTemplate tmpl) const {
  const auto& q = outcomes_[static_cast<int>(tmpl)];
  return static_cast<std::size_t>(std::count(q.begin(), q.end(), true));
}

double GateStats::pass_rate(MaskTemplate tmpl) const {
  std::size_t n = proposed(tmpl);
  if (n == 0) return 0.5;
  return static_cast<double>(passed(tmpl)) / static_cast<double>(n);
}

GateContext::GateContext(const Encoder& encoder, const LabeledMatrix& data, std::span<const Provenance> provenance,
                         const EvaluatorConfig& evaluator, GateConfig config)
    : encoder_(&encoder), config_(std::move(config)) {
  config_.validate();
  std::size_t classes = encoder.targets().task == TaskKind::classification ? encoder.num_conditions() : 0;
  evaluator_ = Evaluator::fit(evaluator, data, classes);
  if (data.task == TaskKind::regression) {
    std::vector<double> resid;
    auto preds = evaluator_.predict_all(data.x);
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (provenance[i] == Provenance::real) resid.push_back(std::abs(data.y[static_cast<Eigen::Index>(i)] - preds[i].mean));
    }
    residual_threshold_ = resid.empty() ? std::numeric_limits<double>::infinity()
                                        : lower_quantile(resid, config_.residual_percentile / 100.0);
  }
  for (const auto& r : config_.logical_rules) rules_.push_back(parse_rule(r, encoder.schema()));
}

GateVerdict GateContext::check(const Record& candidate, const Eigen::MatrixXd& references) const {
  const Schema& schema = encoder_->schema();
  auto fail = [](GateReason r) { return GateVerdict{false, r}; };

  if (candidate.size() != schema.columns.size()) return fail(GateReason::type);
  for (std::size_t c = 0; c < schema.columns.size(); ++c) {
    const auto& spec = schema.columns[c];
    if (spec.is_numeric()) {
      if (!std::holds_alternative<double>(candidate[c]) || !std::isfinite(as_number(candidate[c]))) {
        return fail(GateReason::type);
      }
    } else {
      if (!std::holds_alternative<std::string>(candidate[c])) return fail(GateReason::type);
      const auto& tok = as_token(candidate[c]);
      if (c == schema.label) {
        if (encoder_->targets().task == TaskKind::classification &&
            std::find(encoder_->targets().classes.begin(), encoder_->targets().classes.end(), tok) ==
                encoder_->targets().classes.end()) {
          return fail(GateReason::type);
        }
      } else if (!spec.token_index(tok)) {
        return fail(GateReason::type);
      }
    }
  }

  for (std::size_t c : schema.feature_indices()) {
    const auto& spec = schema.columns[c];
    if (!spec.is_numeric()) continue;
    double v = as_number(candidate[c]);
    if (v < spec.clip_lo || v > spec.clip_hi) return fail(GateReason::range);
  }

  Eigen::VectorXd x = encoder_->encode_features(candidate);
  Prediction p = evaluator_.predict(x);
  if (encoder_->targets().task == TaskKind::classification) {
    std::size_t y = encoder_->condition_of(candidate);
    double py = p.probs[static_cast<Eigen::Index>(y)];
    double other = 0.0;
    for (Eigen::Index k = 0; k < p.probs.size(); ++k) {
      if (static_cast<std::size_t>(k) != y) other = std::max(other, p.probs[k]);
    }
    if (py < config_.p_min) return fail(GateReason::plausibility);
    if (config_.use_margin && py - other < -config_.margin) return fail(GateReason::plausibility);
  } else {
    double y = encoder_->standardize_label(as_number(candidate[schema.label]));
    if (std::abs(y - p.mean) > residual_threshold_) return fail(GateReason::residual);
  }

  if (references.cols() > 0) {
    double best = (references.colwise() - x).colwise().squaredNorm().minCoeff();
    if (std::sqrt(best) < config_.diversity_threshold) return fail(GateReason::diversity);
  }

  for (const auto& rule : rules_) {
    if (!rule.holds(candidate)) return fail(GateReason::logical);
  }
  return {};
}

GateBatchResult gate_batch(std::span<const Record> candidates, const GateContext& ctx,
                           const Eigen::MatrixXd& references, GateStats& stats, MaskTemplate tmpl) {
  GateBatchResult result;
  Eigen::MatrixXd refs = references;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    GateVerdict v = ctx.check(candidates[i], refs);
    result.verdicts.push_back(v);
    if (!v.pass) continue;
    result.admitted.push_back(i);
    Eigen::VectorXd x = ctx.encoder().encode_features(candidates[i]);
    refs.conservativeResize(x.size(), refs.cols() + 1);
    refs.col(refs.cols() - 1) = x;
  }
  stats.record(tmpl, candidates.size(), result.admitted.size());
  return result;
}

}  // namespace tap

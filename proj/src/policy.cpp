#include "tap/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tap/table.hpp"

namespace tap {

namespace {

Eigen::VectorXd to_vector(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

double mean_gate_rate(const StateSummary& s) { return s.gate_rates.size() == 0 ? 0.5 : s.gate_rates.mean(); }

}  // namespace

Eigen::VectorXd StateSummary::flatten() const {
  Eigen::VectorXd out(deficit.size() + uncertainty.size() + gate_rates.size() + 1);
  out << deficit, uncertainty, gate_rates, diversity;
  return out;
}

nlohmann::json StateSummary::to_json() const {
  return {{"deficit", to_std(deficit)},
          {"uncertainty", to_std(uncertainty)},
          {"gate_rates", to_std(gate_rates)},
          {"diversity", diversity}};
}

StateSummary StateSummary::from_json(const nlohmann::json& j) {
  StateSummary s;
  s.deficit = to_vector(j.at("deficit"));
  s.uncertainty = to_vector(j.at("uncertainty"));
  s.gate_rates = to_vector(j.at("gate_rates"));
  s.diversity = j.at("diversity").get<double>();
  return s;
}

double pool_diversity(const Eigen::MatrixXd& pool, const Eigen::MatrixXd& reference) {
  if (pool.cols() == 0) return 1.0;
  if (reference.cols() == 0) return 1.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < pool.cols(); ++i) {
    total += std::sqrt((reference.colwise() - pool.col(i)).colwise().squaredNorm().minCoeff());
  }
  return total / static_cast<double>(pool.cols());
}

StateSummary compute_state(const StateInputs& in) {
  const std::size_t C = in.num_conditions;
  const auto n = static_cast<Eigen::Index>(C);
  StateSummary s;

  Eigen::VectorXd desired(n);
  if (in.desired.empty()) {
    desired.setConstant(C == 0 ? 0.0 : 1.0 / static_cast<double>(C));
  } else {
    if (in.desired.size() != C) throw Error("desired mixture has the wrong number of conditions");
    double total = 0.0;
    for (double v : in.desired) total += v;
    if (!(total > 0.0)) throw Error("desired mixture must have positive mass");
    for (std::size_t c = 0; c < C; ++c) desired[static_cast<Eigen::Index>(c)] = in.desired[c] / total;
  }
  Eigen::VectorXd realized = Eigen::VectorXd::Zero(n);
  for (std::size_t c : in.data_conditions) realized[static_cast<Eigen::Index>(c)] += 1.0;
  if (!in.data_conditions.empty()) realized /= static_cast<double>(in.data_conditions.size());
  s.deficit = (desired - realized).cwiseMax(0.0);

  s.uncertainty = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < in.focused_uncertainty.size(); ++i) {
    double u = in.focused_uncertainty[i];
    if (std::isnan(u)) continue;
    auto c = static_cast<Eigen::Index>(in.real_conditions[i]);
    s.uncertainty[c] += u;
    counts[c] += 1.0;
  }
  for (Eigen::Index c = 0; c < n; ++c) {
    if (counts[c] > 0) s.uncertainty[c] /= counts[c];
  }

  s.gate_rates.resize(2);
  GateStats fallback;
  const GateStats& stats = in.gate_stats ? *in.gate_stats : fallback;
  s.gate_rates << stats.pass_rate(MaskTemplate::explore), stats.pass_rate(MaskTemplate::conservative);

  s.diversity = (in.pool && in.reference) ? pool_diversity(*in.pool, *in.reference) : 1.0;
  return s;
}

double ActionDistribution::logp_rho(const Action& a) const { return gaussian_logpdf(a.rho_raw, rho_mean, rho_std); }

Action ActionDistribution::sample(Rng& rng) const {
  Action a;
  std::vector<double> pc(static_cast<std::size_t>(condition_logp.size()));
  for (std::size_t i = 0; i < pc.size(); ++i) pc[i] = std::exp(condition_logp[static_cast<Eigen::Index>(i)]);
  a.condition = rng.categorical(pc);
  std::vector<double> pt = {std::exp(template_logp[0]), std::exp(template_logp[1])};
  a.tmpl = rng.categorical(pt) == 0 ? MaskTemplate::explore : MaskTemplate::conservative;
  a.rho_raw = rng.normal(rho_mean, rho_std);
  a.rho = std::clamp(a.rho_raw, 0.0, 1.0);
  return a;
}

ActionDistribution reference_policy(const StateSummary& s, const ReferenceConfig& config) {
  ActionDistribution d;
  Eigen::VectorXd w = s.deficit.array() + config.deficit_floor;
  d.condition_logp = (w / w.sum()).array().log();
  double g = mean_gate_rate(s);
  double p_cons = std::clamp(1.0 - g, config.conservative_lo, config.conservative_hi);
  d.template_logp.resize(2);
  d.template_logp << std::log(1.0 - p_cons), std::log(p_cons);
  d.rho_mean = config.rho_slope * g + config.rho_offset;
  d.rho_std = config.rho_std;
  return d;
}

PolicyNet::PolicyNet(std::size_t num_conditions, const PolicyConfig& config, Rng& rng)
    : num_conditions_(num_conditions), config_(config) {
  if (num_conditions == 0) throw Error("policy needs at least one condition");
  std::vector<std::size_t> sizes{input_size()};
  for (std::size_t l = 0; l < config.hidden_layers; ++l) sizes.push_back(config.hidden_width);
  sizes.push_back(output_size());
  net_ = DenseNet(sizes, Activation::relu, rng);
  auto& last = net_.mutable_layers().back();
  last.weight.setZero();
  last.bias.setZero();
}

ActionDistribution PolicyNet::distribution(const StateSummary& s) const {
  return distribution(s, net_.forward(s.flatten()));
}

ActionDistribution PolicyNet::distribution(const StateSummary& s, const Eigen::VectorXd& out) const {
  const auto C = static_cast<Eigen::Index>(num_conditions_);
  ActionDistribution ref = reference_policy(s, config_.reference);
  ActionDistribution d;
  d.condition_logp = log_softmax(ref.condition_logp + out.head(C));
  d.template_logp = log_softmax(ref.template_logp + out.segment(C, 2));
  d.rho_mean = ref.rho_mean + out[C + 2];
  double log_std = std::clamp(std::log(ref.rho_std) + out[C + 3], config_.log_std_min, config_.log_std_max);
  d.rho_std = std::exp(log_std);
  return d;
}

nlohmann::json PolicyNet::to_json() const {
  return {{"format", "tap-policy"},
          {"version", 1},
          {"num_conditions", num_conditions_},
          {"beta", config_.beta},
          {"log_std_min", config_.log_std_min},
          {"log_std_max", config_.log_std_max},
          {"net", net_.to_json()}};
}

PolicyNet PolicyNet::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "tap-policy") throw Error("unsupported policy checkpoint");
  PolicyNet p;
  p.num_conditions_ = j.at("num_conditions").get<std::size_t>();
  p.config_.beta = j.at("beta").get<double>();
  p.config_.log_std_min = j.at("log_std_min").get<double>();
  p.config_.log_std_max = j.at("log_std_max").get<double>();
  p.net_ = DenseNet::from_json(j.at("net"));
  if (p.net_.input_size() != p.input_size() || p.net_.output_size() != p.output_size()) {
    throw Error("policy checkpoint shape mismatch");
  }
  return p;
}

SampledAction policy_sample(const PolicyNet& policy, const StateSummary& s, Rng& rng) {
  ActionDistribution d = policy.distribution(s);
  SampledAction out;
  out.action = d.sample(rng);
  out.logp_condition = d.logp_condition(out.action);
  out.logp_template = d.logp_template(out.action);
  out.logp_rho = d.logp_rho(out.action);
  out.logp = out.logp_condition + out.logp_template + out.logp_rho;
  return out;
}

double policy_logp(const PolicyNet& policy, const StateSummary& s, const Action& a) {
  return policy.distribution(s).logp(a);
}

double AdvantageTracker::kappa() const {
  if (events_ < min_events_ || magnitudes_.empty()) return 0.0;
  return lower_quantile({magnitudes_.begin(), magnitudes_.end()}, quantile_);
}

void AdvantageTracker::update(double utility, double advantage) {
  magnitudes_.push_back(std::abs(advantage));
  if (magnitudes_.size() > window_) magnitudes_.pop_front();
  ++events_;
  baseline_ = decay_ * baseline_ + (1.0 - decay_) * utility;
}

Feedback label_advantage(double advantage, double kappa) {
  if (advantage > kappa) return Feedback::desirable;
  if (advantage < -kappa) return Feedback::undesirable;
  return Feedback::skip;
}

FeedbackResult make_feedback(double utility, AdvantageTracker& tracker) {
  FeedbackResult r;
  r.advantage = utility - tracker.baseline();
  r.kappa = tracker.kappa();
  r.label = label_advantage(r.advantage, r.kappa);
  tracker.update(utility, r.advantage);
  return r;
}

namespace {

struct BatchCounts {
  double lambda_d = 1.0;
  double lambda_u = 1.0;
  std::size_t labeled = 0;
};

BatchCounts count_labels(std::span<const FeedbackEvent> batch) {
  std::size_t nd = 0, nu = 0;
  for (const auto& e : batch) {
    if (e.label == Feedback::desirable) ++nd;
    if (e.label == Feedback::undesirable) ++nu;
  }
  return {1.0 / static_cast<double>(std::max<std::size_t>(1, nd)),
          1.0 / static_cast<double>(std::max<std::size_t>(1, nu)), nd + nu};
}

}  // namespace

double kto_loss(const PolicyNet& policy, std::span<const FeedbackEvent> batch, double beta) {
  BatchCounts w = count_labels(batch);
  double loss = 0.0;
  for (const auto& e : batch) {
    if (e.label == Feedback::skip) continue;
    double r = policy_logp(policy, e.state, e.action) - reference_policy(e.state, policy.config().reference).logp(e.action);
    loss -= e.label == Feedback::desirable ? w.lambda_d * log_sigmoid(beta * r) : w.lambda_u * log_sigmoid(-beta * r);
  }
  return loss;
}

NetGrads kto_gradient(const PolicyNet& policy, std::span<const FeedbackEvent> batch, double beta, double* loss_out) {
  BatchCounts w = count_labels(batch);
  std::vector<const FeedbackEvent*> labeled;
  for (const auto& e : batch) {
    if (e.label != Feedback::skip) labeled.push_back(&e);
  }
  if (labeled.empty()) {
    if (loss_out) *loss_out = 0.0;
    return policy.net().zero_grads();
  }
  const auto C = static_cast<Eigen::Index>(policy.num_conditions());
  Eigen::MatrixXd inputs(static_cast<Eigen::Index>(policy.input_size()), static_cast<Eigen::Index>(labeled.size()));
  for (std::size_t i = 0; i < labeled.size(); ++i) inputs.col(static_cast<Eigen::Index>(i)) = labeled[i]->state.flatten();
  ForwardCache cache;
  Eigen::MatrixXd outputs = policy.net().forward(inputs, &cache);
  Eigen::MatrixXd grad_out = Eigen::MatrixXd::Zero(outputs.rows(), outputs.cols());
  double loss = 0.0;
  const auto& cfg = policy.config();
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const FeedbackEvent& e = *labeled[i];
    auto col = static_cast<Eigen::Index>(i);
    Eigen::VectorXd out = outputs.col(col);
    ActionDistribution d = policy.distribution(e.state, out);
    ActionDistribution ref = reference_policy(e.state, cfg.reference);
    double r = d.logp(e.action) - ref.logp(e.action);

    double dr;
    if (e.label == Feedback::desirable) {
      loss -= w.lambda_d * log_sigmoid(beta * r);
      dr = -w.lambda_d * beta * (1.0 - sigmoid(beta * r));
    } else {
      loss -= w.lambda_u * log_sigmoid(-beta * r);
      dr = w.lambda_u * beta * sigmoid(beta * r);
    }

    // d logp / d outputs for each factor.
    Eigen::VectorXd g = Eigen::VectorXd::Zero(out.size());
    g.head(C) = -d.condition_logp.array().exp();
    g[static_cast<Eigen::Index>(e.action.condition)] += 1.0;
    g.segment(C, 2) = -d.template_logp.array().exp();
    g[C + static_cast<Eigen::Index>(e.action.tmpl)] += 1.0;
    double zscore = (e.action.rho_raw - d.rho_mean) / d.rho_std;
    g[C + 2] = zscore / d.rho_std;
    double raw_log_std = std::log(ref.rho_std) + out[C + 3];
    bool inside = raw_log_std > cfg.log_std_min && raw_log_std < cfg.log_std_max;
    g[C + 3] = inside ? zscore * zscore - 1.0 : 0.0;
    grad_out.col(col) = dr * g;
  }
  if (loss_out) *loss_out = loss;
  return policy.net().backward(cache, grad_out);
}

double kto_update(PolicyNet& policy, std::span<const FeedbackEvent> batch, double beta, AdamW& optimizer) {
  if (count_labels(batch).labeled == 0) return 0.0;
  double loss = 0.0;
  NetGrads grads = kto_gradient(policy, batch, beta, &loss);
  clip_global_norm(grads, policy.config().max_grad_norm);
  optimizer.step(policy.net(), grads);
  return loss;
}

}  // namespace tap

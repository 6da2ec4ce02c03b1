#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "tap/diffusion.hpp"
#include "tap/gates.hpp"
#include "tap/numerics.hpp"
#include "tap/rng.hpp"

namespace tap {

/// Learner state s = (deficit, uncertainty, gate rates, diversity).
struct StateSummary {
  Eigen::VectorXd deficit;      // per condition, >= 0
  Eigen::VectorXd uncertainty;  // per condition
  Eigen::VectorXd gate_rates;   // per template: explore, conservative
  double diversity = 1.0;

  std::size_t num_conditions() const { return static_cast<std::size_t>(deficit.size()); }
  /// deficit, uncertainty, gate rates, diversity.
  Eigen::VectorXd flatten() const;
  nlohmann::json to_json() const;
  static StateSummary from_json(const nlohmann::json& j);
};

struct StateInputs {
  std::size_t num_conditions = 0;
  /// Condition of every row of D_t (real plus committed synthetic).
  std::span<const std::size_t> data_conditions;
  /// Desired target mixture; empty means uniform.
  std::span<const double> desired;
  /// Condition and focused uncertainty (NaN when not focused) per real row.
  std::span<const std::size_t> real_conditions;
  std::span<const double> focused_uncertainty;
  const GateStats* gate_stats = nullptr;
  /// Encoded features of the current pool and of the reference set used for
  /// nearest-neighbour distances (committed buffer, or D_0 while it is empty).
  const Eigen::MatrixXd* pool = nullptr;
  const Eigen::MatrixXd* reference = nullptr;
};

StateSummary compute_state(const StateInputs& in);

/// Mean distance from each pool column to its nearest reference column;
/// 1.0 when the pool is empty.
double pool_diversity(const Eigen::MatrixXd& pool, const Eigen::MatrixXd& reference);

/// Factorized action distribution pi(c) pi(eta) pi(rho).
struct ActionDistribution {
  Eigen::VectorXd condition_logp;
  Eigen::VectorXd template_logp;  // index 0 explore, 1 conservative
  double rho_mean = 0.0;
  double rho_std = 1.0;

  double logp_condition(const Action& a) const { return condition_logp[static_cast<Eigen::Index>(a.condition)]; }
  double logp_template(const Action& a) const { return template_logp[static_cast<Eigen::Index>(a.tmpl)]; }
  /// Pre-clamp Gaussian density of the raw draw.
  double logp_rho(const Action& a) const;
  double logp(const Action& a) const { return logp_condition(a) + logp_template(a) + logp_rho(a); }

  Action sample(Rng& rng) const;
};

struct ReferenceConfig {
  double deficit_floor = 0.1;
  double conservative_lo = 0.2;
  double conservative_hi = 0.8;
  double rho_slope = 0.3;
  double rho_offset = 0.2;
  double rho_std = 0.15;
};

ActionDistribution reference_policy(const StateSummary& s, const ReferenceConfig& config = {});

struct PolicyConfig {
  std::size_t hidden_width = 128;
  std::size_t hidden_layers = 2;
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  double max_grad_norm = 0.5;
  double beta = 3.0;
  double log_std_min = -3.0;
  double log_std_max = 0.0;
  std::size_t replay_size = 64;
  ReferenceConfig reference;
};

/// MLP on the flattened state whose outputs shift the reference policy:
/// condition logits, template logits, rho mean and rho log-std offsets. The
/// output layer starts at zero, so the initial policy equals the reference.
class PolicyNet {
 public:
  PolicyNet() = default;
  PolicyNet(std::size_t num_conditions, const PolicyConfig& config, Rng& rng);

  std::size_t num_conditions() const { return num_conditions_; }
  std::size_t input_size() const { return 2 * num_conditions_ + 3; }
  std::size_t output_size() const { return num_conditions_ + 4; }
  const PolicyConfig& config() const { return config_; }
  DenseNet& net() { return net_; }
  const DenseNet& net() const { return net_; }

  ActionDistribution distribution(const StateSummary& s) const;
  /// Distribution from precomputed network outputs.
  ActionDistribution distribution(const StateSummary& s, const Eigen::VectorXd& outputs) const;

  nlohmann::json to_json() const;
  static PolicyNet from_json(const nlohmann::json& j);

 private:
  std::size_t num_conditions_ = 0;
  PolicyConfig config_;
  DenseNet net_;
};

struct SampledAction {
  Action action;
  double logp_condition = 0.0;
  double logp_template = 0.0;
  double logp_rho = 0.0;
  double logp = 0.0;
};

SampledAction policy_sample(const PolicyNet& policy, const StateSummary& s, Rng& rng);
double policy_logp(const PolicyNet& policy, const StateSummary& s, const Action& a);

enum class Feedback { undesirable = -1, skip = 0, desirable = 1 };

struct FeedbackEvent {
  StateSummary state;
  Action action;
  double logp_policy = 0.0;
  double logp_reference = 0.0;
  double advantage = 0.0;
  double kappa = 0.0;
  Feedback label = Feedback::skip;
};

/// EMA baseline of the utility signal plus a window of recent |advantage|.
class AdvantageTracker {
 public:
  explicit AdvantageTracker(std::size_t window = 200, double quantile = 0.6, std::size_t min_events = 10,
                            double decay = 0.9)
      : window_(window), quantile_(quantile), min_events_(min_events), decay_(decay) {}

  double baseline() const { return baseline_; }
  /// Current threshold: 0 until min_events magnitudes were seen.
  double kappa() const;
  std::size_t events() const { return events_; }
  /// Records one advantage and the utility that produced it.
  void update(double utility, double advantage);

 private:
  std::size_t window_;
  double quantile_;
  std::size_t min_events_;
  double decay_;
  double baseline_ = 0.0;
  std::size_t events_ = 0;
  std::deque<double> magnitudes_;
};

/// Strict three-way rule on the advantage against kappa.
Feedback label_advantage(double advantage, double kappa);

struct FeedbackResult {
  double advantage = 0.0;
  double kappa = 0.0;
  Feedback label = Feedback::skip;
};

/// Labels the utility against the tracker's baseline and threshold, then
/// updates the tracker.
FeedbackResult make_feedback(double utility, AdvantageTracker& tracker);

/// KTO loss value on a batch; r = logp_policy - logp_reference with both
/// evaluated at the current parameters.
double kto_loss(const PolicyNet& policy, std::span<const FeedbackEvent> batch, double beta);

/// One clipped AdamW step on the KTO loss; returns the pre-update loss.
/// Batches without labeled events leave the parameters untouched.
double kto_update(PolicyNet& policy, std::span<const FeedbackEvent> batch, double beta, AdamW& optimizer);

/// Gradient of the KTO loss with respect to all network parameters.
NetGrads kto_gradient(const PolicyNet& policy, std::span<const FeedbackEvent> batch, double beta,
                      double* loss_out = nullptr);

}  // namespace tap

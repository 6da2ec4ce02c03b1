#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tap/controller.hpp"
#include "tap/diffusion.hpp"
#include "tap/evaluator.hpp"
#include "tap/gates.hpp"
#include "tap/table.hpp"

namespace tap {

enum class Mechanism { none, global, random_inpaint, hard_inpaint, tap, smote };
std::string to_string(Mechanism m);
Mechanism mechanism_from_string(const std::string& name);

/// Shared backbone and data for every injection mechanism of one seed.
struct MechanismContext {
  const Encoder* encoder = nullptr;
  const Table* train = nullptr;
  const Denoiser* denoiser = nullptr;
  const NoiseSchedule* schedule = nullptr;
  const DiffusionConfig* diffusion = nullptr;
  std::vector<std::size_t> important;
  RunConfig tap;              // also supplies gate and evaluator settings
  double hard_rho = 0.3;
  double hard_fraction = 0.2;  // share of D ranked hardest that serves as anchors
  std::size_t smote_k = 5;
  std::size_t max_attempts_factor = 20;  // candidate cap per requested row for gated mechanisms
};

struct MechanismOutput {
  Table synthetic;
  std::vector<std::size_t> anchors;  // anchor row per synthetic row, when anchored
  std::optional<RunTrace> trace;
};

/// Condition drawn from the real target mixture, full reverse chain from
/// noise, decode.
Table global_sample(std::size_t n, const MechanismContext& ctx, Rng& rng);
/// Uniform anchor; each feature regenerated with probability 0.5; no gate.
MechanismOutput random_inpaint(std::size_t n, const MechanismContext& ctx, Rng& rng);
/// Hardest anchors under the plug-in evaluator, conservative template with
/// fixed rho, gates applied, one shot until n rows pass or the attempt cap.
MechanismOutput hard_inpaint(std::size_t n, const MechanismContext& ctx, Rng& rng);
/// Row indices of `data` ordered by decreasing uncertainty, ties by index.
std::vector<std::size_t> hardness_order(const Evaluator& evaluator, const LabeledMatrix& data);

/// Neighbour count after clamping: min(k_requested, n_min - 1); 0 means
/// bootstrap.
std::size_t smote_k(std::size_t n_min, std::size_t k_requested = 5);
/// Classification: per-class interpolation toward one of the k nearest
/// same-class neighbours, numerics only. Regression: interpolation in the
/// joint (X, y) space filtered by a real-vs-noise 1-NN discriminator.
Table smote(const Table& train, const Encoder& encoder, std::size_t n, std::size_t k_requested, Rng& rng);
/// Joint standardized (features, label) point for regression SMOTE.
Eigen::VectorXd joint_point(const Encoder& encoder, const Record& r);
/// True when the nearest of real and noise points is a real one.
bool discriminator_accepts(const Eigen::VectorXd& point, const Eigen::MatrixXd& real,
                           const Eigen::MatrixXd& noise);

MechanismOutput run_mechanism(Mechanism m, std::size_t n, const MechanismContext& ctx, std::uint64_t seed);

struct DiagnosticScores {
  std::vector<double> s_bnd;
  std::vector<double> s_con;
};

/// Entropy, or the variance of predictions at the k nearest real rows.
double s_bnd(const Evaluator& evaluator, const Eigen::VectorXd& x, const LabeledMatrix& real, std::size_t k = 5);
/// Floored NLL of the label, or squared standardized residual.
double s_con(const Evaluator& evaluator, const Eigen::VectorXd& x, std::size_t cls, double y);
DiagnosticScores score_rows(const Evaluator& evaluator, const LabeledMatrix& rows, const LabeledMatrix& real,
                            std::size_t k = 5);

/// 100 * share of reference values strictly below `value`.
double percentile_rank(double value, std::span<const double> reference);
/// Mean of the largest ceil(q * n) values.
double tail_mean(std::vector<double> values, double q = 0.2);
/// Tail risk of injected s_con against the real training s_con distribution.
double tail_risk(std::span<const double> injected_scon, std::span<const double> real_scon, double q = 0.2);

struct BucketReport {
  std::vector<std::vector<std::size_t>> bins;  // candidate indices, most learnable first
  std::vector<double> gains;
};

/// Equal-count bins by ascending s_con (ties by index); sizes differ by at
/// most one with larger bins first.
std::vector<std::vector<std::size_t>> learnability_bins(std::span<const double> s_con, std::size_t bins);
/// Injects each bin alone; `gain` maps a bin's rows to a utility gain.
BucketReport bucketed_injection(std::span<const double> s_con, std::size_t bins,
                                const std::function<double(std::span<const std::size_t>)>& gain);

struct ParetoBucket {
  double lo = 0.0;
  double hi = 0.0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::size_t count_a = 0;
  std::size_t count_b = 0;
};

/// Buckets both samples by s_bnd quantiles of their union and compares mean
/// s_con percentiles within each bucket.
std::vector<ParetoBucket> pareto_buckets(std::span<const double> bnd_a, std::span<const double> pct_a,
                                         std::span<const double> bnd_b, std::span<const double> pct_b,
                                         std::size_t buckets = 5);

enum class Surrogate { ridge, logistic };

/// Fits the regularized surrogate on `data` (intercept included and
/// penalized) and returns (1/n) grad L_Q^T H^-1 grad l(z). Logistic is binary.
double influence_diagnostic(const LabeledMatrix& data, const Eigen::VectorXd& zx, double zy, Surrogate surrogate,
                            double lambda, const LabeledMatrix& queries);
/// Loss reduction on the queries from refitting with z added.
double retrain_utility(const LabeledMatrix& data, const Eigen::VectorXd& zx, double zy, Surrogate surrogate,
                       double lambda, const LabeledMatrix& queries);
/// Regularized surrogate parameters (last entry is the intercept).
Eigen::VectorXd fit_surrogate(const LabeledMatrix& data, Surrogate surrogate, double lambda);
double surrogate_loss(const Eigen::VectorXd& theta, const LabeledMatrix& data, Surrogate surrogate);

/// Retraining proxy suite used for calibration and downstream comparisons.
std::vector<EvaluatorConfig> proxy_suite(TaskKind task, std::uint64_t seed);
/// Mean validation loss over the suite fitted on `train` (val drives
/// early stopping of the MLP).
double suite_loss(const LabeledMatrix& train, const LabeledMatrix& val, std::size_t num_classes,
                  std::span<const EvaluatorConfig> suite);

struct CalibrationCheck {
  std::uint64_t seed = 0;
  std::size_t window = 0;
  double estimate = 0.0;
  double epsilon = 0.0;
  double proxy = 0.0;
  bool covered = false;
};

struct CalibrationReport {
  std::vector<CalibrationCheck> checks;
  double coverage = 0.0;
  double mae = 0.0;
  double mean_epsilon = 0.0;
};

/// Compares every non-empty commit check of the trace to the retraining
/// proxy on the validation rows.
std::vector<CalibrationCheck> calibration_checks(const RunTrace& trace, const Encoder& encoder, const Table& train,
                                                 const Table& val, std::span<const EvaluatorConfig> suite);
CalibrationReport summarize_calibration(std::vector<CalibrationCheck> checks);

/// max over the grid of acc(default) - acc(h).
double worst_drop(const std::map<std::string, double>& results, const std::string& default_key);

struct DesirableRates {
  std::vector<double> rates;            // per commitment window
  std::vector<std::size_t> steps;       // steps per window
  std::vector<std::size_t> empty_steps;  // steps with an empty batch (never desirable)
  std::vector<double> rewards;          // per step; NaN for empty batches
};

/// Proxy reward per step: L(theta(D_t), Q) - L(theta(D_t + S_t), Q) with a
/// light model; steps grouped into windows of `window` steps.
DesirableRates desirable_rate(const RunTrace& trace, const Encoder& encoder, const Table& train,
                              const LabeledMatrix& proxy_queries, const EvaluatorConfig& model, std::size_t window);

/// Committed synthetic rows in order, rebuilt from the trace windows.
std::vector<Record> committed_rows(const RunTrace& trace);

}  // namespace tap

#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tap/numerics.hpp"
#include "tap/table.hpp"

namespace tap {

/// Encoded rows with their targets: class indices for classification,
/// standardized labels for regression.
struct LabeledMatrix {
  Eigen::MatrixXd x;  // feature_width x n
  std::vector<std::size_t> cls;
  Eigen::VectorXd y;
  TaskKind task = TaskKind::classification;

  std::size_t size() const { return static_cast<std::size_t>(x.cols()); }
  bool empty() const { return x.cols() == 0; }

  static LabeledMatrix from_table(const Encoder& encoder, const Table& table);
  LabeledMatrix subset(std::span<const std::size_t> indices) const;
  /// this followed by other.
  LabeledMatrix concat(const LabeledMatrix& other) const;
};

enum class EvaluatorKind { knn, logistic, ridge, tiny_mlp };

std::string to_string(EvaluatorKind kind);
EvaluatorKind evaluator_kind_from_string(const std::string& name);

struct EvaluatorConfig {
  EvaluatorKind kind = EvaluatorKind::knn;
  std::size_t k = 5;
  double ridge_lambda = 1.0;
  double logistic_lambda = 1e-2;
  std::size_t logistic_iters = 500;
  double logistic_lr = 0.5;
  std::size_t mlp_hidden = 32;
  std::size_t mlp_epochs = 200;
  double mlp_lr = 1e-2;
  std::size_t mlp_patience = 20;
  double prob_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct Prediction {
  Eigen::VectorXd probs;  // classification
  double mean = 0.0;      // regression (standardized units)
};

/// Forward-pass bookkeeping for cost accounting.
struct EvalCounters {
  std::uint64_t fits = 0;
  std::uint64_t predictions = 0;
};

class Evaluator {
 public:
  /// Conditions the evaluator on `context`. For tiny-mlp, `validation`
  /// enables early stopping.
  static Evaluator fit(const EvaluatorConfig& config, const LabeledMatrix& context, std::size_t num_classes,
                       const LabeledMatrix* validation = nullptr, EvalCounters* counters = nullptr);

  Prediction predict(const Eigen::VectorXd& x) const;
  std::vector<Prediction> predict_all(const Eigen::MatrixXd& xs, EvalCounters* counters = nullptr) const;

  /// Negative log-likelihood (floored) or squared error.
  double loss(const Prediction& p, const LabeledMatrix& data, std::size_t i) const;
  /// Predictive entropy (classification) or absolute residual (regression).
  double uncertainty(const Prediction& p, const LabeledMatrix& data, std::size_t i) const;

  TaskKind task() const { return task_; }
  std::size_t num_classes() const { return num_classes_; }
  const EvaluatorConfig& config() const { return config_; }
  /// True when a logistic fit saw a single class and fell back to a constant.
  bool degenerate() const { return degenerate_; }

 private:
  EvaluatorConfig config_;
  TaskKind task_ = TaskKind::classification;
  std::size_t num_classes_ = 0;
  bool degenerate_ = false;
  LabeledMatrix context_;          // knn
  Eigen::MatrixXd linear_;         // logistic: C x (d+1); ridge: 1 x (d+1)
  Eigen::VectorXd constant_probs_;  // degenerate logistic
  DenseNet mlp_;
};

double entropy(const Eigen::VectorXd& probs);

/// Top ceil(alpha * n) query indices by uncertainty, ties by index.
std::vector<std::size_t> focused_queries(const Evaluator& evaluator, const LabeledMatrix& queries, double alpha,
                                         EvalCounters* counters = nullptr);

/// Fold assignment over the real training rows.
struct FoldPlan {
  std::size_t num_folds = 5;
  std::vector<std::size_t> fold_of;  // per real row
  std::uint64_t seed = 0;

  std::vector<std::size_t> members(std::size_t fold) const;
  std::vector<std::size_t> complement(std::size_t fold) const;
};

FoldPlan make_folds(std::size_t num_rows, std::size_t num_folds, std::uint64_t seed);

struct UtilityEstimate {
  double value = 0.0;
  std::vector<double> per_fold;
  double epsilon = 0.0;
  double alpha_level = 0.05;
};

/// t_{1 - alpha/2, M-1} * sample_std(per_fold) / sqrt(M); +inf when M < 2.
double error_bar(std::span<const double> per_fold, double alpha_level = 0.05);
double student_t_quantile(double p, double dof);

UtilityEstimate make_estimate(std::vector<double> per_fold, double alpha_level);

struct PluginConfig {
  EvaluatorConfig evaluator;
  std::size_t folds = 5;
  double alpha = 0.2;
  double alpha_level = 0.05;
};

/// Per-fold focused query sets, fixed from the current D_t's evaluators.
struct FocusedSets {
  std::vector<std::vector<std::size_t>> per_fold;  // indices into the real rows
  std::vector<double> uncertainty;                  // per real row, NaN when not focused
};

/// Per-fold plug-in losses L(D) where D = real rows + `synthetic`. Each fold's
/// context is the other folds' real rows plus every synthetic row; the loss
/// is the mean over that fold's focused queries. Folds with no members yield
/// NaN. When `fixed` is given its query sets are used instead of being
/// recomputed.
std::vector<double> fold_losses(const LabeledMatrix& real, const LabeledMatrix& synthetic, const FoldPlan& folds,
                                 const PluginConfig& config, std::size_t num_classes,
                                 const FocusedSets* fixed = nullptr, FocusedSets* computed = nullptr,
                                 EvalCounters* counters = nullptr);

/// Mean over non-empty folds. Throws when every fold is empty.
double mean_fold_loss(std::span<const double> per_fold);

/// Per-fold utilities before - after over folds present in both.
UtilityEstimate utility_from_losses(std::span<const double> before, std::span<const double> after,
                                    double alpha_level);

/// Within-window cache of L(D_t) and its focused query sets.
struct LossCache {
  std::uint64_t window = 0;
  std::vector<double> per_fold;
  FocusedSets focused;
  bool dirty = true;
  std::uint64_t recomputations = 0;

  void invalidate() {
    dirty = true;
    ++window;
  }
};

/// Plug-in utility machinery bound to one run: real training rows, a fixed
/// fold plan, the committed synthetic buffer, and the loss cache.
class PluginEstimator {
 public:
  PluginEstimator(const Encoder& encoder, const Table& real_train, PluginConfig config, std::uint64_t seed);

  const PluginConfig& config() const { return config_; }
  const FoldPlan& folds() const { return folds_; }
  const LabeledMatrix& real() const { return real_; }
  const LabeledMatrix& committed() const { return committed_; }
  std::size_t num_classes() const { return num_classes_; }

  /// Appends rows to the committed buffer and invalidates the cache.
  void commit(const LabeledMatrix& rows);

  /// Focused plug-in loss of D_t, served from the cache.
  double loss();
  const std::vector<double>& fold_loss_values();
  const FocusedSets& focused();

  /// Plug-in utility of adding `extra` to D_t, scored on D_t's focused sets.
  UtilityEstimate utility(const LabeledMatrix& extra);

  LossCache& cache() { return cache_; }
  const EvalCounters& counters() const { return counters_; }
  EvalCounters& counters() { return counters_; }

 private:
  void refresh();

  const Encoder* encoder_;
  PluginConfig config_;
  std::size_t num_classes_ = 0;
  LabeledMatrix real_;
  LabeledMatrix committed_;
  FoldPlan folds_;
  LossCache cache_;
  EvalCounters counters_;
};

}  // namespace tap

#include "tap/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

namespace tap {

LabeledMatrix LabeledMatrix::from_table(const Encoder& encoder, const Table& table) {
  LabeledMatrix m;
  m.task = encoder.targets().task;
  m.x = encoder.feature_matrix(table);
  if (m.task == TaskKind::classification) {
    m.cls = encoder.conditions(table);
    m.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(table.size()));
  } else {
    m.y.resize(static_cast<Eigen::Index>(table.size()));
    for (std::size_t i = 0; i < table.size(); ++i) {
      m.y[static_cast<Eigen::Index>(i)] = encoder.standardize_label(as_number(table.label(i)));
    }
    m.cls.assign(table.size(), 0);
  }
  return m;
}

LabeledMatrix LabeledMatrix::subset(std::span<const std::size_t> indices) const {
  LabeledMatrix out;
  out.task = task;
  out.x.resize(x.rows(), static_cast<Eigen::Index>(indices.size()));
  out.y.resize(static_cast<Eigen::Index>(indices.size()));
  out.cls.resize(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    auto src = static_cast<Eigen::Index>(indices[j]);
    out.x.col(static_cast<Eigen::Index>(j)) = x.col(src);
    out.y[static_cast<Eigen::Index>(j)] = y[src];
    out.cls[j] = cls[indices[j]];
  }
  return out;
}

LabeledMatrix LabeledMatrix::concat(const LabeledMatrix& other) const {
  if (other.empty()) return *this;
  if (empty()) return other;
  LabeledMatrix out;
  out.task = task;
  out.x.resize(x.rows(), x.cols() + other.x.cols());
  out.x << x, other.x;
  out.y.resize(y.size() + other.y.size());
  out.y << y, other.y;
  out.cls = cls;
  out.cls.insert(out.cls.end(), other.cls.begin(), other.cls.end());
  return out;
}

std::string to_string(EvaluatorKind kind) {
  switch (kind) {
    case EvaluatorKind::knn: return "knn";
    case EvaluatorKind::logistic: return "logistic";
    case EvaluatorKind::ridge: return "ridge";
    case EvaluatorKind::tiny_mlp: return "tiny-mlp";
  }
  return "knn";
}

EvaluatorKind evaluator_kind_from_string(const std::string& name) {
  if (name == "knn") return EvaluatorKind::knn;
  if (name == "logistic") return EvaluatorKind::logistic;
  if (name == "ridge") return EvaluatorKind::ridge;
  if (name == "tiny-mlp") return EvaluatorKind::tiny_mlp;
  throw Error("unknown evaluator kind '" + name + "'");
}

double entropy(const Eigen::VectorXd& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) h -= probs[i] * std::log(probs[i]);
  }
  return h;
}

namespace {

Eigen::MatrixXd with_bias_row(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows() + 1, x.cols());
  out.topRows(x.rows()) = x;
  out.row(x.rows()).setOnes();
  return out;
}

double mlp_loss(const DenseNet& net, const LabeledMatrix& data, TaskKind task) {
  if (data.empty()) return 0.0;
  Eigen::MatrixXd out = net.forward(data.x);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto col = static_cast<Eigen::Index>(i);
    if (task == TaskKind::classification) {
      total -= log_softmax(out.col(col))[static_cast<Eigen::Index>(data.cls[i])];
    } else {
      double r = out(0, col) - data.y[col];
      total += r * r;
    }
  }
  return total / static_cast<double>(data.size());
}

}  // namespace

Evaluator Evaluator::fit(const EvaluatorConfig& config, const LabeledMatrix& context, std::size_t num_classes,
                         const LabeledMatrix* validation, EvalCounters* counters) {
  if (context.empty()) throw Error("Evaluator::fit: empty context");
  if (counters) ++counters->fits;
  Evaluator ev;
  ev.config_ = config;
  ev.task_ = context.task;
  ev.num_classes_ = num_classes;
  const bool cls = ev.task_ == TaskKind::classification;
  const auto n = static_cast<Eigen::Index>(context.size());
  const auto d = context.x.rows();

  switch (config.kind) {
    case EvaluatorKind::knn:
      ev.context_ = context;
      break;

    case EvaluatorKind::logistic: {
      if (!cls) throw Error("logistic evaluator requires a classification task");
      std::vector<double> freq(num_classes, 0.0);
      for (auto c : context.cls) freq[c] += 1.0;
      std::size_t present = static_cast<std::size_t>(std::count_if(freq.begin(), freq.end(), [](double f) { return f > 0; }));
      if (present < 2) {
        ev.degenerate_ = true;
        ev.constant_probs_ = Eigen::Map<Eigen::VectorXd>(freq.data(), static_cast<Eigen::Index>(freq.size())) /
                             static_cast<double>(context.size());
        break;
      }
      Eigen::MatrixXd xb = with_bias_row(context.x);
      const auto c = static_cast<Eigen::Index>(num_classes);
      Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(c, n);
      for (Eigen::Index i = 0; i < n; ++i) onehot(static_cast<Eigen::Index>(context.cls[static_cast<std::size_t>(i)]), i) = 1.0;
      Eigen::MatrixXd w = Eigen::MatrixXd::Zero(c, d + 1);
      for (std::size_t it = 0; it < config.logistic_iters; ++it) {
        Eigen::MatrixXd logits = w * xb;
        for (Eigen::Index i = 0; i < n; ++i) logits.col(i) = softmax(logits.col(i));
        Eigen::MatrixXd grad = (logits - onehot) * xb.transpose() / static_cast<double>(n);
        grad.leftCols(d) += config.logistic_lambda * w.leftCols(d);
        w -= config.logistic_lr * grad;
      }
      ev.linear_ = std::move(w);
      break;
    }

    case EvaluatorKind::ridge: {
      if (cls) throw Error("ridge evaluator requires a regression task");
      Eigen::MatrixXd xb = with_bias_row(context.x);
      Eigen::MatrixXd gram = xb * xb.transpose();
      for (Eigen::Index j = 0; j < d; ++j) gram(j, j) += config.ridge_lambda;
      // Intercept unpenalized; a tiny jitter keeps the system solvable when
      // the context has a single row.
      gram(d, d) += 1e-12;
      Eigen::VectorXd rhs = xb * context.y;
      Eigen::VectorXd w = gram.ldlt().solve(rhs);
      ev.linear_ = w.transpose();
      break;
    }

    case EvaluatorKind::tiny_mlp: {
      Rng rng(config.seed ^ 0x5EEDu);
      std::size_t out = cls ? num_classes : 1;
      DenseNet net({static_cast<std::size_t>(d), config.mlp_hidden, out}, Activation::relu, rng);
      AdamW opt(net, AdamConfig{config.mlp_lr, 0.9, 0.999, 1e-8, 1e-4});
      DenseNet best = net;
      double best_val = std::numeric_limits<double>::infinity();
      std::size_t since_best = 0;
      for (std::size_t epoch = 0; epoch < config.mlp_epochs; ++epoch) {
        ForwardCache cache;
        Eigen::MatrixXd pred = net.forward(context.x, &cache);
        Eigen::MatrixXd grad(pred.rows(), pred.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
          if (cls) {
            grad.col(i) = softmax(pred.col(i));
            grad(static_cast<Eigen::Index>(context.cls[static_cast<std::size_t>(i)]), i) -= 1.0;
          } else {
            grad(0, i) = 2.0 * (pred(0, i) - context.y[i]);
          }
        }
        grad /= static_cast<double>(n);
        NetGrads g = net.backward(cache, grad);
        opt.step(net, g);
        if (validation && !validation->empty()) {
          double v = mlp_loss(net, *validation, ev.task_);
          if (v < best_val) {
            best_val = v;
            best = net;
            since_best = 0;
          } else if (++since_best >= config.mlp_patience) {
            break;
          }
        }
      }
      ev.mlp_ = (validation && !validation->empty()) ? best : net;
      break;
    }
  }
  return ev;
}

Prediction Evaluator::predict(const Eigen::VectorXd& x) const {
  Prediction p;
  const bool cls = task_ == TaskKind::classification;
  switch (config_.kind) {
    case EvaluatorKind::knn: {
      const std::size_t n = context_.size();
      std::vector<std::pair<double, std::size_t>> dist(n);
      for (std::size_t i = 0; i < n; ++i) {
        dist[i] = {(context_.x.col(static_cast<Eigen::Index>(i)) - x).squaredNorm(), i};
      }
      std::size_t k = std::min(config_.k, n);
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
      if (cls) {
        p.probs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_classes_));
        for (std::size_t j = 0; j < k; ++j) p.probs[static_cast<Eigen::Index>(context_.cls[dist[j].second])] += 1.0;
        p.probs /= static_cast<double>(k);
      } else {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += context_.y[static_cast<Eigen::Index>(dist[j].second)];
        p.mean = s / static_cast<double>(k);
      }
      break;
    }
    case EvaluatorKind::logistic: {
      if (degenerate_) {
        p.probs = constant_probs_;
        break;
      }
      Eigen::VectorXd xb(x.size() + 1);
      xb << x, 1.0;
      p.probs = softmax(linear_ * xb);
      break;
    }
    case EvaluatorKind::ridge: {
      Eigen::VectorXd xb(x.size() + 1);
      xb << x, 1.0;
      p.mean = (linear_ * xb)(0);
      break;
    }
    case EvaluatorKind::tiny_mlp: {
      Eigen::VectorXd out = mlp_.forward(x);
      if (cls) p.probs = softmax(out);
      else p.mean = out[0];
      break;
    }
  }
  return p;
}

std::vector<Prediction> Evaluator::predict_all(const Eigen::MatrixXd& xs, EvalCounters* counters) const {
  if (counters) counters->predictions += static_cast<std::uint64_t>(xs.cols());
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(xs.cols()));
  for (Eigen::Index i = 0; i < xs.cols(); ++i) out.push_back(predict(xs.col(i)));
  return out;
}

double Evaluator::loss(const Prediction& p, const LabeledMatrix& data, std::size_t i) const {
  if (task_ == TaskKind::classification) {
    double prob = p.probs[static_cast<Eigen::Index>(data.cls[i])];
    return -std::log(std::max(prob, config_.prob_floor));
  }
  double r = data.y[static_cast<Eigen::Index>(i)] - p.mean;
  return r * r;
}

double Evaluator::uncertainty(const Prediction& p, const LabeledMatrix& data, std::size_t i) const {
  if (task_ == TaskKind::classification) return entropy(p.probs);
  return std::abs(data.y[static_cast<Eigen::Index>(i)] - p.mean);
}

std::vector<std::size_t> focused_queries(const Evaluator& evaluator, const LabeledMatrix& queries, double alpha,
                                         EvalCounters* counters) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error("focused_queries: alpha must lie in (0, 1]");
  const std::size_t n = queries.size();
  if (n == 0) return {};
  auto preds = evaluator.predict_all(queries.x, counters);
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = evaluator.uncertainty(preds[i], queries, i);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  auto take = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n) - 1e-12));
  take = std::clamp<std::size_t>(take, 1, n);
  order.resize(take);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<std::size_t> FoldPlan::members(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::complement(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] != fold) out.push_back(i);
  }
  return out;
}

FoldPlan make_folds(std::size_t num_rows, std::size_t num_folds, std::uint64_t seed) {
  if (num_folds == 0) throw Error("make_folds: need at least one fold");
  FoldPlan plan;
  plan.num_folds = num_folds;
  plan.seed = seed;
  plan.fold_of.resize(num_rows);
  Rng rng(seed);
  auto perm = rng.permutation(num_rows);
  for (std::size_t j = 0; j < num_rows; ++j) plan.fold_of[perm[j]] = j % num_folds;
  return plan;
}

double student_t_quantile(double p, double dof) {
  boost::math::students_t dist(dof);
  return boost::math::quantile(dist, p);
}

double error_bar(std::span<const double> per_fold, double alpha_level) {
  const std::size_t m = per_fold.size();
  if (m < 2) return std::numeric_limits<double>::infinity();
  double mean = std::accumulate(per_fold.begin(), per_fold.end(), 0.0) / static_cast<double>(m);
  double ss = 0.0;
  for (double v : per_fold) ss += (v - mean) * (v - mean);
  double sd = std::sqrt(ss / static_cast<double>(m - 1));
  if (sd == 0.0) return 0.0;
  return student_t_quantile(1.0 - alpha_level / 2.0, static_cast<double>(m - 1)) * sd /
         std::sqrt(static_cast<double>(m));
}

UtilityEstimate make_estimate(std::vector<double> per_fold, double alpha_level) {
  UtilityEstimate est;
  est.alpha_level = alpha_level;
  est.per_fold = std::move(per_fold);
  if (est.per_fold.empty()) throw Error("utility estimate over zero folds");
  est.value = std::accumulate(est.per_fold.begin(), est.per_fold.end(), 0.0) / static_cast<double>(est.per_fold.size());
  est.epsilon = error_bar(est.per_fold, alpha_level);
  return est;
}

std::vector<double> fold_losses(const LabeledMatrix& real, const LabeledMatrix& synthetic, const FoldPlan& folds,
                                const PluginConfig& config, std::size_t num_classes, const FocusedSets* fixed,
                                FocusedSets* computed, EvalCounters* counters) {
  if (folds.fold_of.size() != real.size()) throw Error("fold plan does not match the real rows");
  std::vector<double> out(folds.num_folds, std::numeric_limits<double>::quiet_NaN());
  if (computed) {
    computed->per_fold.assign(folds.num_folds, {});
    computed->uncertainty.assign(real.size(), std::numeric_limits<double>::quiet_NaN());
  }
  for (std::size_t f = 0; f < folds.num_folds; ++f) {
    auto query_rows = folds.members(f);
    if (query_rows.empty()) continue;
    auto ctx_rows = folds.complement(f);
    LabeledMatrix context = real.subset(ctx_rows).concat(synthetic);
    if (context.empty()) continue;
    Evaluator ev = Evaluator::fit(config.evaluator, context, num_classes, nullptr, counters);
    LabeledMatrix queries = real.subset(query_rows);

    std::vector<std::size_t> chosen;  // positions within query_rows
    if (fixed) {
      for (std::size_t r : fixed->per_fold[f]) {
        auto it = std::find(query_rows.begin(), query_rows.end(), r);
        if (it == query_rows.end()) throw Error("fixed focused query is not in its fold");
        chosen.push_back(static_cast<std::size_t>(it - query_rows.begin()));
      }
    } else {
      chosen = focused_queries(ev, queries, config.alpha, counters);
    }
    if (chosen.empty()) continue;
    LabeledMatrix focus = queries.subset(chosen);
    auto preds = ev.predict_all(focus.x, counters);
    double total = 0.0;
    for (std::size_t i = 0; i < focus.size(); ++i) {
      total += ev.loss(preds[i], focus, i);
      if (computed) computed->uncertainty[query_rows[chosen[i]]] = ev.uncertainty(preds[i], focus, i);
    }
    out[f] = total / static_cast<double>(focus.size());
    if (computed) {
      for (std::size_t c : chosen) computed->per_fold[f].push_back(query_rows[c]);
    }
  }
  return out;
}

double mean_fold_loss(std::span<const double> per_fold) {
  double total = 0.0;
  std::size_t n = 0;
  for (double v : per_fold) {
    if (std::isnan(v)) continue;
    total += v;
    ++n;
  }
  if (n == 0) throw Error("plug-in loss: every fold is empty");
  return total / static_cast<double>(n);
}

UtilityEstimate utility_from_losses(std::span<const double> before, std::span<const double> after,
                                    double alpha_level) {
  std::vector<double> per_fold;
  for (std::size_t f = 0; f < before.size() && f < after.size(); ++f) {
    if (std::isnan(before[f]) || std::isnan(after[f])) continue;
    per_fold.push_back(before[f] - after[f]);
  }
  return make_estimate(std::move(per_fold), alpha_level);
}

PluginEstimator::PluginEstimator(const Encoder& encoder, const Table& real_train, PluginConfig config,
                                 std::uint64_t seed)
    : encoder_(&encoder), config_(std::move(config)) {
  num_classes_ = encoder.targets().task == TaskKind::classification ? encoder.num_conditions() : 0;
  real_ = LabeledMatrix::from_table(encoder, real_train);
  committed_ = real_.subset(std::vector<std::size_t>{});
  folds_ = make_folds(real_.size(), config_.folds, seed);
}

void PluginEstimator::commit(const LabeledMatrix& rows) {
  if (rows.empty()) return;
  committed_ = committed_.concat(rows);
  cache_.invalidate();
}

void PluginEstimator::refresh() {
  if (!cache_.dirty) return;
  cache_.per_fold = fold_losses(real_, committed_, folds_, config_, num_classes_, nullptr, &cache_.focused, &counters_);
  cache_.dirty = false;
  ++cache_.recomputations;
}

double PluginEstimator::loss() {
  refresh();
  return mean_fold_loss(cache_.per_fold);
}

const std::vector<double>& PluginEstimator::fold_loss_values() {
  refresh();
  return cache_.per_fold;
}

const FocusedSets& PluginEstimator::focused() {
  refresh();
  return cache_.focused;
}

UtilityEstimate PluginEstimator::utility(const LabeledMatrix& extra) {
  refresh();
  if (extra.empty()) {
    std::vector<double> zeros;
    for (double v : cache_.per_fold) {
      if (!std::isnan(v)) zeros.push_back(0.0);
    }
    return make_estimate(std::move(zeros), config_.alpha_level);
  }
  auto after = fold_losses(real_, committed_.concat(extra), folds_, config_, num_classes_, &cache_.focused, nullptr,
                           &counters_);
  return utility_from_losses(cache_.per_fold, after, config_.alpha_level);
}

}  // namespace tap

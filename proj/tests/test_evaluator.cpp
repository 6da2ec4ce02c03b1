#include <cmath>
#include <numeric>

#include "doctest.h"
#include "tap/evaluator.hpp"

using namespace tap;

namespace {

LabeledMatrix cls_matrix(std::vector<double> xs, std::vector<std::size_t> labels) {
  LabeledMatrix m;
  m.task = TaskKind::classification;
  m.x = Eigen::Map<Eigen::RowVectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  m.cls = std::move(labels);
  m.y = Eigen::VectorXd::Zero(m.x.cols());
  return m;
}

LabeledMatrix reg_matrix(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  LabeledMatrix m;
  m.task = TaskKind::regression;
  m.x = x;
  m.y = y;
  m.cls.assign(static_cast<std::size_t>(y.size()), 0);
  return m;
}

struct OneDim {
  std::shared_ptr<const Schema> schema;
  Table table;
  Encoder encoder;
};

// One numeric feature, binary label; every point is listed explicitly.
OneDim one_dim(const std::vector<std::pair<double, std::string>>& rows) {
  auto raw = std::make_shared<Schema>(parse_schema(R"({"task": "classification", "label": "y",
    "columns": [{"name": "x", "kind": "numeric"},
                {"name": "y", "kind": "categorical", "vocabulary": ["a", "b"]}]})"));
  Table t(raw);
  for (const auto& [x, y] : rows) t.append({x, y}, Provenance::real);
  OneDim o;
  o.schema = std::make_shared<const Schema>(fit_encoder(t));
  o.table = t.with_schema(o.schema);
  o.encoder = Encoder(o.schema, make_target_space(o.table));
  return o;
}

LabeledMatrix rows_of(const OneDim& o, const std::vector<std::pair<double, std::string>>& rows) {
  Table t(o.schema);
  for (const auto& [x, y] : rows) t.append({x, y}, Provenance::synthetic);
  return LabeledMatrix::from_table(o.encoder, t);
}

EvaluatorConfig knn(std::size_t k) {
  EvaluatorConfig c;
  c.kind = EvaluatorKind::knn;
  c.k = k;
  return c;
}

}  // namespace

TEST_CASE("evaluators") {
  SUBCASE("1-NN on a single context row") {
    Evaluator ev = Evaluator::fit(knn(1), cls_matrix({0.0}, {0}), 2);
    for (double q : {-5.0, 0.0, 3.0}) {
      Eigen::VectorXd x(1);
      x << q;
      CHECK(ev.predict(x).probs[0] == 1.0);
    }
  }
  SUBCASE("ridge shrinks to the label mean") {
    Eigen::MatrixXd x(1, 4);
    x << -1, 0, 1, 2;
    Eigen::VectorXd y(4);
    y << 3, -1, 4, 2;
    EvaluatorConfig c;
    c.kind = EvaluatorKind::ridge;
    c.ridge_lambda = 1e12;
    Evaluator ev = Evaluator::fit(c, reg_matrix(x, y), 0);
    Eigen::VectorXd q(1);
    q << 5.0;
    CHECK(ev.predict(q).mean == doctest::Approx(2.0).epsilon(1e-6));
  }
  SUBCASE("logistic separates two points") {
    EvaluatorConfig c;
    c.kind = EvaluatorKind::logistic;
    Evaluator ev = Evaluator::fit(c, cls_matrix({-1.0, 1.0}, {0, 1}), 2);
    Eigen::VectorXd a(1), b(1);
    a << -1.0;
    b << 1.0;
    CHECK(ev.predict(a).probs[0] > 0.5);
    CHECK(ev.predict(b).probs[1] > 0.5);
  }
  SUBCASE("logistic with one class falls back to a constant") {
    EvaluatorConfig c;
    c.kind = EvaluatorKind::logistic;
    Evaluator ev = Evaluator::fit(c, cls_matrix({-1.0, 1.0}, {1, 1}), 2);
    CHECK(ev.degenerate());
  }
  SUBCASE("tiny mlp with early stopping fits a separable set") {
    EvaluatorConfig c;
    c.kind = EvaluatorKind::tiny_mlp;
    LabeledMatrix train = cls_matrix({-2, -1.5, -1, 1, 1.5, 2}, {0, 0, 0, 1, 1, 1});
    LabeledMatrix val = cls_matrix({-1.2, 1.2}, {0, 1});
    Evaluator ev = Evaluator::fit(c, train, 2, &val);
    auto preds = ev.predict_all(train.x);
    for (std::size_t i = 0; i < 6; ++i) CHECK(preds[i].probs[static_cast<Eigen::Index>(train.cls[i])] > 0.5);
  }
}

TEST_CASE("losses") {
  SUBCASE("uniform predictor has loss ln C") {
    Evaluator ev = Evaluator::fit(knn(3), cls_matrix({0, 1, 2}, {0, 1, 2}), 3);
    Eigen::VectorXd q(1);
    q << 1.0;
    LabeledMatrix query = cls_matrix({1.0}, {2});
    CHECK(ev.loss(ev.predict(q), query, 0) == doctest::Approx(std::log(3.0)));
    CHECK(ev.uncertainty(ev.predict(q), query, 0) == doctest::Approx(std::log(3.0)));
  }
  SUBCASE("perfect 1-NN regression has zero loss") {
    Eigen::MatrixXd x(1, 3);
    x << 0, 1, 2;
    Eigen::VectorXd y(3);
    y << 0.5, -1, 2;
    LabeledMatrix ctx = reg_matrix(x, y);
    Evaluator ev = Evaluator::fit(knn(1), ctx, 0);
    auto preds = ev.predict_all(ctx.x);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ev.loss(preds[i], ctx, i) == 0.0);
  }
  SUBCASE("probability floor") {
    Evaluator ev = Evaluator::fit(knn(1), cls_matrix({0.0}, {0}), 2);
    Eigen::VectorXd q(1);
    q << 0.0;
    CHECK(ev.loss(ev.predict(q), cls_matrix({0.0}, {1}), 0) == doctest::Approx(-std::log(1e-6)));
  }
}

TEST_CASE("focused queries") {
  Evaluator ev = Evaluator::fit(knn(1), cls_matrix({0.0}, {0}), 2);
  LabeledMatrix q = cls_matrix({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, std::vector<std::size_t>(10, 0));
  CHECK(focused_queries(ev, q, 1.0).size() == 10);
  // Uniform confidence: first ceil(alpha n) rows by index.
  CHECK(focused_queries(ev, q, 0.2) == std::vector<std::size_t>{0, 1});
  CHECK(focused_queries(ev, q, 0.25) == std::vector<std::size_t>{0, 1, 2});

  Evaluator mixed = Evaluator::fit(knn(2), cls_matrix({0, 0.1, 5, 5.1, 9}, {0, 1, 0, 0, 1}), 2);
  LabeledMatrix q2 = cls_matrix({5.0, 0.05, 9.0}, {0, 0, 0});
  CHECK(focused_queries(mixed, q2, 0.3) == std::vector<std::size_t>{1});
}

TEST_CASE("fold losses match a from-scratch loop") {
  Rng rng(3);
  std::vector<double> xs;
  std::vector<std::size_t> ys;
  for (int i = 0; i < 10; ++i) {
    xs.push_back(rng.normal());
    ys.push_back(xs.back() + 0.3 * rng.normal() > 0 ? 1 : 0);
  }
  LabeledMatrix real = cls_matrix(xs, ys);
  LabeledMatrix empty = real.subset(std::vector<std::size_t>{});
  FoldPlan plan = make_folds(10, 5, 4);
  PluginConfig cfg;
  cfg.evaluator = knn(3);
  cfg.alpha = 0.5;
  auto got = fold_losses(real, empty, plan, cfg, 2);
  for (std::size_t f = 0; f < 5; ++f) {
    std::vector<std::size_t> qrows, crows;
    for (std::size_t i = 0; i < 10; ++i) (plan.fold_of[i] == f ? qrows : crows).push_back(i);
    // 3-NN vote by hand, ties in distance broken by index.
    auto probs = [&](double x) {
      std::vector<std::pair<double, std::size_t>> d;
      for (std::size_t j = 0; j < crows.size(); ++j) d.push_back({(xs[crows[j]] - x) * (xs[crows[j]] - x), j});
      std::sort(d.begin(), d.end());
      std::array<double, 2> p{0, 0};
      for (int j = 0; j < 3; ++j) p[ys[crows[d[static_cast<std::size_t>(j)].second]]] += 1.0 / 3.0;
      return p;
    };
    std::vector<std::pair<double, std::size_t>> unc;
    for (std::size_t q = 0; q < qrows.size(); ++q) {
      auto p = probs(xs[qrows[q]]);
      double h = 0.0;
      for (double v : p) {
        if (v > 0) h -= v * std::log(v);
      }
      unc.push_back({-h, q});
    }
    std::stable_sort(unc.begin(), unc.end(), [](auto a, auto b) { return a.first < b.first; });
    std::size_t take = static_cast<std::size_t>(std::ceil(0.5 * static_cast<double>(qrows.size())));
    double total = 0.0;
    for (std::size_t j = 0; j < take; ++j) {
      std::size_t r = qrows[unc[j].second];
      total += -std::log(std::max(probs(xs[r])[ys[r]], 1e-6));
    }
    CHECK(got[f] == doctest::Approx(total / static_cast<double>(take)).epsilon(1e-12));
  }
}

TEST_CASE("plug-in utility") {
  // 1-D: a at 0, 1, 2; b at 10, 11 and a stray b at 2.4 that 1-NN gets wrong.
  std::vector<std::pair<double, std::string>> rows{{0, "a"}, {1, "a"}, {2, "a"}, {10, "b"}, {11, "b"}, {2.4, "b"}};
  OneDim o = one_dim(rows);
  PluginConfig cfg;
  cfg.evaluator = knn(1);
  cfg.folds = 6;
  cfg.alpha = 1.0;

  SUBCASE("empty set is exactly zero") {
    PluginEstimator est(o.encoder, o.table, cfg, 1);
    UtilityEstimate u = est.utility(rows_of(o, {}));
    CHECK(u.value == 0.0);
    CHECK(u.epsilon == 0.0);
  }
  SUBCASE("correct-label twin of a misclassified query helps") {
    PluginEstimator est(o.encoder, o.table, cfg, 1);
    UtilityEstimate u = est.utility(rows_of(o, {{2.4, "b"}}));
    CHECK(u.value > 0.0);
  }
  SUBCASE("duplicating a context row changes nothing under 1-NN") {
    LabeledMatrix real = LabeledMatrix::from_table(o.encoder, o.table);
    LabeledMatrix ctx = real.subset(std::vector<std::size_t>{0, 1, 3, 4});
    Evaluator a = Evaluator::fit(knn(1), ctx, 2);
    Evaluator b = Evaluator::fit(knn(1), ctx.concat(ctx.subset(std::vector<std::size_t>{1})), 2);
    auto pa = a.predict_all(real.x);
    auto pb = b.predict_all(real.x);
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < real.size(); ++i) {
      before += a.loss(pa[i], real, i);
      after += b.loss(pb[i], real, i);
    }
    CHECK(before - after == 0.0);
  }
  SUBCASE("pooled utility is not additive") {
    PluginEstimator est(o.encoder, o.table, cfg, 1);
    LabeledMatrix s1 = rows_of(o, {{2.4, "b"}});
    double u1 = est.utility(s1).value;
    double pooled = est.utility(s1.concat(s1)).value;
    CHECK(u1 > 0.0);
    CHECK(pooled != doctest::Approx(2 * u1));
  }
  SUBCASE("L(D_t) is computed once per window") {
    PluginEstimator est(o.encoder, o.table, cfg, 1);
    for (int i = 0; i < 5; ++i) {
      est.loss();
      est.utility(rows_of(o, {{1.5, "a"}}));
    }
    CHECK(est.cache().recomputations == 1);
    est.commit(rows_of(o, {{1.5, "a"}}));
    est.loss();
    CHECK(est.cache().recomputations == 2);
  }
}

TEST_CASE("no query row is ever in its fold's context") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t n = 8 + rng.uniform_index(20);
    FoldPlan plan = make_folds(n, 5, rng.next_u64());
    for (std::size_t f = 0; f < 5; ++f) {
      auto m = plan.members(f);
      auto c = plan.complement(f);
      CHECK(m.size() + c.size() == n);
      for (std::size_t r : m) CHECK(std::find(c.begin(), c.end(), r) == c.end());
    }
  }
}

TEST_CASE("error bars") {
  std::vector<double> same{0.3, 0.3, 0.3, 0.3, 0.3};
  CHECK(error_bar(same) == 0.0);
  std::vector<double> f{0, 0, 0, 0, 1};
  double sd = std::sqrt(0.2);  // sample std of {0,0,0,0,1}
  CHECK(error_bar(f) == doctest::Approx(2.7764451051977987 * sd / std::sqrt(5.0)).epsilon(1e-12));
  CHECK(student_t_quantile(0.975, 4) == doctest::Approx(2.776).epsilon(1e-3));
  std::vector<double> doubled{0, 0, 0, 0, 2};
  CHECK(error_bar(doubled) == doctest::Approx(2 * error_bar(f)));
  std::vector<double> single{1.0};
  CHECK(std::isinf(error_bar(single)));
}

TEST_CASE("utility estimates are deterministic") {
  std::vector<std::pair<double, std::string>> rows;
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    double x = rng.normal();
    rows.push_back({x, x > 0 ? "b" : "a"});
  }
  OneDim o = one_dim(rows);
  PluginConfig cfg;
  PluginEstimator a(o.encoder, o.table, cfg, 5), b(o.encoder, o.table, cfg, 5);
  LabeledMatrix extra = rows_of(o, {{0.1, "b"}, {-0.2, "a"}});
  CHECK(a.utility(extra).per_fold == b.utility(extra).per_fold);
}

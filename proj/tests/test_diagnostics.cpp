#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "tap/diagnostics.hpp"
#include "tap/harness.hpp"

using namespace tap;

namespace {

const SeedContext& seed_context() {
  static const SeedContext ctx = [] {
    RunSpec spec = parse_run_spec(nlohmann::json::parse(R"({
      "dataset": {"builtin": "two-gauss-2class", "params": {"rows": 600}},
      "n_real": 40, "seeds": [0], "n_syn": 30,
      "diffusion": {"train_steps": 300, "num_steps": 40, "hidden_width": 48}
    })"));
    return prepare_seed(spec, load_dataset(spec.dataset), 5);
  }();
  return ctx;
}

MechanismContext mechanism_context() {
  const SeedContext& s = seed_context();
  MechanismContext m;
  m.encoder = &s.encoder;
  m.train = &s.splits.train;
  m.denoiser = &s.denoiser;
  m.schedule = &s.schedule;
  m.diffusion = &s.diffusion;
  m.important = s.important;
  m.tap.policy.hidden_width = 32;
  return m;
}

struct Small {
  std::shared_ptr<const Schema> schema;
  Table table;
  Encoder encoder;
};

Small small_table(const char* schema_json, const std::vector<Record>& rows) {
  auto raw = std::make_shared<Schema>(parse_schema(schema_json));
  Table t(raw);
  for (const auto& r : rows) t.append(r, Provenance::real);
  Small s;
  s.schema = std::make_shared<const Schema>(fit_encoder(t));
  s.table = t.with_schema(s.schema);
  s.encoder = Encoder(s.schema, make_target_space(s.table));
  return s;
}

const char* kCls = R"({"task": "classification", "label": "y",
  "columns": [{"name": "x", "kind": "numeric"}, {"name": "z", "kind": "numeric"},
              {"name": "y", "kind": "categorical", "vocabulary": ["a", "b"]}]})";
const char* kReg = R"({"task": "regression", "label": "y",
  "columns": [{"name": "x", "kind": "numeric"}, {"name": "y", "kind": "numeric"}]})";

Record cls_row(double x, double z, const char* y) { return {x, z, std::string(y)}; }

}  // namespace

TEST_CASE("smote neighbour clamping") {
  CHECK(smote_k(0) == 0);
  CHECK(smote_k(1) == 0);
  CHECK(smote_k(2) == 1);
  CHECK(smote_k(3) == 2);
  CHECK(smote_k(6) == 5);
  CHECK(smote_k(100) == 5);
  CHECK(smote_k(4, 10) == 3);
}

TEST_CASE("smote classification") {
  std::vector<Record> rows{cls_row(100, -100, "a")};
  for (int i = 0; i < 6; ++i) rows.push_back(cls_row(i, 2.0 * i, "b"));
  Small s = small_table(kCls, rows);
  Rng rng(1);
  Table out = smote(s.table, s.encoder, 12, 5, rng);
  REQUIRE(out.size() == 12);
  std::size_t a_count = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out.provenance(i) == Provenance::synthetic);
    Record r = out.row(i);
    if (as_token(r[2]) == "a") {
      // A one-member class falls back to bootstrap copies.
      CHECK(r == s.table.row(0));
      ++a_count;
    } else {
      // Interpolation keeps b rows on the segment z = 2x with x in [0, 5].
      double x = as_number(r[0]);
      CHECK(x >= 0.0);
      CHECK(x <= 5.0);
      CHECK(as_number(r[1]) == doctest::Approx(2.0 * x));
    }
  }
  // Smallest class is filled first (ties to the lower index): five copies to
  // reach six, then a, b, a, b, a, b, a.
  CHECK(a_count == 9);

  Rng again(1);
  Table repeat = smote(s.table, s.encoder, 12, 5, again);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(repeat.row(i) == out.row(i));
  Rng zero(1);
  CHECK(smote(s.table, s.encoder, 0, 5, zero).empty());
}

TEST_CASE("smote regression and the discriminator") {
  SUBCASE("nearest point decides") {
    Eigen::MatrixXd real(1, 2), noise(1, 2);
    real << 0.0, 10.0;
    noise << 4.0, 20.0;
    Eigen::VectorXd p(1);
    p << 1.0;
    CHECK(discriminator_accepts(p, real, noise));
    p << 3.5;
    CHECK_FALSE(discriminator_accepts(p, real, noise));
    p << 2.0;  // equidistant goes to real
    CHECK(discriminator_accepts(p, real, noise));
  }
  SUBCASE("rows are interpolated jointly and accepted by the discriminator") {
    std::vector<Record> rows;
    for (int i = 0; i < 20; ++i) rows.push_back({i / 4.0, 3.0 * i / 4.0});
    Small s = small_table(kReg, rows);
    Rng rng(2);
    Table out = smote(s.table, s.encoder, 15, 5, rng);
    CHECK(out.size() <= 15);
    CHECK(out.size() > 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      Record r = out.row(i);
      CHECK(as_number(r[1]) == doctest::Approx(3.0 * as_number(r[0])));
    }
  }
  SUBCASE("a single row falls back to bootstrap") {
    Small s = small_table(kReg, {{1.0, 2.0}});
    Rng rng(3);
    Table out = smote(s.table, s.encoder, 4, 5, rng);
    REQUIRE(out.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.row(i) == s.table.row(0));
  }
}

TEST_CASE("percentile rank and tail mean") {
  std::vector<double> ref{1, 2, 3, 4};
  CHECK(percentile_rank(0.5, ref) == 0.0);
  CHECK(percentile_rank(2.0, ref) == 25.0);
  CHECK(percentile_rank(2.5, ref) == 50.0);
  CHECK(percentile_rank(10, ref) == 100.0);
  CHECK_THROWS_AS(percentile_rank(1.0, std::vector<double>{}), Error);

  std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(tail_mean(v, 0.2) == doctest::Approx(9.5));
  CHECK(tail_mean(v, 0.25) == doctest::Approx(9.0));
  CHECK(tail_mean(v, 1.0) == doctest::Approx(5.5));
  CHECK(tail_mean({7.0}, 0.2) == 7.0);
  CHECK_THROWS_AS(tail_mean({}, 0.2), Error);

  // Every injected score above the whole real distribution gives risk 100.
  CHECK(tail_risk(std::vector<double>{50, 60}, ref, 0.2) == 100.0);
  CHECK(tail_risk(std::vector<double>{0, 0, 0}, ref, 0.2) == 0.0);
}

TEST_CASE("learnability bins") {
  std::vector<double> s{0.5, 0.1, 0.9, 0.1, 0.3, 0.7, 0.2};
  auto bins = learnability_bins(s, 3);
  REQUIRE(bins.size() == 3);
  CHECK(bins[0] == std::vector<std::size_t>{1, 3, 6});
  CHECK(bins[1] == std::vector<std::size_t>{4, 0});
  CHECK(bins[2] == std::vector<std::size_t>{5, 2});
  CHECK(learnability_bins(s, 20).size() == 7);
  CHECK_THROWS_AS(learnability_bins(s, 0), Error);

  BucketReport r = bucketed_injection(s, 3, [](std::span<const std::size_t> rows) {
    return static_cast<double>(rows.size());
  });
  CHECK(r.gains == std::vector<double>{3, 2, 2});
}

TEST_CASE("pareto buckets") {
  std::vector<double> bnd_a{0, 1, 2, 3}, pct_a{10, 20, 30, 40};
  std::vector<double> bnd_b{0, 1, 2, 3}, pct_b{5, 5, 5, 5};
  auto b = pareto_buckets(bnd_a, pct_a, bnd_b, pct_b, 2);
  REQUIRE(b.size() == 2);
  CHECK(b[0].count_a == 2);
  CHECK(b[0].count_b == 2);
  CHECK(b[0].mean_a == doctest::Approx(15.0));
  CHECK(b[1].mean_a == doctest::Approx(35.0));
  CHECK(b[1].mean_b == doctest::Approx(5.0));
  CHECK_THROWS_AS(pareto_buckets(bnd_a, pct_b, bnd_b, std::vector<double>{1}, 2), Error);
}

TEST_CASE("worst drop") {
  std::map<std::string, double> grid{{"K=20,tau=0", 0.80}, {"K=1,tau=0", 0.78}, {"K=50,tau=0.2", 0.83}};
  CHECK(worst_drop(grid, "K=20,tau=0") == doctest::Approx(0.02));
  CHECK(worst_drop({{"d", 0.5}, {"e", 0.9}}, "d") == 0.0);
  CHECK_THROWS_AS(worst_drop(grid, "missing"), Error);
}

TEST_CASE("diagnostic scores") {
  LabeledMatrix real;
  real.task = TaskKind::classification;
  real.x = Eigen::RowVectorXd::LinSpaced(6, 0, 5);
  real.cls = {0, 0, 0, 1, 1, 1};
  real.y = Eigen::VectorXd::Zero(6);
  EvaluatorConfig ec;
  ec.kind = EvaluatorKind::knn;
  ec.k = 2;
  Evaluator ev = Evaluator::fit(ec, real, 2);
  Eigen::VectorXd mid(1), left(1);
  mid << 2.5;
  left << 0.0;
  CHECK(s_bnd(ev, mid, real) == doctest::Approx(std::log(2.0)));
  CHECK(s_bnd(ev, left, real) == 0.0);
  CHECK(s_con(ev, left, 0, 0.0) == doctest::Approx(0.0));
  CHECK(s_con(ev, left, 1, 0.0) == doctest::Approx(-std::log(1e-6)));
  DiagnosticScores ds = score_rows(ev, real, real);
  CHECK(ds.s_bnd.size() == 6);
  CHECK(ds.s_con.size() == 6);

  auto order = hardness_order(ev, real);
  CHECK(order.size() == 6);
  std::set<std::size_t> seen(order.begin(), order.end());
  CHECK(seen.size() == 6);
}

TEST_CASE("ridge influence tracks retraining") {
  Rng rng(6);
  LabeledMatrix data;
  data.task = TaskKind::regression;
  data.x = Eigen::MatrixXd::NullaryExpr(2, 30, [&] { return rng.normal(); });
  data.y.resize(30);
  for (Eigen::Index i = 0; i < 30; ++i) data.y[i] = data.x(0, i) - 0.5 * data.x(1, i) + 0.2 * rng.normal();
  data.cls.assign(30, 0);
  LabeledMatrix queries = data.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

  SUBCASE("theta solves the regularized normal equations") {
    Eigen::VectorXd theta = fit_surrogate(data, Surrogate::ridge, 0.5);
    Eigen::MatrixXd xb(3, 30);
    xb << data.x, Eigen::RowVectorXd::Ones(30);
    Eigen::VectorXd grad = (xb * (xb.transpose() * theta - data.y)) / 30.0 + 0.5 * theta;
    CHECK(grad.norm() < 1e-9);
  }
  SUBCASE("influence correlates with the retraining utility") {
    std::vector<double> inf, ret;
    for (int i = 0; i < 30; ++i) {
      Eigen::VectorXd zx(2);
      zx << rng.normal(), rng.normal();
      double zy = zx[0] - 0.5 * zx[1] + 0.6 * rng.normal();
      inf.push_back(influence_diagnostic(data, zx, zy, Surrogate::ridge, 0.1, queries));
      ret.push_back(retrain_utility(data, zx, zy, Surrogate::ridge, 0.1, queries));
    }
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    double mi = mean(inf), mr = mean(ret), sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < inf.size(); ++i) {
      sab += (inf[i] - mi) * (ret[i] - mr);
      saa += (inf[i] - mi) * (inf[i] - mi);
      sbb += (ret[i] - mr) * (ret[i] - mr);
    }
    CHECK(sab / std::sqrt(saa * sbb) > 0.9);
  }
}

TEST_CASE("worst-case inputs to surrogate fitting") {
  LabeledMatrix empty;
  CHECK_THROWS_AS(surrogate_loss(Eigen::VectorXd::Zero(1), empty, Surrogate::ridge), Error);
}

TEST_CASE("mechanisms") {
  MechanismContext ctx = mechanism_context();
  const SeedContext& s = seed_context();
  SUBCASE("global") {
    Rng rng(1);
    Table g = global_sample(10, ctx, rng);
    CHECK(g.size() == 10);
  }
  SUBCASE("random inpainting keeps anchors") {
    Rng rng(2);
    MechanismOutput out = random_inpaint(12, ctx, rng);
    REQUIRE(out.synthetic.size() == 12);
    REQUIRE(out.anchors.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) {
      // The label always comes from the anchor.
      CHECK(out.synthetic.label(i) == s.splits.train.label(out.anchors[i]));
    }
  }
  SUBCASE("hard inpainting respects the budget and anchors on hard rows") {
    Rng rng(3);
    MechanismOutput out = hard_inpaint(10, ctx, rng);
    CHECK(out.synthetic.size() <= 10);
    CHECK(out.anchors.size() == out.synthetic.size());
    LabeledMatrix dm = LabeledMatrix::from_table(s.encoder, s.splits.train);
    std::vector<Provenance> prov(s.splits.train.size(), Provenance::real);
    GateContext gate(s.encoder, dm, prov, ctx.tap.plugin.evaluator, ctx.tap.gate);
    auto order = hardness_order(gate.evaluator(), dm);
    auto top = static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(dm.size())));
    std::set<std::size_t> hard(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top));
    for (std::size_t a : out.anchors) CHECK(hard.count(a) == 1);
  }
  SUBCASE("dispatch") {
    CHECK(run_mechanism(Mechanism::none, 10, ctx, 1).synthetic.empty());
    CHECK(run_mechanism(Mechanism::smote, 10, ctx, 1).synthetic.size() == 10);
    MechanismOutput tap = run_mechanism(Mechanism::tap, 10, ctx, 1);
    CHECK(tap.trace.has_value());
    CHECK(tap.synthetic.size() <= 10);
    CHECK(mechanism_from_string(to_string(Mechanism::hard_inpaint)) == Mechanism::hard_inpaint);
    CHECK_THROWS(mechanism_from_string("bogus"));
  }
}

TEST_CASE("calibration summary") {
  std::vector<CalibrationCheck> checks(4);
  double est[] = {0.1, 0.2, 0.0, -0.1};
  double eps[] = {0.1, 0.05, 0.2, 0.05};
  double proxy[] = {0.15, 0.3, 0.1, -0.1};
  for (int i = 0; i < 4; ++i) {
    checks[static_cast<std::size_t>(i)].estimate = est[i];
    checks[static_cast<std::size_t>(i)].epsilon = eps[i];
    checks[static_cast<std::size_t>(i)].proxy = proxy[i];
    checks[static_cast<std::size_t>(i)].covered = std::abs(est[i] - proxy[i]) <= eps[i];
  }
  CalibrationReport r = summarize_calibration(checks);
  CHECK(r.coverage == doctest::Approx(0.75));
  CHECK(r.mae == doctest::Approx((0.05 + 0.1 + 0.1 + 0.0) / 4));
  CHECK(r.mean_epsilon == doctest::Approx(0.1));
}

#include "tap/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tap {

std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::none: return "none";
    case Mechanism::global: return "global";
    case Mechanism::random_inpaint: return "random-inpaint";
    case Mechanism::hard_inpaint: return "hard-inpaint";
    case Mechanism::tap: return "tap";
    case Mechanism::smote: return "smote";
  }
  return "none";
}

Mechanism mechanism_from_string(const std::string& name) {
  for (Mechanism m : {Mechanism::none, Mechanism::global, Mechanism::random_inpaint, Mechanism::hard_inpaint,
                      Mechanism::tap, Mechanism::smote}) {
    if (to_string(m) == name) return m;
  }
  throw Error("unknown mechanism '" + name + "'");
}

namespace {

void require(const MechanismContext& ctx) {
  if (!ctx.encoder || !ctx.train || !ctx.denoiser || !ctx.schedule || !ctx.diffusion) {
    throw Error("mechanism context is incomplete");
  }
  if (ctx.train->empty()) throw Error("mechanism needs a non-empty training table");
}

std::size_t num_classes_of(const Encoder& enc) {
  return enc.targets().task == TaskKind::classification ? enc.num_conditions() : 0;
}

struct Draws {
  Eigen::MatrixXd anchors;
  std::vector<std::vector<bool>> regen;
  std::vector<std::size_t> conditions;
  std::vector<Rng> rngs;
};

Eigen::MatrixXd run_chain(Draws& d, const MechanismContext& ctx) {
  return inpaint_features(d.anchors, d.regen, d.conditions, *ctx.denoiser, *ctx.schedule, *ctx.diffusion, d.rngs);
}

}  // namespace

Table global_sample(std::size_t n, const MechanismContext& ctx, Rng& rng) {
  require(ctx);
  const Encoder& enc = *ctx.encoder;
  const Table& train = *ctx.train;
  Table out(train.schema_ptr());
  if (n == 0) return out;

  auto conds = enc.conditions(train);
  std::vector<double> mixture(enc.num_conditions(), 0.0);
  for (auto c : conds) mixture[c] += 1.0;

  const auto w = static_cast<Eigen::Index>(enc.feature_width());
  Draws d;
  d.anchors = Eigen::MatrixXd::Zero(w, static_cast<Eigen::Index>(n));
  d.regen.assign(n, std::vector<bool>(static_cast<std::size_t>(w), true));
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.split(i);
    d.conditions.push_back(r.categorical(mixture));
    d.rngs.push_back(r.split(0xD1FF));
  }
  rng.next_u64();
  Eigen::MatrixXd gen = run_chain(d, ctx);

  Mask all;
  all.regenerate.assign(train.schema().columns.size(), true);
  const bool regression = enc.targets().task == TaskKind::regression;
  for (std::size_t i = 0; i < n; ++i) {
    Record rec = decode_candidate(enc, gen.col(static_cast<Eigen::Index>(i)), train.row(0), all, d.conditions[i]);
    if (regression) {
      std::vector<std::size_t> same;
      for (std::size_t j = 0; j < conds.size(); ++j) {
        if (conds[j] == d.conditions[i]) same.push_back(j);
      }
      Rng r = d.rngs[i].split(7);
      rec[train.schema().label] = train.label(same[r.uniform_index(same.size())]);
    }
    out.append(std::move(rec), Provenance::synthetic);
  }
  return out;
}

MechanismOutput random_inpaint(std::size_t n, const MechanismContext& ctx, Rng& rng) {
  require(ctx);
  const Encoder& enc = *ctx.encoder;
  const Table& train = *ctx.train;
  const Schema& schema = train.schema();
  MechanismOutput out;
  out.synthetic = Table(train.schema_ptr());
  if (n == 0) return out;

  Eigen::MatrixXd encoded = enc.feature_matrix(train);
  auto conds = enc.conditions(train);
  Draws d;
  d.anchors.resize(encoded.rows(), static_cast<Eigen::Index>(n));
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.split(i);
    std::size_t a = r.uniform_index(train.size());
    Mask m;
    m.regenerate.assign(schema.columns.size(), false);
    m.rho = 0.5;
    for (std::size_t c : schema.feature_indices()) m.regenerate[c] = r.bernoulli(0.5);
    out.anchors.push_back(a);
    d.anchors.col(static_cast<Eigen::Index>(i)) = encoded.col(static_cast<Eigen::Index>(a));
    d.regen.push_back(coordinate_mask(enc, m));
    d.conditions.push_back(conds[a]);
    d.rngs.push_back(r.split(0xD1FF));
    masks.push_back(std::move(m));
  }
  rng.next_u64();
  Eigen::MatrixXd gen = run_chain(d, ctx);
  for (std::size_t i = 0; i < n; ++i) {
    out.synthetic.append(decode_candidate(enc, gen.col(static_cast<Eigen::Index>(i)), train.row(out.anchors[i]),
                                          masks[i], d.conditions[i]),
                         Provenance::synthetic);
  }
  return out;
}

std::vector<std::size_t> hardness_order(const Evaluator& evaluator, const LabeledMatrix& data) {
  auto h = anchor_hardness(evaluator, data);
  std::vector<std::size_t> order(h.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h[a] > h[b]; });
  return order;
}

MechanismOutput hard_inpaint(std::size_t n, const MechanismContext& ctx, Rng& rng) {
  require(ctx);
  const Encoder& enc = *ctx.encoder;
  const Table& train = *ctx.train;
  MechanismOutput out;
  out.synthetic = Table(train.schema_ptr());
  if (n == 0) return out;

  LabeledMatrix dm = LabeledMatrix::from_table(enc, train);
  std::vector<Provenance> prov(train.size(), Provenance::real);
  GateContext gate(enc, dm, prov, ctx.tap.plugin.evaluator, ctx.tap.gate);
  auto order = hardness_order(gate.evaluator(), dm);
  auto top = static_cast<std::size_t>(std::ceil(ctx.hard_fraction * static_cast<double>(train.size())));
  top = std::clamp<std::size_t>(top, 1, train.size());
  auto conds = enc.conditions(train);

  GateStats stats;
  Eigen::MatrixXd refs(static_cast<Eigen::Index>(enc.feature_width()), 0);
  const std::size_t cap = std::max<std::size_t>(n, n * ctx.max_attempts_factor);
  std::size_t attempts = 0;
  while (out.synthetic.size() < n && attempts < cap) {
    std::size_t batch = std::min(n - out.synthetic.size(), cap - attempts);
    batch = std::max<std::size_t>(batch, std::min<std::size_t>(16, cap - attempts));
    Draws d;
    d.anchors.resize(dm.x.rows(), static_cast<Eigen::Index>(batch));
    std::vector<Mask> masks;
    std::vector<std::size_t> anchors;
    for (std::size_t i = 0; i < batch; ++i) {
      Rng r = rng.split(attempts + i);
      std::size_t a = order[(attempts + i) % top];
      Mask m = sample_mask(MaskTemplate::conservative, ctx.hard_rho, train.schema(), ctx.important, r);
      anchors.push_back(a);
      d.anchors.col(static_cast<Eigen::Index>(i)) = dm.x.col(static_cast<Eigen::Index>(a));
      d.regen.push_back(coordinate_mask(enc, m));
      d.conditions.push_back(conds[a]);
      d.rngs.push_back(r.split(0xD1FF));
      masks.push_back(std::move(m));
    }
    Eigen::MatrixXd gen = run_chain(d, ctx);
    std::vector<Record> cands;
    for (std::size_t i = 0; i < batch; ++i) {
      cands.push_back(decode_candidate(enc, gen.col(static_cast<Eigen::Index>(i)), train.row(anchors[i]), masks[i],
                                       d.conditions[i]));
    }
    attempts += batch;
    GateBatchResult gb = gate_batch(cands, gate, refs, stats, MaskTemplate::conservative);
    for (std::size_t i : gb.admitted) {
      if (out.synthetic.size() >= n) break;
      Eigen::VectorXd x = enc.encode_features(cands[i]);
      refs.conservativeResize(refs.rows(), refs.cols() + 1);
      refs.col(refs.cols() - 1) = x;
      out.synthetic.append(cands[i], Provenance::synthetic);
      out.anchors.push_back(anchors[i]);
    }
  }
  rng.next_u64();
  return out;
}

std::size_t smote_k(std::size_t n_min, std::size_t k_requested) {
  if (n_min <= 1) return 0;
  return std::min(k_requested, n_min - 1);
}

Eigen::VectorXd joint_point(const Encoder& encoder, const Record& r) {
  Eigen::VectorXd f = encoder.encode_features(r);
  Eigen::VectorXd out(f.size() + 1);
  out << f, encoder.standardize_label(as_number(r[encoder.schema().label]));
  return out;
}

bool discriminator_accepts(const Eigen::VectorXd& point, const Eigen::MatrixXd& real, const Eigen::MatrixXd& noise) {
  double dr = real.cols() ? (real.colwise() - point).colwise().squaredNorm().minCoeff()
                          : std::numeric_limits<double>::infinity();
  double dn = noise.cols() ? (noise.colwise() - point).colwise().squaredNorm().minCoeff()
                           : std::numeric_limits<double>::infinity();
  return dr <= dn;
}

namespace {

std::vector<std::size_t> nearest(const Eigen::MatrixXd& pts, std::span<const std::size_t> pool, std::size_t self,
                                 std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t j : pool) {
    if (j == self) continue;
    d.emplace_back((pts.col(static_cast<Eigen::Index>(j)) - pts.col(static_cast<Eigen::Index>(self))).squaredNorm(), j);
  }
  k = std::min(k, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(d[i].second);
  return out;
}

Record interpolate(const Record& base, const Record& other, const Schema& schema, double u, bool with_label) {
  Record r = base;
  for (std::size_t c = 0; c < schema.columns.size(); ++c) {
    if (!schema.columns[c].is_numeric()) continue;
    if (c == schema.label && !with_label) continue;
    double a = as_number(base[c]);
    double b = as_number(other[c]);
    r[c] = a + u * (b - a);
  }
  return r;
}

}  // namespace

Table smote(const Table& train, const Encoder& encoder, std::size_t n, std::size_t k_requested, Rng& rng) {
  if (train.empty()) throw Error("smote: empty training table");
  const Schema& schema = train.schema();
  Table out(train.schema_ptr());
  if (n == 0) return out;

  if (schema.task == TaskKind::classification) {
    Eigen::MatrixXd pts = encoder.feature_matrix(train);
    auto conds = encoder.conditions(train);
    std::vector<std::vector<std::size_t>> members(encoder.num_conditions());
    for (std::size_t i = 0; i < conds.size(); ++i) members[conds[i]].push_back(i);
    std::vector<std::size_t> counts(members.size());
    for (std::size_t c = 0; c < members.size(); ++c) counts[c] = members[c].size();
    for (std::size_t s = 0; s < n; ++s) {
      // Fill the currently smallest non-empty class.
      std::size_t cls = SIZE_MAX;
      for (std::size_t c = 0; c < members.size(); ++c) {
        if (members[c].empty()) continue;
        if (cls == SIZE_MAX || counts[c] < counts[cls]) cls = c;
      }
      ++counts[cls];
      Rng r = rng.split(s);
      const auto& m = members[cls];
      std::size_t base = m[r.uniform_index(m.size())];
      std::size_t k = smote_k(m.size(), k_requested);
      if (k == 0) {
        out.append(train.row(base), Provenance::synthetic);
        continue;
      }
      auto nn = nearest(pts, m, base, k);
      std::size_t other = nn[r.uniform_index(nn.size())];
      out.append(interpolate(train.row(base), train.row(other), schema, r.uniform(), false), Provenance::synthetic);
    }
    rng.next_u64();
    return out;
  }

  const std::size_t N = train.size();
  const auto dim = static_cast<Eigen::Index>(encoder.feature_width() + 1);
  Eigen::MatrixXd pts(dim, static_cast<Eigen::Index>(N));
  for (std::size_t i = 0; i < N; ++i) pts.col(static_cast<Eigen::Index>(i)) = joint_point(encoder, train.row(i));
  std::size_t k = smote_k(N, k_requested);
  std::vector<std::size_t> all(N);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (k == 0) {
    for (std::size_t s = 0; s < n; ++s) {
      Rng r = rng.split(s);
      out.append(train.row(r.uniform_index(N)), Provenance::synthetic);
    }
    rng.next_u64();
    return out;
  }
  Rng noise_rng = rng.split(0x4015E);
  Eigen::MatrixXd noise(dim, static_cast<Eigen::Index>(N));
  for (Eigen::Index j = 0; j < noise.cols(); ++j) {
    for (Eigen::Index i = 0; i < dim; ++i) noise(i, j) = noise_rng.normal();
  }
  const std::size_t cap = 50 * n;
  for (std::size_t s = 0; s < cap && out.size() < n; ++s) {
    Rng r = rng.split(s);
    std::size_t base = r.uniform_index(N);
    auto nn = nearest(pts, all, base, k);
    std::size_t other = nn[r.uniform_index(nn.size())];
    Record cand = interpolate(train.row(base), train.row(other), schema, r.uniform(), true);
    if (discriminator_accepts(joint_point(encoder, cand), pts, noise)) out.append(std::move(cand), Provenance::synthetic);
  }
  rng.next_u64();
  return out;
}

MechanismOutput run_mechanism(Mechanism m, std::size_t n, const MechanismContext& ctx, std::uint64_t seed) {
  require(ctx);
  Rng rng(seed);
  MechanismOutput out;
  switch (m) {
    case Mechanism::none:
      out.synthetic = Table(ctx.train->schema_ptr());
      break;
    case Mechanism::global:
      out.synthetic = global_sample(n, ctx, rng);
      break;
    case Mechanism::random_inpaint:
      out = random_inpaint(n, ctx, rng);
      break;
    case Mechanism::hard_inpaint:
      out = hard_inpaint(n, ctx, rng);
      break;
    case Mechanism::smote:
      out.synthetic = smote(*ctx.train, *ctx.encoder, n, ctx.smote_k, rng);
      break;
    case Mechanism::tap: {
      RunConfig cfg = ctx.tap;
      cfg.n_syn = n;
      cfg.seed = seed;
      TapInputs in{ctx.encoder, ctx.train, ctx.denoiser, ctx.schedule, ctx.diffusion, ctx.important};
      RunResult r = run_tap(cfg, in);
      out.synthetic = std::move(r.committed);
      out.trace = std::move(r.trace);
      break;
    }
  }
  return out;
}

double s_bnd(const Evaluator& evaluator, const Eigen::VectorXd& x, const LabeledMatrix& real, std::size_t k) {
  if (evaluator.task() == TaskKind::classification) return entropy(evaluator.predict(x).probs);
  if (real.empty()) return 0.0;
  std::vector<std::pair<double, std::size_t>> d(real.size());
  for (std::size_t i = 0; i < real.size(); ++i) d[i] = {(real.x.col(static_cast<Eigen::Index>(i)) - x).squaredNorm(), i};
  k = std::min(k, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<double> f(k);
  for (std::size_t j = 0; j < k; ++j) f[j] = evaluator.predict(real.x.col(static_cast<Eigen::Index>(d[j].second))).mean;
  double mean = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(k);
  double var = 0.0;
  for (double v : f) var += (v - mean) * (v - mean);
  return var / static_cast<double>(k);
}

double s_con(const Evaluator& evaluator, const Eigen::VectorXd& x, std::size_t cls, double y) {
  Prediction p = evaluator.predict(x);
  if (evaluator.task() == TaskKind::classification) {
    return -std::log(std::max(p.probs[static_cast<Eigen::Index>(cls)], evaluator.config().prob_floor));
  }
  return (y - p.mean) * (y - p.mean);
}

DiagnosticScores score_rows(const Evaluator& evaluator, const LabeledMatrix& rows, const LabeledMatrix& real,
                            std::size_t k) {
  DiagnosticScores s;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Eigen::VectorXd x = rows.x.col(static_cast<Eigen::Index>(i));
    s.s_bnd.push_back(s_bnd(evaluator, x, real, k));
    s.s_con.push_back(s_con(evaluator, x, rows.cls[i], rows.y[static_cast<Eigen::Index>(i)]));
  }
  return s;
}

double percentile_rank(double value, std::span<const double> reference) {
  if (reference.empty()) throw Error("percentile_rank: empty reference");
  auto below = std::count_if(reference.begin(), reference.end(), [&](double r) { return r < value; });
  return 100.0 * static_cast<double>(below) / static_cast<double>(reference.size());
}

double tail_mean(std::vector<double> values, double q) {
  if (values.empty()) throw Error("tail_mean: no values");
  if (!(q > 0.0 && q <= 1.0)) throw Error("tail_mean: q must lie in (0, 1]");
  auto take = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size()) - 1e-12));
  take = std::clamp<std::size_t>(take, 1, values.size());
  std::sort(values.begin(), values.end(), std::greater<>());
  return std::accumulate(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(take), 0.0) /
         static_cast<double>(take);
}

double tail_risk(std::span<const double> injected_scon, std::span<const double> real_scon, double q) {
  std::vector<double> pct;
  for (double s : injected_scon) pct.push_back(percentile_rank(s, real_scon));
  return tail_mean(std::move(pct), q);
}

std::vector<std::vector<std::size_t>> learnability_bins(std::span<const double> s_con, std::size_t bins) {
  const std::size_t n = s_con.size();
  if (bins == 0) throw Error("learnability_bins: bins must be >= 1");
  bins = std::min(bins, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s_con[a] < s_con[b]; });
  std::vector<std::vector<std::size_t>> out(bins);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    std::size_t size = n / bins + (b < n % bins ? 1 : 0);
    out[b].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                  order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return out;
}

BucketReport bucketed_injection(std::span<const double> s_con, std::size_t bins,
                                const std::function<double(std::span<const std::size_t>)>& gain) {
  BucketReport r;
  r.bins = learnability_bins(s_con, bins);
  for (const auto& b : r.bins) r.gains.push_back(gain(b));
  return r;
}

std::vector<ParetoBucket> pareto_buckets(std::span<const double> bnd_a, std::span<const double> pct_a,
                                         std::span<const double> bnd_b, std::span<const double> pct_b,
                                         std::size_t buckets) {
  if (bnd_a.size() != pct_a.size() || bnd_b.size() != pct_b.size()) throw Error("pareto_buckets: size mismatch");
  std::vector<double> all(bnd_a.begin(), bnd_a.end());
  all.insert(all.end(), bnd_b.begin(), bnd_b.end());
  if (all.empty() || buckets == 0) return {};
  std::vector<double> edges;
  for (std::size_t i = 1; i < buckets; ++i) {
    edges.push_back(lower_quantile(all, static_cast<double>(i) / static_cast<double>(buckets)));
  }
  auto bucket_of = [&](double v) {
    return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [&](double e) { return e < v; }));
  };
  std::vector<ParetoBucket> out(buckets);
  for (auto& b : out) {
    b.lo = std::numeric_limits<double>::infinity();
    b.hi = -std::numeric_limits<double>::infinity();
  }
  auto add = [&](std::span<const double> bnd, std::span<const double> pct, bool first) {
    for (std::size_t i = 0; i < bnd.size(); ++i) {
      auto& b = out[bucket_of(bnd[i])];
      b.lo = std::min(b.lo, bnd[i]);
      b.hi = std::max(b.hi, bnd[i]);
      if (first) {
        b.mean_a += pct[i];
        ++b.count_a;
      } else {
        b.mean_b += pct[i];
        ++b.count_b;
      }
    }
  };
  add(bnd_a, pct_a, true);
  add(bnd_b, pct_b, false);
  std::vector<ParetoBucket> kept;
  for (auto& b : out) {
    if (b.count_a + b.count_b == 0) continue;
    if (b.count_a) b.mean_a /= static_cast<double>(b.count_a);
    if (b.count_b) b.mean_b /= static_cast<double>(b.count_b);
    kept.push_back(b);
  }
  return kept;
}

namespace {

Eigen::MatrixXd design(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows() + 1, x.cols());
  out << x, Eigen::RowVectorXd::Ones(x.cols());
  return out;
}

Eigen::VectorXd augment(const Eigen::VectorXd& x) {
  Eigen::VectorXd out(x.size() + 1);
  out << x, 1.0;
  return out;
}

Eigen::VectorXd targets_of(const LabeledMatrix& data, Surrogate s) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    y[static_cast<Eigen::Index>(i)] = s == Surrogate::ridge ? data.y[static_cast<Eigen::Index>(i)]
                                                            : static_cast<double>(data.cls[i]);
  }
  return y;
}

double point_loss(const Eigen::VectorXd& theta, const Eigen::VectorXd& xb, double y, Surrogate s) {
  double z = theta.dot(xb);
  if (s == Surrogate::ridge) return 0.5 * (z - y) * (z - y);
  return -(y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z));
}

Eigen::VectorXd point_grad(const Eigen::VectorXd& theta, const Eigen::VectorXd& xb, double y, Surrogate s) {
  double z = theta.dot(xb);
  double r = s == Surrogate::ridge ? z - y : sigmoid(z) - y;
  return r * xb;
}

Eigen::VectorXd fit_design(const Eigen::MatrixXd& xb, const Eigen::VectorXd& y, Surrogate s, double lambda) {
  if (!(lambda > 0.0)) throw Error("influence: lambda must be positive for a non-singular Hessian");
  const auto p = xb.rows();
  const double n = static_cast<double>(xb.cols());
  Eigen::MatrixXd reg = lambda * Eigen::MatrixXd::Identity(p, p);
  if (s == Surrogate::ridge) {
    Eigen::MatrixXd h = xb * xb.transpose() / n + reg;
    return h.ldlt().solve(xb * y / n);
  }
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    double v = y[i];
    if (v != 0.0 && v != 1.0) throw Error("logistic influence supports binary labels only");
  }
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd z = xb.transpose() * theta;
    Eigen::VectorXd pr = z.unaryExpr([](double v) { return sigmoid(v); });
    Eigen::VectorXd g = xb * (pr - y) / n + lambda * theta;
    Eigen::VectorXd w = pr.array() * (1.0 - pr.array());
    Eigen::MatrixXd h = xb * w.asDiagonal() * xb.transpose() / n + reg;
    Eigen::VectorXd step = h.ldlt().solve(g);
    theta -= step;
    if (step.norm() < 1e-13) break;
  }
  return theta;
}

Eigen::MatrixXd hessian(const Eigen::VectorXd& theta, const Eigen::MatrixXd& xb, Surrogate s, double lambda) {
  const auto p = xb.rows();
  const double n = static_cast<double>(xb.cols());
  Eigen::MatrixXd reg = lambda * Eigen::MatrixXd::Identity(p, p);
  if (s == Surrogate::ridge) return xb * xb.transpose() / n + reg;
  Eigen::VectorXd z = xb.transpose() * theta;
  Eigen::VectorXd w = z.unaryExpr([](double v) { double q = sigmoid(v); return q * (1.0 - q); });
  return xb * w.asDiagonal() * xb.transpose() / n + reg;
}

}  // namespace

Eigen::VectorXd fit_surrogate(const LabeledMatrix& data, Surrogate surrogate, double lambda) {
  return fit_design(design(data.x), targets_of(data, surrogate), surrogate, lambda);
}

double surrogate_loss(const Eigen::VectorXd& theta, const LabeledMatrix& data, Surrogate surrogate) {
  if (data.empty()) throw Error("surrogate_loss: no rows");
  Eigen::MatrixXd xb = design(data.x);
  Eigen::VectorXd y = targets_of(data, surrogate);
  double total = 0.0;
  for (Eigen::Index i = 0; i < xb.cols(); ++i) total += point_loss(theta, xb.col(i), y[i], surrogate);
  return total / static_cast<double>(xb.cols());
}

double influence_diagnostic(const LabeledMatrix& data, const Eigen::VectorXd& zx, double zy, Surrogate surrogate,
                            double lambda, const LabeledMatrix& queries) {
  if (data.empty() || queries.empty()) throw Error("influence: empty data or queries");
  Eigen::MatrixXd xb = design(data.x);
  Eigen::VectorXd theta = fit_design(xb, targets_of(data, surrogate), surrogate, lambda);
  Eigen::MatrixXd qb = design(queries.x);
  Eigen::VectorXd qy = targets_of(queries, surrogate);
  Eigen::VectorXd grad_q = Eigen::VectorXd::Zero(theta.size());
  for (Eigen::Index i = 0; i < qb.cols(); ++i) grad_q += point_grad(theta, qb.col(i), qy[i], surrogate);
  grad_q /= static_cast<double>(qb.cols());
  Eigen::VectorXd grad_z = point_grad(theta, augment(zx), zy, surrogate);
  Eigen::VectorXd solved = hessian(theta, xb, surrogate, lambda).ldlt().solve(grad_z);
  return grad_q.dot(solved) / static_cast<double>(data.size());
}

double retrain_utility(const LabeledMatrix& data, const Eigen::VectorXd& zx, double zy, Surrogate surrogate,
                       double lambda, const LabeledMatrix& queries) {
  Eigen::VectorXd before = fit_surrogate(data, surrogate, lambda);
  LabeledMatrix z;
  z.task = data.task;
  z.x = zx;
  z.y = Eigen::VectorXd::Constant(1, surrogate == Surrogate::ridge ? zy : 0.0);
  z.cls = {surrogate == Surrogate::logistic ? static_cast<std::size_t>(zy) : 0};
  Eigen::VectorXd after = fit_surrogate(data.concat(z), surrogate, lambda);
  return surrogate_loss(before, queries, surrogate) - surrogate_loss(after, queries, surrogate);
}

std::vector<EvaluatorConfig> proxy_suite(TaskKind task, std::uint64_t seed) {
  EvaluatorConfig knn;
  knn.kind = EvaluatorKind::knn;
  EvaluatorConfig linear;
  linear.kind = task == TaskKind::classification ? EvaluatorKind::logistic : EvaluatorKind::ridge;
  EvaluatorConfig mlp;
  mlp.kind = EvaluatorKind::tiny_mlp;
  mlp.seed = seed;
  return {knn, linear, mlp};
}

double suite_loss(const LabeledMatrix& train, const LabeledMatrix& val, std::size_t num_classes,
                  std::span<const EvaluatorConfig> suite) {
  if (suite.empty() || val.empty()) throw Error("suite_loss: empty suite or validation set");
  double total = 0.0;
  for (const auto& cfg : suite) {
    Evaluator ev = Evaluator::fit(cfg, train, num_classes, &val);
    auto preds = ev.predict_all(val.x);
    double l = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) l += ev.loss(preds[i], val, i);
    total += l / static_cast<double>(val.size());
  }
  return total / static_cast<double>(suite.size());
}

std::vector<Record> committed_rows(const RunTrace& trace) {
  std::vector<Record> out;
  for (const auto& w : trace.windows) {
    if (w.commit) out.insert(out.end(), w.pool.begin(), w.pool.end());
  }
  return out;
}

std::vector<CalibrationCheck> calibration_checks(const RunTrace& trace, const Encoder& encoder, const Table& train,
                                                 const Table& val, std::span<const EvaluatorConfig> suite) {
  const std::size_t C = num_classes_of(encoder);
  LabeledMatrix real = LabeledMatrix::from_table(encoder, train);
  LabeledMatrix vm = LabeledMatrix::from_table(encoder, val);
  LabeledMatrix buffer = real.subset(std::vector<std::size_t>{});
  std::vector<CalibrationCheck> out;
  for (const auto& w : trace.windows) {
    Table pool_table(train.schema_ptr());
    for (const auto& r : w.pool) pool_table.append(r, Provenance::synthetic);
    LabeledMatrix pm = LabeledMatrix::from_table(encoder, pool_table);
    if (!w.pool.empty()) {
      LabeledMatrix dt = real.concat(buffer);
      CalibrationCheck c;
      c.seed = trace.seed;
      c.window = w.index;
      c.estimate = w.estimate.value;
      c.epsilon = w.estimate.epsilon;
      c.proxy = suite_loss(dt, vm, C, suite) - suite_loss(dt.concat(pm), vm, C, suite);
      c.covered = std::abs(c.estimate - c.proxy) <= c.epsilon;
      out.push_back(c);
    }
    if (w.commit) buffer = buffer.concat(pm);
  }
  return out;
}

CalibrationReport summarize_calibration(std::vector<CalibrationCheck> checks) {
  CalibrationReport r;
  r.checks = std::move(checks);
  if (r.checks.empty()) return r;
  double covered = 0.0;
  for (const auto& c : r.checks) {
    covered += c.covered ? 1.0 : 0.0;
    r.mae += std::abs(c.estimate - c.proxy);
    r.mean_epsilon += c.epsilon;
  }
  const double n = static_cast<double>(r.checks.size());
  r.coverage = covered / n;
  r.mae /= n;
  r.mean_epsilon /= n;
  return r;
}

double worst_drop(const std::map<std::string, double>& results, const std::string& default_key) {
  auto it = results.find(default_key);
  if (it == results.end()) throw Error("worst_drop: default setting '" + default_key + "' missing from the grid");
  double worst = 0.0;
  for (const auto& [key, acc] : results) worst = std::max(worst, it->second - acc);
  return worst;
}

DesirableRates desirable_rate(const RunTrace& trace, const Encoder& encoder, const Table& train,
                              const LabeledMatrix& proxy_queries, const EvaluatorConfig& model, std::size_t window) {
  if (window == 0) throw Error("desirable_rate: window must be >= 1");
  if (proxy_queries.empty()) throw Error("desirable_rate: no proxy queries");
  const std::size_t C = num_classes_of(encoder);
  LabeledMatrix real = LabeledMatrix::from_table(encoder, train);
  Table committed(train.schema_ptr());
  for (const auto& r : committed_rows(trace)) committed.append(r, Provenance::synthetic);
  LabeledMatrix cm = LabeledMatrix::from_table(encoder, committed);

  auto loss_on = [&](const LabeledMatrix& d) {
    Evaluator ev = Evaluator::fit(model, d, C);
    auto preds = ev.predict_all(proxy_queries.x);
    double l = 0.0;
    for (std::size_t i = 0; i < proxy_queries.size(); ++i) l += ev.loss(preds[i], proxy_queries, i);
    return l / static_cast<double>(proxy_queries.size());
  };

  DesirableRates out;
  std::map<std::size_t, double> base_cache;
  std::vector<std::size_t> desirable;
  for (const auto& s : trace.steps) {
    std::size_t w = (s.step - 1) / window;
    if (out.rates.size() <= w) {
      out.rates.resize(w + 1, 0.0);
      out.steps.resize(w + 1, 0);
      out.empty_steps.resize(w + 1, 0);
      desirable.resize(w + 1, 0);
    }
    ++out.steps[w];
    if (s.batch.empty()) {
      ++out.empty_steps[w];
      out.rewards.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    std::vector<std::size_t> idx(s.buffer_size);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    LabeledMatrix dt = real.concat(cm.subset(idx));
    auto it = base_cache.find(s.buffer_size);
    double before = it != base_cache.end() ? it->second : (base_cache[s.buffer_size] = loss_on(dt));
    Table bt(train.schema_ptr());
    for (const auto& r : s.batch) bt.append(r, Provenance::synthetic);
    double reward = before - loss_on(dt.concat(LabeledMatrix::from_table(encoder, bt)));
    out.rewards.push_back(reward);
    if (reward > 0.0) ++desirable[w];
  }
  for (std::size_t w = 0; w < out.rates.size(); ++w) {
    out.rates[w] = out.steps[w] ? static_cast<double>(desirable[w]) / static_cast<double>(out.steps[w]) : 0.0;
  }
  return out;
}

}  // namespace tap

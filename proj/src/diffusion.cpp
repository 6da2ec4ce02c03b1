#include "tap/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

namespace tap {

NoiseSchedule build_schedule(std::size_t num_steps, double beta_min, double beta_max) {
  if (num_steps == 0) throw Error("build_schedule: need at least one step");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw Error("build_schedule: require 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.betas.assign(num_steps + 1, 0.0);
  s.alpha_bar.assign(num_steps + 1, 1.0);
  for (std::size_t i = 1; i <= num_steps; ++i) {
    double frac = num_steps == 1 ? 0.0 : static_cast<double>(i - 1) / static_cast<double>(num_steps - 1);
    s.betas[i] = beta_min + (beta_max - beta_min) * frac;
    s.alpha_bar[i] = s.alpha_bar[i - 1] * (1.0 - s.betas[i]);
  }
  return s;
}

Eigen::MatrixXd Denoiser::build_input(const Eigen::MatrixXd& noisy, std::span<const std::size_t> steps,
                                      std::span<const std::size_t> conditions) const {
  const auto b = noisy.cols();
  const auto w = static_cast<Eigen::Index>(feature_width);
  Eigen::MatrixXd in = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(input_width()), b);
  in.topRows(w) = noisy;
  for (Eigen::Index i = 0; i < b; ++i) {
    double frac = static_cast<double>(steps[static_cast<std::size_t>(i)]) / static_cast<double>(num_steps);
    in(w, i) = frac;
    in(w + 1, i) = std::sin(std::numbers::pi * frac);
    in(w + 2, i) = std::cos(std::numbers::pi * frac);
    in(w + 3 + static_cast<Eigen::Index>(conditions[static_cast<std::size_t>(i)]), i) = 1.0;
  }
  return in;
}

Eigen::MatrixXd Denoiser::predict_noise(const Eigen::MatrixXd& noisy, std::size_t step,
                                        std::span<const std::size_t> conditions) const {
  std::vector<std::size_t> steps(static_cast<std::size_t>(noisy.cols()), step);
  return net.forward(build_input(noisy, steps, conditions));
}

nlohmann::json Denoiser::to_json() const {
  return {{"format", "tap-denoiser"},
          {"version", 1},
          {"feature_width", feature_width},
          {"num_conditions", num_conditions},
          {"num_steps", num_steps},
          {"net", net.to_json()}};
}

Denoiser Denoiser::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "tap-denoiser") throw Error("not a denoiser checkpoint");
  Denoiser d;
  d.feature_width = j.at("feature_width").get<std::size_t>();
  d.num_conditions = j.at("num_conditions").get<std::size_t>();
  d.num_steps = j.at("num_steps").get<std::size_t>();
  d.net = DenseNet::from_json(j.at("net"));
  if (d.net.input_size() != d.input_width() || d.net.output_size() != d.feature_width) {
    throw Error("denoiser checkpoint shape mismatch");
  }
  return d;
}

Denoiser make_denoiser(const Encoder& encoder, const DiffusionConfig& config, Rng& rng) {
  Denoiser d;
  d.feature_width = encoder.feature_width();
  d.num_conditions = encoder.num_conditions();
  d.num_steps = config.num_steps;
  std::vector<std::size_t> sizes{d.input_width()};
  for (std::size_t l = 0; l < config.hidden_layers; ++l) sizes.push_back(config.hidden_width);
  sizes.push_back(d.feature_width);
  d.net = DenseNet(sizes, Activation::relu, rng);
  return d;
}

Denoiser train_denoiser(const Table& train, const Encoder& encoder, const NoiseSchedule& schedule,
                        const DiffusionConfig& config, Rng& rng) {
  if (train.empty()) throw Error("train_denoiser: empty training table");
  if (schedule.num_steps != config.num_steps) throw Error("train_denoiser: schedule/config step mismatch");
  Rng init = rng.split(0);
  Denoiser d = make_denoiser(encoder, config, init);
  Eigen::MatrixXd data = encoder.feature_matrix(train);
  std::vector<std::size_t> conds = encoder.conditions(train);
  AdamW opt(d.net, AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8, 1e-4});
  const auto w = static_cast<Eigen::Index>(d.feature_width);
  const std::size_t b = config.batch_size;
  Rng stream = rng.split(1);
  Eigen::MatrixXd x(w, static_cast<Eigen::Index>(b));
  Eigen::MatrixXd eps(w, static_cast<Eigen::Index>(b));
  std::vector<std::size_t> steps(b), batch_conds(b);
  for (std::size_t it = 0; it < config.train_steps; ++it) {
    // Cosine decay to a tenth of the base rate.
    double progress = static_cast<double>(it) / static_cast<double>(config.train_steps);
    opt.set_learning_rate(config.learning_rate * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress))));
    for (std::size_t i = 0; i < b; ++i) {
      auto col = static_cast<Eigen::Index>(i);
      std::size_t row = stream.uniform_index(train.size());
      std::size_t s = 1 + stream.uniform_index(schedule.num_steps);
      steps[i] = s;
      batch_conds[i] = conds[row];
      double ab = schedule.alpha_bar[s];
      for (Eigen::Index j = 0; j < w; ++j) eps(j, col) = stream.normal();
      x.col(col) = std::sqrt(ab) * data.col(static_cast<Eigen::Index>(row)) + std::sqrt(1.0 - ab) * eps.col(col);
    }
    ForwardCache cache;
    Eigen::MatrixXd pred = d.net.forward(d.build_input(x, steps, batch_conds), &cache);
    Eigen::MatrixXd diff = pred - eps;
    double denom = static_cast<double>(b) * static_cast<double>(w);
    d.loss_log.push_back(diff.squaredNorm() / denom);
    NetGrads g = d.net.backward(cache, 2.0 * diff / denom);
    opt.step(d.net, g);
  }
  return d;
}

std::string to_string(MaskTemplate t) { return t == MaskTemplate::explore ? "explore" : "conservative"; }

std::vector<bool> coordinate_mask(const Encoder& encoder, const Mask& mask) {
  std::vector<bool> out(encoder.feature_width(), false);
  for (const auto& sl : encoder.layout()) {
    bool regen = mask.regenerate.at(sl.column);
    for (std::size_t j = 0; j < sl.width; ++j) out[sl.offset + j] = regen;
  }
  return out;
}

Eigen::MatrixXd inpaint_features(const Eigen::MatrixXd& anchors, const std::vector<std::vector<bool>>& regenerate,
                                 std::span<const std::size_t> conditions, const Denoiser& denoiser,
                                 const NoiseSchedule& schedule, const DiffusionConfig& config,
                                 std::span<Rng> rngs) {
  const auto w = anchors.rows();
  const auto b = anchors.cols();
  const std::size_t big_s = schedule.num_steps;
  if (static_cast<std::size_t>(w) != denoiser.feature_width) throw Error("inpaint: anchor width mismatch");
  if (denoiser.num_steps != big_s) throw Error("inpaint: denoiser/schedule step mismatch");

  auto overwrite = [&](Eigen::MatrixXd& x, double ab) {
    const double keep = std::sqrt(ab);
    const double noise = std::sqrt(1.0 - ab);
    for (Eigen::Index i = 0; i < b; ++i) {
      auto& rng = rngs[static_cast<std::size_t>(i)];
      const auto& regen = regenerate[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < w; ++j) {
        double e = rng.normal();
        if (regen[static_cast<std::size_t>(j)]) continue;
        x(j, i) = ab == 1.0 ? anchors(j, i) : keep * anchors(j, i) + noise * e;
      }
    }
  };

  Eigen::MatrixXd x(w, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) x(j, i) = rngs[static_cast<std::size_t>(i)].normal();
  }
  overwrite(x, schedule.alpha_bar[big_s]);

  for (std::size_t s = big_s; s >= 1; --s) {
    const double ab = schedule.alpha_bar[s];
    const double ab_prev = schedule.alpha_bar[s - 1];
    const double beta = schedule.betas[s];
    Eigen::MatrixXd eps_hat = denoiser.predict_noise(x, s, conditions);
    Eigen::MatrixXd x0 = ((x - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab))
                             .cwiseMax(-config.x0_clip)
                             .cwiseMin(config.x0_clip);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    Eigen::MatrixXd next = c0 * x0 + ct * x;
    const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
    for (Eigen::Index i = 0; i < b; ++i) {
      auto& rng = rngs[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < w; ++j) {
        double z = rng.normal();
        if (s > 1) next(j, i) += std::sqrt(var) * z;
      }
    }
    overwrite(next, ab_prev);
    x = std::move(next);
  }
  return x;
}

EncodedVector inpaint(const EncodedVector& anchor, const Mask& mask, TargetCondition condition,
                      const Encoder& encoder, const Denoiser& denoiser, const NoiseSchedule& schedule,
                      const DiffusionConfig& config, Rng& rng) {
  const auto w = static_cast<Eigen::Index>(encoder.feature_width());
  Eigen::MatrixXd a = anchor.values.head(w);
  std::vector<std::vector<bool>> regen{coordinate_mask(encoder, mask)};
  std::size_t cond = condition.index;
  std::vector<Rng> rngs{rng.split(rng.next_u64())};
  Eigen::MatrixXd out = inpaint_features(a, regen, std::span<const std::size_t>(&cond, 1), denoiser, schedule,
                                         config, rngs);
  EncodedVector result = anchor;
  result.values.head(w) = out.col(0);
  return result;
}

namespace {

// Equal-frequency discretization into at most `bins` bins.
std::vector<std::size_t> discretize(const std::vector<double>& values, std::size_t bins) {
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  const std::size_t n = sorted.size();
  for (std::size_t i = 1; i < bins; ++i) {
    std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(static_cast<double>(i) * n / bins)), 1, n);
    double c = sorted[k - 1];
    if (c < sorted.back() && (cuts.empty() || c > cuts.back())) cuts.push_back(c);
  }
  std::vector<std::size_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), values[i] - 0.0) - cuts.begin());
    // upper_bound puts values equal to a cut above it; shift to keep ties low.
    if (out[i] > 0 && values[i] == cuts[out[i] - 1]) --out[i];
  }
  return out;
}

double plugin_mi(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> pa, pb;
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0 / n;
    pa[a[i]] += 1.0 / n;
    pb[b[i]] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [key, p] : joint) mi += p * std::log(p / (pa[key.first] * pb[key.second]));
  return std::max(mi, 0.0);
}

}  // namespace

std::vector<double> mutual_information_scores(const Table& train, const Encoder& encoder, Rng& rng,
                                              std::size_t bootstraps) {
  if (train.empty()) throw Error("important_columns: empty table");
  const Schema& schema = train.schema();
  auto features = schema.feature_indices();
  std::vector<double> scores(schema.columns.size(), 0.0);
  auto conds = encoder.conditions(train);
  const std::size_t n = train.size();
  const std::size_t reps = std::max<std::size_t>(bootstraps, 1);
  for (std::size_t rep = 0; rep < reps; ++rep) {
    std::vector<std::size_t> idx(n);
    if (bootstraps == 0) std::iota(idx.begin(), idx.end(), std::size_t{0});
    else for (auto& v : idx) v = rng.uniform_index(n);
    std::vector<std::size_t> target(n);
    for (std::size_t i = 0; i < n; ++i) target[i] = conds[idx[i]];
    for (std::size_t c : features) {
      std::vector<std::size_t> disc(n);
      if (schema.columns[c].is_numeric()) {
        std::vector<double> vals(n);
        for (std::size_t i = 0; i < n; ++i) vals[i] = as_number(train.row(idx[i])[c]);
        disc = discretize(vals, 5);
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          auto t = schema.columns[c].token_index(as_token(train.row(idx[i])[c]));
          disc[i] = t ? *t : schema.columns[c].vocabulary.size();
        }
      }
      scores[c] += plugin_mi(disc, target) / static_cast<double>(reps);
    }
  }
  return scores;
}

std::vector<std::size_t> important_columns(const Table& train, const Encoder& encoder, Rng& rng, std::size_t k,
                                           std::size_t bootstraps) {
  if (k == 0) return {};
  auto scores = mutual_information_scores(train, encoder, rng, bootstraps);
  auto features = train.schema().feature_indices();
  std::stable_sort(features.begin(), features.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (features.size() > k) features.resize(k);
  std::sort(features.begin(), features.end());
  return features;
}

Mask sample_mask(MaskTemplate tmpl, double rho, const Schema& schema, std::span<const std::size_t> important,
                 Rng& rng) {
  rho = std::clamp(rho, 0.0, 1.0);
  Mask m;
  m.tmpl = tmpl;
  m.rho = rho;
  m.regenerate.assign(schema.columns.size(), false);
  for (std::size_t c : schema.feature_indices()) {
    bool regen = true;
    if (tmpl == MaskTemplate::conservative &&
        std::find(important.begin(), important.end(), c) != important.end()) {
      regen = false;
    }
    // Draw for every numeric column so the stream layout is mask-independent.
    if (schema.columns[c].is_numeric()) {
      bool keep = rng.uniform() < rho;
      if (regen && !keep) regen = false;
    }
    m.regenerate[c] = regen;
  }
  return m;
}

std::vector<double> anchor_hardness(const Evaluator& evaluator, const LabeledMatrix& data) {
  auto preds = evaluator.predict_all(data.x);
  std::vector<double> h(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) h[i] = evaluator.uncertainty(preds[i], data, i);
  return h;
}

std::size_t select_anchor(std::span<const std::size_t> row_conditions, std::size_t condition,
                          std::span<const double> hardness, double hard_mix, Rng& rng) {
  if (row_conditions.empty()) throw Error("select_anchor: empty dataset");
  // Nearest condition (by index distance, ties low) that has rows.
  std::size_t target = row_conditions.front();
  std::size_t best_dist = SIZE_MAX;
  for (std::size_t c : row_conditions) {
    std::size_t dist = c > condition ? c - condition : condition - c;
    if (dist < best_dist || (dist == best_dist && c < target)) {
      best_dist = dist;
      target = c;
    }
  }
  std::vector<std::size_t> slice;
  for (std::size_t i = 0; i < row_conditions.size(); ++i) {
    if (row_conditions[i] == target) slice.push_back(i);
  }
  bool hard = rng.uniform() < hard_mix;
  std::size_t pick;
  if (hard) {
    std::vector<double> w(slice.size());
    for (std::size_t i = 0; i < slice.size(); ++i) w[i] = hardness.empty() ? 0.0 : hardness[slice[i]];
    pick = rng.categorical(w);
  } else {
    pick = rng.uniform_index(slice.size());
  }
  return slice[pick];
}

Record decode_candidate(const Encoder& encoder, const Eigen::Ref<const Eigen::VectorXd>& features,
                        const Record& anchor, const Mask& mask, std::size_t condition) {
  const Schema& schema = encoder.schema();
  Record rec = anchor;
  encoder.decode_features(features, rec);
  for (std::size_t c : schema.feature_indices()) {
    if (!mask.regenerate[c]) rec[c] = anchor[c];
  }
  if (encoder.targets().task == TaskKind::classification) {
    rec[schema.label] = encoder.targets().classes.at(condition);
  } else {
    rec[schema.label] = anchor[schema.label];
  }
  return rec;
}

std::vector<Proposal> propose_batch(const ProposalContext& ctx, const Action& action, std::size_t n, Rng& rng) {
  if (n == 0) throw Error("propose_batch: n must be >= 1");
  const Encoder& enc = *ctx.encoder;
  std::vector<Rng> draw_rngs;
  std::vector<Proposal> out(n);
  Eigen::MatrixXd anchors(static_cast<Eigen::Index>(enc.feature_width()), static_cast<Eigen::Index>(n));
  std::vector<std::vector<bool>> regen(n);
  std::vector<std::size_t> conds(n, action.condition);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.split(i);
    out[i].anchor = select_anchor(ctx.row_conditions, action.condition, ctx.hardness, ctx.config->hard_mix, r);
    out[i].mask = sample_mask(action.tmpl, action.rho, enc.schema(), ctx.important, r);
    anchors.col(static_cast<Eigen::Index>(i)) = ctx.encoded.col(static_cast<Eigen::Index>(out[i].anchor));
    regen[i] = coordinate_mask(enc, out[i].mask);
    draw_rngs.push_back(r.split(0xD1FF));
  }
  rng.next_u64();
  Eigen::MatrixXd gen = inpaint_features(anchors, regen, conds, *ctx.denoiser, *ctx.schedule, *ctx.config, draw_rngs);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].record = decode_candidate(enc, gen.col(static_cast<Eigen::Index>(i)), ctx.data->row(out[i].anchor),
                                     out[i].mask, action.condition);
  }
  return out;
}

ProposalContext make_proposal_context(const Table& data, const Encoder& encoder, const Denoiser& denoiser,
                                      const NoiseSchedule& schedule, const DiffusionConfig& config,
                                      const Evaluator& evaluator, std::vector<std::size_t> important) {
  ProposalContext ctx;
  ctx.data = &data;
  ctx.encoder = &encoder;
  ctx.denoiser = &denoiser;
  ctx.schedule = &schedule;
  ctx.config = &config;
  ctx.row_conditions = encoder.conditions(data);
  LabeledMatrix m = LabeledMatrix::from_table(encoder, data);
  ctx.hardness = anchor_hardness(evaluator, m);
  ctx.important = std::move(important);
  ctx.encoded = std::move(m.x);
  return ctx;
}

}  // namespace tap

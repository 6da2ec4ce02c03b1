#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tap/controller.hpp"
#include "tap/diagnostics.hpp"
#include "tap/diffusion.hpp"
#include "tap/table.hpp"

namespace tap {

/// Invalid run specification; `field` is the dotted path of the offending key.
struct ConfigError : Error {
  ConfigError(std::string field_path, const std::string& message)
      : Error(field_path + ": " + message), field(std::move(field_path)) {}
  std::string field;
};

struct DatasetSpec {
  std::string builtin;  // generator name, or empty when csv is set
  nlohmann::json params = nlohmann::json::object();
  std::string csv;
  std::string schema;  // path to the JSON schema declaration
};

struct RunSpec {
  DatasetSpec dataset;
  std::size_t n_real = 50;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  Mechanism mechanism = Mechanism::tap;
  std::size_t n_syn = 500;
  std::string output = "tap_out";
  double clip_lo = 0.01;
  double clip_hi = 0.99;
  std::size_t target_bins = 7;
  DiffusionConfig diffusion;
  RunConfig tap;
  double hard_rho = 0.3;
  double hard_fraction = 0.2;
  std::size_t smote_k = 5;
  EvaluatorConfig downstream;  // shared knobs of the downstream suite
  std::vector<Mechanism> ladder{Mechanism::global, Mechanism::random_inpaint, Mechanism::hard_inpaint, Mechanism::tap};
  std::vector<std::size_t> sensitivity_window{1, 5, 10, 20, 50};
  std::vector<double> sensitivity_tau{0.0, 0.02, 0.05, 0.1, 0.2};
  std::size_t threads = 1;
  bool deterministic = false;

  nlohmann::json to_json() const;
};

/// Parses and validates a spec; unknown keys anywhere raise ConfigError.
RunSpec parse_run_spec(const nlohmann::json& j);
RunSpec load_run_spec(const std::filesystem::path& path);
std::uint64_t fnv1a(std::string_view text);
std::uint64_t config_hash(const RunSpec& spec);

/// Bundled generators: two-gauss-2class, ring-4class, piecewise-regression,
/// adversarial-tail. Deterministic in (name, params, seed).
Table builtin_dataset(const std::string& name, const nlohmann::json& params, std::uint64_t seed);
std::vector<std::string> builtin_names();
/// Rows whose label the adversarial-tail generator flipped.
std::vector<std::size_t> flipped_rows(const nlohmann::json& params, std::uint64_t seed);
Table load_dataset(const DatasetSpec& spec);

struct PredictorMetrics {
  std::string predictor;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
};

struct MetricsReport {
  TaskKind task = TaskKind::classification;
  std::vector<PredictorMetrics> predictors;
  /// Mean accuracy over the suite, or minus mean RMSE for regression.
  double utility() const;
};

double accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred);
/// Mean F1 over classes that occur in the truth or the predictions.
double macro_f1(std::span<const std::size_t> truth, std::span<const std::size_t> pred, std::size_t num_classes);
double rmse(std::span<const double> truth, std::span<const double> pred);
double mae(std::span<const double> truth, std::span<const double> pred);

/// Trains the downstream suite on `train` (val for early stopping) and scores
/// it on `test`.
MetricsReport downstream_metrics(const Table& train, const Table& val, const Table& test, const Encoder& encoder,
                                 const EvaluatorConfig& base, std::uint64_t seed);

/// Split, encoder and trained backbone for one seed.
struct SeedContext {
  std::uint64_t seed = 0;
  Splits splits;
  std::shared_ptr<const Schema> schema;
  Encoder encoder;
  NoiseSchedule schedule;
  Denoiser denoiser;
  std::vector<std::size_t> important;
  DiffusionConfig diffusion;

  MechanismContext mechanism_context(const RunSpec& spec) const;
};

SeedContext prepare_seed(const RunSpec& spec, const Table& dataset, std::uint64_t seed);

struct MechanismResult {
  Mechanism mechanism = Mechanism::none;
  std::uint64_t seed = 0;
  std::size_t injected = 0;
  MetricsReport metrics;
  double gain = 0.0;  // utility(augmented) - utility(real only)
  double tail_risk = std::numeric_limits<double>::quiet_NaN();
  MechanismOutput output;
};

/// Runs one mechanism on a prepared seed and scores it against real-only.
MechanismResult evaluate_mechanism(const RunSpec& spec, const SeedContext& seed, Mechanism m, const RunConfig& tap,
                                   const MetricsReport& real_only);

/// Tail risk of injected rows under the plug-in evaluator fitted on the real
/// training rows.
double injected_tail_risk(const SeedContext& seed, const RunSpec& spec, const Table& injected);

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

enum class ExitCode { ok = 0, compute_failure = 1, config_error = 2 };

struct CommandOptions {
  std::string command;
  std::optional<std::filesystem::path> config;
  std::vector<std::uint64_t> seeds;
  std::optional<std::string> out;
  std::optional<std::string> mechanism;
  std::optional<std::size_t> threads;
  bool deterministic = false;
};

/// Loads the spec, applies flag overrides, runs the command and writes the
/// manifest. Errors are reported on stderr and mapped to exit codes.
int run_command(const CommandOptions& options);

std::vector<std::string> command_names();

}  // namespace tap

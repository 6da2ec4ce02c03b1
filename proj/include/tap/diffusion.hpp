#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tap/evaluator.hpp"
#include "tap/numerics.hpp"
#include "tap/rng.hpp"
#include "tap/table.hpp"

namespace tap {

struct NoiseSchedule {
  std::size_t num_steps = 0;
  std::vector<double> betas;      // betas[s] for s = 1..S; betas[0] unused (0)
  std::vector<double> alpha_bar;  // alpha_bar[0] = 1

  double alpha(std::size_t s) const { return 1.0 - betas[s]; }
};

/// Linear betas from beta_min to beta_max over S steps.
NoiseSchedule build_schedule(std::size_t num_steps, double beta_min, double beta_max);

struct DiffusionConfig {
  std::size_t num_steps = 100;
  double beta_min = 1e-3;
  double beta_max = 0.12;
  std::size_t hidden_width = 128;
  std::size_t hidden_layers = 2;
  std::size_t train_steps = 1500;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double hard_mix = 0.5;
  std::size_t important_k = 0;  // 0 selects ceil(d / 3)
  std::size_t bootstraps = 10;
  double x0_clip = 6.0;
};

/// Epsilon-prediction network over (noisy features, timestep embedding,
/// condition one-hot).
struct Denoiser {
  DenseNet net;
  std::size_t feature_width = 0;
  std::size_t num_conditions = 0;
  std::size_t num_steps = 0;
  std::vector<double> loss_log;

  std::size_t input_width() const { return feature_width + 3 + num_conditions; }
  /// Columns of `noisy` are samples; conditions has one entry per column.
  Eigen::MatrixXd predict_noise(const Eigen::MatrixXd& noisy, std::size_t step,
                                std::span<const std::size_t> conditions) const;
  Eigen::MatrixXd build_input(const Eigen::MatrixXd& noisy, std::span<const std::size_t> steps,
                              std::span<const std::size_t> conditions) const;

  nlohmann::json to_json() const;
  static Denoiser from_json(const nlohmann::json& j);
};

/// Untrained denoiser sized for the encoder.
Denoiser make_denoiser(const Encoder& encoder, const DiffusionConfig& config, Rng& rng);

/// Fits the epsilon-prediction objective on the real rows of `train`.
Denoiser train_denoiser(const Table& train, const Encoder& encoder, const NoiseSchedule& schedule,
                        const DiffusionConfig& config, Rng& rng);

enum class MaskTemplate { explore, conservative };
std::string to_string(MaskTemplate t);

/// Regeneration mask over schema columns (true = regenerate). The label is
/// never regenerated.
struct Mask {
  std::vector<bool> regenerate;
  MaskTemplate tmpl = MaskTemplate::explore;
  double rho = 1.0;
};

struct Action {
  std::size_t condition = 0;
  MaskTemplate tmpl = MaskTemplate::explore;
  double rho = 1.0;      // clamped to [0, 1]
  double rho_raw = 1.0;  // pre-clamp Gaussian draw
};

/// Per-coordinate regeneration flags in the encoded feature block.
std::vector<bool> coordinate_mask(const Encoder& encoder, const Mask& mask);

/// Reverse chain with the fixed coordinates overwritten by the forward-noised
/// anchor after every step; at the last step alpha_bar_0 = 1, so fixed
/// coordinates come back equal to the anchor.
EncodedVector inpaint(const EncodedVector& anchor, const Mask& mask, TargetCondition condition,
                      const Encoder& encoder, const Denoiser& denoiser, const NoiseSchedule& schedule,
                      const DiffusionConfig& config, Rng& rng);

/// Batched core: anchors are feature columns, regenerate[i][j] flags
/// coordinate j of sample i, and sample i draws from rngs[i].
Eigen::MatrixXd inpaint_features(const Eigen::MatrixXd& anchors, const std::vector<std::vector<bool>>& regenerate,
                                 std::span<const std::size_t> conditions, const Denoiser& denoiser,
                                 const NoiseSchedule& schedule, const DiffusionConfig& config,
                                 std::span<Rng> rngs);

/// Mutual information of each feature with the target condition, averaged
/// over bootstrap resamples; top-k column indices, ties by column order.
std::vector<std::size_t> important_columns(const Table& train, const Encoder& encoder, Rng& rng, std::size_t k,
                                           std::size_t bootstraps);
std::vector<double> mutual_information_scores(const Table& train, const Encoder& encoder, Rng& rng,
                                              std::size_t bootstraps);

Mask sample_mask(MaskTemplate tmpl, double rho, const Schema& schema, std::span<const std::size_t> important,
                 Rng& rng);

/// Hardness per row of `data` under the evaluator: entropy or |residual|.
std::vector<double> anchor_hardness(const Evaluator& evaluator, const LabeledMatrix& data);

/// Row index of D_t restricted to condition c (nearest non-empty condition
/// when c has no rows). With probability hard_mix the draw is proportional
/// to hardness, otherwise uniform.
std::size_t select_anchor(std::span<const std::size_t> row_conditions, std::size_t condition,
                          std::span<const double> hardness, double hard_mix, Rng& rng);

/// Shared inputs for proposal generation within a window.
struct ProposalContext {
  const Table* data = nullptr;  // D_t
  const Encoder* encoder = nullptr;
  const Denoiser* denoiser = nullptr;
  const NoiseSchedule* schedule = nullptr;
  const DiffusionConfig* config = nullptr;
  std::vector<std::size_t> row_conditions;
  std::vector<double> hardness;
  std::vector<std::size_t> important;
  Eigen::MatrixXd encoded;  // features of D_t
};

struct Proposal {
  Record record;
  std::size_t anchor = 0;
  Mask mask;
};

/// n independent draws: anchor, mask, inpaint, decode. Draw i uses
/// rng.split(i).
std::vector<Proposal> propose_batch(const ProposalContext& ctx, const Action& action, std::size_t n, Rng& rng);

/// Decodes inpainted features; columns the mask kept fixed are copied from
/// the anchor record, and the label comes from the condition (classification)
/// or the anchor (regression).
Record decode_candidate(const Encoder& encoder, const Eigen::Ref<const Eigen::VectorXd>& features,
                        const Record& anchor, const Mask& mask, std::size_t condition);

}  // namespace tap

namespace tap {

/// Proposal inputs for the dataset D_t, with hardness from `evaluator`.
ProposalContext make_proposal_context(const Table& data, const Encoder& encoder, const Denoiser& denoiser,
                                      const NoiseSchedule& schedule, const DiffusionConfig& config,
                                      const Evaluator& evaluator, std::vector<std::size_t> important);

}  // namespace tap

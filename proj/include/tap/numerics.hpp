#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "tap/rng.hpp"

namespace tap {

enum class Activation { relu, tanh };

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
};

/// Activations recorded by a forward pass, needed for backpropagation.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> inputs;       // input to each layer
  std::vector<Eigen::MatrixXd> preactivations;
  std::uint64_t version = 0;
};

struct NetGrads {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;

  double squared_norm() const;
  void scale(double factor);
  void add(const NetGrads& other);
};

/// Fully connected network; hidden layers use `activation`, the output layer
/// is linear. Batched calls take samples as columns.
class DenseNet {
 public:
  DenseNet() = default;
  DenseNet(std::vector<std::size_t> layer_sizes, Activation activation, Rng& rng);

  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  Activation activation() const { return activation_; }
  std::size_t num_parameters() const;

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, ForwardCache* cache = nullptr) const;

  /// Reverse-mode gradients of a loss whose gradient w.r.t. the outputs is
  /// `output_grad` (same shape as the forward output). Throws if the cache
  /// predates the latest parameter change.
  NetGrads backward(const ForwardCache& cache, const Eigen::MatrixXd& output_grad) const;
  /// Gradient w.r.t. the network input.
  Eigen::MatrixXd input_gradient(const ForwardCache& cache, const Eigen::MatrixXd& output_grad) const;

  const std::vector<DenseLayer>& layers() const { return layers_; }
  /// Mutable access bumps the parameter version, invalidating caches.
  std::vector<DenseLayer>& mutable_layers() {
    ++version_;
    return layers_;
  }
  NetGrads zero_grads() const;
  bool all_finite() const;

  nlohmann::json to_json() const;
  static DenseNet from_json(const nlohmann::json& j);

 private:
  std::vector<std::size_t> sizes_;
  Activation activation_ = Activation::relu;
  std::vector<DenseLayer> layers_;
  std::uint64_t version_ = 1;

  NetGrads backward_impl(const ForwardCache& cache, const Eigen::MatrixXd& output_grad,
                         Eigen::MatrixXd* input_grad) const;
};

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const DenseNet& net, AdamConfig config);

  void step(DenseNet& net, const NetGrads& grads);
  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  AdamConfig config_;
  NetGrads m_;
  NetGrads v_;
  std::uint64_t step_ = 0;
};

/// Rescales so the global L2 norm is at most max_norm; returns the norm
/// before clipping.
double clip_global_norm(NetGrads& grads, double max_norm);

double gaussian_logpdf(double x, double mean, double std);

double sigmoid(double x);
/// log(sigmoid(x)) without overflow.
double log_sigmoid(double x);
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits);

}  // namespace tap

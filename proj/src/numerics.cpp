#include "tap/numerics.hpp"

#include <cmath>
#include <numbers>

#include "tap/table.hpp"

namespace tap {

double NetGrads::squared_norm() const {
  double s = 0.0;
  for (const auto& w : weight) s += w.squaredNorm();
  for (const auto& b : bias) s += b.squaredNorm();
  return s;
}

void NetGrads::scale(double factor) {
  for (auto& w : weight) w *= factor;
  for (auto& b : bias) b *= factor;
}

void NetGrads::add(const NetGrads& other) {
  for (std::size_t l = 0; l < weight.size(); ++l) {
    weight[l] += other.weight[l];
    bias[l] += other.bias[l];
  }
}

DenseNet::DenseNet(std::vector<std::size_t> layer_sizes, Activation activation, Rng& rng)
    : sizes_(std::move(layer_sizes)), activation_(activation) {
  if (sizes_.size() < 2) throw Error("DenseNet needs at least input and output sizes");
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    auto in = static_cast<Eigen::Index>(sizes_[l]);
    auto out = static_cast<Eigen::Index>(sizes_[l + 1]);
    DenseLayer layer;
    layer.weight.resize(out, in);
    // He init for relu, Glorot for tanh.
    double scale = activation_ == Activation::relu ? std::sqrt(2.0 / static_cast<double>(in))
                                                   : std::sqrt(1.0 / static_cast<double>(in));
    for (Eigen::Index i = 0; i < out; ++i) {
      for (Eigen::Index j = 0; j < in; ++j) layer.weight(i, j) = rng.normal() * scale;
    }
    layer.bias = Eigen::VectorXd::Zero(out);
    layers_.push_back(std::move(layer));
  }
}

std::size_t DenseNet::num_parameters() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Eigen::VectorXd DenseNet::forward(const Eigen::VectorXd& x) const {
  Eigen::MatrixXd m = x;
  return forward(m).col(0);
}

Eigen::MatrixXd DenseNet::forward(const Eigen::MatrixXd& x, ForwardCache* cache) const {
  if (static_cast<std::size_t>(x.rows()) != input_size()) {
    throw Error("DenseNet::forward: input has " + std::to_string(x.rows()) + " rows, expected " +
                std::to_string(input_size()));
  }
  if (cache) {
    cache->inputs.clear();
    cache->preactivations.clear();
    cache->version = version_;
  }
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    Eigen::MatrixXd z = layer.weight * h;
    z.colwise() += layer.bias;
    if (cache) {
      cache->inputs.push_back(h);
      cache->preactivations.push_back(z);
    }
    if (l + 1 == layers_.size()) {
      h = std::move(z);
    } else if (activation_ == Activation::relu) {
      h = z.cwiseMax(0.0);
    } else {
      h = z.array().tanh().matrix();
    }
  }
  return h;
}

NetGrads DenseNet::zero_grads() const {
  NetGrads g;
  for (const auto& l : layers_) {
    g.weight.push_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Eigen::VectorXd::Zero(l.bias.size()));
  }
  return g;
}

NetGrads DenseNet::backward_impl(const ForwardCache& cache, const Eigen::MatrixXd& output_grad,
                                 Eigen::MatrixXd* input_grad) const {
  if (cache.version != version_ || cache.inputs.size() != layers_.size()) {
    throw Error("DenseNet::backward: stale or mismatched forward cache");
  }
  if (output_grad.rows() != static_cast<Eigen::Index>(output_size()) ||
      output_grad.cols() != cache.inputs.back().cols()) {
    throw Error("DenseNet::backward: output gradient shape mismatch");
  }
  NetGrads g = zero_grads();
  Eigen::MatrixXd delta = output_grad;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    g.weight[l] = delta * cache.inputs[l].transpose();
    g.bias[l] = delta.rowwise().sum();
    if (l == 0 && !input_grad) break;
    Eigen::MatrixXd upstream = layers_[l].weight.transpose() * delta;
    if (l == 0) {
      *input_grad = std::move(upstream);
      break;
    }
    const auto& z = cache.preactivations[l - 1];
    if (activation_ == Activation::relu) {
      delta = upstream.array() * (z.array() > 0.0).cast<double>();
    } else {
      delta = upstream.array() * (1.0 - z.array().tanh().square());
    }
  }
  return g;
}

NetGrads DenseNet::backward(const ForwardCache& cache, const Eigen::MatrixXd& output_grad) const {
  return backward_impl(cache, output_grad, nullptr);
}

Eigen::MatrixXd DenseNet::input_gradient(const ForwardCache& cache, const Eigen::MatrixXd& output_grad) const {
  Eigen::MatrixXd in_grad;
  backward_impl(cache, output_grad, &in_grad);
  return in_grad;
}

bool DenseNet::all_finite() const {
  for (const auto& l : layers_) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

nlohmann::json DenseNet::to_json() const {
  nlohmann::json j;
  j["format"] = "tap-densenet";
  j["version"] = 1;
  j["layer_sizes"] = sizes_;
  j["activation"] = activation_ == Activation::relu ? "relu" : "tanh";
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
      for (Eigen::Index k = 0; k < l.weight.cols(); ++k) w.push_back(l.weight(i, k));
    }
    std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back({{"weight", w}, {"bias", b}});
  }
  j["layers"] = std::move(layers);
  return j;
}

DenseNet DenseNet::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "tap-densenet" || j.value("version", 0) != 1) {
    throw Error("unsupported network checkpoint");
  }
  DenseNet net;
  net.sizes_ = j.at("layer_sizes").get<std::vector<std::size_t>>();
  net.activation_ = j.at("activation").get<std::string>() == "relu" ? Activation::relu : Activation::tanh;
  const auto& layers = j.at("layers");
  if (layers.size() + 1 != net.sizes_.size()) throw Error("checkpoint layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto in = static_cast<Eigen::Index>(net.sizes_[l]);
    auto out = static_cast<Eigen::Index>(net.sizes_[l + 1]);
    auto w = layers[l].at("weight").get<std::vector<double>>();
    auto b = layers[l].at("bias").get<std::vector<double>>();
    if (w.size() != static_cast<std::size_t>(in * out) || b.size() != static_cast<std::size_t>(out)) {
      throw Error("checkpoint layer shape mismatch");
    }
    DenseLayer layer;
    layer.weight.resize(out, in);
    for (Eigen::Index i = 0; i < out; ++i) {
      for (Eigen::Index k = 0; k < in; ++k) layer.weight(i, k) = w[static_cast<std::size_t>(i * in + k)];
    }
    layer.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), out);
    net.layers_.push_back(std::move(layer));
  }
  return net;
}

AdamW::AdamW(const DenseNet& net, AdamConfig config)
    : config_(config), m_(net.zero_grads()), v_(net.zero_grads()) {}

void AdamW::step(DenseNet& net, const NetGrads& grads) {
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = config_.learning_rate;
  auto& layers = net.mutable_layers();
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    param *= (1.0 - lr * config_.weight_decay);
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps);
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    update(layers[l].weight, m_.weight[l], v_.weight[l], grads.weight[l]);
    update(layers[l].bias, m_.bias[l], v_.bias[l], grads.bias[l]);
  }
}

double clip_global_norm(NetGrads& grads, double max_norm) {
  double norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm && norm > 0.0) grads.scale(max_norm / norm);
  return norm;
}

double gaussian_logpdf(double x, double mean, double std) {
  if (!(std > 0.0)) throw Error("gaussian_logpdf: std must be positive");
  double z = (x - mean) / std;
  return -0.5 * z * z - std::log(std) - 0.5 * std::log(2.0 * std::numbers::pi);
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
  double mx = logits.maxCoeff();
  double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  return log_softmax(logits).array().exp().matrix();
}

}  // namespace tap

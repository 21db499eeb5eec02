// SPDX-License-Identifier: Apache-2.0
#include "cbe/network.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "cbe/error.hpp"
#include "cbe/io_util.hpp"

namespace cbe {

namespace {

constexpr double kProbFloor = 1e-12;

struct ForwardCache {
  std::vector<Matrix> pre;   // pre-activation of every layer (rows = samples)
  std::vector<Matrix> post;  // input to every layer; post[0] = x
};

ForwardCache forward_cached(const NetworkParams& params, const Matrix& x) {
  ForwardCache cache;
  cache.post.push_back(x);
  const std::size_t n_layers = params.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = params.layers[l];
    Matrix z = cache.post.back() * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    cache.pre.push_back(z);
    if (l + 1 < n_layers) cache.post.push_back(z.cwiseMax(0.0));
  }
  return cache;
}

/// Row-wise log-softmax loss of logits against labels, mean over rows.
double mean_log_loss(const Matrix& logits, std::span<const int> labels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    total += lse - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

void check_batch(const NetworkParams& params, const Matrix& x, std::span<const int> labels) {
  if (x.rows() == 0) throw DataError("empty batch");
  if (static_cast<std::size_t>(x.rows()) != labels.size()) {
    throw DataError("batch rows and labels differ in length");
  }
  if (static_cast<std::size_t>(x.cols()) != params.input_dim()) {
    throw DataError("batch dimension " + std::to_string(x.cols()) + " != network input " +
                    std::to_string(params.input_dim()));
  }
  const auto out = static_cast<int>(params.output_dim());
  for (int y : labels) {
    if (y < 0 || y >= out) throw DataError("label " + std::to_string(y) + " outside head width");
  }
}

/// Loss and gradients in one pass; loss is returned, gradients written to `grads`.
double loss_and_gradients(const NetworkParams& params, const Matrix& x,
                          std::span<const int> labels, std::size_t frozen, Gradients& grads) {
  const std::size_t n_layers = params.layers.size();
  auto cache = forward_cached(params, x);
  const double loss = mean_log_loss(cache.pre.back(), labels);

  grads.first_layer = frozen;
  grads.layers.assign(n_layers - std::min(frozen, n_layers), Layer{});
  if (frozen >= n_layers) return loss;

  const double inv_n = 1.0 / static_cast<double>(x.rows());
  Matrix delta = cache.pre.back();
  softmax_rows(delta);
  for (Eigen::Index i = 0; i < delta.rows(); ++i) delta(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  delta *= inv_n;

  for (std::size_t l = n_layers; l-- > frozen;) {
    auto& g = grads.layers[l - frozen];
    g.weight = delta.transpose() * cache.post[l];
    g.bias = delta.colwise().sum().transpose();
    if (l == frozen) break;
    Matrix back = delta * params.layers[l].weight;
    delta = back.cwiseProduct((cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
  }
  return loss;
}

}  // namespace

bool Layer::operator==(const Layer& other) const {
  if (weight.rows() != other.weight.rows() || weight.cols() != other.weight.cols() ||
      bias.size() != other.bias.size()) {
    return false;
  }
  return std::equal(weight.data(), weight.data() + weight.size(), other.weight.data()) &&
         std::equal(bias.data(), bias.data() + bias.size(), other.bias.data());
}

NetworkParams NetworkParams::init_gaussian(std::span<const std::size_t> dims, Rng& rng) {
  if (dims.size() < 2) throw ConfigError("network needs at least input and output dims");
  NetworkParams p;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(dims[l]);
    const auto out = static_cast<Eigen::Index>(dims[l + 1]);
    if (in == 0 || out == 0) throw ConfigError("network dims must be positive");
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    Layer layer;
    layer.weight.resize(out, in);
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = sd * normal(rng);
    }
    layer.bias = Vector::Zero(out);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

std::vector<std::size_t> NetworkParams::dims() const {
  std::vector<std::size_t> d;
  if (layers.empty()) return d;
  d.push_back(static_cast<std::size_t>(layers.front().weight.cols()));
  for (const auto& l : layers) d.push_back(static_cast<std::size_t>(l.weight.rows()));
  return d;
}

std::size_t NetworkParams::input_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.cols());
}

std::size_t NetworkParams::output_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().weight.rows());
}

void NetworkParams::validate() const {
  if (layers.empty()) throw DataError("network has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.bias.size() != layer.weight.rows()) {
      throw DataError("layer " + std::to_string(l) + ": bias length != weight rows");
    }
    if (l > 0 && layer.weight.cols() != layers[l - 1].weight.rows()) {
      throw DataError("layer " + std::to_string(l) + ": dims do not chain");
    }
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
      throw DataError("layer " + std::to_string(l) + ": non-finite parameter");
    }
  }
}

Vector forward_logits(const NetworkParams& params, std::span<const double> x) {
  if (x.size() != params.input_dim()) {
    throw DataError("input dimension " + std::to_string(x.size()) + " != network input " +
                    std::to_string(params.input_dim()));
  }
  Vector h = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Vector z = params.layers[l].weight * h + params.layers[l].bias;
    h = (l + 1 < params.layers.size()) ? Vector(z.cwiseMax(0.0)) : z;
  }
  return h;
}

Matrix forward_logits_batch(const NetworkParams& params, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != params.input_dim()) {
    throw DataError("input dimension " + std::to_string(x.cols()) + " != network input " +
                    std::to_string(params.input_dim()));
  }
  Matrix h = x;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Matrix z = h * params.layers[l].weight.transpose();
    z.rowwise() += params.layers[l].bias.transpose();
    if (l + 1 < params.layers.size()) {
      h = z.cwiseMax(0.0);
    } else {
      h = std::move(z);
    }
  }
  return h;
}

Vector softmax(std::span<const double> z) {
  Vector out(static_cast<Eigen::Index>(z.size()));
  if (z.empty()) return out;
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = std::exp(z[i] - m);
    sum += out[static_cast<Eigen::Index>(i)];
  }
  return out / sum;
}

void softmax_rows(Matrix& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

double cross_entropy_loss(std::span<const double> probabilities, int label) {
  return -std::log(std::max(probabilities[static_cast<std::size_t>(label)], kProbFloor));
}

double batch_loss(const NetworkParams& params, const Matrix& x, std::span<const int> labels) {
  check_batch(params, x, labels);
  return mean_log_loss(forward_logits_batch(params, x), labels);
}

Gradients backward_gradients(const NetworkParams& params, const Matrix& x,
                             std::span<const int> labels, std::size_t frozen_layers) {
  check_batch(params, x, labels);
  Gradients g;
  loss_and_gradients(params, x, labels, frozen_layers, g);
  return g;
}

double cosine_lr(double lr0, double t, double total) {
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * t / total));
}

void TrainConfig::validate(std::size_t num_layers) const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (frozen_layers > num_layers) throw ConfigError("frozen_layers exceeds layer count");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
}

TrainResult train_network(NetworkParams params, const EmbeddingDataset& data,
                          const TrainConfig& config) {
  params.validate();
  config.validate(params.num_layers());
  if (data.dim() != params.input_dim()) throw DataError("dataset dimension != network input");
  if (static_cast<std::size_t>(data.class_count) != params.output_dim()) {
    throw DataError("dataset class count " + std::to_string(data.class_count) +
                    " != head width " + std::to_string(params.output_dim()));
  }

  TrainResult result;
  result.loss_trace.reserve(static_cast<std::size_t>(config.epochs));
  const std::size_t frozen = config.frozen_layers;
  if (frozen == params.num_layers()) {
    result.params = std::move(params);
    return result;
  }

  BatchSampler sampler(data, config.sampler);
  const auto steps = static_cast<std::size_t>(std::max(
      1.0, std::ceil(sampler.effective_size() / static_cast<double>(config.batch_size))));
  Rng rng(config.seed);

  std::vector<Layer> velocity;
  for (std::size_t l = frozen; l < params.num_layers(); ++l) {
    const auto& layer = params.layers[l];
    velocity.push_back({Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()),
                        Vector::Zero(layer.bias.size())});
  }

  Gradients grads;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const double t = epoch + static_cast<double>(s) / static_cast<double>(steps);
      const double lr = cosine_lr(config.lr0, t, config.epochs);
      Batch batch = sampler.draw(config.batch_size, rng);
      const double loss = loss_and_gradients(params, batch.features, batch.labels, frozen, grads);
      if (!std::isfinite(loss)) {
        throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch),
                              epoch);
      }
      epoch_loss += loss;
      for (std::size_t l = frozen; l < params.num_layers(); ++l) {
        auto& p = params.layers[l];
        auto& v = velocity[l - frozen];
        const auto& g = grads.layers[l - frozen];
        v.weight = config.momentum * v.weight + g.weight + config.weight_decay * p.weight;
        v.bias = config.momentum * v.bias + g.bias;
        p.weight -= lr * v.weight;
        p.bias -= lr * v.bias;
      }
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(steps));
  }
  result.params = std::move(params);
  return result;
}

double finite_diff_check(const NetworkParams& params, const Matrix& x,
                         std::span<const int> labels, double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("eps must be positive");
  auto grads = backward_gradients(params, x, labels, 0);
  NetworkParams probe = params;
  double worst = 0.0;
  auto check = [&](double& slot, double analytic) {
    const double saved = slot;
    slot = saved + eps;
    const double up = batch_loss(probe, x, labels);
    slot = saved - eps;
    const double down = batch_loss(probe, x, labels);
    slot = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic - numeric) / scale);
  };
  for (std::size_t l = 0; l < probe.layers.size(); ++l) {
    auto& layer = probe.layers[l];
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        check(layer.weight(r, c), grads.layers[l].weight(r, c));
      }
      check(layer.bias(r), grads.layers[l].bias(r));
    }
  }
  return worst;
}

double min_abs_preactivation(const NetworkParams& params, const Matrix& x) {
  auto cache = forward_cached(params, x);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l + 1 < cache.pre.size(); ++l) m = std::min(m, cache.pre[l].cwiseAbs().minCoeff());
  return m;
}

void to_json(nlohmann::json& j, const NetworkParams& params) {
  j = nlohmann::json::object();
  j["format"] = "cbe-network";
  j["version"] = 1;
  j["dims"] = params.dims();
  auto layers = nlohmann::json::array();
  for (const auto& l : params.layers) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    }
    layers.push_back({{"weight", w}, {"bias", std::vector<double>(l.bias.begin(), l.bias.end())}});
  }
  j["layers"] = std::move(layers);
}

void from_json(const nlohmann::json& j, NetworkParams& params) {
  if (j.at("format").get<std::string>() != "cbe-network") throw DataError("not a network checkpoint");
  if (j.at("version").get<int>() != 1) throw DataError("unsupported network checkpoint version");
  auto dims = j.at("dims").get<std::vector<std::size_t>>();
  const auto& layers = j.at("layers");
  if (dims.size() < 2 || layers.size() != dims.size() - 1) throw DataError("checkpoint dims/layers mismatch");
  params.layers.clear();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    auto w = layers[l].at("weight").get<std::vector<double>>();
    auto b = layers[l].at("bias").get<std::vector<double>>();
    const auto out = static_cast<Eigen::Index>(dims[l + 1]);
    const auto in = static_cast<Eigen::Index>(dims[l]);
    if (w.size() != static_cast<std::size_t>(out * in) || b.size() != static_cast<std::size_t>(out)) {
      throw DataError("checkpoint layer " + std::to_string(l) + " has wrong size");
    }
    Layer layer;
    layer.weight.resize(out, in);
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
    }
    layer.bias = Eigen::Map<const Vector>(b.data(), out);
    params.layers.push_back(std::move(layer));
  }
  params.validate();
}

void save_network(const std::filesystem::path& path, const NetworkParams& params) {
  nlohmann::json j = params;
  io::write_file_atomic(path, j.dump() + "\n");
}

NetworkParams load_network(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(io::read_file(path)).get<NetworkParams>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace cbe

// SPDX-License-Identifier: Apache-2.0
//
// Feed-forward softmax classifier over embeddings: rectified hidden layers
// followed by a linear head. Gradients are exact backprop; training is
// minibatch SGD with momentum, weight decay and a cosine schedule.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cbe/dataset.hpp"
#include "cbe/types.hpp"

namespace cbe {

struct Layer {
  Eigen::MatrixXd weight;  // out x in
  Vector bias;             // out

  bool operator==(const Layer& other) const;
};

struct NetworkParams {
  std::vector<Layer> layers;

  /// Gaussian weights with stddev 1/sqrt(fan_in), zero biases.
  static NetworkParams init_gaussian(std::span<const std::size_t> dims, Rng& rng);

  std::vector<std::size_t> dims() const;
  std::size_t num_layers() const { return layers.size(); }
  std::size_t input_dim() const;
  std::size_t output_dim() const;

  /// Throws DataError unless dimensions chain and every entry is finite.
  void validate() const;

  /// Bitwise equality of every weight and bias.
  bool operator==(const NetworkParams& other) const = default;
};

Vector forward_logits(const NetworkParams& params, std::span<const double> x);

/// Logits for each row of `x`.
Matrix forward_logits_batch(const NetworkParams& params, const Matrix& x);

/// Max-subtracted softmax.
Vector softmax(std::span<const double> z);

/// In-place row-wise softmax.
void softmax_rows(Matrix& z);

/// -log p[label], with p clamped below at 1e-12.
double cross_entropy_loss(std::span<const double> probabilities, int label);

/// Mean cross-entropy of the batch, computed through log-softmax.
double batch_loss(const NetworkParams& params, const Matrix& x, std::span<const int> labels);

/// Gradient entries for layers [first_layer, num_layers). Empty when all are frozen.
struct Gradients {
  std::size_t first_layer = 0;
  std::vector<Layer> layers;

  bool empty() const { return layers.empty(); }
};

/// Mean-over-batch gradient of the cross-entropy loss.
Gradients backward_gradients(const NetworkParams& params, const Matrix& x,
                             std::span<const int> labels, std::size_t frozen_layers = 0);

double cosine_lr(double lr0, double t, double total);

struct TrainConfig {
  double lr0 = 0.1;
  int epochs = 100;
  std::size_t batch_size = 32;
  std::size_t frozen_layers = 0;
  SamplerMode sampler{};
  std::uint64_t seed = 0;
  double weight_decay = 1e-4;
  double momentum = 0.9;

  void validate(std::size_t num_layers) const;
};

struct TrainResult {
  NetworkParams params;
  std::vector<double> loss_trace;  // mean minibatch loss per epoch
};

/// Throws DivergenceError (with the epoch) if the loss becomes non-finite.
TrainResult train_network(NetworkParams params, const EmbeddingDataset& data,
                          const TrainConfig& config);

/// Worst per-coordinate relative error between backprop and central differences.
double finite_diff_check(const NetworkParams& params, const Matrix& x,
                         std::span<const int> labels, double eps = 1e-4);

/// Smallest |pre-activation| at any rectified unit; central differences are
/// unreliable when this is within eps of zero.
double min_abs_preactivation(const NetworkParams& params, const Matrix& x);

void to_json(nlohmann::json& j, const NetworkParams& params);
void from_json(const nlohmann::json& j, NetworkParams& params);

void save_network(const std::filesystem::path& path, const NetworkParams& params);
NetworkParams load_network(const std::filesystem::path& path);

}  // namespace cbe

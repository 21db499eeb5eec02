// SPDX-License-Identifier: Apache-2.0
//
// Baseline, uniform-sampling finetune, and class-balanced experts with a
// reject class. An expert shares the baseline backbone shape; its head has
// one output per subset class plus a trailing reject output.
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "cbe/dataset.hpp"
#include "cbe/network.hpp"

namespace cbe {

struct BaselineModel {
  NetworkParams params;  // head width C
  std::vector<double> loss_trace;  // per epoch; empty after loading a checkpoint
};

struct ExpertModel {
  NetworkParams params;  // head width k + 1
  SubsetSpec subset;
  double rho = 1.0;
  std::size_t frozen_layers = 0;
  bool apply_reject_correction = true;

  std::size_t reject_index() const { return subset.size(); }
  std::size_t width() const { return subset.size() + 1; }
};

struct PartialPosterior {
  Fold expert_id = Fold::Many;
  Vector logits;         // bias-corrected when the expert applies the correction
  Vector probabilities;  // softmax(logits), reject last
};

BaselineModel train_baseline(const DatasetBundle& bundle, const TrainConfig& config,
                             std::span<const std::size_t> hidden);

/// Retrains only the head of `baseline` under uniform class sampling. The
/// config's frozen_layers and sampler are overridden.
BaselineModel finetune_uniform_classifier(const BaselineModel& baseline,
                                          const DatasetBundle& bundle, TrainConfig config);

/// Copies the baseline backbone, attaches a fresh (k+1)-way head and trains on
/// the relabelled train split with reject undersampling at `rho`.
ExpertModel train_expert(const BaselineModel& baseline, const SubsetSpec& subset,
                         const DatasetBundle& bundle, double rho, std::size_t frozen_layers,
                         TrainConfig config);

/// Reject logit gets +ln(rho) before the softmax when the correction is on.
PartialPosterior expert_partial_posterior(const ExpertModel& expert, std::span<const double> x);

/// Corrected logits for every row of `x` (n x (k+1)).
Matrix expert_logits(const ExpertModel& expert, const Matrix& x);
Matrix expert_probabilities(const ExpertModel& expert, const Matrix& x);

/// Accuracy over samples whose class is in the expert's subset; argmax runs
/// over all k+1 outputs, so predicting reject counts as a miss.
double expert_subset_accuracy(const ExpertModel& expert, const EmbeddingDataset& data);

struct ExpertGrid {
  std::vector<double> rho_grid{1.0};
  std::vector<std::size_t> frozen_grid{0};
};

struct GridScore {
  double rho = 1.0;
  std::size_t frozen_layers = 0;
  double val_score = 0.0;
};

struct ExpertSelection {
  ExpertModel expert;  // trained at the selected point
  double rho = 1.0;
  std::size_t frozen_layers = 0;
  std::vector<GridScore> table;  // one row per grid point, rho-major
};

/// Trains one expert per grid point and keeps the best validation score.
/// Ties go to larger rho, then more frozen layers. `threads` only changes
/// wall-clock time; each grid point has its own derived seed.
ExpertSelection select_expert_hyperparams(const BaselineModel& baseline, const SubsetSpec& subset,
                                          const DatasetBundle& bundle, const ExpertGrid& grid,
                                          const TrainConfig& config, std::size_t threads = 1);

void save_expert(const std::filesystem::path& path, const ExpertModel& expert);
ExpertModel load_expert(const std::filesystem::path& path);

void save_baseline(const std::filesystem::path& path, const BaselineModel& model);
BaselineModel load_baseline(const std::filesystem::path& path);

}  // namespace cbe

// SPDX-License-Identifier: Apache-2.0
//
// Declarative run configuration. One JSON file drives every subcommand.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbe/dataset.hpp"
#include "cbe/experts.hpp"
#include "cbe/fusion.hpp"
#include "cbe/network.hpp"

namespace cbe::cli {

struct DatasetSection {
  enum class Source { Generate, Load };
  Source source = Source::Generate;
  GeneratorConfig generate{};
  std::string manifest;  // for Source::Load, relative to the config file
  FoldThresholds thresholds{};
};

struct TrainingSection {
  double lr0 = 0.1;
  int epochs = 60;
  std::size_t batch_size = 32;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  std::vector<std::size_t> hidden{64};
};

/// Head-only finetune of the baseline with uniform class sampling.
struct FinetuneSection {
  double lr0 = 0.05;
  int epochs = 30;
};

struct ExpertSection {
  std::vector<double> rho_grid{1.0};
  std::vector<std::size_t> frozen_grid{0};
  double lr0 = 0.05;
  int epochs = 40;
};

struct FusionSection {
  FusionStrategy strategy = FusionStrategy::Calibrate;
  KlOptions kl{};
  CalibrationOptions calibration{};
  double lr0 = 0.5;  // selector / stacker training
  int epochs = 60;
  std::size_t batch_size = 32;
};

struct PathsSection {
  std::string work_dir = "work";  // relative to the config file
};

struct RunConfig {
  DatasetSection dataset;
  TrainingSection training;
  FinetuneSection finetune;
  ExpertSection experts;
  FusionSection fusion;
  PathsSection paths;

  /// Directory of the config file; relative paths resolve against it. Not serialised.
  std::filesystem::path base_dir;

  void validate() const;

  TrainConfig baseline_train() const;
  TrainConfig finetune_train() const;
  TrainConfig expert_train() const;
  TrainConfig fusion_train() const;
  ExpertGrid expert_grid() const;

  std::filesystem::path work_dir() const;
};

/// Throws ConfigError on missing or malformed fields. Every field is
/// optional except the seed, so configs never rely on implicit entropy.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const RunConfig& config);

RunConfig load_config(const std::filesystem::path& path);

/// The fixed synthetic benchmark: 60 classes, d=16, n_max=500, alpha=1.2,
/// 20/50 val/test samples per class, noise 0.82.
RunConfig synth60_config(std::uint64_t seed);

}  // namespace cbe::cli

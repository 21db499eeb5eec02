// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pipeline pieces shared by the subcommands and the benchmark
// harness: dataset construction, model training, fusion training and the
// full evaluation sweep.
#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cbe/evaluation.hpp"
#include "cbe/experts.hpp"
#include "cbe/fusion.hpp"
#include "config.hpp"

namespace cbe::cli {

/// Generated (seeded from the training seed) or loaded per the config.
DatasetBundle build_dataset(const RunConfig& config, std::vector<std::string>* warnings = nullptr);

struct TrainedSystem {
  DatasetBundle bundle;
  FoldAssignment folds;
  std::array<SubsetSpec, 3> subsets;
  BaselineModel baseline;
  BaselineModel uniform;
  std::array<ExpertSelection, 3> experts;

  std::vector<ExpertModel> expert_models() const;
};

BaselineModel train_baseline_model(const RunConfig& config, const DatasetBundle& bundle);
BaselineModel train_uniform_model(const RunConfig& config, const DatasetBundle& bundle,
                                  const BaselineModel& baseline);
std::array<ExpertSelection, 3> train_expert_models(const RunConfig& config,
                                                   const DatasetBundle& bundle,
                                                   const std::array<SubsetSpec, 3>& subsets,
                                                   const BaselineModel& baseline,
                                                   std::size_t threads);

TrainedSystem train_system(const RunConfig& config, std::size_t threads = 1);

/// Each expert's bias-corrected logits and probabilities on `data`.
std::vector<MemberOutputs> expert_outputs(std::span<const ExpertModel> experts,
                                          const EmbeddingDataset& data);

/// Softmax posteriors of a full-width network as a posterior table.
ExternalPosteriorTable network_posteriors(const NetworkParams& params, const EmbeddingDataset& data,
                                          std::string name);

/// Trains whatever `strategy` needs on the validation outputs.
FusionModel train_fusion(const RunConfig& config, FusionStrategy strategy,
                         std::span<const MemberOutputs> val, std::span<const int> val_labels,
                         const std::array<SubsetSpec, 3>& subsets);

struct BenchmarkResult {
  EvalReport baseline;
  EvalReport uniform;
  EvalReport oracle;
  std::map<FusionStrategy, EvalReport> fusion;
  std::array<EvalReport, 3> single_expert;  // argmax of each expert's expanded posterior
  ExpertConfusionMatrix confusion_softvote;
  ExpertConfusionMatrix confusion_calibrate;
  std::vector<AblationRow> ablation;  // soft vote of {baseline, uniform, calibrated experts}
  std::array<double, 3> selected_rho{};
  std::array<std::size_t, 3> selected_frozen{};
  double msp_many_expert = 0.0;  // on Many test samples it classifies correctly
  double msp_few_expert = 0.0;   // on those same samples
  std::size_t msp_population = 0;
};

BenchmarkResult evaluate_system(const RunConfig& config, const TrainedSystem& system,
                                std::size_t threads = 1);

BenchmarkResult run_benchmark(const RunConfig& config, std::size_t threads = 1);

}  // namespace cbe::cli

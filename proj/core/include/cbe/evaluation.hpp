// SPDX-License-Identifier: Apache-2.0
//
// Four-fold accuracy, ground-truth-routed (oracle) evaluation, expert
// collision matrices, confidence histograms and take-one-out ablations.
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbe/dataset.hpp"
#include "cbe/experts.hpp"
#include "cbe/fusion.hpp"

namespace cbe {

/// Accuracies are fractions in [0, 1]. An empty fold has no accuracy (nullopt),
/// which is serialised as null rather than 0.
struct EvalReport {
  std::array<std::optional<double>, 3> fold_accuracy{};
  std::optional<double> all;
  std::array<std::size_t, 3> fold_counts{};
  std::array<std::size_t, 3> fold_correct{};
  std::size_t total = 0;
  std::size_t correct = 0;
  std::vector<std::optional<double>> per_class;

  std::optional<double> accuracy(Fold f) const { return fold_accuracy[fold_index(f)]; }
};

EvalReport fourfold_accuracy(std::span<const int> predictions, std::span<const int> labels,
                             const FoldAssignment& folds);

/// Row-wise argmax; ties go to the lowest index.
std::vector<int> argmax_rows(const Matrix& scores);

/// Routes each sample to the expert owning its true class and predicts with
/// that expert's argmax over its in-subset outputs (reject excluded).
EvalReport oracle_evaluate(std::span<const ExpertModel> experts, const EmbeddingDataset& test,
                           const FoldAssignment& folds);

/// Rows: true fold of the sample. Columns: expert whose subset contains the
/// fused argmax. Entries are row-normalised percentages.
struct ExpertConfusionMatrix {
  std::array<std::array<double, 3>, 3> percent{};
  std::array<std::array<std::size_t, 3>, 3> counts{};

  /// Share of samples routed to their own fold's expert, in percent.
  double diagonal_mass() const;
  /// Unweighted mean of the diagonal row percentages over nonempty rows.
  double mean_diagonal_percent() const;
};

ExpertConfusionMatrix expert_confusion_matrix(std::span<const int> fused_predictions,
                                              std::span<const int> labels,
                                              std::span<const SubsetSpec> subsets,
                                              const FoldAssignment& folds);

/// Fuses the experts' test outputs with `model` (soft vote by default) first.
ExpertConfusionMatrix expert_confusion_matrix(std::span<const MemberOutputs> test_partials,
                                              std::span<const int> labels,
                                              std::span<const SubsetSpec> subsets,
                                              const FoldAssignment& folds,
                                              const FusionModel& model = {});

struct ConfidenceHistogram {
  std::vector<double> edges;  // bins + 1 values over [0, 1]
  std::vector<std::size_t> counts;
  std::string expert;
  std::string population;
  double mean_msp = 0.0;

  std::size_t total() const;
};

/// Histogram of the row maxima of `posteriors`. The value 1.0 lands in the last bin.
ConfidenceHistogram msp_histogram(const Matrix& posteriors, std::size_t bins = 20,
                                  std::string expert = {}, std::string population = {});

enum class MspSource { Partial, Expanded };

ConfidenceHistogram msp_histogram(const ExpertModel& expert, const Matrix& samples,
                                  std::size_t bins, MspSource source, std::string population);

struct AblationRow {
  std::string name;                  // "all" or "without <model>"
  std::vector<std::string> members;
  EvalReport report;
};

struct AblationCalibration {
  std::span<const ExternalPosteriorTable> val_models;  // same order as the test models
  std::span<const int> val_labels;
  CalibrationOptions options{};
};

/// One row for the full ensemble, then one per left-out model.
std::vector<AblationRow> take_one_out_ablation(std::span<const ExternalPosteriorTable> models,
                                               std::span<const int> labels,
                                               const FoldAssignment& folds,
                                               FusionStrategy strategy = FusionStrategy::SoftVote,
                                               const AblationCalibration* calibration = nullptr);

nlohmann::ordered_json to_json(const EvalReport& report);
std::string to_text(const EvalReport& report, std::string_view title);
nlohmann::ordered_json to_json(const ExpertConfusionMatrix& matrix);
std::string to_csv(const ExpertConfusionMatrix& matrix);
std::string to_csv(const ConfidenceHistogram& histogram);
nlohmann::ordered_json to_json(std::span<const AblationRow> rows);
std::string to_text(std::span<const AblationRow> rows);

}  // namespace cbe

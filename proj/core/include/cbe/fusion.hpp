// SPDX-License-Identifier: Apache-2.0
//
// Fusion of partial posteriors into a full posterior over all C classes.
//
// A partial posterior is an expert's softmax over its subset classes plus a
// trailing reject entry. The expansion g() keeps in-subset probabilities at
// their global indices and spreads the reject mass evenly over the classes the
// expert does not cover. Full-width models (baseline, externally produced
// posteriors) participate through the same layout with no reject entry.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cbe/dataset.hpp"
#include "cbe/network.hpp"

namespace cbe {

/// How one ensemble member's output vector maps onto the C global classes.
struct MemberLayout {
  std::string name;
  std::vector<int> classes;      // local order
  std::vector<int> local_index;  // size C, -1 outside
  bool has_reject = true;

  static MemberLayout from_subset(const SubsetSpec& subset);
  static MemberLayout full_width(std::string name, int class_count);

  int class_count() const { return static_cast<int>(local_index.size()); }
  std::size_t width() const { return classes.size() + (has_reject ? 1 : 0); }
  std::size_t uncovered() const { return local_index.size() - classes.size(); }
  /// Reject entry exists but there is nowhere to spread it.
  bool degenerate() const { return has_reject && uncovered() == 0; }
};

struct FullPosterior {
  Vector probabilities;  // length C
  bool reject_dropped = false;  // degenerate full-coverage expert lost its reject mass
};

/// The expansion g(). Output sums to one up to rounding.
FullPosterior expand_partial(std::span<const double> partial, const MemberLayout& layout);
FullPosterior expand_partial(std::span<const double> partial, const SubsetSpec& subset);

using PartialView = std::span<const double>;

/// Mean of the expanded partials.
FullPosterior fuse_soft_vote(std::span<const PartialView> partials,
                             std::span<const MemberLayout> layouts);

struct KlOptions {
  int steps = 500;
  double step_size = 1.0;  // halved within a step until the objective does not increase
  double tol = 1e-8;
};

struct KlResult {
  FullPosterior posterior;
  double objective = 0.0;
  double initial_objective = 0.0;
  int steps_taken = 0;
};

/// Sum over members of KL(p_E || align_E(q)); align_E keeps q's covered entries
/// and sums the uncovered ones into the reject slot.
double kl_objective(std::span<const double> q, std::span<const PartialView> partials,
                    std::span<const MemberLayout> layouts);

/// Gradient descent on the logits of q, starting from the soft vote. Stops
/// after `steps`, when an accepted step improves by less than `tol`, or when
/// no halving of the step decreases the objective.
/// Throws DivergenceError on a non-finite objective.
KlResult fuse_kl_min(std::span<const PartialView> partials, std::span<const MemberLayout> layouts,
                     const KlOptions& options = {});

/// One member evaluated on one split: row i is sample i.
struct MemberOutputs {
  MemberLayout layout;
  Matrix logits;         // n x width (bias-corrected for experts)
  Matrix probabilities;  // n x width
};

/// Builds outputs from logits, filling probabilities by softmax.
MemberOutputs member_from_logits(MemberLayout layout, Matrix logits);
/// Builds outputs from probabilities; logits are log(max(p, 1e-12)).
MemberOutputs member_from_probabilities(MemberLayout layout, Matrix probabilities);

/// Row-wise concatenation of every member's probabilities.
Matrix concat_probabilities(std::span<const MemberOutputs> members);

struct SelectorModel {
  NetworkParams params;  // single linear layer, sum(width) -> members
};

struct StackerModel {
  NetworkParams params;  // single linear layer, sum(width) -> C
};

/// Index of the member owning each label's class; -1 when no member covers it.
std::vector<int> owning_member(std::span<const int> labels, std::span<const MemberLayout> layouts);

/// Linear softmax over concatenated partials predicting the owning member.
/// Throws DataError if some member owns no validation sample.
SelectorModel train_expert_selector(std::span<const MemberOutputs> val,
                                    std::span<const int> member_labels, const TrainConfig& config);

/// Member chosen by the selector (ties to the lowest index), then expanded.
FullPosterior fuse_by_selection(std::span<const PartialView> partials, const SelectorModel& selector,
                                std::span<const MemberLayout> layouts);
std::size_t select_member(std::span<const PartialView> partials, const SelectorModel& selector);

StackerModel train_stacker(std::span<const MemberOutputs> val, std::span<const int> labels,
                           int class_count, const TrainConfig& config);
FullPosterior fuse_by_stacking(std::span<const PartialView> partials, const StackerModel& stacker);

/// Per-member elementwise scale and shift on the logits.
struct CalibrationParams {
  std::vector<Vector> scale;
  std::vector<Vector> shift;

  static CalibrationParams identity(std::span<const MemberLayout> layouts);
  void validate(std::span<const MemberLayout> layouts) const;
};

struct CalibrationOptions {
  int steps = 2000;
  double step_size = 0.1;
  double momentum = 0.9;
};

struct CalibrationResult {
  CalibrationParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_trace;
};

/// Mean cross-entropy of the calibrated fused posterior; fills `gradient`
/// (same shape as params) when non-null.
double calibration_loss(std::span<const MemberOutputs> members, std::span<const int> labels,
                        const CalibrationParams& params, CalibrationParams* gradient = nullptr);

/// Worst per-coordinate relative error between the analytic calibration
/// gradient and central differences, in the same metric as finite_diff_check.
double calibration_finite_diff_check(std::span<const MemberOutputs> members,
                                     std::span<const int> labels, const CalibrationParams& params,
                                     double eps = 1e-5);

/// Full-batch momentum gradient descent from (w=1, b=0). Returns the best
/// iterate seen, so final_loss <= initial_loss.
CalibrationResult train_joint_calibration(std::span<const MemberOutputs> val,
                                          std::span<const int> labels,
                                          const CalibrationOptions& options = {});

FullPosterior fuse_calibrated(std::span<const PartialView> logits, const CalibrationParams& params,
                              std::span<const MemberLayout> layouts);

enum class FusionStrategy { KlMin, SoftVote, Select, Stack, Calibrate };

std::string_view strategy_name(FusionStrategy s);
std::optional<FusionStrategy> parse_strategy(std::string_view name);

/// Everything needed to fuse a member set; trained parts only for the
/// strategies that need them.
struct FusionModel {
  FusionStrategy strategy = FusionStrategy::SoftVote;
  KlOptions kl{};
  std::optional<SelectorModel> selector;
  std::optional<StackerModel> stacker;
  std::optional<CalibrationParams> calibration;
};

/// Fuses every sample (n x C). Pure per sample; `threads` does not change results.
Matrix fuse_all(std::span<const MemberOutputs> members, const FusionModel& model,
                std::size_t threads = 1);

void save_fusion_model(const std::filesystem::path& path, const FusionModel& model);
FusionModel load_fusion_model(const std::filesystem::path& path);

// ---- posterior tables and dump files -------------------------------------

/// Full posteriors produced by some model, keyed by sample id.
struct ExternalPosteriorTable {
  std::string model;
  std::vector<long long> sample_ids;
  Matrix probabilities;  // n x C
};

/// Reads `sample_id,p0,...,p{C-1}`. Rows off by more than 1e-6 from unit sum
/// are renormalised and reported through `warnings`.
ExternalPosteriorTable ingest_external_posteriors(const std::filesystem::path& path,
                                                  int class_count,
                                                  std::vector<std::string>* warnings = nullptr);

void write_full_posteriors(const std::filesystem::path& path, const ExternalPosteriorTable& table);

/// Partial dump: `sample_id,expert_id,p0,...,p{k-1},preject` plus a JSON
/// sidecar (`<path>.json`) describing the subset.
void write_partial_posteriors(const std::filesystem::path& path, const MemberOutputs& member,
                              Fold expert_id, double rho);
MemberOutputs read_partial_posteriors(const std::filesystem::path& path);

MemberOutputs member_from_table(const ExternalPosteriorTable& table);

/// Fuses externally produced full posteriors. Tables must share sample ids.
/// Supports SoftVote and Calibrate (which needs `calibration`).
Matrix fuse_models(std::span<const ExternalPosteriorTable> tables, FusionStrategy strategy,
                   const CalibrationParams* calibration = nullptr);

}  // namespace cbe

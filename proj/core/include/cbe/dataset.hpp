// SPDX-License-Identifier: Apache-2.0
//
// Long-tailed embedding datasets: generation, CSV ingestion, fold assignment,
// frequency-sorted partitioning into expert subsets, and batch sampling.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbe/types.hpp"

namespace cbe {

/// Labeled feature vectors. Immutable after construction; share freely.
struct EmbeddingDataset {
  Matrix features;  // n x d
  std::vector<int> labels;
  int class_count = 0;
  /// Samples per class in this split (recomputed, never read from files).
  std::vector<std::size_t> class_frequency;

  /// Validates invariants and computes class_frequency. Throws DataError.
  static EmbeddingDataset create(Matrix features, std::vector<int> labels, int class_count);

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
  std::span<const double> feature(std::size_t i) const {
    return row_span(features, static_cast<Eigen::Index>(i));
  }
};

struct DatasetBundle {
  EmbeddingDataset train;  // long-tailed
  EmbeddingDataset val;    // balanced
  EmbeddingDataset test;   // balanced
};

struct FoldThresholds {
  std::size_t many_min = 100;  // Many iff frequency >= many_min
  std::size_t few_max = 20;    // Few iff frequency < few_max
};

struct FoldAssignment {
  std::vector<Fold> fold;  // per class
  FoldThresholds thresholds;

  Fold of(int cls) const { return fold.at(static_cast<std::size_t>(cls)); }
  std::size_t count(Fold f) const;
};

/// One expert's contiguous range of frequency-sorted classes.
struct SubsetSpec {
  Fold expert_id = Fold::Many;
  std::vector<int> classes;      // global indices, local order
  std::vector<int> local_index;  // size C; -1 for classes outside the subset

  static SubsetSpec create(Fold expert_id, std::vector<int> classes, int class_count);

  std::size_t size() const { return classes.size(); }
  int class_count() const { return static_cast<int>(local_index.size()); }
  bool contains(int cls) const { return local_index.at(static_cast<std::size_t>(cls)) >= 0; }
  int local(int cls) const { return local_index.at(static_cast<std::size_t>(cls)); }
};

struct SamplerMode {
  enum class Kind { InstanceBalanced, UniformClass, RejectUndersampled };
  Kind kind = Kind::InstanceBalanced;
  double rho = 1.0;  // only meaningful for RejectUndersampled

  static SamplerMode instance_balanced() { return {Kind::InstanceBalanced, 1.0}; }
  static SamplerMode uniform_class() { return {Kind::UniformClass, 1.0}; }
  /// The reject class is the dataset's last label (class_count - 1). rho >= 1.
  static SamplerMode reject_undersampled(double rho);
};

struct GeneratorConfig {
  int classes = 60;
  int dim = 16;
  std::size_t n_max = 500;
  double alpha = 1.2;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 50;
  double noise_scale = 1.0;
  FoldThresholds thresholds{};
};

/// max(round(n_max * (c+1)^-alpha), 1) for the c-th most frequent class.
std::vector<std::size_t> longtailed_frequencies(std::size_t n_max, double alpha, int classes);

/// Synthetic long-tailed bundle of isotropic Gaussian class blobs. Class c is the
/// c-th most frequent. Throws EmptyFoldError if any fold would be empty.
DatasetBundle generate_longtailed(const GeneratorConfig& config, std::uint64_t seed);

/// Reads `label,f0,...,f{d-1}` CSV. class_count <= 0 infers C from the labels.
EmbeddingDataset read_embedding_csv(const std::filesystem::path& path, int class_count = 0);
void write_embedding_csv(const std::filesystem::path& path, const EmbeddingDataset& data);

struct SplitPaths {
  std::filesystem::path train;
  std::filesystem::path val;
  std::filesystem::path test;
  int class_count = 0;  // 0 = infer from the largest label across splits
};

struct LoadedBundle {
  DatasetBundle bundle;
  std::vector<std::string> warnings;  // e.g. unbalanced val/test with per-class counts
};

LoadedBundle load_embeddings(const SplitPaths& paths);

/// Reads a JSON manifest {"train","val","test"[,"classes"]}; paths relative to it.
SplitPaths read_manifest(const std::filesystem::path& manifest);
void write_manifest(const std::filesystem::path& manifest, const SplitPaths& paths);

FoldAssignment assign_folds(std::span<const std::size_t> frequency, FoldThresholds thresholds = {});
FoldAssignment assign_folds(const EmbeddingDataset& train, FoldThresholds thresholds = {});

/// Classes in descending frequency, ties by ascending index.
std::vector<int> frequency_order(std::span<const std::size_t> frequency);

/// Splits the frequency-sorted classes into the Many/Medium/Few subsets.
/// Throws EmptyFoldError naming the first empty fold.
std::array<SubsetSpec, 3> partition_subsets(const FoldAssignment& assignment,
                                            const EmbeddingDataset& train);

/// Maps in-subset labels to local indices and everything else to k (reject).
EmbeddingDataset relabel_for_expert(const EmbeddingDataset& data, const SubsetSpec& subset);

struct Batch {
  Matrix features;
  std::vector<int> labels;
};

/// Index sampler for one dataset and one regime. Holds no RNG; callers pass theirs.
class BatchSampler {
 public:
  BatchSampler(const EmbeddingDataset& data, SamplerMode mode);

  std::vector<std::size_t> draw_indices(std::size_t batch_size, Rng& rng) const;
  Batch draw(std::size_t batch_size, Rng& rng) const;

  /// Expected number of samples in one pass under this regime (reject mass / rho).
  double effective_size() const;
  const SamplerMode& mode() const { return mode_; }

 private:
  const EmbeddingDataset* data_;
  SamplerMode mode_;
  std::vector<std::vector<std::size_t>> by_class_;
};

Batch draw_batch(const EmbeddingDataset& data, SamplerMode mode, std::size_t batch_size, Rng& rng);

}  // namespace cbe

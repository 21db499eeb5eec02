// SPDX-License-Identifier: Apache-2.0
#include "cbe/dataset.hpp"
#include "cbe/error.hpp"

namespace cbe {

BatchSampler::BatchSampler(const EmbeddingDataset& data, SamplerMode mode)
    : data_(&data), mode_(mode) {
  if (data.size() == 0) throw DataError("cannot sample from an empty dataset");
  if (mode.kind == SamplerMode::Kind::RejectUndersampled && !(mode.rho >= 1.0)) {
    throw ConfigError("undersampling ratio must be >= 1");
  }
  if (mode.kind == SamplerMode::Kind::UniformClass) {
    by_class_.resize(static_cast<std::size_t>(data.class_count));
    for (std::size_t i = 0; i < data.size(); ++i) {
      by_class_[static_cast<std::size_t>(data.labels[i])].push_back(i);
    }
    for (std::size_t c = 0; c < by_class_.size(); ++c) {
      if (by_class_[c].empty()) {
        throw DataError("uniform class sampling: class " + std::to_string(c) + " has no samples");
      }
    }
  }
}

std::vector<std::size_t> BatchSampler::draw_indices(std::size_t batch_size, Rng& rng) const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> idx;
  idx.reserve(batch_size);
  std::uniform_int_distribution<std::size_t> any(0, data_->size() - 1);
  switch (mode_.kind) {
    case SamplerMode::Kind::InstanceBalanced:
      for (std::size_t b = 0; b < batch_size; ++b) idx.push_back(any(rng));
      break;
    case SamplerMode::Kind::UniformClass: {
      std::uniform_int_distribution<std::size_t> cls(0, by_class_.size() - 1);
      for (std::size_t b = 0; b < batch_size; ++b) {
        const auto& members = by_class_[cls(rng)];
        std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
        idx.push_back(members[pick(rng)]);
      }
      break;
    }
    case SamplerMode::Kind::RejectUndersampled: {
      const int reject = data_->class_count - 1;
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double accept = 1.0 / mode_.rho;
      while (idx.size() < batch_size) {
        std::size_t i = any(rng);
        if (data_->labels[i] == reject && accept < 1.0 && !(u(rng) < accept)) continue;
        idx.push_back(i);
      }
      break;
    }
  }
  return idx;
}

Batch BatchSampler::draw(std::size_t batch_size, Rng& rng) const {
  auto idx = draw_indices(batch_size, rng);
  Batch b;
  b.features.resize(static_cast<Eigen::Index>(idx.size()), data_->features.cols());
  b.labels.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    b.features.row(static_cast<Eigen::Index>(r)) =
        data_->features.row(static_cast<Eigen::Index>(idx[r]));
    b.labels.push_back(data_->labels[idx[r]]);
  }
  return b;
}

double BatchSampler::effective_size() const {
  const auto n = static_cast<double>(data_->size());
  if (mode_.kind != SamplerMode::Kind::RejectUndersampled) return n;
  const auto rejects = static_cast<double>(data_->class_frequency.back());
  return (n - rejects) + rejects / mode_.rho;
}

Batch draw_batch(const EmbeddingDataset& data, SamplerMode mode, std::size_t batch_size,
                 Rng& rng) {
  return BatchSampler(data, mode).draw(batch_size, rng);
}

}  // namespace cbe

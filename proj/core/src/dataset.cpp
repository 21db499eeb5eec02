// SPDX-License-Identifier: Apache-2.0
#include "cbe/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cbe/error.hpp"
#include "cbe/io_util.hpp"

namespace cbe {

EmbeddingDataset EmbeddingDataset::create(Matrix features, std::vector<int> labels,
                                          int class_count) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw DataError("feature rows (" + std::to_string(features.rows()) +
                    ") != label count (" + std::to_string(labels.size()) + ")");
  }
  if (class_count <= 0) throw DataError("class_count must be positive");
  EmbeddingDataset ds;
  ds.class_frequency.assign(static_cast<std::size_t>(class_count), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= class_count) {
      throw DataError("label " + std::to_string(y) + " at row " + std::to_string(i) +
                      " outside [0, " + std::to_string(class_count) + ")");
    }
    ++ds.class_frequency[static_cast<std::size_t>(y)];
  }
  if (!features.allFinite()) throw DataError("non-finite feature value");
  ds.features = std::move(features);
  ds.labels = std::move(labels);
  ds.class_count = class_count;
  return ds;
}

std::size_t FoldAssignment::count(Fold f) const {
  return static_cast<std::size_t>(std::count(fold.begin(), fold.end(), f));
}

SubsetSpec SubsetSpec::create(Fold expert_id, std::vector<int> classes, int class_count) {
  SubsetSpec s;
  s.expert_id = expert_id;
  s.local_index.assign(static_cast<std::size_t>(class_count), -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    int c = classes[i];
    if (c < 0 || c >= class_count) throw DataError("subset class out of range");
    if (s.local_index[static_cast<std::size_t>(c)] >= 0) throw DataError("duplicate subset class");
    s.local_index[static_cast<std::size_t>(c)] = static_cast<int>(i);
  }
  s.classes = std::move(classes);
  return s;
}

SamplerMode SamplerMode::reject_undersampled(double rho) {
  if (!(rho >= 1.0)) throw ConfigError("undersampling ratio must be >= 1");
  return {Kind::RejectUndersampled, rho};
}

std::vector<std::size_t> longtailed_frequencies(std::size_t n_max, double alpha, int classes) {
  std::vector<std::size_t> freq(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    double n = std::round(static_cast<double>(n_max) * std::pow(c + 1.0, -alpha));
    freq[static_cast<std::size_t>(c)] = std::max<std::size_t>(static_cast<std::size_t>(n), 1);
  }
  return freq;
}

DatasetBundle generate_longtailed(const GeneratorConfig& config, std::uint64_t seed) {
  if (config.classes < 3) throw ConfigError("generator needs at least 3 classes");
  if (config.dim < 2) throw ConfigError("generator needs dimension >= 2");
  if (!(config.noise_scale > 0.0)) throw ConfigError("noise_scale must be positive");
  if (config.val_per_class == 0 || config.test_per_class == 0) {
    throw ConfigError("val/test samples per class must be positive");
  }
  auto freq = longtailed_frequencies(config.n_max, config.alpha, config.classes);
  auto folds = assign_folds(freq, config.thresholds);
  for (Fold f : kFolds) {
    if (folds.count(f) == 0) throw EmptyFoldError(std::string(fold_name(f)));
  }

  const auto d = static_cast<Eigen::Index>(config.dim);
  Rng mean_rng(derive_seed(seed, {0x6d65616e}));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix means(config.classes, d);
  for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = normal(mean_rng);

  auto draw_split = [&](std::uint64_t tag, auto&& count_of) {
    Rng rng(derive_seed(seed, {tag}));
    std::size_t n = 0;
    for (int c = 0; c < config.classes; ++c) n += count_of(c);
    Matrix x(static_cast<Eigen::Index>(n), d);
    std::vector<int> y;
    y.reserve(n);
    Eigen::Index row = 0;
    for (int c = 0; c < config.classes; ++c) {
      for (std::size_t i = 0; i < count_of(c); ++i, ++row) {
        for (Eigen::Index j = 0; j < d; ++j) {
          x(row, j) = means(c, j) + config.noise_scale * normal(rng);
        }
        y.push_back(c);
      }
    }
    return EmbeddingDataset::create(std::move(x), std::move(y), config.classes);
  };

  DatasetBundle bundle;
  bundle.train = draw_split(1, [&](int c) { return freq[static_cast<std::size_t>(c)]; });
  bundle.val = draw_split(2, [&](int) { return config.val_per_class; });
  bundle.test = draw_split(3, [&](int) { return config.test_per_class; });
  return bundle;
}

EmbeddingDataset read_embedding_csv(const std::filesystem::path& path, int class_count) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = io::split(line, ',');
  if (header.size() < 2 || header[0] != "label") {
    throw DataError(path.string() + ": header must be label,f0,...");
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j + 1] != "f" + std::to_string(j)) {
      throw DataError(path.string() + ": unexpected header column '" +
                      std::string(header[j + 1]) + "'");
    }
  }

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = io::split(line, ',');
    const std::string ctx = path.string() + " row " + std::to_string(row);
    if (cells.size() != d + 1) {
      throw DataError(ctx + ": dimension mismatch, expected " + std::to_string(d) +
                      " coordinates, got " + std::to_string(cells.size() - 1));
    }
    long long y = io::parse_int(cells[0], ctx);
    if (y < 0 || (class_count > 0 && y >= class_count)) {
      throw DataError(ctx + ": label " + std::to_string(y) + " out of range");
    }
    labels.push_back(static_cast<int>(y));
    for (std::size_t j = 0; j < d; ++j) values.push_back(io::parse_double(cells[j + 1], ctx));
  }
  int c = class_count;
  if (c <= 0) c = labels.empty() ? 1 : *std::max_element(labels.begin(), labels.end()) + 1;
  Matrix x = Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(labels.size()),
                                static_cast<Eigen::Index>(d));
  return EmbeddingDataset::create(std::move(x), std::move(labels), c);
}

void write_embedding_csv(const std::filesystem::path& path, const EmbeddingDataset& data) {
  std::string out = "label";
  for (std::size_t j = 0; j < data.dim(); ++j) out += ",f" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out += std::to_string(data.labels[i]);
    for (double v : data.feature(i)) {
      out += ',';
      out += io::format_double(v);
    }
    out += '\n';
  }
  io::write_file_atomic(path, out);
}

namespace {

EmbeddingDataset with_class_count(EmbeddingDataset ds, int class_count) {
  if (ds.class_count == class_count) return ds;
  return EmbeddingDataset::create(std::move(ds.features), std::move(ds.labels), class_count);
}

void check_balanced(const EmbeddingDataset& ds, const char* split,
                    std::vector<std::string>& warnings) {
  if (ds.class_frequency.empty()) return;
  auto [lo, hi] = std::minmax_element(ds.class_frequency.begin(), ds.class_frequency.end());
  if (*lo == *hi) return;
  std::string msg = std::string(split) + " split is unbalanced; per-class counts:";
  for (std::size_t c = 0; c < ds.class_frequency.size(); ++c) {
    msg += ' ' + std::to_string(c) + ':' + std::to_string(ds.class_frequency[c]);
  }
  warnings.push_back(std::move(msg));
}

}  // namespace

LoadedBundle load_embeddings(const SplitPaths& paths) {
  LoadedBundle out;
  auto train = read_embedding_csv(paths.train, paths.class_count);
  auto val = read_embedding_csv(paths.val, paths.class_count);
  auto test = read_embedding_csv(paths.test, paths.class_count);
  if (val.dim() != train.dim() || test.dim() != train.dim()) {
    throw DataError("dimension mismatch across splits: train " + std::to_string(train.dim()) +
                    ", val " + std::to_string(val.dim()) + ", test " +
                    std::to_string(test.dim()));
  }
  const int c = std::max({train.class_count, val.class_count, test.class_count});
  out.bundle.train = with_class_count(std::move(train), c);
  out.bundle.val = with_class_count(std::move(val), c);
  out.bundle.test = with_class_count(std::move(test), c);
  check_balanced(out.bundle.val, "val", out.warnings);
  check_balanced(out.bundle.test, "test", out.warnings);
  return out;
}

SplitPaths read_manifest(const std::filesystem::path& manifest) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(manifest.string() + ": " + e.what());
  }
  auto base = manifest.parent_path();
  SplitPaths p;
  try {
    p.train = base / j.at("train").get<std::string>();
    p.val = base / j.at("val").get<std::string>();
    p.test = base / j.at("test").get<std::string>();
    p.class_count = j.value("classes", 0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(manifest.string() + ": " + e.what());
  }
  return p;
}

void write_manifest(const std::filesystem::path& manifest, const SplitPaths& paths) {
  auto base = manifest.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    if (p.is_relative() || base.empty()) return p.generic_string();
    auto r = p.lexically_relative(base);
    return (r.empty() ? p : r).generic_string();
  };
  nlohmann::ordered_json j;
  j["train"] = rel(paths.train);
  j["val"] = rel(paths.val);
  j["test"] = rel(paths.test);
  if (paths.class_count > 0) j["classes"] = paths.class_count;
  io::write_file_atomic(manifest, j.dump(2) + "\n");
}

FoldAssignment assign_folds(std::span<const std::size_t> frequency, FoldThresholds thresholds) {
  if (!(thresholds.many_min > thresholds.few_max && thresholds.few_max > 0)) {
    throw ConfigError("fold thresholds need many_min > few_max > 0");
  }
  FoldAssignment a;
  a.thresholds = thresholds;
  a.fold.reserve(frequency.size());
  for (std::size_t f : frequency) {
    if (f >= thresholds.many_min) {
      a.fold.push_back(Fold::Many);
    } else if (f < thresholds.few_max) {
      a.fold.push_back(Fold::Few);
    } else {
      a.fold.push_back(Fold::Medium);
    }
  }
  return a;
}

FoldAssignment assign_folds(const EmbeddingDataset& train, FoldThresholds thresholds) {
  return assign_folds(train.class_frequency, thresholds);
}

std::vector<int> frequency_order(std::span<const std::size_t> frequency) {
  std::vector<int> order(frequency.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return frequency[static_cast<std::size_t>(a)] > frequency[static_cast<std::size_t>(b)];
  });
  return order;
}

std::array<SubsetSpec, 3> partition_subsets(const FoldAssignment& assignment,
                                            const EmbeddingDataset& train) {
  if (assignment.fold.size() != train.class_frequency.size()) {
    throw DataError("fold assignment does not match dataset class count");
  }
  auto order = frequency_order(train.class_frequency);
  std::array<std::vector<int>, 3> members;
  for (int c : order) members[fold_index(assignment.of(c))].push_back(c);

  // Folds are threshold-defined, so the sorted order must visit Many, then
  // Medium, then Few. Anything else means the assignment came from different
  // frequencies than this dataset.
  std::size_t last = 0;
  for (int c : order) {
    std::size_t f = fold_index(assignment.of(c));
    if (f < last) throw DataError("fold assignment is not contiguous in frequency order");
    last = f;
  }

  std::array<SubsetSpec, 3> out;
  for (Fold f : kFolds) {
    auto& m = members[fold_index(f)];
    if (m.empty()) throw EmptyFoldError(std::string(fold_name(f)));
    out[fold_index(f)] = SubsetSpec::create(f, std::move(m), train.class_count);
  }
  return out;
}

EmbeddingDataset relabel_for_expert(const EmbeddingDataset& data, const SubsetSpec& subset) {
  if (subset.class_count() != data.class_count) {
    throw DataError("subset built for a different class count");
  }
  const int k = static_cast<int>(subset.size());
  std::vector<int> labels(data.labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int local = subset.local(data.labels[i]);
    labels[i] = local >= 0 ? local : k;
  }
  return EmbeddingDataset::create(data.features, std::move(labels), k + 1);
}

}  // namespace cbe

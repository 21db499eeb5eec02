// SPDX-License-Identifier: Apache-2.0
#include "cbe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "cbe/error.hpp"
#include "cbe/io_util.hpp"

namespace cbe {

EvalReport fourfold_accuracy(std::span<const int> predictions, std::span<const int> labels,
                             const FoldAssignment& folds) {
  if (predictions.size() != labels.size()) throw DataError("predictions and labels differ in length");
  const std::size_t C = folds.fold.size();
  EvalReport r;
  std::vector<std::size_t> seen(C, 0);
  std::vector<std::size_t> hit(C, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw DataError("label outside fold assignment");
    const bool ok = predictions[i] == y;
    ++seen[static_cast<std::size_t>(y)];
    hit[static_cast<std::size_t>(y)] += ok ? 1 : 0;
    const auto f = fold_index(folds.of(y));
    ++r.fold_counts[f];
    r.fold_correct[f] += ok ? 1 : 0;
  }
  r.total = labels.size();
  for (std::size_t f = 0; f < 3; ++f) {
    r.correct += r.fold_correct[f];
    if (r.fold_counts[f] > 0) {
      r.fold_accuracy[f] = static_cast<double>(r.fold_correct[f]) / static_cast<double>(r.fold_counts[f]);
    }
  }
  if (r.total > 0) r.all = static_cast<double>(r.correct) / static_cast<double>(r.total);
  r.per_class.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (seen[c] > 0) r.per_class[c] = static_cast<double>(hit[c]) / static_cast<double>(seen[c]);
  }
  return r;
}

std::vector<int> argmax_rows(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < scores.cols(); ++j) {
      if (scores(i, j) > scores(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

EvalReport oracle_evaluate(std::span<const ExpertModel> experts, const EmbeddingDataset& test,
                           const FoldAssignment& folds) {
  if (experts.empty()) throw std::invalid_argument("oracle needs experts");
  std::vector<Matrix> logits;
  for (const auto& e : experts) logits.push_back(expert_logits(e, test.features));
  std::vector<int> pred(test.size(), -1);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int y = test.labels[i];
    for (std::size_t e = 0; e < experts.size(); ++e) {
      const auto& subset = experts[e].subset;
      if (!subset.contains(y)) continue;
      const auto row = logits[e].row(static_cast<Eigen::Index>(i));
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < static_cast<Eigen::Index>(subset.size()); ++j) {
        if (row(j) > row(best)) best = j;
      }
      pred[i] = subset.classes[static_cast<std::size_t>(best)];
      break;
    }
  }
  return fourfold_accuracy(pred, test.labels, folds);
}

double ExpertConfusionMatrix::diagonal_mass() const {
  std::size_t total = 0;
  std::size_t diagonal = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) total += counts[r][c];
    diagonal += counts[r][r];
  }
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(diagonal) / static_cast<double>(total);
}

double ExpertConfusionMatrix::mean_diagonal_percent() const {
  double sum = 0.0;
  int rows = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    std::size_t n = 0;
    for (auto c : counts[r]) n += c;
    if (n == 0) continue;
    sum += percent[r][r];
    ++rows;
  }
  return rows == 0 ? 0.0 : sum / rows;
}

ExpertConfusionMatrix expert_confusion_matrix(std::span<const int> fused_predictions,
                                              std::span<const int> labels,
                                              std::span<const SubsetSpec> subsets,
                                              const FoldAssignment& folds) {
  if (fused_predictions.size() != labels.size()) throw DataError("predictions and labels differ in length");
  ExpertConfusionMatrix m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = fold_index(folds.of(labels[i]));
    for (const auto& s : subsets) {
      if (s.contains(fused_predictions[i])) {
        ++m.counts[row][fold_index(s.expert_id)];
        break;
      }
    }
  }
  for (std::size_t r = 0; r < 3; ++r) {
    std::size_t n = 0;
    for (auto c : m.counts[r]) n += c;
    for (std::size_t c = 0; c < 3; ++c) {
      m.percent[r][c] = n == 0 ? 0.0 : 100.0 * static_cast<double>(m.counts[r][c]) / static_cast<double>(n);
    }
  }
  return m;
}

ExpertConfusionMatrix expert_confusion_matrix(std::span<const MemberOutputs> test_partials,
                                              std::span<const int> labels,
                                              std::span<const SubsetSpec> subsets,
                                              const FoldAssignment& folds,
                                              const FusionModel& model) {
  Matrix fused = fuse_all(test_partials, model);
  auto pred = argmax_rows(fused);
  return expert_confusion_matrix(pred, labels, subsets, folds);
}

std::size_t ConfidenceHistogram::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

ConfidenceHistogram msp_histogram(const Matrix& posteriors, std::size_t bins, std::string expert,
                                  std::string population) {
  if (bins == 0) throw std::invalid_argument("histogram needs at least one bin");
  ConfidenceHistogram h;
  h.expert = std::move(expert);
  h.population = std::move(population);
  h.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(static_cast<double>(b) / static_cast<double>(bins));
  double sum = 0.0;
  for (Eigen::Index i = 0; i < posteriors.rows(); ++i) {
    const double msp = posteriors.row(i).maxCoeff();
    sum += msp;
    auto b = static_cast<std::size_t>(std::floor(msp * static_cast<double>(bins)));
    ++h.counts[std::min(b, bins - 1)];
  }
  if (posteriors.rows() > 0) h.mean_msp = sum / static_cast<double>(posteriors.rows());
  return h;
}

ConfidenceHistogram msp_histogram(const ExpertModel& expert, const Matrix& samples,
                                  std::size_t bins, MspSource source, std::string population) {
  Matrix p = expert_probabilities(expert, samples);
  if (source == MspSource::Expanded) {
    const auto layout = MemberLayout::from_subset(expert.subset);
    Matrix full(p.rows(), layout.class_count());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      full.row(i) = expand_partial(row_span(p, i), layout).probabilities.transpose();
    }
    p = std::move(full);
  }
  return msp_histogram(p, bins, std::string(fold_name(expert.subset.expert_id)), std::move(population));
}

std::vector<AblationRow> take_one_out_ablation(std::span<const ExternalPosteriorTable> models,
                                               std::span<const int> labels,
                                               const FoldAssignment& folds,
                                               FusionStrategy strategy,
                                               const AblationCalibration* calibration) {
  if (models.size() < 2) throw std::invalid_argument("take-one-out needs at least two models");
  if (strategy == FusionStrategy::Calibrate &&
      (!calibration || calibration->val_models.size() != models.size())) {
    throw ConfigError("calibrated ablation needs one validation table per model");
  }

  auto evaluate = [&](const std::vector<std::size_t>& keep, std::string name) {
    std::vector<ExternalPosteriorTable> test;
    AblationRow row;
    row.name = std::move(name);
    for (auto k : keep) {
      test.push_back(models[k]);
      row.members.push_back(models[k].model);
    }
    Matrix fused;
    if (strategy == FusionStrategy::Calibrate) {
      std::vector<MemberOutputs> val;
      for (auto k : keep) val.push_back(member_from_table(calibration->val_models[k]));
      auto params = train_joint_calibration(val, calibration->val_labels, calibration->options).params;
      fused = fuse_models(test, strategy, &params);
    } else {
      fused = fuse_models(test, strategy);
    }
    row.report = fourfold_accuracy(argmax_rows(fused), labels, folds);
    return row;
  };

  std::vector<AblationRow> rows;
  std::vector<std::size_t> all(models.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  rows.push_back(evaluate(all, "all"));
  for (std::size_t out = 0; out < models.size(); ++out) {
    std::vector<std::size_t> keep;
    for (auto i : all) {
      if (i != out) keep.push_back(i);
    }
    rows.push_back(evaluate(keep, "without " + models[out].model));
  }
  return rows;
}

namespace {

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

std::string opt_text(const std::optional<double>& v) {
  if (!v) return "     n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%8.2f", 100.0 * *v);
  return buf;
}

}  // namespace

nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  for (Fold f : kFolds) j[std::string(fold_name(f))] = opt_json(r.accuracy(f));
  j["all"] = opt_json(r.all);
  nlohmann::ordered_json counts;
  for (Fold f : kFolds) counts[std::string(fold_name(f))] = r.fold_counts[fold_index(f)];
  counts["all"] = r.total;
  j["samples"] = counts;
  auto per_class = nlohmann::ordered_json::array();
  for (const auto& v : r.per_class) per_class.push_back(opt_json(v));
  j["per_class"] = per_class;
  return j;
}

std::string to_text(const EvalReport& r, std::string_view title) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-24s %8s %8s %8s %8s\n", std::string(title).c_str(), "Many",
                "Medium", "Few", "All");
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-24s %s %s %s %s\n", "accuracy (%)", opt_text(r.accuracy(Fold::Many)).c_str(),
                opt_text(r.accuracy(Fold::Medium)).c_str(), opt_text(r.accuracy(Fold::Few)).c_str(),
                opt_text(r.all).c_str());
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-24s %8zu %8zu %8zu %8zu\n", "samples", r.fold_counts[0],
                r.fold_counts[1], r.fold_counts[2], r.total);
  out += buf;
  return out;
}

nlohmann::ordered_json to_json(const ExpertConfusionMatrix& m) {
  nlohmann::ordered_json j;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < 3; ++r) {
    rows.push_back({{"fold", fold_name(kFolds[r])},
                    {"percent", std::vector<double>(m.percent[r].begin(), m.percent[r].end())},
                    {"counts", std::vector<std::size_t>(m.counts[r].begin(), m.counts[r].end())}});
  }
  j["rows"] = rows;
  j["diagonal_mass"] = m.diagonal_mass();
  j["mean_diagonal_percent"] = m.mean_diagonal_percent();
  return j;
}

std::string to_csv(const ExpertConfusionMatrix& m) {
  std::string out = "true_fold,expert_many,expert_medium,expert_few\n";
  for (std::size_t r = 0; r < 3; ++r) {
    out += std::string(fold_name(kFolds[r]));
    for (double v : m.percent[r]) out += "," + io::format_double(v);
    out += '\n';
  }
  return out;
}

std::string to_csv(const ConfidenceHistogram& h) {
  std::string out = "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    out += io::format_double(h.edges[b]) + "," + io::format_double(h.edges[b + 1]) + "," +
           std::to_string(h.counts[b]) + "\n";
  }
  return out;
}

nlohmann::ordered_json to_json(std::span<const AblationRow> rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["name"] = r.name;
    j["members"] = r.members;
    j["report"] = to_json(r.report);
    arr.push_back(std::move(j));
  }
  return arr;
}

std::string to_text(std::span<const AblationRow> rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-32s %8s %8s %8s %8s\n", "ensemble", "Many", "Medium", "Few", "All");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-32s %s %s %s %s\n", r.name.c_str(),
                  opt_text(r.report.accuracy(Fold::Many)).c_str(),
                  opt_text(r.report.accuracy(Fold::Medium)).c_str(),
                  opt_text(r.report.accuracy(Fold::Few)).c_str(), opt_text(r.report.all).c_str());
    out += buf;
  }
  return out;
}

}  // namespace cbe

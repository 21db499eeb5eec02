// SPDX-License-Identifier: Apache-2.0
#include "pipeline.hpp"

#include "cbe/error.hpp"
#include "cbe/parallel.hpp"

namespace cbe::cli {

namespace {
constexpr std::uint64_t kDataTag = 0x64617461;
}

DatasetBundle build_dataset(const RunConfig& config, std::vector<std::string>* warnings) {
  if (config.dataset.source == DatasetSection::Source::Generate) {
    auto g = config.dataset.generate;
    g.thresholds = config.dataset.thresholds;
    return generate_longtailed(g, derive_seed(config.training.seed, {kDataTag}));
  }
  auto loaded = load_embeddings(read_manifest(config.base_dir / config.dataset.manifest));
  if (warnings) warnings->insert(warnings->end(), loaded.warnings.begin(), loaded.warnings.end());
  return std::move(loaded.bundle);
}

std::vector<ExpertModel> TrainedSystem::expert_models() const {
  std::vector<ExpertModel> out;
  for (const auto& e : experts) out.push_back(e.expert);
  return out;
}

BaselineModel train_baseline_model(const RunConfig& config, const DatasetBundle& bundle) {
  return train_baseline(bundle, config.baseline_train(), config.training.hidden);
}

BaselineModel train_uniform_model(const RunConfig& config, const DatasetBundle& bundle,
                                  const BaselineModel& baseline) {
  return finetune_uniform_classifier(baseline, bundle, config.finetune_train());
}

std::array<ExpertSelection, 3> train_expert_models(const RunConfig& config,
                                                   const DatasetBundle& bundle,
                                                   const std::array<SubsetSpec, 3>& subsets,
                                                   const BaselineModel& baseline,
                                                   std::size_t threads) {
  std::array<ExpertSelection, 3> out;
  // Grid points inside each expert get the remaining threads.
  const std::size_t outer = std::min<std::size_t>(threads, 3);
  const std::size_t inner = std::max<std::size_t>(1, threads / outer);
  parallel_for(3, outer, [&](std::size_t f) {
    out[f] = select_expert_hyperparams(baseline, subsets[f], bundle, config.expert_grid(),
                                       config.expert_train(), inner);
  });
  return out;
}

TrainedSystem train_system(const RunConfig& config, std::size_t threads) {
  TrainedSystem s;
  s.bundle = build_dataset(config);
  s.folds = assign_folds(s.bundle.train, config.dataset.thresholds);
  s.subsets = partition_subsets(s.folds, s.bundle.train);
  s.baseline = train_baseline_model(config, s.bundle);
  s.uniform = train_uniform_model(config, s.bundle, s.baseline);
  s.experts = train_expert_models(config, s.bundle, s.subsets, s.baseline, threads);
  return s;
}

std::vector<MemberOutputs> expert_outputs(std::span<const ExpertModel> experts,
                                          const EmbeddingDataset& data) {
  std::vector<MemberOutputs> out;
  for (const auto& e : experts) {
    out.push_back(member_from_logits(MemberLayout::from_subset(e.subset), expert_logits(e, data.features)));
  }
  return out;
}

ExternalPosteriorTable network_posteriors(const NetworkParams& params, const EmbeddingDataset& data,
                                          std::string name) {
  ExternalPosteriorTable t;
  t.model = std::move(name);
  t.probabilities = forward_logits_batch(params, data.features);
  softmax_rows(t.probabilities);
  t.sample_ids.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) t.sample_ids[i] = static_cast<long long>(i);
  return t;
}

FusionModel train_fusion(const RunConfig& config, FusionStrategy strategy,
                         std::span<const MemberOutputs> val, std::span<const int> val_labels,
                         const std::array<SubsetSpec, 3>& subsets) {
  FusionModel m;
  m.strategy = strategy;
  m.kl = config.fusion.kl;
  switch (strategy) {
    case FusionStrategy::KlMin:
    case FusionStrategy::SoftVote:
      break;
    case FusionStrategy::Select: {
      std::vector<MemberLayout> layouts;
      for (const auto& s : subsets) layouts.push_back(MemberLayout::from_subset(s));
      auto owner = owning_member(val_labels, layouts);
      m.selector = train_expert_selector(val, owner, config.fusion_train());
      break;
    }
    case FusionStrategy::Stack:
      m.stacker = train_stacker(val, val_labels, subsets.front().class_count(), config.fusion_train());
      break;
    case FusionStrategy::Calibrate:
      m.calibration = train_joint_calibration(val, val_labels, config.fusion.calibration).params;
      break;
  }
  return m;
}

BenchmarkResult evaluate_system(const RunConfig& config, const TrainedSystem& s, std::size_t threads) {
  BenchmarkResult r;
  const auto& test = s.bundle.test;
  const auto& val = s.bundle.val;

  auto baseline_table = network_posteriors(s.baseline.params, test, "baseline");
  auto uniform_table = network_posteriors(s.uniform.params, test, "uniform");
  r.baseline = fourfold_accuracy(argmax_rows(baseline_table.probabilities), test.labels, s.folds);
  r.uniform = fourfold_accuracy(argmax_rows(uniform_table.probabilities), test.labels, s.folds);

  const auto experts = s.expert_models();
  r.oracle = oracle_evaluate(experts, test, s.folds);
  for (std::size_t f = 0; f < 3; ++f) {
    r.selected_rho[f] = s.experts[f].rho;
    r.selected_frozen[f] = s.experts[f].frozen_layers;
  }

  const auto val_out = expert_outputs(experts, val);
  const auto test_out = expert_outputs(experts, test);

  for (std::size_t f = 0; f < 3; ++f) {
    const auto& m = test_out[f];
    Matrix full(m.probabilities.rows(), test.class_count);
    for (Eigen::Index i = 0; i < full.rows(); ++i) {
      full.row(i) = expand_partial(row_span(m.probabilities, i), m.layout).probabilities.transpose();
    }
    r.single_expert[f] = fourfold_accuracy(argmax_rows(full), test.labels, s.folds);
  }

  Matrix calibrated;
  for (auto strategy : {FusionStrategy::KlMin, FusionStrategy::SoftVote, FusionStrategy::Select,
                        FusionStrategy::Stack, FusionStrategy::Calibrate}) {
    auto model = train_fusion(config, strategy, val_out, val.labels, s.subsets);
    Matrix fused = fuse_all(test_out, model, threads);
    auto pred = argmax_rows(fused);
    r.fusion[strategy] = fourfold_accuracy(pred, test.labels, s.folds);
    if (strategy == FusionStrategy::SoftVote) {
      r.confusion_softvote = expert_confusion_matrix(pred, test.labels, s.subsets, s.folds);
    } else if (strategy == FusionStrategy::Calibrate) {
      r.confusion_calibrate = expert_confusion_matrix(pred, test.labels, s.subsets, s.folds);
      calibrated = std::move(fused);
    }
  }

  ExternalPosteriorTable experts_table = baseline_table;
  experts_table.model = "experts";
  experts_table.probabilities = calibrated;
  std::vector<ExternalPosteriorTable> tables{baseline_table, uniform_table, experts_table};
  r.ablation = take_one_out_ablation(tables, test.labels, s.folds);

  // Confidence of the Many and Few experts on the Many test samples the Many
  // expert classifies correctly.
  const auto& many = test_out[fold_index(Fold::Many)];
  const auto& few = test_out[fold_index(Fold::Few)];
  const auto many_pred = argmax_rows(many.probabilities);
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int local = s.subsets[fold_index(Fold::Many)].local(test.labels[i]);
    if (local >= 0 && many_pred[i] == local) rows.push_back(static_cast<Eigen::Index>(i));
  }
  Matrix many_rows(static_cast<Eigen::Index>(rows.size()), many.probabilities.cols());
  Matrix few_rows(static_cast<Eigen::Index>(rows.size()), few.probabilities.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    many_rows.row(static_cast<Eigen::Index>(k)) = many.probabilities.row(rows[k]);
    few_rows.row(static_cast<Eigen::Index>(k)) = few.probabilities.row(rows[k]);
  }
  r.msp_population = rows.size();
  r.msp_many_expert = msp_histogram(many_rows).mean_msp;
  r.msp_few_expert = msp_histogram(few_rows).mean_msp;
  return r;
}

BenchmarkResult run_benchmark(const RunConfig& config, std::size_t threads) {
  return evaluate_system(config, train_system(config, threads), threads);
}

}  // namespace cbe::cli

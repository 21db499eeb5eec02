// SPDX-License-Identifier: Apache-2.0
#include "cbe/experts.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "cbe/error.hpp"
#include "cbe/io_util.hpp"
#include "cbe/parallel.hpp"

namespace cbe {

namespace {

constexpr std::uint64_t kInitTag = 0x696e6974;
constexpr std::uint64_t kHeadTag = 0x68656164;
constexpr std::uint64_t kGridTag = 0x67726964;

Eigen::Index argmax(const auto& row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = j;
  }
  return best;
}

}  // namespace

BaselineModel train_baseline(const DatasetBundle& bundle, const TrainConfig& config,
                             std::span<const std::size_t> hidden) {
  std::vector<std::size_t> dims{bundle.train.dim()};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(static_cast<std::size_t>(bundle.train.class_count));
  Rng init(derive_seed(config.seed, {kInitTag}));
  auto params = NetworkParams::init_gaussian(dims, init);
  TrainConfig cfg = config;
  cfg.sampler = SamplerMode::instance_balanced();
  auto trained = train_network(std::move(params), bundle.train, cfg);
  return {std::move(trained.params), std::move(trained.loss_trace)};
}

BaselineModel finetune_uniform_classifier(const BaselineModel& baseline,
                                          const DatasetBundle& bundle, TrainConfig config) {
  config.frozen_layers = baseline.params.num_layers() - 1;
  config.sampler = SamplerMode::uniform_class();
  auto trained = train_network(baseline.params, bundle.train, config);
  return {std::move(trained.params), std::move(trained.loss_trace)};
}

ExpertModel train_expert(const BaselineModel& baseline, const SubsetSpec& subset,
                         const DatasetBundle& bundle, double rho, std::size_t frozen_layers,
                         TrainConfig config) {
  if (subset.size() == 0) throw EmptyFoldError(std::string(fold_name(subset.expert_id)));
  if (!(rho >= 1.0)) throw ConfigError("undersampling ratio must be >= 1");
  const auto& base = baseline.params;
  if (frozen_layers >= base.num_layers()) {
    throw ConfigError("expert frozen_layers must leave the head trainable");
  }

  ExpertModel expert;
  expert.subset = subset;
  expert.rho = rho;
  expert.frozen_layers = frozen_layers;
  expert.params.layers.assign(base.layers.begin(), base.layers.end() - 1);

  const std::size_t head_in = static_cast<std::size_t>(base.layers.back().weight.cols());
  const std::size_t head_dims[] = {head_in, subset.size() + 1};
  Rng head_rng(derive_seed(config.seed, {kHeadTag}));
  expert.params.layers.push_back(NetworkParams::init_gaussian(head_dims, head_rng).layers.front());

  config.frozen_layers = frozen_layers;
  config.sampler = SamplerMode::reject_undersampled(rho);
  auto relabelled = relabel_for_expert(bundle.train, subset);
  expert.params = train_network(std::move(expert.params), relabelled, config).params;
  return expert;
}

Matrix expert_logits(const ExpertModel& expert, const Matrix& x) {
  Matrix z = forward_logits_batch(expert.params, x);
  if (expert.apply_reject_correction) {
    z.col(static_cast<Eigen::Index>(expert.reject_index())).array() += std::log(expert.rho);
  }
  return z;
}

Matrix expert_probabilities(const ExpertModel& expert, const Matrix& x) {
  Matrix p = expert_logits(expert, x);
  softmax_rows(p);
  return p;
}

PartialPosterior expert_partial_posterior(const ExpertModel& expert, std::span<const double> x) {
  PartialPosterior out;
  out.expert_id = expert.subset.expert_id;
  out.logits = forward_logits(expert.params, x);
  if (expert.apply_reject_correction) {
    out.logits[static_cast<Eigen::Index>(expert.reject_index())] += std::log(expert.rho);
  }
  out.probabilities = softmax(std::span<const double>(out.logits.data(), out.logits.size()));
  return out;
}

double expert_subset_accuracy(const ExpertModel& expert, const EmbeddingDataset& data) {
  Matrix z = expert_logits(expert, data.features);
  std::size_t hits = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int local = expert.subset.local(data.labels[i]);
    if (local < 0) continue;
    ++total;
    if (argmax(z.row(static_cast<Eigen::Index>(i))) == local) ++hits;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

ExpertSelection select_expert_hyperparams(const BaselineModel& baseline, const SubsetSpec& subset,
                                          const DatasetBundle& bundle, const ExpertGrid& grid,
                                          const TrainConfig& config, std::size_t threads) {
  if (grid.rho_grid.empty() || grid.frozen_grid.empty()) {
    throw ConfigError("expert hyperparameter grids must be nonempty");
  }
  struct Point {
    double rho;
    std::size_t frozen;
    ExpertModel model;
    double score = 0.0;
  };
  std::vector<Point> points;
  for (double rho : grid.rho_grid) {
    for (std::size_t frozen : grid.frozen_grid) points.push_back({rho, frozen, {}});
  }

  parallel_for(points.size(), threads, [&](std::size_t i) {
    TrainConfig cfg = config;
    cfg.seed = derive_seed(config.seed, {kGridTag, fold_index(subset.expert_id), i});
    auto& p = points[i];
    p.model = train_expert(baseline, subset, bundle, p.rho, p.frozen, cfg);
    p.score = expert_subset_accuracy(p.model, bundle.val);
  });

  std::size_t best = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const auto& a = points[i];
    const auto& b = points[best];
    if (a.score > b.score || (a.score == b.score && (a.rho > b.rho ||
                                                     (a.rho == b.rho && a.frozen > b.frozen)))) {
      best = i;
    }
  }

  ExpertSelection sel;
  for (const auto& p : points) sel.table.push_back({p.rho, p.frozen, p.score});
  sel.rho = points[best].rho;
  sel.frozen_layers = points[best].frozen;
  sel.expert = std::move(points[best].model);
  return sel;
}

void save_expert(const std::filesystem::path& path, const ExpertModel& expert) {
  nlohmann::json j;
  j["format"] = "cbe-expert";
  j["version"] = 1;
  j["expert_id"] = fold_name(expert.subset.expert_id);
  j["class_count"] = expert.subset.class_count();
  j["classes"] = expert.subset.classes;
  j["rho"] = expert.rho;
  j["frozen_layers"] = expert.frozen_layers;
  j["apply_reject_correction"] = expert.apply_reject_correction;
  j["network"] = expert.params;
  io::write_file_atomic(path, j.dump() + "\n");
}

ExpertModel load_expert(const std::filesystem::path& path) {
  try {
    auto j = nlohmann::json::parse(io::read_file(path));
    if (j.at("format").get<std::string>() != "cbe-expert") {
      throw DataError(path.string() + ": not an expert checkpoint");
    }
    if (j.at("version").get<int>() != 1) throw DataError(path.string() + ": unsupported version");
    auto fold = parse_fold(j.at("expert_id").get<std::string>());
    if (!fold) throw DataError(path.string() + ": unknown expert_id");
    ExpertModel e;
    e.subset = SubsetSpec::create(*fold, j.at("classes").get<std::vector<int>>(),
                                  j.at("class_count").get<int>());
    e.rho = j.at("rho").get<double>();
    e.frozen_layers = j.at("frozen_layers").get<std::size_t>();
    e.apply_reject_correction = j.at("apply_reject_correction").get<bool>();
    e.params = j.at("network").get<NetworkParams>();
    if (e.params.output_dim() != e.width()) {
      throw DataError(path.string() + ": head width does not match subset size + 1");
    }
    return e;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_baseline(const std::filesystem::path& path, const BaselineModel& model) {
  save_network(path, model.params);
}

BaselineModel load_baseline(const std::filesystem::path& path) { return {load_network(path), {}}; }

}  // namespace cbe

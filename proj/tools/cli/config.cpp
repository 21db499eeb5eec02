// SPDX-License-Identifier: Apache-2.0
#include "config.hpp"

#include "cbe/error.hpp"
#include "cbe/io_util.hpp"

namespace cbe::cli {

namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

constexpr std::uint64_t kBaselineTag = 0x62617365;
constexpr std::uint64_t kFinetuneTag = 0x756e6966;
constexpr std::uint64_t kExpertTag = 0x65787074;
constexpr std::uint64_t kFusionTag = 0x66757365;

}  // namespace

void RunConfig::validate() const {
  if (dataset.source == DatasetSection::Source::Load && dataset.manifest.empty()) {
    throw ConfigError("dataset.manifest is required when dataset.source is 'load'");
  }
  if (experts.rho_grid.empty() || experts.frozen_grid.empty()) {
    throw ConfigError("experts.rho_grid and experts.frozen_grid must be nonempty");
  }
  for (double r : experts.rho_grid) {
    if (!(r >= 1.0)) throw ConfigError("experts.rho_grid values must be >= 1");
  }
  for (auto f : experts.frozen_grid) {
    if (f > training.hidden.size()) {
      throw ConfigError("experts.frozen_grid value exceeds the number of backbone layers");
    }
  }
  if (!(dataset.thresholds.many_min > dataset.thresholds.few_max && dataset.thresholds.few_max > 0)) {
    throw ConfigError("dataset.thresholds need many_min > few_max > 0");
  }
  baseline_train().validate(training.hidden.size() + 1);
  finetune_train().validate(training.hidden.size() + 1);
  expert_train().validate(training.hidden.size() + 1);
  fusion_train().validate(1);
  if (fusion.kl.steps < 0 || !(fusion.kl.step_size > 0.0)) throw ConfigError("fusion.kl options invalid");
  if (fusion.calibration.steps < 0 || !(fusion.calibration.step_size > 0.0)) {
    throw ConfigError("fusion.calibration options invalid");
  }
}

TrainConfig RunConfig::baseline_train() const {
  TrainConfig t;
  t.lr0 = training.lr0;
  t.epochs = training.epochs;
  t.batch_size = training.batch_size;
  t.weight_decay = training.weight_decay;
  t.momentum = training.momentum;
  t.seed = derive_seed(training.seed, {kBaselineTag});
  return t;
}

TrainConfig RunConfig::finetune_train() const {
  TrainConfig t = baseline_train();
  t.lr0 = finetune.lr0;
  t.epochs = finetune.epochs;
  t.seed = derive_seed(training.seed, {kFinetuneTag});
  return t;
}

TrainConfig RunConfig::expert_train() const {
  TrainConfig t = baseline_train();
  t.lr0 = experts.lr0;
  t.epochs = experts.epochs;
  t.seed = derive_seed(training.seed, {kExpertTag});
  return t;
}

TrainConfig RunConfig::fusion_train() const {
  TrainConfig t;
  t.lr0 = fusion.lr0;
  t.epochs = fusion.epochs;
  t.batch_size = fusion.batch_size;
  t.weight_decay = 0.0;
  t.momentum = training.momentum;
  t.seed = derive_seed(training.seed, {kFusionTag});
  return t;
}

ExpertGrid RunConfig::expert_grid() const { return {experts.rho_grid, experts.frozen_grid}; }

std::filesystem::path RunConfig::work_dir() const { return base_dir / paths.work_dir; }

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      std::string source = d.value("source", "generate");
      if (source == "generate") {
        c.dataset.source = DatasetSection::Source::Generate;
      } else if (source == "load") {
        c.dataset.source = DatasetSection::Source::Load;
      } else {
        throw ConfigError("dataset.source must be 'generate' or 'load'");
      }
      if (d.contains("generate")) {
        const auto& g = d["generate"];
        auto& gc = c.dataset.generate;
        read_opt(g, "classes", gc.classes);
        read_opt(g, "dim", gc.dim);
        read_opt(g, "n_max", gc.n_max);
        read_opt(g, "alpha", gc.alpha);
        read_opt(g, "val_per_class", gc.val_per_class);
        read_opt(g, "test_per_class", gc.test_per_class);
        read_opt(g, "noise_scale", gc.noise_scale);
      }
      read_opt(d, "manifest", c.dataset.manifest);
      if (d.contains("thresholds")) {
        read_opt(d["thresholds"], "many_min", c.dataset.thresholds.many_min);
        read_opt(d["thresholds"], "few_max", c.dataset.thresholds.few_max);
      }
      c.dataset.generate.thresholds = c.dataset.thresholds;
    }
    if (!j.contains("training") || !j["training"].contains("seed")) {
      throw ConfigError("training.seed is required");
    }
    const auto& t = j["training"];
    read_opt(t, "lr0", c.training.lr0);
    read_opt(t, "epochs", c.training.epochs);
    read_opt(t, "batch_size", c.training.batch_size);
    read_opt(t, "weight_decay", c.training.weight_decay);
    read_opt(t, "momentum", c.training.momentum);
    read_opt(t, "seed", c.training.seed);
    read_opt(t, "hidden", c.training.hidden);
    if (j.contains("finetune")) {
      read_opt(j["finetune"], "lr0", c.finetune.lr0);
      read_opt(j["finetune"], "epochs", c.finetune.epochs);
    }
    if (j.contains("experts")) {
      const auto& e = j["experts"];
      read_opt(e, "rho_grid", c.experts.rho_grid);
      read_opt(e, "frozen_grid", c.experts.frozen_grid);
      read_opt(e, "lr0", c.experts.lr0);
      read_opt(e, "epochs", c.experts.epochs);
    }
    if (j.contains("fusion")) {
      const auto& f = j["fusion"];
      if (f.contains("strategy")) {
        auto s = parse_strategy(f["strategy"].get<std::string>());
        if (!s) throw ConfigError("fusion.strategy must be one of kl|softvote|select|stack|calibrate");
        c.fusion.strategy = *s;
      }
      if (f.contains("kl")) {
        read_opt(f["kl"], "steps", c.fusion.kl.steps);
        read_opt(f["kl"], "step_size", c.fusion.kl.step_size);
        read_opt(f["kl"], "tol", c.fusion.kl.tol);
      }
      if (f.contains("calibration")) {
        read_opt(f["calibration"], "steps", c.fusion.calibration.steps);
        read_opt(f["calibration"], "step_size", c.fusion.calibration.step_size);
        read_opt(f["calibration"], "momentum", c.fusion.calibration.momentum);
      }
      read_opt(f, "lr0", c.fusion.lr0);
      read_opt(f, "epochs", c.fusion.epochs);
      read_opt(f, "batch_size", c.fusion.batch_size);
    }
    if (j.contains("paths")) read_opt(j["paths"], "work_dir", c.paths.work_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  const auto& g = c.dataset.generate;
  j["dataset"] = {
      {"source", c.dataset.source == DatasetSection::Source::Generate ? "generate" : "load"},
      {"generate",
       {{"classes", g.classes},
        {"dim", g.dim},
        {"n_max", g.n_max},
        {"alpha", g.alpha},
        {"val_per_class", g.val_per_class},
        {"test_per_class", g.test_per_class},
        {"noise_scale", g.noise_scale}}},
      {"manifest", c.dataset.manifest},
      {"thresholds",
       {{"many_min", c.dataset.thresholds.many_min}, {"few_max", c.dataset.thresholds.few_max}}}};
  j["training"] = {{"lr0", c.training.lr0},
                   {"epochs", c.training.epochs},
                   {"batch_size", c.training.batch_size},
                   {"weight_decay", c.training.weight_decay},
                   {"momentum", c.training.momentum},
                   {"seed", c.training.seed},
                   {"hidden", c.training.hidden}};
  j["finetune"] = {{"lr0", c.finetune.lr0}, {"epochs", c.finetune.epochs}};
  j["experts"] = {{"rho_grid", c.experts.rho_grid},
                  {"frozen_grid", c.experts.frozen_grid},
                  {"lr0", c.experts.lr0},
                  {"epochs", c.experts.epochs}};
  j["fusion"] = {
      {"strategy", strategy_name(c.fusion.strategy)},
      {"kl", {{"steps", c.fusion.kl.steps}, {"step_size", c.fusion.kl.step_size}, {"tol", c.fusion.kl.tol}}},
      {"calibration",
       {{"steps", c.fusion.calibration.steps},
        {"step_size", c.fusion.calibration.step_size},
        {"momentum", c.fusion.calibration.momentum}}},
      {"lr0", c.fusion.lr0},
      {"epochs", c.fusion.epochs},
      {"batch_size", c.fusion.batch_size}};
  j["paths"] = {{"work_dir", c.paths.work_dir}};
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  RunConfig c = config_from_json(j);
  c.base_dir = path.parent_path();
  return c;
}

RunConfig synth60_config(std::uint64_t seed) {
  RunConfig c;
  auto& g = c.dataset.generate;
  g.classes = 60;
  g.dim = 16;
  g.n_max = 500;
  g.alpha = 1.2;
  g.val_per_class = 20;
  g.test_per_class = 50;
  g.noise_scale = 0.82;
  c.training.seed = seed;
  c.experts.rho_grid = {1.0, 4.0, 16.0};
  c.experts.frozen_grid = {0, 1};
  return c;
}

}  // namespace cbe::cli

// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cbe/error.hpp"
#include "cbe/io_util.hpp"
#include "pipeline.hpp"

namespace cbe::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::size_t threads = 1;
  std::string strategy;
  std::string model;
  std::string split = "test";
  std::string out;
  std::vector<std::string> models;
  std::vector<std::string> val_models;
  std::uint64_t seed = 1;
};

// Everything a command needs about the data: the bundle and its fold structure.
struct DataContext {
  DatasetBundle bundle;
  FoldAssignment folds;
  std::array<SubsetSpec, 3> subsets;
};

class Command {
 public:
  Command(const Options& opt, std::ostream& out, std::ostream& err)
      : opt_(opt), out_(out), err_(err) {}

  void gen_data();
  void train_baseline();
  void train_experts();
  void dump_posteriors();
  void train_fusion();
  void evaluate();
  void oracle();
  void ablate();
  void report();
  void init_config();

 private:
  const RunConfig& config() {
    if (!config_) config_ = load_config(opt_.config);
    return *config_;
  }
  fs::path work(const fs::path& rel) { return config().work_dir() / rel; }

  const DataContext& data() {
    if (!data_) {
      std::vector<std::string> warnings;
      DataContext d;
      d.bundle = build_dataset(config(), &warnings);
      for (const auto& w : warnings) err_ << "warning: " << w << '\n';
      d.folds = assign_folds(d.bundle.train, config().dataset.thresholds);
      d.subsets = partition_subsets(d.folds, d.bundle.train);
      data_ = std::move(d);
    }
    return *data_;
  }

  const EmbeddingDataset& split(const std::string& name) {
    if (name == "train") return data().bundle.train;
    if (name == "val") return data().bundle.val;
    if (name == "test") return data().bundle.test;
    throw ConfigError("--split must be train, val or test");
  }

  std::vector<ExpertModel> experts() {
    std::vector<ExpertModel> out;
    for (Fold f : kFolds) {
      auto path = work(fs::path("experts") / (std::string(fold_name(f)) + ".json"));
      if (!fs::exists(path)) throw DataError("missing expert checkpoint " + path.string() + "; run train-experts");
      out.push_back(load_expert(path));
    }
    return out;
  }

  FusionStrategy strategy() {
    if (opt_.strategy.empty()) return config().fusion.strategy;
    auto s = parse_strategy(opt_.strategy);
    if (!s) throw ConfigError("--strategy must be one of kl|softvote|select|stack|calibrate");
    return *s;
  }

  fs::path fusion_path(FusionStrategy s) {
    return work("fusion_" + std::string(strategy_name(s)) + ".json");
  }

  // The fusion model for `s`: the --model file, the trained file in the work
  // directory, or (for the parameter-free strategies) a fresh model.
  FusionModel fusion_model(FusionStrategy s) {
    fs::path path = opt_.model.empty() ? fusion_path(s) : fs::path(opt_.model);
    if (fs::exists(path)) {
      auto m = load_fusion_model(path);
      if (m.strategy != s) {
        throw ConfigError(path.string() + " holds strategy '" + std::string(strategy_name(m.strategy)) +
                          "', not '" + std::string(strategy_name(s)) + "'");
      }
      return m;
    }
    if (s == FusionStrategy::KlMin || s == FusionStrategy::SoftVote) {
      FusionModel m;
      m.strategy = s;
      m.kl = config().fusion.kl;
      return m;
    }
    throw DataError("missing fusion model " + path.string() + "; run train-fusion");
  }

  void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
    io::write_file_atomic(path, j.dump(2) + "\n");
  }

  const Options& opt_;
  std::ostream& out_;
  std::ostream& err_;
  std::optional<RunConfig> config_;
  std::optional<DataContext> data_;
};

std::string loss_csv(const std::vector<double>& trace) {
  std::string s = "epoch,loss\n";
  for (std::size_t e = 0; e < trace.size(); ++e) s += std::to_string(e) + "," + io::format_double(trace[e]) + "\n";
  return s;
}

void Command::gen_data() {
  if (config().dataset.source != DatasetSection::Source::Generate) {
    throw ConfigError("gen-data needs dataset.source = 'generate'");
  }
  const auto& b = data().bundle;
  const fs::path dir = work("data");
  write_embedding_csv(dir / "train.csv", b.train);
  write_embedding_csv(dir / "val.csv", b.val);
  write_embedding_csv(dir / "test.csv", b.test);
  write_manifest(dir / "manifest.json", {"train.csv", "val.csv", "test.csv"});
  out_ << "wrote " << (dir / "manifest.json").string() << " (" << b.train.size() << " train, "
       << b.val.size() << " val, " << b.test.size() << " test samples)\n";
}

void Command::train_baseline() {
  const auto& b = data().bundle;
  auto baseline = train_baseline_model(config(), b);
  auto uniform = train_uniform_model(config(), b, baseline);
  save_baseline(work("baseline.json"), baseline);
  save_baseline(work("uniform.json"), uniform);
  io::write_file_atomic(work("baseline_loss.csv"), loss_csv(baseline.loss_trace));
  io::write_file_atomic(work("uniform_loss.csv"), loss_csv(uniform.loss_trace));
  out_ << "wrote " << work("baseline.json").string() << " and " << work("uniform.json").string() << '\n';
}

void Command::train_experts() {
  const auto& d = data();
  auto path = work("baseline.json");
  if (!fs::exists(path)) throw DataError("missing " + path.string() + "; run train-baseline");
  auto baseline = load_baseline(path);
  auto selections = train_expert_models(config(), d.bundle, d.subsets, baseline, opt_.threads);
  for (Fold f : kFolds) {
    const auto& sel = selections[fold_index(f)];
    const std::string name(fold_name(f));
    save_expert(work(fs::path("experts") / (name + ".json")), sel.expert);
    std::string table = "rho,frozen_layers,val_score,selected\n";
    for (const auto& row : sel.table) {
      const bool chosen = row.rho == sel.rho && row.frozen_layers == sel.frozen_layers;
      table += io::format_double(row.rho) + "," + std::to_string(row.frozen_layers) + "," +
               io::format_double(row.val_score) + "," + (chosen ? "1" : "0") + "\n";
    }
    io::write_file_atomic(work(fs::path("experts") / ("selection_" + name + ".csv")), table);
    out_ << name << ": " << sel.expert.subset.size() << " classes, rho " << io::format_double(sel.rho)
         << ", frozen " << sel.frozen_layers << '\n';
  }
}

void Command::dump_posteriors() {
  if (opt_.model.empty()) throw ConfigError("--model is required");
  const auto& data_split = split(opt_.split);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(opt_.model));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(opt_.model + ": " + e.what());
  }
  const std::string stem = fs::path(opt_.model).stem().string();
  fs::path out = opt_.out.empty() ? work(fs::path("posteriors") / (stem + "_" + opt_.split + ".csv"))
                                  : fs::path(opt_.out);
  const std::string format = j.value("format", "");
  if (format == "cbe-expert") {
    auto expert = load_expert(opt_.model);
    auto member = member_from_logits(MemberLayout::from_subset(expert.subset),
                                     expert_logits(expert, data_split.features));
    write_partial_posteriors(out, member, expert.subset.expert_id, expert.rho);
  } else if (format == "cbe-network") {
    auto model = load_baseline(opt_.model);
    write_full_posteriors(out, network_posteriors(model.params, data_split, stem));
  } else {
    throw DataError(opt_.model + ": not a network or expert checkpoint");
  }
  out_ << "wrote " << out.string() << '\n';
}

void Command::train_fusion() {
  const auto s = strategy();
  const auto& d = data();
  auto ex = experts();
  auto val = expert_outputs(ex, d.bundle.val);
  auto model = cli::train_fusion(config(), s, val, d.bundle.val.labels, d.subsets);
  save_fusion_model(fusion_path(s), model);
  out_ << "wrote " << fusion_path(s).string() << '\n';
}

void Command::evaluate() {
  const auto s = strategy();
  const auto& d = data();
  auto ex = experts();
  auto model = fusion_model(s);
  auto test = expert_outputs(ex, d.bundle.test);
  Matrix fused = fuse_all(test, model, opt_.threads);
  auto report = fourfold_accuracy(argmax_rows(fused), d.bundle.test.labels, d.folds);

  const std::string name(strategy_name(s));
  nlohmann::ordered_json j;
  j["strategy"] = name;
  j["report"] = to_json(report);
  write_json(work("eval_" + name + ".json"), j);
  const std::string text = to_text(report, "fusion: " + name);
  io::write_file_atomic(work("eval_" + name + ".txt"), text);

  ExternalPosteriorTable table;
  table.model = "experts_" + name;
  table.probabilities = std::move(fused);
  table.sample_ids.resize(d.bundle.test.size());
  for (std::size_t i = 0; i < table.sample_ids.size(); ++i) table.sample_ids[i] = static_cast<long long>(i);
  write_full_posteriors(work(fs::path("posteriors") / ("experts_" + name + "_test.csv")), table);
  out_ << text;
}

void Command::oracle() {
  const auto& d = data();
  auto report = oracle_evaluate(experts(), d.bundle.test, d.folds);
  auto j = to_json(report);
  write_json(work("oracle.json"), j);
  io::write_file_atomic(work("oracle.txt"), to_text(report, "oracle"));
  out_ << j.dump(2) << '\n';
}

void Command::ablate() {
  if (opt_.models.size() < 2) throw ConfigError("--models needs at least two posterior files");
  const auto s = opt_.strategy.empty() ? FusionStrategy::SoftVote : strategy();
  if (s != FusionStrategy::SoftVote && s != FusionStrategy::Calibrate) {
    throw ConfigError("ablate supports --strategy softvote or calibrate");
  }
  const auto& d = data();
  const int classes = d.bundle.test.class_count;
  std::vector<std::string> warnings;
  auto ingest_all = [&](const std::vector<std::string>& paths) {
    std::vector<ExternalPosteriorTable> tables;
    for (const auto& p : paths) tables.push_back(ingest_external_posteriors(p, classes, &warnings));
    return tables;
  };
  auto tables = ingest_all(opt_.models);
  for (const auto& t : tables) {
    if (static_cast<std::size_t>(t.probabilities.rows()) != d.bundle.test.size()) {
      throw DataError(t.model + ": row count does not match the test split");
    }
  }
  std::vector<AblationRow> rows;
  if (s == FusionStrategy::Calibrate) {
    if (opt_.val_models.size() != opt_.models.size()) {
      throw ConfigError("--strategy calibrate needs one --val-models file per --models file");
    }
    auto val_tables = ingest_all(opt_.val_models);
    AblationCalibration calib{val_tables, d.bundle.val.labels, config().fusion.calibration};
    rows = take_one_out_ablation(tables, d.bundle.test.labels, d.folds, s, &calib);
  } else {
    rows = take_one_out_ablation(tables, d.bundle.test.labels, d.folds, s);
  }
  for (const auto& w : warnings) err_ << "warning: " << w << '\n';
  write_json(work("ablation.json"), to_json(std::span<const AblationRow>(rows)));
  const std::string text = to_text(std::span<const AblationRow>(rows));
  io::write_file_atomic(work("ablation.txt"), text);
  out_ << text;
}

// Per-expert partial posteriors after applying the calibration's scale and shift.
MemberOutputs calibrated_member(const MemberOutputs& m, const Vector& scale, const Vector& shift) {
  Matrix z = m.logits;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    z.row(i) = z.row(i).cwiseProduct(scale.transpose()) + shift.transpose();
  }
  return member_from_logits(m.layout, std::move(z));
}

void Command::report() {
  const auto s = opt_.strategy.empty() ? FusionStrategy::Calibrate : strategy();
  const auto& d = data();
  const auto& test = d.bundle.test;
  auto ex = experts();
  auto outputs = expert_outputs(ex, test);
  const fs::path dir = work("report");

  FusionModel softvote;
  softvote.strategy = FusionStrategy::SoftVote;
  auto cm_sv = expert_confusion_matrix(outputs, test.labels, d.subsets, d.folds, softvote);
  io::write_file_atomic(dir / "confusion_softvote.csv", to_csv(cm_sv));
  nlohmann::ordered_json summary;
  summary["softvote"] = to_json(cm_sv);

  auto model = fusion_model(s);
  const std::string name(strategy_name(s));
  if (s != FusionStrategy::SoftVote) {
    auto cm = expert_confusion_matrix(outputs, test.labels, d.subsets, d.folds, model);
    io::write_file_atomic(dir / ("confusion_" + name + ".csv"), to_csv(cm));
    summary[name] = to_json(cm);
  }

  // MSP population: Many test samples the Many expert classifies correctly.
  const std::size_t many = fold_index(Fold::Many);
  const std::size_t few = fold_index(Fold::Few);
  auto msp_pair = [&](const std::vector<MemberOutputs>& members, const std::string& tag) {
    const auto pred = argmax_rows(members[many].probabilities);
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const int local = d.subsets[many].local(test.labels[i]);
      if (local >= 0 && pred[i] == local) rows.push_back(static_cast<Eigen::Index>(i));
    }
    const std::string population = "many-correct-by-many-expert";
    nlohmann::ordered_json j;
    for (std::size_t e : {many, few}) {
      Matrix sel(static_cast<Eigen::Index>(rows.size()), members[e].probabilities.cols());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        sel.row(static_cast<Eigen::Index>(k)) = members[e].probabilities.row(rows[k]);
      }
      const std::string expert(fold_name(kFolds[e]));
      auto h = msp_histogram(sel, 20, expert, population);
      io::write_file_atomic(dir / ("msp_" + expert + "_expert_" + tag + ".csv"), to_csv(h));
      j[expert + "_expert_mean_msp"] = h.mean_msp;
    }
    j["population"] = rows.size();
    summary["msp_" + tag] = j;
  };
  msp_pair(outputs, "raw");
  if (model.calibration) {
    std::vector<MemberOutputs> calibrated;
    for (std::size_t e = 0; e < outputs.size(); ++e) {
      calibrated.push_back(
          calibrated_member(outputs[e], model.calibration->scale[e], model.calibration->shift[e]));
    }
    msp_pair(calibrated, "calibrated");
  }
  write_json(dir / "summary.json", summary);
  out_ << summary.dump(2) << '\n';
}

void Command::init_config() {
  if (opt_.out.empty()) throw ConfigError("--out is required");
  auto c = synth60_config(opt_.seed);
  io::write_file_atomic(opt_.out, config_to_json(c).dump(2) + "\n");
  out_ << "wrote " << opt_.out << '\n';
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return nlohmann::json(s).dump();
}

int fail(std::ostream& err, const char* kind, const std::string& message, int code) {
  err << "error kind=" << kind << " message=" << one_line(message) << '\n';
  return code;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options opt;
  CLI::App app{"Long-tailed classification with class-balanced experts"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--threads", opt.threads, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);

  std::function<void(Command&)> action;
  auto sub = [&](const char* name, const char* help, void (Command::*fn)(), bool needs_config = true) {
    auto* s = app.add_subcommand(name, help);
    if (needs_config) s->add_option("config", opt.config, "Run config (JSON)")->required();
    s->callback([&action, fn] { action = [fn](Command& c) { (c.*fn)(); }; });
    return s;
  };

  sub("gen-data", "Write the generated bundle CSVs and manifest", &Command::gen_data);
  sub("train-baseline", "Train the baseline and its uniform-sampling finetune", &Command::train_baseline);
  sub("train-experts", "Train the three experts (with hyperparameter grids)", &Command::train_experts);
  auto* dump = sub("dump-posteriors", "Write a posterior dump for a checkpoint", &Command::dump_posteriors);
  dump->add_option("--model", opt.model, "Network or expert checkpoint")->required();
  dump->add_option("--split", opt.split, "val or test")->check(CLI::IsMember({"train", "val", "test"}));
  dump->add_option("--out", opt.out, "Output CSV");
  const auto strategies = CLI::IsMember({"kl", "softvote", "select", "stack", "calibrate"});
  auto* fusion = sub("train-fusion", "Train fusion parameters on the validation split", &Command::train_fusion);
  fusion->add_option("--strategy", opt.strategy, "Fusion strategy")->check(strategies);
  auto* eval = sub("evaluate", "Fuse the experts on the test split and report accuracy", &Command::evaluate);
  eval->add_option("--strategy", opt.strategy, "Fusion strategy")->check(strategies);
  eval->add_option("--model", opt.model, "Fusion parameter file");
  sub("oracle", "Ground-truth-routed expert accuracy", &Command::oracle);
  auto* ablate = sub("ablate", "Take-one-out ensemble table over full posterior dumps", &Command::ablate);
  ablate->add_option("--models", opt.models, "Test-split posterior CSVs")->required();
  ablate->add_option("--val-models", opt.val_models, "Validation-split posterior CSVs (calibrate)");
  ablate->add_option("--strategy", opt.strategy, "softvote or calibrate")
      ->check(CLI::IsMember({"softvote", "calibrate"}));
  auto* report = sub("report", "Expert confusion matrices and confidence histograms", &Command::report);
  report->add_option("--strategy", opt.strategy, "Fusion to compare against soft vote")->check(strategies);
  report->add_option("--model", opt.model, "Fusion parameter file");
  auto* init = sub("init-config", "Write the synth-60 benchmark config", &Command::init_config, false);
  init->add_option("--seed", opt.seed, "Training seed");
  init->add_option("--out", opt.out, "Output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail(err, "usage", e.what(), 2);
  }

  try {
    Command cmd(opt, out, err);
    action(cmd);
    return 0;
  } catch (const Error& e) {
    switch (e.kind()) {
      case ErrorKind::Config: return fail(err, "config", e.what(), 2);
      case ErrorKind::Divergence: return fail(err, "divergence", e.what(), 4);
      case ErrorKind::Data: break;
    }
    return fail(err, "data", e.what(), 3);
  } catch (const std::invalid_argument& e) {
    return fail(err, "config", e.what(), 2);
  } catch (const std::exception& e) {
    return fail(err, "data", e.what(), 3);
  }
}

}  // namespace cbe::cli

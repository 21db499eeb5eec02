// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cbe/error.hpp"
#include "cbe/fusion.hpp"
#include "cbe/io_util.hpp"

namespace cbe {

namespace {

nlohmann::json vectors_to_json(const std::vector<Vector>& vs) {
  auto arr = nlohmann::json::array();
  for (const auto& v : vs) arr.push_back(std::vector<double>(v.begin(), v.end()));
  return arr;
}

std::vector<Vector> vectors_from_json(const nlohmann::json& j) {
  std::vector<Vector> out;
  for (const auto& item : j) {
    auto v = item.get<std::vector<double>>();
    out.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  return out;
}

std::string posterior_row(long long id, std::span<const double> row) {
  std::string line = std::to_string(id);
  for (double v : row) {
    line += ',';
    line += io::format_double(v);
  }
  line += '\n';
  return line;
}

}  // namespace

void save_fusion_model(const std::filesystem::path& path, const FusionModel& model) {
  nlohmann::ordered_json j;
  j["format"] = "cbe-fusion";
  j["version"] = 1;
  j["strategy"] = strategy_name(model.strategy);
  j["kl"] = {{"steps", model.kl.steps}, {"step_size", model.kl.step_size}, {"tol", model.kl.tol}};
  if (model.selector) j["selector"] = nlohmann::json(model.selector->params);
  if (model.stacker) j["stacker"] = nlohmann::json(model.stacker->params);
  if (model.calibration) {
    j["calibration"] = {{"scale", vectors_to_json(model.calibration->scale)},
                        {"shift", vectors_to_json(model.calibration->shift)}};
  }
  io::write_file_atomic(path, j.dump() + "\n");
}

FusionModel load_fusion_model(const std::filesystem::path& path) {
  try {
    auto j = nlohmann::json::parse(io::read_file(path));
    if (j.at("format").get<std::string>() != "cbe-fusion") {
      throw DataError(path.string() + ": not a fusion parameter file");
    }
    FusionModel m;
    auto s = parse_strategy(j.at("strategy").get<std::string>());
    if (!s) throw DataError(path.string() + ": unknown strategy");
    m.strategy = *s;
    const auto& kl = j.at("kl");
    m.kl = {kl.at("steps").get<int>(), kl.at("step_size").get<double>(), kl.at("tol").get<double>()};
    if (j.contains("selector")) m.selector = SelectorModel{j["selector"].get<NetworkParams>()};
    if (j.contains("stacker")) m.stacker = StackerModel{j["stacker"].get<NetworkParams>()};
    if (j.contains("calibration")) {
      CalibrationParams c;
      c.scale = vectors_from_json(j["calibration"].at("scale"));
      c.shift = vectors_from_json(j["calibration"].at("shift"));
      m.calibration = std::move(c);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

ExternalPosteriorTable ingest_external_posteriors(const std::filesystem::path& path,
                                                  int class_count,
                                                  std::vector<std::string>* warnings) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = io::split(line, ',');
  if (header.empty() || header[0] != "sample_id") {
    throw DataError(path.string() + ": header must start with sample_id");
  }
  const int C = static_cast<int>(header.size()) - 1;
  if (class_count > 0 && C != class_count) {
    throw DataError(path.string() + ": expected " + std::to_string(class_count) +
                    " probability columns, got " + std::to_string(C));
  }

  ExternalPosteriorTable t;
  t.model = path.stem().string();
  std::vector<double> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = io::split(line, ',');
    const std::string ctx = path.string() + " row " + std::to_string(row);
    if (cells.size() != static_cast<std::size_t>(C) + 1) throw DataError(ctx + ": wrong column count");
    t.sample_ids.push_back(io::parse_int(cells[0], ctx));
    double sum = 0.0;
    const std::size_t start = values.size();
    for (int c = 0; c < C; ++c) {
      double v = io::parse_double(cells[static_cast<std::size_t>(c) + 1], ctx);
      if (v < 0.0 || !std::isfinite(v)) throw DataError(ctx + ": invalid probability");
      values.push_back(v);
      sum += v;
    }
    if (!(sum > 0.0)) throw DataError(ctx + ": row has no probability mass");
    if (std::abs(sum - 1.0) > 1e-6) {
      if (warnings) warnings->push_back(ctx + ": row sums to " + io::format_double(sum) + ", renormalised");
      for (std::size_t c = start; c < values.size(); ++c) values[c] /= sum;
    }
  }
  t.probabilities = Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(t.sample_ids.size()), C);
  return t;
}

void write_full_posteriors(const std::filesystem::path& path, const ExternalPosteriorTable& table) {
  std::string out = "sample_id";
  for (Eigen::Index c = 0; c < table.probabilities.cols(); ++c) out += ",p" + std::to_string(c);
  out += '\n';
  for (std::size_t i = 0; i < table.sample_ids.size(); ++i) {
    out += posterior_row(table.sample_ids[i], row_span(table.probabilities, static_cast<Eigen::Index>(i)));
  }
  io::write_file_atomic(path, out);
}

void write_partial_posteriors(const std::filesystem::path& path, const MemberOutputs& member,
                              Fold expert_id, double rho) {
  const auto& layout = member.layout;
  if (!layout.has_reject) throw DataError("partial dumps need a member with a reject entry");
  std::string out = "sample_id,expert_id";
  for (std::size_t j = 0; j < layout.classes.size(); ++j) out += ",p" + std::to_string(j);
  out += ",preject\n";
  const std::string name(fold_name(expert_id));
  for (Eigen::Index i = 0; i < member.probabilities.rows(); ++i) {
    out += std::to_string(i) + "," + name;
    for (double v : row_span(member.probabilities, i)) {
      out += ',';
      out += io::format_double(v);
    }
    out += '\n';
  }
  nlohmann::ordered_json side;
  side["format"] = "cbe-posteriors";
  side["version"] = 1;
  side["kind"] = "partial";
  side["expert_id"] = name;
  side["class_count"] = layout.class_count();
  side["classes"] = layout.classes;
  side["rho"] = rho;
  auto sidecar = path;
  sidecar += ".json";
  io::write_file_atomic(sidecar, side.dump(2) + "\n");
  io::write_file_atomic(path, out);
}

MemberOutputs read_partial_posteriors(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar += ".json";
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(io::read_file(sidecar));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(sidecar.string() + ": " + e.what());
  }
  auto fold = parse_fold(side.at("expert_id").get<std::string>());
  if (!fold) throw DataError(sidecar.string() + ": unknown expert_id");
  auto subset = SubsetSpec::create(*fold, side.at("classes").get<std::vector<int>>(),
                                   side.at("class_count").get<int>());
  auto layout = MemberLayout::from_subset(subset);

  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = io::split(line, ',');
    const std::string ctx = path.string() + " row " + std::to_string(rows + 1);
    if (cells.size() != layout.width() + 2) throw DataError(ctx + ": wrong column count");
    for (std::size_t j = 2; j < cells.size(); ++j) values.push_back(io::parse_double(cells[j], ctx));
    ++rows;
  }
  Matrix p = Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(rows),
                                static_cast<Eigen::Index>(layout.width()));
  return member_from_probabilities(std::move(layout), std::move(p));
}

MemberOutputs member_from_table(const ExternalPosteriorTable& table) {
  return member_from_probabilities(
      MemberLayout::full_width(table.model, static_cast<int>(table.probabilities.cols())),
      table.probabilities);
}

Matrix fuse_models(std::span<const ExternalPosteriorTable> tables, FusionStrategy strategy,
                   const CalibrationParams* calibration) {
  if (tables.empty()) throw std::invalid_argument("fuse_models needs at least one table");
  for (const auto& t : tables) {
    if (t.sample_ids != tables.front().sample_ids) {
      throw DataError("posterior table " + t.model + " has different sample ids than " +
                      tables.front().model);
    }
    if (t.probabilities.cols() != tables.front().probabilities.cols()) {
      throw DataError("posterior table " + t.model + " has a different class count");
    }
  }
  std::vector<MemberOutputs> members;
  for (const auto& t : tables) members.push_back(member_from_table(t));
  FusionModel model;
  model.strategy = strategy;
  if (strategy == FusionStrategy::Calibrate) {
    if (!calibration) throw ConfigError("calibrated model fusion needs calibration parameters");
    model.calibration = *calibration;
  } else if (strategy != FusionStrategy::SoftVote) {
    throw ConfigError("model fusion supports softvote and calibrate only");
  }
  return fuse_all(members, model);
}

}  // namespace cbe

// SPDX-License-Identifier: Apache-2.0
#include "cbe/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cbe/error.hpp"
#include "cbe/parallel.hpp"

namespace cbe {

namespace {

constexpr double kLogFloor = 1e-12;
constexpr int kMaxHalvings = 30;

void check_members(std::span<const PartialView> partials, std::span<const MemberLayout> layouts) {
  if (partials.empty()) throw std::invalid_argument("fusion needs at least one member");
  if (partials.size() != layouts.size()) {
    throw std::invalid_argument("partials and layouts differ in count");
  }
  for (std::size_t e = 0; e < partials.size(); ++e) {
    if (partials[e].size() != layouts[e].width()) {
      throw DataError("member " + std::to_string(e) + ": partial length " +
                      std::to_string(partials[e].size()) + " != layout width " +
                      std::to_string(layouts[e].width()));
    }
    if (layouts[e].class_count() != layouts.front().class_count()) {
      throw DataError("members disagree on the class count");
    }
  }
}

/// Adds g(p) into `acc`; returns true when a degenerate reject mass was dropped.
bool accumulate_expanded(std::span<const double> p, const MemberLayout& layout, Vector& acc,
                         double weight = 1.0) {
  const std::size_t k = layout.classes.size();
  if (!layout.has_reject) {
    for (std::size_t j = 0; j < k; ++j) acc[layout.classes[j]] += weight * p[j];
    return false;
  }
  const double rej = p[k];
  if (layout.uncovered() == 0) {
    double in = 0.0;
    for (std::size_t j = 0; j < k; ++j) in += p[j];
    for (std::size_t j = 0; j < k; ++j) acc[layout.classes[j]] += weight * p[j] / in;
    return rej != 0.0;
  }
  const double share = rej / static_cast<double>(layout.uncovered());
  for (Eigen::Index c = 0; c < acc.size(); ++c) {
    const int local = layout.local_index[static_cast<std::size_t>(c)];
    acc[c] += weight * (local >= 0 ? p[static_cast<std::size_t>(local)] : share);
  }
  return false;
}

Eigen::Index argmax(std::span<const double> v) {
  return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
}

std::vector<double> softmax_vec(std::span<const double> z) {
  Vector s = softmax(z);
  return {s.data(), s.data() + s.size()};
}

void normalise(Vector& q) { q /= q.sum(); }

}  // namespace

MemberLayout MemberLayout::from_subset(const SubsetSpec& subset) {
  MemberLayout l;
  l.name = std::string(fold_name(subset.expert_id));
  l.classes = subset.classes;
  l.local_index = subset.local_index;
  l.has_reject = true;
  return l;
}

MemberLayout MemberLayout::full_width(std::string name, int class_count) {
  MemberLayout l;
  l.name = std::move(name);
  l.classes.resize(static_cast<std::size_t>(class_count));
  std::iota(l.classes.begin(), l.classes.end(), 0);
  l.local_index = l.classes;
  l.has_reject = false;
  return l;
}

FullPosterior expand_partial(std::span<const double> partial, const MemberLayout& layout) {
  if (partial.size() != layout.width()) {
    throw DataError("partial length " + std::to_string(partial.size()) + " != layout width " +
                    std::to_string(layout.width()));
  }
  FullPosterior out;
  out.probabilities = Vector::Zero(layout.class_count());
  out.reject_dropped = accumulate_expanded(partial, layout, out.probabilities);
  return out;
}

FullPosterior expand_partial(std::span<const double> partial, const SubsetSpec& subset) {
  return expand_partial(partial, MemberLayout::from_subset(subset));
}

FullPosterior fuse_soft_vote(std::span<const PartialView> partials,
                             std::span<const MemberLayout> layouts) {
  check_members(partials, layouts);
  FullPosterior out;
  out.probabilities = Vector::Zero(layouts.front().class_count());
  for (std::size_t e = 0; e < partials.size(); ++e) {
    out.reject_dropped |= accumulate_expanded(partials[e], layouts[e], out.probabilities);
  }
  out.probabilities /= static_cast<double>(partials.size());
  normalise(out.probabilities);
  return out;
}

// ---- KL minimisation -------------------------------------------------------

namespace {

/// Objective and its gradient with respect to q (not yet through the softmax).
double kl_value_and_grad(std::span<const double> q, std::span<const PartialView> partials,
                         std::span<const MemberLayout> layouts, std::vector<double>* grad_q) {
  const std::size_t C = q.size();
  if (grad_q) grad_q->assign(C, 0.0);
  double obj = 0.0;
  for (std::size_t e = 0; e < partials.size(); ++e) {
    const auto& layout = layouts[e];
    const auto p = partials[e];
    const std::size_t k = layout.classes.size();
    const bool spread = layout.has_reject && layout.uncovered() > 0;
    // Degenerate experts contribute their renormalised in-subset posterior.
    double in_mass = 1.0;
    if (layout.degenerate()) {
      in_mass = 0.0;
      for (std::size_t j = 0; j < k; ++j) in_mass += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = p[j] / in_mass;
      if (pj <= 0.0) continue;
      const auto c = static_cast<std::size_t>(layout.classes[j]);
      obj += pj * (std::log(pj) - std::log(q[c]));
      if (grad_q) (*grad_q)[c] -= pj / q[c];
    }
    if (spread && p[k] > 0.0) {
      double a = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        if (layout.local_index[c] < 0) a += q[c];
      }
      obj += p[k] * (std::log(p[k]) - std::log(a));
      if (grad_q) {
        for (std::size_t c = 0; c < C; ++c) {
          if (layout.local_index[c] < 0) (*grad_q)[c] -= p[k] / a;
        }
      }
    }
  }
  return obj;
}

}  // namespace

double kl_objective(std::span<const double> q, std::span<const PartialView> partials,
                    std::span<const MemberLayout> layouts) {
  check_members(partials, layouts);
  return kl_value_and_grad(q, partials, layouts, nullptr);
}

KlResult fuse_kl_min(std::span<const PartialView> partials, std::span<const MemberLayout> layouts,
                     const KlOptions& options) {
  check_members(partials, layouts);
  if (options.steps < 0 || !(options.step_size > 0.0)) {
    throw std::invalid_argument("KL options need steps >= 0 and step_size > 0");
  }
  const auto init = fuse_soft_vote(partials, layouts);
  const std::size_t C = static_cast<std::size_t>(init.probabilities.size());
  std::vector<double> z(C);
  for (std::size_t c = 0; c < C; ++c) z[c] = std::log(init.probabilities[static_cast<Eigen::Index>(c)] + kLogFloor);

  std::vector<double> q = softmax_vec(z);
  std::vector<double> grad_q;
  double obj = kl_value_and_grad(q, partials, layouts, &grad_q);
  KlResult result;
  result.initial_objective = obj;
  if (!std::isfinite(obj)) throw DivergenceError("KL objective is non-finite at initialisation", 0);

  std::vector<double> trial(C);
  std::vector<double> q_next;
  std::vector<double> g_next;
  int step = 0;
  for (; step < options.steps; ++step) {
    double dot = 0.0;
    for (std::size_t c = 0; c < C; ++c) dot += grad_q[c] * q[c];
    // Halve the step until the objective does not increase.
    double eta = options.step_size;
    double next = obj;
    for (int halving = 0; halving <= kMaxHalvings; ++halving, eta *= 0.5) {
      for (std::size_t c = 0; c < C; ++c) trial[c] = z[c] - eta * q[c] * (grad_q[c] - dot);
      q_next = softmax_vec(trial);
      next = kl_value_and_grad(q_next, partials, layouts, &g_next);
      if (std::isnan(next)) break;
      if (next <= obj) break;
    }
    if (!std::isfinite(next)) {
      throw DivergenceError("KL objective became non-finite at step " + std::to_string(step), step);
    }
    if (next > obj) {
      ++step;
      break;
    }
    const double improvement = obj - next;
    z.swap(trial);
    q.swap(q_next);
    grad_q.swap(g_next);
    obj = next;
    if (improvement < options.tol) {
      ++step;
      break;
    }
  }
  result.steps_taken = step;
  result.objective = obj;
  result.posterior.reject_dropped = init.reject_dropped;
  result.posterior.probabilities = Eigen::Map<const Vector>(q.data(), static_cast<Eigen::Index>(C));
  return result;
}

// ---- member outputs --------------------------------------------------------

MemberOutputs member_from_logits(MemberLayout layout, Matrix logits) {
  if (static_cast<std::size_t>(logits.cols()) != layout.width()) {
    throw DataError("logit width != layout width for member " + layout.name);
  }
  MemberOutputs m;
  m.layout = std::move(layout);
  m.probabilities = logits;
  softmax_rows(m.probabilities);
  m.logits = std::move(logits);
  return m;
}

MemberOutputs member_from_probabilities(MemberLayout layout, Matrix probabilities) {
  if (static_cast<std::size_t>(probabilities.cols()) != layout.width()) {
    throw DataError("posterior width != layout width for member " + layout.name);
  }
  MemberOutputs m;
  m.layout = std::move(layout);
  m.logits = probabilities.cwiseMax(kLogFloor).array().log().matrix();
  m.probabilities = std::move(probabilities);
  return m;
}

Matrix concat_probabilities(std::span<const MemberOutputs> members) {
  if (members.empty()) return {};
  const Eigen::Index n = members.front().probabilities.rows();
  Eigen::Index width = 0;
  for (const auto& m : members) {
    if (m.probabilities.rows() != n) throw DataError("members cover different sample counts");
    width += m.probabilities.cols();
  }
  Matrix out(n, width);
  Eigen::Index col = 0;
  for (const auto& m : members) {
    out.middleCols(col, m.probabilities.cols()) = m.probabilities;
    col += m.probabilities.cols();
  }
  return out;
}

std::vector<int> owning_member(std::span<const int> labels, std::span<const MemberLayout> layouts) {
  std::vector<int> owner(labels.size(), -1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t e = 0; e < layouts.size(); ++e) {
      if (layouts[e].local_index.at(static_cast<std::size_t>(labels[i])) >= 0) {
        owner[i] = static_cast<int>(e);
        break;
      }
    }
  }
  return owner;
}

namespace {

NetworkParams train_linear_softmax(const Matrix& features, std::span<const int> labels, int outputs,
                                   const TrainConfig& config) {
  NetworkParams p;
  p.layers.push_back({Eigen::MatrixXd::Zero(outputs, features.cols()), Vector::Zero(outputs)});
  auto data = EmbeddingDataset::create(features, std::vector<int>(labels.begin(), labels.end()),
                                       outputs);
  TrainConfig cfg = config;
  cfg.frozen_layers = 0;
  cfg.sampler = SamplerMode::instance_balanced();
  return train_network(std::move(p), data, cfg).params;
}

Vector linear_forward(const NetworkParams& params, std::span<const PartialView> partials) {
  std::vector<double> x;
  for (auto p : partials) x.insert(x.end(), p.begin(), p.end());
  return forward_logits(params, x);
}

}  // namespace

SelectorModel train_expert_selector(std::span<const MemberOutputs> val,
                                    std::span<const int> member_labels, const TrainConfig& config) {
  const auto members = static_cast<int>(val.size());
  if (members == 0) throw std::invalid_argument("selector needs members");
  std::vector<std::size_t> seen(static_cast<std::size_t>(members), 0);
  for (int m : member_labels) {
    if (m < 0 || m >= members) throw DataError("selector label outside member range");
    ++seen[static_cast<std::size_t>(m)];
  }
  for (int m = 0; m < members; ++m) {
    if (seen[static_cast<std::size_t>(m)] == 0) {
      throw DataError("selector: no validation sample belongs to member " +
                      val[static_cast<std::size_t>(m)].layout.name);
    }
  }
  return {train_linear_softmax(concat_probabilities(val), member_labels, members, config)};
}

std::size_t select_member(std::span<const PartialView> partials, const SelectorModel& selector) {
  Vector z = linear_forward(selector.params, partials);
  return static_cast<std::size_t>(argmax(std::span<const double>(z.data(), z.size())));
}

FullPosterior fuse_by_selection(std::span<const PartialView> partials, const SelectorModel& selector,
                                std::span<const MemberLayout> layouts) {
  check_members(partials, layouts);
  const std::size_t chosen = select_member(partials, selector);
  return expand_partial(partials[chosen], layouts[chosen]);
}

StackerModel train_stacker(std::span<const MemberOutputs> val, std::span<const int> labels,
                           int class_count, const TrainConfig& config) {
  if (val.empty()) throw std::invalid_argument("stacker needs members");
  return {train_linear_softmax(concat_probabilities(val), labels, class_count, config)};
}

FullPosterior fuse_by_stacking(std::span<const PartialView> partials, const StackerModel& stacker) {
  Vector z = linear_forward(stacker.params, partials);
  return {softmax(std::span<const double>(z.data(), z.size())), false};
}

// ---- joint calibration -----------------------------------------------------

CalibrationParams CalibrationParams::identity(std::span<const MemberLayout> layouts) {
  CalibrationParams p;
  for (const auto& l : layouts) {
    const auto w = static_cast<Eigen::Index>(l.width());
    p.scale.push_back(Vector::Ones(w));
    p.shift.push_back(Vector::Zero(w));
  }
  return p;
}

void CalibrationParams::validate(std::span<const MemberLayout> layouts) const {
  if (scale.size() != layouts.size() || shift.size() != layouts.size()) {
    throw DataError("calibration parameters do not match the member count");
  }
  for (std::size_t e = 0; e < layouts.size(); ++e) {
    const auto w = static_cast<Eigen::Index>(layouts[e].width());
    if (scale[e].size() != w || shift[e].size() != w) {
      throw DataError("calibration vectors for member " + layouts[e].name + " have wrong length");
    }
    if (!scale[e].allFinite() || !shift[e].allFinite()) {
      throw DataError("non-finite calibration parameter for member " + layouts[e].name);
    }
  }
}

namespace {

std::vector<MemberLayout> layouts_of(std::span<const MemberOutputs> members) {
  std::vector<MemberLayout> out;
  out.reserve(members.size());
  for (const auto& m : members) out.push_back(m.layout);
  return out;
}

/// dL/dp for one member given dL/dS over the C fused entries.
void expansion_backward(const MemberLayout& layout, std::span<const double> p, const Vector& dS,
                        Vector& dp) {
  const std::size_t k = layout.classes.size();
  dp = Vector::Zero(static_cast<Eigen::Index>(layout.width()));
  if (layout.degenerate()) {
    double in = 0.0;
    for (std::size_t j = 0; j < k; ++j) in += p[j];
    double weighted = 0.0;
    for (std::size_t j = 0; j < k; ++j) weighted += dS[layout.classes[j]] * p[j];
    for (std::size_t j = 0; j < k; ++j) {
      dp[static_cast<Eigen::Index>(j)] = dS[layout.classes[j]] / in - weighted / (in * in);
    }
    return;
  }
  for (std::size_t j = 0; j < k; ++j) dp[static_cast<Eigen::Index>(j)] = dS[layout.classes[j]];
  if (layout.has_reject) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < dS.size(); ++c) {
      if (layout.local_index[static_cast<std::size_t>(c)] < 0) sum += dS[c];
    }
    dp[static_cast<Eigen::Index>(k)] = sum / static_cast<double>(layout.uncovered());
  }
}

}  // namespace

double calibration_loss(std::span<const MemberOutputs> members, std::span<const int> labels,
                        const CalibrationParams& params, CalibrationParams* gradient) {
  if (members.empty()) throw std::invalid_argument("calibration needs members");
  const auto layouts = layouts_of(members);
  params.validate(layouts);
  const Eigen::Index n = members.front().logits.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw DataError("labels do not match samples");
  const Eigen::Index C = layouts.front().class_count();
  const std::size_t E = members.size();

  if (gradient) {
    *gradient = params;
    for (std::size_t e = 0; e < E; ++e) {
      gradient->scale[e].setZero();
      gradient->shift[e].setZero();
    }
  }

  std::vector<Vector> probs(E);
  Vector S(C);
  Vector dS(C);
  Vector dp;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    S.setZero();
    for (std::size_t e = 0; e < E; ++e) {
      Vector u = params.scale[e].cwiseProduct(members[e].logits.row(i).transpose()) + params.shift[e];
      probs[e] = softmax(std::span<const double>(u.data(), u.size()));
      accumulate_expanded(std::span<const double>(probs[e].data(), probs[e].size()), layouts[e], S);
    }
    const double Z = S.sum();
    const int y = labels[static_cast<std::size_t>(i)];
    const double sy = S[y];
    total += -std::log(std::max(sy / Z, kLogFloor));
    if (!gradient) continue;

    dS.setConstant(1.0 / Z);
    dS[y] -= 1.0 / sy;
    for (std::size_t e = 0; e < E; ++e) {
      const auto& p = probs[e];
      expansion_backward(layouts[e], std::span<const double>(p.data(), p.size()), dS, dp);
      const double inner = dp.dot(p);
      Vector du = p.cwiseProduct((dp.array() - inner).matrix());
      gradient->scale[e] += du.cwiseProduct(members[e].logits.row(i).transpose());
      gradient->shift[e] += du;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (gradient) {
    for (std::size_t e = 0; e < E; ++e) {
      gradient->scale[e] *= inv_n;
      gradient->shift[e] *= inv_n;
    }
  }
  return total * inv_n;
}

double calibration_finite_diff_check(std::span<const MemberOutputs> members,
                                     std::span<const int> labels, const CalibrationParams& params,
                                     double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("eps must be positive");
  CalibrationParams grad;
  calibration_loss(members, labels, params, &grad);
  CalibrationParams probe = params;
  double worst = 0.0;
  auto check = [&](double& slot, double analytic) {
    const double saved = slot;
    slot = saved + eps;
    const double up = calibration_loss(members, labels, probe);
    slot = saved - eps;
    const double down = calibration_loss(members, labels, probe);
    slot = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic - numeric) / scale);
  };
  for (std::size_t e = 0; e < probe.scale.size(); ++e) {
    for (Eigen::Index k = 0; k < probe.scale[e].size(); ++k) {
      check(probe.scale[e](k), grad.scale[e](k));
      check(probe.shift[e](k), grad.shift[e](k));
    }
  }
  return worst;
}

CalibrationResult train_joint_calibration(std::span<const MemberOutputs> val,
                                          std::span<const int> labels,
                                          const CalibrationOptions& options) {
  if (options.steps < 0 || !(options.step_size > 0.0)) {
    throw std::invalid_argument("calibration options need steps >= 0 and step_size > 0");
  }
  const auto layouts = layouts_of(val);
  CalibrationResult result;
  CalibrationParams params = CalibrationParams::identity(layouts);
  CalibrationParams grad;
  CalibrationParams velocity = CalibrationParams::identity(layouts);
  for (std::size_t e = 0; e < layouts.size(); ++e) velocity.scale[e].setZero();

  double loss = calibration_loss(val, labels, params, &grad);
  if (!std::isfinite(loss)) throw DivergenceError("calibration loss is non-finite at start", 0);
  result.initial_loss = loss;
  result.params = params;
  result.final_loss = loss;
  result.loss_trace.push_back(loss);

  for (int step = 0; step < options.steps; ++step) {
    for (std::size_t e = 0; e < layouts.size(); ++e) {
      velocity.scale[e] = options.momentum * velocity.scale[e] + grad.scale[e];
      velocity.shift[e] = options.momentum * velocity.shift[e] + grad.shift[e];
      params.scale[e] -= options.step_size * velocity.scale[e];
      params.shift[e] -= options.step_size * velocity.shift[e];
    }
    loss = calibration_loss(val, labels, params, &grad);
    if (!std::isfinite(loss)) {
      throw DivergenceError("calibration loss became non-finite at step " + std::to_string(step),
                            step);
    }
    result.loss_trace.push_back(loss);
    if (loss < result.final_loss) {
      result.final_loss = loss;
      result.params = params;
    }
  }
  return result;
}

FullPosterior fuse_calibrated(std::span<const PartialView> logits, const CalibrationParams& params,
                              std::span<const MemberLayout> layouts) {
  check_members(logits, layouts);
  params.validate(layouts);
  FullPosterior out;
  out.probabilities = Vector::Zero(layouts.front().class_count());
  for (std::size_t e = 0; e < logits.size(); ++e) {
    Vector z = Eigen::Map<const Vector>(logits[e].data(), static_cast<Eigen::Index>(logits[e].size()));
    Vector u = params.scale[e].cwiseProduct(z) + params.shift[e];
    Vector p = softmax(std::span<const double>(u.data(), u.size()));
    out.reject_dropped |=
        accumulate_expanded(std::span<const double>(p.data(), p.size()), layouts[e], out.probabilities);
  }
  normalise(out.probabilities);
  return out;
}

// ---- strategy dispatch -----------------------------------------------------

std::string_view strategy_name(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::KlMin: return "kl";
    case FusionStrategy::SoftVote: return "softvote";
    case FusionStrategy::Select: return "select";
    case FusionStrategy::Stack: return "stack";
    case FusionStrategy::Calibrate: return "calibrate";
  }
  return "?";
}

std::optional<FusionStrategy> parse_strategy(std::string_view name) {
  for (auto s : {FusionStrategy::KlMin, FusionStrategy::SoftVote, FusionStrategy::Select,
                 FusionStrategy::Stack, FusionStrategy::Calibrate}) {
    if (strategy_name(s) == name) return s;
  }
  return std::nullopt;
}

Matrix fuse_all(std::span<const MemberOutputs> members, const FusionModel& model,
                std::size_t threads) {
  if (members.empty()) throw std::invalid_argument("fusion needs at least one member");
  const auto layouts = layouts_of(members);
  const Eigen::Index n = members.front().probabilities.rows();
  for (const auto& m : members) {
    if (m.probabilities.rows() != n) throw DataError("members cover different sample counts");
  }
  const Eigen::Index C = layouts.front().class_count();
  switch (model.strategy) {
    case FusionStrategy::Select:
      if (!model.selector) throw ConfigError("select fusion needs a trained selector");
      break;
    case FusionStrategy::Stack:
      if (!model.stacker) throw ConfigError("stack fusion needs a trained stacker");
      break;
    case FusionStrategy::Calibrate:
      if (!model.calibration) throw ConfigError("calibrate fusion needs calibration parameters");
      model.calibration->validate(layouts);
      break;
    default:
      break;
  }

  Matrix out(n, C);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    const auto row = static_cast<Eigen::Index>(i);
    std::vector<PartialView> probs;
    std::vector<PartialView> logits;
    for (const auto& m : members) {
      probs.push_back(row_span(m.probabilities, row));
      logits.push_back(row_span(m.logits, row));
    }
    FullPosterior q;
    switch (model.strategy) {
      case FusionStrategy::KlMin: q = fuse_kl_min(probs, layouts, model.kl).posterior; break;
      case FusionStrategy::SoftVote: q = fuse_soft_vote(probs, layouts); break;
      case FusionStrategy::Select: q = fuse_by_selection(probs, *model.selector, layouts); break;
      case FusionStrategy::Stack: q = fuse_by_stacking(probs, *model.stacker); break;
      case FusionStrategy::Calibrate: q = fuse_calibrated(logits, *model.calibration, layouts); break;
    }
    out.row(row) = q.probabilities.transpose();
  });
  return out;
}

}  // namespace cbe

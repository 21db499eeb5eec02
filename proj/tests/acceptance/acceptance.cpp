// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cbe/dataset.hpp"
#include "cbe/evaluation.hpp"
#include "cbe/experts.hpp"
#include "cbe/fusion.hpp"
#include "cbe/io_util.hpp"
#include "cbe/network.hpp"
#include "config.hpp"
#include "longtail_shapes.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"

namespace fs = std::filesystem;
using namespace cbe;
using namespace cbe::cli;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::path(CBE_TEST_TMP) / ("acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<double> random_simplex(std::size_t n, Rng& rng, double spread = 1.5) {
  std::normal_distribution<double> g(0.0, spread);
  std::vector<double> z(n);
  for (auto& v : z) v = g(rng);
  return oracle::softmax(z);
}

NetworkParams random_net(std::vector<std::size_t> dims, std::uint64_t seed) {
  Rng rng(seed);
  auto p = NetworkParams::init_gaussian(dims, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& l : p.layers)
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = n(rng);
  return p;
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

std::vector<int> random_labels(std::size_t n, int classes, Rng& rng) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

// Three experts over a random contiguous split of C classes.
std::vector<MemberLayout> random_layouts(int C, Rng& rng) {
  std::uniform_int_distribution<int> a(1, C - 2);
  const int c1 = a(rng);
  std::uniform_int_distribution<int> b(c1 + 1, C - 1);
  const int c2 = b(rng);
  const std::array<std::pair<int, int>, 3> ranges{{{0, c1}, {c1, c2}, {c2, C}}};
  std::vector<MemberLayout> out;
  for (std::size_t e = 0; e < 3; ++e) {
    std::vector<int> cls;
    for (int c = ranges[e].first; c < ranges[e].second; ++c) cls.push_back(c);
    out.push_back(MemberLayout::from_subset(SubsetSpec::create(kFolds[e], cls, C)));
  }
  return out;
}

std::vector<MemberOutputs> random_members(std::span<const MemberLayout> layouts, Eigen::Index n, Rng& rng) {
  std::vector<MemberOutputs> out;
  for (const auto& l : layouts) {
    out.push_back(member_from_logits(l, random_matrix(n, static_cast<Eigen::Index>(l.width()), rng, 2.0)));
  }
  return out;
}

Outcome gradient_correctness() {
  double worst_net = 0.0;
  int nets = 0;
  for (std::uint64_t s = 0; nets < 20 && s < 500; ++s) {
    Rng rng(1000 + s);
    const std::size_t d = 4 + s % 5, h = 6 + s % 7, c = 3 + s % 6;
    auto p = random_net({d, h, c}, 2000 + s);
    auto x = random_matrix(12, static_cast<Eigen::Index>(d), rng);
    auto y = random_labels(12, static_cast<int>(c), rng);
    if (min_abs_preactivation(p, x) < 1e-3) continue;
    worst_net = std::max(worst_net, finite_diff_check(p, x, y, 1e-4));
    ++nets;
  }
  double worst_cal = 0.0;
  Rng rng(77);
  std::normal_distribution<double> g(0.0, 0.3);
  for (int trial = 0; trial < 20; ++trial) {
    const int C = 4 + trial % 9;
    auto layouts = random_layouts(C, rng);
    auto ms = random_members(layouts, 10, rng);
    auto y = random_labels(10, C, rng);
    auto p = CalibrationParams::identity(layouts);
    for (std::size_t e = 0; e < layouts.size(); ++e) {
      for (Eigen::Index k = 0; k < p.scale[e].size(); ++k) {
        p.scale[e](k) += g(rng);
        p.shift[e](k) += g(rng);
      }
    }
    worst_cal = std::max(worst_cal, calibration_finite_diff_check(ms, y, p));
  }
  const bool ok = nets == 20 && worst_net < 1e-4 && worst_cal < 1e-4;
  return {ok, "network instances " + std::to_string(nets) + " worst " + fmt("%.2e", worst_net) +
                  ", calibration instances 20 worst " + fmt("%.2e", worst_cal) + " (< 1e-4)"};
}

Outcome fusion_identities() {
  Rng rng(5);
  // (a) identity calibration equals soft vote.
  double worst_a = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto layouts = random_layouts(4 + trial % 20, rng);
    auto ms = random_members(layouts, 10, rng);
    auto id = CalibrationParams::identity(layouts);
    for (Eigen::Index i = 0; i < 10; ++i) {
      std::vector<PartialView> z, p;
      for (const auto& m : ms) {
        z.push_back(row_span(m.logits, i));
        p.push_back(row_span(m.probabilities, i));
      }
      auto cal = fuse_calibrated(z, id, layouts).probabilities;
      auto sv = fuse_soft_vote(p, layouts).probabilities;
      worst_a = std::max(worst_a, (cal - sv).cwiseAbs().maxCoeff());
    }
  }
  // (b) single full-coverage expert.
  double worst_b = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int C = 2 + trial % 10;
    auto p = random_simplex(static_cast<std::size_t>(C), rng, 1.0);
    std::vector<PartialView> parts{p};
    std::vector<MemberLayout> ls{MemberLayout::full_width("m", C)};
    auto q = fuse_kl_min(parts, ls).posterior.probabilities;
    for (int c = 0; c < C; ++c) worst_b = std::max(worst_b, std::abs(q(c) - p[static_cast<std::size_t>(c)]));
  }
  // (c) reject-odds identity on random experts.
  double worst_c = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int C = 6 + trial % 10;
    const int k = 1 + trial % (C - 1);
    std::vector<int> cls;
    for (int c = 0; c < k; ++c) cls.push_back(c);
    ExpertModel e;
    e.params = random_net({5, 8, static_cast<std::size_t>(k + 1)}, 300 + static_cast<std::uint64_t>(trial));
    e.subset = SubsetSpec::create(Fold::Medium, cls, C);
    e.rho = 1.0 + 30.0 * std::uniform_real_distribution<double>()(rng);
    auto x = random_matrix(8, 5, rng);
    auto corrected = expert_probabilities(e, x);
    e.apply_reject_correction = false;
    auto raw = expert_probabilities(e, x);
    const auto r = static_cast<Eigen::Index>(k);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < r; ++j) {
        const double lhs = corrected(i, r) / corrected(i, j);
        const double rhs = e.rho * raw(i, r) / raw(i, j);
        worst_c = std::max(worst_c, std::abs(lhs - rhs) / std::abs(rhs));
      }
    }
  }
  // (d) every strategy normalises on 1,000 random partials.
  double worst_d = 0.0;
  {
    const int C = 15;
    auto layouts = random_layouts(C, rng);
    auto ms = random_members(layouts, 1000, rng);
    std::size_t width = 0;
    for (const auto& l : layouts) width += l.width();
    FusionModel m;
    m.selector = SelectorModel{random_net({width, 3}, 11)};
    m.stacker = StackerModel{random_net({width, static_cast<std::size_t>(C)}, 12)};
    auto cal = CalibrationParams::identity(layouts);
    std::normal_distribution<double> g(0.0, 0.5);
    for (std::size_t e = 0; e < 3; ++e) {
      for (Eigen::Index j = 0; j < cal.scale[e].size(); ++j) {
        cal.scale[e](j) += g(rng);
        cal.shift[e](j) += g(rng);
      }
    }
    m.calibration = cal;
    for (auto s : {FusionStrategy::KlMin, FusionStrategy::SoftVote, FusionStrategy::Select,
                   FusionStrategy::Stack, FusionStrategy::Calibrate}) {
      m.strategy = s;
      auto q = fuse_all(ms, m);
      if (q.minCoeff() < 0.0) worst_d = std::max(worst_d, 1.0);
      for (Eigen::Index i = 0; i < q.rows(); ++i) worst_d = std::max(worst_d, std::abs(q.row(i).sum() - 1.0));
    }
  }
  const bool ok = worst_a <= 1e-12 && worst_b <= 1e-6 && worst_c <= 1e-9 && worst_d <= 1e-9;
  return {ok, "(a) " + fmt("%.1e", worst_a) + " <= 1e-12, (b) " + fmt("%.1e", worst_b) + " <= 1e-6, (c) " +
                  fmt("%.1e", worst_c) + " <= 1e-9, (d) " + fmt("%.1e", worst_d) + " <= 1e-9"};
}

Outcome kl_oracle_equivalence() {
  Rng rng(2024);
  double worst = 0.0;
  int within = 0;
  const std::vector<std::vector<int>> classes{{0, 1}, {2}};
  std::vector<MemberLayout> ls{MemberLayout::from_subset(SubsetSpec::create(Fold::Many, {0, 1}, 3)),
                               MemberLayout::from_subset(SubsetSpec::create(Fold::Few, {2}, 3))};
  for (int trial = 0; trial < 50; ++trial) {
    auto p1 = random_simplex(3, rng, 1.0);
    auto p2 = random_simplex(2, rng, 1.0);
    std::vector<PartialView> parts{p1, p2};
    auto q = fuse_kl_min(parts, ls).posterior.probabilities;
    auto grid = oracle::kl_grid_search_3({p1, p2}, classes);
    double err = 0.0;
    for (int c = 0; c < 3; ++c) err = std::max(err, std::abs(q(c) - grid.q[static_cast<std::size_t>(c)]));
    worst = std::max(worst, err);
    within += err <= 2e-3;
  }
  return {within == 50, std::to_string(within) + "/50 within 2e-3, worst " + fmt("%.1e", worst)};
}

const std::vector<BenchmarkResult>& synth60_results() {
  static const std::vector<BenchmarkResult> all = [] {
    std::vector<BenchmarkResult> r;
    for (std::uint64_t s = 1; s <= 5; ++s) r.push_back(run_benchmark(synth60_config(s)));
    return r;
  }();
  return all;
}

double acc(const EvalReport& r, Fold f) { return r.accuracy(f).value(); }

const EvalReport& ablation_row(const BenchmarkResult& r, const std::string& name) {
  for (const auto& a : r.ablation) {
    if (a.name == name) return a.report;
  }
  throw std::runtime_error("no ablation row " + name);
}

Outcome seed_majority(const std::function<bool(const BenchmarkResult&, std::ostringstream&)>& claim) {
  int wins = 0;
  std::ostringstream per_seed;
  const auto& rs = synth60_results();
  for (std::size_t i = 0; i < rs.size(); ++i) {
    per_seed << (i ? "; " : "") << "s" << i + 1 << " ";
    const bool ok = claim(rs[i], per_seed);
    per_seed << (ok ? " ok" : " no");
    wins += ok;
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds (need 4): " + per_seed.str()};
}

std::string pct(double v) { return fmt("%.1f", 100.0 * v); }

Outcome oracle_effect() {
  return seed_majority([](const BenchmarkResult& r, std::ostringstream& o) {
    const double gain = *r.oracle.all - *r.baseline.all;
    const double few = acc(r.oracle, Fold::Few), many = acc(r.oracle, Fold::Many);
    o << "gain " << pct(gain) << " few/many " << fmt("%.2f", few / many);
    return gain >= 0.05 && few >= 0.8 * many;
  });
}

Outcome fusion_ordering() {
  return seed_majority([](const BenchmarkResult& r, std::ostringstream& o) {
    const auto& sv = r.fusion.at(FusionStrategy::SoftVote);
    const auto& cal = r.fusion.at(FusionStrategy::Calibrate);
    const double sv_few = acc(sv, Fold::Few), cal_few = acc(cal, Fold::Few);
    o << "all " << pct(*cal.all) << " vs " << pct(*sv.all) << " few " << pct(cal_few) << " vs " << pct(sv_few);
    return *cal.all >= *sv.all && (sv_few >= cal_few || std::abs(sv_few - cal_few) <= 0.02);
  });
}

Outcome take_one_out() {
  return seed_majority([](const BenchmarkResult& r, std::ostringstream& o) {
    const auto& all = ablation_row(r, "all");
    const auto& without = ablation_row(r, "without experts");
    o << "few " << pct(acc(without, Fold::Few)) << " vs " << pct(acc(all, Fold::Few)) << " many "
      << pct(acc(without, Fold::Many)) << " vs " << pct(acc(all, Fold::Many));
    return acc(without, Fold::Few) < acc(all, Fold::Few) && acc(without, Fold::Many) > acc(all, Fold::Many);
  });
}

Outcome collision_reduction() {
  return seed_majority([](const BenchmarkResult& r, std::ostringstream& o) {
    const double cal = r.confusion_calibrate.diagonal_mass(), sv = r.confusion_softvote.diagonal_mass();
    o << "diag " << fmt("%.1f", cal) << " vs " << fmt("%.1f", sv);
    return cal >= sv;
  });
}

std::string quote(const fs::path& p) { return "\"" + p.string() + "\""; }

int run_cli(const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = quote(CBE_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " >>" + quote(log) + " 2>&1";
  return std::system(cmd.c_str());
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = io::read_file(e.path());
  }
  return files;
}

bool cli_pipeline(const fs::path& dir, const std::string& threads) {
  const auto cfg = (dir / "config.json").string();
  const auto log = dir / "cli.log";
  if (run_cli({"init-config", "--seed", "3", "--out", cfg}, log) != 0) return false;
  const auto work = dir / "work";
  const std::vector<std::vector<std::string>> steps{
      {"gen-data", cfg},
      {"train-baseline", cfg},
      {"train-experts", cfg},
      {"train-fusion", cfg, "--strategy", "calibrate"},
      {"evaluate", cfg, "--strategy", "calibrate"},
      {"evaluate", cfg, "--strategy", "softvote"},
      {"oracle", cfg},
      {"report", cfg},
  };
  for (auto args : steps) {
    args.insert(args.end(), {"--threads", threads});
    if (run_cli(args, log) != 0) return false;
  }
  return true;
}

Outcome determinism() {
  const auto a = scratch_dir("det_a"), b = scratch_dir("det_b"), c = scratch_dir("det_c");
  if (!cli_pipeline(a, "1") || !cli_pipeline(b, "1") || !cli_pipeline(c, "4")) {
    return {false, "CLI pipeline failed; see " + (a.parent_path() / "acceptance_det_*/cli.log").string()};
  }
  const auto sa = snapshot(a / "work");
  std::size_t differing = 0;
  for (const auto* other : {&b, &c}) {
    const auto so = snapshot(*other / "work");
    if (so.size() != sa.size()) ++differing;
    for (const auto& [name, bytes] : sa) {
      auto it = so.find(name);
      if (it == so.end() || it->second != bytes) ++differing;
    }
  }
  const bool reports = sa.count("report/summary.json") && sa.count("eval_calibrate.json");
  return {differing == 0 && reports,
          std::to_string(sa.size()) + " artifacts compared across reruns (--threads 1, 1, 4), " +
              std::to_string(differing) + " differ"};
}

void write_shape_split(const fs::path& path, const std::vector<std::size_t>& per_class) {
  std::string out = "label,f0,f1\n";
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const std::string row = std::to_string(c) + "," + std::to_string(static_cast<double>(c) * 1e-3) + ",0.5\n";
    for (std::size_t k = 0; k < per_class[c]; ++k) out += row;
  }
  io::write_file_atomic(path, out);
}

Outcome dataset_shapes() {
  std::ostringstream o;
  bool ok = true;
  for (const auto& shape : {shapes::imagenet_lt(), shapes::places_lt()}) {
    const auto dir = scratch_dir(shape.name);
    const auto freq = shapes::frequencies(shape);
    write_shape_split(dir / "train.csv", freq);
    write_shape_split(dir / "val.csv", std::vector<std::size_t>(freq.size(), shape.val_per_class));
    write_shape_split(dir / "test.csv", std::vector<std::size_t>(freq.size(), shape.test_per_class));
    write_manifest(dir / "manifest.json", {dir / "train.csv", dir / "val.csv", dir / "test.csv", 0});
    auto loaded = load_embeddings(read_manifest(dir / "manifest.json"));
    auto folds = assign_folds(loaded.bundle.train);
    const std::array<std::size_t, 3> got{folds.count(Fold::Many), folds.count(Fold::Medium), folds.count(Fold::Few)};
    const std::array<std::size_t, 3> want{shape.many.classes, shape.medium.classes, shape.few.classes};
    ok = ok && got == want && loaded.bundle.train.size() == shape.samples();
    o << (o.tellp() ? "; " : "") << shape.name << " " << got[0] << "/" << got[1] << "/" << got[2] << " (want "
      << want[0] << "/" << want[1] << "/" << want[2] << ")";
  }
  return {ok, o.str()};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 10.0, gradient_correctness},
      {2, "fusion identities", 30.0, fusion_identities},
      {3, "KL oracle equivalence", 120.0, kl_oracle_equivalence},
      {4, "oracle effect", 600.0, oracle_effect},
      {5, "fusion ordering", 0.0, fusion_ordering},
      {6, "take-one-out direction", 0.0, take_one_out},
      {7, "expert-collision reduction", 0.0, collision_reduction},
      {8, "determinism", 0.0, determinism},
      {9, "dataset-shape fidelity", 0.0, dataset_shapes},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool pass = out.pass;
    std::string timing = fmt("%.1fs", secs);
    if (c.budget_s > 0.0) {
      timing += " of " + fmt("%.0fs", c.budget_s);
      if (secs >= c.budget_s) pass = false;
    }
    std::printf("%s C%d %s: %s [%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, out.detail.c_str(), timing.c_str());
    std::fflush(stdout);
    failed += !pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}

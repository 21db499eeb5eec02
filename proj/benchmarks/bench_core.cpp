// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cbe/dataset.hpp"
#include "cbe/fusion.hpp"
#include "cbe/network.hpp"

using namespace cbe;

namespace {

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

// synth-60 sized members: 3 / 11 / 46 classes.
std::vector<MemberLayout> synth60_layouts() {
  std::vector<MemberLayout> out;
  const std::array<std::pair<int, int>, 3> ranges{{{0, 3}, {3, 14}, {14, 60}}};
  for (std::size_t e = 0; e < 3; ++e) {
    std::vector<int> cls;
    for (int c = ranges[e].first; c < ranges[e].second; ++c) cls.push_back(c);
    out.push_back(MemberLayout::from_subset(SubsetSpec::create(kFolds[e], cls, 60)));
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

void BM_ForwardBatch(benchmark::State& state) {
  Rng rng(1);
  const std::vector<std::size_t> dims{16, 64, 60};
  auto p = NetworkParams::init_gaussian(dims, rng);
  auto x = random_matrix(state.range(0), 16, rng);
  for (auto _ : state) benchmark::DoNotOptimize(forward_logits_batch(p, x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBatch)->Arg(32)->Arg(1024);

void BM_BackwardBatch(benchmark::State& state) {
  Rng rng(2);
  const std::vector<std::size_t> dims{16, 64, 60};
  auto p = NetworkParams::init_gaussian(dims, rng);
  auto x = random_matrix(state.range(0), 16, rng);
  auto y = random_labels(static_cast<std::size_t>(state.range(0)), 60, rng);
  for (auto _ : state) benchmark::DoNotOptimize(backward_gradients(p, x, y));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BackwardBatch)->Arg(32)->Arg(1024);

void BM_Softmax(benchmark::State& state) {
  Rng rng(3);
  auto z = random_matrix(1, state.range(0), rng);
  const std::span<const double> row(z.data(), static_cast<std::size_t>(z.size()));
  for (auto _ : state) benchmark::DoNotOptimize(softmax(row));
}
BENCHMARK(BM_Softmax)->Arg(60)->Arg(1000);

void BM_FuseKlMin(benchmark::State& state) {
  Rng rng(4);
  auto layouts = synth60_layouts();
  auto ms = random_members(layouts, 1, rng);
  std::vector<PartialView> parts;
  for (const auto& m : ms) parts.push_back(row_span(m.probabilities, 0));
  for (auto _ : state) benchmark::DoNotOptimize(fuse_kl_min(parts, layouts));
}
BENCHMARK(BM_FuseKlMin);

void BM_FuseSoftVote(benchmark::State& state) {
  Rng rng(5);
  auto layouts = synth60_layouts();
  auto ms = random_members(layouts, 1, rng);
  std::vector<PartialView> parts;
  for (const auto& m : ms) parts.push_back(row_span(m.probabilities, 0));
  for (auto _ : state) benchmark::DoNotOptimize(fuse_soft_vote(parts, layouts));
}
BENCHMARK(BM_FuseSoftVote);

void BM_CalibrationLossAndGradient(benchmark::State& state) {
  Rng rng(6);
  auto layouts = synth60_layouts();
  auto ms = random_members(layouts, state.range(0), rng);
  auto y = random_labels(static_cast<std::size_t>(state.range(0)), 60, rng);
  auto params = CalibrationParams::identity(layouts);
  CalibrationParams grad;
  for (auto _ : state) benchmark::DoNotOptimize(calibration_loss(ms, y, params, &grad));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CalibrationLossAndGradient)->Arg(1200);

void BM_RejectUndersampledDraw(benchmark::State& state) {
  Rng rng(7);
  std::vector<int> labels;
  for (int c = 0; c < 2; ++c) labels.insert(labels.end(), c == 0 ? 500 : 4500, c);
  auto x = random_matrix(static_cast<Eigen::Index>(labels.size()), 16, rng);
  auto data = EmbeddingDataset::create(std::move(x), std::move(labels), 2);
  BatchSampler sampler(data, SamplerMode::reject_undersampled(static_cast<double>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(sampler.draw_indices(64, rng));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_RejectUndersampledDraw)->Arg(1)->Arg(16);

}  // namespace

BENCHMARK_MAIN();

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "cbe/error.hpp"
#include "cbe/network.hpp"
#include "oracles.hpp"

using namespace cbe;

namespace {

NetworkParams random_net(std::vector<std::size_t> dims, std::uint64_t seed) {
  Rng rng(seed);
  auto p = NetworkParams::init_gaussian(dims, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& l : p.layers)
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = n(rng);
  return p;
}

Matrix random_batch(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n;
  Matrix x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

// Two well-separated Gaussian blobs in 2-D.
EmbeddingDataset two_blobs(std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  Matrix x(static_cast<Eigen::Index>(2 * per_class), 2);
  std::vector<int> y;
  for (int c = 0; c < 2; ++c) {
    const double cx = c == 0 ? -3.0 : 3.0;
    for (std::size_t k = 0; k < per_class; ++k) {
      const auto r = static_cast<Eigen::Index>(y.size());
      x(r, 0) = cx + n(rng);
      x(r, 1) = n(rng);
      y.push_back(c);
    }
  }
  return EmbeddingDataset::create(std::move(x), std::move(y), 2);
}

double accuracy(const NetworkParams& p, const EmbeddingDataset& d) {
  auto z = forward_logits_batch(p, d.features);
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index arg;
    z.row(i).maxCoeff(&arg);
    hit += static_cast<int>(arg) == d.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

}  // namespace

TEST(Forward, IdentityLayer) {
  NetworkParams p;
  p.layers.push_back({Eigen::MatrixXd::Identity(2, 2), Vector::Zero(2)});
  std::vector<double> x{1.0, 2.0};
  auto z = forward_logits(p, x);
  EXPECT_EQ(z(0), 1.0);
  EXPECT_EQ(z(1), 2.0);
}

TEST(Forward, ZeroWeightsGiveBias) {
  NetworkParams p;
  Vector b(3);
  b << 0.5, -1.0, 2.0;
  p.layers.push_back({Eigen::MatrixXd::Zero(3, 4), b});
  for (int s = 0; s < 5; ++s) {
    auto x = random_batch(1, 4, static_cast<std::uint64_t>(s));
    auto z = forward_logits(p, row_span(x, 0));
    EXPECT_EQ(z, b);
  }
}

TEST(Forward, TwoLayerHandExample) {
  NetworkParams p;
  Eigen::MatrixXd w1(3, 2);
  w1 << 1.0, 2.0, -1.0, 0.5, 0.25, -3.0;
  Vector b1(3);
  b1 << 0.1, 0.2, -0.3;
  Eigen::MatrixXd w2(2, 3);
  w2 << 1.0, -2.0, 0.5, 0.3, 0.7, -1.1;
  Vector b2(2);
  b2 << 0.05, -0.05;
  p.layers.push_back({w1, b1});
  p.layers.push_back({w2, b2});
  p.validate();
  // x=(1,0): pre-activations (1.1, -0.8, -0.05) rectify to (1.1, 0, 0).
  std::vector<double> x{1.0, 0.0};
  auto z = forward_logits(p, x);
  EXPECT_NEAR(z(0), 1.0 * 1.1 + 0.05, 1e-12);
  EXPECT_NEAR(z(1), 0.3 * 1.1 - 0.05, 1e-12);
}

TEST(Forward, BatchMatchesSingle) {
  auto p = random_net({5, 7, 3}, 1);
  auto x = random_batch(9, 5, 2);
  auto z = forward_logits_batch(p, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto zi = forward_logits(p, row_span(x, i));
    for (Eigen::Index k = 0; k < 3; ++k) EXPECT_NEAR(z(i, k), zi(k), 1e-14);
  }
}

TEST(Forward, DimensionMismatchThrows) {
  auto p = random_net({3, 2}, 1);
  std::vector<double> x{1.0, 2.0};
  EXPECT_THROW(forward_logits(p, x), DataError);
  EXPECT_THROW(forward_logits_batch(p, random_batch(2, 4, 1)), DataError);
}

TEST(Params, ValidateRejectsBadChainAndNonFinite) {
  auto p = random_net({3, 4, 2}, 1);
  EXPECT_NO_THROW(p.validate());
  auto bad = p;
  bad.layers[1].weight = Eigen::MatrixXd::Zero(2, 5);
  EXPECT_THROW(bad.validate(), DataError);
  bad = p;
  bad.layers[0].bias(1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(bad.validate(), DataError);
}

TEST(Params, GaussianInitScale) {
  Rng rng(3);
  std::vector<std::size_t> dims{400, 300, 2};
  auto p = NetworkParams::init_gaussian(dims, rng);
  EXPECT_EQ(p.dims(), dims);
  const auto& w = p.layers[0].weight;
  const double var = w.array().square().mean();
  EXPECT_NEAR(var, 1.0 / 400.0, 0.05 / 400.0);
  EXPECT_TRUE(p.layers[0].bias.isZero());
}

TEST(Softmax, Examples) {
  std::vector<double> zero{0.0, 0.0, 0.0};
  auto p = softmax(zero);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p(k), 1.0 / 3.0, 1e-15);

  std::vector<double> big{1000.0, 0.0};
  p = softmax(big);
  EXPECT_EQ(p(0), 1.0);
  EXPECT_GE(p(1), 0.0);
  EXPECT_LT(p(1), 1e-300);

  std::vector<double> ramp{1.0, 2.0, 3.0};
  p = softmax(ramp);
  EXPECT_NEAR(p(0), 0.09003, 1e-5);
  EXPECT_NEAR(p(1), 0.24473, 1e-5);
  EXPECT_NEAR(p(2), 0.66524, 1e-5);
}

TEST(Softmax, MatchesOracleNormalisesAndIsTranslationInvariant) {
  Rng rng(11);
  std::normal_distribution<double> n(0.0, 5.0);
  std::uniform_real_distribution<double> shift(-500.0, 500.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(2 + static_cast<std::size_t>(trial % 9));
    for (auto& v : z) v = n(rng);
    auto p = softmax(z);
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
    auto ref = oracle::softmax(z);
    const double c = shift(rng);
    std::vector<double> zc(z);
    for (auto& v : zc) v += c;
    auto pc = softmax(zc);
    for (std::size_t k = 0; k < z.size(); ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      EXPECT_GT(p(ki), 0.0);
      EXPECT_NEAR(p(ki), static_cast<double>(ref[k]), 1e-12);
      EXPECT_NEAR(p(ki), pc(ki), 1e-9);
    }
  }
}

TEST(Softmax, RowsMatchVector) {
  auto z = random_batch(6, 4, 5);
  Matrix p = z;
  softmax_rows(p);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto pi = softmax(row_span(z, i));
    for (Eigen::Index k = 0; k < 4; ++k) EXPECT_NEAR(p(i, k), pi(k), 1e-15);
  }
}

TEST(CrossEntropy, Examples) {
  std::vector<double> one_hot{0.0, 1.0, 0.0};
  EXPECT_EQ(cross_entropy_loss(one_hot, 1), 0.0);
  std::vector<double> uniform(4, 0.25);
  EXPECT_NEAR(cross_entropy_loss(uniform, 2), 1.386294, 1e-6);
  const double cap = -std::log(1e-12);
  EXPECT_NEAR(cap, 27.631, 1e-3);
  EXPECT_LE(cross_entropy_loss(one_hot, 0), cap + 1e-12);
  EXPECT_TRUE(std::isfinite(cross_entropy_loss(one_hot, 0)));
}

TEST(CrossEntropy, BatchLossIsMeanOfPerSample) {
  auto p = random_net({4, 6, 3}, 2);
  auto x = random_batch(10, 4, 3);
  auto y = random_labels(10, 3, 4);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto q = softmax(std::span<const double>(forward_logits(p, row_span(x, i)).data(), 3));
    sum += cross_entropy_loss(std::span<const double>(q.data(), 3), y[static_cast<std::size_t>(i)]);
  }
  EXPECT_NEAR(batch_loss(p, x, y), sum / 10.0, 1e-12);
}

TEST(Backward, LastLayerClosedForm) {
  auto p = random_net({3, 5, 4}, 7);
  auto x = random_batch(8, 3, 8);
  auto y = random_labels(8, 4, 9);
  auto g = backward_gradients(p, x, y, 1);
  ASSERT_EQ(g.first_layer, 1u);
  ASSERT_EQ(g.layers.size(), 1u);

  // Hidden activations, then (softmax - onehot) h^T averaged over the batch.
  const auto& l0 = p.layers[0];
  Eigen::MatrixXd w_ref = Eigen::MatrixXd::Zero(4, 5);
  Vector b_ref = Vector::Zero(4);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Vector xi = x.row(i).transpose();
    Vector h = (l0.weight * xi + l0.bias).cwiseMax(0.0);
    Vector z = p.layers[1].weight * h + p.layers[1].bias;
    Vector d = softmax(std::span<const double>(z.data(), 4));
    d(y[static_cast<std::size_t>(i)]) -= 1.0;
    w_ref += d * h.transpose();
    b_ref += d;
  }
  w_ref /= 8.0;
  b_ref /= 8.0;
  EXPECT_LT((g.layers[0].weight - w_ref).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((g.layers[0].bias - b_ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, AllFrozenIsEmpty) {
  auto p = random_net({3, 4, 2}, 1);
  auto x = random_batch(4, 3, 2);
  auto y = random_labels(4, 2, 3);
  EXPECT_TRUE(backward_gradients(p, x, y, 2).empty());
  auto g = backward_gradients(p, x, y, 0);
  EXPECT_EQ(g.first_layer, 0u);
  EXPECT_EQ(g.layers.size(), 2u);
}

TEST(Backward, ThreeClassTwoLayerFiniteDifference) {
  std::uint64_t s = 20;
  while (min_abs_preactivation(random_net({4, 6, 3}, s), random_batch(12, 4, s + 1)) < 1e-3) ++s;
  auto p = random_net({4, 6, 3}, s);
  auto x = random_batch(12, 4, s + 1);
  auto y = random_labels(12, 3, s + 2);
  EXPECT_LT(finite_diff_check(p, x, y, 1e-4), 1e-4);
}

// Property: over many random instances away from rectifier kinks, backprop
// agrees with central differences.
TEST(Backward, FiniteDifferencePropertyOverSeeds) {
  int checked = 0;
  for (std::uint64_t s = 0; checked < 25 && s < 200; ++s) {
    auto p = random_net({5, 8, 7, 4}, 100 + s);
    auto x = random_batch(10, 5, 300 + s);
    auto y = random_labels(10, 4, 500 + s);
    if (min_abs_preactivation(p, x) < 1e-3) continue;
    EXPECT_LT(finite_diff_check(p, x, y, 1e-4), 1e-4) << "seed " << s;
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

TEST(Backward, ZeroWeightNetwork) {
  auto p = random_net({3, 4, 3}, 1);
  for (auto& l : p.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  auto x = random_batch(6, 3, 2);
  auto y = random_labels(6, 3, 3);
  EXPECT_LT(finite_diff_check(p, x, y, 1e-4), 1e-6);
}

TEST(Backward, FiniteDiffRejectsBadEps) {
  auto p = random_net({3, 2}, 1);
  auto x = random_batch(2, 3, 2);
  std::vector<int> y{0, 1};
  EXPECT_THROW(finite_diff_check(p, x, y, 0.0), std::invalid_argument);
  EXPECT_THROW(finite_diff_check(p, x, y, -1e-4), std::invalid_argument);
}

TEST(Backward, RejectsEmptyBatch) {
  auto p = random_net({3, 2}, 1);
  Matrix x(0, 3);
  EXPECT_THROW(backward_gradients(p, x, {}), DataError);
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0.0, 100.0), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 100.0, 100.0), 0.0, 1e-17);
  EXPECT_NEAR(cosine_lr(0.1, 50.0, 100.0), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(2.0, 25.0, 100.0), 0.5 * 2.0 * (1.0 + std::cos(std::numbers::pi / 4.0)), 1e-15);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  double prev = cosine_lr(1.0, 0.0, 37.0);
  for (int t = 1; t <= 37; ++t) {
    const double cur = cosine_lr(1.0, t, 37.0);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(TrainConfigValidate, Bounds) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate(2));
  c.lr0 = 0.0;
  EXPECT_THROW(c.validate(2), ConfigError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(2), ConfigError);
  c = {};
  c.frozen_layers = 3;
  EXPECT_THROW(c.validate(2), ConfigError);
}

TEST(Train, SeparableBlobsReachHighAccuracy) {
  auto data = two_blobs(100, 1);
  Rng rng(2);
  std::vector<std::size_t> dims{2, 8, 2};
  auto init = NetworkParams::init_gaussian(dims, rng);
  const double initial = batch_loss(init, data.features, data.labels);
  TrainConfig c;
  c.epochs = 20;
  c.seed = 3;
  auto r = train_network(init, data, c);
  EXPECT_GE(accuracy(r.params, data), 0.99);
  EXPECT_EQ(r.loss_trace.size(), 20u);
  EXPECT_LT(batch_loss(r.params, data.features, data.labels), initial);
}

TEST(Train, FrozenLayersBitIdentical) {
  auto data = two_blobs(40, 4);
  Rng rng(5);
  std::vector<std::size_t> dims{2, 6, 5, 2};
  auto init = NetworkParams::init_gaussian(dims, rng);
  TrainConfig c;
  c.epochs = 5;
  c.frozen_layers = 2;
  auto r = train_network(init, data, c);
  EXPECT_TRUE(r.params.layers[0] == init.layers[0]);
  EXPECT_TRUE(r.params.layers[1] == init.layers[1]);
  EXPECT_FALSE(r.params.layers[2] == init.layers[2]);

  c.frozen_layers = 3;
  EXPECT_TRUE(train_network(init, data, c).params == init);
}

TEST(Train, DeterministicGivenSeed) {
  auto data = two_blobs(30, 6);
  Rng rng(7);
  std::vector<std::size_t> dims{2, 4, 2};
  auto init = NetworkParams::init_gaussian(dims, rng);
  TrainConfig c;
  c.epochs = 4;
  c.seed = 42;
  auto a = train_network(init, data, c);
  auto b = train_network(init, data, c);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  c.seed = 43;
  EXPECT_FALSE(train_network(init, data, c).params == a.params);
}

TEST(Train, DivergenceReportsEpoch) {
  auto data = two_blobs(30, 8);
  Rng rng(9);
  std::vector<std::size_t> dims{2, 4, 2};
  auto init = NetworkParams::init_gaussian(dims, rng);
  TrainConfig c;
  c.lr0 = 1e200;
  c.epochs = 5;
  try {
    train_network(init, data, c);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.epoch(), 0);
    EXPECT_LT(e.epoch(), 5);
    EXPECT_EQ(e.kind(), ErrorKind::Divergence);
  }
}

TEST(Train, RejectsHeadWidthMismatch) {
  auto data = two_blobs(10, 1);
  Rng rng(1);
  std::vector<std::size_t> dims{2, 3};
  auto init = NetworkParams::init_gaussian(dims, rng);
  EXPECT_THROW(train_network(init, data, TrainConfig{}), DataError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto p = random_net({5, 7, 3}, 12);
  p.layers[0].weight(0, 0) = 0.1 + 0.2;
  p.layers[1].bias(2) = -1.0 / 3.0;
  auto path = std::filesystem::temp_directory_path() / "cbe_network_rt" / "net.json";
  save_network(path, p);
  auto back = load_network(path);
  EXPECT_TRUE(back == p);
}

TEST(Checkpoint, RejectsWrongFormat) {
  auto dir = std::filesystem::temp_directory_path() / "cbe_network_bad";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "x.json") << R"({"format":"other","version":1})";
  }
  EXPECT_THROW(load_network(dir / "x.json"), DataError);
  EXPECT_THROW(load_network(dir / "missing.json"), Error);
}

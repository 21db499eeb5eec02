// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string_view>

#include <Eigen/Dense>

namespace cbe {

/// Row-major so that each sample (row) is contiguous and can be viewed as a span.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// All randomised code takes this engine explicitly; there is no global RNG state.
using Rng = std::mt19937_64;

/// Long-tail reporting bucket. The numeric order (Many, Medium, Few) is also
/// the expert order used everywhere a fixed ordering is needed.
enum class Fold : int { Many = 0, Medium = 1, Few = 2 };

inline constexpr std::array<Fold, 3> kFolds{Fold::Many, Fold::Medium, Fold::Few};

constexpr std::size_t fold_index(Fold f) { return static_cast<std::size_t>(f); }

constexpr std::string_view fold_name(Fold f) {
  switch (f) {
    case Fold::Many: return "many";
    case Fold::Medium: return "medium";
    case Fold::Few: return "few";
  }
  return "?";
}

std::optional<Fold> parse_fold(std::string_view name);

inline std::span<const double> row_span(const Matrix& m, Eigen::Index row) {
  return {m.data() + row * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::span<double> row_span(Matrix& m, Eigen::Index row) {
  return {m.data() + row * m.cols(), static_cast<std::size_t>(m.cols())};
}

/// Derives an independent stream seed from a base seed and a tag sequence.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

}  // namespace cbe

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/rng.hpp"

namespace minpart {

enum class SpaceKind { BinaryVectors, PermutationVectors, PermutationMatrices };

inline std::string to_string(SpaceKind kind) {
  switch (kind) {
    case SpaceKind::BinaryVectors: return "binary_vectors";
    case SpaceKind::PermutationVectors: return "permutation_vectors";
    case SpaceKind::PermutationMatrices: return "permutation_matrices";
  }
  return "?";
}

/// Dense encoding of one structured output: a 0/1 vector, a vector of ranks
/// (1..k), or a row-major flattened permutation matrix.
struct StructuredOutput {
  std::vector<double> values;
};

/// A finite structured output set with a uniform sampler and, when small
/// enough, exhaustive enumeration. Immutable and freely shareable.
struct OutputSpace {
  SpaceKind kind = SpaceKind::BinaryVectors;
  int k = 1;

  int encoding_dim() const {
    return kind == SpaceKind::PermutationMatrices ? k * k : k;
  }

  /// True when |Y| exceeds 2^63 and enumeration is refused.
  bool cardinality_huge() const {
    if (kind == SpaceKind::BinaryVectors) return k > 63;
    return k > 20;  // 21! > 2^63
  }

  std::uint64_t cardinality() const {
    if (cardinality_huge())
      throw CapExceeded("cardinality of " + to_string(kind) + "(k=" +
                        std::to_string(k) + ") exceeds 2^63");
    if (kind == SpaceKind::BinaryVectors) return std::uint64_t{1} << k;
    std::uint64_t f = 1;
    for (int i = 2; i <= k; ++i) f *= static_cast<std::uint64_t>(i);
    return f;
  }

  /// log |Y|; defined even for huge spaces.
  double log_cardinality() const {
    if (kind == SpaceKind::BinaryVectors) return k * std::log(2.0);
    return std::lgamma(static_cast<double>(k) + 1.0);
  }
};

inline bool operator==(const OutputSpace& a, const OutputSpace& b) {
  return a.kind == b.kind && a.k == b.k;
}

/// Per-point probability 1/|Y| of the uniform reference distribution.
inline double uniform_mass(const OutputSpace& space) {
  if (space.cardinality_huge())
    throw CapExceeded("uniform_mass requires finite cardinality <= 2^63");
  return std::exp(-space.log_cardinality());
}

inline bool contains(const OutputSpace& space, const StructuredOutput& y) {
  const int dim = space.encoding_dim();
  if (static_cast<int>(y.values.size()) != dim) return false;
  switch (space.kind) {
    case SpaceKind::BinaryVectors:
      for (double v : y.values)
        if (v != 0.0 && v != 1.0) return false;
      return true;
    case SpaceKind::PermutationVectors: {
      std::vector<bool> seen(static_cast<std::size_t>(space.k), false);
      for (double v : y.values) {
        const double r = std::round(v);
        if (r != v || r < 1 || r > space.k) return false;
        auto idx = static_cast<std::size_t>(r) - 1;
        if (seen[idx]) return false;
        seen[idx] = true;
      }
      return true;
    }
    case SpaceKind::PermutationMatrices: {
      const int k = space.k;
      for (double v : y.values)
        if (v != 0.0 && v != 1.0) return false;
      for (int i = 0; i < k; ++i) {
        double row = 0, col = 0;
        for (int j = 0; j < k; ++j) {
          row += y.values[static_cast<std::size_t>(i * k + j)];
          col += y.values[static_cast<std::size_t>(j * k + i)];
        }
        if (row != 1.0 || col != 1.0) return false;
      }
      return true;
    }
  }
  return false;
}

/// rank vector (1..k) -> permutation matrix, P[item][rank-1] = 1.
inline StructuredOutput ranks_to_matrix(const StructuredOutput& y, int k) {
  StructuredOutput m;
  m.values.assign(static_cast<std::size_t>(k) * k, 0.0);
  for (int i = 0; i < k; ++i) {
    const int rank = static_cast<int>(std::llround(y.values[static_cast<std::size_t>(i)]));
    if (rank < 1 || rank > k)
      throw NotAPermutation("rank out of range in ranks_to_matrix");
    m.values[static_cast<std::size_t>(i) * k + (rank - 1)] = 1.0;
  }
  return m;
}

/// permutation matrix -> rank vector.
inline StructuredOutput matrix_to_ranks(const StructuredOutput& m, int k) {
  StructuredOutput y;
  y.values.assign(static_cast<std::size_t>(k), 0.0);
  for (int i = 0; i < k; ++i) {
    int rank = 0;
    for (int j = 0; j < k; ++j)
      if (m.values[static_cast<std::size_t>(i) * k + j] == 1.0) rank = j + 1;
    if (rank == 0) throw NotAPermutation("row without a unit entry in matrix_to_ranks");
    y.values[static_cast<std::size_t>(i)] = rank;
  }
  return y;
}

/// Draw one output uniformly over the space's vertex set.
inline StructuredOutput sample_uniform(const OutputSpace& space, RngState& rng) {
  StructuredOutput y;
  switch (space.kind) {
    case SpaceKind::BinaryVectors: {
      y.values.resize(static_cast<std::size_t>(space.k));
      int j = 0;
      while (j < space.k) {
        std::uint64_t bits = rng.next();
        const int take = std::min(space.k - j, 64);
        for (int b = 0; b < take; ++b, ++j)
          y.values[static_cast<std::size_t>(j)] = static_cast<double>((bits >> b) & 1u);
      }
      return y;
    }
    case SpaceKind::PermutationVectors: {
      std::vector<int> ranks(static_cast<std::size_t>(space.k));
      std::iota(ranks.begin(), ranks.end(), 1);
      rng.shuffle(ranks);
      y.values.assign(ranks.begin(), ranks.end());
      return y;
    }
    case SpaceKind::PermutationMatrices: {
      std::vector<int> ranks(static_cast<std::size_t>(space.k));
      std::iota(ranks.begin(), ranks.end(), 1);
      rng.shuffle(ranks);
      StructuredOutput v;
      v.values.assign(ranks.begin(), ranks.end());
      return ranks_to_matrix(v, space.k);
    }
  }
  return y;
}

/// Uniform sample written into a preallocated buffer (hot path of the
/// doubly stochastic losses; avoids per-draw allocation).
inline void sample_uniform_into(const OutputSpace& space, RngState& rng,
                                std::vector<double>& out) {
  if (space.kind == SpaceKind::BinaryVectors) {
    out.resize(static_cast<std::size_t>(space.k));
    int j = 0;
    while (j < space.k) {
      std::uint64_t bits = rng.next();
      const int take = std::min(space.k - j, 64);
      for (int b = 0; b < take; ++b, ++j)
        out[static_cast<std::size_t>(j)] = static_cast<double>((bits >> b) & 1u);
    }
    return;
  }
  StructuredOutput y = sample_uniform(space, rng);
  out = std::move(y.values);
}

/// All distinct elements of the space, each exactly once. Throws CapExceeded
/// when |Y| > cap (or |Y| is huge).
inline std::vector<StructuredOutput> enumerate(const OutputSpace& space,
                                               std::uint64_t cap) {
  if (space.cardinality_huge() || space.cardinality() > cap)
    throw CapExceeded("enumeration cap exceeded for " + to_string(space.kind) +
                      "(k=" + std::to_string(space.k) + ")");
  std::vector<StructuredOutput> all;
  all.reserve(static_cast<std::size_t>(space.cardinality()));
  switch (space.kind) {
    case SpaceKind::BinaryVectors: {
      const std::uint64_t n = space.cardinality();
      for (std::uint64_t mask = 0; mask < n; ++mask) {
        StructuredOutput y;
        y.values.resize(static_cast<std::size_t>(space.k));
        for (int j = 0; j < space.k; ++j)
          y.values[static_cast<std::size_t>(j)] = static_cast<double>((mask >> j) & 1u);
        all.push_back(std::move(y));
      }
      return all;
    }
    case SpaceKind::PermutationVectors:
    case SpaceKind::PermutationMatrices: {
      std::vector<int> ranks(static_cast<std::size_t>(space.k));
      std::iota(ranks.begin(), ranks.end(), 1);
      do {
        StructuredOutput y;
        y.values.assign(ranks.begin(), ranks.end());
        if (space.kind == SpaceKind::PermutationMatrices)
          y = ranks_to_matrix(y, space.k);
        all.push_back(std::move(y));
      } while (std::next_permutation(ranks.begin(), ranks.end()));
      return all;
    }
  }
  return all;
}

}  // namespace minpart

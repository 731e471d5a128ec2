#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/nets.hpp"
#include "minpart/spaces.hpp"

namespace minpart {

struct ModeSolverConfig {
  int max_sweeps = 100;
  double tol = 1e-9;
  double rounding_threshold = 0.5;
  bool record_trace = false;  // objective after every coordinate update
};

/// Threshold rule for the unary multilabel model: y_j = 1 iff theta_j >= 0.
inline StructuredOutput mode_unary(std::span<const double> theta) {
  StructuredOutput y;
  y.values.resize(theta.size());
  for (std::size_t j = 0; j < theta.size(); ++j)
    y.values[j] = theta[j] >= 0.0 ? 1.0 : 0.0;
  return y;
}

/// Closed-form marginals of the unary model: sigmoid per coordinate.
inline std::vector<double> marginals_unary(std::span<const double> theta) {
  std::vector<double> mu(theta.size());
  for (std::size_t j = 0; j < theta.size(); ++j) mu[j] = sigmoid(theta[j]);
  return mu;
}

namespace detail {

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> m, int n) {
  const auto nn = static_cast<std::size_t>(n);
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < nn; ++p)
      for (std::size_t q = p + 1; q < nn; ++q) off += m[p * nn + q] * m[p * nn + q];
    if (off < 1e-28) break;
    for (std::size_t p = 0; p + 1 < nn; ++p) {
      for (std::size_t q = p + 1; q < nn; ++q) {
        const double apq = m[p * nn + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = m[p * nn + p];
        const double aqq = m[q * nn + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        m[p * nn + p] = app - t * apq;
        m[q * nn + q] = aqq + t * apq;
        m[p * nn + q] = 0.0;
        m[q * nn + p] = 0.0;
        for (std::size_t i = 0; i < nn; ++i) {
          if (i == p || i == q) continue;
          const double aip = m[i * nn + p];
          const double aiq = m[i * nn + q];
          m[i * nn + p] = c * aip - s * aiq;
          m[p * nn + i] = m[i * nn + p];
          m[i * nn + q] = s * aip + c * aiq;
          m[q * nn + i] = m[i * nn + q];
        }
      }
    }
  }
  std::vector<double> eig(nn);
  for (std::size_t i = 0; i < nn; ++i) eig[i] = m[i * nn + i];
  return eig;
}

inline void check_nsd(std::span<const double> U, int k, double tol) {
  const auto kk = static_cast<std::size_t>(k);
  for (std::size_t i = 0; i < kk; ++i)
    for (std::size_t j = i + 1; j < kk; ++j)
      if (std::abs(U[i * kk + j] - U[j * kk + i]) > tol)
        throw NotNSD("pairwise matrix is not symmetric");
  std::vector<double> neg(U.begin(), U.end());
  for (double& v : neg) v = -v;
  const auto eig = symmetric_eigenvalues(std::move(neg), k);
  for (double e : eig)
    if (e < -tol) throw NotNSD("pairwise matrix is not negative semidefinite");
}

}  // namespace detail

struct PairwiseModeResult {
  std::vector<double> relaxed;  // box maximizer in [0,1]^k
  StructuredOutput rounded;
  double objective = 0.0;  // phi value at the relaxed point
  int sweeps = 0;
  std::vector<double> trace;  // filled when cfg.record_trace
};

/// Cyclic coordinate ascent for max_{mu in [0,1]^k} <u,mu> + 1/2 mu^T U mu
/// with U symmetric negative semidefinite. Each coordinate update is the
/// exact 1-D maximizer, so the objective never decreases.
inline PairwiseModeResult mode_pairwise(std::span<const double> u,
                                        std::span<const double> U,
                                        const ModeSolverConfig& cfg = {}) {
  const int k = static_cast<int>(u.size());
  const auto kk = static_cast<std::size_t>(k);
  if (U.size() != kk * kk) throw ShapeMismatch("U must be k x k");
  detail::check_nsd(U, k, 1e-8);

  PairwiseModeResult res;
  res.relaxed.resize(kk);
  for (std::size_t j = 0; j < kk; ++j) res.relaxed[j] = sigmoid(u[j]);  // warm start

  auto objective = [&](const std::vector<double>& mu) {
    double lin = 0.0, quad = 0.0;
    for (std::size_t i = 0; i < kk; ++i) {
      lin += u[i] * mu[i];
      for (std::size_t j = 0; j < kk; ++j) quad += mu[i] * U[i * kk + j] * mu[j];
    }
    return lin + 0.5 * quad;
  };

  double prev = objective(res.relaxed);
  for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    for (std::size_t j = 0; j < kk; ++j) {
      double slope = u[j];
      for (std::size_t i = 0; i < kk; ++i)
        if (i != j) slope += U[j * kk + i] * res.relaxed[i];
      const double ujj = U[j * kk + j];
      double val;
      if (ujj < 0.0)
        val = std::clamp(slope / (-ujj), 0.0, 1.0);
      else
        val = slope > 0.0 ? 1.0 : 0.0;
      res.relaxed[j] = val;
      if (cfg.record_trace) res.trace.push_back(objective(res.relaxed));
    }
    res.sweeps = sweep + 1;
    const double cur = objective(res.relaxed);
    if (cur - prev < cfg.tol) {
      prev = cur;
      break;
    }
    prev = cur;
  }
  res.objective = prev;
  res.rounded.values.resize(kk);
  for (std::size_t j = 0; j < kk; ++j)
    res.rounded.values[j] = res.relaxed[j] >= cfg.rounding_threshold ? 1.0 : 0.0;
  return res;
}

/// Linear maximization over the permutahedron: the largest theta gets rank k,
/// the smallest rank 1. Ties give the lower index the higher rank.
inline StructuredOutput mode_permutahedron(std::span<const double> theta) {
  const auto k = theta.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (theta[a] != theta[b]) return theta[a] > theta[b];
    return a < b;
  });
  StructuredOutput y;
  y.values.resize(k);
  for (std::size_t pos = 0; pos < k; ++pos)
    y.values[order[pos]] = static_cast<double>(k - pos);
  return y;
}

namespace detail {

/// O(n^3) Hungarian method (potentials form) for square min-cost assignment.
/// Returns row_of_col: column j is matched to row row_of_col[j].
inline std::vector<int> hungarian_min(std::span<const double> cost, int n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur =
            cost[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_of_col(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) row_of_col[static_cast<std::size_t>(j - 1)] = p[static_cast<std::size_t>(j)] - 1;
  return row_of_col;
}

}  // namespace detail

/// Linear maximization over the Birkhoff polytope via the Hungarian method
/// on the negated profit matrix. theta is k x k row-major; the result is the
/// flattened permutation matrix maximizing <theta, P>.
inline StructuredOutput mode_birkhoff(std::span<const double> theta, int k) {
  const auto kk = static_cast<std::size_t>(k);
  if (theta.size() != kk * kk) throw ShapeMismatch("theta must be k x k");
  for (double t : theta)
    if (!std::isfinite(t)) throw ShapeMismatch("theta entries must be finite");
  std::vector<double> cost(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) cost[i] = -theta[i];
  const auto row_of_col = detail::hungarian_min(cost, k);
  StructuredOutput y;
  y.values.assign(kk * kk, 0.0);
  for (int j = 0; j < k; ++j)
    y.values[static_cast<std::size_t>(row_of_col[static_cast<std::size_t>(j)]) * kk + static_cast<std::size_t>(j)] = 1.0;
  return y;
}

}  // namespace minpart

#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/data.hpp"
#include "minpart/energy.hpp"
#include "minpart/inference.hpp"
#include "minpart/losses.hpp"

namespace minpart {

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::vector<double> per_example;
};

/// Example-based f1: 2|y and yhat| / (|y| + |yhat|); both empty counts as 1.
inline double f1_example(std::span<const double> y_true,
                         std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size())
    throw ShapeMismatch("f1_example: length mismatch");
  double inter = 0.0, total = 0.0;
  for (std::size_t j = 0; j < y_true.size(); ++j) {
    inter += y_true[j] * y_pred[j];
    total += y_true[j] + y_pred[j];
  }
  if (total == 0.0) return 1.0;
  return 2.0 * inter / total;
}

/// Kendall rank correlation between two strict rankings (1..k each).
inline double kendall_tau(std::span<const double> y_true,
                          std::span<const double> y_pred) {
  const auto k = y_true.size();
  if (y_pred.size() != k) throw ShapeMismatch("kendall_tau: length mismatch");
  auto validate = [k](std::span<const double> y) {
    std::vector<bool> seen(k, false);
    for (double v : y) {
      const double r = std::round(v);
      if (r != v || r < 1 || r > static_cast<double>(k))
        throw NotAPermutation("kendall_tau: rank out of range");
      if (seen[static_cast<std::size_t>(r) - 1])
        throw NotAPermutation("kendall_tau: duplicate rank");
      seen[static_cast<std::size_t>(r) - 1] = true;
    }
  };
  validate(y_true);
  validate(y_pred);
  if (k < 2) return 1.0;
  long concordant_minus_discordant = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      const double a = y_true[i] - y_true[j];
      const double b = y_pred[i] - y_pred[j];
      concordant_minus_discordant += (a * b > 0) ? 1 : -1;
    }
  return static_cast<double>(concordant_minus_discordant) /
         (static_cast<double>(k) * static_cast<double>(k - 1) / 2.0);
}

/// Mode prediction dispatched on (space, coupling).
inline StructuredOutput predict_mode(const EnergyModel& model,
                                     std::span<const double> x,
                                     const ModeSolverConfig& cfg = {}) {
  const std::vector<double> theta = forward(model.h_spec, model.h_params, x, nullptr);
  switch (model.space.kind) {
    case SpaceKind::BinaryVectors:
      if (model.coupling.kind == CouplingKind::Bilinear) return mode_unary(theta);
      else {
        const auto k = static_cast<std::size_t>(model.coupling.k);
        const std::vector<double> U = pairwise_matrix(model.coupling, theta);
        std::span<const double> u(theta.data(), k);
        return mode_pairwise(u, U, cfg).rounded;
      }
    case SpaceKind::PermutationVectors:
      if (model.coupling.kind != CouplingKind::Bilinear)
        throw WrongKind("permutation spaces use the bilinear coupling");
      return mode_permutahedron(theta);
    case SpaceKind::PermutationMatrices:
      if (model.coupling.kind != CouplingKind::Bilinear)
        throw WrongKind("permutation spaces use the bilinear coupling");
      return mode_birkhoff(theta, model.space.k);
  }
  throw WrongKind("unreachable");
}

/// Dataset-level metric of mode predictions: example-based f1 for multilabel
/// tasks, Kendall tau for ranking tasks (matrix encodings are converted to
/// rank vectors first).
inline MetricReport evaluate_dataset(const EnergyModel& model, const Dataset& ds,
                                     const ModeSolverConfig& cfg = {}) {
  MetricReport rep;
  rep.name = ds.space.kind == SpaceKind::BinaryVectors ? "f1" : "kendall";
  rep.per_example.resize(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const StructuredOutput pred = predict_mode(model, ds.xs.row(i), cfg);
    if (ds.space.kind == SpaceKind::BinaryVectors) {
      rep.per_example[i] = f1_example(ds.ys[i].values, pred.values);
    } else if (ds.space.kind == SpaceKind::PermutationVectors) {
      rep.per_example[i] = kendall_tau(ds.ys[i].values, pred.values);
    } else {
      const auto t = matrix_to_ranks(ds.ys[i], ds.space.k);
      const auto p = matrix_to_ranks(pred, ds.space.k);
      rep.per_example[i] = kendall_tau(t.values, p.values);
    }
  }
  double acc = 0.0;
  for (double v : rep.per_example) acc += v;
  rep.value = rep.per_example.empty() ? 0.0 : acc / static_cast<double>(rep.per_example.size());
  return rep;
}

struct TauDiagnostic {
  bool defined = false;  // false when either side has zero variance
  double pearson = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::pair<double, double>> pairs;  // (learned tau, exact lse)
};

/// Compares the learned log-partition with the unary closed form
/// sum_j softplus(theta_j) - k log 2 on the given inputs.
inline TauDiagnostic tau_vs_oracle(const TauModel& tau, const EnergyModel& model,
                                   const Matrix& xs) {
  if (model.coupling.kind != CouplingKind::Bilinear ||
      model.space.kind != SpaceKind::BinaryVectors)
    throw NotUnary("tau_vs_oracle needs the unary multilabel model");
  if (tau.is_table())
    throw NotUnary("per-example tables cannot be evaluated on new inputs");
  TauDiagnostic diag;
  diag.pairs.reserve(xs.rows);
  for (std::size_t i = 0; i < xs.rows; ++i) {
    const auto x = xs.row(i);
    const double learned = tau_forward(tau, x, -1, nullptr);
    const std::vector<double> theta = forward(model.h_spec, model.h_params, x, nullptr);
    double lse = 0.0;
    for (double t : theta) lse += softplus(t);
    lse -= model.space.k * std::log(2.0);
    diag.pairs.emplace_back(learned, lse);
  }
  const auto n = static_cast<double>(diag.pairs.size());
  if (diag.pairs.size() < 2) return diag;
  double ma = 0.0, mb = 0.0;
  for (const auto& [a, b] : diag.pairs) {
    ma += a;
    mb += b;
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (const auto& [a, b] : diag.pairs) {
    cov += (a - ma) * (b - mb);
    va += (a - ma) * (a - ma);
    vb += (b - mb) * (b - mb);
  }
  if (va <= 1e-24 || vb <= 1e-24) return diag;  // zero variance: undefined
  diag.defined = true;
  diag.pearson = cov / std::sqrt(va * vb);
  return diag;
}

}  // namespace minpart

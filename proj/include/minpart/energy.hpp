#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/nets.hpp"
#include "minpart/spaces.hpp"

namespace minpart {

enum class CouplingKind { Bilinear, LinearQuadratic };

inline std::string to_string(CouplingKind c) {
  return c == CouplingKind::Bilinear ? "bilinear" : "linear_quadratic";
}

/// Coupling between logits theta and outputs. Bilinear expects theta of the
/// space's encoding dim. LinearQuadratic expects theta = (u in R^k, A in
/// R^{k x r}) realizing the pairwise matrix U = -A A^T, which is negative
/// semidefinite by construction.
struct Coupling {
  CouplingKind kind = CouplingKind::Bilinear;
  int k = 0;
  int rank = 0;  // r; LinearQuadratic only, defaults to k when 0

  int effective_rank() const { return rank > 0 ? rank : k; }

  /// Length of theta this coupling consumes (the required h output_dim).
  int theta_dim(const OutputSpace& space) const {
    if (kind == CouplingKind::Bilinear) return space.encoding_dim();
    return k + k * effective_rank();
  }
};

/// phi(theta, mu). mu may be any point of the relaxed polytope.
inline double phi(const Coupling& coupling, std::span<const double> theta,
                  std::span<const double> mu) {
  if (coupling.kind == CouplingKind::Bilinear) {
    if (theta.size() != mu.size())
      throw ShapeMismatch("bilinear phi: theta/mu length mismatch");
    double acc = 0.0;
    for (std::size_t j = 0; j < mu.size(); ++j) acc += theta[j] * mu[j];
    return acc;
  }
  const auto k = static_cast<std::size_t>(coupling.k);
  const auto r = static_cast<std::size_t>(coupling.effective_rank());
  if (theta.size() != k + k * r || mu.size() != k)
    throw ShapeMismatch("linear-quadratic phi: bad theta/mu shape");
  double lin = 0.0;
  for (std::size_t j = 0; j < k; ++j) lin += theta[j] * mu[j];
  // quadratic part: -1/2 ||A^T mu||^2 with A row-major after u
  double quad = 0.0;
  for (std::size_t c = 0; c < r; ++c) {
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += theta[k + i * r + c] * mu[i];
    quad += z * z;
  }
  return lin - 0.5 * quad;
}

/// d phi / d theta, accumulated as grad += scale * dphi/dtheta.
inline void phi_grad_theta_accum(const Coupling& coupling,
                                 std::span<const double> theta,
                                 std::span<const double> mu, double scale,
                                 std::span<double> grad) {
  if (coupling.kind == CouplingKind::Bilinear) {
    for (std::size_t j = 0; j < mu.size(); ++j) grad[j] += scale * mu[j];
    return;
  }
  const auto k = static_cast<std::size_t>(coupling.k);
  const auto r = static_cast<std::size_t>(coupling.effective_rank());
  for (std::size_t j = 0; j < k; ++j) grad[j] += scale * mu[j];
  // d/dA of -1/2 ||A^T mu||^2 is -mu (A^T mu)^T
  for (std::size_t c = 0; c < r; ++c) {
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += theta[k + i * r + c] * mu[i];
    if (z == 0.0) continue;
    for (std::size_t i = 0; i < k; ++i) grad[k + i * r + c] -= scale * z * mu[i];
  }
}

/// Materializes U = -A A^T from a linear-quadratic theta (k x k, row-major).
inline std::vector<double> pairwise_matrix(const Coupling& coupling,
                                           std::span<const double> theta) {
  if (coupling.kind != CouplingKind::LinearQuadratic)
    throw WrongKind("pairwise_matrix requires a linear-quadratic coupling");
  const auto k = static_cast<std::size_t>(coupling.k);
  const auto r = static_cast<std::size_t>(coupling.effective_rank());
  std::vector<double> U(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < r; ++c)
        acc += theta[k + i * r + c] * theta[k + j * r + c];
      U[i * k + j] = -acc;
      U[j * k + i] = -acc;
    }
  return U;
}

/// g(x, y) = phi(h(x), y): a logits network composed with a coupling.
struct EnergyModel {
  NetSpec h_spec;
  ParamVector h_params;
  Coupling coupling;
  OutputSpace space;

  void check() const {
    if (h_spec.output_dim != coupling.theta_dim(space))
      throw ShapeMismatch("h output_dim " + std::to_string(h_spec.output_dim) +
                          " does not match coupling theta dim " +
                          std::to_string(coupling.theta_dim(space)));
  }
};

/// Tape of one energy evaluation; carries the logits tape plus what the
/// coupling backward needs.
struct EnergyTape {
  EvalTape h_tape;
  std::vector<double> theta;
  std::vector<double> y;
};

inline std::vector<double> logits(const EnergyModel& model, std::span<const double> x,
                                  EvalTape* tape = nullptr) {
  return forward(model.h_spec, model.h_params, x, tape);
}

inline std::pair<double, EnergyTape> energy(const EnergyModel& model,
                                            std::span<const double> x,
                                            const StructuredOutput& y) {
  EnergyTape tape;
  tape.theta = forward(model.h_spec, model.h_params, x, &tape.h_tape);
  tape.y = y.values;
  return {phi(model.coupling, tape.theta, y.values), std::move(tape)};
}

/// grad += scale * d g(x,y) / d w, chaining d phi/d theta through h.
inline void grad_energy_accum(const EnergyModel& model, const EnergyTape& tape,
                              double scale, ParamVector& grad) {
  std::vector<double> cot(tape.theta.size(), 0.0);
  phi_grad_theta_accum(model.coupling, tape.theta, tape.y, scale, cot);
  backward_accum(model.h_spec, model.h_params, tape.h_tape, cot, grad);
}

inline ParamVector grad_energy(const EnergyModel& model, const EnergyTape& tape,
                               double scale) {
  ParamVector grad = zeros_like(model.h_params);
  grad_energy_accum(model, tape, scale, grad);
  return grad;
}

}  // namespace minpart

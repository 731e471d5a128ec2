#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/energy.hpp"
#include "minpart/inference.hpp"
#include "minpart/matrix.hpp"
#include "minpart/nets.hpp"
#include "minpart/parallel.hpp"
#include "minpart/rng.hpp"
#include "minpart/spaces.hpp"

namespace minpart {

enum class FKind { KL, ChiSquare };

/// Generator of the f-divergence behind the loss, exposing the restricted
/// conjugate f+* and its derivative. The chi-square conjugate drops the
/// additive constant of the true conjugate so displayed values match
/// tau(x) + 1/2 sum_y q [g - tau]_+^2; constants never affect gradients.
struct FGenerator {
  FKind kind = FKind::KL;

  double conjugate(double v) const {
    if (kind == FKind::KL) return std::expm1(v);
    const double p = v > 0 ? v : 0.0;
    return 0.5 * p * p;
  }

  double conjugate_deriv(double v) const {
    if (kind == FKind::KL) return std::exp(v);
    return v > 0 ? v : 0.0;
  }

  static FGenerator kl() { return {FKind::KL}; }
  static FGenerator chi_square() { return {FKind::ChiSquare}; }
};

inline std::string to_string(FKind k) {
  return k == FKind::KL ? "kl" : "chi_square";
}

struct Batch {
  Matrix xs;
  std::vector<StructuredOutput> ys;
  std::vector<int> ids;

  std::size_t size() const { return xs.rows; }

  void check(const OutputSpace& space) const {
    if (ys.size() != xs.rows || ids.size() != xs.rows)
      throw ShapeMismatch("batch rows/labels/ids are inconsistent");
    for (const auto& y : ys)
      if (!contains(space, y))
        throw ShapeMismatch("batch label not in the output space");
  }
};

/// The log-partition model: a per-example table or any scalar-output net.
struct TauModel {
  NetSpec spec;
  ParamVector params;

  bool is_table() const { return spec.kind == NetKind::PerExampleTable; }
};

inline double tau_forward(const TauModel& tau, std::span<const double> x, int id,
                          EvalTape* tape = nullptr) {
  if (tau.is_table()) return forward_id(tau.spec, tau.params, id, tape)[0];
  return forward(tau.spec, tau.params, x, tape)[0];
}

struct LossValueAndGrads {
  double value = 0.0;
  ParamVector grad_g;
  ParamVector grad_tau;
};

namespace detail {

struct PerExampleSlot {
  double value = 0.0;
  double tau_cot = 0.0;
  std::vector<double> theta_cot;
  EvalTape h_tape;
  EvalTape tau_tape;
};

/// Shared reduction: value mean plus backward passes in fixed index order,
/// so results are identical for any worker count.
inline LossValueAndGrads reduce_slots(const EnergyModel& g, const TauModel* tau,
                                      std::vector<PerExampleSlot>& slots) {
  LossValueAndGrads out;
  out.grad_g = zeros_like(g.h_params);
  if (tau) out.grad_tau = zeros_like(tau->params);
  const double inv_b = 1.0 / static_cast<double>(slots.size());
  std::vector<double> scaled;
  for (auto& slot : slots) {
    out.value += inv_b * slot.value;
    scaled.assign(slot.theta_cot.begin(), slot.theta_cot.end());
    for (double& v : scaled) v *= inv_b;
    backward_accum(g.h_spec, g.h_params, slot.h_tape, scaled, out.grad_g);
    if (tau) {
      const double c = inv_b * slot.tau_cot;
      backward_accum(tau->spec, tau->params, slot.tau_tape,
                     std::span<const double>(&c, 1), out.grad_tau);
    }
  }
  return out;
}

}  // namespace detail

/// Doubly stochastic objective: per example,
///   tau(x) + mean_j f+*(g(x, y'_j) - tau(x)) - g(x, y),
/// with y'_j drawn i.i.d. from the uniform reference distribution
/// (prior_samples >= 1 draws). prior_samples == 0 replaces the j-average by
/// one pass over the full enumeration with equal weights. The returned
/// gradients are the exact gradients of the sampled value; per-example draws
/// come from substreams of rng_seed, so a fixed seed fixes the value.
inline LossValueAndGrads minmin_objective(const EnergyModel& g, const TauModel& tau,
                                          const FGenerator& f, const Batch& batch,
                                          int prior_samples, std::uint64_t rng_seed,
                                          unsigned workers = 1) {
  if (prior_samples < 0) throw ConfigError("prior_samples must be >= 0");
  g.check();
  batch.check(g.space);
  const std::size_t b = batch.size();
  std::vector<StructuredOutput> all;
  if (prior_samples == 0) all = enumerate(g.space, std::uint64_t{1} << 22);

  std::vector<detail::PerExampleSlot> slots(b);
  parallel_for(b, workers, [&](std::size_t i) {
    auto& slot = slots[i];
    const auto x = batch.xs.row(i);
    const std::vector<double> theta = forward(g.h_spec, g.h_params, x, &slot.h_tape);
    const double tau_x = tau_forward(tau, x, batch.ids[i], &slot.tau_tape);
    slot.theta_cot.assign(theta.size(), 0.0);

    double conj_sum = 0.0;
    double deriv_sum = 0.0;
    if (prior_samples == 0) {
      const double inv_m = 1.0 / static_cast<double>(all.size());
      for (const auto& yp : all) {
        const double v = phi(g.coupling, theta, yp.values) - tau_x;
        conj_sum += f.conjugate(v);
        const double d = f.conjugate_deriv(v);
        deriv_sum += d;
        phi_grad_theta_accum(g.coupling, theta, yp.values, d * inv_m, slot.theta_cot);
      }
      conj_sum *= inv_m;
      deriv_sum *= inv_m;
    } else {
      RngState rng = RngState::derive(rng_seed, i);
      std::vector<double> yp;
      const double inv_m = 1.0 / static_cast<double>(prior_samples);
      for (int j = 0; j < prior_samples; ++j) {
        sample_uniform_into(g.space, rng, yp);
        const double v = phi(g.coupling, theta, yp) - tau_x;
        conj_sum += f.conjugate(v);
        const double d = f.conjugate_deriv(v);
        deriv_sum += d;
        phi_grad_theta_accum(g.coupling, theta, yp, d * inv_m, slot.theta_cot);
      }
      conj_sum *= inv_m;
      deriv_sum *= inv_m;
    }

    slot.value = tau_x + conj_sum - phi(g.coupling, theta, batch.ys[i].values);
    slot.tau_cot = 1.0 - deriv_sum;
    phi_grad_theta_accum(g.coupling, theta, batch.ys[i].values, -1.0, slot.theta_cot);
  });
  return detail::reduce_slots(g, &tau, slots);
}

/// Deterministic variant: the prior expectation is computed exactly as
/// sum_y q(y) f+*(g(x,y) - tau(x)) over the enumerated space.
inline LossValueAndGrads exact_objective(const EnergyModel& g, const TauModel& tau,
                                         const FGenerator& f, const Batch& batch,
                                         std::uint64_t cap = std::uint64_t{1} << 22,
                                         unsigned workers = 1) {
  g.check();
  batch.check(g.space);
  const auto all = enumerate(g.space, cap);
  const double q = uniform_mass(g.space);
  const std::size_t b = batch.size();

  std::vector<detail::PerExampleSlot> slots(b);
  parallel_for(b, workers, [&](std::size_t i) {
    auto& slot = slots[i];
    const auto x = batch.xs.row(i);
    const std::vector<double> theta = forward(g.h_spec, g.h_params, x, &slot.h_tape);
    const double tau_x = tau_forward(tau, x, batch.ids[i], &slot.tau_tape);
    slot.theta_cot.assign(theta.size(), 0.0);

    double expectation = 0.0;
    double deriv_expectation = 0.0;
    for (const auto& yp : all) {
      const double v = phi(g.coupling, theta, yp.values) - tau_x;
      expectation += q * f.conjugate(v);
      const double d = q * f.conjugate_deriv(v);
      deriv_expectation += d;
      phi_grad_theta_accum(g.coupling, theta, yp.values, d, slot.theta_cot);
    }
    slot.value = tau_x + expectation - phi(g.coupling, theta, batch.ys[i].values);
    slot.tau_cot = 1.0 - deriv_expectation;
    phi_grad_theta_accum(g.coupling, theta, batch.ys[i].values, -1.0, slot.theta_cot);
  });
  return detail::reduce_slots(g, &tau, slots);
}

/// Exact log-partition under the uniform reference distribution,
/// log E_{y~q} exp(g(x,y)). Closed form for the unary model, otherwise a
/// stable log-sum-exp over the enumeration.
inline double exact_lse(const EnergyModel& g, std::span<const double> theta,
                        const std::vector<StructuredOutput>* enumerated = nullptr) {
  if (g.coupling.kind == CouplingKind::Bilinear &&
      g.space.kind == SpaceKind::BinaryVectors && !enumerated) {
    double acc = 0.0;
    for (double t : theta) acc += softplus(t);
    return acc - g.space.k * std::log(2.0);
  }
  std::vector<StructuredOutput> local;
  if (!enumerated) {
    local = enumerate(g.space, std::uint64_t{1} << 22);
    enumerated = &local;
  }
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& y : *enumerated)
    m = std::max(m, phi(g.coupling, theta, y.values));
  double acc = 0.0;
  for (const auto& y : *enumerated)
    acc += std::exp(phi(g.coupling, theta, y.values) - m);
  return m + std::log(acc / static_cast<double>(enumerated->size()));
}

enum class MleBackend { Auto, ClosedForm, Enumeration };

/// Classical maximum-likelihood objective (1/n) sum_i [LSE(x_i) - g(x_i,y_i)]
/// with LSE taken under the uniform reference probability. Uses the unary
/// closed form when available, otherwise enumerates.
inline LossValueAndGrads exact_mle_objective(const EnergyModel& g, const Batch& batch,
                                             MleBackend backend = MleBackend::Auto,
                                             std::uint64_t cap = std::uint64_t{1} << 22,
                                             unsigned workers = 1) {
  g.check();
  batch.check(g.space);
  const bool unary = g.coupling.kind == CouplingKind::Bilinear &&
                     g.space.kind == SpaceKind::BinaryVectors;
  bool closed_form = unary;
  if (backend == MleBackend::ClosedForm && !unary)
    throw WrongKind("closed-form MLE path needs a unary model");
  if (backend == MleBackend::Enumeration) closed_form = false;

  std::vector<StructuredOutput> all;
  double q = 0.0;
  if (!closed_form) {
    all = enumerate(g.space, cap);
    q = uniform_mass(g.space);
  }
  const std::size_t b = batch.size();
  std::vector<detail::PerExampleSlot> slots(b);
  parallel_for(b, workers, [&](std::size_t i) {
    auto& slot = slots[i];
    const auto x = batch.xs.row(i);
    const std::vector<double> theta = forward(g.h_spec, g.h_params, x, &slot.h_tape);
    slot.theta_cot.assign(theta.size(), 0.0);
    double lse;
    if (closed_form) {
      lse = 0.0;
      for (std::size_t j = 0; j < theta.size(); ++j) {
        lse += softplus(theta[j]);
        slot.theta_cot[j] = sigmoid(theta[j]);
      }
      lse -= g.space.k * std::log(2.0);
    } else {
      double m = -std::numeric_limits<double>::infinity();
      for (const auto& y : all) m = std::max(m, phi(g.coupling, theta, y.values));
      double acc = 0.0;
      for (const auto& y : all) acc += std::exp(phi(g.coupling, theta, y.values) - m);
      lse = m + std::log(q * acc);
      for (const auto& y : all) {
        const double p = std::exp(phi(g.coupling, theta, y.values) - lse) * q;
        phi_grad_theta_accum(g.coupling, theta, y.values, p, slot.theta_cot);
      }
    }
    slot.value = lse - phi(g.coupling, theta, batch.ys[i].values);
    phi_grad_theta_accum(g.coupling, theta, batch.ys[i].values, -1.0, slot.theta_cot);
  });
  return detail::reduce_slots(g, nullptr, slots);
}

/// The per-example optimum of the inner minimization. KL: the exact
/// log-partition. Chi-square: the unique root of
/// sum_y q(y) [g(x,y) - tau]_+ = 1, found by bisection.
inline double tau_optimal_per_example(const EnergyModel& g, std::span<const double> x,
                                      const FGenerator& f,
                                      std::uint64_t cap = std::uint64_t{1} << 22) {
  g.check();
  const auto all = enumerate(g.space, cap);
  const double q = uniform_mass(g.space);
  const std::vector<double> theta = forward(g.h_spec, g.h_params, x, nullptr);
  std::vector<double> energies(all.size());
  for (std::size_t j = 0; j < all.size(); ++j)
    energies[j] = phi(g.coupling, theta, all[j].values);

  if (f.kind == FKind::KL) {
    const double m = *std::max_element(energies.begin(), energies.end());
    double acc = 0.0;
    for (double e : energies) acc += std::exp(e - m);
    return m + std::log(q * acc);
  }

  const auto [mn_it, mx_it] = std::minmax_element(energies.begin(), energies.end());
  double lo = *mn_it - 1.0 / q;
  double hi = *mx_it;
  const auto residual = [&](double t) {
    double acc = 0.0;
    for (double e : energies) acc += q * std::max(e - t, 0.0);
    return acc - 1.0;
  };
  double mid = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    mid = 0.5 * (lo + hi);
    const double r = residual(mid);
    if (std::abs(r) <= 1e-10) return mid;
    if (r > 0)
      lo = mid;
    else
      hi = mid;
  }
  return mid;
}

struct McmcResult {
  ParamVector grad_g;
  /// (1/B) sum_i [g(x_i, chain_i) - g(x_i, y_i)] with the chain states held
  /// fixed; grad_g is the exact gradient of this surrogate.
  double surrogate_value = 0.0;
  std::vector<StructuredOutput> chain_states;
};

/// Metropolis-Hastings gradient estimator of the MLE objective: per example,
/// a uniform-proposal chain of length chain_len started at the observed
/// output; the model expectation is estimated by the final chain state.
inline McmcResult mcmc_mle_grad(const EnergyModel& g, const Batch& batch,
                                int chain_len, std::uint64_t rng_seed,
                                unsigned workers = 1) {
  if (chain_len < 1) throw ConfigError("chain_len must be >= 1");
  g.check();
  batch.check(g.space);
  const std::size_t b = batch.size();
  std::vector<detail::PerExampleSlot> slots(b);
  McmcResult res;
  res.chain_states.resize(b);
  parallel_for(b, workers, [&](std::size_t i) {
    auto& slot = slots[i];
    const auto x = batch.xs.row(i);
    const std::vector<double> theta = forward(g.h_spec, g.h_params, x, &slot.h_tape);
    slot.theta_cot.assign(theta.size(), 0.0);
    RngState rng = RngState::derive(rng_seed, i);

    std::vector<double> cur = batch.ys[i].values;
    double cur_e = phi(g.coupling, theta, cur);
    std::vector<double> prop;
    for (int t = 0; t < chain_len; ++t) {
      sample_uniform_into(g.space, rng, prop);
      const double prop_e = phi(g.coupling, theta, prop);
      const double delta = prop_e - cur_e;
      if (delta >= 0.0 || rng.next_double() < std::exp(delta)) {
        cur = prop;
        cur_e = prop_e;
      }
    }
    res.chain_states[i].values = cur;
    slot.value = cur_e - phi(g.coupling, theta, batch.ys[i].values);
    phi_grad_theta_accum(g.coupling, theta, cur, 1.0, slot.theta_cot);
    phi_grad_theta_accum(g.coupling, theta, batch.ys[i].values, -1.0, slot.theta_cot);
  });
  auto reduced = detail::reduce_slots(g, nullptr, slots);
  res.grad_g = std::move(reduced.grad_g);
  res.surrogate_value = reduced.value;
  return res;
}

// ---------------------------------------------------------------------------
// Min-max baseline: adversarial generator trained with REINFORCE.
// ---------------------------------------------------------------------------

/// Sampling distribution of the min-max generator: factorized Bernoulli over
/// binary vectors, Plackett-Luce over permutations. The net maps x to k
/// real scores.
struct GeneratorModel {
  NetSpec spec;
  ParamVector params;
  OutputSpace space;

  void check() const {
    if (spec.output_dim != space.k)
      throw ShapeMismatch("generator must emit k scores");
  }
};

/// KL(Bernoulli(pi) || uniform bits) in closed form, from logits.
inline double bernoulli_kl_uniform(std::span<const double> logits) {
  double acc = 0.0;
  const double log2 = std::log(2.0);
  for (double a : logits) {
    const double p = sigmoid(a);
    // p log(2p) + (1-p) log(2(1-p)), written to stay finite as p -> {0,1}
    if (p > 0.0) acc += p * (std::log(p) + log2);
    if (p < 1.0) acc += (1.0 - p) * (std::log(1.0 - p) + log2);
  }
  return acc;
}

inline StructuredOutput generator_sample(const OutputSpace& space,
                                         std::span<const double> scores,
                                         RngState& rng) {
  if (space.kind == SpaceKind::BinaryVectors) {
    StructuredOutput y;
    y.values.resize(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j)
      y.values[j] = rng.next_double() < sigmoid(scores[j]) ? 1.0 : 0.0;
    return y;
  }
  // Plackett-Luce: repeatedly softmax-sample among remaining items; the
  // first drawn item receives the highest rank.
  const auto k = static_cast<std::size_t>(space.k);
  std::vector<std::size_t> remaining(k);
  std::iota(remaining.begin(), remaining.end(), 0);
  StructuredOutput ranks;
  ranks.values.resize(k);
  for (std::size_t stage = 0; stage < k; ++stage) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t idx : remaining) m = std::max(m, scores[idx]);
    double z = 0.0;
    for (std::size_t idx : remaining) z += std::exp(scores[idx] - m);
    const double draw = rng.next_double() * z;
    double acc = 0.0;
    std::size_t chosen = remaining.size() - 1;
    for (std::size_t pos = 0; pos < remaining.size(); ++pos) {
      acc += std::exp(scores[remaining[pos]] - m);
      if (draw < acc) {
        chosen = pos;
        break;
      }
    }
    ranks.values[remaining[chosen]] = static_cast<double>(k - stage);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(chosen));
  }
  if (space.kind == SpaceKind::PermutationMatrices)
    return ranks_to_matrix(ranks, space.k);
  return ranks;
}

/// log p(y | scores) for the generator's distribution.
inline double generator_log_prob(const OutputSpace& space,
                                 std::span<const double> scores,
                                 const StructuredOutput& y) {
  if (space.kind == SpaceKind::BinaryVectors) {
    double acc = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      // log sigmoid(a) = -softplus(-a); log(1 - sigmoid(a)) = -softplus(a)
      acc += y.values[j] == 1.0 ? -softplus(-scores[j]) : -softplus(scores[j]);
    }
    return acc;
  }
  const auto k = static_cast<std::size_t>(space.k);
  const StructuredOutput ranks = space.kind == SpaceKind::PermutationMatrices
                                     ? matrix_to_ranks(y, space.k)
                                     : y;
  // item drawn at stage s has rank k - s
  std::vector<std::size_t> item_at_stage(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto rank = static_cast<std::size_t>(ranks.values[i]);
    item_at_stage[k - rank] = i;
  }
  std::vector<bool> used(k, false);
  double acc = 0.0;
  for (std::size_t stage = 0; stage < k; ++stage) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i)
      if (!used[i]) m = std::max(m, scores[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      if (!used[i]) z += std::exp(scores[i] - m);
    const std::size_t it = item_at_stage[stage];
    acc += scores[it] - m - std::log(z);
    used[it] = true;
  }
  return acc;
}

/// cot += scale * d log p(y | scores) / d scores.
inline void generator_log_prob_grad_accum(const OutputSpace& space,
                                          std::span<const double> scores,
                                          const StructuredOutput& y, double scale,
                                          std::span<double> cot) {
  if (space.kind == SpaceKind::BinaryVectors) {
    for (std::size_t j = 0; j < scores.size(); ++j)
      cot[j] += scale * (y.values[j] - sigmoid(scores[j]));
    return;
  }
  const auto k = static_cast<std::size_t>(space.k);
  const StructuredOutput ranks = space.kind == SpaceKind::PermutationMatrices
                                     ? matrix_to_ranks(y, space.k)
                                     : y;
  std::vector<std::size_t> item_at_stage(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto rank = static_cast<std::size_t>(ranks.values[i]);
    item_at_stage[k - rank] = i;
  }
  std::vector<bool> used(k, false);
  for (std::size_t stage = 0; stage < k; ++stage) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i)
      if (!used[i]) m = std::max(m, scores[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      if (!used[i]) z += std::exp(scores[i] - m);
    for (std::size_t i = 0; i < k; ++i)
      if (!used[i]) cot[i] -= scale * std::exp(scores[i] - m) / z;
    cot[item_at_stage[stage]] += scale;
    used[item_at_stage[stage]] = true;
  }
}

/// Running-mean control variate and the previous-gradient slot used by the
/// optimistic updates; owned by the training loop across steps.
struct MinMaxState {
  double baseline = 0.0;
  bool baseline_init = false;
  double baseline_decay = 0.99;
};

struct MinMaxResult {
  ParamVector grad_g;          // descent direction for the energy parameters
  ParamVector grad_generator;  // descent direction for the generator (negated ascent)
  double value = 0.0;          // sampled estimate of the adversarial objective
  /// Frozen-sample surrogates: grad_g is the exact gradient of
  /// surrogate_g w.r.t. the energy parameters; -grad_generator is the exact
  /// gradient of surrogate_generator w.r.t. the generator parameters.
  double surrogate_g = 0.0;
  double surrogate_generator = 0.0;
  std::vector<std::vector<StructuredOutput>> samples;       // per example
  std::vector<std::vector<double>> reinforce_weights;       // per example
};

/// One step of the adversarial baseline. The energy descends
/// E_gen[g] - E_data[g]; the generator ascends E_gen[g] - KL(p, q) through
/// the score-function estimator with an EMA control variate. For binary
/// spaces the KL term and its gradient use the closed form; for permutations
/// the KL enters the REINFORCE reward.
inline MinMaxResult minmax_reinforce_step(const EnergyModel& g,
                                          const GeneratorModel& gen,
                                          const Batch& batch, int prior_samples,
                                          std::uint64_t rng_seed, MinMaxState& state,
                                          unsigned workers = 1) {
  if (prior_samples < 1) throw ConfigError("prior_samples must be >= 1");
  g.check();
  gen.check();
  batch.check(g.space);
  const std::size_t b = batch.size();
  const bool binary = g.space.kind == SpaceKind::BinaryVectors;
  const double log_q = -g.space.log_cardinality();

  struct Slot {
    detail::PerExampleSlot energy;  // theta cotangent for grad_g
    EvalTape gen_tape;
    std::vector<double> gen_cot;    // ascent cotangent on generator scores
    double value = 0.0;
    double surrogate_gen = 0.0;
    double mean_g = 0.0;
    std::vector<StructuredOutput> samples;
    std::vector<double> weights;
  };
  std::vector<Slot> slots(b);
  const double baseline = state.baseline_init ? state.baseline : 0.0;

  parallel_for(b, workers, [&](std::size_t i) {
    auto& slot = slots[i];
    const auto x = batch.xs.row(i);
    const std::vector<double> theta =
        forward(g.h_spec, g.h_params, x, &slot.energy.h_tape);
    const std::vector<double> scores =
        forward(gen.spec, gen.params, x, &slot.gen_tape);
    slot.energy.theta_cot.assign(theta.size(), 0.0);
    slot.gen_cot.assign(scores.size(), 0.0);
    RngState rng = RngState::derive(rng_seed, i);

    const double inv_m = 1.0 / static_cast<double>(prior_samples);
    double g_sum = 0.0;
    double kl_sample_sum = 0.0;
    slot.samples.reserve(static_cast<std::size_t>(prior_samples));
    slot.weights.reserve(static_cast<std::size_t>(prior_samples));
    for (int j = 0; j < prior_samples; ++j) {
      StructuredOutput yp = generator_sample(g.space, scores, rng);
      const double e = phi(g.coupling, theta, yp.values);
      const double logp = generator_log_prob(g.space, scores, yp);
      g_sum += e;
      kl_sample_sum += logp - log_q;
      phi_grad_theta_accum(g.coupling, theta, yp.values, inv_m, slot.energy.theta_cot);
      // REINFORCE reward; for binary spaces the KL is handled in closed form
      const double reward = binary ? e : e - logp + log_q;
      const double w = (reward - baseline) * inv_m;
      generator_log_prob_grad_accum(g.space, scores, yp, w, slot.gen_cot);
      slot.surrogate_gen += w * logp;
      slot.samples.push_back(std::move(yp));
      slot.weights.push_back(w);
    }
    slot.mean_g = g_sum * inv_m;
    const double data_e = phi(g.coupling, theta, batch.ys[i].values);
    phi_grad_theta_accum(g.coupling, theta, batch.ys[i].values, -1.0,
                         slot.energy.theta_cot);
    slot.energy.value = slot.mean_g - data_e;

    double kl;
    if (binary) {
      kl = bernoulli_kl_uniform(scores);
      for (std::size_t j = 0; j < scores.size(); ++j) {
        const double p = sigmoid(scores[j]);
        slot.gen_cot[j] -= scores[j] * p * (1.0 - p);  // d KL / d score
      }
      slot.surrogate_gen -= kl;
    } else {
      kl = kl_sample_sum * inv_m;
    }
    slot.value = slot.mean_g - kl - data_e;
  });

  MinMaxResult res;
  res.grad_g = zeros_like(g.h_params);
  res.grad_generator = zeros_like(gen.params);
  res.samples.resize(b);
  res.reinforce_weights.resize(b);
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<double> scaled;
  double g_running = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    auto& slot = slots[i];
    res.value += inv_b * slot.value;
    res.surrogate_g += inv_b * slot.energy.value;
    res.surrogate_generator += inv_b * slot.surrogate_gen;
    g_running += inv_b * slot.mean_g;
    scaled.assign(slot.energy.theta_cot.begin(), slot.energy.theta_cot.end());
    for (double& v : scaled) v *= inv_b;
    backward_accum(g.h_spec, g.h_params, slot.energy.h_tape, scaled, res.grad_g);
    // negate: the generator maximizes, the caller always descends
    scaled.assign(slot.gen_cot.begin(), slot.gen_cot.end());
    for (double& v : scaled) v *= -inv_b;
    backward_accum(gen.spec, gen.params, slot.gen_tape, scaled, res.grad_generator);
    res.samples[i] = std::move(slot.samples);
    res.reinforce_weights[i] = std::move(slot.weights);
  }
  if (state.baseline_init) {
    state.baseline = state.baseline_decay * state.baseline +
                     (1.0 - state.baseline_decay) * g_running;
  } else {
    state.baseline = g_running;
    state.baseline_init = true;
  }
  return res;
}

/// Differentiable surrogate whose exact generator-parameter gradient is the
/// (ascent-form) REINFORCE update, given the frozen samples and weights from
/// a minmax_reinforce_step call at the same parameters.
inline double minmax_generator_surrogate(const GeneratorModel& gen,
                                         const Batch& batch,
                                         const std::vector<std::vector<StructuredOutput>>& samples,
                                         const std::vector<std::vector<double>>& weights) {
  gen.check();
  double acc = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::vector<double> scores =
        forward(gen.spec, gen.params, batch.xs.row(i), nullptr);
    double per = 0.0;
    for (std::size_t j = 0; j < samples[i].size(); ++j)
      per += weights[i][j] *
             generator_log_prob(gen.space, scores, samples[i][j]);
    if (gen.space.kind == SpaceKind::BinaryVectors)
      per -= bernoulli_kl_uniform(scores);
    acc += inv_b * per;
  }
  return acc;
}

/// Energy surrogate for the min-max step at frozen samples:
/// (1/B) sum_i [mean_j g(x_i, y'_ij) - g(x_i, y_i)].
inline double minmax_energy_surrogate(const EnergyModel& g, const Batch& batch,
                                      const std::vector<std::vector<StructuredOutput>>& samples) {
  double acc = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::vector<double> theta = forward(g.h_spec, g.h_params, batch.xs.row(i), nullptr);
    double mean = 0.0;
    for (const auto& yp : samples[i]) mean += phi(g.coupling, theta, yp.values);
    mean /= static_cast<double>(samples[i].size());
    acc += inv_b * (mean - phi(g.coupling, theta, batch.ys[i].values));
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Generalized Fenchel-Young baseline.
// ---------------------------------------------------------------------------

struct GfyConfig {
  double omega = 1.0;  // quadratic regularization weight
  ModeSolverConfig solver{500, 0.0, 0.5, false};  // run pairwise ascent to the sweep cap
};

namespace detail {

/// argmax_{mu in C} phi(theta, mu) - omega ||mu||^2 / 2 for the supported
/// (space, coupling) combinations.
inline std::vector<double> gfy_argmax(const EnergyModel& g,
                                      std::span<const double> theta,
                                      const GfyConfig& cfg) {
  const double omega = cfg.omega;
  if (g.space.kind == SpaceKind::BinaryVectors) {
    if (g.coupling.kind == CouplingKind::Bilinear) {
      std::vector<double> mu(theta.size());
      for (std::size_t j = 0; j < theta.size(); ++j)
        mu[j] = omega > 0.0 ? std::clamp(theta[j] / omega, 0.0, 1.0)
                            : (theta[j] >= 0.0 ? 1.0 : 0.0);
      return mu;
    }
    // linear-quadratic: maximize <u,mu> + 1/2 mu^T (U - omega I) mu
    const auto k = static_cast<std::size_t>(g.coupling.k);
    std::vector<double> U = pairwise_matrix(g.coupling, theta);
    for (std::size_t j = 0; j < k; ++j) U[j * k + j] -= omega;
    std::span<const double> u(theta.data(), k);
    return mode_pairwise(u, U, cfg.solver).relaxed;
  }
  if (omega != 0.0)
    throw SolverFailure("quadratic regularization over permutation polytopes "
                        "is not supported; use omega = 0");
  if (g.coupling.kind != CouplingKind::Bilinear)
    throw SolverFailure("permutation spaces require the bilinear coupling");
  if (g.space.kind == SpaceKind::PermutationVectors)
    return mode_permutahedron(theta).values;
  return mode_birkhoff(theta, g.space.k).values;
}

}  // namespace detail

/// Generalized Fenchel-Young loss with quadratic regularization:
///   max_{mu in C} [g(x,mu) - omega ||mu||^2/2] - g(x,y) + omega ||y||^2/2,
/// gradient by the envelope theorem. Always nonnegative.
inline LossValueAndGrads gfy_objective(const EnergyModel& g, const Batch& batch,
                                       const GfyConfig& cfg, unsigned workers = 1) {
  g.check();
  batch.check(g.space);
  const std::size_t b = batch.size();
  std::vector<detail::PerExampleSlot> slots(b);
  parallel_for(b, workers, [&](std::size_t i) {
    auto& slot = slots[i];
    const auto x = batch.xs.row(i);
    const std::vector<double> theta = forward(g.h_spec, g.h_params, x, &slot.h_tape);
    slot.theta_cot.assign(theta.size(), 0.0);
    const std::vector<double> mu = detail::gfy_argmax(g, theta, cfg);
    double sq_mu = 0.0, sq_y = 0.0;
    for (double v : mu) sq_mu += v * v;
    for (double v : batch.ys[i].values) sq_y += v * v;
    slot.value = phi(g.coupling, theta, mu) - 0.5 * cfg.omega * sq_mu -
                 phi(g.coupling, theta, batch.ys[i].values) + 0.5 * cfg.omega * sq_y;
    phi_grad_theta_accum(g.coupling, theta, mu, 1.0, slot.theta_cot);
    phi_grad_theta_accum(g.coupling, theta, batch.ys[i].values, -1.0, slot.theta_cot);
  });
  return detail::reduce_slots(g, nullptr, slots);
}

}  // namespace minpart

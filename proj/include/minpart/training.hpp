#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/data.hpp"
#include "minpart/evaluation.hpp"
#include "minpart/losses.hpp"
#include "minpart/nets.hpp"
#include "minpart/parallel.hpp"
#include "minpart/rng.hpp"

namespace minpart {

struct OptimState {
  int step = 0;
  std::vector<double> m;
  std::vector<double> u;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  bool optimistic = false;
  std::vector<double> prev_grad;
};

inline OptimState make_optim(std::size_t size, double lr, double weight_decay = 0.0,
                             bool optimistic = false) {
  OptimState st;
  st.m.assign(size, 0.0);
  st.u.assign(size, 0.0);
  st.lr = lr;
  st.weight_decay = weight_decay;
  st.optimistic = optimistic;
  if (optimistic) st.prev_grad.assign(size, 0.0);
  return st;
}

/// Bias-corrected Adam update, in place. The optimistic variant feeds
/// grad + (grad - prev_grad) through the moment machinery. Weight decay is
/// decoupled from the gradient.
inline void adam_step(OptimState& st, ParamVector& params, const ParamVector& grad) {
  if (params.size() != grad.size() || params.size() != st.m.size())
    throw ShapeMismatch("adam_step: parameter/gradient/state size mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, st.step);
  const double bc2 = 1.0 - std::pow(st.beta2, st.step);
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    double gi = grad.values[i];
    if (st.optimistic) {
      const double extrapolated = 2.0 * gi - st.prev_grad[i];
      st.prev_grad[i] = gi;
      gi = extrapolated;
    }
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * gi;
    st.u[i] = st.beta2 * st.u[i] + (1.0 - st.beta2) * gi * gi;
    const double mhat = st.m[i] / bc1;
    const double uhat = st.u[i] / bc2;
    params.values[i] -= st.lr * (mhat / (std::sqrt(uhat) + st.eps) +
                                 st.weight_decay * params.values[i]);
  }
}

enum class LossKind { MinMinKL, MinMinSparsemax, ExactMle, Mcmc, MinMax, Gfy };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::MinMinKL: return "minmin_kl";
    case LossKind::MinMinSparsemax: return "minmin_sparsemax";
    case LossKind::ExactMle: return "exact_mle";
    case LossKind::Mcmc: return "mcmc";
    case LossKind::MinMax: return "minmax";
    case LossKind::Gfy: return "gfy";
  }
  return "?";
}

struct TrainConfig {
  LossKind loss = LossKind::MinMinKL;
  NetSpec g_spec;  // input_dim/output_dim are set from the dataset and coupling
  CouplingKind coupling = CouplingKind::Bilinear;
  int coupling_rank = 0;  // linear-quadratic only; 0 means rank k
  NetKind tau_kind = NetKind::PerExampleTable;
  std::vector<int> tau_hidden{128};
  Activation tau_activation = Activation::Relu;
  int batch_size = 0;     // B; 0 or >= n gives full batch
  int prior_samples = 32; // B'; 0 replaces sampling by enumeration
  int steps = 5000;
  double lr_g = 1e-4;
  double lr_tau = 1e-4;
  double l2 = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  int eval_every = 100;
  int chain_len = 20;     // mcmc baseline
  double gfy_omega = 1.0; // generalized Fenchel-Young baseline
  unsigned workers = 0;   // 0 = hardware concurrency

  void validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 0) throw ConfigError("batch_size must be >= 0");
    if (prior_samples < 0) throw ConfigError("prior_samples must be >= 0");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (chain_len < 1) throw ConfigError("chain_len must be >= 1");
    if (lr_g < 0 || lr_tau < 0 || l2 < 0) throw ConfigError("rates must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("betas must lie in [0, 1)");
  }
};

struct MetricsRow {
  int step = 0;
  double loss = 0.0;
  double exact_loss = 0.0;
  bool has_exact = false;
  double grad_norm = 0.0;
  double eval_metric = 0.0;
  bool has_eval = false;
  double wall_ms = 0.0;
};

struct TrainResult {
  EnergyModel model;
  TauModel tau;
  GeneratorModel generator;  // populated for the min-max loss only
  std::vector<MetricsRow> log;
};

namespace detail {

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  Batch b;
  b.xs = Matrix(idx.size(), ds.xs.cols);
  b.ys.resize(idx.size());
  b.ids.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = ds.xs.row(idx[i]);
    auto dst = b.xs.row(i);
    std::copy(src.begin(), src.end(), dst.begin());
    b.ys[i] = ds.ys[idx[i]];
    b.ids[i] = static_cast<int>(idx[i]);
  }
  return b;
}

inline double l2_norm(const ParamVector& g) {
  double acc = 0.0;
  for (double v : g.values) acc += v * v;
  return std::sqrt(acc);
}

inline bool loss_uses_tau(LossKind k) {
  return k == LossKind::MinMinKL || k == LossKind::MinMinSparsemax;
}

/// Exact reference objective for the metrics log, when computable: the
/// classical MLE objective for the MLE-family losses, the exact f-objective
/// for sparsemax, the loss itself for the deterministic gfy baseline.
inline bool exact_log_value(LossKind kind, const EnergyModel& g, const TauModel& tau,
                            const Batch& batch, double sampled_value,
                            unsigned workers, double* out) {
  const bool unary = g.coupling.kind == CouplingKind::Bilinear &&
                     g.space.kind == SpaceKind::BinaryVectors;
  const bool enumerable = !g.space.cardinality_huge() &&
                          g.space.cardinality() <= (std::uint64_t{1} << 14);
  if (kind == LossKind::Gfy) {
    *out = sampled_value;
    return true;
  }
  if (kind == LossKind::MinMinSparsemax) {
    if (!enumerable) return false;
    *out = exact_objective(g, tau, FGenerator::chi_square(),
                           batch, std::uint64_t{1} << 14, workers).value;
    return true;
  }
  if (!unary && !enumerable) return false;
  *out = exact_mle_objective(g, batch, MleBackend::Auto, std::uint64_t{1} << 14,
                             workers)
             .value;
  return true;
}

}  // namespace detail

/// Runs `steps` simultaneous Adam updates on the energy parameters and,
/// where the loss has one, the second block (log-partition or generator).
/// Fresh prior samples are drawn every step from per-(step, example)
/// substreams of cfg.seed. A NaN/Inf in any gradient or parameter aborts
/// with a Divergence error naming the step.
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds,
                         const Dataset* eval_ds = nullptr) {
  cfg.validate();
  ds.check();
  if (ds.size() == 0) throw ConfigError("dataset is empty");
  const unsigned workers = cfg.workers == 0 ? default_workers() : cfg.workers;

  TrainResult out;
  out.model.space = ds.space;
  out.model.coupling = Coupling{cfg.coupling, ds.space.k, cfg.coupling_rank};
  out.model.h_spec = cfg.g_spec;
  out.model.h_spec.input_dim = static_cast<int>(ds.xs.cols);
  out.model.h_spec.output_dim = out.model.coupling.theta_dim(ds.space);

  RngState init_rng = RngState::seeded(cfg.seed);
  out.model.h_params = init_params(out.model.h_spec, init_rng);
  out.model.check();

  const bool uses_tau = detail::loss_uses_tau(cfg.loss);
  if (uses_tau) {
    out.tau.spec.kind = cfg.tau_kind;
    if (cfg.tau_kind == NetKind::PerExampleTable) {
      out.tau.spec.output_dim = 1;
      out.tau.spec.table_size = static_cast<int>(ds.size());
    } else {
      out.tau.spec.input_dim = static_cast<int>(ds.xs.cols);
      out.tau.spec.output_dim = 1;
      out.tau.spec.hidden_dims = cfg.tau_hidden;
      out.tau.spec.activation = cfg.tau_kind == NetKind::ICNN
                                    ? Activation::Softplus
                                    : cfg.tau_activation;
    }
    out.tau.params = init_params(out.tau.spec, init_rng);
  }
  if (cfg.loss == LossKind::MinMax) {
    out.generator.space = ds.space;
    out.generator.spec.kind = NetKind::MLP;
    out.generator.spec.input_dim = static_cast<int>(ds.xs.cols);
    out.generator.spec.output_dim = ds.space.k;
    out.generator.spec.hidden_dims = {128};
    out.generator.spec.activation = Activation::Relu;
    out.generator.params = init_params(out.generator.spec, init_rng);
  }

  const bool optimistic = cfg.loss == LossKind::MinMax;
  OptimState opt_g = make_optim(out.model.h_params.size(), cfg.lr_g, cfg.l2, optimistic);
  opt_g.beta1 = cfg.beta1;
  opt_g.beta2 = cfg.beta2;
  OptimState opt_second;
  if (uses_tau)
    opt_second = make_optim(out.tau.params.size(), cfg.lr_tau, 0.0, false);
  else if (cfg.loss == LossKind::MinMax)
    opt_second = make_optim(out.generator.params.size(), cfg.lr_tau, 0.0, true);
  opt_second.beta1 = cfg.beta1;
  opt_second.beta2 = cfg.beta2;

  const std::size_t n = ds.size();
  const bool full_batch = cfg.batch_size == 0 ||
                          static_cast<std::size_t>(cfg.batch_size) >= n;
  std::vector<std::size_t> all_idx(n);
  std::iota(all_idx.begin(), all_idx.end(), 0);
  Batch batch = detail::make_batch(ds, all_idx);
  RngState batch_rng = RngState::derive(cfg.seed, 0x6261746368ULL);  // batch draws
  MinMaxState minmax_state;

  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 0; step < cfg.steps; ++step) {
    if (!full_batch) {
      std::vector<std::size_t> pool = all_idx;
      std::vector<std::size_t> chosen(static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t j = 0; j < chosen.size(); ++j) {
        const std::size_t pick = j + static_cast<std::size_t>(batch_rng.next_below(pool.size() - j));
        std::swap(pool[j], pool[pick]);
        chosen[j] = pool[j];
      }
      batch = detail::make_batch(ds, chosen);
    }
    const std::uint64_t step_seed =
        RngState::derive(cfg.seed, 0x73746570ULL, static_cast<std::uint64_t>(step)).next();

    double value = 0.0;
    ParamVector grad_g;
    const ParamVector* second_grad = nullptr;
    LossValueAndGrads lv;
    MinMaxResult mm;
    switch (cfg.loss) {
      case LossKind::MinMinKL:
      case LossKind::MinMinSparsemax: {
        const FGenerator f = cfg.loss == LossKind::MinMinKL
                                 ? FGenerator::kl()
                                 : FGenerator::chi_square();
        lv = minmin_objective(out.model, out.tau, f, batch, cfg.prior_samples,
                              step_seed, workers);
        value = lv.value;
        grad_g = std::move(lv.grad_g);
        second_grad = &lv.grad_tau;
        break;
      }
      case LossKind::ExactMle: {
        lv = exact_mle_objective(out.model, batch, MleBackend::Auto,
                                 std::uint64_t{1} << 22, workers);
        value = lv.value;
        grad_g = std::move(lv.grad_g);
        break;
      }
      case LossKind::Mcmc: {
        auto r = mcmc_mle_grad(out.model, batch, cfg.chain_len, step_seed, workers);
        value = r.surrogate_value;
        grad_g = std::move(r.grad_g);
        break;
      }
      case LossKind::MinMax: {
        mm = minmax_reinforce_step(out.model, out.generator, batch,
                                   std::max(cfg.prior_samples, 1), step_seed,
                                   minmax_state, workers);
        value = mm.value;
        grad_g = std::move(mm.grad_g);
        second_grad = &mm.grad_generator;
        break;
      }
      case LossKind::Gfy: {
        GfyConfig gfy;
        gfy.omega = cfg.gfy_omega;
        lv = gfy_objective(out.model, batch, gfy, workers);
        value = lv.value;
        grad_g = std::move(lv.grad_g);
        break;
      }
    }

    double grad_norm = detail::l2_norm(grad_g);
    if (second_grad) {
      const double gn2 = detail::l2_norm(*second_grad);
      grad_norm = std::sqrt(grad_norm * grad_norm + gn2 * gn2);
    }
    if (!std::isfinite(value) || !std::isfinite(grad_norm))
      throw Divergence("non-finite loss or gradient at step " + std::to_string(step) +
                       " (loss=" + to_string(cfg.loss) + ")");

    adam_step(opt_g, out.model.h_params, grad_g);
    if (second_grad) {
      if (uses_tau) {
        adam_step(opt_second, out.tau.params, *second_grad);
        if (out.tau.spec.kind == NetKind::ICNN)
          out.tau.params = project_icnn(out.tau.spec, std::move(out.tau.params));
      } else {
        adam_step(opt_second, out.generator.params, *second_grad);
      }
    }
    if (!out.model.h_params.all_finite() ||
        (uses_tau && !out.tau.params.all_finite()))
      throw Divergence("non-finite parameters after step " + std::to_string(step));

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      MetricsRow row;
      row.step = step + 1;
      row.loss = value;
      row.grad_norm = grad_norm;
      row.has_exact = detail::exact_log_value(cfg.loss, out.model, out.tau, batch,
                                              value, workers, &row.exact_loss);
      const Dataset* eval_on = eval_ds ? eval_ds : &ds;
      if (eval_on->size() > 0) {
        row.eval_metric = evaluate_dataset(out.model, *eval_on).value;
        row.has_eval = true;
      }
      row.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      out.log.push_back(row);
    }
  }
  return out;
}

struct GridSearchResult {
  TrainConfig best;
  std::size_t best_index = 0;
  std::vector<double> val_scores;
  TrainResult refit;
};

/// Trains every config on the train rows, scores mode predictions on the
/// validation rows, picks the argmax (first on ties), then refits the winner
/// on train+validation.
inline GridSearchResult grid_search(const std::vector<TrainConfig>& configs,
                                    const Dataset& ds, const Split& split) {
  if (configs.empty()) throw ConfigError("grid_search needs at least one config");
  const Dataset train_ds = subset(ds, split.train_idx);
  const Dataset val_ds = subset(ds, split.val_idx);
  GridSearchResult res;
  res.val_scores.reserve(configs.size());
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < configs.size(); ++c) {
    const TrainResult r = train(configs[c], train_ds, &val_ds);
    const double score =
        val_ds.size() > 0 ? evaluate_dataset(r.model, val_ds).value
                          : evaluate_dataset(r.model, train_ds).value;
    res.val_scores.push_back(score);
    if (score > best_score) {
      best_score = score;
      res.best_index = c;
    }
  }
  res.best = configs[res.best_index];
  std::vector<std::size_t> combined = split.train_idx;
  combined.insert(combined.end(), split.val_idx.begin(), split.val_idx.end());
  const Dataset refit_ds = subset(ds, combined);
  res.refit = train(res.best, refit_ds);
  return res;
}

}  // namespace minpart

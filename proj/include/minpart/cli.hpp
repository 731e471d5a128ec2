#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "minpart/checkpoint.hpp"
#include "minpart/common.hpp"
#include "minpart/data.hpp"
#include "minpart/evaluation.hpp"
#include "minpart/serialize.hpp"
#include "minpart/training.hpp"

namespace minpart::cli {

inline Json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError("config: invalid JSON in '" + path + "': " + e.what());
  }
}

inline TrainConfig train_config_from_json(const Json& j, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.loss = loss_kind_from_string(j.value("loss", std::string("minmin_kl")));
  if (j.contains("g")) {
    const auto& g = j.at("g");
    cfg.g_spec.kind = net_kind_from_string(g.value("kind", std::string("linear")));
    cfg.g_spec.hidden_dims = g.value("hidden_dims", std::vector<int>{128});
    cfg.g_spec.activation =
        activation_from_string(g.value("activation", std::string("relu")));
  }
  cfg.coupling = coupling_kind_from_string(j.value("coupling", std::string("bilinear")));
  cfg.coupling_rank = j.value("coupling_rank", 0);
  if (j.contains("tau")) {
    const auto& t = j.at("tau");
    cfg.tau_kind = net_kind_from_string(t.value("kind", std::string("per_example_table")));
    cfg.tau_hidden = t.value("hidden_dims", std::vector<int>{128});
    cfg.tau_activation =
        activation_from_string(t.value("activation", std::string("relu")));
  }
  cfg.batch_size = j.value("batch_size", 0);
  cfg.prior_samples = j.value("prior_samples", 32);
  cfg.steps = j.value("steps", 5000);
  cfg.lr_g = j.value("lr_g", 1e-4);
  cfg.lr_tau = j.value("lr_tau", 1e-4);
  cfg.l2 = j.value("l2", 0.0);
  cfg.beta1 = j.value("beta1", 0.9);
  cfg.beta2 = j.value("beta2", 0.999);
  cfg.eval_every = j.value("eval_every", 100);
  cfg.chain_len = j.value("chain_len", 20);
  cfg.gfy_omega = j.value("gfy_omega", 1.0);
  cfg.workers = j.value("workers", 0u);
  cfg.validate();
  return cfg;
}

struct LoadedExperiment {
  Dataset data;  // standardized in place when requested
  Split split;
  std::optional<Standardization> standardization;
  TrainConfig train_cfg;
  std::string task;
  std::string output_dir;
  std::uint64_t seed = 0;
  std::string config_hash;
  Json raw;
};

/// Builds the dataset, split and train config described by an experiment
/// config. Field errors surface as ConfigError naming the field.
inline LoadedExperiment prepare_experiment(const Json& config,
                                           const std::string& out_override = "") {
  LoadedExperiment ex;
  ex.raw = config;
  ex.config_hash = json_digest(config);
  ex.task = config.value("task", std::string("multilabel"));
  if (ex.task != "multilabel" && ex.task != "label_ranking")
    throw ConfigError("task: expected 'multilabel' or 'label_ranking'");
  ex.seed = config.value("seed", std::uint64_t{0});
  ex.output_dir = out_override.empty()
                      ? config.value("output_dir", std::string("out"))
                      : out_override;

  if (!config.contains("dataset")) throw ConfigError("dataset: section missing");
  const Json& dj = config.at("dataset");
  const std::string kind = dj.value("kind", std::string("synthetic"));
  const bool as_matrices = dj.value("representation", std::string("vector")) == "matrix";
  if (kind == "synthetic") {
    const int n = dj.value("n", 200);
    const int d = dj.value("d", 10);
    const int k = dj.value("k", 10);
    if (ex.task == "multilabel")
      ex.data = synth_multilabel(n, d, k, dj.value("noise", 0.5), ex.seed);
    else
      ex.data = synth_label_ranking(n, d, k, ex.seed, as_matrices);
  } else if (kind == "libsvm" || kind == "ranking_csv") {
    const std::string path = dj.value("path", std::string());
    if (path.empty())
      throw ConfigError("dataset.path: required for dataset.kind='" + kind + "'");
    if (!std::filesystem::exists(path))
      throw ConfigError("dataset.path: file not found '" + path + "'");
    if (kind == "libsvm") {
      if (ex.task != "multilabel")
        throw ConfigError("dataset.kind: libsvm files are multilabel");
      ex.data = parse_libsvm_multilabel(path, dj.value("k", 0));
    } else {
      if (ex.task != "label_ranking")
        throw ConfigError("dataset.kind: ranking_csv files are label_ranking");
      if (!dj.contains("k")) throw ConfigError("dataset.k: required for ranking_csv");
      ex.data = parse_label_ranking_csv(path, dj.at("k").get<int>(), as_matrices);
    }
  } else {
    throw ConfigError("dataset.kind: unknown kind '" + kind + "'");
  }
  ex.data.check();

  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  if (dj.contains("split")) {
    const auto fr = dj.at("split").get<std::vector<double>>();
    if (fr.size() != 3) throw ConfigError("dataset.split: expected 3 fractions");
    std::copy(fr.begin(), fr.end(), fractions.begin());
  }
  const std::uint64_t split_seed =
      RngState::derive(ex.seed, 0x73706c6974ULL).next();
  ex.split = split_dataset(ex.data, fractions, split_seed);

  if (dj.value("standardize", true)) {
    Standardization st = fit_standardization(ex.data, ex.split.train_idx);
    apply_standardization(ex.data, st);
    ex.standardization = std::move(st);
  }

  ex.train_cfg = train_config_from_json(config.value("train", Json::object()), ex.seed);
  return ex;
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRow>& log) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path);
  out << "step,loss,exact_loss,grad_norm,eval_metric,wall_ms\n";
  char buf[64];
  const auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : log) {
    out << r.step << ',' << num(r.loss) << ','
        << (r.has_exact ? num(r.exact_loss) : "") << ',' << num(r.grad_norm) << ','
        << (r.has_eval ? num(r.eval_metric) : "") << ',' << num(r.wall_ms) << '\n';
  }
}

inline Json checkpoint_meta(const LoadedExperiment& ex, const TrainResult& result) {
  Json meta;
  meta["task"] = ex.task;
  meta["space"] = space_to_json(result.model.space);
  meta["coupling"] = coupling_to_json(result.model.coupling);
  meta["loss"] = to_string(ex.train_cfg.loss);
  meta["config_hash"] = ex.config_hash;
  meta["seed"] = ex.seed;
  if (ex.standardization)
    meta["standardization"] = standardization_to_json(*ex.standardization);
  return meta;
}

/// train verb: fit on the train split, report on the test split, write
/// metrics CSV, checkpoint and summary JSON into the output directory.
inline int cmd_train(const std::string& config_path,
                     const std::string& out_override = "") {
  const Json config = load_config_file(config_path);
  LoadedExperiment ex = prepare_experiment(config, out_override);
  std::filesystem::create_directories(ex.output_dir);

  const Dataset train_ds = subset(ex.data, ex.split.train_idx);
  const Dataset val_ds = subset(ex.data, ex.split.val_idx);
  const Dataset test_ds = subset(ex.data, ex.split.test_idx);
  const Dataset* eval_ds = val_ds.size() > 0 ? &val_ds : nullptr;

  const TrainResult result = train(ex.train_cfg, train_ds, eval_ds);

  const Dataset& metric_ds = test_ds.size() > 0 ? test_ds : train_ds;
  const MetricReport test_metric = evaluate_dataset(result.model, metric_ds);

  write_metrics_csv(ex.output_dir + "/metrics.csv", result.log);

  std::vector<CheckpointEntry> entries;
  entries.push_back({"g", result.model.h_spec, result.model.h_params});
  if (!result.tau.params.values.empty())
    entries.push_back({"tau", result.tau.spec, result.tau.params});
  if (!result.generator.params.values.empty())
    entries.push_back({"generator", result.generator.spec, result.generator.params});
  save_checkpoint(ex.output_dir + "/checkpoint.bin", entries,
                  checkpoint_meta(ex, result));

  Json summary;
  summary["final_loss"] = result.log.empty() ? 0.0 : result.log.back().loss;
  summary["test_metric"] = test_metric.value;
  summary["metric_name"] = test_metric.name;
  summary["seed"] = ex.seed;
  summary["config_hash"] = ex.config_hash;
  std::ofstream sout(ex.output_dir + "/summary.json");
  sout << summary.dump(2) << '\n';
  std::cout << "train: loss=" << summary["final_loss"].get<double>()
            << " " << test_metric.name << "=" << test_metric.value
            << " hash=" << ex.config_hash << '\n';
  return 0;
}

/// Rebuilds an EnergyModel (and optional tau) from a checkpoint.
inline EnergyModel model_from_checkpoint(const Checkpoint& ck) {
  EnergyModel model;
  const auto& g = ck.entry("g");
  model.h_spec = g.spec;
  model.h_params = g.params;
  model.space = space_from_json(ck.meta.at("space"));
  model.coupling = coupling_from_json(ck.meta.at("coupling"));
  model.check();
  return model;
}

inline Dataset dataset_for_checkpoint(const Checkpoint& ck, const std::string& path,
                                      const std::string& format) {
  const OutputSpace space = space_from_json(ck.meta.at("space"));
  Dataset ds;
  if (format == "libsvm") {
    ds = parse_libsvm_multilabel(path, space.k);
  } else if (format == "ranking_csv") {
    ds = parse_label_ranking_csv(path, space.k,
                                 space.kind == SpaceKind::PermutationMatrices);
  } else {
    throw ConfigError("--format: expected 'libsvm' or 'ranking_csv'");
  }
  if (!(ds.space == space))
    throw ConfigError("dataset space does not match checkpoint");
  if (ck.meta.contains("standardization"))
    apply_standardization(ds, standardization_from_json(ck.meta.at("standardization")));
  return ds;
}

/// eval verb: metric of mode predictions of a checkpointed model on a
/// dataset file, with an optional per-example CSV.
inline int cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const std::string& format, const std::string& metric,
                    const std::string& per_example_out = "") {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const EnergyModel model = model_from_checkpoint(ck);
  const Dataset ds = dataset_for_checkpoint(ck, dataset_path, format);
  const MetricReport rep = evaluate_dataset(model, ds);
  if (metric != "auto" && metric != rep.name)
    throw ConfigError("--metric '" + metric + "' does not apply to this task (" +
                      rep.name + ")");
  if (!per_example_out.empty()) {
    std::ofstream out(per_example_out);
    out << "example," << rep.name << '\n';
    for (std::size_t i = 0; i < rep.per_example.size(); ++i)
      out << i << ',' << rep.per_example[i] << '\n';
  }
  std::cout << rep.name << " " << rep.value << '\n';
  return 0;
}

struct ConvergenceResult {
  std::vector<int> prior_sample_counts;  // 0 means exhaustive
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> final_gaps;  // [seed][count]
  std::vector<double> median_gaps;              // [count]
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// convergence verb: trains the min-min loss for each prior-sample count,
/// logging both the sampled and the exact objective per eval step, plus an
/// exact-MLE reference run per seed to measure final gaps.
inline ConvergenceResult run_convergence(const Json& config,
                                         const std::string& out_override = "") {
  LoadedExperiment ex = prepare_experiment(config, out_override);
  const Json cj = config.value("convergence", Json::object());
  ConvergenceResult res;
  res.prior_sample_counts = cj.value("prior_samples", std::vector<int>{});
  if (res.prior_sample_counts.empty())
    throw ConfigError("convergence.prior_samples: need a nonempty list");
  if (cj.contains("seeds"))
    res.seeds = cj.at("seeds").get<std::vector<std::uint64_t>>();
  else
    res.seeds = {ex.seed};

  const Dataset train_ds = subset(ex.data, ex.split.train_idx);
  const bool unary = ex.train_cfg.coupling == CouplingKind::Bilinear &&
                     train_ds.space.kind == SpaceKind::BinaryVectors;
  const bool enumerable = !train_ds.space.cardinality_huge() &&
                          train_ds.space.cardinality() <= (std::uint64_t{1} << 14);
  if (!unary && !enumerable)
    throw ConfigError("convergence: exact objective unavailable for this space");

  std::filesystem::create_directories(ex.output_dir);
  res.final_gaps.assign(res.seeds.size(), {});

  for (std::size_t si = 0; si < res.seeds.size(); ++si) {
    TrainConfig base = ex.train_cfg;
    base.seed = res.seeds[si];
    base.loss = LossKind::ExactMle;
    const TrainResult reference = train(base, train_ds);
    double ref_loss = 0.0;
    for (auto it = reference.log.rbegin(); it != reference.log.rend(); ++it)
      if (it->has_exact) {
        ref_loss = it->exact_loss;
        break;
      }

    std::vector<std::vector<MetricsRow>> logs;
    for (int count : res.prior_sample_counts) {
      TrainConfig cfg = ex.train_cfg;
      cfg.seed = res.seeds[si];
      cfg.loss = LossKind::MinMinKL;
      cfg.prior_samples = count;
      const TrainResult r = train(cfg, train_ds);
      logs.push_back(r.log);
      double final_exact = 0.0;
      for (auto it = r.log.rbegin(); it != r.log.rend(); ++it)
        if (it->has_exact) {
          final_exact = it->exact_loss;
          break;
        }
      res.final_gaps[si].push_back(final_exact - ref_loss);
    }

    // one CSV per seed: step, then (sampled, exact) per prior-sample count
    std::ofstream out(ex.output_dir + "/convergence_seed" +
                      std::to_string(res.seeds[si]) + ".csv");
    out << "step";
    for (int count : res.prior_sample_counts) {
      const std::string tag = count == 0 ? "exhaustive" : std::to_string(count);
      out << ",sampled_b" << tag << ",exact_b" << tag;
    }
    out << '\n';
    const std::size_t rows = logs.front().size();
    for (std::size_t r = 0; r < rows; ++r) {
      out << logs.front()[r].step;
      for (const auto& log : logs)
        out << ',' << log[r].loss << ',' << (log[r].has_exact ? std::to_string(log[r].exact_loss) : "");
      out << '\n';
    }
  }

  for (std::size_t c = 0; c < res.prior_sample_counts.size(); ++c) {
    std::vector<double> gaps;
    gaps.reserve(res.seeds.size());
    for (const auto& per_seed : res.final_gaps) gaps.push_back(per_seed[c]);
    res.median_gaps.push_back(detail::median(std::move(gaps)));
  }

  Json summary;
  summary["prior_samples"] = res.prior_sample_counts;
  summary["seeds"] = res.seeds;
  summary["final_gaps"] = res.final_gaps;
  summary["median_gaps"] = res.median_gaps;
  summary["config_hash"] = ex.config_hash;
  std::ofstream sout(ex.output_dir + "/convergence_summary.json");
  sout << summary.dump(2) << '\n';
  return res;
}

inline int cmd_convergence(const std::string& config_path,
                           const std::string& out_override = "") {
  const ConvergenceResult res =
      run_convergence(load_config_file(config_path), out_override);
  std::cout << "convergence: median final gaps";
  for (std::size_t c = 0; c < res.prior_sample_counts.size(); ++c) {
    const std::string tag = res.prior_sample_counts[c] == 0
                                ? "exhaustive"
                                : std::to_string(res.prior_sample_counts[c]);
    std::cout << " b'=" << tag << ":" << res.median_gaps[c];
  }
  std::cout << '\n';
  return 0;
}

/// taudiag verb: Pearson correlation between the checkpointed tau network
/// and the closed-form log-partition on the config's test split.
inline int cmd_taudiag(const std::string& checkpoint_path,
                       const std::string& config_path,
                       const std::string& out_override = "") {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const EnergyModel model = model_from_checkpoint(ck);
  if (!ck.has_entry("tau"))
    throw NotUnary("checkpoint has no tau entry");
  TauModel tau;
  tau.spec = ck.entry("tau").spec;
  tau.params = ck.entry("tau").params;

  const Json config = load_config_file(config_path);
  LoadedExperiment ex = prepare_experiment(config, out_override);
  std::filesystem::create_directories(ex.output_dir);
  const Dataset test_ds = ex.split.test_idx.empty()
                              ? ex.data
                              : subset(ex.data, ex.split.test_idx);

  const TauDiagnostic diag = tau_vs_oracle(tau, model, test_ds.xs);
  std::ofstream out(ex.output_dir + "/tau_pairs.csv");
  out << "tau,exact_lse\n";
  for (const auto& [a, b] : diag.pairs) out << a << ',' << b << '\n';
  if (diag.defined)
    std::cout << "pearson " << diag.pearson << '\n';
  else
    std::cout << "pearson undefined (zero variance)\n";
  return 0;
}

/// Maps library errors to the documented exit codes: 1 for configuration
/// and compatibility problems, 2 for training divergence.
template <typename Fn>
inline int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Divergence& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace minpart::cli

#include <string>

#include "CLI11.hpp"

#include "minpart/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Energy-based model training over combinatorial output spaces"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, dataset_path, out_dir;
  std::string format = "libsvm";
  std::string metric = "auto";
  std::string per_example_out;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--out", out_dir, "output directory override");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("--dataset", dataset_path, "dataset file")->required();
  eval->add_option("--format", format, "dataset format: libsvm | ranking_csv");
  eval->add_option("--metric", metric, "f1 | kendall | auto");
  eval->add_option("--per-example", per_example_out, "per-example CSV output");

  auto* conv = app.add_subcommand("convergence",
                                  "train for each prior-sample count and log "
                                  "sampled vs exact objectives");
  conv->add_option("--config", config_path, "experiment config (JSON)")->required();
  conv->add_option("--out", out_dir, "output directory override");

  auto* taudiag = app.add_subcommand("taudiag",
                                     "compare the learned log-partition "
                                     "against the closed form");
  taudiag->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  taudiag->add_option("--config", config_path, "experiment config (JSON)")->required();
  taudiag->add_option("--out", out_dir, "output directory override");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed())
    return minpart::cli::guarded([&] { return minpart::cli::cmd_train(config_path, out_dir); });
  if (eval->parsed())
    return minpart::cli::guarded([&] {
      return minpart::cli::cmd_eval(checkpoint_path, dataset_path, format, metric,
                                    per_example_out);
    });
  if (conv->parsed())
    return minpart::cli::guarded(
        [&] { return minpart::cli::cmd_convergence(config_path, out_dir); });
  return minpart::cli::guarded(
      [&] { return minpart::cli::cmd_taudiag(checkpoint_path, config_path, out_dir); });
}

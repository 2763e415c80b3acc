#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "pairmatch/commands.hpp"

int main(int argc, char** argv) {
  using namespace pairmatch;
  CLI::App app{"Mixed-model and design-based analysis of matched-pair cluster-randomized trials"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  app.add_option("--seed", seed, "master seed (overrides the config file)");
  app.add_option("--out", out, "output file or directory");
  app.add_option("--config", config, "scenario config file (key=value)");

  FitCommand fit_cmd;
  auto* fit_app = app.add_subcommand("fit", "fit a multilevel model to a trial CSV");
  fit_app->fallthrough();
  fit_app->add_option("csv", fit_cmd.csv, "trial CSV")->required();
  fit_app->add_option("--model", fit_cmd.model, "mlm1, mlm2, mlm3 or mlm1+x")->capture_default_str();
  fit_app->add_flag("--reml", fit_cmd.reml, "restricted likelihood instead of ML");
  fit_app->add_option("--pair-effects", fit_cmd.pair_effects_out, "write empirical-Bayes pair effects to this CSV");

  EstimateCommand est_cmd;
  auto* est_app = app.add_subcommand("estimate", "design-based SATE estimate with upper-bound SE");
  est_app->fallthrough();
  est_app->add_option("csv", est_cmd.csv, "trial CSV")->required();

  LrtCommand lrt_cmd;
  auto* lrt_app = app.add_subcommand("lrt", "likelihood-ratio test of a random treatment effect");
  lrt_app->fallthrough();
  lrt_app->add_option("csv", lrt_cmd.csv, "trial CSV (fits both models)");
  lrt_app->add_flag("--covariate", lrt_cmd.covariate, "test mlm1+x against mlm3");
  lrt_app->add_option("--null", lrt_cmd.null_fit, "saved fit record of the null model");
  lrt_app->add_option("--alt", lrt_cmd.alt_fit, "saved fit record of the alternative model");

  SimulateCommand sim_cmd;
  std::string sim_grid;
  auto* sim_app = app.add_subcommand("simulate", "simulate a trial, or a sweep when --pi-grid is given");
  sim_app->fallthrough();
  sim_app->add_option("--rep", sim_cmd.rep, "replication id")->capture_default_str();
  sim_app->add_option("--pi-index", sim_cmd.pi_index, "grid index used in seeding")->capture_default_str();
  sim_app->add_option("--pi-grid", sim_grid, "comma-separated pi values; runs a sweep");
  sim_app->add_option("--threads", sim_cmd.threads, "worker threads (0 = all cores)");

  Figure1Command fig_cmd;
  std::string fig_grid;
  auto* fig_app = app.add_subcommand("figure1", "precision-versus-match-quality sweeps for both effect scenarios");
  fig_app->fallthrough();
  fig_app->add_option("--pi-grid", fig_grid, "comma-separated pi values (default 0,0.05,...,0.7)");
  fig_app->add_option("--threads", fig_cmd.threads, "worker threads (0 = all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*fit_app) {
      fit_cmd.out = out;
      return cmd_fit(fit_cmd);
    }
    if (*est_app) {
      est_cmd.out = out;
      return cmd_estimate(est_cmd);
    }
    if (*lrt_app) {
      lrt_cmd.out = out;
      return cmd_lrt(lrt_cmd);
    }
    if (*sim_app) {
      sim_cmd.config = config;
      sim_cmd.seed = seed;
      sim_cmd.out = out;
      if (!sim_grid.empty()) sim_cmd.grid = parse_pi_grid(sim_grid);
      return cmd_simulate(sim_cmd);
    }
    if (*fig_app) {
      fig_cmd.config = config;
      fig_cmd.seed = seed;
      if (!out.empty()) fig_cmd.out = out;
      if (!fig_grid.empty()) fig_cmd.grid = parse_pi_grid(fig_grid);
      return cmd_figure1(fig_cmd);
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}

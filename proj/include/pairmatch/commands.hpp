#pragma once

// Command implementations behind the `pairmatch` tool.  Each returns the
// process exit status: 0 success, 1 input or config error, 2 numerical
// non-convergence.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/design.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/fit.hpp"
#include "pairmatch/kv_record.hpp"
#include "pairmatch/lrt.hpp"
#include "pairmatch/report.hpp"
#include "pairmatch/simulation.hpp"

namespace pairmatch {

enum ExitCode : int { kExitOk = 0, kExitInput = 1, kExitNonConvergence = 2 };

namespace detail {

// Writes to `path`, or to `out` when the path is empty or "-".
inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  write_text(path, text);
}

inline std::vector<PairSummary> load_summaries(const std::string& csv_path, std::ostream& err, bool& ok) {
  const TrialDataset ds = ingest_csv(csv_path);
  const auto report = validate(ds);
  if (!report.ok()) {
    err << "invalid trial data in '" << csv_path << "':\n" << report.to_string();
    ok = false;
    return {};
  }
  ok = true;
  return pair_summaries(ds);
}

inline ScenarioConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  ScenarioConfig cfg = path.empty() ? ScenarioConfig{} : ScenarioConfig::from_record(Record::read_file(path));
  if (seed) cfg.master_seed = *seed;
  return cfg;
}

inline std::string pair_effects_csv(const PairEffects& e) {
  std::string out = "pair_id,alpha,tau\n";
  for (std::size_t k = 0; k < e.pair_id.size(); ++k)
    out += std::to_string(e.pair_id[k]) + ',' + format_double(e.alpha[k]) + ',' + format_double(e.tau[k]) + '\n';
  return out;
}

}  // namespace detail

/// Parses "0,0.05,0.1" into a grid.
inline std::vector<double> parse_pi_grid(std::string_view text) {
  std::vector<double> grid;
  for (const auto& cell : detail::split_csv_line(text)) {
    auto v = parse_double(cell);
    if (!v || !(*v >= 0.0)) throw InputError("bad pi grid value '" + cell + "'");
    grid.push_back(*v);
  }
  if (grid.empty()) throw InputError("pi grid is empty");
  return grid;
}

struct FitCommand {
  std::string csv;
  std::string model = "mlm1";
  std::string out;
  std::string pair_effects_out;  // optional CSV of empirical-Bayes pair effects
  bool reml = false;
};

inline int cmd_fit(const FitCommand& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const ModelSpec spec = ModelSpec::from_name(c.model);
    bool ok = false;
    const auto summaries = detail::load_summaries(c.csv, err, ok);
    if (!ok) return kExitInput;
    FitOptions options;
    options.reml = c.reml;
    const ModelFit f = fit(summaries, spec, options);
    detail::emit(c.out, f.to_record().to_string(), out);
    if (!c.pair_effects_out.empty())
      detail::emit(c.pair_effects_out, detail::pair_effects_csv(pair_effects(f, summaries)), out);
    if (!f.converged) {
      err << "warning: " << spec.name() << " did not converge after " << f.n_evals << " evaluations\n";
      return kExitNonConvergence;
    }
    return kExitOk;
  } catch (const RankDeficiencyError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

struct EstimateCommand {
  std::string csv;
  std::string out;
};

inline int cmd_estimate(const EstimateCommand& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    bool ok = false;
    const auto summaries = detail::load_summaries(c.csv, err, ok);
    if (!ok) return kExitInput;
    detail::emit(c.out, sate_estimate(summaries).to_record().to_string(), out);
    return kExitOk;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

/// Either fits the null and alternative models to `csv`, or compares two
/// saved fit records.
struct LrtCommand {
  std::string csv;
  bool covariate = false;  // mlm1+x vs mlm3 instead of mlm1 vs mlm2
  std::string null_fit;
  std::string alt_fit;
  std::string out;
};

inline int cmd_lrt(const LrtCommand& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    std::optional<ModelFit> null_fit, alt_fit;
    if (!c.null_fit.empty() || !c.alt_fit.empty()) {
      if (c.null_fit.empty() || c.alt_fit.empty() || !c.csv.empty())
        throw InputError("give either a trial CSV or both --null and --alt fit records");
      null_fit = ModelFit::from_record(Record::read_file(c.null_fit));
      alt_fit = ModelFit::from_record(Record::read_file(c.alt_fit));
    } else {
      if (c.csv.empty()) throw InputError("no trial CSV given");
      bool ok = false;
      const auto summaries = detail::load_summaries(c.csv, err, ok);
      if (!ok) return kExitInput;
      null_fit = fit(summaries, c.covariate ? ModelSpec::mlm1_covariate() : ModelSpec::mlm1());
      alt_fit = fit(summaries, c.covariate ? ModelSpec::mlm3() : ModelSpec::mlm2(), {}, &*null_fit);
    }
    const LrtResult r = lrt(*null_fit, *alt_fit);
    Record rec;
    rec.set("null_model", null_fit->spec.name());
    rec.set("alt_model", alt_fit->spec.name());
    rec.set("null_loglik", null_fit->loglik);
    rec.set("alt_loglik", alt_fit->loglik);
    const Record stats = r.to_record();
    for (const auto& [k, v] : stats.entries()) rec.set(k, v);
    detail::emit(c.out, rec.to_string(), out);
    if (!null_fit->converged || !alt_fit->converged) {
      err << "warning: a fit did not converge; the statistic may be unreliable\n";
      return kExitNonConvergence;
    }
    return kExitOk;
  } catch (const RankDeficiencyError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

/// Without a grid: writes one simulated trial CSV for replication `rep`
/// at grid index `pi_index`.  With a grid: runs a sweep and writes
/// summary.csv and raw.csv into the output directory.
struct SimulateCommand {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int rep = 0;
  int pi_index = 0;
  std::optional<std::vector<double>> grid;
  unsigned threads = 0;
};

inline int cmd_simulate(const SimulateCommand& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const ScenarioConfig cfg = detail::load_config(c.config, c.seed);
    if (!c.grid) {
      if (c.rep < 0 || c.pi_index < 0) throw InputError("rep and pi-index must be non-negative");
      const auto seed = replication_seed(cfg.master_seed, static_cast<std::uint64_t>(c.pi_index),
                                         static_cast<std::uint64_t>(c.rep));
      detail::emit(c.out, to_trial_csv(simulate_dataset(cfg, seed)), out);
      return kExitOk;
    }
    if (c.out.empty()) throw InputError("a sweep needs --out <directory>");
    std::filesystem::create_directories(c.out);
    const SweepResult sweep = run_sweep(cfg, *c.grid, c.threads);
    const std::filesystem::path dir(c.out);
    write_text((dir / "summary.csv").string(), to_csv(summarize_sweep(sweep)));
    write_text((dir / "raw.csv").string(), raw_csv(sweep));
    return kExitOk;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

struct Figure1Command {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "figure1";
  std::optional<std::vector<double>> grid;
  unsigned threads = 0;
};

/// Panel A: constant effects.  Panel B: heterogeneous effects, plotted
/// without MLM1.  Both scenarios carry the covariate, so MLM3 rows come
/// from the same datasets as the other estimators; the covariate stream
/// is separate, so the MLM1/MLM2/IKN columns equal a run without it.
inline int cmd_figure1(const Figure1Command& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    ScenarioConfig base = detail::load_config(c.config, c.seed);
    base.covariate = true;
    const std::vector<double> grid = c.grid ? *c.grid : default_pi_grid();
    std::filesystem::create_directories(c.out);
    const std::filesystem::path dir(c.out);

    struct Panel {
      const char* name;
      EffectsMode mode;
      const char* title;
      std::vector<std::string> series;
    };
    const Panel panels[] = {
        {"panelA", EffectsMode::constant, "Constant treatment effects", {"MLM1", "MLM2", "MLM3", "IKN"}},
        {"panelB", EffectsMode::heterogeneous, "Heterogeneous treatment effects", {"MLM2", "MLM3", "IKN"}},
    };
    for (const auto& p : panels) {
      ScenarioConfig cfg = base;
      cfg.effects_mode = p.mode;
      const SweepResult sweep = run_sweep(cfg, grid, c.threads);
      const ReportTable table = summarize_sweep(sweep);
      write_text((dir / (std::string(p.name) + ".csv")).string(), to_csv(table));
      write_text((dir / (std::string(p.name) + "_raw.csv")).string(), raw_csv(sweep));
      PlotOptions plot;
      plot.title = p.title;
      plot.estimators = p.series;
      write_text((dir / (std::string(p.name) + ".svg")).string(), render_svg(table, plot));
      Record used = cfg.to_record();
      std::string g;
      for (double v : grid) g += (g.empty() ? "" : ",") + format_double(v);
      used.set("pi_grid", g);
      write_text((dir / (std::string(p.name) + "_config.txt")).string(), used.to_string());
      out << p.name << ": " << grid.size() << " grid points x " << cfg.replications << " replications\n";
    }
    return kExitOk;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

}  // namespace pairmatch

#pragma once

// Data-generating process for simulated matched-pair cluster trials and
// the Monte Carlo engine that runs replications over a grid of
// match-quality values.
//
// Randomness: every replication owns a 64-bit seed derived from
// (master_seed, grid index, replication id) by chained SplitMix64 mixing
// of the three integers (see replication_seed).  The seed is split into
// independent mt19937_64 streams, one per generation phase, so changing
// one phase (e.g. the effects mode) leaves the draws of the others intact.

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/design.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/fit.hpp"
#include "pairmatch/hash.hpp"
#include "pairmatch/kv_record.hpp"
#include "pairmatch/lrt.hpp"

namespace pairmatch {

enum class SizesMode { fixed, multinomial };
enum class EffectsMode { constant, heterogeneous, independent };

/// SD of 30 / Y for Y ~ N(10, 4), integrated over 10 +/- 4 SD (the raw
/// moment does not exist because of the pole at 0).  Used as the spread of
/// the "independent" effects mode so it matches the heterogeneous mode at
/// pi = 0.
inline constexpr double kIndependentEffectSd = 0.7353;

struct ScenarioConfig {
  int K = 30;
  int mean_cluster_size = 50;
  SizesMode sizes_mode = SizesMode::multinomial;
  double pi = 0.0;
  EffectsMode effects_mode = EffectsMode::constant;
  double tau_const = 3.2;
  double hetero_numerator = 30.0;
  double mu0 = 10.0;
  double sigma0_sq = 4.0;
  double sigma_eps_sq = 1.0;
  bool covariate = false;
  double sigma_zeta = 0.2;  // SD of the covariate noise
  int replications = 100;
  std::uint64_t master_seed = 20090101;

  void check() const {
    if (K < 2) throw InputError("K must be at least 2");
    if (mean_cluster_size < 1) throw InputError("mean_cluster_size must be at least 1");
    if (replications < 1) throw InputError("replications must be at least 1");
    if (!(pi >= 0.0)) throw InputError("pi must be >= 0");
    if (!(sigma0_sq >= 0.0) || !(sigma_eps_sq >= 0.0) || !(sigma_zeta >= 0.0))
      throw InputError("variances must be >= 0");
  }

  Record to_record() const {
    Record r;
    r.set("K", K);
    r.set("mean_cluster_size", mean_cluster_size);
    r.set("sizes_mode", sizes_mode == SizesMode::fixed ? "fixed" : "multinomial");
    r.set("pi", pi);
    r.set("effects_mode", effects_mode == EffectsMode::constant        ? "constant"
                          : effects_mode == EffectsMode::heterogeneous ? "heterogeneous"
                                                                       : "independent");
    r.set("tau_const", tau_const);
    r.set("hetero_numerator", hetero_numerator);
    r.set("mu0", mu0);
    r.set("sigma0_sq", sigma0_sq);
    r.set("sigma_eps_sq", sigma_eps_sq);
    r.set("covariate", covariate);
    r.set("sigma_zeta", sigma_zeta);
    r.set("replications", replications);
    r.set("master_seed", master_seed);
    return r;
  }

  /// Unspecified keys keep their defaults; unknown keys are errors.
  static ScenarioConfig from_record(const Record& rec) {
    ScenarioConfig c;
    for (const auto& [key, value] : rec.entries()) {
      auto num = [&] {
        auto v = parse_double(value);
        if (!v) throw InputError("config key '" + key + "': not a number: '" + value + "'");
        return *v;
      };
      auto integer = [&] {
        auto v = parse_int(value);
        if (!v) throw InputError("config key '" + key + "': not an integer: '" + value + "'");
        return *v;
      };
      if (key == "K") c.K = static_cast<int>(integer());
      else if (key == "mean_cluster_size") c.mean_cluster_size = static_cast<int>(integer());
      else if (key == "sizes_mode") {
        if (value == "fixed") c.sizes_mode = SizesMode::fixed;
        else if (value == "multinomial") c.sizes_mode = SizesMode::multinomial;
        else throw InputError("config key 'sizes_mode': expected fixed or multinomial");
      } else if (key == "pi") c.pi = num();
      else if (key == "effects_mode") {
        if (value == "constant") c.effects_mode = EffectsMode::constant;
        else if (value == "heterogeneous") c.effects_mode = EffectsMode::heterogeneous;
        else if (value == "independent") c.effects_mode = EffectsMode::independent;
        else throw InputError("config key 'effects_mode': expected constant, heterogeneous or independent");
      } else if (key == "tau_const") c.tau_const = num();
      else if (key == "hetero_numerator") c.hetero_numerator = num();
      else if (key == "mu0") c.mu0 = num();
      else if (key == "sigma0_sq") c.sigma0_sq = num();
      else if (key == "sigma_eps_sq") c.sigma_eps_sq = num();
      else if (key == "covariate") {
        if (value == "true" || value == "1") c.covariate = true;
        else if (value == "false" || value == "0") c.covariate = false;
        else throw InputError("config key 'covariate': expected true or false");
      } else if (key == "sigma_zeta") c.sigma_zeta = num();
      else if (key == "replications") c.replications = static_cast<int>(integer());
      else if (key == "master_seed") {
        const auto v = integer();
        if (v < 0) throw InputError("config key 'master_seed' must be non-negative");
        c.master_seed = static_cast<std::uint64_t>(v);
      } else {
        throw InputError("unknown config key '" + key + "'");
      }
    }
    c.check();
    return c;
  }
};

// --- seeding -----------------------------------------------------------------

/// h = mix(master); h = mix(h ^ mix(pi_index)); h = mix(h ^ mix(rep_id)),
/// with mix = SplitMix64 applied to the integers as 64-bit values.
constexpr std::uint64_t replication_seed(std::uint64_t master_seed, std::uint64_t pi_index, std::uint64_t rep_id) {
  return hash_combine(hash_combine(splitmix64(master_seed), pi_index), rep_id);
}

struct ReplicationStreams {
  std::mt19937_64 sizes, potentials, covariate, effects, assignment, noise;

  explicit ReplicationStreams(std::uint64_t seed)
      : sizes(hash_combine(seed, 1)),
        potentials(hash_combine(seed, 2)),
        covariate(hash_combine(seed, 3)),
        effects(hash_combine(seed, 4)),
        assignment(hash_combine(seed, 5)),
        noise(hash_combine(seed, 6)) {}
};

namespace detail {
inline double draw_normal(std::mt19937_64& rng, double mean, double sd) {
  std::normal_distribution<double> z(0.0, 1.0);
  return mean + sd * z(rng);
}
}  // namespace detail

// --- data-generating steps ---------------------------------------------------

struct ClusterSizes {
  std::vector<int> sizes;  // 2K entries; pair k uses [2k, 2k+1]
  int redraws = 0;
};

/// Fixed: every cluster gets mean_cluster_size.  Multinomial: 2K *
/// mean_cluster_size individuals over 2K equally likely clusters, drawn as
/// sequential conditional binomials; a draw with an empty cluster is
/// discarded and redrawn in full.
inline ClusterSizes draw_cluster_sizes(const ScenarioConfig& cfg, std::mt19937_64& rng) {
  const int cells = 2 * cfg.K;
  ClusterSizes out;
  if (cfg.sizes_mode == SizesMode::fixed) {
    out.sizes.assign(static_cast<std::size_t>(cells), cfg.mean_cluster_size);
    return out;
  }
  const int total = cells * cfg.mean_cluster_size;
  out.sizes.resize(static_cast<std::size_t>(cells));
  while (true) {
    int remaining = total;
    bool empty = false;
    for (int i = 0; i < cells; ++i) {
      int n = remaining;
      if (i < cells - 1) {
        std::binomial_distribution<int> bin(remaining, 1.0 / static_cast<double>(cells - i));
        n = bin(rng);
      }
      out.sizes[static_cast<std::size_t>(i)] = n;
      remaining -= n;
      empty = empty || n == 0;
    }
    if (!empty) break;
    ++out.redraws;
  }
  return out;
}

struct PairPotentials {
  double y0_1 = 0.0;
  double y0_2 = 0.0;
  double delta = 0.0;
  double tau_1 = 0.0;
  double tau_2 = 0.0;
  std::optional<double> x_1;
  std::optional<double> x_2;
};

struct PotentialsDraw {
  std::vector<PairPotentials> pairs;
  int redraws = 0;
};

/// Control potential outcomes y0_1 ~ N(mu0, s0^2), y0_2 = y0_1 + delta with
/// delta ~ N(0, pi^2 s0^2); cluster effects per effects mode; covariate
/// x_j = y0_j + zeta_j (one zeta per cluster).
inline PotentialsDraw draw_potentials(const ScenarioConfig& cfg, ReplicationStreams& streams) {
  PotentialsDraw out;
  const double s0 = std::sqrt(cfg.sigma0_sq);
  out.pairs.resize(static_cast<std::size_t>(cfg.K));
  for (auto& p : out.pairs) {
    while (true) {
      p.y0_1 = detail::draw_normal(streams.potentials, cfg.mu0, s0);
      p.delta = detail::draw_normal(streams.potentials, 0.0, cfg.pi * s0);
      p.y0_2 = p.y0_1 + p.delta;
      if (cfg.effects_mode != EffectsMode::heterogeneous || (p.y0_1 != 0.0 && p.y0_2 != 0.0)) break;
      ++out.redraws;
    }
    switch (cfg.effects_mode) {
      case EffectsMode::constant:
        p.tau_1 = p.tau_2 = cfg.tau_const;
        break;
      case EffectsMode::heterogeneous:
        p.tau_1 = cfg.hetero_numerator / p.y0_1;
        p.tau_2 = cfg.hetero_numerator / p.y0_2;
        break;
      case EffectsMode::independent:
        p.tau_1 = detail::draw_normal(streams.effects, cfg.tau_const, kIndependentEffectSd);
        p.tau_2 = detail::draw_normal(streams.effects, cfg.tau_const, kIndependentEffectSd);
        break;
    }
    const double z1 = detail::draw_normal(streams.covariate, 0.0, cfg.sigma_zeta);
    const double z2 = detail::draw_normal(streams.covariate, 0.0, cfg.sigma_zeta);
    if (cfg.covariate) {
      p.x_1 = p.y0_1 + z1;
      p.x_2 = p.y0_2 + z2;
    } else {
      p.x_1.reset();
      p.x_2.reset();
    }
  }
  return out;
}

/// Fair-coin assignment within each pair, then individual outcomes as the
/// revealed cluster potential outcome plus N(0, s_eps^2) noise.  Cluster j
/// of pair k is named "p<k>c<j>".
inline TrialDataset assign_and_observe(const std::vector<PairPotentials>& pairs, const std::vector<int>& sizes,
                                       const ScenarioConfig& cfg, std::mt19937_64& assignment,
                                       std::mt19937_64& noise) {
  if (sizes.size() != 2 * pairs.size()) throw InputError("cluster sizes do not match pair count");
  const double se = std::sqrt(cfg.sigma_eps_sq);
  TrialDataset ds;
  ds.K = static_cast<int>(pairs.size());
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    const bool second_treated = coin(assignment);
    for (int j = 1; j <= 2; ++j) {
      ClusterRecord c;
      c.pair_id = static_cast<int>(k) + 1;
      c.cluster_id = "p" + std::to_string(k + 1) + "c" + std::to_string(j);
      c.treated = (j == 2) == second_treated;
      const double y0 = j == 1 ? p.y0_1 : p.y0_2;
      const double tau = j == 1 ? p.tau_1 : p.tau_2;
      const double revealed = c.treated ? y0 + tau : y0;
      c.covariate = j == 1 ? p.x_1 : p.x_2;
      const int n = sizes[2 * k + static_cast<std::size_t>(j - 1)];
      c.outcomes.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) c.outcomes.push_back(detail::draw_normal(noise, revealed, se));
      ds.clusters.push_back(std::move(c));
    }
  }
  return ds;
}

/// Generates one simulated trial from a replication seed.
inline TrialDataset simulate_dataset(const ScenarioConfig& cfg, std::uint64_t seed, int* size_redraws = nullptr,
                                     int* potential_redraws = nullptr) {
  ReplicationStreams streams(seed);
  const auto sizes = draw_cluster_sizes(cfg, streams.sizes);
  const auto pots = draw_potentials(cfg, streams);
  if (size_redraws) *size_redraws = sizes.redraws;
  if (potential_redraws) *potential_redraws = pots.redraws;
  return assign_and_observe(pots.pairs, sizes.sizes, cfg, streams.assignment, streams.noise);
}

// --- replications ------------------------------------------------------------

enum class Estimator { MLM1 = 0, MLM2 = 1, MLM3 = 2, IKN = 3 };
inline constexpr std::array<Estimator, 4> kAllEstimators{Estimator::MLM1, Estimator::MLM2, Estimator::MLM3,
                                                          Estimator::IKN};

inline const char* estimator_name(Estimator e) {
  switch (e) {
    case Estimator::MLM1: return "MLM1";
    case Estimator::MLM2: return "MLM2";
    case Estimator::MLM3: return "MLM3";
    case Estimator::IKN: return "IKN";
  }
  return "?";
}

inline std::optional<Estimator> estimator_from_name(std::string_view s) {
  for (auto e : kAllEstimators)
    if (s == estimator_name(e)) return e;
  return std::nullopt;
}

struct EstimateRecord {
  double tau_hat = std::nan("");
  double se = std::nan("");
  bool converged = false;
  double sigma_alpha_sq = std::nan("");
  double sigma_tau_sq = std::nan("");
};

struct ReplicationResult {
  int pi_index = 0;
  double pi = 0.0;
  int rep_id = 0;
  std::array<std::optional<EstimateRecord>, 4> estimates;
  std::optional<LrtResult> lrt;  // MLM1 vs MLM2, present when both fits succeeded
  std::vector<int> size_diffs;   // |n_1 - n_2| per pair
  int size_redraws = 0;
  int potential_redraws = 0;

  const std::optional<EstimateRecord>& operator[](Estimator e) const {
    return estimates[static_cast<std::size_t>(e)];
  }
};

namespace detail {
inline EstimateRecord from_fit(const ModelFit& f) {
  EstimateRecord r;
  r.tau_hat = f.tau0;
  r.se = f.se_tau;
  r.converged = f.converged;
  r.sigma_alpha_sq = f.vc.sigma_alpha_sq;
  r.sigma_tau_sq = f.vc.sigma_tau_sq;
  return r;
}
}  // namespace detail

/// One replication at grid point `pi_index` (the match quality used is cfg.pi).
inline ReplicationResult run_replication(const ScenarioConfig& cfg, int rep_id, int pi_index = 0,
                                         const FitOptions& options = {}) {
  ReplicationResult res;
  res.pi_index = pi_index;
  res.pi = cfg.pi;
  res.rep_id = rep_id;
  const auto seed =
      replication_seed(cfg.master_seed, static_cast<std::uint64_t>(pi_index), static_cast<std::uint64_t>(rep_id));
  const TrialDataset ds = simulate_dataset(cfg, seed, &res.size_redraws, &res.potential_redraws);
  for (std::size_t k = 0; k < static_cast<std::size_t>(ds.K); ++k) {
    const auto n1 = static_cast<int>(ds.clusters[2 * k].outcomes.size());
    const auto n2 = static_cast<int>(ds.clusters[2 * k + 1].outcomes.size());
    res.size_diffs.push_back(std::abs(n1 - n2));
  }
  const auto summaries = pair_summaries(ds);

  auto failed = [] { return EstimateRecord{}; };
  std::optional<ModelFit> mlm1, mlm2;
  try {
    mlm1 = fit(summaries, ModelSpec::mlm1(), options);
    res.estimates[0] = detail::from_fit(*mlm1);
  } catch (const std::exception&) {
    res.estimates[0] = failed();
  }
  try {
    mlm2 = fit(summaries, ModelSpec::mlm2(), options, mlm1 ? &*mlm1 : nullptr);
    res.estimates[1] = detail::from_fit(*mlm2);
  } catch (const std::exception&) {
    res.estimates[1] = failed();
  }
  if (cfg.covariate) {
    try {
      res.estimates[2] = detail::from_fit(fit(summaries, ModelSpec::mlm3(), options));
    } catch (const std::exception&) {
      res.estimates[2] = failed();
    }
  }
  const auto design = sate_estimate(summaries);
  EstimateRecord ikn;
  ikn.tau_hat = design.tau_hat;
  ikn.se = design.se_upper.value_or(std::nan(""));
  ikn.converged = design.se_upper.has_value();
  res.estimates[3] = ikn;
  if (mlm1 && mlm2) res.lrt = lrt(*mlm1, *mlm2);
  return res;
}

// --- sweeps ------------------------------------------------------------------

struct EstimatorSummary {
  bool present = false;
  int n_converged = 0;
  double mean_se = std::nan("");
  double empirical_sd = std::nan("");
  double mean_tau_hat = std::nan("");
  double mean_sigma_alpha_sq = std::nan("");
};

struct GridPointResult {
  double pi = 0.0;
  std::vector<ReplicationResult> replications;
  std::array<EstimatorSummary, 4> estimators;
  double rejection_freq = std::nan("");
  int n_lrt = 0;

  const EstimatorSummary& operator[](Estimator e) const { return estimators[static_cast<std::size_t>(e)]; }
};

struct SweepResult {
  ScenarioConfig config;
  std::vector<double> pi_grid;
  std::vector<GridPointResult> points;
};

/// Means and SDs over converged replications only, in replication order.
inline EstimatorSummary summarize_estimator(const std::vector<ReplicationResult>& reps, Estimator e) {
  EstimatorSummary s;
  double se_sum = 0.0, tau_sum = 0.0, sa_sum = 0.0;
  std::vector<double> taus;
  for (const auto& r : reps) {
    const auto& est = r[e];
    if (!est) continue;
    s.present = true;
    if (!est->converged) continue;
    ++s.n_converged;
    se_sum += est->se;
    tau_sum += est->tau_hat;
    sa_sum += est->sigma_alpha_sq;
    taus.push_back(est->tau_hat);
  }
  if (s.n_converged > 0) {
    const double n = s.n_converged;
    s.mean_se = se_sum / n;
    s.mean_tau_hat = tau_sum / n;
    s.mean_sigma_alpha_sq = sa_sum / n;
    if (s.n_converged > 1) {
      double ss = 0.0;
      for (double t : taus) ss += (t - s.mean_tau_hat) * (t - s.mean_tau_hat);
      s.empirical_sd = std::sqrt(ss / (n - 1.0));
    }
  }
  return s;
}

inline void aggregate(GridPointResult& g) {
  for (auto e : kAllEstimators) g.estimators[static_cast<std::size_t>(e)] = summarize_estimator(g.replications, e);
  int rejected = 0;
  g.n_lrt = 0;
  for (const auto& r : g.replications) {
    if (!r.lrt || !r[Estimator::MLM1]->converged || !r[Estimator::MLM2]->converged) continue;
    ++g.n_lrt;
    rejected += r.lrt->rejected_05 ? 1 : 0;
  }
  g.rejection_freq = g.n_lrt > 0 ? static_cast<double>(rejected) / g.n_lrt : std::nan("");
}

/// Runs cfg.replications replications at every grid value.  Jobs are
/// spread over `threads` workers (0 = hardware concurrency); each job
/// writes its own slot, so the result does not depend on scheduling.
inline SweepResult run_sweep(const ScenarioConfig& cfg, const std::vector<double>& pi_grid, unsigned threads = 0,
                             const FitOptions& options = {}) {
  cfg.check();
  if (pi_grid.empty()) throw InputError("pi grid is empty");
  for (double p : pi_grid)
    if (!(p >= 0.0)) throw InputError("pi grid values must be >= 0");

  SweepResult out;
  out.config = cfg;
  out.pi_grid = pi_grid;
  out.points.resize(pi_grid.size());
  const std::size_t reps = static_cast<std::size_t>(cfg.replications);
  const std::size_t jobs = pi_grid.size() * reps;
  for (std::size_t g = 0; g < pi_grid.size(); ++g) {
    out.points[g].pi = pi_grid[g];
    out.points[g].replications.resize(reps);
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t job = next.fetch_add(1);
      if (job >= jobs) return;
      const std::size_t g = job / reps;
      const std::size_t r = job % reps;
      try {
        ScenarioConfig point = cfg;
        point.pi = pi_grid[g];
        out.points[g].replications[r] = run_replication(point, static_cast<int>(r), static_cast<int>(g), options);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(jobs);
      }
    }
  };

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, jobs));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  for (auto& g : out.points) aggregate(g);
  return out;
}

inline std::vector<double> default_pi_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 14; ++i) grid.push_back(i / 20.0);
  return grid;
}

}  // namespace pairmatch

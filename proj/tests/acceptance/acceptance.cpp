// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
// Usage: acceptance <work-dir>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pairmatch/commands.hpp"
#include "support.hpp"

using namespace pairmatch;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// Row-level log-likelihood at given (G, s2, beta), built from raw rows.
double row_loglik(const std::vector<testsupport::RowPair>& pairs, const Eigen::MatrixXd& G, double s2,
                  const Eigen::VectorXd& beta) {
  double total = 0.0;
  for (const auto& rp : pairs) {
    Eigen::MatrixXd V = rp.Z * G * rp.Z.transpose();
    V.diagonal().array() += s2;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(V);
    const Eigen::VectorXd r = rp.y - rp.X * beta;
    total += static_cast<double>(rp.y.size()) * std::log(2.0 * M_PI) + std::log(lu.determinant()) + r.dot(lu.solve(r));
  }
  return -0.5 * total;
}

Outcome likelihood_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<double> u(-4.0, 3.0);
  std::normal_distribution<double> z(0.0, 3.0);
  const ModelSpec specs[] = {ModelSpec::mlm1(), ModelSpec::mlm2(), ModelSpec::mlm3(), ModelSpec::mlm1_covariate()};
  double worst = 0.0;
  const int draws = 1200;
  for (int i = 0; i < draws; ++i) {
    const ModelSpec spec = specs[i % 4];
    const int K = 1 + static_cast<int>(rng() % 8);
    const auto ds = testsupport::random_dataset(rng, K, 6, spec.use_covariate);
    ParamVector theta(spec.n_theta());
    for (Eigen::Index j = 0; j < theta.size(); ++j) theta[j] = u(rng);
    const auto vc = unpack(theta, spec);
    FixedEffects b(spec.n_fixed());
    for (Eigen::Index j = 0; j < b.size(); ++j) b[j] = z(rng);
    const Eigen::MatrixXd G = spec.random_slope() ? Eigen::MatrixXd(vc.sigma())
                                                  : Eigen::MatrixXd::Constant(1, 1, vc.sigma_alpha_sq);
    const double block = block_loglik(pair_summaries(ds), spec, vc, b);
    const double dense = row_loglik(testsupport::rows_by_pair(ds, spec), G, vc.sigma_eps_sq, b);
    worst = std::max(worst, std::abs(block - dense));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-8 && secs <= 10.0,
          std::to_string(draws) + " draws, max |diff| " + num(worst) + ", " + num(secs, 3) + " s"};
}

Outcome optimizer_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  ScenarioConfig cfg;
  cfg.K = 6;
  cfg.mean_cluster_size = 4;
  cfg.covariate = true;
  cfg.pi = 0.3;
  double worst_ll = 0.0, worst_tau = 0.0;
  int misses = 0;
  for (int i = 0; i < 20; ++i) {
    cfg.effects_mode = i % 2 ? EffectsMode::heterogeneous : EffectsMode::constant;
    const auto ds = simulate_dataset(cfg, replication_seed(777, 0, static_cast<std::uint64_t>(i)));
    for (const auto spec : {ModelSpec::mlm1(), ModelSpec::mlm2(), ModelSpec::mlm3()}) {
      const auto f = fit(ds, spec);
      const auto o = testsupport::grid_polish_maximize(ds, spec);
      const double dl = std::abs(f.loglik - o.loglik);
      const double dt = std::abs(f.tau0 - o.beta[1]);
      worst_ll = std::max(worst_ll, dl);
      worst_tau = std::max(worst_tau, dt);
      if (dl > 1e-6 || dt > 1e-4) {
        ++misses;
        std::cout << "  dataset " << i << " " << spec.name() << ": fit loglik " << num(f.loglik, 12) << " oracle "
                  << num(o.loglik, 12) << ", tau " << num(f.tau0, 10) << " vs " << num(o.beta[1], 10) << '\n';
      }
    }
  }
  const double secs = seconds_since(t0);
  return {misses == 0 && secs <= 60.0, "60 fits, " + std::to_string(misses) + " misses, max |dl| " + num(worst_ll) +
                                           ", max |dtau| " + num(worst_tau) + ", " + num(secs, 3) + " s"};
}

Outcome cluster_sizes() {
  const auto t0 = std::chrono::steady_clock::now();
  ScenarioConfig cfg;
  std::vector<double> diffs;
  for (std::uint64_t i = 0; i < 500; ++i) {
    ReplicationStreams streams(replication_seed(cfg.master_seed, 0, i));
    const auto s = draw_cluster_sizes(cfg, streams.sizes).sizes;
    for (std::size_t k = 0; k < s.size(); k += 2) diffs.push_back(std::abs(s[k] - s[k + 1]));
  }
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= diffs.size();
  double ss = 0.0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (diffs.size() - 1.0));
  const double secs = seconds_since(t0);
  return {mean >= 7.0 && mean <= 9.0 && sd >= 5.0 && sd <= 7.0 && secs <= 5.0,
          "mean |dn| " + num(mean) + ", sd " + num(sd) + ", " + num(secs, 3) + " s"};
}

Outcome unbiasedness() {
  const auto t0 = std::chrono::steady_clock::now();
  ScenarioConfig cfg;
  cfg.replications = 500;
  const auto sweep = run_sweep(cfg, {0.3});
  const auto& g = sweep.points[0];
  bool ok = true;
  std::string detail;
  for (auto e : {Estimator::IKN, Estimator::MLM2}) {
    const auto& s = g[e];
    const double mcse = s.empirical_sd / std::sqrt(static_cast<double>(s.n_converged));
    const double z = (s.mean_tau_hat - 3.2) / mcse;
    ok = ok && std::abs(z) <= 3.0;
    detail += std::string(estimator_name(e)) + " mean " + num(s.mean_tau_hat, 5) + " (" + num(z, 3) + " MC SE, n=" +
              std::to_string(s.n_converged) + "); ";
  }
  const double secs = seconds_since(t0);
  return {ok && secs <= 300.0, detail + num(secs, 3) + " s"};
}

struct Panels {
  ReportTable a, b;
  std::vector<double> grid;
  double secs = 0.0;
};

double se_of(const ReportTable& t, double pi, const char* est) {
  const auto* r = t.find(pi, est);
  return r && r->mean_se ? *r->mean_se : std::nan("");
}

Outcome panel_a_shape(const Panels& p) {
  const double m1 = se_of(p.a, 0.0, "MLM1"), m2 = se_of(p.a, 0.0, "MLM2");
  const double gap = std::abs(m1 - m2) / m1;
  int inversions = 0;
  for (std::size_t i = 1; i < p.grid.size(); ++i)
    if (!(se_of(p.a, p.grid[i], "MLM2") > se_of(p.a, p.grid[i - 1], "MLM2"))) ++inversions;
  const double m1_end = se_of(p.a, p.grid.back(), "MLM1");
  const double drift = std::abs(m1_end - m1) / m1;
  return {gap <= 0.05 && inversions <= 1 && drift <= 0.25 && p.secs <= 600.0,
          "(a) MLM1/MLM2 gap at 0 " + num(100 * gap, 3) + "%, (b) MLM2 inversions " + std::to_string(inversions) +
              ", (c) MLM1 drift " + num(100 * drift, 3) + "%, figure1 " + num(p.secs, 3) + " s"};
}

double worst_ikn_gap(const ReportTable& t, const std::vector<double>& grid, double* at) {
  double worst = 0.0;
  for (double pi : grid) {
    const double m2 = se_of(t, pi, "MLM2");
    const double gap = std::abs(se_of(t, pi, "IKN") - m2) / m2;
    if (!(gap <= worst)) {
      worst = gap;
      *at = pi;
    }
  }
  return worst;
}

Outcome ikn_tracks_mlm2(const Panels& p) {
  double at_multi = 0.0, at_fixed = 0.0;
  const double multi = worst_ikn_gap(p.a, p.grid, &at_multi);
  ScenarioConfig cfg;
  cfg.sizes_mode = SizesMode::fixed;
  const auto fixed = summarize_sweep(run_sweep(cfg, p.grid));
  const double fx = worst_ikn_gap(fixed, p.grid, &at_fixed);
  return {multi <= 0.15 && fx <= 0.05, "multinomial sizes: worst gap " + num(100 * multi, 3) + "% at pi=" +
                                           num(at_multi, 2) + "; fixed sizes: worst gap " + num(100 * fx, 3) +
                                           "% at pi=" + num(at_fixed, 2)};
}

Outcome lrt_threshold(const Panels& p) {
  auto rf = [&](double pi) {
    const auto* r = p.a.find(pi, "MLM2");
    return r && r->rejection_freq ? *r->rejection_freq : std::nan("");
  };
  double first = std::nan("");
  for (double pi : p.grid)
    if (rf(pi) > 0.5) {
      first = pi;
      break;
    }
  const bool ok = first >= 0.05 && first <= 0.25 && rf(0.0) <= 0.10 && rf(0.3) >= 0.80;
  return {ok, "first pi with rejection > 50%: " + num(first, 3) + ", at 0: " + num(rf(0.0), 3) +
                  ", at 0.3: " + num(rf(0.3), 3)};
}

Outcome covariate_flatness(const Panels& p) {
  double lo = INFINITY, hi = 0.0;
  for (double pi : p.grid) {
    const double v = se_of(p.a, pi, "MLM3");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const auto* r3 = p.a.find(0.3, "MLM3");
  const auto* r2 = p.a.find(0.3, "MLM2");
  const double ratio = *r3->mean_sigma_alpha_sq / *r2->mean_sigma_alpha_sq;
  return {hi / lo <= 1.3 && ratio <= 0.25,
          "MLM3 se max/min " + num(hi / lo) + ", sigma_alpha^2 MLM3/MLM2 at 0.3 " + num(ratio)};
}

Outcome panel_b_crossover(const Panels& p) {
  const double b7 = se_of(p.b, 0.7, "MLM2"), a7 = se_of(p.a, 0.7, "MLM2");
  const double b1 = se_of(p.b, 0.1, "MLM2"), a1 = se_of(p.a, 0.1, "MLM2");
  return {b7 < a7 && b1 > a1, "MLM2 se at 0.7: heterogeneous " + num(b7) + " vs constant " + num(a7) +
                                  "; at 0.1: heterogeneous " + num(b1) + " vs constant " + num(a1)};
}

Outcome design_properties() {
  std::mt19937_64 rng(1010);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    auto ds = testsupport::random_dataset(rng, 2 + i % 10, 8, false);
    const auto a = sate_estimate(pair_summaries(ds));
    for (auto& c : ds.clusters) c.treated = !c.treated;
    const auto b = sate_estimate(pair_summaries(ds));
    worst = std::max({worst, std::abs(a.tau_hat + b.tau_hat), std::abs(*a.se_upper - *b.se_upper)});
  }
  std::string csv = "pair_id,cluster_id,treated,y\n";
  for (int k = 1; k <= 5; ++k)
    for (int i = 0; i < 3; ++i) {
      const std::string pid = std::to_string(k);
      csv += pid + ",t" + pid + ",1," + std::to_string(2.0 * k + i + 0.75) + "\n";
      csv += pid + ",c" + pid + ",0," + std::to_string(2.0 * k + i) + "\n";
    }
  const auto flat = sate_estimate(pair_summaries(parse_trial_csv(csv)));
  const auto hand = sate_estimate(pair_summaries(parse_trial_csv(
      "pair_id,cluster_id,treated,y\n"
      "1,t1,1,5\n1,t1,1,5\n1,c1,0,3\n1,c1,0,3\n"
      "2,t2,1,4\n2,t2,1,4\n2,t2,1,4\n2,c2,0,1\n2,c2,0,1\n2,c2,0,1\n")));
  const bool hand_ok = format_double(hand.tau_hat) == "2.6" && format_double(*hand.se_upper) == "1";
  return {worst <= 1e-12 && std::abs(*flat.se_upper) <= 1e-12 && hand_ok,
          "antisymmetry max err " + num(worst) + ", constant-difference se " + num(*flat.se_upper) + ", hand (" +
              format_double(hand.tau_hat) + ", " + format_double(*hand.se_upper) + ")"};
}

Outcome determinism(const fs::path& run1, const fs::path& run2) {
  int compared = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(run1)) {
    const auto name = entry.path().filename();
    const auto ext = name.extension();
    if (ext != ".csv" && ext != ".svg") continue;
    ++compared;
    if (!fs::exists(run2 / name) ||
        testsupport::read_file(entry.path()) != testsupport::read_file(run2 / name)) {
      ++differing;
      std::cout << "  differs: " << name.string() << '\n';
    }
  }
  return {compared == 6 && differing == 0,
          std::to_string(compared) + " files compared (1 vs 4 threads), " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "pairmatch_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  int failed = 0;
  auto report = [&](int id, const Outcome& o) {
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
    if (!o.pass) ++failed;
  };

  report(1, likelihood_equivalence());
  report(2, optimizer_oracle());
  report(3, cluster_sizes());
  report(4, unbiasedness());

  Panels panels;
  panels.grid = default_pi_grid();
  {
    Figure1Command c;
    c.out = (work / "figure1_run1").string();
    c.threads = 1;
    std::ostringstream sink;
    const auto t0 = std::chrono::steady_clock::now();
    if (cmd_figure1(c, sink, std::cerr) != kExitOk) {
      std::cout << "figure1 run failed\n";
      return 1;
    }
    panels.secs = seconds_since(t0);
    panels.a = parse_report_csv(testsupport::read_file(work / "figure1_run1" / "panelA.csv"));
    panels.b = parse_report_csv(testsupport::read_file(work / "figure1_run1" / "panelB.csv"));
  }
  report(5, panel_a_shape(panels));
  report(6, ikn_tracks_mlm2(panels));
  report(7, lrt_threshold(panels));
  report(8, covariate_flatness(panels));
  report(9, panel_b_crossover(panels));
  report(10, design_properties());
  {
    Figure1Command c;
    c.out = (work / "figure1_run2").string();
    c.threads = 4;
    std::ostringstream sink;
    if (cmd_figure1(c, sink, std::cerr) != kExitOk) {
      report(11, {false, "second figure1 run failed"});
    } else {
      report(11, determinism(work / "figure1_run1", work / "figure1_run2"));
    }
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << '\n';
  return failed ? 1 : 0;
}

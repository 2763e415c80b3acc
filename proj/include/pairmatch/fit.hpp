#pragma once

// Maximum-likelihood fitting of the matched-pair multilevel models.
//
// Fixed effects are profiled out by GLS at every evaluation; the
// optimizer searches the unconstrained variance parameters only.  Random
// slope models are searched from two starts and keep the better optimum:
// the random-intercept fit with the slope factor at its lower bound (so
// the slope model's maximized likelihood is never below the intercept
// model's), and a moment estimate of Sigma.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/hash.hpp"
#include "pairmatch/kv_record.hpp"
#include "pairmatch/likelihood.hpp"
#include "pairmatch/nelder_mead.hpp"
#include "pairmatch/params.hpp"

namespace pairmatch {

struct FitOptions {
  double tolerance = 1e-10;  // on the deviance
  int max_evals = 2000;
  int max_restarts = 4;
  bool reml = false;
};

struct ModelFit {
  ModelSpec spec;
  double alpha0 = 0.0;
  double tau0 = 0.0;
  std::optional<double> beta;
  VarianceComponents vc;
  double se_tau = 0.0;
  double loglik = 0.0;
  bool converged = false;
  int n_evals = 0;
  bool reml = false;
  ParamVector theta;
  std::uint64_t data_fingerprint = 0;
  int n_pairs = 0;
  long long n_obs = 0;

  FixedEffects fixed() const {
    FixedEffects b(spec.n_fixed());
    b[0] = alpha0;
    b[1] = tau0;
    if (spec.use_covariate) b[2] = beta.value_or(0.0);
    return b;
  }

  Record to_record() const {
    Record r;
    r.set("model", spec.name());
    r.set("objective", reml ? "reml" : "ml");
    r.set("alpha0", alpha0);
    r.set("tau0", tau0);
    if (beta) r.set("beta", *beta);
    r.set("se_tau", se_tau);
    r.set("sigma_alpha_sq", vc.sigma_alpha_sq);
    r.set("sigma_tau_sq", vc.sigma_tau_sq);
    r.set("sigma_alpha_tau", vc.sigma_alpha_tau);
    r.set("sigma_eps_sq", vc.sigma_eps_sq);
    r.set("loglik", loglik);
    r.set("converged", converged);
    r.set("n_evals", n_evals);
    r.set("n_pairs", n_pairs);
    r.set("n_obs", n_obs);
    r.set("fingerprint", data_fingerprint);
    std::string th;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      if (i) th += ' ';
      th += format_double(theta[i]);
    }
    r.set("theta", th);
    return r;
  }

  static ModelFit from_record(const Record& r) {
    ModelFit f;
    f.spec = ModelSpec::from_name(r.at("model"));
    const auto& obj = r.at("objective");
    if (obj != "ml" && obj != "reml") throw InputError("objective must be ml or reml");
    f.reml = obj == "reml";
    f.alpha0 = r.get_double("alpha0");
    f.tau0 = r.get_double("tau0");
    if (r.contains("beta")) f.beta = r.get_double("beta");
    f.se_tau = r.get_double("se_tau");
    f.vc.sigma_alpha_sq = r.get_double("sigma_alpha_sq");
    f.vc.sigma_tau_sq = r.get_double("sigma_tau_sq");
    f.vc.sigma_alpha_tau = r.get_double("sigma_alpha_tau");
    f.vc.sigma_eps_sq = r.get_double("sigma_eps_sq");
    f.loglik = r.get_double("loglik");
    f.converged = r.at("converged") == "true";
    f.n_evals = static_cast<int>(r.get_double("n_evals"));
    f.n_pairs = static_cast<int>(r.get_double("n_pairs"));
    f.n_obs = static_cast<long long>(r.get_double("n_obs"));
    f.data_fingerprint = std::stoull(r.at("fingerprint"));
    std::istringstream th(r.at("theta"));
    std::vector<double> vals;
    for (std::string tok; th >> tok;) {
      auto v = parse_double(tok);
      if (!v) throw InputError("bad theta entry '" + tok + "'");
      vals.push_back(*v);
    }
    f.theta = Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    return f;
  }
};

namespace detail {

inline VarianceComponents reported_components(VarianceComponents vc) {
  const double floor = std::exp(-kThetaBound);
  bool zeroed = false;
  if (vc.sigma_alpha_sq <= floor) {
    vc.sigma_alpha_sq = 0.0;
    zeroed = true;
  }
  if (vc.sigma_tau_sq <= floor) {
    vc.sigma_tau_sq = 0.0;
    zeroed = true;
  }
  if (zeroed) vc.sigma_alpha_tau = 0.0;
  return vc;
}

// Moment-based start for the random-intercept model.
inline ParamVector intercept_start(std::span<const PairCells> cells, const ModelSpec& base) {
  VarianceComponents unit;
  const GlsResult ols = gls_from_cells(cells, base, unit);
  double n_obs = 0.0, sse = 0.0, between = 0.0, pair_sq = 0.0, ysum = 0.0;
  for (const auto& p : cells) {
    n_obs += p.m;
    sse += p.sse;
    const double rc = p.control.ybar - p.control.x.dot(ols.coef);
    const double rt = p.treated.ybar - p.treated.x.dot(ols.coef);
    between += p.control.n * rc * rc + p.treated.n * rt * rt;
    const double a = (p.control.n * rc + p.treated.n * rt) / p.m;
    pair_sq += a * a;
    ysum += p.control.n * p.control.ybar + p.treated.n * p.treated.ybar;
  }
  const double K = static_cast<double>(cells.size());
  double s_e = n_obs > 2.0 * K ? sse / (n_obs - 2.0 * K) : between / n_obs;
  if (!(s_e > 0.0)) {
    double total = sse;
    const double ybar = ysum / n_obs;
    for (const auto& p : cells)
      total += p.control.n * std::pow(p.control.ybar - ybar, 2) + p.treated.n * std::pow(p.treated.ybar - ybar, 2);
    s_e = total > 0.0 ? 1e-8 * total / n_obs : std::exp(-kThetaBound);
  }
  const double s_a = std::max(pair_sq / K - s_e * K / n_obs, 0.1 * s_e);
  ParamVector theta(2);
  theta << std::log(s_a), std::log(s_e);
  return clamp_theta(theta, base);
}

// Moment-based start for the random-slope models: the covariance of the
// cluster-mean OLS residuals within a pair, less the sampling noise of the
// means, projected onto the positive definite cone.
inline ParamVector slope_start(std::span<const PairCells> cells, const ModelSpec& spec, double s_e) {
  VarianceComponents unit;
  const GlsResult ols = gls_from_cells(cells, spec, unit);
  Eigen::Matrix2d m = Eigen::Matrix2d::Zero();
  double inv_nc = 0.0, inv_nt = 0.0;
  for (const auto& p : cells) {
    const double rc = p.control.ybar - p.control.x.dot(ols.coef);
    const double rt = p.treated.ybar - p.treated.x.dot(ols.coef);
    m(0, 0) += rc * rc;
    m(0, 1) += rc * rt;
    m(1, 1) += rt * rt;
    inv_nc += 1.0 / p.control.n;
    inv_nt += 1.0 / p.treated.n;
  }
  const double K = static_cast<double>(cells.size());
  m /= K;
  const double sa = m(0, 0) - s_e * inv_nc / K;
  const double sat = m(0, 1) - sa;
  const double st = m(1, 1) - s_e * inv_nt / K - sa - 2.0 * sat;
  Eigen::Matrix2d sigma;
  sigma << sa, sat, sat, st;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(sigma);
  const double floor = std::max(1e-3 * std::abs(eig.eigenvalues().maxCoeff()), 1e-3 * s_e * inv_nc / K);
  const Eigen::Vector2d ev = eig.eigenvalues().cwiseMax(floor);
  sigma = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
  VarianceComponents vc;
  vc.sigma_alpha_sq = sigma(0, 0);
  vc.sigma_alpha_tau = sigma(0, 1);
  vc.sigma_tau_sq = sigma(1, 1);
  vc.sigma_eps_sq = s_e;
  return clamp_theta(pack(vc, spec), spec);
}

// Log-variance coordinates below this sit where the deviance is flat.
inline constexpr double kPlateau = -10.0;

struct Optimum {
  ParamVector theta;
  double deviance = std::numeric_limits<double>::infinity();
  int n_evals = 0;
  bool converged = false;
};

template <class Objective>
Optimum minimize_with_restarts(Objective&& objective, const ParamVector& start, const Eigen::VectorXd& step,
                               const FitOptions& options) {
  NelderMeadOptions nm;
  nm.ftol = options.tolerance;
  nm.max_evals = options.max_evals;
  auto r = nelder_mead(objective, start, step, nm);
  Optimum best{r.x, r.f, r.n_evals, r.converged};
  for (int i = 0; i < options.max_restarts && best.converged; ++i) {
    nm.max_evals = options.max_evals - best.n_evals;
    if (nm.max_evals <= 0) {
      best.converged = false;
      break;
    }
    auto again = nelder_mead(objective, best.theta, 0.1 * step, nm);
    best.n_evals += again.n_evals;
    best.converged = again.converged;
    const bool improved = again.f < best.deviance - options.tolerance;
    if (again.f < best.deviance) {
      best.theta = again.x;
      best.deviance = again.f;
    }
    if (!improved) break;
  }
  return best;
}

}  // namespace detail

inline ModelFit fit(std::span<const PairSummary> summaries, const ModelSpec& spec, const FitOptions& options = {},
                    const ModelFit* warm = nullptr) {
  if (!spec.valid()) throw InputError("invalid model specification");
  if (summaries.size() < 2) throw InputError("fitting requires at least 2 pairs");
  const auto cells = detail::make_cells(summaries, spec);
  {
    VarianceComponents unit;
    (void)detail::gls_from_cells(cells, spec, unit);  // rank check
  }

  // Outside the box the deviance is evaluated at the clamped point plus a
  // quadratic wall, so the simplex is pushed back instead of resting on a
  // plateau.
  auto deviance = [&](const ParamVector& theta) {
    try {
      const ParamVector clamped = clamp_theta(theta, spec);
      const auto vc = unpack(clamped, spec);
      const auto g = detail::gls_from_cells(cells, spec, vc);
      return -2.0 * (options.reml ? g.loglik_reml : g.loglik) + (theta - clamped).squaredNorm();
    } catch (const RankDeficiencyError&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  const std::uint64_t fp = fingerprint(summaries);
  detail::Optimum opt;
  int ladder_evals = 0;
  bool ladder_converged = true;
  if (!spec.random_slope()) {
    const ParamVector start = detail::intercept_start(cells, spec);
    Eigen::VectorXd step(2);
    step << 1.0, 0.5;
    opt = detail::minimize_with_restarts(deviance, start, step, options);
  } else {
    const ModelSpec base{ModelKind::MLM1, spec.use_covariate};
    ModelFit computed;
    if (!warm || warm->spec != base || warm->data_fingerprint != fp || warm->reml != options.reml) {
      computed = fit(summaries, base, options);
      warm = &computed;
    }
    ladder_evals = warm->n_evals;
    ladder_converged = warm->converged;
    const double s_a = std::exp(warm->theta[0]);
    const double s_e = std::exp(warm->theta[1]);
    ParamVector start(4);
    start << 0.5 * warm->theta[0], 0.0, -kThetaBound, warm->theta[1];
    Eigen::VectorXd step(4);
    step << 0.5, 0.5 * std::sqrt(s_a + s_e), std::max(1.0, 0.5 * std::log(s_e) - 3.0 + kThetaBound), 0.5;
    opt = detail::minimize_with_restarts(deviance, start, step, options);

    // A second search from the moment start catches optima the warm start
    // misses, e.g. a near-singular Sigma with a small intercept variance.
    const ParamVector alt_start = detail::slope_start(cells, spec, s_e);
    const double s_t = std::exp(2.0 * alt_start[2]) + alt_start[1] * alt_start[1];
    Eigen::VectorXd alt_step(4);
    alt_step << 0.5, 0.5 * std::sqrt(s_t), 1.0, 0.5;
    const detail::Optimum alt = detail::minimize_with_restarts(deviance, alt_start, alt_step, options);
    const int total = opt.n_evals + alt.n_evals;
    if (alt.deviance < opt.deviance) opt = alt;
    opt.n_evals = total;
  }

  // A log-variance coordinate resting deep on its lower plateau may be a
  // false boundary optimum: the deviance is flat there, so the simplex
  // cannot see a small interior variance that does better.  Restart with
  // that coordinate moved back to a small scale relative to the other
  // components and keep any improvement.
  {
    const auto vc = unpack(clamp_theta(opt.theta, spec), spec);
    const double scale = std::sqrt(vc.sigma_alpha_sq + vc.sigma_tau_sq + vc.sigma_eps_sq);
    std::vector<Eigen::Index> coords{0};
    if (spec.random_slope()) coords.push_back(2);
    for (const auto i : coords) {
      if (opt.theta[i] > detail::kPlateau) continue;
      for (const double ratio : {0.3, 0.03}) {
        ParamVector start = opt.theta;
        // Intercept-only models carry a log variance, slope models a log sd.
        start[i] = (spec.random_slope() ? 1.0 : 2.0) * std::log(ratio * scale);
        Eigen::VectorXd step = Eigen::VectorXd::Constant(spec.n_theta(), 0.5);
        if (spec.random_slope()) step[1] = 0.5 * scale;
        const detail::Optimum probe = detail::minimize_with_restarts(deviance, start, step, options);
        const int total = opt.n_evals + probe.n_evals;
        if (probe.deviance < opt.deviance - options.tolerance) opt = probe;
        opt.n_evals = total;
      }
    }
  }

  const ParamVector theta = clamp_theta(opt.theta, spec);
  const VarianceComponents vc = unpack(theta, spec);
  const GlsResult g = detail::gls_from_cells(cells, spec, vc);

  ModelFit f;
  f.spec = spec;
  f.alpha0 = g.coef[0];
  f.tau0 = g.coef[1];
  if (spec.use_covariate) f.beta = g.coef[2];
  f.vc = detail::reported_components(vc);
  f.se_tau = std::sqrt(g.cov(1, 1));
  f.loglik = options.reml ? g.loglik_reml : g.loglik;
  f.converged = opt.converged && ladder_converged && std::isfinite(f.loglik);
  f.n_evals = opt.n_evals + ladder_evals;
  f.reml = options.reml;
  f.theta = theta;
  f.data_fingerprint = fp;
  f.n_pairs = static_cast<int>(summaries.size());
  for (const auto& s : summaries) f.n_obs += s.size();
  return f;
}

inline ModelFit fit(const TrialDataset& ds, const ModelSpec& spec, const FitOptions& options = {}) {
  if (spec.use_covariate && !ds.has_covariate()) throw InputError("covariate required for " + spec.name());
  const auto summaries = pair_summaries(ds);
  return fit(summaries, spec, options);
}

struct PairEffects {
  std::vector<int> pair_id;
  std::vector<double> alpha;
  std::vector<double> tau;  // zero without a random slope
};

/// Empirical-Bayes predictions Sigma Z_k' V_k^-1 r_k at the fitted values.
/// With Sigma = L L' this is L (s2 I + W'W)^-1 W' r_k.
inline PairEffects pair_effects(const ModelFit& f, std::span<const PairSummary> summaries) {
  const auto cells = detail::make_cells(summaries, f.spec);
  const auto L = detail::lower_factor(f.vc, f.spec);
  const double s2 = f.vc.sigma_eps_sq;
  const FixedEffects b = f.fixed();
  PairEffects out;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& p = cells[k];
    const auto blk = detail::pair_block(p, L, s2);
    const auto r = detail::residualize(p, blk, p.control.ybar - p.control.x.dot(b), p.treated.ybar - p.treated.x.dot(b));
    const detail::VecQ u = L * r.u;
    out.pair_id.push_back(summaries[k].pair_id);
    out.alpha.push_back(u[0]);
    out.tau.push_back(f.spec.random_slope() ? u[1] : 0.0);
  }
  return out;
}

}  // namespace pairmatch

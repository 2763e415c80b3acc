#pragma once

// Per-pair block likelihood for the matched-pair mixed models.
//
// Every design row is constant within a cluster, so a pair is fully
// described by its two cluster sizes and means plus the pooled
// within-cluster sum of squares.  With Sigma = L L^T and W = Z L,
//
//   log|V| = m log s2 + log det(I + W'W / s2)
//   u' V^-1 v = (u'v - (W'u)' (s2 I + W'W)^-1 (W'v)) / s2
//
// and the within-cluster deviations of y are orthogonal to every
// cluster-constant column, contributing only sse/s2 to y'V^-1 y.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/params.hpp"

namespace pairmatch {

using FixedEffects = Eigen::VectorXd;

namespace detail {

using VecP = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 3, 1>;
using MatP = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3>;
using VecQ = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 2, 1>;
using MatQ = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 2, 2>;
using MatQP = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 2, 3>;

struct ClusterCell {
  double n;
  double ybar;
  VecP x;  // fixed-effect row
  VecQ z;  // random-effect row
};

inline ClusterCell make_cell(const ModelSpec& spec, int n, double ybar, bool treated, const std::optional<double>& x) {
  ClusterCell c;
  c.n = static_cast<double>(n);
  c.ybar = ybar;
  const double t = treated ? 1.0 : 0.0;
  c.x.resize(spec.n_fixed());
  c.x[0] = 1.0;
  c.x[1] = t;
  if (spec.use_covariate) {
    if (!x) throw InputError("covariate required for " + spec.name());
    c.x[2] = *x;
  }
  c.z.resize(spec.n_random());
  c.z[0] = 1.0;
  if (spec.random_slope()) c.z[1] = t;
  return c;
}

struct PairCells {
  ClusterCell control;
  ClusterCell treated;
  double sse;
  double m;
};

inline std::vector<PairCells> make_cells(std::span<const PairSummary> summaries, const ModelSpec& spec) {
  std::vector<PairCells> cells;
  cells.reserve(summaries.size());
  for (const auto& s : summaries) {
    cells.push_back({make_cell(spec, s.n_control, s.mean_control, false, s.x_control),
                     make_cell(spec, s.n_treated, s.mean_treated, true, s.x_treated), s.sse_within,
                     static_cast<double>(s.size())});
  }
  return cells;
}

inline MatQ lower_factor(const VarianceComponents& vc, const ModelSpec& spec) {
  if (!(vc.sigma_eps_sq > 0.0)) throw InputError("residual variance must be positive");
  const Eigen::Matrix2d L = psd_cholesky(vc);
  if (spec.random_slope()) return L;
  if (vc.sigma_tau_sq != 0.0 || vc.sigma_alpha_tau != 0.0)
    throw InputError(spec.name() + " has no random slope; sigma_tau_sq and sigma_alpha_tau must be 0");
  MatQ l(1, 1);
  l(0, 0) = L(0, 0);
  return l;
}

// Pair-level pieces at fixed (L, s2).
struct PairBlock {
  Eigen::LLT<MatQ> m_llt;  // s2 I + W'W
  MatQ L;
  double logdet_v = 0.0;
};

inline PairBlock pair_block(const PairCells& p, const MatQ& L, double s2) {
  const auto q = L.rows();
  const MatQ ztz = p.control.n * p.control.z * p.control.z.transpose() + p.treated.n * p.treated.z * p.treated.z.transpose();
  MatQ m = L.transpose() * ztz * L;
  m.diagonal().array() += s2;
  PairBlock b;
  b.m_llt.compute(m);
  b.L = L;
  const double logdet_m = 2.0 * b.m_llt.matrixLLT().diagonal().array().log().sum();
  b.logdet_v = p.m * std::log(s2) + logdet_m - static_cast<double>(q) * std::log(s2);
  return b;
}

// A cluster-constant vector a (values a_c, a_t) after removing its
// random-effect fit: u = M^-1 W'a and resid_j = a_j - z_j' L u.  Then
//   a'V^-1 b = sum_j n_j resid_a,j resid_b,j / s2 + u_a'u_b,
// a sum of products of small terms where the direct Woodbury form would
// subtract two large ones.
struct Residualized {
  VecQ u;
  double control = 0.0;
  double treated = 0.0;
};

inline Residualized residualize(const PairCells& p, const PairBlock& b, double a_control, double a_treated) {
  Residualized r;
  const VecQ wta = b.L.transpose() * (p.control.n * a_control * p.control.z + p.treated.n * a_treated * p.treated.z);
  r.u = b.m_llt.solve(wta);
  const VecQ lu = b.L * r.u;
  r.control = a_control - p.control.z.dot(lu);
  r.treated = a_treated - p.treated.z.dot(lu);
  return r;
}

inline double bilinear(const PairCells& p, const Residualized& a, const Residualized& c, double s2) {
  return (p.control.n * a.control * c.control + p.treated.n * a.treated * c.treated) / s2 + a.u.dot(c.u);
}

inline double residual_quadratic(const PairCells& p, const PairBlock& b, const FixedEffects& fixed, double s2) {
  const auto r = residualize(p, b, p.control.ybar - p.control.x.dot(fixed), p.treated.ybar - p.treated.x.dot(fixed));
  return p.sse / s2 + bilinear(p, r, r, s2);
}

struct GlsAccum {
  MatP xtvx;
  VecP xtvy;
  double logdet_v = 0.0;
  double n_obs = 0.0;
};

inline GlsAccum accumulate_gls(std::span<const PairCells> cells, const MatQ& L, double s2, int p,
                               std::vector<PairBlock>* blocks = nullptr) {
  GlsAccum acc;
  acc.xtvx = MatP::Zero(p, p);
  acc.xtvy = VecP::Zero(p);
  if (blocks) blocks->clear();
  std::array<Residualized, 3> cols;
  for (const auto& pc : cells) {
    PairBlock b = pair_block(pc, L, s2);
    for (int i = 0; i < p; ++i) cols[static_cast<std::size_t>(i)] = residualize(pc, b, pc.control.x[i], pc.treated.x[i]);
    const Residualized ry = residualize(pc, b, pc.control.ybar, pc.treated.ybar);
    for (int i = 0; i < p; ++i) {
      const auto& ci = cols[static_cast<std::size_t>(i)];
      for (int j = 0; j <= i; ++j) {
        const double v = bilinear(pc, ci, cols[static_cast<std::size_t>(j)], s2);
        acc.xtvx(i, j) += v;
        if (j != i) acc.xtvx(j, i) += v;
      }
      acc.xtvy[i] += bilinear(pc, ci, ry, s2);
    }
    acc.logdet_v += b.logdet_v;
    acc.n_obs += pc.m;
    if (blocks) blocks->push_back(std::move(b));
  }
  return acc;
}

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

}  // namespace detail

/// Exact ML log-likelihood of the fixed effects `fixed` and components
/// `vc`, from per-pair summaries.  Sigma may be singular.
inline double block_loglik(std::span<const PairSummary> summaries, const ModelSpec& spec,
                           const VarianceComponents& vc, const FixedEffects& fixed) {
  if (fixed.size() != spec.n_fixed()) throw InputError("fixed-effect vector has wrong length");
  const auto cells = detail::make_cells(summaries, spec);
  const auto L = detail::lower_factor(vc, spec);
  const double s2 = vc.sigma_eps_sq;
  double total = 0.0;
  for (const auto& pc : cells) {
    const auto b = detail::pair_block(pc, L, s2);
    total += pc.m * detail::kLog2Pi + b.logdet_v + detail::residual_quadratic(pc, b, fixed, s2);
  }
  return -0.5 * total;
}

struct GlsResult {
  FixedEffects coef;
  Eigen::MatrixXd cov;
  double loglik = 0.0;       // ML log-likelihood at coef
  double loglik_reml = 0.0;  // restricted log-likelihood at the same components
};

namespace detail {

inline GlsResult gls_from_cells(std::span<const PairCells> cells, const ModelSpec& spec, const VarianceComponents& vc) {
  const auto L = lower_factor(vc, spec);
  const double s2 = vc.sigma_eps_sq;
  const int p = spec.n_fixed();
  std::vector<PairBlock> blocks;
  blocks.reserve(cells.size());
  const GlsAccum acc = accumulate_gls(cells, L, s2, p, &blocks);

  Eigen::LLT<MatP> llt(acc.xtvx);
  const double diag_max = acc.xtvx.diagonal().maxCoeff();
  if (llt.info() != Eigen::Success ||
      llt.matrixLLT().diagonal().array().square().minCoeff() <= 1e-12 * diag_max)
    throw RankDeficiencyError("fixed-effect design is rank deficient");

  GlsResult out;
  out.coef = llt.solve(acc.xtvy);
  out.cov = llt.solve(MatP::Identity(p, p));
  double quad = 0.0;
  for (std::size_t k = 0; k < cells.size(); ++k) quad += residual_quadratic(cells[k], blocks[k], out.coef, s2);
  out.loglik = -0.5 * (acc.n_obs * kLog2Pi + acc.logdet_v + quad);
  const double logdet_xtvx = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  out.loglik_reml = out.loglik - 0.5 * logdet_xtvx + 0.5 * p * kLog2Pi;
  return out;
}

}  // namespace detail

/// GLS fixed effects b = (sum X'V^-1 X)^-1 sum X'V^-1 y and their covariance.
inline GlsResult gls_fixed_effects(std::span<const PairSummary> summaries, const ModelSpec& spec,
                                   const VarianceComponents& vc) {
  const auto cells = detail::make_cells(summaries, spec);
  return detail::gls_from_cells(cells, spec, vc);
}

}  // namespace pairmatch

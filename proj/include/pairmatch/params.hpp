#pragma once

// Model specifications, variance components, and the unconstrained
// log-Cholesky parameterization the optimizer works in.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "pairmatch/error.hpp"

namespace pairmatch {

enum class ModelKind { MLM1, MLM2, MLM3 };

/// MLM1: y = a0 + tau*T + alpha_k + e               (random intercept)
/// MLM2: y = a0 + tau0*T + alpha_k + tau_k*T + e     (correlated random intercept and slope)
/// MLM3: MLM2 plus a cluster-level covariate slope beta*X.
///
/// MLM1 with `use_covariate` set is the random-intercept model with the
/// covariate; it is the null model nested in MLM3 and the first rung of
/// the MLM3 warm start.
struct ModelSpec {
  ModelKind kind = ModelKind::MLM1;
  bool use_covariate = false;

  static constexpr ModelSpec mlm1() { return {ModelKind::MLM1, false}; }
  static constexpr ModelSpec mlm2() { return {ModelKind::MLM2, false}; }
  static constexpr ModelSpec mlm3() { return {ModelKind::MLM3, true}; }
  static constexpr ModelSpec mlm1_covariate() { return {ModelKind::MLM1, true}; }

  constexpr bool random_slope() const { return kind != ModelKind::MLM1; }
  constexpr int n_fixed() const { return use_covariate ? 3 : 2; }
  constexpr int n_random() const { return random_slope() ? 2 : 1; }
  constexpr int n_theta() const { return random_slope() ? 4 : 2; }
  // Variance parameters plus fixed effects.
  constexpr int n_params() const { return (random_slope() ? 4 : 2) + n_fixed(); }

  bool valid() const { return (kind == ModelKind::MLM3) == (use_covariate && random_slope()); }

  friend constexpr bool operator==(const ModelSpec&, const ModelSpec&) = default;

  std::string name() const {
    switch (kind) {
      case ModelKind::MLM1: return use_covariate ? "mlm1+x" : "mlm1";
      case ModelKind::MLM2: return "mlm2";
      case ModelKind::MLM3: return "mlm3";
    }
    return "?";
  }

  static ModelSpec from_name(const std::string& s) {
    if (s == "mlm1") return mlm1();
    if (s == "mlm2") return mlm2();
    if (s == "mlm3") return mlm3();
    if (s == "mlm1+x") return mlm1_covariate();
    throw InputError("unknown model '" + s + "' (expected mlm1, mlm2, mlm3 or mlm1+x)");
  }
};

struct VarianceComponents {
  double sigma_alpha_sq = 0.0;
  double sigma_tau_sq = 0.0;
  double sigma_alpha_tau = 0.0;
  double sigma_eps_sq = 1.0;

  Eigen::Matrix2d sigma() const {
    Eigen::Matrix2d s;
    s << sigma_alpha_sq, sigma_alpha_tau, sigma_alpha_tau, sigma_tau_sq;
    return s;
  }

  bool is_psd(double rel_tol = 1e-12) const {
    if (!(sigma_alpha_sq >= 0.0) || !(sigma_tau_sq >= 0.0)) return false;
    const double prod = sigma_alpha_sq * sigma_tau_sq;
    return sigma_alpha_tau * sigma_alpha_tau <= prod * (1.0 + rel_tol) + 1e-300;
  }
};

/// Lower-triangular L with L*L^T = Sigma for a PSD 2x2 Sigma, singular
/// matrices included.  Throws on a non-PSD input.
inline Eigen::Matrix2d psd_cholesky(const VarianceComponents& vc) {
  if (!vc.is_psd()) throw InputError("random-effect covariance is not positive semidefinite");
  Eigen::Matrix2d L = Eigen::Matrix2d::Zero();
  L(0, 0) = std::sqrt(vc.sigma_alpha_sq);
  if (L(0, 0) > 0.0) {
    L(1, 0) = vc.sigma_alpha_tau / L(0, 0);
    L(1, 1) = std::sqrt(std::max(0.0, vc.sigma_tau_sq - L(1, 0) * L(1, 0)));
  } else {
    L(1, 1) = std::sqrt(vc.sigma_tau_sq);
  }
  return L;
}

using ParamVector = Eigen::VectorXd;

inline constexpr double kThetaBound = 15.0;

namespace detail {
inline void check_arity(const ParamVector& theta, const ModelSpec& spec) {
  if (theta.size() != spec.n_theta())
    throw InputError("parameter vector has length " + std::to_string(theta.size()) + ", " + spec.name() +
                     " expects " + std::to_string(spec.n_theta()));
}
}  // namespace detail

/// Unconstrained -> variance components.
///   random intercept only: (log s_a^2, log s_e^2)
///   random slope:          (log l11, l21, log l22, log s_e^2), Sigma = L L^T
inline VarianceComponents unpack(const ParamVector& theta, const ModelSpec& spec) {
  detail::check_arity(theta, spec);
  VarianceComponents vc;
  if (!spec.random_slope()) {
    vc.sigma_alpha_sq = std::exp(theta[0]);
    vc.sigma_eps_sq = std::exp(theta[1]);
    return vc;
  }
  const double l11 = std::exp(theta[0]);
  const double l21 = theta[1];
  const double l22 = std::exp(theta[2]);
  vc.sigma_alpha_sq = l11 * l11;
  vc.sigma_alpha_tau = l11 * l21;
  vc.sigma_tau_sq = l21 * l21 + l22 * l22;
  vc.sigma_eps_sq = std::exp(theta[3]);
  return vc;
}

/// Inverse of unpack; requires strictly positive definite components.
inline ParamVector pack(const VarianceComponents& vc, const ModelSpec& spec) {
  if (!(vc.sigma_eps_sq > 0.0)) throw InputError("residual variance must be positive");
  ParamVector theta(spec.n_theta());
  if (!spec.random_slope()) {
    if (!(vc.sigma_alpha_sq > 0.0)) throw InputError("intercept variance must be positive to pack");
    theta << std::log(vc.sigma_alpha_sq), std::log(vc.sigma_eps_sq);
    return theta;
  }
  const double l11 = std::sqrt(vc.sigma_alpha_sq);
  if (!(l11 > 0.0)) throw InputError("intercept variance must be positive to pack");
  const double l21 = vc.sigma_alpha_tau / l11;
  const double l22_sq = vc.sigma_tau_sq - l21 * l21;
  if (!(l22_sq > 0.0)) throw InputError("random-effect covariance must be positive definite to pack");
  theta << std::log(l11), l21, 0.5 * std::log(l22_sq), std::log(vc.sigma_eps_sq);
  return theta;
}

/// Clamps the log-scale components to [-kThetaBound, kThetaBound].  The
/// off-diagonal Cholesky factor is left free.
inline ParamVector clamp_theta(ParamVector theta, const ModelSpec& spec) {
  detail::check_arity(theta, spec);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (spec.random_slope() && i == 1) continue;
    theta[i] = std::clamp(theta[i], -kThetaBound, kThetaBound);
  }
  return theta;
}

}  // namespace pairmatch

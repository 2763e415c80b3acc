#pragma once

// Dense reference likelihood: materializes every V_k = Z_k Sigma Z_k' + s2 I
// and factorizes it directly.  Independent of the per-pair reduction in
// likelihood.hpp and meant for small instances (cross-checks, tests).

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/params.hpp"

namespace pairmatch {

struct DensePair {
  Eigen::MatrixXd X;
  Eigen::MatrixXd Z;
  Eigen::VectorXd y;
};

inline std::vector<DensePair> dense_design(const TrialDataset& ds, const ModelSpec& spec) {
  if (auto report = validate(ds); !report.ok()) throw InputError("invalid dataset:\n" + report.to_string());
  std::vector<std::vector<const ClusterRecord*>> by_pair(static_cast<std::size_t>(ds.K));
  for (const auto& c : ds.clusters) by_pair[static_cast<std::size_t>(c.pair_id - 1)].push_back(&c);

  std::vector<DensePair> out;
  for (const auto& clusters : by_pair) {
    Eigen::Index m = 0;
    for (const auto* c : clusters) m += static_cast<Eigen::Index>(c->outcomes.size());
    DensePair d;
    d.X.resize(m, spec.n_fixed());
    d.Z.resize(m, spec.n_random());
    d.y.resize(m);
    Eigen::Index row = 0;
    for (const auto* c : clusters) {
      const double t = c->treated ? 1.0 : 0.0;
      if (spec.use_covariate && !c->covariate) throw InputError("covariate required for " + spec.name());
      for (double v : c->outcomes) {
        d.X(row, 0) = 1.0;
        d.X(row, 1) = t;
        if (spec.use_covariate) d.X(row, 2) = *c->covariate;
        d.Z(row, 0) = 1.0;
        if (spec.random_slope()) d.Z(row, 1) = t;
        d.y(row) = v;
        ++row;
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

inline Eigen::MatrixXd dense_random_cov(const VarianceComponents& vc, const ModelSpec& spec) {
  if (!vc.is_psd()) throw InputError("random-effect covariance is not positive semidefinite");
  if (!(vc.sigma_eps_sq > 0.0)) throw InputError("residual variance must be positive");
  if (spec.random_slope()) return vc.sigma();
  return Eigen::MatrixXd::Constant(1, 1, vc.sigma_alpha_sq);
}

inline Eigen::MatrixXd dense_marginal_cov(const DensePair& d, const Eigen::MatrixXd& G, double s2) {
  Eigen::MatrixXd V = d.Z * G * d.Z.transpose();
  V.diagonal().array() += s2;
  return V;
}

inline double dense_loglik(const TrialDataset& ds, const ModelSpec& spec, const VarianceComponents& vc,
                           const Eigen::VectorXd& fixed) {
  const auto G = dense_random_cov(vc, spec);
  double total = 0.0;
  for (const auto& d : dense_design(ds, spec)) {
    const Eigen::MatrixXd V = dense_marginal_cov(d, G, vc.sigma_eps_sq);
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    const Eigen::VectorXd r = d.y - d.X * fixed;
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    total += static_cast<double>(d.y.size()) * std::log(2.0 * M_PI) + logdet + r.dot(llt.solve(r));
  }
  return -0.5 * total;
}

struct DenseGls {
  Eigen::VectorXd coef;
  Eigen::MatrixXd cov;
};

inline DenseGls dense_gls(const TrialDataset& ds, const ModelSpec& spec, const VarianceComponents& vc) {
  const auto G = dense_random_cov(vc, spec);
  const int p = spec.n_fixed();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
  for (const auto& d : dense_design(ds, spec)) {
    Eigen::LLT<Eigen::MatrixXd> llt(dense_marginal_cov(d, G, vc.sigma_eps_sq));
    A += d.X.transpose() * llt.solve(d.X);
    c += d.X.transpose() * llt.solve(d.y);
  }
  DenseGls out;
  out.cov = A.inverse();
  out.coef = A.ldlt().solve(c);
  return out;
}

}  // namespace pairmatch

#pragma once

// Shared helpers for the unit and acceptance tests: small random
// datasets, a brute-force dense likelihood written against raw rows, and
// a grid + pattern-search maximizer built on it.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/params.hpp"

namespace testsupport {

using pairmatch::ClusterRecord;
using pairmatch::ModelSpec;
using pairmatch::TrialDataset;

/// K pairs, cluster sizes 1..max_size, pair-level shifts so the
/// variance components are non-trivial.
inline TrialDataset random_dataset(std::mt19937_64& rng, int K, int max_size, bool covariate) {
  std::uniform_int_distribution<int> size(1, max_size);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  TrialDataset ds;
  ds.K = K;
  for (int k = 1; k <= K; ++k) {
    const double a = 2.0 * z(rng);
    const double t = 1.0 + 0.8 * z(rng);
    const bool first_treated = coin(rng);
    for (int j = 0; j < 2; ++j) {
      ClusterRecord c;
      c.pair_id = k;
      c.cluster_id = "k" + std::to_string(k) + "j" + std::to_string(j);
      c.treated = (j == 0) == first_treated;
      const double x = a + 0.5 * z(rng);
      if (covariate) c.covariate = x;
      const int n = size(rng);
      for (int i = 0; i < n; ++i) c.outcomes.push_back(10.0 + a + (c.treated ? t : 0.0) + 0.3 * x + z(rng));
      ds.clusters.push_back(std::move(c));
    }
  }
  return ds;
}

/// Raw-row design for one pair.
struct RowPair {
  Eigen::MatrixXd X, Z;
  Eigen::VectorXd y;
};

inline std::vector<RowPair> rows_by_pair(const TrialDataset& ds, const ModelSpec& spec) {
  std::vector<RowPair> pairs(static_cast<std::size_t>(ds.K));
  std::vector<std::vector<std::array<double, 5>>> raw(static_cast<std::size_t>(ds.K));
  for (const auto& c : ds.clusters)
    for (double y : c.outcomes)
      raw[static_cast<std::size_t>(c.pair_id - 1)].push_back(
          {1.0, c.treated ? 1.0 : 0.0, c.covariate.value_or(0.0), y, 0.0});
  const int p = spec.use_covariate ? 3 : 2;
  const int q = spec.kind == pairmatch::ModelKind::MLM1 ? 1 : 2;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const auto m = static_cast<Eigen::Index>(raw[k].size());
    auto& rp = pairs[k];
    rp.X.resize(m, p);
    rp.Z.resize(m, q);
    rp.y.resize(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto& r = raw[k][static_cast<std::size_t>(i)];
      for (int c = 0; c < p; ++c) rp.X(i, c) = r[static_cast<std::size_t>(c)];
      rp.Z(i, 0) = 1.0;
      if (q == 2) rp.Z(i, 1) = r[1];
      rp.y(i) = r[3];
    }
  }
  return pairs;
}

/// Random-effect covariance from (sd_alpha, sd_tau, rho).  Standard
/// deviations and the correlation are bounded coordinates, so zero
/// variances and singular Sigma (rho = +-1) are ordinary points of the
/// search box rather than limits at infinity.
inline Eigen::MatrixXd sigma_from(const Eigen::VectorXd& eta, int q) {
  if (q == 1) return Eigen::MatrixXd::Constant(1, 1, eta[0] * eta[0]);
  const double sa = eta[0], st = eta[1], rho = eta[2];
  Eigen::Matrix2d S;
  S << sa * sa, rho * sa * st, rho * sa * st, st * st;
  return S;
}

struct Profile {
  double loglik;
  Eigen::VectorXd beta;
};

/// ML log-likelihood with fixed effects profiled out, every V_k formed
/// and inverted as a dense matrix.
inline Profile dense_profile(const std::vector<RowPair>& pairs, const Eigen::MatrixXd& G, double s2) {
  const auto p = pairs.front().X.cols();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
  std::vector<Eigen::MatrixXd> vinv;
  double logdet = 0.0, n = 0.0;
  for (const auto& rp : pairs) {
    Eigen::MatrixXd V = rp.Z * G * rp.Z.transpose();
    V += s2 * Eigen::MatrixXd::Identity(V.rows(), V.cols());
    Eigen::FullPivLU<Eigen::MatrixXd> lu(V);
    vinv.push_back(lu.inverse());
    logdet += std::log(lu.determinant());
    A += rp.X.transpose() * vinv.back() * rp.X;
    c += rp.X.transpose() * vinv.back() * rp.y;
    n += static_cast<double>(rp.y.size());
  }
  Profile out;
  out.beta = A.fullPivLu().solve(c);
  double quad = 0.0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const Eigen::VectorXd r = pairs[k].y - pairs[k].X * out.beta;
    quad += r.dot(vinv[k] * r);
  }
  out.loglik = -0.5 * (n * std::log(2.0 * M_PI) + logdet + quad);
  return out;
}

struct OracleOptimum {
  Eigen::VectorXd eta;  // (sd_alpha, [sd_tau, rho,] log s2)
  double loglik;
  Eigen::VectorXd beta;
};

namespace detail {

struct Cand {
  double f;
  Eigen::VectorXd x;
};

// Rosenbrock's rotating-coordinate search (maximizing): per-direction
// steps grow on success and reverse and shrink on failure; once every
// direction has both succeeded and failed, the frame is rotated onto the
// accumulated progress (Gram-Schmidt), so curved narrow ridges can be
// followed.  `project` maps trial points back into the feasible box.
template <class F, class P>
Cand rosenbrock(const F& value, const P& project, Eigen::VectorXd x, double fx) {
  const auto d = x.size();
  Eigen::MatrixXd D = Eigen::MatrixXd::Identity(d, d);
  Eigen::VectorXd step = Eigen::VectorXd::Constant(d, 0.05);
  int evals = 0;
  while (evals < 200000) {
    Eigen::VectorXd progress = Eigen::VectorXd::Zero(d);
    std::vector<bool> succeeded(static_cast<std::size_t>(d), false), failed(static_cast<std::size_t>(d), false);
    auto stage_done = [&] {
      for (Eigen::Index i = 0; i < d; ++i)
        if (!succeeded[static_cast<std::size_t>(i)] || !failed[static_cast<std::size_t>(i)]) return false;
      return true;
    };
    while (!stage_done() && step.cwiseAbs().maxCoeff() > 1e-11 && evals < 200000) {
      for (Eigen::Index i = 0; i < d; ++i) {
        const Eigen::VectorXd trial = project(x + step[i] * D.col(i));
        const double f = value(trial);
        ++evals;
        if (f > fx) {
          progress[i] += step[i];
          x = trial;
          fx = f;
          step[i] *= 3.0;
          succeeded[static_cast<std::size_t>(i)] = true;
        } else {
          step[i] *= -0.5;
          failed[static_cast<std::size_t>(i)] = true;
        }
      }
    }
    const double moved = progress.norm();
    if (moved < 1e-11) break;
    Eigen::MatrixXd A(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      A.col(i).setZero();
      for (Eigen::Index j = i; j < d; ++j) A.col(i) += progress[j] * D.col(j);
    }
    Eigen::MatrixXd Dn(d, d);
    Eigen::Index filled = 0;
    for (Eigen::Index i = 0; i < d && filled < d; ++i) {
      Eigen::VectorXd v = A.col(i);
      for (Eigen::Index j = 0; j < filled; ++j) v -= v.dot(Dn.col(j)) * Dn.col(j);
      if (v.norm() > 1e-12 * (1.0 + A.col(i).norm())) Dn.col(filled++) = v.normalized();
    }
    for (Eigen::Index i = 0; i < d && filled < d; ++i) {
      Eigen::VectorXd v = D.col(i);
      for (Eigen::Index j = 0; j < filled; ++j) v -= v.dot(Dn.col(j)) * Dn.col(j);
      if (v.norm() > 1e-8) Dn.col(filled++) = v.normalized();
    }
    if (filled == d) D = Dn;
    step = Eigen::VectorXd::Constant(d, std::clamp(0.5 * moved, 1e-12, 0.05));
  }
  return {fx, x};
}

// Evaluates the full tensor grid, then polishes from the three best
// points and from every grid-local maximum.
template <class F, class P>
Cand grid_then_polish(const F& value, const P& project, const std::vector<std::vector<double>>& axes) {
  const auto d = static_cast<Eigen::Index>(axes.size());
  std::vector<std::size_t> dims;
  std::size_t total = 1;
  for (const auto& ax : axes) {
    dims.push_back(ax.size());
    total *= ax.size();
  }
  auto coords = [&](std::size_t flat) {
    std::vector<std::size_t> id(dims.size());
    for (std::size_t i = 0; i < dims.size(); ++i) {
      id[i] = flat % dims[i];
      flat /= dims[i];
    }
    return id;
  };
  auto flatten = [&](const std::vector<std::size_t>& id) {
    std::size_t f = 0;
    for (std::size_t i = dims.size(); i-- > 0;) f = f * dims[i] + id[i];
    return f;
  };
  std::vector<double> fv(total);
  std::vector<Eigen::VectorXd> pts(total);
  for (std::size_t n = 0; n < total; ++n) {
    const auto id = coords(n);
    Eigen::VectorXd x(d);
    for (Eigen::Index i = 0; i < d; ++i) x[i] = axes[static_cast<std::size_t>(i)][id[static_cast<std::size_t>(i)]];
    pts[n] = x;
    fv[n] = value(x);
  }
  std::vector<std::size_t> order(total);
  for (std::size_t n = 0; n < total; ++n) order[n] = n;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] > fv[b]; });

  std::vector<std::size_t> starts(order.begin(), order.begin() + static_cast<long>(std::min<std::size_t>(total, 3)));
  for (std::size_t r = 3; r < total; ++r) {
    const std::size_t n = order[r];
    const auto id = coords(n);
    bool local_max = true;
    for (std::size_t i = 0; i < dims.size() && local_max; ++i) {
      for (int delta : {-1, 1}) {
        const long v = static_cast<long>(id[i]) + delta;
        if (v < 0 || v >= static_cast<long>(dims[i])) continue;
        auto nb = id;
        nb[i] = static_cast<std::size_t>(v);
        if (fv[flatten(nb)] > fv[n]) {
          local_max = false;
          break;
        }
      }
    }
    if (local_max) starts.push_back(n);
  }
  Cand best{-INFINITY, Eigen::VectorXd()};
  for (auto n : starts) {
    Cand c = rosenbrock(value, project, pts[n], fv[n]);
    if (c.f > best.f) best = c;
  }
  return best;
}

}  // namespace detail

/// Maximizes the dense profile likelihood without reference to the
/// library's parameterization.  The full search works in (sd_alpha,
/// [sd_tau, rho,] log s2), where zero variances and perfectly correlated
/// effects are ordinary box points; slope models additionally search the
/// rank-one family Sigma = v v' with v free, which contains the
/// singular optima.  Lower bounds mirror the fitted model's domain:
/// intercept-only variance >= e^-15, Cholesky diagonal entries >= e^-15.
inline OracleOptimum grid_polish_maximize(const TrialDataset& ds, const ModelSpec& spec) {
  const auto pairs = rows_by_pair(ds, spec);
  const int q = spec.kind == pairmatch::ModelKind::MLM1 ? 1 : 2;
  const Eigen::Index d = q == 1 ? 2 : 4;
  const double sd_floor = q == 1 ? std::exp(-7.5) : std::exp(-15.0);
  auto lin = [](double a, double b, int n) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(a + (b - a) * i / (n - 1));
    return v;
  };
  const std::vector<double> sds{sd_floor, 0.03, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.5};

  auto full_value = [&](const Eigen::VectorXd& t) {
    return dense_profile(pairs, sigma_from(t, q), std::exp(t[d - 1])).loglik;
  };
  auto full_box = [&](Eigen::VectorXd t) {
    for (Eigen::Index i = 0; i < d; ++i) {
      if (q == 2 && i == 2) t[i] = std::clamp(t[i], -1.0, 1.0);
      else if (i == d - 1) t[i] = std::clamp(t[i], -15.0, 15.0);
      else t[i] = std::clamp(t[i], sd_floor, std::exp(7.5));
    }
    return t;
  };
  std::vector<std::vector<double>> axes;
  if (q == 1) axes = {sds, lin(-3.0, 3.0, 25)};
  else axes = {sds, sds, lin(-1.0, 1.0, 9), lin(-2.0, 2.0, 9)};
  detail::Cand best = detail::grid_then_polish(full_value, full_box, axes);

  if (q == 2) {
    // (v1, v2, log s2) with Sigma = v v'.
    auto rank1_value = [&](const Eigen::VectorXd& t) {
      Eigen::Matrix2d S;
      S << t[0] * t[0], t[0] * t[1], t[0] * t[1], t[1] * t[1];
      return dense_profile(pairs, S, std::exp(t[2])).loglik;
    };
    auto rank1_box = [&](Eigen::VectorXd t) {
      t[0] = std::clamp(t[0], sd_floor, std::exp(7.5));
      t[2] = std::clamp(t[2], -15.0, 15.0);
      return t;
    };
    std::vector<double> signed_sds;
    for (auto it = sds.rbegin(); it != sds.rend(); ++it) signed_sds.push_back(-*it);
    signed_sds.push_back(0.0);
    signed_sds.insert(signed_sds.end(), sds.begin(), sds.end());
    const detail::Cand r1 = detail::grid_then_polish(rank1_value, rank1_box, {sds, signed_sds, lin(-2.0, 2.0, 9)});
    if (r1.f > best.f) {
      Eigen::VectorXd eta(4);
      eta << r1.x[0], std::max(std::abs(r1.x[1]), sd_floor), r1.x[1] < 0.0 ? -1.0 : 1.0, r1.x[2];
      best = {r1.f, eta};
    }
  }

  OracleOptimum out;
  out.eta = best.x;
  out.loglik = best.f;
  out.beta = dense_profile(pairs, sigma_from(best.x, q), std::exp(best.x[d - 1])).beta;
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("pairmatch_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace testsupport

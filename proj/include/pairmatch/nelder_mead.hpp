#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace pairmatch {

struct NelderMeadOptions {
  double ftol = 1e-10;   // absolute spread of f over the simplex
  int max_evals = 2000;
  double alpha = 1.0;    // reflection
  double gamma = 2.0;    // expansion
  double rho = 0.5;      // contraction
  double sigma = 0.5;    // shrink
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int n_evals = 0;
  bool converged = false;
};

/// Downhill simplex minimization of `f` from the simplex
/// {x0, x0 + step[i] e_i}.  Non-finite values are treated as +inf.  The
/// best vertex never gets worse, so the result is at least as good as x0.
template <class F>
NelderMeadResult nelder_mead(F&& f, const Eigen::VectorXd& x0, const Eigen::VectorXd& step,
                             const NelderMeadOptions& opt = {}) {
  const Eigen::Index n = x0.size();
  NelderMeadResult res;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++res.n_evals;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> fv(static_cast<std::size_t>(n + 1));
  fv[0] = eval(x0);
  for (Eigen::Index i = 0; i < n; ++i) {
    pts[static_cast<std::size_t>(i + 1)][i] += step[i];
    fv[static_cast<std::size_t>(i + 1)] = eval(pts[static_cast<std::size_t>(i + 1)]);
  }

  std::vector<std::size_t> order(pts.size());
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Stable so ties keep vertex order; keeps runs deterministic.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
    std::vector<Eigen::VectorXd> p2;
    std::vector<double> f2;
    p2.reserve(pts.size());
    f2.reserve(pts.size());
    for (auto i : order) {
      p2.push_back(pts[i]);
      f2.push_back(fv[i]);
    }
    pts.swap(p2);
    fv.swap(f2);
  };

  const auto worst = static_cast<std::size_t>(n);
  while (true) {
    sort_simplex();
    if (std::isfinite(fv[worst]) && fv[worst] - fv[0] <= opt.ftol) {
      res.converged = true;
      break;
    }
    if (res.n_evals >= opt.max_evals) break;

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t j = 0; j < worst; ++j) centroid += pts[j];
    centroid /= static_cast<double>(n);

    // Degenerate simplex: nothing left to resolve.
    double extent = 0.0;
    for (std::size_t j = 1; j <= worst; ++j) extent = std::max(extent, (pts[j] - pts[0]).cwiseAbs().maxCoeff());
    if (extent <= 1e-14 * (1.0 + pts[0].cwiseAbs().maxCoeff())) {
      res.converged = true;
      break;
    }

    const Eigen::VectorXd xr = centroid + opt.alpha * (centroid - pts[worst]);
    const double fr = eval(xr);
    if (fr < fv[0]) {
      const Eigen::VectorXd xe = centroid + opt.gamma * (xr - centroid);
      const double fe = eval(xe);
      if (fe < fr) {
        pts[worst] = xe;
        fv[worst] = fe;
      } else {
        pts[worst] = xr;
        fv[worst] = fr;
      }
    } else if (fr < fv[worst - 1]) {
      pts[worst] = xr;
      fv[worst] = fr;
    } else {
      const bool outside = fr < fv[worst];
      const Eigen::VectorXd xc =
          outside ? Eigen::VectorXd(centroid + opt.rho * (xr - centroid))
                  : Eigen::VectorXd(centroid + opt.rho * (pts[worst] - centroid));
      const double fc = eval(xc);
      if (fc < (outside ? fr : fv[worst])) {
        pts[worst] = xc;
        fv[worst] = fc;
      } else {
        for (std::size_t j = 1; j <= worst; ++j) {
          pts[j] = pts[0] + opt.sigma * (pts[j] - pts[0]);
          fv[j] = eval(pts[j]);
        }
      }
    }
  }
  res.x = pts[0];
  res.f = fv[0];
  return res;
}

}  // namespace pairmatch

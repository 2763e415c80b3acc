#pragma once

// Likelihood-ratio comparison of nested random-intercept / random-slope fits.

#include <algorithm>

#include "pairmatch/chisq.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/fit.hpp"
#include "pairmatch/kv_record.hpp"

namespace pairmatch {

struct LrtResult {
  double stat = 0.0;
  int df_naive = 0;
  double p_naive = 1.0;
  double p_mixture = 1.0;  // 50:50 mixture of chi2(df-1) and chi2(df)
  bool rejected_05 = false;

  Record to_record() const {
    Record r;
    r.set("stat", stat);
    r.set("df_naive", df_naive);
    r.set("p_naive", p_naive);
    r.set("p_mixture", p_mixture);
    r.set("rejected_05", rejected_05);
    return r;
  }
};

inline LrtResult lrt_from_stat(double stat, int df) {
  LrtResult r;
  r.stat = std::max(0.0, stat);
  r.df_naive = df;
  r.p_naive = chisq_sf(r.stat, df);
  r.p_mixture = 0.5 * chisq_sf(r.stat, df - 1) + 0.5 * chisq_sf(r.stat, df);
  r.rejected_05 = r.p_naive < 0.05;
  return r;
}

inline LrtResult lrt(const ModelFit& null_fit, const ModelFit& alt_fit) {
  if (null_fit.reml || alt_fit.reml) throw InputError("likelihood-ratio test requires ML fits, not REML");
  if (null_fit.spec.random_slope() || !alt_fit.spec.random_slope() ||
      null_fit.spec.use_covariate != alt_fit.spec.use_covariate)
    throw InputError("models are not nested: " + null_fit.spec.name() + " vs " + alt_fit.spec.name());
  if (null_fit.data_fingerprint != alt_fit.data_fingerprint)
    throw InputError("fits were computed on different datasets");
  const int df = alt_fit.spec.n_params() - null_fit.spec.n_params();
  return lrt_from_stat(2.0 * (alt_fit.loglik - null_fit.loglik), df);
}

}  // namespace pairmatch

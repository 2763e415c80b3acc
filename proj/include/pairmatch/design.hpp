#pragma once

// Design-based SATE estimator for matched-pair cluster experiments,
// weighting pairs by their share of the sample, with its conservative
// (upper-bound) standard error.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/kv_record.hpp"

namespace pairmatch {

struct PairDifference {
  int pair_id = 0;
  double diff = 0.0;    // treated mean - control mean
  double weight = 0.0;  // pair size / total size
};

struct DesignEstimate {
  double tau_hat = 0.0;
  std::optional<double> se_upper;  // absent with a single pair
  std::vector<PairDifference> pair_diffs;

  Record to_record() const {
    Record r;
    r.set("estimator", "ikn_sate");
    r.set("tau_hat", tau_hat);
    r.set("se_upper", se_upper ? format_double(*se_upper) : std::string("unavailable"));
    r.set("n_pairs", static_cast<int>(pair_diffs.size()));
    return r;
  }
};

inline std::vector<PairDifference> pair_differences(std::span<const PairSummary> summaries) {
  double n = 0.0;
  for (const auto& s : summaries) n += s.size();
  std::vector<PairDifference> out;
  out.reserve(summaries.size());
  for (const auto& s : summaries)
    out.push_back({s.pair_id, s.mean_treated - s.mean_control, static_cast<double>(s.size()) / n});
  return out;
}

/// tau = sum_k w_k D_k;  se^2 = K/(K-1) sum_k (w_k D_k - tau/K)^2.
inline DesignEstimate sate_estimate(std::span<const PairSummary> summaries) {
  if (summaries.empty()) throw InputError("design estimate requires at least one pair");
  DesignEstimate est;
  est.pair_diffs = pair_differences(summaries);
  // as sum_k n_k D_k / N, which avoids rounding each weight
  double num = 0.0, n = 0.0;
  for (const auto& s : summaries) {
    num += s.size() * (s.mean_treated - s.mean_control);
    n += s.size();
  }
  est.tau_hat = num / n;
  const double K = static_cast<double>(est.pair_diffs.size());
  if (est.pair_diffs.size() >= 2) {
    // w_k D_k - tau/K, scaled by N before dividing
    double ss = 0.0;
    for (const auto& s : summaries) {
      const double dev = (s.size() * (s.mean_treated - s.mean_control) - num / K) / n;
      ss += dev * dev;
    }
    est.se_upper = std::sqrt(K / (K - 1.0) * ss);
  }
  return est;
}

}  // namespace pairmatch

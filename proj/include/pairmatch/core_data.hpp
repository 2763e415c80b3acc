#pragma once

// Trial data model: clusters nested in matched pairs, CSV ingestion,
// validation, and the reduction to per-pair sufficient statistics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pairmatch/error.hpp"
#include "pairmatch/kv_record.hpp"

namespace pairmatch {

struct ClusterRecord {
  int pair_id = 0;  // 1..K
  std::string cluster_id;
  bool treated = false;
  std::vector<double> outcomes;
  std::optional<double> covariate;
};

struct TrialDataset {
  std::vector<ClusterRecord> clusters;
  int K = 0;

  bool has_covariate() const {
    return std::any_of(clusters.begin(), clusters.end(),
                       [](const ClusterRecord& c) { return c.covariate.has_value(); });
  }

  std::size_t n_observations() const {
    std::size_t n = 0;
    for (const auto& c : clusters) n += c.outcomes.size();
    return n;
  }
};

struct PairSummary {
  int pair_id = 0;
  int n_treated = 0;
  int n_control = 0;
  double mean_treated = 0.0;
  double mean_control = 0.0;
  double sse_within = 0.0;  // pooled over both clusters
  std::optional<double> x_treated;
  std::optional<double> x_control;

  int size() const { return n_treated + n_control; }
};

struct ValidationReport {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }

  std::string to_string() const {
    std::string out;
    for (const auto& v : violations) {
      out += v;
      out += '\n';
    }
    return out;
  }
};

inline ValidationReport validate(const TrialDataset& ds) {
  ValidationReport report;
  auto add = [&](std::string msg) { report.violations.push_back(std::move(msg)); };

  if (ds.K < 1) add("dataset: no pairs");

  std::map<int, std::vector<const ClusterRecord*>> by_pair;
  std::set<std::string> ids;
  const bool any_cov = ds.has_covariate();
  for (const auto& c : ds.clusters) {
    if (c.pair_id < 1 || c.pair_id > ds.K)
      add("cluster " + c.cluster_id + ": pair_id " + std::to_string(c.pair_id) + " outside 1.." +
          std::to_string(ds.K));
    if (!ids.insert(c.cluster_id).second) add("cluster " + c.cluster_id + ": duplicate cluster_id");
    if (c.outcomes.empty()) add("cluster " + c.cluster_id + ": no outcomes");
    if (any_cov && !c.covariate) add("cluster " + c.cluster_id + ": covariate missing");
    by_pair[c.pair_id].push_back(&c);
  }

  for (int k = 1; k <= ds.K; ++k) {
    const auto it = by_pair.find(k);
    const std::size_t count = it == by_pair.end() ? 0 : it->second.size();
    const std::string where = "pair " + std::to_string(k) + ": ";
    if (count != 2) {
      add(where + std::to_string(count) + (count == 1 ? " cluster" : " clusters"));
      continue;
    }
    const int treated = static_cast<int>(it->second[0]->treated) + static_cast<int>(it->second[1]->treated);
    if (treated == 2) add(where + "two treated clusters");
    if (treated == 0) add(where + "no treated cluster");
  }
  return report;
}

namespace detail {

struct MeanSse {
  double mean = 0.0;
  double sse = 0.0;
};

// Summed in sorted order so the result does not depend on row order.
inline MeanSse mean_sse(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  MeanSse out;
  out.mean = sum / static_cast<double>(v.size());
  for (double x : v) out.sse += (x - out.mean) * (x - out.mean);
  return out;
}

}  // namespace detail

inline std::vector<PairSummary> pair_summaries(const TrialDataset& ds) {
  if (auto report = validate(ds); !report.ok())
    throw InputError("invalid dataset:\n" + report.to_string());

  std::vector<PairSummary> out(static_cast<std::size_t>(ds.K));
  std::vector<double> sse_treated(out.size()), sse_control(out.size());
  for (int k = 0; k < ds.K; ++k) out[static_cast<std::size_t>(k)].pair_id = k + 1;
  for (const auto& c : ds.clusters) {
    const auto idx = static_cast<std::size_t>(c.pair_id - 1);
    auto& s = out[idx];
    const auto ms = detail::mean_sse(c.outcomes);
    const int n = static_cast<int>(c.outcomes.size());
    if (c.treated) {
      s.n_treated = n;
      s.mean_treated = ms.mean;
      s.x_treated = c.covariate;
      sse_treated[idx] = ms.sse;
    } else {
      s.n_control = n;
      s.mean_control = ms.mean;
      s.x_control = c.covariate;
      sse_control[idx] = ms.sse;
    }
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k].sse_within = sse_control[k] + sse_treated[k];
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.emplace_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                               : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

}  // namespace detail

/// Reads a trial CSV with header `pair_id,cluster_id,treated,y[,x]`.
///
/// Pair labels may be arbitrary; they are re-indexed to 1..K by sorted
/// order (numeric order when every label is an integer).  Outcomes keep
/// file order.  The covariate is cluster-level: blank cells are allowed,
/// but all non-blank values within a cluster must agree.
inline TrialDataset parse_trial_csv(std::string_view text) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (!trim(line).empty()) lines.push_back(line);
  }
  if (lines.empty()) throw InputError("empty file");

  auto header = detail::split_csv_line(lines[0]);
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);
  int col_pair = -1, col_cluster = -1, col_treated = -1, col_y = -1, col_x = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const auto& h = header[i];
    int* slot = h == "pair_id" ? &col_pair
                : h == "cluster_id" ? &col_cluster
                : h == "treated"    ? &col_treated
                : h == "y"          ? &col_y
                : h == "x"          ? &col_x
                                    : nullptr;
    if (!slot) throw InputError("unknown column '" + h + "'");
    if (*slot >= 0) throw InputError("duplicate column '" + h + "'");
    *slot = static_cast<int>(i);
  }
  for (auto [col, name] : {std::pair{col_pair, "pair_id"}, std::pair{col_cluster, "cluster_id"},
                           std::pair{col_treated, "treated"}, std::pair{col_y, "y"}}) {
    if (col < 0) throw InputError(std::string("missing required column '") + name + "'");
  }
  if (lines.size() == 1) throw InputError("empty file: no data rows");

  struct Pending {
    std::string pair_label;
    ClusterRecord rec;
  };
  std::vector<Pending> pending;
  std::map<std::pair<std::string, std::string>, std::size_t> index;

  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = detail::split_csv_line(lines[r]);
    const std::string where = "row " + std::to_string(r + 1) + ": ";
    if (cells.size() != header.size())
      throw InputError(where + "expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(cells.size()));
    const auto& pair_label = cells[static_cast<std::size_t>(col_pair)];
    const auto& cluster = cells[static_cast<std::size_t>(col_cluster)];
    if (pair_label.empty()) throw InputError(where + "empty pair_id");
    if (cluster.empty()) throw InputError(where + "empty cluster_id");

    const auto& t_cell = cells[static_cast<std::size_t>(col_treated)];
    if (t_cell != "0" && t_cell != "1") throw InputError(where + "treated must be 0 or 1, got '" + t_cell + "'");
    const bool treated = t_cell == "1";

    const auto y = parse_double(cells[static_cast<std::size_t>(col_y)]);
    if (!y || !std::isfinite(*y))
      throw InputError(where + "non-numeric outcome '" + cells[static_cast<std::size_t>(col_y)] + "'");

    std::optional<double> x;
    if (col_x >= 0 && !cells[static_cast<std::size_t>(col_x)].empty()) {
      x = parse_double(cells[static_cast<std::size_t>(col_x)]);
      if (!x || !std::isfinite(*x))
        throw InputError(where + "non-numeric covariate '" + cells[static_cast<std::size_t>(col_x)] + "'");
    }

    auto [it, inserted] = index.try_emplace({pair_label, cluster}, pending.size());
    if (inserted) {
      Pending p;
      p.pair_label = pair_label;
      p.rec.cluster_id = cluster;
      p.rec.treated = treated;
      pending.push_back(std::move(p));
    }
    auto& p = pending[it->second];
    if (p.rec.treated != treated) throw InputError(where + "treated flag differs within cluster " + cluster);
    if (x) {
      if (p.rec.covariate && *p.rec.covariate != *x)
        throw InputError(where + "covariate differs within cluster " + cluster);
      p.rec.covariate = x;
    }
    p.rec.outcomes.push_back(*y);
  }

  // Dense re-indexing of pair labels.
  std::vector<std::string> labels;
  for (const auto& p : pending) labels.push_back(p.pair_label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  const bool numeric = std::all_of(labels.begin(), labels.end(),
                                   [](const std::string& s) { return parse_int(s).has_value(); });
  if (numeric) {
    std::sort(labels.begin(), labels.end(), [](const std::string& a, const std::string& b) {
      return *parse_int(a) < *parse_int(b);
    });
  }
  std::map<std::string, int> remap;
  for (std::size_t i = 0; i < labels.size(); ++i) remap[labels[i]] = static_cast<int>(i) + 1;

  TrialDataset ds;
  ds.K = static_cast<int>(labels.size());
  for (auto& p : pending) {
    p.rec.pair_id = remap.at(p.pair_label);
    ds.clusters.push_back(std::move(p.rec));
  }
  return ds;
}

inline TrialDataset ingest_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_trial_csv(ss.str());
}

inline std::string to_trial_csv(const TrialDataset& ds) {
  const bool cov = ds.has_covariate();
  std::string out = cov ? "pair_id,cluster_id,treated,y,x\n" : "pair_id,cluster_id,treated,y\n";
  for (const auto& c : ds.clusters) {
    for (double y : c.outcomes) {
      out += std::to_string(c.pair_id);
      out += ',';
      out += c.cluster_id;
      out += c.treated ? ",1," : ",0,";
      out += format_double(y);
      if (cov) {
        out += ',';
        if (c.covariate) out += format_double(*c.covariate);
      }
      out += '\n';
    }
  }
  return out;
}

inline void write_trial_csv(const TrialDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << to_trial_csv(ds);
}

}  // namespace pairmatch

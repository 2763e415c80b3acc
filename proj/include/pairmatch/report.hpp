#pragma once

// Summary tables, raw per-replication dumps and SVG line plots for sweeps.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pairmatch/core_data.hpp"
#include "pairmatch/error.hpp"
#include "pairmatch/kv_record.hpp"
#include "pairmatch/simulation.hpp"

namespace pairmatch {

struct ReportRow {
  double pi = 0.0;
  std::string estimator;
  int n_converged = 0;
  std::optional<double> mean_se;
  std::optional<double> empirical_sd;
  std::optional<double> mean_tau_hat;
  std::optional<double> mean_sigma_alpha_sq;
  std::optional<double> rejection_freq;  // MLM1 vs MLM2 LRT; same for every row of a grid point

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct ReportTable {
  std::vector<ReportRow> rows;

  friend bool operator==(const ReportTable&, const ReportTable&) = default;

  const ReportRow* find(double pi, std::string_view estimator) const {
    for (const auto& r : rows)
      if (r.pi == pi && r.estimator == estimator) return &r;
    return nullptr;
  }
};

namespace detail {
inline std::optional<double> finite_or_empty(double v) {
  if (std::isfinite(v)) return v;
  return std::nullopt;
}

inline std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline std::optional<double> parse_cell(const std::string& s, const char* column, std::size_t line) {
  if (s.empty()) return std::nullopt;
  auto v = parse_double(s);
  if (!v) throw InputError("line " + std::to_string(line) + ": bad " + column + " value '" + s + "'");
  return v;
}

inline std::vector<std::string> lines_of(std::string_view text) {
  std::vector<std::string> out;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!trim(line).empty()) out.emplace_back(line);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
  }
  return out;
}

}  // namespace detail

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << text;
  if (!out) throw InputError("write failed for '" + path + "'");
}

/// One row per (grid point, estimator present in the sweep), grid order
/// then estimator order.  Estimators with no converged replication get
/// empty statistics.
inline ReportTable summarize_sweep(const SweepResult& sweep) {
  if (sweep.points.empty()) throw InputError("sweep has no grid points");
  ReportTable t;
  for (const auto& g : sweep.points) {
    for (auto e : kAllEstimators) {
      const auto& s = g[e];
      if (!s.present) continue;
      ReportRow r;
      r.pi = g.pi;
      r.estimator = estimator_name(e);
      r.n_converged = s.n_converged;
      r.mean_se = detail::finite_or_empty(s.mean_se);
      r.empirical_sd = detail::finite_or_empty(s.empirical_sd);
      r.mean_tau_hat = detail::finite_or_empty(s.mean_tau_hat);
      r.mean_sigma_alpha_sq = e == Estimator::IKN ? std::nullopt : detail::finite_or_empty(s.mean_sigma_alpha_sq);
      r.rejection_freq = detail::finite_or_empty(g.rejection_freq);
      t.rows.push_back(std::move(r));
    }
  }
  return t;
}

inline constexpr std::string_view kReportHeader =
    "pi,estimator,n_converged,mean_se,empirical_sd,mean_tau_hat,mean_sigma_alpha_sq,rejection_freq";

/// Numbers are written in shortest round-trip form, so parsing the text
/// reproduces the table exactly.
inline std::string to_csv(const ReportTable& t) {
  std::string out(kReportHeader);
  out += '\n';
  for (const auto& r : t.rows) {
    out += format_double(r.pi) + ',' + r.estimator + ',' + std::to_string(r.n_converged) + ',' + detail::cell(r.mean_se) +
           ',' + detail::cell(r.empirical_sd) + ',' + detail::cell(r.mean_tau_hat) + ',' +
           detail::cell(r.mean_sigma_alpha_sq) + ',' + detail::cell(r.rejection_freq) + '\n';
  }
  return out;
}

inline ReportTable parse_report_csv(std::string_view text) {
  const auto lines = detail::lines_of(text);
  if (lines.empty()) throw InputError("empty report file");
  if (lines[0] != kReportHeader) throw InputError("unexpected report header '" + lines[0] + "'");
  ReportTable t;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto c = detail::split_csv_line(lines[i]);
    if (c.size() != 8) throw InputError("line " + std::to_string(i + 1) + ": expected 8 columns");
    ReportRow r;
    auto pi = parse_double(c[0]);
    auto n = parse_int(c[2]);
    if (!pi || !n) throw InputError("line " + std::to_string(i + 1) + ": bad pi or n_converged");
    r.pi = *pi;
    r.estimator = c[1];
    r.n_converged = static_cast<int>(*n);
    r.mean_se = detail::parse_cell(c[3], "mean_se", i + 1);
    r.empirical_sd = detail::parse_cell(c[4], "empirical_sd", i + 1);
    r.mean_tau_hat = detail::parse_cell(c[5], "mean_tau_hat", i + 1);
    r.mean_sigma_alpha_sq = detail::parse_cell(c[6], "mean_sigma_alpha_sq", i + 1);
    r.rejection_freq = detail::parse_cell(c[7], "rejection_freq", i + 1);
    t.rows.push_back(std::move(r));
  }
  return t;
}

// --- raw per-replication rows ------------------------------------------------

inline constexpr std::string_view kRawHeader =
    "pi_index,pi,rep_id,estimator,tau_hat,se,converged,sigma_alpha_sq,sigma_tau_sq,"
    "lrt_stat,lrt_p_naive,lrt_p_mixture,lrt_rejected,mean_size_diff,size_redraws,potential_redraws";

struct RawRow {
  int pi_index = 0;
  double pi = 0.0;
  int rep_id = 0;
  std::string estimator;
  std::optional<double> tau_hat;
  std::optional<double> se;
  bool converged = false;
  std::optional<double> sigma_alpha_sq;
  std::optional<double> sigma_tau_sq;
  std::optional<double> lrt_stat;
  std::optional<double> lrt_p_naive;
  std::optional<double> lrt_p_mixture;
  std::optional<bool> lrt_rejected;
  double mean_size_diff = 0.0;
  int size_redraws = 0;
  int potential_redraws = 0;
};

inline std::string raw_csv(const SweepResult& sweep) {
  std::string out(kRawHeader);
  out += '\n';
  for (const auto& g : sweep.points) {
    for (const auto& r : g.replications) {
      double diff = 0.0;
      for (int d : r.size_diffs) diff += d;
      if (!r.size_diffs.empty()) diff /= static_cast<double>(r.size_diffs.size());
      for (auto e : kAllEstimators) {
        const auto& est = r[e];
        if (!est) continue;
        using detail::cell;
        using detail::finite_or_empty;
        out += std::to_string(r.pi_index) + ',' + format_double(r.pi) + ',' + std::to_string(r.rep_id) + ',' +
               estimator_name(e) + ',' + cell(finite_or_empty(est->tau_hat)) + ',' + cell(finite_or_empty(est->se)) +
               ',' + (est->converged ? "1" : "0") + ',' + cell(finite_or_empty(est->sigma_alpha_sq)) + ',' +
               cell(finite_or_empty(est->sigma_tau_sq)) + ',';
        if (r.lrt) {
          out += format_double(r.lrt->stat) + ',' + format_double(r.lrt->p_naive) + ',' +
                 format_double(r.lrt->p_mixture) + ',' + (r.lrt->rejected_05 ? "1" : "0");
        } else {
          out += ",,,";
        }
        out += ',' + format_double(diff) + ',' + std::to_string(r.size_redraws) + ',' +
               std::to_string(r.potential_redraws) + '\n';
      }
    }
  }
  return out;
}

inline std::vector<RawRow> parse_raw_csv(std::string_view text) {
  const auto lines = detail::lines_of(text);
  if (lines.empty()) throw InputError("empty raw file");
  if (lines[0] != kRawHeader) throw InputError("unexpected raw header '" + lines[0] + "'");
  std::vector<RawRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto c = detail::split_csv_line(lines[i]);
    if (c.size() != 16) throw InputError("line " + std::to_string(i + 1) + ": expected 16 columns");
    auto req = [&](const std::string& s) {
      auto v = parse_double(s);
      if (!v) throw InputError("line " + std::to_string(i + 1) + ": bad number '" + s + "'");
      return *v;
    };
    RawRow r;
    r.pi_index = static_cast<int>(req(c[0]));
    r.pi = req(c[1]);
    r.rep_id = static_cast<int>(req(c[2]));
    r.estimator = c[3];
    r.tau_hat = detail::parse_cell(c[4], "tau_hat", i + 1);
    r.se = detail::parse_cell(c[5], "se", i + 1);
    r.converged = c[6] == "1";
    r.sigma_alpha_sq = detail::parse_cell(c[7], "sigma_alpha_sq", i + 1);
    r.sigma_tau_sq = detail::parse_cell(c[8], "sigma_tau_sq", i + 1);
    r.lrt_stat = detail::parse_cell(c[9], "lrt_stat", i + 1);
    r.lrt_p_naive = detail::parse_cell(c[10], "lrt_p_naive", i + 1);
    r.lrt_p_mixture = detail::parse_cell(c[11], "lrt_p_mixture", i + 1);
    if (!c[12].empty()) r.lrt_rejected = c[12] == "1";
    r.mean_size_diff = req(c[13]);
    r.size_redraws = static_cast<int>(req(c[14]));
    r.potential_redraws = static_cast<int>(req(c[15]));
    rows.push_back(std::move(r));
  }
  return rows;
}

// --- SVG -----------------------------------------------------------------------

struct PlotOptions {
  std::string title;
  std::string y_label = "mean model-based SE of the effect estimate";
  std::vector<std::string> estimators{"MLM1", "MLM2", "MLM3", "IKN"};
};

namespace detail {
inline std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* series_color(std::string_view estimator) {
  if (estimator == "MLM1") return "#1f77b4";
  if (estimator == "MLM2") return "#d62728";
  if (estimator == "MLM3") return "#2ca02c";
  if (estimator == "IKN") return "#ff7f0e";
  return "#555555";
}

inline const char* series_dash(std::string_view estimator) {
  if (estimator == "IKN") return "6,4";
  if (estimator == "MLM3") return "2,3";
  return "";
}

inline const char* series_label(std::string_view estimator) {
  if (estimator == "MLM1") return "MLM1 (common effect)";
  if (estimator == "MLM2") return "MLM2 (varying effect)";
  if (estimator == "MLM3") return "MLM3 (varying effect + covariate)";
  if (estimator == "IKN") return "IKN design-based";
  return "";
}
}  // namespace detail

/// 800x600 line plot of mean_se against pi, one polyline per estimator,
/// x ticks at the grid points.  Missing values break a line.
inline std::string render_svg(const ReportTable& t, const PlotOptions& opt) {
  constexpr double W = 800, H = 600, left = 80, right = 30, top = 50, bottom = 70;
  const double pw = W - left - right, ph = H - top - bottom;

  std::vector<double> grid;
  for (const auto& r : t.rows)
    if (std::find(grid.begin(), grid.end(), r.pi) == grid.end()) grid.push_back(r.pi);
  std::sort(grid.begin(), grid.end());
  double y_max = 0.0;
  for (const auto& r : t.rows)
    if (r.mean_se && std::find(opt.estimators.begin(), opt.estimators.end(), r.estimator) != opt.estimators.end())
      y_max = std::max(y_max, *r.mean_se);
  if (!(y_max > 0.0)) y_max = 1.0;
  // Round the axis top up to 1, 2 or 5 times a power of ten.
  const double mag = std::pow(10.0, std::floor(std::log10(y_max)));
  double y_top = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= y_max * 1.0000001) {
      y_top = m * mag;
      break;
    }
  }
  const double x_lo = grid.empty() ? 0.0 : grid.front();
  const double x_hi = grid.size() > 1 ? grid.back() : x_lo + 1.0;
  auto sx = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * pw; };
  auto sy = [&](double y) { return top + ph - y / y_top * ph; };
  const int y_digits = std::max(0, static_cast<int>(-std::floor(std::log10(y_top / 5.0))) + 1);

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\" "
       "font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
  s << "<text x=\"400\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">" << detail::xml_escape(opt.title)
    << "</text>\n";
  s << "<g stroke=\"#cccccc\" stroke-width=\"1\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = sy(y_top * i / 5.0);
    s << "<line x1=\"" << detail::fmt(left, 2) << "\" y1=\"" << detail::fmt(y, 2) << "\" x2=\""
      << detail::fmt(left + pw, 2) << "\" y2=\"" << detail::fmt(y, 2) << "\"/>\n";
  }
  s << "</g>\n";
  s << "<rect x=\"" << detail::fmt(left, 2) << "\" y=\"" << detail::fmt(top, 2) << "\" width=\"" << detail::fmt(pw, 2)
    << "\" height=\"" << detail::fmt(ph, 2) << "\" fill=\"none\" stroke=\"black\"/>\n";

  s << "<g text-anchor=\"middle\">\n";
  for (double x : grid) {
    const double px = sx(x);
    s << "<line x1=\"" << detail::fmt(px, 2) << "\" y1=\"" << detail::fmt(top + ph, 2) << "\" x2=\""
      << detail::fmt(px, 2) << "\" y2=\"" << detail::fmt(top + ph + 6, 2) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << detail::fmt(px, 2) << "\" y=\"" << detail::fmt(top + ph + 20, 2) << "\">"
      << detail::fmt(x, 2) << "</text>\n";
  }
  s << "</g>\n";
  s << "<g text-anchor=\"end\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = y_top * i / 5.0;
    s << "<text x=\"" << detail::fmt(left - 8, 2) << "\" y=\"" << detail::fmt(sy(v) + 4, 2) << "\">"
      << detail::fmt(v, y_digits) << "</text>\n";
  }
  s << "</g>\n";
  s << "<text x=\"" << detail::fmt(left + pw / 2, 2) << "\" y=\"" << detail::fmt(H - 20, 2)
    << "\" text-anchor=\"middle\">match quality parameter pi</text>\n";
  s << "<text x=\"20\" y=\"" << detail::fmt(top + ph / 2, 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
    << detail::fmt(top + ph / 2, 2) << ")\">" << detail::xml_escape(opt.y_label) << "</text>\n";

  int legend_row = 0;
  for (const auto& est : opt.estimators) {
    std::vector<std::vector<std::pair<double, double>>> segments(1);
    bool any = false;
    for (double x : grid) {
      const ReportRow* r = t.find(x, est);
      if (!r) continue;
      any = true;
      if (r->mean_se) {
        segments.back().emplace_back(sx(x), sy(*r->mean_se));
      } else if (!segments.back().empty()) {
        segments.emplace_back();
      }
    }
    if (!any) continue;
    const std::string dash = detail::series_dash(est);
    const std::string dash_attr = dash.empty() ? "" : " stroke-dasharray=\"" + dash + "\"";
    for (const auto& seg : segments) {
      if (seg.empty()) continue;
      s << "<polyline fill=\"none\" stroke=\"" << detail::series_color(est) << "\" stroke-width=\"2\"" << dash_attr
        << " points=\"";
      for (std::size_t i = 0; i < seg.size(); ++i)
        s << (i ? " " : "") << detail::fmt(seg[i].first, 2) << ',' << detail::fmt(seg[i].second, 2);
      s << "\"/>\n";
      for (const auto& [px, py] : seg)
        s << "<circle cx=\"" << detail::fmt(px, 2) << "\" cy=\"" << detail::fmt(py, 2) << "\" r=\"3\" fill=\""
          << detail::series_color(est) << "\"/>\n";
    }
    const double ly = top + 16 + 18 * legend_row++;
    s << "<line x1=\"" << detail::fmt(left + 14, 2) << "\" y1=\"" << detail::fmt(ly, 2) << "\" x2=\""
      << detail::fmt(left + 44, 2) << "\" y2=\"" << detail::fmt(ly, 2) << "\" stroke=\"" << detail::series_color(est)
      << "\" stroke-width=\"2\"" << dash_attr << "/>\n";
    s << "<text x=\"" << detail::fmt(left + 50, 2) << "\" y=\"" << detail::fmt(ly + 4, 2) << "\">"
      << detail::xml_escape(detail::series_label(est)) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace pairmatch

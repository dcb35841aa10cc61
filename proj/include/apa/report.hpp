#pragma once

// Tabular outputs: numeric CSV tables, RunRecord streams, JSON summaries and
// SVG line plots rendered from tables. Every writer is a pure function of its
// input, so repeated runs give identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "apa/data.hpp"
#include "apa/train.hpp"

namespace apa {

/// Column-named table of doubles; NaN marks a missing value.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t index(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::out_of_range("table has no column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
  }

  std::vector<double> column(const std::string& name) const {
    const std::size_t k = index(name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[k]);
    return out;
  }

  void add_row(std::vector<double> r) {
    if (r.size() != columns.size())
      throw DimensionMismatch("table row has " + std::to_string(r.size()) + " values for " +
                              std::to_string(columns.size()) + " columns");
    rows.push_back(std::move(r));
  }
};

inline std::string format_cell(double v) { return std::isnan(v) ? "nan" : format_double(v); }

inline void write_table_csv(const Table& t, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (std::size_t k = 0; k < t.columns.size(); ++k) os << (k ? "," : "") << t.columns[k];
  os << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t k = 0; k < r.size(); ++k) os << (k ? "," : "") << format_cell(r[k]);
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Table read_table_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  Table t;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ": empty file");
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.columns.push_back(cell);
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (cell == "nan") {
        r.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cell.size() || cell.empty())
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      r.push_back(v);
    }
    if (r.size() != t.columns.size())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(t.columns.size()) + " fields");
    t.rows.push_back(std::move(r));
  }
  return t;
}

// ---------------------------------------------------------------------------
// RunRecords

/// Numeric view of a record stream: fixed columns, then every probe key in
/// sorted order. stage is coded 0 for source and 1 for adapt.
inline Table records_table(const std::vector<RunRecord>& recs) {
  std::set<std::string> probe_keys;
  for (const RunRecord& r : recs)
    for (const auto& [k, v] : r.probes) probe_keys.insert(k);
  Table t;
  t.columns = {"step", "stage", "loss_total", "loss_ce", "loss_target", "source_acc",
               "target_acc", "target_class_acc", "lr", "drift"};
  t.columns.insert(t.columns.end(), probe_keys.begin(), probe_keys.end());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const RunRecord& r : recs) {
    std::vector<double> row = {static_cast<double>(r.step),
                               r.stage == "source" ? 0.0 : 1.0,
                               r.loss_total,
                               r.loss_ce,
                               r.loss_target,
                               r.source_acc,
                               r.target_acc,
                               r.target_class_acc,
                               r.lr,
                               r.drift};
    for (const std::string& k : probe_keys) {
      auto it = r.probes.find(k);
      row.push_back(it == r.probes.end() ? nan : it->second);
    }
    t.add_row(std::move(row));
  }
  return t;
}

/// NaN-safe JSON number: NaN becomes null.
inline nlohmann::ordered_json json_number(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline void write_json(const nlohmann::ordered_json& j, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// SVG

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::string x_column;
  std::vector<std::string> y_columns;
  bool log_x = false;
  bool markers = false;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
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

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace detail

/// Line plot of y columns against an x column. NaN points break a line.
inline std::string render_svg(const Table& t, const PlotSpec& spec) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const double W = 640, H = 400, L = 70, R = 170, T = 40, B = 50;
  const auto xs_raw = t.column(spec.x_column);
  auto tx = [&](double x) { return spec.log_x ? std::log10(x) : x; };
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  std::vector<std::vector<double>> ys;
  for (const std::string& c : spec.y_columns) ys.push_back(t.column(c));
  for (std::size_t i = 0; i < xs_raw.size(); ++i) {
    if (!std::isfinite(xs_raw[i]) || (spec.log_x && !(xs_raw[i] > 0))) continue;
    bool any = false;
    for (const auto& y : ys) {
      if (!std::isfinite(y[i])) continue;
      ymin = std::min(ymin, y[i]);
      ymax = std::max(ymax, y[i]);
      any = true;
    }
    if (any) {
      xmin = std::min(xmin, tx(xs_raw[i]));
      xmax = std::max(xmax, tx(xs_raw[i]));
    }
  }
  if (!(xmin <= xmax)) xmin = 0, xmax = 1;
  if (!(ymin <= ymax)) ymin = 0, ymax = 1;
  if (xmax == xmin) xmin -= 0.5, xmax += 0.5;
  if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  auto px = [&](double x) { return L + (tx(x) - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return T + (ymax - y) / (ymax - ymin) * (H - T - B); };

  std::ostringstream os;
  using detail::svg_num;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
     << detail::svg_escape(spec.title) << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\""
     << H - T - B << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = xmin + (xmax - xmin) * k / 4.0;
    const double vx = spec.log_x ? std::pow(10.0, fx) : fx;
    const double gx = L + (W - L - R) * k / 4.0;
    os << "<text x=\"" << svg_num(gx) << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\">" << detail::tick_label(vx) << "</text>\n";
    const double vy = ymin + (ymax - ymin) * k / 4.0;
    const double gy = py(vy);
    os << "<line x1=\"" << L << "\" y1=\"" << svg_num(gy) << "\" x2=\"" << W - R << "\" y2=\""
       << svg_num(gy) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << svg_num(gy + 4) << "\" text-anchor=\"end\">"
       << detail::tick_label(vy) << "</text>\n";
  }
  os << "<text x=\"" << svg_num(L + (W - L - R) / 2) << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\">" << detail::svg_escape(spec.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << svg_num(T + (H - T - B) / 2)
     << ") rotate(-90)\" text-anchor=\"middle\">" << detail::svg_escape(spec.y_label)
     << "</text>\n";
  for (std::size_t s = 0; s < ys.size(); ++s) {
    const char* color = kColors[s % (sizeof kColors / sizeof *kColors)];
    std::string d;
    bool pen = false;
    std::ostringstream dots;
    for (std::size_t i = 0; i < xs_raw.size(); ++i) {
      const double x = xs_raw[i], y = ys[s][i];
      if (!std::isfinite(x) || !std::isfinite(y) || (spec.log_x && !(x > 0))) {
        pen = false;
        continue;
      }
      d += (pen ? " L" : (d.empty() ? "M" : " M")) + svg_num(px(x)) + ' ' + svg_num(py(y));
      pen = true;
      if (spec.markers)
        dots << "<circle cx=\"" << svg_num(px(x)) << "\" cy=\"" << svg_num(py(y))
             << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    if (!d.empty())
      os << "<path d=\"" << d << "\" fill=\"none\" stroke=\"" << color
         << "\" stroke-width=\"1.5\"/>\n";
    os << dots.str();
    const double ly = T + 14 + 18.0 * static_cast<double>(s);
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << svg_num(ly - 4) << "\" x2=\""
       << W - R + 30 << "\" y2=\"" << svg_num(ly - 4) << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 36 << "\" y=\"" << svg_num(ly) << "\">"
       << detail::svg_escape(spec.y_columns[s]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Reads the CSV back and renders it, so the plot depends on the file only.
inline void write_svg_from_csv(const std::string& csv_path, const std::string& svg_path,
                               const PlotSpec& spec) {
  const std::string svg = render_svg(read_table_csv(csv_path), spec);
  std::ofstream os(svg_path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + svg_path);
  os << svg;
}

}  // namespace apa

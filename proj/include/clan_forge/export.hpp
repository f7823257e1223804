#pragma once

// CSV and SVG writers for run records and sweeps.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "clan_forge/metrics.hpp"
#include "clan_forge/run_record.hpp"

namespace clan_forge {

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline std::vector<std::string> metrics_csv_header(std::size_t num_classes) {
  std::vector<std::string> h = {"iter", "method", "seed", "loss_seg", "loss_weight", "loss_advG", "loss_advD", "miou"};
  for (std::size_t c = 0; c < num_classes; ++c) h.push_back("iou_class_" + std::to_string(c));
  for (std::size_t c = 0; c < num_classes; ++c) h.push_back("ccd_class_" + std::to_string(c));
  h.push_back("dstat_src");
  h.push_back("dstat_tgt");
  return h;
}

/// One row per evaluation snapshot. Loss and D columns average the
/// iterations since the previous snapshot; they are empty for the initial
/// snapshot and when D was not trained.
inline std::string metrics_csv(const RunRecord& run) {
  std::ostringstream os;
  const auto header = metrics_csv_header(run.num_classes);
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  auto opt = [](const OptDouble& v) { return v ? format_double(*v) : std::string(); };
  std::size_t next = 0;
  for (const EvalSnapshot& e : run.evals) {
    double seg = 0, wd = 0, ag = 0, ad = 0, ds = 0, dt = 0;
    std::size_t n = 0, nd = 0;
    while (next < run.iterations.size() && run.iterations[next].iter < e.iter) {
      const IterationRecord& r = run.iterations[next++];
      seg += r.losses.seg;
      wd += r.losses.weight_disc;
      ag += r.losses.adv_g;
      ++n;
      if (r.has_d_stats) {
        ad += r.losses.adv_d;
        ds += r.d_src_dev;
        dt += r.d_tgt_dev;
        ++nd;
      }
    }
    auto avg = [](double s, std::size_t k) { return k ? format_double(s / static_cast<double>(k)) : std::string(); };
    os << e.iter << ',' << run.method << ',' << run.seed << ',' << avg(seg, n) << ',' << avg(wd, n) << ','
       << avg(ag, n) << ',' << avg(ad, nd) << ',' << format_double(e.miou);
    for (std::size_t c = 0; c < run.num_classes; ++c) os << ',' << (c < e.iou.size() ? opt(e.iou[c]) : "");
    for (std::size_t c = 0; c < run.num_classes; ++c) os << ',' << (c < e.ccd.size() ? opt(e.ccd[c]) : "");
    os << ',' << avg(ds, nd) << ',' << avg(dt, nd) << '\n';
  }
  return os.str();
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::out_of_range("csv: no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  OptDouble number(std::size_t row, const std::string& name) const {
    const std::string& cell = rows.at(row).at(column(name));
    if (cell.empty()) return std::nullopt;
    return parse_double(cell);
  }
};

/// Parser for the comma-separated files written here (no quoting).
inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(s);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(in, line)) throw std::invalid_argument("csv: empty input");
  t.header = split(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.header.size()) {
      throw std::invalid_argument("csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                                  " fields, expected " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

// ---------------------------------------------------------------------------
// SVG plots

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline std::string fmt_tick(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 400, L = 60, R = 170, T = 30, B = 40;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline std::string svg_open(const std::string& title, const Frame& f, const std::string& xlabel,
                            const std::string& ylabel) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\"" << Frame::H
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << Frame::W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
  const double bx = Frame::L, by = Frame::H - Frame::B, ex = Frame::W - Frame::R;
  os << "<line x1=\"" << bx << "\" y1=\"" << by << "\" x2=\"" << ex << "\" y2=\"" << by << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << bx << "\" y1=\"" << by << "\" x2=\"" << bx << "\" y2=\"" << Frame::T
     << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
    os << "<text x=\"" << bx - 4 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << fmt_tick(yv)
       << "</text>\n";
  }
  os << "<text x=\"" << (bx + ex) / 2 << "\" y=\"" << Frame::H - 8 << "\" text-anchor=\"middle\">"
     << xml_escape(xlabel) << "</text>\n";
  os << "<text x=\"14\" y=\"" << (by + Frame::T) / 2 << "\" transform=\"rotate(-90 14 " << (by + Frame::T) / 2
     << ")\" text-anchor=\"middle\">" << xml_escape(ylabel) << "</text>\n";
  return os.str();
}

inline std::string legend(const std::vector<std::string>& labels) {
  std::ostringstream os;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = Frame::T + 14.0 * static_cast<double>(i);
    os << "<rect x=\"" << Frame::W - Frame::R + 10 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
       << palette(i) << "\"/>\n<text x=\"" << Frame::W - Frame::R + 24 << "\" y=\"" << y + 9 << "\">"
       << xml_escape(labels[i]) << "</text>\n";
  }
  return os.str();
}

}  // namespace detail

/// Multi-series line chart. Non-finite points are skipped.
inline std::string line_plot_svg(const std::string& title, const std::vector<Series>& series, const std::string& xlabel,
                                 const std::string& ylabel) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const Series& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const detail::Frame f{x0, x1, y0, y1};
  std::ostringstream os;
  os << detail::svg_open(title, f, xlabel, ylabel);
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    labels.push_back(s.label);
    os << "<polyline fill=\"none\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      os << f.px(s.x[i]) << ',' << f.py(s.y[i]) << ' ';
    }
    os << "\"/>\n";
  }
  os << detail::legend(labels) << "</svg>\n";
  return os.str();
}

/// Grouped bar chart: groups along x, one bar per series within a group.
inline std::string bar_plot_svg(const std::string& title, const std::vector<std::string>& groups,
                                const std::vector<Series>& series, const std::string& ylabel) {
  double y1 = 0.0;
  for (const Series& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) y1 = std::max(y1, v);
  if (y1 == 0.0) y1 = 1.0;
  const detail::Frame f{0.0, static_cast<double>(std::max<std::size_t>(groups.size(), 1)), 0.0, y1 * 1.05};
  std::ostringstream os;
  os << detail::svg_open(title, f, "", ylabel);
  const double group_w = f.px(1.0) - f.px(0.0);
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    os << "<text x=\"" << f.px(g + 0.5) << "\" y=\"" << detail::Frame::H - detail::Frame::B + 14
       << "\" text-anchor=\"middle\">" << detail::xml_escape(groups[g]) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
      if (g >= series[k].y.size() || !std::isfinite(series[k].y[g])) continue;
      const double x = f.px(static_cast<double>(g)) + group_w * 0.1 + bar_w * static_cast<double>(k);
      const double top = f.py(series[k].y[g]);
      os << "<rect x=\"" << x << "\" y=\"" << top << "\" width=\"" << bar_w << "\" height=\"" << f.py(0.0) - top
         << "\" fill=\"" << detail::palette(k) << "\"/>\n";
    }
  }
  std::vector<std::string> labels;
  for (const Series& s : series) labels.push_back(s.label);
  os << detail::legend(labels) << "</svg>\n";
  return os.str();
}

/// Loss curves of one run, one point per iteration.
inline std::string loss_plot_svg(const RunRecord& run) {
  Series seg{"seg", {}, {}}, wd{"weight", {}, {}}, ag{"advG", {}, {}}, ad{"advD", {}, {}};
  for (const IterationRecord& r : run.iterations) {
    const double x = static_cast<double>(r.iter);
    seg.x.push_back(x), seg.y.push_back(r.losses.seg);
    wd.x.push_back(x), wd.y.push_back(r.losses.weight_disc);
    ag.x.push_back(x), ag.y.push_back(r.losses.adv_g);
    if (r.has_d_stats) ad.x.push_back(x), ad.y.push_back(r.losses.adv_d);
  }
  return line_plot_svg(run.method + " losses (seed " + std::to_string(run.seed) + ")", {seg, wd, ag, ad}, "iteration",
                       "loss");
}

/// Normalised CCD curves: one series per (run, class).
inline std::string ccd_curves_svg(const std::vector<const RunRecord*>& runs) {
  std::vector<Series> series;
  for (const RunRecord* run : runs) {
    for (std::size_t c = 0; c < run->num_classes; ++c) {
      Series s{run->method + " class " + std::to_string(c), {}, {}};
      for (const EvalSnapshot& e : run->evals) {
        if (c < e.ccd.size() && e.ccd[c]) s.x.push_back(static_cast<double>(e.iter)), s.y.push_back(*e.ccd[c]);
      }
      series.push_back(std::move(s));
    }
  }
  return line_plot_svg("normalised cluster centre distance", series, "iteration", "CCD / CCD at start");
}

/// Final normalised CCD per class, one bar per run.
inline std::string ccd_bars_svg(const std::vector<const RunRecord*>& runs) {
  std::vector<std::string> groups;
  std::size_t C = 0;
  for (const RunRecord* r : runs) C = std::max(C, r->num_classes);
  for (std::size_t c = 0; c < C; ++c) groups.push_back("class " + std::to_string(c));
  std::vector<Series> series;
  for (const RunRecord* run : runs) {
    Series s{run->method, {}, std::vector<double>(C, std::nan(""))};
    if (!run->evals.empty()) {
      const EvalSnapshot& last = run->evals.back();
      for (std::size_t c = 0; c < C && c < last.ccd.size(); ++c)
        if (last.ccd[c]) s.y[c] = *last.ccd[c];
    }
    series.push_back(std::move(s));
  }
  return bar_plot_svg("final normalised CCD per class", groups, series, "CCD / CCD at start");
}

}  // namespace clan_forge

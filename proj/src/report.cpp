#include "mdist/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace mdist {

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw Error(ErrorCode::kCorrupt, "missing CSV column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

const std::string& CsvTable::cell(std::size_t row, const std::string& name) const {
  const std::size_t c = column(name);
  if (row >= rows.size() || c >= rows[row].size())
    throw Error(ErrorCode::kCorrupt, "CSV row " + std::to_string(row) + " lacks column '" + name + "'");
  return rows[row][c];
}

double CsvTable::number(std::size_t row, const std::string& name) const {
  const std::string& s = cell(row, name);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kCorrupt, "CSV column '" + name + "' holds non-numeric '" + s + "'");
  }
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string escape(const std::string& s) {
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

std::string num(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

}  // namespace

CsvTable parse_csv(const std::string& text, const std::string& source) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      t.comments.push_back(line);
      continue;
    }
    if (!have_header) {
      t.header = split(line, ',');
      have_header = true;
    } else {
      t.rows.push_back(split(line, ','));
      if (t.rows.back().size() != t.header.size())
        throw Error(ErrorCode::kCorrupt, source + ": row " + std::to_string(t.rows.size()) + " has " +
                                             std::to_string(t.rows.back().size()) + " cells, header has " +
                                             std::to_string(t.header.size()));
    }
  }
  if (!have_header) throw Error(ErrorCode::kCorrupt, source + ": no header row");
  return t;
}

CsvTable read_csv(const std::string& path) { return parse_csv(read_file(path), path); }

std::string provenance_line(std::uint64_t config_hash, std::uint64_t seed) {
  return "# config_hash=" + hex64(config_hash) + " seed=" + std::to_string(seed);
}

bool parse_provenance(const std::string& text, std::uint64_t& config_hash, std::uint64_t& seed) {
  const std::size_t h = text.find("config_hash=");
  if (h == std::string::npos) return false;
  const std::size_t s = text.find("seed=", h);
  if (s == std::string::npos) return false;
  try {
    config_hash = std::stoull(text.substr(h + 12, 16), nullptr, 16);
    seed = std::stoull(text.substr(s + 5));
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_csv(const std::string& path, std::uint64_t config_hash, std::uint64_t seed,
               const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::string out = provenance_line(config_hash, seed) + "\n";
  auto join = [](const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) line += (i ? "," : "") + cells[i];
    return line + "\n";
  };
  out += join(header);
  for (const auto& r : rows) {
    check_dim("CSV row width", static_cast<Eigen::Index>(header.size()), static_cast<Eigen::Index>(r.size()));
    out += join(r);
  }
  write_file(path, out);
}

std::vector<std::vector<std::string>> histogram_rows(const ActionHistogram& h) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < h.size(); ++i)
    for (Eigen::Index b = 0; b < h[i].rows(); ++b)
      for (Eigen::Index a = 0; a < h[i].cols(); ++a)
        rows.push_back({std::to_string(i), std::to_string(b), std::to_string(a), fmt(h[i](b, a))});
  return rows;
}

ActionHistogram histogram_from_csv(const CsvTable& t) {
  int agents = 0, buckets = 0, actions = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    agents = std::max(agents, static_cast<int>(t.number(r, "agent")) + 1);
    buckets = std::max(buckets, static_cast<int>(t.number(r, "bucket")) + 1);
    actions = std::max(actions, static_cast<int>(t.number(r, "action")) + 1);
  }
  ActionHistogram h(agents, Mat::Zero(buckets, actions));
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    h[static_cast<int>(t.number(r, "agent"))](static_cast<int>(t.number(r, "bucket")),
                                              static_cast<int>(t.number(r, "action"))) = t.number(r, "count");
  return h;
}

std::vector<RetentionRow> retention_table(const CsvTable& eval) {
  std::optional<std::size_t> teacher, random;
  for (std::size_t r = 0; r < eval.rows.size(); ++r) {
    if (eval.cell(r, "policy") == "teacher") teacher = r;
    if (eval.cell(r, "policy") == "random") random = r;
  }
  if (!teacher) throw Error(ErrorCode::kCorrupt, "eval table has no teacher row");
  const double t_ret = eval.number(*teacher, "return_mean");
  const double t_win = eval.number(*teacher, "win_rate");
  const double r_ret = random ? eval.number(*random, "return_mean") : 0.0;
  std::vector<RetentionRow> out;
  for (std::size_t r = 0; r < eval.rows.size(); ++r) {
    RetentionRow row;
    row.condition = eval.cell(r, "policy");
    row.return_mean = eval.number(r, "return_mean");
    row.win_rate = eval.number(r, "win_rate");
    row.return_retention_pct = 100.0 * (row.return_mean - r_ret) / (t_ret - r_ret);
    row.return_ratio_pct = 100.0 * row.return_mean / t_ret;
    row.win_retention_pct =
        t_win > 0.0 ? 100.0 * row.win_rate / t_win : std::numeric_limits<double>::quiet_NaN();
    out.push_back(row);
  }
  return out;
}

std::string svg_grouped_bars(const std::string& title, const std::vector<std::string>& groups,
                             const std::vector<std::string>& series, const std::vector<std::vector<double>>& values,
                             const std::string& note) {
  const double W = 720, H = 400, left = 70, right = 20, top = 50, bottom = 70;
  double vmax = 1.0;
  for (const auto& s : values)
    for (double v : s) vmax = std::max(vmax, v);
  const double lmax = std::ceil(std::log10(vmax));
  auto y = [&](double v) {
    const double l = v > 1.0 ? std::log10(v) : 0.0;
    return top + (H - top - bottom) * (1.0 - l / lmax);
  };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape(title) << "</text>\n";
  for (int k = 0; k <= static_cast<int>(lmax); ++k) {
    const double yy = y(std::pow(10.0, k));
    o << "<line x1=\"" << left << "\" x2=\"" << W - right << "\" y1=\"" << yy << "\" y2=\"" << yy
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << yy + 4 << "\" text-anchor=\"end\" font-size=\"11\">1e" << k
      << "</text>\n";
  }
  const double gw = (W - left - right) / std::max<std::size_t>(groups.size(), 1);
  const double bw = gw * 0.8 / std::max<std::size_t>(series.size(), 1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + g * gw + gw * 0.1;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = values.at(s).at(g);
      const double yy = y(v);
      o << "<rect x=\"" << gx + s * bw << "\" y=\"" << yy << "\" width=\"" << bw * 0.9 << "\" height=\""
        << H - bottom - yy << "\" fill=\"" << kPalette[s % 6] << "\"><title>" << escape(series[s]) << " "
        << escape(groups[g]) << ": " << num(v, 10) << "</title></rect>\n";
      o << "<text x=\"" << gx + s * bw + bw * 0.45 << "\" y=\"" << yy - 3
        << "\" text-anchor=\"middle\" font-size=\"10\">" << num(v) << "</text>\n";
    }
    o << "<text x=\"" << gx + gw * 0.4 << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << escape(groups[g]) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    o << "<rect x=\"" << left + s * 110 << "\" y=\"" << H - 30 << "\" width=\"12\" height=\"12\" fill=\""
      << kPalette[s % 6] << "\"/>\n";
    o << "<text x=\"" << left + s * 110 + 16 << "\" y=\"" << H - 20 << "\" font-size=\"12\">" << escape(series[s])
      << "</text>\n";
  }
  o << "<text x=\"" << W - right << "\" y=\"" << H - 8 << "\" text-anchor=\"end\" font-size=\"10\" fill=\"#555\">"
    << escape(note) << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

std::string svg_heatmaps(const std::string& title, const std::vector<std::pair<std::string, ActionHistogram>>& maps,
                         int bucket_width) {
  const double cell = 14, pad = 30, label = 60;
  std::size_t agents = 0;
  Eigen::Index buckets = 0, actions = 0;
  for (const auto& [name, h] : maps) {
    agents = std::max(agents, h.size());
    for (const Mat& m : h) {
      buckets = std::max(buckets, m.rows());
      actions = std::max(actions, m.cols());
    }
  }
  const double pw = actions * cell + pad, ph = buckets * cell + pad + 20;
  const double W = label + agents * pw + pad, H = 50 + maps.size() * ph;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"10\" y=\"22\" font-size=\"15\">" << escape(title) << " (rows: " << bucket_width
    << "-step buckets, columns: actions)</text>\n";
  for (std::size_t m = 0; m < maps.size(); ++m) {
    const double y0 = 50 + m * ph;
    o << "<text x=\"4\" y=\"" << y0 + 14 << "\" font-size=\"12\">" << escape(maps[m].first) << "</text>\n";
    for (std::size_t i = 0; i < maps[m].second.size(); ++i) {
      const Mat& h = maps[m].second[i];
      const double x0 = label + i * pw;
      o << "<text x=\"" << x0 << "\" y=\"" << y0 + 10 << "\" font-size=\"10\">agent " << i << "</text>\n";
      for (Eigen::Index b = 0; b < h.rows(); ++b) {
        const double total = h.row(b).sum();
        for (Eigen::Index a = 0; a < h.cols(); ++a) {
          const double f = total > 0 ? h(b, a) / total : 0.0;
          const int shade = static_cast<int>(std::lround(255.0 * (1.0 - f)));
          o << "<rect x=\"" << x0 + a * cell << "\" y=\"" << y0 + 16 + b * cell << "\" width=\"" << cell
            << "\" height=\"" << cell << "\" fill=\"rgb(" << shade << "," << shade << ",255)\"><title>bucket " << b
            << " action " << a << ": " << num(f, 3) << "</title></rect>\n";
        }
      }
    }
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_curves(const std::string& title,
                       const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series,
                       const std::string& x_label) {
  const double W = 720, panel = 150, left = 70, right = 20, top = 40;
  const double H = top + series.size() * (panel + 30) + 20;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& pts = series[s].second;
    const double y0 = top + s * (panel + 30);
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& [x, yv] : pts) {
      if (!std::isfinite(yv)) continue;
      if (first) {
        xmin = xmax = x;
        ymin = ymax = yv;
        first = false;
      }
      xmin = std::min(xmin, x), xmax = std::max(xmax, x), ymin = std::min(ymin, yv), ymax = std::max(ymax, yv);
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    o << "<rect x=\"" << left << "\" y=\"" << y0 << "\" width=\"" << W - left - right << "\" height=\"" << panel
      << "\" fill=\"none\" stroke=\"#999\"/>\n";
    o << "<text x=\"" << left + 4 << "\" y=\"" << y0 + 14 << "\" font-size=\"12\">" << escape(series[s].first)
      << "</text>\n";
    o << "<text x=\"" << left - 4 << "\" y=\"" << y0 + 10 << "\" text-anchor=\"end\" font-size=\"10\">" << num(ymax)
      << "</text>\n";
    o << "<text x=\"" << left - 4 << "\" y=\"" << y0 + panel << "\" text-anchor=\"end\" font-size=\"10\">"
      << num(ymin) << "</text>\n";
    o << "<text x=\"" << W - right << "\" y=\"" << y0 + panel + 14 << "\" text-anchor=\"end\" font-size=\"10\">"
      << escape(x_label) << " " << num(xmin) << ".." << num(xmax) << "</text>\n";
    o << "<polyline fill=\"none\" stroke=\"" << kPalette[s % 6] << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, yv] : pts) {
      if (!std::isfinite(yv)) continue;
      o << left + (W - left - right) * (x - xmin) / (xmax - xmin) << ","
        << y0 + panel * (1.0 - (yv - ymin) / (ymax - ymin)) << " ";
    }
    o << "\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

namespace {

std::string with_provenance(const std::string& svg, const std::string& line) {
  const std::size_t pos = svg.find('\n');
  return svg.substr(0, pos + 1) + "<!-- " + line.substr(2) + " -->\n" + svg.substr(pos + 1);
}

std::vector<std::pair<double, double>> column_series(const CsvTable& t, const std::string& x, const std::string& y) {
  std::vector<std::pair<double, double>> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) out.emplace_back(t.number(r, x), t.number(r, y));
  return out;
}

}  // namespace

void write_report(const std::string& dir) {
  const fs::path d(dir);
  const CsvTable eval = read_csv((d / "eval.csv").string());
  std::uint64_t hash = 0, seed = 0;
  if (eval.comments.empty() || !parse_provenance(eval.comments.front(), hash, seed))
    throw Error(ErrorCode::kCorrupt, "eval.csv lacks its provenance line");
  const std::string prov = provenance_line(hash, seed);
  const fs::path out = d / "report";
  fs::create_directories(out);

  std::vector<std::vector<std::string>> rows;
  for (const RetentionRow& r : retention_table(eval))
    rows.push_back({r.condition, fmt(r.return_mean), fmt(r.win_rate), fmt(r.return_retention_pct),
                    fmt(r.return_ratio_pct), fmt(r.win_retention_pct)});
  write_csv((out / "retention.csv").string(), hash, seed,
            {"condition", "return_mean", "win_rate", "return_retention_pct", "return_ratio_pct", "win_retention_pct"},
            rows);

  const CsvTable costs = read_csv((d / "costs.csv").string());
  std::vector<std::string> series;
  std::vector<std::vector<double>> values;
  for (std::size_t r = 0; r < costs.rows.size(); ++r) {
    series.push_back(costs.cell(r, "model"));
    values.push_back({costs.number(r, "params"), costs.number(r, "flops_per_forward"),
                      costs.number(r, "flops_per_episode")});
  }
  write_file((out / "costs.svg").string(),
             with_provenance(svg_grouped_bars("Parameters and FLOPs (log scale)",
                                              {"params", "FLOPs / forward", "FLOPs / episode"}, series, values,
                                              kFlopConvention),
                             prov));

  int bucket_width = 5;
  if (fs::exists(d / "config.json")) {
    const auto cj = nlohmann::json::parse(read_file((d / "config.json").string()));
    bucket_width = cj.at("eval").value("bucket_width", 5);
  }
  std::vector<std::pair<std::string, ActionHistogram>> maps;
  for (std::size_t r = 0; r < eval.rows.size(); ++r) {
    const std::string name = eval.cell(r, "policy");
    const fs::path p = d / ("heatmap_" + name + ".csv");
    if (fs::exists(p)) maps.emplace_back(name, histogram_from_csv(read_csv(p.string())));
  }
  write_file((out / "heatmaps.svg").string(),
             with_provenance(svg_heatmaps("Action-selection frequency", maps, bucket_width), prov));

  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> curves;
  if (fs::exists(d / "teacher_metrics.csv")) {
    const CsvTable t = read_csv((d / "teacher_metrics.csv").string());
    curves.emplace_back("teacher rollout return", column_series(t, "iter", "return_mean"));
  }
  if (fs::exists(d / "distill_metrics.csv")) {
    const CsvTable t = read_csv((d / "distill_metrics.csv").string());
    curves.emplace_back("student L_total", column_series(t, "iter", "L_total"));
    curves.emplace_back("student L_KL", column_series(t, "iter", "L_KL"));
    curves.emplace_back("student eval return", column_series(t, "iter", "eval_return"));
  }
  write_file((out / "curves.svg").string(), with_provenance(svg_curves("Training curves", curves, "iter"), prov));
}

}  // namespace mdist

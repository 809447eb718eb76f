#pragma once

// File formats: person-level CSV input, equating-table and metrics CSV
// output, chain-plan JSON, and long-format plot data (with optional SVG).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "keq/core.hpp"
#include "keq/equate.hpp"
#include "keq/metrics.hpp"

namespace keq::io {

// ---------------------------------------------------------------------------
// Numbers

enum class Precision { Table, Full };

// Locale-independent formatting: two decimals for tables, shortest
// round-trip representation otherwise.
inline std::string format_number(double v, Precision p) {
    char buf[64];
    std::to_chars_result res;
    if (p == Precision::Table) {
        if (std::abs(v) < 0.005) v = 0.0;  // no "-0.00"
        res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
    } else {
        res = std::to_chars(buf, buf + sizeof buf, v);
    }
    return {buf, res.ptr};
}

inline std::optional<double> parse_double(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

inline std::optional<int> parse_int(std::string_view s) {
    auto d = parse_double(s);
    if (!d || *d != std::round(*d) || std::abs(*d) > 1e9) return std::nullopt;
    return static_cast<int>(*d);
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;  // 1-based source line of each row
    std::string source;

    std::size_t column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw InputError(source + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line, const std::string& where) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw InputError(where + ": unterminated quote");
    out.push_back(std::move(cur));
    return out;
}

// Lines starting with '#' are comments; blank lines are skipped.
inline CsvTable read_csv(std::istream& in, const std::string& source) {
    CsvTable t;
    t.source = source;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
        if (line.empty() || line.front() == '#') continue;
        const std::string where = source + ":" + std::to_string(lineno);
        auto fields = split_csv_line(line, where);
        if (!have_header) {
            t.header = std::move(fields);
            have_header = true;
            continue;
        }
        t.rows.push_back(std::move(fields));
        t.line_numbers.push_back(lineno);
    }
    if (!have_header) throw InputError(source + ": empty file");
    return t;
}

inline CsvTable read_csv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    return read_csv(in, path.string());
}

// ---------------------------------------------------------------------------
// Person-level datasets

struct DatasetSchema {
    std::string score_column = "score";
    std::vector<std::string> covariates;
    // Covariates listed here are real-valued and cut at the given thresholds;
    // all others are categorical.
    std::map<std::string, std::vector<double>> binned;
    // Fixed categorical levels; columns not listed take theirs from the data.
    std::map<std::string, std::vector<std::string>> levels;
    std::optional<ScoreScale> scale;
};

inline const std::vector<double>& default_thresholds() {
    static const std::vector<double> t{50, 60, 70, 80, 100};
    return t;
}

// Distinct values of a categorical column across tables: numeric order when
// every value is a number, lexicographic otherwise.
inline std::vector<std::string> collect_levels(const std::vector<CsvTable>& tables, const std::string& name) {
    std::set<std::string> values;
    for (const auto& t : tables) {
        const auto c = t.column(name);
        for (const auto& row : t.rows)
            if (c < row.size() && !row[c].empty()) values.insert(row[c]);
    }
    std::vector<std::string> levels(values.begin(), values.end());
    const bool numeric = std::all_of(levels.begin(), levels.end(), [](const auto& s) { return parse_double(s).has_value(); });
    if (numeric) {
        std::stable_sort(levels.begin(), levels.end(),
                         [](const auto& a, const auto& b) { return *parse_double(a) < *parse_double(b); });
    }
    return levels;
}

// Builds datasets that share one covariate space: categorical levels are the
// union of values across all tables (numeric order when every value is a
// number, lexicographic otherwise) and the score scale spans all tables
// unless given.
inline std::vector<Dataset> build_datasets(const std::vector<CsvTable>& tables, const DatasetSchema& schema) {
    for (const auto& t : tables)
        if (t.rows.empty()) throw InputError(t.source + ": no records");
    std::vector<Variable> vars;
    for (const auto& name : schema.covariates) {
        if (auto it = schema.binned.find(name); it != schema.binned.end()) {
            vars.push_back({name, Binned{it->second}});
            continue;
        }
        if (auto it = schema.levels.find(name); it != schema.levels.end()) {
            vars.push_back({name, Categorical{it->second}});
        } else {
            vars.push_back({name, Categorical{collect_levels(tables, name)}});
        }
    }
    CovariateSpace space(vars);

    std::vector<Dataset> out(tables.size());
    int lo = std::numeric_limits<int>::max();
    int hi = std::numeric_limits<int>::min();
    for (std::size_t ti = 0; ti < tables.size(); ++ti) {
        const auto& t = tables[ti];
        const auto sc = t.column(schema.score_column);
        std::vector<std::size_t> cc;
        for (const auto& name : schema.covariates) cc.push_back(t.column(name));
        auto& d = out[ti];
        d.covariates = space;
        d.records.reserve(t.rows.size());
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            const auto& row = t.rows[r];
            const std::string where = t.source + ":" + std::to_string(t.line_numbers[r]);
            if (row.size() != t.header.size()) {
                throw InputError(where + ": expected " + std::to_string(t.header.size()) + " fields, found " +
                                 std::to_string(row.size()));
            }
            for (const auto& f : row)
                if (f.empty()) throw InputError(where + ": missing value");
            PersonRecord pr;
            auto score = parse_int(row[sc]);
            if (!score) throw InputError(where + ": score '" + row[sc] + "' is not an integer");
            pr.score = *score;
            lo = std::min(lo, pr.score);
            hi = std::max(hi, pr.score);
            for (std::size_t v = 0; v < cc.size(); ++v) {
                const auto& raw = row[cc[v]];
                const auto& var = space.variables()[v];
                if (var.is_binned()) {
                    auto val = parse_double(raw);
                    if (!val || !std::isfinite(*val)) throw InputError(where + ": '" + raw + "' is not a number");
                    pr.covariates.push_back(*val);
                } else {
                    const auto& lv = std::get<Categorical>(var.kind).levels;
                    const auto it = std::find(lv.begin(), lv.end(), raw);
                    if (it == lv.end()) throw InputError(where + ": unknown level '" + raw + "' for '" + var.name + "'");
                    pr.covariates.push_back(static_cast<double>(it - lv.begin()));
                }
            }
            d.records.push_back(std::move(pr));
        }
        if (d.records.empty()) throw InputError(t.source + ": no records");
    }
    const ScoreScale scale = schema.scale ? *schema.scale : ScoreScale(lo, hi);
    for (std::size_t ti = 0; ti < out.size(); ++ti) {
        out[ti].scale = scale;
        for (std::size_t r = 0; r < out[ti].records.size(); ++r) {
            if (!scale.contains(out[ti].records[r].score)) {
                throw InputError(tables[ti].source + ":" + std::to_string(tables[ti].line_numbers[r]) + ": score " +
                                 std::to_string(out[ti].records[r].score) + " outside scale");
            }
        }
    }
    return out;
}

inline void write_person_csv(std::ostream& os, const Dataset& d) {
    os << "score";
    for (const auto& v : d.covariates.variables()) os << ',' << v.name;
    os << '\n';
    for (const auto& r : d.records) {
        os << r.score;
        for (std::size_t v = 0; v < r.covariates.size(); ++v) {
            const auto& var = d.covariates.variables()[v];
            os << ',';
            if (var.is_binned()) os << format_number(r.covariates[v], Precision::Full);
            else os << std::get<Categorical>(var.kind).levels.at(static_cast<std::size_t>(r.covariates[v]));
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Equating tables: score,equated,see,method

inline void write_equating_table(std::ostream& os, const EquatingTable& t, Precision p,
                                 const std::vector<std::string>& comments = {}) {
    for (const auto& c : comments) os << "# " << c << '\n';
    os << "score,equated,see,method\n";
    for (std::size_t j = 0; j < t.rows.size(); ++j) {
        const auto& row = t.rows[j];
        os << t.source_scale.min() + static_cast<int>(j) << ',' << format_number(row.equated, p) << ',';
        if (row.see) os << format_number(*row.see, p);
        os << ',' << method_name(t.method) << '\n';
    }
}

inline EquatingTable parse_equating_table(std::istream& in, const std::string& source = "<table>") {
    const CsvTable csv = read_csv(in, source);
    const auto cs = csv.column("score"), ce = csv.column("equated"), cv = csv.column("see"), cm = csv.column("method");
    if (csv.rows.empty()) throw InputError(source + ": no rows");
    EquatingTable t;
    std::optional<int> first;
    int prev = 0;
    for (std::size_t r = 0; r < csv.rows.size(); ++r) {
        const auto& row = csv.rows[r];
        const std::string where = source + ":" + std::to_string(csv.line_numbers[r]);
        if (row.size() != csv.header.size()) throw InputError(where + ": wrong number of fields");
        auto score = parse_int(row[cs]);
        auto eq = parse_double(row[ce]);
        if (!score || !eq) throw InputError(where + ": malformed number");
        if (first && *score != prev + 1) throw InputError(where + ": score points must be consecutive");
        if (!first) first = *score;
        prev = *score;
        EquatingRow er{*eq, std::nullopt};
        if (!row[cv].empty()) {
            auto see = parse_double(row[cv]);
            if (!see) throw InputError(where + ": malformed SEE");
            er.see = *see;
        }
        t.method = parse_method(row[cm]);
        t.rows.push_back(er);
    }
    t.source_scale = ScoreScale(*first, prev);
    return t;
}

// ---------------------------------------------------------------------------
// Metrics reports: score,method,bias,see,rmse + summary footer rows

inline void write_metrics_report(std::ostream& os, const MetricsReport& rep, Precision p) {
    os << "# truth: " << rep.truth_description << '\n';
    os << "# replications: " << rep.replications << " (failed " << rep.failed_replications << ")\n";
    os << "score,method,bias,see,rmse\n";
    for (const auto& m : rep.methods) {
        for (std::size_t s = 0; s < m.bias.size(); ++s) {
            os << rep.scale.min() + static_cast<int>(s) << ',' << method_name(m.method) << ','
               << format_number(m.bias[s], p) << ',' << format_number(m.see[s], p) << ','
               << format_number(m.rmse[s], p) << '\n';
        }
    }
    if (rep.ediff) {
        os << "mean_ediff," << format_number(rep.ediff->mean, Precision::Full) << '\n';
        os << "dtm_exceed," << format_number(rep.ediff->dtm_exceed_fraction, Precision::Full) << '\n';
    }
    for (const auto& [m, v] : rep.mean_tvd) {
        os << "mean_tvd_" << (m == Method::SequentialGke ? "sequential_gke" : "gke") << ','
           << format_number(v, Precision::Full) << '\n';
    }
}

struct ParsedMetrics {
    // method name -> per-score (score, bias, see, rmse)
    std::map<std::string, std::vector<std::array<double, 4>>> rows;
    std::map<std::string, double> summary;
};

inline ParsedMetrics parse_metrics_report(std::istream& in, const std::string& source = "<metrics>") {
    const CsvTable csv = read_csv(in, source);
    const auto cs = csv.column("score"), cm = csv.column("method"), cb = csv.column("bias"), cv = csv.column("see"),
               cr = csv.column("rmse");
    ParsedMetrics out;
    for (std::size_t r = 0; r < csv.rows.size(); ++r) {
        const auto& row = csv.rows[r];
        const std::string where = source + ":" + std::to_string(csv.line_numbers[r]);
        if (row.size() == 2) {
            auto v = parse_double(row[1]);
            if (!v) throw InputError(where + ": malformed summary value");
            out.summary[row[0]] = *v;
            continue;
        }
        if (row.size() != csv.header.size()) throw InputError(where + ": wrong number of fields");
        auto s = parse_double(row[cs]), b = parse_double(row[cb]), e = parse_double(row[cv]), m = parse_double(row[cr]);
        if (!s || !b || !e || !m) throw InputError(where + ": malformed number");
        out.rows[row[cm]].push_back({*s, *b, *e, *m});
    }
    if (out.rows.empty()) throw InputError(source + ": no metric rows");
    return out;
}

// score x replicate grid of bootstrap or Monte-Carlo replicates.
inline void write_replicates(std::ostream& os, const ScoreScale& scale, const ReplicateMatrix& reps,
                             const std::vector<int>& ids) {
    os << "score";
    for (Eigen::Index r = 0; r < reps.rows(); ++r) {
        os << ",r" << (static_cast<std::size_t>(r) < ids.size() ? ids[static_cast<std::size_t>(r)] : static_cast<int>(r));
    }
    os << '\n';
    for (Eigen::Index s = 0; s < reps.cols(); ++s) {
        os << scale.min() + static_cast<int>(s);
        for (Eigen::Index r = 0; r < reps.rows(); ++r) os << ',' << format_number(reps(r, s), Precision::Full);
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Chain plans (JSON)
//
// {
//   "binned": {"nl": [50, 60, 70, 80, 100]},
//   "forms": {
//     "NL_F2017": {"path": "fall2017.csv", "score": "nl", "scale": [0, 50]},
//     "EL_F2017": {"path": "fall2017.csv", "score": "el",
//                  "covariate_forms": {"nl": "NL_F2017"}}
//   },
//   "steps": [
//     {"source": "NL_F2017", "target": "NL_S2017", "design": "NEC",
//      "covariates": ["school", "attempt"]},
//     {"source": "EL_F2017", "target": "EL_S2017", "design": "NEC",
//      "covariates": ["school", "attempt", "nl"], "equated_covariates": ["nl"]}
//   ]
// }
//
// Relative paths resolve against the plan file's directory.

struct FormSource {
    std::filesystem::path path;
    std::string score_column = "score";
    std::optional<ScoreScale> scale;
};

struct ChainConfig {
    ChainPlan plan;
    std::map<std::string, FormSource> forms;
    std::map<std::string, std::vector<double>> binned;
};

inline ChainConfig parse_chain_config(std::istream& in, const std::filesystem::path& base_dir = {}) {
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("chain plan: ") + e.what());
    }
    ChainConfig cfg;
    try {
        if (j.contains("binned")) {
            for (auto& [name, th] : j.at("binned").items()) cfg.binned[name] = th.get<std::vector<double>>();
        }
        if (j.contains("forms")) {
            for (auto& [id, f] : j.at("forms").items()) {
                FormSource fs;
                fs.path = f.at("path").get<std::string>();
                if (fs.path.is_relative() && !base_dir.empty()) fs.path = base_dir / fs.path;
                fs.score_column = f.value("score", std::string("score"));
                if (f.contains("scale")) {
                    auto s = f.at("scale").get<std::vector<int>>();
                    if (s.size() != 2) throw InputError("chain plan: form '" + id + "' scale must be [min, max]");
                    fs.scale = ScoreScale(s[0], s[1]);
                }
                if (f.contains("covariate_forms")) {
                    for (auto& [col, form] : f.at("covariate_forms").items())
                        cfg.plan.covariate_forms[id][col] = form.get<std::string>();
                }
                cfg.forms.emplace(id, std::move(fs));
            }
        }
        for (const auto& s : j.at("steps")) {
            ChainStep st;
            st.source = s.at("source").get<std::string>();
            st.target = s.at("target").get<std::string>();
            const auto design = s.value("design", std::string("EG"));
            if (design == "EG" || design == "eg") st.design = Design::Eg;
            else if (design == "NEC" || design == "nec") st.design = Design::Nec;
            else throw InputError("chain plan: unknown design '" + design + "'");
            st.covariates = s.value("covariates", std::vector<std::string>{});
            st.equated_covariates = s.value("equated_covariates", std::vector<std::string>{});
            cfg.plan.steps.push_back(std::move(st));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("chain plan: ") + e.what());
    }
    if (cfg.plan.steps.empty()) throw InputError("chain plan: no steps");
    return cfg;
}

// ---------------------------------------------------------------------------
// Plot data: x,series,value,panel

struct PlotPoint {
    double x;
    std::string series;
    double value;
    std::string panel;
};

inline void write_plot_data(std::ostream& os, const std::vector<PlotPoint>& pts) {
    os << "x,series,value,panel\n";
    for (const auto& p : pts) {
        os << format_number(p.x, Precision::Full) << ',' << p.series << ',' << format_number(p.value, Precision::Full)
           << ',' << p.panel << '\n';
    }
}

inline void metrics_plot_points(const ParsedMetrics& m, std::vector<PlotPoint>& out, const std::string& prefix = "") {
    static const char* panels[] = {"bias", "see", "rmse"};
    for (int k = 0; k < 3; ++k) {
        for (const auto& [method, rows] : m.rows) {
            for (const auto& r : rows) out.push_back({r[0], prefix + method, r[static_cast<std::size_t>(k + 1)], panels[k]});
        }
    }
}

// Equated scores with SEE bands, an identity reference, SEE curves, and the
// absolute difference of each table from the first.
inline void table_plot_points(const std::vector<std::pair<std::string, EquatingTable>>& tables, std::vector<PlotPoint>& out) {
    if (tables.empty()) return;
    const auto& scale0 = tables.front().second.source_scale;
    for (std::size_t j = 0; j < scale0.size(); ++j) out.push_back({scale0.point(j), "identity", scale0.point(j), "equated"});
    for (const auto& [label, t] : tables) {
        for (std::size_t j = 0; j < t.rows.size(); ++j) {
            const double x = t.source_scale.point(j);
            const auto& r = t.rows[j];
            out.push_back({x, label, r.equated, "equated"});
            if (r.see) {
                out.push_back({x, label + " - SEE", r.equated - *r.see, "equated"});
                out.push_back({x, label + " + SEE", r.equated + *r.see, "equated"});
            }
        }
        for (std::size_t j = 0; j < t.rows.size(); ++j)
            if (t.rows[j].see) out.push_back({t.source_scale.point(j), label, *t.rows[j].see, "see"});
    }
    const auto& [label0, t0] = tables.front();
    for (std::size_t k = 1; k < tables.size(); ++k) {
        const auto& [label, t] = tables[k];
        if (!(t.source_scale == t0.source_scale)) continue;
        for (std::size_t j = 0; j < t.rows.size(); ++j) {
            out.push_back({t.source_scale.point(j), label + " vs " + label0, std::abs(t.rows[j].equated - t0.rows[j].equated),
                           "difference"});
        }
    }
}

// Minimal static line chart of one panel.
inline void write_svg(std::ostream& os, const std::vector<PlotPoint>& pts, const std::string& panel) {
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& p : pts) {
        if (p.panel != panel) continue;
        series[p.series].emplace_back(p.x, p.value);
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
        ymin = std::min(ymin, p.value);
        ymax = std::max(ymax, p.value);
    }
    const double W = 640, H = 400, L = 60, R = 160, T = 30, B = 40;
    if (series.empty()) throw InputError("no data for panel '" + panel + "'");
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
    static const char* colors[] = {"#1f3a93", "#7b2d8e", "#222222", "#c0392b", "#16a085", "#d35400", "#7f8c8d", "#2c3e50"};
    auto num = [](double v) { return format_number(v, Precision::Table); };
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
       << "\" fill=\"none\" stroke=\"#000\"/>\n";
    os << "<text x=\"" << L << "\" y=\"20\" font-size=\"14\">" << panel << "</text>\n";
    os << "<text x=\"" << L << "\" y=\"" << H - 10 << "\" font-size=\"11\">" << num(xmin) << "</text>\n";
    os << "<text x=\"" << W - R - 30 << "\" y=\"" << H - 10 << "\" font-size=\"11\">" << num(xmax) << "</text>\n";
    os << "<text x=\"5\" y=\"" << H - B << "\" font-size=\"11\">" << num(ymin) << "</text>\n";
    os << "<text x=\"5\" y=\"" << T + 10 << "\" font-size=\"11\">" << num(ymax) << "</text>\n";
    std::size_t k = 0;
    for (const auto& [name, xy] : series) {
        const char* color = colors[k % 8];
        const bool dashed = name.find("SEE") != std::string::npos || name == "identity";
        os << "<polyline fill=\"none\" stroke=\"" << (dashed ? "#999999" : color) << "\"" << (dashed ? " stroke-dasharray=\"4 3\"" : "")
           << " points=\"";
        for (const auto& [x, y] : xy) os << num(sx(x)) << ',' << num(sy(y)) << ' ';
        os << "\"/>\n";
        os << "<text x=\"" << W - R + 8 << "\" y=\"" << T + 14 * (k + 1) << "\" font-size=\"11\" fill=\"" << color << "\">" << name
           << "</text>\n";
        ++k;
    }
    os << "</svg>\n";
}

}  // namespace keq::io

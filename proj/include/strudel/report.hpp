#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "strudel/error.hpp"
#include "strudel/experiment.hpp"
#include "strudel/io.hpp"
#include "strudel/metrics.hpp"

namespace strudel::report {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::array<const char*, 5> metric_names = {"dsc", "h95", "lavd", "recall", "f1"};
inline constexpr std::array<const char*, 5> metric_titles = {"DSC", "H95", "lAVD", "Recall", "F1"};

struct SampleRow {
    std::string id;
    std::array<double, 5> values{};
};

/// Everything the report needs from one run directory.
struct RunData {
    fs::path dir;
    std::string method;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<SampleRow> rows;
    std::optional<double> base_dsc;
    std::vector<double> iteration_dsc;  ///< target DSC after iterations 1..K

    double mean_dsc() const {
        double s = 0.0;
        for (const auto& r : rows) s += r.values[0];
        return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
    }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    return out;
}

inline double parse_number(const std::string& s, const std::string& where) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw ReportError("report", where + ": '" + s + "' is not a number");
    return v;
}

}  // namespace detail

inline std::vector<SampleRow> parse_metrics_csv(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "sample_id,dsc,h95,lavd,recall,f1")
        throw ReportError("report", origin + ": unexpected header");
    std::vector<SampleRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.rfind("summary,", 0) == 0) continue;
        const auto cells = detail::split_csv(line);
        const std::string where = origin + ":" + std::to_string(lineno);
        if (cells.size() != 6) throw ReportError("report", where + ": expected 6 columns");
        SampleRow r;
        r.id = cells[0];
        for (std::size_t c = 0; c < 5; ++c) r.values[c] = detail::parse_number(cells[c + 1], where);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw ReportError("report", origin + ": no sample rows");
    return rows;
}

inline RunData load_run(const fs::path& dir) {
    const std::string name = "run '" + dir.string() + "'";
    const fs::path csv = dir / experiment::metrics_name;
    if (!fs::exists(csv)) throw ReportError("report", name + " has no " + experiment::metrics_name);
    const fs::path cfg = dir / experiment::config_name;
    if (!fs::exists(cfg)) throw ReportError("report", name + " has no " + experiment::config_name);
    RunData r;
    r.dir = dir;
    r.rows = parse_metrics_csv(io::read_file(csv), csv.string());
    try {
        const auto c = json::parse(io::read_file(cfg));
        r.method = c.at("method").get<std::string>();
        r.seed = c.at("seed").get<std::uint64_t>();
        r.config_hash = c.at("config_hash").get<std::string>();
        const fs::path hist = dir / experiment::history_name;
        if (fs::exists(hist)) {
            const auto h = json::parse(io::read_file(hist));
            if (h.contains("base_dsc") && !h.at("base_dsc").is_null()) r.base_dsc = h.at("base_dsc").get<double>();
            for (const auto& it : h.at("iterations"))
                if (!it.at("target_dsc").is_null()) r.iteration_dsc.push_back(it.at("target_dsc").get<double>());
        }
    } catch (const json::exception& e) {
        throw ReportError("report", name + ": " + e.what());
    }
    return r;
}

struct MethodSummary {
    std::string method;
    std::vector<const RunData*> runs;
    std::array<metrics::MeanStd, 5> stats{};
};

struct PairTest {
    std::string a, b;
    std::string pairing;  ///< "sample" (per-sample DSC, averaged over seeds) or "seed" (per-run mean DSC)
    std::size_t n = 0;
    double mean_difference = 0.0;
    double p_two_sided = std::numeric_limits<double>::quiet_NaN();
    double p_greater = std::numeric_limits<double>::quiet_NaN();  ///< alternative: a > b
    std::string note;
};

/// Method summaries point into `runs`, so a report moves but never copies.
struct Report {
    Report() = default;
    Report(Report&&) = default;
    Report& operator=(Report&&) = default;
    Report(const Report&) = delete;
    Report& operator=(const Report&) = delete;

    std::vector<RunData> runs;
    std::vector<MethodSummary> methods;
    std::vector<PairTest> tests;
};

namespace detail {

inline int method_rank(const std::string& m) {
    for (std::size_t i = 0; i < experiment::all_methods.size(); ++i)
        if (m == experiment::to_string(experiment::all_methods[i])) return static_cast<int>(i);
    return static_cast<int>(experiment::all_methods.size());
}

inline PairTest compare(const MethodSummary& a, const MethodSummary& b, bool by_seed) {
    PairTest t;
    t.a = a.method;
    t.b = b.method;
    t.pairing = by_seed ? "seed" : "sample";
    std::vector<double> xa, xb;
    if (by_seed) {
        std::map<std::uint64_t, double> sb;
        for (const auto* r : b.runs) sb[r->seed] = r->mean_dsc();
        for (const auto* r : a.runs)
            if (auto it = sb.find(r->seed); it != sb.end()) {
                xa.push_back(r->mean_dsc());
                xb.push_back(it->second);
            }
    } else {
        auto per_sample = [](const MethodSummary& m) {
            std::map<std::string, std::pair<double, int>> acc;
            for (const auto* r : m.runs)
                for (const auto& row : r->rows) {
                    acc[row.id].first += row.values[0];
                    ++acc[row.id].second;
                }
            std::map<std::string, double> out;
            for (const auto& [id, v] : acc) out[id] = v.first / v.second;
            return out;
        };
        const auto sa = per_sample(a), sb = per_sample(b);
        for (const auto& [id, v] : sa)
            if (auto it = sb.find(id); it != sb.end()) {
                xa.push_back(v);
                xb.push_back(it->second);
            }
    }
    t.n = xa.size();
    for (std::size_t i = 0; i < xa.size(); ++i) t.mean_difference += (xa[i] - xb[i]) / static_cast<double>(xa.size());
    try {
        t.p_two_sided = metrics::wilcoxon_signed_rank(xa, xb, metrics::Alternative::two_sided).p_value;
        t.p_greater = metrics::wilcoxon_signed_rank(xa, xb, metrics::Alternative::greater).p_value;
    } catch (const Error& e) {
        t.note = e.what();
    }
    return t;
}

}  // namespace detail

/// Groups runs by method and runs the paired tests: STRUDEL against every
/// other method, and self-training against the base model.
inline Report build_report(std::vector<RunData> runs) {
    if (runs.empty()) throw ReportError("report", "no runs given");
    Report rep;
    rep.runs = std::move(runs);
    std::map<std::string, MethodSummary> by_method;
    for (const auto& r : rep.runs) {
        auto& m = by_method[r.method];
        m.method = r.method;
        m.runs.push_back(&r);
    }
    for (auto& [name, m] : by_method) {
        std::sort(m.runs.begin(), m.runs.end(), [](const RunData* x, const RunData* y) { return x->seed < y->seed; });
        for (std::size_t c = 0; c < 5; ++c) {
            std::vector<double> v;
            for (const auto* r : m.runs)
                for (const auto& row : r->rows) v.push_back(row.values[c]);
            m.stats[c] = metrics::mean_std(v);
        }
        rep.methods.push_back(m);
    }
    std::sort(rep.methods.begin(), rep.methods.end(), [](const MethodSummary& x, const MethodSummary& y) {
        const int a = detail::method_rank(x.method), b = detail::method_rank(y.method);
        return a != b ? a < b : x.method < y.method;
    });
    auto find = [&](const std::string& n) -> const MethodSummary* {
        for (const auto& m : rep.methods)
            if (m.method == n) return &m;
        return nullptr;
    };
    std::vector<std::pair<const MethodSummary*, const MethodSummary*>> pairs;
    if (const auto* s = find("strudel"))
        for (const auto& m : rep.methods)
            if (m.method != "strudel") pairs.emplace_back(s, &m);
    if (const auto* st = find("selftrain"))
        if (const auto* b = find("base")) pairs.emplace_back(st, b);
    for (const auto& [a, b] : pairs) {
        rep.tests.push_back(detail::compare(*a, *b, false));
        rep.tests.push_back(detail::compare(*a, *b, true));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Figures

namespace detail {

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"};
    return colors[i % 8];
}

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

/// Linear-interpolation quantile of sorted values.
inline double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Axis {
    double lo, hi;
    double top, bottom;
    double y(double v) const { return bottom - (v - lo) / (hi - lo) * (bottom - top); }
};

inline std::string y_axis(const Axis& ax, double left, double right, double step, const std::string& label) {
    std::string s;
    for (double v = ax.lo; v <= ax.hi + 1e-9; v += step) {
        const double y = ax.y(v);
        s += "<line x1=\"" + fmt("%.1f", left) + "\" x2=\"" + fmt("%.1f", right) + "\" y1=\"" + fmt("%.1f", y) + "\" y2=\"" +
             fmt("%.1f", y) + "\" stroke=\"#ddd\"/>\n";
        s += "<text x=\"" + fmt("%.1f", left - 6) + "\" y=\"" + fmt("%.1f", y + 4) + "\" text-anchor=\"end\">" + fmt("%.2f", v) +
             "</text>\n";
    }
    s += "<text transform=\"translate(16," + fmt("%.1f", (ax.top + ax.bottom) / 2) +
         ") rotate(-90)\" text-anchor=\"middle\">" + label + "</text>\n";
    return s;
}

inline std::string svg_open(double w, double h, const std::string& title) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt("%.0f", w) + "\" height=\"" + fmt("%.0f", h) +
           "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
           "<text x=\"" + fmt("%.0f", w / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + xml_escape(title) +
           "</text>\n";
}

}  // namespace detail

/// Per-method DSC boxplot over every evaluated sample of every run, with
/// each run's mean drawn as a diamond.
inline std::string boxplot_svg(const Report& rep) {
    using namespace detail;
    const double left = 60, col = 110, top = 40, bottom = 340;
    const double width = left + col * static_cast<double>(rep.methods.size()) + 20, height = 390;
    const Axis ax{0.0, 1.0, top, bottom};
    std::string s = svg_open(width, height, "Target DSC per method");
    s += y_axis(ax, left, width - 20, 0.1, "DSC");
    for (std::size_t i = 0; i < rep.methods.size(); ++i) {
        const auto& m = rep.methods[i];
        std::vector<double> v;
        for (const auto* r : m.runs)
            for (const auto& row : r->rows) v.push_back(row.values[0]);
        std::sort(v.begin(), v.end());
        const double cx = left + col * (static_cast<double>(i) + 0.5), half = col * 0.3;
        const double q1 = quantile(v, 0.25), med = quantile(v, 0.5), q3 = quantile(v, 0.75), iqr = q3 - q1;
        double wlo = q3, whi = q1;
        for (double x : v) {
            if (x >= q1 - 1.5 * iqr) wlo = std::min(wlo, x);
            if (x <= q3 + 1.5 * iqr) whi = std::max(whi, x);
        }
        const char* c = palette(i);
        auto line = [&](double x1, double y1, double x2, double y2) {
            s += "<line x1=\"" + fmt("%.1f", x1) + "\" y1=\"" + fmt("%.1f", y1) + "\" x2=\"" + fmt("%.1f", x2) + "\" y2=\"" +
                 fmt("%.1f", y2) + "\" stroke=\"black\"/>\n";
        };
        line(cx, ax.y(wlo), cx, ax.y(q1));
        line(cx, ax.y(q3), cx, ax.y(whi));
        line(cx - half / 2, ax.y(wlo), cx + half / 2, ax.y(wlo));
        line(cx - half / 2, ax.y(whi), cx + half / 2, ax.y(whi));
        s += "<rect x=\"" + fmt("%.1f", cx - half) + "\" y=\"" + fmt("%.1f", ax.y(q3)) + "\" width=\"" + fmt("%.1f", 2 * half) +
             "\" height=\"" + fmt("%.1f", ax.y(q1) - ax.y(q3)) + "\" fill=\"" + c + "\" fill-opacity=\"0.5\" stroke=\"black\"/>\n";
        line(cx - half, ax.y(med), cx + half, ax.y(med));
        for (double x : v)
            if (x < wlo || x > whi)
                s += "<circle cx=\"" + fmt("%.1f", cx) + "\" cy=\"" + fmt("%.1f", ax.y(x)) + "\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>\n";
        for (std::size_t j = 0; j < m.runs.size(); ++j) {
            const double dx = m.runs.size() > 1 ? -half + 2 * half * static_cast<double>(j) / static_cast<double>(m.runs.size() - 1) : 0.0;
            const double px = cx + dx * 0.8, py = ax.y(m.runs[j]->mean_dsc());
            s += "<path d=\"M" + fmt("%.1f", px) + "," + fmt("%.1f", py - 4) + " l4,4 l-4,4 l-4,-4 z\" fill=\"black\"><title>seed " +
                 std::to_string(m.runs[j]->seed) + "</title></path>\n";
        }
        s += "<text x=\"" + fmt("%.1f", cx) + "\" y=\"" + fmt("%.1f", bottom + 18) + "\" text-anchor=\"middle\">" +
             xml_escape(m.method) + "</text>\n";
        s += "<text x=\"" + fmt("%.1f", cx) + "\" y=\"" + fmt("%.1f", bottom + 34) + "\" text-anchor=\"middle\" fill=\"#555\">n=" +
             std::to_string(v.size()) + ", runs=" + std::to_string(m.runs.size()) + "</text>\n";
    }
    return s + "</svg>\n";
}

/// Target DSC against iteration for every run with iteration records;
/// iteration 0 is the base model.
inline std::string iteration_svg(const Report& rep) {
    using namespace detail;
    std::size_t max_k = 1;
    double lo = 1.0, hi = 0.0;
    for (const auto& r : rep.runs) {
        max_k = std::max(max_k, r.iteration_dsc.size());
        for (double v : r.iteration_dsc) lo = std::min(lo, v), hi = std::max(hi, v);
        if (r.base_dsc && !r.iteration_dsc.empty()) lo = std::min(lo, *r.base_dsc), hi = std::max(hi, *r.base_dsc);
    }
    if (lo > hi) lo = 0.0, hi = 1.0;
    lo = std::max(0.0, std::floor(lo * 20 - 1) / 20);
    hi = std::min(1.0, std::ceil(hi * 20 + 1) / 20);
    const double left = 60, right = 520, top = 40, bottom = 340, width = 680, height = 390;
    const Axis ax{lo, hi, top, bottom};
    auto x_of = [&](double k) { return left + k / static_cast<double>(max_k) * (right - left); };
    std::string s = svg_open(width, height, "Target DSC over iterations");
    s += y_axis(ax, left, right, 0.05, "DSC");
    for (std::size_t k = 0; k <= max_k; ++k)
        s += "<text x=\"" + fmt("%.1f", x_of(static_cast<double>(k))) + "\" y=\"" + fmt("%.1f", bottom + 18) +
             "\" text-anchor=\"middle\">" + std::to_string(k) + "</text>\n";
    s += "<text x=\"" + fmt("%.1f", (left + right) / 2) + "\" y=\"" + fmt("%.1f", bottom + 38) +
         "\" text-anchor=\"middle\">iteration (0 = base model)</text>\n";
    double legend_y = top + 10;
    for (std::size_t i = 0; i < rep.methods.size(); ++i) {
        const auto& m = rep.methods[i];
        bool any = false;
        for (const auto* r : m.runs) {
            if (r->iteration_dsc.empty()) continue;
            any = true;
            std::vector<std::pair<double, double>> pts;
            if (r->base_dsc) pts.emplace_back(0.0, *r->base_dsc);
            for (std::size_t k = 0; k < r->iteration_dsc.size(); ++k) pts.emplace_back(static_cast<double>(k + 1), r->iteration_dsc[k]);
            std::string d;
            for (const auto& [k, v] : pts) d += (d.empty() ? "M" : " L") + fmt("%.1f", x_of(k)) + "," + fmt("%.1f", ax.y(v));
            s += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + palette(i) + "\" stroke-width=\"1.5\"><title>" +
                 xml_escape(m.method) + " seed " + std::to_string(r->seed) + "</title></path>\n";
            for (const auto& [k, v] : pts)
                s += "<circle cx=\"" + fmt("%.1f", x_of(k)) + "\" cy=\"" + fmt("%.1f", ax.y(v)) + "\" r=\"2.5\" fill=\"" +
                     palette(i) + "\"/>\n";
        }
        if (!any) continue;
        s += "<rect x=\"540\" y=\"" + fmt("%.1f", legend_y - 9) + "\" width=\"12\" height=\"12\" fill=\"" + palette(i) + "\"/>\n";
        s += "<text x=\"558\" y=\"" + fmt("%.1f", legend_y + 1) + "\">" + xml_escape(m.method) + "</text>\n";
        legend_y += 18;
    }
    return s + "</svg>\n";
}

// ---------------------------------------------------------------------------
// Tables

inline std::string summary_csv(const Report& rep) {
    std::string out = "method,runs,samples";
    for (const char* n : metric_names) out += std::string(",") + n + "_mean," + n + "_std";
    out += "\n";
    for (const auto& m : rep.methods) {
        out += m.method + "," + std::to_string(m.runs.size()) + "," + std::to_string(m.stats[0].n);
        for (const auto& st : m.stats) out += "," + detail::fmt("%.10g", st.mean) + "," + detail::fmt("%.10g", st.std);
        out += "\n";
    }
    return out;
}

inline std::string wilcoxon_csv(const Report& rep) {
    std::string out = "a,b,pairing,n,mean_difference,p_two_sided,p_a_greater,note\n";
    for (const auto& t : rep.tests)
        out += t.a + "," + t.b + "," + t.pairing + "," + std::to_string(t.n) + "," + detail::fmt("%.10g", t.mean_difference) + "," +
               detail::fmt("%.10g", t.p_two_sided) + "," + detail::fmt("%.10g", t.p_greater) + "," + t.note + "\n";
    return out;
}

inline std::string summary_markdown(const Report& rep) {
    std::string s = "# Experiment report\n\n## Summary (mean ± std over evaluated target samples)\n\n| Method | Runs |";
    for (const char* t : metric_titles) s += std::string(" ") + t + " |";
    s += "\n|---|---|";
    for (std::size_t i = 0; i < metric_titles.size(); ++i) s += "---|";
    s += "\n";
    for (const auto& m : rep.methods) {
        s += "| " + m.method + " | " + std::to_string(m.runs.size()) + " |";
        for (const auto& st : m.stats) s += " " + detail::fmt("%.3f", st.mean) + " ± " + detail::fmt("%.3f", st.std) + " |";
        s += "\n";
    }
    s += "\n## Per-run mean DSC\n\n| Run | Method | Seed | Base DSC | Final DSC |\n|---|---|---|---|---|\n";
    for (const auto& r : rep.runs)
        s += "| " + r.dir.filename().string() + " | " + r.method + " | " + std::to_string(r.seed) + " | " +
             (r.base_dsc ? detail::fmt("%.4f", *r.base_dsc) : "") + " | " + detail::fmt("%.4f", r.mean_dsc()) + " |\n";
    s += "\n## Wilcoxon signed-rank tests on DSC\n\n"
         "`sample` pairs per-sample DSC (averaged over seeds); `seed` pairs per-run mean DSC.\n\n"
         "| A | B | Pairing | n | mean(A − B) | p two-sided | p (A > B) |\n|---|---|---|---|---|---|---|\n";
    for (const auto& t : rep.tests) {
        s += "| " + t.a + " | " + t.b + " | " + t.pairing + " | " + std::to_string(t.n) + " | " + detail::fmt("%+.4f", t.mean_difference) + " | ";
        if (t.note.empty()) s += detail::fmt("%.4g", t.p_two_sided) + " | " + detail::fmt("%.4g", t.p_greater) + " |\n";
        else s += "n/a | n/a (" + t.note + ") |\n";
    }
    s += "\n## Figures\n\n![DSC boxplot](dsc_boxplot.svg)\n\n![DSC over iterations](dsc_iterations.svg)\n"
         "\n## Provenance\n\n| Run directory | Method | Seed | Config hash |\n|---|---|---|---|\n";
    for (const auto& r : rep.runs)
        s += "| " + r.dir.string() + " | " + r.method + " | " + std::to_string(r.seed) + " | `" + r.config_hash + "` |\n";
    return s;
}

/// Loads the runs and writes summary.md, summary.csv, wilcoxon.csv and the
/// two SVG figures into `out`.
inline Report write_report(const std::vector<fs::path>& run_dirs, const fs::path& out) {
    std::vector<RunData> runs;
    for (const auto& d : run_dirs) runs.push_back(load_run(d));
    auto rep = build_report(std::move(runs));
    fs::create_directories(out);
    io::write_file(out / "summary.md", summary_markdown(rep));
    io::write_file(out / "summary.csv", summary_csv(rep));
    io::write_file(out / "wilcoxon.csv", wilcoxon_csv(rep));
    io::write_file(out / "dsc_boxplot.svg", boxplot_svg(rep));
    io::write_file(out / "dsc_iterations.svg", iteration_svg(rep));
    return rep;
}

}  // namespace strudel::report

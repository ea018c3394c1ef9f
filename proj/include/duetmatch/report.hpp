#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "engine.hpp"
#include "error.hpp"
#include "metrics.hpp"

namespace duetmatch {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

namespace detail {

inline std::string num(double v, int prec = 4) {
    if (!std::isfinite(v)) return "0";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '&': o += "&amp;"; break;
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write " + p.string());
    return os;
}

}  // namespace detail

/// Minimal deterministic SVG line chart.
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                  const std::vector<Series>& series) {
    constexpr double W = 640, H = 400, L = 70, R = 150, Tm = 40, B = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tm - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H
      << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
      << detail::xml_escape(title) << "</text>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
        o << "<text x=\"" << detail::num(px(xv), 1) << "\" y=\"" << H - B + 16
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << detail::num(xv, 2) << "</text>\n";
        o << "<text x=\"" << L - 6 << "\" y=\"" << detail::num(py(yv) + 4, 1)
          << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << detail::num(yv, 3) << "</text>\n";
    }
    o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << detail::xml_escape(xlabel) << "</text>\n";
    o << "<text x=\"16\" y=\"" << (Tm + H - B) / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
      << (Tm + H - B) / 2 << ")\">" << detail::xml_escape(ylabel) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* c = colors[k % 6];
        o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            o << detail::num(px(s.x[i]), 2) << ',' << detail::num(py(s.y[i]), 2) << (i + 1 < s.x.size() ? " " : "");
        }
        o << "\"/>\n";
        if (s.x.size() <= 12)
            for (std::size_t i = 0; i < s.x.size(); ++i)
                if (std::isfinite(s.y[i]))
                    o << "<circle cx=\"" << detail::num(px(s.x[i]), 2) << "\" cy=\"" << detail::num(py(s.y[i]), 2) << "\" r=\"3\" fill=\"" << c
                      << "\"/>\n";
        const double ly = Tm + 10 + 18.0 * static_cast<double>(k);
        o << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly << "\" stroke=\"" << c
          << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
          << detail::xml_escape(s.name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

/// iter,total,sup,duet_feature,duet_pred,cm,val_dice (val_dice empty between validations).
inline void write_history_csv(const History& h, const std::filesystem::path& path) {
    auto os = detail::open_out(path);
    os << "iter,total,sup,duet_feature,duet_pred,cm,val_dice\n";
    std::size_t vi = 0;
    for (const auto& s : h.steps) {
        os << s.iter << ',' << fmt_fixed(s.losses.total) << ',' << fmt_fixed(s.losses.sup) << ',' << fmt_fixed(s.losses.duet_feature) << ','
           << fmt_fixed(s.losses.duet_pred) << ',' << fmt_fixed(s.losses.cm) << ',';
        while (vi < h.val_dice.size() && h.val_dice[vi].first < s.iter) ++vi;
        if (vi < h.val_dice.size() && h.val_dice[vi].first == s.iter) os << fmt_fixed(h.val_dice[vi].second);
        os << '\n';
    }
}

inline History read_history_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    History h;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() < 6) throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 7 columns");
        try {
            StepLog s;
            s.iter = std::stoul(f[0]);
            s.losses = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]), std::stod(f[1])};
            h.steps.push_back(s);
            if (f.size() > 6 && !f[6].empty()) h.val_dice.emplace_back(s.iter, std::stod(f[6]));
        } catch (const std::logic_error&) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    return h;
}

/// Loss curves, averaged over windows so long runs stay readable.
inline std::string loss_curve_svg(const History& h) {
    const std::size_t n = h.steps.size();
    const std::size_t win = std::max<std::size_t>(1, n / 200);
    std::vector<Series> s{{"total", {}, {}}, {"sup", {}, {}}, {"duet_feature", {}, {}}, {"duet_pred", {}, {}}, {"cm", {}, {}}};
    for (std::size_t b = 0; b < n; b += win) {
        const std::size_t e = std::min(n, b + win);
        double acc[5] = {0, 0, 0, 0, 0};
        for (std::size_t i = b; i < e; ++i) {
            const auto& l = h.steps[i].losses;
            acc[0] += l.total, acc[1] += l.sup, acc[2] += l.duet_feature, acc[3] += l.duet_pred, acc[4] += l.cm;
        }
        for (std::size_t k = 0; k < 5; ++k) {
            s[k].x.push_back(static_cast<double>(h.steps[e - 1].iter));
            s[k].y.push_back(acc[k] / static_cast<double>(e - b));
        }
    }
    return svg_line_chart("Training loss", "iteration", "loss", s);
}

/// Writes metrics.csv, history.csv and loss_curve.svg into out_dir.
inline void emit_report(const History& h, const MetricsReport& m, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create report directory " + out_dir.string());
    write_metrics_csv(m, out_dir / "metrics.csv");
    write_history_csv(h, out_dir / "history.csv");
    // Plot from the rounded CSV so that regenerating from disk is byte-identical.
    auto os = detail::open_out(out_dir / "loss_curve.svg");
    os << loss_curve_svg(read_history_csv(out_dir / "history.csv"));
}

// ---------------------------------------------------------------------------
// Dropout sweep

struct SweepRow {
    double ratio = 0;
    MetricsReport metrics;
};

inline void write_sweep(const std::vector<SweepRow>& rows, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    {
        auto os = detail::open_out(out_dir / "sweep.csv");
        os << "dropout_ratio,dice_pct,jaccard_pct,hd95_mm,asd_mm\n";
        for (const auto& r : rows)
            os << detail::num(r.ratio, 2) << ',' << fmt_fixed(r.metrics.dice_pct) << ',' << fmt_fixed(r.metrics.jaccard_pct) << ','
               << fmt_fixed(r.metrics.hd95_mm) << ',' << fmt_fixed(r.metrics.asd_mm) << '\n';
    }
    Series dice{"Dice (%)", {}, {}}, jac{"Jaccard (%)", {}, {}};
    for (const auto& r : rows) {
        dice.x.push_back(r.ratio);
        dice.y.push_back(r.metrics.dice_pct);
        jac.x.push_back(r.ratio);
        jac.y.push_back(r.metrics.jaccard_pct);
    }
    auto os = detail::open_out(out_dir / "sweep.svg");
    os << svg_line_chart("Dropout ratio sweep", "dropout ratio", "score (%)", {dice, jac});
}

// ---------------------------------------------------------------------------
// Ablation table

inline std::string pm(const MeanStd& m) { return fmt_fixed(m.mean, 2) + " ± " + fmt_fixed(m.std, 2); }

inline void write_ablation(const std::vector<AblationRow>& rows, std::size_t folds, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    {
        auto os = detail::open_out(out_dir / "ablation.csv");
        os << "row,duet,ddp,pcmcg,cm,folds,dice_pct,jaccard_pct,hd95_mm,asd_mm\n";
        for (const auto& r : rows)
            os << r.name << ',' << r.flags.duet << ',' << r.flags.ddp << ',' << r.flags.pcmcg << ',' << r.flags.cm << ',' << folds << ','
               << pm(r.dice) << ',' << pm(r.jaccard) << ',' << pm(r.hd95) << ',' << pm(r.asd) << '\n';
    }
    auto os = detail::open_out(out_dir / "ablation.md");
    os << "| Row | DDP | PCMCG | CM | DC (%) | JC (%) | 95HD (mm) | ASD (mm) |\n";
    os << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows)
        os << "| " << r.name << " | " << (r.flags.ddp ? "x" : "") << " | " << (r.flags.pcmcg ? "x" : "") << " | " << (r.flags.cm ? "x" : "")
           << " | " << pm(r.dice) << " | " << pm(r.jaccard) << " | " << pm(r.hd95) << " | " << pm(r.asd) << " |\n";
}

}  // namespace duetmatch

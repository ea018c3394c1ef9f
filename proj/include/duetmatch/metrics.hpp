#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "volumes.hpp"

namespace duetmatch {

struct CaseMetrics {
    std::string id;
    double dice_pct = 0;
    double jaccard_pct = 0;
    double hd95_mm = 0;
    double asd_mm = 0;
};

struct MetricsReport {
    double dice_pct = 0;
    double jaccard_pct = 0;
    double hd95_mm = 0;
    double asd_mm = 0;
    std::vector<CaseMetrics> per_case;
};

struct SurfaceSet {
    std::vector<std::array<double, 3>> points;  // mm, (x, y, z)
};

namespace detail {

inline void check_pair(const LabelMask& a, const LabelMask& b) {
    if (!(a.shape == b.shape))
        throw ShapeError("metric inputs differ in shape: (" + std::to_string(a.shape.x) + "," + std::to_string(a.shape.y) +
                         "," + std::to_string(a.shape.z) + ") vs (" + std::to_string(b.shape.x) + "," +
                         std::to_string(b.shape.y) + "," + std::to_string(b.shape.z) + ")");
}

struct Overlap {
    std::size_t p = 0, g = 0, both = 0;
};

inline Overlap overlap(const LabelMask& pred, const LabelMask& gt) {
    check_pair(pred, gt);
    Overlap o;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool p = pred.labels[i] != 0, g = gt.labels[i] != 0;
        o.p += p;
        o.g += g;
        o.both += p && g;
    }
    return o;
}

inline bool is_surface(const LabelMask& m, std::size_t i, std::size_t j, std::size_t k) {
    if (m.at(i, j, k) == 0) return false;
    const Extent& s = m.shape;
    if (i == 0 || j == 0 || k == 0 || i + 1 == s.x || j + 1 == s.y || k + 1 == s.z) return true;
    return m.at(i - 1, j, k) == 0 || m.at(i + 1, j, k) == 0 || m.at(i, j - 1, k) == 0 || m.at(i, j + 1, k) == 0 ||
           m.at(i, j, k - 1) == 0 || m.at(i, j, k + 1) == 0;
}

inline std::vector<std::uint8_t> surface_indicator(const LabelMask& m) {
    std::vector<std::uint8_t> out(m.labels.size(), 0);
    const Extent& s = m.shape;
    for (std::size_t k = 0; k < s.z; ++k)
        for (std::size_t j = 0; j < s.y; ++j)
            for (std::size_t i = 0; i < s.x; ++i) out[s.index(i, j, k)] = is_surface(m, i, j, k);
    return out;
}

// 1-D lower envelope of parabolas w*(p - q)^2 + f(q) (Felzenszwalb & Huttenlocher).
inline void edt_1d(const double* f, std::size_t n, double w, double* d, std::vector<std::size_t>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    std::size_t k = 0;
    std::size_t first = n;
    for (std::size_t q = 0; q < n; ++q)
        if (f[q] < inf) {
            first = q;
            break;
        }
    if (first == n) {
        std::fill(d, d + n, inf);
        return;
    }
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (f[q] == inf) continue;
        double s;
        while (true) {
            const double qd = static_cast<double>(q), vd = static_cast<double>(v[k]);
            s = ((f[q] + w * qd * qd) - (f[v[k]] + w * vd * vd)) / (2.0 * w * (qd - vd));
            if (s <= z[k] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        if (s <= z[k]) {  // k == 0 and the new parabola dominates everywhere
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (std::size_t p = 0; p < n; ++p) {
        while (z[k + 1] < static_cast<double>(p)) ++k;
        const double dp = static_cast<double>(p) - static_cast<double>(v[k]);
        d[p] = w * dp * dp + f[v[k]];
    }
}

}  // namespace detail

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// set voxel of `seed`, with anisotropic spacing.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seed, Extent s, const Spacing& sp) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> g(seed.size());
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] = seed[i] ? 0.0 : inf;
    std::vector<std::size_t> v;
    std::vector<double> z;
    const std::size_t longest = std::max({s.x, s.y, s.z});
    std::vector<double> line(longest), out(longest);
    const std::array<std::size_t, 3> dims{s.x, s.y, s.z};
    const std::array<std::size_t, 3> stride{1, s.x, s.x * s.y};
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const std::size_t n = dims[axis], st = stride[axis];
        const double w = sp[axis] * sp[axis];
        const std::size_t a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (std::size_t u = 0; u < dims[a1]; ++u)
            for (std::size_t t = 0; t < dims[a2]; ++t) {
                const std::size_t base = u * stride[a1] + t * stride[a2];
                for (std::size_t p = 0; p < n; ++p) line[p] = g[base + p * st];
                detail::edt_1d(line.data(), n, w, out.data(), v, z);
                for (std::size_t p = 0; p < n; ++p) g[base + p * st] = out[p];
            }
    }
    return g;
}

/// 2|P∩G| / (|P| + |G|) on foreground (label != 0); 1 when both are empty.
inline double dice_coefficient(const LabelMask& pred, const LabelMask& gt) {
    const auto o = detail::overlap(pred, gt);
    if (o.p + o.g == 0) return 1.0;
    return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.p + o.g);
}

inline double jaccard_index(const LabelMask& pred, const LabelMask& gt) {
    const auto o = detail::overlap(pred, gt);
    const std::size_t uni = o.p + o.g - o.both;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.both) / static_cast<double>(uni);
}

/// Foreground voxels with a background 6-neighbour (outside the grid counts as background).
inline SurfaceSet extract_surface(const LabelMask& m, const Spacing& spacing) {
    SurfaceSet out;
    const Extent& s = m.shape;
    for (std::size_t k = 0; k < s.z; ++k)
        for (std::size_t j = 0; j < s.y; ++j)
            for (std::size_t i = 0; i < s.x; ++i)
                if (detail::is_surface(m, i, j, k))
                    out.points.push_back({static_cast<double>(i) * spacing[0], static_cast<double>(j) * spacing[1],
                                          static_cast<double>(k) * spacing[2]});
    return out;
}

inline double volume_diagonal(Extent s, const Spacing& sp) {
    const double x = static_cast<double>(s.x) * sp[0], y = static_cast<double>(s.y) * sp[1], z = static_cast<double>(s.z) * sp[2];
    return std::sqrt(x * x + y * y + z * z);
}

/// Combined multiset of directed surface distances A->B and B->A, in mm.
/// Empty when either surface is empty.
inline std::vector<double> surface_distances(const LabelMask& pred, const LabelMask& gt, const Spacing& spacing) {
    detail::check_pair(pred, gt);
    const auto sa = detail::surface_indicator(pred);
    const auto sb = detail::surface_indicator(gt);
    const bool any_a = std::find(sa.begin(), sa.end(), 1) != sa.end();
    const bool any_b = std::find(sb.begin(), sb.end(), 1) != sb.end();
    std::vector<double> d;
    if (!any_a || !any_b) return d;
    const auto to_b = squared_distance_transform(sb, gt.shape, spacing);
    const auto to_a = squared_distance_transform(sa, pred.shape, spacing);
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (sa[i]) d.push_back(std::sqrt(to_b[i]));
    for (std::size_t i = 0; i < sb.size(); ++i)
        if (sb[i]) d.push_back(std::sqrt(to_a[i]));
    return d;
}

/// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace detail {
// 0 when both masks are empty, the volume diagonal when exactly one is.
inline std::optional<double> empty_convention(const LabelMask& pred, const LabelMask& gt, const Spacing& sp) {
    const bool pe = pred.foreground() == 0, ge = gt.foreground() == 0;
    if (pe && ge) return 0.0;
    if (pe || ge) return volume_diagonal(pred.shape, sp);
    return std::nullopt;
}
}  // namespace detail

inline double hausdorff95(const LabelMask& pred, const LabelMask& gt, const Spacing& spacing) {
    detail::check_pair(pred, gt);
    if (auto e = detail::empty_convention(pred, gt, spacing)) return *e;
    return percentile(surface_distances(pred, gt, spacing), 95.0);
}

inline double average_surface_distance(const LabelMask& pred, const LabelMask& gt, const Spacing& spacing) {
    detail::check_pair(pred, gt);
    if (auto e = detail::empty_convention(pred, gt, spacing)) return *e;
    const auto d = surface_distances(pred, gt, spacing);
    double s = 0;
    for (double x : d) s += x;
    return s / static_cast<double>(d.size());
}

inline CaseMetrics evaluate_case(const std::string& id, const LabelMask& pred, const LabelMask& gt, const Spacing& spacing) {
    return {id, 100.0 * dice_coefficient(pred, gt), 100.0 * jaccard_index(pred, gt), hausdorff95(pred, gt, spacing),
            average_surface_distance(pred, gt, spacing)};
}

struct MeanStd {
    double mean = 0, std = 0;
};

/// Mean and sample standard deviation (0 for fewer than two values).
inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() < 2) return r;
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    return r;
}

inline MetricsReport summarize(std::vector<CaseMetrics> cases) {
    MetricsReport r;
    r.per_case = std::move(cases);
    if (r.per_case.empty()) return r;
    for (const auto& c : r.per_case) {
        r.dice_pct += c.dice_pct;
        r.jaccard_pct += c.jaccard_pct;
        r.hd95_mm += c.hd95_mm;
        r.asd_mm += c.asd_mm;
    }
    const double n = static_cast<double>(r.per_case.size());
    r.dice_pct /= n;
    r.jaccard_pct /= n;
    r.hd95_mm /= n;
    r.asd_mm /= n;
    return r;
}

inline std::string fmt_fixed(double v, int prec = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

/// case_id,dice_pct,jaccard_pct,hd95_mm,asd_mm; one row per case plus a
/// final "summary" row holding "mean ± std" for each column.
inline void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "case_id,dice_pct,jaccard_pct,hd95_mm,asd_mm\n";
    std::vector<double> d, j, h, a;
    for (const auto& c : r.per_case) {
        os << c.id << ',' << fmt_fixed(c.dice_pct) << ',' << fmt_fixed(c.jaccard_pct) << ',' << fmt_fixed(c.hd95_mm) << ','
           << fmt_fixed(c.asd_mm) << '\n';
        d.push_back(c.dice_pct);
        j.push_back(c.jaccard_pct);
        h.push_back(c.hd95_mm);
        a.push_back(c.asd_mm);
    }
    auto cell = [](const std::vector<double>& v) {
        const auto ms = mean_std(v);
        return fmt_fixed(ms.mean, 4) + " ± " + fmt_fixed(ms.std, 4);
    };
    os << "summary," << cell(d) << ',' << cell(j) << ',' << cell(h) << ',' << cell(a) << '\n';
}

/// Parse the per-case rows of a metrics CSV (the summary row is skipped).
inline MetricsReport read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    std::vector<CaseMetrics> cases;
    while (std::getline(is, line)) {
        if (line.empty() || line.rfind("summary,", 0) == 0) continue;
        CaseMetrics c;
        std::array<std::string, 5> f;
        std::size_t pos = 0;
        for (std::size_t i = 0; i < 5; ++i) {
            const auto next = line.find(',', pos);
            f[i] = line.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
            pos = next == std::string::npos ? line.size() : next + 1;
        }
        c.id = f[0];
        c.dice_pct = std::stod(f[1]);
        c.jaccard_pct = std::stod(f[2]);
        c.hd95_mm = std::stod(f[3]);
        c.asd_mm = std::stod(f[4]);
        cases.push_back(c);
    }
    return summarize(std::move(cases));
}

}  // namespace duetmatch

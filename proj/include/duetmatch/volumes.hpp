#pragma once

#include <algorithm>
#include <cstdio>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "error.hpp"
#include "io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace duetmatch {

/// Grid extent (W, H, D) = (x, y, z). Voxel (x, y, z) lives at x + W*(y + H*z).
struct Extent {
    std::size_t x = 0, y = 0, z = 0;

    std::size_t voxels() const { return x * y * z; }
    std::size_t operator[](std::size_t axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return i + x * (j + y * k); }
    bool operator==(const Extent&) const = default;

    static Extent cube(std::size_t n) { return {n, n, n}; }
};

using Spacing = std::array<double, 3>;

struct Volume {
    Extent shape;
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<float> voxels;

    Volume() = default;
    Volume(Extent s, Spacing sp, float fill = 0.0f) : shape(s), spacing(sp), voxels(s.voxels(), fill) {}

    float& at(std::size_t i, std::size_t j, std::size_t k) { return voxels[shape.index(i, j, k)]; }
    float at(std::size_t i, std::size_t j, std::size_t k) const { return voxels[shape.index(i, j, k)]; }

    void validate() const {
        if (voxels.size() != shape.voxels()) throw ShapeError("volume voxel count does not match its shape");
        for (double s : spacing)
            if (!(s > 0)) throw std::invalid_argument("volume spacing must be positive");
        for (float v : voxels)
            if (!std::isfinite(v)) throw std::invalid_argument("volume contains non-finite values");
    }

    bool operator==(const Volume&) const = default;
};

struct LabelMask {
    Extent shape;
    std::vector<std::uint8_t> labels;
    int n_classes = 2;

    LabelMask() = default;
    explicit LabelMask(Extent s, int classes = 2) : shape(s), labels(s.voxels(), 0), n_classes(classes) {}

    std::uint8_t& at(std::size_t i, std::size_t j, std::size_t k) { return labels[shape.index(i, j, k)]; }
    std::uint8_t at(std::size_t i, std::size_t j, std::size_t k) const { return labels[shape.index(i, j, k)]; }

    std::size_t count(int label) const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(label)));
    }
    std::size_t foreground() const { return labels.size() - count(0); }

    bool operator==(const LabelMask&) const = default;
};

struct Case {
    std::string id;
    Volume volume;
    std::optional<LabelMask> mask;
};

struct DatasetSplit {
    std::vector<std::string> train_labeled, train_unlabeled, val, test;
    std::uint64_t seed = 0;

    bool operator==(const DatasetSplit&) const = default;
};

struct PatchPair {
    Volume image;
    std::optional<LabelMask> label;
    std::array<std::size_t, 3> origin{};      // in padded source coordinates
    std::array<std::size_t, 3> pad_before{};  // zero padding added in front of each axis
};

// ---------------------------------------------------------------------------
// Synthetic phantoms

struct Ellipsoid {
    std::array<double, 3> center;  // voxel-index coordinates
    std::array<double, 3> semi_axes;
    float contrast;

    bool contains(double i, double j, double k) const {
        const double a = (i - center[0]) / semi_axes[0];
        const double b = (j - center[1]) / semi_axes[1];
        const double c = (k - center[2]) / semi_axes[2];
        return a * a + b * b + c * c <= 1.0;
    }
};

struct PhantomOptions {
    float base_intensity = 1.0f;
    float contrast = 1.0f;
    /// Per-lesion contrast is contrast * U(1 - jitter, 1 + jitter).
    double contrast_jitter = 0.0;
    double min_axis_frac = 0.08;
    double max_axis_frac = 0.2;
    Spacing spacing{1.0, 1.0, 1.0};
    double min_fg_frac = 0.005;
    double max_fg_frac = 0.20;
};

struct Phantom {
    Volume volume;
    LabelMask mask;
    std::vector<Ellipsoid> lesions;
};

/// Ellipsoid-lesion phantom: base intensity everywhere, plus each lesion's
/// contrast on voxels inside it (overlaps take the largest contrast), plus
/// Gaussian noise. Lesion layouts are redrawn until the foreground fraction
/// falls within the configured bounds.
inline Phantom generate_phantom_detailed(std::uint64_t seed, Extent shape, int n_lesions, double noise_sigma,
                                         const PhantomOptions& opt = {}) {
    for (std::size_t a = 0; a < 3; ++a)
        if (shape[a] < 16)
            throw std::invalid_argument("phantom shape axis " + std::to_string(a) + " is " + std::to_string(shape[a]) +
                                        ", must be >= 16 to fit an ellipsoid");
    if (n_lesions < 1) throw std::invalid_argument("n_lesions must be >= 1");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
    if (!(opt.min_axis_frac > 0 && opt.min_axis_frac <= opt.max_axis_frac))
        throw std::invalid_argument("phantom axis fraction bounds must satisfy 0 < min <= max");
    for (std::size_t a = 0; a < 3; ++a)
        if (2.0 * opt.max_axis_frac * static_cast<double>(shape[a]) > static_cast<double>(shape[a] - 1))
            throw std::invalid_argument("phantom max_axis_frac too large: ellipsoid cannot fit inside axis " +
                                        std::to_string(a));

    Rng rng(seed);
    const auto total = static_cast<double>(shape.voxels());
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Phantom ph;
        ph.volume = Volume(shape, opt.spacing, opt.base_intensity);
        ph.mask = LabelMask(shape);
        for (int l = 0; l < n_lesions; ++l) {
            Ellipsoid e{};
            for (std::size_t a = 0; a < 3; ++a) {
                const double n = static_cast<double>(shape[a]);
                e.semi_axes[a] = rng.uniform(opt.min_axis_frac * n, opt.max_axis_frac * n);
                e.center[a] = rng.uniform(e.semi_axes[a], n - 1.0 - e.semi_axes[a]);
            }
            e.contrast = opt.contrast * static_cast<float>(rng.uniform(1.0 - opt.contrast_jitter, 1.0 + opt.contrast_jitter));
            ph.lesions.push_back(e);
        }
        std::vector<float> lesion_add(shape.voxels(), 0.0f);
        for (const auto& e : ph.lesions) {
            std::array<std::size_t, 3> lo{}, hi{};
            for (std::size_t a = 0; a < 3; ++a) {
                lo[a] = static_cast<std::size_t>(std::max(0.0, std::floor(e.center[a] - e.semi_axes[a])));
                hi[a] = std::min(shape[a] - 1, static_cast<std::size_t>(std::ceil(e.center[a] + e.semi_axes[a])));
            }
            for (std::size_t k = lo[2]; k <= hi[2]; ++k)
                for (std::size_t j = lo[1]; j <= hi[1]; ++j)
                    for (std::size_t i = lo[0]; i <= hi[0]; ++i)
                        if (e.contains(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k))) {
                            const auto idx = shape.index(i, j, k);
                            ph.mask.labels[idx] = 1;
                            lesion_add[idx] = std::max(lesion_add[idx], e.contrast);
                        }
        }
        const double frac = static_cast<double>(ph.mask.foreground()) / total;
        if (frac < opt.min_fg_frac || frac > opt.max_fg_frac) continue;
        for (std::size_t i = 0; i < lesion_add.size(); ++i) {
            float v = opt.base_intensity + lesion_add[i];
            if (noise_sigma > 0) v += static_cast<float>(noise_sigma * rng.normal());
            ph.volume.voxels[i] = v;
        }
        return ph;
    }
    throw std::runtime_error("could not place lesions with foreground fraction in [" + std::to_string(opt.min_fg_frac) +
                             ", " + std::to_string(opt.max_fg_frac) + "] after 1000 attempts");
}

inline std::pair<Volume, LabelMask> generate_phantom(std::uint64_t seed, Extent shape, int n_lesions, double noise_sigma,
                                                     const PhantomOptions& opt = {}) {
    auto ph = generate_phantom_detailed(seed, shape, n_lesions, noise_sigma, opt);
    return {std::move(ph.volume), std::move(ph.mask)};
}

/// A set of phantom cases with ids case_0000, case_0001, ..., every one masked.
/// Per-case seeds are forked from `seed`, so case i does not depend on n.
inline std::vector<Case> generate_dataset(std::size_t n, std::uint64_t seed, Extent shape, int n_lesions, double noise_sigma,
                                          const PhantomOptions& opt = {}) {
    Rng rng(seed);
    std::vector<Case> out;
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "case_%04zu", i);
        auto [v, m] = generate_phantom(rng.fork_seed(), shape, n_lesions, noise_sigma, opt);
        out.push_back({id, std::move(v), std::move(m)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Intensity and patches

/// Z-score over nonzero voxels; zero voxels stay zero. A support with
/// std < 1e-6 (or no support at all) maps to an all-zero volume.
inline Volume normalize_intensity(const Volume& v) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (float x : v.voxels)
        if (x != 0.0f) {
            sum += x;
            ++n;
        }
    Volume out = v;
    if (n == 0) return out;
    const double mean = sum / static_cast<double>(n);
    for (float x : v.voxels)
        if (x != 0.0f) sq += (x - mean) * (x - mean);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    for (std::size_t i = 0; i < out.voxels.size(); ++i) {
        if (sd < 1e-6)
            out.voxels[i] = 0.0f;
        else if (v.voxels[i] != 0.0f)
            out.voxels[i] = static_cast<float>((v.voxels[i] - mean) / sd);
    }
    return out;
}

namespace detail {

template <class Src, class Dst>
void crop_copy(const Src& src, const Extent& src_shape, const std::array<std::size_t, 3>& pad_before,
               const std::array<std::size_t, 3>& origin, std::size_t patch, Dst& dst) {
    for (std::size_t k = 0; k < patch; ++k)
        for (std::size_t j = 0; j < patch; ++j)
            for (std::size_t i = 0; i < patch; ++i) {
                const std::array<std::size_t, 3> p{origin[0] + i, origin[1] + j, origin[2] + k};
                bool inside = true;
                std::array<std::size_t, 3> s{};
                for (std::size_t a = 0; a < 3; ++a) {
                    if (p[a] < pad_before[a] || p[a] - pad_before[a] >= src_shape[a]) {
                        inside = false;
                        break;
                    }
                    s[a] = p[a] - pad_before[a];
                }
                if (inside) dst[i + patch * (j + patch * k)] = src[src_shape.index(s[0], s[1], s[2])];
            }
}

}  // namespace detail

/// Cubic crop of side `patch`. Axes shorter than the patch are first
/// zero-padded symmetrically (the odd voxel goes after).
inline PatchPair random_crop(const Volume& v, const std::optional<LabelMask>& m, std::size_t patch, Rng& rng) {
    if (patch < 8) throw std::invalid_argument("patch size must be >= 8");
    if (m && !(m->shape == v.shape)) throw ShapeError("random_crop: mask shape differs from volume shape");
    PatchPair out;
    for (std::size_t a = 0; a < 3; ++a) {
        const std::size_t n = v.shape[a];
        const std::size_t padded = std::max(n, patch);
        out.pad_before[a] = (padded - n) / 2;
        out.origin[a] = static_cast<std::size_t>(rng.below(padded - patch + 1));
    }
    out.image = Volume(Extent::cube(patch), v.spacing, 0.0f);
    detail::crop_copy(v.voxels, v.shape, out.pad_before, out.origin, patch, out.image.voxels);
    if (m) {
        out.label = LabelMask(Extent::cube(patch), m->n_classes);
        detail::crop_copy(m->labels, m->shape, out.pad_before, out.origin, patch, out.label->labels);
    }
    return out;
}

struct AugmentParams {
    std::array<bool, 3> flip{false, false, false};
    int rot_axis = 0;   // rotation axis: 0 = x, 1 = y, 2 = z
    int quarter_turns = 0;

    bool identity() const { return !flip[0] && !flip[1] && !flip[2] && quarter_turns % 4 == 0; }

    static AugmentParams sample(Rng& rng) {
        AugmentParams p;
        for (auto& f : p.flip) f = rng.bernoulli(0.5);
        p.rot_axis = static_cast<int>(rng.below(3));
        p.quarter_turns = static_cast<int>(rng.below(4));
        return p;
    }

    /// Source coordinate that lands at output coordinate `o` of an n^3 cube.
    std::array<std::size_t, 3> source_of(std::array<std::size_t, 3> o, std::size_t n) const {
        // Inverse rotation first (output -> pre-rotation), then inverse flip.
        const int u = (rot_axis + 1) % 3, w = (rot_axis + 2) % 3;
        for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
            // forward quarter turn maps (u, w) -> (n-1-w, u); invert it
            const std::size_t ou = o[static_cast<std::size_t>(u)], ow = o[static_cast<std::size_t>(w)];
            o[static_cast<std::size_t>(u)] = ow;
            o[static_cast<std::size_t>(w)] = n - 1 - ou;
        }
        for (std::size_t a = 0; a < 3; ++a)
            if (flip[a]) o[a] = n - 1 - o[a];
        return o;
    }
};

/// Apply a fixed flip+rotation to image and label alike.
inline PatchPair augment(const PatchPair& p, const AugmentParams& prm) {
    const Extent& s = p.image.shape;
    if (s.x != s.y || s.y != s.z) throw ShapeError("augment requires a cubic patch");
    if (prm.identity()) return p;
    const std::size_t n = s.x;
    PatchPair out = p;
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) {
                const auto src = prm.source_of({i, j, k}, n);
                const auto si = s.index(src[0], src[1], src[2]);
                const auto di = s.index(i, j, k);
                out.image.voxels[di] = p.image.voxels[si];
                if (p.label) out.label->labels[di] = p.label->labels[si];
            }
    return out;
}

inline PatchPair augment(const PatchPair& p, Rng& rng) { return augment(p, AugmentParams::sample(rng)); }

// ---------------------------------------------------------------------------
// Splits

/// Seeded partition. Labeled, validation and test ids are drawn (in that
/// order) from a shuffle of the cases that carry masks; everything left over
/// becomes unlabeled training data.
inline DatasetSplit split_dataset(const std::vector<Case>& cases, std::size_t n_labeled, std::size_t n_val,
                                  std::size_t n_test, std::uint64_t seed) {
    const std::size_t need = n_labeled + n_val + n_test;
    if (need > cases.size())
        throw std::invalid_argument("split needs " + std::to_string(need) + " cases but only " +
                                    std::to_string(cases.size()) + " exist");
    std::set<std::string> ids;
    std::vector<std::string> masked, unmasked;
    for (const auto& c : cases) {
        if (!ids.insert(c.id).second) throw std::invalid_argument("duplicate case id " + c.id);
        (c.mask ? masked : unmasked).push_back(c.id);
    }
    if (masked.size() < need)
        throw std::invalid_argument("insufficient labeled cases: need " + std::to_string(need) + " with masks, have " +
                                    std::to_string(masked.size()) + " (short by " +
                                    std::to_string(need - masked.size()) + ")");
    Rng rng(seed);
    rng.shuffle(masked.begin(), masked.end());
    rng.shuffle(unmasked.begin(), unmasked.end());
    DatasetSplit s;
    s.seed = seed;
    auto take = [&](std::size_t from, std::size_t n) {
        return std::vector<std::string>(masked.begin() + static_cast<std::ptrdiff_t>(from),
                                        masked.begin() + static_cast<std::ptrdiff_t>(from + n));
    };
    s.train_labeled = take(0, n_labeled);
    s.val = take(n_labeled, n_val);
    s.test = take(n_labeled + n_val, n_test);
    s.train_unlabeled.assign(masked.begin() + static_cast<std::ptrdiff_t>(need), masked.end());
    s.train_unlabeled.insert(s.train_unlabeled.end(), unmasked.begin(), unmasked.end());
    return s;
}

inline nlohmann::json split_to_json(const DatasetSplit& s) {
    return {{"seed", s.seed},
            {"train_labeled", s.train_labeled},
            {"train_unlabeled", s.train_unlabeled},
            {"val", s.val},
            {"test", s.test}};
}

inline DatasetSplit split_from_json(const nlohmann::json& j) {
    DatasetSplit s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train_labeled = j.at("train_labeled").get<std::vector<std::string>>();
    s.train_unlabeled = j.at("train_unlabeled").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
}

inline void save_split(const DatasetSplit& s, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << split_to_json(s).dump(2) << '\n';
}

inline DatasetSplit load_split(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    try {
        return split_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeaderError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Case-on-disk format: <id>.json sidecar, <id>.vol (f32le, x fastest),
// optional <id>.msk (u8, same order).

inline void save_case(const Case& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const Extent& s = c.volume.shape;
    nlohmann::json side{{"shape", {s.x, s.y, s.z}},
                        {"spacing", {c.volume.spacing[0], c.volume.spacing[1], c.volume.spacing[2]}},
                        {"dtype", "f32le"},
                        {"has_mask", c.mask.has_value()}};
    {
        std::ofstream os(dir / (c.id + ".json"));
        if (!os) throw IoError("cannot write sidecar for " + c.id);
        os << side.dump() << '\n';
    }
    {
        std::ofstream os(dir / (c.id + ".vol"), std::ios::binary);
        if (!os) throw IoError("cannot write volume for " + c.id);
        io::write_f32le<float>(os, c.volume.voxels);
    }
    const auto msk = dir / (c.id + ".msk");
    if (c.mask) {
        if (!(c.mask->shape == s)) throw ShapeError("mask shape differs from volume shape for " + c.id);
        std::ofstream os(msk, std::ios::binary);
        if (!os) throw IoError("cannot write mask for " + c.id);
        os.write(reinterpret_cast<const char*>(c.mask->labels.data()), static_cast<std::streamsize>(c.mask->labels.size()));
    } else {
        std::filesystem::remove(msk);
    }
}

inline Case load_case(const std::filesystem::path& dir, const std::string& id) {
    const auto side_path = dir / (id + ".json");
    std::ifstream is(side_path);
    if (!is) throw IoError("cannot read " + side_path.string());
    Case c;
    c.id = id;
    bool has_mask = false;
    try {
        const auto side = nlohmann::json::parse(is);
        const auto shape = side.at("shape").get<std::vector<std::size_t>>();
        const auto spacing = side.at("spacing").get<std::vector<double>>();
        if (shape.size() != 3 || spacing.size() != 3) throw MalformedHeaderError(side_path.string() + ": shape and spacing need 3 entries");
        const auto dtype = side.at("dtype").get<std::string>();
        if (dtype != "f32le") throw UnknownDtypeError(side_path.string() + ": unknown dtype '" + dtype + "'");
        has_mask = side.at("has_mask").get<bool>();
        c.volume.shape = {shape[0], shape[1], shape[2]};
        c.volume.spacing = {spacing[0], spacing[1], spacing[2]};
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeaderError(side_path.string() + ": " + e.what());
    }
    const std::size_t n = c.volume.shape.voxels();
    {
        std::ifstream vs(dir / (id + ".vol"), std::ios::binary);
        if (!vs) throw IoError("missing volume payload for " + id);
        const auto bytes = io::read_all(vs);
        if (bytes.size() != n * 4)
            throw PayloadShapeError(id + ".vol holds " + std::to_string(bytes.size()) + " bytes, sidecar shape needs " +
                                    std::to_string(n * 4));
        c.volume.voxels = io::read_f32le(bytes);
    }
    if (has_mask) {
        std::ifstream ms(dir / (id + ".msk"), std::ios::binary);
        if (!ms) throw IoError("sidecar declares a mask but " + id + ".msk is missing");
        const auto bytes = io::read_all(ms);
        if (bytes.size() != n)
            throw PayloadShapeError(id + ".msk holds " + std::to_string(bytes.size()) + " bytes, sidecar shape needs " +
                                    std::to_string(n));
        LabelMask m(c.volume.shape);
        std::copy(bytes.begin(), bytes.end(), reinterpret_cast<char*>(m.labels.data()));
        const int mx = m.labels.empty() ? 0 : *std::max_element(m.labels.begin(), m.labels.end());
        m.n_classes = std::max(2, mx + 1);
        c.mask = std::move(m);
    }
    return c;
}

/// Ids of all cases in a directory (sidecars with a matching .vol), sorted.
inline std::vector<std::string> list_cases(const std::filesystem::path& dir) {
    std::vector<std::string> ids;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.path().extension() != ".json") continue;
        const auto stem = e.path().stem().string();
        if (std::filesystem::exists(dir / (stem + ".vol"))) ids.push_back(stem);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline std::vector<Case> load_dataset(const std::filesystem::path& dir) {
    std::vector<Case> out;
    for (const auto& id : list_cases(dir)) out.push_back(load_case(dir, id));
    return out;
}

// ---------------------------------------------------------------------------
// Tensor bridges. A volume maps to [1, 1, z, y, x] with the same flat order.

template <class T>
Tensor<T> to_tensor(const Volume& v) {
    Tensor<T> t({v.shape.z, v.shape.y, v.shape.x});
    std::transform(v.voxels.begin(), v.voxels.end(), t.data(), [](float x) { return static_cast<T>(x); });
    return t;
}

inline Labels to_labels(const LabelMask& m) {
    Labels t({m.shape.z, m.shape.y, m.shape.x});
    std::transform(m.labels.begin(), m.labels.end(), t.data(), [](std::uint8_t x) { return static_cast<int>(x); });
    return t;
}

}  // namespace duetmatch

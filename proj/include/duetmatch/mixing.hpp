#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "losses.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "volumes.hpp"

namespace duetmatch {

/// Binary CutMix mask: ones everywhere except one axis-aligned cuboid of zeros.
/// Flat order matches tensor spatial order (x fastest).
struct CutMixMask {
    Extent shape;
    std::vector<std::uint8_t> mask;
    std::array<std::size_t, 3> origin{};  // (x, y, z) of the zero cuboid
    std::array<std::size_t, 3> size{};

    static CutMixMask filled(Extent s, std::uint8_t v) {
        CutMixMask m;
        m.shape = s;
        m.mask.assign(s.voxels(), v);
        if (v == 0) m.size = {s.x, s.y, s.z};
        return m;
    }

    CutMixMask complement() const {
        CutMixMask c = *this;
        for (auto& v : c.mask) v = static_cast<std::uint8_t>(1 - v);
        return c;
    }

    std::size_t zeros() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{0})); }

    bool operator==(const CutMixMask&) const = default;
};

inline CutMixMask sample_cutmix_mask(Extent shape, Rng& rng, double side_frac_lo = 0.25, double side_frac_hi = 0.5) {
    if (!(side_frac_lo > 0 && side_frac_lo <= side_frac_hi && side_frac_hi < 1))
        throw std::invalid_argument("cutmix side fractions must satisfy 0 < lo <= hi < 1");
    CutMixMask m = CutMixMask::filled(shape, 1);
    for (std::size_t a = 0; a < 3; ++a) {
        const double n = static_cast<double>(shape[a]);
        auto side = static_cast<std::size_t>(std::llround(rng.uniform(side_frac_lo * n, side_frac_hi * n)));
        side = std::clamp<std::size_t>(side, 1, shape[a]);
        m.size[a] = side;
        m.origin[a] = static_cast<std::size_t>(rng.below(shape[a] - side + 1));
    }
    for (std::size_t k = m.origin[2]; k < m.origin[2] + m.size[2]; ++k)
        for (std::size_t j = m.origin[1]; j < m.origin[1] + m.size[1]; ++j)
            for (std::size_t i = m.origin[0]; i < m.origin[0] + m.size[0]; ++i) m.mask[shape.index(i, j, k)] = 0;
    return m;
}

/// out_i = item_i * M + item_{B-1-i} * (1 - M), for a batch [B, ...spatial]
/// or [B, C, ...spatial]; the mask broadcasts over channels.
template <class T>
Tensor<T> pairwise_mix(const Tensor<T>& batch, const CutMixMask& m) {
    const std::size_t b = batch.dim(0), per = batch.stride0(), v = m.mask.size();
    if (v == 0 || per % v != 0 || shape_numel(Shape(batch.shape().end() - 3, batch.shape().end())) != v)
        throw ShapeError("pairwise_mix: batch " + shape_str(batch.shape()) + " does not match mask of " +
                         std::to_string(v) + " voxels");
    const std::size_t ch = per / v;
    Tensor<T> out(batch.shape());
    for (std::size_t i = 0; i < b; ++i) {
        const T* a = batch.data() + i * per;
        const T* r = batch.data() + (b - 1 - i) * per;
        T* o = out.data() + i * per;
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t s = 0; s < v; ++s) o[c * v + s] = m.mask[s] ? a[c * v + s] : r[c * v + s];
    }
    return out;
}

template <class T>
struct PseudoLabel {
    Labels hard;           // [B, z, y, x]
    Tensor<T> confidence;  // [B, z, y, x], max class probability
    Tensor<T> soft;        // mixed class probabilities [B, C, z, y, x]
};

/// Mix the (gradient-free) predictions on the original batch with the same
/// mask used for the inputs, then harden.
template <class T>
PseudoLabel<T> build_pseudo_labels(const Tensor<T>& p_mu, const CutMixMask& m) {
    PseudoLabel<T> pl;
    pl.soft = pairwise_mix(p_mu, m);
    pl.hard = argmax_channels(pl.soft);
    const std::size_t n = p_mu.dim(0), c = p_mu.dim(1), v = p_mu.spatial();
    pl.confidence = Tensor<T>(pl.hard.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < v; ++i)
            pl.confidence[b * v + i] = pl.soft[(b * c + static_cast<std::size_t>(pl.hard[b * v + i])) * v + i];
    return pl;
}

/// Eval-mode prediction through the frozen encoder and frozen decoder.
template <class T>
Tensor<T> consistency_forward(const ComponentParams<T>& enc_frozen, const ComponentParams<T>& dec_frozen, const Tensor<T>& x_u) {
    if (enc_frozen.role != Role::encoder || dec_frozen.role != Role::decoder)
        throw std::invalid_argument("consistency_forward needs an encoder and a decoder");
    return predict(enc_frozen, dec_frozen, x_u);
}

enum class Gating { hard, soft };

/// Gate pseudo-labels by the foreground of argmax(P_cons).
/// Hard gating resets voxels outside that foreground to background and zeroes
/// the confidence of foreground-labeled voxels there. Soft gating keeps the
/// labels and scales confidence by the consistency foreground probability.
template <class T>
PseudoLabel<T> refine_pseudo_labels(const PseudoLabel<T>& pl, const Tensor<T>& p_cons, Gating gating = Gating::hard) {
    require_same_shape(drop_channel(p_cons.shape()), pl.hard.shape(), "refine_pseudo_labels");
    const Labels cons = argmax_channels(p_cons);
    PseudoLabel<T> out = pl;
    const std::size_t c = p_cons.dim(1), v = p_cons.spatial();
    for (std::size_t i = 0; i < out.hard.size(); ++i) {
        const bool fg = cons[i] != 0;
        if (gating == Gating::hard) {
            if (!fg) {
                if (out.hard[i] != 0) out.confidence[i] = T{0};
                out.hard[i] = 0;
            }
        } else {
            const std::size_t b = i / v, s = i % v;
            T p_fg{0};
            for (std::size_t k = 1; k < c; ++k) p_fg += p_cons[(b * c + k) * v + s];
            out.confidence[i] *= p_fg;
        }
    }
    return out;
}

/// CE(P1_cm, PL2c) + CE(P2_cm, PL1c): each branch learns from the other's labels.
template <class T>
Var<T> cross_guidance_loss(const Var<T>& p1_cm, const Var<T>& p2_cm, const PseudoLabel<T>& pl2c, const PseudoLabel<T>& pl1c,
                           bool weight_by_confidence = false) {
    const Tensor<T>* w2 = weight_by_confidence ? &pl2c.confidence : nullptr;
    const Tensor<T>* w1 = weight_by_confidence ? &pl1c.confidence : nullptr;
    return ops::weighted_sum<T>({cross_entropy(p1_cm, pl2c.hard, w2), cross_entropy(p2_cm, pl1c.hard, w1)}, {T{1}, T{1}});
}

}  // namespace duetmatch

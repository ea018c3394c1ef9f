#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "error.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "mixing.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "volumes.hpp"

namespace duetmatch {

enum class Method { duetmatch, supervised };
enum class PretrainMode { clone, dual_seed };

/// Optimization and framework hyperparameters. Defaults are the desk-scale
/// setup; `paper_scale()` restores the full-size schedule and patch.
struct TrainConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_labeled = 4;
    std::size_t batch_unlabeled = 4;
    std::size_t iters_pretrain = 200;
    std::size_t iters_main = 1200;
    std::size_t patch = 32;
    double dropout_ratio = 0.6;
    double ema_w = 0.99;
    double alpha = 0.5;
    double beta = 0.5;
    std::uint64_t seed = 0;

    std::size_t val_every = 100;
    Method method = Method::duetmatch;
    PretrainMode pretrain_mode = PretrainMode::clone;
    bool soft_targets = false;     // soft-target CE for the duet prediction term
    Gating gating = Gating::hard;  // pseudo-label refinement
    bool per_sample_mask = false;  // one CutMix mask per batch item instead of per step
    double cutmix_lo = 0.25;
    double cutmix_hi = 0.5;
    std::size_t unsup_rampup = 0;  // linear ramp of alpha and beta over this many steps; 0 = off
    bool augment = true;

    static TrainConfig paper_scale() {
        TrainConfig c;
        c.iters_pretrain = 1000;
        c.iters_main = 6000;
        c.patch = 96;
        return c;
    }

    void validate() const {
        if (!(ema_w >= 0 && ema_w <= 1)) throw ConfigError("ema_w must satisfy 0 <= ema_w <= 1");
        if (!(dropout_ratio >= 0 && dropout_ratio < 1)) throw ConfigError("dropout_ratio must satisfy 0 <= dropout_ratio < 1");
        if (lr <= 0) throw ConfigError("lr must be > 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must satisfy 0 <= momentum < 1");
        if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
        if (alpha < 0 || beta < 0) throw ConfigError("alpha and beta must be >= 0");
        if (batch_labeled < 1 || batch_unlabeled < 1) throw ConfigError("batch sizes must be >= 1");
        if (patch < 8) throw ConfigError("patch must be >= 8");
        if (val_every < 1) throw ConfigError("val_every must be >= 1");
        if (!(cutmix_lo > 0 && cutmix_lo <= cutmix_hi && cutmix_hi < 1))
            throw ConfigError("cutmix side fractions must satisfy 0 < lo <= hi < 1");
    }

    bool operator==(const TrainConfig&) const = default;
};

/// Two branches, each one frozen and one learned component:
/// branch 1 = frozen encoder + learned decoder, branch 2 = learned encoder + frozen decoder.
template <class T>
struct BranchPair {
    ComponentParams<T> b1_enc;  // frozen
    ComponentParams<T> b1_dec;  // learned
    ComponentParams<T> b2_enc;  // learned
    ComponentParams<T> b2_dec;  // frozen

    std::array<std::uint64_t, 2> frozen_fingerprints() const { return {b1_enc.fingerprint(), b2_dec.fingerprint()}; }
    bool operator==(const BranchPair&) const = default;
};

/// Momentum buffers, one per learned tensor.
template <class T>
struct SgdState {
    std::vector<Tensor<T>> velocity;
};

template <class T>
struct TrainState {
    BranchPair<T> branches;
    SgdState<T> opt_b1_dec;
    SgdState<T> opt_b2_enc;
    std::size_t iter = 0;
};

template <class T>
struct Batch {
    Tensor<T> images;  // [B, 1, p, p, p]
    Labels labels;     // [B, p, p, p]; empty for unlabeled batches
};

struct GradNorms {
    double b1_enc = 0, b1_dec = 0, b2_enc = 0, b2_dec = 0;
};

struct StepLog {
    std::size_t iter = 0;
    LossBreakdown losses;
    GradNorms grad_norms;
    std::array<std::uint64_t, 2> frozen_before{};  // b1_enc, b2_dec before the EMA update of this step
    std::array<std::uint64_t, 2> frozen_fingerprints{};  // after it
};

inline nlohmann::json step_to_json(const StepLog& s) {
    return {{"iter", s.iter},
            {"sup", s.losses.sup},
            {"duet_feature", s.losses.duet_feature},
            {"duet_pred", s.losses.duet_pred},
            {"cm", s.losses.cm},
            {"total", s.losses.total},
            {"grad_norm", {{"b1_enc", s.grad_norms.b1_enc}, {"b1_dec", s.grad_norms.b1_dec}, {"b2_enc", s.grad_norms.b2_enc}, {"b2_dec", s.grad_norms.b2_dec}}},
            {"frozen_fingerprints", {fingerprint_hex(s.frozen_fingerprints[0]), fingerprint_hex(s.frozen_fingerprints[1])}}};
}

// ---------------------------------------------------------------------------
// Data

/// A case ready for training: normalized intensities, optional mask.
struct PreparedCase {
    std::string id;
    Volume volume;
    std::optional<LabelMask> mask;
};

inline PreparedCase prepare_case(const Case& c, bool keep_mask = true) {
    return {c.id, normalize_intensity(c.volume), keep_mask ? c.mask : std::nullopt};
}

/// Draws cropped, augmented batches from a case pool.
template <class T>
class PatchSampler {
public:
    PatchSampler(std::vector<const PreparedCase*> pool, std::size_t patch, bool labeled, bool augment)
        : pool_(std::move(pool)), patch_(patch), labeled_(labeled), augment_(augment) {
        if (pool_.empty()) throw std::invalid_argument(std::string(labeled ? "labeled" : "unlabeled") + " pool is empty");
        if (labeled_)
            for (const auto* c : pool_)
                if (!c->mask) throw std::invalid_argument("labeled pool case " + c->id + " has no mask");
    }

    Batch<T> next(std::size_t batch, Rng& rng) const {
        std::vector<Tensor<T>> imgs;
        std::vector<int> labels;
        for (std::size_t b = 0; b < batch; ++b) {
            const PreparedCase& c = *pool_[rng.below(pool_.size())];
            PatchPair p = random_crop(c.volume, labeled_ ? c.mask : std::nullopt, patch_, rng);
            if (augment_) p = augment(p, rng);
            imgs.push_back(to_tensor<T>(p.image));
            if (labeled_) labels.insert(labels.end(), p.label->labels.begin(), p.label->labels.end());
        }
        Batch<T> out;
        out.images = stack_channel1<T>(imgs);
        if (labeled_) out.labels = Labels({batch, patch_, patch_, patch_}, std::move(labels));
        return out;
    }

    std::size_t size() const { return pool_.size(); }

private:
    std::vector<const PreparedCase*> pool_;
    std::size_t patch_;
    bool labeled_;
    bool augment_;
};

// ---------------------------------------------------------------------------
// Optimizer and EMA

/// SGD with momentum and coupled weight decay: v = m*v + (g + wd*p); p -= lr*v.
template <class T>
double sgd_update(ComponentParams<T>& params, SgdState<T>& st, const std::map<std::string, Tensor<T>>& grads,
                  const TrainConfig& cfg) {
    if (st.velocity.empty())
        for (const auto& [_, t] : params.tensors) st.velocity.emplace_back(t.shape(), T{0});
    const T lr = static_cast<T>(cfg.lr), m = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay);
    double norm2 = 0;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        auto& [name, p] = params.tensors[i];
        const Tensor<T>& g = grads.at(name);
        Tensor<T>& v = st.velocity[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            norm2 += static_cast<double>(g[j]) * static_cast<double>(g[j]);
            v[j] = m * v[j] + (g[j] + wd * p[j]);
            p[j] -= lr * v[j];
        }
    }
    return std::sqrt(norm2);
}

/// frozen <- w * frozen + (1 - w) * counterpart, tensor by tensor.
template <class T>
void ema_blend(ComponentParams<T>& frozen, const ComponentParams<T>& counterpart, double w) {
    const T a = static_cast<T>(w), b = static_cast<T>(1.0 - w);
    for (std::size_t i = 0; i < frozen.tensors.size(); ++i) {
        auto& dst = frozen.tensors[i].second;
        const auto& src = counterpart.tensors[i].second;
        require_same_shape(dst.shape(), src.shape(), "ema_update");
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = a * dst[j] + b * src[j];
    }
}

/// Component-wise EMA: branch 1's encoder tracks branch 2's learned encoder,
/// branch 2's decoder tracks branch 1's learned decoder.
template <class T>
void ema_update(BranchPair<T>& s, double w) {
    if (!(w >= 0 && w <= 1)) throw std::invalid_argument("EMA weight must be in [0, 1]");
    ema_blend(s.b1_enc, s.b2_enc, w);
    ema_blend(s.b2_dec, s.b1_dec, w);
}

// ---------------------------------------------------------------------------
// Branch construction

template <class T>
BranchPair<T> init_duet(const std::pair<ComponentParams<T>, ComponentParams<T>>& pretrained) {
    if (!(pretrained.first.config == pretrained.second.config))
        throw std::invalid_argument("init_duet: encoder and decoder come from different model configs");
    return {pretrained.first, pretrained.second, pretrained.first, pretrained.second};
}

/// Branch 1 from one pretrained model, branch 2 from another.
template <class T>
BranchPair<T> init_duet(const std::pair<ComponentParams<T>, ComponentParams<T>>& a,
                        const std::pair<ComponentParams<T>, ComponentParams<T>>& b) {
    if (!(a.first.config == b.first.config) || !(a.first.config == a.second.config) || !(b.first.config == b.second.config))
        throw std::invalid_argument("init_duet: components come from different model configs");
    return {a.first, a.second, b.first, b.second};
}

template <class T>
TrainState<T> make_state(BranchPair<T> b) {
    TrainState<T> s;
    s.branches = std::move(b);
    return s;
}

namespace detail {

inline void check_finite(double v, const char* term) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss in term '") + term + "'");
}

template <class T>
Tensor<T> mix_batch(const Tensor<T>& x, const std::vector<CutMixMask>& masks) {
    if (masks.size() == 1) return pairwise_mix(x, masks[0]);
    // Per-item masks: item i uses masks[i].
    Tensor<T> out(x.shape());
    const std::size_t per = x.stride0();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Tensor<T> m = pairwise_mix(x, masks[i]);
        std::copy(m.data() + i * per, m.data() + (i + 1) * per, out.data() + i * per);
    }
    return out;
}

template <class T>
PseudoLabel<T> pseudo_labels(const Tensor<T>& p, const std::vector<CutMixMask>& masks) {
    if (masks.size() == 1) return build_pseudo_labels(p, masks[0]);
    PseudoLabel<T> out;
    out.soft = mix_batch(p, masks);
    out.hard = argmax_channels(out.soft);
    PseudoLabel<T> tmp = build_pseudo_labels(out.soft, CutMixMask::filled(masks[0].shape, 1));
    out.confidence = std::move(tmp.confidence);
    return out;
}

}  // namespace detail

/// Everything a single optimization step produces before EMA.
template <class T>
struct StepResult {
    LossBreakdown losses;
    GradNorms grad_norms;
};

/// Steps (a)-(e): losses, gradients on the learned components, SGD.
/// Frozen components are bound as constants and never receive gradients.
template <class T>
StepResult<T> optimize_step(TrainState<T>& state, const Batch<T>& labeled, const Batch<T>& unlabeled, const TrainConfig& cfg,
                            const AblationFlags& flags, Rng& rng) {
    flags.validate();
    BranchPair<T>& br = state.branches;
    const double ramp = cfg.unsup_rampup == 0 ? 1.0 : std::min(1.0, static_cast<double>(state.iter) / static_cast<double>(cfg.unsup_rampup));
    LossWeights w;
    w.alpha = cfg.alpha * ramp;
    w.beta = cfg.beta * ramp;

    const auto b1e = bind(br.b1_enc, false);
    const auto b1d = bind(br.b1_dec, true);
    const auto b2e = bind(br.b2_enc, true);
    const auto b2d = bind(br.b2_dec, false);
    const auto none = DropoutSpec::none();

    LossTerms<T> terms;
    // (a) supervised paths: frozen enc -> learned dec, learned enc -> frozen dec
    {
        const auto xl = Var<T>::constant(labeled.images);
        const auto p1 = forward_decoder(b1d, forward_encoder(b1e, xl, none, true), none, true);
        const auto p2 = forward_decoder(b2d, forward_encoder(b2e, xl, none, true), none, true);
        terms.sup = supervised_loss(p1, p2, labeled.labels, w);
        detail::check_finite(static_cast<double>(terms.sup.value().item()), "sup");
    }

    if (flags.duet || flags.pcmcg) {
        const auto xu = Var<T>::constant(unlabeled.images);
        // Frozen-path references on the clean batch.
        const EncoderOutput<T> enc_t = forward_encoder(b1e, xu, none, true);
        const Tensor<T> p_t = forward_decoder(b2d, forward_encoder(bind(br.b2_enc, false), xu, none, true), none, true).value();

        if (flags.duet) {
            DropoutSpec ds;
            ds.ratio = flags.ddp ? cfg.dropout_ratio : 0.0;
            ds.apply_to_input = flags.ddp;
            ds.apply_to_feature = flags.ddp;
            ds.rng_seed = rng.fork_seed();
            const auto enc_s = forward_encoder(b2e, xu, ds, true);
            const auto p_s = forward_decoder(b1d, enc_t.feature, enc_t.skips, ds, true);
            const auto duet = duet_loss(enc_s.feature, enc_t.feature.value(), p_s, p_t, w, cfg.soft_targets);
            terms.duet_feature = duet.feature;
            terms.duet_pred = duet.pred;
            detail::check_finite(static_cast<double>(duet.feature.value().item()), "duet_feature");
            detail::check_finite(static_cast<double>(duet.pred.value().item()), "duet_pred");
        }

        if (flags.pcmcg) {
            const Extent ext{unlabeled.images.dim(4), unlabeled.images.dim(3), unlabeled.images.dim(2)};
            std::vector<CutMixMask> masks;
            const std::size_t n_masks = cfg.per_sample_mask ? unlabeled.images.dim(0) : 1;
            for (std::size_t i = 0; i < n_masks; ++i) masks.push_back(sample_cutmix_mask(ext, rng, cfg.cutmix_lo, cfg.cutmix_hi));
            const auto xcm = Var<T>::constant(detail::mix_batch(unlabeled.images, masks));
            const auto p1_cm = forward_decoder(b1d, forward_encoder(b1e, xcm, none, true), none, true);
            const auto p2_cm = forward_decoder(b2d, forward_encoder(b2e, xcm, none, true), none, true);
            // Predictions on the original batch, without gradients. Branch 2's
            // clean prediction is exactly the duet reference p_t.
            const Tensor<T> p1_mu = forward_decoder(bind(br.b1_dec, false), enc_t, none, true).value();
            PseudoLabel<T> pl1 = detail::pseudo_labels(p1_mu, masks);
            PseudoLabel<T> pl2 = detail::pseudo_labels(p_t, masks);
            if (flags.cm) {
                // Frozen encoder of branch 1 -> frozen decoder of branch 2, on the mixed layout.
                const Tensor<T> p_cons = forward_decoder(b2d, enc_t, none, false).value();
                const Tensor<T> p_cons_mixed = detail::mix_batch(p_cons, masks);
                pl1 = refine_pseudo_labels(pl1, p_cons_mixed, cfg.gating);
                pl2 = refine_pseudo_labels(pl2, p_cons_mixed, cfg.gating);
            }
            terms.cm = cross_guidance_loss(p1_cm, p2_cm, pl2, pl1, cfg.gating == Gating::soft && flags.cm);
            detail::check_finite(static_cast<double>(terms.cm.value().item()), "cm");
        }
    }

    auto [total, breakdown] = compose_total(terms, w, flags);
    detail::check_finite(breakdown.total, "total");

    const auto grads = gradients(total, {&b1d, &b2e});
    StepResult<T> r;
    r.losses = breakdown;
    r.grad_norms.b1_dec = sgd_update(br.b1_dec, state.opt_b1_dec, grads[0], cfg);
    r.grad_norms.b2_enc = sgd_update(br.b2_enc, state.opt_b2_enc, grads[1], cfg);
    return r;
}

/// One full iteration: optimize_step followed by the component-wise EMA.
template <class T>
StepLog train_step(TrainState<T>& state, const Batch<T>& labeled, const Batch<T>& unlabeled, const TrainConfig& cfg,
                   const AblationFlags& flags, Rng& rng) {
    const auto r = optimize_step(state, labeled, unlabeled, cfg, flags, rng);
    StepLog log;
    log.iter = ++state.iter;
    log.losses = r.losses;
    log.grad_norms = r.grad_norms;
    log.frozen_before = state.branches.frozen_fingerprints();
    ema_update(state.branches, cfg.ema_w);
    log.frozen_fingerprints = state.branches.frozen_fingerprints();
    return log;
}

// ---------------------------------------------------------------------------
// Single-model supervised training (pretraining and the supervised baseline)

template <class T>
struct SingleModel {
    ComponentParams<T> enc, dec;
    SgdState<T> opt_enc, opt_dec;
};

template <class T>
double supervised_step(SingleModel<T>& m, const Batch<T>& batch, const TrainConfig& cfg) {
    const auto be = bind(m.enc, true);
    const auto bd = bind(m.dec, true);
    const auto none = DropoutSpec::none();
    const auto p = forward_decoder(bd, forward_encoder(be, batch.images, none, true), none, true);
    const auto loss = sup_term(p, batch.labels);
    const double v = static_cast<double>(loss.value().item());
    detail::check_finite(v, "sup");
    const auto g = gradients(loss, {&be, &bd});
    sgd_update(m.enc, m.opt_enc, g[0], cfg);
    sgd_update(m.dec, m.opt_dec, g[1], cfg);
    return v;
}

/// Supervised-only training of one model from `seed` for cfg.iters_pretrain steps.
template <class T>
std::pair<ComponentParams<T>, ComponentParams<T>> pretrain(const TrainConfig& cfg, const ModelConfig& mc,
                                                           const PatchSampler<T>& labeled, std::uint64_t seed) {
    auto [enc, dec] = init_model<T>(mc, seed);
    SingleModel<T> m{std::move(enc), std::move(dec), {}, {}};
    Rng rng(seed ^ 0x70726574726169ULL);
    for (std::size_t it = 0; it < cfg.iters_pretrain; ++it) supervised_step(m, labeled.next(cfg.batch_labeled, rng), cfg);
    return {std::move(m.enc), std::move(m.dec)};
}

// ---------------------------------------------------------------------------
// Inference

namespace detail {
inline std::vector<std::size_t> window_starts(std::size_t n, std::size_t patch, std::size_t stride) {
    std::vector<std::size_t> s;
    if (n <= patch) return {0};
    for (std::size_t p = 0; p + patch < n; p += stride) s.push_back(p);
    s.push_back(n - patch);
    return s;
}
}  // namespace detail

/// Sliding-window class probabilities through an encoder/decoder pair
/// (eval mode). Windows of side `patch` step by patch/2; overlaps are averaged.
/// Axes shorter than the patch are zero-padded and cropped back.
template <class T>
Tensor<T> sliding_window_probs(const ComponentParams<T>& enc, const ComponentParams<T>& dec, const Volume& v, std::size_t patch) {
    const std::size_t c = dec.config.n_classes;
    std::array<std::size_t, 3> pad_before{}, padded{};
    for (std::size_t a = 0; a < 3; ++a) {
        padded[a] = std::max(v.shape[a], patch);
        pad_before[a] = (padded[a] - v.shape[a]) / 2;
    }
    const Extent pe{padded[0], padded[1], padded[2]};
    Volume pv(pe, v.spacing, 0.0f);
    for (std::size_t k = 0; k < v.shape.z; ++k)
        for (std::size_t j = 0; j < v.shape.y; ++j)
            for (std::size_t i = 0; i < v.shape.x; ++i) pv.at(i + pad_before[0], j + pad_before[1], k + pad_before[2]) = v.at(i, j, k);

    std::vector<double> acc(c * pe.voxels(), 0.0);
    std::vector<double> cnt(pe.voxels(), 0.0);
    const std::size_t stride = std::max<std::size_t>(1, patch / 2);
    const auto be = bind(enc, false);
    const auto bd = bind(dec, false);
    const auto xs = detail::window_starts(pe.x, patch, stride), ys = detail::window_starts(pe.y, patch, stride),
               zs = detail::window_starts(pe.z, patch, stride);
    for (std::size_t oz : zs)
        for (std::size_t oy : ys)
            for (std::size_t ox : xs) {
                Tensor<T> x({1, 1, patch, patch, patch});
                for (std::size_t k = 0; k < patch; ++k)
                    for (std::size_t j = 0; j < patch; ++j)
                        for (std::size_t i = 0; i < patch; ++i)
                            x[i + patch * (j + patch * k)] = static_cast<T>(pv.at(ox + i, oy + j, oz + k));
                const auto p = forward_decoder(bd, forward_encoder(be, x, DropoutSpec::none(), false), DropoutSpec::none(), false);
                const std::size_t pv3 = patch * patch * patch;
                for (std::size_t k = 0; k < patch; ++k)
                    for (std::size_t j = 0; j < patch; ++j)
                        for (std::size_t i = 0; i < patch; ++i) {
                            const std::size_t dst = pe.index(ox + i, oy + j, oz + k), src = i + patch * (j + patch * k);
                            cnt[dst] += 1.0;
                            for (std::size_t ch = 0; ch < c; ++ch) acc[ch * pe.voxels() + dst] += static_cast<double>(p.value()[ch * pv3 + src]);
                        }
            }
    Tensor<T> out({1, c, v.shape.z, v.shape.y, v.shape.x});
    const std::size_t vv = v.shape.voxels();
    for (std::size_t k = 0; k < v.shape.z; ++k)
        for (std::size_t j = 0; j < v.shape.y; ++j)
            for (std::size_t i = 0; i < v.shape.x; ++i) {
                const std::size_t src = pe.index(i + pad_before[0], j + pad_before[1], k + pad_before[2]);
                for (std::size_t ch = 0; ch < c; ++ch)
                    out[ch * vv + v.shape.index(i, j, k)] = static_cast<T>(acc[ch * pe.voxels() + src] / cnt[src]);
            }
    return out;
}

/// Segment a (normalized) volume with the frozen-encoder -> frozen-decoder path.
template <class T>
LabelMask infer(const BranchPair<T>& s, const Volume& v, std::size_t patch) {
    const Tensor<T> probs = sliding_window_probs(s.b1_enc, s.b2_dec, v, patch);
    const Labels lab = argmax_channels(probs);
    LabelMask m(v.shape, static_cast<int>(s.b2_dec.config.n_classes));
    for (std::size_t i = 0; i < lab.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(lab[i]);
    return m;
}

template <class T>
MetricsReport evaluate(const BranchPair<T>& s, const std::vector<const PreparedCase*>& cases, std::size_t patch) {
    std::vector<CaseMetrics> out;
    for (const auto* c : cases) {
        if (!c->mask) throw std::invalid_argument("evaluation case " + c->id + " has no mask");
        out.push_back(evaluate_case(c->id, infer(s, c->volume, patch), *c->mask, c->volume.spacing));
    }
    return summarize(std::move(out));
}

template <class T>
double mean_dice(const BranchPair<T>& s, const std::vector<const PreparedCase*>& cases, std::size_t patch) {
    double d = 0;
    for (const auto* c : cases) d += dice_coefficient(infer(s, c->volume, patch), *c->mask);
    return cases.empty() ? 0.0 : d / static_cast<double>(cases.size());
}

// ---------------------------------------------------------------------------
// Training loop

struct History {
    std::vector<StepLog> steps;
    std::vector<std::pair<std::size_t, double>> val_dice;  // (iteration, mean validation Dice)
};

template <class T>
struct TrainResult {
    BranchPair<T> best;
    std::size_t best_iter = 0;
    double best_val = std::numeric_limits<double>::quiet_NaN();
    History history;
};

/// Prepared cases indexed by id.
class CaseStore {
public:
    CaseStore() = default;
    explicit CaseStore(const std::vector<Case>& cases) {
        for (const auto& c : cases) add(c);
    }
    void add(const Case& c) { cases_.emplace(c.id, prepare_case(c)); }

    const PreparedCase& get(const std::string& id) const {
        auto it = cases_.find(id);
        if (it == cases_.end()) throw std::invalid_argument("unknown case id " + id);
        return it->second;
    }

    std::vector<const PreparedCase*> select(const std::vector<std::string>& ids) const {
        std::vector<const PreparedCase*> out;
        for (const auto& id : ids) out.push_back(&get(id));
        return out;
    }

private:
    std::map<std::string, PreparedCase> cases_;
};

/// Pretrain, build the branch pair, run cfg.iters_main steps, validate every
/// cfg.val_every steps and keep the best-scoring state. With no validation
/// point (or no validation cases) the final state is returned.
template <class T>
TrainResult<T> run_training(const TrainConfig& cfg, const AblationFlags& flags, const ModelConfig& mc, const CaseStore& store,
                            const DatasetSplit& split, std::ostream* step_log = nullptr) {
    cfg.validate();
    flags.validate();
    mc.validate();
    if (split.train_labeled.empty()) throw std::invalid_argument("training needs at least one labeled case");
    if (cfg.patch % mc.side_multiple() != 0)
        throw ConfigError("patch " + std::to_string(cfg.patch) + " is not divisible by " + std::to_string(mc.side_multiple()));

    const PatchSampler<T> lab(store.select(split.train_labeled), cfg.patch, true, cfg.augment);
    // Unlabeled batches never see masks; fall back to labeled images when no unlabeled cases exist.
    const PatchSampler<T> unl(store.select(split.train_unlabeled.empty() ? split.train_labeled : split.train_unlabeled), cfg.patch,
                              false, cfg.augment);
    const auto val = store.select(split.val);

    TrainResult<T> res;
    if (cfg.method == Method::supervised) {
        // One model, supervised throughout; all four slots hold it for inference.
        auto [enc, dec] = pretrain<T>(cfg, mc, lab, cfg.seed);
        SingleModel<T> m{std::move(enc), std::move(dec), {}, {}};
        Rng rng(cfg.seed ^ 0x6d61696eULL);
        BranchPair<T> current = init_duet(std::pair{m.enc, m.dec});
        res.best = current;
        for (std::size_t it = 1; it <= cfg.iters_main; ++it) {
            StepLog log;
            log.iter = it;
            log.losses.sup = log.losses.total = supervised_step(m, lab.next(cfg.batch_labeled, rng), cfg);
            if (step_log) *step_log << step_to_json(log).dump() << '\n';
            res.history.steps.push_back(log);
            if (it % cfg.val_every == 0 || it == cfg.iters_main) current = init_duet(std::pair{m.enc, m.dec});
            if (it % cfg.val_every == 0 && !val.empty()) {
                const double d = mean_dice(current, val, cfg.patch);
                res.history.val_dice.emplace_back(it, d);
                if (!(d <= res.best_val)) {
                    res.best_val = d;
                    res.best = current;
                    res.best_iter = it;
                }
            }
        }
        if (res.history.val_dice.empty()) {
            res.best = current;
            res.best_iter = cfg.iters_main;
        }
        return res;
    }

    BranchPair<T> init;
    if (cfg.pretrain_mode == PretrainMode::dual_seed)
        init = init_duet(pretrain<T>(cfg, mc, lab, cfg.seed), pretrain<T>(cfg, mc, lab, cfg.seed + 1));
    else
        init = init_duet(pretrain<T>(cfg, mc, lab, cfg.seed));

    TrainState<T> state = make_state(std::move(init));
    res.best = state.branches;
    Rng rng(cfg.seed ^ 0x6d61696eULL);
    for (std::size_t it = 1; it <= cfg.iters_main; ++it) {
        const Batch<T> lb = lab.next(cfg.batch_labeled, rng);
        const Batch<T> ub = unl.next(cfg.batch_unlabeled, rng);
        StepLog log = train_step(state, lb, ub, cfg, flags, rng);
        if (step_log) *step_log << step_to_json(log).dump() << '\n';
        res.history.steps.push_back(log);
        if (it % cfg.val_every == 0 && !val.empty()) {
            const double d = mean_dice(state.branches, val, cfg.patch);
            res.history.val_dice.emplace_back(it, d);
            if (!(d <= res.best_val)) {
                res.best_val = d;
                res.best = state.branches;
                res.best_iter = it;
            }
        }
    }
    if (res.history.val_dice.empty()) {
        res.best = state.branches;
        res.best_iter = cfg.iters_main;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
    std::string name;
    AblationFlags flags;
    MeanStd dice, jaccard, hd95, asd;
};

/// The five component configurations, from the plain dual-branch baseline to the full method.
inline std::vector<std::pair<std::string, AblationFlags>> ablation_rows() {
    return {{"baseline", {true, false, false, false}},
            {"+DDP", {true, true, false, false}},
            {"+PCMCG", {true, false, true, false}},
            {"+DDP+PCMCG", {true, true, true, false}},
            {"+all", {true, true, true, true}}};
}

/// Labeled subset for fold k: a window of |train_labeled| ids rotated through
/// the masked training pool; the rest of the pool is unlabeled.
inline DatasetSplit fold_split(const DatasetSplit& base, const CaseStore& store, std::size_t fold) {
    std::vector<std::string> pool;
    for (const auto& id : base.train_labeled) pool.push_back(id);
    for (const auto& id : base.train_unlabeled)
        if (store.get(id).mask) pool.push_back(id);
    const std::size_t n = base.train_labeled.size();
    DatasetSplit s = base;
    s.train_labeled.clear();
    std::vector<bool> used(pool.size(), false);
    for (std::size_t j = 0; j < n && j < pool.size(); ++j) {
        const std::size_t idx = (fold * n + j) % pool.size();
        if (used[idx]) break;
        used[idx] = true;
        s.train_labeled.push_back(pool[idx]);
    }
    s.train_unlabeled.clear();
    for (std::size_t i = 0; i < pool.size(); ++i)
        if (!used[i]) s.train_unlabeled.push_back(pool[i]);
    for (const auto& id : base.train_unlabeled)
        if (!store.get(id).mask) s.train_unlabeled.push_back(id);
    return s;
}

template <class T>
std::vector<AblationRow> run_ablation(const TrainConfig& cfg, const ModelConfig& mc, const CaseStore& store, const DatasetSplit& split,
                                      std::size_t folds) {
    if (folds < 1) throw std::invalid_argument("folds must be >= 1");
    std::vector<AblationRow> rows;
    const auto test = store.select(split.test);
    for (const auto& [name, flags] : ablation_rows()) {
        std::vector<double> d, j, h, a;
        for (std::size_t k = 0; k < folds; ++k) {
            TrainConfig c = cfg;
            c.method = Method::duetmatch;
            c.seed = cfg.seed + k;
            const auto res = run_training<T>(c, flags, mc, store, fold_split(split, store, k));
            const auto m = evaluate(res.best, test, c.patch);
            d.push_back(m.dice_pct);
            j.push_back(m.jaccard_pct);
            h.push_back(m.hd95_mm);
            a.push_back(m.asd_mm);
        }
        rows.push_back({name, flags, mean_std(d), mean_std(j), mean_std(h), mean_std(a)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints: one file per slot plus manifest.json.

inline const std::array<const char*, 4>& slot_names() {
    static const std::array<const char*, 4> n{"b1_enc", "b1_dec", "b2_enc", "b2_dec"};
    return n;
}

template <class T>
void save_checkpoint(const BranchPair<T>& s, const std::filesystem::path& dir, std::size_t iteration, std::size_t patch) {
    std::filesystem::create_directories(dir);
    const std::array<const ComponentParams<T>*, 4> slots{&s.b1_enc, &s.b1_dec, &s.b2_enc, &s.b2_dec};
    const std::array<bool, 4> frozen{true, false, false, true};
    nlohmann::json man;
    man["iteration"] = iteration;
    man["patch"] = patch;
    const ModelConfig& mc = s.b1_enc.config;
    man["config"] = {{"in_channels", mc.in_channels}, {"n_classes", mc.n_classes}, {"base_channels", mc.base_channels}, {"depth", mc.depth}};
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string file = std::string(slot_names()[i]) + ".dmcp";
        save_component(*slots[i], dir / file);
        // Fingerprint of the stored f32 values, so a reload can be verified.
        const auto stored = slots[i]->template cast<float>();
        man["slots"][slot_names()[i]] = {{"file", file},
                                         {"role", role_name(slots[i]->role)},
                                         {"frozen", frozen[i]},
                                         {"fingerprint", fingerprint_hex(stored.fingerprint())}};
    }
    std::ofstream os(dir / "manifest.json");
    os << man.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("no manifest.json in " + dir.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeaderError("manifest.json: " + std::string(e.what()));
    }
}

/// Patch side the checkpoint was trained with.
inline std::size_t checkpoint_patch(const std::filesystem::path& dir) { return read_manifest(dir).at("patch").get<std::size_t>(); }

template <class T>
BranchPair<T> load_checkpoint(const std::filesystem::path& dir) {
    const nlohmann::json man = read_manifest(dir);
    BranchPair<T> s;
    std::array<ComponentParams<T>*, 4> slots{&s.b1_enc, &s.b1_dec, &s.b2_enc, &s.b2_dec};
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& entry = man.at("slots").at(slot_names()[i]);
        auto f = load_component<float>(dir / entry.at("file").get<std::string>());
        if (fingerprint_hex(f.fingerprint()) != entry.at("fingerprint").get<std::string>())
            throw IoError(std::string("checkpoint slot ") + slot_names()[i] + " does not match its manifest fingerprint");
        *slots[i] = f.template cast<T>();
    }
    return s;
}

}  // namespace duetmatch

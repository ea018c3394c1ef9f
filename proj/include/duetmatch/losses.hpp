#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "error.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace duetmatch {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceEps = 1e-5;

struct LossWeights {
    double alpha = 0.5;  // feature term of the duet loss
    double beta = 0.5;   // cross-guidance term
    double sup_mix[2] = {0.5, 0.5};

    void validate() const {
        if (alpha < 0) throw ConfigError("alpha must be >= 0");
        if (beta < 0) throw ConfigError("beta must be >= 0");
        if (std::abs(sup_mix[0] + sup_mix[1] - 1.0) > 1e-12) throw ConfigError("sup_mix must sum to 1");
    }
};

/// Which unsupervised terms take part in the objective.
/// `duet` enables the frozen/learned matching term, `ddp` adds dropout to it,
/// `pcmcg` enables CutMix cross-guidance, `cm` refines its pseudo-labels.
struct AblationFlags {
    bool duet = true;
    bool ddp = true;
    bool pcmcg = true;
    bool cm = true;

    static AblationFlags none() { return {false, false, false, false}; }
    static AblationFlags full() { return {}; }

    void validate() const {
        if (cm && !pcmcg) throw ConfigError("flags.cm = true requires flags.pcmcg = true");
        if (ddp && !duet) throw ConfigError("flags.ddp = true requires flags.duet = true");
    }

    bool operator==(const AblationFlags&) const = default;
};

struct LossBreakdown {
    double sup = 0;
    double duet_feature = 0;
    double duet_pred = 0;
    double cm = 0;
    double total = 0;
};

namespace detail {

template <class T>
void check_probs_labels(const Shape& ps, const Shape& ls, const char* what) {
    if (ps.size() < 2) throw ShapeError(std::string(what) + ": probabilities must be [N, C, ...], got " + shape_str(ps));
    require_same_shape(drop_channel(ps), ls, what);
}

}  // namespace detail

/// Mean over voxels of -w * log p[target], probabilities clamped at 1e-7.
/// Without `weights` every voxel counts once.
template <class T>
Var<T> cross_entropy(const Var<T>& p, const Labels& target, const Tensor<T>* weights = nullptr) {
    detail::check_probs_labels<T>(p.shape(), target.shape(), "cross_entropy");
    if (weights) require_same_shape(weights->shape(), target.shape(), "cross_entropy weights");
    const Tensor<T> wt = weights ? *weights : Tensor<T>();
    const std::size_t n = p.shape()[0], c = p.shape()[1], v = p.value().spatial();
    const T clamp = static_cast<T>(kProbClamp);
    double acc = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < v; ++i) {
            const int t = target[b * v + i];
            if (t < 0 || static_cast<std::size_t>(t) >= c) throw std::out_of_range("cross_entropy: label out of range");
            const double wv = wt.empty() ? 1.0 : static_cast<double>(wt[b * v + i]);
            acc -= wv * std::log(static_cast<double>(std::max(p.value()[(b * c + static_cast<std::size_t>(t)) * v + i], clamp)));
        }
    const double count = static_cast<double>(n * v);
    return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc / count)), {p}, [p, target, wt, n, c, v, count, clamp](Node<T>& self) {
        const T g = self.grad[0] / static_cast<T>(count);
        T* dp = p.get()->grad_buffer().data();
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < v; ++i) {
                const std::size_t idx = (b * c + static_cast<std::size_t>(target[b * v + i])) * v + i;
                const T pv = p.value()[idx];
                const T wv = wt.empty() ? T{1} : wt[b * v + i];
                if (pv > clamp) dp[idx] -= g * wv / pv;
            }
    });
}

/// Cross-entropy against a soft target distribution q (same shape as p).
template <class T>
Var<T> cross_entropy_soft(const Var<T>& p, const Tensor<T>& q) {
    require_same_shape(p.shape(), q.shape(), "cross_entropy_soft");
    const std::size_t n = p.shape()[0], v = p.value().spatial();
    const T clamp = static_cast<T>(kProbClamp);
    double acc = 0;
    for (std::size_t i = 0; i < p.value().size(); ++i)
        acc -= static_cast<double>(q[i]) * std::log(static_cast<double>(std::max(p.value()[i], clamp)));
    const double count = static_cast<double>(n * v);
    return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc / count)), {p}, [p, q, count, clamp](Node<T>& self) {
        const T g = self.grad[0] / static_cast<T>(count);
        T* dp = p.get()->grad_buffer().data();
        for (std::size_t i = 0; i < q.size(); ++i)
            if (p.value()[i] > clamp) dp[i] -= g * q[i] / p.value()[i];
    });
}

/// Soft Dice loss averaged over batch items and foreground classes:
/// 1 - (2 sum p g + eps) / (sum p + sum g + eps).
template <class T>
Var<T> dice_loss(const Var<T>& p, const Labels& target) {
    detail::check_probs_labels<T>(p.shape(), target.shape(), "dice_loss");
    const std::size_t n = p.shape()[0], c = p.shape()[1], v = p.value().spatial();
    std::vector<double> inter(n * c, 0.0), denom(n * c, 0.0);
    double acc = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t k = 1; k < c; ++k) {
            const T* pk = p.value().data() + (b * c + k) * v;
            double in = 0, sp = 0, sg = 0;
            for (std::size_t i = 0; i < v; ++i) {
                const double g = target[b * v + i] == static_cast<int>(k) ? 1.0 : 0.0;
                in += static_cast<double>(pk[i]) * g;
                sp += static_cast<double>(pk[i]);
                sg += g;
            }
            inter[b * c + k] = 2 * in + kDiceEps;
            denom[b * c + k] = sp + sg + kDiceEps;
            acc += 1.0 - inter[b * c + k] / denom[b * c + k];
        }
    const double terms = static_cast<double>(n * (c - 1));
    return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc / terms)), {p},
                          [p, target, n, c, v, inter, denom, terms](Node<T>& self) {
                              const double g = static_cast<double>(self.grad[0]) / terms;
                              T* dp = p.get()->grad_buffer().data();
                              for (std::size_t b = 0; b < n; ++b)
                                  for (std::size_t k = 1; k < c; ++k) {
                                      const double num = inter[b * c + k], den = denom[b * c + k];
                                      T* d = dp + (b * c + k) * v;
                                      for (std::size_t i = 0; i < v; ++i) {
                                          const double gt = target[b * v + i] == static_cast<int>(k) ? 1.0 : 0.0;
                                          d[i] -= static_cast<T>(g * (2 * gt * den - num) / (den * den));
                                      }
                                  }
                          });
}

/// Mean squared difference; `b` is a constant target.
template <class T>
Var<T> mse_feature(const Var<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mse_feature");
    double acc = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    const double count = static_cast<double>(b.size());
    return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc / count)), {a}, [a, b, count](Node<T>& self) {
        const T g = static_cast<T>(2.0) * self.grad[0] / static_cast<T>(count);
        T* da = a.get()->grad_buffer().data();
        for (std::size_t i = 0; i < b.size(); ++i) da[i] += g * (a.value()[i] - b[i]);
    });
}

template <class T>
Var<T> mse_feature(const Var<T>& a, const Var<T>& b) {
    return mse_feature(a, b.value());
}

/// CE + Dice for one prediction path.
template <class T>
Var<T> sup_term(const Var<T>& p, const Labels& y) {
    return ops::weighted_sum<T>({cross_entropy(p, y), dice_loss(p, y)}, {T{1}, T{1}});
}

/// Mix of the two path losses, equal weights by default.
template <class T>
Var<T> supervised_loss(const Var<T>& p1, const Var<T>& p2, const Labels& y, const LossWeights& w = {}) {
    return ops::weighted_sum<T>({sup_term(p1, y), sup_term(p2, y)},
                                {static_cast<T>(w.sup_mix[0]), static_cast<T>(w.sup_mix[1])});
}

template <class T>
struct DuetLoss {
    Var<T> total;
    Var<T> feature;  // mse_feature(F_s, F_t)
    Var<T> pred;     // CE(P_s, target derived from P_t)
};

/// alpha * MSE(F_s, F_t) + CE(P_s, argmax P_t). F_t and P_t are treated as
/// constants. With `soft_targets` the prediction term uses P_t directly.
template <class T>
DuetLoss<T> duet_loss(const Var<T>& f_s, const Tensor<T>& f_t, const Var<T>& p_s, const Tensor<T>& p_t,
                      const LossWeights& w, bool soft_targets = false) {
    require_same_shape(p_s.shape(), p_t.shape(), "duet_loss predictions");
    DuetLoss<T> out;
    out.feature = mse_feature(f_s, f_t);
    out.pred = soft_targets ? cross_entropy_soft(p_s, p_t) : cross_entropy(p_s, argmax_channels(p_t));
    out.total = ops::weighted_sum<T>({out.feature, out.pred}, {static_cast<T>(w.alpha), T{1}});
    return out;
}

/// Loss terms of one step, any of which may be absent.
template <class T>
struct LossTerms {
    Var<T> sup;
    Var<T> duet_feature;
    Var<T> duet_pred;
    Var<T> cm;
};

/// Scalar form: total = sup + (alpha*duet_feature + duet_pred) + beta*cm,
/// with disabled terms reported and counted as exactly 0.
inline LossBreakdown compose_total(const LossBreakdown& parts, const LossWeights& w, const AblationFlags& flags) {
    LossBreakdown b;
    b.sup = parts.sup;
    b.duet_feature = flags.duet ? parts.duet_feature : 0.0;
    b.duet_pred = flags.duet ? parts.duet_pred : 0.0;
    b.cm = flags.pcmcg ? parts.cm : 0.0;
    b.total = b.sup + (w.alpha * b.duet_feature + b.duet_pred) + w.beta * b.cm;
    return b;
}

/// Graph form of compose_total; returns the differentiable total and its breakdown.
template <class T>
std::pair<Var<T>, LossBreakdown> compose_total(const LossTerms<T>& terms, const LossWeights& w, const AblationFlags& flags) {
    std::vector<Var<T>> vars{terms.sup};
    std::vector<T> coefs{T{1}};
    LossBreakdown parts;
    parts.sup = static_cast<double>(terms.sup.value().item());
    if (flags.duet) {
        vars.push_back(terms.duet_feature);
        coefs.push_back(static_cast<T>(w.alpha));
        vars.push_back(terms.duet_pred);
        coefs.push_back(T{1});
        parts.duet_feature = static_cast<double>(terms.duet_feature.value().item());
        parts.duet_pred = static_cast<double>(terms.duet_pred.value().item());
    }
    if (flags.pcmcg) {
        vars.push_back(terms.cm);
        coefs.push_back(static_cast<T>(w.beta));
        parts.cm = static_cast<double>(terms.cm.value().item());
    }
    return {ops::weighted_sum<T>(std::move(vars), std::move(coefs)), compose_total(parts, w, flags)};
}

}  // namespace duetmatch

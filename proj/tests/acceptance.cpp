// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance --workdir DIR [--only 1,4,9]
//
// Criteria 7-9 drive the duetmatch executable; the rest call the library.
#include <CLI11.hpp>

#include <duetmatch/duetmatch.hpp>
#include <duetmatch/pipeline.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "oracles.hpp"

using namespace duetmatch;
namespace fs = std::filesystem;

namespace {

// Synthetic benchmark shared by criteria 6 and 7.
constexpr double kNoise = 1.0;
constexpr double kJitter = 0.5;
constexpr int kLesions = 2;
constexpr std::uint64_t kDataSeedBase = 1234;
// Mean test-Dice gain of DuetMatch over supervised-only required for criterion 6 (Dice points).
constexpr double kBenefitMargin = 2.0;

struct Outcome {
    bool pass = true;
    std::string detail;
};

fs::path g_work;

// Record a failed check; keeps the first few messages.
struct Checker {
    Outcome out;
    int failures = 0;
    void expect(bool ok, const std::string& what) {
        if (ok) return;
        out.pass = false;
        if (++failures <= 3) out.detail += (out.detail.empty() ? "" : "; ") + what;
    }
    Outcome done(const std::string& summary) {
        if (out.pass) out.detail = summary;
        else if (failures > 3) out.detail += "; +" + std::to_string(failures - 3) + " more";
        return out;
    }
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    for (std::string l; std::getline(is, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

int run_cli(const std::string& args, const std::string& log_name) {
    const std::string cmd = std::string(DUETMATCH_CLI_PATH) + " " + args + " > " + (g_work / (log_name + ".log")).string() + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

fs::path fresh(const std::string& name) {
    const auto d = g_work / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::vector<Case> benchmark_cases(std::uint64_t seed) {
    PhantomOptions opt;
    opt.contrast_jitter = kJitter;
    return generate_dataset(90, kDataSeedBase + seed, Extent::cube(32), kLesions, kNoise, opt);
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome check_gradients() {
    using V = Var<double>;
    Checker c;
    Rng rng(101);
    const int coords = 25;
    double worst = 0;
    auto check = [&](const std::string& name, double err) {
        worst = std::max(worst, err);
        c.expect(err <= 1e-4, name + " rel err " + fmt(err));
    };
    const auto y = oracle::random_labels(2, 3, 4, rng);
    const auto p = oracle::random_probs(2, 3, 4, rng);
    check("CE", oracle::max_fd_error(p, [&](const V& v) { return cross_entropy(v, y); }, rng, coords));
    check("Dice", oracle::max_fd_error(p, [&](const V& v) { return dice_loss(v, y); }, rng, coords));

    Tensor<double> fa({2, 8, 2, 2, 2}), fb({2, 8, 2, 2, 2});
    for (auto& v : fa.vec()) v = rng.normal();
    for (auto& v : fb.vec()) v = rng.normal();
    check("MSE", oracle::max_fd_error(fa, [&](const V& v) { return mse_feature(v, fb); }, rng, coords));

    // Duet loss through both of its graph inputs, hard and soft targets.
    const auto ps = oracle::random_probs(2, 2, 2, rng), pt = oracle::random_probs(2, 2, 2, rng);
    const LossWeights w;
    for (bool soft : {false, true}) {
        const std::string tag = soft ? "duet(soft)" : "duet";
        check(tag + " wrt feature",
              oracle::max_fd_error(fa, [&](const V& v) { return duet_loss(v, fb, V::constant(ps), pt, w, soft).total; }, rng, coords));
        check(tag + " wrt prediction",
              oracle::max_fd_error(ps, [&](const V& v) { return duet_loss(V::constant(fa), fb, v, pt, w, soft).total; }, rng, coords));
    }

    // Cross-guidance with pseudo-labels built from a real CutMix layout, hard and soft-gated.
    const Extent e = Extent::cube(4);
    const auto m = sample_cutmix_mask(e, rng);
    const auto pl1 = build_pseudo_labels(oracle::random_probs(2, 2, 4, rng), m);
    const auto pl2 = build_pseudo_labels(oracle::random_probs(2, 2, 4, rng), m);
    const auto q1 = oracle::random_probs(2, 2, 4, rng), q2 = oracle::random_probs(2, 2, 4, rng);
    for (bool weighted : {false, true}) {
        const std::string tag = weighted ? "cross-guidance(weighted)" : "cross-guidance";
        check(tag + " wrt p1",
              oracle::max_fd_error(q1, [&](const V& v) { return cross_guidance_loss(v, V::constant(q2), pl2, pl1, weighted); }, rng, coords));
        check(tag + " wrt p2",
              oracle::max_fd_error(q2, [&](const V& v) { return cross_guidance_loss(V::constant(q1), v, pl2, pl1, weighted); }, rng, coords));
    }
    return c.done("5 losses, " + std::to_string(coords) + " coords per input, max rel err " + fmt(worst, 3));
}

// ---------------------------------------------------------------------------
// Small double-precision training setup for criteria 2 and 3.

struct SmallSetup {
    std::vector<Case> cases = generate_dataset(12, 77, Extent::cube(16), 2, 0.5);
    CaseStore store{cases};
    DatasetSplit split = split_dataset(cases, 3, 1, 1, 0);
    ModelConfig model{1, 2, 4, 2};
    TrainConfig cfg = [] {
        TrainConfig t;
        t.patch = 16;
        t.batch_labeled = 2;
        t.batch_unlabeled = 2;
        return t;
    }();
    PatchSampler<double> lab{store.select(split.train_labeled), 16, true, true};
    PatchSampler<double> unl{store.select(split.train_unlabeled), 16, false, true};
};

// ---------------------------------------------------------------------------
// 2. Frozen-parameter contract

Outcome check_frozen_contract() {
    Checker c;
    SmallSetup s;
    auto st = make_state(init_duet(init_model<double>(s.model, 1), init_model<double>(s.model, 2)));
    Rng rng(5), brng(6);
    double worst = 0;
    for (int it = 0; it < 50; ++it) {
        const auto lb = s.lab.next(2, brng), ub = s.unl.next(2, brng);
        const auto before = st.branches;
        const auto r = optimize_step(st, lb, ub, s.cfg, AblationFlags::full(), rng);
        // Between EMA boundaries the frozen slots are untouched.
        c.expect(st.branches.frozen_fingerprints() == before.frozen_fingerprints(), "frozen slot changed by the optimizer step");
        c.expect(st.branches.b1_enc == before.b1_enc && st.branches.b2_dec == before.b2_dec, "frozen tensors changed by the optimizer step");
        c.expect(r.grad_norms.b1_enc == 0 && r.grad_norms.b2_dec == 0, "frozen slot received a gradient");
        c.expect(r.grad_norms.b1_dec > 0 && r.grad_norms.b2_enc > 0, "learned slot received no gradient");
        c.expect(st.opt_b1_dec.velocity.size() == st.branches.b1_dec.tensors.size() &&
                     st.opt_b2_enc.velocity.size() == st.branches.b2_enc.tensors.size(),
                 "optimizer state does not match the learned components");
        const auto learned_b1_dec = st.branches.b1_dec, learned_b2_enc = st.branches.b2_enc;
        ema_update(st.branches, s.cfg.ema_w);
        ++st.iter;
        c.expect(st.branches.b1_dec == learned_b1_dec && st.branches.b2_enc == learned_b2_enc, "EMA modified a learned slot");
        // Elementwise w * old + (1 - w) * counterpart.
        const double w = s.cfg.ema_w;
        for (auto [frozen, old, other] : {std::tuple{&st.branches.b1_enc, &before.b1_enc, &learned_b2_enc},
                                          std::tuple{&st.branches.b2_dec, &before.b2_dec, &learned_b1_dec}}) {
            for (std::size_t i = 0; i < frozen->tensors.size(); ++i)
                for (std::size_t j = 0; j < frozen->tensors[i].second.size(); ++j) {
                    const double want = w * old->tensors[i].second[j] + (1 - w) * other->tensors[i].second[j];
                    worst = std::max(worst, std::abs(frozen->tensors[i].second[j] - want));
                }
        }
        c.expect(st.branches.frozen_fingerprints() != before.frozen_fingerprints(), "EMA left the frozen slots unchanged");
    }
    c.expect(worst <= 1e-12, "EMA deviation " + fmt(worst));

    // The same contract through train_step's logged fingerprints.
    auto st2 = make_state(init_duet(init_model<double>(s.model, 3)));
    Rng rng2(7);
    auto prev = st2.branches.frozen_fingerprints();
    for (int it = 0; it < 5; ++it) {
        const auto log = train_step(st2, s.lab.next(2, rng2), s.unl.next(2, rng2), s.cfg, AblationFlags::full(), rng2);
        c.expect(log.frozen_before == prev, "logged pre-EMA fingerprint differs from the previous post-EMA one");
        prev = log.frozen_fingerprints;
    }
    return c.done("50 steps, max |EMA - (w*old + (1-w)*counterpart)| = " + fmt(worst, 3));
}

// ---------------------------------------------------------------------------
// 3. Loss composition

Outcome check_loss_composition() {
    Checker c;
    SmallSetup s;
    const double a = s.cfg.alpha, b = s.cfg.beta;
    auto identity_err = [&](const LossBreakdown& l) {
        return std::abs(l.total - (l.sup + a * l.duet_feature + l.duet_pred + b * l.cm)) / std::max(1.0, std::abs(l.total));
    };

    // One step from a common state under each flag row.
    const auto base = make_state(init_duet(init_model<double>(s.model, 11), init_model<double>(s.model, 12)));
    Rng brng(13);
    const auto lb = s.lab.next(2, brng), ub = s.unl.next(2, brng);
    auto one = [&](const AblationFlags& f) {
        auto st = base;
        Rng rng(14);
        return train_step(st, lb, ub, s.cfg, f, rng).losses;
    };
    const auto none = one(AblationFlags::none());
    c.expect(none.total == none.sup, "flags off: total != sup");
    c.expect(none.duet_feature == 0 && none.duet_pred == 0 && none.cm == 0, "flags off: inactive terms are non-zero");
    const auto duet = one({true, false, false, false});
    c.expect(duet.sup == none.sup, "duet flag changed the supervised term");
    c.expect(std::abs(duet.total - (duet.sup + a * duet.duet_feature + duet.duet_pred)) <= 1e-12, "duet flag adds more than its term");
    c.expect(duet.cm == 0, "cm active without pcmcg");
    const auto ddp = one({true, true, false, false});
    c.expect(std::abs(ddp.total - (ddp.sup + a * ddp.duet_feature + ddp.duet_pred)) <= 1e-12, "ddp flag adds more than the duet term");
    c.expect(ddp.duet_feature != duet.duet_feature, "ddp flag did not change the duet term");
    const auto pc = one({true, false, true, false});
    c.expect(pc.duet_feature == duet.duet_feature && pc.duet_pred == duet.duet_pred, "pcmcg changed the duet terms");
    c.expect(std::abs(pc.total - (duet.total + b * pc.cm)) <= 1e-12 && pc.cm > 0, "pcmcg flag does not add exactly beta * cm");
    const auto cm = one({true, false, true, true});
    c.expect(std::abs(cm.total - (duet.total + b * cm.cm)) <= 1e-12, "cm flag does not add exactly beta * cm");
    c.expect(cm.cm != pc.cm, "refinement did not change the cross-guidance term");

    // The identity at every logged step of a 200-step run.
    auto st = make_state(init_duet(init_model<double>(s.model, 15)));
    Rng rng(16);
    double worst = 0;
    for (int it = 0; it < 200; ++it) {
        const auto log = train_step(st, s.lab.next(2, rng), s.unl.next(2, rng), s.cfg, AblationFlags::full(), rng);
        const double err = identity_err(log.losses);
        worst = std::max(worst, err);
        c.expect(err <= 1e-12, "step " + std::to_string(it + 1) + " identity error " + fmt(err));
        c.expect(std::isfinite(log.losses.total), "non-finite total at step " + std::to_string(it + 1));
    }
    return c.done("flag rows add exactly their terms; 200 steps, max identity error " + fmt(worst, 3));
}

// ---------------------------------------------------------------------------
// 4. Mixing algebra

Outcome check_mixing_algebra() {
    Checker c;
    Rng rng(401);
    const int n = 1000;
    auto random_batch = [&](std::size_t b, std::size_t ch, Extent e) {
        Tensor<double> t({b, ch, e.z, e.y, e.x});
        for (auto& v : t.vec()) v = rng.normal();
        return t;
    };
    auto random_extent = [&] { return Extent{std::size_t(rng.range(2, 10)), std::size_t(rng.range(2, 10)), std::size_t(rng.range(2, 10))}; };

    for (int rep = 0; rep < n; ++rep) {
        const Extent e = random_extent();
        const std::size_t b = std::size_t(rng.range(1, 6)), ch = std::size_t(rng.range(1, 3));
        const auto x = random_batch(b, ch, e);
        const auto m = sample_cutmix_mask(e, rng);
        const auto mc = m.complement();

        // Complement identity: M + (1 - M) = 1, and the two mixes sum to x + reverse(x).
        bool ok = true;
        for (std::size_t i = 0; i < m.mask.size(); ++i) ok = ok && m.mask[i] + mc.mask[i] == 1;
        c.expect(ok, "mask + complement != 1");
        c.expect(mc.complement() == m, "double complement differs");
        const auto mixed = pairwise_mix(x, m), mixed_c = pairwise_mix(x, mc);
        const std::size_t per = x.stride0();
        for (std::size_t i = 0; i < b && ok; ++i)
            for (std::size_t s = 0; s < per; ++s)
                if (mixed[i * per + s] + mixed_c[i * per + s] != x[i * per + s] + x[(b - 1 - i) * per + s]) {
                    ok = false;
                    break;
                }
        c.expect(ok, "complement mixes do not sum to x + reverse(x)");

        // Voxel conservation: every voxel position keeps the multiset of batch values.
        for (std::size_t s = 0; s < per && ok; ++s) {
            std::vector<double> before, after;
            for (std::size_t i = 0; i < b; ++i) {
                before.push_back(x[i * per + s]);
                after.push_back(mixed[i * per + s]);
            }
            std::sort(before.begin(), before.end());
            std::sort(after.begin(), after.end());
            ok = before == after;
        }
        c.expect(ok, "mixing does not conserve voxel values");

        // Batch-size-1 fixpoint.
        const auto single = random_batch(1, ch, e);
        c.expect(pairwise_mix(single, m) == single, "batch of one is not a fixpoint");

        // Refinement shrinks the foreground.
        const std::size_t side = std::size_t(rng.range(2, 5));
        const auto pm1 = sample_cutmix_mask(Extent::cube(side), rng);
        const auto pl = build_pseudo_labels(oracle::random_probs(2, 2, side, rng), pm1);
        const auto cons = oracle::random_probs(2, 2, side, rng);
        const auto r = refine_pseudo_labels(pl, cons);
        const auto cons_hard = argmax_channels(cons);
        std::size_t fr = 0, fpl = 0, fcons = 0;
        for (std::size_t i = 0; i < r.hard.size(); ++i) {
            fr += r.hard[i] != 0;
            fpl += pl.hard[i] != 0;
            fcons += cons_hard[i] != 0;
            if (r.hard[i] != 0 && (pl.hard[i] == 0 || cons_hard[i] == 0)) ok = false;
        }
        c.expect(ok && fr <= std::min(fpl, fcons), "refined foreground is not inside both inputs");

        // Determinism: equal seeds give equal masks, mixes and pseudo-labels.
        const std::uint64_t seed = rng.fork_seed();
        Rng r1(seed), r2(seed);
        const auto m1 = sample_cutmix_mask(e, r1), m2 = sample_cutmix_mask(e, r2);
        c.expect(m1 == m2, "mask sampling is not deterministic");
        c.expect(pairwise_mix(x, m1) == pairwise_mix(x, m2), "mixing is not deterministic");
        const auto probs = oracle::random_probs(b, 2, 3, rng);
        const auto mm = sample_cutmix_mask(Extent::cube(3), rng);
        const auto q1 = build_pseudo_labels(probs, mm), q2 = build_pseudo_labels(probs, mm);
        c.expect(q1.hard == q2.hard && q1.confidence == q2.confidence, "pseudo-labels are not deterministic");
    }
    return c.done(std::to_string(n) + " random instances, 0 failures");
}

// ---------------------------------------------------------------------------
// 5. Metrics oracle

LabelMask box(Extent e, std::array<std::size_t, 3> lo, std::array<std::size_t, 3> size) {
    LabelMask m(e);
    for (std::size_t k = lo[2]; k < lo[2] + size[2]; ++k)
        for (std::size_t j = lo[1]; j < lo[1] + size[1]; ++j)
            for (std::size_t i = lo[0]; i < lo[0] + size[0]; ++i) m.at(i, j, k) = 1;
    return m;
}

LabelMask random_mask(Extent e, Rng& rng, double salt) {
    LabelMask m(e);
    const int boxes = int(rng.range(0, 3));
    for (int b = 0; b < boxes; ++b) {
        std::array<std::size_t, 3> lo{}, size{};
        for (std::size_t a = 0; a < 3; ++a) {
            size[a] = std::size_t(rng.range(1, std::int64_t(e[a])));
            lo[a] = std::size_t(rng.below(e[a] - size[a] + 1));
        }
        const auto bx = box(e, lo, size);
        for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] |= bx.labels[i];
    }
    for (auto& v : m.labels)
        if (rng.bernoulli(salt)) v = 1;
    return m;
}

Outcome check_metrics_oracle() {
    Checker c;
    const Spacing unit{1, 1, 1};
    {
        const Extent e = Extent::cube(4);
        const auto a = box(e, {0, 0, 0}, {2, 2, 2}), b = box(e, {1, 0, 0}, {2, 2, 2});
        c.expect(dice_coefficient(a, b) == 0.5, "hand Dice != 0.5");
        c.expect(jaccard_index(a, b) == oracle::jaccard(a, b) && std::abs(jaccard_index(a, b) - 1.0 / 3) <= 1e-15, "hand JC != 1/3");
        LabelMask p({6, 2, 2}), q({6, 2, 2});
        p.at(0, 0, 0) = 1;
        q.at(3, 0, 0) = 1;
        c.expect(hausdorff95(p, q, unit) == 3.0, "hand HD95 != 3");
        c.expect(average_surface_distance(p, q, unit) == 3.0, "hand ASD != 3");
    }
    Rng rng(501);
    int empties = 0;
    for (int rep = 0; rep < 200; ++rep) {
        const Extent e{std::size_t(rng.range(1, 12)), std::size_t(rng.range(1, 12)), std::size_t(rng.range(1, 12))};
        const double salt = rng.uniform(0, 0.3);
        LabelMask a = random_mask(e, rng, salt), b = random_mask(e, rng, salt);
        // Force the empty-mask conventions into the sample.
        if (rep % 20 == 0) a = LabelMask(e);
        if (rep % 40 == 0) b = LabelMask(e);
        empties += oracle::count_fg(a) == 0 || oracle::count_fg(b) == 0;
        const std::string at = "pair " + std::to_string(rep);
        c.expect(dice_coefficient(a, b) == oracle::dice(a, b), at + " Dice");
        c.expect(jaccard_index(a, b) == oracle::jaccard(a, b), at + " JC");
        for (const Spacing& sp : {unit, Spacing{rng.uniform(0.3, 3), rng.uniform(0.3, 3), rng.uniform(0.3, 3)}}) {
            c.expect(std::abs(hausdorff95(a, b, sp) - oracle::hd95(a, b, sp)) <= 1e-9, at + " HD95");
            c.expect(std::abs(average_surface_distance(a, b, sp) - oracle::asd(a, b, sp)) <= 1e-9, at + " ASD");
        }
    }
    return c.done("hand cases exact; 200 random pairs (" + std::to_string(empties) + " with an empty mask) match the oracles");
}

// ---------------------------------------------------------------------------
// 6. Synthetic end-to-end benefit

TrainConfig desk_train(std::uint64_t seed) {
    TrainConfig t;
    t.batch_labeled = 2;
    t.batch_unlabeled = 2;
    t.seed = seed;
    return t;
}

Outcome check_benefit() {
    Checker c;
    std::ostringstream detail;
    double gain = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto cases = benchmark_cases(seed);
        const auto split = split_dataset(cases, 6, 10, 20, seed);
        CaseStore store(cases);
        const auto test = store.select(split.test);
        TrainConfig t = desk_train(seed);
        const ModelConfig mc;
        const auto duet = run_training<float>(t, AblationFlags::full(), mc, store, split);
        const double d = evaluate(duet.best, test, t.patch).dice_pct;
        t.method = Method::supervised;
        const auto sup = run_training<float>(t, AblationFlags::none(), mc, store, split);
        const double s = evaluate(sup.best, test, t.patch).dice_pct;
        gain += (d - s) / 3;
        detail << "seed " << seed << ": " << fmt(d) << " vs " << fmt(s) << "; ";
        std::cout << "  [6] seed " << seed << " DuetMatch " << fmt(d) << " supervised " << fmt(s) << std::endl;
    }
    detail << "mean gain " << fmt(gain, 3) << " (need >= " << kBenefitMargin << ")";
    c.expect(gain > 0 && gain >= kBenefitMargin, detail.str());
    return c.done(detail.str());
}

// ---------------------------------------------------------------------------
// 7-9. Command-line harness

// Writes a dataset with the CLI and returns its directory.
fs::path synth(const std::string& name, const std::string& shape, std::size_t cases, std::uint64_t seed, std::uint64_t split_seed,
               double noise, double jitter, std::size_t labeled, std::size_t val, std::size_t test, Checker& c) {
    const auto d = fresh(name);
    const std::string data = (d / "data").string();
    c.expect(run_cli("synth --out " + data + " --cases " + std::to_string(cases) + " --shape " + shape + " --lesions " +
                         std::to_string(kLesions) + " --seed " + std::to_string(seed) + " --noise " + fmt(noise) + " --contrast-jitter " +
                         fmt(jitter),
                     name + "_synth") == 0,
             "synth failed");
    c.expect(run_cli("split --data " + data + " --labeled " + std::to_string(labeled) + " --val " + std::to_string(val) + " --test " +
                         std::to_string(test) + " --seed " + std::to_string(split_seed),
                     name + "_split") == 0,
             "split failed");
    return d;
}

void write_config(const fs::path& path, const fs::path& data, const std::string& extra) {
    std::ofstream(path) << "data_dir = " << (data / "data").string() << "\nsplit_path = " << (data / "data" / "split.json").string()
                        << "\nbatch_labeled = 2\nbatch_unlabeled = 2\n"
                        << extra;
}

const std::string kTinyModel = "base_channels = 4\ndepth = 2\npatch = 16\niters_pretrain = 5\niters_main = 10\nval_every = 5\n";

// First number of a "mean ± std" cell.
double cell_mean(const std::string& cell) { return std::stod(cell); }

std::map<std::string, double> ablation_dice(const fs::path& csv) {
    std::map<std::string, double> out;
    const auto ls = lines_of(slurp(csv));
    for (std::size_t i = 1; i < ls.size(); ++i) {
        std::vector<std::string> f;
        std::stringstream ss(ls[i]);
        for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
        if (f.size() >= 7) out[f[0]] = cell_mean(f[6]);
    }
    return out;
}

Outcome check_ablation() {
    Checker c;
    // Table shape and byte stability on a small dataset with two folds.
    const auto tiny = synth("abl_tiny", "16,16,16", 12, 5, 5, kNoise, kJitter, 2, 2, 2, c);
    write_config(tiny / "run.cfg", tiny, kTinyModel);
    for (const char* out : {"a", "b"})
        c.expect(run_cli("ablate --config " + (tiny / "run.cfg").string() + " --folds 2 --out " + (tiny / out).string(),
                         std::string("abl_tiny_") + out) == 0,
                 "ablate exited non-zero");
    const auto rows = lines_of(slurp(tiny / "a" / "ablation.csv"));
    c.expect(rows.size() == 6, "ablation.csv has " + std::to_string(rows.size()) + " lines, want header + 5");
    const std::vector<std::string> names{"baseline", "+DDP", "+PCMCG", "+DDP+PCMCG", "+all"};
    for (std::size_t i = 0; i < names.size() && i + 1 < rows.size(); ++i) {
        c.expect(rows[i + 1].rfind(names[i] + ",", 0) == 0, "row " + std::to_string(i + 1) + " is not " + names[i]);
        c.expect(rows[i + 1].find("±") != std::string::npos, "row " + names[i] + " lacks mean ± std");
    }
    for (const char* f : {"ablation.csv", "ablation.md"})
        c.expect(!slurp(tiny / "a" / f).empty() && slurp(tiny / "a" / f) == slurp(tiny / "b" / f), std::string(f) + " is not byte-stable");

    // Full method vs baseline on the benchmark at the desk config, one fold per seed.
    int wins = 0;
    std::ostringstream detail;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const std::string name = "abl_seed" + std::to_string(seed);
        const auto d = synth(name, "32,32,32", 90, kDataSeedBase + seed, seed, kNoise, kJitter, 6, 10, 20, c);
        write_config(d / "run.cfg", d, "seed = " + std::to_string(seed) + "\n");
        c.expect(run_cli("ablate --config " + (d / "run.cfg").string() + " --folds 1 --out " + (d / "out").string(), name) == 0,
                 "ablate exited non-zero");
        const auto dice = ablation_dice(d / "out" / "ablation.csv");
        const double full = dice.count("+all") ? dice.at("+all") : -1, base = dice.count("baseline") ? dice.at("baseline") : -1;
        wins += full >= base;
        detail << "seed " << seed << ": +all " << fmt(full) << " vs baseline " << fmt(base) << "; ";
        std::cout << "  [7] seed " << seed << " +all " << fmt(full) << " baseline " << fmt(base) << std::endl;
    }
    detail << wins << "/3 seeds with +all >= baseline";
    c.expect(wins >= 2, detail.str());
    return c.done("five rows, byte-stable over 2 folds; " + detail.str());
}

Outcome check_sweep() {
    Checker c;
    const auto d = synth("sweep", "16,16,16", 10, 6, 6, kNoise, kJitter, 2, 2, 2, c);
    write_config(d / "run.cfg", d, kTinyModel);
    c.expect(run_cli("sweep-dropout --config " + (d / "run.cfg").string() + " --out " + (d / "out").string(), "sweep") == 0,
             "sweep-dropout exited non-zero");
    const auto rows = lines_of(slurp(d / "out" / "sweep.csv"));
    c.expect(rows.size() == 6, "sweep.csv has " + std::to_string(rows.size()) + " lines, want header + 5");
    const std::vector<std::string> ratios{"0.00", "0.20", "0.40", "0.60", "0.80"};
    for (std::size_t i = 0; i < ratios.size() && i + 1 < rows.size(); ++i) {
        std::stringstream ss(rows[i + 1]);
        std::vector<std::string> f;
        for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
        c.expect(f.size() == 5, "sweep row " + std::to_string(i + 1) + " has " + std::to_string(f.size()) + " fields");
        if (f.size() == 5) {
            c.expect(std::abs(std::stod(f[0]) - std::stod(ratios[i])) < 1e-9, "sweep row " + std::to_string(i + 1) + " ratio " + f[0]);
            const double dice = std::stod(f[1]);
            c.expect(dice >= 0 && dice <= 100, "sweep Dice out of range");
        }
    }
    const std::string svg = slurp(d / "out" / "sweep.svg");
    c.expect(svg.rfind("<svg", 0) == 0 && svg.find("</svg>") != std::string::npos, "sweep.svg is not an SVG document");
    return c.done("5-row sweep.csv and sweep.svg written");
}

Outcome check_determinism() {
    Checker c;
    const auto d = synth("determinism", "32,32,32", 16, 9, 9, kNoise, kJitter, 4, 2, 4, c);
    write_config(d / "run.cfg", d, "iters_pretrain = 10\niters_main = 20\nval_every = 10\nseed = 3\n");
    for (const char* out : {"a", "b"})
        c.expect(run_cli("train --config " + (d / "run.cfg").string() + " --out " + (d / out).string(), std::string("det_") + out) == 0,
                 "train exited non-zero");
    const auto la = lines_of(slurp(d / "a" / "train_log.jsonl")), lb = lines_of(slurp(d / "b" / "train_log.jsonl"));
    c.expect(la.size() >= 20 && lb.size() >= 20, "fewer than 20 logged steps");
    for (std::size_t i = 0; i < 20 && i < la.size() && i < lb.size(); ++i) {
        const auto ja = nlohmann::json::parse(la[i]), jb = nlohmann::json::parse(lb[i]);
        for (const char* k : {"total", "sup", "duet_feature", "duet_pred", "cm"})
            c.expect(ja.at(k) == jb.at(k), std::string(k) + " differs at step " + std::to_string(i + 1));
        c.expect(la[i] == lb[i], "log line differs at step " + std::to_string(i + 1));
    }
    const std::string ma = slurp(d / "a" / "metrics.csv");
    c.expect(!ma.empty() && ma == slurp(d / "b" / "metrics.csv"), "metrics.csv differs between runs");
    return c.done("20-step loss traces and metrics.csv identical across two runs");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DuetMatch acceptance checks"};
    std::string workdir = "acceptance_work", only;
    app.add_option("--workdir", workdir, "Scratch directory for datasets and runs");
    app.add_option("--only", only, "Comma-separated criterion numbers to run (default: all)");
    CLI11_PARSE(app, argc, argv);
    g_work = workdir;
    fs::create_directories(g_work);

    std::set<int> selected;
    {
        std::stringstream ss(only);
        for (std::string x; std::getline(ss, x, ',');)
            if (!x.empty()) selected.insert(std::stoi(x));
    }
    struct Criterion {
        int id;
        std::string name;
        Outcome (*fn)();
    };
    const std::vector<Criterion> criteria{
        {1, "gradient correctness", check_gradients},
        {2, "frozen-parameter contract", check_frozen_contract},
        {3, "loss composition", check_loss_composition},
        {4, "mixing algebra", check_mixing_algebra},
        {5, "metrics oracle", check_metrics_oracle},
        {6, "synthetic end-to-end benefit", check_benefit},
        {7, "ablation harness", check_ablation},
        {8, "dropout sweep", check_sweep},
        {9, "determinism", check_determinism},
    };
    int failed = 0;
    for (const auto& [id, name, fn] : criteria) {
        if (!selected.empty() && !selected.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (id == 1 && secs >= 60) o = {false, o.detail + "; took " + fmt(secs) + " s, limit 60 s"};
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << " [" << std::fixed
                  << std::setprecision(1) << secs << " s]" << std::defaultfloat << std::endl;
    }
    return failed == 0 ? 0 : 1;
}

#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "config.hpp"
#include "engine.hpp"
#include "metrics.hpp"
#include "report.hpp"
#include "volumes.hpp"

namespace duetmatch {

struct ExperimentData {
    std::vector<Case> cases;
    DatasetSplit split;
    CaseStore store;
};

/// Cases from cfg.data_dir plus either the stored split or a fresh seeded one.
inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
    cfg.validate_paths();
    if (cfg.data_dir.empty()) throw ConfigError("data_dir is not set");
    ExperimentData d;
    d.cases = load_dataset(cfg.data_dir);
    if (d.cases.empty()) throw IoError("no cases found in " + cfg.data_dir);
    d.split = cfg.split_path.empty() ? split_dataset(d.cases, cfg.n_labeled, cfg.n_val, cfg.n_test, cfg.split_seed) : load_split(cfg.split_path);
    d.store = CaseStore(d.cases);
    return d;
}

struct RunOutcome {
    TrainResult<float> training;
    MetricsReport test;
};

/// Train, checkpoint the selected state, evaluate on the test list and write
/// the run directory: config.txt, split.json, train_log.jsonl, checkpoint/,
/// metrics.csv, history.csv, loss_curve.svg.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const ExperimentData& data, const std::filesystem::path& out_dir,
                                 std::ostream* log = nullptr) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream os(out_dir / "config.txt");
        if (!os) throw IoError("cannot write into " + out_dir.string());
        os << serialize_config(cfg);
    }
    save_split(data.split, out_dir / "split.json");
    std::ofstream steps(out_dir / "train_log.jsonl");
    RunOutcome r;
    r.training = run_training<float>(cfg.train, cfg.flags, cfg.model, data.store, data.split, &steps);
    save_checkpoint(r.training.best, out_dir / "checkpoint", r.training.best_iter, cfg.train.patch);
    r.test = evaluate(r.training.best, data.store.select(data.split.test), cfg.train.patch);
    emit_report(r.training.history, r.test, out_dir);
    if (log)
        *log << "best iteration " << r.training.best_iter << ", test Dice " << fmt_fixed(r.test.dice_pct, 2) << "%, HD95 "
             << fmt_fixed(r.test.hd95_mm, 3) << " mm\n";
    return r;
}

inline std::vector<SweepRow> run_dropout_sweep(const ExperimentConfig& cfg, const ExperimentData& data, const std::vector<double>& ratios,
                                               const std::filesystem::path& out_dir, std::ostream* log = nullptr) {
    std::vector<SweepRow> rows;
    for (double r : ratios) {
        ExperimentConfig c = cfg;
        c.train.dropout_ratio = r;
        c.validate();
        const auto res = run_training<float>(c.train, c.flags, c.model, data.store, data.split);
        rows.push_back({r, evaluate(res.best, data.store.select(data.split.test), c.train.patch)});
        if (log) *log << "dropout " << fmt_fixed(r, 2) << ": test Dice " << fmt_fixed(rows.back().metrics.dice_pct, 2) << "%\n";
    }
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.txt") << serialize_config(cfg);
    write_sweep(rows, out_dir);
    return rows;
}

inline std::vector<AblationRow> run_ablation_experiment(const ExperimentConfig& cfg, const ExperimentData& data, std::size_t folds,
                                                        const std::filesystem::path& out_dir) {
    cfg.validate();
    auto rows = run_ablation<float>(cfg.train, cfg.model, data.store, data.split, folds);
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.txt") << serialize_config(cfg);
    write_ablation(rows, folds, out_dir);
    return rows;
}

}  // namespace duetmatch

// duetmatch command-line driver: synth, split, train, eval, ablate, sweep-dropout, report.
#include <CLI11.hpp>

#include <duetmatch/duetmatch.hpp>
#include <duetmatch/pipeline.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace duetmatch;

namespace {

// Thrown for bad arguments detected after CLI11 parsing; maps to exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class T>
std::vector<T> parse_list(const std::string& s, const char* what) {
    std::vector<T> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            if constexpr (std::is_floating_point_v<T>)
                out.push_back(static_cast<T>(std::stod(item, &used)));
            else
                out.push_back(static_cast<T>(std::stoull(item, &used)));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw UsageError(std::string("invalid ") + what + " entry '" + item + "'");
        }
    }
    return out;
}

ExperimentConfig config_from(const std::string& path) {
    std::ostringstream echo;
    ExperimentConfig cfg = load_config(path, &echo);
    std::clog << echo.str();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DuetMatch semi-supervised 3D segmentation"};
    app.require_subcommand(1);

    // synth
    std::string synth_out;
    std::size_t synth_cases = 90;
    std::string synth_shape = "32,32,32";
    int synth_lesions = 2;
    std::uint64_t synth_seed = 0;
    double synth_noise = 1.0, synth_jitter = 0.5;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--cases", synth_cases, "Number of cases")->check(CLI::PositiveNumber);
    synth->add_option("--shape", synth_shape, "Volume shape X,Y,Z");
    synth->add_option("--lesions", synth_lesions, "Ellipsoid lesions per case")->check(CLI::PositiveNumber);
    synth->add_option("--seed", synth_seed, "Dataset seed");
    synth->add_option("--noise", synth_noise, "Gaussian noise sigma")->check(CLI::NonNegativeNumber);
    synth->add_option("--contrast-jitter", synth_jitter, "Relative per-lesion contrast jitter")->check(CLI::Range(0.0, 0.99));

    // split
    std::string split_data, split_out;
    std::size_t split_labeled = 6, split_val = 10, split_test = 20;
    std::uint64_t split_seed = 0;
    auto* split = app.add_subcommand("split", "Partition a dataset into labeled/unlabeled/val/test");
    split->add_option("--data", split_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    split->add_option("--labeled", split_labeled, "Labeled training cases");
    split->add_option("--val", split_val, "Validation cases");
    split->add_option("--test", split_test, "Test cases");
    split->add_option("--seed", split_seed, "Split seed");
    split->add_option("--out", split_out, "Split file (default DATA/split.json)");

    // train
    std::string train_config, train_out;
    auto* train = app.add_subcommand("train", "Train from a config file");
    train->add_option("--config", train_config, "Config file")->required()->check(CLI::ExistingFile);
    train->add_option("--out", train_out, "Run directory (default: out_dir from the config)");

    // eval
    std::string eval_ckpt, eval_data, eval_split, eval_out;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test list of a split");
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--split", eval_split, "Split file")->required()->check(CLI::ExistingFile);
    eval->add_option("--out", eval_out, "Output directory")->required();

    // ablate
    std::string abl_config, abl_out;
    std::size_t abl_folds = 1;
    auto* ablate = app.add_subcommand("ablate", "Five-row component ablation over K folds");
    ablate->add_option("--config", abl_config, "Config file")->required()->check(CLI::ExistingFile);
    ablate->add_option("--folds", abl_folds, "Number of folds")->check(CLI::PositiveNumber);
    ablate->add_option("--out", abl_out, "Output directory")->required();

    // sweep-dropout
    std::string sw_config, sw_out, sw_ratios = "0,0.2,0.4,0.6,0.8";
    auto* sweep = app.add_subcommand("sweep-dropout", "Train once per dropout ratio and compare");
    sweep->add_option("--config", sw_config, "Config file")->required()->check(CLI::ExistingFile);
    sweep->add_option("--ratios", sw_ratios, "Comma-separated dropout ratios");
    sweep->add_option("--out", sw_out, "Output directory")->required();

    // report
    std::string rep_run;
    auto* report = app.add_subcommand("report", "Regenerate plots and print the summary of a run directory");
    report->add_option("--run", rep_run, "Run directory")->required()->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*synth) {
            const auto shape = parse_list<std::size_t>(synth_shape, "shape");
            if (shape.size() != 3) throw UsageError("--shape needs three comma-separated sizes");
            PhantomOptions opt;
            opt.contrast_jitter = synth_jitter;
            const auto cases = generate_dataset(synth_cases, synth_seed, {shape[0], shape[1], shape[2]}, synth_lesions, synth_noise, opt);
            for (const auto& c : cases) save_case(c, synth_out);
            std::cout << "wrote " << cases.size() << " cases to " << synth_out << '\n';
        } else if (*split) {
            const auto cases = load_dataset(split_data);
            const auto s = split_dataset(cases, split_labeled, split_val, split_test, split_seed);
            const fs::path out = split_out.empty() ? fs::path(split_data) / "split.json" : fs::path(split_out);
            save_split(s, out);
            std::cout << "labeled " << s.train_labeled.size() << ", unlabeled " << s.train_unlabeled.size() << ", val " << s.val.size()
                      << ", test " << s.test.size() << " -> " << out.string() << '\n';
        } else if (*train) {
            ExperimentConfig cfg = config_from(train_config);
            if (!train_out.empty()) cfg.out_dir = train_out;
            const auto data = load_experiment_data(cfg);
            run_experiment(cfg, data, cfg.out_dir, &std::cout);
        } else if (*eval) {
            const auto state = load_checkpoint<float>(eval_ckpt);
            const auto s = load_split(eval_split);
            CaseStore store;
            for (const auto& id : s.test) store.add(load_case(eval_data, id));
            const auto m = evaluate(state, store.select(s.test), checkpoint_patch(eval_ckpt));
            fs::create_directories(eval_out);
            write_metrics_csv(m, fs::path(eval_out) / "metrics.csv");
            std::cout << "test Dice " << fmt_fixed(m.dice_pct, 2) << "%, Jaccard " << fmt_fixed(m.jaccard_pct, 2) << "%, HD95 "
                      << fmt_fixed(m.hd95_mm, 3) << " mm, ASD " << fmt_fixed(m.asd_mm, 3) << " mm\n";
        } else if (*ablate) {
            const ExperimentConfig cfg = config_from(abl_config);
            const auto data = load_experiment_data(cfg);
            const auto rows = run_ablation_experiment(cfg, data, abl_folds, abl_out);
            for (const auto& r : rows) std::cout << r.name << ": Dice " << pm(r.dice) << '\n';
        } else if (*sweep) {
            const ExperimentConfig cfg = config_from(sw_config);
            const auto ratios = parse_list<double>(sw_ratios, "ratio");
            if (ratios.empty()) throw UsageError("--ratios is empty");
            const auto data = load_experiment_data(cfg);
            run_dropout_sweep(cfg, data, ratios, sw_out, &std::cout);
        } else if (*report) {
            const fs::path run = rep_run;
            const History h = read_history_csv(run / "history.csv");
            const MetricsReport m = read_metrics_csv(run / "metrics.csv");
            emit_report(h, m, run);
            std::cout << h.steps.size() << " steps; test Dice " << fmt_fixed(m.dice_pct, 2) << "%, Jaccard " << fmt_fixed(m.jaccard_pct, 2)
                      << "%, HD95 " << fmt_fixed(m.hd95_mm, 3) << " mm, ASD " << fmt_fixed(m.asd_mm, 3) << " mm\n";
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

// strudel: generate synthetic domains, run adaptation methods, report.
//
//   strudel generate --config desk.json [--force]
//   strudel run --config desk.json [--method strudel] [--seed 3] [--resume]
//   strudel report runs/strudel-seed1 runs/selftrain-seed1 --out report
//
// Exit codes: 0 success, 2 usage, 3 config, 4 runtime.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "strudel/experiment.hpp"
#include "strudel/log.hpp"
#include "strudel/report.hpp"

namespace fs = std::filesystem;
namespace ex = strudel::experiment;

namespace {

enum Exit { ok = 0, usage = 2, config = 3, runtime = 4 };

struct Options {
    std::string config;
    bool force = false;
    std::vector<std::string> methods;
    std::optional<std::uint64_t> seed;
    bool resume = false;
    std::string out;
    std::vector<std::string> runs;
    bool quiet = false;
};

void cmd_generate(const Options& o) {
    const auto cfg = ex::load_config(o.config);
    ex::generate(cfg, o.force);
    std::cout << "wrote dataset to " << cfg.dataset.directory << "\n";
}

void cmd_run(const Options& o) {
    auto cfg = ex::load_config(o.config);
    if (o.seed) cfg.strudel.seed = *o.seed;
    std::vector<ex::Method> methods = cfg.methods;
    if (!o.methods.empty()) {
        methods.clear();
        for (const auto& m : o.methods) methods.push_back(ex::parse_method(m));
    }
    if (!o.out.empty() && methods.size() != 1) throw strudel::UsageError("cli", "--out needs exactly one --method");
    const auto splits = ex::load_splits(cfg);
    for (auto m : methods) {
        ex::RunOptions opt;
        opt.run_dir = o.out.empty() ? ex::run_directory(cfg, m) : fs::path(o.out);
        opt.resume = o.resume;
        if (!o.resume && !ex::directory_is_empty(opt.run_dir)) {
            if (!o.force)
                throw strudel::UsageError("cli", "run directory '" + opt.run_dir.string() +
                                                     "' is not empty (use --resume or --force)");
            fs::remove_all(opt.run_dir);
        }
        const auto r = ex::run_method(m, cfg, splits, opt);
        std::cout << ex::to_string(m) << " seed " << cfg.strudel.seed << ": mean DSC " << r.mean_dsc() << " -> "
                  << opt.run_dir.string() << "\n";
    }
}

void cmd_report(const Options& o) {
    std::vector<fs::path> dirs(o.runs.begin(), o.runs.end());
    const auto rep = strudel::report::write_report(dirs, o.out);
    std::cout << "report for " << rep.runs.size() << " run(s) written to " << o.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-guided self-training for lesion segmentation under domain shift"};
    app.require_subcommand(1);
    Options o;
    app.add_flag("-q,--quiet", o.quiet, "Only print warnings and errors");

    auto* gen = app.add_subcommand("generate", "Write the source and target datasets named by the config");
    gen->add_option("--config", o.config, "Experiment config (JSON, comments allowed)")->required()->check(CLI::ExistingFile);
    gen->add_flag("--force", o.force, "Replace a non-empty dataset directory");

    std::vector<std::string> names;
    for (auto m : ex::all_methods) names.emplace_back(ex::to_string(m));
    auto* run = app.add_subcommand("run", "Train and evaluate one or more methods");
    run->add_option("--config", o.config, "Experiment config (JSON, comments allowed)")->required()->check(CLI::ExistingFile);
    run->add_option("--method", o.methods, "Method to run; defaults to the config's list")->check(CLI::IsMember(names));
    run->add_option("--seed", o.seed, "Overrides strudel.seed");
    run->add_flag("--resume", o.resume, "Continue an interrupted run from its last complete iteration");
    run->add_flag("--force", o.force, "Replace a non-empty run directory");
    run->add_option("--out", o.out, "Run directory (single method only)");

    auto* rep = app.add_subcommand("report", "Summarize run directories into tables and figures");
    rep->add_option("runs", o.runs, "Run directories")->required();
    rep->add_option("--out", o.out, "Report directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? Exit::ok : Exit::usage;
    }
    strudel::log::sink().threshold = o.quiet ? strudel::log::Level::warn : strudel::log::Level::info;

    try {
        if (gen->parsed()) cmd_generate(o);
        else if (run->parsed()) cmd_run(o);
        else cmd_report(o);
        return Exit::ok;
    } catch (const strudel::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return Exit::usage;
    } catch (const strudel::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return Exit::config;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return Exit::runtime;
    }
}

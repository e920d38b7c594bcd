// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,7] [--keep DIR]
//
// The exit status is nonzero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "strudel/experiment.hpp"
#include "strudel/losses.hpp"
#include "strudel/metrics.hpp"
#include "strudel/pseudo_labels.hpp"
#include "strudel/report.hpp"
#include "strudel/self_training.hpp"
#include "strudel/uncertainty.hpp"

using namespace strudel;
namespace fs = std::filesystem;
namespace ex = strudel::experiment;
namespace st = strudel::self_training;

namespace {

// Tolerances and budgets pinned from the acceptance criteria.
constexpr double identity_tol = 1e-10;
constexpr double variance_tol = 1e-10;
constexpr double variance_bound = 0.25;
constexpr double grad_rel_tol = 1e-3;
constexpr double grad_pass_fraction = 0.99;
constexpr double metric_tol = 1e-9;
constexpr double bookkeeping_budget_s = 5 * 60;
constexpr double experiment_budget_s = 45 * 60;
constexpr double strudel_margin = 0.02;
constexpr double wilcoxon_alpha = 0.1;
constexpr double plateau_band = 0.02;
constexpr int seeds_required = 4;  // of 5
constexpr int experiment_seeds = 5;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

ProbMap random_prob(int h, int w, Rng& rng) {
    ProbMap p(h, w);
    for (auto& v : p) v = rng.uniform(0.02, 0.98);
    return p;
}

ex::ExperimentConfig desk_config() { return ex::load_config(fs::path(STRUDEL_SOURCE_DIR) / "configs" / "desk.json"); }

// ---------------------------------------------------------------------------

Outcome loss_identities() {
    Rng rng(101);
    double worst_zero = 0, worst_one = 0, worst_sum = 0;
    for (int r = 0; r < 50; ++r) {
        const auto p = random_prob(8, 8, rng);
        const auto t = oracle::random_mask(8, 8, 0.3, rng);
        Grid<double> sigma(8, 8);
        for (auto& v : sigma) v = rng.uniform();
        worst_zero = std::max(worst_zero, std::abs(losses::ubce(p, t, Grid<double>(8, 8, 0.0)) - losses::bce(p, t)));
        worst_one = std::max(worst_one, std::abs(losses::ubce(p, t, Grid<double>(8, 8, 1.0))));
        for (auto routing : {losses::Routing::fixed_label, losses::Routing::pseudo_label_with_uncertainty}) {
            const auto b = losses::combined_loss(p, t, routing == losses::Routing::fixed_label ? nullptr : &sigma, routing);
            worst_sum = std::max(worst_sum, std::abs(b.dice + b.bce + b.ubce - b.total));
        }
    }
    return {worst_zero <= identity_tol && worst_one <= identity_tol && worst_sum <= identity_tol,
            "|ubce(s=0)-bce| " + fmt("%.1e", worst_zero) + ", |ubce(s=1)| " + fmt("%.1e", worst_one) + ", |sum-total| " +
                fmt("%.1e", worst_sum)};
}

Outcome variance_fidelity() {
    Rng rng(202);
    double worst = 0, largest = 0;
    for (int r = 0; r < 100; ++r) {
        uncertainty::McSamples s;
        for (int c = 0; c < 10; ++c) s.maps.push_back(random_prob(6, 6, rng));
        const auto u = uncertainty::variance_map(s);
        for (std::size_t i = 0; i < u.raw.size(); ++i) {
            std::vector<double> column;
            for (const auto& m : s.maps) column.push_back(m[i]);
            worst = std::max(worst, std::abs(u.raw[i] - oracle::variance(column)));
            largest = std::max(largest, u.raw[i]);
        }
    }
    return {worst <= variance_tol && largest <= variance_bound,
            "100 stacks C=10, max |diff| " + fmt("%.1e", worst) + ", max raw " + fmt("%.4f", largest)};
}

Outcome gradient_checks() {
    using losses::Routing;
    using Fn = std::function<double(const std::vector<double>&, std::span<double>)>;
    std::string detail;
    bool pass = true;
    std::map<std::string, oracle::GradCheck> total;
    for (int seed = 1; seed <= 5; ++seed) {
        Rng rng(static_cast<std::uint64_t>(300 + seed));
        const auto p = random_prob(8, 8, rng);
        const auto t = oracle::random_mask(8, 8, 0.3, rng);
        std::vector<double> sigma(64);
        for (auto& v : sigma) v = rng.uniform();
        const std::span<const double> sig(sigma);
        const std::vector<std::pair<std::string, Fn>> cases = {
            {"dice", [&](const std::vector<double>& x, std::span<double> g) { return losses::dice_loss<double>(x, t.values(), {}, g); }},
            {"bce", [&](const std::vector<double>& x, std::span<double> g) { return losses::bce<double>(x, t.values(), {}, g); }},
            {"ubce", [&](const std::vector<double>& x, std::span<double> g) { return losses::ubce<double>(x, t.values(), sig, {}, g); }},
            {"combined",
             [&](const std::vector<double>& x, std::span<double> g) {
                 return losses::combined_loss<double>(x, t.values(), sig, Routing::pseudo_label_with_uncertainty, {}, g).total +
                        losses::combined_loss<double>(x, t.values(), std::nullopt, Routing::fixed_label, {}, g).total;
             }},
        };
        const std::vector<double> x(p.begin(), p.end());
        for (const auto& [name, fn] : cases) {
            std::vector<double> g(x.size(), 0.0);
            fn(x, g);
            const auto r = oracle::check_gradient([&](const std::vector<double>& v) { return fn(v, {}); }, x, g, 1e-4, grad_rel_tol);
            auto& acc = total[name];
            acc.checked += r.checked;
            acc.passed += r.passed;
            acc.worst = std::max(acc.worst, r.worst);
            pass = pass && r.pass_fraction() >= grad_pass_fraction;
        }
    }
    for (const auto& [name, r] : total) detail += name + " " + fmt("%.1f%%", 100 * r.pass_fraction()) + " ";
    return {pass, detail + "within 1e-3 (8x8, 5 seeds)"};
}

Outcome metric_oracle() {
    Rng rng(404);
    int mismatches = 0;
    for (int r = 0; r < 200; ++r) {
        const auto p = r % 2 ? oracle::random_blobs(16, 16, rng) : oracle::random_mask(16, 16, rng.uniform(0, 0.4), rng);
        const auto g = oracle::random_blobs(16, 16, rng);
        const auto rep = metrics::evaluate(p, g);
        std::size_t inter = 0, np = 0, ng = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            inter += p[i] && g[i];
            np += p[i];
            ng += g[i];
        }
        const double d = np + ng == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
        const double lavd = std::abs(std::log(np + 1.0) - std::log(ng + 1.0));
        const auto lp = oracle::label_components(p, 8), lg = oracle::label_components(g, 8);
        const int cp = oracle::component_count(lp), cg = oracle::component_count(lg);
        const int hit_g = oracle::components_hit(lg, p), hit_p = oracle::components_hit(lp, g);
        const double rec = cg == 0 ? 1.0 : static_cast<double>(hit_g) / cg;
        const double prec = cp == 0 ? 0.0 : static_cast<double>(hit_p) / cp;
        const double f1 = (cg == 0 && cp == 0) ? 1.0 : (prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec));
        const bool ok = std::abs(rep.dsc - d) <= metric_tol && std::abs(rep.lavd - lavd) <= metric_tol &&
                        rep.h95 == oracle::hausdorff95(p, g) && rep.counts.pred == static_cast<std::size_t>(cp) &&
                        rep.counts.gt == static_cast<std::size_t>(cg) && rep.lesion_recall == rec && rep.lesion_f1 == f1;
        mismatches += !ok;
    }
    return {mismatches == 0, "200 pairs 16x16, " + std::to_string(mismatches) + " mismatches"};
}

std::vector<double> totals(const std::vector<backbones::EpochLoss>& trace) {
    std::vector<double> out;
    for (const auto& e : trace) out.push_back(e.mean.total);
    return out;
}

Outcome bookkeeping() {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = desk_config();
    cfg.dataset.source_size = 10;
    cfg.strudel.K = 3;
    cfg.strudel.P = 4;
    const auto splits = ex::generate_splits(cfg.dataset);
    const auto base = st::train_base(splits.source, cfg.backbone, cfg.strudel);
    const auto strudel = st::run_strudel(cfg.strudel, base, splits.source, splits.pool);
    const auto plain = st::run_self_training(cfg.strudel, base, splits.source, splits.pool);
    auto zero = cfg.strudel;
    zero.force_zero_sigma = true;
    const auto forced = st::run_strudel(zero, base, splits.source, splits.pool);

    std::set<std::string> ids;
    bool disjoint = true;
    for (const auto& r : strudel.history.records)
        for (const auto& id : r.subset_ids) disjoint = ids.insert(id).second && disjoint;
    bool identical = forced.model == plain.model && forced.history.records.size() == plain.history.records.size();
    for (std::size_t j = 0; identical && j < plain.history.records.size(); ++j)
        identical = totals(forced.history.records[j].retrain_trace) == totals(plain.history.records[j].retrain_trace) &&
                    totals(forced.history.records[j].finetune_trace) == totals(plain.history.records[j].finetune_trace);
    const std::size_t fixed = strudel.history.records.back().fixed_size;
    const double secs = seconds_since(t0);
    return {fixed == 22 && disjoint && strudel.history.records.size() == 3 && identical && secs < bookkeeping_budget_s,
            "|D_fix| " + std::to_string(fixed) + ", records " + std::to_string(strudel.history.records.size()) +
                (disjoint ? ", subsets disjoint" : ", subsets overlap") +
                (identical ? ", zero-sigma traces identical" : ", zero-sigma traces differ") + ", " + fmt("%.0f s", secs)};
}

Outcome fusion_recall() {
    auto cfg = desk_config();
    cfg.dataset.source_size = 10;
    auto sc = cfg.strudel;
    sc.epochs_scratch = 10;
    const auto splits = ex::generate_splits(cfg.dataset);
    const auto model = st::train_base(splits.source, cfg.backbone, sc);
    const auto key = datasets::grant_evaluation_access();
    int violations = 0;
    const auto samples = datasets::generate_domain(cfg.dataset.target, 100, 1000);
    for (const auto& raw : samples) {
        const auto s = datasets::normalized(raw);
        const auto fused = pseudo_labels::init_pseudo_labels(model, sc.aux, {s}, 1).front().mask();
        const auto net = pseudo_labels::binarize(backbones::predict(model, s.image()), sc.net_threshold);
        const auto aux = pseudo_labels::binarize(pseudo_labels::aux_segment(s.image(), sc.aux), sc.aux_threshold);
        const auto& gt = s.ground_truth(key);
        const double r = metrics::lesion_recall(fused, gt);
        violations += r < metrics::lesion_recall(net, gt) || r < metrics::lesion_recall(aux, gt);
    }
    return {violations == 0, "100 target samples, " + std::to_string(violations) + " violations"};
}

// Criteria 7 to 9 share one five-seed experiment.
struct SeedRuns {
    std::uint64_t seed = 0;
    double base = 0, selftrain = 0, strudel = 0, no_aux = 0;
    ex::MethodOutcome strudel_run;
};

struct Experiment {
    std::vector<SeedRuns> seeds;
    double seconds = 0;
    std::vector<fs::path> run_dirs;
    bool ran = false;
};

Experiment& experiment(const fs::path& work) {
    static Experiment e;
    if (e.ran) return e;
    e.ran = true;
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = desk_config();
    const auto splits = ex::generate_splits(cfg.dataset);
    for (int s = 1; s <= experiment_seeds; ++s) {
        cfg.strudel.seed = static_cast<std::uint64_t>(s);
        SeedRuns r;
        r.seed = cfg.strudel.seed;
        ex::RunOptions opt;
        auto run = [&](ex::Method m) {
            opt.run_dir = work / "runs" / (std::string(ex::to_string(m)) + "-seed" + std::to_string(s));
            e.run_dirs.push_back(opt.run_dir);
            auto out = ex::run_method(m, cfg, splits, opt);
            std::fprintf(stderr, "  seed %d %-15s mean DSC %.4f (%.0f s elapsed)\n", s, ex::to_string(m), out.mean_dsc(),
                         seconds_since(t0));
            return out;
        };
        const auto base = run(ex::Method::base);
        r.base = base.mean_dsc();
        opt.base = base.model;
        r.selftrain = run(ex::Method::selftrain).mean_dsc();
        r.strudel_run = run(ex::Method::strudel);
        r.strudel = r.strudel_run.mean_dsc();
        r.no_aux = run(ex::Method::strudel_no_aux).mean_dsc();
        e.seeds.push_back(std::move(r));
    }
    e.seconds = seconds_since(t0);
    return e;
}

Outcome directional(const fs::path& work) {
    const auto& e = experiment(work);
    std::vector<double> b, s, u, n;
    for (const auto& r : e.seeds) {
        b.push_back(r.base);
        s.push_back(r.selftrain);
        u.push_back(r.strudel);
        n.push_back(r.no_aux);
    }
    const double mb = metrics::mean_std(b).mean, ms = metrics::mean_std(s).mean, mu = metrics::mean_std(u).mean,
                 mn = metrics::mean_std(n).mean;
    double p = 1.0;
    try {
        p = metrics::wilcoxon_signed_rank(u, s, metrics::Alternative::greater).p_value;
    } catch (const DegenerateSampleError&) {
    }
    const bool ordering = mb < ms && ms <= mu;
    const bool margin = mu - ms >= strudel_margin;
    const bool significant = p < wilcoxon_alpha;
    const bool fusion = mu >= mn;
    const bool budget = e.seconds <= experiment_budget_s;
    Outcome o;
    o.pass = ordering && margin && significant && fusion && budget;
    o.detail = "mean DSC base " + fmt("%.4f", mb) + " < selftrain " + fmt("%.4f", ms) + " <= strudel " + fmt("%.4f", mu) +
               (ordering ? " [ok]" : " [no]") + ", strudel-selftrain " + fmt("%+.4f", mu - ms) + (margin ? " [ok]" : " [< 0.02]") +
               ", one-sided p " + fmt("%.4f", p) + (significant ? " [ok]" : " [>= 0.1]") + ", no_aux " + fmt("%.4f", mn) +
               (fusion ? " [ok]" : " [above strudel]") + ", " + fmt("%.0f s", e.seconds) + (budget ? "" : " [over budget]");
    return o;
}

Outcome uncertainty_flags_errors(const fs::path& work) {
    const auto& e = experiment(work);
    int hits = 0;
    std::string detail;
    for (const auto& r : e.seeds) {
        double fp = 0, tp = 0;
        std::size_t nfp = 0, ntp = 0;
        for (const auto& d : r.strudel_run.diagnostics) {
            fp += d.sigma_fp * static_cast<double>(d.fp);
            tp += d.sigma_tp * static_cast<double>(d.tp);
            nfp += d.fp;
            ntp += d.tp;
        }
        const double mfp = nfp ? fp / static_cast<double>(nfp) : 0.0, mtp = ntp ? tp / static_cast<double>(ntp) : 0.0;
        hits += mfp > mtp;
        detail += fmt("%.3f", mfp) + "/" + fmt("%.3f", mtp) + " ";
    }
    return {hits >= seeds_required, std::to_string(hits) + "/5 seeds with sigma(FP) > sigma(TP): " + detail};
}

/// Every iteration up to the best one stays within the band below the best
/// value reached so far.
bool plateaus(const std::vector<double>& dsc) {
    const auto best = std::max_element(dsc.begin(), dsc.end()) - dsc.begin();
    double running = dsc.front();
    for (std::ptrdiff_t k = 0; k <= best; ++k) {
        if (dsc[static_cast<std::size_t>(k)] < running - plateau_band) return false;
        running = std::max(running, dsc[static_cast<std::size_t>(k)]);
    }
    return true;
}

Outcome iteration_plateau(const fs::path& work) {
    auto& e = experiment(work);
    int hits = 0;
    std::string detail;
    for (const auto& r : e.seeds) {
        std::vector<double> dsc;
        for (const auto& rec : r.strudel_run.history.records) dsc.push_back(*rec.target_dsc);
        hits += plateaus(dsc);
        detail += plateaus(dsc) ? "y" : "n";
    }
    // The report must draw one curve per STRUDEL run with K + 1 points.
    const fs::path out = work / "report";
    report::write_report(e.run_dirs, out);
    std::ifstream svg(out / "dsc_iterations.svg");
    std::stringstream ss;
    ss << svg.rdbuf();
    const std::string text = ss.str();
    int curves = 0;
    for (std::size_t pos = 0; (pos = text.find("<title>strudel seed", pos)) != std::string::npos; ++pos) ++curves;
    const bool plotted = curves == experiment_seeds;
    return {hits >= seeds_required && plotted,
            std::to_string(hits) + "/5 seeds plateau within 0.02 (" + detail + "), report draws " + std::to_string(curves) + " strudel curves"};
}

Outcome determinism(const fs::path& work) {
    const fs::path dir = work / "determinism";
    fs::create_directories(dir / "configs");
    fs::copy_file(fs::path(STRUDEL_SOURCE_DIR) / "configs" / "smoke.json", dir / "configs" / "smoke.json",
                  fs::copy_options::overwrite_existing);
    const std::string cli = STRUDEL_CLI_PATH;
    const std::string cfg = (dir / "configs" / "smoke.json").string();
    auto sh = [](const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); };
    if (sh(cli + " generate --force --config " + cfg) != 0) return {false, "generate failed"};
    const fs::path a = dir / "run_a", b = dir / "run_b";
    for (const auto& d : {a, b})
        if (sh(cli + " -q run --force --method strudel --config " + cfg + " --out " + d.string()) != 0)
            return {false, "run failed"};
    auto read = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    const auto ma = read(a / "metrics.csv"), mb = read(b / "metrics.csv");
    return {!ma.empty() && ma == mb, ma.empty() ? "no metrics written" : (ma == mb ? "metrics CSVs byte-identical" : "metrics CSVs differ")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only;
    std::string keep;
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    app.add_option("--keep", keep, "Work directory to keep instead of a temporary one");
    CLI11_PARSE(app, argc, argv);

    const fs::path work = keep.empty() ? fs::temp_directory_path() / ("strudel_acceptance_" + std::to_string(::getpid())) : fs::path(keep);
    fs::create_directories(work);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"loss identities", loss_identities},
        {"variance map fidelity", variance_fidelity},
        {"loss gradient checks", gradient_checks},
        {"metric oracle equivalence", metric_oracle},
        {"self-training bookkeeping", bookkeeping},
        {"OR-fusion recall", fusion_recall},
        {"directional method ordering", [&] { return directional(work); }},
        {"uncertainty flags false positives", [&] { return uncertainty_flags_errors(work); }},
        {"iteration plateau", [&] { return iteration_plateau(work); }},
        {"CLI determinism", [&] { return determinism(work); }},
    };

    int failed = 0, passed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const char* tag = o.pass ? "PASS" : "FAIL";
        std::printf("[%s] %2d %-34s %s (%.1f s)\n", tag, id, criteria[i].first.c_str(), o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
        if (o.pass) ++passed;
        else ++failed;
    }
    std::printf("acceptance: %d passed, %d failed\n", passed, failed);
    if (keep.empty()) fs::remove_all(work);
    return failed == 0 ? 0 : 1;
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "gsebo/bilevel.hpp"
#include "gsebo/error.hpp"
#include "gsebo/graph.hpp"
#include "gsebo/io.hpp"
#include "gsebo/metrics.hpp"
#include "gsebo/models.hpp"
#include "gsebo/verify.hpp"

namespace gsebo::cli {

enum ExitCode : int { kOk = 0, kInputError = 1, kDivergence = 2, kVerificationFailed = 3 };

/// Worker count for sweeps: GSEBO_THREADS if set, else hardware concurrency.
inline std::size_t sweep_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("GSEBO_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) n = static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            throw InputError("GSEBO_THREADS must be a positive integer");
        }
    }
    return n;
}

/// Runs independent jobs on up to `threads` workers. Results keep job order;
/// the first exception (by job index) is rethrown.
template <class R>
std::vector<R> run_parallel(const std::vector<std::function<R()>>& jobs, std::size_t threads) {
    std::vector<R> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::size_t next = 0;
    std::mutex m;
    auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard lock(m);
                if (next >= jobs.size()) return;
                i = next++;
            }
            try {
                results[i] = jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t nt = std::min(threads, jobs.size());
    if (nt <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

struct ModelFlags {
    std::string backbone = "gcn";
    BackboneConfig cfg;
    TrainConfig train;
    bool no_direct_term = false;

    void add_to(CLI::App& app) {
        app.add_option("--backbone", backbone, "GNN backbone")
            ->check(CLI::IsMember({"gcn", "sage", "jknet", "gat"}))
            ->capture_default_str();
        app.add_option("--layers", cfg.layers, "number of layers")->capture_default_str();
        app.add_option("--hidden", cfg.hidden, "hidden width")->capture_default_str();
        app.add_option("--heads", cfg.heads, "attention heads (gat)")->capture_default_str();
        app.add_option("--dropout", cfg.dropout, "dropout rate")->capture_default_str();
        app.add_option("--tau", train.tau, "inner gradient steps per outer iteration")->capture_default_str();
        app.add_option("--eta-inner", train.eta_inner, "inner learning rate")->capture_default_str();
        app.add_option("--eta-outer", train.eta_outer, "outer learning rate")->capture_default_str();
        app.add_option("--lambda", train.lambda, "weight decay coefficient")->capture_default_str();
        app.add_option("--patience", train.patience, "outer iterations without validation gain before stopping")
            ->capture_default_str();
        app.add_option("--max-outer", train.max_outer, "maximum outer iterations")->capture_default_str();
        app.add_option("--seed", train.seed, "random seed")->capture_default_str();
        app.add_flag("--no-direct-term", no_direct_term, "drop dF/dZ at (W_tau, Z) from the hypergradient");
        app.add_flag("--reg-z", train.reg_z, "also apply weight decay to the strengths");
    }

    BackboneConfig backbone_config() const {
        BackboneConfig c = cfg;
        c.backbone = parse_backbone(backbone);
        return c;
    }

    TrainConfig train_config() const {
        TrainConfig t = train;
        t.include_direct_term = !no_direct_term;
        return t;
    }
};

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw InputError(dir.string() + ": cannot create directory: " + ec.message());
}

inline TrainResult train_one(const DatasetBundle& b, const BackboneConfig& bc, const TrainConfig& tc, bool vanilla) {
    return vanilla ? train_vanilla(b, bc, tc) : train_gsebo(b, bc, tc);
}

inline std::string mean_std_row(const MeanStd& m) { return format_real(m.mean) + "\t" + format_real(m.stddev); }

/// Command-line front end. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Graph structure learning by bi-level optimization of per-edge strengths"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    // train
    auto* train = app.add_subcommand("train", "train one model and write history.tsv, report.tsv, model.json");
    std::string train_data, train_out;
    bool train_vanilla_flag = false;
    int train_runs = 1;
    ModelFlags train_flags;
    train->add_option("--data", train_data, "bundle directory")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_flag("--vanilla", train_vanilla_flag, "freeze strengths at the backbone's own normalization");
    train->add_option("--runs", train_runs, "seeds seed..seed+runs-1; files describe the first, runs.tsv summarizes all")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    train_flags.add_to(*train);

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "compare the reverse hypergradient with finite differences");
    std::vector<std::string> gc_backbones{"gcn", "sage", "jknet"};
    GradcheckOptions gc;
    bool gc_no_direct = false;
    double gc_tolerance = 1e-3;
    gradcheck->add_option("--backbone", gc_backbones, "backbones to check")
        ->check(CLI::IsMember({"gcn", "sage", "jknet", "gat"}))
        ->capture_default_str();
    gradcheck->add_option("--n", gc.n, "nodes in the generated graph")->check(CLI::Range(10, 64))->capture_default_str();
    gradcheck->add_option("--layers", gc.layers, "number of layers")->capture_default_str();
    gradcheck->add_option("--hidden", gc.hidden, "hidden width")->capture_default_str();
    gradcheck->add_option("--heads", gc.heads, "attention heads (gat)")->capture_default_str();
    gradcheck->add_option("--tau", gc.tau, "inner steps")->capture_default_str();
    gradcheck->add_option("--eta-inner", gc.eta_inner, "inner learning rate")->capture_default_str();
    gradcheck->add_option("--lambda", gc.lambda, "weight decay")->capture_default_str();
    gradcheck->add_option("--epsilon", gc.epsilon, "finite-difference step")->capture_default_str();
    gradcheck->add_option("--seed", gc.seed, "random seed")->capture_default_str();
    gradcheck->add_flag("--no-direct-term", gc_no_direct, "drop the direct term");
    gradcheck->add_flag("--reg-z", gc.reg_z, "apply weight decay to strengths");

    // robustness
    auto* robust = app.add_subcommand("robustness", "accuracy under injected inter-class edges, vanilla vs learned");
    std::string rb_data, rb_out;
    std::vector<std::size_t> rb_grid{0, 1000, 3000, 5000, 10000, 20000};
    double rb_scale = 1.0;
    int rb_runs = 10;
    ModelFlags rb_flags;
    robust->add_option("--data", rb_data, "bundle directory")->required();
    robust->add_option("--out", rb_out, "output directory")->required();
    robust->add_option("--grid", rb_grid, "numbers of injected edges (before scaling)")->capture_default_str();
    robust->add_option("--scale", rb_scale, "multiplier applied to every grid level")->capture_default_str();
    robust->add_option("--runs", rb_runs, "seeds per level and method")->check(CLI::PositiveNumber)->capture_default_str();
    rb_flags.add_to(*robust);

    // tau-sweep
    auto* sweep = app.add_subcommand("tau-sweep", "test accuracy as a function of the number of inner steps");
    std::string sw_data, sw_out;
    std::vector<int> sw_grid{5, 10, 15, 20, 25};
    int sw_runs = 1;
    ModelFlags sw_flags;
    sweep->add_option("--data", sw_data, "bundle directory")->required();
    sweep->add_option("--out", sw_out, "output directory")->required();
    sweep->add_option("--grid", sw_grid, "tau values")->capture_default_str();
    sweep->add_option("--runs", sw_runs, "seeds per tau")->check(CLI::PositiveNumber)->capture_default_str();
    sw_flags.add_to(*sweep);

    // gen-synth
    auto* synth = app.add_subcommand("gen-synth", "write a stochastic block model bundle");
    SbmParams sb;
    std::uint64_t sb_seed = 0;
    std::size_t sb_inject = 0;
    std::string sb_out, sb_name = "sbm";
    synth->add_option("--n", sb.n, "nodes")->capture_default_str();
    synth->add_option("--classes", sb.classes, "classes")->capture_default_str();
    synth->add_option("--p-intra", sb.p_intra, "edge probability within a class")->capture_default_str();
    synth->add_option("--p-inter", sb.p_inter, "edge probability across classes")->capture_default_str();
    synth->add_option("--feature-dim", sb.feature_dim, "feature dimension")->capture_default_str();
    synth->add_option("--feature-noise", sb.feature_noise, "Gaussian feature noise scale")->capture_default_str();
    synth->add_option("--inject", sb_inject, "extra inter-class edges to add after generation")->capture_default_str();
    synth->add_option("--name", sb_name, "dataset name")->capture_default_str();
    synth->add_option("--seed", sb_seed, "random seed")->capture_default_str();
    synth->add_option("--out", sb_out, "output bundle directory")->required();

    // export-z
    auto* exportz = app.add_subcommand("export-z", "write the per-edge strength report of a trained model");
    std::string ez_model, ez_data, ez_out;
    exportz->add_option("--model", ez_model, "model.json written by train")->required();
    exportz->add_option("--data", ez_data, "bundle directory the model was trained on")->required();
    exportz->add_option("--out", ez_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kInputError;
    }

    try {
        if (*train) {
            const DatasetBundle b = load_bundle(train_data);
            const auto bc = train_flags.backbone_config();
            const auto tc = train_flags.train_config();
            const TrainResult r = train_one(b, bc, tc, train_vanilla_flag);
            const EvalReport rep = evaluate(r.state, b);
            ensure_dir(train_out);
            detail::write_file(std::filesystem::path(train_out) / "history.tsv", history_tsv(r.history));
            detail::write_file(std::filesystem::path(train_out) / "report.tsv",
                               std::string(kEvalReportHeader) + "\n" + to_tsv(rep) + "\n");
            save_model(r.state, std::filesystem::path(train_out) / "model.json");
            out << kEvalReportHeader << "\n" << to_tsv(rep) << "\n";
            if (train_runs > 1) {
                std::vector<std::function<double()>> jobs;
                for (int k = 1; k < train_runs; ++k)
                    jobs.emplace_back([&, k] {
                        TrainConfig t = tc;
                        t.seed = tc.seed + static_cast<std::uint64_t>(k);
                        return train_one(b, bc, t, train_vanilla_flag).history.best_record().test_acc;
                    });
                std::vector<double> acc{rep.accuracy_test};
                for (double a : run_parallel(jobs, sweep_threads())) acc.push_back(a);
                std::string tsv = "seed\taccuracy_test\n";
                for (std::size_t k = 0; k < acc.size(); ++k)
                    tsv += std::to_string(tc.seed + k) + "\t" + format_real(acc[k]) + "\n";
                tsv += "mean_std\t" + mean_std_row(mean_std(acc)) + "\n";
                detail::write_file(std::filesystem::path(train_out) / "runs.tsv", tsv);
                out << tsv;
            }
            return kOk;
        }

        if (*gradcheck) {
            gc.include_direct_term = !gc_no_direct;
            bool ok = true;
            out << "backbone\tmax_rel_error\tcompared\tskipped\tstatus\n";
            for (const auto& name : gc_backbones) {
                const auto r = run_gradcheck(parse_backbone(name), gc);
                const bool pass = r.max_rel_error <= gc_tolerance;
                ok = ok && pass;
                out << name << "\t" << format_real(r.max_rel_error) << "\t" << r.compared << "\t" << r.skipped << "\t"
                    << (pass ? "PASS" : "FAIL") << "\n";
            }
            return ok ? kOk : kVerificationFailed;
        }

        if (*robust) {
            const DatasetBundle base = load_bundle(rb_data);
            const auto bc = rb_flags.backbone_config();
            const auto tc0 = rb_flags.train_config();
            require(rb_scale >= 0.0, "robustness: --scale must be non-negative");
            std::vector<std::size_t> levels;
            for (auto g : rb_grid) levels.push_back(static_cast<std::size_t>(std::llround(static_cast<double>(g) * rb_scale)));

            std::vector<std::shared_ptr<const DatasetBundle>> bundles;
            for (std::size_t li = 0; li < levels.size(); ++li) {
                auto b = std::make_shared<DatasetBundle>(base);
                RngStream noise = RngStream(tc0.seed).fork(0x7e57 + levels[li]);
                b->graph = inject_inter_class_edges(base.graph, base.labels, levels[li], noise);
                bundles.push_back(std::move(b));
            }
            std::vector<std::function<double()>> jobs;
            for (std::size_t li = 0; li < levels.size(); ++li)
                for (int method = 0; method < 2; ++method)
                    for (int r = 0; r < rb_runs; ++r)
                        jobs.emplace_back([&, li, method, r] {
                            TrainConfig tc = tc0;
                            tc.seed = tc0.seed + static_cast<std::uint64_t>(r);
                            return train_one(*bundles[li], bc, tc, method == 0).history.best_record().test_acc;
                        });
            const auto acc = run_parallel(jobs, sweep_threads());

            std::string tsv = "level\tmethod\tmean\tstd\truns\n";
            std::size_t k = 0;
            std::vector<double> margins;
            for (std::size_t li = 0; li < levels.size(); ++li) {
                double means[2];
                for (int method = 0; method < 2; ++method) {
                    std::vector<double> xs(acc.begin() + static_cast<std::ptrdiff_t>(k),
                                           acc.begin() + static_cast<std::ptrdiff_t>(k + static_cast<std::size_t>(rb_runs)));
                    k += static_cast<std::size_t>(rb_runs);
                    const MeanStd ms = mean_std(xs);
                    means[method] = ms.mean;
                    tsv += std::to_string(levels[li]) + "\t" + (method == 0 ? "vanilla" : "gsebo") + "\t" + mean_std_row(ms) +
                           "\t" + std::to_string(rb_runs) + "\n";
                }
                margins.push_back(means[1] - means[0]);
            }
            ensure_dir(rb_out);
            detail::write_file(std::filesystem::path(rb_out) / "robustness.tsv", tsv);
            out << tsv;
            if (margins.size() >= 2) {
                const auto hi = std::max_element(levels.begin(), levels.end()) - levels.begin();
                const auto lo = std::min_element(levels.begin(), levels.end()) - levels.begin();
                err << "margin (gsebo - vanilla) at level " << levels[static_cast<std::size_t>(lo)] << ": "
                    << format_real(margins[static_cast<std::size_t>(lo)]) << ", at level "
                    << levels[static_cast<std::size_t>(hi)] << ": " << format_real(margins[static_cast<std::size_t>(hi)])
                    << (margins[static_cast<std::size_t>(hi)] >= margins[static_cast<std::size_t>(lo)] ? " (grows with noise)"
                                                                                                       : " (does not grow with noise)")
                    << "\n";
            }
            return kOk;
        }

        if (*sweep) {
            const DatasetBundle b = load_bundle(sw_data);
            const auto bc = sw_flags.backbone_config();
            const auto tc0 = sw_flags.train_config();
            std::vector<std::function<double()>> jobs;
            for (int tau : sw_grid)
                for (int r = 0; r < sw_runs; ++r)
                    jobs.emplace_back([&, tau, r] {
                        TrainConfig tc = tc0;
                        tc.tau = tau;
                        tc.seed = tc0.seed + static_cast<std::uint64_t>(r);
                        return train_gsebo(b, bc, tc).history.best_record().test_acc;
                    });
            const auto acc = run_parallel(jobs, sweep_threads());
            std::string tsv = "tau\tmean\tstd\truns\n";
            for (std::size_t i = 0; i < sw_grid.size(); ++i) {
                const auto first = acc.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(sw_runs));
                const std::vector<double> xs(first, first + sw_runs);
                tsv += std::to_string(sw_grid[i]) + "\t" + mean_std_row(mean_std(xs)) + "\t" + std::to_string(sw_runs) + "\n";
            }
            ensure_dir(sw_out);
            detail::write_file(std::filesystem::path(sw_out) / "tau_sweep.tsv", tsv);
            out << tsv;
            return kOk;
        }

        if (*synth) {
            RngStream rng(sb_seed);
            DatasetBundle b = generate_sbm(sb, rng);
            b.name = sb_name;
            if (sb_inject > 0) {
                RngStream noise = rng.fork(0x7e57);
                b.graph = inject_inter_class_edges(b.graph, b.labels, sb_inject, noise);
            }
            save_bundle(b, sb_out);
            out << "n\tedges\tclasses\ttrain\tval\ttest\tinter_class_ratio\n"
                << b.n() << "\t" << b.graph.num_edges() << "\t" << b.num_classes << "\t" << b.split.train.size() << "\t"
                << b.split.val.size() << "\t" << b.split.test.size() << "\t" << format_real(inter_class_ratio(b.graph, b.labels))
                << "\n";
            return kOk;
        }

        if (*exportz) {
            const DatasetBundle b = load_bundle(ez_data);
            const ModelState st = load_model(ez_model, b);
            ensure_dir(ez_out);
            export_z_report(st, b, std::filesystem::path(ez_out) / "z_report.tsv");
            const auto s = z_strength_summary(st, b);
            out << "mean_strength_intra\tmean_strength_inter\n"
                << format_real(s.mean_intra) << "\t" << format_real(s.mean_inter) << "\n";
            return kOk;
        }
    } catch (const DivergenceError& e) {
        err << "diverged: " << e.what() << "\n";
        return kDivergence;
    } catch (const InputError& e) {
        err << "input error: " << e.what() << "\n";
        return kInputError;
    } catch (const ContractError& e) {
        err << "invalid input: " << e.what() << "\n";
        return kInputError;
    }
    return kInputError;
}

}  // namespace gsebo::cli

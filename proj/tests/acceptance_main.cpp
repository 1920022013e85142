// End-to-end acceptance checks. One PASS/FAIL line per criterion; exit status
// is non-zero when any gating criterion fails.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gsebo/bilevel.hpp"
#include "gsebo/cli.hpp"
#include "gsebo/io.hpp"
#include "gsebo/metrics.hpp"
#include "gsebo/verify.hpp"
#include "dense_reference.hpp"

using namespace gsebo;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail, bool gating = true) {
    std::printf("%s criterion %d (%s): %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    if (!pass && gating) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

// 1. Reverse hypergradient against central differences.
void hypergradient_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    std::size_t compared = 0, skipped = 0;
    bool ok = true;
    std::string detail;
    for (Backbone bb : {Backbone::gcn, Backbone::sage, Backbone::jknet})
        for (int tau : {1, 3, 5})
            for (std::size_t n : {12, 16}) {
                GradcheckOptions o;
                o.n = n;
                o.tau = tau;
                o.eta_inner = 0.1;
                o.seed = n * 10 + static_cast<std::size_t>(tau);
                const GradcheckResult r = run_gradcheck(bb, o);
                worst = std::max(worst, r.max_rel_error);
                compared += r.compared;
                skipped += r.skipped;
                if (r.max_rel_error > 1e-3 || r.compared == 0) {
                    ok = false;
                    detail += " [" + to_string(bb) + " tau=" + std::to_string(tau) + " n=" + std::to_string(n) +
                              fmt(" err=%.3g]", r.max_rel_error);
                }
            }
    const double sec = seconds_since(t0);
    ok = ok && sec < 60.0;
    report(1, "hypergradient matches finite differences", ok,
           fmt("max rel error %.3g", worst) + ", " + std::to_string(compared) + " entries compared, " +
               std::to_string(skipped) + " skipped, " + fmt("%.1f s", sec) + detail);
}

// 2. L = (w - z)^2, F = w^2, w0 = 1, z = 0, eta = 0.25, one step: dF/dz = 0.5.
struct ScalarQuadratic {
    Var inner_loss(Tape&, std::span<const Var> w, const Var& z, DropoutMasks&) const {
        const Var d = sub(w[0], z);
        return mul(d, d);
    }
    Var outer_loss(Tape&, std::span<const Var> w, const Var&) const { return mul(w[0], w[0]); }
};

void analytic_toy() {
    const ScalarQuadratic q;
    WeightList w{DenseMatrix{{1.0}}};
    const Trajectory traj = inner_unroll(q, w, DenseMatrix{{0.0}}, 1, 0.25, nullptr);
    const double p = hypergradient_reverse(q, traj, true).p[0];
    report(2, "analytic toy", std::abs(p - 0.5) <= 1e-8 && w[0][0] == 0.5, fmt("hypergradient %.17g", p));
}

// 3. Learned-structure forward at its initial strengths equals the plain backbone.
void vanilla_equivalence() {
    using namespace gsebo::testing::dense;
    double worst = 0;
    for (Backbone bb : {Backbone::gcn, Backbone::sage, Backbone::jknet, Backbone::gat})
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            SbmParams p;
            p.n = 40;
            p.p_intra = 0.2;
            p.p_inter = 0.03;
            p.feature_dim = 6;
            RngStream rng(500 + seed);
            const DatasetBundle b = generate_sbm(p, rng);
            BackboneConfig c;
            c.backbone = bb;
            c.heads = bb == Backbone::gat ? 2 : 1;
            c.hidden = 8;
            c.dropout = 0.0;
            RngStream rv(seed), rg(seed);
            ModelState van = init_model(b, c, rv, Mode::vanilla);
            ModelState gse = init_model(b, c, rg, Mode::gsebo);
            if (bb == Backbone::gat) {
                // Zero attention vectors: attention is uniform over each neighbourhood.
                for (std::size_t i = 0; i < van.weights.mats.size(); i += 3) {
                    van.weights.mats[i + 1] = DenseMatrix(van.weights.mats[i + 1].rows(), 1);
                    van.weights.mats[i + 2] = DenseMatrix(van.weights.mats[i + 2].rows(), 1);
                }
                gse.weights.mats = strip_attention(van.weights.mats);
            }
            const DenseMatrix ref = dense_forward(b, c, van.weights.mats);
            const DenseMatrix out = predict(gse);
            for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(out[i] - ref[i]));
            const DenseMatrix vout = predict(van);
            for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(out[i] - vout[i]));
        }
    report(3, "vanilla equivalence at initial strengths", worst <= 1e-10,
           fmt("max abs logit difference %.3g over 4 backbones x 10 seeds", worst));
}

// 4. Denoising on a stochastic block model with injected inter-class edges.
void synthetic_denoising() {
    const auto t0 = std::chrono::steady_clock::now();
    const int seeds = 5;
    double sum_v = 0, sum_g = 0, intra = 0, injected = 0, intra0 = 0, injected0 = 0;
    int wins = 0;
    std::string per_seed;
    for (int s = 0; s < seeds; ++s) {
        RngStream rng(100 + static_cast<std::uint64_t>(s));
        SbmParams prm;
        prm.feature_dim = 3;
        prm.feature_noise = 0.3;
        DatasetBundle b = generate_sbm(prm, rng);
        const Graph original = b.graph;
        RngStream noise = rng.fork(99);
        b.graph = inject_inter_class_edges(b.graph, b.labels, 600, noise);

        BackboneConfig bc;
        TrainConfig tc;
        tc.tau = 15;
        tc.seed = static_cast<std::uint64_t>(s);
        const TrainResult v = train_vanilla(b, bc, tc);
        const TrainResult g = train_gsebo(b, bc, tc);
        const double va = v.history.best_record().test_acc, ga = g.history.best_record().test_acc;
        sum_v += va;
        sum_g += ga;
        wins += ga >= va ? 1 : 0;

        const auto& prop = *g.state.spec.prop;
        const auto& p = *prop.pattern;
        double si = 0, sj = 0, si0 = 0, sj0 = 0;
        std::size_t ni = 0, nj = 0;
        for (std::size_t i = 0; i < p.n; ++i)
            for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e) {
                const std::size_t j = p.col_indices[e];
                if (i == j) continue;
                const double st = clamp01(g.state.z.values[e]);
                if (b.labels[i] == b.labels[j]) {
                    si += st;
                    si0 += prop.init[e];
                    ++ni;
                } else if (!original.has_edge(static_cast<Index>(i), static_cast<Index>(j))) {
                    sj += st;
                    sj0 += prop.init[e];
                    ++nj;
                }
            }
        intra += si / static_cast<double>(ni);
        injected += sj / static_cast<double>(nj);
        intra0 += si0 / static_cast<double>(ni);
        injected0 += sj0 / static_cast<double>(nj);
        char buf[160];
        std::snprintf(buf, sizeof buf, " [seed %d vanilla %.4f gsebo %.4f]", s, va, ga);
        per_seed += buf;
    }
    const double mv = sum_v / seeds, mg = sum_g / seeds;
    const double sec = seconds_since(t0);
    const bool a = mg >= mv - 0.005 && wins >= 4;
    const bool bpass = injected / seeds < intra / seeds;
    char buf[400];
    std::snprintf(buf, sizeof buf,
                  "(a) mean test acc gsebo %.4f vs vanilla %.4f, gsebo >= vanilla in %d/%d seeds; "
                  "(b) mean strength injected %.5f vs intra %.5f (at init %.5f vs %.5f); %.1f s",
                  mg, mv, wins, seeds, injected / seeds, intra / seeds, injected0 / seeds, intra0 / seeds, sec);
    report(4, "synthetic denoising", a && bpass && sec < 600.0, std::string(buf) + per_seed);
}

// 5. Real-data check, advisory, only with a converted bundle.
void real_data() {
    const char* dir = std::getenv("GSEBO_CORA_BUNDLE");
    if (!dir || !*dir) {
        std::printf("SKIP criterion 5 (real citation data, advisory): set GSEBO_CORA_BUNDLE to a converted bundle\n");
        return;
    }
    try {
        const DatasetBundle b = load_bundle(dir);
        std::vector<double> va, ga;
        for (std::uint64_t s = 0; s < 5; ++s) {
            TrainConfig tc;
            tc.seed = s;
            va.push_back(train_vanilla(b, BackboneConfig{}, tc).history.best_record().test_acc);
            ga.push_back(train_gsebo(b, BackboneConfig{}, tc).history.best_record().test_acc);
        }
        const MeanStd v = mean_std(va), g = mean_std(ga);
        const bool ok = std::abs(v.mean - 0.816) <= 0.02 && g.mean - v.mean >= 0.01;
        char buf[200];
        std::snprintf(buf, sizeof buf, "vanilla %.4f +- %.4f, gsebo %.4f +- %.4f (advisory, not gating)", v.mean, v.stddev,
                      g.mean, g.stddev);
        report(5, "real citation data", ok, buf, false);
    } catch (const std::exception& e) {
        report(5, "real citation data", false, std::string("could not run: ") + e.what(), false);
    }
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int invoke(std::vector<std::string> args, std::string* out = nullptr) {
    args.insert(args.begin(), "gsebo");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
    if (out) *out = o.str();
    return code;
}

// 6. Every command, run twice with the same seed, writes identical TSV bytes.
void determinism(const fs::path& root) {
    const std::vector<std::string> fast{"--hidden", "8", "--tau", "3", "--eta-inner", "0.2", "--eta-outer", "0.05",
                                        "--max-outer", "8", "--patience", "4", "--seed", "7"};
    auto cat = [](std::vector<std::string> a, const std::vector<std::string>& b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    };
    std::vector<std::string> captured[2];
    bool codes_ok = true;
    for (int rep = 0; rep < 2; ++rep) {
        const fs::path d = root / ("det" + std::to_string(rep));
        const std::string data = (d / "data").string();
        std::string out;
        auto run = [&](const std::vector<std::string>& args) {
            codes_ok = invoke(args, &out) == 0 && codes_ok;
            captured[rep].push_back(out);
        };
        run({"gen-synth", "--n", "80", "--p-intra", "0.12", "--p-inter", "0.015", "--inject", "30", "--seed", "7", "--out",
             data});
        for (const char* f : {"edges.tsv", "features.tsv", "labels.tsv"}) captured[rep].push_back(slurp(fs::path(data) / f));
        run(cat({"train", "--data", data, "--out", (d / "train").string(), "--dropout", "0.5"}, fast));
        for (const char* f : {"history.tsv", "report.tsv"}) captured[rep].push_back(slurp(d / "train" / f));
        run(cat({"train", "--data", data, "--out", (d / "gat").string(), "--backbone", "gat", "--heads", "2"}, fast));
        captured[rep].push_back(slurp(d / "gat" / "history.tsv"));
        run({"export-z", "--model", (d / "train" / "model.json").string(), "--data", data, "--out", (d / "z").string()});
        captured[rep].push_back(slurp(d / "z" / "z_report.tsv"));
        run(cat({"tau-sweep", "--data", data, "--out", (d / "sweep").string(), "--grid", "2", "4", "--runs", "2"}, fast));
        captured[rep].push_back(slurp(d / "sweep" / "tau_sweep.tsv"));
        run(cat({"robustness", "--data", data, "--out", (d / "rob").string(), "--grid", "0", "40", "--runs", "2"}, fast));
        captured[rep].push_back(slurp(d / "rob" / "robustness.tsv"));
        run({"gradcheck", "--backbone", "gcn", "--tau", "2", "--n", "12"});
    }
    std::size_t differing = 0;
    for (std::size_t i = 0; i < captured[0].size(); ++i) differing += captured[0][i] != captured[1][i] ? 1 : 0;
    report(6, "determinism", codes_ok && differing == 0 && captured[0].size() == captured[1].size(),
           std::to_string(captured[0].size()) + " outputs compared across two runs, " + std::to_string(differing) +
               " differ" + (codes_ok ? "" : ", a command exited non-zero"));
}

// 7. Spot checks of the structural properties the unit suites cover in depth.
void properties(const fs::path& root) {
    std::vector<std::string> failed;
    auto check = [&](bool ok, const char* what) {
        if (!ok) failed.emplace_back(what);
    };
    RngStream rng(77);

    // clamp range
    bool in_range = true;
    for (int i = 0; i < 100000; ++i) {
        const double x = (rng.uniform() - 0.5) * 1e3;
        const double c = clamp01(x);
        in_range = in_range && c >= 0.0 && c <= 1.0 && (x < 0 || x > 1 || c == x);
    }
    check(in_range, "clamp range");

    SbmParams prm;
    prm.n = 50;
    prm.p_intra = 0.2;
    prm.p_inter = 0.03;
    RngStream brng(78);
    const DatasetBundle b = generate_sbm(prm, brng);

    // permutation equivariance
    std::vector<Index> perm(b.n()), inv(b.n());
    std::iota(perm.begin(), perm.end(), Index{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t i = 0; i < b.n(); ++i) inv[perm[i]] = static_cast<Index>(i);
    DatasetBundle q = b;
    std::vector<Edge> edges;
    for (const auto& e : b.graph.edges()) edges.push_back({std::min(inv[e.u], inv[e.v]), std::max(inv[e.u], inv[e.v])});
    q.graph = Graph::from_edges(b.n(), edges);
    for (std::size_t i = 0; i < b.n(); ++i) {
        q.labels[i] = b.labels[perm[i]];
        for (std::size_t j = 0; j < b.features.cols(); ++j) q.features(i, j) = b.features(perm[i], j);
    }
    bool equivariant = true;
    for (Backbone bb : {Backbone::gcn, Backbone::sage, Backbone::jknet, Backbone::gat}) {
        BackboneConfig c;
        c.backbone = bb;
        c.heads = 2;
        RngStream r1(79), r2(79);
        const DenseMatrix ya = predict(init_model(b, c, r1)), yq = predict(init_model(q, c, r2));
        for (std::size_t i = 0; i < b.n(); ++i)
            for (std::size_t j = 0; j < ya.cols(); ++j) equivariant = equivariant && std::abs(yq(i, j) - ya(perm[i], j)) <= 1e-12;
    }
    check(equivariant, "permutation equivariance");

    // round-trip I/O
    try {
        const fs::path d = root / "roundtrip";
        save_bundle(b, d);
        const DatasetBundle back = load_bundle(d);
        BackboneConfig c;
        RngStream r(80);
        const ModelState st = init_model(b, c, r);
        save_model(st, d / "model.json");
        const ModelState sb = load_model(d / "model.json", back);
        check(back.graph.edges() == b.graph.edges() && back.features == b.features && back.labels == b.labels &&
                  back.split == b.split && sb.weights.mats == st.weights.mats && sb.z.values == st.z.values,
              "round-trip I/O");
    } catch (const std::exception&) {
        check(false, "round-trip I/O");
    }

    // early-stopping snapshot optimality, finite losses
    {
        BackboneConfig c;
        c.hidden = 8;
        TrainConfig tc;
        tc.tau = 3;
        tc.eta_inner = 0.2;
        tc.eta_outer = 0.05;
        tc.max_outer = 30;
        tc.patience = 5;
        const TrainResult r = train_gsebo(b, c, tc);
        double best = 0;
        bool finite = true;
        for (const auto& rec : r.history.records) {
            best = std::max(best, rec.val_acc);
            for (double l : rec.inner_losses) finite = finite && std::isfinite(l);
            finite = finite && std::isfinite(rec.val_loss);
        }
        check(r.history.best_record().val_acc == best && evaluate(r.state, b).accuracy_val == best,
              "early-stopping snapshot optimality");
        check(finite, "finite recorded losses");
    }

    // inter-class ratio strictly increases with injected edges
    {
        double prev = inter_class_ratio(b.graph, b.labels);
        bool mono = true;
        for (std::size_t k : {1, 10, 50, 200}) {
            RngStream r(k);
            const double now = inter_class_ratio(inject_inter_class_edges(b.graph, b.labels, k, r), b.labels);
            mono = mono && now > prev;
            prev = now;
        }
        check(mono, "inter-ratio monotonicity");
    }

    std::string detail = failed.empty() ? "clamp range, permutation equivariance, round-trip I/O, early stopping, "
                                          "finite losses, inter-ratio monotonicity all hold (full suites run under ctest)"
                                        : "failed:";
    for (const auto& f : failed) detail += " " + f;
    report(7, "property checks", failed.empty(), detail);
}

}  // namespace

int main() {
    setenv("GSEBO_THREADS", "1", 0);
    const fs::path root = fs::temp_directory_path() / ("gsebo_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(root);
    const auto t0 = std::chrono::steady_clock::now();
    hypergradient_oracle();
    analytic_toy();
    vanilla_equivalence();
    synthetic_denoising();
    real_data();
    determinism(root);
    properties(root);
    fs::remove_all(root);
    std::printf("%d gating criteria failed, %.1f s total\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}

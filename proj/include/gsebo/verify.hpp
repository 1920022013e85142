#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gsebo/bilevel.hpp"
#include "gsebo/graph.hpp"
#include "gsebo/models.hpp"
#include "gsebo/rng.hpp"

namespace gsebo {

/// Settings for checking the reverse hypergradient against finite differences.
struct GradcheckOptions {
    std::size_t n = 14;
    int classes = 3;
    int layers = 2;
    int hidden = 8;
    int heads = 1;
    int tau = 3;
    double eta_inner = 0.1;
    double lambda = 5e-4;
    bool include_direct_term = true;
    bool reg_z = false;
    double epsilon = 1e-4;
    double skip_below = 1e-8;  ///< entries with |fd| under this are not compared
    std::uint64_t seed = 0;
};

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::size_t compared = 0;
    std::size_t skipped = 0;
    Hypergradient analytic;
    Hypergradient numeric;
};

/// Small SBM for derivative checks. Isolated nodes are attached to their
/// successor so no normalized strength sits on the clamp boundary.
inline DatasetBundle gradcheck_bundle(const GradcheckOptions& o) {
    RngStream rng(o.seed);
    SbmParams prm;
    prm.n = o.n;
    prm.classes = o.classes;
    prm.p_intra = 0.4;
    prm.p_inter = 0.08;
    prm.feature_dim = 6;
    prm.feature_noise = 0.5;
    DatasetBundle b = generate_sbm(prm, rng);
    auto edges = b.graph.edges();
    const auto deg = degrees(b.graph);
    for (Index i = 0; i < o.n; ++i)
        if (deg[i] == 0) {
            const Index j = static_cast<Index>((i + 1) % o.n);
            edges.push_back({std::min(i, j), std::max(i, j)});
        }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    b.graph = Graph::from_edges(o.n, edges);
    b.name = "gradcheck";

    // 10:20:70 leaves one or two labelled nodes on a graph this small; use a
    // denser labelling so most strengths influence both objectives.
    std::vector<Index> perm(o.n);
    for (Index i = 0; i < o.n; ++i) perm[i] = i;
    RngStream split_rng = rng.fork(11);
    for (std::size_t i = o.n; i > 1; --i) std::swap(perm[i - 1], perm[split_rng.below(i)]);
    const std::size_t third = o.n / 3;
    b.split.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(third));
    b.split.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(third), perm.begin() + static_cast<std::ptrdiff_t>(2 * third));
    b.split.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(2 * third), perm.end());
    for (auto* part : {&b.split.train, &b.split.val, &b.split.test}) std::sort(part->begin(), part->end());
    return b;
}

/// Runs hypergradient_reverse and fd_hypergradient_oracle on the same
/// deterministic problem (dropout off, Z scaled to 0.9x its initialization so
/// every strength is strictly inside the clamp range).
inline GradcheckResult run_gradcheck(Backbone backbone, const GradcheckOptions& o) {
    const DatasetBundle b = gradcheck_bundle(o);
    BackboneConfig bc;
    bc.backbone = backbone;
    bc.layers = o.layers;
    bc.hidden = o.hidden;
    bc.heads = o.heads;
    bc.dropout = 0.0;
    RngStream rng = RngStream(o.seed).fork(7);
    const ModelState st = init_model(b, bc, rng);
    DenseMatrix z = DenseMatrix::column(st.z.values);
    for (auto& v : z.values()) v *= 0.9;

    GnnProblem problem{&b, st.spec, LossConfig{o.lambda, o.reg_z}};
    WeightList w = st.weights.mats;
    const Trajectory traj = inner_unroll(problem, w, z, o.tau, o.eta_inner, nullptr);

    GradcheckResult r;
    r.analytic = hypergradient_reverse(problem, traj, o.include_direct_term);
    r.numeric = fd_hypergradient_oracle(problem, st.weights.mats, z, o.tau, o.eta_inner, o.include_direct_term, o.epsilon);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double a = r.analytic.p[i], f = r.numeric.p[i];
        if (std::abs(f) < o.skip_below) {
            ++r.skipped;
            continue;
        }
        ++r.compared;
        r.max_rel_error = std::max(r.max_rel_error, std::abs(a - f) / std::max(std::abs(a), std::abs(f)));
    }
    return r;
}

}  // namespace gsebo

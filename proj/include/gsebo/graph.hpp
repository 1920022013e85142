#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gsebo/error.hpp"
#include "gsebo/matrix.hpp"
#include "gsebo/rng.hpp"

namespace gsebo {

struct Edge {
    Index u = 0;
    Index v = 0;
    friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Immutable undirected graph. Each undirected edge is stored in both
/// directions of the CSR pattern; self loops, when present, cover every node.
class Graph {
public:
    Graph() : pattern_(std::make_shared<const SparsePattern>()) {}

    /// Builds from undirected pairs. Self loops and repeated pairs are rejected.
    static Graph from_edges(std::size_t n, const std::vector<Edge>& edges) {
        std::vector<std::vector<Index>> adj(n);
        for (const auto& e : edges) {
            require(e.u < n && e.v < n, "graph: edge endpoint out of range");
            require(e.u != e.v, "graph: self loop in edge list");
            adj[e.u].push_back(e.v);
            adj[e.v].push_back(e.u);
        }
        Graph g(build(n, adj), false);
        require(g.pattern_->nnz() == 2 * edges.size(), "graph: duplicate edge in edge list");
        return g;
    }

    std::size_t n() const noexcept { return pattern_->n; }
    const PatternPtr& pattern() const noexcept { return pattern_; }
    bool has_self_loops() const noexcept { return self_loops_; }
    std::size_t nnz() const noexcept { return pattern_->nnz(); }

    /// Undirected non-loop edges.
    std::size_t num_edges() const noexcept { return (nnz() - (self_loops_ ? n() : 0)) / 2; }

    bool has_edge(std::size_t u, std::size_t v) const noexcept { return pattern_->find(u, v) != pattern_->nnz(); }

    /// Canonical edge list: u < v, lexicographically sorted, loops omitted.
    std::vector<Edge> edges() const {
        std::vector<Edge> out;
        out.reserve(num_edges());
        for (std::size_t u = 0; u < n(); ++u)
            for (std::size_t e = pattern_->row_begin(u); e < pattern_->row_end(u); ++e)
                if (pattern_->col_indices[e] > u) out.push_back({static_cast<Index>(u), pattern_->col_indices[e]});
        return out;
    }

    friend Graph add_self_loops(const Graph& g);

private:
    Graph(SparsePattern p, bool loops) : pattern_(std::make_shared<const SparsePattern>(std::move(p))), self_loops_(loops) {}

    static SparsePattern build(std::size_t n, std::vector<std::vector<Index>>& adj) {
        SparsePattern p;
        p.n = n;
        p.row_offsets.assign(n + 1, 0);
        for (std::size_t r = 0; r < n; ++r) {
            std::sort(adj[r].begin(), adj[r].end());
            adj[r].erase(std::unique(adj[r].begin(), adj[r].end()), adj[r].end());
            p.row_offsets[r + 1] = p.row_offsets[r] + adj[r].size();
        }
        p.col_indices.reserve(p.row_offsets[n]);
        for (auto& row : adj) p.col_indices.insert(p.col_indices.end(), row.begin(), row.end());
        return p;
    }

    PatternPtr pattern_;
    bool self_loops_ = false;
};

/// A + I.
inline Graph add_self_loops(const Graph& g) {
    if (g.has_self_loops()) throw ContractError("add_self_loops: graph already has self loops");
    const auto& p = *g.pattern();
    std::vector<std::vector<Index>> adj(g.n());
    for (std::size_t r = 0; r < g.n(); ++r) {
        adj[r].assign(p.col_indices.begin() + static_cast<std::ptrdiff_t>(p.row_begin(r)),
                      p.col_indices.begin() + static_cast<std::ptrdiff_t>(p.row_end(r)));
        adj[r].push_back(static_cast<Index>(r));
    }
    return Graph(Graph::build(g.n(), adj), true);
}

/// Stored entries per row (self loop included when present).
inline std::vector<std::size_t> degrees(const Graph& g) {
    std::vector<std::size_t> d(g.n());
    for (std::size_t r = 0; r < g.n(); ++r) d[r] = g.pattern()->degree(r);
    return d;
}

/// 1/sqrt(d_i d_j) for each stored (i, j) of a self-looped graph.
inline std::vector<double> sym_norm_values(const Graph& g) {
    require(g.has_self_loops(), "sym_norm_values: graph must carry self loops");
    const auto& p = *g.pattern();
    const auto d = degrees(g);
    std::vector<double> v(p.nnz());
    for (std::size_t i = 0; i < p.n; ++i)
        for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e)
            v[e] = 1.0 / std::sqrt(static_cast<double>(d[i]) * static_cast<double>(d[p.col_indices[e]]));
    return v;
}

struct RowNormValues {
    std::vector<double> values;
    std::vector<Index> isolated;  ///< rows without neighbours; they carry no entries
};

/// 1/d_i for each stored (i, j) of a graph without self loops.
inline RowNormValues row_norm_values(const Graph& g) {
    require(!g.has_self_loops(), "row_norm_values: graph must not carry self loops");
    const auto& p = *g.pattern();
    RowNormValues out;
    out.values.resize(p.nnz());
    for (std::size_t i = 0; i < p.n; ++i) {
        const std::size_t d = p.degree(i);
        if (d == 0) out.isolated.push_back(static_cast<Index>(i));
        for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e) out.values[e] = 1.0 / static_cast<double>(d);
    }
    return out;
}

/// Fraction of undirected non-loop edges whose endpoints carry different labels.
inline double inter_class_ratio(const Graph& g, const std::vector<int>& labels) {
    require(labels.size() == g.n(), "inter_class_ratio: label count does not match node count");
    const auto edges = g.edges();
    if (edges.empty()) return 0.0;
    std::size_t inter = 0;
    for (const auto& e : edges) inter += labels[e.u] != labels[e.v] ? 1 : 0;
    return static_cast<double>(inter) / static_cast<double>(edges.size());
}

/// Adds exactly k new undirected edges between nodes of different classes.
/// Pairs are sampled uniformly with rejection of loops, same-class pairs and
/// existing edges. When k is a large share of the remaining candidates the
/// candidates are enumerated and a uniform k-subset is drawn instead.
inline Graph inject_inter_class_edges(const Graph& g, const std::vector<int>& labels, std::size_t k, RngStream& rng) {
    require(!g.has_self_loops(), "inject_inter_class_edges: expects the loop-free adjacency");
    require(labels.size() == g.n(), "inject_inter_class_edges: label count does not match node count");
    if (k == 0) return g;

    std::vector<std::size_t> per_class;
    for (int y : labels) {
        require(y >= 0, "inject_inter_class_edges: negative label");
        if (static_cast<std::size_t>(y) >= per_class.size()) per_class.resize(static_cast<std::size_t>(y) + 1, 0);
        ++per_class[static_cast<std::size_t>(y)];
    }
    std::size_t same_pairs = 0;
    for (auto c : per_class) same_pairs += c * (c - (c > 0 ? 1 : 0)) / 2;
    const std::size_t n = g.n();
    const std::size_t all_pairs = n * (n - (n > 0 ? 1 : 0)) / 2;
    std::size_t existing_inter = 0;
    auto existing = g.edges();
    for (const auto& e : existing) existing_inter += labels[e.u] != labels[e.v] ? 1 : 0;
    const std::size_t available = all_pairs - same_pairs - existing_inter;
    if (std::count_if(per_class.begin(), per_class.end(), [](auto c) { return c > 0; }) < 2)
        throw ContractError("inject_inter_class_edges: fewer than two classes present");
    if (k > available)
        throw ContractError("inject_inter_class_edges: requested " + std::to_string(k) + " edges but only " +
                            std::to_string(available) + " inter-class non-edges exist");

    std::vector<Edge> added;
    if (2 * k <= available) {
        std::set<Edge> taken;
        while (added.size() < k) {
            auto u = static_cast<Index>(rng.below(n));
            auto v = static_cast<Index>(rng.below(n));
            if (u == v || labels[u] == labels[v]) continue;
            if (u > v) std::swap(u, v);
            if (g.has_edge(u, v) || !taken.insert({u, v}).second) continue;
            added.push_back({u, v});
        }
    } else {
        std::vector<Edge> candidates;
        candidates.reserve(available);
        for (Index u = 0; u < n; ++u)
            for (Index v = u + 1; v < n; ++v)
                if (labels[u] != labels[v] && !g.has_edge(u, v)) candidates.push_back({u, v});
        // partial Fisher-Yates
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + rng.below(candidates.size() - i);
            std::swap(candidates[i], candidates[j]);
        }
        added.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k));
    }
    existing.insert(existing.end(), added.begin(), added.end());
    return Graph::from_edges(n, existing);
}

/// Disjoint train/validation/test node sets.
struct DataSplit {
    std::vector<Index> train;
    std::vector<Index> val;
    std::vector<Index> test;

    void validate(std::size_t n) const {
        require(!train.empty() && !val.empty() && !test.empty(), "split: every part must be nonempty");
        std::vector<char> seen(n, 0);
        for (const auto* part : {&train, &val, &test})
            for (Index i : *part) {
                require(i < n, "split: node index " + std::to_string(i) + " out of range");
                require(!seen[i], "split: node " + std::to_string(i) + " appears more than once");
                seen[i] = 1;
            }
    }

    friend bool operator==(const DataSplit&, const DataSplit&) = default;
};

struct DatasetBundle {
    std::string name;
    Graph graph;           ///< adjacency A, no self loops
    DenseMatrix features;  ///< N x C
    std::vector<int> labels;
    int num_classes = 0;
    DataSplit split;

    std::size_t n() const noexcept { return graph.n(); }

    void validate() const {
        require(!graph.has_self_loops(), "bundle: adjacency must not contain self loops");
        require(features.rows() == graph.n(), "bundle: feature rows do not match node count");
        require(labels.size() == graph.n(), "bundle: label count does not match node count");
        require(num_classes >= 1, "bundle: no classes");
        for (int y : labels) require(y >= 0 && y < num_classes, "bundle: label out of range");
        require(features.all_finite(), "bundle: non-finite feature");
        split.validate(graph.n());
    }
};

/// Random 10:20:70 train/val/test split.
inline DataSplit random_split(std::size_t n, RngStream& rng) {
    std::vector<Index> perm(n);
    std::iota(perm.begin(), perm.end(), Index{0});
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const auto n_train = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
    DataSplit s;
    s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
    for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
    return s;
}

struct SbmParams {
    std::size_t n = 300;
    int classes = 3;
    double p_intra = 0.04;
    double p_inter = 0.0035;
    std::size_t feature_dim = 3;
    double feature_noise = 0.3;
};

/// Stochastic block model bundle. Nodes are assigned to classes in contiguous
/// balanced blocks; features are the one-hot class centroid (class index
/// modulo feature_dim) plus isotropic Gaussian noise.
inline DatasetBundle generate_sbm(const SbmParams& prm, RngStream& rng) {
    require(prm.classes >= 2, "generate_sbm: need at least two classes");
    require(prm.n >= 10 && prm.n >= static_cast<std::size_t>(prm.classes), "generate_sbm: too few nodes");
    require(prm.feature_dim >= 1, "generate_sbm: feature_dim must be positive");
    require(prm.p_intra >= 0.0 && prm.p_intra <= 1.0 && prm.p_inter >= 0.0 && prm.p_inter <= 1.0,
            "generate_sbm: probabilities must lie in [0, 1]");
    require(prm.feature_noise >= 0.0 && std::isfinite(prm.feature_noise), "generate_sbm: invalid feature noise");

    DatasetBundle b;
    b.name = "sbm";
    b.num_classes = prm.classes;
    b.labels.resize(prm.n);
    for (std::size_t i = 0; i < prm.n; ++i)
        b.labels[i] = static_cast<int>(i * static_cast<std::size_t>(prm.classes) / prm.n);

    RngStream edge_rng = rng.fork(1), feat_rng = rng.fork(2), split_rng = rng.fork(3);
    std::vector<Edge> edges;
    for (Index u = 0; u < prm.n; ++u)
        for (Index v = u + 1; v < prm.n; ++v) {
            const double p = b.labels[u] == b.labels[v] ? prm.p_intra : prm.p_inter;
            if (edge_rng.uniform() < p) edges.push_back({u, v});
        }
    b.graph = Graph::from_edges(prm.n, edges);

    b.features = DenseMatrix(prm.n, prm.feature_dim);
    for (std::size_t i = 0; i < prm.n; ++i) {
        for (std::size_t c = 0; c < prm.feature_dim; ++c) b.features(i, c) = prm.feature_noise * feat_rng.normal();
        b.features(i, static_cast<std::size_t>(b.labels[i]) % prm.feature_dim) += 1.0;
    }
    b.split = random_split(prm.n, split_rng);
    return b;
}

}  // namespace gsebo

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gsebo/graph.hpp"
#include "gsebo/matrix.hpp"
#include "gsebo/rng.hpp"
#include "gsebo/tape.hpp"

namespace gsebo::testing {

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline DenseMatrix random_matrix(std::size_t r, std::size_t c, RngStream& rng, double lo = -1.0, double hi = 1.0) {
    DenseMatrix m(r, c);
    for (auto& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

/// Same as random_matrix but keeps every entry at least `gap` away from 0.
inline DenseMatrix random_kink_free(std::size_t r, std::size_t c, RngStream& rng, double gap = 0.05) {
    DenseMatrix m(r, c);
    for (auto& v : m.values()) {
        const double mag = rng.uniform(gap, 1.0);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return m;
}

inline double eval(const ScalarFn& f, const std::vector<DenseMatrix>& xs) {
    Tape t;
    std::vector<Var> v;
    for (const auto& x : xs) v.push_back(t.constant(x));
    return f(t, v).value()[0];
}

/// Max relative error between tape gradients and central differences,
/// relative to max(|a|, |f|, floor).
inline double fd_gradient_error(const ScalarFn& f, const std::vector<DenseMatrix>& xs, double eps, double floor = 1e-6) {
    Tape t;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(t.leaf(x));
    const auto g = t.gradients(f(t, leaves), leaves).values();
    double worst = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k)
        for (std::size_t i = 0; i < xs[k].size(); ++i) {
            auto plus = xs, minus = xs;
            plus[k][i] += eps;
            minus[k][i] -= eps;
            const double fd = (eval(f, plus) - eval(f, minus)) / (2 * eps);
            const double a = g[k][i];
            worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor}));
        }
    return worst;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Six-node graph with a triangle, a tail and a pendant; classes 0/1/2.
inline DatasetBundle six_node_bundle(std::uint64_t seed = 5, std::size_t fdim = 4) {
    DatasetBundle b;
    b.name = "six";
    b.graph = Graph::from_edges(6, {{0, 1}, {0, 2}, {1, 2}, {2, 3}, {3, 4}, {4, 5}});
    b.labels = {0, 0, 1, 1, 2, 2};
    b.num_classes = 3;
    RngStream rng(seed);
    b.features = random_matrix(6, fdim, rng);
    b.split.train = {0, 3};
    b.split.val = {1, 4};
    b.split.test = {2, 5};
    return b;
}

}  // namespace gsebo::testing

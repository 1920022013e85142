#pragma once

#include <chrono>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gsebo/error.hpp"
#include "gsebo/graph.hpp"
#include "gsebo/matrix.hpp"
#include "gsebo/metrics.hpp"
#include "gsebo/models.hpp"
#include "gsebo/rng.hpp"
#include "gsebo/tape.hpp"

namespace gsebo {

struct TrainConfig {
    double eta_inner = 0.01;
    double eta_outer = 0.01;
    int tau = 15;
    double lambda = 5e-4;
    int patience = 20;
    int max_outer = 400;
    std::uint64_t seed = 0;
    bool include_direct_term = true;
    bool warm_start = true;
    bool reg_z = false;

    void validate() const {
        require(tau >= 1, "train config: tau must be >= 1");
        require(eta_inner >= 0.0 && std::isfinite(eta_inner), "train config: eta_inner must be finite and >= 0");
        require(eta_outer >= 0.0 && std::isfinite(eta_outer), "train config: eta_outer must be finite and >= 0");
        require(lambda >= 0.0, "train config: lambda must be >= 0");
        require(patience >= 0, "train config: patience must be >= 0");
        require(max_outer >= 1, "train config: max_outer must be >= 1");
    }
};

using WeightList = std::vector<DenseMatrix>;

/// An inner objective L(W, Z) and an outer objective F(W, Z), both recorded on
/// a tape. W is a list of matrices, Z a single column.
template <class P>
concept BilevelProblem = requires(const P& p, Tape& t, std::span<const Var> w, const Var& z, DropoutMasks& m) {
    { p.inner_loss(t, w, z, m) } -> std::convertible_to<Var>;
    { p.outer_loss(t, w, z) } -> std::convertible_to<Var>;
};

/// Node classification with a GNN backbone: inner = train CE + weight decay,
/// outer = validation CE.
struct GnnProblem {
    const DatasetBundle* bundle = nullptr;
    ModelSpec spec;
    LossConfig loss;

    Var inner_loss(Tape& t, std::span<const Var> w, const Var& z, DropoutMasks& m) const {
        const ModelVars v{std::vector<Var>(w.begin(), w.end()), z};
        return gsebo::inner_loss(t, spec, v, *bundle, m, true, loss);
    }
    Var outer_loss(Tape& t, std::span<const Var> w, const Var& z) const {
        const ModelVars v{std::vector<Var>(w.begin(), w.end()), z};
        return gsebo::outer_loss(t, spec, v, *bundle);
    }
};

/// W_0 ... W_tau plus the dropout masks drawn at each step.
struct Trajectory {
    std::vector<WeightList> checkpoints;
    std::vector<std::vector<std::shared_ptr<const DenseMatrix>>> masks;
    std::vector<double> inner_losses;
    DenseMatrix z;
    double eta_inner = 0.0;

    std::size_t steps() const noexcept { return masks.size(); }
};

struct Hypergradient {
    std::vector<double> p;

    double norm() const {
        double s = 0.0;
        for (double v : p) s += v * v;
        return std::sqrt(s);
    }
};

namespace detail {

inline std::vector<Var> leaves(Tape& t, const WeightList& w) {
    std::vector<Var> out;
    out.reserve(w.size());
    for (const auto& m : w) out.push_back(t.leaf(m));
    return out;
}

/// W - eta * g, in place.
inline void descend(WeightList& w, const std::vector<DenseMatrix>& g, double eta) {
    for (std::size_t k = 0; k < w.size(); ++k)
        for (std::size_t i = 0; i < w[k].size(); ++i) w[k][i] -= eta * g[k][i];
}

inline bool finite(const WeightList& w) {
    for (const auto& m : w)
        if (!m.all_finite()) return false;
    return true;
}

}  // namespace detail

/// tau plain gradient-descent steps W_t = W_{t-1} - eta_inner * dL/dW (W_{t-1}, Z)
/// with Z held constant. `weights` ends at W_tau. A null `dropout_rng`
/// disables dropout.
template <BilevelProblem P>
Trajectory inner_unroll(const P& problem, WeightList& weights, const DenseMatrix& z, int tau, double eta_inner,
                        RngStream* dropout_rng) {
    require(tau >= 1, "inner_unroll: tau must be >= 1");
    Trajectory traj;
    traj.z = z;
    traj.eta_inner = eta_inner;
    traj.checkpoints.push_back(weights);
    for (int t = 1; t <= tau; ++t) {
        Tape tape;
        const auto w = detail::leaves(tape, weights);
        const Var zc = tape.constant(z);
        DropoutMasks masks = dropout_rng ? DropoutMasks::recording(*dropout_rng) : DropoutMasks::off();
        const Var loss = problem.inner_loss(tape, w, zc, masks);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv))
            throw DivergenceError("inner_unroll: non-finite inner loss at step " + std::to_string(t));
        const auto g = tape.gradients(loss, w).values();
        detail::descend(weights, g, eta_inner);
        if (!detail::finite(weights))
            throw DivergenceError("inner_unroll: non-finite weights after step " + std::to_string(t));
        traj.inner_losses.push_back(lv);
        traj.masks.push_back(masks.masks());
        traj.checkpoints.push_back(weights);
    }
    return traj;
}

/// Re-executes inner step t (1-based) from W_{t-1}, Z and the recorded masks.
template <BilevelProblem P>
WeightList replay_step(const P& problem, const Trajectory& traj, std::size_t t) {
    require(t >= 1 && t <= traj.steps(), "replay_step: step out of range");
    Tape tape;
    const auto w = detail::leaves(tape, traj.checkpoints[t - 1]);
    const Var zc = tape.constant(traj.z);
    DropoutMasks masks = DropoutMasks::replaying(traj.masks[t - 1]);
    const Var loss = problem.inner_loss(tape, w, zc, masks);
    WeightList next = traj.checkpoints[t - 1];
    detail::descend(next, tape.gradients(loss, w).values(), traj.eta_inner);
    return next;
}

/// Reverse-mode hypergradient dF/dZ through the unrolled inner steps.
///   alpha_tau = dF/dW at W_tau
///   for t = tau .. 1:  P += alpha_t N_t,  alpha_{t-1} = alpha_t M_t
/// with alpha M_t = alpha - eta (alpha . d2L/dW dW) and alpha N_t = -eta (alpha . d2L/dZ dW)
/// evaluated by replaying step t; plus dF/dZ at (W_tau, Z) when requested.
template <BilevelProblem P>
Hypergradient hypergradient_reverse(const P& problem, const Trajectory& traj, bool include_direct_term) {
    const std::size_t tau = traj.steps();
    require(tau >= 1 && traj.checkpoints.size() == tau + 1, "hypergradient_reverse: incomplete trajectory");
    const double eta = traj.eta_inner;

    std::vector<DenseMatrix> alpha;
    Hypergradient hg;
    {
        Tape tape;
        const auto w = detail::leaves(tape, traj.checkpoints[tau]);
        const Var z = tape.leaf(traj.z);
        const Var f = problem.outer_loss(tape, w, z);
        std::vector<Var> wrt(w);
        wrt.push_back(z);
        auto g = tape.gradients(f, wrt).values();
        hg.p = include_direct_term ? g.back().values() : std::vector<double>(traj.z.size(), 0.0);
        g.pop_back();
        alpha = std::move(g);
    }

    std::vector<double> acc(traj.z.size(), 0.0);
    for (std::size_t t = tau; t >= 1; --t) {
        Tape tape;
        const auto w = detail::leaves(tape, traj.checkpoints[t - 1]);
        const Var z = tape.leaf(traj.z);
        DropoutMasks masks = DropoutMasks::replaying(traj.masks[t - 1]);
        const Var loss = problem.inner_loss(tape, w, z, masks);
        require(masks.consumed() == traj.masks[t - 1].size(), "hypergradient_reverse: replay consumed a different number of dropout masks");
        const Gradients g = tape.gradients(loss, w, true);
        std::vector<Var> wrt(w);
        wrt.push_back(z);
        const auto h = vjp_through_gradient(tape, g, alpha, wrt);
        const auto& hz = h.back().values();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] -= eta * hz[i];
        for (std::size_t k = 0; k < alpha.size(); ++k)
            for (std::size_t i = 0; i < alpha[k].size(); ++i) alpha[k][i] -= eta * h[k][i];
    }
    for (std::size_t i = 0; i < acc.size(); ++i) hg.p[i] += acc[i];
    for (double v : hg.p)
        if (!std::isfinite(v)) throw DivergenceError("hypergradient_reverse: non-finite hypergradient");
    return hg;
}

/// Central finite differences of F(unroll(W0, Z), Z) over every Z entry, with
/// dropout off. Without the direct term the outer objective is evaluated at
/// the unperturbed Z.
template <BilevelProblem P>
Hypergradient fd_hypergradient_oracle(const P& problem, const WeightList& w0, const DenseMatrix& z, int tau,
                                      double eta_inner, bool include_direct_term, double epsilon) {
    require(z.size() <= 512, "fd_hypergradient_oracle: too many strength entries (limit 512)");
    require(epsilon > 0.0, "fd_hypergradient_oracle: epsilon must be positive");
    auto objective = [&](const DenseMatrix& zp) {
        WeightList w = w0;
        inner_unroll(problem, w, zp, tau, eta_inner, nullptr);
        Tape tape;
        std::vector<Var> wv;
        for (const auto& m : w) wv.push_back(tape.constant(m));
        const Var zv = tape.constant(include_direct_term ? zp : z);
        return problem.outer_loss(tape, wv, zv).value()[0];
    };
    Hypergradient hg;
    hg.p.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        DenseMatrix plus = z, minus = z;
        plus[i] += epsilon;
        minus[i] -= epsilon;
        hg.p[i] = (objective(plus) - objective(minus)) / (2.0 * epsilon);
    }
    return hg;
}

/// Z <- Z - eta_outer * P on the raw (pre-clamp) strengths.
inline StrengthParam outer_step(const StrengthParam& z, const Hypergradient& p, double eta_outer) {
    require(z.values.size() == p.p.size(), "outer_step: hypergradient not aligned to strengths");
    StrengthParam out = z;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        if (!std::isfinite(p.p[i])) throw DivergenceError("outer_step: non-finite hypergradient");
        out.values[i] -= eta_outer * p.p[i];
    }
    return out;
}

struct OuterRecord {
    int iter = 0;
    std::vector<double> inner_losses;
    double val_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
    double test_acc = 0.0;
    double p_norm = 0.0;
    double wall_ms = 0.0;
};

struct TrainHistory {
    std::vector<OuterRecord> records;
    std::size_t best = 0;  ///< index of the returned snapshot

    const OuterRecord& best_record() const { return records.at(best); }
};

struct TrainResult {
    ModelState state;  ///< best-validation snapshot
    TrainHistory history;
};

inline constexpr const char* kHistoryHeader = "iter\tinner_loss_first\tinner_loss_last\tval_loss\ttrain_acc\tval_acc\ttest_acc\tp_norm";

/// One line per outer iteration. Wall time is kept out so files are reproducible.
inline std::string history_tsv(const TrainHistory& h) {
    std::string out = std::string(kHistoryHeader) + "\n";
    for (const auto& r : h.records) {
        out += std::to_string(r.iter) + "\t" + format_real(r.inner_losses.front()) + "\t" +
               format_real(r.inner_losses.back()) + "\t" + format_real(r.val_loss) + "\t" + format_real(r.train_acc) +
               "\t" + format_real(r.val_acc) + "\t" + format_real(r.test_acc) + "\t" + format_real(r.p_norm) + "\n";
    }
    return out;
}

namespace detail {

inline TrainResult train_loop(const DatasetBundle& bundle, const BackboneConfig& bcfg, const TrainConfig& cfg, Mode mode,
                              bool learn_structure) {
    cfg.validate();
    RngStream root(cfg.seed);
    RngStream init_rng = root.fork(1);
    RngStream drop_rng = root.fork(2);
    ModelState state = init_model(bundle, bcfg, init_rng, mode);
    const WeightList initial = state.weights.mats;

    GnnProblem problem{&bundle, state.spec, LossConfig{cfg.lambda, cfg.reg_z}};
    TrainResult result;
    result.state = state;
    double best_acc = -1.0, best_loss = 0.0;
    std::size_t best_iter = 0;

    for (int it = 1; it <= cfg.max_outer; ++it) {
        const auto start = std::chrono::steady_clock::now();
        if (!cfg.warm_start) state.weights.mats = initial;
        const DenseMatrix z = DenseMatrix::column(state.z.values);
        const Trajectory traj = inner_unroll(problem, state.weights.mats, z, cfg.tau, cfg.eta_inner,
                                             bcfg.dropout > 0.0 ? &drop_rng : nullptr);

        OuterRecord rec;
        rec.iter = it;
        rec.inner_losses = traj.inner_losses;
        const DenseMatrix logits = predict(state);
        rec.val_loss = cross_entropy(logits, bundle.labels, bundle.split.val);
        rec.train_acc = accuracy(logits, bundle.labels, bundle.split.train);
        rec.val_acc = accuracy(logits, bundle.labels, bundle.split.val);
        rec.test_acc = accuracy(logits, bundle.labels, bundle.split.test);
        if (!std::isfinite(rec.val_loss)) throw DivergenceError("training: non-finite validation loss");

        const bool improved = rec.val_acc > best_acc || (rec.val_acc == best_acc && rec.val_loss < best_loss);
        if (improved) {
            best_acc = rec.val_acc;
            best_loss = rec.val_loss;
            best_iter = static_cast<std::size_t>(it);
            result.state = state;
            result.history.best = result.history.records.size();
        }

        StrengthParam next_z = state.z;
        if (learn_structure) {
            const Hypergradient p = hypergradient_reverse(problem, traj, cfg.include_direct_term);
            rec.p_norm = p.norm();
            next_z = outer_step(state.z, p, cfg.eta_outer);
        }
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        result.history.records.push_back(std::move(rec));
        state.z = std::move(next_z);

        if (static_cast<std::size_t>(it) - best_iter >= static_cast<std::size_t>(cfg.patience)) break;
    }
    return result;
}

}  // namespace detail

/// Alternates inner unrolling, hypergradient and outer step until validation
/// accuracy stalls for `patience` outer iterations; returns the best snapshot.
inline TrainResult train_gsebo(const DatasetBundle& bundle, const BackboneConfig& bcfg, const TrainConfig& cfg) {
    return detail::train_loop(bundle, bcfg, cfg, Mode::gsebo, true);
}

/// Same schedule with the structure frozen at the backbone's own normalization.
inline TrainResult train_vanilla(const DatasetBundle& bundle, const BackboneConfig& bcfg, const TrainConfig& cfg) {
    return detail::train_loop(bundle, bcfg, cfg, Mode::vanilla, false);
}

/// Mean and sample stddev of the test accuracy at each run's returned snapshot.
inline MeanStd aggregate_runs(std::span<const TrainHistory> runs) {
    require(!runs.empty(), "aggregate_runs: no runs");
    std::vector<double> acc;
    for (const auto& h : runs) acc.push_back(h.best_record().test_acc);
    return mean_std(acc);
}

}  // namespace gsebo

#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gsebo/error.hpp"
#include "gsebo/graph.hpp"
#include "gsebo/matrix.hpp"
#include "gsebo/rng.hpp"
#include "gsebo/tape.hpp"

namespace gsebo {

enum class Backbone { gcn, sage, jknet, gat };

inline std::string to_string(Backbone b) {
    switch (b) {
        case Backbone::gcn: return "gcn";
        case Backbone::sage: return "sage";
        case Backbone::jknet: return "jknet";
        case Backbone::gat: return "gat";
    }
    return "?";
}

inline Backbone parse_backbone(const std::string& s) {
    if (s == "gcn") return Backbone::gcn;
    if (s == "sage") return Backbone::sage;
    if (s == "jknet") return Backbone::jknet;
    if (s == "gat") return Backbone::gat;
    throw InputError("unknown backbone '" + s + "' (expected gcn, sage, jknet or gat)");
}

/// gsebo: edge coefficients are clamp01(Z) with Z learnable.
/// vanilla: the backbone's own fixed normalization (or attention, for GAT).
enum class Mode { gsebo, vanilla };

struct BackboneConfig {
    Backbone backbone = Backbone::gcn;
    int layers = 2;
    int hidden = 16;
    int heads = 1;
    double dropout = 0.5;

    void validate() const {
        require(layers >= 1, "backbone config: layers must be >= 1");
        require(hidden >= 1, "backbone config: hidden must be >= 1");
        require(heads >= 1, "backbone config: heads must be >= 1");
        require(dropout >= 0.0 && dropout < 1.0, "backbone config: dropout must lie in [0, 1)");
    }
};

/// The fixed support a model propagates over, with its normalization-derived
/// initial strengths: A~ = A + I with 1/sqrt(d_i d_j) for gcn/jknet, A~ with
/// 1/d_i for gat, A with 1/d_i for sage.
struct Propagation {
    PatternPtr pattern;
    std::vector<double> init;
    bool self_loops = true;
};

inline Propagation make_propagation(const Graph& adjacency, Backbone b) {
    Propagation p;
    switch (b) {
        case Backbone::gcn:
        case Backbone::jknet: {
            const Graph tilde = add_self_loops(adjacency);
            p.pattern = tilde.pattern();
            p.init = sym_norm_values(tilde);
            break;
        }
        case Backbone::gat: {
            // Uniform neighbour weights: what attention produces when all
            // attention logits are equal.
            const Graph tilde = add_self_loops(adjacency);
            p.pattern = tilde.pattern();
            p.init.resize(p.pattern->nnz());
            for (std::size_t i = 0; i < p.pattern->n; ++i)
                for (std::size_t e = p.pattern->row_begin(i); e < p.pattern->row_end(i); ++e)
                    p.init[e] = 1.0 / static_cast<double>(p.pattern->degree(i));
            break;
        }
        case Backbone::sage:
            p.pattern = adjacency.pattern();
            p.init = row_norm_values(adjacency).values;
            p.self_loops = false;
            break;
    }
    return p;
}

/// Everything about a model that stays fixed while training.
struct ModelSpec {
    BackboneConfig config;
    Mode mode = Mode::gsebo;
    std::shared_ptr<const Propagation> prop;
    std::shared_ptr<const DenseMatrix> features;
    std::size_t num_classes = 0;

    std::size_t num_heads() const { return config.backbone == Backbone::gat ? static_cast<std::size_t>(config.heads) : 1; }
    std::size_t z_size() const { return num_heads() * prop->pattern->nnz(); }
};

struct LayerWeights {
    std::vector<DenseMatrix> mats;
};

/// Learnable strengths, one per stored entry of the propagation pattern
/// (per head, heads concatenated, for GAT).
struct StrengthParam {
    std::vector<double> values;
};

struct ModelState {
    ModelSpec spec;
    LayerWeights weights;
    StrengthParam z;
    RngStream rng;
};

/// Shapes of the weight matrices, in storage order.
///  gcn:   W_l            d_l x d_{l+1}
///  sage:  W_l            2 d_l x d_{l+1}
///  jknet: W_l (K-1 of them), then FC  (C + (K-1) h) x M
///  gat:   per layer, per head: W  [+ a_src, a_dst  d_{l+1} x 1 in vanilla mode]
inline std::vector<std::pair<std::size_t, std::size_t>> weight_shapes(const ModelSpec& s) {
    const auto& c = s.config;
    const std::size_t in = s.features->cols(), h = static_cast<std::size_t>(c.hidden), m = s.num_classes;
    const auto K = static_cast<std::size_t>(c.layers);
    auto dim = [&](std::size_t l) { return l == 0 ? in : (l == K ? m : h); };
    std::vector<std::pair<std::size_t, std::size_t>> out;
    switch (c.backbone) {
        case Backbone::gcn:
            for (std::size_t l = 0; l < K; ++l) out.emplace_back(dim(l), dim(l + 1));
            break;
        case Backbone::sage:
            for (std::size_t l = 0; l < K; ++l) out.emplace_back(2 * dim(l), dim(l + 1));
            break;
        case Backbone::jknet:
            for (std::size_t l = 0; l + 1 < K; ++l) out.emplace_back(l == 0 ? in : h, h);
            out.emplace_back(in + (K - 1) * h, m);
            break;
        case Backbone::gat:
            for (std::size_t l = 0; l < K; ++l)
                for (int k = 0; k < c.heads; ++k) {
                    out.emplace_back(dim(l), dim(l + 1));
                    if (s.mode == Mode::vanilla) {
                        out.emplace_back(dim(l + 1), 1);
                        out.emplace_back(dim(l + 1), 1);
                    }
                }
            break;
    }
    return out;
}

inline DenseMatrix glorot_uniform(std::size_t rows, std::size_t cols, RngStream& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    DenseMatrix w(rows, cols);
    for (auto& v : w.values()) v = rng.uniform(-a, a);
    return w;
}

inline ModelSpec make_spec(const DatasetBundle& bundle, const BackboneConfig& cfg, Mode mode = Mode::gsebo) {
    cfg.validate();
    bundle.validate();
    ModelSpec s;
    s.config = cfg;
    s.mode = mode;
    s.prop = std::make_shared<const Propagation>(make_propagation(bundle.graph, cfg.backbone));
    s.features = std::make_shared<const DenseMatrix>(bundle.features);
    s.num_classes = static_cast<std::size_t>(bundle.num_classes);
    return s;
}

/// Glorot-uniform weights; Z at the normalization-derived initialization.
inline ModelState init_model(const DatasetBundle& bundle, const BackboneConfig& cfg, RngStream& rng, Mode mode = Mode::gsebo) {
    ModelState st;
    st.spec = make_spec(bundle, cfg, mode);
    for (const auto& [r, c] : weight_shapes(st.spec)) st.weights.mats.push_back(glorot_uniform(r, c, rng));
    const auto& init = st.spec.prop->init;
    for (std::size_t k = 0; k < st.spec.num_heads(); ++k) st.z.values.insert(st.z.values.end(), init.begin(), init.end());
    st.rng = rng.fork(0x5eed);
    return st;
}

/// GSE(Z) = clamp01(Z) on the propagation pattern.
inline SparseWeighted gse_extract(std::span<const double> z, const PatternPtr& pattern) {
    require(z.size() == pattern->nnz(), "gse_extract: strengths not aligned to pattern");
    return SparseWeighted{pattern, clamp01(z)};
}

inline Var gse_extract(const Var& z, const PatternPtr& pattern) {
    require(z.rows() == pattern->nnz() && z.cols() == 1, "gse_extract: strengths not aligned to pattern");
    return clamp01(z);
}

/// Tape handles for the trainable quantities of one forward pass.
struct ModelVars {
    std::vector<Var> weights;
    Var z;
};

inline ModelVars bind_constants(Tape& t, const LayerWeights& w, const StrengthParam& z) {
    ModelVars v;
    for (const auto& m : w.mats) v.weights.push_back(t.constant(m));
    v.z = t.constant(DenseMatrix::column(z.values));
    return v;
}

inline ModelVars bind_leaves(Tape& t, const LayerWeights& w, const StrengthParam& z) {
    ModelVars v;
    for (const auto& m : w.mats) v.weights.push_back(t.leaf(m));
    v.z = t.leaf(DenseMatrix::column(z.values));
    return v;
}

namespace detail {

inline void check_vars(const ModelSpec& s, const ModelVars& v) {
    const auto shapes = weight_shapes(s);
    require(v.weights.size() == shapes.size(), "forward: wrong number of weight matrices for backbone");
    for (std::size_t i = 0; i < shapes.size(); ++i)
        require(v.weights[i].rows() == shapes[i].first && v.weights[i].cols() == shapes[i].second,
                "forward: weight " + std::to_string(i) + " has shape " + shape_str(v.weights[i].value()));
    require(v.z.rows() == s.z_size() && v.z.cols() == 1, "forward: strength vector not aligned to propagation pattern");
}

/// Edge coefficients for head k: clamp01(Z_k) in gsebo mode, the fixed
/// normalization in vanilla mode.
inline Var coefficients(Tape& t, const ModelSpec& s, const ModelVars& v, std::size_t head) {
    const auto nnz = s.prop->pattern->nnz();
    if (s.mode == Mode::vanilla) return t.constant(DenseMatrix::column(s.prop->init));
    const Var zk = s.num_heads() == 1 ? v.z : slice_rows(v.z, head * nnz, nnz);
    return gse_extract(zk, s.prop->pattern);
}

inline Var hidden_activation(const Var& h, const ModelSpec& s, DropoutMasks& masks, bool training) {
    return dropout(relu(h), s.config.dropout, masks, training);
}

}  // namespace detail

/// K layers of  H <- GSE(Z) (H W), ReLU + dropout between layers.
inline Var forward_gcn(Tape& t, const ModelSpec& s, const ModelVars& v, DropoutMasks& masks, bool training) {
    require(s.config.backbone == Backbone::gcn, "forward_gcn: backbone mismatch");
    detail::check_vars(s, v);
    const Var coef = detail::coefficients(t, s, v, 0);
    Var h = t.constant(s.features);
    const auto K = static_cast<std::size_t>(s.config.layers);
    for (std::size_t l = 0; l < K; ++l) {
        h = spmm(s.prop->pattern, coef, matmul(h, v.weights[l]));
        if (l + 1 < K) h = detail::hidden_activation(h, s, masks, training);
    }
    return h;
}

/// K layers of  H <- [H | GSE(Z) H] W  over A without self loops.
inline Var forward_sage(Tape& t, const ModelSpec& s, const ModelVars& v, DropoutMasks& masks, bool training) {
    require(s.config.backbone == Backbone::sage, "forward_sage: backbone mismatch");
    detail::check_vars(s, v);
    const Var coef = detail::coefficients(t, s, v, 0);
    Var h = t.constant(s.features);
    const auto K = static_cast<std::size_t>(s.config.layers);
    for (std::size_t l = 0; l < K; ++l) {
        h = matmul(concat_cols(h, spmm(s.prop->pattern, coef, h)), v.weights[l]);
        if (l + 1 < K) h = detail::hidden_activation(h, s, masks, training);
    }
    return h;
}

/// K-1 GCN-style layers sharing one Z, then FC([H0 | H1 | ... | H_{K-1}]).
inline Var forward_jknet(Tape& t, const ModelSpec& s, const ModelVars& v, DropoutMasks& masks, bool training) {
    require(s.config.backbone == Backbone::jknet, "forward_jknet: backbone mismatch");
    detail::check_vars(s, v);
    const auto K = static_cast<std::size_t>(s.config.layers);
    std::vector<Var> reps{t.constant(s.features)};
    if (K > 1) {
        const Var coef = detail::coefficients(t, s, v, 0);
        for (std::size_t l = 0; l + 1 < K; ++l) {
            const Var h = spmm(s.prop->pattern, coef, matmul(reps.back(), v.weights[l]));
            reps.push_back(detail::hidden_activation(h, s, masks, training));
        }
    }
    return matmul(concat_cols(reps), v.weights.back());
}

/// Per layer, mean over heads of  C_k (H W_k), where C_k = GSE(Z_k) in gsebo
/// mode and the neighbour softmax of LeakyReLU(a_src.Wh_i + a_dst.Wh_j) in
/// vanilla mode.
inline Var forward_gat(Tape& t, const ModelSpec& s, const ModelVars& v, DropoutMasks& masks, bool training) {
    require(s.config.backbone == Backbone::gat, "forward_gat: backbone mismatch");
    detail::check_vars(s, v);
    const auto& p = s.prop->pattern;
    const auto K = static_cast<std::size_t>(s.config.layers);
    const auto heads = s.num_heads();
    const std::size_t per_head = s.mode == Mode::vanilla ? 3 : 1;

    std::vector<Var> coef;
    if (s.mode == Mode::gsebo)
        for (std::size_t k = 0; k < heads; ++k) coef.push_back(detail::coefficients(t, s, v, k));

    Var h = t.constant(s.features);
    for (std::size_t l = 0; l < K; ++l) {
        Var acc;
        for (std::size_t k = 0; k < heads; ++k) {
            const std::size_t base = (l * heads + k) * per_head;
            const Var hw = matmul(h, v.weights[base]);
            Var c;
            if (s.mode == Mode::gsebo) {
                c = coef[k];
            } else {
                const Var src = matmul(hw, v.weights[base + 1]);
                const Var dst = matmul(hw, v.weights[base + 2]);
                const Var logits = add(edge_row_broadcast(p, src), edge_col_broadcast(p, dst));
                c = edge_softmax(p, leaky_relu(logits, 0.2));
            }
            const Var out = spmm(p, c, hw);
            acc = acc.valid() ? add(acc, out) : out;
        }
        h = heads == 1 ? acc : scale(acc, 1.0 / static_cast<double>(heads));
        if (l + 1 < K) h = detail::hidden_activation(h, s, masks, training);
    }
    return h;
}

/// N x M logits for the configured backbone.
inline Var forward(Tape& t, const ModelSpec& s, const ModelVars& v, DropoutMasks& masks, bool training) {
    switch (s.config.backbone) {
        case Backbone::gcn: return forward_gcn(t, s, v, masks, training);
        case Backbone::sage: return forward_sage(t, s, v, masks, training);
        case Backbone::jknet: return forward_jknet(t, s, v, masks, training);
        case Backbone::gat: return forward_gat(t, s, v, masks, training);
    }
    throw ContractError("forward: unknown backbone");
}

/// Eval-mode logits (dropout off).
inline DenseMatrix predict(const ModelSpec& s, const LayerWeights& w, const StrengthParam& z) {
    Tape t;
    const ModelVars v = bind_constants(t, w, z);
    DropoutMasks off = DropoutMasks::off();
    return forward(t, s, v, off, false).value();
}

inline DenseMatrix predict(const ModelState& st) { return predict(st.spec, st.weights, st.z); }

struct LossConfig {
    double lambda = 5e-4;
    bool reg_z = false;
};

/// Cross-entropy over training nodes plus lambda * sum ||W||^2 (and
/// lambda * ||Z||^2 when reg_z is set).
inline Var inner_loss(Tape& t, const ModelSpec& s, const ModelVars& v, const DatasetBundle& b, DropoutMasks& masks,
                      bool training, const LossConfig& lc) {
    require(!b.split.train.empty(), "inner_loss: empty training split");
    Var loss = masked_softmax_cross_entropy(forward(t, s, v, masks, training), b.labels, b.split.train);
    if (lc.lambda != 0.0) {
        Var reg;
        for (const auto& w : v.weights) {
            const Var sq = squared_norm(w);
            reg = reg.valid() ? add(reg, sq) : sq;
        }
        if (lc.reg_z) reg = reg.valid() ? add(reg, squared_norm(v.z)) : squared_norm(v.z);
        if (reg.valid()) loss = add(loss, scale(reg, lc.lambda));
    }
    return loss;
}

/// Cross-entropy over validation nodes, dropout off, no regularizer.
inline Var outer_loss(Tape& t, const ModelSpec& s, const ModelVars& v, const DatasetBundle& b) {
    require(!b.split.val.empty(), "outer_loss: empty validation split");
    DropoutMasks off = DropoutMasks::off();
    return masked_softmax_cross_entropy(forward(t, s, v, off, false), b.labels, b.split.val);
}

}  // namespace gsebo

#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gsebo/error.hpp"
#include "gsebo/matrix.hpp"
#include "gsebo/rng.hpp"

namespace gsebo {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const noexcept { return tape_ != nullptr && id_ != npos; }
    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }

    const DenseMatrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = npos;
};

/// Produces the gradient contribution for each input of a node, given the
/// gradient flowing into the node's output. Backward rules are written with
/// the recorded operations themselves, so a backward pass can itself be
/// recorded and differentiated again (reverse-over-reverse).
using BackwardFn = std::function<std::vector<Var>(Tape&, std::size_t self, const Var& grad)>;

struct TapeNode {
    const char* op = "";
    std::shared_ptr<const DenseMatrix> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool leaf = false;
};

/// Result of Tape::gradients: one entry per requested leaf, in request order.
struct Gradients {
    std::vector<Var> grads;
    bool second_order = false;

    std::vector<DenseMatrix> values() const {
        std::vector<DenseMatrix> out;
        out.reserve(grads.size());
        for (const auto& g : grads) out.push_back(g.value());
        return out;
    }
};

/// Reverse-mode record of matrix primitives in topological (insertion) order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const noexcept { return nodes_.size(); }
    const TapeNode& node(std::size_t id) const { return nodes_.at(id); }

    Var constant(DenseMatrix value) { return constant(std::make_shared<const DenseMatrix>(std::move(value))); }
    Var constant(std::shared_ptr<const DenseMatrix> value) {
        TapeNode n;
        n.op = "constant";
        n.value = std::move(value);
        return push(std::move(n));
    }

    /// A differentiable input.
    Var leaf(DenseMatrix value) {
        TapeNode n;
        n.op = "leaf";
        n.value = std::make_shared<const DenseMatrix>(std::move(value));
        n.requires_grad = true;
        n.leaf = true;
        return push(std::move(n));
    }

    /// Appends an operation node. The node is differentiable when gradient
    /// recording is on and at least one input is differentiable.
    Var record(const char* op, DenseMatrix value, std::vector<Var> inputs, BackwardFn backward) {
        TapeNode n;
        n.op = op;
        n.value = std::make_shared<const DenseMatrix>(std::move(value));
        n.inputs.reserve(inputs.size());
        bool any = false;
        for (const auto& v : inputs) {
            check_owned(v);
            n.inputs.push_back(v.id());
            any = any || nodes_[v.id()].requires_grad;
        }
        if (recording_ && any) {
            n.requires_grad = true;
            n.backward = std::move(backward);
        }
        return push(std::move(n));
    }

    bool recording() const noexcept { return recording_; }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to `leaves`.
    /// With `create_graph`, the backward pass is recorded on this tape so the
    /// returned gradients can be differentiated again (see vjp_through_gradient).
    /// Leaves the loss does not depend on receive zero gradients.
    Gradients gradients(const Var& loss, std::span<const Var> leaves, bool create_graph = false) {
        check_owned(loss);
        require(loss.value().rows() == 1 && loss.value().cols() == 1, "gradients: loss must be a 1x1 scalar node");
        for (const auto& l : leaves) {
            check_owned(l);
            require(nodes_[l.id()].leaf, "gradients: requested variable is not a leaf of this tape");
        }

        const bool saved = recording_;
        recording_ = create_graph;
        std::vector<Var> acc(loss.id() + 1);
        acc[loss.id()] = constant(DenseMatrix(1, 1, 1.0));
        for (std::size_t id = loss.id() + 1; id-- > 0;) {
            if (!acc[id].valid()) continue;
            const TapeNode& n = nodes_[id];  // deque: stable across push_back
            if (!n.requires_grad || !n.backward) continue;
            std::vector<Var> in_grads = n.backward(*this, id, acc[id]);
            for (std::size_t k = 0; k < in_grads.size(); ++k) {
                if (!in_grads[k].valid()) continue;
                const std::size_t in = n.inputs[k];
                if (!nodes_[in].requires_grad) continue;
                acc[in] = acc[in].valid() ? add_nodes(acc[in], in_grads[k]) : in_grads[k];
            }
        }
        recording_ = saved;

        Gradients out;
        out.second_order = create_graph;
        for (const auto& l : leaves) {
            const Var& g = acc[l.id()];
            out.grads.push_back(g.valid() ? g : constant(DenseMatrix(l.rows(), l.cols())));
        }
        return out;
    }

    void check_owned(const Var& v) const {
        require(v.valid() && v.tape() == this && v.id() < nodes_.size(), "tape: variable does not belong to this tape");
    }

private:
    friend class Var;

    Var push(TapeNode n) {
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    Var add_nodes(const Var& a, const Var& b);

    std::deque<TapeNode> nodes_;
    bool recording_ = true;
};

inline const DenseMatrix& Var::value() const {
    require(valid(), "Var: invalid handle");
    return *tape_->node(id_).value;
}

inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

// ---------------------------------------------------------------------------
// Primitives. Each records its forward value and a backward rule composed of
// primitives, which is what makes gradients-of-gradients available.
// ---------------------------------------------------------------------------

namespace detail {

inline bool needs(const Tape& t, std::size_t self, std::size_t k) {
    return t.node(t.node(self).inputs[k]).requires_grad;
}

inline Var in(Tape& t, std::size_t self, std::size_t k) { return Var(&t, t.node(self).inputs[k]); }

inline void same_tape(const Var& a, const Var& b) {
    require(a.valid() && b.valid() && a.tape() == b.tape(), "tape: operands recorded on different tapes");
}

}  // namespace detail

inline Var add(const Var& a, const Var& b);
inline Var sub(const Var& a, const Var& b);
inline Var mul(const Var& a, const Var& b);
inline Var scale(const Var& a, double c);
inline Var mul_const(const Var& a, std::shared_ptr<const DenseMatrix> mask);
inline Var matmul(const Var& a, const Var& b);
inline Var matmul_tn(const Var& a, const Var& b);
inline Var matmul_nt(const Var& a, const Var& b);
inline Var sum_all(const Var& a);
inline Var broadcast(const Var& scalar, std::size_t rows, std::size_t cols);
inline Var row_sum(const Var& a);
inline Var broadcast_cols(const Var& col, std::size_t cols);
inline Var slice_cols(const Var& a, std::size_t start, std::size_t width);
inline Var embed_cols(const Var& a, std::size_t start, std::size_t total);
inline Var slice_rows(const Var& a, std::size_t start, std::size_t count);
inline Var embed_rows(const Var& a, std::size_t start, std::size_t total);
inline Var spmm(const PatternPtr& p, const Var& values, const Var& d);
inline Var spmm_t(const PatternPtr& p, const Var& values, const Var& d);
inline Var sddmm(const PatternPtr& p, const Var& a, const Var& b);
inline Var edge_row_broadcast(const PatternPtr& p, const Var& v);
inline Var edge_col_broadcast(const PatternPtr& p, const Var& v);
inline Var edge_row_sum(const PatternPtr& p, const Var& e);
inline Var edge_col_sum(const PatternPtr& p, const Var& e);

inline Var Tape::add_nodes(const Var& a, const Var& b) { return add(a, b); }

inline Var add(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    require(a.value().same_shape(b.value()), "add: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return a.tape()->record("add", std::move(out), {a, b}, [](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{g, g};
    });
}

inline Var scale(const Var& a, double c) {
    DenseMatrix out = a.value();
    for (auto& v : out.values()) v *= c;
    return a.tape()->record("scale", std::move(out), {a}, [c](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{scale(g, c)};
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    require(a.value().same_shape(b.value()), "sub: shape mismatch");
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return a.tape()->record("sub", std::move(out), {a, b}, [](Tape& t, std::size_t self, const Var& g) {
        return std::vector<Var>{g, detail::needs(t, self, 1) ? scale(g, -1.0) : Var{}};
    });
}

/// Elementwise (Hadamard) product of two recorded values.
inline Var mul(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    require(a.value().same_shape(b.value()), "mul: shape mismatch");
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.tape()->record("mul", std::move(out), {a, b}, [](Tape& t, std::size_t self, const Var& g) {
        const Var x = detail::in(t, self, 0), y = detail::in(t, self, 1);
        return std::vector<Var>{detail::needs(t, self, 0) ? mul(g, y) : Var{}, detail::needs(t, self, 1) ? mul(g, x) : Var{}};
    });
}

/// Elementwise product with a fixed (non-differentiable) matrix: masks,
/// subgradient indicators, one-hot selectors.
inline Var mul_const(const Var& a, std::shared_ptr<const DenseMatrix> mask) {
    require(a.value().same_shape(*mask), "mul_const: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(*mask));
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
    return a.tape()->record("mul_const", std::move(out), {a}, [mask](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{mul_const(g, mask)};
    });
}

inline Var matmul(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    return a.tape()->record("matmul", kernels::matmul(a.value(), b.value()), {a, b},
                            [](Tape& t, std::size_t self, const Var& g) {
                                const Var x = detail::in(t, self, 0), y = detail::in(t, self, 1);
                                return std::vector<Var>{detail::needs(t, self, 0) ? matmul_nt(g, y) : Var{},
                                                        detail::needs(t, self, 1) ? matmul_tn(x, g) : Var{}};
                            });
}

inline Var matmul_tn(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    return a.tape()->record("matmul_tn", kernels::matmul_tn(a.value(), b.value()), {a, b},
                            [](Tape& t, std::size_t self, const Var& g) {
                                const Var x = detail::in(t, self, 0), y = detail::in(t, self, 1);
                                return std::vector<Var>{detail::needs(t, self, 0) ? matmul_nt(y, g) : Var{},
                                                        detail::needs(t, self, 1) ? matmul(x, g) : Var{}};
                            });
}

inline Var matmul_nt(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    return a.tape()->record("matmul_nt", kernels::matmul_nt(a.value(), b.value()), {a, b},
                            [](Tape& t, std::size_t self, const Var& g) {
                                const Var x = detail::in(t, self, 0), y = detail::in(t, self, 1);
                                return std::vector<Var>{detail::needs(t, self, 0) ? matmul(g, y) : Var{},
                                                        detail::needs(t, self, 1) ? matmul_tn(g, x) : Var{}};
                            });
}

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const std::size_t r = a.rows(), c = a.cols();
    return a.tape()->record("sum_all", DenseMatrix(1, 1, s), {a}, [r, c](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{broadcast(g, r, c)};
    });
}

inline Var broadcast(const Var& scalar, std::size_t rows, std::size_t cols) {
    require(scalar.rows() == 1 && scalar.cols() == 1, "broadcast: input must be 1x1");
    return scalar.tape()->record("broadcast", DenseMatrix(rows, cols, scalar.value()[0]), {scalar},
                                 [](Tape&, std::size_t, const Var& g) { return std::vector<Var>{sum_all(g)}; });
}

inline Var row_sum(const Var& a) {
    DenseMatrix out(a.rows(), 1);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (double v : a.value().row(i)) s += v;
        out[i] = s;
    }
    const std::size_t c = a.cols();
    return a.tape()->record("row_sum", std::move(out), {a}, [c](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{broadcast_cols(g, c)};
    });
}

inline Var broadcast_cols(const Var& col, std::size_t cols) {
    require(col.cols() == 1, "broadcast_cols: input must be a column");
    DenseMatrix out(col.rows(), cols);
    for (std::size_t i = 0; i < col.rows(); ++i)
        for (std::size_t j = 0; j < cols; ++j) out(i, j) = col.value()[i];
    return col.tape()->record("broadcast_cols", std::move(out), {col},
                              [](Tape&, std::size_t, const Var& g) { return std::vector<Var>{row_sum(g)}; });
}

inline Var slice_cols(const Var& a, std::size_t start, std::size_t width) {
    require(start + width <= a.cols(), "slice_cols: range out of bounds");
    DenseMatrix out(a.rows(), width);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < width; ++j) out(i, j) = a.value()(i, start + j);
    const std::size_t total = a.cols();
    return a.tape()->record("slice_cols", std::move(out), {a}, [start, total](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{embed_cols(g, start, total)};
    });
}

/// Places `a` at column offset `start` of a zero matrix with `total` columns.
inline Var embed_cols(const Var& a, std::size_t start, std::size_t total) {
    require(start + a.cols() <= total, "embed_cols: range out of bounds");
    DenseMatrix out(a.rows(), total);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, start + j) = a.value()(i, j);
    const std::size_t width = a.cols();
    return a.tape()->record("embed_cols", std::move(out), {a}, [start, width](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{slice_cols(g, start, width)};
    });
}

inline Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
    require(start + count <= a.rows(), "slice_rows: range out of bounds");
    const std::size_t c = a.cols();
    std::vector<double> vals(a.value().values().begin() + static_cast<std::ptrdiff_t>(start * c),
                             a.value().values().begin() + static_cast<std::ptrdiff_t>((start + count) * c));
    const std::size_t total = a.rows();
    return a.tape()->record("slice_rows", DenseMatrix(count, c, std::move(vals)), {a},
                            [start, total](Tape&, std::size_t, const Var& g) {
                                return std::vector<Var>{embed_rows(g, start, total)};
                            });
}

inline Var embed_rows(const Var& a, std::size_t start, std::size_t total) {
    require(start + a.rows() <= total, "embed_rows: range out of bounds");
    DenseMatrix out(total, a.cols());
    std::copy(a.value().values().begin(), a.value().values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(start * a.cols()));
    const std::size_t count = a.rows();
    return a.tape()->record("embed_rows", std::move(out), {a}, [start, count](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{slice_rows(g, start, count)};
    });
}

/// Column-wise concatenation [a | b].
inline Var concat_cols(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    require(a.rows() == b.rows(), "concat_cols: row mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
    const std::size_t ca = a.cols(), cb = b.cols();
    DenseMatrix out(a.rows(), ca + cb);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < ca; ++j) out(i, j) = a.value()(i, j);
        for (std::size_t j = 0; j < cb; ++j) out(i, ca + j) = b.value()(i, j);
    }
    return a.tape()->record("concat_cols", std::move(out), {a, b}, [ca, cb](Tape& t, std::size_t self, const Var& g) {
        return std::vector<Var>{detail::needs(t, self, 0) ? slice_cols(g, 0, ca) : Var{},
                                detail::needs(t, self, 1) ? slice_cols(g, ca, cb) : Var{}};
    });
}

inline Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols: nothing to concatenate");
    Var out = parts[0];
    for (std::size_t k = 1; k < parts.size(); ++k) out = concat_cols(out, parts[k]);
    return out;
}

/// max(0, x). The subgradient at 0 is 0.
inline Var relu(const Var& a) {
    DenseMatrix out = a.value();
    auto step = std::make_shared<DenseMatrix>(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*step)[i] = out[i] > 0.0 ? 1.0 : 0.0;
        out[i] = out[i] > 0.0 ? out[i] : 0.0;
    }
    std::shared_ptr<const DenseMatrix> mask = std::move(step);
    return a.tape()->record("relu", std::move(out), {a}, [mask](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{mul_const(g, mask)};
    });
}

inline Var leaky_relu(const Var& a, double slope) {
    DenseMatrix out = a.value();
    auto d = std::make_shared<DenseMatrix>(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*d)[i] = out[i] > 0.0 ? 1.0 : slope;
        out[i] *= (*d)[i];
    }
    std::shared_ptr<const DenseMatrix> mask = std::move(d);
    return a.tape()->record("leaky_relu", std::move(out), {a}, [mask](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{mul_const(g, mask)};
    });
}

inline double clamp01(double x) noexcept { return std::min(std::max(0.0, x), 1.0); }

inline std::vector<double> clamp01(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    for (auto& x : out) x = clamp01(x);
    return out;
}

/// min(max(0, x), 1) elementwise. Derivative is 1 strictly inside (0, 1) and 0
/// elsewhere, including at both boundaries.
inline Var clamp01(const Var& a) {
    DenseMatrix out = a.value();
    auto d = std::make_shared<DenseMatrix>(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*d)[i] = (out[i] > 0.0 && out[i] < 1.0) ? 1.0 : 0.0;
        out[i] = clamp01(out[i]);
    }
    std::shared_ptr<const DenseMatrix> mask = std::move(d);
    return a.tape()->record("clamp01", std::move(out), {a}, [mask](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{mul_const(g, mask)};
    });
}

inline Var exp(const Var& a) {
    DenseMatrix out = a.value();
    for (auto& v : out.values()) v = std::exp(v);
    return a.tape()->record("exp", std::move(out), {a}, [](Tape& t, std::size_t self, const Var& g) {
        return std::vector<Var>{mul(g, Var(&t, self))};
    });
}

/// Row-wise log-softmax.
inline Var log_softmax_rows(const Var& a) {
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        double m = -std::numeric_limits<double>::infinity();
        for (double v : r) m = std::max(m, v);
        double s = 0.0;
        for (double v : r) s += std::exp(v - m);
        const double lse = m + std::log(s);
        for (auto& v : r) v -= lse;
    }
    const std::size_t c = a.cols();
    return a.tape()->record("log_softmax_rows", std::move(out), {a}, [c](Tape& t, std::size_t self, const Var& g) {
        const Var probs = exp(Var(&t, self));
        return std::vector<Var>{sub(g, mul(probs, broadcast_cols(row_sum(g), c)))};
    });
}

inline Var spmm(const PatternPtr& p, const Var& values, const Var& d) {
    detail::same_tape(values, d);
    require(values.cols() == 1, "spmm: edge values must be a column");
    return d.tape()->record("spmm", kernels::spmm(*p, values.value().values(), d.value()), {values, d},
                            [p](Tape& t, std::size_t self, const Var& g) {
                                const Var v = detail::in(t, self, 0), x = detail::in(t, self, 1);
                                return std::vector<Var>{detail::needs(t, self, 0) ? sddmm(p, g, x) : Var{},
                                                        detail::needs(t, self, 1) ? spmm_t(p, v, g) : Var{}};
                            });
}

inline Var spmm_t(const PatternPtr& p, const Var& values, const Var& d) {
    detail::same_tape(values, d);
    require(values.cols() == 1, "spmm_t: edge values must be a column");
    return d.tape()->record("spmm_t", kernels::spmm_t(*p, values.value().values(), d.value()), {values, d},
                            [p](Tape& t, std::size_t self, const Var& g) {
                                const Var v = detail::in(t, self, 0), x = detail::in(t, self, 1);
                                return std::vector<Var>{detail::needs(t, self, 0) ? sddmm(p, x, g) : Var{},
                                                        detail::needs(t, self, 1) ? spmm(p, v, g) : Var{}};
                            });
}

inline Var sddmm(const PatternPtr& p, const Var& a, const Var& b) {
    detail::same_tape(a, b);
    return a.tape()->record("sddmm", kernels::sddmm(*p, a.value(), b.value()), {a, b},
                            [p](Tape& t, std::size_t self, const Var& g) {
                                const Var x = detail::in(t, self, 0), y = detail::in(t, self, 1);
                                return std::vector<Var>{detail::needs(t, self, 0) ? spmm(p, g, y) : Var{},
                                                        detail::needs(t, self, 1) ? spmm_t(p, g, x) : Var{}};
                            });
}

/// Per stored entry (i, j): v[i].
inline Var edge_row_broadcast(const PatternPtr& p, const Var& v) {
    require(v.rows() == p->n && v.cols() == 1, "edge_row_broadcast: expected an n x 1 column");
    DenseMatrix out(p->nnz(), 1);
    for (std::size_t i = 0; i < p->n; ++i)
        for (std::size_t e = p->row_begin(i); e < p->row_end(i); ++e) out[e] = v.value()[i];
    return v.tape()->record("edge_row_broadcast", std::move(out), {v}, [p](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{edge_row_sum(p, g)};
    });
}

/// Per stored entry (i, j): v[j].
inline Var edge_col_broadcast(const PatternPtr& p, const Var& v) {
    require(v.rows() == p->n && v.cols() == 1, "edge_col_broadcast: expected an n x 1 column");
    DenseMatrix out(p->nnz(), 1);
    for (std::size_t e = 0; e < p->nnz(); ++e) out[e] = v.value()[p->col_indices[e]];
    return v.tape()->record("edge_col_broadcast", std::move(out), {v}, [p](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{edge_col_sum(p, g)};
    });
}

inline Var edge_row_sum(const PatternPtr& p, const Var& e) {
    require(e.rows() == p->nnz() && e.cols() == 1, "edge_row_sum: values not aligned to pattern");
    DenseMatrix out(p->n, 1);
    for (std::size_t i = 0; i < p->n; ++i)
        for (std::size_t k = p->row_begin(i); k < p->row_end(i); ++k) out[i] += e.value()[k];
    return e.tape()->record("edge_row_sum", std::move(out), {e}, [p](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{edge_row_broadcast(p, g)};
    });
}

inline Var edge_col_sum(const PatternPtr& p, const Var& e) {
    require(e.rows() == p->nnz() && e.cols() == 1, "edge_col_sum: values not aligned to pattern");
    DenseMatrix out(p->n, 1);
    for (std::size_t k = 0; k < p->nnz(); ++k) out[p->col_indices[k]] += e.value()[k];
    return e.tape()->record("edge_col_sum", std::move(out), {e}, [p](Tape&, std::size_t, const Var& g) {
        return std::vector<Var>{edge_col_broadcast(p, g)};
    });
}

/// Softmax of edge scores over each row's stored entries.
inline Var edge_softmax(const PatternPtr& p, const Var& scores) {
    require(scores.rows() == p->nnz() && scores.cols() == 1, "edge_softmax: scores not aligned to pattern");
    DenseMatrix out(p->nnz(), 1);
    for (std::size_t i = 0; i < p->n; ++i) {
        const std::size_t b = p->row_begin(i), e = p->row_end(i);
        if (b == e) continue;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = b; k < e; ++k) m = std::max(m, scores.value()[k]);
        double s = 0.0;
        for (std::size_t k = b; k < e; ++k) s += (out[k] = std::exp(scores.value()[k] - m));
        for (std::size_t k = b; k < e; ++k) out[k] /= s;
    }
    return scores.tape()->record("edge_softmax", std::move(out), {scores}, [p](Tape& t, std::size_t self, const Var& g) {
        const Var y(&t, self);
        return std::vector<Var>{mul(y, sub(g, edge_row_broadcast(p, edge_row_sum(p, mul(y, g)))))};
    });
}

// ---------------------------------------------------------------------------
// Dropout with recorded masks.
// ---------------------------------------------------------------------------

/// Supplies dropout masks. Recording mode draws fresh masks and keeps them;
/// replay mode hands back a previously recorded sequence so a past stochastic
/// forward pass can be re-executed and differentiated exactly.
class DropoutMasks {
public:
    static DropoutMasks off() { return DropoutMasks(Mode::off, nullptr, {}); }
    static DropoutMasks recording(RngStream& rng) { return DropoutMasks(Mode::record, &rng, {}); }
    static DropoutMasks replaying(std::vector<std::shared_ptr<const DenseMatrix>> masks) {
        return DropoutMasks(Mode::replay, nullptr, std::move(masks));
    }

    bool active() const noexcept { return mode_ != Mode::off; }

    std::shared_ptr<const DenseMatrix> next(std::size_t rows, std::size_t cols, double rate) {
        if (mode_ == Mode::replay) {
            require(cursor_ < masks_.size(), "dropout replay: more masks requested than were recorded");
            const auto& m = masks_[cursor_++];
            require(m->rows() == rows && m->cols() == cols, "dropout replay: recorded mask shape mismatch");
            return m;
        }
        require(mode_ == Mode::record, "dropout: masks requested while disabled");
        auto m = std::make_shared<DenseMatrix>(rows, cols);
        const double keep_scale = 1.0 / (1.0 - rate);
        for (auto& v : m->values()) v = rng_->uniform() < rate ? 0.0 : keep_scale;
        masks_.push_back(m);
        return masks_.back();
    }

    const std::vector<std::shared_ptr<const DenseMatrix>>& masks() const noexcept { return masks_; }
    std::size_t consumed() const noexcept { return mode_ == Mode::replay ? cursor_ : masks_.size(); }

private:
    enum class Mode { off, record, replay };
    DropoutMasks(Mode m, RngStream* rng, std::vector<std::shared_ptr<const DenseMatrix>> masks)
        : mode_(m), rng_(rng), masks_(std::move(masks)) {}

    Mode mode_;
    RngStream* rng_;
    std::vector<std::shared_ptr<const DenseMatrix>> masks_;
    std::size_t cursor_ = 0;
};

/// Inverted dropout: entries are zeroed with probability `rate` and survivors
/// scaled by 1/(1-rate). Identity in eval mode, at rate 0, or when masks are off.
inline Var dropout(const Var& x, double rate, DropoutMasks& masks, bool training) {
    require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0, 1)");
    if (!training || rate == 0.0 || !masks.active()) return x;
    return mul_const(x, masks.next(x.rows(), x.cols(), rate));
}

// ---------------------------------------------------------------------------
// Composite losses.
// ---------------------------------------------------------------------------

/// Mean over `mask` of -log softmax(logits[i])[labels[i]].
inline Var masked_softmax_cross_entropy(const Var& logits, std::span<const int> labels, std::span<const Index> mask) {
    require(logits.rows() == labels.size(), "cross_entropy: logits rows do not match label count");
    require(!mask.empty(), "cross_entropy: empty node mask");
    auto select = std::make_shared<DenseMatrix>(logits.rows(), logits.cols());
    for (Index i : mask) {
        require(i < logits.rows(), "cross_entropy: mask index out of range");
        const int y = labels[i];
        require(y >= 0 && static_cast<std::size_t>(y) < logits.cols(), "cross_entropy: label out of range");
        (*select)(i, static_cast<std::size_t>(y)) += 1.0;
    }
    const Var picked = sum_all(mul_const(log_softmax_rows(logits), std::move(select)));
    return scale(picked, -1.0 / static_cast<double>(mask.size()));
}

/// Squared Frobenius norm.
inline Var squared_norm(const Var& a) { return sum_all(mul(a, a)); }

// ---------------------------------------------------------------------------
// Second order.
// ---------------------------------------------------------------------------

/// Vector-Jacobian product through a recorded gradient map g(leaves):
/// returns v^T (dg / d wrt_k) for every k, where v is aligned to `grads`.
/// Jacobians are never formed; this is a second reverse sweep over the tape.
inline std::vector<DenseMatrix> vjp_through_gradient(Tape& tape, const Gradients& grads,
                                                     std::span<const DenseMatrix> v, std::span<const Var> wrt) {
    require(grads.second_order, "vjp_through_gradient: gradients were computed without second-order recording");
    require(v.size() == grads.grads.size(), "vjp_through_gradient: cotangent count does not match gradient count");
    Var total;
    for (std::size_t k = 0; k < v.size(); ++k) {
        const Var& g = grads.grads[k];
        require(v[k].same_shape(g.value()), "vjp_through_gradient: cotangent shape mismatch");
        const Var term = sum_all(mul_const(g, std::make_shared<const DenseMatrix>(v[k])));
        total = total.valid() ? add(total, term) : term;
    }
    std::vector<DenseMatrix> out;
    if (!total.valid()) {
        for (const auto& w : wrt) out.emplace_back(w.rows(), w.cols());
        return out;
    }
    return tape.gradients(total, wrt, false).values();
}

}  // namespace gsebo

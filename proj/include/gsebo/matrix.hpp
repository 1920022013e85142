#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gsebo/error.hpp"

namespace gsebo {

using Index = std::uint32_t;

/// Row-major dense matrix of doubles.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        require(values_.size() == rows_ * cols_, "DenseMatrix: value count does not match shape");
    }
    DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        values_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            require(r.size() == cols_, "DenseMatrix: ragged initializer");
            values_.insert(values_.end(), r.begin(), r.end());
        }
    }

    static DenseMatrix column(std::vector<double> values) {
        const std::size_t n = values.size();
        return DenseMatrix(n, 1, std::move(values));
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool same_shape(const DenseMatrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols_ + c]; }
    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }

    std::span<double> row(std::size_t r) noexcept { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {values_.data() + r * cols_, cols_}; }

    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    bool all_finite() const noexcept {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

inline std::string shape_str(const DenseMatrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// CSR nonzero pattern of a square n x n matrix.
struct SparsePattern {
    std::size_t n = 0;
    std::vector<std::size_t> row_offsets{0};
    std::vector<Index> col_indices;

    std::size_t nnz() const noexcept { return col_indices.size(); }
    std::size_t row_begin(std::size_t r) const noexcept { return row_offsets[r]; }
    std::size_t row_end(std::size_t r) const noexcept { return row_offsets[r + 1]; }
    std::size_t degree(std::size_t r) const noexcept { return row_end(r) - row_begin(r); }

    /// Row index of each stored entry, in storage order.
    std::vector<Index> row_of_entries() const {
        std::vector<Index> rows(nnz());
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t e = row_begin(r); e < row_end(r); ++e) rows[e] = static_cast<Index>(r);
        return rows;
    }

    /// Position of (r, c) in storage order, or nnz() when absent.
    std::size_t find(std::size_t r, std::size_t c) const noexcept {
        const auto first = col_indices.begin() + static_cast<std::ptrdiff_t>(row_begin(r));
        const auto last = col_indices.begin() + static_cast<std::ptrdiff_t>(row_end(r));
        const auto it = std::lower_bound(first, last, static_cast<Index>(c));
        if (it == last || *it != c) return nnz();
        return static_cast<std::size_t>(it - col_indices.begin());
    }

    /// Checks the CSR invariants: sorted unique columns, in-range, symmetric.
    void validate() const {
        require(row_offsets.size() == n + 1 && row_offsets.front() == 0 && row_offsets.back() == nnz(),
                "SparsePattern: malformed row offsets");
        for (std::size_t r = 0; r < n; ++r) {
            require(row_offsets[r] <= row_offsets[r + 1], "SparsePattern: decreasing row offsets");
            for (std::size_t e = row_begin(r); e < row_end(r); ++e) {
                require(col_indices[e] < n, "SparsePattern: column out of range");
                if (e > row_begin(r)) require(col_indices[e - 1] < col_indices[e], "SparsePattern: unsorted or duplicate column");
            }
        }
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t e = row_begin(r); e < row_end(r); ++e)
                require(find(col_indices[e], r) != nnz(), "SparsePattern: pattern is not symmetric");
    }

    friend bool operator==(const SparsePattern&, const SparsePattern&) = default;
};

using PatternPtr = std::shared_ptr<const SparsePattern>;

/// Sparse matrix: a shared pattern plus one value per stored entry.
struct SparseWeighted {
    PatternPtr pattern;
    std::vector<double> edge_values;

    DenseMatrix densify() const {
        DenseMatrix d(pattern->n, pattern->n);
        for (std::size_t r = 0; r < pattern->n; ++r)
            for (std::size_t e = pattern->row_begin(r); e < pattern->row_end(r); ++e)
                d(r, pattern->col_indices[e]) = edge_values[e];
        return d;
    }
};

namespace kernels {

// All kernels accumulate in a fixed order so results are bit-reproducible.

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.cols() == b.rows(), "matmul: inner dimension mismatch " + shape_str(a) + " * " + shape_str(b));
    DenseMatrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto o = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const auto br = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
        }
    }
    return out;
}

/// a^T * b
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows() == b.rows(), "matmul_tn: dimension mismatch " + shape_str(a) + "^T * " + shape_str(b));
    DenseMatrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const auto ar = a.row(k);
        const auto br = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ar[i];
            if (aki == 0.0) continue;
            auto o = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
        }
    }
    return out;
}

/// a * b^T
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.cols() == b.cols(), "matmul_nt: dimension mismatch " + shape_str(a) + " * " + shape_str(b) + "^T");
    DenseMatrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const auto br = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
            out(i, j) = s;
        }
    }
    return out;
}

/// out[i] = sum over stored (i, j), ascending j, of values[ij] * d[j]
inline DenseMatrix spmm(const SparsePattern& p, std::span<const double> values, const DenseMatrix& d) {
    require(values.size() == p.nnz(), "spmm: edge values not aligned to pattern");
    require(p.n == d.rows(), "spmm: pattern size " + std::to_string(p.n) + " vs dense rows " + std::to_string(d.rows()));
    DenseMatrix out(p.n, d.cols());
    for (std::size_t i = 0; i < p.n; ++i) {
        auto o = out.row(i);
        for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e) {
            const double w = values[e];
            const auto dr = d.row(p.col_indices[e]);
            for (std::size_t c = 0; c < d.cols(); ++c) o[c] += w * dr[c];
        }
    }
    return out;
}

/// Transposed product: out[j] = sum over stored (i, j), ascending i, of values[ij] * d[i]
inline DenseMatrix spmm_t(const SparsePattern& p, std::span<const double> values, const DenseMatrix& d) {
    require(values.size() == p.nnz(), "spmm_t: edge values not aligned to pattern");
    require(p.n == d.rows(), "spmm_t: dimension mismatch");
    DenseMatrix out(p.n, d.cols());
    for (std::size_t i = 0; i < p.n; ++i) {
        const auto dr = d.row(i);
        for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e) {
            const double w = values[e];
            auto o = out.row(p.col_indices[e]);
            for (std::size_t c = 0; c < d.cols(); ++c) o[c] += w * dr[c];
        }
    }
    return out;
}

/// Sampled dense-dense product: out[ij] = <a[i], b[j]> for each stored (i, j).
inline DenseMatrix sddmm(const SparsePattern& p, const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows() == p.n && b.rows() == p.n && a.cols() == b.cols(), "sddmm: dimension mismatch");
    DenseMatrix out(p.nnz(), 1);
    for (std::size_t i = 0; i < p.n; ++i) {
        const auto ar = a.row(i);
        for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e) {
            const auto br = b.row(p.col_indices[e]);
            double s = 0.0;
            for (std::size_t c = 0; c < a.cols(); ++c) s += ar[c] * br[c];
            out[e] = s;
        }
    }
    return out;
}

}  // namespace kernels

}  // namespace gsebo

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gsebo/error.hpp"
#include "gsebo/graph.hpp"
#include "gsebo/matrix.hpp"
#include "gsebo/models.hpp"
#include "gsebo/tape.hpp"

namespace gsebo {

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

/// Fraction of masked nodes whose argmax logit equals the label.
inline double accuracy(const DenseMatrix& logits, std::span<const int> labels, std::span<const Index> mask) {
    require(!mask.empty(), "accuracy: empty node mask");
    require(logits.rows() == labels.size(), "accuracy: logits rows do not match label count");
    std::size_t hit = 0;
    for (Index i : mask) {
        require(i < logits.rows(), "accuracy: mask index out of range");
        hit += static_cast<int>(argmax(logits.row(i))) == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(mask.size());
}

/// Mean masked cross-entropy computed directly on values (no tape).
inline double cross_entropy(const DenseMatrix& logits, std::span<const int> labels, std::span<const Index> mask) {
    Tape t;
    return masked_softmax_cross_entropy(t.constant(logits), labels, mask).value()[0];
}

struct StrengthSummary {
    std::optional<double> mean_intra;
    std::optional<double> mean_inter;
};

/// Mean clamp01(z) over non-loop entries, split by whether the endpoints share
/// a label. Multi-head strengths are pooled over heads.
inline StrengthSummary z_strength_summary(const ModelState& st, const DatasetBundle& b) {
    const auto& p = *st.spec.prop->pattern;
    require(b.labels.size() == p.n, "z_strength_summary: bundle does not match model");
    require(st.z.values.size() % p.nnz() == 0 || p.nnz() == 0, "z_strength_summary: strengths not aligned");
    double si = 0, so = 0;
    std::size_t ni = 0, no = 0;
    const std::size_t heads = p.nnz() == 0 ? 0 : st.z.values.size() / p.nnz();
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < p.n; ++i)
            for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e) {
                const std::size_t j = p.col_indices[e];
                if (i == j) continue;
                const double s = clamp01(st.z.values[h * p.nnz() + e]);
                if (b.labels[i] == b.labels[j]) {
                    si += s;
                    ++ni;
                } else {
                    so += s;
                    ++no;
                }
            }
    StrengthSummary out;
    if (ni > 0) out.mean_intra = si / static_cast<double>(ni);
    if (no > 0) out.mean_inter = so / static_cast<double>(no);
    return out;
}

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;
};

/// Sample mean and (n-1)-denominator standard deviation; stddev is 0 for one sample.
inline MeanStd mean_std(std::span<const double> xs) {
    require(!xs.empty(), "mean_std: no samples");
    MeanStd r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - r.mean) * (x - r.mean);
        r.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return r;
}

struct EvalReport {
    double accuracy_train = 0.0;
    double accuracy_val = 0.0;
    double accuracy_test = 0.0;
    std::optional<double> mean_strength_intra;
    std::optional<double> mean_strength_inter;
    double inter_class_ratio = 0.0;
};

inline EvalReport evaluate(const ModelState& st, const DatasetBundle& b) {
    const DenseMatrix logits = predict(st);
    EvalReport r;
    r.accuracy_train = accuracy(logits, b.labels, b.split.train);
    r.accuracy_val = accuracy(logits, b.labels, b.split.val);
    r.accuracy_test = accuracy(logits, b.labels, b.split.test);
    const auto s = z_strength_summary(st, b);
    r.mean_strength_intra = s.mean_intra;
    r.mean_strength_inter = s.mean_inter;
    r.inter_class_ratio = inter_class_ratio(b.graph, b.labels);
    return r;
}

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string format_real(const std::optional<double>& v) { return v ? format_real(*v) : "NA"; }

inline constexpr const char* kEvalReportHeader =
    "accuracy_train\taccuracy_val\taccuracy_test\tmean_strength_intra\tmean_strength_inter\tinter_class_ratio";

/// Single TSV line, no trailing newline. Absent means are written as NA.
inline std::string to_tsv(const EvalReport& r) {
    return format_real(r.accuracy_train) + "\t" + format_real(r.accuracy_val) + "\t" + format_real(r.accuracy_test) +
           "\t" + format_real(r.mean_strength_intra) + "\t" + format_real(r.mean_strength_inter) + "\t" +
           format_real(r.inter_class_ratio);
}

}  // namespace gsebo

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string_view>
#include <vector>

#include "gsebo/bilevel.hpp"
#include "gsebo/metrics.hpp"
#include "test_util.hpp"

using namespace gsebo;
using gsebo::testing::six_node_bundle;

namespace {

// Logits whose argmax is `pred[i]` for row i.
DenseMatrix one_hot_logits(const std::vector<int>& pred, std::size_t classes) {
    DenseMatrix m(pred.size(), classes);
    for (std::size_t i = 0; i < pred.size(); ++i) m(i, static_cast<std::size_t>(pred[i])) = 1.0;
    return m;
}

std::vector<Index> all_nodes(std::size_t n) {
    std::vector<Index> v(n);
    std::iota(v.begin(), v.end(), Index{0});
    return v;
}

}  // namespace

TEST(Accuracy, Examples) {
    const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
    const auto mask = all_nodes(10);
    EXPECT_EQ(accuracy(one_hot_logits(y, 3), y, mask), 1.0);
    std::vector<int> wrong(10);
    for (std::size_t i = 0; i < 10; ++i) wrong[i] = (y[i] + 1) % 3;
    EXPECT_EQ(accuracy(one_hot_logits(wrong, 3), y, mask), 0.0);
    std::vector<int> seven = y;
    for (std::size_t i : {1, 4, 8}) seven[i] = wrong[i];
    EXPECT_DOUBLE_EQ(accuracy(one_hot_logits(seven, 3), y, mask), 0.7);
    EXPECT_THROW(accuracy(one_hot_logits(y, 3), y, std::vector<Index>{}), ContractError);
    EXPECT_THROW(accuracy(one_hot_logits(y, 3), y, std::vector<Index>{10}), ContractError);
}

TEST(Accuracy, MaskOnlyCountsSelectedNodes) {
    const std::vector<int> y{0, 1, 0, 1};
    const DenseMatrix l = one_hot_logits({0, 0, 0, 0}, 2);
    EXPECT_EQ(accuracy(l, y, std::vector<Index>{0, 2}), 1.0);
    EXPECT_EQ(accuracy(l, y, std::vector<Index>{1, 3}), 0.0);
    EXPECT_EQ(accuracy(l, y, std::vector<Index>{0, 1}), 0.5);
}

TEST(Accuracy, InvariantUnderNodePermutation) {
    RngStream rng(1);
    const std::size_t n = 30;
    DenseMatrix l = gsebo::testing::random_matrix(n, 4, rng);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.below(4));
    std::vector<Index> mask{0, 3, 5, 7, 11, 20, 29};
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    DenseMatrix pl(n, 4);
    std::vector<int> py(n);
    std::vector<Index> pmask;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(l.row(i).begin(), l.row(i).end(), pl.row(perm[i]).begin());
        py[perm[i]] = y[i];
    }
    for (Index i : mask) pmask.push_back(perm[i]);
    EXPECT_EQ(accuracy(l, y, mask), accuracy(pl, py, pmask));
}

TEST(Argmax, TiesGoToLowestIndex) {
    const std::vector<double> a{0.5, 2.0, 2.0, 1.0};
    EXPECT_EQ(argmax(a), 1u);
    const std::vector<double> b{3.0, 3.0, 3.0};
    EXPECT_EQ(argmax(b), 0u);
    const std::vector<double> c{-1.0};
    EXPECT_EQ(argmax(c), 0u);
}

TEST(StrengthSummary, RegularGraphAtInitHasEqualMeans) {
    DatasetBundle b = six_node_bundle();
    // 6-cycle: every node has degree 2, so every normalized entry is 1/3.
    b.graph = Graph::from_edges(6, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 5}});
    BackboneConfig c;
    RngStream rng(2);
    const ModelState st = init_model(b, c, rng);
    const auto s = z_strength_summary(st, b);
    ASSERT_TRUE(s.mean_intra && s.mean_inter);
    EXPECT_NEAR(*s.mean_intra, 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(*s.mean_inter, 1.0 / 3.0, 1e-15);
}

TEST(StrengthSummary, AllIntraGraphHasNoInterMean) {
    DatasetBundle b = six_node_bundle();
    b.graph = Graph::from_edges(6, {{0, 1}, {2, 3}, {4, 5}});
    BackboneConfig c;
    RngStream rng(3);
    const ModelState st = init_model(b, c, rng);
    const auto s = z_strength_summary(st, b);
    EXPECT_TRUE(s.mean_intra.has_value());
    EXPECT_FALSE(s.mean_inter.has_value());
    const EvalReport r = evaluate(st, b);
    EXPECT_NE(to_tsv(r).find("\tNA\t"), std::string::npos);
}

TEST(StrengthSummary, InitDependsOnDegreesNotLabels) {
    DatasetBundle a = six_node_bundle();
    DatasetBundle b = a;
    b.labels = {2, 1, 0, 2, 1, 0};
    BackboneConfig c;
    RngStream r1(4), r2(4);
    const ModelState sa = init_model(a, c, r1), sb = init_model(b, c, r2);
    EXPECT_EQ(sa.z.values, sb.z.values);
}

TEST(StrengthSummary, ClampsAndPoolsHeads) {
    DatasetBundle b = six_node_bundle();
    BackboneConfig c;
    c.backbone = Backbone::gat;
    c.heads = 2;
    RngStream rng(5);
    ModelState st = init_model(b, c, rng);
    const auto& p = *st.spec.prop->pattern;
    // Head 0 all strengths 2 (clamps to 1), head 1 all -1 (clamps to 0).
    for (std::size_t e = 0; e < p.nnz(); ++e) {
        st.z.values[e] = 2.0;
        st.z.values[p.nnz() + e] = -1.0;
    }
    const auto s = z_strength_summary(st, b);
    EXPECT_DOUBLE_EQ(*s.mean_intra, 0.5);
    EXPECT_DOUBLE_EQ(*s.mean_inter, 0.5);
}

TEST(MeanStd, Examples) {
    const std::vector<double> one{0.7};
    EXPECT_EQ(mean_std(one).mean, 0.7);
    EXPECT_EQ(mean_std(one).stddev, 0.0);
    const std::vector<double> two{0.8, 0.9};
    EXPECT_NEAR(mean_std(two).mean, 0.85, 1e-15);
    EXPECT_NEAR(mean_std(two).stddev, std::sqrt(0.005), 1e-15);
    const std::vector<double> four{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(mean_std(four).stddev, std::sqrt(5.0 / 3.0));
    EXPECT_THROW(mean_std(std::vector<double>{}), ContractError);
}

TEST(Report, FormattingAndAbsentValues) {
    EXPECT_EQ(format_real(0.5), "0.5");
    EXPECT_EQ(format_real(std::optional<double>{}), "NA");
    EXPECT_EQ(format_real(std::optional<double>{0.25}), "0.25");
    EvalReport r;
    r.accuracy_train = 1;
    r.accuracy_val = 0.5;
    r.accuracy_test = 0.25;
    r.mean_strength_intra = 0.125;
    r.inter_class_ratio = 0.15;
    EXPECT_EQ(to_tsv(r), "1\t0.5\t0.25\t0.125\tNA\t0.15");
    const std::string_view h = kEvalReportHeader;
    EXPECT_EQ(std::count(h.begin(), h.end(), '\t'), 5);
}

TEST(Report, FieldsWithinRanges) {
    SbmParams p;
    p.n = 60;
    p.p_intra = 0.15;
    p.p_inter = 0.02;
    RngStream rng(6);
    const DatasetBundle b = generate_sbm(p, rng);
    BackboneConfig bc;
    bc.hidden = 8;
    TrainConfig tc;
    tc.tau = 3;
    tc.eta_inner = 0.2;
    tc.eta_outer = 0.05;
    tc.max_outer = 5;
    const TrainResult res = train_gsebo(b, bc, tc);
    const EvalReport r = evaluate(res.state, b);
    for (double v : {r.accuracy_train, r.accuracy_val, r.accuracy_test, r.inter_class_ratio}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    ASSERT_TRUE(r.mean_strength_intra && r.mean_strength_inter);
    EXPECT_GE(*r.mean_strength_intra, 0.0);
    EXPECT_LE(*r.mean_strength_intra, 1.0);
    EXPECT_GE(*r.mean_strength_inter, 0.0);
    EXPECT_LE(*r.mean_strength_inter, 1.0);
    EXPECT_EQ(r.accuracy_val, res.history.best_record().val_acc);
    EXPECT_EQ(r.accuracy_test, res.history.best_record().test_acc);
}

TEST(CrossEntropy, MatchesClosedForm) {
    DenseMatrix l(2, 2);
    l(0, 0) = 1.0;
    l(1, 1) = 2.0;
    const std::vector<int> y{0, 0};
    const double expect = 0.5 * (std::log1p(std::exp(-1.0)) + std::log1p(std::exp(2.0)));
    EXPECT_NEAR(cross_entropy(l, y, all_nodes(2)), expect, 1e-14);
}

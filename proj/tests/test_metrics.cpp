#include <gtest/gtest.h>

#include <random>

#include "keq/metrics.hpp"

using namespace keq;

namespace {

ReplicateMatrix column(std::initializer_list<double> v) {
    ReplicateMatrix m(static_cast<Eigen::Index>(v.size()), 1);
    Eigen::Index i = 0;
    for (double x : v) m(i++, 0) = x;
    return m;
}

std::vector<double> random_dist(std::mt19937_64& rng, std::size_t n) {
    std::gamma_distribution<double> g(0.5, 1.0);
    std::vector<double> p(n);
    double s = 0;
    for (double& v : p) s += (v = g(rng));
    for (double& v : p) v /= s;
    return p;
}

}  // namespace

TEST(Bias, Examples) {
    EXPECT_DOUBLE_EQ(bias(column({3, 5}), {3})[0], 1.0);
    EXPECT_DOUBLE_EQ(bias(column({4}), {2})[0], 2.0);
    EXPECT_DOUBLE_EQ(bias(column({2, 2, 2}), {2})[0], 0.0);
    EXPECT_THROW(bias(column({1, 2}), {1, 2}), Error);
}

TEST(McSee, Examples) {
    EXPECT_NEAR(mc_see(column({1, 2, 3, 4}))[0], 1.2909944487358056, 1e-12);
    EXPECT_NEAR(mc_see(column({7.5, 9.5}))[0], std::sqrt(2.0), 1e-12);
    EXPECT_EQ(mc_see(column({0.1, 0.1, 0.1}))[0], 0.0);
    EXPECT_THROW(mc_see(column({1})), Error);
}

TEST(Rmse, Examples) {
    EXPECT_DOUBLE_EQ(rmse({3}, {4})[0], 5.0);
    EXPECT_DOUBLE_EQ(rmse({0}, {1.7})[0], 1.7);
    EXPECT_DOUBLE_EQ(rmse({1.5}, {2.0})[0], 2.5);
}

TEST(Rmse, IdentityWithReplicateMatrix) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> z(0, 1);
    ReplicateMatrix m(50, 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 10 + z(rng);
    const std::vector<double> truth{10, 10.5, 9, 11};
    const auto b = bias(m, truth);
    const auto s = mc_see(m);
    const auto r = rmse(b, s);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(r[k] * r[k], b[k] * b[k] + s[k] * s[k]);
}

TEST(Ediff, Examples) {
    ReplicateMatrix a = ReplicateMatrix::Random(6, 5);
    const auto same = ediff(a, a);
    EXPECT_EQ(same.mean, 0.0);
    EXPECT_EQ(same.dtm_exceed_fraction, 0.0);
    ReplicateMatrix b = a.array() + 2.0;
    const auto off = ediff(a, b);
    EXPECT_NEAR(off.mean, 2.0, 1e-12);
    EXPECT_EQ(off.dtm_exceed_fraction, 1.0);
    EXPECT_THROW(ediff(a, ReplicateMatrix::Zero(5, 5)), Error);
}

TEST(Ediff, AtLeastAbsoluteMeanDifference) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z(0, 1);
    ReplicateMatrix a(30, 8), b(30, 8);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        a.data()[i] = z(rng);
        b.data()[i] = 0.3 + z(rng);
    }
    const auto e = ediff(a, b);
    for (Eigen::Index s = 0; s < 8; ++s) EXPECT_GE(e.per_point[static_cast<std::size_t>(s)] + 1e-15, std::abs((a.col(s) - b.col(s)).mean()));
}

TEST(Tvd, Examples) {
    EXPECT_NEAR(total_variation({0.5, 0.5}, {0.8, 0.2}), 0.3, 1e-15);
    GroupedDistributions a{{"1", {0.5, 0.5}}, {"2", {0.1, 0.9}}};
    GroupedDistributions b{{"1", {0.8, 0.2}}, {"2", {0.1, 0.9}}};
    EXPECT_NEAR(tvd(a, b), 0.15, 1e-15);
    EXPECT_EQ(tvd(a, a), 0.0);
    EXPECT_DOUBLE_EQ(tvd({{"g", {1, 0}}}, {{"g", {0, 1}}}), 1.0);
    EXPECT_THROW(tvd(a, {{"1", {0.5, 0.5}}}), Error);
    EXPECT_THROW(tvd(a, {{"1", {0.5, 0.5}}, {"3", {0.5, 0.5}}}), Error);
}

TEST(Tvd, MetricProperties) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 500; ++i) {
        const auto p = random_dist(rng, 7), q = random_dist(rng, 7), r = random_dist(rng, 7);
        const double pq = total_variation(p, q);
        EXPECT_GE(pq, 0.0);
        EXPECT_LE(pq, 1.0 + 1e-15);
        EXPECT_DOUBLE_EQ(pq, total_variation(q, p));
        EXPECT_LE(pq, total_variation(p, r) + total_variation(r, q) + 1e-15);
    }
}

TEST(Tvd, ConditionalDistributions) {
    Dataset d{ScoreScale(0, 1), CovariateSpace({{"g", Categorical{{"a", "b", "c"}}}}), {{0, {0}}, {1, {0}}, {1, {2}}}};
    const auto c = conditional_distributions(d);
    ASSERT_EQ(c.size(), 2u);  // the empty group is skipped
    EXPECT_EQ(c.at("0"), (std::vector<double>{0.5, 0.5}));
    EXPECT_EQ(c.at("2"), (std::vector<double>{0.0, 1.0}));
    GroupedDistributions other{{"0", {0.5, 0.5}}, {"1", {1, 0}}};
    EXPECT_EQ(tvd_common_groups(c, other), 0.0);
}

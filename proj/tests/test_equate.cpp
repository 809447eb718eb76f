#include <gtest/gtest.h>

#include <random>

#include "keq/equate.hpp"
#include "keq/metrics.hpp"
#include "keq/parallel.hpp"
#include "keq/simulate.hpp"
#include "support.hpp"

using namespace keq;
using fixture::discretized_gaussian;

namespace {

GkePipelineConfig raw_config() {
    GkePipelineConfig cfg;
    cfg.presmooth.reset();
    return cfg;
}

// Persons with a categorical group and an integer covariate c ~ N(50 + 8 g, 10).
Dataset covariate_data(int n, double c_shift, std::uint64_t seed) {
    Rng rng = substream(seed, 0);
    std::normal_distribution<double> z(0.0, 1.0);
    std::bernoulli_distribution grp(0.4);
    Dataset d;
    d.scale = ScoreScale(0, 60);
    d.covariates = CovariateSpace({{"g", Categorical{{"a", "b"}}}, {"c", Binned{{50, 60, 70, 80, 100}}}});
    for (int i = 0; i < n; ++i) {
        const int g = grp(rng);
        const double c = std::clamp(std::round(50 + 8 * g + 10 * z(rng)), 0.0, 100.0);
        const int score = std::clamp(static_cast<int>(std::lround(10 + 0.3 * c + 3 * g + 4 * z(rng))), 0, 60);
        d.records.push_back({score, {static_cast<double>(g), std::min(100.0, c + c_shift)}});
    }
    return d;
}

ChainPlan figure8_plan() {
    ChainPlan plan;
    plan.steps = {{"F2017", "S2017", Design::Nec, {"school", "attempt"}, {}},
                  {"S2018", "S2017", Design::Eg, {}, {}},
                  {"F2018", "F2017", Design::Eg, {}, {}},
                  {"S2019", "S2017", Design::Eg, {}, {}},
                  {"F2019", "F2017", Design::Eg, {}, {}}};
    return plan;
}

}  // namespace

TEST(EquateGke, IdenticalDistributionsGiveIdentity) {
    const auto d = discretized_gaussian(ScoreScale(0, 40), 18, 6);
    const auto res = equate_gke(DesignInput{EgInput{d, d}}, GkePipelineConfig{});
    for (std::size_t j = 0; j < d.size(); ++j) EXPECT_NEAR(res.table.rows[j].equated, d.scale().point(j), 1e-6);
    EXPECT_EQ(res.table.method, Method::Eg);
}

TEST(EquateGke, LocationShift) {
    const ScoreScale scale(0, 80);
    const auto x = discretized_gaussian(scale, 35, 7);
    const auto y = discretized_gaussian(scale, 39, 7);
    const auto res = equate_gke(DesignInput{EgInput{x, y}}, GkePipelineConfig{});
    for (int s = 5; s <= 75; ++s) {
        // middle 90% of the x mass
        if (s < 35 - 11.5 || s > 35 + 11.5) continue;
        EXPECT_NEAR(res.table.rows[static_cast<std::size_t>(s)].equated, s + 4.0, 0.1) << s;
    }
}

TEST(EquateGke, LinearLimitWithLargeBandwidths) {
    const auto x = discretized_gaussian(ScoreScale(0, 50), 22, 6);
    std::vector<double> skew(61);
    for (std::size_t j = 0; j < skew.size(); ++j) skew[j] = std::exp(-0.5 * std::pow((j - 35.0) / 9.0, 2)) * (1 + 0.01 * j);
    double s = 0;
    for (double v : skew) s += v;
    for (double& v : skew) v /= s;
    const ScoreDistribution y(ScoreScale(0, 60), skew);
    GkePipelineConfig cfg;
    cfg.h_x = 50 * std::sqrt(x.variance());
    cfg.h_y = 50 * std::sqrt(y.variance());
    const auto res = equate_gke(DesignInput{EgInput{x, y}}, cfg);
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double lin = y.mean() + std::sqrt(y.variance() / x.variance()) * (x.scale().point(j) - x.mean());
        EXPECT_NEAR(res.table.rows[j].equated, lin, 0.05) << j;
    }
}

TEST(EquateGke, NearSymmetry) {
    const auto x = fixture::binomial(40, 0.45);
    const auto y = fixture::binomial(40, 0.55);
    const auto xy = equate_gke(DesignInput{EgInput{x, y}}, GkePipelineConfig{});
    const auto yx = equate_gke(DesignInput{EgInput{y, x}}, GkePipelineConfig{});
    for (int s = 10; s <= 26; ++s) EXPECT_NEAR(yx.map(xy.map(s)), s, 0.5) << s;
}

TEST(EquateGke, PopulationRoleConsistency) {
    const Dataset p = covariate_data(8000, 0, 1);
    const Dataset q = covariate_data(6000, 4, 2);
    const std::vector<std::string> g{"g"};
    const Dataset ps = select_covariates(p, g), qs = select_covariates(q, g);
    GkePipelineConfig cfg;
    cfg.omega = 0.6;
    const auto pq = equate_gke(ps, qs, cfg);
    cfg.omega = 0.4;
    const auto qp = equate_gke(qs, ps, cfg);
    for (int s = 15; s <= 35; ++s) EXPECT_NEAR(qp.map(pq.map(s)), s, 0.5) << s;
}

TEST(EquateGke, TablesAreMonotone) {
    Rng rng = substream(3, 0);
    for (int i = 0; i < 10; ++i) {
        const auto px = fixture::sample_dataset(fixture::binomial(30, 0.3 + 0.02 * i), 400, rng);
        const auto py = fixture::sample_dataset(fixture::binomial(30, 0.5), 400, rng);
        const auto res = equate_gke(px, py, GkePipelineConfig{.presmooth = LoglinearSpec{.score_degree = 3}});
        EXPECT_NO_THROW(res.table.check_monotone());
    }
}

TEST(EquateGke, DatasetsWithoutCovariatesUseEg) {
    const auto d = fixture::dataset_from_dist(fixture::binomial(20, 0.5), 1000);
    const auto res = equate_gke(d, d, raw_config());
    EXPECT_EQ(res.table.method, Method::Eg);
    for (std::size_t j = 0; j < 21; ++j) EXPECT_NEAR(res.table.rows[j].equated, static_cast<double>(j), 1e-6);
}

TEST(EquateCovariate, IdenticalDistributionsGiveIdentity) {
    const Dataset p = covariate_data(20000, 0, 5);
    const auto ce = equate_covariate(p, p, "c", {"g"}, GkePipelineConfig{}, {.scale = ScoreScale(0, 100)});
    for (std::size_t i = 0; i < p.records.size(); i += 97) {
        EXPECT_NEAR(ce.q_transformed.records[i].covariates[1], p.records[i].covariates[1], 0.05);
    }
}

TEST(EquateCovariate, ShiftOfTenIsUndone) {
    const Dataset p = covariate_data(30000, 0, 6);
    const Dataset q = covariate_data(30000, 10, 7);
    const auto ce = equate_covariate(p, q, "c", {"g"}, GkePipelineConfig{}, {.scale = ScoreScale(0, 100)});
    for (int v = 40; v <= 70; ++v) EXPECT_NEAR(ce.phi(v), v - 10.0, 0.5) << v;
}

TEST(EquateCovariate, NonIntegerCovariateRejected) {
    Dataset p = covariate_data(500, 0, 8);
    p.records[3].covariates[1] = 55.5;
    EXPECT_THROW(equate_covariate(p, p, "c", {"g"}, GkePipelineConfig{}), Error);
}

TEST(EquateCovariate, ScenarioFiveShiftRemovedWithinGroups) {
    const auto sc = [] {
        auto s = scenario(5);
        s.n = 50000;
        return s;
    }();
    const GeneratorParams g;
    Rng rp = substream(21, 0), rq = substream(21, 1);
    const Dataset p = gen_population(Population::P, sc, g, rp);
    const Dataset q = gen_population(Population::Q, sc, g, rq);
    const auto ce = equate_covariate(p, q, "C3", {"C1", "C2"}, GkePipelineConfig{}, {.scale = ScoreScale(0, 100)});
    // C3 bin distribution within (C1, C2) groups holding at least 500 persons in both.
    auto bins = [&](const Dataset& d) {
        std::map<int, std::vector<double>> out;
        std::map<int, double> n;
        for (const auto& r : d.records) {
            const int grp = static_cast<int>(r.covariates[0] * 2 + r.covariates[1]);
            auto& v = out[grp];
            v.resize(5);
            v[discretize(r.covariates[2], Binned{g.c3_thresholds})] += 1;
            n[grp] += 1;
        }
        for (auto& [k, v] : out)
            for (double& x : v) x /= n[k];
        return std::pair{out, n};
    };
    const auto [bp, np] = bins(p);
    const auto [bq, nq] = bins(q);
    const auto [bt, nt] = bins(ce.q_transformed);
    GroupedDistributions a, before, after;
    for (const auto& [k, v] : bp) {
        if (np.at(k) < 500 || !nq.contains(k) || nq.at(k) < 500) continue;
        a[std::to_string(k)] = v;
        before[std::to_string(k)] = bq.at(k);
        after[std::to_string(k)] = bt.at(k);
    }
    ASSERT_FALSE(a.empty());
    EXPECT_GT(tvd(a, before), 0.1);
    EXPECT_LT(tvd(a, after), 0.05);
}

TEST(EquateSequential, IdentityCovariateMapReducesToGke) {
    const auto sc = scenario(1);
    const GeneratorParams g;
    Rng rp = substream(4, 0), rq = substream(4, 1);
    const Dataset p = gen_population(Population::P, sc, g, rp);
    const Dataset q = gen_population(Population::Q, sc, g, rq);
    const auto plain = equate_gke(p, q, GkePipelineConfig{});
    const auto seq = equate_sequential(p, q, "C3", GkePipelineConfig{}, {.force_identity = true});
    EXPECT_EQ(seq.gke.table.method, Method::SequentialGke);
    for (std::size_t j = 0; j < plain.table.rows.size(); ++j)
        EXPECT_NEAR(seq.gke.table.rows[j].equated, plain.table.rows[j].equated, 1e-6);
}

TEST(EquateSequential, CategoricalCovariateRejected) {
    const Dataset p = covariate_data(500, 0, 9);
    EXPECT_THROW(equate_sequential(p, p, "g", GkePipelineConfig{}), Error);
}

TEST(ApplyEquating, Table) {
    EquatingTable t{ScoreScale(0, 3), {{0.5, {}}, {1.0, {}}, {3.0, {}}, {3.5, {}}}, Method::Gke};
    EXPECT_DOUBLE_EQ(apply_equating(t, 2.0), 3.0);
    EXPECT_DOUBLE_EQ(apply_equating(t, 1.5), 2.0);
    EXPECT_DOUBLE_EQ(apply_equating(t, -4.0), 0.5);
    EXPECT_DOUBLE_EQ(apply_equating(t, 9.0), 3.5);
    EXPECT_DOUBLE_EQ(apply_equating(t, 3.0), 3.5);
}

TEST(ApplyEquating, MapMatchesTableAtScorePoints) {
    const auto x = fixture::binomial(20, 0.4);
    const auto y = fixture::binomial(20, 0.6);
    const auto res = equate_gke(DesignInput{EgInput{x, y}}, GkePipelineConfig{});
    for (int s = 0; s <= 20; ++s) EXPECT_NEAR(apply_equating(res.map, s), apply_equating(res.table, s), 1e-12);
    EXPECT_NEAR(apply_equating(res.map, -3.0), res.table.rows.front().equated, 1e-12);
    EXPECT_TRUE(EquatingMap().is_identity());
    EXPECT_DOUBLE_EQ(EquatingMap()(7.25), 7.25);
}

TEST(Chain, SingleEgStepIdenticalFormsIsIdentity) {
    const auto d = fixture::dataset_from_dist(fixture::binomial(30, 0.5), 2000);
    ChainPlan plan;
    plan.steps = {{"B", "A", Design::Eg, {}, {}}};
    const auto res = equate_chain(plan, {{"A", d}, {"B", d}}, GkePipelineConfig{});
    for (std::size_t j = 0; j <= 30; ++j) EXPECT_NEAR(res.composed_tables.at("B").rows[j].equated, static_cast<double>(j), 1e-6);
    EXPECT_EQ(res.baseline_of.at("B"), "A");
}

TEST(Chain, TwoShiftsCompose) {
    const ScoreScale scale(0, 100);
    const double c = 3.0;
    const auto a = fixture::dataset_from_dist(discretized_gaussian(scale, 50, 10), 100000);
    const auto b = fixture::dataset_from_dist(discretized_gaussian(scale, 50 - c, 10), 100000);
    const auto cc = fixture::dataset_from_dist(discretized_gaussian(scale, 50 - 2 * c, 10), 100000);
    ChainPlan plan;
    plan.steps = {{"C", "B", Design::Eg, {}, {}}, {"B", "A", Design::Eg, {}, {}}};
    const auto res = equate_chain(plan, {{"A", a}, {"B", b}, {"C", cc}}, raw_config());
    EXPECT_EQ(res.order, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(res.baseline_of.at("C"), "A");
    for (int s = 30; s <= 60; ++s) EXPECT_NEAR(res.composed_tables.at("C").rows[static_cast<std::size_t>(s)].equated, s + 2 * c, 0.1);
}

TEST(Chain, Figure8Ordering) {
    const auto order = order_chain(figure8_plan());
    ASSERT_EQ(order.size(), 5u);
    EXPECT_EQ(order.back(), 0u);  // F2017 -> S2017 after every fall step
    std::set<std::size_t> before(order.begin(), order.end() - 1);
    EXPECT_EQ(before, (std::set<std::size_t>{1, 2, 3, 4}));
}

TEST(Chain, ValidationErrors) {
    ChainPlan cyc;
    cyc.steps = {{"A", "B", Design::Eg, {}, {}}, {"B", "C", Design::Eg, {}, {}}, {"C", "A", Design::Eg, {}, {}}};
    try {
        order_chain(cyc);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("cycle"), std::string::npos);
    }
    ChainPlan twice;
    twice.steps = {{"A", "B", Design::Eg, {}, {}}, {"A", "C", Design::Eg, {}, {}}};
    EXPECT_THROW(order_chain(twice), Error);
    ChainPlan eg_cov;
    eg_cov.steps = {{"A", "B", Design::Eg, {"g"}, {}}};
    EXPECT_THROW(order_chain(eg_cov), Error);
    ChainPlan nec_none;
    nec_none.steps = {{"A", "B", Design::Nec, {}, {}}};
    EXPECT_THROW(order_chain(nec_none), Error);
    ChainPlan ok;
    ok.steps = {{"A", "B", Design::Eg, {}, {}}};
    EXPECT_THROW(equate_chain(ok, {{"A", fixture::dataset_from_dist(fixture::binomial(5, 0.5), 100)}}, GkePipelineConfig{}), Error);
}

TEST(Chain, EquatedCovariateUsesComposedMap) {
    // NL forms: N2 is N1 shifted by +5. The EL step conditions on nl, which is
    // measured on N2 for E2, so it must be mapped back to N1's scale first.
    const Dataset base = covariate_data(20000, 0, 11);
    const Dataset shifted = covariate_data(20000, 5, 12);
    auto as_nl = [](const Dataset& d) {
        Dataset out;
        out.scale = ScoreScale(0, 100);
        for (const auto& r : d.records) out.records.push_back({static_cast<int>(r.covariates[1]), {}});
        return out;
    };
    ChainPlan plan;
    plan.steps = {{"E2", "E1", Design::Nec, {"g", "c"}, {"c"}}, {"N2", "N1", Design::Eg, {}, {}}};
    plan.covariate_forms = {{"E1", {{"c", "N1"}}}, {"E2", {{"c", "N2"}}}};
    const auto order = order_chain(plan);
    EXPECT_EQ(order, (std::vector<std::size_t>{1, 0}));
    const auto res = equate_chain(plan, {{"E1", base}, {"E2", shifted}, {"N1", as_nl(base)}, {"N2", as_nl(shifted)}},
                                  GkePipelineConfig{});
    EXPECT_EQ(res.steps[0].table.method, Method::SequentialGke);
    // Same persons' score model on both sides: after undoing the nl shift the EL map is near identity.
    for (int s = 20; s <= 40; ++s) EXPECT_NEAR(res.steps[0].table.rows[static_cast<std::size_t>(s)].equated, s, 0.6) << s;
    for (int v = 40; v <= 70; ++v) EXPECT_NEAR(res.composed.at("N2")(v), v - 5.0, 0.5);
}

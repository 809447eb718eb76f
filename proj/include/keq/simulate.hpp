#pragma once

// Monte-Carlo study of kernel equating under the NEC design with two binary
// covariates (school type C1, exam attempt C2) and one test-score covariate C3
// whose form may be easier in population Q.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "keq/core.hpp"
#include "keq/equate.hpp"
#include "keq/metrics.hpp"
#include "keq/parallel.hpp"

namespace keq {

enum class Relationship { Strong, Weak };

struct ScenarioSpec {
    int id = 0;  // 0 for custom scenarios
    Relationship relationship = Relationship::Strong;
    double c3_shift = 0.0;
    double y_slope = 1.0;
    double y_intercept = 0.0;
    double alpha = 1.0;
    double beta = 0.0;
    std::size_t n = 5000;

    bool has_y_transform() const { return y_slope != 1.0 || y_intercept != 0.0; }
    friend bool operator==(const ScenarioSpec&, const ScenarioSpec&) = default;
};

inline constexpr int kScenarioCount = 12;

inline ScenarioSpec scenario(int id) {
    using R = Relationship;
    struct Row {
        R rel;
        double shift, slope, intercept, alpha, beta;
        std::size_t n;
    };
    static constexpr std::array<Row, kScenarioCount> rows{{
        {R::Strong, 0, 1.0, 0, 1.0, 0, 5000},
        {R::Strong, 0, 1.0, 0, 1.0, 0, 50000},
        {R::Weak, 0, 1.0, 0, 0.5, 30, 5000},
        {R::Weak, 0, 1.0, 0, 0.5, 30, 50000},
        {R::Strong, 10, 1.0, 0, 1.0, 0, 5000},
        {R::Strong, 10, 1.0, 0, 1.0, 0, 50000},
        {R::Weak, 10, 1.0, 0, 0.5, 30, 5000},
        {R::Weak, 10, 1.0, 0, 0.5, 30, 50000},
        {R::Strong, 0, 0.9, 5, 1.0, 0, 5000},
        {R::Strong, 0, 0.9, 5, 1.0, 0, 50000},
        {R::Strong, 10, 0.9, 5, 1.0, 0, 5000},
        {R::Strong, 10, 0.9, 5, 1.0, 0, 50000},
    }};
    if (id < 1 || id > kScenarioCount) throw InputError("unknown scenario " + std::to_string(id));
    const Row& r = rows[static_cast<std::size_t>(id - 1)];
    return ScenarioSpec{id, r.rel, r.shift, r.slope, r.intercept, r.alpha, r.beta, r.n};
}

struct BinaryParams {
    double p1 = 0.5;
    double p2 = 0.5;
    double odds_ratio = 1.0;
};

struct GeneratorParams {
    BinaryParams binary_p{0.300, 0.800, 8.0};
    BinaryParams binary_q{0.050, 0.005, 3.0};
    double c3_mean = 30.0;
    double c3_sd = 17.0;
    double c3_load_c1 = 10.0;
    double c3_load_c2 = 25.0;
    int c3_min = 0;
    int c3_max = 100;
    double score_load_c1 = 20.0;
    double score_load_c2 = 5.0;
    double error_sd = 10.0;
    int score_min = 0;
    int score_max = 100;
    std::vector<double> c3_thresholds{50, 60, 70, 80, 100};
};

// P(C1 = 1, C2 = 1) for the given margins and odds ratio.
inline double solve_joint_from_or(double p1, double p2, double odds_ratio) {
    if (!(p1 > 0.0 && p1 < 1.0 && p2 > 0.0 && p2 < 1.0)) throw Error("binary margins must lie in (0, 1)");
    if (!(odds_ratio > 0.0) || !std::isfinite(odds_ratio)) throw Error("odds ratio must be positive");
    const double lo = std::max(0.0, p1 + p2 - 1.0);
    const double hi = std::min(p1, p2);
    if (odds_ratio == 1.0) return p1 * p2;
    // (or - 1) p^2 - (or (p1 + p2) + 1 - p1 - p2) p + or p1 p2 = 0
    const double a = odds_ratio - 1.0;
    const double b = -(odds_ratio * (p1 + p2) + 1.0 - p1 - p2);
    const double c = odds_ratio * p1 * p2;
    const double disc = b * b - 4.0 * a * c;
    if (disc < 0.0) throw Error("odds-ratio quadratic has no real root");
    const double q = -0.5 * (b + std::copysign(std::sqrt(disc), b));
    const std::array<double, 2> roots{q / a, c / q};
    const double slack = 1e-12;
    for (double r : roots) {
        if (r >= lo - slack && r <= hi + slack) return std::clamp(r, lo, hi);
    }
    throw Error("no odds-ratio root within the Frechet bounds");
}

// Draws (C1, C2) pairs from the 2x2 table implied by the margins and odds ratio.
inline std::vector<std::array<int, 2>> sample_binary_pair(const BinaryParams& bp, std::size_t n, Rng& rng) {
    const double p11 = solve_joint_from_or(bp.p1, bp.p2, bp.odds_ratio);
    const double p10 = bp.p1 - p11;
    const double p01 = bp.p2 - p11;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::array<int, 2>> out(n);
    for (auto& pair : out) {
        const double v = u(rng);
        if (v < p11) pair = {1, 1};
        else if (v < p11 + p10) pair = {1, 0};
        else if (v < p11 + p10 + p01) pair = {0, 1};
        else pair = {0, 0};
    }
    return out;
}

enum class Population { P, Q };

inline CovariateSpace simulation_covariates(const GeneratorParams& g) {
    return CovariateSpace({Variable{"C1", Categorical{{"0", "1"}}}, Variable{"C2", Categorical{{"0", "1"}}},
                           Variable{"C3", Binned{g.c3_thresholds}}});
}

inline double round_half_up(double x) { return std::floor(x + 0.5); }

// Score before truncation and rounding; `c3` is the latent covariate score
// (before any form shift).
inline double raw_score(int c1, int c2, double c3, const ScenarioSpec& sc, const GeneratorParams& g) {
    return g.score_load_c1 * c1 + g.score_load_c2 * c2 + sc.alpha * c3 + sc.beta;
}

inline int finalize_score(double raw, const ScenarioSpec& sc, Population pop, const GeneratorParams& g) {
    if (pop == Population::Q) raw = sc.y_slope * raw + sc.y_intercept;
    raw = std::clamp(raw, static_cast<double>(g.score_min), static_cast<double>(g.score_max));
    return static_cast<int>(round_half_up(raw));
}

// Persons of one population. C3 is generated on the common (latent) scale and
// drives the total score; the recorded C3 additionally carries the form shift
// in Q and is rounded to an integer covariate score within [c3_min, c3_max].
inline Dataset gen_population(Population pop, const ScenarioSpec& sc, const GeneratorParams& g, Rng& rng) {
    if (sc.n == 0) throw Error("scenario sample size must be positive");
    const BinaryParams& bp = pop == Population::P ? g.binary_p : g.binary_q;
    const auto pairs = sample_binary_pair(bp, sc.n, rng);
    std::normal_distribution<double> c3_noise(g.c3_mean, g.c3_sd);
    std::normal_distribution<double> eps(0.0, g.error_sd);
    const double shift = pop == Population::Q ? sc.c3_shift : 0.0;
    const double c3_lo = g.c3_min, c3_hi = g.c3_max;

    Dataset d;
    d.scale = ScoreScale(g.score_min, g.score_max);
    d.covariates = simulation_covariates(g);
    d.records.resize(sc.n);
    for (std::size_t i = 0; i < sc.n; ++i) {
        const auto [c1, c2] = pairs[i];
        const double latent = std::clamp(c3_noise(rng) + g.c3_load_c1 * c1 + g.c3_load_c2 * c2, c3_lo, c3_hi);
        const double observed = std::clamp(round_half_up(latent + shift), c3_lo, c3_hi);
        auto& r = d.records[i];
        r.score = finalize_score(raw_score(c1, c2, latent, sc, g) + eps(rng), sc, pop, g);
        r.covariates = {static_cast<double>(c1), static_cast<double>(c2), observed};
    }
    return d;
}

// True equating function on the score scale of X.
inline std::vector<double> true_equating(const ScenarioSpec& sc, const ScoreScale& scale) {
    std::vector<double> t(scale.size());
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = sc.y_slope * scale.point(j) + sc.y_intercept;
    return t;
}

inline std::string truth_description(const ScenarioSpec& sc) {
    if (!sc.has_y_transform()) return "identity";
    return "x -> " + std::to_string(sc.y_slope) + " * x + " + std::to_string(sc.y_intercept) +
           " (X score mapped to its Y' equivalent)";
}

struct SimulationOptions {
    std::vector<Method> methods{Method::Gke, Method::SequentialGke};
    GkePipelineConfig config;
    GeneratorParams params;
    unsigned threads = 1;
    double max_failure_fraction = 0.05;
};

struct ScenarioRun {
    MetricsReport report;
    // Per method, successful replications x score points (rows paired across methods).
    std::map<Method, ReplicateMatrix> replicates;
};

inline ScenarioRun run_scenario(const ScenarioSpec& sc, int replications, std::uint64_t seed,
                                const SimulationOptions& opt = {}) {
    if (replications < 2) throw Error("need at least two replications");
    if (opt.methods.empty()) throw Error("no equating methods requested");
    const auto R = static_cast<std::size_t>(replications);
    const ScoreScale scale(opt.params.score_min, opt.params.score_max);

    struct Outcome {
        std::map<Method, std::vector<double>> equated;
        std::map<Method, double> tvd;
        std::string error;
    };
    std::vector<Outcome> outcomes(R);
    const CovariateEquatingOptions cov_opt{.scale = ScoreScale(opt.params.c3_min, opt.params.c3_max)};

    parallel_for(R, opt.threads, [&](std::size_t r) {
        Rng rp = substream(seed, r, 0);
        Rng rq = substream(seed, r, 1);
        const Dataset p = gen_population(Population::P, sc, opt.params, rp);
        const Dataset q = gen_population(Population::Q, sc, opt.params, rq);
        Outcome& out = outcomes[r];
        try {
            const auto p_cond = conditional_distributions(p);
            for (Method m : opt.methods) {
                if (m == Method::Gke) {
                    out.equated[m] = equate_gke(p, q, opt.config).table.equated();
                    out.tvd[m] = tvd_common_groups(p_cond, conditional_distributions(q));
                } else if (m == Method::SequentialGke) {
                    auto res = equate_sequential(p, q, "C3", opt.config, cov_opt);
                    out.equated[m] = res.gke.table.equated();
                    out.tvd[m] = tvd_common_groups(p_cond, conditional_distributions(res.covariate.q_transformed));
                } else {
                    throw Error("simulation supports GKE and sequential GKE only");
                }
            }
        } catch (const Error& e) {
            out.error = e.what();
            out.equated.clear();
        }
    });

    ScenarioRun run;
    auto& rep = run.report;
    rep.scale = scale;
    rep.truth_description = truth_description(sc);
    rep.replications = R;
    std::vector<std::size_t> ok;
    std::string first_error;
    for (std::size_t r = 0; r < R; ++r) {
        if (outcomes[r].error.empty()) ok.push_back(r);
        else if (first_error.empty()) first_error = outcomes[r].error;
    }
    rep.failed_replications = R - ok.size();
    if (static_cast<double>(rep.failed_replications) > opt.max_failure_fraction * static_cast<double>(R) || ok.size() < 2) {
        throw Error("simulation: " + std::to_string(rep.failed_replications) + " of " + std::to_string(R) +
                    " replications failed; first: " + first_error);
    }
    const auto truth = true_equating(sc, scale);
    for (Method m : opt.methods) {
        ReplicateMatrix mat(static_cast<Eigen::Index>(ok.size()), static_cast<Eigen::Index>(scale.size()));
        double tvd_sum = 0.0;
        for (std::size_t i = 0; i < ok.size(); ++i) {
            const auto& v = outcomes[ok[i]].equated.at(m);
            for (std::size_t s = 0; s < v.size(); ++s) mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) = v[s];
            tvd_sum += outcomes[ok[i]].tvd.at(m);
        }
        rep.methods.push_back(summarize(m, mat, truth));
        rep.mean_tvd[m] = tvd_sum / static_cast<double>(ok.size());
        run.replicates.emplace(m, std::move(mat));
    }
    if (run.replicates.contains(Method::Gke) && run.replicates.contains(Method::SequentialGke)) {
        rep.ediff = ediff(run.replicates.at(Method::Gke), run.replicates.at(Method::SequentialGke));
    }
    return run;
}

// Mean |bias| over the middle `fraction` of the score scale.
inline double mean_abs_bias_middle(const MethodMetrics& m, double fraction = 0.8) {
    const std::size_t S = m.bias.size();
    const auto skip = static_cast<std::size_t>(std::floor(0.5 * (1.0 - fraction) * static_cast<double>(S)));
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t s = skip; s + skip < S; ++s, ++n) sum += std::abs(m.bias[s]);
    return sum / static_cast<double>(n);
}

}  // namespace keq

#pragma once

// Equating pipelines: kernel equating under EG and NEC, sequential kernel
// equating (equate a form-dependent covariate first, then the scores), and
// chains of equating steps onto a baseline form.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "keq/continuize.hpp"
#include "keq/core.hpp"
#include "keq/presmooth.hpp"
#include "keq/probmix.hpp"

namespace keq {

struct GkePipelineConfig {
    // nullopt means raw empirical tables (no presmoothing).
    std::optional<LoglinearSpec> presmooth = LoglinearSpec{};
    FitOptions fit;
    bool require_convergence = true;
    BandwidthOptions bandwidth;
    // Weight of P in the target population; defaults to n_P / (n_P + n_Q).
    std::optional<double> omega;
    std::optional<double> h_x;
    std::optional<double> h_y;
};

// Composition of kernel equating functions G^-1(F(x)). Each stage clamps its
// input to the stage's source scale. An empty map is the identity.
class EquatingMap {
public:
    struct Stage {
        ContinuizedCdf from;
        ContinuizedCdf to;
    };

    EquatingMap() = default;
    EquatingMap(ContinuizedCdf from, ContinuizedCdf to) { stages_.push_back({std::move(from), std::move(to)}); }

    bool is_identity() const { return stages_.empty(); }
    const std::vector<Stage>& stages() const { return stages_; }

    // This map followed by `next`.
    EquatingMap then(const EquatingMap& next) const {
        EquatingMap out = *this;
        out.stages_.insert(out.stages_.end(), next.stages_.begin(), next.stages_.end());
        return out;
    }

    double operator()(double x) const {
        if (!std::isfinite(x)) throw Error("cannot equate a non-finite value");
        for (const auto& s : stages_) x = evaluate(s, x);
        return x;
    }

private:
    static double evaluate(const Stage& s, double x) {
        const auto& sc = s.from.dist().scale();
        x = std::clamp(x, static_cast<double>(sc.min()), static_cast<double>(sc.max()));
        // Work in whichever tail keeps the probability away from rounding to 0 or 1.
        const double p = s.from.cdf(x);
        if (p <= 0.5) {
            if (!(p > 0.0)) throw Error("equated value beyond numerical range");
            return inverse_cdf(s.to, p);
        }
        const double q = s.from.sf(x);
        if (!(q > 0.0)) throw Error("equated value beyond numerical range");
        return inverse_sf(s.to, q);
    }

    std::vector<Stage> stages_;
};

inline double apply_equating(const EquatingMap& map, double value) { return map(value); }

// Piecewise-linear interpolation between tabulated score points, clamped at the ends.
inline double apply_equating(const EquatingTable& table, double value) {
    if (table.rows.empty()) throw Error("empty equating table");
    const double lo = table.source_scale.min();
    const double hi = table.source_scale.max();
    if (!(value > lo)) return table.rows.front().equated;
    if (!(value < hi)) return table.rows.back().equated;
    const double pos = value - lo;
    const auto j = static_cast<std::size_t>(std::floor(pos));
    const double w = pos - static_cast<double>(j);
    if (w == 0.0) return table.rows[j].equated;
    return (1.0 - w) * table.rows[j].equated + w * table.rows[j + 1].equated;
}

struct GkeResult {
    EquatingTable table;
    EquatingMap map;
    TargetProbs probs;
    double h_x = 0.0;
    double h_y = 0.0;
    std::vector<FittedLoglinear> fits;
};

namespace detail {

inline EquatingTable tabulate_map(const EquatingMap& map, const ScoreScale& scale, Method method) {
    EquatingTable t;
    t.source_scale = scale;
    t.method = method;
    t.rows.resize(scale.size());
    for (std::size_t j = 0; j < scale.size(); ++j) t.rows[j].equated = map(scale.point(j));
    // Flatten root-finding noise in saturated tails; real decreases still fail.
    for (std::size_t j = 1; j < t.rows.size(); ++j) {
        auto& cur = t.rows[j].equated;
        const double prev = t.rows[j - 1].equated;
        if (cur < prev && prev - cur < 1e-9 * (1.0 + std::abs(prev))) cur = prev;
    }
    t.check_monotone();
    return t;
}

inline JointProbabilityTable smooth_or_raw(const Dataset& data, const GkePipelineConfig& cfg,
                                           std::vector<FittedLoglinear>& fits) {
    if (!cfg.presmooth) return tabulate(data);
    auto res = presmooth(data, *cfg.presmooth, cfg.fit);
    if (!res.fit.converged && cfg.require_convergence) throw Error(res.fit.warning);
    fits.push_back(std::move(res.fit));
    return std::move(res.table);
}

}  // namespace detail

// Steps 2-4 on already (pre)smoothed input.
inline GkeResult equate_gke(const DesignInput& input, const GkePipelineConfig& cfg) {
    GkeResult out;
    out.probs = target_probs(input);
    out.h_x = cfg.h_x ? *cfg.h_x : select_bandwidth(out.probs.r, cfg.bandwidth);
    out.h_y = cfg.h_y ? *cfg.h_y : select_bandwidth(out.probs.s, cfg.bandwidth);
    ContinuizedCdf F(out.probs.r, out.h_x);
    ContinuizedCdf G(out.probs.s, out.h_y);
    out.map = EquatingMap(std::move(F), std::move(G));
    const Method m = std::holds_alternative<EgInput>(input) ? Method::Eg : Method::Gke;
    out.table = detail::tabulate_map(out.map, out.probs.r.scale(), m);
    return out;
}

inline double default_omega(const Dataset& p, const Dataset& q, const GkePipelineConfig& cfg) {
    return cfg.omega ? TargetMixture(*cfg.omega).omega()
                     : TargetMixture::from_sample_sizes(p.size(), q.size()).omega();
}

// Full pipeline from person-level data. Without covariates this is the EG
// design; otherwise NEC with the datasets' shared covariate space.
inline GkeResult equate_gke(const Dataset& p, const Dataset& q, const GkePipelineConfig& cfg) {
    if (!(p.covariates == q.covariates)) throw Error("P and Q datasets must share the covariate space");
    std::vector<FittedLoglinear> fits;
    JointProbabilityTable pt = detail::smooth_or_raw(p, cfg, fits);
    JointProbabilityTable qt = detail::smooth_or_raw(q, cfg, fits);
    GkeResult res;
    if (p.covariates.variable_count() == 0) {
        res = equate_gke(DesignInput{EgInput{pt.score_marginal(), qt.score_marginal()}}, cfg);
    } else {
        res = equate_gke(DesignInput{NecInput{std::move(pt), std::move(qt), TargetMixture(default_omega(p, q, cfg))}}, cfg);
    }
    res.fits = std::move(fits);
    return res;
}

struct CovariateEquating {
    std::string covariate;
    // Maps covariate values measured in Q onto P's covariate scale.
    EquatingMap phi;
    Dataset q_transformed;
    std::optional<GkeResult> detail;
};

struct CovariateEquatingOptions {
    // Scale of the covariate when it plays the score role; defaults to the
    // observed range across both datasets.
    std::optional<ScoreScale> scale;
    // Skip the covariate equating and use the identity map.
    bool force_identity = false;
};

namespace detail {

inline Dataset covariate_as_score(const Dataset& data, std::size_t cov, std::span<const std::string> others,
                                  const ScoreScale& scale) {
    Dataset sub = select_covariates(data, others);
    sub.scale = scale;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        const double v = data.records[i].covariates[cov];
        if (!std::isfinite(v) || v != std::round(v)) {
            throw Error("covariate '" + data.covariates.variables()[cov].name + "' is not integer-valued (record " +
                        std::to_string(i) + ")");
        }
        sub.records[i].score = static_cast<int>(v);
    }
    sub.validate();
    return sub;
}

}  // namespace detail

inline CovariateEquating equate_covariate(const Dataset& p, const Dataset& q, const std::string& covariate,
                                          const std::vector<std::string>& others, const GkePipelineConfig& cfg,
                                          const CovariateEquatingOptions& opt = {}) {
    if (!(p.covariates == q.covariates)) throw Error("P and Q datasets must share the covariate space");
    const std::size_t cov = p.covariates.index(covariate);
    for (const auto& o : others) {
        if (o == covariate) throw Error("equated covariate cannot also condition its own equating");
        (void)p.covariates.index(o);
    }

    CovariateEquating out;
    out.covariate = covariate;
    out.q_transformed = q;
    if (opt.force_identity) return out;

    ScoreScale scale;
    if (opt.scale) {
        scale = *opt.scale;
    } else {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const auto* d : {&p, &q})
            for (const auto& r : d->records) {
                lo = std::min(lo, r.covariates[cov]);
                hi = std::max(hi, r.covariates[cov]);
            }
        if (!std::isfinite(lo)) throw Error("no records");
        scale = ScoreScale(static_cast<int>(std::floor(lo)), static_cast<int>(std::ceil(hi)));
    }
    const Dataset pc = detail::covariate_as_score(p, cov, others, scale);
    const Dataset qc = detail::covariate_as_score(q, cov, others, scale);

    // Q's covariate is the source form, P's the target; the target
    // population weight of the source population is therefore 1 - omega.
    GkePipelineConfig sub = cfg;
    sub.omega = 1.0 - default_omega(p, q, cfg);
    sub.h_x.reset();
    sub.h_y.reset();
    GkeResult res = equate_gke(qc, pc, sub);
    out.phi = res.map;

    std::map<double, double> cache;
    for (auto& r : out.q_transformed.records) {
        double& v = r.covariates[cov];
        auto it = cache.find(v);
        if (it == cache.end()) it = cache.emplace(v, out.phi(v)).first;
        v = it->second;
    }
    out.detail = std::move(res);
    return out;
}

struct SequentialResult {
    GkeResult gke;
    CovariateEquating covariate;
};

inline SequentialResult equate_sequential(const Dataset& p, const Dataset& q, const std::string& covariate,
                                          const GkePipelineConfig& cfg, const CovariateEquatingOptions& opt = {}) {
    const auto& var = p.covariates.variables().at(p.covariates.index(covariate));
    if (!var.is_binned()) throw Error("covariate '" + covariate + "' must be binned to be equated");
    std::vector<std::string> others;
    for (const auto& v : p.covariates.variables())
        if (v.name != covariate) others.push_back(v.name);

    CovariateEquating ce = equate_covariate(p, q, covariate, others, cfg, opt);
    // Transformed values are re-binned with P's thresholds when Q* is tabulated.
    GkeResult res = equate_gke(p, ce.q_transformed, cfg);
    res.table.method = Method::SequentialGke;
    return {std::move(res), std::move(ce)};
}

// ---------------------------------------------------------------------------
// Chains

enum class Design { Eg, Nec };

struct ChainStep {
    std::string source;
    std::string target;
    Design design = Design::Eg;
    std::vector<std::string> covariates;
    // Covariate columns replaced by their composed equated values before
    // tabulation; the form each column was measured on comes from
    // ChainPlan::covariate_forms.
    std::vector<std::string> equated_covariates;
};

struct ChainPlan {
    std::vector<ChainStep> steps;
    // form id -> (covariate column -> form id that column was measured with)
    std::map<std::string, std::map<std::string, std::string>> covariate_forms;
};

struct ChainResult {
    std::vector<std::size_t> order;
    std::vector<GkeResult> steps;  // indexed like plan.steps
    std::map<std::string, EquatingMap> composed;
    std::map<std::string, std::string> baseline_of;
    std::map<std::string, EquatingTable> composed_tables;
};

namespace detail {

inline std::optional<std::size_t> outgoing_step(const ChainPlan& plan, const std::string& form) {
    for (std::size_t i = 0; i < plan.steps.size(); ++i)
        if (plan.steps[i].source == form) return i;
    return std::nullopt;
}

// Steps on the path from `form` to its baseline.
inline std::vector<std::size_t> path_to_baseline(const ChainPlan& plan, const std::string& form) {
    std::vector<std::size_t> path;
    std::set<std::string> seen{form};
    std::string cur = form;
    while (auto s = outgoing_step(plan, cur)) {
        path.push_back(*s);
        cur = plan.steps[*s].target;
        if (!seen.insert(cur).second) throw Error("cycle in plan through form '" + cur + "'");
    }
    return path;
}

inline const std::string& covariate_form(const ChainPlan& plan, const std::string& form, const std::string& column) {
    auto f = plan.covariate_forms.find(form);
    if (f == plan.covariate_forms.end() || !f->second.contains(column)) {
        throw Error("plan does not say which form measured covariate '" + column + "' of '" + form + "'");
    }
    return f->second.at(column);
}

}  // namespace detail

// Validates the plan and returns a topological execution order (stable with
// respect to declaration order).
inline std::vector<std::size_t> order_chain(const ChainPlan& plan) {
    const std::size_t n = plan.steps.size();
    std::set<std::string> sources;
    for (const auto& s : plan.steps) {
        if (s.source == s.target) throw Error("step equates form '" + s.source + "' to itself");
        if (!sources.insert(s.source).second) throw Error("form '" + s.source + "' is the source of more than one step");
        if (s.design == Design::Eg && !s.covariates.empty()) throw Error("EG step cannot use covariates");
        if (s.design == Design::Nec && s.covariates.empty()) throw Error("NEC step needs covariates");
        for (const auto& e : s.equated_covariates)
            if (std::find(s.covariates.begin(), s.covariates.end(), e) == s.covariates.end())
                throw Error("equated covariate '" + e + "' is not among the step's covariates");
    }
    std::vector<std::set<std::size_t>> deps(n);
    for (std::size_t a = 0; a < n; ++a) {
        const auto& sa = plan.steps[a];
        for (std::size_t b = 0; b < n; ++b)
            if (plan.steps[b].target == sa.source) deps[a].insert(b);
        for (const auto& col : sa.equated_covariates) {
            for (const auto* form : {&sa.source, &sa.target}) {
                const auto& cf = detail::covariate_form(plan, *form, col);
                std::string cur = cf;
                std::set<std::string> seen{cur};
                while (auto s = detail::outgoing_step(plan, cur)) {
                    deps[a].insert(*s);
                    cur = plan.steps[*s].target;
                    if (!seen.insert(cur).second) break;
                }
            }
        }
    }
    std::vector<std::size_t> order;
    std::vector<bool> done(n, false);
    while (order.size() < n) {
        bool progressed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (done[i]) continue;
            bool ready = std::all_of(deps[i].begin(), deps[i].end(), [&](std::size_t d) { return done[d]; });
            if (ready) {
                order.push_back(i);
                done[i] = true;
                progressed = true;
                break;
            }
        }
        if (!progressed) {
            std::string msg = "cycle in plan among steps:";
            for (std::size_t i = 0; i < n; ++i)
                if (!done[i]) msg += " " + plan.steps[i].source + "->" + plan.steps[i].target;
            throw Error(msg);
        }
    }
    return order;
}

inline ChainResult equate_chain(const ChainPlan& plan, const std::map<std::string, Dataset>& datasets,
                                const GkePipelineConfig& cfg) {
    ChainResult out;
    out.order = order_chain(plan);
    auto data_of = [&](const std::string& form) -> const Dataset& {
        auto it = datasets.find(form);
        if (it == datasets.end()) throw Error("missing dataset for form '" + form + "'");
        return it->second;
    };
    for (const auto& s : plan.steps) {
        (void)data_of(s.source);
        (void)data_of(s.target);
    }

    std::vector<std::optional<GkeResult>> results(plan.steps.size());
    auto composed_map = [&](const std::string& form) {
        EquatingMap m;
        for (auto s : detail::path_to_baseline(plan, form)) {
            if (!results[s]) throw Error("internal: step used before it ran");
            m = m.then(results[s]->map);
        }
        return m;
    };

    for (auto idx : out.order) {
        const auto& step = plan.steps[idx];
        auto prepare = [&](const std::string& form) {
            Dataset d = select_covariates(data_of(form), step.covariates);
            for (const auto& col : step.equated_covariates) {
                const EquatingMap m = composed_map(detail::covariate_form(plan, form, col));
                const auto ci = d.covariates.index(col);
                std::map<double, double> cache;
                for (auto& r : d.records) {
                    double& v = r.covariates[ci];
                    auto it = cache.find(v);
                    if (it == cache.end()) it = cache.emplace(v, m(v)).first;
                    v = it->second;
                }
            }
            return d;
        };
        const Dataset src = prepare(step.source);
        const Dataset tgt = prepare(step.target);
        results[idx] = equate_gke(src, tgt, cfg);
        if (step.design == Design::Nec && !step.equated_covariates.empty()) {
            results[idx]->table.method = Method::SequentialGke;
        }
    }

    for (auto& r : results) out.steps.push_back(std::move(*r));
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        const auto& form = plan.steps[i].source;
        const auto path = detail::path_to_baseline(plan, form);
        EquatingMap m;
        for (auto s : path) m = m.then(out.steps[s].map);
        out.baseline_of[form] = plan.steps[path.back()].target;
        out.composed_tables[form] = detail::tabulate_map(m, data_of(form).scale, out.steps[i].table.method);
        out.composed[form] = std::move(m);
    }
    return out;
}

}  // namespace keq

#pragma once

// Target-population score probabilities r and s for the equivalent-groups
// (EG) and nonequivalent-groups-with-covariates (NEC) designs.
//
// Under NEC, the score distribution of X given a covariate cell is assumed to
// be the same in P and Q (and likewise for Y). That identifies the unobserved
// X-in-Q and Y-in-P margins by reweighting the observed conditionals with the
// other population's cell distribution.

#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "keq/core.hpp"

namespace keq {

struct TargetProbs {
    ScoreDistribution r;
    ScoreDistribution s;
};

struct EgInput {
    ScoreDistribution x_dist;
    ScoreDistribution y_dist;
};

struct NecInput {
    JointProbabilityTable p;
    JointProbabilityTable q;
    TargetMixture omega{0.5};
};

using DesignInput = std::variant<EgInput, NecInput>;

inline TargetProbs eg_probs(const ScoreDistribution& x_dist, const ScoreDistribution& y_dist) {
    return {x_dist, y_dist};
}

namespace detail {

// sum_l w_l * table(., l)
inline ScoreDistribution reweight(const JointProbabilityTable& t, const std::vector<double>& w) {
    const auto& m = t.probs();
    std::vector<double> out(static_cast<std::size_t>(m.rows()), 0.0);
    for (Eigen::Index l = 0; l < m.cols(); ++l) {
        const double wl = w[static_cast<std::size_t>(l)];
        if (wl == 0.0) continue;
        for (Eigen::Index j = 0; j < m.rows(); ++j) out[static_cast<std::size_t>(j)] += wl * m(j, l);
    }
    return ScoreDistribution(t.scale(), std::move(out));
}

}  // namespace detail

inline TargetProbs nec_target_probs(const JointProbabilityTable& p, const JointProbabilityTable& q, double omega) {
    if (!(omega >= 0.0 && omega <= 1.0)) throw Error("mixture weight omega must lie in [0, 1]");
    if (!(p.covariates() == q.covariates())) throw Error("P and Q tables must share the covariate space");
    const auto tp = p.cell_marginal();
    const auto tq = q.cell_marginal();
    std::vector<double> wr(tp.size(), 0.0);
    std::vector<double> ws(tp.size(), 0.0);
    for (std::size_t l = 0; l < tp.size(); ++l) {
        const bool has_p = tp[l] > 0.0;
        const bool has_q = tq[l] > 0.0;
        if (has_p != has_q) {
            throw Error("covariate cell " + std::to_string(l + 1) +
                        " unsupported in one population; use coarser covariate categories");
        }
        if (!has_p) continue;
        wr[l] = omega + (1.0 - omega) * tq[l] / tp[l];
        ws[l] = (1.0 - omega) + omega * tp[l] / tq[l];
    }
    return {detail::reweight(p, wr), detail::reweight(q, ws)};
}

inline TargetProbs target_probs(const DesignInput& input) {
    if (const auto* eg = std::get_if<EgInput>(&input)) return eg_probs(eg->x_dist, eg->y_dist);
    const auto& nec = std::get<NecInput>(input);
    return nec_target_probs(nec.p, nec.q, nec.omega.omega());
}

}  // namespace keq

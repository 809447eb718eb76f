#pragma once

// Polynomial log-linear (Poisson) presmoothing of joint score x covariate
// frequency tables, fitted by iteratively reweighted least squares.

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "keq/core.hpp"

namespace keq {

// How covariate terms enter the model: one indicator per covariate cell
// (L - 1 columns), or additive indicators per covariate variable (levels - 1
// columns per variable).
enum class CovariateCoding { Cells, Variables };

struct LoglinearSpec {
    int score_degree = 6;
    bool covariate_main_effects = true;
    int interaction_degree = 1;
    CovariateCoding coding = CovariateCoding::Cells;

    void validate() const {
        if (score_degree < 1) throw Error("log-linear score degree must be at least 1");
        if (interaction_degree < 0 || interaction_degree > score_degree) {
            throw Error("log-linear interaction degree must lie in [0, score degree]");
        }
    }
};

struct FitOptions {
    double tol = 1e-8;
    int max_iter = 100;
    // Off only for tests that need the saturated model.
    bool enforce_identifiable = true;
};

struct FittedLoglinear {
    LoglinearSpec spec;
    Eigen::VectorXd coefficients;
    Eigen::MatrixXd fitted_counts;  // J x L
    bool converged = false;
    int iterations = 0;
    double deviance = 0.0;
    double max_score_residual = 0.0;
    std::string warning;
};

namespace detail {

// Indicator columns for each covariate cell under the chosen coding.
inline Eigen::MatrixXd covariate_indicators(const CovariateSpace& covariates, CovariateCoding coding) {
    const auto L = static_cast<Eigen::Index>(covariates.cell_count());
    if (L <= 1) return Eigen::MatrixXd(L, 0);
    if (coding == CovariateCoding::Cells) {
        Eigen::MatrixXd D = Eigen::MatrixXd::Zero(L, L - 1);
        for (Eigen::Index l = 1; l < L; ++l) D(l, l - 1) = 1.0;
        return D;
    }
    Eigen::Index width = 0;
    for (const auto& v : covariates.variables()) width += static_cast<Eigen::Index>(v.level_count()) - 1;
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(L, width);
    for (Eigen::Index l = 0; l < L; ++l) {
        const auto levels = covariates.levels_of(static_cast<std::size_t>(l));
        Eigen::Index col = 0;
        for (std::size_t v = 0; v < levels.size(); ++v) {
            if (levels[v] > 0) D(l, col + static_cast<Eigen::Index>(levels[v]) - 1) = 1.0;
            col += static_cast<Eigen::Index>(covariates.variables()[v].level_count()) - 1;
        }
    }
    return D;
}

}  // namespace detail

// Rows are cells (j, l) in score-major order: row = j * L + l. Columns:
// intercept, standardized score powers 1..degree, covariate indicators, and
// score powers 1..interaction_degree times each indicator.
inline Eigen::MatrixXd build_design_matrix(const ScoreScale& scale, const CovariateSpace& covariates,
                                           const LoglinearSpec& spec, bool enforce_identifiable = true) {
    spec.validate();
    const auto J = static_cast<Eigen::Index>(scale.size());
    const auto L = static_cast<Eigen::Index>(covariates.cell_count());
    const Eigen::MatrixXd D = detail::covariate_indicators(covariates, spec.coding);
    const Eigen::Index k = D.cols();
    const Eigen::Index n_main = spec.covariate_main_effects ? k : 0;
    const Eigen::Index m = 1 + spec.score_degree + n_main + spec.interaction_degree * k;
    if (enforce_identifiable && m >= J * L) throw Error("model not identifiable");

    // Standardized score points keep high powers well conditioned.
    const auto pts = scale.points();
    double mean = 0.0;
    for (double x : pts) mean += x;
    mean /= static_cast<double>(pts.size());
    double var = 0.0;
    for (double x : pts) var += (x - mean) * (x - mean);
    var /= static_cast<double>(pts.size());
    const double sd = var > 0.0 ? std::sqrt(var) : 1.0;

    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(J * L, m);
    for (Eigen::Index j = 0; j < J; ++j) {
        const double z = (pts[static_cast<std::size_t>(j)] - mean) / sd;
        for (Eigen::Index l = 0; l < L; ++l) {
            const Eigen::Index row = j * L + l;
            Eigen::Index col = 0;
            X(row, col++) = 1.0;
            double zp = 1.0;
            for (int d = 1; d <= spec.score_degree; ++d) {
                zp *= z;
                X(row, col++) = zp;
            }
            if (spec.covariate_main_effects) {
                X.block(row, col, 1, k) = D.row(l);
                col += k;
            }
            zp = 1.0;
            for (int d = 1; d <= spec.interaction_degree; ++d) {
                zp *= z;
                X.block(row, col, 1, k) = zp * D.row(l);
                col += k;
            }
        }
    }
    return X;
}

namespace detail {

inline double poisson_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu) {
    double d = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double yi = y[i];
        d += (yi > 0.0 ? yi * std::log(yi / mu[i]) : 0.0) - (yi - mu[i]);
    }
    return 2.0 * d;
}

inline Eigen::VectorXd solve_weighted(const Eigen::MatrixXd& X, const Eigen::VectorXd& w, const Eigen::VectorXd& rhs) {
    // Normal equations first; a rank-revealing QR decides genuine singularity.
    Eigen::MatrixXd xtwx = X.transpose() * w.asDiagonal() * X;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(xtwx);
    const Eigen::VectorXd d = ldlt.vectorD();
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() && d.minCoeff() > 1e-13 * d.cwiseAbs().maxCoeff()) {
        Eigen::VectorXd step = ldlt.solve(rhs);
        if (step.allFinite() && (xtwx * step - rhs).norm() <= 1e-6 * (1.0 + rhs.norm())) return step;
    }
    Eigen::MatrixXd sx = w.cwiseSqrt().asDiagonal() * X;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sx);
    if (qr.rank() < X.cols()) throw Error("separation or collinearity");
    return xtwx.colPivHouseholderQr().solve(rhs);
}

}  // namespace detail

// Poisson log-linear MLE of `counts` (J x L) on `design` ((J*L) x m).
inline FittedLoglinear fit_loglinear(const Eigen::MatrixXd& counts, const Eigen::MatrixXd& design,
                                     const LoglinearSpec& spec, const FitOptions& opts = {}) {
    const Eigen::Index J = counts.rows();
    const Eigen::Index L = counts.cols();
    if (design.rows() != J * L) throw Error("design matrix rows do not match the count table");
    if ((counts.array() < 0.0).any() || !counts.allFinite()) throw Error("counts must be finite and nonnegative");
    const double N = counts.sum();
    if (!(N > 0.0)) throw Error("all-zero count table");
    if (opts.tol <= 0.0 || opts.max_iter < 1) throw Error("invalid fit options");

    Eigen::VectorXd y(J * L);
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index l = 0; l < L; ++l) y[j * L + l] = counts(j, l);

    // Standard GLM start: one weighted least-squares pass on log(y + 0.1).
    Eigen::VectorXd mu = (y.array() + 0.1).matrix();
    Eigen::VectorXd eta = mu.array().log().matrix();
    Eigen::VectorXd z = eta + ((y - mu).array() / mu.array()).matrix();
    Eigen::VectorXd beta = detail::solve_weighted(design, mu, design.transpose() * (mu.asDiagonal() * z));
    eta = design * beta;
    mu = eta.array().exp().matrix();
    double dev = detail::poisson_deviance(y, mu);

    FittedLoglinear fit;
    fit.spec = spec;
    const double limit = opts.tol * N;
    int iter = 0;
    double score_max = (design.transpose() * (y - mu)).cwiseAbs().maxCoeff();
    while (score_max > limit && iter < opts.max_iter) {
        ++iter;
        const Eigen::VectorXd score = design.transpose() * (y - mu);
        const Eigen::VectorXd step = detail::solve_weighted(design, mu, score);
        double scale = 1.0;
        Eigen::VectorXd beta_new, mu_new;
        double dev_new = std::numeric_limits<double>::infinity();
        for (int halving = 0; halving < 30; ++halving) {
            beta_new = beta + scale * step;
            Eigen::VectorXd eta_new = design * beta_new;
            if (eta_new.allFinite() && eta_new.maxCoeff() < 700.0) {
                mu_new = eta_new.array().exp().matrix();
                dev_new = detail::poisson_deviance(y, mu_new);
                if (dev_new <= dev * (1.0 + 1e-12) + 1e-12) break;
            }
            scale *= 0.5;
        }
        if (!std::isfinite(dev_new)) throw Error("log-linear fit diverged");
        beta = std::move(beta_new);
        mu = std::move(mu_new);
        dev = dev_new;
        score_max = (design.transpose() * (y - mu)).cwiseAbs().maxCoeff();
    }

    fit.coefficients = beta;
    fit.iterations = iter;
    fit.deviance = std::max(dev, 0.0);
    fit.max_score_residual = score_max;
    fit.converged = score_max <= limit;
    if (!fit.converged) {
        fit.warning = "log-linear fit did not converge after " + std::to_string(iter) +
                      " iterations (max score residual " + std::to_string(score_max) + ")";
    }
    fit.fitted_counts.resize(J, L);
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index l = 0; l < L; ++l) fit.fitted_counts(j, l) = mu[j * L + l];
    return fit;
}

struct PresmoothResult {
    JointProbabilityTable table;
    FittedLoglinear fit;
};

// Fits `spec` to the dataset's count table and returns smoothed probabilities.
inline PresmoothResult presmooth(const Dataset& data, const LoglinearSpec& spec, const FitOptions& opts = {}) {
    const Eigen::MatrixXd counts = tabulate_counts(data);
    const Eigen::MatrixXd design = build_design_matrix(data.scale, data.covariates, spec, opts.enforce_identifiable);
    FittedLoglinear fit = fit_loglinear(counts, design, spec, opts);
    Eigen::MatrixXd probs = fit.fitted_counts / fit.fitted_counts.sum();
    return {JointProbabilityTable(data.scale, data.covariates, std::move(probs)), std::move(fit)};
}

}  // namespace keq

#pragma once

// Accuracy and agreement measures for equating results evaluated over
// replications: bias, Monte-Carlo standard error, RMSE, equating difference
// (EDIFF) with the difference-that-matters threshold, and total variation
// distance between conditional score distributions.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "keq/core.hpp"

namespace keq {

inline constexpr double kDifferenceThatMatters = 1.0;

// Replications x score points.
using ReplicateMatrix = Eigen::MatrixXd;

inline std::vector<double> bias(const ReplicateMatrix& reps, const std::vector<double>& truth) {
    if (reps.rows() < 1) throw Error("bias needs at least one replication");
    if (static_cast<std::size_t>(reps.cols()) != truth.size()) throw Error("bias: dimension mismatch");
    std::vector<double> out(truth.size());
    for (Eigen::Index s = 0; s < reps.cols(); ++s) {
        double sum = 0.0;
        for (Eigen::Index r = 0; r < reps.rows(); ++r) sum += reps(r, s) - truth[static_cast<std::size_t>(s)];
        out[static_cast<std::size_t>(s)] = sum / static_cast<double>(reps.rows());
    }
    return out;
}

// Sample standard deviation (divisor n - 1) via Welford updates, so identical
// values give exactly zero.
inline double sample_sd(const double* v, Eigen::Index n, Eigen::Index stride = 1) {
    double mean = 0.0;
    double m2 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = v[i * stride];
        const double delta = x - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (x - mean);
    }
    return std::sqrt(std::max(m2, 0.0) / static_cast<double>(n - 1));
}

inline std::vector<double> mc_see(const ReplicateMatrix& reps) {
    if (reps.rows() < 2) throw Error("SEE needs at least two replications");
    std::vector<double> out(static_cast<std::size_t>(reps.cols()));
    for (Eigen::Index s = 0; s < reps.cols(); ++s) {
        Eigen::VectorXd col = reps.col(s);
        out[static_cast<std::size_t>(s)] = sample_sd(col.data(), col.size());
    }
    return out;
}

inline std::vector<double> rmse(const std::vector<double>& bias, const std::vector<double>& see) {
    if (bias.size() != see.size()) throw Error("rmse: length mismatch");
    std::vector<double> out(bias.size());
    for (std::size_t i = 0; i < bias.size(); ++i) out[i] = std::sqrt(bias[i] * bias[i] + see[i] * see[i]);
    return out;
}

struct EdiffResult {
    std::vector<double> per_point;
    double mean = 0.0;
    double dtm_exceed_fraction = 0.0;
};

// Paired replications: row r of both matrices must come from the same data.
inline EdiffResult ediff(const ReplicateMatrix& a, const ReplicateMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("ediff: dimension mismatch");
    if (a.rows() < 1 || a.cols() < 1) throw Error("ediff: empty replicate matrix");
    EdiffResult out;
    out.per_point.resize(static_cast<std::size_t>(a.cols()));
    std::size_t exceed = 0;
    for (Eigen::Index s = 0; s < a.cols(); ++s) {
        const double e = (a.col(s) - b.col(s)).cwiseAbs().mean();
        out.per_point[static_cast<std::size_t>(s)] = e;
        out.mean += e;
        if (e > kDifferenceThatMatters) ++exceed;
    }
    out.mean /= static_cast<double>(a.cols());
    out.dtm_exceed_fraction = static_cast<double>(exceed) / static_cast<double>(a.cols());
    return out;
}

// Conditional score distributions keyed by covariate group.
using GroupedDistributions = std::map<std::string, std::vector<double>>;

inline double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error("tvd: scale mismatch");
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
    return 0.5 * d;
}

// Unweighted mean over groups of the per-group total variation distance.
inline double tvd(const GroupedDistributions& a, const GroupedDistributions& b) {
    if (a.size() != b.size() || a.empty()) throw Error("tvd: group mismatch");
    double sum = 0.0;
    for (const auto& [g, dist] : a) {
        auto it = b.find(g);
        if (it == b.end()) throw Error("tvd: group '" + g + "' missing from second argument");
        sum += total_variation(dist, it->second);
    }
    return sum / static_cast<double>(a.size());
}

// Conditional score distributions of a dataset within each covariate cell
// that has at least one person. Keys are the cell indices.
inline GroupedDistributions conditional_distributions(const Dataset& data) {
    const Eigen::MatrixXd counts = tabulate_counts(data);
    GroupedDistributions out;
    for (Eigen::Index l = 0; l < counts.cols(); ++l) {
        const double n = counts.col(l).sum();
        if (n <= 0.0) continue;
        std::vector<double> d(static_cast<std::size_t>(counts.rows()));
        for (Eigen::Index j = 0; j < counts.rows(); ++j) d[static_cast<std::size_t>(j)] = counts(j, l) / n;
        out.emplace(std::to_string(l), std::move(d));
    }
    return out;
}

// tvd restricted to groups present in both.
inline double tvd_common_groups(const GroupedDistributions& a, const GroupedDistributions& b) {
    GroupedDistributions aa, bb;
    for (const auto& [g, d] : a) {
        if (auto it = b.find(g); it != b.end()) {
            aa.emplace(g, d);
            bb.emplace(g, it->second);
        }
    }
    return tvd(aa, bb);
}

struct MethodMetrics {
    Method method = Method::Gke;
    std::vector<double> bias;
    std::vector<double> see;
    std::vector<double> rmse;
};

struct MetricsReport {
    ScoreScale scale;
    std::string truth_description;
    std::vector<MethodMetrics> methods;
    std::optional<EdiffResult> ediff;
    // Mean TVD between P's and Q's conditional score distributions, per method.
    std::map<Method, double> mean_tvd;
    std::size_t replications = 0;
    std::size_t failed_replications = 0;
};

inline MethodMetrics summarize(Method m, const ReplicateMatrix& reps, const std::vector<double>& truth) {
    MethodMetrics out;
    out.method = m;
    out.bias = bias(reps, truth);
    out.see = mc_see(reps);
    out.rmse = rmse(out.bias, out.see);
    return out;
}

}  // namespace keq

#pragma once

// Gaussian-kernel continuization of a discrete score distribution.
//
// The continuized variable is a * (X + h * V) + (1 - a) * mu with V standard
// normal and a = sqrt(sigma2 / (sigma2 + h^2)), so its mean and variance equal
// those of the discrete distribution for every bandwidth h.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "keq/core.hpp"
#include "keq/solvers.hpp"

namespace keq {

namespace detail {

inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z * std::numbers::sqrt2 * 0.5); }
inline double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2); }

// Beyond this many kernel standard deviations a term's density is below 1e-300.
inline constexpr double kKernelCutoff = 37.0;

inline void require_finite(double x) {
    if (!std::isfinite(x)) throw Error("kernel evaluation at a non-finite point");
}

}  // namespace detail

class ContinuizedCdf {
public:
    ContinuizedCdf(ScoreDistribution dist, double h) : dist_(std::move(dist)), h_(h) {
        if (!(h > 0.0) || !std::isfinite(h)) throw Error("bandwidth must be positive and finite");
        mu_ = dist_.mean();
        sigma2_ = dist_.variance();
        if (!(sigma2_ > 0.0)) throw Error("target distribution degenerate: zero variance");
        a_ = std::sqrt(sigma2_ / (sigma2_ + h * h));
        points_ = dist_.scale().points();
        for (double& x : points_) x = a_ * x + (1.0 - a_) * mu_;
        scale_ = a_ * h_;
    }

    const ScoreDistribution& dist() const { return dist_; }
    double h() const { return h_; }
    double mu() const { return mu_; }
    double sigma2() const { return sigma2_; }
    double a() const { return a_; }

    double cdf(double x) const {
        detail::require_finite(x);
        double F = 0.0;
        const auto& r = dist_.probs();
        for (std::size_t j = 0; j < r.size(); ++j) F += r[j] * detail::std_normal_cdf((x - points_[j]) / scale_);
        return std::clamp(F, 0.0, 1.0);
    }

    // 1 - cdf(x), accurate in the upper tail.
    double sf(double x) const {
        detail::require_finite(x);
        double S = 0.0;
        const auto& r = dist_.probs();
        for (std::size_t j = 0; j < r.size(); ++j) S += r[j] * detail::std_normal_cdf((points_[j] - x) / scale_);
        return std::clamp(S, 0.0, 1.0);
    }

    double pdf(double x) const {
        detail::require_finite(x);
        double f = 0.0;
        const auto& r = dist_.probs();
        for (std::size_t j = 0; j < r.size(); ++j) {
            const double z = (x - points_[j]) / scale_;
            if (std::abs(z) < detail::kKernelCutoff) f += r[j] * detail::std_normal_pdf(z);
        }
        return f / scale_;
    }

    double pdf_derivative(double x) const {
        detail::require_finite(x);
        double d = 0.0;
        const auto& r = dist_.probs();
        for (std::size_t j = 0; j < r.size(); ++j) {
            const double z = (x - points_[j]) / scale_;
            if (std::abs(z) < detail::kKernelCutoff) d -= r[j] * z * detail::std_normal_pdf(z);
        }
        return d / (scale_ * scale_);
    }

    // Smallest interval [lo, hi] with cdf(lo) < p_lo and sf(hi) < q_hi.
    std::pair<double, double> bracket(double p_lo, double q_hi) const {
        const double sd = std::sqrt(sigma2_);
        double lo = mu_ - 10.0 * sd;
        double hi = mu_ + 10.0 * sd;
        for (int i = 0; i < 200 && !(cdf(lo) < p_lo); ++i) lo -= 10.0 * sd * (i + 1);
        for (int i = 0; i < 200 && !(sf(hi) < q_hi); ++i) hi += 10.0 * sd * (i + 1);
        return {lo, hi};
    }

private:
    ScoreDistribution dist_;
    double h_;
    double mu_ = 0.0;
    double sigma2_ = 0.0;
    double a_ = 1.0;
    double scale_ = 1.0;
    std::vector<double> points_;
};

inline double kernel_cdf(const ContinuizedCdf& c, double x) { return c.cdf(x); }
inline double kernel_pdf(const ContinuizedCdf& c, double x) { return c.pdf(x); }

inline constexpr double kInverseTolerance = 1e-10;

// x with cdf(x) = p.
inline double inverse_cdf(const ContinuizedCdf& c, double p) {
    if (!(p > 0.0 && p < 1.0)) throw Error("inverse_cdf: probability must lie in (0, 1)");
    const auto [lo, hi] = c.bracket(p, 1.0 - p);
    auto g = [&](double x) { return c.cdf(x) - p; };
    const double x = brent_root(g, lo, hi, 1e-13 * (1.0 + std::abs(c.mu()))).x;
    if (std::abs(g(x)) >= kInverseTolerance) return bisect_root(g, lo, hi, 1e-14 * (1.0 + std::abs(c.mu())));
    return x;
}

// x with sf(x) = q; the upper-tail counterpart of inverse_cdf.
inline double inverse_sf(const ContinuizedCdf& c, double q) {
    if (!(q > 0.0 && q < 1.0)) throw Error("inverse_sf: probability must lie in (0, 1)");
    const auto [lo, hi] = c.bracket(1.0 - q, q);
    auto g = [&](double x) { return q - c.sf(x); };
    const double x = brent_root(g, lo, hi, 1e-13 * (1.0 + std::abs(c.mu()))).x;
    if (std::abs(g(x)) >= kInverseTolerance) return bisect_root(g, lo, hi, 1e-14 * (1.0 + std::abs(c.mu())));
    return x;
}

struct BandwidthOptions {
    double kpen = 1.0;
    double h_min = 0.05;
    // Upper end of the search interval in units of the distribution's sd.
    double h_max_sd = 4.0;
    double derivative_offset = 0.25;
    int grid_points = 64;
    double xtol = 1e-6;
};

// PEN1 + kpen * PEN2 at bandwidth h. PEN2 counts score points where the
// continuized density has a local minimum (decreasing just left of the point,
// increasing just right of it).
inline double bandwidth_penalty(const ScoreDistribution& dist, double h, double kpen, double offset = 0.25) {
    const ContinuizedCdf c(dist, h);
    const auto pts = dist.scale().points();
    double pen1 = 0.0;
    double pen2 = 0.0;
    for (std::size_t j = 0; j < pts.size(); ++j) {
        const double d = dist[j] - c.pdf(pts[j]);
        pen1 += d * d;
        if (kpen != 0.0) {
            const bool left_down = c.pdf_derivative(pts[j] - offset) < 0.0;
            const bool right_up = c.pdf_derivative(pts[j] + offset) > 0.0;
            if (left_down && right_up) pen2 += 1.0;
        }
    }
    return pen1 + kpen * pen2;
}

// Log-spaced grid scan followed by golden-section refinement around the best
// grid point. Deterministic.
inline double select_bandwidth(const ScoreDistribution& dist, const BandwidthOptions& opt = {}) {
    std::size_t support = 0;
    for (double p : dist.probs()) support += p > 0.0 ? 1 : 0;
    const double var = dist.variance();
    if (support < 2 || !(var > 0.0)) throw Error("bandwidth undefined for point mass");
    if (opt.kpen < 0.0) throw Error("kpen must be nonnegative");
    const double h_lo = opt.h_min;
    const double h_hi = std::max(opt.h_max_sd * std::sqrt(var), 2.0 * h_lo);
    const int n = std::max(opt.grid_points, 3);

    auto pen = [&](double h) { return bandwidth_penalty(dist, h, opt.kpen, opt.derivative_offset); };
    std::vector<double> grid(static_cast<std::size_t>(n));
    const double step = std::log(h_hi / h_lo) / (n - 1);
    std::size_t best = 0;
    double best_val = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        grid[static_cast<std::size_t>(i)] = h_lo * std::exp(step * i);
        const double v = pen(grid[static_cast<std::size_t>(i)]);
        if (v < best_val) {
            best_val = v;
            best = static_cast<std::size_t>(i);
        }
    }
    const double a = grid[best == 0 ? 0 : best - 1];
    const double b = grid[std::min(best + 1, grid.size() - 1)];
    const auto refined = golden_section(pen, a, b, opt.xtol);
    return refined.value <= best_val ? refined.x : grid[best];
}

}  // namespace keq

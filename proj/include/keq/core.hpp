#pragma once

// Shared domain types for observed-score equating: score scales, covariate
// spaces, probability tables, person-level datasets and equating tables.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace keq {

// Failure inside an equating pipeline (bad model, unsupported cell, ...).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed external input: CSV files, config files, command-line values.
class InputError : public Error {
public:
    using Error::Error;
};

inline constexpr double kProbTolerance = 1e-10;

class ScoreScale {
public:
    ScoreScale() = default;
    ScoreScale(int min, int max) : min_(min), max_(max) {
        if (min > max) {
            throw Error("score scale: min " + std::to_string(min) + " exceeds max " +
                        std::to_string(max));
        }
    }

    int min() const { return min_; }
    int max() const { return max_; }
    std::size_t size() const { return static_cast<std::size_t>(max_ - min_ + 1); }
    double point(std::size_t j) const { return static_cast<double>(min_) + static_cast<double>(j); }
    bool contains(int score) const { return score >= min_ && score <= max_; }
    std::size_t index_of(int score) const { return static_cast<std::size_t>(score - min_); }

    std::vector<double> points() const {
        std::vector<double> pts(size());
        for (std::size_t j = 0; j < pts.size(); ++j) pts[j] = point(j);
        return pts;
    }

    friend bool operator==(const ScoreScale&, const ScoreScale&) = default;

private:
    int min_ = 0;
    int max_ = 0;
};

struct Categorical {
    std::vector<std::string> levels;
    friend bool operator==(const Categorical&, const Categorical&) = default;
};

// Real-valued covariate cut into intervals by ascending thresholds. With
// thresholds t1 < ... < tK there are K bins: bin 1 is everything below t1,
// bin i is [t(i-1), t(i)), and the last bin is [t(K-1), tK] extended upwards.
struct Binned {
    std::vector<double> thresholds;
    friend bool operator==(const Binned&, const Binned&) = default;
};

struct Variable {
    std::string name;
    std::variant<Categorical, Binned> kind;

    std::size_t level_count() const {
        return std::visit(
            [](const auto& k) -> std::size_t {
                using T = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<T, Categorical>) return k.levels.size();
                else return k.thresholds.size();
            },
            kind);
    }
    bool is_binned() const { return std::holds_alternative<Binned>(kind); }

    friend bool operator==(const Variable&, const Variable&) = default;
};

inline void validate_thresholds(const Binned& spec) {
    if (spec.thresholds.empty()) throw Error("binned covariate needs at least one threshold");
    for (std::size_t i = 0; i < spec.thresholds.size(); ++i) {
        if (!std::isfinite(spec.thresholds[i])) throw Error("binned covariate threshold is not finite");
        if (i > 0 && !(spec.thresholds[i] > spec.thresholds[i - 1])) {
            throw Error("binned covariate thresholds must be strictly ascending");
        }
    }
}

// Zero-based bin index of `value` under the left-closed rule with clamping.
inline std::size_t discretize(double value, const Binned& spec) {
    if (!std::isfinite(value)) throw Error("cannot discretize a non-finite value");
    const auto& t = spec.thresholds;
    if (t.size() <= 1) return 0;
    // Cuts are t[0]..t[K-2]; t[K-1] only closes the top bin.
    auto cuts_end = t.end() - 1;
    return static_cast<std::size_t>(std::upper_bound(t.begin(), cuts_end, value) - t.begin());
}

// Cross product of covariate variables; cells are enumerated in mixed radix
// with the last variable varying fastest.
class CovariateSpace {
public:
    CovariateSpace() = default;
    explicit CovariateSpace(std::vector<Variable> variables) : variables_(std::move(variables)) {
        for (const auto& v : variables_) {
            if (v.level_count() == 0) throw Error("covariate '" + v.name + "' has no levels");
            if (const auto* b = std::get_if<Binned>(&v.kind)) validate_thresholds(*b);
        }
    }

    const std::vector<Variable>& variables() const { return variables_; }
    std::size_t variable_count() const { return variables_.size(); }

    std::size_t cell_count() const {
        std::size_t l = 1;
        for (const auto& v : variables_) l *= v.level_count();
        return l;
    }

    std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t i = 0; i < variables_.size(); ++i)
            if (variables_[i].name == name) return i;
        return std::nullopt;
    }

    std::size_t index(const std::string& name) const {
        auto i = find(name);
        if (!i) throw Error("unknown covariate '" + name + "'");
        return *i;
    }

    // Level index of one raw value for variable `v`.
    std::size_t level_of(std::size_t v, double raw) const {
        const auto& var = variables_.at(v);
        if (const auto* b = std::get_if<Binned>(&var.kind)) return discretize(raw, *b);
        const auto n = var.level_count();
        if (!std::isfinite(raw) || raw < 0 || raw != std::floor(raw) || raw >= static_cast<double>(n)) {
            throw Error("covariate '" + var.name + "': value is not a declared level");
        }
        return static_cast<std::size_t>(raw);
    }

    std::size_t cell_of_levels(std::span<const std::size_t> levels) const {
        std::size_t cell = 0;
        for (std::size_t v = 0; v < variables_.size(); ++v) {
            cell = cell * variables_[v].level_count() + levels[v];
        }
        return cell;
    }

    std::size_t cell_of(std::span<const double> raw) const {
        if (raw.size() != variables_.size()) throw Error("covariate value count does not match the covariate space");
        std::size_t cell = 0;
        for (std::size_t v = 0; v < variables_.size(); ++v) {
            cell = cell * variables_[v].level_count() + level_of(v, raw[v]);
        }
        return cell;
    }

    std::vector<std::size_t> levels_of(std::size_t cell) const {
        std::vector<std::size_t> levels(variables_.size());
        for (std::size_t v = variables_.size(); v-- > 0;) {
            const auto n = variables_[v].level_count();
            levels[v] = cell % n;
            cell /= n;
        }
        return levels;
    }

    CovariateSpace subset(std::span<const std::string> names) const {
        std::vector<Variable> vars;
        for (const auto& n : names) vars.push_back(variables_.at(index(n)));
        return CovariateSpace(std::move(vars));
    }

    friend bool operator==(const CovariateSpace&, const CovariateSpace&) = default;

private:
    std::vector<Variable> variables_;
};

namespace detail {

// Validates a probability vector in place; tiny drift is renormalized away.
inline void normalize_or_throw(std::span<double> probs, const char* what) {
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw Error(std::string(what) + ": negative or non-finite probability");
        sum += p;
    }
    const double drift = std::abs(sum - 1.0);
    if (drift > kProbTolerance) {
        throw Error(std::string(what) + ": probabilities sum to " + std::to_string(sum));
    }
    if (drift > 1e-12) {
        for (double& p : probs) p /= sum;
    }
}

}  // namespace detail

class ScoreDistribution {
public:
    ScoreDistribution() = default;
    ScoreDistribution(ScoreScale scale, std::vector<double> probs) : scale_(scale), probs_(std::move(probs)) {
        if (probs_.size() != scale_.size()) throw Error("score distribution length does not match its scale");
        detail::normalize_or_throw(probs_, "score distribution");
    }

    const ScoreScale& scale() const { return scale_; }
    const std::vector<double>& probs() const { return probs_; }
    double operator[](std::size_t j) const { return probs_[j]; }
    std::size_t size() const { return probs_.size(); }

    double mean() const {
        double m = 0.0;
        for (std::size_t j = 0; j < probs_.size(); ++j) m += probs_[j] * scale_.point(j);
        return m;
    }
    double variance() const {
        const double m = mean();
        double v = 0.0;
        for (std::size_t j = 0; j < probs_.size(); ++j) {
            const double d = scale_.point(j) - m;
            v += probs_[j] * d * d;
        }
        return v;
    }

private:
    ScoreScale scale_;
    std::vector<double> probs_;
};

// J x L joint probabilities of score point j and covariate cell l.
class JointProbabilityTable {
public:
    JointProbabilityTable() = default;
    JointProbabilityTable(ScoreScale scale, CovariateSpace covariates, Eigen::MatrixXd probs)
        : scale_(scale), covariates_(std::move(covariates)), probs_(std::move(probs)) {
        if (static_cast<std::size_t>(probs_.rows()) != scale_.size() ||
            static_cast<std::size_t>(probs_.cols()) != covariates_.cell_count()) {
            throw Error("joint probability table shape does not match scale x covariate cells");
        }
        detail::normalize_or_throw(std::span<double>(probs_.data(), static_cast<std::size_t>(probs_.size())),
                                   "joint probability table");
    }

    const ScoreScale& scale() const { return scale_; }
    const CovariateSpace& covariates() const { return covariates_; }
    const Eigen::MatrixXd& probs() const { return probs_; }

    // r_P: score marginal (row sums).
    ScoreDistribution score_marginal() const {
        Eigen::VectorXd rows = probs_.rowwise().sum();
        return ScoreDistribution(scale_, std::vector<double>(rows.data(), rows.data() + rows.size()));
    }
    // t_P: covariate-cell marginal (column sums).
    std::vector<double> cell_marginal() const {
        Eigen::VectorXd cols = probs_.colwise().sum().transpose();
        return {cols.data(), cols.data() + cols.size()};
    }

private:
    ScoreScale scale_;
    CovariateSpace covariates_;
    Eigen::MatrixXd probs_;
};

struct PersonRecord {
    int score = 0;
    // One raw value per covariate variable: level index for categorical
    // variables, the observed real value for binned ones.
    std::vector<double> covariates;
};

struct Dataset {
    ScoreScale scale;
    CovariateSpace covariates;
    std::vector<PersonRecord> records;

    std::size_t size() const { return records.size(); }

    void validate() const {
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            if (!scale.contains(r.score)) {
                throw Error("record " + std::to_string(i) + ": score " + std::to_string(r.score) +
                            " outside scale [" + std::to_string(scale.min()) + ", " +
                            std::to_string(scale.max()) + "]");
            }
            if (r.covariates.size() != covariates.variable_count()) {
                throw Error("record " + std::to_string(i) + ": wrong number of covariate values");
            }
            for (std::size_t v = 0; v < r.covariates.size(); ++v) (void)covariates.level_of(v, r.covariates[v]);
        }
    }
};

// Mixture weight of population P in the target population T = wP + (1-w)Q.
class TargetMixture {
public:
    explicit TargetMixture(double omega) : omega_(omega) {
        if (!(omega >= 0.0 && omega <= 1.0)) throw Error("mixture weight omega must lie in [0, 1]");
    }
    static TargetMixture from_sample_sizes(std::size_t n_p, std::size_t n_q) {
        if (n_p + n_q == 0) throw Error("mixture weight from empty samples");
        return TargetMixture(static_cast<double>(n_p) / static_cast<double>(n_p + n_q));
    }
    double omega() const { return omega_; }

private:
    double omega_;
};

enum class Method { Gke, SequentialGke, Eg };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::Gke: return "GKE";
        case Method::SequentialGke: return "sequential GKE";
        case Method::Eg: return "EG";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "GKE") return Method::Gke;
    if (s == "sequential GKE") return Method::SequentialGke;
    if (s == "EG") return Method::Eg;
    throw InputError("unknown equating method '" + s + "'");
}

struct EquatingRow {
    double equated = 0.0;
    std::optional<double> see;
    friend bool operator==(const EquatingRow&, const EquatingRow&) = default;
};

struct EquatingTable {
    ScoreScale source_scale;
    std::vector<EquatingRow> rows;
    Method method = Method::Gke;

    std::vector<double> equated() const {
        std::vector<double> v(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) v[i] = rows[i].equated;
        return v;
    }

    void check_monotone() const {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            if (rows[i].equated < rows[i - 1].equated) {
                throw Error("equating table is not nondecreasing at score " +
                            std::to_string(source_scale.min() + static_cast<int>(i)));
            }
        }
    }

    friend bool operator==(const EquatingTable&, const EquatingTable&) = default;
};

// Same persons restricted to the named covariates (in the given order).
inline Dataset select_covariates(const Dataset& data, std::span<const std::string> names) {
    Dataset out;
    out.scale = data.scale;
    out.covariates = data.covariates.subset(names);
    std::vector<std::size_t> idx;
    for (const auto& n : names) idx.push_back(data.covariates.index(n));
    out.records.reserve(data.records.size());
    for (const auto& r : data.records) {
        PersonRecord pr;
        pr.score = r.score;
        pr.covariates.reserve(idx.size());
        for (auto i : idx) pr.covariates.push_back(r.covariates[i]);
        out.records.push_back(std::move(pr));
    }
    return out;
}

// Raw cell counts of a dataset, J x L.
inline Eigen::MatrixXd tabulate_counts(const Dataset& data) {
    if (data.records.empty()) throw Error("no records");
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.scale.size()),
                                                   static_cast<Eigen::Index>(data.covariates.cell_count()));
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        const auto& r = data.records[i];
        if (!data.scale.contains(r.score)) {
            throw Error("record " + std::to_string(i) + ": score " + std::to_string(r.score) + " outside scale");
        }
        const auto l = data.covariates.cell_of(r.covariates);
        counts(static_cast<Eigen::Index>(data.scale.index_of(r.score)), static_cast<Eigen::Index>(l)) += 1.0;
    }
    return counts;
}

inline JointProbabilityTable tabulate(const Dataset& data) {
    Eigen::MatrixXd counts = tabulate_counts(data);
    counts /= static_cast<double>(data.records.size());
    return JointProbabilityTable(data.scale, data.covariates, std::move(counts));
}

}  // namespace keq

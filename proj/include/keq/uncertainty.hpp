#pragma once

// Standard error of equating by nonparametric bootstrap over person records.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "keq/equate.hpp"
#include "keq/metrics.hpp"
#include "keq/parallel.hpp"

namespace keq {

using Pipeline = std::function<EquatingTable(const Dataset& p, const Dataset& q)>;

inline Pipeline gke_pipeline(GkePipelineConfig cfg) {
    return [cfg = std::move(cfg)](const Dataset& p, const Dataset& q) { return equate_gke(p, q, cfg).table; };
}

inline Pipeline sequential_pipeline(std::string covariate, GkePipelineConfig cfg, CovariateEquatingOptions opt = {}) {
    return [covariate = std::move(covariate), cfg = std::move(cfg), opt](const Dataset& p, const Dataset& q) {
        return equate_sequential(p, q, covariate, cfg, opt).gke.table;
    };
}

struct BootstrapConfig {
    int replicates = 400;
    std::uint64_t seed = 1;
    // Index of the first replicate; lets a run be split into pieces that pool
    // to the same replicate set.
    int first_replicate = 0;
    unsigned threads = 1;
    double max_failure_fraction = 0.05;
};

struct BootstrapResult {
    std::vector<double> see;
    // Successful replicates x score points, in replicate order.
    ReplicateMatrix replicates;
    std::vector<int> replicate_ids;
    std::vector<std::string> failures;
};

inline Dataset resample(const Dataset& data, Rng& rng) {
    Dataset out;
    out.scale = data.scale;
    out.covariates = data.covariates;
    out.records.reserve(data.records.size());
    std::uniform_int_distribution<std::size_t> pick(0, data.records.size() - 1);
    for (std::size_t i = 0; i < data.records.size(); ++i) out.records.push_back(data.records[pick(rng)]);
    return out;
}

inline BootstrapResult bootstrap_see(const Dataset& p, const Dataset& q, const Pipeline& pipeline,
                                     const BootstrapConfig& cfg) {
    if (cfg.replicates < 2) throw Error("bootstrap needs at least two replicates");
    if (p.records.empty() || q.records.empty()) throw Error("no records");
    const auto B = static_cast<std::size_t>(cfg.replicates);
    std::vector<std::optional<std::vector<double>>> values(B);
    std::vector<std::string> errors(B);

    parallel_for(B, cfg.threads, [&](std::size_t i) {
        const auto b = static_cast<std::uint64_t>(cfg.first_replicate) + i;
        Rng rp = substream(cfg.seed, b, 0);
        Rng rq = substream(cfg.seed, b, 1);
        try {
            const Dataset pb = resample(p, rp);
            const Dataset qb = resample(q, rq);
            values[i] = pipeline(pb, qb).equated();
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    });

    BootstrapResult out;
    std::size_t width = 0;
    for (std::size_t i = 0; i < B; ++i) {
        if (values[i]) width = values[i]->size();
        else out.failures.push_back("replicate " + std::to_string(cfg.first_replicate + static_cast<int>(i)) + ": " + errors[i]);
    }
    const double failed = static_cast<double>(out.failures.size()) / static_cast<double>(B);
    if (failed > cfg.max_failure_fraction) {
        throw Error("bootstrap: " + std::to_string(out.failures.size()) + " of " + std::to_string(B) +
                    " replicates failed; first: " + out.failures.front());
    }
    const std::size_t ok = B - out.failures.size();
    if (ok < 2) throw Error("bootstrap: fewer than two successful replicates");
    out.replicates.resize(static_cast<Eigen::Index>(ok), static_cast<Eigen::Index>(width));
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < B; ++i) {
        if (!values[i]) continue;
        for (std::size_t s = 0; s < width; ++s) out.replicates(row, static_cast<Eigen::Index>(s)) = (*values[i])[s];
        out.replicate_ids.push_back(cfg.first_replicate + static_cast<int>(i));
        ++row;
    }
    out.see = mc_see(out.replicates);
    return out;
}

// Attaches SEE values to an equating table.
inline void attach_see(EquatingTable& table, const std::vector<double>& see) {
    if (see.size() != table.rows.size()) throw Error("SEE vector does not match the equating table");
    for (std::size_t i = 0; i < see.size(); ++i) table.rows[i].see = see[i];
}

}  // namespace keq

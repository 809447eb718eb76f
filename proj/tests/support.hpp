#pragma once

// Shared fixtures for the test binaries.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "keq/core.hpp"
#include "keq/continuize.hpp"
#include "keq/parallel.hpp"

namespace keq::fixture {

inline ScoreDistribution discretized_gaussian(const ScoreScale& scale, double mean, double sd) {
    std::vector<double> p(scale.size());
    double sum = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        const double z = (scale.point(j) - mean) / sd;
        p[j] = std::exp(-0.5 * z * z);
        sum += p[j];
    }
    for (double& v : p) v /= sum;
    return ScoreDistribution(scale, p);
}

inline ScoreDistribution binomial(int n, double pr) {
    std::vector<double> p(static_cast<std::size_t>(n) + 1);
    for (int k = 0; k <= n; ++k) {
        p[static_cast<std::size_t>(k)] =
            std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0)) * std::pow(pr, k) *
            std::pow(1.0 - pr, n - k);
    }
    double s = 0.0;
    for (double v : p) s += v;
    for (double& v : p) v /= s;
    return ScoreDistribution(ScoreScale(0, n), p);
}

// Dataset whose empirical score distribution is `dist` rounded to n persons.
inline Dataset dataset_from_dist(const ScoreDistribution& dist, int n) {
    Dataset d;
    d.scale = dist.scale();
    for (std::size_t j = 0; j < dist.size(); ++j) {
        const int c = static_cast<int>(std::lround(dist[j] * n));
        for (int i = 0; i < c; ++i) d.records.push_back({dist.scale().min() + static_cast<int>(j), {}});
    }
    return d;
}

// Random sample of n scores from dist.
inline Dataset sample_dataset(const ScoreDistribution& dist, int n, Rng& rng) {
    std::discrete_distribution<std::size_t> pick(dist.probs().begin(), dist.probs().end());
    Dataset d;
    d.scale = dist.scale();
    for (int i = 0; i < n; ++i) d.records.push_back({dist.scale().min() + static_cast<int>(pick(rng)), {}});
    return d;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("keq_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

struct CliResult {
    int status = -1;
    std::string out;
};

// Runs a shell command and captures stdout; stderr is discarded unless merged.
inline CliResult run(const std::string& cmd, bool with_stderr = false) {
    CliResult r;
    FILE* f = ::popen((cmd + (with_stderr ? " 2>&1" : " 2>/dev/null")).c_str(), "r");
    if (!f) return r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = std::fread(buf.data(), 1, buf.size(), f)) > 0) r.out.append(buf.data(), n);
    const int st = ::pclose(f);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

// Synthetic stand-in for the six exam administrations (spring/fall 2017-2019)
// with a 0-100 native-language score `nl`, a 0-50 English score `el`, school
// type and exam attempt. Writes one CSV per administration and the chain plan
// that equates NL across terms and then EL with equated NL as a covariate.
inline std::filesystem::path write_standin_chain(const std::filesystem::path& dir, std::uint64_t seed = 2017) {
    struct Admin {
        const char* id;
        bool spring;
        double nl_shift;
        double el_shift;
    };
    const Admin admins[] = {{"S2017", true, 0, 0},    {"S2018", true, -1.5, 1.0}, {"S2019", true, 1.0, 2.0},
                            {"F2017", false, -2.0, 0.5}, {"F2018", false, 0.5, -1.0}, {"F2019", false, -3.0, 1.5}};
    std::uint64_t stream = 0;
    for (const auto& a : admins) {
        Rng rng = substream(seed, stream++);
        std::normal_distribution<double> z(0.0, 1.0);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const int n = a.spring ? 6000 : 2500;
        const double p_acad = a.spring ? 0.55 : 0.30;
        const double p_rep = a.spring ? 0.08 : 0.45;
        std::ofstream out(dir / (std::string(a.id) + ".csv"));
        out << "school,attempt,nl,el\n";
        for (int i = 0; i < n; ++i) {
            const bool acad = u(rng) < p_acad;
            const bool rep = u(rng) < p_rep;
            const double theta = z(rng) + 0.7 * acad - 0.4 * rep;
            const double nl = std::clamp(std::floor(68.0 + 12.0 * theta + a.nl_shift + 0.5), 0.0, 100.0);
            const double el = std::clamp(std::floor(30.0 + 7.0 * (0.7 * theta + 0.7 * z(rng)) + a.el_shift + 0.5), 0.0, 50.0);
            out << (acad ? "academic" : "vocational") << ',' << (rep ? "repeat" : "first") << ',' << nl << ',' << el << '\n';
        }
    }
    const auto plan = dir / "plan.json";
    std::ofstream p(plan);
    p << R"({
  "binned": {"nl": [50, 60, 70, 80, 100]},
  "forms": {
    "NL_S2017": {"path": "S2017.csv", "score": "nl", "scale": [0, 100]},
    "NL_S2018": {"path": "S2018.csv", "score": "nl", "scale": [0, 100]},
    "NL_S2019": {"path": "S2019.csv", "score": "nl", "scale": [0, 100]},
    "NL_F2017": {"path": "F2017.csv", "score": "nl", "scale": [0, 100]},
    "NL_F2018": {"path": "F2018.csv", "score": "nl", "scale": [0, 100]},
    "NL_F2019": {"path": "F2019.csv", "score": "nl", "scale": [0, 100]},
    "EL_S2017": {"path": "S2017.csv", "score": "el", "scale": [0, 50], "covariate_forms": {"nl": "NL_S2017"}},
    "EL_S2018": {"path": "S2018.csv", "score": "el", "scale": [0, 50], "covariate_forms": {"nl": "NL_S2018"}},
    "EL_S2019": {"path": "S2019.csv", "score": "el", "scale": [0, 50], "covariate_forms": {"nl": "NL_S2019"}},
    "EL_F2017": {"path": "F2017.csv", "score": "el", "scale": [0, 50], "covariate_forms": {"nl": "NL_F2017"}},
    "EL_F2018": {"path": "F2018.csv", "score": "el", "scale": [0, 50], "covariate_forms": {"nl": "NL_F2018"}},
    "EL_F2019": {"path": "F2019.csv", "score": "el", "scale": [0, 50], "covariate_forms": {"nl": "NL_F2019"}}
  },
  "steps": [
    {"source": "EL_F2019", "target": "EL_S2017", "design": "NEC", "covariates": ["school", "attempt", "nl"], "equated_covariates": ["nl"]},
    {"source": "NL_F2017", "target": "NL_S2017", "design": "NEC", "covariates": ["school", "attempt"]},
    {"source": "EL_S2018", "target": "EL_S2017", "design": "NEC", "covariates": ["school", "attempt", "nl"], "equated_covariates": ["nl"]},
    {"source": "NL_F2018", "target": "NL_F2017", "design": "EG"},
    {"source": "NL_S2018", "target": "NL_S2017", "design": "EG"},
    {"source": "EL_F2017", "target": "EL_S2017", "design": "NEC", "covariates": ["school", "attempt", "nl"], "equated_covariates": ["nl"]},
    {"source": "NL_F2019", "target": "NL_F2017", "design": "EG"},
    {"source": "NL_S2019", "target": "NL_S2017", "design": "EG"},
    {"source": "EL_S2019", "target": "EL_S2017", "design": "NEC", "covariates": ["school", "attempt", "nl"], "equated_covariates": ["nl"]},
    {"source": "EL_F2018", "target": "EL_S2017", "design": "NEC", "covariates": ["school", "attempt", "nl"], "equated_covariates": ["nl"]}
  ]
}
)";
    return plan;
}

}  // namespace keq::fixture

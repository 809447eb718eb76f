// keq: command-line front end for kernel equating.
//
//   keq equate    --p P.csv --q Q.csv [--covariates a,b] [--sequential --equate-covariate c]
//   keq simulate  --scenario 5 --reps 100 --seed 7
//   keq chain     --plan plan.json --out-dir tables/
//   keq plot-data --metrics report.csv --table a.csv --table b.csv
//
// Exit status: 0 ok, 2 malformed input or invalid plan, 3 pipeline failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "keq/equate.hpp"
#include "keq/io.hpp"
#include "keq/simulate.hpp"
#include "keq/uncertainty.hpp"

namespace fs = std::filesystem;
using namespace keq;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitPipeline = 3;

struct ModelFlags {
    int degree = 6;
    int interaction = 1;
    bool raw = false;
    bool allow_nonconvergence = false;
    double kpen = 1.0;
    std::optional<double> omega;
    std::optional<double> h_x;
    std::optional<double> h_y;

    void add(CLI::App* app) {
        app->add_option("--degree", degree, "Score polynomial degree of the log-linear model")->capture_default_str();
        app->add_option("--interaction", interaction, "Degree of score x covariate interactions")->capture_default_str();
        app->add_flag("--raw", raw, "Skip presmoothing and use observed proportions");
        app->add_flag("--allow-nonconvergence", allow_nonconvergence, "Keep non-converged log-linear fits (with a warning)");
        app->add_option("--kpen", kpen, "Weight of the second bandwidth penalty term")->capture_default_str();
        app->add_option("--omega", omega, "Weight of P in the target population")->check(CLI::Range(0.0, 1.0));
        app->add_option("--hx", h_x, "Fixed bandwidth for the source form")->check(CLI::PositiveNumber);
        app->add_option("--hy", h_y, "Fixed bandwidth for the target form")->check(CLI::PositiveNumber);
    }

    GkePipelineConfig config() const {
        GkePipelineConfig cfg;
        if (raw) {
            cfg.presmooth.reset();
        } else {
            LoglinearSpec spec;
            spec.score_degree = degree;
            spec.interaction_degree = interaction;
            cfg.presmooth = spec;
        }
        cfg.require_convergence = !allow_nonconvergence;
        cfg.bandwidth.kpen = kpen;
        cfg.omega = omega;
        cfg.h_x = h_x;
        cfg.h_y = h_y;
        return cfg;
    }
};

io::Precision parse_precision(const std::string& s) { return s == "full" ? io::Precision::Full : io::Precision::Table; }

// Writes through a temporary string so a failed run leaves no partial file.
void emit(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << content;
}

// "nl" or "nl:50,60,70,80,100"
std::pair<std::string, std::vector<double>> parse_binned(const std::string& arg) {
    const auto colon = arg.find(':');
    if (colon == std::string::npos) return {arg, io::default_thresholds()};
    std::vector<double> th;
    std::stringstream ss(arg.substr(colon + 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        auto v = io::parse_double(tok);
        if (!v) throw InputError("--binned: bad threshold '" + tok + "' in '" + arg + "'");
        th.push_back(*v);
    }
    return {arg.substr(0, colon), th};
}

std::string number(double v) { return io::format_number(v, io::Precision::Full); }

// ---------------------------------------------------------------------------

struct EquateArgs {
    std::string design;
    std::string p, q, score = "score", out;
    std::vector<std::string> covariates, binned;
    std::optional<int> score_min, score_max;
    bool sequential = false;
    std::string equate_covariate;
    std::optional<int> covariate_min, covariate_max;
    int bootstrap = 0;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    std::string precision = "table";
    std::string replicates_out;
    ModelFlags model;
};

int cmd_equate(const EquateArgs& a) {
    io::DatasetSchema schema;
    schema.score_column = a.score;
    schema.covariates = a.covariates;
    for (const auto& b : a.binned) schema.binned.insert(parse_binned(b));
    if (a.score_min.has_value() != a.score_max.has_value()) throw InputError("give both --score-min and --score-max");
    if (a.score_min) schema.scale = ScoreScale(*a.score_min, *a.score_max);

    const std::string design = a.design.empty() ? (a.covariates.empty() ? "eg" : "nec") : a.design;
    if (design == "eg" && !a.covariates.empty()) throw InputError("EG design takes no covariates");
    if (design == "nec" && a.covariates.empty()) throw InputError("NEC design needs --covariates");
    if (a.sequential) {
        if (design != "nec") throw InputError("--sequential requires the NEC design");
        if (a.equate_covariate.empty()) throw InputError("--sequential requires --equate-covariate");
        if (std::find(a.covariates.begin(), a.covariates.end(), a.equate_covariate) == a.covariates.end()) {
            throw InputError("--equate-covariate '" + a.equate_covariate + "' is not among --covariates");
        }
        if (!schema.binned.contains(a.equate_covariate)) schema.binned[a.equate_covariate] = io::default_thresholds();
    } else if (!a.equate_covariate.empty()) {
        throw InputError("--equate-covariate requires --sequential");
    }

    const auto data = io::build_datasets({io::read_csv_file(a.p), io::read_csv_file(a.q)}, schema);
    const Dataset& p = data[0];
    const Dataset& q = data[1];
    const GkePipelineConfig cfg = a.model.config();

    std::vector<std::string> header;
    EquatingTable table;
    Pipeline pipeline;
    CovariateEquatingOptions cov_opt;
    if (a.covariate_min.has_value() != a.covariate_max.has_value()) {
        throw InputError("give both --covariate-min and --covariate-max");
    }
    if (a.covariate_min) cov_opt.scale = ScoreScale(*a.covariate_min, *a.covariate_max);

    auto fit_notes = [&](const std::vector<FittedLoglinear>& fits) {
        for (const auto& f : fits)
            if (!f.warning.empty()) std::cerr << "warning: " << f.warning << '\n';
    };

    if (a.sequential) {
        const SequentialResult res = equate_sequential(p, q, a.equate_covariate, cfg, cov_opt);
        table = res.gke.table;
        header.push_back("method: " + std::string(method_name(table.method)));
        header.push_back("design: NEC, covariates " + CLI::detail::join(a.covariates, ","));
        std::string summary = "covariate equating: " + a.equate_covariate + " measured in Q mapped onto P's scale";
        if (res.covariate.detail) {
            const auto& d = *res.covariate.detail;
            summary += " (GKE, h_x " + number(d.h_x) + ", h_y " + number(d.h_y) + ")";
            fit_notes(d.fits);
        }
        header.push_back(summary);
        header.push_back("bandwidths: h_x " + number(res.gke.h_x) + ", h_y " + number(res.gke.h_y));
        fit_notes(res.gke.fits);
        pipeline = sequential_pipeline(a.equate_covariate, cfg, cov_opt);
    } else {
        const GkeResult res = equate_gke(p, q, cfg);
        table = res.table;
        header.push_back("method: " + std::string(method_name(table.method)));
        header.push_back(design == "eg" ? std::string("design: EG")
                                        : "design: NEC, covariates " + CLI::detail::join(a.covariates, ","));
        header.push_back("bandwidths: h_x " + number(res.h_x) + ", h_y " + number(res.h_y));
        fit_notes(res.fits);
        pipeline = gke_pipeline(cfg);
    }
    if (design == "nec") header.push_back("omega: " + number(cfg.omega ? *cfg.omega : default_omega(p, q, cfg)));
    header.push_back("n: P " + std::to_string(p.size()) + ", Q " + std::to_string(q.size()));

    if (a.bootstrap > 0) {
        BootstrapConfig bc;
        bc.replicates = a.bootstrap;
        bc.seed = a.seed;
        bc.threads = a.threads;
        const BootstrapResult br = bootstrap_see(p, q, pipeline, bc);
        attach_see(table, br.see);
        header.push_back("bootstrap: " + std::to_string(a.bootstrap) + " replicates, seed " + std::to_string(a.seed) +
                         ", failed " + std::to_string(br.failures.size()));
        for (const auto& f : br.failures) std::cerr << "warning: bootstrap " << f << '\n';
        if (!a.replicates_out.empty()) {
            std::ostringstream rs;
            io::write_replicates(rs, p.scale, br.replicates, br.replicate_ids);
            emit(a.replicates_out, rs.str());
        }
    }

    std::ostringstream os;
    io::write_equating_table(os, table, parse_precision(a.precision), header);
    emit(a.out, os.str());
    return 0;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::optional<int> scenario;
    std::string config_path;
    int reps = 100;
    std::uint64_t seed = 1;
    std::vector<std::string> methods{"gke", "seq"};
    std::optional<std::size_t> n;
    std::optional<int> score_max;
    unsigned threads = 1;
    std::string out, precision = "full", replicates_out;
    ModelFlags model;
};

// Custom generator configuration, optionally starting from a preset:
// {"scenario": 5, "c3_shift": 10, "y_slope": 0.9, "y_intercept": 5, "alpha": 1,
//  "beta": 0, "n": 5000, "score_max": 100, "error_sd": 10}
void apply_scenario_config(const std::string& path, ScenarioSpec& sc, GeneratorParams& g) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    try {
        nlohmann::json j;
        in >> j;
        if (j.contains("scenario")) sc = scenario(j.at("scenario").get<int>());
        else sc.id = 0;
        sc.c3_shift = j.value("c3_shift", sc.c3_shift);
        sc.y_slope = j.value("y_slope", sc.y_slope);
        sc.y_intercept = j.value("y_intercept", sc.y_intercept);
        sc.alpha = j.value("alpha", sc.alpha);
        sc.beta = j.value("beta", sc.beta);
        sc.n = j.value("n", sc.n);
        g.score_min = j.value("score_min", g.score_min);
        g.score_max = j.value("score_max", g.score_max);
        g.error_sd = j.value("error_sd", g.error_sd);
        g.c3_mean = j.value("c3_mean", g.c3_mean);
        g.c3_sd = j.value("c3_sd", g.c3_sd);
        for (const auto& key : j.items()) {
            static const std::set<std::string> known{"scenario", "c3_shift", "y_slope", "y_intercept", "alpha", "beta", "n",
                                                     "score_min", "score_max", "error_sd", "c3_mean", "c3_sd"};
            if (!known.contains(key.key())) throw InputError(path + ": unknown key '" + key.key() + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    if (sc.n < 2) throw InputError(path + ": n must be at least 2");
    if (g.score_max <= g.score_min) throw InputError(path + ": empty score range");
}

int cmd_simulate(const SimulateArgs& a) {
    ScenarioSpec sc;
    GeneratorParams g;
    if (!a.config_path.empty()) apply_scenario_config(a.config_path, sc, g);
    else if (a.scenario) sc = scenario(*a.scenario);
    else throw InputError("give --scenario or --config");
    if (a.n) sc.n = *a.n;
    if (a.score_max) g.score_max = *a.score_max;

    SimulationOptions opt;
    opt.methods.clear();
    for (const auto& m : a.methods) {
        if (m == "gke") opt.methods.push_back(Method::Gke);
        else if (m == "seq") opt.methods.push_back(Method::SequentialGke);
        else throw InputError("unknown method '" + m + "' (use gke, seq)");
    }
    opt.config = a.model.config();
    opt.params = g;
    opt.threads = a.threads;

    const ScenarioRun run = run_scenario(sc, a.reps, a.seed, opt);
    std::ostringstream os;
    io::write_metrics_report(os, run.report, parse_precision(a.precision));
    emit(a.out, os.str());

    if (!a.replicates_out.empty()) {
        for (const auto& [m, mat] : run.replicates) {
            std::vector<int> ids;
            for (Eigen::Index r = 0; r < mat.rows(); ++r) ids.push_back(static_cast<int>(r));
            std::ostringstream rs;
            io::write_replicates(rs, run.report.scale, mat, ids);
            emit(a.replicates_out + (m == Method::Gke ? "_gke.csv" : "_seq.csv"), rs.str());
        }
    }

    std::ostream& summary = (a.out.empty() || a.out == "-") ? std::cerr : std::cout;
    summary << "scenario " << (sc.id ? std::to_string(sc.id) : std::string("custom")) << ", n " << sc.n << ", "
            << run.report.replications - run.report.failed_replications << "/" << run.report.replications
            << " replications\n";
    for (const auto& m : run.report.methods) {
        summary << method_name(m.method) << ": mean |bias| (middle 80%) " << io::format_number(mean_abs_bias_middle(m), io::Precision::Full)
                << ", mean TVD " << io::format_number(run.report.mean_tvd.at(m.method), io::Precision::Full) << '\n';
    }
    if (run.report.ediff) {
        summary << "mean EDIFF " << io::format_number(run.report.ediff->mean, io::Precision::Full) << ", DTM exceeded at "
                << io::format_number(run.report.ediff->dtm_exceed_fraction, io::Precision::Full) << " of score points\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct ChainArgs {
    std::string plan, out_dir = ".", precision = "table";
    ModelFlags model;
};

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
    return out;
}

int cmd_chain(const ChainArgs& a) {
    std::ifstream in(a.plan);
    if (!in) throw InputError("cannot open '" + a.plan + "'");
    const io::ChainConfig cc = io::parse_chain_config(in, fs::path(a.plan).parent_path());
    std::vector<std::size_t> order;
    try {
        order = order_chain(cc.plan);
    } catch (const InputError&) {
        throw;
    } catch (const Error& e) {
        throw InputError(std::string("invalid plan: ") + e.what());
    }

    // Columns each form needs, and the categorical levels shared across forms.
    std::map<std::string, std::set<std::string>> columns;
    for (const auto& s : cc.plan.steps) {
        for (const auto* f : {&s.source, &s.target}) {
            if (!cc.forms.contains(*f)) throw InputError("plan: no data source for form '" + *f + "'");
            columns[*f].insert(s.covariates.begin(), s.covariates.end());
        }
    }
    std::map<fs::path, io::CsvTable> files;
    auto table_of = [&](const fs::path& p) -> const io::CsvTable& {
        auto it = files.find(p);
        if (it == files.end()) it = files.emplace(p, io::read_csv_file(p)).first;
        return it->second;
    };
    std::map<std::string, std::vector<io::CsvTable>> users;
    for (const auto& [form, cols] : columns)
        for (const auto& c : cols)
            if (!cc.binned.contains(c)) users[c].push_back(table_of(cc.forms.at(form).path));

    io::DatasetSchema base;
    base.binned = cc.binned;
    for (const auto& [col, tables] : users) base.levels[col] = io::collect_levels(tables, col);

    std::map<std::string, Dataset> datasets;
    for (const auto& [form, cols] : columns) {
        const auto& src = cc.forms.at(form);
        io::DatasetSchema schema = base;
        schema.score_column = src.score_column;
        schema.covariates.assign(cols.begin(), cols.end());
        schema.scale = src.scale;
        datasets.emplace(form, io::build_datasets({table_of(src.path)}, schema).front());
    }

    const ChainResult res = equate_chain(cc.plan, datasets, a.model.config());
    fs::create_directories(a.out_dir);
    const auto prec = parse_precision(a.precision);
    int k = 1;
    for (auto idx : order) {
        const auto& step = cc.plan.steps[idx];
        const auto& r = res.steps[idx];
        std::vector<std::string> header{
            "step " + std::to_string(k) + ": " + step.source + " -> " + step.target,
            "method: " + std::string(method_name(r.table.method)),
            std::string("design: ") + (step.design == Design::Eg ? "EG" : "NEC, covariates " + CLI::detail::join(step.covariates, ",")),
            "bandwidths: h_x " + number(r.h_x) + ", h_y " + number(r.h_y)};
        if (!step.equated_covariates.empty()) {
            header.push_back("equated covariates: " + CLI::detail::join(step.equated_covariates, ","));
        }
        std::ostringstream os;
        io::write_equating_table(os, r.table, prec, header);
        const std::string name = "step" + std::to_string(k) + "_" + sanitize(step.source) + "_to_" + sanitize(step.target) + ".csv";
        emit((fs::path(a.out_dir) / name).string(), os.str());
        std::cout << "step " << k << ": " << step.source << " -> " << step.target << " (" << name << ")\n";
        ++k;
    }
    for (const auto& [form, table] : res.composed_tables) {
        const auto& baseline = res.baseline_of.at(form);
        std::ostringstream os;
        io::write_equating_table(os, table, prec, {"composed: " + form + " -> " + baseline});
        const std::string name = "composed_" + sanitize(form) + "_to_" + sanitize(baseline) + ".csv";
        emit((fs::path(a.out_dir) / name).string(), os.str());
        std::cout << "composed: " << form << " -> " << baseline << " (" << name << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct PlotArgs {
    std::vector<std::string> metrics, tables;
    std::string out, svg_dir;
};

int cmd_plot_data(const PlotArgs& a) {
    if (a.metrics.empty() && a.tables.empty()) throw InputError("give --metrics and/or --table inputs");
    std::vector<io::PlotPoint> pts;
    for (const auto& path : a.metrics) {
        std::ifstream in(path);
        if (!in) throw InputError("cannot open '" + path + "'");
        const auto m = io::parse_metrics_report(in, path);
        io::metrics_plot_points(m, pts, a.metrics.size() > 1 ? fs::path(path).stem().string() + " " : "");
    }
    std::vector<std::pair<std::string, EquatingTable>> tables;
    for (const auto& path : a.tables) {
        std::ifstream in(path);
        if (!in) throw InputError("cannot open '" + path + "'");
        tables.emplace_back(fs::path(path).stem().string(), io::parse_equating_table(in, path));
    }
    io::table_plot_points(tables, pts);

    std::ostringstream os;
    io::write_plot_data(os, pts);
    emit(a.out, os.str());
    if (!a.svg_dir.empty()) {
        fs::create_directories(a.svg_dir);
        std::vector<std::string> panels;
        for (const auto& p : pts)
            if (std::find(panels.begin(), panels.end(), p.panel) == panels.end()) panels.push_back(p.panel);
        for (const auto& panel : panels) {
            std::ostringstream svg;
            io::write_svg(svg, pts, panel);
            emit((fs::path(a.svg_dir) / (panel + ".svg")).string(), svg.str());
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kernel equating for equivalent-groups and covariate designs"};
    app.require_subcommand(1);
    const unsigned env_threads = default_threads();

    EquateArgs eq;
    eq.threads = env_threads;
    auto* equate = app.add_subcommand("equate", "Equate form X (population P) to form Y (population Q)");
    equate->add_option("--design", eq.design, "eg or nec (default: nec when covariates are given)")
        ->check(CLI::IsMember({"eg", "nec"}));
    equate->add_option("--p", eq.p, "Person CSV for population P (source form)")->required()->check(CLI::ExistingFile);
    equate->add_option("--q", eq.q, "Person CSV for population Q (target form)")->required()->check(CLI::ExistingFile);
    equate->add_option("--score", eq.score, "Score column")->capture_default_str();
    equate->add_option("--covariates", eq.covariates, "Covariate columns")->delimiter(',');
    equate->add_option("--binned", eq.binned, "Real-valued covariate cut at thresholds, e.g. nl:50,60,70,80,100");
    equate->add_option("--score-min", eq.score_min, "Lowest score point (default: observed)");
    equate->add_option("--score-max", eq.score_max, "Highest score point (default: observed)");
    equate->add_flag("--sequential", eq.sequential, "Equate a form-dependent covariate first");
    equate->add_option("--equate-covariate", eq.equate_covariate, "Covariate equated in the first step");
    equate->add_option("--covariate-min", eq.covariate_min, "Lowest point of the equated covariate's scale");
    equate->add_option("--covariate-max", eq.covariate_max, "Highest point of the equated covariate's scale");
    equate->add_option("--bootstrap", eq.bootstrap, "Bootstrap replicates for the SEE (0: none)")->check(CLI::NonNegativeNumber);
    equate->add_option("--seed", eq.seed, "Bootstrap seed")->capture_default_str();
    equate->add_option("--threads", eq.threads, "Worker threads (env KEQ_THREADS)")->check(CLI::PositiveNumber);
    equate->add_option("--precision", eq.precision, "table (2 decimals) or full")->check(CLI::IsMember({"table", "full"}));
    equate->add_option("--replicates-out", eq.replicates_out, "Write bootstrap replicates (score x replicate) here");
    equate->add_option("-o,--out", eq.out, "Output CSV (default: stdout)");
    eq.model.add(equate);

    SimulateArgs sim;
    sim.threads = env_threads;
    auto* simulate = app.add_subcommand("simulate", "Monte-Carlo study of one scenario");
    auto* sc_opt = simulate->add_option("--scenario", sim.scenario, "Preset scenario 1..12");
    simulate->add_option("--config", sim.config_path, "JSON generator configuration")->check(CLI::ExistingFile)->excludes(sc_opt);
    simulate->add_option("--reps", sim.reps, "Replications")->capture_default_str()->check(CLI::Range(2, 1000000));
    simulate->add_option("--seed", sim.seed, "Seed")->capture_default_str();
    simulate->add_option("--methods", sim.methods, "gke,seq")->delimiter(',');
    simulate->add_option("--n", sim.n, "Sample size per population (overrides the scenario)");
    simulate->add_option("--score-max", sim.score_max, "Highest score point of the generated forms");
    simulate->add_option("--threads", sim.threads, "Worker threads (env KEQ_THREADS)")->check(CLI::PositiveNumber);
    simulate->add_option("--precision", sim.precision, "table or full")->check(CLI::IsMember({"table", "full"}));
    simulate->add_option("--replicates-out", sim.replicates_out, "Prefix for per-method replicate dumps");
    simulate->add_option("-o,--out", sim.out, "Metrics CSV (default: stdout)");
    sim.model.add(simulate);

    ChainArgs ch;
    auto* chain = app.add_subcommand("chain", "Run an equating chain plan");
    chain->add_option("--plan", ch.plan, "Chain plan JSON")->required()->check(CLI::ExistingFile);
    chain->add_option("--out-dir", ch.out_dir, "Directory for the step and composed tables")->capture_default_str();
    chain->add_option("--precision", ch.precision, "table or full")->check(CLI::IsMember({"table", "full"}));
    ch.model.add(chain);

    PlotArgs pl;
    auto* plot = app.add_subcommand("plot-data", "Reshape reports and tables into long-format plot data");
    plot->add_option("--metrics", pl.metrics, "Metrics CSV (repeatable)")->check(CLI::ExistingFile);
    plot->add_option("--table", pl.tables, "Equating table CSV (repeatable)")->check(CLI::ExistingFile);
    plot->add_option("--svg-dir", pl.svg_dir, "Also write one SVG line chart per panel here");
    plot->add_option("-o,--out", pl.out, "Output CSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitInput;
    }

    try {
        if (*equate) return cmd_equate(eq);
        if (*simulate) return cmd_simulate(sim);
        if (*chain) return cmd_chain(ch);
        if (*plot) return cmd_plot_data(pl);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitPipeline;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitPipeline;
    }
    return 0;
}

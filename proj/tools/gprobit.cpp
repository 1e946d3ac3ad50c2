// gprobit command-line tool: simulate | fit | fit-path | predict | evaluate | bench.

#include <gprobit/gprobit.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace gprobit;

namespace {

constexpr int kFormatVersion = 1;

enum Exit { ok = 0, io = 1, usage = 2, infeasible = 3, nonconvergence = 4 };

struct UsageError : Error {
    using Error::Error;
};

// ------------------------------------------------------------------ helpers

json to_json(const Vec& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json to_json(const Mat& m) {
    json a = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        a.push_back(std::move(row));
    }
    return a;
}

Mat mat_from_json(const json& a, const std::string& what) {
    if (!a.is_array() || a.empty()) throw UsageError("'" + what + "' must be a non-empty matrix");
    const auto rows = static_cast<Index>(a.size());
    const auto cols = static_cast<Index>(a[0].size());
    Mat m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        if (static_cast<Index>(a[static_cast<std::size_t>(i)].size()) != cols)
            throw UsageError("'" + what + "' has ragged rows");
        for (Index j = 0; j < cols; ++j) m(i, j) = a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
    }
    return m;
}

Vec vec_from_json(const json& a, const std::string& what) {
    if (!a.is_array() || a.empty()) throw UsageError("'" + what + "' must be a non-empty array");
    Vec v(static_cast<Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Index>(i)) = a[i].get<double>();
    return v;
}

json edge_list(const Mat& phi, double eps = 1e-8) {
    json e = json::array();
    for (Index g = 0; g < phi.rows(); ++g)
        for (Index h = g + 1; h < phi.cols(); ++h)
            if (std::abs(phi(g, h)) > eps) e.push_back({{"g", g + 1}, {"h", h + 1}, {"phi", phi(g, h)}});
    return e;
}

fs::path prepare_dir(const std::string& dir) {
    fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw std::ios_base::failure("cannot create output directory '" + dir + "': " + ec.message());
    return p;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::ios_base::failure("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw std::ios_base::failure("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::ios_base::failure("cannot open '" + path + "'");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw UsageError("'" + path + "' is not valid JSON: " + e.what());
    }
}

std::string fmt(double v) { return detail::fmt_double(v); }

std::string csv_header_comments(const json& config) {
    std::string s = "# format_version=" + std::to_string(kFormatVersion) + "\n";
    for (const auto& [k, v] : config.items()) s += "# " + k + "=" + (v.is_string() ? v.get<std::string>() : v.dump()) + "\n";
    return s;
}

Dataset load_data(const std::string& path) { return to_dataset(read_data_csv(path)); }

// --------------------------------------------------------------- options

struct EmOptions {
    int max_outer = 500;
    double outer_tol = 1e-5;
    int inner_sweeps = 1;
    double inner_tol = 1e-6;
    std::string moment_map = "auto";
    std::uint64_t seed = 0;

    void add(CLI::App* app) {
        app->add_option("--max-outer", max_outer, "Maximum outer EM iterations")->check(CLI::PositiveNumber);
        app->add_option("--tol", outer_tol, "Outer tolerance on the max parameter change")->check(CLI::PositiveNumber);
        app->add_option("--inner-sweeps", inner_sweeps, "Mean-field sweeps per E-step")->check(CLI::PositiveNumber);
        app->add_option("--inner-tol", inner_tol, "Inner tolerance on the max change of E[y*|y]")->check(CLI::PositiveNumber);
        app->add_option("--moment-map", moment_map, "Random-effect moment map")
            ->check(CLI::IsMember({"auto", "exact", "group-average"}));
        app->add_option("--seed", seed, "Seed for stochastic steps");
    }

    EMConfig config(unsigned threads) const {
        EMConfig c;
        c.max_outer = max_outer;
        c.outer_tol = outer_tol;
        c.inner_sweeps = inner_sweeps;
        c.inner_tol = inner_tol;
        c.seed = seed;
        c.threads = threads;
        if (moment_map == "exact") c.moment_map = MomentMap::exact;
        else if (moment_map == "group-average") c.moment_map = MomentMap::group_average;
        c.validate();
        return c;
    }

    json echo(const Dataset* data, const EMConfig& c) const {
        json j = {{"max_outer", max_outer}, {"outer_tol", outer_tol}, {"inner_sweeps", inner_sweeps},
                  {"inner_tol", inner_tol}, {"moment_map", moment_map}, {"seed", seed}};
        if (data) j["moment_map_resolved"] = to_string(resolve_moment_map(*data, c));
        return j;
    }
};

struct GibbsOptions {
    GibbsConfig g;
    void add(CLI::App* app, const std::string& prefix = "") {
        app->add_option("--" + prefix + "samples", g.n_samples, "Gibbs draws per E-step (first iteration)")
            ->check(CLI::PositiveNumber);
        app->add_option("--" + prefix + "burn-in", g.burn_in, "Gibbs burn-in scans")->check(CLI::NonNegativeNumber);
        app->add_option("--" + prefix + "thin", g.thin, "Gibbs thinning")->check(CLI::PositiveNumber);
        app->add_option("--" + prefix + "growth", g.growth, "Per-iteration growth of the draw count");
        app->add_option("--" + prefix + "max-samples", g.max_samples, "Cap on draws per E-step")
            ->check(CLI::PositiveNumber);
    }
    json echo() const {
        return {{"n_samples", g.n_samples}, {"burn_in", g.burn_in}, {"thin", g.thin}, {"growth", g.growth},
                {"max_samples", g.max_samples}};
    }
};

struct Common {
    unsigned threads = 0;
    bool no_timing = false;
    void add(CLI::App* app) {
        app->add_option("--threads", threads, "Worker threads (default: GPROBIT_THREADS or all cores)");
        app->add_flag("--no-timing", no_timing, "Write zero wall times so outputs are byte-reproducible");
    }
    double time(double t) const { return no_timing ? 0.0 : t; }
};

Estimator parse_estimator(const std::string& s) {
    if (s == "graphical") return Estimator::graphical;
    if (s == "diagonal") return Estimator::diagonal;
    if (s == "probit") return Estimator::probit;
    if (s == "mcem") return Estimator::mcem;
    throw UsageError("unknown estimator '" + s + "'");
}

json fit_to_json(const FitResult& f, const Dataset& data, const Common& common) {
    json j;
    j["estimator"] = to_string(f.estimator);
    j["random_effects"] = f.random_effects;
    j["moment_map"] = f.random_effects ? json(to_string(f.moment_map_used)) : json(nullptr);
    j["K"] = data.K;
    j["G"] = data.G;
    j["R"] = data.n_regions();
    j["beta"] = to_json(f.params.beta);
    j["matrix_order"] = "row-major, groups 1..G";
    j["phi"] = to_json(f.params.phi());
    j["sigma"] = to_json(f.params.sigma());
    j["edges"] = edge_list(f.params.phi());
    j["rho"] = f.rho;
    j["lambda_unit"] = f.lambda_unit;
    j["q_final"] = f.q_final;
    j["q_trajectory"] = f.q_trajectory;
    j["iterations"] = f.outer_iters;
    j["converged"] = f.converged;
    j["last_change"] = f.last_change;
    j["wall_time"] = common.time(f.wall_time);
    j["warnings"] = f.warnings;
    return j;
}

struct LoadedFit {
    ModelParams params;
    bool random_effects = true;
    std::string estimator;
    std::string path;
};

LoadedFit load_fit(const std::string& path) {
    const json j = read_json(path);
    if (!j.contains("format_version") || j["format_version"].get<int>() != kFormatVersion)
        throw UsageError("'" + path + "' has an unsupported format version");
    if (!j.contains("fit")) throw UsageError("'" + path + "' holds no fit");
    const json& f = j["fit"];
    LoadedFit out;
    out.params = ModelParams::from_precision(vec_from_json(f.at("beta"), "beta"), mat_from_json(f.at("phi"), "phi"));
    out.random_effects = f.value("random_effects", true);
    out.estimator = f.value("estimator", std::string("graphical"));
    out.path = path;
    return out;
}

void check_schema(const LoadedFit& f, const Dataset& d) {
    if (f.params.K() != d.K || f.params.G() != d.G)
        throw UsageError("fit '" + f.path + "' has K=" + std::to_string(f.params.K()) + ", G=" +
                         std::to_string(f.params.G()) + " but the data have K=" + std::to_string(d.K) +
                         ", G=" + std::to_string(d.G));
}

// Deterministic row-level split: a shuffled fraction of rows goes to training.
std::pair<Dataset, Dataset> split_rows(const Dataset& d, double frac, std::uint64_t seed) {
    if (!(frac > 0.0 && frac < 1.0)) throw UsageError("--split must lie strictly between 0 and 1");
    std::vector<RawRow> rows;
    for (const auto& b : d.regions) {
        for (Index i = 0; i < b.size(); ++i) {
            RawRow r;
            r.region = b.region_id;
            r.y = b.y(i);
            if (b.one_hot()) r.group = (*b.group_index)[static_cast<std::size_t>(i)] + 1;
            else
                for (Index g = 0; g < b.Z.cols(); ++g) r.z.push_back(b.Z(i, g));
            for (Index k = 0; k < b.X.cols(); ++k) r.x.push_back(b.X(i, k));
            r.line = rows.size() + 1;
            rows.push_back(std::move(r));
        }
    }
    std::vector<std::size_t> idx(rows.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.next() % i]);
    const auto n_train = static_cast<std::size_t>(std::llround(frac * static_cast<double>(rows.size())));
    if (n_train == 0 || n_train == rows.size()) throw UsageError("--split leaves one side empty");
    std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> te(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(tr.begin(), tr.end());
    std::sort(te.begin(), te.end());
    std::vector<RawRow> a, b;
    for (auto i : tr) a.push_back(rows[i]);
    for (auto i : te) b.push_back(rows[i]);
    if (!d.one_hot()) return {validate_dataset(a), validate_dataset(b)};
    const int G = static_cast<int>(d.G);
    return {validate_dataset(a, G), validate_dataset(b, G)};
}

FitResult run_fit(const Dataset& data, Estimator est, const EMConfig& cfg, const GibbsConfig& gibbs,
                  std::optional<double> rho) {
    switch (est) {
        case Estimator::graphical: return rho ? fit_glasso(data, cfg, *rho) : fit_ml(data, cfg);
        case Estimator::diagonal: return fit_diagonal(data, cfg);
        case Estimator::probit: return fit_plain_probit(data);
        case Estimator::mcem: {
            GibbsConfig g = gibbs;
            g.seed = cfg.seed;
            const double lam = rho ? unit_penalty(*rho, data.n_regions()) : 0.0;
            FitResult f = mcem_fit(data, cfg, g, rho ? PhiRule{PhiRule::penalized, lam} : PhiRule{PhiRule::ml, 0.0});
            if (rho) f.rho = *rho, f.lambda_unit = lam;
            return f;
        }
    }
    throw UsageError("unknown estimator");
}

json roc_json(const RocCurve& c) {
    json pts = json::array();
    for (const auto& p : c.points)
        pts.push_back({{"threshold", std::isfinite(p.threshold) ? json(p.threshold) : json("inf")}, {"fpr", p.fpr}, {"tpr", p.tpr}});
    return pts;
}

void dump_trajectory(const FitResult& f) {
    std::cerr << "error: no convergence after " << f.outer_iters << " outer iterations (last change " << f.last_change
              << ")\nQ trajectory:";
    for (double q : f.q_trajectory) std::cerr << " " << fmt(q);
    std::cerr << "\n";
}

// --------------------------------------------------------------- commands

int cmd_simulate(const SimDesign& d, const std::string& out, bool with_test) {
    d.validate();
    const fs::path dir = prepare_dir(out);
    const SimTruth truth = gen_truth(d);
    const SimSample smp = gen_sample(d, truth, 0, with_test);
    const json config = {{"command", "simulate"}, {"N", d.N},         {"G", d.G},
                         {"R", d.R},              {"beta", d.beta}, {"edge_prob_scale", d.edge_prob_scale},
                         {"seed", d.seed}};
    auto write = [&](const fs::path& p, const Dataset& ds) {
        std::ostringstream s;
        s << csv_header_comments(config);
        write_data_csv(s, ds);
        write_text(p, s.str());
    };
    write(dir / "data.csv", smp.train);
    if (with_test) write(dir / "test.csv", smp.test);
    json t;
    t["format_version"] = kFormatVersion;
    t["config"] = config;
    t["beta"] = {d.beta};
    t["support"] = to_json(Mat(truth.groups.support.cast<double>()));
    t["theta"] = to_json(truth.groups.theta);
    t["sigma"] = to_json(truth.groups.sigma);
    t["diagonal_shift"] = truth.groups.shift;
    t["edges"] = truth.groups.support.sum() / 2;
    write_json(dir / "truth.json", t);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixed probit with correlated group random effects: EM fitting, penalized paths, "
                 "standard errors, prediction and simulation benchmarks"};
    app.require_subcommand(1);

    // simulate
    SimDesign sim;
    std::string sim_out = ".";
    bool sim_test = false;
    auto* simulate = app.add_subcommand("simulate", "Generate a simulated dataset and its ground truth");
    simulate->add_option("--n", sim.N, "Observations per region")->check(CLI::PositiveNumber);
    simulate->add_option("--g", sim.G, "Groups")->check(CLI::PositiveNumber);
    simulate->add_option("--r", sim.R, "Regions")->check(CLI::PositiveNumber);
    simulate->add_option("--beta", sim.beta, "True slope");
    simulate->add_option("--edge-scale", sim.edge_prob_scale, "Edge probability is this value over G");
    simulate->add_option("--seed", sim.seed, "Seed");
    simulate->add_option("--out", sim_out, "Output directory");
    simulate->add_flag("--test", sim_test, "Also write test.csv (same regions and effects, fresh rows)");

    // fit
    Common fit_common;
    EmOptions fit_em;
    GibbsOptions fit_gibbs;
    std::string fit_data, fit_out = ".", fit_estimator = "graphical";
    bool fit_se = false, fit_pen = false;
    double fit_rho = 0.0;
    auto* fit = app.add_subcommand("fit", "Fit one model");
    fit->add_option("--data", fit_data, "Data CSV")->required();
    fit->add_option("--out", fit_out, "Output directory");
    fit->add_option("--estimator", fit_estimator, "Estimator")
        ->check(CLI::IsMember({"graphical", "diagonal", "probit", "mcem"}));
    fit->add_flag("--penalized", fit_pen, "Graphical-lasso M-step at --rho");
    fit->add_option("--rho", fit_rho, "Penalty on the expected log-likelihood scale")->check(CLI::NonNegativeNumber);
    fit->add_flag("--se", fit_se, "Also write Louis standard errors to se.json");
    fit_em.add(fit);
    fit_gibbs.add(fit);
    fit_common.add(fit);

    // fit-path
    Common path_common;
    EmOptions path_em;
    std::string path_data, path_out = ".", path_truth;
    std::vector<double> path_grid;
    int path_points = 20;
    double path_ratio = 100.0;
    auto* fitpath = app.add_subcommand("fit-path", "Penalized path over a decreasing rho grid with BIC selection");
    fitpath->add_option("--data", path_data, "Data CSV")->required();
    fitpath->add_option("--out", path_out, "Output directory");
    fitpath->add_option("--truth", path_truth, "truth.json from simulate; adds netroc.csv");
    fitpath->add_option("--rho", path_grid, "Explicit grid (strictly decreasing)");
    fitpath->add_option("--points", path_points, "Default grid size")->check(CLI::PositiveNumber);
    fitpath->add_option("--ratio", path_ratio, "Default grid span rho_max / rho_min")->check(CLI::PositiveNumber);
    path_em.add(fitpath);
    path_common.add(fitpath);

    // predict
    Common pred_common;
    EmOptions pred_em;
    std::string pred_fit, pred_data, pred_train, pred_out = ".";
    auto* predict_cmd = app.add_subcommand("predict", "Score rows with a fitted model");
    predict_cmd->add_option("--fit", pred_fit, "fit.json")->required();
    predict_cmd->add_option("--data", pred_data, "Rows to score")->required();
    predict_cmd->add_option("--train", pred_train, "Training data; regions seen there use their posterior effects");
    predict_cmd->add_option("--out", pred_out, "Output directory");
    pred_em.add(predict_cmd);
    pred_common.add(predict_cmd);

    // evaluate
    Common ev_common;
    EmOptions ev_em;
    GibbsOptions ev_gibbs;
    std::vector<std::string> ev_fits, ev_estimators;
    std::string ev_data, ev_train, ev_out = ".";
    double ev_threshold = 0.5, ev_split = 0.0;
    std::uint64_t ev_seed = 0;
    auto* evaluate = app.add_subcommand("evaluate", "ROC, AUC and class-conditional accuracy on held-out rows");
    evaluate->add_option("--fit", ev_fits, "fit.json (repeatable; one report row each)");
    evaluate->add_option("--estimator", ev_estimators, "With --split: estimators to fit on the training part")
        ->check(CLI::IsMember({"graphical", "diagonal", "probit", "mcem"}));
    evaluate->add_option("--data", ev_data, "Test rows, or the full data with --split")->required();
    evaluate->add_option("--train", ev_train, "Training data for posterior effects of known regions");
    evaluate->add_option("--split", ev_split, "Training fraction of a random row split of --data");
    evaluate->add_option("--split-seed", ev_seed, "Seed of the split");
    evaluate->add_option("--threshold", ev_threshold, "Classification threshold")->check(CLI::Range(0.0, 1.0));
    evaluate->add_option("--out", ev_out, "Output directory");
    ev_em.add(evaluate);
    ev_gibbs.add(evaluate);
    ev_common.add(evaluate);

    // bench
    Common bench_common;
    EmOptions bench_em;
    GibbsOptions bench_gibbs;
    SimDesign bench_design;
    std::vector<std::string> bench_suites{"table2", "roc", "netroc"};
    std::vector<std::string> bench_estimators{"group-average", "exact", "mcem"};
    std::string bench_out = ".";
    int bench_reps = 10, bench_points = 20;
    double bench_mcem_tol = 1e-3;
    int bench_mcem_max_outer = 500;
    auto* bench = app.add_subcommand("bench", "Simulation benchmark: table2.csv, roc.csv, netroc.csv");
    bench->add_option("--suite", bench_suites, "Suites to run")->check(CLI::IsMember({"table2", "roc", "netroc"}));
    bench->add_option("--estimators", bench_estimators, "Table-2 estimators")
        ->check(CLI::IsMember({"group-average", "exact", "mcem"}));
    bench->add_option("--n", bench_design.N, "Observations per region")->check(CLI::PositiveNumber);
    bench->add_option("--g", bench_design.G, "Groups")->check(CLI::PositiveNumber);
    bench->add_option("--r", bench_design.R, "Regions")->check(CLI::PositiveNumber);
    bench->add_option("--edge-scale", bench_design.edge_prob_scale, "Edge probability is this value over G");
    bench->add_option("--reps", bench_reps, "Replications")->check(CLI::PositiveNumber);
    bench->add_option("--points", bench_points, "Grid size of the network-ROC path")->check(CLI::PositiveNumber);
    bench->add_option("--mcem-tol", bench_mcem_tol, "Outer tolerance of MCEM fits")->check(CLI::PositiveNumber);
    bench->add_option("--mcem-max-outer", bench_mcem_max_outer, "Outer iteration cap of MCEM fits")
        ->check(CLI::PositiveNumber);
    bench->add_option("--out", bench_out, "Output directory");
    bench_em.add(bench);
    bench_gibbs.add(bench, "mcem-");
    bench_common.add(bench);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? ok : usage;
    }

    try {
        if (*simulate) {
            return cmd_simulate(sim, sim_out, sim_test);
        }

        if (*fit) {
            const Dataset data = load_data(fit_data);
            const EMConfig cfg = fit_em.config(fit_common.threads);
            fit_gibbs.g.validate();
            const Estimator est = parse_estimator(fit_estimator);
            if (fit_pen && (est == Estimator::diagonal || est == Estimator::probit))
                throw UsageError("--penalized applies to the graphical and mcem estimators");
            if (!fit_pen && fit->count("--rho")) throw UsageError("--rho needs --penalized");
            if (fit_se && fit_pen) throw UsageError("standard errors are not defined for the penalized estimator");
            if (fit_se && (est == Estimator::graphical || est == Estimator::diagonal) &&
                resolve_moment_map(data, cfg) != MomentMap::group_average)
                throw UsageError("--se needs the group-average moment map (pass --moment-map group-average)");
            const FitResult f = fit_pen ? run_fit(data, est, cfg, fit_gibbs.g, fit_rho)
                                        : run_fit(data, est, cfg, fit_gibbs.g, std::nullopt);

            json config = {{"command", "fit"}, {"data", fit_data}, {"estimator", fit_estimator},
                           {"penalized", fit_pen}, {"rho", fit_rho}, {"em", fit_em.echo(&data, cfg)}};
            if (est == Estimator::mcem) config["gibbs"] = fit_gibbs.echo();
            const fs::path dir = prepare_dir(fit_out);
            json j = {{"format_version", kFormatVersion}, {"config", config}, {"fit", fit_to_json(f, data, fit_common)}};
            write_json(dir / "fit.json", j);
            if (!f.converged) {
                dump_trajectory(f);
                return nonconvergence;
            }
            if (fit_se) {
                const SeReport se = fit_standard_errors(data, f, cfg);
                json rows = json::array();
                for (Index p = 0; p < se.se.size(); ++p) {
                    const auto& lab = se.labels[static_cast<std::size_t>(p)];
                    double est_v = 0.0;
                    if (p < data.K) {
                        est_v = f.params.beta(p);
                    } else {
                        const auto pr = precision_pairs(data.G)[static_cast<std::size_t>(p - data.K)];
                        est_v = f.params.phi()(pr.first, pr.second);
                    }
                    rows.push_back({{"parameter", lab}, {"estimate", est_v}, {"se", se.se(p)}});
                }
                write_json(dir / "se.json", {{"format_version", kFormatVersion},
                                             {"config", config},
                                             {"parameters", rows},
                                             {"warnings", se.warnings}});
            }
            return ok;
        }

        if (*fitpath) {
            const Dataset data = load_data(path_data);
            const EMConfig cfg = path_em.config(path_common.threads);
            std::vector<double> grid = path_grid.empty() ? default_rho_grid(data, cfg, path_points, path_ratio) : path_grid;
            const PathResult path = fit_penalized(data, cfg, grid);
            json fits = json::array();
            for (std::size_t k = 0; k < path.fits.size(); ++k) {
                const auto& f = path.fits[k];
                fits.push_back({{"rho", path.rho_grid[k]},
                                {"lambda_unit", f.lambda_unit},
                                {"bic", path.bic[k]},
                                {"q_final", f.q_final},
                                {"beta", to_json(f.params.beta)},
                                {"phi_diagonal", to_json(Vec(f.params.phi().diagonal()))},
                                {"edges", edge_list(f.params.phi())},
                                {"n_edges", count_edges(f.params.phi())},
                                {"iterations", f.outer_iters},
                                {"converged", f.converged},
                                {"wall_time", path_common.time(f.wall_time)}});
            }
            json config = {{"command", "fit-path"}, {"data", path_data}, {"em", path_em.echo(&data, cfg)},
                           {"points", path_points}, {"ratio", path_ratio}};
            const fs::path dir = prepare_dir(path_out);
            const auto& sel = path.fits[static_cast<std::size_t>(path.selected_index)];
            write_json(dir / "path.json", {{"format_version", kFormatVersion},
                                           {"config", config},
                                           {"rho_grid", path.rho_grid},
                                           {"bic", path.bic},
                                           {"selected_index", path.selected_index},
                                           {"selected", fit_to_json(sel, data, path_common)},
                                           {"fits", fits}});
            if (!path_truth.empty()) {
                const json t = read_json(path_truth);
                const Mat sup = mat_from_json(t.at("support"), "support");
                if (sup.rows() != data.G) throw UsageError("truth support does not match the data's G");
                std::vector<Mat> phis;
                for (const auto& f : path.fits) phis.push_back(f.params.phi());
                const auto pts = network_roc(phis, sup.cast<int>(), path.rho_grid);
                std::ostringstream s;
                s << csv_header_comments({{"command", "fit-path"}, {"data", path_data}, {"truth", path_truth}});
                s << "rho,fpr,tpr\n";
                for (const auto& p : pts) s << fmt(p.threshold) << "," << fmt(p.fpr) << "," << fmt(p.tpr) << "\n";
                write_text(dir / "netroc.csv", s.str());
            }
            bool all = true;
            for (const auto& f : path.fits) all = all && f.converged;
            if (!all) {
                std::cerr << "error: at least one path point did not converge (see path.json)\n";
                return nonconvergence;
            }
            return ok;
        }

        if (*predict_cmd) {
            const LoadedFit lf = load_fit(pred_fit);
            const Dataset data = load_data(pred_data);
            check_schema(lf, data);
            const EMConfig cfg = pred_em.config(pred_common.threads);
            Predictor pr;
            pr.params = lf.params;
            pr.random_effects = lf.random_effects;
            if (!pred_train.empty() && lf.random_effects) {
                const Dataset train = load_data(pred_train);
                check_schema(lf, train);
                pr.posterior = region_posteriors(train, lf.params, cfg);
            }
            std::ostringstream s;
            s << csv_header_comments({{"command", "predict"}, {"fit", pred_fit}, {"data", pred_data},
                                      {"train", pred_train}});
            s << "region,row,y,score\n";
            for (const auto& b : data.regions) {
                const Vec p = pr(b);
                for (Index i = 0; i < b.size(); ++i)
                    s << b.region_id << "," << i + 1 << "," << b.y(i) << "," << fmt(p(i)) << "\n";
            }
            write_text(prepare_dir(pred_out) / "scores.csv", s.str());
            return ok;
        }

        if (*evaluate) {
            const EMConfig cfg = ev_em.config(ev_common.threads);
            Dataset full = load_data(ev_data);
            Dataset test, train;
            struct Row {
                std::string name;
                Predictor pr;
            };
            std::vector<Row> rows;
            if (ev_split > 0.0) {
                if (!ev_fits.empty()) throw UsageError("--split fits its own models; drop --fit");
                std::tie(train, test) = split_rows(full, ev_split, ev_seed);
                if (ev_estimators.empty()) ev_estimators = {"graphical", "diagonal", "probit"};
                for (const auto& e : ev_estimators) {
                    const FitResult f = run_fit(train, parse_estimator(e), cfg, ev_gibbs.g, std::nullopt);
                    rows.push_back({e, make_predictor(train, f, cfg)});
                }
            } else {
                if (ev_fits.empty()) throw UsageError("give --fit files, or --split to fit on part of --data");
                if (!ev_estimators.empty()) throw UsageError("--estimator needs --split");
                test = std::move(full);
                if (!ev_train.empty()) train = load_data(ev_train);
                for (const auto& path : ev_fits) {
                    const LoadedFit lf = load_fit(path);
                    check_schema(lf, test);
                    Predictor pr;
                    pr.params = lf.params;
                    pr.random_effects = lf.random_effects;
                    if (!ev_train.empty() && lf.random_effects) {
                        check_schema(lf, train);
                        pr.posterior = region_posteriors(train, lf.params, cfg);
                    }
                    rows.push_back({lf.estimator + " (" + path + ")", std::move(pr)});
                }
            }
            const std::vector<int> labels = labels_of(test);
            json report = json::array();
            for (const auto& r : rows) {
                const auto scores = scores_of(test, r.pr);
                const RocCurve c = roc_curve(scores, labels);
                const ClassTable t = classification_table(scores, labels, ev_threshold);
                report.push_back({{"model", r.name},
                                  {"auc", c.auc},
                                  {"pct_correct_nonfailed", t.pct_correct_nonfailed},
                                  {"pct_correct_failed", t.pct_correct_failed},
                                  {"roc", roc_json(c)}});
            }
            json config = {{"command", "evaluate"}, {"data", ev_data},       {"train", ev_train},
                           {"fits", ev_fits},       {"split", ev_split},     {"split_seed", ev_seed},
                           {"threshold", ev_threshold}, {"estimators", ev_estimators}, {"em", ev_em.echo(nullptr, cfg)}};
            write_json(prepare_dir(ev_out) / "report.json",
                       {{"format_version", kFormatVersion}, {"config", config}, {"rows", report}});
            return ok;
        }

        if (*bench) {
            bench_design.seed = bench_em.seed;
            bench_design.validate();
            BenchConfig bc;
            bc.reps = bench_reps;
            bc.em = bench_em.config(1);
            bc.em.max_outer = bench_em.max_outer;
            bc.gibbs = bench_gibbs.g;
            bc.gibbs.validate();
            bc.mcem_tol = bench_mcem_tol;
            bc.mcem_max_outer = bench_mcem_max_outer;
            bc.threads = resolve_threads(bench_common.threads);
            const fs::path dir = prepare_dir(bench_out);
            json config = {{"command", "bench"},
                           {"N", bench_design.N},
                           {"G", bench_design.G},
                           {"R", bench_design.R},
                           {"edge_prob_scale", bench_design.edge_prob_scale},
                           {"reps", bench_reps},
                           {"seed", bench_design.seed},
                           {"em", bench_em.echo(nullptr, bc.em)},
                           {"gibbs", bench_gibbs.echo()},
                           {"mcem_tol", bench_mcem_tol},
                           {"mcem_max_outer", bench_mcem_max_outer}};
            auto has = [&](const std::string& s) {
                return std::find(bench_suites.begin(), bench_suites.end(), s) != bench_suites.end();
            };
            if (has("table2")) {
                const auto rows = run_table2(bench_design, bc, bench_estimators);
                std::ostringstream s;
                s << csv_header_comments(config) << "N,G,R,estimator,bias,rmse,seconds\n";
                for (const auto& r : rows)
                    s << r.N << "," << r.G << "," << r.R << "," << r.estimator << "," << fmt(r.bias) << "," << fmt(r.rmse)
                      << "," << fmt(bench_common.time(r.seconds)) << "\n";
                write_text(dir / "table2.csv", s.str());
            }
            if (has("roc")) {
                const RocComparison rc = run_roc(bench_design, bc);
                std::ostringstream s;
                s << csv_header_comments(config);
                for (std::size_t e = 0; e < rc.estimators.size(); ++e) {
                    double m = 0.0;
                    for (double a : rc.auc[e]) m += a;
                    s << "# mean_auc_" << rc.estimators[e] << "=" << fmt(m / static_cast<double>(rc.auc[e].size())) << "\n";
                }
                s << "estimator,threshold,fpr,tpr\n";
                for (std::size_t e = 0; e < rc.estimators.size(); ++e)
                    for (const auto& p : rc.pooled[e].points)
                        s << rc.estimators[e] << "," << (std::isfinite(p.threshold) ? fmt(p.threshold) : "inf") << ","
                          << fmt(p.fpr) << "," << fmt(p.tpr) << "\n";
                write_text(dir / "roc.csv", s.str());
            }
            if (has("netroc")) {
                const NetRocResult nr = run_netroc(bench_design, bc, bench_points);
                std::ostringstream s;
                s << csv_header_comments(config);
                double m = 0.0;
                for (double a : nr.auc) m += a;
                s << "# mean_auc=" << fmt(m / static_cast<double>(nr.auc.size())) << "\n";
                s << "replication,rho,fpr,tpr\n";
                for (std::size_t r = 0; r < nr.points.size(); ++r)
                    for (const auto& p : nr.points[r])
                        s << r + 1 << "," << fmt(p.threshold) << "," << fmt(p.fpr) << "," << fmt(p.tpr) << "\n";
                write_text(dir / "netroc.csv", s.str());
            }
            return ok;
        }
    } catch (const std::ios_base::failure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return io;
    } catch (const InfeasibleError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return infeasible;
    } catch (const ConvergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return nonconvergence;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return nonconvergence;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return usage;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed input: " << e.what() << "\n";
        return usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return io;
    }
    return ok;
}

#include "msmm/cli.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "msmm/data.hpp"
#include "msmm/errors.hpp"
#include "msmm/estimator.hpp"
#include "msmm/inference.hpp"
#include "msmm/simulation.hpp"

namespace msmm::cli {

namespace {

std::string shortest(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

std::string six_digits(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

std::string cell_text(const Cell& cell, bool full_precision) {
    if (const auto* s = std::get_if<std::string>(&cell)) return *s;
    if (const auto* i = std::get_if<long long>(&cell)) return std::to_string(*i);
    const double d = std::get<double>(cell);
    return full_precision ? shortest(d) : six_digits(d);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    return out + "\"";
}

nlohmann::json cell_json(const Cell& cell) {
    if (const auto* s = std::get_if<std::string>(&cell)) return *s;
    if (const auto* i = std::get_if<long long>(&cell)) return *i;
    const double d = std::get<double>(cell);
    if (!std::isfinite(d)) return nullptr;
    return d;
}

struct CommonArgs {
    std::string data;
    std::string outcome = "y";
    std::string treatment = "z";
    std::string mediator = "m";
    std::string covariates;
    std::string basis = "Z,M";
    std::string weights;
    std::string augment;
    std::string centering = "empirical";
    std::size_t bootstrap = 0;
    unsigned long long seed = kDefaultSeed;
    double level = 0.95;
    std::string format = "table";
    std::string out;
    bool force = false;
    bool drop_incomplete = false;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_bootstrap) {
    cmd->add_option("--data", a.data, "CSV file with a header row")->required();
    cmd->add_option("--outcome", a.outcome, "outcome column (non-negative counts)")
        ->capture_default_str();
    cmd->add_option("--treatment", a.treatment, "treatment column (0/1)")->capture_default_str();
    cmd->add_option("--mediator", a.mediator, "mediator column")->capture_default_str();
    cmd->add_option("--covariates", a.covariates, "comma-separated covariate columns");
    cmd->add_option("--basis", a.basis, "basis terms, e.g. Z,M,Z:M,Z:x1,M:x1")
        ->capture_default_str();
    cmd->add_option("--weights", a.weights,
                    "weight terms, e.g. Z,Z:x1 (default: Z plus Z:<c> for every covariate)");
    cmd->add_option("--augment", a.augment,
                    "working-model covariates for exp(b0 + X b); '-1' drops the intercept");
    cmd->add_option("--centering", a.centering, "empirical | ols | known[:p]")
        ->capture_default_str();
    if (with_bootstrap)
        cmd->add_option("--bootstrap", a.bootstrap, "bootstrap replicates (>= 50)");
    cmd->add_option("--seed", a.seed, "random seed")->capture_default_str();
    cmd->add_option("--level", a.level, "confidence level")->capture_default_str();
    cmd->add_option("--format", a.format, "table | csv | json")
        ->check(CLI::IsMember({"table", "csv", "json"}))
        ->capture_default_str();
    cmd->add_option("--out", a.out, "write the report to this file");
    cmd->add_flag("--force", a.force, "estimate even when identification is weak");
    cmd->add_flag("--drop-incomplete", a.drop_incomplete,
                  "drop rows with missing cells instead of failing");
}

Format parse_format(const std::string& s) {
    if (s == "csv") return Format::Csv;
    if (s == "json") return Format::Json;
    return Format::Table;
}

struct Prepared {
    LoadResult loaded;
    EffectSpec spec;
    Centering centering;
};

Prepared prepare(const CommonArgs& a) {
    ColumnMapping mapping{a.outcome, a.treatment, a.mediator, split_list(a.covariates)};
    LoadResult loaded = load_csv(a.data, mapping, a.drop_incomplete);
    const auto& names = loaded.data.covariate_names();
    EffectSpec spec;
    spec.basis = parse_basis(a.basis, names);
    if (a.weights.empty()) {
        std::string w = "Z";
        for (const auto& c : names) w += ",Z:" + c;
        spec.weights = parse_weights(w, names);
    } else {
        spec.weights = parse_weights(a.weights, names);
    }
    if (!a.augment.empty()) spec.augmentation = parse_augmentation(a.augment, names);
    spec.validate(loaded.data.p());
    return Prepared{std::move(loaded), std::move(spec), parse_centering(a.centering)};
}

std::string join_labels(const EffectSpec& spec, bool basis) {
    std::string s;
    if (basis) {
        for (const auto& t : spec.basis) s += (s.empty() ? "" : ",") + t.label;
    } else {
        for (const auto& t : spec.weights) s += (s.empty() ? "" : ",") + t.label;
    }
    return s;
}

void base_header(Report& r, const CommonArgs& a, const Prepared& p) {
    r.header = {
        {"seed", std::to_string(a.seed)},
        {"data", a.data},
        {"n", std::to_string(p.loaded.data.n())},
        {"dropped_rows", std::to_string(p.loaded.dropped_rows)},
        {"basis", join_labels(p.spec, true)},
        {"weights", join_labels(p.spec, false)},
        {"centering", to_string(p.centering.kind)},
        {"level", shortest(a.level)},
    };
    if (p.spec.augmentation) r.header.emplace_back("augment", a.augment);
}

Table identification_table(const IdentificationDiagnostics& d) {
    Table t{"identification", {"metric", "value"}, {}};
    t.rows.push_back({std::string("min_eigenvalue_cov_h"), d.min_eigenvalue});
    t.rows.push_back({std::string("mean_diagonal_cov_h"), d.mean_diagonal});
    t.rows.push_back({std::string("jacobian_condition"), d.jacobian_condition});
    t.rows.push_back({std::string("min_canonical_correlation"), d.min_canonical_correlation});
    t.rows.push_back({std::string("first_stage_statistic"), d.first_stage_statistic});
    t.rows.push_back({std::string("weak"), static_cast<long long>(d.weak ? 1 : 0)});
    return t;
}

std::vector<Contrast> contrasts_for(const EffectSpec& spec) {
    const bool has_z = std::any_of(spec.basis.begin(), spec.basis.end(),
                                   [](const BasisTerm& t) { return t.depends_on_treatment(); });
    const bool has_m = std::any_of(spec.basis.begin(), spec.basis.end(),
                                   [](const BasisTerm& t) { return t.depends_on_mediator(); });
    std::vector<Contrast> out;
    for (auto& c : default_contrasts())
        if ((c.z == c.z_ref || has_z) && (c.m == c.m_ref || has_m)) out.push_back(c);
    return out;
}

int emit(const Report& report, const CommonArgs& a, std::ostream& out) {
    if (a.out.empty()) {
        render(out, report, parse_format(a.format));
        return kExitSuccess;
    }
    std::ofstream file(a.out);
    if (!file) throw Error(ErrorCode::InvalidArgument, "cannot write '" + a.out + "'");
    render(file, report, parse_format(a.format));
    return kExitSuccess;
}

int cmd_check_id(const CommonArgs& a, std::ostream& out) {
    const Prepared p = prepare(a);
    const auto diag = identification_check(p.spec, p.loaded.data, p.centering);
    Report r;
    r.command = "check-id";
    base_header(r, a, p);
    r.header.emplace_back("identified", diag.weak ? "weak" : "yes");
    if (diag.weak) r.warnings.push_back("weak identification: " + diag.reason);
    r.tables.push_back(identification_table(diag));
    emit(r, a, out);
    return diag.weak ? kExitWeakIdentification : kExitSuccess;
}

int cmd_estimate(const CommonArgs& a, std::ostream& out, std::ostream& err) {
    const Prepared p = prepare(a);
    const Dataset& data = p.loaded.data;
    const auto diag = identification_check(p.spec, data, p.centering);
    if (diag.weak && !a.force) {
        err << "msmm estimate: identification: weak identification (" << diag.reason
            << "); rerun with --force to estimate anyway\n";
        return kExitWeakIdentification;
    }
    if (a.bootstrap != 0 && a.bootstrap < 50)
        throw Error(ErrorCode::InvalidArgument, "--bootstrap needs B >= 50");

    SolveOptions opt;
    opt.centering = p.centering;
    opt.level = a.level;
    EstimationResult result = solve(p.spec, data, opt);

    std::optional<BootstrapRun> run;
    if (a.bootstrap) {
        BootstrapOptions bo;
        bo.replicates = a.bootstrap;
        bo.seed = a.seed;
        bo.level = a.level;
        bo.solve = opt;
        run = bootstrap(p.spec, data, bo);
        attach_wald_intervals(result, run->covariance, a.level, VarianceMethod::Bootstrap);
    }
    const auto effects = controlled_effects(result, p.spec, contrasts_for(p.spec), data.p());

    Report r;
    r.command = "estimate";
    base_header(r, a, p);
    r.header.emplace_back("variance", to_string(result.variance_method));
    r.header.emplace_back("start", result.start);
    r.header.emplace_back("iterations", std::to_string(result.iterations));
    r.header.emplace_back("gmm_objective", shortest(result.gmm_objective));
    if (run) {
        r.header.emplace_back("bootstrap_replicates", std::to_string(run->replicates));
        r.header.emplace_back("bootstrap_failures", std::to_string(run->failures));
    }
    if (diag.weak) r.warnings.push_back("weak identification (forced): " + diag.reason);

    Table params{"parameters", {"term", "estimate", "std_error", "ci_lower", "ci_upper"}, {}};
    if (run) {
        params.columns.emplace_back("pct_lower");
        params.columns.emplace_back("pct_upper");
    }
    const VectorXd all = result.params();
    for (Eigen::Index k = 0; k < all.size(); ++k) {
        std::vector<Cell> row{result.labels[static_cast<std::size_t>(k)], all[k],
                              result.std_errors[k], result.ci_lower[k], result.ci_upper[k]};
        if (run) {
            row.emplace_back(run->percentile_lower[k]);
            row.emplace_back(run->percentile_upper[k]);
        }
        params.rows.push_back(std::move(row));
    }
    Table eff{"effects",
              {"effect", "log_effect", "std_error", "rate_ratio", "ci_lower", "ci_upper"},
              {}};
    for (const auto& e : effects)
        eff.rows.push_back({e.label, e.log_effect, e.std_error, e.rate_ratio, e.rr_lower, e.rr_upper});
    r.tables.push_back(std::move(eff));
    r.tables.push_back(std::move(params));
    r.tables.push_back(identification_table(diag));
    return emit(r, a, out);
}

int cmd_bootstrap(const CommonArgs& a, std::ostream& out, std::ostream& err) {
    const Prepared p = prepare(a);
    const auto diag = identification_check(p.spec, p.loaded.data, p.centering);
    if (diag.weak && !a.force) {
        err << "msmm bootstrap: identification: weak identification (" << diag.reason
            << "); rerun with --force to continue\n";
        return kExitWeakIdentification;
    }
    BootstrapOptions bo;
    bo.replicates = a.bootstrap ? a.bootstrap : 500;
    bo.seed = a.seed;
    bo.level = a.level;
    bo.solve.centering = p.centering;
    bo.solve.level = a.level;
    const BootstrapRun run = bootstrap(p.spec, p.loaded.data, bo);

    Report r;
    r.command = "bootstrap";
    base_header(r, a, p);
    r.header.emplace_back("replicates", std::to_string(run.replicates));
    r.header.emplace_back("failures", std::to_string(run.failures));
    std::vector<std::string> labels;
    for (const auto& t : p.spec.basis) labels.push_back(t.label);
    if (p.spec.augmentation) {
        if (p.spec.augmentation->intercept) labels.emplace_back("beta:(Intercept)");
        for (auto j : p.spec.augmentation->covariates)
            labels.push_back("beta:" + p.loaded.data.covariate_names()[j]);
    }
    Table t{"bootstrap",
            {"term", "estimate", "bootstrap_se", "pct_lower", "pct_upper", "normal_lower",
             "normal_upper"},
            {}};
    for (Eigen::Index k = 0; k < run.estimate.size(); ++k)
        t.rows.push_back({labels[static_cast<std::size_t>(k)], run.estimate[k], run.std_errors[k],
                          run.percentile_lower[k], run.percentile_upper[k], run.normal_lower[k],
                          run.normal_upper[k]});
    r.tables.push_back(std::move(t));
    return emit(r, a, out);
}

int cmd_compare(const CommonArgs& a, const std::string& interval, std::ostream& out,
                std::ostream& err) {
    const Prepared p = prepare(a);
    const auto diag = identification_check(p.spec, p.loaded.data, p.centering);
    if (diag.weak && !a.force) {
        err << "msmm compare: identification: weak identification (" << diag.reason
            << "); rerun with --force to continue\n";
        return kExitWeakIdentification;
    }
    CompareOptions co;
    co.bootstrap.replicates = a.bootstrap ? a.bootstrap : 500;
    co.bootstrap.seed = a.seed;
    co.bootstrap.level = a.level;
    co.bootstrap.solve.centering = p.centering;
    co.bootstrap.solve.level = a.level;
    co.proposed_interval = parse_interval_kind(interval);
    if (co.proposed_interval != IntervalKind::Sandwich && co.bootstrap.replicates < 50)
        throw Error(ErrorCode::InvalidArgument, "--bootstrap needs B >= 50");
    const ComparisonReport report = compare_report(p.spec, p.loaded.data, co);

    Report r;
    r.command = "compare";
    base_header(r, a, p);
    r.header.emplace_back("proposed_interval", to_string(report.proposed_interval));
    if (report.proposed_interval != IntervalKind::Sandwich) {
        r.header.emplace_back("bootstrap_replicates", std::to_string(report.replicates));
        r.header.emplace_back("bootstrap_failures", std::to_string(report.bootstrap_failures));
    }
    r.header.emplace_back("quasi_dispersion", shortest(report.quasi_dispersion));
    Table t{"comparison", {"effect", "method", "estimate", "std_error", "rr", "ci_lower", "ci_upper"},
            {}};
    for (const auto& row : report.rows)
        t.rows.push_back({row.effect, row.method, row.estimate, row.std_error, row.rate_ratio,
                          row.ci_lower, row.ci_upper});
    r.tables.push_back(std::move(t));
    return emit(r, a, out);
}

struct SimulateArgs {
    std::string scenario;
    std::string out = ".";
    std::string estimators;
    std::string emit_data;
    std::size_t rep = 0;
    std::string format = "table";
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
    const SimScenario scenario = load_scenario(a.scenario);
    if (!a.emit_data.empty()) {
        save_csv(a.emit_data, generate(scenario, a.rep).data);
        out << "wrote replication " << a.rep << " of " << a.scenario << " to " << a.emit_data
            << "\n";
        return kExitSuccess;
    }
    StudyOptions so;
    if (!a.estimators.empty()) {
        so.estimators.clear();
        for (const auto& e : split_list(a.estimators)) so.estimators.push_back(parse_estimator(e));
    }
    const StudyResult result = run_study(scenario, so);

    std::filesystem::create_directories(a.out);
    const auto dir = std::filesystem::path(a.out);
    {
        std::ofstream f(dir / "summary.csv");
        if (!f) throw Error(ErrorCode::InvalidArgument, "cannot write summary.csv in " + a.out);
        write_summary_csv(f, result.summary);
    }
    {
        std::ofstream f(dir / "replicates.csv");
        if (!f) throw Error(ErrorCode::InvalidArgument, "cannot write replicates.csv in " + a.out);
        write_replicates_csv(f, result.replicates);
    }

    Report r;
    r.command = "simulate";
    r.header = {{"seed", std::to_string(scenario.base_seed)},
                {"scenario", a.scenario},
                {"family", to_string(scenario.family)},
                {"n", std::to_string(scenario.n)},
                {"reps", std::to_string(scenario.reps)},
                {"theta_u", shortest(scenario.theta_u)},
                {"out", a.out}};
    Table t{"summary",
            {"estimator", "parameter", "truth", "mean_estimate", "bias", "sd", "mean_se", "rmse",
             "coverage", "failures"},
            {}};
    const double na = std::numeric_limits<double>::quiet_NaN();
    for (const auto& row : result.summary.rows)
        t.rows.push_back({std::string(to_string(row.estimator)), row.parameter, row.truth,
                          row.mean_estimate, row.bias, row.sd.value_or(na),
                          row.mean_se.value_or(na), row.rmse, row.coverage,
                          static_cast<long long>(row.failures)});
    r.tables.push_back(std::move(t));
    render(out, r, parse_format(a.format));
    return kExitSuccess;
}

}  // namespace

void render(std::ostream& out, const Report& report, Format format) {
    if (format == Format::Json) {
        nlohmann::ordered_json doc;
        doc["command"] = report.command;
        nlohmann::ordered_json header = nlohmann::ordered_json::object();
        for (const auto& [k, v] : report.header) header[k] = v;
        doc["header"] = header;
        doc["warnings"] = report.warnings;
        nlohmann::ordered_json tables = nlohmann::ordered_json::object();
        for (const auto& t : report.tables) {
            nlohmann::ordered_json rows = nlohmann::ordered_json::array();
            for (const auto& row : t.rows) {
                nlohmann::ordered_json obj = nlohmann::ordered_json::object();
                for (std::size_t c = 0; c < t.columns.size(); ++c) obj[t.columns[c]] = cell_json(row[c]);
                rows.push_back(std::move(obj));
            }
            tables[t.name] = std::move(rows);
        }
        doc["tables"] = std::move(tables);
        out << doc.dump(2) << "\n";
        return;
    }
    if (format == Format::Csv) {
        out << "# command=" << report.command << "\n";
        for (const auto& [k, v] : report.header) out << "# " << k << "=" << v << "\n";
        for (const auto& w : report.warnings) out << "# warning=" << w << "\n";
        for (const auto& t : report.tables) {
            out << "# table=" << t.name << "\n";
            for (std::size_t c = 0; c < t.columns.size(); ++c)
                out << (c ? "," : "") << csv_escape(t.columns[c]);
            out << "\n";
            for (const auto& row : t.rows) {
                for (std::size_t c = 0; c < row.size(); ++c)
                    out << (c ? "," : "") << csv_escape(cell_text(row[c], true));
                out << "\n";
            }
        }
        return;
    }
    out << "msmm " << report.command << "\n";
    for (const auto& [k, v] : report.header) out << "  " << k << ": " << v << "\n";
    for (const auto& w : report.warnings) out << "  warning: " << w << "\n";
    for (const auto& t : report.tables) {
        out << "\n[" << t.name << "]\n";
        std::vector<std::size_t> width(t.columns.size());
        std::vector<std::vector<std::string>> text;
        for (std::size_t c = 0; c < t.columns.size(); ++c) width[c] = t.columns[c].size();
        for (const auto& row : t.rows) {
            std::vector<std::string> line;
            for (std::size_t c = 0; c < row.size(); ++c) {
                line.push_back(cell_text(row[c], false));
                width[c] = std::max(width[c], line.back().size());
            }
            text.push_back(std::move(line));
        }
        auto print_line = [&](const std::vector<std::string>& cells) {
            for (std::size_t c = 0; c < cells.size(); ++c) {
                const bool left = c == 0;
                out << (c ? "  " : "") << (left ? std::left : std::right)
                    << std::setw(static_cast<int>(width[c])) << cells[c];
            }
            out << std::right << "\n";
        };
        print_line(t.columns);
        for (const auto& line : text) print_line(line);
    }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Controlled direct and mediator effects for count outcomes", "msmm"};
    app.require_subcommand(1);

    CommonArgs estimate_args, check_args, boot_args, compare_args;
    std::string interval = "percentile";
    SimulateArgs sim_args;

    auto* estimate = app.add_subcommand("estimate", "estimate effects from a CSV file");
    add_common(estimate, estimate_args, true);
    auto* check = app.add_subcommand("check-id", "identification diagnostics");
    add_common(check, check_args, false);
    auto* boot = app.add_subcommand("bootstrap", "bootstrap standard errors and intervals");
    add_common(boot, boot_args, true);
    auto* compare = app.add_subcommand("compare", "proposed estimator next to quasi-Poisson");
    add_common(compare, compare_args, true);
    compare->add_option("--interval", interval, "percentile | normal | sandwich")
        ->check(CLI::IsMember({"percentile", "normal", "sandwich"}))
        ->capture_default_str();
    auto* simulate = app.add_subcommand("simulate", "run a simulation study");
    simulate->add_option("--scenario", sim_args.scenario, "key=value scenario file")->required();
    simulate->add_option("--out", sim_args.out, "output directory for summary.csv and replicates.csv")
        ->capture_default_str();
    simulate->add_option("--estimators", sim_args.estimators,
                         "comma list of proposed, proposed-augmented, poisson, quasipoisson, negbin");
    simulate->add_option("--emit-data", sim_args.emit_data,
                         "write one generated dataset to this CSV instead of running the study");
    simulate->add_option("--rep", sim_args.rep, "replication index for --emit-data");
    simulate->add_option("--format", sim_args.format, "table | csv | json")
        ->check(CLI::IsMember({"table", "csv", "json"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitSuccess;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitSuccess;
    } catch (const CLI::ParseError& e) {
        err << "msmm: usage: " << e.what() << "\n";
        return kExitError;
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        if (*estimate) return cmd_estimate(estimate_args, out, err);
        if (*check) return cmd_check_id(check_args, out);
        if (*boot) {
            if (boot_args.bootstrap != 0 && boot_args.bootstrap < 50)
                throw Error(ErrorCode::InvalidArgument, "--bootstrap needs B >= 50");
            return cmd_bootstrap(boot_args, out, err);
        }
        if (*compare) return cmd_compare(compare_args, interval, out, err);
        if (*simulate) return cmd_simulate(sim_args, out);
    } catch (const Error& e) {
        err << "msmm " << stage << ": " << e.what() << "\n";
        return kExitError;
    } catch (const std::exception& e) {
        err << "msmm " << stage << ": " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}

}  // namespace msmm::cli

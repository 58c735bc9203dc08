// clvar — batch driver for the CLVAR library.
//
// Subcommands: generate, fit, forecast, graph, experiment. Every failure
// prints a single line to stderr prefixed with its exit-code class:
//   [usage-error] → 1, [data-error] → 2, [numerical-error] → 3.
// Same inputs + seed produce byte-identical output files; all writes are
// atomic (temp file + rename).

#include <CLI11.hpp>
#include <json.hpp>

#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "clvar/harness.hpp"
#include "clvar/synthetic.hpp"

namespace {

using namespace clvar;

std::string one_line(std::string text) {
    for (char& c : text) {
        if (c == '\n' || c == '\r') {
            c = ' ';
        }
    }
    return text;
}

// "A..B", 1-based inclusive, converted to the library's half-open 0-based form.
RowRange parse_row_range(const std::string& text) {
    const auto fail = [&]() -> RowRange {
        throw invalid_input_error("row range must look like A..B with 1 <= A <= B, got '" + text +
                                  "'");
    };
    const auto sep = text.find("..");
    if (sep == std::string::npos) {
        return fail();
    }
    long long a = 0;
    long long b = 0;
    const char* a_first = text.data();
    const char* a_last = text.data() + sep;
    const char* b_first = text.data() + sep + 2;
    const char* b_last = text.data() + text.size();
    const auto ra = std::from_chars(a_first, a_last, a);
    const auto rb = std::from_chars(b_first, b_last, b);
    if (ra.ec != std::errc() || ra.ptr != a_last || rb.ec != std::errc() || rb.ptr != b_last ||
        a < 1 || b < a) {
        return fail();
    }
    return RowRange{static_cast<Index>(a - 1), static_cast<Index>(b)};
}

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw data_error(path + ": cannot open");
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw data_error(path + ": invalid JSON: " + std::string(e.what()));
    }
    return doc;
}

std::string output_directory(const std::string& flag) {
    const std::string dir = flag.empty() ? std::string(".") : flag;
    std::filesystem::create_directories(dir);
    return dir;
}

// --- generate ---------------------------------------------------------------

int cmd_generate(int design_id, std::uint64_t seed, Index length, const std::string& out_flag) {
    const SyntheticDesign design = make_design(design_id);
    const TrueSystem system = generate_system(design, seed);
    // Noise stream offset by one so it never collides with the coefficient draw.
    const TimeSeriesPanel panel = simulate(system, length, 500, seed + 1);

    const std::string dir = output_directory(out_flag);
    save_csv(panel, dir + "/panel.csv");

    nlohmann::json truth;
    truth["schema_version"] = 1;
    truth["design"] = design_descriptor(design);
    truth["seed"] = seed;
    truth["lag_order"] = design.p_true;
    truth["noise_scale"] = system.noise_scale;
    truth["coefficients"] = detail::matrix_to_json(system.coefficients);
    detail::atomic_write(dir + "/truth.json", truth.dump(2) + "\n");

    std::cout << "wrote " << dir << "/panel.csv (" << panel.length() << " rows, " << panel.width()
              << " series) and " << dir << "/truth.json\n";
    return 0;
}

// --- fit --------------------------------------------------------------------

GridPoint read_hyper_file(const std::string& path, Method method) {
    const nlohmann::json doc = load_json_file(path);
    if (!doc.is_object()) {
        throw data_error(path + ": hyperparameter file must be a JSON object");
    }
    if (!doc.contains("lambda") || !doc["lambda"].is_number()) {
        throw data_error(path + ": needs a numeric 'lambda' field");
    }
    GridPoint point;
    point.lambda = doc["lambda"].get<double>();
    if (method_uses_kappa(method)) {
        point.kappa = doc.value("kappa", 1.0);
    }
    if (method_uses_rank(method)) {
        point.rank = doc.value("rank", Index{1});
    }
    return point;
}

int cmd_fit(const std::string& method_flag, const std::string& data_path,
            const std::string& train_rows, Index lag, const std::string& hyper_path, bool use_cv,
            const std::string& out_path) {
    std::string upper = method_flag;
    for (char& c : upper) {
        c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    const Method method = method_from_name(upper);
    if (!method_needs_fit(method)) {
        throw invalid_input_error("fit: '" + method_flag + "' is not a fitted method");
    }
    if (use_cv == !hyper_path.empty()) {
        throw invalid_input_error("fit: pass exactly one of --hyper FILE or --cv");
    }

    const RowRange training = parse_row_range(train_rows);
    const TimeSeriesPanel panel = load_csv(data_path);
    if (training.end > panel.length()) {
        throw data_error("fit: --train-rows " + train_rows + " exceeds the panel length (" +
                         std::to_string(panel.length()) + " rows)");
    }

    const FistaConfig solver;
    GridPoint point;
    GridSearchResult search;
    if (use_cv) {
        const TimeSeriesPanel window = detail::slice_panel(panel, training);
        search = grid_search(method, window, lag, default_hyper_grid(), solver);
        point = search.chosen;
    } else {
        point = read_hyper_file(hyper_path, method);
    }

    const auto [standardized, stats] = standardize(panel, training);
    const LagDesign design = build_lag_design(detail::slice_panel(standardized, training), lag);
    FittedMethod fitted = fit_method(method, design, point, solver);
    fitted.model.series_names = panel.series_names;
    fitted.model.stats = stats;

    nlohmann::json doc = serialize_model(fitted.model);
    if (use_cv) {
        nlohmann::json chosen;
        chosen["lambda"] = point.lambda;
        if (method_uses_kappa(method)) {
            chosen["kappa"] = point.kappa;
        }
        if (method_uses_rank(method)) {
            chosen["rank"] = point.rank;
        }
        chosen["cv_mse"] = search.chosen_mse;
        doc["chosen_hyperparameters"] = chosen;
    }
    detail::atomic_write(out_path, doc.dump(2) + "\n");

    std::cout << "wrote " << out_path << " (method=" << method_name(method)
              << ", lambda=" << detail::format_g17(point.lambda) << ")\n";
    return 0;
}

// --- forecast ---------------------------------------------------------------

int cmd_forecast(const std::string& model_path, const std::string& data_path,
                 const std::string& holdout_rows, const std::string& out_path) {
    const VarModel model = load_model(model_path);
    const TimeSeriesPanel panel = load_csv(data_path);
    const auto k = static_cast<Index>(model.series_names.size());
    if (panel.width() != k) {
        throw data_error("forecast: panel has " + std::to_string(panel.width()) +
                         " series but the model expects " + std::to_string(k));
    }
    const RowRange holdout = parse_row_range(holdout_rows);
    if (holdout.end > panel.length()) {
        throw data_error("forecast: --holdout-rows " + holdout_rows +
                         " exceeds the panel length (" + std::to_string(panel.length()) +
                         " rows)");
    }

    // Forecasts live in the model's standardized scale, like all metrics.
    const TimeSeriesPanel standardized = apply_standardization(panel, model.stats);
    const ForecastResult result = rolling_holdout_forecast(model, standardized, holdout);

    detail::atomic_write(out_path, [&](std::ofstream& out) {
        out << "row";
        for (const auto& name : model.series_names) {
            out << ",pred_" << name;
        }
        for (const auto& name : model.series_names) {
            out << ",sqerr_" << name;
        }
        out << '\n';
        for (Index r = 0; r < result.predictions.rows(); ++r) {
            out << (holdout.begin + r + 1);  // 1-based, matching the flag convention
            for (Index c = 0; c < result.predictions.cols(); ++c) {
                out << ',' << detail::format_g17(result.predictions(r, c));
            }
            for (Index c = 0; c < result.squared_errors.cols(); ++c) {
                out << ',' << detail::format_g17(result.squared_errors(r, c));
            }
            out << '\n';
        }
    });

    std::cout << "mse=" << detail::format_g17(mse(result)) << "\n";
    return 0;
}

// --- graph ------------------------------------------------------------------

std::string render_dot(const GrangerGraph& graph) {
    std::ostringstream out;
    out << "digraph granger {\n";
    for (const auto& name : graph.nodes) {
        out << "  \"" << name << "\";\n";
    }
    const auto k = graph.adjacency.rows();
    for (Index from = 0; from < k; ++from) {
        for (Index to = 0; to < k; ++to) {
            if (graph.adjacency(from, to)) {
                out << "  \"" << graph.nodes[static_cast<size_t>(from)] << "\" -> \""
                    << graph.nodes[static_cast<size_t>(to)] << "\";\n";
            }
        }
    }
    out << "}\n";
    return out.str();
}

std::string render_adjacency_csv(const GrangerGraph& graph) {
    std::ostringstream out;
    out << "from";
    for (const auto& name : graph.nodes) {
        out << ',' << name;
    }
    out << '\n';
    const auto k = graph.adjacency.rows();
    for (Index from = 0; from < k; ++from) {
        out << graph.nodes[static_cast<size_t>(from)];
        for (Index to = 0; to < k; ++to) {
            out << ',' << (graph.adjacency(from, to) ? 1 : 0);
        }
        out << '\n';
    }
    return out.str();
}

int cmd_graph(const std::string& model_path, double tol, const std::string& format,
              const std::string& out_path) {
    if (tol < 0.0) {
        throw invalid_input_error("graph: --tol must be >= 0");
    }
    const VarModel model = load_model(model_path);
    const GrangerGraph graph = extract_granger_graph(model, tol);
    detail::atomic_write(out_path,
                         format == "dot" ? render_dot(graph) : render_adjacency_csv(graph));
    std::cout << "edge_density=" << detail::format_g17(edge_density(graph)) << "\n";
    return 0;
}

// --- experiment -------------------------------------------------------------

int cmd_experiment(const std::string& plan_path, const std::string& out_flag, int threads) {
    const ExperimentPlan plan = plan_from_json(load_json_file(plan_path));
    const std::string dir = output_directory(out_flag);
    const ExperimentReport report = run_experiment(plan, threads);
    write_experiment_outputs(plan, report, dir);
    std::cout << "wrote " << dir << "/report.csv (" << report.rows.size() << " rows), "
              << "timings.csv, summary.json and synthesis matrices\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "clvar: generate synthetic VAR panels, fit VAR-family forecasters, "
        "produce rolling hold-out forecasts, export Granger graphs, and run "
        "experiment plans. Row ranges in flags are 1-based inclusive (A..B)."};
    app.require_subcommand(1);

    int gen_design = 1;
    std::uint64_t gen_seed = 0;
    Index gen_length = 500;
    std::string gen_out;
    CLI::App* generate = app.add_subcommand("generate", "Simulate a synthetic design to CSV");
    generate->add_option("--design", gen_design, "Design id, 1..6")->required();
    generate->add_option("--seed", gen_seed, "RNG seed; same seed gives identical files")
        ->required();
    generate->add_option("--length", gen_length, "Panel length after burn-in")
        ->required()
        ->check(CLI::PositiveNumber);
    generate->add_option("--out", gen_out, "Output directory (created if missing)")->required();

    std::string fit_method_flag;
    std::string fit_data;
    std::string fit_rows;
    Index fit_lag = 5;
    std::string fit_hyper;
    bool fit_cv = false;
    std::string fit_out;
    CLI::App* fit = app.add_subcommand("fit", "Fit a model on a training window");
    fit->add_option("--method", fit_method_flag, "ar | varl2 | varl1 | varlg | clvar")
        ->required();
    fit->add_option("--data", fit_data, "Panel CSV (header of series names, numeric rows)")
        ->required();
    fit->add_option("--train-rows", fit_rows, "Training rows A..B, 1-based inclusive")
        ->required();
    fit->add_option("--lag", fit_lag, "VAR order p")->default_val(5)->check(CLI::PositiveNumber);
    CLI::Option* hyper_opt = fit->add_option(
        "--hyper", fit_hyper, "JSON file with {lambda, kappa?, rank?}; exclusive with --cv");
    fit->add_flag("--cv", fit_cv, "Choose hyperparameters by 3-fold forward cross-validation")
        ->excludes(hyper_opt);
    fit->add_option("--out", fit_out, "Model document path (JSON)")->required();

    std::string fc_model;
    std::string fc_data;
    std::string fc_rows;
    std::string fc_out;
    CLI::App* forecast = app.add_subcommand("forecast", "Rolling 1-step hold-out forecasts");
    forecast->add_option("--model", fc_model, "Model document from 'fit'")->required();
    forecast->add_option("--data", fc_data, "Panel CSV in the model's raw units")->required();
    forecast->add_option("--holdout-rows", fc_rows, "Hold-out rows A..B, 1-based inclusive")
        ->required();
    forecast->add_option("--out", fc_out, "Forecast CSV (predictions and squared errors)")
        ->required();

    std::string gr_model;
    double gr_tol = 1e-8;
    std::string gr_format = "dot";
    std::string gr_out;
    CLI::App* graph = app.add_subcommand("graph", "Export the Granger-causal graph");
    graph->add_option("--model", gr_model, "Model document from 'fit'")->required();
    graph->add_option("--tol", gr_tol, "Zero tolerance on weight blocks")->default_val(1e-8);
    graph->add_option("--format", gr_format, "dot | csv")
        ->default_val("dot")
        ->check(CLI::IsMember({"dot", "csv"}));
    graph->add_option("--out", gr_out, "Output path")->required();

    std::string ex_plan;
    std::string ex_out;
    int ex_threads = 1;
    CLI::App* experiment = app.add_subcommand("experiment", "Run a full experiment plan");
    experiment->add_option("--plan", ex_plan, "Plan JSON file")->required();
    experiment->add_option("--out", ex_out, "Output directory (created if missing)")->required();
    experiment->add_option("--threads", ex_threads, "Worker threads for resamples")
        ->default_val(1)
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "[usage-error] " << one_line(e.what()) << "\n";
        return 1;
    }

    try {
        if (app.got_subcommand(generate)) {
            return cmd_generate(gen_design, gen_seed, gen_length, gen_out);
        }
        if (app.got_subcommand(fit)) {
            return cmd_fit(fit_method_flag, fit_data, fit_rows, fit_lag, fit_hyper, fit_cv,
                           fit_out);
        }
        if (app.got_subcommand(forecast)) {
            return cmd_forecast(fc_model, fc_data, fc_rows, fc_out);
        }
        if (app.got_subcommand(graph)) {
            return cmd_graph(gr_model, gr_tol, gr_format, gr_out);
        }
        if (app.got_subcommand(experiment)) {
            return cmd_experiment(ex_plan, ex_out, ex_threads);
        }
    } catch (const invalid_input_error& e) {
        std::cerr << "[usage-error] " << one_line(e.what()) << "\n";
        return 1;
    } catch (const data_error& e) {
        std::cerr << "[data-error] " << one_line(e.what()) << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "[numerical-error] " << one_line(e.what()) << "\n";
        return 3;
    }
    return 0;
}

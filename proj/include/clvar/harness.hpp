#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clvar/baselines.hpp"
#include "clvar/clvar.hpp"
#include "clvar/errors.hpp"
#include "clvar/model.hpp"
#include "clvar/panel.hpp"
#include "clvar/synthetic.hpp"

namespace clvar {

// ---------------------------------------------------------------------------
// Hyperparameter grids

struct HyperGrid {
    std::vector<double> lambdas;
    std::vector<double> kappas;
    std::vector<Index> ranks;  // empty: derive {1, 0.1K, 0.2K, K} from the data width
};

inline std::vector<Index> derive_rank_grid(Index k) {
    std::vector<Index> ranks = {1, static_cast<Index>(std::lround(0.1 * static_cast<double>(k))),
                                static_cast<Index>(std::lround(0.2 * static_cast<double>(k))), k};
    for (Index& r : ranks) {
        r = std::clamp<Index>(r, 1, k);
    }
    std::sort(ranks.begin(), ranks.end());
    ranks.erase(std::unique(ranks.begin(), ranks.end()), ranks.end());
    return ranks;
}

inline HyperGrid default_hyper_grid() {
    HyperGrid grid;
    const int n = 15;
    for (int i = 0; i < n; ++i) {
        const double exponent = -4.0 + 7.0 * static_cast<double>(i) / static_cast<double>(n - 1);
        grid.lambdas.push_back(std::pow(10.0, exponent));
    }
    grid.kappas = {0.5, 1.0, 2.0};
    return grid;
}

inline void validate_grid(const HyperGrid& grid) {
    if (grid.lambdas.empty() || grid.kappas.empty()) {
        throw invalid_input_error("hyper grid: lambda and kappa grids must be non-empty");
    }
    for (size_t i = 1; i < grid.lambdas.size(); ++i) {
        if (!(grid.lambdas[i] > grid.lambdas[i - 1])) {
            throw invalid_input_error("hyper grid: lambda values must be strictly increasing");
        }
    }
}

// ---------------------------------------------------------------------------
// Methods

enum class Method { ar, varl2, varl1, varlg, clvar_shared, clvar_clustered, oracle, random_walk };

inline std::string method_name(Method method) {
    switch (method) {
        case Method::ar: return "AR";
        case Method::varl2: return "VARL2";
        case Method::varl1: return "VARL1";
        case Method::varlg: return "VARLG";
        case Method::clvar_shared: return "CLVAR-SHARED";
        case Method::clvar_clustered: return "CLVAR";
        case Method::oracle: return "ORACLE";
        case Method::random_walk: return "RW";
    }
    throw invalid_input_error("method_name: unknown method");
}

inline Method method_from_name(const std::string& name) {
    for (const Method m : {Method::ar, Method::varl2, Method::varl1, Method::varlg,
                           Method::clvar_shared, Method::clvar_clustered, Method::oracle,
                           Method::random_walk}) {
        if (method_name(m) == name) {
            return m;
        }
    }
    throw invalid_input_error("unknown method '" + name + "'");
}

inline bool method_needs_fit(Method m) { return m != Method::oracle && m != Method::random_walk; }
inline bool method_uses_kappa(Method m) {
    return m == Method::clvar_shared || m == Method::clvar_clustered;
}
inline bool method_uses_rank(Method m) { return m == Method::clvar_clustered; }

// ---------------------------------------------------------------------------
// Cross-validation folds

struct CvFold {
    std::vector<RowRange> fit_segments;  // contiguous pieces of the training window
    RowRange validation;
};

/// Split [0, training_rows) into k contiguous, nearly equal validation blocks
/// (earlier blocks take the remainder). Lag designs are rebuilt per segment,
/// so no validation value ever enters a fit input row.
inline std::vector<CvFold> make_cv_folds(Index training_rows, Index k_folds, Index lag) {
    if (k_folds < 2) {
        throw invalid_input_error("make_cv_folds: need at least two folds");
    }
    if (training_rows < k_folds * (lag + 1)) {
        throw data_error("make_cv_folds: training window too short for " +
                         std::to_string(k_folds) + " folds at lag " + std::to_string(lag));
    }
    const Index base = training_rows / k_folds;
    const Index remainder = training_rows % k_folds;
    std::vector<CvFold> folds;
    Index begin = 0;
    for (Index i = 0; i < k_folds; ++i) {
        const Index size = base + (i < remainder ? 1 : 0);
        CvFold fold;
        fold.validation = RowRange{begin, begin + size};
        if (begin > 0) {
            fold.fit_segments.push_back(RowRange{0, begin});
        }
        if (begin + size < training_rows) {
            fold.fit_segments.push_back(RowRange{begin + size, training_rows});
        }
        folds.push_back(std::move(fold));
        begin += size;
    }
    return folds;
}

namespace detail {

inline TimeSeriesPanel slice_panel(const TimeSeriesPanel& panel, RowRange rows) {
    if (rows.begin < 0 || rows.end > panel.length() || rows.count() < 1) {
        throw invalid_input_error("slice_panel: range outside panel");
    }
    TimeSeriesPanel out;
    out.values = panel.values.middleRows(rows.begin, rows.count());
    out.series_names = panel.series_names;
    out.frequency_tag = panel.frequency_tag;
    return out;
}

// Standardization stats over the union of the fit segments, same rules as
// standardize(): sample std over n-1, constant series rejected by name.
inline StandardizationStats stats_from_segments(const TimeSeriesPanel& window,
                                                const std::vector<RowRange>& segments) {
    Index n = 0;
    for (const RowRange& segment : segments) {
        n += segment.count();
    }
    if (n < 2) {
        throw invalid_input_error("stats_from_segments: need at least two fit rows");
    }
    StandardizationStats stats;
    stats.means = VectorXd::Zero(window.width());
    for (const RowRange& segment : segments) {
        stats.means += window.values.middleRows(segment.begin, segment.count())
                           .colwise()
                           .sum()
                           .transpose();
    }
    stats.means /= static_cast<double>(n);
    stats.scales.resize(window.width());
    for (Index c = 0; c < window.width(); ++c) {
        double ss = 0.0;
        for (const RowRange& segment : segments) {
            ss += (window.values.col(c).segment(segment.begin, segment.count()).array() -
                   stats.means(c))
                      .square()
                      .sum();
        }
        stats.scales(c) = std::sqrt(ss / static_cast<double>(n - 1));
        if (!(stats.scales(c) > 0.0)) {
            throw data_error("stats_from_segments: series '" +
                             window.series_names[static_cast<size_t>(c)] +
                             "' is constant on the fit rows");
        }
    }
    return stats;
}

// Stack the lag designs of several disjoint contiguous segments. Segments
// shorter than lag+1 rows contribute nothing.
inline LagDesign design_from_segments(const TimeSeriesPanel& window,
                                      const std::vector<RowRange>& segments, Index lag) {
    std::vector<LagDesign> parts;
    Index rows = 0;
    for (const RowRange& segment : segments) {
        if (segment.count() <= lag) {
            continue;
        }
        parts.push_back(build_lag_design(slice_panel(window, segment), lag));
        rows += parts.back().outputs.rows();
    }
    if (rows == 0) {
        throw data_error("design_from_segments: no usable fit rows");
    }
    LagDesign design;
    design.lag_order = lag;
    design.inputs.resize(rows, window.width() * lag);
    design.outputs.resize(rows, window.width());
    Index at = 0;
    for (const LagDesign& part : parts) {
        design.inputs.middleRows(at, part.inputs.rows()) = part.inputs;
        design.outputs.middleRows(at, part.outputs.rows()) = part.outputs;
        at += part.outputs.rows();
    }
    return design;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fitting one method at one grid point

struct GridPoint {
    double lambda = 0.0;
    double kappa = std::numeric_limits<double>::quiet_NaN();  // NaN: not applicable
    Index rank = 0;                                           // 0: not applicable
};

struct FittedMethod {
    VarModel model;
    double fit_seconds = 0.0;
    int outer_iterations = 0;
};

inline FittedMethod fit_method(Method method, const LagDesign& design, const GridPoint& point,
                               const FistaConfig& solver) {
    FittedMethod out;
    const auto started = std::chrono::steady_clock::now();
    switch (method) {
        case Method::ar:
            out.model = fit_ar(design, point.lambda);
            break;
        case Method::varl2:
            out.model = fit_varl2(design, point.lambda);
            break;
        case Method::varl1:
            out.model = fit_varl1(design, PenaltyConfig{point.lambda, solver});
            break;
        case Method::varlg:
            out.model = fit_varlg(design, PenaltyConfig{point.lambda, solver});
            break;
        case Method::clvar_shared:
        case Method::clvar_clustered: {
            ClvarHyperparams hp;
            hp.lambda = point.lambda;
            hp.kappa = point.kappa;
            hp.rank = std::max<Index>(point.rank, 1);
            hp.inner = solver;
            const ClvarFit fit =
                fit_clvar(design, hp,
                          method == Method::clvar_shared ? ClvarMode::shared
                                                         : ClvarMode::clustered);
            out.model = fit.model;
            out.outer_iterations = fit.trace.iterations;
            break;
        }
        case Method::oracle:
        case Method::random_walk:
            throw invalid_input_error("fit_method: " + method_name(method) +
                                      " is not a fitted method");
    }
    out.fit_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return out;
}

// ---------------------------------------------------------------------------
// Grid search with 3-fold forward-looking CV

struct CvCell {
    GridPoint point;
    double cv_mse = std::numeric_limits<double>::quiet_NaN();
    bool ok = false;
    std::string note;
};

struct GridSearchResult {
    GridPoint chosen;
    double chosen_mse = std::numeric_limits<double>::quiet_NaN();
    std::vector<CvCell> table;
    double seconds = 0.0;
};

namespace detail {

inline std::vector<GridPoint> enumerate_grid(Method method, const HyperGrid& grid, Index k) {
    validate_grid(grid);
    std::vector<GridPoint> points;
    const std::vector<double> kappas =
        method_uses_kappa(method) ? grid.kappas : std::vector<double>{
            std::numeric_limits<double>::quiet_NaN()};
    const std::vector<Index> ranks =
        method_uses_rank(method)
            ? (grid.ranks.empty() ? derive_rank_grid(k) : grid.ranks)
            : std::vector<Index>{0};
    for (const double lambda : grid.lambdas) {
        for (const double kappa : kappas) {
            for (const Index rank : ranks) {
                points.push_back(GridPoint{lambda, kappa, rank});
            }
        }
    }
    return points;
}

// 1-step validation forecasts inside the training window. Histories are true
// observed rows; rows without `lag` predecessors in the window are skipped.
inline std::pair<double, long> validation_sse(const VarModel& model,
                                              const TimeSeriesPanel& window,
                                              RowRange validation) {
    const Index lag = model.lag_order;
    double sse = 0.0;
    long count = 0;
    for (Index t = std::max(validation.begin, lag); t < validation.end; ++t) {
        const VectorXd prediction =
            forecast_one_step(model, window.values.middleRows(t - lag, lag));
        sse += (window.values.row(t).transpose() - prediction).squaredNorm();
        count += window.width();
    }
    return {sse, count};
}

}  // namespace detail

/// Evaluate every applicable grid point with 3-fold CV (pooled 1-step MSE on
/// validation rows) and pick the minimizer. Ties prefer the larger lambda,
/// then the smaller rank, then the smaller kappa.
inline GridSearchResult grid_search(Method method, const TimeSeriesPanel& window, Index lag,
                                    const HyperGrid& grid, const FistaConfig& solver) {
    if (!method_needs_fit(method)) {
        throw invalid_input_error("grid_search: " + method_name(method) +
                                  " has no hyperparameters");
    }
    const auto started = std::chrono::steady_clock::now();
    const std::vector<CvFold> folds = make_cv_folds(window.length(), 3, lag);
    const std::vector<GridPoint> points = detail::enumerate_grid(method, grid, window.width());

    GridSearchResult result;
    bool have_choice = false;
    for (const GridPoint& point : points) {
        CvCell cell;
        cell.point = point;
        try {
            double sse = 0.0;
            long count = 0;
            for (const CvFold& fold : folds) {
                // Standardize from the fit rows of this fold only.
                const StandardizationStats stats =
                    detail::stats_from_segments(window, fold.fit_segments);
                const TimeSeriesPanel standardized = apply_standardization(window, stats);
                const LagDesign design =
                    detail::design_from_segments(standardized, fold.fit_segments, lag);
                VarModel model = fit_method(method, design, point, solver).model;
                model.stats = stats;
                const auto [fold_sse, fold_count] =
                    detail::validation_sse(model, standardized, fold.validation);
                sse += fold_sse;
                count += fold_count;
            }
            if (count == 0) {
                throw data_error("no validation rows with enough history");
            }
            cell.cv_mse = sse / static_cast<double>(count);
            cell.ok = true;
        } catch (const std::exception& error) {
            cell.note = error.what();
        }
        if (cell.ok) {
            const bool better =
                !have_choice || cell.cv_mse < result.chosen_mse ||
                (cell.cv_mse == result.chosen_mse &&
                 (cell.point.lambda > result.chosen.lambda ||
                  (cell.point.lambda == result.chosen.lambda &&
                   (cell.point.rank < result.chosen.rank ||
                    (cell.point.rank == result.chosen.rank &&
                     cell.point.kappa < result.chosen.kappa)))));
            if (better) {
                result.chosen = cell.point;
                result.chosen_mse = cell.cv_mse;
                have_choice = true;
            }
        }
        result.table.push_back(std::move(cell));
    }
    if (!have_choice) {
        std::ostringstream message;
        message << "grid_search: every grid point failed for " << method_name(method) << ":";
        for (const CvCell& cell : result.table) {
            message << " [lambda=" << cell.point.lambda << ": " << cell.note << "]";
        }
        throw numerical_error(message.str());
    }
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

// ---------------------------------------------------------------------------
// Experiment plan

struct DatasetSpec {
    enum class Kind { synthetic, csv };
    Kind kind = Kind::synthetic;
    int design_id = 3;
    std::string csv_path;
    std::vector<int> transforms;  // per-series Appendix-style codes; empty: identity
    bool clean_outliers = false;
};

struct ExperimentPlan {
    DatasetSpec dataset;
    std::vector<Index> training_sizes;
    Index holdout_length = 500;
    int resamples = 20;
    std::vector<Method> methods;
    std::uint64_t base_seed = 0;
    Index lag = 5;
    HyperGrid grid = default_hyper_grid();
};

inline void validate_plan(const ExperimentPlan& plan) {
    if (plan.training_sizes.empty() || plan.methods.empty()) {
        throw invalid_input_error("plan: training sizes and methods must be non-empty");
    }
    for (const Index t : plan.training_sizes) {
        if (t < 1) {
            throw invalid_input_error("plan: training sizes must be positive");
        }
    }
    if (plan.holdout_length < 1 || plan.resamples < 1 || plan.lag < 1) {
        throw invalid_input_error("plan: hold-out length, resamples and lag must be positive");
    }
    if (plan.dataset.kind == DatasetSpec::Kind::synthetic) {
        if (plan.dataset.design_id < 1 || plan.dataset.design_id > 6) {
            throw invalid_input_error("plan: synthetic design id must be in 1..6");
        }
    } else {
        if (plan.dataset.csv_path.empty()) {
            throw invalid_input_error("plan: csv dataset needs a path");
        }
        for (const Method m : plan.methods) {
            if (m == Method::oracle) {
                throw invalid_input_error("plan: ORACLE is only defined for synthetic data");
            }
        }
    }
    validate_grid(plan.grid);
}

inline nlohmann::json plan_to_json(const ExperimentPlan& plan) {
    nlohmann::json dataset;
    if (plan.dataset.kind == DatasetSpec::Kind::synthetic) {
        dataset = {{"type", "synthetic"}, {"design", plan.dataset.design_id}};
    } else {
        dataset = {{"type", "csv"},
                   {"path", plan.dataset.csv_path},
                   {"transforms", plan.dataset.transforms},
                   {"clean_outliers", plan.dataset.clean_outliers}};
    }
    std::vector<std::string> methods;
    for (const Method m : plan.methods) {
        methods.push_back(method_name(m));
    }
    return {{"dataset", dataset},
            {"training_sizes", plan.training_sizes},
            {"holdout_length", plan.holdout_length},
            {"resamples", plan.resamples},
            {"methods", methods},
            {"base_seed", plan.base_seed},
            {"lag", plan.lag},
            {"grids",
             {{"lambdas", plan.grid.lambdas},
              {"kappas", plan.grid.kappas},
              {"ranks", plan.grid.ranks}}}};
}

inline ExperimentPlan plan_from_json(const nlohmann::json& doc) {
    ExperimentPlan plan;
    try {
        const nlohmann::json& dataset = doc.at("dataset");
        const std::string type = dataset.at("type").get<std::string>();
        if (type == "synthetic") {
            plan.dataset.kind = DatasetSpec::Kind::synthetic;
            plan.dataset.design_id = dataset.at("design").get<int>();
        } else if (type == "csv") {
            plan.dataset.kind = DatasetSpec::Kind::csv;
            plan.dataset.csv_path = dataset.at("path").get<std::string>();
            if (dataset.contains("transforms")) {
                plan.dataset.transforms = dataset.at("transforms").get<std::vector<int>>();
            }
            plan.dataset.clean_outliers = dataset.value("clean_outliers", false);
        } else {
            throw invalid_input_error("plan: dataset type must be 'synthetic' or 'csv'");
        }
        plan.training_sizes = doc.at("training_sizes").get<std::vector<Index>>();
        plan.holdout_length = doc.at("holdout_length").get<Index>();
        plan.resamples = doc.value("resamples", 20);
        for (const auto& name : doc.at("methods")) {
            plan.methods.push_back(method_from_name(name.get<std::string>()));
        }
        plan.base_seed = doc.value("base_seed", std::uint64_t{0});
        plan.lag = doc.value("lag", Index{5});
        if (doc.contains("grids")) {
            const nlohmann::json& grids = doc.at("grids");
            if (grids.contains("lambdas")) {
                plan.grid.lambdas = grids.at("lambdas").get<std::vector<double>>();
            }
            if (grids.contains("kappas")) {
                plan.grid.kappas = grids.at("kappas").get<std::vector<double>>();
            }
            if (grids.contains("ranks")) {
                plan.grid.ranks = grids.at("ranks").get<std::vector<Index>>();
            }
        }
    } catch (const nlohmann::json::exception& error) {
        throw data_error(std::string("plan: malformed JSON: ") + error.what());
    }
    validate_plan(plan);
    return plan;
}

// ---------------------------------------------------------------------------
// Resample execution

struct ResampleRow {
    std::string method;
    Index training_size = 0;
    int resample = 0;
    std::string status = "ok";  // or a skip/failure reason
    double rel_mse = std::numeric_limits<double>::quiet_NaN();
    double selection_error = std::numeric_limits<double>::quiet_NaN();
    double edge_density = std::numeric_limits<double>::quiet_NaN();
    int outer_iterations = 0;
    GridPoint chosen;  // hyperparameters picked by CV (fitted methods only)
    double search_seconds = 0.0;
    double fit_seconds = 0.0;
    std::optional<GrangerGraph> graph;
};

namespace detail {

// Preprocess a real panel: optional outlier cleaning, per-series transform
// codes, then end-alignment (transforms shorten series by different amounts).
inline TimeSeriesPanel preprocess_real_panel(const TimeSeriesPanel& raw,
                                             const std::vector<int>& transforms,
                                             bool clean) {
    validate_panel(raw);
    const Index k = raw.width();
    if (!transforms.empty() && static_cast<Index>(transforms.size()) != k) {
        throw invalid_input_error("transform recipe must list one code per series");
    }
    std::vector<VectorXd> columns;
    Index shortest = raw.length();
    for (Index c = 0; c < k; ++c) {
        VectorXd series = raw.values.col(c);
        if (clean) {
            series = clean_outliers(series);
        }
        const int code = transforms.empty() ? 1 : transforms[static_cast<size_t>(c)];
        try {
            columns.push_back(apply_transform(series, code));
        } catch (const data_error& error) {
            throw data_error("series " + raw.series_names[static_cast<size_t>(c)] + ": " +
                             error.what());
        }
        shortest = std::min(shortest, columns.back().size());
    }
    TimeSeriesPanel out;
    out.series_names = raw.series_names;
    out.frequency_tag = raw.frequency_tag;
    out.values.resize(shortest, k);
    for (Index c = 0; c < k; ++c) {
        out.values.col(c) = columns[static_cast<size_t>(c)].tail(shortest);
    }
    validate_panel(out);
    return out;
}

inline StandardizationStats training_stats(const TimeSeriesPanel& panel, RowRange training) {
    const auto [standardized, stats] = standardize(panel, training);
    (void)standardized;
    return stats;
}

}  // namespace detail

/// One resample: realize/curtail the data, pick hyperparameters per method by
/// CV on the training window, fit once, slide over the hold-out. Synthetic
/// rows score RelMSE against the generating oracle and selection error
/// against the truth mask; real rows score against the random-walk reference.
inline std::vector<ResampleRow> run_resample(const ExperimentPlan& plan, int resample_index,
                                             const TrueSystem* system,
                                             const TimeSeriesPanel* real_panel) {
    validate_plan(plan);
    const bool synthetic = plan.dataset.kind == DatasetSpec::Kind::synthetic;
    if (synthetic && system == nullptr) {
        throw invalid_input_error("run_resample: synthetic plan needs a generated system");
    }
    if (!synthetic && real_panel == nullptr) {
        throw invalid_input_error("run_resample: csv plan needs the loaded panel");
    }

    // Materialize this resample's panel and the hold-out location.
    TimeSeriesPanel panel;
    if (synthetic) {
        const Index t_max = *std::max_element(plan.training_sizes.begin(),
                                              plan.training_sizes.end());
        panel = simulate(*system, t_max + plan.holdout_length, 500,
                         plan.base_seed + static_cast<std::uint64_t>(resample_index) + 1);
    } else {
        const Index keep = real_panel->length() - static_cast<Index>(resample_index);
        if (keep < plan.holdout_length + plan.lag + 1) {
            throw data_error("run_resample: panel too short after curtailing " +
                             std::to_string(resample_index) + " rows");
        }
        panel = detail::slice_panel(*real_panel, RowRange{0, keep});
    }
    const RowRange holdout{panel.length() - plan.holdout_length, panel.length()};

    // Reference errors for RelMSE.
    ForecastResult reference;
    std::optional<GrangerGraph> truth;
    if (synthetic) {
        reference = rolling_holdout_forecast(oracle_forecaster(*system), panel, holdout);
        truth = truth_graph(system->design);
    } else {
        reference = random_walk_reference(panel, holdout);
    }
    const double reference_mse = mse(reference);

    std::vector<ResampleRow> rows;
    for (const Index t : plan.training_sizes) {
        const RowRange training{holdout.begin - t, holdout.begin};
        for (const Method method : plan.methods) {
            ResampleRow row;
            row.method = method_name(method);
            row.training_size = t;
            row.resample = resample_index;
            if (training.begin < 0) {
                row.status = "skipped: training window shorter than requested size";
                rows.push_back(std::move(row));
                continue;
            }
            try {
                if (method == Method::oracle) {
                    const VarModel oracle = oracle_forecaster(*system);
                    row.rel_mse = mse(rolling_holdout_forecast(oracle, panel, holdout)) /
                                  reference_mse;
                    row.graph = extract_granger_graph(oracle);
                } else if (method == Method::random_walk) {
                    row.rel_mse = mse(random_walk_reference(panel, holdout)) / reference_mse;
                } else {
                    const TimeSeriesPanel window = detail::slice_panel(panel, training);
                    const GridSearchResult search =
                        grid_search(method, window, plan.lag, plan.grid, FistaConfig{});
                    row.chosen = search.chosen;
                    row.search_seconds = search.seconds;

                    // Final fit on the whole training window, stats from it alone.
                    const auto [standardized, stats] = standardize(panel, training);
                    const LagDesign design = detail::design_from_segments(
                        standardized, {training}, plan.lag);
                    FittedMethod fitted = fit_method(method, design, search.chosen,
                                                     FistaConfig{});
                    fitted.model.series_names = panel.series_names;
                    fitted.model.stats = stats;
                    row.fit_seconds = fitted.fit_seconds;
                    row.outer_iterations = fitted.outer_iterations;

                    // Hold-out errors in raw units: undo the scales columnwise.
                    ForecastResult result =
                        rolling_holdout_forecast(fitted.model, standardized, holdout);
                    const Eigen::ArrayXd scale_sq = stats.scales.array().square();
                    result.squared_errors =
                        result.squared_errors.array().rowwise() * scale_sq.transpose();
                    row.rel_mse = mse(result) / reference_mse;
                    row.graph = extract_granger_graph(fitted.model);
                }
                if (row.graph.has_value()) {
                    row.edge_density = edge_density(*row.graph);
                    if (truth.has_value()) {
                        row.selection_error = selection_error(*row.graph, *truth);
                    }
                }
            } catch (const std::exception& error) {
                row.status = std::string("failed: ") + error.what();
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

/// Convenience form: builds the synthetic system / loads and
/// preprocesses the CSV itself.
inline std::vector<ResampleRow> run_resample(const ExperimentPlan& plan, int resample_index) {
    validate_plan(plan);
    if (plan.dataset.kind == DatasetSpec::Kind::synthetic) {
        const TrueSystem system =
            generate_system(make_design(plan.dataset.design_id), plan.base_seed);
        return run_resample(plan, resample_index, &system, nullptr);
    }
    const TimeSeriesPanel panel = detail::preprocess_real_panel(
        load_csv(plan.dataset.csv_path), plan.dataset.transforms, plan.dataset.clean_outliers);
    return run_resample(plan, resample_index, nullptr, &panel);
}

// ---------------------------------------------------------------------------
// Whole experiments

struct MethodAggregate {
    std::string method;
    Index training_size = 0;
    int count = 0;  // rows with status "ok"
    double rel_mse_mean = std::numeric_limits<double>::quiet_NaN();
    double rel_mse_std = std::numeric_limits<double>::quiet_NaN();
    double selection_error_mean = std::numeric_limits<double>::quiet_NaN();
    double selection_error_std = std::numeric_limits<double>::quiet_NaN();
    double edge_density_mean = std::numeric_limits<double>::quiet_NaN();
    double edge_density_std = std::numeric_limits<double>::quiet_NaN();
};

struct ExperimentReport {
    std::vector<ResampleRow> rows;  // ordered by (training size, method, resample)
    std::vector<MethodAggregate> aggregates;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& values) {
    if (values.empty()) {
        return {std::numeric_limits<double>::quiet_NaN(),
                std::numeric_limits<double>::quiet_NaN()};
    }
    double mean = 0.0;
    for (const double v : values) {
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    if (values.size() == 1) {
        return {mean, 0.0};
    }
    double acc = 0.0;
    for (const double v : values) {
        acc += (v - mean) * (v - mean);
    }
    return {mean, std::sqrt(acc / static_cast<double>(values.size() - 1))};
}

}  // namespace detail

inline std::vector<MethodAggregate> aggregate_rows(const ExperimentPlan& plan,
                                                   const std::vector<ResampleRow>& rows) {
    std::vector<MethodAggregate> aggregates;
    for (const Index t : plan.training_sizes) {
        for (const Method method : plan.methods) {
            MethodAggregate agg;
            agg.method = method_name(method);
            agg.training_size = t;
            std::vector<double> rel, sel, den;
            for (const ResampleRow& row : rows) {
                if (row.method != agg.method || row.training_size != t ||
                    row.status != "ok") {
                    continue;
                }
                ++agg.count;
                rel.push_back(row.rel_mse);
                if (std::isfinite(row.selection_error)) {
                    sel.push_back(row.selection_error);
                }
                if (std::isfinite(row.edge_density)) {
                    den.push_back(row.edge_density);
                }
            }
            std::tie(agg.rel_mse_mean, agg.rel_mse_std) = detail::mean_std(rel);
            std::tie(agg.selection_error_mean, agg.selection_error_std) =
                detail::mean_std(sel);
            std::tie(agg.edge_density_mean, agg.edge_density_std) = detail::mean_std(den);
            aggregates.push_back(std::move(agg));
        }
    }
    return aggregates;
}

/// Run every resample (optionally across threads; the reduction is a
/// deterministic fold in index order) and aggregate mean and standard
/// deviation per (method, training size).
inline ExperimentReport run_experiment(const ExperimentPlan& plan, int threads = 1) {
    validate_plan(plan);
    if (threads < 1) {
        throw invalid_input_error("run_experiment: thread count must be positive");
    }

    std::optional<TrueSystem> system;
    std::optional<TimeSeriesPanel> real_panel;
    if (plan.dataset.kind == DatasetSpec::Kind::synthetic) {
        system = generate_system(make_design(plan.dataset.design_id), plan.base_seed);
    } else {
        real_panel = detail::preprocess_real_panel(load_csv(plan.dataset.csv_path),
                                                   plan.dataset.transforms,
                                                   plan.dataset.clean_outliers);
    }

    std::vector<std::vector<ResampleRow>> per_resample(
        static_cast<size_t>(plan.resamples));
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::string failure;
    std::mutex failure_lock;

    auto worker = [&]() {
        for (int index = next.fetch_add(1); index < plan.resamples;
             index = next.fetch_add(1)) {
            if (failed.load()) {
                return;
            }
            try {
                per_resample[static_cast<size_t>(index)] = run_resample(
                    plan, index, system.has_value() ? &*system : nullptr,
                    real_panel.has_value() ? &*real_panel : nullptr);
            } catch (const std::exception& error) {
                const std::lock_guard<std::mutex> guard(failure_lock);
                if (!failed.exchange(true)) {
                    failure = error.what();
                }
                return;
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i) {
            pool.emplace_back(worker);
        }
        for (std::thread& thread : pool) {
            thread.join();
        }
    }
    if (failed.load()) {
        throw numerical_error("run_experiment: resample failed: " + failure);
    }

    ExperimentReport report;
    for (const Index t : plan.training_sizes) {
        for (const Method method : plan.methods) {
            const std::string name = method_name(method);
            for (int index = 0; index < plan.resamples; ++index) {
                for (const ResampleRow& row : per_resample[static_cast<size_t>(index)]) {
                    if (row.method == name && row.training_size == t) {
                        report.rows.push_back(row);
                    }
                }
            }
        }
    }
    report.aggregates = aggregate_rows(plan, report.rows);
    return report;
}

// ---------------------------------------------------------------------------
// Report emission

namespace detail {

inline std::string csv_number(double value) { return format_g17(value); }

// Status text lands in a comma-separated cell; keep it one field wide.
inline std::string csv_safe(std::string text) {
    for (char& c : text) {
        if (c == ',') {
            c = ';';
        } else if (c == '\n' || c == '\r') {
            c = ' ';
        }
    }
    return text;
}

}  // namespace detail

/// report.csv: everything deterministic per (plan, seed). Wall-clock timings
/// go to timings.csv so the main report stays byte-identical across runs.
inline std::string render_report_csv(const ExperimentReport& report) {
    std::ostringstream out;
    out << "method,training_size,resample,status,rel_mse,selection_error,edge_density,"
           "outer_iterations,lambda,kappa,rank\n";
    for (const ResampleRow& row : report.rows) {
        out << row.method << ',' << row.training_size << ',' << row.resample << ','
            << detail::csv_safe(row.status) << ',' << detail::csv_number(row.rel_mse) << ','
            << detail::csv_number(row.selection_error) << ','
            << detail::csv_number(row.edge_density) << ',' << row.outer_iterations << ','
            << detail::csv_number(row.chosen.lambda) << ','
            << detail::csv_number(row.chosen.kappa) << ',' << row.chosen.rank << '\n';
    }
    return out.str();
}

inline std::string render_timings_csv(const ExperimentReport& report) {
    std::ostringstream out;
    out << "method,training_size,resample,search_seconds,fit_seconds\n";
    for (const ResampleRow& row : report.rows) {
        out << row.method << ',' << row.training_size << ',' << row.resample << ','
            << detail::csv_number(row.search_seconds) << ','
            << detail::csv_number(row.fit_seconds) << '\n';
    }
    return out.str();
}

inline nlohmann::json summary_json(const ExperimentPlan& plan, const ExperimentReport& report) {
    nlohmann::json aggregates = nlohmann::json::array();
    for (const MethodAggregate& agg : report.aggregates) {
        aggregates.push_back({{"method", agg.method},
                              {"training_size", agg.training_size},
                              {"count", agg.count},
                              {"rel_mse_mean", agg.rel_mse_mean},
                              {"rel_mse_std", agg.rel_mse_std},
                              {"selection_error_mean", agg.selection_error_mean},
                              {"selection_error_std", agg.selection_error_std},
                              {"edge_density_mean", agg.edge_density_mean},
                              {"edge_density_std", agg.edge_density_std}});
    }
    return {{"plan", plan_to_json(plan)}, {"aggregates", aggregates}};
}

/// Per-method count, over resamples at the largest training size, of each
/// active off-diagonal edge.
inline std::string render_synthesis_csv(const ExperimentReport& report,
                                        const std::string& method, Index training_size) {
    Eigen::MatrixXi counts;
    std::vector<std::string> nodes;
    for (const ResampleRow& row : report.rows) {
        if (row.method != method || row.training_size != training_size ||
            row.status != "ok" || !row.graph.has_value()) {
            continue;
        }
        const GrangerGraph& graph = *row.graph;
        if (counts.size() == 0) {
            counts.setZero(graph.adjacency.rows(), graph.adjacency.cols());
            nodes = graph.nodes;
        }
        counts += graph.adjacency.cast<int>();
    }
    std::ostringstream out;
    out << "from";
    for (const std::string& node : nodes) {
        out << ',' << node;
    }
    out << '\n';
    for (Index l = 0; l < counts.rows(); ++l) {
        out << nodes[static_cast<size_t>(l)];
        for (Index c = 0; c < counts.cols(); ++c) {
            out << ',' << counts(l, c);
        }
        out << '\n';
    }
    return out.str();
}

/// Write report.csv, timings.csv, summary.json and per-method synthesis
/// matrices into `directory` (which must exist). All writes are atomic.
inline void write_experiment_outputs(const ExperimentPlan& plan, const ExperimentReport& report,
                                     const std::string& directory) {
    const std::string base = directory.empty() ? std::string(".") : directory;
    detail::atomic_write(base + "/report.csv", render_report_csv(report));
    detail::atomic_write(base + "/timings.csv", render_timings_csv(report));
    detail::atomic_write(base + "/summary.json", summary_json(plan, report).dump(2) + "\n");
    if (!plan.training_sizes.empty()) {
        const Index largest =
            *std::max_element(plan.training_sizes.begin(), plan.training_sizes.end());
        for (const Method method : plan.methods) {
            if (method == Method::random_walk) {
                continue;  // no graph to synthesize
            }
            const std::string name = method_name(method);
            detail::atomic_write(base + "/synthesis_" + name + ".csv",
                                 render_synthesis_csv(report, name, largest));
        }
    }
}

}  // namespace clvar

#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clvar/errors.hpp"
#include "clvar/panel.hpp"

namespace clvar {

// Factor matrices of the structured learner, kept alongside the assembled
// weights so a fitted model can be inspected and re-serialized losslessly.
struct ClvarFactors {
    MatrixXd gamma;  // K x K, diagonal fixed at 1
    MatrixXd d;      // K x r, columns on the kappa-simplex
    MatrixXd g;      // r x K, columns on the unit simplex
    MatrixXd v;      // Kp x K, unconstrained directions
};

// Weight column k holds the model for task k; block rows follow the LagDesign
// layout, so rows [b*p, (b+1)*p) of column k are the lag profile of input
// series b.
struct VarModel {
    MatrixXd weights;  // Kp x K
    Index lag_order = 0;
    std::vector<std::string> series_names;
    StandardizationStats stats;
    std::string learner_tag;
    std::optional<ClvarFactors> factors;

    Index width() const { return weights.cols(); }
};

struct GrangerGraph {
    std::vector<std::string> nodes;
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> adjacency;  // (l,k): l G-causes k
};

struct ForecastResult {
    MatrixXd predictions;     // H x K
    MatrixXd actuals;         // H x K
    MatrixXd squared_errors;  // H x K
};

inline StandardizationStats identity_stats(Index k) {
    StandardizationStats stats;
    stats.means = VectorXd::Zero(k);
    stats.scales = VectorXd::Ones(k);
    return stats;
}

inline void validate_model(const VarModel& model) {
    const auto k = static_cast<Index>(model.series_names.size());
    if (k < 1 || model.lag_order < 1) {
        throw invalid_input_error("model: K >= 1 and lag_order >= 1 required");
    }
    if (model.weights.rows() != k * model.lag_order || model.weights.cols() != k) {
        throw invalid_input_error("model: weights must be (K*p) x K");
    }
    if (!model.weights.allFinite()) {
        throw numerical_error("model: non-finite weights");
    }
    if (model.stats.means.size() != k || model.stats.scales.size() != k) {
        throw invalid_input_error("model: standardization stats must have K entries");
    }
}

/// Noise-free prediction x'W from the p most recent observations (newest
/// last), in the model's standardized scale.
inline VectorXd forecast_one_step(const VarModel& model, const MatrixXd& recent_history) {
    validate_model(model);
    const Index k = model.width();
    const Index p = model.lag_order;
    if (recent_history.rows() != p || recent_history.cols() != k) {
        throw invalid_input_error("forecast_one_step: history must be p x K");
    }
    VectorXd x(k * p);
    for (Index b = 0; b < k; ++b) {
        for (Index l = 1; l <= p; ++l) {
            x(LagDesign::column_of(b, l, p)) = recent_history(p - l, b);
        }
    }
    return model.weights.transpose() * x;
}

/// One-step forecasts slid across the hold-out window. Every forecast uses
/// the true observed history (earlier hold-out actuals included); parameters
/// are never updated.
inline ForecastResult rolling_holdout_forecast(const VarModel& model, const TimeSeriesPanel& panel,
                                               RowRange holdout) {
    validate_model(model);
    validate_panel(panel);
    if (panel.width() != model.width()) {
        throw invalid_input_error("rolling_holdout_forecast: panel width != model width");
    }
    if (holdout.count() < 1 || holdout.end > panel.length()) {
        throw invalid_input_error("rolling_holdout_forecast: hold-out range not in panel");
    }
    if (holdout.begin < model.lag_order) {
        throw data_error("rolling_holdout_forecast: fewer than lag_order rows precede hold-out");
    }
    const Index h = holdout.count();
    ForecastResult result;
    result.predictions.resize(h, model.width());
    result.actuals = panel.values.middleRows(holdout.begin, h);
    for (Index i = 0; i < h; ++i) {
        const Index t = holdout.begin + i;
        result.predictions.row(i) =
            forecast_one_step(model, panel.values.middleRows(t - model.lag_order,
                                                             model.lag_order))
                .transpose();
    }
    result.squared_errors = (result.predictions - result.actuals).array().square();
    return result;
}

/// Naive one-step reference: predict the previous observation.
inline ForecastResult random_walk_reference(const TimeSeriesPanel& panel, RowRange holdout) {
    validate_panel(panel);
    if (holdout.count() < 1 || holdout.end > panel.length() || holdout.begin < 1) {
        throw invalid_input_error("random_walk_reference: need one observation before hold-out");
    }
    const Index h = holdout.count();
    ForecastResult result;
    result.predictions = panel.values.middleRows(holdout.begin - 1, h);
    result.actuals = panel.values.middleRows(holdout.begin, h);
    result.squared_errors = (result.predictions - result.actuals).array().square();
    return result;
}

inline double mse(const ForecastResult& result) {
    if (result.squared_errors.size() == 0) {
        throw invalid_input_error("mse: empty forecast result");
    }
    return result.squared_errors.mean();
}

inline double relative_mse(const ForecastResult& result, const ForecastResult& reference) {
    if (result.squared_errors.rows() != reference.squared_errors.rows() ||
        result.squared_errors.cols() != reference.squared_errors.cols()) {
        throw invalid_input_error("relative_mse: dimension mismatch");
    }
    const double ref = mse(reference);
    if (!(ref > 0.0)) {
        throw invalid_input_error("relative_mse: reference MSE must be positive");
    }
    return mse(result) / ref;
}

/// Edge (l,k), l != k, is active iff any of the p entries of block (l,k)
/// exceeds zero_tol in magnitude. Proximal and projection steps produce exact
/// zeros, so the tolerance only guards against float dust.
inline GrangerGraph extract_granger_graph(const VarModel& model, double zero_tol = 1e-8) {
    validate_model(model);
    if (zero_tol < 0.0) {
        throw invalid_input_error("extract_granger_graph: zero_tol must be >= 0");
    }
    const Index k = model.width();
    const Index p = model.lag_order;
    GrangerGraph graph;
    graph.nodes = model.series_names;
    graph.adjacency.setConstant(k, k, false);
    for (Index l = 0; l < k; ++l) {
        for (Index col = 0; col < k; ++col) {
            if (l == col) {
                continue;
            }
            const double magnitude =
                model.weights.col(col).segment(l * p, p).cwiseAbs().maxCoeff();
            graph.adjacency(l, col) = magnitude > zero_tol;
        }
    }
    return graph;
}

/// Mean of false-negative and false-positive rates over ordered off-diagonal
/// pairs. A rate with an empty denominator contributes 0: no mistakes were
/// possible on that side.
inline double selection_error(const GrangerGraph& learned, const GrangerGraph& truth) {
    if (learned.nodes != truth.nodes) {
        throw invalid_input_error("selection_error: graphs must share the node set");
    }
    const Index k = static_cast<Index>(truth.nodes.size());
    if (learned.adjacency.rows() != k || truth.adjacency.rows() != k) {
        throw invalid_input_error("selection_error: adjacency size mismatch");
    }
    long positives = 0;
    long negatives = 0;
    long false_negatives = 0;
    long false_positives = 0;
    for (Index l = 0; l < k; ++l) {
        for (Index c = 0; c < k; ++c) {
            if (l == c) {
                continue;
            }
            if (truth.adjacency(l, c)) {
                ++positives;
                false_negatives += learned.adjacency(l, c) ? 0 : 1;
            } else {
                ++negatives;
                false_positives += learned.adjacency(l, c) ? 1 : 0;
            }
        }
    }
    const double fnr =
        positives > 0 ? static_cast<double>(false_negatives) / static_cast<double>(positives) : 0.0;
    const double fpr =
        negatives > 0 ? static_cast<double>(false_positives) / static_cast<double>(negatives) : 0.0;
    return (fnr + fpr) / 2.0;
}

inline double edge_density(const GrangerGraph& graph) {
    const Index k = static_cast<Index>(graph.nodes.size());
    if (graph.adjacency.rows() != k || graph.adjacency.cols() != k) {
        throw invalid_input_error("edge_density: adjacency size mismatch");
    }
    if (k < 2) {
        return 0.0;
    }
    long active = 0;
    for (Index l = 0; l < k; ++l) {
        for (Index c = 0; c < k; ++c) {
            if (l != c && graph.adjacency(l, c)) {
                ++active;
            }
        }
    }
    return static_cast<double>(active) / static_cast<double>(k * (k - 1));
}

inline std::string export_graph_dot(const GrangerGraph& graph) {
    std::ostringstream out;
    out << "digraph granger {\n";
    for (const auto& node : graph.nodes) {
        out << "  \"" << node << "\";\n";
    }
    const Index k = static_cast<Index>(graph.nodes.size());
    for (Index l = 0; l < k; ++l) {
        for (Index c = 0; c < k; ++c) {
            if (l != c && graph.adjacency(l, c)) {
                out << "  \"" << graph.nodes[static_cast<size_t>(l)] << "\" -> \""
                    << graph.nodes[static_cast<size_t>(c)] << "\";\n";
            }
        }
    }
    out << "}\n";
    return out.str();
}

namespace detail {

/// Model skeleton for learners that fit on a bare LagDesign: placeholder
// names and identity stats, overridden by callers that know the panel.
inline VarModel blank_model(const LagDesign& design, std::string tag) {
    const Index k = design.outputs.cols();
    VarModel model;
    model.weights = MatrixXd::Zero(design.inputs.cols(), k);
    model.lag_order = design.lag_order;
    for (Index c = 0; c < k; ++c) {
        model.series_names.push_back("s" + std::to_string(c + 1));
    }
    model.stats = identity_stats(k);
    model.learner_tag = std::move(tag);
    return model;
}

constexpr int kModelSchemaVersion = 1;

inline nlohmann::json matrix_to_json(const MatrixXd& m) {
    nlohmann::json flat = nlohmann::json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            flat.push_back(m(r, c));
        }
    }
    return flat;
}

inline MatrixXd matrix_from_json(const nlohmann::json& flat, Index rows, Index cols,
                                 const std::string& field) {
    if (!flat.is_array() || static_cast<Index>(flat.size()) != rows * cols) {
        throw data_error("model document: field '" + field + "' must hold " +
                         std::to_string(rows * cols) + " numbers");
    }
    MatrixXd m(rows, cols);
    Index i = 0;
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c, ++i) {
            const auto& v = flat[static_cast<size_t>(i)];
            if (!v.is_number()) {
                throw data_error("model document: field '" + field + "' has a non-numeric entry");
            }
            m(r, c) = v.get<double>();
        }
    }
    return m;
}

inline const nlohmann::json& require_field(const nlohmann::json& doc, const char* name) {
    const auto it = doc.find(name);
    if (it == doc.end()) {
        throw data_error(std::string("model document: missing field '") + name + "'");
    }
    return *it;
}

}  // namespace detail

inline nlohmann::json serialize_model(const VarModel& model) {
    validate_model(model);
    nlohmann::json doc;
    doc["schema_version"] = detail::kModelSchemaVersion;
    doc["learner_tag"] = model.learner_tag;
    doc["lag_order"] = model.lag_order;
    doc["series_names"] = model.series_names;
    doc["weights"] = detail::matrix_to_json(model.weights);
    doc["standardization"] = {
        {"means", std::vector<double>(model.stats.means.data(),
                                      model.stats.means.data() + model.stats.means.size())},
        {"scales", std::vector<double>(model.stats.scales.data(),
                                       model.stats.scales.data() + model.stats.scales.size())},
    };
    if (model.factors.has_value()) {
        doc["clvar_factors"] = {
            {"rank", model.factors->d.cols()},
            {"Gamma", detail::matrix_to_json(model.factors->gamma)},
            {"D", detail::matrix_to_json(model.factors->d)},
            {"G", detail::matrix_to_json(model.factors->g)},
            {"V", detail::matrix_to_json(model.factors->v)},
        };
    }
    return doc;
}

inline VarModel deserialize_model(const nlohmann::json& doc) {
    if (!doc.is_object()) {
        throw data_error("model document: not an object");
    }
    const auto& version = detail::require_field(doc, "schema_version");
    if (!version.is_number_integer() || version.get<int>() != detail::kModelSchemaVersion) {
        throw data_error("model document: unsupported schema_version (expected " +
                         std::to_string(detail::kModelSchemaVersion) + ")");
    }
    VarModel model;
    model.learner_tag = detail::require_field(doc, "learner_tag").get<std::string>();
    model.lag_order = detail::require_field(doc, "lag_order").get<Index>();
    model.series_names =
        detail::require_field(doc, "series_names").get<std::vector<std::string>>();
    const auto k = static_cast<Index>(model.series_names.size());
    if (k < 1 || model.lag_order < 1) {
        throw data_error("model document: needs >= 1 series and lag_order >= 1");
    }
    model.weights = detail::matrix_from_json(detail::require_field(doc, "weights"),
                                             k * model.lag_order, k, "weights");
    const auto& stats = detail::require_field(doc, "standardization");
    const auto means = detail::require_field(stats, "means").get<std::vector<double>>();
    const auto scales = detail::require_field(stats, "scales").get<std::vector<double>>();
    if (static_cast<Index>(means.size()) != k || static_cast<Index>(scales.size()) != k) {
        throw data_error("model document: standardization stats must have K entries");
    }
    model.stats.means = Eigen::Map<const VectorXd>(means.data(), k);
    model.stats.scales = Eigen::Map<const VectorXd>(scales.data(), k);
    if (doc.contains("clvar_factors")) {
        const auto& f = doc["clvar_factors"];
        const auto rank = detail::require_field(f, "rank").get<Index>();
        if (rank < 1 || rank > k) {
            throw data_error("model document: clvar_factors rank out of range");
        }
        ClvarFactors factors;
        factors.gamma = detail::matrix_from_json(detail::require_field(f, "Gamma"), k, k, "Gamma");
        factors.d = detail::matrix_from_json(detail::require_field(f, "D"), k, rank, "D");
        factors.g = detail::matrix_from_json(detail::require_field(f, "G"), rank, k, "G");
        factors.v = detail::matrix_from_json(detail::require_field(f, "V"), k * model.lag_order, k,
                                             "V");
        model.factors = std::move(factors);
    }
    validate_model(model);
    return model;
}

inline void save_model(const VarModel& model, const std::string& path) {
    const nlohmann::json doc = serialize_model(model);
    detail::atomic_write(path, [&](std::ofstream& out) { out << doc.dump(2) << '\n'; });
}

inline VarModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw data_error(path + ": cannot open");
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw data_error(path + ": invalid JSON: " + e.what());
    }
    return deserialize_model(doc);
}

}  // namespace clvar

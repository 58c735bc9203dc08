#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "clvar/errors.hpp"

namespace clvar {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Rows are time-ordered observations, oldest first.
struct TimeSeriesPanel {
    MatrixXd values;  // T x K
    std::vector<std::string> series_names;
    std::string frequency_tag;

    Index length() const { return values.rows(); }
    Index width() const { return values.cols(); }
};

// Half-open [begin, end) row window.
struct RowRange {
    Index begin = 0;
    Index end = 0;

    Index count() const { return end - begin; }
};

struct StandardizationStats {
    VectorXd means;
    VectorXd scales;  // sample standard deviations, always > 0
};

// Regression view of a panel: row t of `inputs` is
// (y_{t-1,1},...,y_{t-p,1}, y_{t-1,2},...,y_{t-p,K}), i.e. per-series blocks
// of p lags, newest lag first inside each block.
struct LagDesign {
    MatrixXd inputs;   // (T-p) x (K*p)
    MatrixXd outputs;  // (T-p) x K
    Index lag_order = 0;

    static Index column_of(Index series, Index lag, Index p) { return series * p + (lag - 1); }
};

namespace detail {

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> cells;
    size_t start = 0;
    while (true) {
        const size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            cells.push_back(trim(line.substr(start)));
            break;
        }
        cells.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
    return cells;
}

// Writes through a temporary file plus rename so readers never observe a
// partially written artifact.
template <class WriteBody>
    requires requires(WriteBody& writer, std::ofstream& out) { writer(out); }
void atomic_write(const std::string& path, WriteBody&& body) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw data_error(path + ": cannot open for writing");
        }
        body(out);
        out.flush();
        if (!out) {
            throw data_error(path + ": write failed");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw data_error(path + ": rename failed: " + ec.message());
    }
}

inline void atomic_write(const std::string& path, const std::string& body) {
    atomic_write(path, [&](std::ofstream& out) { out << body; });
}

}  // namespace detail

inline void validate_panel(const TimeSeriesPanel& panel) {
    if (panel.values.rows() < 1 || panel.values.cols() < 1) {
        throw invalid_input_error("panel: T >= 1 and K >= 1 required");
    }
    if (static_cast<Index>(panel.series_names.size()) != panel.values.cols()) {
        throw invalid_input_error("panel: series_names size must match column count");
    }
    if (!panel.values.allFinite()) {
        throw data_error("panel: non-finite values");
    }
}

/// Parses a comma-separated panel: header of series names, then one numeric
/// row per time point, oldest first. Errors carry 1-based data-row and column
/// positions.
inline TimeSeriesPanel load_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw data_error(path + ": cannot open");
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw data_error(path + ": empty file");
    }
    TimeSeriesPanel panel;
    for (const auto cell : detail::split_csv_line(line)) {
        panel.series_names.emplace_back(cell);
    }
    const auto k = static_cast<Index>(panel.series_names.size());
    if (k < 1 || (k == 1 && panel.series_names[0].empty())) {
        throw data_error(path + ": header row has no series names");
    }

    std::vector<double> data;
    Index rows = 0;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty() && in.peek() == EOF) {
            break;  // tolerate one trailing newline
        }
        ++rows;
        const auto cells = detail::split_csv_line(line);
        if (static_cast<Index>(cells.size()) != k) {
            throw data_error(path + ": data row " + std::to_string(rows) + ": expected " +
                             std::to_string(k) + " cells, found " + std::to_string(cells.size()));
        }
        for (Index c = 0; c < k; ++c) {
            const auto cell = cells[static_cast<size_t>(c)];
            double value = 0.0;
            const auto* first = cell.data();
            const auto* last = cell.data() + cell.size();
            const auto [ptr, ec] = std::from_chars(first, last, value);
            if (ec != std::errc() || ptr != last || cell.empty()) {
                throw data_error(path + ": data row " + std::to_string(rows) + ", column " +
                                 std::to_string(c + 1) + ": not a number: '" + std::string(cell) +
                                 "'");
            }
            if (!std::isfinite(value)) {
                throw data_error(path + ": data row " + std::to_string(rows) + ", column " +
                                 std::to_string(c + 1) + ": non-finite value");
            }
            data.push_back(value);
        }
    }
    if (rows == 0) {
        throw data_error(path + ": no data rows");
    }
    panel.values.resize(rows, k);
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < k; ++c) {
            panel.values(r, c) = data[static_cast<size_t>(r * k + c)];
        }
    }
    return panel;
}

inline void save_csv(const TimeSeriesPanel& panel, const std::string& path) {
    validate_panel(panel);
    detail::atomic_write(path, [&](std::ofstream& out) {
        for (size_t i = 0; i < panel.series_names.size(); ++i) {
            out << (i == 0 ? "" : ",") << panel.series_names[i];
        }
        out << '\n';
        for (Index r = 0; r < panel.values.rows(); ++r) {
            for (Index c = 0; c < panel.values.cols(); ++c) {
                out << (c == 0 ? "" : ",") << detail::format_g17(panel.values(r, c));
            }
            out << '\n';
        }
    });
}

/// Columnwise (y - mean)/scale across the whole panel, with mean and sample
/// standard deviation computed from `training` rows only.
inline std::pair<TimeSeriesPanel, StandardizationStats> standardize(const TimeSeriesPanel& panel,
                                                                    RowRange training) {
    validate_panel(panel);
    if (training.begin < 0 || training.end > panel.length() || training.count() < 2) {
        throw invalid_input_error("standardize: training range must lie in panel, length >= 2");
    }
    const Index n = training.count();
    const auto block = panel.values.middleRows(training.begin, n);
    StandardizationStats stats;
    stats.means = block.colwise().mean();
    stats.scales.resize(panel.width());
    for (Index c = 0; c < panel.width(); ++c) {
        const double ss = (block.col(c).array() - stats.means(c)).square().sum();
        stats.scales(c) = std::sqrt(ss / static_cast<double>(n - 1));
        if (!(stats.scales(c) > 0.0)) {
            throw data_error("standardize: series '" + panel.series_names[static_cast<size_t>(c)] +
                             "' is constant on the training window");
        }
    }
    TimeSeriesPanel out = panel;
    out.values = (panel.values.rowwise() - stats.means.transpose()).array().rowwise() /
                 stats.scales.transpose().array();
    return {std::move(out), std::move(stats)};
}

inline TimeSeriesPanel apply_standardization(const TimeSeriesPanel& panel,
                                             const StandardizationStats& stats) {
    validate_panel(panel);
    if (stats.means.size() != panel.width() || stats.scales.size() != panel.width()) {
        throw invalid_input_error("apply_standardization: stats width mismatch");
    }
    if (!(stats.scales.minCoeff() > 0.0)) {
        throw invalid_input_error("apply_standardization: scales must be positive");
    }
    TimeSeriesPanel out = panel;
    out.values = (panel.values.rowwise() - stats.means.transpose()).array().rowwise() /
                 stats.scales.transpose().array();
    return out;
}

inline TimeSeriesPanel invert_standardization(const TimeSeriesPanel& panel,
                                              const StandardizationStats& stats) {
    validate_panel(panel);
    if (stats.means.size() != panel.width() || stats.scales.size() != panel.width()) {
        throw invalid_input_error("invert_standardization: stats width mismatch");
    }
    TimeSeriesPanel out = panel;
    out.values = (panel.values.array().rowwise() * stats.scales.transpose().array()).rowwise() +
                 stats.means.transpose().array();
    return out;
}

namespace detail {

inline void require_positive_for_log(const VectorXd& series, const char* what) {
    for (Index i = 0; i < series.size(); ++i) {
        if (!(series(i) > 0.0)) {
            throw data_error(std::string(what) + ": non-positive value at observation " +
                             std::to_string(i + 1));
        }
    }
}

}  // namespace detail

/// Stationarizing transform, by code:
///   1 identity, 2 first difference, 3 second difference,
///   4 log, 5 log-ratio ln(z_t/z_{t-1}), 6 difference of log-ratios.
/// Output shortens by the differencing order (0/1/2/0/1/2).
inline VectorXd apply_transform(const VectorXd& series, int code) {
    if (code < 1 || code > 6) {
        throw invalid_input_error("apply_transform: code must be in 1..6");
    }
    if (!series.allFinite()) {
        throw data_error("apply_transform: non-finite input");
    }
    const Index order = (code == 1 || code == 4) ? 0 : (code == 2 || code == 5) ? 1 : 2;
    if (series.size() <= order) {
        throw invalid_input_error("apply_transform: series too short for code " +
                                  std::to_string(code));
    }
    switch (code) {
        case 1:
            return series;
        case 2:
            return series.tail(series.size() - 1) - series.head(series.size() - 1);
        case 3: {
            const VectorXd d = series.tail(series.size() - 1) - series.head(series.size() - 1);
            return d.tail(d.size() - 1) - d.head(d.size() - 1);
        }
        case 4:
            detail::require_positive_for_log(series, "apply_transform code 4");
            return series.array().log();
        case 5: {
            detail::require_positive_for_log(series, "apply_transform code 5");
            const VectorXd logs = series.array().log();
            return logs.tail(logs.size() - 1) - logs.head(logs.size() - 1);
        }
        default: {
            detail::require_positive_for_log(series, "apply_transform code 6");
            const VectorXd logs = series.array().log();
            const VectorXd ratio = logs.tail(logs.size() - 1) - logs.head(logs.size() - 1);
            return ratio.tail(ratio.size() - 1) - ratio.head(ratio.size() - 1);
        }
    }
}

inline VectorXd year_over_year_log_diff(const VectorXd& series, Index period) {
    if (period < 1) {
        throw invalid_input_error("year_over_year_log_diff: period must be positive");
    }
    if (series.size() <= period) {
        throw invalid_input_error("year_over_year_log_diff: series no longer than period");
    }
    detail::require_positive_for_log(series, "year_over_year_log_diff");
    const VectorXd logs = series.array().log();
    return logs.tail(logs.size() - period) - logs.head(logs.size() - period);
}

/// Means of consecutive triples. A trailing partial quarter is dropped and
/// reported through `dropped_partial`.
inline VectorXd quarterly_average(const VectorXd& monthly, bool* dropped_partial = nullptr) {
    if (monthly.size() < 3) {
        throw invalid_input_error("quarterly_average: need at least 3 observations");
    }
    const Index quarters = monthly.size() / 3;
    if (dropped_partial != nullptr) {
        *dropped_partial = (monthly.size() % 3 != 0);
    }
    VectorXd out(quarters);
    for (Index q = 0; q < quarters; ++q) {
        out(q) = monthly.segment(3 * q, 3).mean();
    }
    return out;
}

namespace detail {

// Quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * p;
    const auto lo = static_cast<size_t>(std::floor(h));
    const auto hi = static_cast<size_t>(std::ceil(h));
    return values[lo] + (h - std::floor(h)) * (values[hi] - values[lo]);
}

}  // namespace detail

/// Replaces observations farther than 6 IQR from the series median by the
/// median of the 5 preceding already-cleaned values. The detection bound is
/// computed once from the raw series; the first 5 observations are kept as-is.
inline VectorXd clean_outliers(const VectorXd& series) {
    if (series.size() < 6) {
        throw invalid_input_error("clean_outliers: need at least 6 observations");
    }
    if (!series.allFinite()) {
        throw data_error("clean_outliers: non-finite input");
    }
    std::vector<double> raw(series.data(), series.data() + series.size());
    const double median = detail::quantile(raw, 0.5);
    const double iqr = detail::quantile(raw, 0.75) - detail::quantile(raw, 0.25);
    const double bound = 6.0 * iqr;

    VectorXd cleaned = series;
    for (Index t = 5; t < cleaned.size(); ++t) {
        if (std::abs(series(t) - median) > bound) {
            double window[5];
            for (Index j = 0; j < 5; ++j) {
                window[j] = cleaned(t - 5 + j);
            }
            std::nth_element(window, window + 2, window + 5);
            cleaned(t) = window[2];
        }
    }
    return cleaned;
}

namespace detail {

inline void validate_design(const LagDesign& design) {
    if (design.lag_order < 1) {
        throw invalid_input_error("design: lag_order >= 1 required");
    }
    const Index k = design.outputs.cols();
    if (k < 1 || design.inputs.cols() != k * design.lag_order) {
        throw invalid_input_error("design: inputs must have K*p columns");
    }
    if (design.inputs.rows() != design.outputs.rows() || design.inputs.rows() < 1) {
        throw invalid_input_error("design: inputs/outputs row mismatch");
    }
    if (!design.inputs.allFinite() || !design.outputs.allFinite()) {
        throw invalid_input_error("design: non-finite entries");
    }
}

}  // namespace detail

inline LagDesign build_lag_design(const TimeSeriesPanel& panel, Index p) {
    validate_panel(panel);
    if (p < 1) {
        throw invalid_input_error("build_lag_design: lag order must be >= 1");
    }
    if (panel.length() <= p) {
        throw data_error("build_lag_design: need more than lag_order rows, have " +
                         std::to_string(panel.length()));
    }
    const Index t_total = panel.length();
    const Index k = panel.width();
    LagDesign design;
    design.lag_order = p;
    design.inputs.resize(t_total - p, k * p);
    design.outputs = panel.values.bottomRows(t_total - p);
    for (Index r = 0; r < t_total - p; ++r) {
        const Index t = p + r;
        for (Index b = 0; b < k; ++b) {
            for (Index l = 1; l <= p; ++l) {
                design.inputs(r, LagDesign::column_of(b, l, p)) = panel.values(t - l, b);
            }
        }
    }
    return design;
}

}  // namespace clvar

#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clvar/errors.hpp"
#include "clvar/model.hpp"
#include "clvar/optim.hpp"
#include "clvar/panel.hpp"

namespace clvar {

// One predictive cluster: the leaders drive every non-leader member; leaders
// themselves depend on their own past only.
struct ClusterLayout {
    std::vector<Index> members;  // all series in the cluster, leaders included
    std::vector<Index> leaders;
};

struct SyntheticDesign {
    int design_id = 0;
    Index k = 0;
    Index p_true = 5;
    std::vector<ClusterLayout> clusters;  // empty for the unclustered designs 1 and 2
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask;  // (l,c): block l->c may be nonzero
};

struct TrueSystem {
    MatrixXd coefficients;  // (K*p_true) x K, laid out like VarModel weights
    double noise_scale = 1.0;
    SyntheticDesign design;
    std::uint64_t seed = 0;
};

namespace detail {

inline Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask_from_clusters(
    Index k, const std::vector<ClusterLayout>& clusters) {
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask(k, k);
    mask.setConstant(false);
    mask.diagonal().setConstant(true);
    for (const auto& cluster : clusters) {
        for (const Index leader : cluster.leaders) {
            for (const Index member : cluster.members) {
                const bool member_is_leader =
                    std::find(cluster.leaders.begin(), cluster.leaders.end(), member) !=
                    cluster.leaders.end();
                if (!member_is_leader) {
                    mask(leader, member) = true;
                }
            }
        }
    }
    return mask;
}

inline std::vector<ClusterLayout> uniform_clusters(Index k, Index cluster_size,
                                                   Index leaders_per_cluster) {
    std::vector<ClusterLayout> clusters;
    for (Index start = 0; start < k; start += cluster_size) {
        ClusterLayout cluster;
        for (Index i = 0; i < cluster_size; ++i) {
            cluster.members.push_back(start + i);
        }
        for (Index i = 0; i < leaders_per_cluster; ++i) {
            cluster.leaders.push_back(start + i);
        }
        clusters.push_back(std::move(cluster));
    }
    return clusters;
}

}  // namespace detail

/// The six benchmark generating processes. 1: independent univariate series;
/// 2: fully connected system; 3: K=10, two clusters of five around one leader;
/// 4-6: K in {30,50,100}, clusters of ten around two leaders.
inline SyntheticDesign make_design(int design_id) {
    SyntheticDesign design;
    design.design_id = design_id;
    design.p_true = 5;
    switch (design_id) {
        case 1:
            design.k = 10;
            design.mask = detail::mask_from_clusters(design.k, {});
            break;
        case 2:
            design.k = 10;
            design.mask.setConstant(design.k, design.k, true);
            break;
        case 3:
            design.k = 10;
            design.clusters = detail::uniform_clusters(design.k, 5, 1);
            design.mask = detail::mask_from_clusters(design.k, design.clusters);
            break;
        case 4:
        case 5:
        case 6:
            design.k = design_id == 4 ? 30 : design_id == 5 ? 50 : 100;
            design.clusters = detail::uniform_clusters(design.k, 10, 2);
            design.mask = detail::mask_from_clusters(design.k, design.clusters);
            break;
        default:
            throw invalid_input_error("make_design: design id must be in 1..6");
    }
    return design;
}

/// Standard VAR companion form: top block row holds the per-lag coefficient
/// matrices (tasks by rows), identity blocks on the subdiagonal.
inline MatrixXd companion_matrix(const MatrixXd& w, Index k, Index p) {
    if (k < 1 || p < 1 || w.rows() != k * p || w.cols() != k) {
        throw invalid_input_error("companion_matrix: coefficient shape does not match K, p");
    }
    MatrixXd companion = MatrixXd::Zero(k * p, k * p);
    for (Index lag = 0; lag < p; ++lag) {
        for (Index task = 0; task < k; ++task) {
            for (Index b = 0; b < k; ++b) {
                companion(task, lag * k + b) = w(b * p + lag, task);
            }
        }
    }
    for (Index lag = 1; lag < p; ++lag) {
        companion.block(lag * k, (lag - 1) * k, k, k).setIdentity();
    }
    return companion;
}

/// Draw masked coefficients uniformly from [-1,-0.2] u [0.2,1], then shrink
/// everything geometrically (factor 0.95) until the companion spectral radius
/// is at most 0.95. Deterministic per seed.
inline TrueSystem generate_system(const SyntheticDesign& design, std::uint64_t seed) {
    if (design.k < 1 || design.p_true < 1 || design.mask.rows() != design.k ||
        design.mask.cols() != design.k) {
        throw invalid_input_error("generate_system: invalid design");
    }
    constexpr int kMaxShrinkSteps = 500;
    constexpr int kMaxAttempts = 8;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        // Fresh substream per attempt so a failed draw is not retried verbatim.
        std::mt19937_64 rng(seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(attempt));
        std::uniform_real_distribution<double> magnitude(0.2, 1.0);
        std::uniform_real_distribution<double> coin(0.0, 1.0);

        MatrixXd w = MatrixXd::Zero(design.k * design.p_true, design.k);
        for (Index b = 0; b < design.k; ++b) {
            for (Index task = 0; task < design.k; ++task) {
                if (!design.mask(b, task)) {
                    continue;
                }
                for (Index lag = 0; lag < design.p_true; ++lag) {
                    const double value = magnitude(rng);
                    w(b * design.p_true + lag, task) = coin(rng) < 0.5 ? -value : value;
                }
            }
        }
        for (int step = 0; step < kMaxShrinkSteps; ++step) {
            if (spectral_radius(companion_matrix(w, design.k, design.p_true)) <= 0.95) {
                TrueSystem system;
                system.coefficients = std::move(w);
                system.design = design;
                system.seed = seed;
                return system;
            }
            w *= 0.95;
        }
    }
    throw numerical_error("generate_system: could not reach a stationary system");
}

/// Iterate the VAR recursion from a zero initial state with i.i.d. standard
/// normal noise, discard `burn_in` rows, return the next `t_total` rows.
inline TimeSeriesPanel simulate(const TrueSystem& system, Index t_total, Index burn_in,
                                std::uint64_t seed) {
    const Index k = system.design.k;
    const Index p = system.design.p_true;
    if (t_total < 1) {
        throw invalid_input_error("simulate: length must be positive");
    }
    if (burn_in < 100) {
        throw invalid_input_error("simulate: burn-in must be at least 100");
    }
    if (system.coefficients.rows() != k * p || system.coefficients.cols() != k) {
        throw invalid_input_error("simulate: system coefficients do not match the design");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);

    const Index total = burn_in + t_total;
    MatrixXd values = MatrixXd::Zero(total, k);
    VectorXd x(k * p);
    for (Index t = 0; t < total; ++t) {
        x.setZero();
        for (Index lag = 1; lag <= p && lag <= t; ++lag) {
            for (Index b = 0; b < k; ++b) {
                x(b * p + (lag - 1)) = values(t - lag, b);
            }
        }
        for (Index task = 0; task < k; ++task) {
            const double level = system.coefficients.col(task).dot(x) +
                                 system.noise_scale * noise(rng);
            if (std::abs(level) > 1e8) {
                throw numerical_error("simulate: trajectory diverged, system is not stationary");
            }
            values(t, task) = level;
        }
    }

    TimeSeriesPanel panel;
    panel.values = values.bottomRows(t_total);
    for (Index c = 0; c < k; ++c) {
        panel.series_names.push_back("s" + std::to_string(c + 1));
    }
    panel.frequency_tag = "synthetic";
    return panel;
}

/// The generating coefficients wrapped as a forecaster; its rolling MSE is the
/// irreducible-error reference for RelMSE.
inline VarModel oracle_forecaster(const TrueSystem& system) {
    VarModel model;
    model.weights = system.coefficients;
    model.lag_order = system.design.p_true;
    for (Index c = 0; c < system.design.k; ++c) {
        model.series_names.push_back("s" + std::to_string(c + 1));
    }
    model.stats = identity_stats(system.design.k);
    model.learner_tag = "ORACLE";
    return model;
}

/// The design mask restricted to off-diagonal entries, as the ground-truth
/// G-causal graph for selection scoring.
inline GrangerGraph truth_graph(const SyntheticDesign& design) {
    GrangerGraph graph;
    for (Index c = 0; c < design.k; ++c) {
        graph.nodes.push_back("s" + std::to_string(c + 1));
    }
    graph.adjacency = design.mask;
    graph.adjacency.diagonal().setConstant(false);
    return graph;
}

inline nlohmann::json design_descriptor(const SyntheticDesign& design) {
    nlohmann::json clusters = nlohmann::json::array();
    for (const auto& cluster : design.clusters) {
        clusters.push_back({{"members", cluster.members}, {"leaders", cluster.leaders}});
    }
    return {{"design_id", design.design_id},
            {"series", design.k},
            {"lag_order", design.p_true},
            {"clusters", clusters}};
}

}  // namespace clvar

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "clvar/errors.hpp"

namespace clvar {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Scaled simplex {x : x >= 0, sum(x) = mass}.
struct SimplexSpec {
    Index dimension = 0;
    double mass = 1.0;
};

struct FistaConfig {
    double initial_step = 1.0;
    double backtrack_shrink = 0.5;
    int max_iterations = 5000;
    double objective_tolerance = 1e-8;
};

// min ||targets - design * w||^2 + penalty * ||w||^2
struct RidgeProblem {
    MatrixXd design;
    VectorXd targets;
    double penalty = 0.0;
};

struct FistaResult {
    VectorXd point;
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
    double last_relative_change = 0.0;
};

namespace detail {

inline void require_finite(const Eigen::Ref<const MatrixXd>& m, const char* what) {
    if (!m.allFinite()) {
        throw invalid_input_error(std::string(what) + ": non-finite entries");
    }
}

inline double relative_change(double previous, double current) {
    return std::abs(previous - current) / std::max(1.0, std::abs(previous));
}

}  // namespace detail

/// Euclidean projection onto the scaled simplex, sort-and-threshold method.
/// Entries at or below the threshold come out exactly zero.
inline VectorXd project_simplex(const VectorXd& v, const SimplexSpec& spec) {
    if (v.size() != spec.dimension) {
        throw invalid_input_error("project_simplex: vector length does not match the simplex dimension");
    }
    if (spec.dimension < 1 || !(spec.mass > 0.0)) {
        throw invalid_input_error("project_simplex: dimension >= 1 and mass > 0 required");
    }
    detail::require_finite(v, "project_simplex");

    std::vector<double> sorted(v.data(), v.data() + v.size());
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());

    double cumulative = 0.0;
    double theta = (sorted[0] - spec.mass);  // overwritten below; rho = 1 always admissible
    Index rho = 0;
    for (Index j = 0; j < v.size(); ++j) {
        cumulative += sorted[j];
        const double candidate = (cumulative - spec.mass) / static_cast<double>(j + 1);
        if (sorted[j] - candidate > 0.0) {
            rho = j;
            theta = candidate;
        }
    }
    (void)rho;
    return (v.array() - theta).max(0.0).matrix();
}

/// Accelerated proximal gradient (monotone FISTA) with backtracking line search.
/// `smooth` and `gradient` describe the differentiable part, `prox(x, step)` the
/// proximal map of step * nonsmooth, and `nonsmooth(x)` its value at x.
/// The iterate sequence is forced monotone in smooth + nonsmooth, so callers may
/// rely on objective(output) <= objective(start).
template <class Smooth, class Gradient, class Prox, class Nonsmooth>
FistaResult fista_backtracking(Smooth&& smooth, Gradient&& gradient, Prox&& prox,
                               Nonsmooth&& nonsmooth, const VectorXd& start,
                               const FistaConfig& cfg) {
    if (!(cfg.backtrack_shrink > 0.0 && cfg.backtrack_shrink < 1.0)) {
        throw invalid_input_error("fista: backtrack_shrink must lie in (0,1)");
    }
    if (!(cfg.objective_tolerance > 0.0) || cfg.max_iterations < 1 || !(cfg.initial_step > 0.0)) {
        throw invalid_input_error("fista: invalid configuration");
    }
    detail::require_finite(start, "fista start");

    VectorXd x = start;
    double fx = smooth(x) + nonsmooth(x);
    if (!std::isfinite(fx)) {
        throw numerical_error("fista: non-finite objective at start");
    }

    VectorXd y = x;
    double t = 1.0;
    double step = cfg.initial_step;
    FistaResult result;
    result.point = x;
    result.objective = fx;

    for (int it = 1; it <= cfg.max_iterations; ++it) {
        const VectorXd gy = gradient(y);
        const double fy = smooth(y);
        if (!std::isfinite(fy) || !gy.allFinite()) {
            throw numerical_error("fista: non-finite objective at iteration " + std::to_string(it));
        }

        VectorXd z;
        double fz = 0.0;
        for (;;) {
            z = prox(y - step * gy, step);
            fz = smooth(z);
            const VectorXd dz = z - y;
            const double quad = fy + gy.dot(dz) + dz.squaredNorm() / (2.0 * step);
            if (fz <= quad + 1e-12 * std::max(1.0, std::abs(quad))) {
                break;
            }
            step *= cfg.backtrack_shrink;
            if (step < 1e-300) {
                throw numerical_error("fista: line search underflow at iteration " +
                                      std::to_string(it));
            }
        }

        const double Fz = fz + nonsmooth(z);
        if (!std::isfinite(Fz)) {
            throw numerical_error("fista: non-finite objective at iteration " + std::to_string(it));
        }

        result.iterations = it;
        // The iterate sequence is kept monotone: a candidate only replaces the
        // incumbent when it does not increase the objective. Overshoots of the
        // accelerated step trigger a momentum restart instead.
        if (Fz <= fx) {
            const double rel = detail::relative_change(fx, Fz);
            const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
            y = z + ((t - 1.0) / t_next) * (z - x);
            x = std::move(z);
            fx = Fz;
            t = t_next;
            result.last_relative_change = rel;
            if (rel < cfg.objective_tolerance) {
                result.converged = true;
                break;
            }
        } else if (y != x) {
            t = 1.0;
            y = x;
        } else {
            // A plain proximal-gradient step from the incumbent satisfied the
            // backtracking model yet failed to improve: numerically stationary.
            result.last_relative_change = detail::relative_change(fx, Fz);
            result.converged = true;
            break;
        }
    }

    result.point = x;
    result.objective = fx;
    return result;
}

/// Projected-gradient specialisation: the nonsmooth part is the indicator of a
/// convex set given by its projection. Start must be feasible.
template <class Gradient, class Project, class Objective>
FistaResult fista_projected(Gradient&& gradient, Project&& project, Objective&& objective,
                            const VectorXd& start, const FistaConfig& cfg) {
    auto prox = [&project](const VectorXd& v, double /*step*/) { return project(v); };
    auto zero = [](const VectorXd&) { return 0.0; };
    return fista_backtracking(objective, gradient, prox, zero, start, cfg);
}

namespace detail {

// Solve (gram + penalty I) W = rhs for possibly many right-hand sides.
// gram must be symmetric positive semi-definite (a Gram matrix).
inline MatrixXd solve_normal_equations(const MatrixXd& gram, const MatrixXd& rhs, double penalty) {
    MatrixXd lhs = gram;
    lhs.diagonal().array() += penalty;
    if (penalty > 0.0) {
        Eigen::LLT<MatrixXd> llt(lhs);
        if (llt.info() != Eigen::Success) {
            throw numerical_error("ridge: Cholesky factorisation failed");
        }
        return llt.solve(rhs);
    }
    Eigen::FullPivLU<MatrixXd> lu(lhs);
    if (!lu.isInvertible()) {
        throw numerical_error("ridge: singular system (penalty 0 with rank-deficient design)");
    }
    return lu.solve(rhs);
}

}  // namespace detail

/// Closed-form ridge solution through the normal equations.
inline VectorXd ridge_solve(const RidgeProblem& p) {
    if (p.design.rows() != p.targets.size()) {
        throw invalid_input_error("ridge_solve: design rows must match target length");
    }
    if (p.penalty < 0.0) {
        throw invalid_input_error("ridge_solve: penalty must be non-negative");
    }
    detail::require_finite(p.design, "ridge_solve design");
    detail::require_finite(p.targets, "ridge_solve targets");
    const MatrixXd gram = p.design.transpose() * p.design;
    const VectorXd rhs = p.design.transpose() * p.targets;
    return detail::solve_normal_equations(gram, rhs, p.penalty);
}

inline double soft_threshold(double w, double t) {
    if (t < 0.0 || !std::isfinite(w) || !std::isfinite(t)) {
        throw invalid_input_error("soft_threshold: finite input and t >= 0 required");
    }
    const double shrunk = std::abs(w) - t;
    return shrunk > 0.0 ? (w > 0.0 ? shrunk : -shrunk) : 0.0;
}

/// Block shrinkage: w * max(1 - t/||w||, 0); exactly zero when ||w|| <= t.
inline VectorXd group_soft_threshold(const VectorXd& w, double t) {
    if (t < 0.0) {
        throw invalid_input_error("group_soft_threshold: t >= 0 required");
    }
    detail::require_finite(w, "group_soft_threshold");
    const double norm = w.norm();
    if (norm <= t) {
        return VectorXd::Zero(w.size());
    }
    return w * (1.0 - t / norm);
}

/// Largest eigenvalue modulus of a square real matrix.
///
/// Companion matrices of stable VARs routinely carry complex conjugate
/// dominant pairs, for which plain power iteration does not converge, so the
/// radius is taken from a dense real-Schur eigen-solve at every size. The
/// result is accurate well below any tol >= machine precision.
inline double spectral_radius(const MatrixXd& m, double tol = 1e-8) {
    if (m.rows() != m.cols()) {
        throw invalid_input_error("spectral_radius: matrix must be square");
    }
    if (!(tol > 0.0)) {
        throw invalid_input_error("spectral_radius: tol must be positive");
    }
    detail::require_finite(m, "spectral_radius");
    if (m.size() == 0) {
        return 0.0;
    }
    Eigen::EigenSolver<MatrixXd> solver(m, /*computeEigenvectors=*/false);
    if (solver.info() != Eigen::Success) {
        throw numerical_error("spectral_radius: eigen-solver did not converge");
    }
    return solver.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace clvar

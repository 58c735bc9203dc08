#pragma once

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "clvar/errors.hpp"
#include "clvar/model.hpp"
#include "clvar/optim.hpp"
#include "clvar/panel.hpp"

namespace clvar {

struct PenaltyConfig {
    double lambda = 0.0;
    FistaConfig solver;  // defaults: tol 1e-8, 5000 iterations
};

namespace detail {

// Shared machinery of the two sparse learners: per-task FISTA on the Gram
// form of ||y - X w||^2, so each iteration costs O((Kp)^2) regardless of T.
template <class Prox, class Nonsmooth>
VarModel fit_sparse(const LagDesign& design, const PenaltyConfig& cfg, const char* tag,
                    Prox&& make_prox, Nonsmooth&& make_nonsmooth) {
    validate_design(design);
    if (cfg.lambda < 0.0) {
        throw invalid_input_error(std::string(tag) + ": lambda must be >= 0");
    }
    const MatrixXd& x = design.inputs;
    const MatrixXd gram = x.transpose() * x;
    VarModel model = blank_model(design, tag);
    for (Index task = 0; task < design.outputs.cols(); ++task) {
        const VectorXd y = design.outputs.col(task);
        const VectorXd xty = x.transpose() * y;
        const double yty = y.squaredNorm();
        auto smooth = [&](const VectorXd& w) {
            return w.dot(gram * w) - 2.0 * xty.dot(w) + yty;
        };
        auto grad = [&](const VectorXd& w) -> VectorXd { return 2.0 * (gram * w - xty); };
        const FistaResult res =
            fista_backtracking(smooth, grad, make_prox(task), make_nonsmooth(task),
                               VectorXd::Zero(x.cols()), cfg.solver);
        if (!res.converged) {
            throw numerical_error(std::string(tag) + ": task " + std::to_string(task + 1) +
                                  " did not converge in " +
                                  std::to_string(cfg.solver.max_iterations) +
                                  " iterations (last relative objective change " +
                                  format_g17(res.last_relative_change) + ")");
        }
        model.weights.col(task) = res.point;
    }
    return model;
}

}  // namespace detail

/// Univariate ridge autoregressions: task k sees only its own p lags, so the
/// G-causal graph of the result is empty by construction.
inline VarModel fit_ar(const LagDesign& design, double lambda) {
    detail::validate_design(design);
    if (lambda < 0.0) {
        throw invalid_input_error("fit_ar: lambda must be >= 0");
    }
    const Index p = design.lag_order;
    VarModel model = detail::blank_model(design, "AR");
    for (Index task = 0; task < design.outputs.cols(); ++task) {
        RidgeProblem prob;
        prob.design = design.inputs.middleCols(task * p, p);
        prob.targets = design.outputs.col(task);
        prob.penalty = lambda;
        model.weights.col(task).segment(task * p, p) = ridge_solve(prob);
    }
    return model;
}

/// Full-input ridge VAR, one shared factorization for all task columns.
inline VarModel fit_varl2(const LagDesign& design, double lambda) {
    detail::validate_design(design);
    if (lambda < 0.0) {
        throw invalid_input_error("fit_varl2: lambda must be >= 0");
    }
    const MatrixXd gram = design.inputs.transpose() * design.inputs;
    const MatrixXd rhs = design.inputs.transpose() * design.outputs;
    VarModel model = detail::blank_model(design, "VARL2");
    model.weights = detail::solve_normal_equations(gram, rhs, lambda);
    return model;
}

/// Lasso-Granger: per task, min ||y - X w||^2 + lambda ||w||_1.
inline VarModel fit_varl1(const LagDesign& design, const PenaltyConfig& cfg) {
    auto make_prox = [&](Index) {
        return [lambda = cfg.lambda](const VectorXd& v, double step) -> VectorXd {
            VectorXd out(v.size());
            for (Index i = 0; i < v.size(); ++i) {
                out(i) = soft_threshold(v(i), step * lambda);
            }
            return out;
        };
    };
    auto make_nonsmooth = [&](Index) {
        return [lambda = cfg.lambda](const VectorXd& w) { return lambda * w.lpNorm<1>(); };
    };
    return detail::fit_sparse(design, cfg, "VARL1", make_prox, make_nonsmooth);
}

/// Grouped-lasso-Granger: per task, min ||y - X w||^2 + lambda sum_b ||w_b||_2
/// with one group per p-lag block, so blocks switch off as a whole.
inline VarModel fit_varlg(const LagDesign& design, const PenaltyConfig& cfg) {
    const Index p = design.lag_order;
    auto make_prox = [&](Index) {
        return [lambda = cfg.lambda, p](const VectorXd& v, double step) -> VectorXd {
            VectorXd out(v.size());
            for (Index b = 0; b * p < v.size(); ++b) {
                out.segment(b * p, p) = group_soft_threshold(v.segment(b * p, p), step * lambda);
            }
            return out;
        };
    };
    auto make_nonsmooth = [&](Index) {
        return [lambda = cfg.lambda, p](const VectorXd& w) {
            double acc = 0.0;
            for (Index b = 0; b * p < w.size(); ++b) {
                acc += w.segment(b * p, p).norm();
            }
            return lambda * acc;
        };
    };
    return detail::fit_sparse(design, cfg, "VARLG", make_prox, make_nonsmooth);
}

}  // namespace clvar

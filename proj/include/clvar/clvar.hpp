#pragma once

#include <chrono>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "clvar/errors.hpp"
#include "clvar/model.hpp"
#include "clvar/optim.hpp"
#include "clvar/panel.hpp"

namespace clvar {

struct ClvarHyperparams {
    double lambda = 1.0;   // ridge weight on V, must be > 0
    double kappa = 1.0;    // off-diagonal simplex mass
    Index rank = 1;        // dictionary atoms (clustered mode)
    double outer_tolerance = 1e-5;
    int max_outer_iterations = 200;
    FistaConfig inner;  // step-2 solver settings
};

enum class ClvarMode { shared, clustered };

struct FitTrace {
    std::vector<double> objectives;  // value at initialization, then one per outer iteration
    int iterations = 0;
    double seconds = 0.0;
    bool converged = false;
};

// Numerical failure during alternating descent, with the partial trace for
// post-mortem inspection.
class clvar_fit_error : public numerical_error {
public:
    clvar_fit_error(const std::string& msg, FitTrace trace)
        : numerical_error(msg), trace(std::move(trace)) {}
    FitTrace trace;
};

struct ClvarFit {
    VarModel model;
    ClvarFactors factors;
    FitTrace trace;
};

namespace detail {

inline void validate_factors_shape(const ClvarFactors& f, Index k, Index p) {
    if (f.gamma.rows() != k || f.gamma.cols() != k) {
        throw invalid_input_error("clvar factors: Gamma must be K x K");
    }
    if (f.v.rows() != k * p || f.v.cols() != k) {
        throw invalid_input_error("clvar factors: V must be (K*p) x K");
    }
}

inline void validate_hyperparams(const ClvarHyperparams& hp, Index k, ClvarMode mode) {
    if (!(hp.lambda > 0.0)) {
        throw invalid_input_error("clvar: lambda must be > 0");
    }
    if (!(hp.kappa > 0.0)) {
        throw invalid_input_error("clvar: kappa must be > 0");
    }
    if (mode == ClvarMode::clustered && (hp.rank < 1 || hp.rank > k)) {
        throw invalid_input_error("clvar: rank must lie in [1, K]");
    }
    if (!(hp.outer_tolerance > 0.0) || hp.max_outer_iterations < 1) {
        throw invalid_input_error("clvar: bad outer loop configuration");
    }
}

}  // namespace detail

/// Gamma = A - diag(A) + I: off-diagonal structure from A, unit diagonal
/// exactly (own history always enters unscaled).
inline MatrixXd gamma_from_structure(const MatrixXd& a) {
    if (a.rows() != a.cols()) {
        throw invalid_input_error("gamma_from_structure: A must be square");
    }
    MatrixXd gamma = a;
    gamma.diagonal().setOnes();
    return gamma;
}

/// W block (b,k) = gamma_{b,k} * v-block (b,k); a zero gamma entry zeroes the
/// whole block exactly.
inline MatrixXd assemble_W(const ClvarFactors& factors, Index p) {
    const Index k = factors.gamma.rows();
    detail::validate_factors_shape(factors, k, p);
    MatrixXd w(k * p, k);
    for (Index b = 0; b < k; ++b) {
        w.middleRows(b * p, p) =
            factors.v.middleRows(b * p, p).array().rowwise() *
            factors.gamma.row(b).array();
    }
    return w;
}

/// The fitting objective: squared forecast loss of the assembled weights plus
/// the ridge penalty on the rescaled directions V.
inline double clvar_objective(const ClvarFactors& factors, const LagDesign& design,
                              double lambda) {
    const MatrixXd w = assemble_W(factors, design.lag_order);
    if (w.rows() != design.inputs.cols() || w.cols() != design.outputs.cols()) {
        throw invalid_input_error("clvar_objective: factors do not match design");
    }
    return (design.outputs - design.inputs * w).squaredNorm() +
           lambda * factors.v.squaredNorm();
}

/// Step 1: exact per-task ridge on the block-reweighted design. Task k sees
/// Z^(k) = X with block b scaled by gamma_{b,k}; blocks with zero gamma come
/// back with exactly zero parameters.
inline MatrixXd step1_solve_V(const ClvarFactors& factors, const LagDesign& design,
                              double lambda) {
    const Index k = design.outputs.cols();
    const Index p = design.lag_order;
    detail::validate_factors_shape(factors, k, p);
    if (!(lambda > 0.0)) {
        throw invalid_input_error("step1_solve_V: lambda must be > 0");
    }
    const MatrixXd gram = design.inputs.transpose() * design.inputs;
    const MatrixXd xty = design.inputs.transpose() * design.outputs;
    MatrixXd v(k * p, k);
    VectorXd scale(k * p);
    for (Index task = 0; task < k; ++task) {
        for (Index b = 0; b < k; ++b) {
            scale.segment(b * p, p).setConstant(factors.gamma(b, task));
        }
        MatrixXd lhs = (scale * scale.transpose()).cwiseProduct(gram);
        lhs.diagonal().array() += lambda;
        Eigen::LLT<MatrixXd> llt(lhs);
        if (llt.info() != Eigen::Success) {
            throw numerical_error("step1_solve_V: Cholesky factorisation failed");
        }
        v.col(task) = llt.solve(scale.cwiseProduct(xty.col(task)));
    }
    return v;
}

// Step-2 inputs: per-task input products with the own column removed, and the
// residuals after own-history prediction.
struct StepTwoInputs {
    std::vector<MatrixXd> h;  // K matrices, each T' x K; h[k](t,b) = <v_{b,k}, x_{t,b}>, h[k](t,k) = 0
    MatrixXd r;               // T' x K; r(t,k) = y(t,k) - <v_{k,k}, x_{t,k}>
};

inline StepTwoInputs step2_build_H_R(const ClvarFactors& factors, const LagDesign& design) {
    const Index k = design.outputs.cols();
    const Index p = design.lag_order;
    detail::validate_factors_shape(factors, k, p);
    StepTwoInputs out;
    out.h.reserve(static_cast<size_t>(k));
    out.r.resize(design.outputs.rows(), k);
    for (Index task = 0; task < k; ++task) {
        MatrixXd h(design.outputs.rows(), k);
        for (Index b = 0; b < k; ++b) {
            h.col(b) = design.inputs.middleCols(b * p, p) * factors.v.col(task).segment(b * p, p);
        }
        out.r.col(task) = design.outputs.col(task) - h.col(task);
        h.col(task).setZero();
        out.h.push_back(std::move(h));
    }
    return out;
}

// Gram form of a least-squares subproblem: value and gradient of
// ||stacked residual - stacked design * x||^2 without the tall matrices.
struct QuadraticSubproblem {
    MatrixXd m;       // design' * design
    VectorXd u;       // design' * residual
    double constant;  // ||residual||^2

    double value(const VectorXd& x) const { return x.dot(m * x) - 2.0 * u.dot(x) + constant; }
    VectorXd gradient(const VectorXd& x) const { return 2.0 * (m * x - u); }
};

/// Shared-mode structure problem: min over the kappa-simplex of
/// sum_k ||r_k - H^(k) alpha||^2.
inline QuadraticSubproblem make_alpha_subproblem(const StepTwoInputs& inputs) {
    const auto k = static_cast<Index>(inputs.h.size());
    QuadraticSubproblem qp;
    qp.m = MatrixXd::Zero(k, k);
    qp.u = VectorXd::Zero(k);
    qp.constant = inputs.r.squaredNorm();
    for (Index task = 0; task < k; ++task) {
        qp.m.noalias() += inputs.h[static_cast<size_t>(task)].transpose() *
                          inputs.h[static_cast<size_t>(task)];
        qp.u.noalias() +=
            inputs.h[static_cast<size_t>(task)].transpose() * inputs.r.col(task);
    }
    return qp;
}

/// Clustered-mode per-task mixing problem: min over the unit simplex of
/// ||r_k - (H^(k) D) g||^2.
inline QuadraticSubproblem make_g_subproblem(const MatrixXd& h_task, const MatrixXd& d,
                                             const VectorXd& r_task) {
    const MatrixXd design = h_task * d;  // T' x r
    QuadraticSubproblem qp;
    qp.m = design.transpose() * design;
    qp.u = design.transpose() * r_task;
    qp.constant = r_task.squaredNorm();
    return qp;
}

// Dictionary problem over D (columns on kappa-simplices):
//   f(D) = sum_k ||r_k - H^(k) D g_k||^2.
// Equivalent to the vectorized form ||vec(R) - (Ghat ⊙ Hhat) vec(D)||^2; the
// Gram representation below avoids materializing that (T'K) x (Kr) matrix.
struct DSubproblem {
    std::vector<MatrixXd> m;  // per task: H^(k)' H^(k), K x K
    MatrixXd u;               // column k: H^(k)' r_k
    MatrixXd g;               // r x K mixing weights
    double constant;          // ||R||_F^2

    double value(const MatrixXd& d) const {
        double acc = constant;
        for (Index task = 0; task < u.cols(); ++task) {
            const VectorXd dg = d * g.col(task);
            acc += dg.dot(m[static_cast<size_t>(task)] * dg) - 2.0 * u.col(task).dot(dg);
        }
        return acc;
    }
    MatrixXd gradient(const MatrixXd& d) const {
        MatrixXd grad = MatrixXd::Zero(d.rows(), d.cols());
        for (Index task = 0; task < u.cols(); ++task) {
            const VectorXd dg = d * g.col(task);
            grad.noalias() +=
                2.0 * (m[static_cast<size_t>(task)] * dg - u.col(task)) * g.col(task).transpose();
        }
        return grad;
    }
};

inline DSubproblem make_d_subproblem(const StepTwoInputs& inputs, const MatrixXd& g) {
    const auto k = static_cast<Index>(inputs.h.size());
    DSubproblem dp;
    dp.m.reserve(static_cast<size_t>(k));
    dp.u.resize(k, k);
    dp.g = g;
    dp.constant = inputs.r.squaredNorm();
    for (Index task = 0; task < k; ++task) {
        const MatrixXd& h = inputs.h[static_cast<size_t>(task)];
        dp.m.push_back(h.transpose() * h);
        dp.u.col(task) = h.transpose() * inputs.r.col(task);
    }
    return dp;
}

inline VectorXd step2_solve_alpha(const QuadraticSubproblem& qp, double kappa,
                                  const VectorXd& start, const FistaConfig& cfg) {
    const SimplexSpec spec{start.size(), kappa};
    auto gradient = [&](const VectorXd& a) { return qp.gradient(a); };
    auto project = [&](const VectorXd& v) { return project_simplex(v, spec); };
    auto objective = [&](const VectorXd& a) { return qp.value(a); };
    return fista_projected(gradient, project, objective, start, cfg).point;
}

inline VectorXd step2_solve_g(const QuadraticSubproblem& qp, const VectorXd& start,
                              const FistaConfig& cfg) {
    return step2_solve_alpha(qp, 1.0, start, cfg);
}

inline MatrixXd step2_solve_d(const DSubproblem& dp, double kappa, const MatrixXd& start,
                              const FistaConfig& cfg) {
    const Index k = start.rows();
    const Index rank = start.cols();
    const SimplexSpec spec{k, kappa};
    auto as_matrix = [k, rank](const VectorXd& x) {
        return Eigen::Map<const MatrixXd>(x.data(), k, rank);
    };
    auto gradient = [&](const VectorXd& x) -> VectorXd {
        const MatrixXd grad = dp.gradient(as_matrix(x));
        return Eigen::Map<const VectorXd>(grad.data(), grad.size());
    };
    auto project = [&](const VectorXd& x) -> VectorXd {
        VectorXd out(x.size());
        for (Index j = 0; j < rank; ++j) {
            out.segment(j * k, k) = project_simplex(x.segment(j * k, k), spec);
        }
        return out;
    };
    auto objective = [&](const VectorXd& x) { return dp.value(as_matrix(x)); };
    const Eigen::Map<const VectorXd> start_vec(start.data(), start.size());
    const FistaResult res = fista_projected(gradient, project, objective, start_vec, cfg);
    return as_matrix(res.point);
}

/// Alternating descent. Shared mode learns one indicator profile for the
/// whole system (rank forced to 1 with unit mixing weights); clustered mode
/// learns dictionary D and mixing weights G, updating G before D.
inline ClvarFit fit_clvar(const LagDesign& design, const ClvarHyperparams& hp, ClvarMode mode) {
    detail::validate_design(design);
    const Index k = design.outputs.cols();
    const Index p = design.lag_order;
    detail::validate_hyperparams(hp, k, mode);
    const Index rank = mode == ClvarMode::shared ? 1 : hp.rank;

    ClvarFactors factors;
    factors.d = MatrixXd::Constant(k, rank, hp.kappa / static_cast<double>(k));
    factors.g = MatrixXd::Constant(rank, k, 1.0 / static_cast<double>(rank));
    factors.gamma = gamma_from_structure(factors.d * factors.g);
    factors.v = MatrixXd::Zero(k * p, k);

    FitTrace trace;
    trace.objectives.push_back(clvar_objective(factors, design, hp.lambda));

    const auto started = std::chrono::steady_clock::now();
    auto fail = [&](const std::string& msg) -> clvar_fit_error {
        trace.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                            .count();
        return clvar_fit_error(msg, trace);
    };

    for (int outer = 1; outer <= hp.max_outer_iterations; ++outer) {
        factors.v = step1_solve_V(factors, design, hp.lambda);

        const StepTwoInputs inputs = step2_build_H_R(factors, design);
        if (mode == ClvarMode::shared) {
            const QuadraticSubproblem qp = make_alpha_subproblem(inputs);
            factors.d.col(0) = step2_solve_alpha(qp, hp.kappa, factors.d.col(0), hp.inner);
        } else {
            for (Index task = 0; task < k; ++task) {
                const QuadraticSubproblem qp = make_g_subproblem(
                    inputs.h[static_cast<size_t>(task)], factors.d, inputs.r.col(task));
                factors.g.col(task) = step2_solve_g(qp, factors.g.col(task), hp.inner);
            }
            const DSubproblem dp = make_d_subproblem(inputs, factors.g);
            factors.d = step2_solve_d(dp, hp.kappa, factors.d, hp.inner);
        }
        factors.gamma = gamma_from_structure(factors.d * factors.g);

        const double objective = clvar_objective(factors, design, hp.lambda);
        if (!std::isfinite(objective)) {
            throw fail("fit_clvar: non-finite objective at outer iteration " +
                       std::to_string(outer));
        }
        const double previous = trace.objectives.back();
        trace.objectives.push_back(objective);
        trace.iterations = outer;
        if (std::abs(previous - objective) / std::max(1.0, std::abs(previous)) <
            hp.outer_tolerance) {
            trace.converged = true;
            break;
        }
    }
    trace.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    ClvarFit fit;
    fit.factors = factors;
    fit.trace = trace;
    fit.model = detail::blank_model(design, mode == ClvarMode::shared ? "CLVAR-SHARED" : "CLVAR");
    fit.model.weights = assemble_W(factors, p);
    fit.model.factors = factors;
    return fit;
}

}  // namespace clvar

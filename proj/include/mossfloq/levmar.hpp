#pragma once

// Levenberg-Marquardt for weighted least squares with Marquardt diagonal
// scaling and optional box constraints (applied by projection).

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "mossfloq/errors.hpp"

namespace mossfloq::lm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Options {
    int max_iterations = 500;
    double rel_chi2_tol = 1e-10;
    double step_tol = 1e-12;
    double lambda_init = 1e-3;
    double lambda_max = 1e12;
};

struct Result {
    VectorXd params;
    double chi2 = std::numeric_limits<double>::infinity();
    int iterations = 0;
    int n_residuals = 0;
    bool converged = false;
    std::string stop_reason;
    MatrixXd jtj; ///< J^T J at the solution (weighted residuals)
};

/// Residual callback: fills weighted residuals r(x) and, if jac != nullptr, dr/dx.
using ResidualFn = std::function<void(const VectorXd& x, VectorXd& r, MatrixXd* jac)>;

struct Bounds {
    VectorXd lower;
    VectorXd upper;
    bool empty() const { return lower.size() == 0 && upper.size() == 0; }
    void project(VectorXd& x) const {
        if (lower.size() == x.size()) x = x.cwiseMax(lower);
        if (upper.size() == x.size()) x = x.cwiseMin(upper);
    }
};

/// Forward-difference Jacobian, for models without analytic derivatives.
inline void numeric_jacobian(const ResidualFn& f, const VectorXd& x, const VectorXd& r0, MatrixXd& jac,
                             double rel_step = 1e-7) {
    jac.resize(r0.size(), x.size());
    VectorXd xp = x, rp;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        const double h = rel_step * std::max(std::abs(x[j]), 1e-8);
        xp[j] = x[j] + h;
        f(xp, rp, nullptr);
        jac.col(j) = (rp - r0) / h;
        xp[j] = x[j];
    }
}

inline Result minimize(const ResidualFn& f, VectorXd x, const Options& opt = {}, const Bounds& bounds = {}) {
    bounds.project(x);
    VectorXd r;
    MatrixXd J;
    f(x, r, &J);
    if (!r.allFinite() || !J.allFinite()) throw ConvergenceError("levenberg-marquardt: non-finite residuals at start");

    Result res;
    res.n_residuals = static_cast<int>(r.size());
    double chi2 = r.squaredNorm();
    double lambda = opt.lambda_init;
    double nu = 2.0;
    MatrixXd jtj = J.transpose() * J;
    VectorXd grad = J.transpose() * r;
    // damping scale: running max of diag(J^T J), so a column that flattens
    // (e.g. a transformed parameter at its bound) stays damped
    VectorXd scale = jtj.diagonal();

    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        bool accepted = false;
        double new_chi2 = chi2;
        VectorXd x_new, r_new, delta;
        double predicted = 0.0;
        while (lambda <= opt.lambda_max) {
            MatrixXd a = jtj;
            VectorXd damp(a.rows());
            for (Eigen::Index k = 0; k < a.rows(); ++k) {
                damp(k) = lambda * std::max(scale(k), 1e-30);
                a(k, k) += damp(k);
            }
            Eigen::LDLT<MatrixXd> ldlt(a);
            if (ldlt.info() != Eigen::Success) {
                lambda *= nu;
                nu *= 2.0;
                continue;
            }
            delta = -ldlt.solve(grad);
            x_new = x + delta;
            bounds.project(x_new);
            f(x_new, r_new, nullptr);
            new_chi2 = r_new.allFinite() ? r_new.squaredNorm() : std::numeric_limits<double>::infinity();
            if (new_chi2 <= chi2) {
                // reduction predicted by the linearized model for the unprojected step
                predicted = delta.dot(damp.cwiseProduct(delta)) - delta.dot(grad);
                accepted = true;
                break;
            }
            lambda *= nu;
            nu *= 2.0;
        }
        if (!accepted) {
            res.converged = true;
            res.stop_reason = "no downhill step (damping saturated)";
            break;
        }
        const double step = (x_new - x).norm();
        const double rel = (chi2 - new_chi2) / std::max(chi2, std::numeric_limits<double>::min());
        const double chi2_old = chi2;
        x = x_new;
        chi2 = new_chi2;
        f(x, r, &J);
        jtj = J.transpose() * J;
        grad = J.transpose() * r;
        scale = scale.cwiseMax(jtj.diagonal());
        // gain-ratio update (Nielsen): shrink the damping in proportion to how
        // well the quadratic model predicted the decrease
        const double rho = predicted > 0.0 ? (chi2_old - chi2) / predicted : 1.0;
        lambda = std::max(lambda * std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3)), 1e-15);
        nu = 2.0;
        if (rel < opt.rel_chi2_tol) {
            res.converged = true;
            res.stop_reason = "relative chi2 change below tolerance";
            ++it;
            break;
        }
        if (step < opt.step_tol * (x.norm() + opt.step_tol)) {
            res.converged = true;
            res.stop_reason = "step below tolerance";
            ++it;
            break;
        }
    }
    if (!res.converged) res.stop_reason = "iteration limit reached";
    res.params = x;
    res.chi2 = chi2;
    res.iterations = it;
    res.jtj = jtj;
    return res;
}

/// (J^T J)^-1; throws RankError when the information matrix is singular.
inline MatrixXd covariance_from_jtj(const MatrixXd& jtj, double rcond = 1e-14) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(jtj);
    const VectorXd& ev = es.eigenvalues();
    if (ev.size() == 0) return {};
    const double top = ev.cwiseAbs().maxCoeff();
    if (!(ev.minCoeff() > rcond * top)) throw RankError("information matrix is singular or ill-conditioned");
    return es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

} // namespace mossfloq::lm

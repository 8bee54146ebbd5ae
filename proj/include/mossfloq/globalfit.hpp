#pragma once

// Global fit of extracted sideband powers against drive amplitude x = sqrt(P_in):
// P_n(x) = norm * <J_n^2(m x y)>_alpha for orders 0..2, parameters (m, alpha, norm).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mossfloq/errors.hpp"
#include "mossfloq/extract.hpp"
#include "mossfloq/floquet.hpp"
#include "mossfloq/levmar.hpp"

namespace mossfloq::globalfit {

inline constexpr double kAlphaMax = 0.95;

/// norm * P_n(m x, alpha).
inline double model_prediction(int n, double x, double m, double alpha, double norm = 1.0) {
    if (!(x >= 0.0)) throw DomainError("drive amplitude must be >= 0");
    return norm * floquet::sideband_power(n, m * x, alpha);
}

/// One extracted point: powers of orders 0..2 with covariance at drive power P_in.
struct DataPoint {
    double drive_power_W = 0.0;
    Eigen::Vector3d p = Eigen::Vector3d::Zero();
    Eigen::Matrix3d covariance = Eigen::Matrix3d::Identity();

    double x() const { return std::sqrt(drive_power_W); }
};

inline DataPoint to_point(const extract::SidebandPowers& s) { return {s.drive_power_W, s.p, s.covariance}; }

struct FitOptions {
    std::vector<int> orders{0, 1, 2};
    bool log_m = false;          ///< optimize log m instead of m
    bool fix_alpha = false;
    double alpha_fixed = 0.0;
    bool fix_norm = false;
    double norm_fixed = 1.0;
    bool full_covariance = true; ///< whiten with the full per-point covariance, else its diagonal
    double boundary_tol = 1e-3;  ///< alpha closer than this to 0 or the cap is reported as pinned
    int grid_m = 80;
    int grid_alpha = 19;
    lm::Options lm;
};

struct PointResidual {
    double drive_power_W = 0.0;
    int order = 0;
    double observed = 0.0;
    double predicted = 0.0;
    double sigma = 0.0;
    double normalized = 0.0; ///< (observed - predicted) / sigma
};

struct GlobalFitResult {
    double m = 0.0, alpha = 0.0, norm = 1.0;
    double m_sigma = 0.0, alpha_sigma = 0.0, norm_sigma = 0.0;
    Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero(); ///< over (m, alpha, norm); fixed ones are zero
    bool covariance_ok = false;
    double chi2 = 0.0;
    int dof = 0;
    double chi2_reduced = 0.0;
    bool alpha_at_boundary = false;
    bool converged = false;
    int iterations = 0;
    std::string message;
    std::vector<PointResidual> residuals;
};

namespace detail {

struct Problem {
    std::vector<DataPoint> points;
    std::vector<Eigen::MatrixXd> whiten; ///< L^-1 over the used orders
    Eigen::MatrixXd joint_whiten;        ///< L^-1 over all stacked residuals, when a joint covariance is given
    FitOptions opt;
    int n_free = 0;

    // parameter vector layout: [m or log m] [u if alpha free] [norm if free]
    double m_of(const Eigen::VectorXd& q) const { return opt.log_m ? std::exp(q(0)) : q(0); }
    double alpha_of(const Eigen::VectorXd& q) const {
        if (opt.fix_alpha) return opt.alpha_fixed;
        const double s = std::sin(q(1));
        return kAlphaMax * s * s;
    }
    double norm_of(const Eigen::VectorXd& q) const { return opt.fix_norm ? opt.norm_fixed : q(n_free - 1); }

    int n_orders() const { return static_cast<int>(opt.orders.size()); }

    void residuals(const Eigen::VectorXd& q, Eigen::VectorXd& r, Eigen::MatrixXd* jac) const {
        const int k = n_orders();
        const double m = m_of(q), alpha = alpha_of(q), norm = norm_of(q);
        r.resize(static_cast<Eigen::Index>(points.size()) * k);
        if (jac) jac->setZero(r.size(), n_free);
        const int max_n = *std::max_element(opt.orders.begin(), opt.orders.end());
        for (std::size_t i = 0; i < points.size(); ++i) {
            const double x = points[i].x();
            Eigen::VectorXd d(k);
            Eigen::MatrixXd dp(k, n_free);
            if (jac) {
                const auto g = floquet::sideband_powers_with_gradient(max_n, m * x, alpha);
                for (int o = 0; o < k; ++o) {
                    const int n = opt.orders[o];
                    d(o) = points[i].p(n) - norm * g.value[n];
                    int col = 0;
                    const double dm = norm * g.d_m0[n] * x;
                    dp(o, col++) = opt.log_m ? dm * m : dm;
                    if (!opt.fix_alpha) dp(o, col++) = norm * g.d_alpha[n] * kAlphaMax * std::sin(2.0 * q(1));
                    if (!opt.fix_norm) dp(o, col++) = g.value[n];
                }
            } else {
                const auto v = floquet::sideband_powers(max_n, m * x, alpha);
                for (int o = 0; o < k; ++o) d(o) = points[i].p(opt.orders[o]) - norm * v[opt.orders[o]];
            }
            if (joint_whiten.size() > 0) {
                r.segment(static_cast<Eigen::Index>(i) * k, k) = d;
                if (jac) jac->middleRows(static_cast<Eigen::Index>(i) * k, k) = -dp;
            } else {
                r.segment(static_cast<Eigen::Index>(i) * k, k) = whiten[i] * d;
                if (jac) jac->middleRows(static_cast<Eigen::Index>(i) * k, k) = -whiten[i] * dp;
            }
        }
        if (joint_whiten.size() > 0) {
            r = joint_whiten * r;
            if (jac) *jac = joint_whiten * *jac;
        }
    }

    // whitened design column of P for a closed-form norm at fixed (m, alpha)
    double chi2_with_best_norm(double m, double alpha, double* norm_out) const {
        const int k = n_orders();
        const int max_n = *std::max_element(opt.orders.begin(), opt.orders.end());
        const auto nr = static_cast<Eigen::Index>(points.size()) * k;
        Eigen::VectorXd pv(nr), yv(nr);
        for (std::size_t i = 0; i < points.size(); ++i) {
            const auto v = floquet::sideband_powers(max_n, m * points[i].x(), alpha);
            Eigen::VectorXd pi(k), yi(k);
            for (int o = 0; o < k; ++o) {
                pi(o) = v[opt.orders[o]];
                yi(o) = points[i].p(opt.orders[o]);
            }
            const auto at = static_cast<Eigen::Index>(i) * k;
            if (joint_whiten.size() > 0) {
                pv.segment(at, k) = pi;
                yv.segment(at, k) = yi;
            } else {
                pv.segment(at, k) = whiten[i] * pi;
                yv.segment(at, k) = whiten[i] * yi;
            }
        }
        if (joint_whiten.size() > 0) {
            pv = joint_whiten * pv;
            yv = joint_whiten * yv;
        }
        const double ptp = pv.squaredNorm(), pty = pv.dot(yv), yty = yv.squaredNorm();
        double norm = opt.fix_norm ? opt.norm_fixed : (ptp > 0.0 ? pty / ptp : 1.0);
        if (!opt.fix_norm && !(norm > 0.0)) norm = 1.0;
        if (norm_out) *norm_out = norm;
        return yty - 2.0 * norm * pty + norm * norm * ptp;
    }
};

inline Eigen::MatrixXd whitening(const Eigen::Matrix3d& cov, const std::vector<int>& orders, bool full) {
    const int k = static_cast<int>(orders.size());
    Eigen::MatrixXd c(k, k);
    for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) c(a, b) = full || a == b ? cov(orders[a], orders[b]) : 0.0;
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() != Eigen::Success) throw RankError("globalfit: a point covariance is not positive definite");
    return llt.matrixL().solve(Eigen::MatrixXd::Identity(k, k));
}

} // namespace detail

/**
 * Least-squares fit of (m, alpha, norm) to sideband powers over all points
 * and orders. Starts from the best grid point in (m, alpha), the
 * normalization solved in closed form there, then refines by LM.
 *
 * `joint_covariance`, if given, is the 3N x 3N covariance of all points
 * stacked as (P0, P1, P2) per point in `data` order (zero-drive points
 * included); it replaces the per-point blocks and carries errors shared
 * between points.
 */
inline GlobalFitResult fit_global(std::span<const DataPoint> data, const FitOptions& opt = {},
                                  const Eigen::MatrixXd* joint_covariance = nullptr) {
    if (opt.orders.empty()) throw ConfigError("globalfit: no orders selected");
    for (int n : opt.orders)
        if (n < 0 || n > 2) throw ConfigError("globalfit: orders must be within 0..2");
    if (opt.fix_alpha && !(opt.alpha_fixed >= 0.0 && opt.alpha_fixed <= kAlphaMax))
        throw ConfigError("globalfit: fixed alpha outside [0, 0.95]");
    if (joint_covariance && (joint_covariance->rows() != 3 * static_cast<Eigen::Index>(data.size()) ||
                             joint_covariance->cols() != joint_covariance->rows()))
        throw ConfigError("globalfit: joint covariance must be 3N x 3N");
    detail::Problem prob;
    prob.opt = opt;
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& d = data[i];
        if (!(d.drive_power_W > 0.0)) continue;  // zero drive carries no information on m
        prob.points.push_back(d);
        prob.whiten.push_back(detail::whitening(d.covariance, opt.orders, opt.full_covariance));
        for (int n : opt.orders) rows.push_back(3 * static_cast<Eigen::Index>(i) + n);
    }
    if (joint_covariance) {
        const auto nr = static_cast<Eigen::Index>(rows.size());
        Eigen::MatrixXd c(nr, nr);
        for (Eigen::Index a = 0; a < nr; ++a)
            for (Eigen::Index b = 0; b < nr; ++b) c(a, b) = (*joint_covariance)(rows[a], rows[b]);
        Eigen::LLT<Eigen::MatrixXd> llt(c);
        if (llt.info() != Eigen::Success) throw RankError("globalfit: joint covariance is not positive definite");
        prob.joint_whiten = llt.matrixL().solve(Eigen::MatrixXd::Identity(nr, nr));
    }
    const int min_points = opt.orders.size() == 3 ? 4 : 2;
    if (static_cast<int>(prob.points.size()) < min_points)
        throw ConfigError("globalfit: need at least " + std::to_string(min_points) + " driven power points");
    prob.n_free = 1 + (opt.fix_alpha ? 0 : 1) + (opt.fix_norm ? 0 : 1);
    const int n_res = static_cast<int>(prob.points.size()) * prob.n_orders();
    if (n_res <= prob.n_free) throw ConfigError("globalfit: more parameters than residuals");

    // grid start: m0 at the largest drive spans [0.05, 12]
    double x_max = 0.0;
    for (const auto& p : prob.points) x_max = std::max(x_max, p.x());
    double best = std::numeric_limits<double>::infinity(), m0 = 1.0, a0 = opt.alpha_fixed, n0 = 1.0;
    const int na = opt.fix_alpha ? 1 : opt.grid_alpha;
    for (int i = 0; i < opt.grid_m; ++i) {
        const double m = std::exp(std::log(0.05) + (std::log(12.0) - std::log(0.05)) * i / (opt.grid_m - 1)) / x_max;
        for (int j = 0; j < na; ++j) {
            const double alpha = opt.fix_alpha ? opt.alpha_fixed : 0.9 * j / std::max(1, na - 1);
            double norm = 1.0;
            const double c2 = prob.chi2_with_best_norm(m, alpha, &norm);
            if (c2 < best) {
                best = c2;
                m0 = m;
                a0 = alpha;
                n0 = norm;
            }
        }
    }
    Eigen::VectorXd q(prob.n_free);
    int col = 0;
    q(col++) = opt.log_m ? std::log(m0) : m0;
    // keep u off the stationary points of sin^2 so alpha can move both ways
    if (!opt.fix_alpha) q(col++) = std::asin(std::sqrt(std::clamp(a0, 1e-4, kAlphaMax - 1e-4) / kAlphaMax));
    if (!opt.fix_norm) q(col++) = n0;

    lm::Bounds bounds;
    if (!opt.log_m) {
        bounds.lower = Eigen::VectorXd::Constant(prob.n_free, -std::numeric_limits<double>::infinity());
        bounds.upper = Eigen::VectorXd::Constant(prob.n_free, std::numeric_limits<double>::infinity());
        bounds.lower(0) = 1e-12;
    }
    const lm::ResidualFn f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd* j) {
        prob.residuals(x, r, j);
    };
    const auto res = lm::minimize(f, q, opt.lm, bounds);

    GlobalFitResult out;
    out.m = prob.m_of(res.params);
    out.alpha = prob.alpha_of(res.params);
    out.norm = prob.norm_of(res.params);
    out.chi2 = res.chi2;
    out.dof = n_res - prob.n_free;
    out.chi2_reduced = out.chi2 / out.dof;
    out.converged = res.converged;
    out.iterations = res.iterations;
    out.message = res.stop_reason;
    out.alpha_at_boundary =
        !opt.fix_alpha && (out.alpha < opt.boundary_tol || out.alpha > kAlphaMax - opt.boundary_tol);

    // covariance in natural parameters; alpha dropped when pinned (its derivative vanishes at 0)
    {
        FitOptions nat = opt;
        nat.log_m = false;
        const bool alpha_free = !opt.fix_alpha && !out.alpha_at_boundary;
        nat.fix_alpha = !alpha_free;
        nat.alpha_fixed = out.alpha;
        detail::Problem np = prob;
        np.opt = nat;
        np.n_free = 1 + (alpha_free ? 1 : 0) + (opt.fix_norm ? 0 : 1);
        Eigen::VectorXd qn(np.n_free);
        int c = 0;
        qn(c++) = out.m;
        if (alpha_free) qn(c++) = out.alpha;
        if (!opt.fix_norm) qn(c++) = out.norm;
        // Jacobian in alpha: evaluate in u and divide by d(alpha)/du
        Eigen::VectorXd r;
        Eigen::MatrixXd jn;
        if (alpha_free) {
            const double u = std::asin(std::sqrt(out.alpha / kAlphaMax));
            Eigen::VectorXd qu = qn;
            qu(1) = u;
            np.residuals(qu, r, &jn);
            jn.col(1) /= kAlphaMax * std::sin(2.0 * u);
        } else {
            np.residuals(qn, r, &jn);
        }
        try {
            const Eigen::MatrixXd cov = lm::covariance_from_jtj(jn.transpose() * jn);
            std::vector<int> map;
            map.push_back(0);
            if (alpha_free) map.push_back(1);
            if (!opt.fix_norm) map.push_back(2);
            for (int i = 0; i < static_cast<int>(map.size()); ++i)
                for (int j = 0; j < static_cast<int>(map.size()); ++j) out.covariance(map[i], map[j]) = cov(i, j);
            out.covariance_ok = true;
        } catch (const RankError& e) {
            out.message += std::string("; ") + e.what();
        }
        out.m_sigma = std::sqrt(out.covariance(0, 0));
        out.alpha_sigma = alpha_free ? std::sqrt(out.covariance(1, 1)) : std::numeric_limits<double>::quiet_NaN();
        if (opt.fix_alpha) out.alpha_sigma = 0.0;
        out.norm_sigma = std::sqrt(out.covariance(2, 2));
    }

    for (const auto& p : prob.points) {
        const auto v = floquet::sideband_powers(2, out.m * p.x(), out.alpha);
        for (int n : opt.orders) {
            PointResidual pr;
            pr.drive_power_W = p.drive_power_W;
            pr.order = n;
            pr.observed = p.p(n);
            pr.predicted = out.norm * v[n];
            pr.sigma = std::sqrt(p.covariance(n, n));
            pr.normalized = pr.sigma > 0.0 ? (pr.observed - pr.predicted) / pr.sigma : 0.0;
            out.residuals.push_back(pr);
        }
    }
    return out;
}

struct CPerp {
    double value = 0.0; ///< m / sqrt(W)
    double sigma = 0.0;
};

/// C_perp = m / (eta k0), error propagated linearly from m.
inline CPerp extract_c_perp(double m, double m_sigma, double eta, double k0_per_m) {
    if (!(eta > 0.0) || !(k0_per_m > 0.0)) throw ConfigError("extract_c_perp: eta and k0 must be positive");
    return {m / (eta * k0_per_m), m_sigma / (eta * k0_per_m)};
}

} // namespace mossfloq::globalfit

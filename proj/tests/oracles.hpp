// Independent brute-force oracles used by the tests. These deliberately
// avoid the library's computational paths: straight loops, no Gram-matrix
// shortcuts, plain Newton steps.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

/// Dense CP tensor by explicit triple loop over (i, j, k) and r.
inline std::vector<Eigen::MatrixXd> cp_brute_force(const Eigen::MatrixXd& A,
                                                   const Eigen::MatrixXd& B,
                                                   const Eigen::MatrixXd& C) {
    std::vector<Eigen::MatrixXd> out;
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        Eigen::MatrixXd m(B.rows(), C.rows());
        for (Eigen::Index j = 0; j < B.rows(); ++j)
            for (Eigen::Index k = 0; k < C.rows(); ++k) {
                double s = 0.0;
                for (Eigen::Index r = 0; r < A.cols(); ++r) s += A(i, r) * B(j, r) * C(k, r);
                m(j, k) = s;
            }
        out.push_back(std::move(m));
    }
    return out;
}

/// Central finite difference of f with respect to one scalar location.
inline double central_difference(const std::function<double()>& f, double& param, double h) {
    const double keep = param;
    param = keep + h;
    const double fp = f();
    param = keep - h;
    const double fm = f();
    param = keep;
    return (fp - fm) / (2.0 * h);
}

/// Pair-enumeration AUC (ties count half).
inline double auc_brute_force(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != -1) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

/// Second logistic-regression implementation: full Newton on the
/// log-likelihood written out longhand, arbitrary start point.
struct LogisticOracle {
    Eigen::VectorXd beta;  // includes intercept at index 0
    Eigen::MatrixXd covariance;
    bool converged = false;
};

inline LogisticOracle logistic_newton_oracle(const Eigen::MatrixXd& X_no_intercept,
                                             const std::vector<int>& labels01, double l2 = 0.0,
                                             Eigen::VectorXd start = {}) {
    const Eigen::Index n = X_no_intercept.rows();
    const Eigen::Index p = X_no_intercept.cols() + 1;
    Eigen::MatrixXd X(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        for (Eigen::Index j = 1; j < p; ++j) X(i, j) = X_no_intercept(i, j - 1);
    }
    LogisticOracle out;
    out.beta = start.size() == p ? start : Eigen::VectorXd::Zero(p);
    for (int iter = 0; iter < 200; ++iter) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(p);
        Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p, p);
        for (Eigen::Index i = 0; i < n; ++i) {
            double z = 0.0;
            for (Eigen::Index j = 0; j < p; ++j) z += X(i, j) * out.beta[j];
            const double mu = 1.0 / (1.0 + std::exp(-z));
            for (Eigen::Index j = 0; j < p; ++j) {
                grad[j] += (labels01[static_cast<std::size_t>(i)] - mu) * X(i, j);
                for (Eigen::Index k = 0; k < p; ++k)
                    hess(j, k) += mu * (1.0 - mu) * X(i, j) * X(i, k);
            }
        }
        for (Eigen::Index j = 1; j < p; ++j) {
            grad[j] -= l2 * out.beta[j];
            hess(j, j) += l2;
        }
        if (grad.lpNorm<Eigen::Infinity>() < 1e-10) {
            out.converged = true;
            out.covariance = hess.inverse();
            return out;
        }
        out.beta += hess.ldlt().solve(grad);
    }
    return out;
}

/// Tiny-step projected-gradient NNLS oracle:
/// minimize ||o - sum_r a_r b_r c_r||^2 over a >= 0 for one patient slice.
inline Eigen::VectorXd nnls_oracle(const Eigen::MatrixXd& slice, const Eigen::MatrixXd& B,
                                   const Eigen::MatrixXd& C, int iters = 200000,
                                   double step = 1e-4) {
    const Eigen::Index R = B.cols();
    Eigen::VectorXd a = Eigen::VectorXd::Zero(R);
    for (int t = 0; t < iters; ++t) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(R);
        for (Eigen::Index j = 0; j < B.rows(); ++j)
            for (Eigen::Index k = 0; k < C.rows(); ++k) {
                double pred = 0.0;
                for (Eigen::Index r = 0; r < R; ++r) pred += a[r] * B(j, r) * C(k, r);
                const double resid = pred - slice(j, k);
                for (Eigen::Index r = 0; r < R; ++r) grad[r] += 2.0 * resid * B(j, r) * C(k, r);
            }
        a = (a - step * grad).cwiseMax(0.0);
    }
    return a;
}

/// NNLS objective value for comparing solutions.
inline double nnls_objective(const Eigen::VectorXd& a, const Eigen::MatrixXd& slice,
                             const Eigen::MatrixXd& B, const Eigen::MatrixXd& C) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < B.rows(); ++j)
        for (Eigen::Index k = 0; k < C.rows(); ++k) {
            double pred = 0.0;
            for (Eigen::Index r = 0; r < B.cols(); ++r) pred += a[r] * B(j, r) * C(k, r);
            s += (pred - slice(j, k)) * (pred - slice(j, k));
        }
    return s;
}

}  // namespace oracles

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "phenotyper/common.hpp"
#include "phenotyper/transition.hpp"

namespace phenotyper {

enum class FactorInit {
    /// Farthest-point seeding of B, C from patient slice marginals plus
    /// uniform jitter. Breaks the column-collision symmetry that uniform
    /// random init suffers from when several phenotypes carry similar mass.
    Structured,
    /// Plain uniform(0,1) scaled by 1/sqrt(R).
    Uniform,
};

struct HyperParams {
    int rank = 5;                 // R
    double mu = 1.0;              // supervision weight
    double lambda = 0.1;          // l1 weight
    double gamma = 1.0;           // similarity coupling weight
    double learning_rate = 0.02;  // ADAM step size
    int max_iters = 1000;
    double dropout_rate = 0.1;    // applied to theta weights during training
    FactorInit init = FactorInit::Structured;
    std::uint64_t seed = 0;

    void validate() const {
        if (rank < 1) throw ConfigError("fit: rank must be >= 1");
        if (mu < 0 || lambda < 0 || gamma < 0) throw ConfigError("fit: weights must be >= 0");
        if (learning_rate <= 0) throw ConfigError("fit: learning_rate must be > 0");
        if (max_iters < 1) throw ConfigError("fit: max_iters must be >= 1");
        if (dropout_rate < 0 || dropout_rate >= 1)
            throw ConfigError("fit: dropout_rate must be in [0, 1)");
    }
};

struct FactorModel {
    Eigen::MatrixXd A;      // I x R patient memberships
    Eigen::MatrixXd B;      // J x R from-entity memberships
    Eigen::MatrixXd C;      // J x R to-entity memberships
    Eigen::VectorXd theta;  // R weights + intercept at the tail
    HyperParams hyper;

    int rank() const { return static_cast<int>(B.cols()); }
};

struct TrainTrace {
    std::vector<double> total;
    std::vector<double> tensor_term;
    std::vector<double> supervision_term;
    std::vector<double> l1_term;
    std::vector<double> similarity_term;
    int iterations = 0;
    bool converged_early = false;
};

struct ObjectiveValue {
    double total = 0.0;
    double tensor_term = 0.0;
    double supervision_term = 0.0;
    double l1_term = 0.0;
    double similarity_term = 0.0;
};

// ---------------------------------------------------------------------------
// CP reconstruction.
// ---------------------------------------------------------------------------

inline void check_factor_dims(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                              const Eigen::MatrixXd& C) {
    if (A.cols() != B.cols() || B.cols() != C.cols() || B.rows() != C.rows())
        throw Error("cp factors have inconsistent dimensions");
}

inline double cp_value(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                       const Eigen::MatrixXd& C, Eigen::Index i, Eigen::Index j,
                       Eigen::Index k) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < A.cols(); ++r) s += A(i, r) * B(j, r) * C(k, r);
    return s;
}

/// Full materialization, one J x J matrix per patient. Test-scale only.
inline std::vector<Eigen::MatrixXd> cp_dense(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                             const Eigen::MatrixXd& C) {
    check_factor_dims(A, B, C);
    std::vector<Eigen::MatrixXd> out;
    out.reserve(static_cast<std::size_t>(A.rows()));
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(B.rows(), C.rows());
        for (Eigen::Index r = 0; r < A.cols(); ++r)
            m += A(i, r) * (B.col(r) * C.col(r).transpose());
        out.push_back(std::move(m));
    }
    return out;
}

namespace detail {

inline void check_problem(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                          const Eigen::MatrixXd& C, const TransitionTensor& tensor,
                          const Eigen::MatrixXd& S, std::span<const int> labels) {
    check_factor_dims(A, B, C);
    if (static_cast<std::size_t>(A.rows()) != tensor.patients ||
        static_cast<std::size_t>(B.rows()) != tensor.entities)
        throw Error("factor/tensor dimension mismatch");
    if (S.rows() != S.cols() || S.rows() != B.rows())
        throw Error("similarity matrix dimension mismatch");
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-9)
        throw Error("similarity matrix must be symmetric");
    if (labels.size() != tensor.patients) throw Error("label count mismatch");
    for (int y : labels)
        if (y != 1 && y != -1) throw Error("labels must be +1 or -1");
}

/// Loss and gradients of the coupled objective. `theta_mask` (size R) carries
/// inverted-dropout factors for the supervision term; pass ones for
/// evaluation. Gradient outputs may be null when only the value is needed.
inline ObjectiveValue coupled_loss(
    const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& C,
    const Eigen::VectorXd& theta, const TransitionTensor& tensor, const Eigen::MatrixXd& S,
    std::span<const int> labels, double mu, double lambda, double gamma,
    const Eigen::VectorXd& theta_mask, Eigen::MatrixXd* gA, Eigen::MatrixXd* gB,
    Eigen::MatrixXd* gC, Eigen::VectorXd* gTheta) {
    const Eigen::Index R = A.cols();

    const Eigen::MatrixXd AtA = A.transpose() * A;
    const Eigen::MatrixXd BtB = B.transpose() * B;
    const Eigen::MatrixXd CtC = C.transpose() * C;

    ObjectiveValue value;

    // tensor term over the full I x J x J grid via the Gram identity:
    // ||O - Ohat||^2 = ||O||^2 - 2<O, Ohat> + sum((A'A) o (B'B) o (C'C))
    double norm_o2 = 0.0, cross = 0.0;
    if (gA) gA->setZero(A.rows(), R);
    if (gB) gB->setZero(B.rows(), R);
    if (gC) gC->setZero(C.rows(), R);
    for (std::size_t i = 0; i < tensor.patients; ++i) {
        const auto row_i = A.row(static_cast<Eigen::Index>(i));
        for (const auto& e : tensor.slice(i)) {
            norm_o2 += e.value * e.value;
            const auto row_j = B.row(e.from);
            const auto row_k = C.row(e.to);
            const Eigen::RowVectorXd jk = row_j.cwiseProduct(row_k);
            cross += e.value * row_i.dot(jk);
            if (gA) gA->row(static_cast<Eigen::Index>(i)) -= 2.0 * e.value * jk;
            if (gB) gB->row(e.from) -= 2.0 * e.value * row_i.cwiseProduct(row_k);
            if (gC) gC->row(e.to) -= 2.0 * e.value * row_i.cwiseProduct(row_j);
        }
    }
    const double norm_hat2 = (AtA.array() * BtB.array() * CtC.array()).sum();
    value.tensor_term = norm_o2 - 2.0 * cross + norm_hat2;
    if (gA) *gA += 2.0 * A * (BtB.array() * CtC.array()).matrix();
    if (gB) *gB += 2.0 * B * (AtA.array() * CtC.array()).matrix();
    if (gC) *gC += 2.0 * C * (AtA.array() * BtB.array()).matrix();

    // similarity coupling
    if (gamma > 0.0) {
        const Eigen::MatrixXd residB = S - B * B.transpose();
        const Eigen::MatrixXd residC = S - C * C.transpose();
        value.similarity_term = gamma * (residB.squaredNorm() + residC.squaredNorm());
        if (gB) *gB += gamma * (-4.0) * residB * B;
        if (gC) *gC += gamma * (-4.0) * residC * C;
    }

    // l1 (subgradient 0 at 0)
    value.l1_term =
        lambda * (A.cwiseAbs().sum() + B.cwiseAbs().sum() + C.cwiseAbs().sum());
    if (lambda > 0.0) {
        const auto sign = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
        if (gA) *gA += lambda * A.unaryExpr(sign);
        if (gB) *gB += lambda * B.unaryExpr(sign);
        if (gC) *gC += lambda * C.unaryExpr(sign);
    }

    // supervision: mu * sum_i log(1 + exp(-y_i (theta_w . A_i + theta_b)))
    if (gTheta) gTheta->setZero(R + 1);
    if (mu > 0.0) {
        const Eigen::VectorXd w = theta.head(R).cwiseProduct(theta_mask);
        const double b = theta[R];
        double nll = 0.0;
        for (std::size_t i = 0; i < tensor.patients; ++i) {
            const Eigen::Index ei = static_cast<Eigen::Index>(i);
            const double y = labels[i];
            const double z = A.row(ei).dot(w) + b;
            const double t = y * z;
            nll += t > 0.0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t));
            const double coeff = -y / (1.0 + std::exp(t));  // d nll_i / d z
            if (gA) gA->row(ei) += mu * coeff * w.transpose();
            if (gTheta) {
                gTheta->head(R) +=
                    mu * coeff * A.row(ei).transpose().cwiseProduct(theta_mask);
                (*gTheta)[R] += mu * coeff;
            }
        }
        value.supervision_term = mu * nll;
    }

    value.total = value.tensor_term + value.similarity_term + value.l1_term +
                  value.supervision_term;
    return value;
}

struct AdamState {
    Eigen::MatrixXd m, v;
    void init(Eigen::Index rows, Eigen::Index cols) {
        m = Eigen::MatrixXd::Zero(rows, cols);
        v = Eigen::MatrixXd::Zero(rows, cols);
    }
    void step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, double lr, int t) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
        const double bc1 = 1.0 - std::pow(b1, t);
        const double bc2 = 1.0 - std::pow(b2, t);
        param.array() -=
            lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    }
};

/// Farthest-point seeding of B and C from patient slice marginals.
inline void structured_init(const TransitionTensor& tensor, const Eigen::MatrixXd& S,
                            double gamma, int rank, Rng& rng, Eigen::MatrixXd& B,
                            Eigen::MatrixXd& C) {
    const Eigen::Index J = static_cast<Eigen::Index>(tensor.entities);
    const Eigen::Index I = static_cast<Eigen::Index>(tensor.patients);
    const Eigen::Index R = rank;

    Eigen::MatrixXd from_marg = Eigen::MatrixXd::Zero(I, J);
    Eigen::MatrixXd to_marg = Eigen::MatrixXd::Zero(I, J);
    std::vector<Eigen::Index> usable;
    for (Eigen::Index i = 0; i < I; ++i) {
        double total = 0.0;
        for (const auto& e : tensor.slice(static_cast<std::size_t>(i))) {
            from_marg(i, e.from) += e.value;
            to_marg(i, e.to) += e.value;
            total += e.value;
        }
        if (total > 0.0) {
            from_marg.row(i) /= total;
            to_marg.row(i) /= total;
            usable.push_back(i);
        }
    }

    // column magnitude anchored to the similarity fixed point when coupled,
    // otherwise to the mean tensor cell
    double scale;
    if (gamma > 0.0 && S.size() > 0) {
        scale = std::pow(S.squaredNorm() / static_cast<double>(R), 0.25);
    } else {
        const double mean_cell = tensor.total_mass() /
                                 (static_cast<double>(tensor.patients) *
                                  static_cast<double>(tensor.entities) *
                                  static_cast<double>(tensor.entities));
        scale = 2.0 * std::cbrt(std::max(mean_cell, 1e-12) / static_cast<double>(R)) *
                std::sqrt(static_cast<double>(J) / 3.0);
    }

    B.resize(J, R);
    C.resize(J, R);
    if (usable.size() < static_cast<std::size_t>(R)) {
        // not enough non-empty slices to seed from; fall back to uniform
        const double s = 1.0 / std::sqrt(static_cast<double>(R));
        for (Eigen::Index j = 0; j < J; ++j)
            for (Eigen::Index r = 0; r < R; ++r) {
                B(j, r) = rng.uniform() * s;
                C(j, r) = rng.uniform() * s;
            }
        return;
    }

    Eigen::MatrixXd profile(usable.size(), 2 * J);
    for (std::size_t u = 0; u < usable.size(); ++u) {
        profile.row(static_cast<Eigen::Index>(u)) << from_marg.row(usable[u]),
            to_marg.row(usable[u]);
        const double n = profile.row(static_cast<Eigen::Index>(u)).norm();
        if (n > 0.0) profile.row(static_cast<Eigen::Index>(u)) /= n;
    }

    std::vector<Eigen::Index> anchors;
    anchors.push_back(static_cast<Eigen::Index>(rng.uniform_index(usable.size())));
    Eigen::VectorXd min_dist = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(usable.size()));
    for (int r = 1; r < R; ++r) {
        const Eigen::VectorXd sims = profile * profile.row(anchors.back()).transpose();
        min_dist = min_dist.cwiseMin((1.0 - sims.array()).matrix());
        for (Eigen::Index a : anchors) min_dist[a] = -1.0;
        Eigen::Index next = 0;
        min_dist.maxCoeff(&next);
        anchors.push_back(next);
    }

    constexpr int kNeighborhood = 8;
    const double jitter = 0.04 * scale;
    for (int r = 0; r < R; ++r) {
        const Eigen::VectorXd sims = profile * profile.row(anchors[static_cast<std::size_t>(r)])
                                                   .transpose();
        std::vector<Eigen::Index> order(usable.size());
        for (std::size_t u = 0; u < usable.size(); ++u) order[u] = static_cast<Eigen::Index>(u);
        const std::size_t take = std::min<std::size_t>(kNeighborhood, usable.size());
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                          order.end(), [&](Eigen::Index a, Eigen::Index b) {
                              if (sims[a] != sims[b]) return sims[a] > sims[b];
                              return a < b;
                          });
        Eigen::VectorXd fdir = Eigen::VectorXd::Zero(J);
        Eigen::VectorXd tdir = Eigen::VectorXd::Zero(J);
        for (std::size_t u = 0; u < take; ++u) {
            fdir += from_marg.row(usable[static_cast<std::size_t>(order[u])]).transpose();
            tdir += to_marg.row(usable[static_cast<std::size_t>(order[u])]).transpose();
        }
        if (fdir.norm() > 0.0) fdir /= fdir.norm();
        if (tdir.norm() > 0.0) tdir /= tdir.norm();
        for (Eigen::Index j = 0; j < J; ++j) {
            B(j, r) = fdir[j] * scale + rng.uniform() * jitter;
            C(j, r) = tdir[j] * scale + rng.uniform() * jitter;
        }
    }
}

}  // namespace detail

/// Evaluates the coupled objective at the given model (no dropout).
inline ObjectiveValue objective(const FactorModel& model, const TransitionTensor& tensor,
                                const Eigen::MatrixXd& S, std::span<const int> labels) {
    detail::check_problem(model.A, model.B, model.C, tensor, S, labels);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(model.rank());
    const ObjectiveValue v = detail::coupled_loss(
        model.A, model.B, model.C, model.theta, tensor, S, labels, model.hyper.mu,
        model.hyper.lambda, model.hyper.gamma, ones, nullptr, nullptr, nullptr, nullptr);
    if (!std::isfinite(v.total)) {
        std::string bad = !std::isfinite(v.tensor_term)        ? "tensor"
                          : !std::isfinite(v.supervision_term) ? "supervision"
                          : !std::isfinite(v.l1_term)          ? "l1"
                                                               : "similarity";
        throw Error("objective: non-finite " + bad + " term");
    }
    return v;
}

struct ObjectiveGradients {
    ObjectiveValue value;
    Eigen::MatrixXd grad_A, grad_B, grad_C;
    Eigen::VectorXd grad_theta;
};

/// Objective value plus analytic gradients (no dropout), for gradient
/// verification and diagnostics.
inline ObjectiveGradients objective_gradients(const FactorModel& model,
                                              const TransitionTensor& tensor,
                                              const Eigen::MatrixXd& S,
                                              std::span<const int> labels) {
    detail::check_problem(model.A, model.B, model.C, tensor, S, labels);
    ObjectiveGradients out;
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(model.rank());
    out.value = detail::coupled_loss(model.A, model.B, model.C, model.theta, tensor, S, labels,
                                     model.hyper.mu, model.hyper.lambda, model.hyper.gamma, ones,
                                     &out.grad_A, &out.grad_B, &out.grad_C, &out.grad_theta);
    return out;
}

struct FitResult {
    FactorModel model;
    TrainTrace trace;
};

/// ADAM with non-negativity projection on the coupled objective. Structured
/// init by default; inverted dropout on the theta weights during training.
/// Deterministic given (inputs, hyper, seed).
inline FitResult fit(const TransitionTensor& tensor, const Eigen::MatrixXd& S,
                     std::span<const int> labels, const HyperParams& hyper) {
    hyper.validate();
    const Eigen::Index I = static_cast<Eigen::Index>(tensor.patients);
    const Eigen::Index J = static_cast<Eigen::Index>(tensor.entities);
    const Eigen::Index R = hyper.rank;

    Rng rng(hyper.seed);
    FactorModel model;
    model.hyper = hyper;
    model.A.resize(I, R);
    const double uniform_scale = 1.0 / std::sqrt(static_cast<double>(R));
    for (Eigen::Index i = 0; i < I; ++i)
        for (Eigen::Index r = 0; r < R; ++r) model.A(i, r) = rng.uniform() * uniform_scale;
    if (hyper.init == FactorInit::Structured) {
        detail::structured_init(tensor, S, hyper.gamma, hyper.rank, rng, model.B, model.C);
    } else {
        model.B.resize(J, R);
        model.C.resize(J, R);
        for (Eigen::Index j = 0; j < J; ++j)
            for (Eigen::Index r = 0; r < R; ++r) model.B(j, r) = rng.uniform() * uniform_scale;
        for (Eigen::Index j = 0; j < J; ++j)
            for (Eigen::Index r = 0; r < R; ++r) model.C(j, r) = rng.uniform() * uniform_scale;
    }
    model.theta = Eigen::VectorXd::Zero(R + 1);
    detail::check_problem(model.A, model.B, model.C, tensor, S, labels);

    detail::AdamState adamA, adamB, adamC, adamTheta;
    adamA.init(I, R);
    adamB.init(J, R);
    adamC.init(J, R);
    adamTheta.init(R + 1, 1);

    Eigen::MatrixXd gA, gB, gC;
    Eigen::VectorXd gTheta;
    Eigen::VectorXd mask = Eigen::VectorXd::Ones(R);

    TrainTrace trace;
    constexpr double kRelTol = 1e-7;
    constexpr int kRelWindow = 10;
    for (int it = 1; it <= hyper.max_iters; ++it) {
        if (hyper.mu > 0.0 && hyper.dropout_rate > 0.0) {
            const double keep = 1.0 - hyper.dropout_rate;
            for (Eigen::Index r = 0; r < R; ++r)
                mask[r] = rng.uniform() >= hyper.dropout_rate ? 1.0 / keep : 0.0;
        }
        const ObjectiveValue v = detail::coupled_loss(
            model.A, model.B, model.C, model.theta, tensor, S, labels, hyper.mu, hyper.lambda,
            hyper.gamma, mask, &gA, &gB, &gC, &gTheta);
        trace.total.push_back(v.total);
        trace.tensor_term.push_back(v.tensor_term);
        trace.supervision_term.push_back(v.supervision_term);
        trace.l1_term.push_back(v.l1_term);
        trace.similarity_term.push_back(v.similarity_term);
        trace.iterations = it;
        if (!std::isfinite(v.total) || v.total > 1e12)
            throw TrainingError("fit: diverged at iteration " + std::to_string(it) +
                                " (total=" + format_double(v.total) + ")");

        adamA.step(model.A, gA, hyper.learning_rate, it);
        adamB.step(model.B, gB, hyper.learning_rate, it);
        adamC.step(model.C, gC, hyper.learning_rate, it);
        Eigen::MatrixXd gT = gTheta;
        Eigen::MatrixXd theta_mat = model.theta;
        adamTheta.step(theta_mat, gT, hyper.learning_rate, it);
        model.theta = theta_mat;
        model.A = model.A.cwiseMax(0.0);
        model.B = model.B.cwiseMax(0.0);
        model.C = model.C.cwiseMax(0.0);

        if (it > kRelWindow) {
            const double prev = trace.total[static_cast<std::size_t>(it - 1 - kRelWindow)];
            if (std::abs(v.total - prev) < kRelTol * std::max(1.0, std::abs(prev))) {
                trace.converged_early = true;
                break;
            }
        }
    }
    return {std::move(model), std::move(trace)};
}

/// sigma(theta_w . a + theta_b) per membership row.
inline Eigen::VectorXd predict(const Eigen::MatrixXd& memberships, const Eigen::VectorXd& theta) {
    if (memberships.cols() + 1 != theta.size())
        throw Error("predict: theta size must be rank + 1");
    const Eigen::VectorXd z =
        (memberships * theta.head(theta.size() - 1)).array() + theta[theta.size() - 1];
    return (1.0 + (-z.array()).exp()).inverse();
}

/// Non-negative least squares membership for unseen patient slices against
/// fixed B, C (projected gradient, tolerance 1e-6).
inline Eigen::MatrixXd project_new_patients(const TransitionTensor& new_slices,
                                            const Eigen::MatrixXd& B, const Eigen::MatrixXd& C) {
    check_factor_dims(Eigen::MatrixXd::Zero(1, B.cols()), B, C);
    if (static_cast<std::size_t>(B.rows()) != new_slices.entities)
        throw Error("project_new_patients: entity dimension mismatch");
    const Eigen::Index R = B.cols();
    const Eigen::MatrixXd H =
        ((B.transpose() * B).array() * (C.transpose() * C).array()).matrix();
    double lip = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) lip = std::max(lip, H.row(r).cwiseAbs().sum());
    const double step = lip > 0.0 ? 1.0 / (2.0 * lip) : 1.0;

    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(new_slices.patients), R);
    for (std::size_t i = 0; i < new_slices.patients; ++i) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(R);
        for (const auto& e : new_slices.slice(i))
            g += e.value * B.row(e.from).cwiseProduct(C.row(e.to)).transpose();
        Eigen::VectorXd a = Eigen::VectorXd::Zero(R);
        for (int iter = 0; iter < 10000; ++iter) {
            const Eigen::VectorXd next = (a - step * 2.0 * (H * a - g)).cwiseMax(0.0);
            const double change = (next - a).lpNorm<Eigen::Infinity>();
            a = next;
            if (change < 1e-6 * std::max(1.0, a.lpNorm<Eigen::Infinity>())) break;
        }
        out.row(static_cast<Eigen::Index>(i)) = a.transpose();
    }
    return out;
}

}  // namespace phenotyper

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "phenotyper/factorization.hpp"
#include "phenotyper/stats.hpp"
#include "phenotyper/transition.hpp"

namespace phenotyper {

/// Mann-Whitney AUC: probability a random positive outscores a random
/// negative, ties counted half.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw Error("auc: size mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum_pos += avg_rank;
                ++n_pos;
            } else if (labels[order[k]] == -1) {
                ++n_neg;
            } else {
                throw Error("auc: labels must be +1 or -1");
            }
        }
        i = j;
    }
    if (n_pos == 0 || n_neg == 0) throw Error("auc: both classes required");
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Gini index of a non-negative vector: 0 for uniform, 1 - 1/N for one-hot,
/// 0 for all-zero.
inline double gini_index(std::span<const double> values) {
    const std::size_t n = values.size();
    if (n == 0) return 0.0;
    double total = 0.0;
    for (double v : values) {
        if (v < 0.0) throw Error("gini_index: values must be non-negative");
        total += v;
    }
    if (total <= 0.0) return 0.0;
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    double acc = 0.0;
    for (std::size_t k = 1; k <= n; ++k)
        acc += (sorted[k - 1] / total) *
               ((static_cast<double>(n - k) + 0.5) / static_cast<double>(n));
    return 1.0 - 2.0 * acc;
}

/// Mean Gini over the 2R pattern vectors (columns of B and of C).
inline double gini_sparsity(const FactorModel& model) {
    double s = 0.0;
    const int R = model.rank();
    for (int r = 0; r < R; ++r) {
        const Eigen::VectorXd b = model.B.col(r);
        const Eigen::VectorXd c = model.C.col(r);
        s += gini_index(std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
        s += gini_index(std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
    }
    return s / (2.0 * R);
}

/// Mean pairwise cosine between concatenated pattern vectors [b_r; c_r].
/// Zero-norm patterns contribute 0 to their pairs.
inline double overlap(const FactorModel& model) {
    const int R = model.rank();
    if (R < 2) throw Error("overlap: requires rank >= 2");
    Eigen::MatrixXd F(model.B.rows() + model.C.rows(), R);
    F << model.B, model.C;
    double s = 0.0;
    int pairs = 0;
    for (int r = 0; r < R; ++r)
        for (int q = r + 1; q < R; ++q) {
            const double nr = F.col(r).norm(), nq = F.col(q).norm();
            s += (nr > 0.0 && nq > 0.0) ? F.col(r).dot(F.col(q)) / (nr * nq) : 0.0;
            ++pairs;
        }
    return s / pairs;
}

/// Mean squared reconstruction error over the full I x J x J grid.
inline double mse(const FactorModel& model, const TransitionTensor& tensor) {
    if (static_cast<std::size_t>(model.A.rows()) != tensor.patients ||
        static_cast<std::size_t>(model.B.rows()) != tensor.entities)
        throw Error("mse: dimension mismatch");
    const Eigen::MatrixXd gram = ((model.A.transpose() * model.A).array() *
                                  (model.B.transpose() * model.B).array() *
                                  (model.C.transpose() * model.C).array())
                                     .matrix();
    double norm_o2 = 0.0, cross = 0.0;
    for (std::size_t i = 0; i < tensor.patients; ++i)
        for (const auto& e : tensor.slice(i)) {
            norm_o2 += e.value * e.value;
            cross += e.value * model.A.row(static_cast<Eigen::Index>(i))
                                  .cwiseProduct(model.B.row(e.from))
                                  .cwiseProduct(model.C.row(e.to))
                                  .sum();
        }
    const double sse = norm_o2 - 2.0 * cross + gram.sum();
    const double cells = static_cast<double>(tensor.patients) *
                         static_cast<double>(tensor.entities) *
                         static_cast<double>(tensor.entities);
    return std::max(sse, 0.0) / cells;
}

struct MetricsReport {
    double auc = 0.0;
    double sparsity = 0.0;
    double overlap = 0.0;
    double mse = 0.0;
};

// ---------------------------------------------------------------------------
// Per-phenotype logistic significance (Wald tests).
// ---------------------------------------------------------------------------

struct PhenotypeSignificance {
    std::vector<double> coefficients;  // per phenotype
    std::vector<double> std_errors;
    std::vector<double> z_values;
    std::vector<double> p_values;
    double intercept = 0.0;
    double intercept_std_error = 0.0;
    bool standardized = true;
    double ridge = 0.0;  // nonzero marks the penalized fallback
    int iterations = 0;
};

/// Unpenalized logistic MLE on the membership matrix (columns standardized
/// by default); Wald z and two-sided p per phenotype. Std errors come from
/// the inverse observed information. Zero-variance columns report
/// coefficient 0, infinite std error, p = 1. `ridge > 0` switches to the
/// penalized fallback for separated data and is flagged in the output.
inline PhenotypeSignificance logit_significance(const Eigen::MatrixXd& memberships,
                                                std::span<const int> labels,
                                                bool standardize = true, double ridge = 0.0) {
    const Eigen::Index n = memberships.rows();
    const Eigen::Index R = memberships.cols();
    if (static_cast<std::size_t>(n) != labels.size())
        throw Error("logit_significance: label count mismatch");
    std::size_t n_pos = 0;
    for (int y : labels) {
        if (y != 1 && y != -1) throw Error("logit_significance: labels must be +1 or -1");
        n_pos += y == 1;
    }
    if (n_pos == 0 || n_pos == labels.size())
        throw Error("logit_significance: both classes required");

    // standardize and drop zero-variance columns
    std::vector<Eigen::Index> active;
    Eigen::MatrixXd X(n, R);
    for (Eigen::Index r = 0; r < R; ++r) {
        const double m = memberships.col(r).mean();
        const double var = (memberships.col(r).array() - m).square().sum() / n;
        if (var <= 0.0) continue;
        const Eigen::Index col = static_cast<Eigen::Index>(active.size());
        if (standardize)
            X.col(col) = ((memberships.col(r).array() - m) / std::sqrt(var)).matrix();
        else
            X.col(col) = memberships.col(r);
        active.push_back(r);
    }
    const Eigen::Index p = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd D(n, p + 1);
    D.col(0).setOnes();
    D.rightCols(p) = X.leftCols(p);
    Eigen::VectorXd y01(n);
    for (Eigen::Index i = 0; i < n; ++i) y01[i] = labels[static_cast<std::size_t>(i)] == 1;

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
    Eigen::MatrixXd info;
    bool converged = false;
    PhenotypeSignificance out;
    for (int iter = 0; iter < 100; ++iter) {
        const Eigen::VectorXd mu = (1.0 + (-(D * beta).array()).exp()).inverse();
        Eigen::VectorXd grad = D.transpose() * (y01 - mu);
        if (ridge > 0.0) grad -= ridge * beta;
        out.iterations = iter;
        if (grad.lpNorm<Eigen::Infinity>() <= 1e-9) {
            converged = true;
            const Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
            info = D.transpose() * w.asDiagonal() * D;
            if (ridge > 0.0) info.diagonal().array() += ridge;
            break;
        }
        const Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
        Eigen::MatrixXd H = D.transpose() * w.asDiagonal() * D;
        if (ridge > 0.0) H.diagonal().array() += ridge;
        beta += H.ldlt().solve(grad);
        if (!beta.allFinite() || beta.lpNorm<Eigen::Infinity>() > 1e6)
            throw TrainingError("logit_significance: diverged (likely complete separation); "
                                "rerun with ridge > 0");
    }
    if (!converged)
        throw TrainingError("logit_significance: no convergence in 100 iterations (likely "
                            "complete separation); rerun with ridge > 0");

    const Eigen::MatrixXd cov = info.inverse();
    out.standardized = standardize;
    out.ridge = ridge;
    out.intercept = beta[0];
    out.intercept_std_error = std::sqrt(std::max(cov(0, 0), 0.0));
    out.coefficients.assign(static_cast<std::size_t>(R), 0.0);
    out.std_errors.assign(static_cast<std::size_t>(R),
                          std::numeric_limits<double>::infinity());
    out.z_values.assign(static_cast<std::size_t>(R), 0.0);
    out.p_values.assign(static_cast<std::size_t>(R), 1.0);
    for (Eigen::Index k = 0; k < p; ++k) {
        const std::size_t r = static_cast<std::size_t>(active[static_cast<std::size_t>(k)]);
        out.coefficients[r] = beta[k + 1];
        out.std_errors[r] = std::sqrt(std::max(cov(k + 1, k + 1), 0.0));
        out.z_values[r] = out.coefficients[r] / out.std_errors[r];
        out.p_values[r] = normal_two_sided_p(out.z_values[r]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Membership stratification (Table 5b-style counts).
// ---------------------------------------------------------------------------

struct StratificationTable {
    std::vector<double> thresholds;
    // per phenotype: per bin (thresholds.size() + 1 bins): {positives, negatives}
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> counts;
};

/// Counts +1/-1 patients per membership bin and phenotype. Bin b holds values
/// in [t_{b-1}, t_b) with t_{-1} = -inf and t_m = +inf.
inline StratificationTable membership_stratification(const Eigen::MatrixXd& memberships,
                                                     std::span<const int> labels,
                                                     std::vector<double> thresholds) {
    if (!std::is_sorted(thresholds.begin(), thresholds.end()))
        throw Error("membership_stratification: thresholds must be ascending");
    if (static_cast<std::size_t>(memberships.rows()) != labels.size())
        throw Error("membership_stratification: label count mismatch");
    StratificationTable table;
    table.thresholds = thresholds;
    const std::size_t bins = thresholds.size() + 1;
    table.counts.assign(static_cast<std::size_t>(memberships.cols()),
                        std::vector<std::pair<std::size_t, std::size_t>>(bins, {0, 0}));
    for (Eigen::Index r = 0; r < memberships.cols(); ++r)
        for (Eigen::Index i = 0; i < memberships.rows(); ++i) {
            const double v = memberships(i, r);
            const std::size_t b = static_cast<std::size_t>(
                std::upper_bound(thresholds.begin(), thresholds.end(), v) - thresholds.begin());
            auto& cell = table.counts[static_cast<std::size_t>(r)][b];
            if (labels[static_cast<std::size_t>(i)] == 1)
                ++cell.first;
            else
                ++cell.second;
        }
    return table;
}

// ---------------------------------------------------------------------------
// Planted-truth alignment (verification helper).
// ---------------------------------------------------------------------------

/// Greedy matching of fitted (B, C) columns to reference columns by cosine of
/// the concatenated vectors [b_r; c_r]; returns the mean matched cosine.
inline double aligned_factor_cosine(const Eigen::MatrixXd& B, const Eigen::MatrixXd& C,
                                    const Eigen::MatrixXd& refB, const Eigen::MatrixXd& refC) {
    if (B.rows() != refB.rows() || C.rows() != refC.rows())
        throw Error("aligned_factor_cosine: row mismatch");
    const Eigen::Index R = B.cols(), Rt = refB.cols();
    Eigen::MatrixXd F(B.rows() + C.rows(), R), T(refB.rows() + refC.rows(), Rt);
    F << B, C;
    T << refB, refC;
    for (Eigen::Index r = 0; r < R; ++r) {
        const double n = F.col(r).norm();
        if (n > 0.0) F.col(r) /= n;
    }
    for (Eigen::Index r = 0; r < Rt; ++r) {
        const double n = T.col(r).norm();
        if (n > 0.0) T.col(r) /= n;
    }
    Eigen::MatrixXd M = F.transpose() * T;
    const Eigen::Index k = std::min(R, Rt);
    std::vector<bool> used_r(static_cast<std::size_t>(R), false);
    std::vector<bool> used_t(static_cast<std::size_t>(Rt), false);
    double total = 0.0;
    for (Eigen::Index step = 0; step < k; ++step) {
        double best = -2.0;
        Eigen::Index br = 0, bt = 0;
        for (Eigen::Index r = 0; r < R; ++r) {
            if (used_r[static_cast<std::size_t>(r)]) continue;
            for (Eigen::Index t = 0; t < Rt; ++t) {
                if (used_t[static_cast<std::size_t>(t)]) continue;
                if (M(r, t) > best) {
                    best = M(r, t);
                    br = r;
                    bt = t;
                }
            }
        }
        used_r[static_cast<std::size_t>(br)] = true;
        used_t[static_cast<std::size_t>(bt)] = true;
        total += best;
    }
    return total / static_cast<double>(k);
}

}  // namespace phenotyper

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "phenotyper/cohort.hpp"
#include "phenotyper/stats.hpp"

namespace phenotyper {

// ---------------------------------------------------------------------------
// Covariate encoding: standardized numerics, reference-dropped one-hot
// categoricals, 0/1 booleans. Zero-variance columns are excluded so the
// unpenalized information matrix stays invertible. Column order is fixed:
// [age, observation_window, gender..., race..., ethnicity..., brain_injury,
//  brain_tumor, stroke] with categorical levels in sorted order.
// ---------------------------------------------------------------------------

class CovariateEncoder {
  public:
    static CovariateEncoder fit(std::span<const Covariates> sample) {
        if (sample.empty()) throw Error("CovariateEncoder: empty sample");
        CovariateEncoder enc;
        enc.add_numeric("age_at_start", sample,
                        [](const Covariates& c) { return c.age_at_start; });
        enc.add_numeric("observation_window", sample,
                        [](const Covariates& c) { return c.observation_window; });
        enc.add_categorical("gender", sample, [](const Covariates& c) { return c.gender; });
        enc.add_categorical("race", sample, [](const Covariates& c) { return c.race; });
        enc.add_categorical("ethnicity", sample,
                            [](const Covariates& c) { return c.ethnicity; });
        enc.add_boolean("brain_injury", sample,
                        [](const Covariates& c) { return c.brain_injury; });
        enc.add_boolean("brain_tumor", sample,
                        [](const Covariates& c) { return c.brain_tumor; });
        enc.add_boolean("stroke", sample, [](const Covariates& c) { return c.stroke; });
        return enc;
    }

    Eigen::VectorXd encode(const Covariates& c) const {
        Eigen::VectorXd x(columns_.size());
        for (std::size_t k = 0; k < columns_.size(); ++k) x[k] = columns_[k].value(c);
        return x;
    }

    Eigen::MatrixXd encode_all(std::span<const Covariates> sample) const {
        Eigen::MatrixXd X(sample.size(), columns_.size());
        for (std::size_t i = 0; i < sample.size(); ++i) X.row(i) = encode(sample[i]).transpose();
        return X;
    }

    std::vector<std::string> column_names() const {
        std::vector<std::string> out;
        for (const auto& c : columns_) out.push_back(c.name);
        return out;
    }

    std::size_t dimension() const { return columns_.size(); }

  private:
    struct Column {
        std::string name;
        std::function<double(const Covariates&)> value;
    };
    std::vector<Column> columns_;

    template <typename Get>
    void add_numeric(const std::string& name, std::span<const Covariates> sample, Get get) {
        std::vector<double> vals;
        vals.reserve(sample.size());
        for (const auto& c : sample) vals.push_back(get(c));
        const double m = mean(vals);
        const double sd = std::sqrt(population_variance(vals));
        if (sd <= 0.0) return;  // constant column
        columns_.push_back({name, [get, m, sd](const Covariates& c) {
                                return (get(c) - m) / sd;
                            }});
    }

    template <typename Get>
    void add_categorical(const std::string& name, std::span<const Covariates> sample, Get get) {
        std::set<std::string> levels;
        for (const auto& c : sample) levels.insert(get(c));
        bool first = true;  // reference level dropped
        for (const auto& level : levels) {
            if (first) {
                first = false;
                continue;
            }
            columns_.push_back({name + "=" + level, [get, level](const Covariates& c) {
                                    return get(c) == level ? 1.0 : 0.0;
                                }});
        }
    }

    template <typename Get>
    void add_boolean(const std::string& name, std::span<const Covariates> sample, Get get) {
        bool any_true = false, any_false = false;
        for (const auto& c : sample) (get(c) ? any_true : any_false) = true;
        if (!any_true || !any_false) return;  // constant column
        columns_.push_back({name, [get](const Covariates& c) { return get(c) ? 1.0 : 0.0; }});
    }
};

struct PropensityModel {
    CovariateEncoder encoder;
    Eigen::VectorXd weights;  // per encoded column
    double intercept = 0.0;
    double accuracy = 0.0;    // in-sample
    int iterations = 0;

    double score(const Covariates& c) const {
        const double z = intercept + weights.dot(encoder.encode(c));
        return 1.0 / (1.0 + std::exp(-z));
    }
};

/// L2-penalized logistic regression via Newton/IRLS (intercept unpenalized).
/// Converges on max-abs gradient <= 1e-8 within 100 iterations.
inline PropensityModel fit_propensity(std::span<const Covariates> covariates,
                                      std::span<const int> exposure, double l2 = 0.0) {
    if (covariates.size() != exposure.size())
        throw Error("fit_propensity: covariates/exposure size mismatch");
    std::size_t n_pos = 0;
    for (int e : exposure) {
        if (e != 0 && e != 1) throw Error("fit_propensity: exposure must be 0/1");
        n_pos += static_cast<std::size_t>(e);
    }
    if (n_pos == 0 || n_pos == exposure.size())
        throw TrainingError("fit_propensity: both exposure classes required");
    if (l2 < 0.0) throw ConfigError("fit_propensity: l2 must be >= 0");

    PropensityModel model;
    model.encoder = CovariateEncoder::fit(covariates);
    const Eigen::Index n = static_cast<Eigen::Index>(covariates.size());
    const Eigen::Index p = static_cast<Eigen::Index>(model.encoder.dimension());

    Eigen::MatrixXd X(n, p + 1);
    X.col(0).setOnes();
    for (Eigen::Index i = 0; i < n; ++i)
        X.row(i).tail(p) = model.encoder.encode(covariates[i]).transpose();
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y[i] = exposure[i];

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
    Eigen::VectorXd penalty_mask = Eigen::VectorXd::Ones(p + 1);
    penalty_mask[0] = 0.0;

    const auto nll = [&](const Eigen::VectorXd& b) {
        const Eigen::VectorXd eta = X * b;
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double t = (y[i] > 0.5 ? 1.0 : -1.0) * eta[i];
            s += t > 0.0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t));
        }
        return s + 0.5 * l2 * (penalty_mask.array() * b.array().square()).sum();
    };

    constexpr double kGradTol = 1e-8;
    constexpr int kMaxIters = 100;
    bool converged = false;
    for (int iter = 0; iter < kMaxIters; ++iter) {
        const Eigen::VectorXd eta = X * beta;
        const Eigen::VectorXd mu = (1.0 + (-eta.array()).exp()).inverse();
        const Eigen::VectorXd grad =
            X.transpose() * (y - mu) - l2 * (penalty_mask.array() * beta.array()).matrix();
        model.iterations = iter;
        if (grad.lpNorm<Eigen::Infinity>() <= kGradTol) {
            converged = true;
            break;
        }
        const Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
        Eigen::MatrixXd H = X.transpose() * w.asDiagonal() * X;
        H.diagonal() += l2 * penalty_mask;
        const Eigen::VectorXd step = H.ldlt().solve(grad);
        // step halving keeps Newton monotone near separation
        const double f0 = nll(beta);
        double scale = 1.0;
        Eigen::VectorXd candidate = beta + step;
        for (int h = 0; h < 40 && nll(candidate) > f0; ++h) {
            scale *= 0.5;
            candidate = beta + scale * step;
        }
        beta = candidate;
        if (!beta.allFinite())
            throw TrainingError("fit_propensity: diverged; with l2=0 this indicates complete "
                                "separation, retry with l2 > 0");
    }
    if (!converged)
        throw TrainingError(l2 == 0.0
                                ? "fit_propensity: did not converge (likely complete "
                                  "separation); retry with l2 > 0"
                                : "fit_propensity: did not converge in 100 iterations");

    model.intercept = beta[0];
    model.weights = beta.tail(p);
    const Eigen::VectorXd mu = (1.0 + (-(X * beta).array()).exp()).inverse();
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        if ((mu[i] >= 0.5) == (y[i] > 0.5)) ++correct;
    model.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return model;
}

// ---------------------------------------------------------------------------
// Standardized bias.
// ---------------------------------------------------------------------------

/// 100 * |mean difference| / sqrt((var_case + var_control) / 2), population
/// variances. Returns 0 when both variances are zero and means agree, and
/// +infinity (degenerate) when they are zero but means differ.
inline double standardized_bias(std::span<const double> case_values,
                                std::span<const double> control_values) {
    if (case_values.empty() || control_values.empty())
        throw Error("standardized_bias: empty sample");
    const double m1 = mean(case_values), m2 = mean(control_values);
    const double v1 = population_variance(case_values);
    const double v2 = population_variance(control_values);
    const double pooled = std::sqrt((v1 + v2) / 2.0);
    if (pooled == 0.0)
        return m1 == m2 ? 0.0 : std::numeric_limits<double>::infinity();
    return 100.0 * std::abs(m1 - m2) / pooled;
}

/// Categorical covariates: indicator bias per level, maximum reported.
inline double standardized_bias_categorical(std::span<const std::string> case_values,
                                            std::span<const std::string> control_values) {
    std::set<std::string> levels(case_values.begin(), case_values.end());
    levels.insert(control_values.begin(), control_values.end());
    double worst = 0.0;
    for (const auto& level : levels) {
        std::vector<double> a, b;
        a.reserve(case_values.size());
        b.reserve(control_values.size());
        for (const auto& v : case_values) a.push_back(v == level ? 1.0 : 0.0);
        for (const auto& v : control_values) b.push_back(v == level ? 1.0 : 0.0);
        worst = std::max(worst, standardized_bias(a, b));
    }
    return worst;
}

/// Per-covariate standardized bias between two pools, in the cohort's fixed
/// covariate order.
inline std::vector<std::pair<std::string, double>> covariate_bias_table(
    std::span<const Covariates> cases, std::span<const Covariates> controls) {
    std::vector<std::pair<std::string, double>> out;
    const auto numeric = [&](const std::string& name, auto get) {
        std::vector<double> a, b;
        for (const auto& c : cases) a.push_back(get(c));
        for (const auto& c : controls) b.push_back(get(c));
        out.emplace_back(name, standardized_bias(a, b));
    };
    const auto categorical = [&](const std::string& name, auto get) {
        std::vector<std::string> a, b;
        for (const auto& c : cases) a.push_back(get(c));
        for (const auto& c : controls) b.push_back(get(c));
        out.emplace_back(name, standardized_bias_categorical(a, b));
    };
    numeric("age_at_start", [](const Covariates& c) { return c.age_at_start; });
    numeric("observation_window", [](const Covariates& c) { return c.observation_window; });
    categorical("gender", [](const Covariates& c) { return c.gender; });
    categorical("race", [](const Covariates& c) { return c.race; });
    categorical("ethnicity", [](const Covariates& c) { return c.ethnicity; });
    numeric("brain_injury", [](const Covariates& c) { return c.brain_injury ? 1.0 : 0.0; });
    numeric("brain_tumor", [](const Covariates& c) { return c.brain_tumor ? 1.0 : 0.0; });
    numeric("stroke", [](const Covariates& c) { return c.stroke ? 1.0 : 0.0; });
    return out;
}

// ---------------------------------------------------------------------------
// Greedy nearest-neighbor matching without replacement.
// ---------------------------------------------------------------------------

struct MatchCandidate {
    int id = 0;
    double propensity = 0.0;  // in (0, 1)
    Covariates covariates;
};

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (case_id, control_id)
    std::vector<std::pair<std::string, double>> standardized_biases;  // matched sets
    std::size_t dropped_cases = 0;
    double final_caliper = 0.0;
    int rounds = 1;
    std::string diagnostic;  // non-empty when no pairs or the budget was not met
};

namespace detail {

inline double logit(double p) {
    if (!(p > 0.0 && p < 1.0)) throw Error("match_cohort: propensity scores must be in (0,1)");
    return std::log(p / (1.0 - p));
}

struct GreedyOutcome {
    std::vector<std::pair<int, int>> pairs;        // (case_index, control_index)
};

inline GreedyOutcome greedy_match(const std::vector<double>& case_logits,
                                  const std::vector<int>& case_order,
                                  const std::vector<std::pair<double, int>>& control_entries,
                                  double caliper) {
    GreedyOutcome out;
    std::set<std::pair<double, int>> available(control_entries.begin(), control_entries.end());
    using Iter = std::set<std::pair<double, int>>::iterator;
    for (int ci : case_order) {
        if (available.empty()) break;
        const double lc = case_logits[ci];
        const Iter right = available.lower_bound({lc, std::numeric_limits<int>::min()});
        const double dist_right =
            right != available.end() ? right->first - lc : std::numeric_limits<double>::infinity();
        const double dist_left = right != available.begin()
                                     ? lc - std::prev(right)->first
                                     : std::numeric_limits<double>::infinity();
        const double best = std::min(dist_right, dist_left);
        if (!(best <= caliper)) continue;
        // among equidistant candidates (including equal-logit runs) the lowest
        // control id wins
        Iter pick = available.end();
        if (dist_right == best) {
            const Iter first_at =
                available.lower_bound({right->first, std::numeric_limits<int>::min()});
            pick = first_at;
        }
        if (dist_left == best) {
            const Iter left = std::prev(right);
            const Iter first_at =
                available.lower_bound({left->first, std::numeric_limits<int>::min()});
            if (pick == available.end() || first_at->second < pick->second) pick = first_at;
        }
        out.pairs.emplace_back(ci, pick->second);
        available.erase(pick);
    }
    return out;
}

}  // namespace detail

/// Greedy nearest-neighbor matching on logit propensity, without replacement,
/// cases processed in descending score order. If any covariate's standardized
/// bias on the matched sets exceeds `bias_budget` (percent), the caliper is
/// tightened by 0.8 and matching repeats, up to 20 rounds.
inline MatchResult match_cohort(std::span<const MatchCandidate> cases,
                                std::span<const MatchCandidate> controls, double caliper,
                                double bias_budget = 5.0) {
    if (cases.empty() || controls.empty())
        throw Error("match_cohort: empty case or control pool");
    if (caliper < 0.0) throw ConfigError("match_cohort: caliper must be >= 0");

    std::vector<double> case_logits(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i)
        case_logits[i] = detail::logit(cases[i].propensity);
    std::vector<std::pair<double, int>> control_entries(controls.size());
    std::vector<std::size_t> control_pos_by_id;
    {
        int max_id = 0;
        for (const auto& c : controls) max_id = std::max(max_id, c.id);
        control_pos_by_id.assign(static_cast<std::size_t>(max_id) + 1, 0);
    }
    for (std::size_t i = 0; i < controls.size(); ++i) {
        control_entries[i] = {detail::logit(controls[i].propensity), controls[i].id};
        control_pos_by_id[static_cast<std::size_t>(controls[i].id)] = i;
    }

    std::vector<int> case_order(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) case_order[i] = static_cast<int>(i);
    std::stable_sort(case_order.begin(), case_order.end(), [&](int a, int b) {
        if (cases[a].propensity != cases[b].propensity)
            return cases[a].propensity > cases[b].propensity;
        return cases[a].id < cases[b].id;
    });

    MatchResult result;
    double current_caliper = caliper;
    for (int round = 0; round < 20; ++round) {
        const auto greedy =
            detail::greedy_match(case_logits, case_order, control_entries, current_caliper);
        result.pairs.clear();
        result.rounds = round + 1;
        result.final_caliper = current_caliper;
        std::vector<Covariates> matched_cases, matched_controls;
        for (const auto& [ci, control_id] : greedy.pairs) {
            result.pairs.emplace_back(cases[ci].id, control_id);
            matched_cases.push_back(cases[ci].covariates);
            matched_controls.push_back(
                controls[control_pos_by_id[static_cast<std::size_t>(control_id)]].covariates);
        }
        result.dropped_cases = cases.size() - result.pairs.size();
        if (result.pairs.empty()) {
            result.standardized_biases.clear();
            result.diagnostic = "no admissible matches at caliper " +
                                format_double(current_caliper);
            return result;
        }
        result.standardized_biases = covariate_bias_table(matched_cases, matched_controls);
        double worst = 0.0;
        for (const auto& [name, bias] : result.standardized_biases)
            worst = std::max(worst, bias);
        if (worst <= bias_budget) {
            result.diagnostic.clear();
            return result;
        }
        current_caliper *= 0.8;
    }
    result.diagnostic = "bias budget not met after 20 caliper-tightening rounds";
    return result;
}

// ---------------------------------------------------------------------------
// Yates-corrected chi-square test on a 2x2 table.
// ---------------------------------------------------------------------------

struct ContingencyTable2x2 {
    // rows = exposure, columns = outcome
    long long counts[2][2] = {{0, 0}, {0, 0}};
};

struct ChiSquareResult {
    double chi2 = 0.0;
    double p = 1.0;
    double log_p = 0.0;  // natural log, exact even when p underflows
    int df = 1;

    double log10_p() const { return log_p / 2.302585092994045684017991454684; }
};

inline ChiSquareResult chi_square_yates(const ContingencyTable2x2& table) {
    double total = 0.0;
    for (const auto& row : table.counts)
        for (long long v : row) {
            if (v < 0) throw Error("chi_square_yates: negative count");
            total += static_cast<double>(v);
        }
    if (total <= 0.0) throw Error("chi_square_yates: empty table");
    const double r0 = static_cast<double>(table.counts[0][0] + table.counts[0][1]);
    const double r1 = static_cast<double>(table.counts[1][0] + table.counts[1][1]);
    const double c0 = static_cast<double>(table.counts[0][0] + table.counts[1][0]);
    const double c1 = static_cast<double>(table.counts[0][1] + table.counts[1][1]);
    const double rows[2] = {r0, r1}, cols[2] = {c0, c1};
    double chi2 = 0.0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            const double expected = rows[i] * cols[j] / total;
            if (expected <= 0.0) throw Error("chi_square_yates: expected count is zero");
            const double diff =
                std::max(std::abs(static_cast<double>(table.counts[i][j]) - expected) - 0.5, 0.0);
            chi2 += diff * diff / expected;
        }
    ChiSquareResult out;
    out.chi2 = chi2;
    out.log_p = chi2_log_sf(chi2, 1);
    out.p = std::exp(out.log_p);
    return out;
}

}  // namespace phenotyper

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "oracles.hpp"
#include "phenotyper/cohort.hpp"
#include "phenotyper/matching.hpp"

using namespace phenotyper;

TEST_CASE("standardized bias examples") {
    SECTION("identical samples") {
        const std::vector<double> a{1.0, 2.0, 3.0};
        CHECK(standardized_bias(a, a) == 0.0);
    }
    SECTION("binary prevalences 0.6 vs 0.5") {
        std::vector<double> cases, controls;
        for (int i = 0; i < 10; ++i) cases.push_back(i < 6 ? 1.0 : 0.0);
        for (int i = 0; i < 10; ++i) controls.push_back(i < 5 ? 1.0 : 0.0);
        const double expected = 100.0 * 0.1 / std::sqrt((0.24 + 0.25) / 2.0);
        CHECK(standardized_bias(cases, controls) == Catch::Approx(expected).epsilon(1e-12));
        CHECK(expected == Catch::Approx(20.20).margin(0.005));
    }
    SECTION("zero variance, differing means -> degenerate sentinel") {
        const std::vector<double> a{1.0, 1.0}, b{0.0, 0.0};
        CHECK(std::isinf(standardized_bias(a, b)));
    }
}

TEST_CASE("standardized bias invariances") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a, b;
        for (int i = 0; i < 15; ++i) a.push_back(rng.uniform(0, 10));
        for (int i = 0; i < 25; ++i) b.push_back(rng.uniform(2, 12));
        const double base = standardized_bias(a, b);
        const double shift = rng.uniform(-5, 5);
        const double scale = rng.uniform(0.1, 4.0);
        std::vector<double> a2 = a, b2 = b;
        for (auto& v : a2) v = v * scale + shift;
        for (auto& v : b2) v = v * scale + shift;
        CHECK(standardized_bias(a2, b2) == Catch::Approx(base).epsilon(1e-9));
    }
}

namespace {

Covariates numeric_cov(double age, double window) {
    Covariates c;
    c.age_at_start = age;
    c.observation_window = window;
    c.gender = "F";
    c.race = "white";
    c.ethnicity = "non_hispanic";
    return c;
}

}  // namespace

TEST_CASE("propensity fit on a symmetric dataset has zero intercept") {
    // ages mirrored around 60, labels flipped: the MLE intercept is 0
    std::vector<Covariates> covs;
    std::vector<int> expo;
    for (int i = 1; i <= 10; ++i) {
        covs.push_back(numeric_cov(60.0 + i, 2.0));
        expo.push_back(1);
        covs.push_back(numeric_cov(60.0 - i, 2.0));
        expo.push_back(0);
    }
    const auto model = fit_propensity(covs, expo, 0.5);
    CHECK(std::abs(model.intercept) < 1e-6);
}

TEST_CASE("propensity weights match an independent Newton oracle") {
    Rng rng(23);
    std::vector<Covariates> covs;
    std::vector<int> expo;
    for (int i = 0; i < 20; ++i) {
        const double age = rng.uniform(45, 90);
        const double window = rng.uniform(0.5, 8);
        covs.push_back(numeric_cov(age, window));
        const double z = 0.08 * (age - 65.0) - 0.3 * (window - 4.0);
        expo.push_back(rng.uniform() < 1.0 / (1.0 + std::exp(-z)) ? 1 : 0);
    }
    const double l2 = 0.7;
    const auto model = fit_propensity(covs, expo, l2);

    // oracle works on the same standardized design
    const auto enc = CovariateEncoder::fit(covs);
    const Eigen::MatrixXd X = enc.encode_all(covs);
    const auto oracle = oracles::logistic_newton_oracle(X, expo, l2);
    REQUIRE(oracle.converged);
    CHECK(model.intercept == Catch::Approx(oracle.beta[0]).margin(1e-4));
    for (Eigen::Index j = 0; j < model.weights.size(); ++j)
        CHECK(model.weights[j] == Catch::Approx(oracle.beta[j + 1]).margin(1e-4));
}

TEST_CASE("propensity fit with l2 > 0 has a unique optimum") {
    Rng rng(31);
    std::vector<Covariates> covs;
    std::vector<int> expo;
    for (int i = 0; i < 30; ++i) {
        covs.push_back(numeric_cov(rng.uniform(45, 90), rng.uniform(0.5, 8)));
        expo.push_back(static_cast<int>(rng.uniform_index(2)));
    }
    const auto model = fit_propensity(covs, expo, 1.0);
    const auto enc = CovariateEncoder::fit(covs);
    const Eigen::MatrixXd X = enc.encode_all(covs);
    Eigen::VectorXd far_start = Eigen::VectorXd::Constant(X.cols() + 1, 3.0);
    const auto oracle = oracles::logistic_newton_oracle(X, expo, 1.0, far_start);
    REQUIRE(oracle.converged);
    CHECK(model.intercept == Catch::Approx(oracle.beta[0]).margin(1e-6));
    for (Eigen::Index j = 0; j < model.weights.size(); ++j)
        CHECK(model.weights[j] == Catch::Approx(oracle.beta[j + 1]).margin(1e-6));
}

TEST_CASE("single-class exposure is rejected") {
    std::vector<Covariates> covs{numeric_cov(50, 2), numeric_cov(60, 3)};
    std::vector<int> expo{1, 1};
    CHECK_THROWS_AS(fit_propensity(covs, expo, 0.0), TrainingError);
}

TEST_CASE("complete separation without l2 raises a training error") {
    std::vector<Covariates> covs;
    std::vector<int> expo;
    for (int i = 0; i < 10; ++i) {
        covs.push_back(numeric_cov(50.0 + i, 2.0));
        expo.push_back(0);
        covs.push_back(numeric_cov(75.0 + i, 2.0));
        expo.push_back(1);
    }
    CHECK_THROWS_WITH(fit_propensity(covs, expo, 0.0),
                      Catch::Matchers::ContainsSubstring("l2"));
    CHECK_NOTHROW(fit_propensity(covs, expo, 1.0));
}

namespace {

std::vector<MatchCandidate> make_candidates(const std::vector<double>& scores, int id_offset,
                                            double age_base) {
    std::vector<MatchCandidate> out;
    for (std::size_t i = 0; i < scores.size(); ++i)
        out.push_back({id_offset + static_cast<int>(i), scores[i],
                       numeric_cov(age_base + static_cast<double>(i), 2.0)});
    return out;
}

}  // namespace

TEST_CASE("matching identical pools pairs every case with zero bias") {
    const std::vector<double> scores{0.3, 0.4, 0.5, 0.6, 0.7};
    const auto cases = make_candidates(scores, 0, 60);
    const auto controls = make_candidates(scores, 100, 60);
    const auto res = match_cohort(cases, controls, 0.5, 5.0);
    CHECK(res.pairs.size() == 5);
    CHECK(res.dropped_cases == 0);
    for (const auto& [name, bias] : res.standardized_biases) CHECK(bias == 0.0);
    // descending score order, ties to lower control id
    CHECK(res.pairs.front().first == 4);
}

TEST_CASE("caliper zero with distinct scores yields no pairs plus a diagnostic") {
    const auto cases = make_candidates({0.41, 0.52}, 0, 60);
    const auto controls = make_candidates({0.44, 0.58}, 10, 60);
    const auto res = match_cohort(cases, controls, 0.0, 5.0);
    CHECK(res.pairs.empty());
    CHECK_FALSE(res.diagnostic.empty());
}

TEST_CASE("controls are never reused and pair count is bounded") {
    Rng rng(7);
    std::vector<MatchCandidate> cases, controls;
    for (int i = 0; i < 40; ++i)
        cases.push_back({i, rng.uniform(0.2, 0.8), numeric_cov(rng.uniform(50, 80), 2)});
    for (int i = 0; i < 25; ++i)
        controls.push_back({100 + i, rng.uniform(0.2, 0.8), numeric_cov(rng.uniform(50, 80), 2)});
    const auto res = match_cohort(cases, controls, 10.0, 1e9);
    CHECK(res.pairs.size() <= 25);
    std::set<int> used;
    for (const auto& [case_id, control_id] : res.pairs) CHECK(used.insert(control_id).second);
}

TEST_CASE("equidistant controls break ties toward the lower id") {
    std::vector<MatchCandidate> cases{{0, 0.5, numeric_cov(60, 2)}};
    std::vector<MatchCandidate> controls{{7, 0.5, numeric_cov(60, 2)},
                                         {3, 0.5, numeric_cov(60, 2)}};
    const auto res = match_cohort(cases, controls, 1.0, 1e9);
    REQUIRE(res.pairs.size() == 1);
    CHECK(res.pairs[0].second == 3);
}

TEST_CASE("shifted pools are balanced to under 5 percent bias") {
    const auto [case_covs, control_covs] = generate_covariate_pools(300, 1500, 0.5, 21);
    std::vector<Covariates> covs;
    std::vector<int> expo;
    for (const auto& c : case_covs) {
        covs.push_back(c);
        expo.push_back(1);
    }
    for (const auto& c : control_covs) {
        covs.push_back(c);
        expo.push_back(0);
    }
    const auto model = fit_propensity(covs, expo, 1.0);

    std::vector<MatchCandidate> cases, controls;
    std::vector<double> logits;
    int id = 0;
    for (const auto& c : case_covs) {
        const double s = model.score(c);
        logits.push_back(std::log(s / (1 - s)));
        cases.push_back({id++, s, c});
    }
    for (const auto& c : control_covs) {
        const double s = model.score(c);
        logits.push_back(std::log(s / (1 - s)));
        controls.push_back({id++, s, c});
    }
    const double caliper = 0.2 * std::sqrt(population_variance(logits));
    const auto res = match_cohort(cases, controls, caliper, 5.0);
    REQUIRE_FALSE(res.pairs.empty());
    for (const auto& [name, bias] : res.standardized_biases) {
        INFO(name);
        CHECK(bias < 5.0);
    }
    // cross-check the reported biases against the standalone oracle path
    std::vector<double> matched_case_age, matched_control_age;
    for (const auto& [case_id, control_id] : res.pairs) {
        matched_case_age.push_back(case_covs[static_cast<std::size_t>(case_id)].age_at_start);
        matched_control_age.push_back(
            control_covs[static_cast<std::size_t>(control_id - 300)].age_at_start);
    }
    CHECK(res.standardized_biases[0].second ==
          Catch::Approx(standardized_bias(matched_case_age, matched_control_age)).epsilon(1e-12));
}

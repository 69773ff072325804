#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "oracles.hpp"
#include "phenotyper/factorization.hpp"
#include "phenotyper/metrics.hpp"

using namespace phenotyper;

namespace {

/// Random sparse tensor with strictly positive stored values.
TransitionTensor random_tensor(std::size_t I, std::size_t J, double fill, Rng& rng) {
    TransitionTensor t;
    t.patients = I;
    t.entities = J;
    t.mode = TensorMode::Counts;
    t.offsets.assign(I + 1, 0);
    for (std::size_t i = 0; i < I; ++i) {
        for (std::uint32_t j = 0; j < J; ++j)
            for (std::uint32_t k = 0; k < J; ++k)
                if (rng.uniform() < fill) t.entries.push_back({j, k, rng.uniform(0.2, 2.0)});
        t.offsets[i + 1] = t.entries.size();
    }
    return t;
}

TransitionTensor tensor_from_dense(const std::vector<Eigen::MatrixXd>& dense) {
    TransitionTensor t;
    t.patients = dense.size();
    t.entities = static_cast<std::size_t>(dense.front().rows());
    t.mode = TensorMode::Counts;
    t.offsets.assign(t.patients + 1, 0);
    for (std::size_t i = 0; i < dense.size(); ++i) {
        for (Eigen::Index j = 0; j < dense[i].rows(); ++j)
            for (Eigen::Index k = 0; k < dense[i].cols(); ++k)
                if (dense[i](j, k) != 0.0)
                    t.entries.push_back({static_cast<std::uint32_t>(j),
                                         static_cast<std::uint32_t>(k), dense[i](j, k)});
        t.offsets[i + 1] = t.entries.size();
    }
    return t;
}

Eigen::MatrixXd random_similarity(std::size_t J, Rng& rng) {
    Eigen::MatrixXd S(J, J);
    for (std::size_t i = 0; i < J; ++i) {
        S(i, i) = 1.0;
        for (std::size_t j = i + 1; j < J; ++j) {
            const double v = rng.uniform(0.0, 1.0);
            S(i, j) = v;
            S(j, i) = v;
        }
    }
    return S;
}

}  // namespace

TEST_CASE("cp reconstruction basics") {
    SECTION("unit indicator factors give a single one") {
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(3, 1);
        Eigen::MatrixXd B = Eigen::MatrixXd::Zero(4, 1);
        Eigen::MatrixXd C = Eigen::MatrixXd::Zero(4, 1);
        A(1, 0) = 1.0;
        B(2, 0) = 1.0;
        C(3, 0) = 1.0;
        const auto dense = cp_dense(A, B, C);
        for (Eigen::Index i = 0; i < 3; ++i)
            for (Eigen::Index j = 0; j < 4; ++j)
                for (Eigen::Index k = 0; k < 4; ++k)
                    CHECK(dense[static_cast<std::size_t>(i)](j, k) ==
                          (i == 1 && j == 2 && k == 3 ? 1.0 : 0.0));
    }
    SECTION("random factors match the triple-loop oracle") {
        Rng rng(2);
        Eigen::MatrixXd A = Eigen::MatrixXd::NullaryExpr(4, 2, [&] { return rng.uniform(); });
        Eigen::MatrixXd B = Eigen::MatrixXd::NullaryExpr(3, 2, [&] { return rng.uniform(); });
        Eigen::MatrixXd C = Eigen::MatrixXd::NullaryExpr(3, 2, [&] { return rng.uniform(); });
        const auto ours = cp_dense(A, B, C);
        const auto oracle = oracles::cp_brute_force(A, B, C);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK((ours[i] - oracle[i]).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("zero factor annihilates") {
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2, 2);
        Eigen::MatrixXd B = Eigen::MatrixXd::Ones(3, 2);
        Eigen::MatrixXd C = Eigen::MatrixXd::Ones(3, 2);
        for (const auto& m : cp_dense(A, B, C)) CHECK(m.isZero());
    }
    SECTION("dimension mismatch throws") {
        CHECK_THROWS_AS(cp_dense(Eigen::MatrixXd::Ones(2, 2), Eigen::MatrixXd::Ones(3, 1),
                                 Eigen::MatrixXd::Ones(3, 2)),
                        Error);
    }
}

TEST_CASE("objective of a perfectly reconstructed tensor is zero") {
    Rng rng(8);
    FactorModel model;
    model.A = Eigen::MatrixXd::NullaryExpr(3, 2, [&] { return rng.uniform(0.1, 1.0); });
    model.B = Eigen::MatrixXd::NullaryExpr(4, 2, [&] { return rng.uniform(0.1, 1.0); });
    model.C = Eigen::MatrixXd::NullaryExpr(4, 2, [&] { return rng.uniform(0.1, 1.0); });
    model.theta = Eigen::VectorXd::Zero(3);
    model.hyper.rank = 2;
    model.hyper.mu = 0.0;
    model.hyper.lambda = 0.0;
    model.hyper.gamma = 0.0;
    const auto tensor = tensor_from_dense(cp_dense(model.A, model.B, model.C));
    const Eigen::MatrixXd S = Eigen::MatrixXd::Identity(4, 4);
    const std::vector<int> labels{1, -1, 1};
    const auto v = objective(model, tensor, S, labels);
    CHECK(v.total == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("lambda-only objective reproduces the hand computation") {
    // A, B, C all ones (2x1, 3x1, 3x1), O = 0, mu = gamma = 0, lambda = 0.1:
    // tensor term 18 (every one of the 2*3*3 cells reconstructs to 1), l1 0.8
    FactorModel model;
    model.A = Eigen::MatrixXd::Ones(2, 1);
    model.B = Eigen::MatrixXd::Ones(3, 1);
    model.C = Eigen::MatrixXd::Ones(3, 1);
    model.theta = Eigen::VectorXd::Zero(2);
    model.hyper.rank = 1;
    model.hyper.mu = 0.0;
    model.hyper.lambda = 0.1;
    model.hyper.gamma = 0.0;
    TransitionTensor empty;
    empty.patients = 2;
    empty.entities = 3;
    empty.offsets = {0, 0, 0};
    const std::vector<int> labels{1, -1};
    const auto v = objective(model, empty, Eigen::MatrixXd::Identity(3, 3), labels);
    CHECK(v.tensor_term == Catch::Approx(18.0).epsilon(1e-12));
    CHECK(v.l1_term == Catch::Approx(0.8).epsilon(1e-12));
    CHECK(v.total == Catch::Approx(18.8).epsilon(1e-12));
}

TEST_CASE("analytic gradients match finite differences on random instances") {
    Rng rng(19);
    // each loss component in isolation, then all together
    const std::vector<std::array<double, 3>> weight_sets{
        {0.0, 0.0, 0.0}, {1.3, 0.0, 0.0}, {0.0, 0.7, 0.0}, {0.0, 0.0, 1.1}, {1.0, 0.1, 1.0}};
    for (const auto& [mu, lambda, gamma] : weight_sets) {
        FactorModel model;
        model.A = Eigen::MatrixXd::NullaryExpr(5, 3, [&] { return rng.uniform(0.2, 1.2); });
        model.B = Eigen::MatrixXd::NullaryExpr(6, 3, [&] { return rng.uniform(0.2, 1.2); });
        model.C = Eigen::MatrixXd::NullaryExpr(6, 3, [&] { return rng.uniform(0.2, 1.2); });
        model.theta = Eigen::VectorXd::NullaryExpr(4, [&] { return rng.uniform(-1, 1); });
        model.hyper.rank = 3;
        model.hyper.mu = mu;
        model.hyper.lambda = lambda;
        model.hyper.gamma = gamma;
        const auto tensor = random_tensor(5, 6, 0.35, rng);
        const Eigen::MatrixXd S = random_similarity(6, rng);
        std::vector<int> labels;
        for (int i = 0; i < 5; ++i) labels.push_back(rng.uniform() < 0.5 ? 1 : -1);

        const auto g = objective_gradients(model, tensor, S, labels);
        const auto f = [&] { return objective(model, tensor, S, labels).total; };
        const double h = 1e-5;
        const auto check = [&](double analytic, double& param) {
            const double fd = oracles::central_difference(f, param, h);
            CHECK(std::abs(fd - analytic) <=
                  1e-4 * std::max({1.0, std::abs(fd), std::abs(analytic)}));
        };
        for (Eigen::Index i = 0; i < 5; ++i)
            for (Eigen::Index r = 0; r < 3; ++r) check(g.grad_A(i, r), model.A(i, r));
        for (Eigen::Index j = 0; j < 6; ++j)
            for (Eigen::Index r = 0; r < 3; ++r) {
                check(g.grad_B(j, r), model.B(j, r));
                check(g.grad_C(j, r), model.C(j, r));
            }
        for (Eigen::Index r = 0; r < 4; ++r) check(g.grad_theta[r], model.theta[r]);
    }
}

TEST_CASE("noiseless rank-one tensor is recovered to small error") {
    Rng rng(4);
    Eigen::MatrixXd A = Eigen::MatrixXd::NullaryExpr(6, 1, [&] { return rng.uniform(0.3, 1.2); });
    Eigen::MatrixXd B = Eigen::MatrixXd::NullaryExpr(5, 1, [&] { return rng.uniform(0.3, 1.2); });
    Eigen::MatrixXd C = Eigen::MatrixXd::NullaryExpr(5, 1, [&] { return rng.uniform(0.3, 1.2); });
    const auto tensor = tensor_from_dense(cp_dense(A, B, C));
    HyperParams hyper;
    hyper.rank = 1;
    hyper.mu = 0.0;
    hyper.lambda = 0.0;
    hyper.gamma = 0.0;
    hyper.max_iters = 800;
    hyper.seed = 11;
    std::vector<int> labels(6, 1);
    labels[0] = -1;
    const auto res = fit(tensor, Eigen::MatrixXd::Identity(5, 5), labels, hyper);
    CHECK(mse(res.model, tensor) < 1e-3);
}

TEST_CASE("fit is deterministic given the seed and projects to non-negativity") {
    Rng rng(6);
    const auto tensor = random_tensor(8, 6, 0.3, rng);
    const Eigen::MatrixXd S = random_similarity(6, rng);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(i % 2 == 0 ? 1 : -1);
    HyperParams hyper;
    hyper.rank = 2;
    hyper.max_iters = 60;
    hyper.seed = 21;
    const auto r1 = fit(tensor, S, labels, hyper);
    const auto r2 = fit(tensor, S, labels, hyper);
    CHECK(r1.model.A == r2.model.A);
    CHECK(r1.model.B == r2.model.B);
    CHECK(r1.model.C == r2.model.C);
    CHECK(r1.model.theta == r2.model.theta);
    CHECK(r1.model.A.minCoeff() >= 0.0);
    CHECK(r1.model.B.minCoeff() >= 0.0);
    CHECK(r1.model.C.minCoeff() >= 0.0);
    // ADAM is non-monotone; converged runs still end below the start
    CHECK(r1.trace.total.back() <= r1.trace.total.front());

    HyperParams uniform_hyper = hyper;
    uniform_hyper.init = FactorInit::Uniform;
    const auto r3 = fit(tensor, S, labels, uniform_hyper);
    CHECK(r3.model.A.minCoeff() >= 0.0);
    CHECK(r3.trace.total.back() <= r3.trace.total.front());
}

TEST_CASE("divergent training reports a training error") {
    Rng rng(14);
    const auto tensor = random_tensor(4, 4, 0.5, rng);
    const Eigen::MatrixXd S = random_similarity(4, rng);
    std::vector<int> labels{1, -1, 1, -1};
    HyperParams hyper;
    hyper.rank = 2;
    hyper.max_iters = 4000;
    hyper.learning_rate = 1e9;  // guaranteed blow-up
    hyper.seed = 2;
    CHECK_THROWS_AS(fit(tensor, S, labels, hyper), TrainingError);
}

TEST_CASE("predict basics") {
    SECTION("zero theta gives one half") {
        const Eigen::MatrixXd A = Eigen::MatrixXd::Random(4, 3).cwiseAbs();
        const Eigen::VectorXd theta = Eigen::VectorXd::Zero(4);
        const Eigen::VectorXd p = predict(A, theta);
        for (Eigen::Index i = 0; i < 4; ++i) CHECK(p[i] == 0.5);
    }
    SECTION("zero membership with intercept ln 3 gives 0.75") {
        const Eigen::MatrixXd A = Eigen::MatrixXd::Zero(1, 2);
        Eigen::VectorXd theta(3);
        theta << 0.4, -0.2, std::log(3.0);
        CHECK(predict(A, theta)[0] == Catch::Approx(0.75).epsilon(1e-12));
    }
    SECTION("raising a positively-weighted membership never lowers the probability") {
        Eigen::VectorXd theta(3);
        theta << 0.8, -0.3, 0.1;
        Eigen::MatrixXd A(1, 2);
        A << 0.2, 0.5;
        double last = 0.0;
        for (double v = 0.0; v <= 2.0; v += 0.1) {
            A(0, 0) = v;
            const double p = predict(A, theta)[0];
            CHECK(p >= last);
            last = p;
        }
    }
}

TEST_CASE("projection of new patients") {
    Rng rng(33);
    const Eigen::MatrixXd B =
        Eigen::MatrixXd::NullaryExpr(6, 2, [&] { return rng.uniform(0.05, 1.0); });
    const Eigen::MatrixXd C =
        Eigen::MatrixXd::NullaryExpr(6, 2, [&] { return rng.uniform(0.05, 1.0); });

    SECTION("zero slice maps to the zero membership row") {
        TransitionTensor t;
        t.patients = 1;
        t.entities = 6;
        t.offsets = {0, 0};
        CHECK(project_new_patients(t, B, C).isZero());
    }

    SECTION("a reconstructable slice reaches its training error") {
        Eigen::MatrixXd a_true(1, 2);
        a_true << 0.7, 0.4;
        const auto dense = cp_dense(a_true, B, C);
        const auto t = tensor_from_dense(dense);
        const Eigen::MatrixXd a_hat = project_new_patients(t, B, C);
        CHECK(oracles::nnls_objective(a_hat.row(0), dense[0], B, C) <= 1e-6);
    }

    SECTION("objective value matches the tiny-step oracle") {
        Eigen::MatrixXd slice =
            Eigen::MatrixXd::NullaryExpr(6, 6, [&] { return rng.uniform(0.0, 0.5); });
        const auto t = tensor_from_dense({slice});
        const Eigen::MatrixXd a_hat = project_new_patients(t, B, C);
        const Eigen::VectorXd a_oracle = oracles::nnls_oracle(slice, B, C);
        const double f_hat = oracles::nnls_objective(a_hat.row(0), slice, B, C);
        const double f_oracle = oracles::nnls_objective(a_oracle, slice, B, C);
        CHECK(std::abs(f_hat - f_oracle) < 1e-4);
    }
}

TEST_CASE("shuffled labels give chance-level holdout AUC") {
    // with no real signal the supervised head cannot beat chance out of sample
    SynthConfig cfg;
    cfg.patients = 160;
    cfg.entities = 20;
    cfg.rank = 3;
    cfg.noise_rate = 0.05;
    cfg.seed = 50;
    const Cohort cohort = generate_synthetic(cfg);
    const auto tensor = build_transition_tensor(cohort, TensorMode::Counts, true);
    const std::size_t n_hold = 60, n_train = cohort.patient_count() - n_hold;

    const auto subset = [&](std::size_t begin, std::size_t count) {
        TransitionTensor out;
        out.entities = tensor.entities;
        out.mode = tensor.mode;
        out.patients = count;
        out.offsets.assign(count + 1, 0);
        for (std::size_t k = 0; k < count; ++k) {
            const auto slice = tensor.slice(begin + k);
            out.entries.insert(out.entries.end(), slice.begin(), slice.end());
            out.offsets[k + 1] = out.entries.size();
        }
        return out;
    };
    const auto train_tensor = subset(0, n_train);
    const auto hold_tensor = subset(n_train, n_hold);

    double auc_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed * 31 + 7);
        std::vector<int> train_labels, hold_labels;
        for (std::size_t i = 0; i < n_train; ++i)
            train_labels.push_back(rng.uniform() < 0.5 ? 1 : -1);
        for (std::size_t i = 0; i < n_hold; ++i)
            hold_labels.push_back(rng.uniform() < 0.5 ? 1 : -1);
        HyperParams hyper;
        hyper.rank = 3;
        hyper.max_iters = 250;
        hyper.seed = seed;
        const Eigen::MatrixXd S = Eigen::MatrixXd::Identity(20, 20);
        const auto res = fit(train_tensor, S, train_labels, hyper);
        const Eigen::MatrixXd hold_A =
            project_new_patients(hold_tensor, res.model.B, res.model.C);
        const Eigen::VectorXd scores = predict(hold_A, res.model.theta);
        auc_sum += auc(std::span<const double>(scores.data(),
                                               static_cast<std::size_t>(scores.size())),
                       hold_labels);
    }
    CHECK(auc_sum / 5.0 > 0.4);
    CHECK(auc_sum / 5.0 < 0.6);
}

TEST_CASE("increasing lambda never decreases mean sparsity") {
    SynthConfig cfg;
    cfg.patients = 80;
    cfg.entities = 16;
    cfg.rank = 3;
    cfg.noise_rate = 0.05;
    cfg.seed = 60;
    const Cohort cohort = generate_synthetic(cfg);
    const auto tensor = build_transition_tensor(cohort, TensorMode::Counts, true);
    const Eigen::MatrixXd S = Eigen::MatrixXd::Identity(16, 16);
    std::vector<int> labels;
    for (const auto& p : cohort.patients) labels.push_back(p.label);

    std::map<double, double> mean_gini;
    for (const double lambda : {0.0, 0.1, 1.0}) {
        double total = 0.0;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            HyperParams hyper;
            hyper.rank = 3;
            hyper.lambda = lambda;
            hyper.max_iters = 300;
            hyper.seed = seed;
            total += gini_sparsity(fit(tensor, S, labels, hyper).model);
        }
        mean_gini[lambda] = total / 5.0;
    }
    CHECK(mean_gini[0.1] >= mean_gini[0.0]);
    CHECK(mean_gini[1.0] >= mean_gini[0.1]);
}

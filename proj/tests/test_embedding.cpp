#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "oracles.hpp"
#include "phenotyper/cohort.hpp"
#include "phenotyper/embedding.hpp"

using namespace phenotyper;

namespace {

Cohort tiny_cohort(const std::vector<std::vector<std::vector<std::uint32_t>>>& patients,
                   std::vector<std::string> codes) {
    Cohort c;
    c.vocabulary = Vocabulary::from_codes(std::move(codes));
    int id = 0;
    for (const auto& visits : patients) {
        Patient p;
        p.id = id++;
        p.label = 1;
        p.covariates = {70, 2, "F", "white", "non_hispanic", false, false, false};
        int ordinal = 0;
        for (const auto& ents : visits) {
            Visit v;
            v.ordinal = ordinal++;
            v.entities = ents;
            std::sort(v.entities.begin(), v.entities.end());
            p.visits.push_back(v);
        }
        c.patients.push_back(p);
    }
    return c;
}

}  // namespace

TEST_CASE("build_pairs enumerates ordered within-visit pairs") {
    const auto c =
        tiny_cohort({{{0, 1}}}, {"d:a", "m:b"});
    const auto pairs = build_pairs(c);
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].center == 0);
    CHECK(pairs[0].context == 1);
    CHECK(pairs[1].center == 1);
    CHECK(pairs[1].context == 0);
}

TEST_CASE("three-entity visit emits n(n-1) pairs, singleton none") {
    const auto c3 = tiny_cohort({{{0, 1, 2}}}, {"d:a", "m:b", "m:c"});
    CHECK(build_pairs(c3).size() == 6);
    const auto c1 = tiny_cohort({{{0}}}, {"d:a", "m:b", "m:c"});
    CHECK(build_pairs(c1).empty());
}

TEST_CASE("softmax over identical vectors is uniform") {
    EmbeddingTable t;
    t.input_vectors = Eigen::MatrixXd::Ones(4, 3);
    t.output_vectors = Eigen::MatrixXd::Ones(4, 3);
    t.kinds = {EntityKind::Medication, EntityKind::Medication, EntityKind::Medication,
               EntityKind::Diagnosis};
    CHECK(softmax_prob(0, 1, t, KindFilter::Medications) == Catch::Approx(1.0 / 3));
    CHECK(softmax_prob(0, 3, t, KindFilter::Diagnoses) == Catch::Approx(1.0));
    CHECK(softmax_prob(0, 1, t, KindFilter::All) == Catch::Approx(0.25));
}

TEST_CASE("softmax probabilities sum to one over the restricted vocabulary") {
    Rng rng(5);
    EmbeddingTable t;
    t.input_vectors = Eigen::MatrixXd::NullaryExpr(6, 4, [&] { return rng.uniform(-2, 2); });
    t.output_vectors = Eigen::MatrixXd::NullaryExpr(6, 4, [&] { return rng.uniform(-2, 2); });
    t.kinds = {EntityKind::Medication, EntityKind::Medication, EntityKind::Diagnosis,
               EntityKind::Diagnosis, EntityKind::Diagnosis, EntityKind::Medication};
    for (std::uint32_t center = 0; center < 6; ++center) {
        double med_sum = 0.0, diag_sum = 0.0;
        for (std::uint32_t x = 0; x < 6; ++x) {
            if (t.kinds[x] == EntityKind::Medication)
                med_sum += softmax_prob(center, x, t, KindFilter::Medications);
            else
                diag_sum += softmax_prob(center, x, t, KindFilter::Diagnoses);
        }
        CHECK(med_sum == Catch::Approx(1.0).epsilon(1e-12));
        CHECK(diag_sum == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax matches a direct exp/sum evaluation on hand-set vectors") {
    EmbeddingTable t;
    t.input_vectors.resize(3, 2);
    t.input_vectors << 1.0, 0.5, -0.25, 2.0, 0.75, -1.5;
    t.output_vectors.resize(3, 2);
    t.output_vectors << 0.2, -0.4, 1.1, 0.3, -0.6, 0.9;
    t.kinds = {EntityKind::Medication, EntityKind::Medication, EntityKind::Medication};
    const double s0 = std::exp(0.2 * 1.0 + (-0.4) * 0.5);
    const double s1 = std::exp(1.1 * 1.0 + 0.3 * 0.5);
    const double s2 = std::exp(-0.6 * 1.0 + 0.9 * 0.5);
    CHECK(softmax_prob(0, 1, t, KindFilter::Medications) ==
          Catch::Approx(s1 / (s0 + s1 + s2)).epsilon(1e-12));
}

TEST_CASE("empty restricted vocabulary is an error") {
    EmbeddingTable t;
    t.input_vectors = Eigen::MatrixXd::Ones(2, 2);
    t.output_vectors = Eigen::MatrixXd::Ones(2, 2);
    t.kinds = {EntityKind::Medication, EntityKind::Medication};
    CHECK_THROWS_AS(softmax_prob(0, 1, t, KindFilter::Diagnoses), Error);
}

TEST_CASE("negative-sampling pair loss gradient matches finite differences") {
    Rng rng(41);
    Eigen::VectorXd center(5), context(5);
    std::vector<Eigen::VectorXd> negatives(3, Eigen::VectorXd(5));
    for (int k = 0; k < 5; ++k) {
        center[k] = rng.uniform(-1, 1);
        context[k] = rng.uniform(-1, 1);
        for (auto& n : negatives) n[k] = rng.uniform(-1, 1);
    }
    Eigen::VectorXd g_center, g_context;
    std::vector<Eigen::VectorXd> g_negs;
    sgns_pair_loss(center, context, negatives, &g_center, &g_context, &g_negs);

    const double h = 1e-5;
    const auto loss = [&] {
        return sgns_pair_loss(center, context, negatives, nullptr, nullptr, nullptr);
    };
    for (int k = 0; k < 5; ++k) {
        const double fd_c = oracles::central_difference(loss, center[k], h);
        CHECK(std::abs(fd_c - g_center[k]) <=
              1e-4 * std::max({1.0, std::abs(fd_c), std::abs(g_center[k])}));
        const double fd_x = oracles::central_difference(loss, context[k], h);
        CHECK(std::abs(fd_x - g_context[k]) <=
              1e-4 * std::max({1.0, std::abs(fd_x), std::abs(g_context[k])}));
        for (std::size_t l = 0; l < negatives.size(); ++l) {
            const double fd_n = oracles::central_difference(loss, negatives[l][k], h);
            CHECK(std::abs(fd_n - g_negs[l][k]) <=
                  1e-4 * std::max({1.0, std::abs(fd_n), std::abs(g_negs[l][k])}));
        }
    }
}

TEST_CASE("zero training epochs return the seeded initialization unchanged") {
    const auto c = tiny_cohort({{{0, 1}, {1, 2}}}, {"m:a", "m:b", "m:c"});
    const auto pairs = build_pairs(c);
    SgnsConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 9;
    const auto t1 = train_skipgram(pairs, c.vocabulary, cfg);
    const auto t2 = train_skipgram(pairs, c.vocabulary, cfg);
    CHECK(t1.input_vectors == t2.input_vectors);
    CHECK(t1.output_vectors.isZero());
}

TEST_CASE("training is deterministic given the seed") {
    const auto c = tiny_cohort({{{0, 1, 2}, {1, 3}}, {{2, 3}, {0, 2}}},
                               {"m:a", "m:b", "m:c", "m:d"});
    const auto pairs = build_pairs(c);
    SgnsConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 77;
    const auto t1 = train_skipgram(pairs, c.vocabulary, cfg);
    const auto t2 = train_skipgram(pairs, c.vocabulary, cfg);
    CHECK(t1.input_vectors == t2.input_vectors);
    CHECK(t1.output_vectors == t2.output_vectors);
}

TEST_CASE("co-occurring entities grow more similar than never co-occurring ones") {
    // A,B always co-occur (with shared contexts E,F); C never co-occurs with A
    // entities: 0=A 1=B 2=C 3=D 4=E 5=F
    std::vector<std::vector<std::vector<std::uint32_t>>> visits;
    for (int rep = 0; rep < 40; ++rep) {
        visits.push_back({{0, 1, 4}});
        visits.push_back({{0, 1, 5}});
        visits.push_back({{2, 3, 4}});
        visits.push_back({{2, 3, 5}});
    }
    const auto c = tiny_cohort(visits, {"m:a", "m:b", "m:c", "m:d", "m:e", "m:f"});
    const auto pairs = build_pairs(c);

    int wins = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SgnsConfig cfg;
        cfg.dimension = 16;
        cfg.epochs = 12;
        cfg.seed = seed;
        const auto table = train_skipgram(pairs, c.vocabulary, cfg);
        const auto cosine = [&](int a, int b) {
            return table.input_vectors.row(a).dot(table.input_vectors.row(b)) /
                   (table.input_vectors.row(a).norm() * table.input_vectors.row(b).norm());
        };
        if (cosine(0, 1) > cosine(0, 2)) ++wins;
    }
    CHECK(wins >= 4);
}

TEST_CASE("similarity matrix is symmetric, unit-diagonal and clamped") {
    Rng rng(3);
    EmbeddingTable t;
    t.input_vectors = Eigen::MatrixXd::NullaryExpr(7, 5, [&] { return rng.uniform(-1, 1); });
    t.output_vectors = t.input_vectors;
    t.kinds.assign(7, EntityKind::Medication);
    const Eigen::MatrixXd S = similarity_matrix(t);
    CHECK((S - S.transpose()).cwiseAbs().maxCoeff() == 0.0);
    for (int i = 0; i < 7; ++i) CHECK(S(i, i) == 1.0);
    CHECK(S.minCoeff() >= 0.0);
    CHECK(S.maxCoeff() <= 1.0);
}

TEST_CASE("similarity of opposite vectors clamps to zero, identical to one") {
    EmbeddingTable t;
    t.input_vectors.resize(3, 2);
    t.input_vectors << 1.0, 0.5, -1.0, -0.5, 1.0, 0.5;
    t.output_vectors = t.input_vectors;
    t.kinds.assign(3, EntityKind::Medication);
    const Eigen::MatrixXd S = similarity_matrix(t);
    CHECK(S(0, 1) == 0.0);  // raw cosine -1
    CHECK(S(0, 2) == Catch::Approx(1.0));
}

TEST_CASE("zero-norm rows are similar only to themselves") {
    EmbeddingTable t;
    t.input_vectors = Eigen::MatrixXd::Zero(2, 3);
    t.input_vectors(1, 0) = 1.0;
    t.output_vectors = t.input_vectors;
    t.kinds.assign(2, EntityKind::Medication);
    const Eigen::MatrixXd S = similarity_matrix(t);
    CHECK(S(0, 0) == 1.0);
    CHECK(S(0, 1) == 0.0);
}

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "phenotyper/cohort.hpp"
#include "phenotyper/common.hpp"

namespace phenotyper {

/// One within-visit skip-gram training pair.
struct CooccurrencePair {
    std::uint32_t center = 0;
    std::uint32_t context = 0;
};

/// Emits all ordered (center, context) pairs per visit, in deterministic
/// (patient, visit, center index, context index) order. A visit with n
/// entities contributes n*(n-1) pairs.
inline std::vector<CooccurrencePair> build_pairs(const Cohort& cohort) {
    std::vector<CooccurrencePair> pairs;
    for (const auto& p : cohort.patients)
        for (const auto& v : p.visits)
            for (std::uint32_t a : v.entities)
                for (std::uint32_t b : v.entities)
                    if (a != b) pairs.push_back({a, b});
    return pairs;
}

struct SgnsConfig {
    int dimension = 32;           // d
    int negatives = 5;            // false samples per positive pair
    int epochs = 5;
    double learning_rate = 0.025;
    double noise_exponent = 0.75;  // unigram distribution power
    std::uint64_t seed = 0;

    void validate() const {
        if (dimension < 2) throw ConfigError("sgns: dimension must be >= 2");
        if (negatives < 1) throw ConfigError("sgns: negatives must be >= 1");
        if (epochs < 0) throw ConfigError("sgns: epochs must be >= 0");
        if (learning_rate <= 0.0) throw ConfigError("sgns: learning_rate must be > 0");
    }
};

/// Input (word) and output (context) vector tables, one row per entity.
struct EmbeddingTable {
    Eigen::MatrixXd input_vectors;   // J x d
    Eigen::MatrixXd output_vectors;  // J x d
    std::vector<EntityKind> kinds;   // per entity, for restricted softmax

    Eigen::Index dimension() const { return input_vectors.cols(); }
    Eigen::Index vocabulary_size() const { return input_vectors.rows(); }
};

enum class KindFilter { Medications, Diagnoses, All };

inline bool kind_matches(KindFilter f, EntityKind k) {
    return f == KindFilter::All ||
           (f == KindFilter::Medications && k == EntityKind::Medication) ||
           (f == KindFilter::Diagnoses && k == EntityKind::Diagnosis);
}

/// Exact full-softmax probability of `target` given `center`, normalized over
/// the entities passing `restrict` (log-sum-exp stabilized). Uses the input
/// vector of the center and output vectors of the candidates.
inline double softmax_prob(std::uint32_t center, std::uint32_t target,
                           const EmbeddingTable& table, KindFilter restrict_to) {
    const Eigen::Index J = table.vocabulary_size();
    if (static_cast<Eigen::Index>(center) >= J || static_cast<Eigen::Index>(target) >= J)
        throw Error("softmax_prob: entity index out of range");
    if (!kind_matches(restrict_to, table.kinds[target]))
        throw Error("softmax_prob: target not in the restricted vocabulary");
    const Eigen::VectorXd v = table.input_vectors.row(center);
    double max_score = -std::numeric_limits<double>::infinity();
    std::vector<double> scores;
    scores.reserve(static_cast<std::size_t>(J));
    std::vector<Eigen::Index> members;
    for (Eigen::Index j = 0; j < J; ++j) {
        if (!kind_matches(restrict_to, table.kinds[static_cast<std::size_t>(j)])) continue;
        const double s = table.output_vectors.row(j).dot(v);
        members.push_back(j);
        scores.push_back(s);
        max_score = std::max(max_score, s);
    }
    if (members.empty()) throw Error("softmax_prob: restricted vocabulary is empty");
    double denom = 0.0, numer = 0.0;
    for (std::size_t k = 0; k < members.size(); ++k) {
        const double e = std::exp(scores[k] - max_score);
        denom += e;
        if (members[k] == static_cast<Eigen::Index>(target)) numer = e;
    }
    return numer / denom;
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Cumulative table over one entity kind for unigram^alpha noise sampling.
struct NoiseTable {
    std::vector<std::uint32_t> entities;
    std::vector<double> cumulative;

    std::uint32_t sample(Rng& rng) const {
        const double u = rng.uniform() * cumulative.back();
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        const std::size_t k = std::min<std::size_t>(
            static_cast<std::size_t>(it - cumulative.begin()), entities.size() - 1);
        return entities[k];
    }
};

inline NoiseTable build_noise_table(const std::vector<double>& counts,
                                    const std::vector<EntityKind>& kinds, EntityKind kind,
                                    double exponent) {
    NoiseTable t;
    double acc = 0.0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
        if (kinds[j] != kind || counts[j] <= 0.0) continue;
        acc += std::pow(counts[j], exponent);
        t.entities.push_back(static_cast<std::uint32_t>(j));
        t.cumulative.push_back(acc);
    }
    return t;
}

}  // namespace detail

/// Negative-sampling loss for one positive pair with the given negatives:
///   -log sigma(u_ctx . v_c) - sum_l log sigma(-u_l . v_c)
/// Writes gradients w.r.t. the center input vector, the context output vector
/// and each negative's output vector. Shared by the trainer and by the
/// finite-difference tests.
inline double sgns_pair_loss(const Eigen::VectorXd& center_in, const Eigen::VectorXd& context_out,
                             const std::vector<Eigen::VectorXd>& negatives_out,
                             Eigen::VectorXd* grad_center, Eigen::VectorXd* grad_context,
                             std::vector<Eigen::VectorXd>* grad_negatives) {
    const double pos_score = context_out.dot(center_in);
    double loss = pos_score > 0.0 ? std::log1p(std::exp(-pos_score))
                                  : -pos_score + std::log1p(std::exp(pos_score));
    const double pos_coeff = detail::sigmoid(pos_score) - 1.0;  // d loss / d score
    if (grad_center) *grad_center = pos_coeff * context_out;
    if (grad_context) *grad_context = pos_coeff * center_in;
    if (grad_negatives) grad_negatives->assign(negatives_out.size(), Eigen::VectorXd());
    for (std::size_t l = 0; l < negatives_out.size(); ++l) {
        const double neg_score = negatives_out[l].dot(center_in);
        loss += neg_score > 0.0 ? neg_score + std::log1p(std::exp(-neg_score))
                                : std::log1p(std::exp(neg_score));
        const double neg_coeff = detail::sigmoid(neg_score);
        if (grad_center) *grad_center += neg_coeff * negatives_out[l];
        if (grad_negatives) (*grad_negatives)[l] = neg_coeff * center_in;
    }
    return loss;
}

/// SGD on the skip-gram negative-sampling objective. Negatives are drawn from
/// the unigram distribution (over pair contexts) raised to `noise_exponent`,
/// restricted to the same entity kind as the context token, resampled when
/// they collide with it. Pure function of (pairs order, cfg).
inline EmbeddingTable train_skipgram(const std::vector<CooccurrencePair>& pairs,
                                     const Vocabulary& vocabulary, const SgnsConfig& cfg) {
    cfg.validate();
    const std::size_t J = vocabulary.size();
    if (J < 2) throw Error("train_skipgram: vocabulary must have at least 2 entities");
    if (pairs.empty()) throw Error("train_skipgram: no training pairs");

    Rng rng(cfg.seed);
    EmbeddingTable table;
    table.kinds = vocabulary.kinds;
    table.input_vectors.resize(static_cast<Eigen::Index>(J), cfg.dimension);
    table.output_vectors.resize(static_cast<Eigen::Index>(J), cfg.dimension);
    const double init_scale = 0.5 / cfg.dimension;
    for (Eigen::Index j = 0; j < table.input_vectors.rows(); ++j)
        for (Eigen::Index k = 0; k < cfg.dimension; ++k)
            table.input_vectors(j, k) = rng.uniform(-init_scale, init_scale);
    table.output_vectors.setZero();

    std::vector<double> context_counts(J, 0.0);
    for (const auto& pr : pairs) context_counts[pr.context] += 1.0;
    const auto med_noise = detail::build_noise_table(context_counts, vocabulary.kinds,
                                                     EntityKind::Medication, cfg.noise_exponent);
    const auto diag_noise = detail::build_noise_table(context_counts, vocabulary.kinds,
                                                      EntityKind::Diagnosis, cfg.noise_exponent);

    Eigen::VectorXd grad_center(cfg.dimension);
    std::vector<std::uint32_t> negs(static_cast<std::size_t>(cfg.negatives));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& pr : pairs) {
            const auto& noise = vocabulary.kinds[pr.context] == EntityKind::Medication
                                    ? med_noise
                                    : diag_noise;
            for (auto& n : negs) {
                n = noise.sample(rng);
                for (int tries = 0; n == pr.context && tries < 16; ++tries)
                    n = noise.sample(rng);
            }
            auto center = table.input_vectors.row(pr.center);
            auto context = table.output_vectors.row(pr.context);
            const double pos_score = context.dot(center);
            const double pos_coeff = detail::sigmoid(pos_score) - 1.0;
            grad_center = pos_coeff * context.transpose();
            table.output_vectors.row(pr.context) -=
                cfg.learning_rate * pos_coeff * center;
            for (std::uint32_t n : negs) {
                if (n == pr.context) continue;  // rare exhausted resample
                auto neg = table.output_vectors.row(n);
                const double neg_coeff = detail::sigmoid(neg.dot(center));
                grad_center += neg_coeff * neg.transpose();
                table.output_vectors.row(n) -= cfg.learning_rate * neg_coeff * center;
            }
            table.input_vectors.row(pr.center) -= cfg.learning_rate * grad_center.transpose();
            if (!std::isfinite(table.input_vectors(pr.center, 0)))
                throw TrainingError("train_skipgram: non-finite update; lower the learning rate");
        }
    }
    return table;
}

enum class SimilaritySource { InputVectors, OutputVectors, Average };

/// Entity-similarity matrix S: clamped cosine, unit diagonal, entries in
/// [0,1]. Zero-norm rows are similar only to themselves.
inline Eigen::MatrixXd similarity_matrix(const EmbeddingTable& table,
                                         SimilaritySource source = SimilaritySource::InputVectors) {
    Eigen::MatrixXd V;
    switch (source) {
        case SimilaritySource::InputVectors: V = table.input_vectors; break;
        case SimilaritySource::OutputVectors: V = table.output_vectors; break;
        case SimilaritySource::Average:
            V = 0.5 * (table.input_vectors + table.output_vectors);
            break;
    }
    const Eigen::Index J = V.rows();
    Eigen::VectorXd norms = V.rowwise().norm();
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(J, J);
    for (Eigen::Index i = 0; i < J; ++i) {
        for (Eigen::Index j = i + 1; j < J; ++j) {
            if (norms[i] <= 0.0 || norms[j] <= 0.0) continue;
            const double c = V.row(i).dot(V.row(j)) / (norms[i] * norms[j]);
            const double clamped = std::min(std::max(c, 0.0), 1.0);
            S(i, j) = clamped;
            S(j, i) = clamped;
        }
        S(i, i) = 1.0;
    }
    return S;
}

}  // namespace phenotyper

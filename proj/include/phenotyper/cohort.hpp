#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "phenotyper/common.hpp"

namespace phenotyper {

enum class EntityKind { Medication, Diagnosis };

/// Entity kind is encoded in the code itself: leading "m:"/"d:" or trailing
/// ":m"/":d". Synthetic cohorts use the trailing form so that lexicographic
/// code order equals index order.
inline EntityKind kind_from_code(const std::string& code) {
    if (code.size() >= 2) {
        if (code.rfind("m:", 0) == 0) return EntityKind::Medication;
        if (code.rfind("d:", 0) == 0) return EntityKind::Diagnosis;
        const std::string tail = code.substr(code.size() - 2);
        if (tail == ":m") return EntityKind::Medication;
        if (tail == ":d") return EntityKind::Diagnosis;
    }
    throw ValidationError("entity code '" + code +
                          "' must carry a kind marker (m:/d: prefix or :m/:d suffix)");
}

/// Dense entity vocabulary. Index i maps to codes[i]/kinds[i].
struct Vocabulary {
    std::vector<std::string> codes;
    std::vector<EntityKind> kinds;

    std::size_t size() const { return codes.size(); }

    int index_of(const std::string& code) const {
        auto it = std::lower_bound(codes.begin(), codes.end(), code);
        if (it != codes.end() && *it == code)
            return static_cast<int>(it - codes.begin());
        return -1;
    }

    /// Builds a vocabulary from a sorted, de-duplicated code list.
    static Vocabulary from_codes(std::vector<std::string> sorted_codes) {
        Vocabulary v;
        v.codes = std::move(sorted_codes);
        v.kinds.reserve(v.codes.size());
        for (const auto& c : v.codes) v.kinds.push_back(kind_from_code(c));
        return v;
    }
};

struct Visit {
    int ordinal = 0;
    std::vector<std::uint32_t> entities;  // sorted, unique, non-empty
};

struct Covariates {
    double age_at_start = 0.0;
    double observation_window = 0.0;
    std::string gender;
    std::string race;
    std::string ethnicity;
    bool brain_injury = false;
    bool brain_tumor = false;
    bool stroke = false;
};

struct Patient {
    int id = 0;
    std::vector<Visit> visits;
    int label = 1;  // +1 or -1
    Covariates covariates;
};

/// Ground truth planted by the synthetic generator, kept for verification.
struct PlantedTruth {
    int rank = 0;
    Eigen::MatrixXd true_from;      // J x rank, unit l1 columns
    Eigen::MatrixXd true_to;        // J x rank, unit l1 columns
    Eigen::MatrixXd memberships;    // I x rank
    std::vector<double> label_logits;
};

struct Provenance {
    enum class Kind { Ingested, Synthetic } kind = Kind::Ingested;
    std::uint64_t seed = 0;
    std::optional<PlantedTruth> truth;
};

struct Cohort {
    Vocabulary vocabulary;
    std::vector<Patient> patients;
    Provenance provenance;

    std::size_t patient_count() const { return patients.size(); }
    std::size_t entity_count() const { return vocabulary.size(); }
};

/// Checks every cohort invariant; throws ValidationError on the first breach.
inline void validate_cohort(const Cohort& c) {
    const std::size_t J = c.vocabulary.size();
    if (!std::is_sorted(c.vocabulary.codes.begin(), c.vocabulary.codes.end()))
        throw ValidationError("vocabulary codes must be sorted");
    if (std::adjacent_find(c.vocabulary.codes.begin(), c.vocabulary.codes.end()) !=
        c.vocabulary.codes.end())
        throw ValidationError("vocabulary contains duplicate codes");
    std::set<int> ids;
    for (const auto& p : c.patients) {
        if (!ids.insert(p.id).second)
            throw ValidationError("duplicate patient id " + std::to_string(p.id));
        if (p.label != 1 && p.label != -1)
            throw ValidationError("patient " + std::to_string(p.id) + ": label must be +1 or -1");
        if (!(p.covariates.age_at_start >= 0.0) || !(p.covariates.observation_window >= 0.0))
            throw ValidationError("patient " + std::to_string(p.id) +
                                  ": numeric covariates must be non-negative");
        if (p.covariates.gender.empty() || p.covariates.race.empty() ||
            p.covariates.ethnicity.empty())
            throw ValidationError("patient " + std::to_string(p.id) + ": missing covariate value");
        int prev_ordinal = -1;
        for (const auto& v : p.visits) {
            if (v.entities.empty())
                throw ValidationError("patient " + std::to_string(p.id) + ": empty visit");
            if (v.ordinal <= prev_ordinal)
                throw ValidationError("patient " + std::to_string(p.id) +
                                      ": visit ordinals must be strictly increasing");
            prev_ordinal = v.ordinal;
            std::uint32_t prev = 0;
            bool first = true;
            for (std::uint32_t e : v.entities) {
                if (e >= J)
                    throw ValidationError("patient " + std::to_string(p.id) +
                                          ": entity index out of range");
                if (!first && e <= prev)
                    throw ValidationError("patient " + std::to_string(p.id) +
                                          ": visit entities must be sorted and unique");
                prev = e;
                first = false;
            }
        }
    }
    if (!c.patients.empty()) {
        if (*ids.begin() != 0 || *ids.rbegin() != static_cast<int>(c.patients.size()) - 1)
            throw ValidationError("patient ids must be dense 0..I-1");
    }
}

// ---------------------------------------------------------------------------
// Covariate sampling (shared by the synthetic cohort and the matching pools).
// ---------------------------------------------------------------------------

/// Draws one covariate vector. `shift` tilts every distribution by roughly
/// `shift` pooled standard deviations (0 = reference population).
inline Covariates sample_covariates(Rng& rng, double shift = 0.0) {
    Covariates cv;
    cv.age_at_start = rng.uniform(45.0, 90.0) + shift * 13.0;
    cv.observation_window = rng.uniform(0.5, 8.0) + shift * 2.2;
    cv.gender = rng.uniform() < 0.54 - 0.10 * shift ? "F" : "M";
    const double u = rng.uniform();
    const double p_white = 0.60 - 0.10 * shift;
    cv.race = u < p_white ? "white" : (u < p_white + 0.25 ? "black" : (u < p_white + 0.30 ? "asian" : "other"));
    cv.ethnicity = rng.uniform() < 0.08 + 0.04 * shift ? "hispanic" : "non_hispanic";
    cv.brain_injury = rng.bernoulli(std::clamp(0.08 + 0.06 * shift, 0.0, 1.0));
    cv.brain_tumor = rng.bernoulli(std::clamp(0.04 + 0.03 * shift, 0.0, 1.0));
    cv.stroke = rng.bernoulli(std::clamp(0.15 + 0.08 * shift, 0.0, 1.0));
    return cv;
}

/// Case/control covariate pools with the case distribution shifted by
/// `shift_sd` pooled standard deviations; feeds the matching tests and demos.
inline std::pair<std::vector<Covariates>, std::vector<Covariates>>
generate_covariate_pools(std::size_t n_cases, std::size_t n_controls, double shift_sd,
                         std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Covariates> cases, controls;
    cases.reserve(n_cases);
    controls.reserve(n_controls);
    for (std::size_t i = 0; i < n_cases; ++i) cases.push_back(sample_covariates(rng, shift_sd));
    for (std::size_t i = 0; i < n_controls; ++i) controls.push_back(sample_covariates(rng, 0.0));
    return {std::move(cases), std::move(controls)};
}

// ---------------------------------------------------------------------------
// Synthetic cohort with planted transition phenotypes.
// ---------------------------------------------------------------------------

struct SynthConfig {
    int patients = 100;              // I
    int entities = 20;               // J
    int rank = 3;                    // number of planted phenotypes
    int visits_min = 4;
    int visits_max = 8;
    int entities_per_visit_min = 2;
    int entities_per_visit_max = 5;
    double noise_rate = 0.0;         // probability an entity draw is uniform noise
    double label_weight = 3.0;       // logit magnitude of the planted label model
    double label_temperature = 1.0;  // divides the logit
    double exposure_effect = 0.0;    // additional logit for stroke == true
    std::uint64_t seed = 0;

    void validate() const {
        if (patients < 2) throw ConfigError("synth: patients must be >= 2");
        if (entities < 4) throw ConfigError("synth: entities must be >= 4");
        if (rank < 1) throw ConfigError("synth: rank must be >= 1");
        if (entities < rank) throw ConfigError("synth: entities < rank is degenerate");
        if (noise_rate < 0.0 || noise_rate >= 1.0)
            throw ConfigError("synth: noise_rate must be in [0, 1)");
        if (visits_min < 1 || visits_max < visits_min)
            throw ConfigError("synth: bad visits_per_patient range");
        if (entities_per_visit_min < 1 || entities_per_visit_max < entities_per_visit_min)
            throw ConfigError("synth: bad entities_per_visit range");
        if (label_temperature <= 0.0) throw ConfigError("synth: label_temperature must be > 0");
    }
};

namespace detail {

inline std::uint32_t sample_cumulative(const std::vector<double>& cum, double u) {
    const auto it = std::upper_bound(cum.begin(), cum.end(), u * cum.back());
    return static_cast<std::uint32_t>(std::min<std::ptrdiff_t>(
        it - cum.begin(), static_cast<std::ptrdiff_t>(cum.size()) - 1));
}

}  // namespace detail

/// Generates a cohort whose between-visit transitions follow one of `rank`
/// planted rank-one patterns per patient (plus uniform entity noise), with
/// labels drawn from a logistic model on the planted memberships.
/// Pure function of the config (seed included).
inline Cohort generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int I = cfg.patients, J = cfg.entities, R = cfg.rank;

    // entity groups: contiguous blocks, remainder appended to the last
    const int gsize = J / R;
    std::vector<std::vector<int>> groups(R);
    for (int j = 0; j < J; ++j) groups[std::min(j / gsize, R - 1)].push_back(j);

    PlantedTruth truth;
    truth.rank = R;
    truth.true_from = Eigen::MatrixXd::Zero(J, R);
    for (int r = 0; r < R; ++r) {
        double total = 0.0;
        std::vector<double> w(groups[r].size());
        for (auto& x : w) {
            x = rng.uniform(0.5, 1.5);
            total += x;
        }
        for (std::size_t g = 0; g < groups[r].size(); ++g)
            truth.true_from(groups[r][g], r) = w[g] / total;
    }
    // visits are i.i.d. within a patient, so the planted from- and to-factors
    // coincide; both are stored to keep the verification contract explicit
    truth.true_to = truth.true_from;
    truth.memberships = Eigen::MatrixXd::Zero(I, R);
    truth.label_logits.resize(I);

    // per-phenotype cumulative sampling tables
    std::vector<std::vector<double>> cum(R, std::vector<double>(J));
    for (int r = 0; r < R; ++r) {
        double acc = 0.0;
        for (int j = 0; j < J; ++j) {
            acc += truth.true_from(j, r);
            cum[r][j] = acc;
        }
    }

    Cohort cohort;
    {
        std::vector<std::string> codes(J);
        const int width = J >= 1000 ? 4 : 3;
        for (int j = 0; j < J; ++j) {
            std::string num = std::to_string(j);
            num.insert(0, static_cast<std::size_t>(width) - num.size(), '0');
            codes[j] = num + (j % 2 == 0 ? ":m" : ":d");
        }
        cohort.vocabulary = Vocabulary::from_codes(std::move(codes));
    }

    cohort.patients.reserve(I);
    for (int i = 0; i < I; ++i) {
        Patient p;
        p.id = i;
        p.covariates = sample_covariates(rng);
        const int r = static_cast<int>(rng.uniform_index(R));
        const double intensity = rng.uniform(0.8, 1.2);
        truth.memberships(i, r) = intensity;
        double logit = cfg.label_weight * (r % 2 == 0 ? 1.0 : -1.0) * intensity;
        if (p.covariates.stroke) logit += cfg.exposure_effect;
        logit /= cfg.label_temperature;
        truth.label_logits[i] = logit;
        p.label = rng.bernoulli(1.0 / (1.0 + std::exp(-logit))) ? 1 : -1;

        const int V = cfg.visits_min +
                      static_cast<int>(rng.uniform_index(cfg.visits_max - cfg.visits_min + 1));
        p.visits.reserve(V);
        for (int t = 0; t < V; ++t) {
            const int n = cfg.entities_per_visit_min +
                          static_cast<int>(rng.uniform_index(
                              cfg.entities_per_visit_max - cfg.entities_per_visit_min + 1));
            std::set<std::uint32_t> ents;
            for (int k = 0; k < n; ++k) {
                if (cfg.noise_rate > 0.0 && rng.uniform() < cfg.noise_rate)
                    ents.insert(static_cast<std::uint32_t>(rng.uniform_index(J)));
                else
                    ents.insert(detail::sample_cumulative(cum[r], rng.uniform()));
            }
            Visit v;
            v.ordinal = t;
            v.entities.assign(ents.begin(), ents.end());
            p.visits.push_back(std::move(v));
        }
        cohort.patients.push_back(std::move(p));
    }

    cohort.provenance.kind = Provenance::Kind::Synthetic;
    cohort.provenance.seed = cfg.seed;
    cohort.provenance.truth = std::move(truth);
    validate_cohort(cohort);
    return cohort;
}

}  // namespace phenotyper

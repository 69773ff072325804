#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "phenotyper/cohort.hpp"
#include "phenotyper/common.hpp"

namespace phenotyper {

enum class TensorMode { Counts, PatientNormalized };

/// Sparse 3-order tensor of between-visit transitions, coordinate entries
/// grouped by patient (CSR-like offsets over a flat entry array). Structural
/// zeros are unstored; every stored value is > 0.
struct TransitionTensor {
    struct Entry {
        std::uint32_t from = 0;
        std::uint32_t to = 0;
        double value = 0.0;
    };

    std::size_t patients = 0;  // I
    std::size_t entities = 0;  // J
    TensorMode mode = TensorMode::Counts;
    std::vector<Entry> entries;          // sorted by (patient, from, to)
    std::vector<std::size_t> offsets;    // size I+1, entry range per patient

    std::span<const Entry> slice(std::size_t patient) const {
        return {entries.data() + offsets[patient], entries.data() + offsets[patient + 1]};
    }

    double total_mass() const {
        double s = 0.0;
        for (const auto& e : entries) s += e.value;
        return s;
    }
};

/// Accumulates, for every consecutive visit pair, the full cross product of
/// ordered (from, to) entity pairs. `include_self_loops` keeps pairs with
/// from == to. Patients with fewer than two visits produce empty slices.
inline TransitionTensor build_transition_tensor(const Cohort& cohort,
                                                TensorMode mode = TensorMode::PatientNormalized,
                                                bool include_self_loops = true) {
    TransitionTensor t;
    t.patients = cohort.patients.size();
    t.entities = cohort.vocabulary.size();
    t.mode = mode;
    t.offsets.assign(t.patients + 1, 0);

    std::map<std::pair<std::uint32_t, std::uint32_t>, double> counts;
    for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
        counts.clear();
        const auto& visits = cohort.patients[i].visits;
        for (std::size_t v = 0; v + 1 < visits.size(); ++v)
            for (std::uint32_t from : visits[v].entities)
                for (std::uint32_t to : visits[v + 1].entities) {
                    if (!include_self_loops && from == to) continue;
                    counts[{from, to}] += 1.0;
                }
        double total = 0.0;
        for (const auto& [key, value] : counts) total += value;
        for (const auto& [key, value] : counts)
            t.entries.push_back({key.first, key.second,
                                 mode == TensorMode::PatientNormalized ? value / total : value});
        t.offsets[i + 1] = t.entries.size();
    }
    return t;
}

/// Converts a counts tensor to per-patient normalized probabilities.
inline TransitionTensor to_patient_normalized(const TransitionTensor& t) {
    if (t.mode == TensorMode::PatientNormalized) return t;
    TransitionTensor out = t;
    out.mode = TensorMode::PatientNormalized;
    for (std::size_t i = 0; i < t.patients; ++i) {
        double total = 0.0;
        for (const auto& e : t.slice(i)) total += e.value;
        if (total <= 0.0) continue;
        for (std::size_t k = t.offsets[i]; k < t.offsets[i + 1]; ++k)
            out.entries[k].value /= total;
    }
    return out;
}

/// Entrywise mean of normalized patient slices over patients with at least
/// one transition ("transition probability averaged on all patients").
inline Eigen::MatrixXd mean_transition_matrix(const TransitionTensor& tensor) {
    const TransitionTensor normalized = to_patient_normalized(tensor);
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(normalized.entities),
                                              static_cast<Eigen::Index>(normalized.entities));
    std::size_t contributing = 0;
    for (std::size_t i = 0; i < normalized.patients; ++i) {
        const auto slice = normalized.slice(i);
        if (slice.empty()) continue;
        ++contributing;
        for (const auto& e : slice) m(e.from, e.to) += e.value;
    }
    if (contributing == 0)
        throw Error("mean_transition_matrix: tensor has no transitions");
    return m / static_cast<double>(contributing);
}

// ---------------------------------------------------------------------------
// Coordinate-list CSV persistence: patient_id,from_code,to_code,value with a
// leading "# mode=..." comment.
// ---------------------------------------------------------------------------

inline std::string tensor_to_csv(const TransitionTensor& t, const Vocabulary& vocab) {
    std::string out = t.mode == TensorMode::Counts ? "# mode=counts\n"
                                                   : "# mode=patient_normalized\n";
    out += "patient_id,from_code,to_code,value\n";
    for (std::size_t i = 0; i < t.patients; ++i)
        for (const auto& e : t.slice(i))
            out += std::to_string(i) + ',' + vocab.codes[e.from] + ',' + vocab.codes[e.to] +
                   ',' + format_double(e.value) + '\n';
    return out;
}

inline void save_tensor(const TransitionTensor& t, const Vocabulary& vocab,
                        const std::filesystem::path& path) {
    write_file(path, tensor_to_csv(t, vocab));
}

inline TransitionTensor load_tensor(const std::filesystem::path& path, const Vocabulary& vocab,
                                    std::size_t patient_count) {
    const auto lines = split(read_file(path), '\n');
    if (lines.size() < 2) throw IngestError(path.string() + ": truncated tensor CSV");
    TransitionTensor t;
    t.entities = vocab.size();
    t.patients = patient_count;
    t.mode = trim(lines[0]) == "# mode=counts" ? TensorMode::Counts
                                               : TensorMode::PatientNormalized;
    if (trim(lines[1]) != "patient_id,from_code,to_code,value")
        throw IngestError(path.string() + ": bad tensor CSV header");
    std::vector<std::vector<TransitionTensor::Entry>> per_patient(patient_count);
    for (std::size_t ln = 2; ln < lines.size(); ++ln) {
        const auto line = trim(lines[ln]);
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 4)
            throw IngestError(path.string() + " line " + std::to_string(ln + 1) +
                              ": expected 4 fields");
        const long long pid = parse_int(f[0]);
        const int from = vocab.index_of(f[1]);
        const int to = vocab.index_of(f[2]);
        if (pid < 0 || static_cast<std::size_t>(pid) >= patient_count || from < 0 || to < 0)
            throw IngestError(path.string() + " line " + std::to_string(ln + 1) +
                              ": unknown patient or entity");
        per_patient[static_cast<std::size_t>(pid)].push_back(
            {static_cast<std::uint32_t>(from), static_cast<std::uint32_t>(to),
             parse_double(f[3])});
    }
    t.offsets.assign(patient_count + 1, 0);
    for (std::size_t i = 0; i < patient_count; ++i) {
        auto& es = per_patient[i];
        std::sort(es.begin(), es.end(), [](const auto& a, const auto& b) {
            return std::make_pair(a.from, a.to) < std::make_pair(b.from, b.to);
        });
        t.entries.insert(t.entries.end(), es.begin(), es.end());
        t.offsets[i + 1] = t.entries.size();
    }
    return t;
}

}  // namespace phenotyper

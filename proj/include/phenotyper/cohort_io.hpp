#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "phenotyper/cohort.hpp"
#include "phenotyper/common.hpp"

namespace phenotyper {

enum class CohortFormat { Jsonl, Csv };

inline CohortFormat cohort_format_from_path(const std::filesystem::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".jsonl") return CohortFormat::Jsonl;
    if (ext == ".csv") return CohortFormat::Csv;
    throw ConfigError("cannot infer cohort format from extension: " + p.string());
}

namespace detail {

struct RawPatient {
    long long id = 0;
    int label = 0;
    Covariates covariates;
    std::vector<std::vector<std::string>> visits;  // codes per visit
};

inline Covariates covariates_from_json(const nlohmann::json& j, std::size_t line) {
    const auto ctx = [line](const char* key) {
        return IngestError("line " + std::to_string(line) + ": covariates missing or bad '" +
                           key + "'");
    };
    Covariates cv;
    try {
        cv.age_at_start = j.at("age_at_start").get<double>();
    } catch (...) { throw ctx("age_at_start"); }
    try {
        cv.observation_window = j.at("observation_window").get<double>();
    } catch (...) { throw ctx("observation_window"); }
    try {
        cv.gender = j.at("gender").get<std::string>();
    } catch (...) { throw ctx("gender"); }
    try {
        cv.race = j.at("race").get<std::string>();
    } catch (...) { throw ctx("race"); }
    try {
        cv.ethnicity = j.at("ethnicity").get<std::string>();
    } catch (...) { throw ctx("ethnicity"); }
    try {
        cv.brain_injury = j.at("brain_injury").get<bool>();
    } catch (...) { throw ctx("brain_injury"); }
    try {
        cv.brain_tumor = j.at("brain_tumor").get<bool>();
    } catch (...) { throw ctx("brain_tumor"); }
    try {
        cv.stroke = j.at("stroke").get<bool>();
    } catch (...) { throw ctx("stroke"); }
    return cv;
}

inline std::vector<RawPatient> parse_jsonl(const std::string& text) {
    std::vector<RawPatient> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = trim(std::string_view(text).substr(start, end - start));
        start = end + 1;
        ++line_no;
        if (line.empty()) {
            if (start > text.size()) break;
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IngestError("line " + std::to_string(line_no) + ": " + e.what());
        }
        RawPatient p;
        try {
            p.id = j.at("id").get<long long>();
            p.label = j.at("label").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw IngestError("line " + std::to_string(line_no) + ": " + e.what());
        }
        p.covariates = covariates_from_json(j.value("covariates", nlohmann::json::object()),
                                            line_no);
        if (!j.contains("visits") || !j["visits"].is_array())
            throw IngestError("line " + std::to_string(line_no) + ": missing 'visits' array");
        for (const auto& visit : j["visits"]) {
            if (!visit.is_array())
                throw IngestError("line " + std::to_string(line_no) + ": visit must be an array");
            std::vector<std::string> codes;
            for (const auto& c : visit) {
                if (!c.is_string())
                    throw IngestError("line " + std::to_string(line_no) +
                                      ": entity code must be a string");
                codes.push_back(c.get<std::string>());
            }
            if (codes.empty())
                throw ValidationError("line " + std::to_string(line_no) + ": empty visit");
            p.visits.push_back(std::move(codes));
        }
        out.push_back(std::move(p));
    }
    return out;
}

// CSV layout (one row per visit, covariates repeated and checked for
// consistency): patient_id,label,age_at_start,observation_window,gender,
// race,ethnicity,brain_injury,brain_tumor,stroke,visit,codes
// with codes ';'-joined and booleans as 0/1.
inline const char* kCohortCsvHeader =
    "patient_id,label,age_at_start,observation_window,gender,race,ethnicity,"
    "brain_injury,brain_tumor,stroke,visit,codes";

inline std::vector<RawPatient> parse_csv(const std::string& text) {
    std::vector<std::string> lines = split(text, '\n');
    if (lines.empty() || trim(lines[0]) != kCohortCsvHeader)
        throw IngestError("line 1: bad cohort CSV header");
    std::map<long long, RawPatient> by_id;
    std::map<long long, int> next_visit;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const std::string line = trim(lines[ln]);
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 12)
            throw IngestError("line " + std::to_string(ln + 1) + ": expected 12 fields, got " +
                              std::to_string(f.size()));
        RawPatient row;
        try {
            row.id = parse_int(f[0]);
            row.label = static_cast<int>(parse_int(f[1]));
            row.covariates.age_at_start = parse_double(f[2]);
            row.covariates.observation_window = parse_double(f[3]);
            row.covariates.gender = f[4];
            row.covariates.race = f[5];
            row.covariates.ethnicity = f[6];
            row.covariates.brain_injury = parse_int(f[7]) != 0;
            row.covariates.brain_tumor = parse_int(f[8]) != 0;
            row.covariates.stroke = parse_int(f[9]) != 0;
        } catch (const Error& e) {
            throw IngestError("line " + std::to_string(ln + 1) + ": " + e.what());
        }
        const int visit_no = static_cast<int>(parse_int(f[10]));
        std::vector<std::string> codes;
        for (auto& c : split(f[11], ';'))
            if (!trim(c).empty()) codes.push_back(trim(c));
        if (codes.empty())
            throw ValidationError("line " + std::to_string(ln + 1) + ": empty visit");

        auto [it, inserted] = by_id.try_emplace(row.id, row);
        if (!inserted) {
            const auto& a = it->second.covariates;
            const auto& b = row.covariates;
            if (a.age_at_start != b.age_at_start || a.gender != b.gender ||
                a.race != b.race || it->second.label != row.label)
                throw ValidationError("line " + std::to_string(ln + 1) +
                                      ": inconsistent patient attributes for id " +
                                      std::to_string(row.id));
        }
        if (visit_no != next_visit[row.id]++)
            throw IngestError("line " + std::to_string(ln + 1) +
                              ": visit numbers must be consecutive from 0 per patient");
        it->second.visits.push_back(std::move(codes));
    }
    std::vector<RawPatient> out;
    out.reserve(by_id.size());
    for (auto& [id, p] : by_id) out.push_back(std::move(p));
    return out;
}

}  // namespace detail

/// Loads and validates a cohort. Codes present in fewer than
/// `min_prevalence` of patients are dropped from the vocabulary (and from
/// visits; visits left empty by the filter are removed). Patient ids are
/// remapped to dense 0..I-1 in ascending original-id order.
inline Cohort load_cohort(const std::filesystem::path& path, CohortFormat format,
                          double min_prevalence = 0.05) {
    const std::string text = read_file(path);
    auto raw = format == CohortFormat::Jsonl ? detail::parse_jsonl(text)
                                             : detail::parse_csv(text);
    if (raw.empty()) throw ValidationError(path.string() + ": no patients");

    std::sort(raw.begin(), raw.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < raw.size(); ++i)
        if (raw[i].id == raw[i - 1].id)
            throw ValidationError("duplicate patient id " + std::to_string(raw[i].id));

    // patient-level prevalence per code
    std::map<std::string, std::size_t> prevalence;
    for (const auto& p : raw) {
        std::set<std::string> seen;
        for (const auto& v : p.visits)
            for (const auto& c : v) seen.insert(c);
        for (const auto& c : seen) ++prevalence[c];
    }
    const double n = static_cast<double>(raw.size());
    std::vector<std::string> kept;
    for (const auto& [code, cnt] : prevalence)
        if (static_cast<double>(cnt) / n >= min_prevalence) kept.push_back(code);
    if (kept.empty()) throw ValidationError("prevalence filter removed every code");

    Cohort cohort;
    cohort.vocabulary = Vocabulary::from_codes(std::move(kept));

    for (std::size_t i = 0; i < raw.size(); ++i) {
        Patient p;
        p.id = static_cast<int>(i);
        p.label = raw[i].label;
        p.covariates = raw[i].covariates;
        for (const auto& v : raw[i].visits) {
            std::set<std::uint32_t> ents;
            for (const auto& code : v) {
                const int idx = cohort.vocabulary.index_of(code);
                if (idx >= 0) ents.insert(static_cast<std::uint32_t>(idx));
            }
            if (ents.empty()) continue;  // all codes filtered out
            Visit visit;
            visit.ordinal = static_cast<int>(p.visits.size());
            visit.entities.assign(ents.begin(), ents.end());
            p.visits.push_back(std::move(visit));
        }
        cohort.patients.push_back(std::move(p));
    }
    cohort.provenance.kind = Provenance::Kind::Ingested;
    validate_cohort(cohort);
    return cohort;
}

inline std::string cohort_to_jsonl(const Cohort& c) {
    std::string out;
    for (const auto& p : c.patients) {
        nlohmann::ordered_json j;
        j["id"] = p.id;
        j["label"] = p.label;
        j["covariates"] = {{"age_at_start", p.covariates.age_at_start},
                           {"observation_window", p.covariates.observation_window},
                           {"gender", p.covariates.gender},
                           {"race", p.covariates.race},
                           {"ethnicity", p.covariates.ethnicity},
                           {"brain_injury", p.covariates.brain_injury},
                           {"brain_tumor", p.covariates.brain_tumor},
                           {"stroke", p.covariates.stroke}};
        auto visits = nlohmann::ordered_json::array();
        for (const auto& v : p.visits) {
            auto codes = nlohmann::ordered_json::array();
            for (auto e : v.entities) codes.push_back(c.vocabulary.codes[e]);
            visits.push_back(std::move(codes));
        }
        j["visits"] = std::move(visits);
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline std::string cohort_to_csv(const Cohort& c) {
    std::string out = detail::kCohortCsvHeader;
    out += '\n';
    for (const auto& p : c.patients) {
        int visit_no = 0;
        for (const auto& v : p.visits) {
            out += std::to_string(p.id) + ',' + std::to_string(p.label) + ',' +
                   format_double(p.covariates.age_at_start) + ',' +
                   format_double(p.covariates.observation_window) + ',' +
                   p.covariates.gender + ',' + p.covariates.race + ',' +
                   p.covariates.ethnicity + ',' +
                   (p.covariates.brain_injury ? "1," : "0,") +
                   (p.covariates.brain_tumor ? "1," : "0,") +
                   (p.covariates.stroke ? "1," : "0,") + std::to_string(visit_no++) + ',';
            for (std::size_t k = 0; k < v.entities.size(); ++k) {
                if (k) out += ';';
                out += c.vocabulary.codes[v.entities[k]];
            }
            out += '\n';
        }
    }
    return out;
}

inline void save_cohort(const Cohort& c, const std::filesystem::path& path,
                        CohortFormat format) {
    write_file(path, format == CohortFormat::Jsonl ? cohort_to_jsonl(c) : cohort_to_csv(c));
}

}  // namespace phenotyper

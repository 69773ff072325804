#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "phenotyper/cohort_io.hpp"
#include "phenotyper/embedding.hpp"
#include "phenotyper/factorization.hpp"
#include "phenotyper/graphs.hpp"
#include "phenotyper/matching.hpp"
#include "phenotyper/matrix_io.hpp"
#include "phenotyper/metrics.hpp"
#include "phenotyper/toml_lite.hpp"
#include "phenotyper/transition.hpp"

namespace phenotyper {

/// Stage seed = global seed hashed with the stage name.
inline std::uint64_t stage_seed(std::uint64_t global_seed, const std::string& stage) {
    std::uint64_t h = fnv1a64(stage);
    for (int b = 0; b < 8; ++b)
        h = fnv1a64(std::string(1, static_cast<char>((global_seed >> (8 * b)) & 0xFF)), h);
    return h;
}

struct PipelineConfig {
    std::filesystem::path out_dir = "out";
    std::uint64_t seed = 42;

    struct Stages {
        bool synth = true;  // when false, [ingest] input is loaded instead
        bool match = true;
        bool embed = true;
        bool tensorize = true;
        bool fit = true;
        bool evaluate = true;
        bool export_graphs = true;
    } stages;

    SynthConfig synth;

    struct Ingest {
        std::filesystem::path input;
        double min_prevalence = 0.05;
    } ingest;

    struct Match {
        std::string exposure = "stroke";  // stroke | brain_injury | brain_tumor
        double l2 = 1.0;
        double caliper_sd = 0.2;  // caliper as a fraction of sd(logit score)
        double bias_budget = 5.0;
    } match;

    SgnsConfig embed;

    struct Tensorize {
        TensorMode mode = TensorMode::Counts;
        bool include_self_loops = true;
    } tensorize;

    HyperParams fit;
    double holdout_fraction = 0.0;

    struct Evaluate {
        double alpha = 0.05;
    } evaluate;

    struct Export {
        double epsilon = 16.0;
        std::int64_t top_k = 10;
        std::string format = "dot";  // dot | json | both
        double alpha = 0.05;
    } exportg;

    static PipelineConfig from_toml(const TomlTable& t) {
        PipelineConfig c;
        c.out_dir = t.get_string("", "out_dir", c.out_dir.string());
        c.seed = static_cast<std::uint64_t>(t.get_int("", "seed", 42));

        c.stages.synth = t.get_bool("stages", "synth", true);
        c.stages.match = t.get_bool("stages", "match", true);
        c.stages.embed = t.get_bool("stages", "embed", true);
        c.stages.tensorize = t.get_bool("stages", "tensorize", true);
        c.stages.fit = t.get_bool("stages", "fit", true);
        c.stages.evaluate = t.get_bool("stages", "evaluate", true);
        c.stages.export_graphs = t.get_bool("stages", "export", true);

        c.synth.patients = static_cast<int>(t.get_int("synth", "patients", 200));
        c.synth.entities = static_cast<int>(t.get_int("synth", "entities", 40));
        c.synth.rank = static_cast<int>(t.get_int("synth", "rank", 5));
        c.synth.visits_min = static_cast<int>(t.get_int("synth", "visits_min", 4));
        c.synth.visits_max = static_cast<int>(t.get_int("synth", "visits_max", 8));
        c.synth.entities_per_visit_min =
            static_cast<int>(t.get_int("synth", "entities_per_visit_min", 2));
        c.synth.entities_per_visit_max =
            static_cast<int>(t.get_int("synth", "entities_per_visit_max", 5));
        c.synth.noise_rate = t.get_double("synth", "noise_rate", 0.05);
        c.synth.label_weight = t.get_double("synth", "label_weight", 3.0);
        c.synth.label_temperature = t.get_double("synth", "label_temperature", 1.0);
        c.synth.exposure_effect = t.get_double("synth", "exposure_effect", 0.0);
        c.synth.seed = stage_seed(c.seed, "synth");

        c.ingest.input = t.get_string("ingest", "input", "");
        c.ingest.min_prevalence = t.get_double("ingest", "min_prevalence", 0.05);

        c.match.exposure = t.get_string("match", "exposure", "stroke");
        c.match.l2 = t.get_double("match", "l2", 1.0);
        c.match.caliper_sd = t.get_double("match", "caliper_sd", 0.2);
        c.match.bias_budget = t.get_double("match", "bias_budget", 5.0);

        c.embed.dimension = static_cast<int>(t.get_int("embed", "dimension", 32));
        c.embed.negatives = static_cast<int>(t.get_int("embed", "negatives", 5));
        c.embed.epochs = static_cast<int>(t.get_int("embed", "epochs", 5));
        c.embed.learning_rate = t.get_double("embed", "learning_rate", 0.025);
        c.embed.noise_exponent = t.get_double("embed", "noise_exponent", 0.75);
        c.embed.seed = stage_seed(c.seed, "embed");

        const std::string mode = t.get_string("tensorize", "mode", "counts");
        if (mode == "counts")
            c.tensorize.mode = TensorMode::Counts;
        else if (mode == "patient_normalized")
            c.tensorize.mode = TensorMode::PatientNormalized;
        else
            throw ConfigError("tensorize.mode must be counts or patient_normalized");
        c.tensorize.include_self_loops = t.get_bool("tensorize", "include_self_loops", true);

        c.fit.rank = static_cast<int>(t.get_int("fit", "rank", 5));
        c.fit.mu = t.get_double("fit", "mu", 1.0);
        c.fit.lambda = t.get_double("fit", "lambda", 0.1);
        c.fit.gamma = t.get_double("fit", "gamma", 1.0);
        c.fit.learning_rate = t.get_double("fit", "learning_rate", 0.02);
        c.fit.max_iters = static_cast<int>(t.get_int("fit", "max_iters", 1000));
        c.fit.dropout_rate = t.get_double("fit", "dropout_rate", 0.1);
        const std::string init = t.get_string("fit", "init", "structured");
        if (init == "structured")
            c.fit.init = FactorInit::Structured;
        else if (init == "uniform")
            c.fit.init = FactorInit::Uniform;
        else
            throw ConfigError("fit.init must be structured or uniform");
        c.fit.seed = stage_seed(c.seed, "fit");
        c.holdout_fraction = t.get_double("fit", "holdout_fraction", 0.0);
        if (c.holdout_fraction < 0.0 || c.holdout_fraction >= 1.0)
            throw ConfigError("fit.holdout_fraction must be in [0, 1)");

        c.evaluate.alpha = t.get_double("evaluate", "alpha", 0.05);

        c.exportg.epsilon = t.get_double("export", "epsilon", 16.0);
        c.exportg.top_k = t.get_int("export", "top_k", 10);
        c.exportg.format = t.get_string("export", "format", "dot");
        if (c.exportg.format != "dot" && c.exportg.format != "json" &&
            c.exportg.format != "both")
            throw ConfigError("export.format must be dot, json or both");
        c.exportg.alpha = t.get_double("export", "alpha", 0.05);
        return c;
    }

    /// Canonical serialization; feeds the config hash and the manifest.
    std::string canonical_string() const {
        nlohmann::ordered_json j;
        j["out_dir"] = out_dir.string();
        j["seed"] = seed;
        j["stages"] = {{"synth", stages.synth},       {"match", stages.match},
                       {"embed", stages.embed},       {"tensorize", stages.tensorize},
                       {"fit", stages.fit},           {"evaluate", stages.evaluate},
                       {"export", stages.export_graphs}};
        j["synth"] = {{"patients", synth.patients},
                      {"entities", synth.entities},
                      {"rank", synth.rank},
                      {"visits_min", synth.visits_min},
                      {"visits_max", synth.visits_max},
                      {"entities_per_visit_min", synth.entities_per_visit_min},
                      {"entities_per_visit_max", synth.entities_per_visit_max},
                      {"noise_rate", synth.noise_rate},
                      {"label_weight", synth.label_weight},
                      {"label_temperature", synth.label_temperature},
                      {"exposure_effect", synth.exposure_effect}};
        j["ingest"] = {{"input", ingest.input.string()},
                       {"min_prevalence", ingest.min_prevalence}};
        j["match"] = {{"exposure", match.exposure},
                      {"l2", match.l2},
                      {"caliper_sd", match.caliper_sd},
                      {"bias_budget", match.bias_budget}};
        j["embed"] = {{"dimension", embed.dimension},
                      {"negatives", embed.negatives},
                      {"epochs", embed.epochs},
                      {"learning_rate", embed.learning_rate},
                      {"noise_exponent", embed.noise_exponent}};
        j["tensorize"] = {{"mode", tensorize.mode == TensorMode::Counts ? "counts"
                                                                        : "patient_normalized"},
                          {"include_self_loops", tensorize.include_self_loops}};
        j["fit"] = {{"rank", fit.rank},
                    {"mu", fit.mu},
                    {"lambda", fit.lambda},
                    {"gamma", fit.gamma},
                    {"learning_rate", fit.learning_rate},
                    {"max_iters", fit.max_iters},
                    {"dropout_rate", fit.dropout_rate},
                    {"init", fit.init == FactorInit::Structured ? "structured" : "uniform"},
                    {"holdout_fraction", holdout_fraction}};
        j["evaluate"] = {{"alpha", evaluate.alpha}};
        j["export"] = {{"epsilon", exportg.epsilon},
                       {"top_k", exportg.top_k},
                       {"format", exportg.format},
                       {"alpha", exportg.alpha}};
        return j.dump();
    }
};

// ---------------------------------------------------------------------------
// Pipeline runner with content-hash stage caching.
// ---------------------------------------------------------------------------

class Pipeline {
  public:
    explicit Pipeline(PipelineConfig config) : cfg_(std::move(config)) {}

    /// Runs the enabled stages in fixed order. Returns 0 on success. A stage
    /// failure preserves partial artifacts, records the failure point in the
    /// manifest and rethrows.
    int run() {
        validate_preconditions();
        std::filesystem::create_directories(cfg_.out_dir);
        load_previous_manifest();
        manifest_["config_hash"] = format_hash(fnv1a64(cfg_.canonical_string()));
        manifest_["config"] = nlohmann::ordered_json::parse(cfg_.canonical_string());
        manifest_["stages"] = nlohmann::ordered_json::object();

        try {
            std::vector<std::filesystem::path> cohort_inputs;
            if (!cfg_.stages.synth) cohort_inputs.push_back(cfg_.ingest.input);
            run_stage("cohort", cohort_inputs, {path("cohort.jsonl")},
                      [this] { stage_cohort(); });
            if (cfg_.stages.match)
                run_stage("match", {path("cohort.jsonl")},
                          {path("match_result.json"), path("bias_table.csv")},
                          [this] { stage_match(); });
            if (cfg_.stages.embed)
                run_stage("embed", {path("cohort.jsonl")},
                          {path("embeddings.csv"), path("similarity.csv")},
                          [this] { stage_embed(); });
            if (cfg_.stages.tensorize)
                run_stage("tensorize", {path("cohort.jsonl")}, {path("tensor.csv")},
                          [this] { stage_tensorize(); });
            if (cfg_.stages.fit)
                run_stage("fit",
                          {path("cohort.jsonl"), path("similarity.csv"), path("tensor.csv")},
                          {path("model/A.csv"), path("model/B.csv"), path("model/C.csv"),
                           path("model/theta.csv"), path("model/hyperparams.toml"),
                           path("model/trace.csv"), path("model/split.json")},
                          [this] { stage_fit(); });
            if (cfg_.stages.evaluate)
                run_stage("evaluate",
                          {path("cohort.jsonl"), path("tensor.csv"), path("model/A.csv"),
                           path("model/B.csv"), path("model/C.csv"), path("model/theta.csv"),
                           path("model/split.json")},
                          {path("metrics.json"), path("significance.csv")},
                          [this] { stage_evaluate(); });
            if (cfg_.stages.export_graphs)
                run_stage("export",
                          {path("cohort.jsonl"), path("tensor.csv"), path("model/B.csv"),
                           path("model/C.csv"), path("significance.csv")},
                          {path("graphs/index.json")}, [this] { stage_export(); });
        } catch (...) {
            write_manifest();
            throw;
        }
        write_manifest();
        return 0;
    }

    const std::filesystem::path& out_dir() const { return cfg_.out_dir; }

  private:
    PipelineConfig cfg_;
    nlohmann::ordered_json manifest_;
    nlohmann::ordered_json previous_stages_;

    std::filesystem::path path(const std::string& rel) const { return cfg_.out_dir / rel; }

    static std::string format_hash(std::uint64_t h) {
        char buf[19];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    void validate_preconditions() const {
        if (!cfg_.stages.synth) {
            if (cfg_.ingest.input.empty())
                throw ConfigError("pipeline: synth disabled and no ingest.input configured");
            if (!std::filesystem::exists(cfg_.ingest.input))
                throw ConfigError("pipeline: ingest input does not exist: " +
                                  cfg_.ingest.input.string());
        }
        if (cfg_.match.exposure != "stroke" && cfg_.match.exposure != "brain_injury" &&
            cfg_.match.exposure != "brain_tumor")
            throw ConfigError("pipeline: match.exposure must be one of stroke, brain_injury, "
                              "brain_tumor");
        const bool needs_model = cfg_.stages.evaluate || cfg_.stages.export_graphs;
        if (needs_model && !cfg_.stages.fit &&
            !std::filesystem::exists(cfg_.out_dir / "model/B.csv"))
            throw ConfigError("pipeline: evaluate/export need the fit stage or an existing "
                              "model artifact");
    }

    void load_previous_manifest() {
        previous_stages_ = nlohmann::ordered_json::object();
        const auto p = path("manifest.json");
        if (!std::filesystem::exists(p)) return;
        try {
            const auto m = nlohmann::ordered_json::parse(read_file(p));
            if (m.contains("stages")) previous_stages_ = m["stages"];
        } catch (...) {
            // stale or corrupt manifest: rebuild everything
        }
    }

    void write_manifest() {
        write_file(path("manifest.json"), manifest_.dump(2) + "\n");
    }

    /// Only the stage's own config section (plus the global seed) feeds its
    /// hash, so unrelated config edits do not invalidate upstream caches.
    std::string stage_config_string(const std::string& name) const {
        const auto full = nlohmann::ordered_json::parse(cfg_.canonical_string());
        nlohmann::ordered_json j;
        j["seed"] = full["seed"];
        if (name == "cohort") {
            j["synth_enabled"] = full["stages"]["synth"];
            j["synth"] = full["synth"];
            j["ingest"] = full["ingest"];
        } else if (name == "export") {
            j["export"] = full["export"];
        } else if (name == "evaluate") {
            j["evaluate"] = full["evaluate"];
        } else {
            j[name] = full[name];
            if (name == "fit") j["holdout_fraction"] = full["fit"]["holdout_fraction"];
        }
        return j.dump();
    }

    std::uint64_t stage_input_hash(const std::string& name,
                                   const std::vector<std::filesystem::path>& inputs) const {
        std::uint64_t h = fnv1a64(name);
        h = fnv1a64(stage_config_string(name), h);
        for (const auto& in : inputs) {
            h = fnv1a64(in.string(), h);
            if (std::filesystem::exists(in)) h = fnv1a64(read_file(in), h);
        }
        return h;
    }

    template <typename Fn>
    void run_stage(const std::string& name, const std::vector<std::filesystem::path>& inputs,
                   const std::vector<std::filesystem::path>& outputs, Fn&& body) {
        const std::uint64_t in_hash = stage_input_hash(name, inputs);
        auto& entry = manifest_["stages"][name];
        entry["input_hash"] = format_hash(in_hash);
        auto outs = nlohmann::ordered_json::array();
        for (const auto& o : outputs)
            outs.push_back(std::filesystem::relative(o, cfg_.out_dir).string());
        entry["outputs"] = outs;

        bool cached = previous_stages_.contains(name) &&
                      previous_stages_[name].value("input_hash", "") == format_hash(in_hash) &&
                      previous_stages_[name].value("status", "") != "failed";
        if (cached)
            for (const auto& o : outputs)
                if (!std::filesystem::exists(o)) cached = false;
        if (cached) {
            entry["status"] = "skipped";
            entry["duration_ms"] = 0;
            std::cerr << "[pipeline] " << name << ": cached, skipping\n";
            return;
        }

        const auto t0 = std::chrono::steady_clock::now();
        try {
            body();
        } catch (...) {
            entry["status"] = "failed";
            entry["duration_ms"] = elapsed_ms(t0);
            throw;
        }
        entry["status"] = "ok";
        entry["duration_ms"] = elapsed_ms(t0);
        std::cerr << "[pipeline] " << name << ": done in " << entry["duration_ms"] << " ms\n";
    }

    static long long elapsed_ms(std::chrono::steady_clock::time_point t0) {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - t0)
            .count();
    }

    Cohort load_artifact_cohort() const {
        return load_cohort(path("cohort.jsonl"), CohortFormat::Jsonl, 0.0);
    }

    // -- stages ------------------------------------------------------------

    void stage_cohort() {
        Cohort cohort;
        if (cfg_.stages.synth) {
            cohort = generate_synthetic(cfg_.synth);
        } else {
            cohort = load_cohort(cfg_.ingest.input,
                                 cohort_format_from_path(cfg_.ingest.input),
                                 cfg_.ingest.min_prevalence);
        }
        save_cohort(cohort, path("cohort.jsonl"), CohortFormat::Jsonl);
    }

    void stage_match() {
        const Cohort cohort = load_artifact_cohort();
        const auto exposed = [&](const Patient& p) {
            if (cfg_.match.exposure == "stroke") return p.covariates.stroke;
            if (cfg_.match.exposure == "brain_injury") return p.covariates.brain_injury;
            return p.covariates.brain_tumor;
        };
        std::vector<Covariates> covs;
        std::vector<int> expo;
        for (const auto& p : cohort.patients) {
            covs.push_back(p.covariates);
            expo.push_back(exposed(p) ? 1 : 0);
        }
        const PropensityModel pm = fit_propensity(covs, expo, cfg_.match.l2);

        std::vector<MatchCandidate> cases, controls;
        std::vector<double> logits;
        for (const auto& p : cohort.patients) {
            MatchCandidate c{p.id, pm.score(p.covariates), p.covariates};
            logits.push_back(std::log(c.propensity / (1.0 - c.propensity)));
            (exposed(p) ? cases : controls).push_back(c);
        }
        if (cases.empty() || controls.empty())
            throw ValidationError("match: exposure has a single class in this cohort");
        const double sd = std::sqrt(population_variance(logits));
        const double caliper = std::max(cfg_.match.caliper_sd * sd, 1e-12);
        const MatchResult res = match_cohort(cases, controls, caliper, cfg_.match.bias_budget);

        // before/after bias table (Figure 3a shape)
        std::vector<Covariates> case_covs, control_covs;
        for (const auto& c : cases) case_covs.push_back(c.covariates);
        for (const auto& c : controls) control_covs.push_back(c.covariates);
        const auto before = covariate_bias_table(case_covs, control_covs);
        std::string csv = "covariate,before_pct,after_pct\n";
        for (std::size_t i = 0; i < before.size(); ++i) {
            const double after =
                res.standardized_biases.empty() ? 0.0 : res.standardized_biases[i].second;
            csv += before[i].first + ',' + format_double(before[i].second) + ',' +
                   format_double(after) + '\n';
        }
        write_file(path("bias_table.csv"), csv);

        // chi-square of exposure vs outcome (label) on the matched cohort
        ContingencyTable2x2 table;
        for (const auto& [case_id, control_id] : res.pairs) {
            const auto& case_p = cohort.patients[static_cast<std::size_t>(case_id)];
            const auto& ctrl_p = cohort.patients[static_cast<std::size_t>(control_id)];
            ++table.counts[1][case_p.label == 1 ? 1 : 0];
            ++table.counts[0][ctrl_p.label == 1 ? 1 : 0];
        }

        nlohmann::ordered_json j;
        j["exposure"] = cfg_.match.exposure;
        j["propensity_accuracy"] = pm.accuracy;
        j["caliper_initial"] = caliper;
        j["caliper_final"] = res.final_caliper;
        j["rounds"] = res.rounds;
        j["pairs"] = res.pairs;
        j["matched_pairs"] = res.pairs.size();
        j["dropped_cases"] = res.dropped_cases;
        j["diagnostic"] = res.diagnostic;
        auto biases = nlohmann::ordered_json::object();
        for (const auto& [name, bias] : res.standardized_biases) biases[name] = bias;
        j["standardized_bias_after"] = biases;
        if (!res.pairs.empty()) {
            try {
                const ChiSquareResult chi = chi_square_yates(table);
                j["chi_square"] = {{"table", {{table.counts[0][0], table.counts[0][1]},
                                              {table.counts[1][0], table.counts[1][1]}}},
                                   {"chi2", chi.chi2},
                                   {"p", chi.p},
                                   {"log10_p", chi.log10_p()}};
            } catch (const Error& e) {
                j["chi_square"] = {{"error", e.what()}};
            }
        }
        write_file(path("match_result.json"), j.dump(2) + "\n");
    }

    void stage_embed() {
        const Cohort cohort = load_artifact_cohort();
        SgnsConfig scfg = cfg_.embed;
        const auto pairs = build_pairs(cohort);
        const EmbeddingTable table = train_skipgram(pairs, cohort.vocabulary, scfg);
        write_file(path("embeddings.csv"),
                   labeled_matrix_to_csv(table.input_vectors, cohort.vocabulary.codes));
        save_matrix(similarity_matrix(table), path("similarity.csv"));
    }

    void stage_tensorize() {
        const Cohort cohort = load_artifact_cohort();
        const TransitionTensor tensor = build_transition_tensor(
            cohort, cfg_.tensorize.mode, cfg_.tensorize.include_self_loops);
        save_tensor(tensor, cohort.vocabulary, path("tensor.csv"));
    }

    /// Deterministic holdout split: shuffled patient ids, first block held out.
    static std::pair<std::vector<int>, std::vector<int>> split_ids(std::size_t n,
                                                                   double holdout_fraction,
                                                                   std::uint64_t seed) {
        std::vector<int> ids(n);
        for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i);
        Rng rng(seed);
        for (std::size_t i = n; i > 1; --i)
            std::swap(ids[i - 1], ids[rng.uniform_index(i)]);
        const std::size_t h = static_cast<std::size_t>(holdout_fraction * static_cast<double>(n));
        std::vector<int> hold(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(h));
        std::vector<int> train(ids.begin() + static_cast<std::ptrdiff_t>(h), ids.end());
        std::sort(hold.begin(), hold.end());
        std::sort(train.begin(), train.end());
        return {train, hold};
    }

    static TransitionTensor subset_tensor(const TransitionTensor& t,
                                          const std::vector<int>& ids) {
        TransitionTensor out;
        out.entities = t.entities;
        out.mode = t.mode;
        out.patients = ids.size();
        out.offsets.assign(ids.size() + 1, 0);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const auto slice = t.slice(static_cast<std::size_t>(ids[k]));
            out.entries.insert(out.entries.end(), slice.begin(), slice.end());
            out.offsets[k + 1] = out.entries.size();
        }
        return out;
    }

    void stage_fit() {
        const Cohort cohort = load_artifact_cohort();
        const TransitionTensor tensor =
            load_tensor(path("tensor.csv"), cohort.vocabulary, cohort.patient_count());
        const Eigen::MatrixXd S = load_matrix(path("similarity.csv"));

        auto [train_ids, hold_ids] = split_ids(cohort.patient_count(), cfg_.holdout_fraction,
                                               stage_seed(cfg_.seed, "split"));
        const TransitionTensor train_tensor = subset_tensor(tensor, train_ids);
        std::vector<int> train_labels;
        for (int id : train_ids)
            train_labels.push_back(cohort.patients[static_cast<std::size_t>(id)].label);

        const FitResult res = fit(train_tensor, S, train_labels, cfg_.fit);

        save_matrix(res.model.A, path("model/A.csv"));
        save_matrix(res.model.B, path("model/B.csv"));
        save_matrix(res.model.C, path("model/C.csv"));
        save_matrix(res.model.theta, path("model/theta.csv"));

        TomlTable hp;
        hp.set("hyperparams", "rank", TomlValue{static_cast<std::int64_t>(cfg_.fit.rank)});
        hp.set("hyperparams", "mu", TomlValue{cfg_.fit.mu});
        hp.set("hyperparams", "lambda", TomlValue{cfg_.fit.lambda});
        hp.set("hyperparams", "gamma", TomlValue{cfg_.fit.gamma});
        hp.set("hyperparams", "learning_rate", TomlValue{cfg_.fit.learning_rate});
        hp.set("hyperparams", "max_iters",
               TomlValue{static_cast<std::int64_t>(cfg_.fit.max_iters)});
        hp.set("hyperparams", "dropout_rate", TomlValue{cfg_.fit.dropout_rate});
        hp.set("hyperparams", "init",
               TomlValue{std::string(cfg_.fit.init == FactorInit::Structured ? "structured"
                                                                             : "uniform")});
        hp.set("hyperparams", "seed", TomlValue{static_cast<std::int64_t>(cfg_.fit.seed)});
        hp.set("hyperparams", "iterations",
               TomlValue{static_cast<std::int64_t>(res.trace.iterations)});
        write_file(path("model/hyperparams.toml"), to_toml(hp));

        std::string trace = "iteration,total,tensor,supervision,l1,similarity\n";
        for (std::size_t i = 0; i < res.trace.total.size(); ++i)
            trace += std::to_string(i + 1) + ',' + format_double(res.trace.total[i]) + ',' +
                     format_double(res.trace.tensor_term[i]) + ',' +
                     format_double(res.trace.supervision_term[i]) + ',' +
                     format_double(res.trace.l1_term[i]) + ',' +
                     format_double(res.trace.similarity_term[i]) + '\n';
        write_file(path("model/trace.csv"), trace);

        nlohmann::ordered_json split;
        split["train"] = train_ids;
        split["holdout"] = hold_ids;
        write_file(path("model/split.json"), split.dump(2) + "\n");
    }

    void stage_evaluate() {
        const Cohort cohort = load_artifact_cohort();
        const TransitionTensor tensor =
            load_tensor(path("tensor.csv"), cohort.vocabulary, cohort.patient_count());
        FactorModel model;
        model.A = load_matrix(path("model/A.csv"));
        model.B = load_matrix(path("model/B.csv"));
        model.C = load_matrix(path("model/C.csv"));
        model.theta = load_matrix(path("model/theta.csv"));
        model.hyper = cfg_.fit;
        const auto split = nlohmann::ordered_json::parse(read_file(path("model/split.json")));
        const std::vector<int> train_ids = split["train"].get<std::vector<int>>();
        const std::vector<int> hold_ids = split["holdout"].get<std::vector<int>>();

        std::vector<int> train_labels;
        for (int id : train_ids)
            train_labels.push_back(cohort.patients[static_cast<std::size_t>(id)].label);

        const Eigen::VectorXd train_scores = predict(model.A, model.theta);
        MetricsReport report;
        report.auc = auc(std::span<const double>(train_scores.data(),
                                                 static_cast<std::size_t>(train_scores.size())),
                         train_labels);
        report.sparsity = gini_sparsity(model);
        report.overlap = model.rank() >= 2 ? overlap(model) : 1.0;
        report.mse = mse(model, subset_tensor(tensor, train_ids));

        nlohmann::ordered_json j;
        j["auc"] = report.auc;
        j["sparsity"] = report.sparsity;
        j["overlap"] = report.overlap;
        j["mse"] = report.mse;
        if (!hold_ids.empty()) {
            const TransitionTensor hold_tensor = subset_tensor(tensor, hold_ids);
            const Eigen::MatrixXd hold_A = project_new_patients(hold_tensor, model.B, model.C);
            const Eigen::VectorXd hold_scores = predict(hold_A, model.theta);
            std::vector<int> hold_labels;
            for (int id : hold_ids)
                hold_labels.push_back(cohort.patients[static_cast<std::size_t>(id)].label);
            j["auc_holdout"] =
                auc(std::span<const double>(hold_scores.data(),
                                            static_cast<std::size_t>(hold_scores.size())),
                    hold_labels);
        }
        write_file(path("metrics.json"), j.dump(2) + "\n");

        const PhenotypeSignificance sig = logit_significance(model.A, train_labels);
        std::string csv = "phenotype,coeff,std_err,z,p\n";
        for (std::size_t r = 0; r < sig.coefficients.size(); ++r)
            csv += 'x' + std::to_string(r + 1) + ',' + format_double(sig.coefficients[r]) +
                   ',' + format_double(sig.std_errors[r]) + ',' +
                   format_double(sig.z_values[r]) + ',' + format_double(sig.p_values[r]) + '\n';
        write_file(path("significance.csv"), csv);
    }

    void stage_export() {
        const Cohort cohort = load_artifact_cohort();
        const TransitionTensor tensor =
            load_tensor(path("tensor.csv"), cohort.vocabulary, cohort.patient_count());
        const Eigen::MatrixXd B = load_matrix(path("model/B.csv"));
        const Eigen::MatrixXd C = load_matrix(path("model/C.csv"));
        const Eigen::MatrixXd M = mean_transition_matrix(tensor);

        // significant phenotypes from the evaluate artifact
        const auto lines = split(read_file(path("significance.csv")), '\n');
        std::vector<std::pair<int, double>> selected;  // (phenotype, coefficient)
        for (std::size_t i = 1; i < lines.size(); ++i) {
            const auto t = trim(lines[i]);
            if (t.empty()) continue;
            const auto f = split(t, ',');
            const double p = parse_double(f[4]);
            if (p < cfg_.exportg.alpha)
                selected.emplace_back(static_cast<int>(i) - 1, parse_double(f[1]));
        }

        std::filesystem::create_directories(path("graphs"));
        nlohmann::ordered_json index;
        index["alpha"] = cfg_.exportg.alpha;
        auto files = nlohmann::ordered_json::array();
        std::vector<PhenotypeGraph> graphs;
        for (const auto& [r, coeff] : selected) {
            EdgeScoreOptions opt;
            opt.epsilon = cfg_.exportg.epsilon;
            opt.top_k = static_cast<std::size_t>(cfg_.exportg.top_k);
            opt.coefficient = coeff;
            const PhenotypeGraph g = edge_scores(r, B, C, M, cohort.vocabulary, opt);
            graphs.push_back(g);
            const std::string stem = "graphs/phenotype_" + std::to_string(r);
            if (cfg_.exportg.format == "dot" || cfg_.exportg.format == "both") {
                write_file(path(stem + ".dot"), graph_to_dot(g));
                files.push_back(stem + ".dot");
            }
            if (cfg_.exportg.format == "json" || cfg_.exportg.format == "both") {
                write_file(path(stem + ".json"), graph_to_json(g).dump(2) + "\n");
                files.push_back(stem + ".json");
            }
        }
        index["significant_phenotypes"] = selected.size();
        index["files"] = files;
        write_file(path("graphs/index.json"), index.dump(2) + "\n");
    }
};

inline int run_pipeline(const PipelineConfig& config) { return Pipeline(config).run(); }

// ---------------------------------------------------------------------------
// Human-readable run summary.
// ---------------------------------------------------------------------------

inline std::string report(const std::filesystem::path& artifact_dir) {
    const auto manifest_path = artifact_dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw Error("report: missing manifest " + manifest_path.string());
    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception&) {
        throw Error("report: corrupted manifest " + manifest_path.string());
    }

    std::string out;
    out += "pipeline report: " + artifact_dir.string() + "\n";
    out += "config hash: " + manifest.value("config_hash", std::string("?")) + "\n\n";

    const auto stage_status = [&](const char* name) -> std::string {
        if (manifest.contains("stages") && manifest["stages"].contains(name))
            return manifest["stages"][name].value("status", "?");
        return "disabled";
    };

    out += "[causal check]\n";
    if (stage_status("match") == "disabled") {
        out += "  matching stage disabled; no bias table or chi-square result\n";
    } else {
        const auto mr =
            nlohmann::ordered_json::parse(read_file(artifact_dir / "match_result.json"));
        out += "  exposure: " + mr.value("exposure", std::string("?")) + "\n";
        out += "  matched pairs: " + std::to_string(mr.value("matched_pairs", 0)) +
               ", dropped cases: " + std::to_string(mr.value("dropped_cases", 0)) + "\n";
        if (mr.contains("chi_square") && mr["chi_square"].contains("chi2")) {
            out += "  chi-square: " + format_double(mr["chi_square"]["chi2"].get<double>()) +
                   " (log10 p = " + format_double(mr["chi_square"]["log10_p"].get<double>()) +
                   ")\n";
        }
        out += "  standardized bias (before -> after):\n";
        for (const auto& line : split(read_file(artifact_dir / "bias_table.csv"), '\n')) {
            const auto t = trim(line);
            if (t.empty() || t.rfind("covariate", 0) == 0) continue;
            const auto f = split(t, ',');
            out += "    " + f[0] + ": " + f[1] + "% -> " + f[2] + "%\n";
        }
    }

    out += "\n[metrics]\n";
    if (stage_status("evaluate") == "disabled") {
        out += "  evaluate stage disabled; no metrics report\n";
    } else {
        const auto metrics =
            nlohmann::ordered_json::parse(read_file(artifact_dir / "metrics.json"));
        out += "  auc: " + format_double(metrics.value("auc", 0.0)) + "\n";
        if (metrics.contains("auc_holdout"))
            out += "  auc (holdout): " + format_double(metrics["auc_holdout"].get<double>()) +
                   "\n";
        out += "  sparsity: " + format_double(metrics.value("sparsity", 0.0)) + "\n";
        out += "  overlap: " + format_double(metrics.value("overlap", 0.0)) + "\n";
        out += "  mse: " + format_double(metrics.value("mse", 0.0)) + "\n";
    }

    out += "\n[significant phenotypes]\n";
    if (stage_status("evaluate") == "disabled") {
        out += "  evaluate stage disabled; no significance table\n";
    } else {
        std::size_t significant = 0, total = 0;
        for (const auto& line : split(read_file(artifact_dir / "significance.csv"), '\n')) {
            const auto t = trim(line);
            if (t.empty() || t.rfind("phenotype", 0) == 0) continue;
            ++total;
            if (parse_double(split(t, ',')[4]) < 0.05) ++significant;
        }
        out += "  " + std::to_string(significant) + " of " + std::to_string(total) +
               " phenotypes with p < 0.05\n";
    }

    out += "\n[exported graphs]\n";
    if (stage_status("export") == "disabled") {
        out += "  export stage disabled; no graphs\n";
    } else {
        const auto index =
            nlohmann::ordered_json::parse(read_file(artifact_dir / "graphs/index.json"));
        for (const auto& f : index["files"])
            out += "  " + (artifact_dir / f.get<std::string>()).string() + "\n";
        if (index["files"].empty()) out += "  (none: no phenotype passed the alpha cut)\n";
    }

    out += "\n[stages]\n";
    for (const char* name : {"cohort", "match", "embed", "tensorize", "fit", "evaluate",
                             "export"})
        out += std::string("  ") + name + ": " + stage_status(name) + "\n";
    return out;
}

}  // namespace phenotyper

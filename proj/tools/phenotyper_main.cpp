#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>

#include "phenotyper/cohort_io.hpp"
#include "phenotyper/pipeline.hpp"

namespace fs = std::filesystem;
using namespace phenotyper;

namespace {

Cohort load_any(const fs::path& p, double min_prevalence) {
    return load_cohort(p, cohort_format_from_path(p), min_prevalence);
}

void cmd_synth(const SynthConfig& cfg, const fs::path& out) {
    const Cohort cohort = generate_synthetic(cfg);
    save_cohort(cohort, out, cohort_format_from_path(out));
    std::cout << "wrote " << out.string() << " (I=" << cohort.patient_count()
              << ", J=" << cohort.entity_count() << ")\n";
}

void cmd_match(const fs::path& cases_path, const fs::path& controls_path, const fs::path& out,
               double l2, double caliper_sd, double bias_budget) {
    const Cohort case_cohort = load_any(cases_path, 0.0);
    const Cohort control_cohort = load_any(controls_path, 0.0);

    std::vector<Covariates> covs;
    std::vector<int> exposure;
    for (const auto& p : case_cohort.patients) {
        covs.push_back(p.covariates);
        exposure.push_back(1);
    }
    for (const auto& p : control_cohort.patients) {
        covs.push_back(p.covariates);
        exposure.push_back(0);
    }
    const PropensityModel pm = fit_propensity(covs, exposure, l2);

    std::vector<MatchCandidate> cases, controls;
    std::vector<double> logits;
    for (const auto& p : case_cohort.patients) {
        const double s = pm.score(p.covariates);
        logits.push_back(std::log(s / (1.0 - s)));
        cases.push_back({p.id, s, p.covariates});
    }
    for (const auto& p : control_cohort.patients) {
        const double s = pm.score(p.covariates);
        logits.push_back(std::log(s / (1.0 - s)));
        controls.push_back({p.id, s, p.covariates});
    }
    const double caliper = std::max(caliper_sd * std::sqrt(population_variance(logits)), 1e-12);
    const MatchResult res = match_cohort(cases, controls, caliper, bias_budget);

    std::vector<Covariates> case_covs, control_covs;
    for (const auto& c : cases) case_covs.push_back(c.covariates);
    for (const auto& c : controls) control_covs.push_back(c.covariates);
    const auto before = covariate_bias_table(case_covs, control_covs);

    fs::create_directories(out);
    std::string csv = "covariate,before_pct,after_pct\n";
    for (std::size_t i = 0; i < before.size(); ++i) {
        const double after =
            res.standardized_biases.empty() ? 0.0 : res.standardized_biases[i].second;
        csv += before[i].first + ',' + format_double(before[i].second) + ',' +
               format_double(after) + '\n';
    }
    write_file(out / "bias_table.csv", csv);

    nlohmann::ordered_json j;
    j["propensity_accuracy"] = pm.accuracy;
    j["caliper_initial"] = caliper;
    j["caliper_final"] = res.final_caliper;
    j["rounds"] = res.rounds;
    j["matched_pairs"] = res.pairs.size();
    j["dropped_cases"] = res.dropped_cases;
    j["diagnostic"] = res.diagnostic;
    j["pairs"] = res.pairs;
    auto biases = nlohmann::ordered_json::object();
    for (const auto& [name, bias] : res.standardized_biases) biases[name] = bias;
    j["standardized_bias_after"] = biases;
    write_file(out / "match_result.json", j.dump(2) + "\n");
    std::cout << "matched " << res.pairs.size() << " pairs (" << res.dropped_cases
              << " cases dropped); results in " << out.string() << "\n";
}

void cmd_embed(const fs::path& cohort_path, const fs::path& out_embeddings,
               const fs::path& out_similarity, SgnsConfig cfg, const std::string& source) {
    const Cohort cohort = load_any(cohort_path, 0.0);
    const auto pairs = build_pairs(cohort);
    const EmbeddingTable table = train_skipgram(pairs, cohort.vocabulary, cfg);
    write_file(out_embeddings, labeled_matrix_to_csv(table.input_vectors,
                                                     cohort.vocabulary.codes));
    SimilaritySource src = SimilaritySource::InputVectors;
    if (source == "output") src = SimilaritySource::OutputVectors;
    if (source == "average") src = SimilaritySource::Average;
    save_matrix(similarity_matrix(table, src), out_similarity);
    std::cout << "wrote " << out_embeddings.string() << " and " << out_similarity.string()
              << "\n";
}

void cmd_tensorize(const fs::path& cohort_path, const fs::path& out, const std::string& mode,
                   bool drop_self_loops) {
    const Cohort cohort = load_any(cohort_path, 0.0);
    const TensorMode m = mode == "counts" ? TensorMode::Counts : TensorMode::PatientNormalized;
    const TransitionTensor tensor = build_transition_tensor(cohort, m, !drop_self_loops);
    save_tensor(tensor, cohort.vocabulary, out);
    std::cout << "wrote " << out.string() << " (" << tensor.entries.size() << " entries)\n";
}

void cmd_fit(const fs::path& cohort_path, const fs::path& tensor_path,
             const fs::path& similarity_path, const fs::path& out, const HyperParams& hyper) {
    const Cohort cohort = load_any(cohort_path, 0.0);
    const TransitionTensor tensor =
        load_tensor(tensor_path, cohort.vocabulary, cohort.patient_count());
    const Eigen::MatrixXd S = load_matrix(similarity_path);
    std::vector<int> labels;
    for (const auto& p : cohort.patients) labels.push_back(p.label);
    const FitResult res = fit(tensor, S, labels, hyper);
    fs::create_directories(out);
    save_matrix(res.model.A, out / "A.csv");
    save_matrix(res.model.B, out / "B.csv");
    save_matrix(res.model.C, out / "C.csv");
    save_matrix(res.model.theta, out / "theta.csv");
    std::string trace = "iteration,total,tensor,supervision,l1,similarity\n";
    for (std::size_t i = 0; i < res.trace.total.size(); ++i)
        trace += std::to_string(i + 1) + ',' + format_double(res.trace.total[i]) + ',' +
                 format_double(res.trace.tensor_term[i]) + ',' +
                 format_double(res.trace.supervision_term[i]) + ',' +
                 format_double(res.trace.l1_term[i]) + ',' +
                 format_double(res.trace.similarity_term[i]) + '\n';
    write_file(out / "trace.csv", trace);
    std::cout << "fit finished after " << res.trace.iterations << " iterations (total "
              << format_double(res.trace.total.back()) << "); model in " << out.string()
              << "\n";
}

void cmd_evaluate(const fs::path& cohort_path, const fs::path& tensor_path,
                  const fs::path& model_dir, const fs::path& out) {
    const Cohort cohort = load_any(cohort_path, 0.0);
    const TransitionTensor tensor =
        load_tensor(tensor_path, cohort.vocabulary, cohort.patient_count());
    FactorModel model;
    model.A = load_matrix(model_dir / "A.csv");
    model.B = load_matrix(model_dir / "B.csv");
    model.C = load_matrix(model_dir / "C.csv");
    model.theta = load_matrix(model_dir / "theta.csv");
    if (model.A.rows() != static_cast<Eigen::Index>(cohort.patient_count()))
        throw Error("evaluate: model A row count does not match the cohort");
    std::vector<int> labels;
    for (const auto& p : cohort.patients) labels.push_back(p.label);

    const Eigen::VectorXd scores = predict(model.A, model.theta);
    nlohmann::ordered_json j;
    j["auc"] = auc(std::span<const double>(scores.data(),
                                           static_cast<std::size_t>(scores.size())),
                   labels);
    j["sparsity"] = gini_sparsity(model);
    j["overlap"] = model.rank() >= 2 ? overlap(model) : 1.0;
    j["mse"] = mse(model, tensor);
    fs::create_directories(out);
    write_file(out / "metrics.json", j.dump(2) + "\n");

    const PhenotypeSignificance sig = logit_significance(model.A, labels);
    std::string csv = "phenotype,coeff,std_err,z,p\n";
    for (std::size_t r = 0; r < sig.coefficients.size(); ++r)
        csv += 'x' + std::to_string(r + 1) + ',' + format_double(sig.coefficients[r]) + ',' +
               format_double(sig.std_errors[r]) + ',' + format_double(sig.z_values[r]) + ',' +
               format_double(sig.p_values[r]) + '\n';
    write_file(out / "significance.csv", csv);
    std::cout << "wrote " << (out / "metrics.json").string() << " and "
              << (out / "significance.csv").string() << "\n";
}

void cmd_export(const fs::path& cohort_path, const fs::path& tensor_path,
                const fs::path& model_dir, const fs::path& significance_path,
                const fs::path& out, double alpha, double epsilon, std::size_t top_k,
                const std::string& format) {
    const Cohort cohort = load_any(cohort_path, 0.0);
    const TransitionTensor tensor =
        load_tensor(tensor_path, cohort.vocabulary, cohort.patient_count());
    const Eigen::MatrixXd B = load_matrix(model_dir / "B.csv");
    const Eigen::MatrixXd C = load_matrix(model_dir / "C.csv");
    const Eigen::MatrixXd M = mean_transition_matrix(tensor);

    const auto lines = split(read_file(significance_path), '\n');
    fs::create_directories(out);
    std::size_t exported = 0;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto t = trim(lines[i]);
        if (t.empty()) continue;
        const auto f = split(t, ',');
        if (parse_double(f[4]) >= alpha) continue;
        EdgeScoreOptions opt;
        opt.epsilon = epsilon;
        opt.top_k = top_k;
        opt.coefficient = parse_double(f[1]);
        const int r = static_cast<int>(i) - 1;
        const PhenotypeGraph g = edge_scores(r, B, C, M, cohort.vocabulary, opt);
        const std::string stem = "phenotype_" + std::to_string(r);
        if (format == "dot" || format == "both") write_file(out / (stem + ".dot"), graph_to_dot(g));
        if (format == "json" || format == "both")
            write_file(out / (stem + ".json"), graph_to_json(g).dump(2) + "\n");
        ++exported;
    }
    std::cout << "exported " << exported << " phenotype graphs to " << out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"discriminative temporal phenotyping from longitudinal coded-event data"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
    SynthConfig synth_cfg;
    std::string synth_out = "cohort.jsonl";
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "output cohort file (.jsonl or .csv)");
    synth->add_option("--patients", synth_cfg.patients, "number of patients");
    synth->add_option("--entities", synth_cfg.entities, "vocabulary size");
    synth->add_option("--rank", synth_cfg.rank, "number of planted phenotypes");
    synth->add_option("--visits-min", synth_cfg.visits_min, "min visits per patient");
    synth->add_option("--visits-max", synth_cfg.visits_max, "max visits per patient");
    synth->add_option("--entities-per-visit-min", synth_cfg.entities_per_visit_min, "");
    synth->add_option("--entities-per-visit-max", synth_cfg.entities_per_visit_max, "");
    synth->add_option("--noise-rate", synth_cfg.noise_rate, "uniform entity noise rate");
    synth->add_option("--label-weight", synth_cfg.label_weight, "planted label logit scale");
    synth->add_option("--label-temperature", synth_cfg.label_temperature, "");
    synth->add_option("--exposure-effect", synth_cfg.exposure_effect,
                      "extra label logit for stroke patients");
    synth->add_option("--seed", synth_seed, "generator seed");

    // match
    auto* match = app.add_subcommand("match", "propensity-score matching + chi-square inputs");
    std::string match_cases, match_controls, match_out = "match_out";
    double match_l2 = 1.0, match_caliper_sd = 0.2, match_budget = 5.0;
    match->add_option("--cases", match_cases, "case cohort (JSONL/CSV)")->required();
    match->add_option("--controls", match_controls, "control cohort (JSONL/CSV)")->required();
    match->add_option("--out", match_out, "output directory");
    match->add_option("--l2", match_l2, "propensity l2 penalty");
    match->add_option("--caliper-sd", match_caliper_sd, "caliper as fraction of sd(logit)");
    match->add_option("--bias-budget", match_budget, "standardized bias budget (percent)");

    // embed
    auto* embed = app.add_subcommand("embed", "train co-occurrence embeddings");
    std::string embed_cohort, embed_out = "embeddings.csv", embed_sim = "similarity.csv";
    std::string embed_source = "input";
    SgnsConfig embed_cfg;
    embed->add_option("--cohort", embed_cohort, "cohort file")->required();
    embed->add_option("--out-embeddings", embed_out, "embedding CSV output");
    embed->add_option("--out-similarity", embed_sim, "similarity matrix CSV output");
    embed->add_option("-d,--dimension", embed_cfg.dimension, "embedding dimension");
    embed->add_option("--negatives", embed_cfg.negatives, "negative samples per pair");
    embed->add_option("--epochs", embed_cfg.epochs, "training epochs");
    embed->add_option("--learning-rate", embed_cfg.learning_rate, "SGD learning rate");
    embed->add_option("--noise-exponent", embed_cfg.noise_exponent, "unigram power");
    embed->add_option("--seed", embed_cfg.seed, "training seed");
    embed->add_option("--similarity-source", embed_source,
                      "vectors feeding S: input|output|average");

    // tensorize
    auto* tensorize = app.add_subcommand("tensorize", "build the transition tensor");
    std::string tz_cohort, tz_out = "tensor.csv", tz_mode = "patient_normalized";
    bool tz_drop_self = false;
    tensorize->add_option("--cohort", tz_cohort, "cohort file")->required();
    tensorize->add_option("--out", tz_out, "tensor CSV output");
    tensorize->add_option("--mode", tz_mode, "counts | patient_normalized");
    tensorize->add_flag("--drop-self-loops", tz_drop_self, "drop from==to transitions");

    // fit
    auto* fitc = app.add_subcommand("fit", "coupled non-negative CP factorization");
    std::string fit_cohort, fit_tensor, fit_sim, fit_out = "model";
    HyperParams fit_hyper;
    std::string fit_init = "structured";
    fitc->add_option("--cohort", fit_cohort, "cohort file")->required();
    fitc->add_option("--tensor", fit_tensor, "tensor CSV")->required();
    fitc->add_option("--similarity", fit_sim, "similarity CSV")->required();
    fitc->add_option("--out", fit_out, "model output directory");
    fitc->add_option("--rank", fit_hyper.rank, "number of phenotypes R");
    fitc->add_option("--mu", fit_hyper.mu, "supervision weight");
    fitc->add_option("--lambda", fit_hyper.lambda, "l1 weight");
    fitc->add_option("--gamma", fit_hyper.gamma, "similarity coupling weight");
    fitc->add_option("--seed", fit_hyper.seed, "fit seed");
    fitc->add_option("--max-iters", fit_hyper.max_iters, "ADAM iteration cap");
    fitc->add_option("--learning-rate", fit_hyper.learning_rate, "ADAM step size");
    fitc->add_option("--dropout", fit_hyper.dropout_rate, "theta dropout rate");
    fitc->add_option("--init", fit_init, "structured | uniform");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "metrics + phenotype significance");
    std::string ev_cohort, ev_tensor, ev_model, ev_out = "evaluation";
    evaluate->add_option("--cohort", ev_cohort, "cohort file")->required();
    evaluate->add_option("--tensor", ev_tensor, "tensor CSV")->required();
    evaluate->add_option("--model", ev_model, "model directory")->required();
    evaluate->add_option("--out", ev_out, "output directory");

    // export
    auto* exportc = app.add_subcommand("export", "edge-scored phenotype graphs");
    std::string ex_cohort, ex_tensor, ex_model, ex_sig, ex_out = "graphs", ex_format = "dot";
    double ex_alpha = 0.05, ex_epsilon = 16.0;
    std::size_t ex_topk = 10;
    exportc->add_option("--cohort", ex_cohort, "cohort file")->required();
    exportc->add_option("--tensor", ex_tensor, "tensor CSV")->required();
    exportc->add_option("--model", ex_model, "model directory")->required();
    exportc->add_option("--significance", ex_sig, "significance CSV")->required();
    exportc->add_option("--out", ex_out, "output directory");
    exportc->add_option("--alpha", ex_alpha, "p-value cut for export");
    exportc->add_option("--epsilon", ex_epsilon, "edge score epsilon");
    exportc->add_option("--top-k", ex_topk, "edges kept per phenotype");
    exportc->add_option("--format", ex_format, "dot | json | both");

    // run
    auto* runc = app.add_subcommand("run", "run the full pipeline from a TOML config");
    std::string run_config;
    std::string run_out_override;
    std::int64_t run_seed_override = -1;
    runc->add_option("--config", run_config, "pipeline TOML config")->required();
    runc->add_option("--out", run_out_override, "override out_dir");
    runc->add_option("--seed", run_seed_override, "override global seed");

    // report
    auto* reportc = app.add_subcommand("report", "summarize a pipeline artifact directory");
    std::string report_dir;
    reportc->add_option("--dir", report_dir, "artifact directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            synth_cfg.seed = synth_seed;
            cmd_synth(synth_cfg, synth_out);
        } else if (match->parsed()) {
            cmd_match(match_cases, match_controls, match_out, match_l2, match_caliper_sd,
                      match_budget);
        } else if (embed->parsed()) {
            cmd_embed(embed_cohort, embed_out, embed_sim, embed_cfg, embed_source);
        } else if (tensorize->parsed()) {
            if (tz_mode != "counts" && tz_mode != "patient_normalized")
                throw ConfigError("tensorize: --mode must be counts or patient_normalized");
            cmd_tensorize(tz_cohort, tz_out, tz_mode, tz_drop_self);
        } else if (fitc->parsed()) {
            if (fit_init == "uniform")
                fit_hyper.init = FactorInit::Uniform;
            else if (fit_init == "structured")
                fit_hyper.init = FactorInit::Structured;
            else
                throw ConfigError("fit: --init must be structured or uniform");
            cmd_fit(fit_cohort, fit_tensor, fit_sim, fit_out, fit_hyper);
        } else if (evaluate->parsed()) {
            cmd_evaluate(ev_cohort, ev_tensor, ev_model, ev_out);
        } else if (exportc->parsed()) {
            cmd_export(ex_cohort, ex_tensor, ex_model, ex_sig, ex_out, ex_alpha, ex_epsilon,
                       ex_topk, ex_format);
        } else if (runc->parsed()) {
            PipelineConfig cfg = PipelineConfig::from_toml(parse_toml_file(run_config));
            if (!run_out_override.empty()) cfg.out_dir = run_out_override;
            if (run_seed_override >= 0) {
                cfg.seed = static_cast<std::uint64_t>(run_seed_override);
                cfg.synth.seed = stage_seed(cfg.seed, "synth");
                cfg.embed.seed = stage_seed(cfg.seed, "embed");
                cfg.fit.seed = stage_seed(cfg.seed, "fit");
            }
            return run_pipeline(cfg);
        } else if (reportc->parsed()) {
            std::cout << report(report_dir);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

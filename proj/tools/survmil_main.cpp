// survmil: survival prediction on patch-feature bags and tabular covariates.
//
// Subcommands: synth (synthetic dataset generation), train, eval, cv
// (k-fold cross-validation with KM stratification), km (render stratification
// curves from a predictions file). Results go to files; progress and
// summaries go to stderr. Exit codes: 0 success, 1 validation error,
// 2 runtime failure.

#include "survmil/checkpoint.hpp"
#include "survmil/evalcv.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

namespace fs = std::filesystem;
using namespace survmil;

namespace {

struct CommonTrainFlags {
    std::string manifest;
    std::string model = "amil";
    std::string out_dir;
    std::uint64_t seed = 0;
    int epochs = 200;
    double learning_rate = 1e-4;
    double l1_lambda = 1e-5;
    int threads = 0;
    bool exclude_missing = false;
};

void add_train_flags(CLI::App* cmd, CommonTrainFlags& f, bool with_model = true) {
    cmd->add_option("--manifest", f.manifest, "Manifest CSV path")->required();
    if (with_model)
        cmd->add_option("--model", f.model,
                        "Model kind: amil|amil-per-core|maxpool|deepsurv|cox|rsf");
    cmd->add_option("--out", f.out_dir, "Output directory")->required();
    cmd->add_option("--seed", f.seed, "Root seed; all derived streams flow from it");
    cmd->add_option("--epochs", f.epochs, "Training epochs (network models)");
    cmd->add_option("--lr", f.learning_rate, "Adam learning rate");
    cmd->add_option("--l1", f.l1_lambda, "L1 regularization weight");
    cmd->add_option("--threads", f.threads, "Worker cap, 0 = all cores");
    cmd->add_flag("--exclude-missing", f.exclude_missing,
                  "Skip manifest rows with missing values instead of failing");
}

bool needs_bags(ModelKind kind) {
    return kind == ModelKind::amil || kind == ModelKind::amil_per_core ||
           kind == ModelKind::maxpool;
}

void write_loss_trace(const fs::path& path, const std::vector<double>& trace,
                      const char* index_name, const char* value_name) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << index_name << ',' << value_name << "\n";
    char buf[40];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.12g", trace[i]);
        out << i << ',' << buf << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

int cmd_synth(const SynthConfig& cfg, const std::string& out_dir) {
    const SynthResult result = generate_synthetic(cfg, out_dir);
    const auto& cohort = result.dataset.cohort;
    const std::size_t events = cohort.n_events();
    const double censored_share =
        1.0 - static_cast<double>(events) / static_cast<double>(cohort.size());
    std::cerr << "wrote " << result.manifest_path.string() << ": n=" << cohort.size()
              << " events=" << events << " censored_share=" << censored_share << "\n";
    return 0;
}

int cmd_train(const CommonTrainFlags& f) {
    const ModelKind kind = parse_model_kind(f.model);
    if (f.epochs < 1)
        throw std::invalid_argument("--epochs must be >= 1");
    LoadOptions load_opts;
    load_opts.exclude_missing = f.exclude_missing;
    const Dataset dataset = load_dataset(f.manifest, needs_bags(kind), load_opts);

    fs::create_directories(f.out_dir);
    const fs::path ckpt_path = fs::path(f.out_dir) / "model.ckpt";
    std::ofstream ckpt(ckpt_path, std::ios::binary);
    if (!ckpt) throw std::runtime_error("cannot write " + ckpt_path.string());

    TrainConfig train_cfg;
    train_cfg.model_kind = kind;
    train_cfg.epochs = f.epochs;
    train_cfg.learning_rate = f.learning_rate;
    train_cfg.l1_lambda = f.l1_lambda;
    train_cfg.seed = f.seed;

    CheckpointMeta meta;
    meta.kind = kind;
    meta.seed = f.seed;

    switch (kind) {
        case ModelKind::amil:
        case ModelKind::maxpool: {
            AmilConfig arch;
            arch.feature_dim = dataset.feature_dim();
            AmilParams params(arch, f.seed);
            auto bags = dataset.merged_bags();
            const TrainResult result = train_amil(params, bags, dataset.cohort, train_cfg);
            meta.feature_dim = static_cast<std::uint32_t>(arch.feature_dim);
            meta.epoch = static_cast<std::uint32_t>(f.epochs);
            write_checkpoint_header(ckpt, meta);
            const auto weights = params.weight_matrices(kind);
            save_weights(ckpt, weights);
            write_loss_trace(fs::path(f.out_dir) / "loss_trace.csv", result.loss_trace, "epoch",
                             "loss");
            std::cerr << "trained " << to_string(kind) << ": " << f.epochs
                      << " epochs, final loss " << result.loss_trace.back() << "\n";
            break;
        }
        case ModelKind::amil_per_core: {
            AmilConfig arch;
            arch.feature_dim = dataset.feature_dim();
            AmilParams params(arch, f.seed);
            PerCoreExpansion expansion = expand_per_core(dataset.cores, dataset.cohort);
            const TrainResult result =
                train_amil(params, expansion.bags, expansion.cohort, train_cfg);
            meta.feature_dim = static_cast<std::uint32_t>(arch.feature_dim);
            meta.epoch = static_cast<std::uint32_t>(f.epochs);
            write_checkpoint_header(ckpt, meta);
            const auto weights = params.weight_matrices(kind);
            save_weights(ckpt, weights);
            write_loss_trace(fs::path(f.out_dir) / "loss_trace.csv", result.loss_trace, "epoch",
                             "loss");
            std::cerr << "trained amil-per-core on " << expansion.bags.size()
                      << " core bags, final loss " << result.loss_trace.back() << "\n";
            break;
        }
        case ModelKind::deepsurv: {
            MlpConfig mlp_cfg;
            mlp_cfg.in_dim = dataset.cohort.covariate_dim();
            MlpParams params(mlp_cfg, f.seed);
            const TrainResult result = train_mlp(params, dataset.cohort, train_cfg);
            meta.feature_dim = static_cast<std::uint32_t>(mlp_cfg.in_dim);
            meta.epoch = static_cast<std::uint32_t>(f.epochs);
            write_checkpoint_header(ckpt, meta);
            Matrix center(1, mlp_cfg.in_dim), scale(1, mlp_cfg.in_dim);
            center.data = params.center;
            scale.data = params.scale;
            auto weights = params.weight_matrices();
            weights.push_back(&center);
            weights.push_back(&scale);
            save_weights(ckpt, weights);
            write_loss_trace(fs::path(f.out_dir) / "loss_trace.csv", result.loss_trace, "epoch",
                             "loss");
            std::cerr << "trained deepsurv: " << f.epochs << " epochs, final loss "
                      << result.loss_trace.back() << "\n";
            break;
        }
        case ModelKind::cox: {
            const CoxModel model = fit_cox(dataset.cohort);
            const std::size_t p = model.beta.size();
            meta.feature_dim = static_cast<std::uint32_t>(p);
            meta.epoch = static_cast<std::uint32_t>(model.n_iterations);
            write_checkpoint_header(ckpt, meta);
            Matrix beta(1, p), center(1, p), scale(1, p);
            beta.data = model.beta;
            center.data = model.center;
            scale.data = model.scale;
            const Matrix* weights[] = {&beta, &center, &scale};
            save_weights(ckpt, weights);
            write_loss_trace(fs::path(f.out_dir) / "loss_trace.csv", model.ll_trace, "iteration",
                             "log_likelihood");
            std::cerr << "fitted cox: " << model.n_iterations << " iterations, loglik "
                      << model.log_likelihood << (model.converged ? "" : " (not converged)")
                      << "\n";
            break;
        }
        case ModelKind::rsf: {
            RsfConfig rsf_cfg;
            rsf_cfg.seed = f.seed;
            rsf_cfg.threads = f.threads;
            const Forest forest = fit_forest(dataset.cohort, rsf_cfg);
            meta.feature_dim = static_cast<std::uint32_t>(dataset.cohort.covariate_dim());
            write_checkpoint_header(ckpt, meta);
            save_forest(ckpt, forest);
            std::cerr << "fitted rsf: " << forest.trees.size() << " trees\n";
            break;
        }
    }
    if (!ckpt) throw std::runtime_error("write failed: " + ckpt_path.string());
    std::cerr << "wrote " << ckpt_path.string() << "\n";
    return 0;
}

struct EvalFlags {
    std::string manifest;
    std::string checkpoint;
    std::string out_dir;
    std::string attention_dir;
    bool exclude_missing = false;
};

int cmd_eval(const EvalFlags& f) {
    std::ifstream ckpt(f.checkpoint, std::ios::binary);
    if (!ckpt) throw std::invalid_argument("cannot open checkpoint: " + f.checkpoint);
    const CheckpointMeta meta = read_checkpoint_header(ckpt);

    LoadOptions load_opts;
    load_opts.exclude_missing = f.exclude_missing;
    const Dataset dataset = load_dataset(f.manifest, needs_bags(meta.kind), load_opts);
    const Cohort& cohort = dataset.cohort;

    std::vector<double> risks;
    std::map<std::string, std::vector<double>> attention_by_bag;

    switch (meta.kind) {
        case ModelKind::amil:
        case ModelKind::maxpool: {
            AmilConfig arch;
            arch.feature_dim = meta.feature_dim;
            AmilParams params(arch, 0);
            auto refs = params.tensors(meta.kind);
            std::vector<Matrix*> values;
            for (auto& r : refs) values.push_back(r.value);
            load_weights(ckpt, values);
            auto bags = dataset.merged_bags();
            for (FeatureBag& bag : bags) {
                if (meta.kind == ModelKind::amil) {
                    const AmilOutput out = amil_forward(params, bag);
                    risks.push_back(out.log_risk);
                    attention_by_bag[bag.patient_id] = out.attention;
                } else {
                    risks.push_back(maxpool_forward(params, bag));
                }
            }
            break;
        }
        case ModelKind::amil_per_core: {
            AmilConfig arch;
            arch.feature_dim = meta.feature_dim;
            AmilParams params(arch, 0);
            auto refs = params.tensors(meta.kind);
            std::vector<Matrix*> values;
            for (auto& r : refs) values.push_back(r.value);
            load_weights(ckpt, values);
            PerCoreExpansion expansion = expand_per_core(dataset.cores, cohort);
            std::vector<double> core_risks;
            for (FeatureBag& bag : expansion.bags) {
                const AmilOutput out = amil_forward(params, bag);
                core_risks.push_back(out.log_risk);
                attention_by_bag[bag.patient_id] = out.attention;
            }
            risks = aggregate_per_core(expansion, core_risks, cohort).values();
            break;
        }
        case ModelKind::deepsurv: {
            MlpConfig mlp_cfg;
            mlp_cfg.in_dim = meta.feature_dim;
            MlpParams params(mlp_cfg, 0);
            Matrix center(1, mlp_cfg.in_dim), scale(1, mlp_cfg.in_dim);
            auto refs = params.tensors();
            std::vector<Matrix*> values;
            for (auto& r : refs) values.push_back(r.value);
            values.push_back(&center);
            values.push_back(&scale);
            load_weights(ckpt, values);
            params.center = center.data;
            params.scale = scale.data;
            risks = mlp_forward(params, covariate_matrix(cohort));
            break;
        }
        case ModelKind::cox: {
            Matrix beta(1, meta.feature_dim), center(1, meta.feature_dim),
                scale(1, meta.feature_dim);
            Matrix* values[] = {&beta, &center, &scale};
            load_weights(ckpt, values);
            CoxModel model;
            model.beta = beta.data;
            model.center = center.data;
            model.scale = scale.data;
            risks = predict_risk(model, covariate_matrix(cohort));
            break;
        }
        case ModelKind::rsf: {
            const Forest forest = load_forest(ckpt);
            risks = predict_mortality(forest, covariate_matrix(cohort));
            break;
        }
    }

    if (!f.attention_dir.empty()) {
        if (attention_by_bag.empty())
            throw std::invalid_argument("--attention-dir: checkpoint kind " +
                                        to_string(meta.kind) + " has no attention weights");
        fs::create_directories(f.attention_dir);
        for (const auto& [bag_id, weights] : attention_by_bag) {
            std::string name = bag_id;
            std::replace(name.begin(), name.end(), '#', '_');
            std::ofstream out(fs::path(f.attention_dir) / (name + ".csv"));
            if (!out) throw std::runtime_error("cannot write attention csv for " + bag_id);
            out << "patch_index,weight\n";
            char buf[40];
            for (std::size_t i = 0; i < weights.size(); ++i) {
                std::snprintf(buf, sizeof(buf), "%.12g", weights[i]);
                out << i << ',' << buf << "\n";
            }
        }
    }

    fs::create_directories(f.out_dir);
    {
        std::ofstream out(fs::path(f.out_dir) / "predictions.csv");
        if (!out) throw std::runtime_error("cannot write predictions.csv");
        out << "patient_id,log_risk\n";
        char buf[40];
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.12g", risks[i]);
            out << cohort.records[i].patient_id << ',' << buf << "\n";
        }
    }
    {
        const CIndexResult c = c_index(cohort.times(), cohort.events(), risks);
        nlohmann::json j;
        j["model_kind"] = to_string(meta.kind);
        j["n"] = cohort.size();
        j["n_events"] = cohort.n_events();
        j["c_index"] = c.c_index;
        j["concordant"] = c.concordant;
        j["discordant"] = c.discordant;
        j["tied_risk"] = c.tied_risk;
        j["permissible"] = c.permissible;
        std::ofstream out(fs::path(f.out_dir) / "eval.json");
        if (!out) throw std::runtime_error("cannot write eval.json");
        out << j.dump(2) << "\n";
        std::cerr << "eval " << to_string(meta.kind) << ": C-index " << c.c_index << " over "
                  << c.permissible << " pairs\n";
    }
    return 0;
}

int cmd_cv(const CommonTrainFlags& f, int k, bool stratify_folds, bool pooled_c) {
    const ModelKind kind = parse_model_kind(f.model);
    if (f.epochs < 1) throw std::invalid_argument("--epochs must be >= 1");
    if (k < 2) throw std::invalid_argument("--k must be >= 2");
    LoadOptions load_opts;
    load_opts.exclude_missing = f.exclude_missing;
    const Dataset dataset = load_dataset(f.manifest, needs_bags(kind), load_opts);

    CvConfig cfg;
    cfg.k = k;
    cfg.seed = f.seed;
    cfg.threads = f.threads;
    cfg.stratify_folds = stratify_folds;
    cfg.report_pooled_c = pooled_c;
    cfg.train.epochs = f.epochs;
    cfg.train.learning_rate = f.learning_rate;
    cfg.train.l1_lambda = f.l1_lambda;
    cfg.rsf.threads = f.threads;

    const CvReport report = run_cv(dataset, kind, cfg);
    emit_report(report, f.out_dir);
    if (report.degenerate_predictions)
        std::cerr << "warning: degenerate predictor, all pooled risks tied at the median\n";
    std::cerr << "cv " << to_string(kind) << " k=" << report.k << ": C " << report.c_mean
              << " +/- " << report.c_std << " (median " << report.c_median << "), logrank p "
              << report.logrank.p_value << ", invalid folds " << report.invalid_folds << "\n";
    std::cerr << "wrote report to " << f.out_dir << "\n";
    return 0;
}

struct KmFlags {
    std::string manifest;
    std::string predictions;
    std::string out_dir;
    bool exclude_missing = false;
};

int cmd_km(const KmFlags& f) {
    LoadOptions load_opts;
    load_opts.exclude_missing = f.exclude_missing;
    const LoadResult loaded = load_manifest(f.manifest, load_opts);
    const Cohort& cohort = loaded.cohort;

    std::ifstream in(f.predictions);
    if (!in) throw std::invalid_argument("cannot open predictions: " + f.predictions);
    std::string line;
    if (!std::getline(in, line) || (line != "patient_id,log_risk" &&
                                    line != "patient_id,log_risk\r"))
        throw std::invalid_argument("predictions file must start with 'patient_id,log_risk'");
    std::map<std::string, double> risk_by_id;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::invalid_argument("predictions row " + std::to_string(line_no) +
                                        ": expected patient_id,log_risk");
        const std::string id = line.substr(0, comma);
        if (!risk_by_id.emplace(id, std::stod(line.substr(comma + 1))).second)
            throw std::invalid_argument("predictions row " + std::to_string(line_no) +
                                        ": duplicate patient_id " + id);
    }

    std::vector<double> risks;
    risks.reserve(cohort.size());
    for (const auto& rec : cohort.records) {
        const auto it = risk_by_id.find(rec.patient_id);
        if (it == risk_by_id.end())
            throw std::invalid_argument("predictions missing patient " + rec.patient_id);
        risks.push_back(it->second);
    }

    const RiskScores scores = RiskScores::aligned(cohort, risks);
    const StratifyResult strat = stratify_and_compare(scores, cohort);
    if (strat.degenerate)
        std::cerr << "warning: all risks tied, stratification is degenerate\n";

    fs::create_directories(f.out_dir);
    auto write_curve = [&](const char* name, const KmCurve& curve) {
        std::ofstream out(fs::path(f.out_dir) / name);
        if (!out) throw std::runtime_error(std::string("cannot write ") + name);
        out << "time,survival,at_risk,events\n";
        char buf[40];
        for (const KmPoint& p : curve.points) {
            std::snprintf(buf, sizeof(buf), "%.12g", p.time);
            out << buf << ',';
            std::snprintf(buf, sizeof(buf), "%.12g", p.survival);
            out << buf << ',' << p.n_at_risk << ',' << p.n_events << "\n";
        }
    };
    write_curve("km_high.csv", strat.high);
    write_curve("km_low.csv", strat.low);
    {
        std::ofstream out(fs::path(f.out_dir) / "km.svg");
        if (!out) throw std::runtime_error("cannot write km.svg");
        out << render_km_svg(strat.high, strat.low, strat.logrank.p_value);
    }
    std::cerr << "km: high " << strat.n_high << " / low " << strat.n_low << ", logrank p "
              << strat.logrank.p_value << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Survival prediction with attention-based multiple instance learning "
                 "and tabular baselines"};
    app.require_subcommand(1);

    // synth
    SynthConfig synth_cfg;
    std::string synth_out;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--n", synth_cfg.n_patients, "Number of patients");
    synth->add_option("--cores", synth_cfg.cores_per_patient, "Cores per patient");
    synth->add_option("--patches-min", synth_cfg.patches_min, "Min patches per core");
    synth->add_option("--patches-max", synth_cfg.patches_max, "Max patches per core");
    synth->add_option("--feature-dim", synth_cfg.feature_dim, "Feature dimension C");
    synth->add_option("--signal-fraction", synth_cfg.signal_fraction,
                      "Share of eligible patches carrying signal");
    synth->add_option("--effect-size", synth_cfg.effect_size, "Signal magnitude in feature space");
    synth->add_option("--censoring-rate", synth_cfg.censoring_rate, "Expected censored share");
    synth->add_option("--hazard-scale", synth_cfg.hazard_scale,
                      "Event rate = exp(hazard_scale * latent risk)");
    synth->add_option("--tabular-corr", synth_cfg.tabular_rank_corr,
                      "Latent correlation of stage/grade with risk");
    synth->add_option("--signal-cores", synth_cfg.signal_cores,
                      "Restrict signal to the first k cores (0 = all)");
    synth->add_option("--seed", synth_cfg.seed, "Generator seed");

    // train
    CommonTrainFlags train_flags;
    CLI::App* train = app.add_subcommand("train", "Train a model, write checkpoint + loss trace");
    add_train_flags(train, train_flags);

    // eval
    EvalFlags eval_flags;
    CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint on a manifest");
    eval->add_option("--manifest", eval_flags.manifest, "Manifest CSV path")->required();
    eval->add_option("--checkpoint", eval_flags.checkpoint, "Checkpoint file")->required();
    eval->add_option("--out", eval_flags.out_dir, "Output directory")->required();
    eval->add_option("--attention-dir", eval_flags.attention_dir,
                     "Also export per-patient attention CSVs here");
    eval->add_flag("--exclude-missing", eval_flags.exclude_missing,
                   "Skip manifest rows with missing values");

    // cv
    CommonTrainFlags cv_flags;
    int cv_k = 10;
    bool cv_stratify = false;
    bool cv_pooled_c = false;
    CLI::App* cv = app.add_subcommand("cv", "k-fold cross-validation with KM stratification");
    add_train_flags(cv, cv_flags);
    cv->add_option("--k", cv_k, "Number of folds");
    cv->add_flag("--stratify-folds", cv_stratify, "Stratify folds by event status");
    cv->add_flag("--pooled-c", cv_pooled_c, "Also report the pooled-prediction C-index");

    // km
    KmFlags km_flags;
    CLI::App* km = app.add_subcommand("km", "Median-risk stratification curves from predictions");
    km->add_option("--manifest", km_flags.manifest, "Manifest CSV path")->required();
    km->add_option("--predictions", km_flags.predictions, "predictions.csv path")->required();
    km->add_option("--out", km_flags.out_dir, "Output directory")->required();
    km->add_flag("--exclude-missing", km_flags.exclude_missing,
                 "Skip manifest rows with missing values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_cfg, synth_out);
        if (train->parsed()) return cmd_train(train_flags);
        if (eval->parsed()) return cmd_eval(eval_flags);
        if (cv->parsed()) return cmd_cv(cv_flags, cv_k, cv_stratify, cv_pooled_c);
        if (km->parsed()) return cmd_km(km_flags);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::domain_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

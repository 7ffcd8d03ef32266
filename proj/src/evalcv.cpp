#include "survmil/evalcv.hpp"

#include "survmil/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace survmil {

namespace fs = std::filesystem;

FoldPlan make_folds(const Cohort& cohort, int k, std::uint64_t seed, bool stratify_by_event) {
    cohort.validate();
    if (k < 1) throw std::invalid_argument("make_folds: k must be >= 1");
    if (static_cast<std::size_t>(k) > cohort.size())
        throw std::invalid_argument("make_folds: k exceeds cohort size");

    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.fold_of.assign(cohort.size(), 0);

    std::mt19937_64 rng(seed);
    if (!stratify_by_event) {
        std::vector<std::size_t> order(cohort.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t pos = 0; pos < order.size(); ++pos)
            plan.fold_of[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k));
    } else {
        // Shuffle events and censored separately, deal each round-robin.
        std::vector<std::size_t> events, censored;
        for (std::size_t i = 0; i < cohort.size(); ++i)
            (cohort.records[i].event == 1 ? events : censored).push_back(i);
        std::shuffle(events.begin(), events.end(), rng);
        std::shuffle(censored.begin(), censored.end(), rng);
        std::size_t next = 0;
        for (std::size_t i : events) plan.fold_of[i] = static_cast<int>(next++ % k);
        for (std::size_t i : censored) plan.fold_of[i] = static_cast<int>(next++ % k);
    }
    return plan;
}

namespace {

struct FoldOutcome {
    bool trained = false;
    std::vector<std::size_t> test_indices;
    std::vector<double> test_risks;
    std::string failure;
};

Cohort subset_cohort(const Cohort& cohort, const std::vector<std::size_t>& indices) {
    Cohort out;
    out.records.reserve(indices.size());
    for (std::size_t i : indices) out.records.push_back(cohort.records[i]);
    return out;
}

Matrix subset_covariates(const Cohort& cohort, const std::vector<std::size_t>& indices) {
    const std::size_t p = cohort.covariate_dim();
    Matrix x(indices.size(), p);
    for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t k = 0; k < p; ++k)
            x(r, k) = cohort.records[indices[r]].covariates[k];
    return x;
}

FoldOutcome run_fold(const Dataset& dataset, ModelKind kind, const CvConfig& config,
                     const FoldPlan& plan, int fold) {
    FoldOutcome outcome;
    std::vector<std::size_t> train_idx;
    for (std::size_t i = 0; i < dataset.cohort.size(); ++i) {
        if (plan.fold_of[i] == fold)
            outcome.test_indices.push_back(i);
        else
            train_idx.push_back(i);
    }
    const Cohort train = subset_cohort(dataset.cohort, train_idx);
    const Cohort test = subset_cohort(dataset.cohort, outcome.test_indices);
    const std::uint64_t fold_seed = derive_seed(config.seed, 0x100 + static_cast<std::uint64_t>(fold));

    try {
        switch (kind) {
            case ModelKind::cox: {
                CoxModel model = fit_cox(train, config.cox);
                outcome.test_risks = predict_risk(model, subset_covariates(dataset.cohort,
                                                                           outcome.test_indices));
                break;
            }
            case ModelKind::rsf: {
                RsfConfig rsf_cfg = config.rsf;
                rsf_cfg.seed = fold_seed;
                Forest forest = fit_forest(train, rsf_cfg);
                outcome.test_risks =
                    predict_mortality(forest, subset_covariates(dataset.cohort,
                                                                outcome.test_indices));
                break;
            }
            case ModelKind::deepsurv: {
                MlpConfig mlp_cfg = config.mlp;
                mlp_cfg.in_dim = dataset.cohort.covariate_dim();
                MlpParams params(mlp_cfg, fold_seed);
                TrainConfig train_cfg = config.train;
                train_cfg.model_kind = ModelKind::deepsurv;
                train_cfg.seed = fold_seed;
                train_mlp(params, train, train_cfg);
                outcome.test_risks =
                    mlp_forward(params, subset_covariates(dataset.cohort, outcome.test_indices));
                break;
            }
            case ModelKind::amil:
            case ModelKind::maxpool: {
                if (!dataset.has_bags())
                    throw std::invalid_argument("model requires feature bags");
                AmilConfig arch = config.arch;
                arch.feature_dim = dataset.feature_dim();
                AmilParams params(arch, fold_seed);
                TrainConfig train_cfg = config.train;
                train_cfg.model_kind = kind;
                train_cfg.seed = fold_seed;
                auto all_bags = dataset.merged_bags();
                std::vector<FeatureBag> train_bags;
                train_bags.reserve(train_idx.size());
                for (std::size_t i : train_idx) train_bags.push_back(std::move(all_bags[i]));
                train_amil(params, train_bags, train, train_cfg);
                for (std::size_t i : outcome.test_indices) {
                    FeatureBag& bag = all_bags[i];
                    outcome.test_risks.push_back(kind == ModelKind::amil
                                                     ? amil_forward(params, bag).log_risk
                                                     : maxpool_forward(params, bag));
                }
                break;
            }
            case ModelKind::amil_per_core: {
                if (!dataset.has_bags())
                    throw std::invalid_argument("model requires feature bags");
                AmilConfig arch = config.arch;
                arch.feature_dim = dataset.feature_dim();
                AmilParams params(arch, fold_seed);
                TrainConfig train_cfg = config.train;
                train_cfg.model_kind = ModelKind::amil_per_core;
                train_cfg.seed = fold_seed;
                std::vector<std::vector<FeatureBag>> train_cores;
                train_cores.reserve(train_idx.size());
                for (std::size_t i : train_idx) train_cores.push_back(dataset.cores[i]);
                PerCoreExpansion expansion = expand_per_core(train_cores, train);
                train_amil(params, expansion.bags, expansion.cohort, train_cfg);

                std::vector<std::vector<FeatureBag>> test_cores;
                test_cores.reserve(outcome.test_indices.size());
                for (std::size_t i : outcome.test_indices) test_cores.push_back(dataset.cores[i]);
                PerCoreExpansion test_expansion = expand_per_core(test_cores, test);
                std::vector<double> core_risks;
                core_risks.reserve(test_expansion.bags.size());
                for (FeatureBag& bag : test_expansion.bags)
                    core_risks.push_back(amil_forward(params, bag).log_risk);
                const RiskScores per_patient =
                    aggregate_per_core(test_expansion, core_risks, test);
                outcome.test_risks = per_patient.values();
                break;
            }
        }
        outcome.trained = true;
    } catch (const std::exception& e) {
        outcome.failure = e.what();
    }
    return outcome;
}

double median_of(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

CvReport run_cv(const Dataset& dataset, ModelKind kind, const CvConfig& config) {
    dataset.cohort.validate();
    CvReport report;
    report.model_kind = kind;
    report.k = config.k;
    report.seed = config.seed;

    const FoldPlan plan = make_folds(dataset.cohort, config.k,
                                     derive_seed(config.seed, 0xF01D),
                                     config.stratify_folds);

    std::vector<FoldOutcome> outcomes(config.k);
    parallel_for(static_cast<std::size_t>(config.k), config.threads, [&](std::size_t f) {
        outcomes[f] = run_fold(dataset, kind, config, plan, static_cast<int>(f));
    });

    std::vector<double> pooled_risk(dataset.cohort.size(), 0.0);
    std::vector<char> covered(dataset.cohort.size(), 0);
    for (int f = 0; f < config.k; ++f) {
        const FoldOutcome& outcome = outcomes[f];
        if (!outcome.trained) {
            ++report.invalid_folds;
            continue;
        }
        // A fold whose predictions are all tied marks a degenerate predictor.
        if (outcome.test_risks.size() > 1 &&
            std::all_of(outcome.test_risks.begin(), outcome.test_risks.end(),
                        [&](double r) { return r == outcome.test_risks.front(); }))
            report.degenerate_predictions = true;
        for (std::size_t j = 0; j < outcome.test_indices.size(); ++j) {
            pooled_risk[outcome.test_indices[j]] = outcome.test_risks[j];
            covered[outcome.test_indices[j]] = 1;
        }
        const Cohort test = subset_cohort(dataset.cohort, outcome.test_indices);
        try {
            const CIndexResult c =
                c_index(test.times(), test.events(), outcome.test_risks);
            report.fold_ids.push_back(f);
            report.fold_c.push_back(c.c_index);
        } catch (const std::domain_error&) {
            ++report.invalid_folds;  // no permissible pairs in the held-out fold
        }
    }

    if (!report.fold_c.empty()) {
        double mean = 0.0;
        for (double c : report.fold_c) mean += c;
        mean /= static_cast<double>(report.fold_c.size());
        double var = 0.0;
        for (double c : report.fold_c) var += (c - mean) * (c - mean);
        var /= static_cast<double>(report.fold_c.size());
        report.c_mean = mean;
        report.c_std = std::sqrt(var);
        report.c_median = median_of(report.fold_c);
    } else {
        report.c_mean = report.c_std = report.c_median =
            std::numeric_limits<double>::quiet_NaN();
    }

    // Pool test-fold predictions over every patient a trained fold covered.
    std::vector<std::size_t> pooled_indices;
    for (std::size_t i = 0; i < dataset.cohort.size(); ++i)
        if (covered[i]) pooled_indices.push_back(i);
    report.pooled_cohort = subset_cohort(dataset.cohort, pooled_indices);
    std::vector<double> pooled_values;
    pooled_values.reserve(pooled_indices.size());
    for (std::size_t i : pooled_indices) pooled_values.push_back(pooled_risk[i]);
    report.pooled = RiskScores::aligned(report.pooled_cohort, pooled_values);

    const StratifyResult strat = stratify_and_compare(report.pooled, report.pooled_cohort);
    report.km_high = strat.high;
    report.km_low = strat.low;
    report.logrank = strat.logrank;
    report.degenerate_predictions = report.degenerate_predictions || strat.degenerate;

    if (config.report_pooled_c) {
        report.has_pooled_c = true;
        try {
            report.pooled_c = c_index(report.pooled_cohort.times(), report.pooled_cohort.events(),
                                      pooled_values)
                                  .c_index;
        } catch (const std::domain_error&) {
            report.pooled_c = std::numeric_limits<double>::quiet_NaN();
        }
    }
    return report;
}

StratifyResult stratify_and_compare(const RiskScores& pooled, const Cohort& cohort) {
    pooled.check_alignment(cohort);
    if (cohort.empty()) {
        StratifyResult empty;
        empty.degenerate = true;
        empty.logrank = LogrankResult{0.0, 1.0};
        return empty;
    }
    const std::vector<double> risks = pooled.values();
    const double median = [&] {
        std::vector<double> sorted(risks);
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        return n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    }();

    Cohort high, low;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (risks[i] > median)
            high.records.push_back(cohort.records[i]);
        else
            low.records.push_back(cohort.records[i]);  // ties go to low risk
    }

    StratifyResult out;
    out.n_high = high.size();
    out.n_low = low.size();
    if (high.empty() || low.empty()) {
        out.degenerate = true;
        if (!high.empty()) out.high = kaplan_meier(high);
        if (!low.empty()) out.low = kaplan_meier(low);
        out.logrank = LogrankResult{0.0, 1.0};
        return out;
    }
    out.high = kaplan_meier(high);
    out.low = kaplan_meier(low);
    out.logrank = logrank_test(high, low);
    return out;
}

namespace {

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void write_km_csv(const fs::path& path, const KmCurve& curve) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "time,survival,at_risk,events\n";
    for (const KmPoint& p : curve.points)
        out << format_value(p.time) << ',' << format_value(p.survival) << ',' << p.n_at_risk
            << ',' << p.n_events << "\n";
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Step-curve vertices for one KM curve, right-continuous, starting at (0, 1).
std::string polyline_points(const KmCurve& curve, double x_max, double width, double height,
                            double margin_left, double margin_top) {
    const double plot_w = width, plot_h = height;
    auto px = [&](double t) { return margin_left + (x_max > 0 ? t / x_max : 0.0) * plot_w; };
    auto py = [&](double s) { return margin_top + (1.0 - s) * plot_h; };
    std::ostringstream ss;
    double s = 1.0;
    ss << format_value(px(0.0)) << ',' << format_value(py(1.0));
    for (const KmPoint& p : curve.points) {
        ss << ' ' << format_value(px(p.time)) << ',' << format_value(py(s));
        ss << ' ' << format_value(px(p.time)) << ',' << format_value(py(p.survival));
        s = p.survival;
    }
    ss << ' ' << format_value(px(x_max)) << ',' << format_value(py(s));
    return ss.str();
}

}  // namespace

std::string render_km_svg(const KmCurve& high, const KmCurve& low, double logrank_p) {
    const double width = 640, height = 480;
    const double ml = 60, mr = 20, mt = 40, mb = 50;
    const double plot_w = width - ml - mr, plot_h = height - mt - mb;

    double x_max = 0.0;
    for (const KmPoint& p : high.points) x_max = std::max(x_max, p.time);
    for (const KmPoint& p : low.points) x_max = std::max(x_max, p.time);
    if (x_max <= 0) x_max = 1.0;

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
        << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";

    // Axes.
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << mt + plot_h << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << mt + plot_h << "\" x2=\"" << ml + plot_w
        << "\" y2=\"" << mt + plot_h << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double s = 1.0 - 0.25 * i;
        const double y = mt + (1.0 - s) * plot_h;
        svg << "<line x1=\"" << ml - 4 << "\" y1=\"" << y << "\" x2=\"" << ml << "\" y2=\"" << y
            << "\" stroke=\"black\"/>\n"
            << "<text x=\"" << ml - 8 << "\" y=\"" << y + 4
            << "\" font-size=\"12\" text-anchor=\"end\">" << format_value(s) << "</text>\n";
    }
    for (int i = 0; i <= 5; ++i) {
        const double t = x_max * i / 5.0;
        const double x = ml + (t / x_max) * plot_w;
        svg << "<line x1=\"" << x << "\" y1=\"" << mt + plot_h << "\" x2=\"" << x << "\" y2=\""
            << mt + plot_h + 4 << "\" stroke=\"black\"/>\n"
            << "<text x=\"" << x << "\" y=\"" << mt + plot_h + 18
            << "\" font-size=\"12\" text-anchor=\"middle\">" << format_value(t) << "</text>\n";
    }

    svg << "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\" points=\""
        << polyline_points(high, x_max, plot_w, plot_h, ml, mt) << "\"/>\n"
        << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\""
        << polyline_points(low, x_max, plot_w, plot_h, ml, mt) << "\"/>\n";

    char p_text[64];
    std::snprintf(p_text, sizeof(p_text), "logrank p = %.3g", logrank_p);
    svg << "<text x=\"" << ml + 12 << "\" y=\"" << mt + 18 << "\" font-size=\"14\">" << p_text
        << "</text>\n"
        << "<text x=\"" << ml + 12 << "\" y=\"" << mt + 38
        << "\" font-size=\"12\" fill=\"#d62728\">high risk</text>\n"
        << "<text x=\"" << ml + 12 << "\" y=\"" << mt + 54
        << "\" font-size=\"12\" fill=\"#1f77b4\">low risk</text>\n"
        << "<text x=\"" << ml + plot_w / 2 << "\" y=\"" << height - 12
        << "\" font-size=\"13\" text-anchor=\"middle\">time</text>\n"
        << "<text x=\"16\" y=\"" << mt + plot_h / 2
        << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << mt + plot_h / 2 << ")\">survival probability</text>\n"
        << "</svg>\n";
    return svg.str();
}

void emit_report(const CvReport& report, const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    {
        std::ofstream out(out_dir / "cindex.csv");
        if (!out) throw std::runtime_error("cannot write " + (out_dir / "cindex.csv").string());
        out << "fold,c_index\n";
        for (std::size_t i = 0; i < report.fold_ids.size(); ++i)
            out << report.fold_ids[i] << ',' << format_value(report.fold_c[i]) << "\n";
        if (!out) throw std::runtime_error("write failed: " + (out_dir / "cindex.csv").string());
    }
    {
        nlohmann::json summary;
        summary["model_kind"] = to_string(report.model_kind);
        summary["k"] = report.k;
        summary["seed"] = report.seed;
        summary["c_mean"] = report.c_mean;
        summary["c_std"] = report.c_std;
        summary["c_median"] = report.c_median;
        summary["logrank_p"] = report.logrank.p_value;
        summary["invalid_folds"] = report.invalid_folds;
        if (report.has_pooled_c) summary["c_pooled"] = report.pooled_c;
        std::ofstream out(out_dir / "summary.json");
        if (!out) throw std::runtime_error("cannot write " + (out_dir / "summary.json").string());
        out << summary.dump(2) << "\n";
        if (!out)
            throw std::runtime_error("write failed: " + (out_dir / "summary.json").string());
    }
    write_km_csv(out_dir / "km_high.csv", report.km_high);
    write_km_csv(out_dir / "km_low.csv", report.km_low);
    {
        std::ofstream out(out_dir / "km.svg");
        if (!out) throw std::runtime_error("cannot write " + (out_dir / "km.svg").string());
        out << render_km_svg(report.km_high, report.km_low, report.logrank.p_value);
        if (!out) throw std::runtime_error("write failed: " + (out_dir / "km.svg").string());
    }
    {
        std::ofstream out(out_dir / "predictions.csv");
        if (!out)
            throw std::runtime_error("cannot write " + (out_dir / "predictions.csv").string());
        out << "patient_id,log_risk\n";
        for (const RiskEntry& e : report.pooled.entries)
            out << e.patient_id << ',' << format_value(e.log_risk) << "\n";
        if (!out)
            throw std::runtime_error("write failed: " + (out_dir / "predictions.csv").string());
    }
}

}  // namespace survmil

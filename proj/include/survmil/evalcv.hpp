#pragma once

#include "survmil/amil.hpp"
#include "survmil/coxlinear.hpp"
#include "survmil/dataio.hpp"
#include "survmil/rsf.hpp"
#include "survmil/survcore.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace survmil {

/// Fold assignment per cohort record: seeded shuffle, then round-robin, so
/// fold sizes differ by at most one.
struct FoldPlan {
    int k = 10;
    std::uint64_t seed = 0;
    std::vector<int> fold_of;  // aligned to cohort records
};

FoldPlan make_folds(const Cohort& cohort, int k, std::uint64_t seed,
                    bool stratify_by_event = false);

struct CvConfig {
    int k = 10;
    std::uint64_t seed = 0;
    int threads = 1;
    bool stratify_folds = false;
    bool report_pooled_c = false;
    TrainConfig train;      // epochs / lr / l1 for the network models
    AmilConfig arch;        // feature_dim is taken from the data
    MlpConfig mlp;          // in_dim is taken from the data
    RsfConfig rsf;
    CoxFitOptions cox;
};

struct CvReport {
    ModelKind model_kind = ModelKind::amil;
    int k = 10;
    std::uint64_t seed = 0;
    std::vector<int> fold_ids;      // folds with a defined C-index
    std::vector<double> fold_c;     // aligned with fold_ids
    double c_mean = 0.0;
    double c_std = 0.0;
    double c_median = 0.0;
    int invalid_folds = 0;
    RiskScores pooled;              // test-fold predictions, cohort order
    Cohort pooled_cohort;           // patients covered by `pooled`
    KmCurve km_high;
    KmCurve km_low;
    LogrankResult logrank;
    bool degenerate_predictions = false;
    bool has_pooled_c = false;
    double pooled_c = 0.0;          // only set with report_pooled_c
};

/// Runs k-fold cross-validation of the given model over the dataset: train on
/// k-1 folds, score the held-out fold, C-index per fold, pooled test-fold
/// predictions stratified at the median risk with a logrank comparison.
/// Deterministic from (dataset, seed); folds may train in parallel.
CvReport run_cv(const Dataset& dataset, ModelKind kind, const CvConfig& config);

struct StratifyResult {
    KmCurve high;
    KmCurve low;
    LogrankResult logrank;
    bool degenerate = false;  // all risks tied: the high group is empty
    std::size_t n_high = 0;
    std::size_t n_low = 0;
};

/// Median split of pooled risks (ties go to the low-risk group), Kaplan-Meier
/// per group, logrank across groups.
StratifyResult stratify_and_compare(const RiskScores& pooled, const Cohort& cohort);

/// Writes cindex.csv, summary.json, km_high.csv, km_low.csv, km.svg and
/// predictions.csv into out_dir.
void emit_report(const CvReport& report, const std::filesystem::path& out_dir);

/// Self-contained SVG with both KM step curves and the logrank annotation.
std::string render_km_svg(const KmCurve& high, const KmCurve& low, double logrank_p);

}  // namespace survmil

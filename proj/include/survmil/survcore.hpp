#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace survmil {

/// One patient's follow-up record. `event` is 1 if death was observed, 0 if
/// the patient was censored at `time`. Covariates are optional (empty when
/// the cohort carries bags only); when present the length must agree across
/// the cohort.
struct SurvivalRecord {
    std::string patient_id;
    double time = 0.0;
    int event = 0;
    std::vector<double> covariates;
};

struct Cohort {
    std::vector<SurvivalRecord> records;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
    std::size_t n_events() const;
    std::size_t covariate_dim() const;  // 0 when no covariates
    std::vector<double> times() const;
    std::vector<int> events() const;

    /// Throws std::invalid_argument on: empty cohort, duplicate patient ids,
    /// negative times, events outside {0,1}, inconsistent covariate lengths.
    void validate() const;
};

struct KmPoint {
    double time;
    double survival;
    std::size_t n_at_risk;
    std::size_t n_events;
};

/// Kaplan-Meier step curve. Points appear at distinct event times only; an
/// empty point list means the curve is constant at 1.
struct KmCurve {
    std::vector<KmPoint> points;
};

struct LogrankResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

struct CIndexResult {
    double c_index = 0.0;
    std::uint64_t concordant = 0;
    std::uint64_t discordant = 0;
    std::uint64_t tied_risk = 0;
    std::uint64_t permissible = 0;
};

/// Per-patient predicted log-risk, aligned one-to-one with a Cohort.
struct RiskEntry {
    std::string patient_id;
    double log_risk = 0.0;
};

struct RiskScores {
    std::vector<RiskEntry> entries;

    static RiskScores aligned(const Cohort& cohort, std::span<const double> log_risks);
    std::vector<double> values() const;
    /// Throws if entries do not match the cohort records in order and id.
    void check_alignment(const Cohort& cohort) const;
};

/// Indices j with t_j >= t_i (ties and i itself included), ascending.
std::vector<std::size_t> risk_set(const Cohort& cohort, std::size_t i);

KmCurve kaplan_meier(const Cohort& cohort);

/// Two-sample logrank test, chi-square with 1 df. Degenerate inputs (no
/// events, zero variance) give statistic 0, p 1 rather than an error.
LogrankResult logrank_test(const Cohort& group_a, const Cohort& group_b);

/// Harrell's C. Permissible pairs are (i, j) with t_i < t_j and event_i = 1;
/// tied risks count 1/2, tied times are excluded. Throws std::domain_error
/// when no pair is permissible.
CIndexResult c_index(std::span<const double> times, std::span<const int> events,
                     std::span<const double> risks);

/// Upper tail of the chi-square(1) distribution, erfc(sqrt(x/2)).
double chisq1_upper_tail(double x);

}  // namespace survmil

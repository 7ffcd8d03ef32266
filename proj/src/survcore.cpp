#include "survmil/survcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace survmil {

std::size_t Cohort::n_events() const {
    std::size_t n = 0;
    for (const auto& r : records) n += (r.event == 1);
    return n;
}

std::size_t Cohort::covariate_dim() const {
    return records.empty() ? 0 : records.front().covariates.size();
}

std::vector<double> Cohort::times() const {
    std::vector<double> t;
    t.reserve(records.size());
    for (const auto& r : records) t.push_back(r.time);
    return t;
}

std::vector<int> Cohort::events() const {
    std::vector<int> e;
    e.reserve(records.size());
    for (const auto& r : records) e.push_back(r.event);
    return e;
}

void Cohort::validate() const {
    if (records.empty()) throw std::invalid_argument("cohort is empty");
    std::unordered_set<std::string> seen;
    const std::size_t dim = covariate_dim();
    for (const auto& r : records) {
        if (!seen.insert(r.patient_id).second)
            throw std::invalid_argument("duplicate patient_id: " + r.patient_id);
        if (!(r.time >= 0.0))
            throw std::invalid_argument("negative or NaN time for patient " + r.patient_id);
        if (r.event != 0 && r.event != 1)
            throw std::invalid_argument("event must be 0 or 1 for patient " + r.patient_id);
        if (r.covariates.size() != dim)
            throw std::invalid_argument("inconsistent covariate length for patient " +
                                        r.patient_id);
    }
}

RiskScores RiskScores::aligned(const Cohort& cohort, std::span<const double> log_risks) {
    if (log_risks.size() != cohort.size())
        throw std::invalid_argument("risk scores: length does not match cohort");
    RiskScores s;
    s.entries.reserve(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i)
        s.entries.push_back({cohort.records[i].patient_id, log_risks[i]});
    return s;
}

std::vector<double> RiskScores::values() const {
    std::vector<double> v;
    v.reserve(entries.size());
    for (const auto& e : entries) v.push_back(e.log_risk);
    return v;
}

void RiskScores::check_alignment(const Cohort& cohort) const {
    if (entries.size() != cohort.size())
        throw std::invalid_argument("risk scores not aligned: size mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].patient_id != cohort.records[i].patient_id)
            throw std::invalid_argument("risk scores not aligned at index " + std::to_string(i));
}

std::vector<std::size_t> risk_set(const Cohort& cohort, std::size_t i) {
    if (i >= cohort.size()) throw std::out_of_range("risk_set: patient index out of range");
    const double t = cohort.records[i].time;
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < cohort.size(); ++j)
        if (cohort.records[j].time >= t) out.push_back(j);
    return out;
}

namespace {

// Distinct times ascending with death/total counts, shared by KM and logrank.
struct TimeGroup {
    double time;
    std::size_t deaths;
    std::size_t total;  // deaths + censorings at this time
};

std::vector<TimeGroup> group_by_time(std::span<const double> times, std::span<const int> events) {
    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
    std::vector<TimeGroup> groups;
    for (std::size_t k = 0; k < order.size();) {
        const double t = times[order[k]];
        TimeGroup g{t, 0, 0};
        while (k < order.size() && times[order[k]] == t) {
            g.deaths += (events[order[k]] == 1);
            ++g.total;
            ++k;
        }
        groups.push_back(g);
    }
    return groups;
}

}  // namespace

KmCurve kaplan_meier(const Cohort& cohort) {
    if (cohort.empty()) throw std::invalid_argument("kaplan_meier: empty cohort");
    const auto groups = group_by_time(cohort.times(), cohort.events());
    KmCurve curve;
    double survival = 1.0;
    std::size_t at_risk = cohort.size();
    for (const auto& g : groups) {
        if (g.deaths > 0) {
            survival *= 1.0 - static_cast<double>(g.deaths) / static_cast<double>(at_risk);
            curve.points.push_back({g.time, survival, at_risk, g.deaths});
        }
        at_risk -= g.total;
    }
    return curve;
}

LogrankResult logrank_test(const Cohort& group_a, const Cohort& group_b) {
    if (group_a.empty() || group_b.empty())
        throw std::invalid_argument("logrank_test: both groups must be nonempty");

    std::vector<double> times;
    std::vector<int> events;
    std::vector<int> in_a;
    times.reserve(group_a.size() + group_b.size());
    for (const auto& r : group_a.records) {
        times.push_back(r.time);
        events.push_back(r.event);
        in_a.push_back(1);
    }
    for (const auto& r : group_b.records) {
        times.push_back(r.time);
        events.push_back(r.event);
        in_a.push_back(0);
    }

    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

    double observed_a = 0.0;
    double expected_a = 0.0;
    double variance = 0.0;
    std::size_t at_risk_a = group_a.size();
    std::size_t at_risk = times.size();

    for (std::size_t k = 0; k < order.size();) {
        const double t = times[order[k]];
        std::size_t deaths = 0, deaths_a = 0, leaving = 0, leaving_a = 0;
        while (k < order.size() && times[order[k]] == t) {
            const std::size_t idx = order[k];
            ++leaving;
            leaving_a += in_a[idx];
            if (events[idx] == 1) {
                ++deaths;
                deaths_a += in_a[idx];
            }
            ++k;
        }
        if (deaths > 0) {
            const double n = static_cast<double>(at_risk);
            const double na = static_cast<double>(at_risk_a);
            const double d = static_cast<double>(deaths);
            observed_a += static_cast<double>(deaths_a);
            expected_a += d * na / n;
            if (at_risk > 1)
                variance += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1.0);
        }
        at_risk -= leaving;
        at_risk_a -= leaving_a;
    }

    LogrankResult result;
    if (variance <= 0.0) {
        result.statistic = 0.0;
        result.p_value = 1.0;
        return result;
    }
    const double diff = observed_a - expected_a;
    result.statistic = diff * diff / variance;
    result.p_value = chisq1_upper_tail(result.statistic);
    return result;
}

CIndexResult c_index(std::span<const double> times, std::span<const int> events,
                     std::span<const double> risks) {
    if (times.size() != events.size() || times.size() != risks.size())
        throw std::invalid_argument("c_index: input lengths differ");
    CIndexResult r;
    const std::size_t n = times.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (events[i] != 1) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (!(times[i] < times[j])) continue;  // tied times excluded
            ++r.permissible;
            if (risks[i] > risks[j])
                ++r.concordant;
            else if (risks[i] < risks[j])
                ++r.discordant;
            else
                ++r.tied_risk;
        }
    }
    if (r.permissible == 0)
        throw std::domain_error("undefined C-index: no permissible pairs");
    r.c_index = (static_cast<double>(r.concordant) + 0.5 * static_cast<double>(r.tied_risk)) /
                static_cast<double>(r.permissible);
    return r;
}

double chisq1_upper_tail(double x) {
    if (x <= 0.0) return 1.0;
    return std::erfc(std::sqrt(x / 2.0));
}

}  // namespace survmil

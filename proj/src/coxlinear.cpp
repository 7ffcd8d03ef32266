#include "survmil/coxlinear.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace survmil {

namespace {

// Canonical processing order: time ascending, patient_id as tie-breaker, so
// every internal sum is invariant under permutation of the input records.
std::vector<std::size_t> canonical_order(const Cohort& cohort) {
    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& ra = cohort.records[a];
        const auto& rb = cohort.records[b];
        if (ra.time != rb.time) return ra.time < rb.time;
        return ra.patient_id < rb.patient_id;
    });
    return order;
}

struct LikelihoodState {
    double loglik = 0.0;
    std::vector<double> gradient;       // p
    std::vector<double> neg_hessian;    // p*p, row-major, PSD
};

// One sweep over the cohort in descending time order, accumulating the
// Breslow log-likelihood, its gradient and negated Hessian at eta = X beta.
// Rows must already be sorted by time ascending.
LikelihoodState breslow_sweep(const Matrix& x, std::span<const double> times,
                              std::span<const int> events,
                              std::span<const double> beta, bool want_derivatives) {
    const std::size_t n = times.size();
    const std::size_t p = x.cols;
    std::vector<double> eta(n);
    double eta_max = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t k = 0; k < p; ++k) v += beta[k] * x(i, k);
        eta[i] = v;
        eta_max = std::max(eta_max, v);
    }

    LikelihoodState st;
    if (want_derivatives) {
        st.gradient.assign(p, 0.0);
        st.neg_hessian.assign(p * p, 0.0);
    }

    // Risk-set sums, accumulated as times decrease; exp shifted by eta_max.
    double s0 = 0.0;
    std::vector<double> s1(p, 0.0);
    std::vector<double> s2(want_derivatives ? p * p : 0, 0.0);

    std::size_t k = n;
    while (k > 0) {
        // Pull in everyone tied at this time before processing its events.
        std::size_t block_end = k;
        const double t = times[k - 1];
        while (k > 0 && times[k - 1] == t) {
            const std::size_t row = k - 1;
            const double w = std::exp(eta[row] - eta_max);
            s0 += w;
            for (std::size_t a = 0; a < p; ++a) s1[a] += w * x(row, a);
            if (want_derivatives)
                for (std::size_t a = 0; a < p; ++a)
                    for (std::size_t b = 0; b < p; ++b)
                        s2[a * p + b] += w * x(row, a) * x(row, b);
            --k;
        }
        const double log_s0 = std::log(s0) + eta_max;
        for (std::size_t row = k; row < block_end; ++row) {
            if (events[row] != 1) continue;
            st.loglik += eta[row] - log_s0;
            if (want_derivatives) {
                for (std::size_t a = 0; a < p; ++a) {
                    const double mean_a = s1[a] / s0;
                    st.gradient[a] += x(row, a) - mean_a;
                    for (std::size_t b = 0; b < p; ++b)
                        st.neg_hessian[a * p + b] += s2[a * p + b] / s0 - mean_a * s1[b] / s0;
                }
            }
        }
    }
    return st;
}

// Solves the symmetric positive-definite system m * out = rhs via Cholesky.
// Throws on a non-PD matrix, which for the Newton step means collinearity.
std::vector<double> solve_spd(std::vector<double> m, std::vector<double> rhs, std::size_t p) {
    for (std::size_t j = 0; j < p; ++j) {
        double d = m[j * p + j];
        for (std::size_t k = 0; k < j; ++k) d -= m[j * p + k] * m[j * p + k];
        if (!(d > 1e-12))
            throw std::runtime_error(
                "singular Hessian in Cox fit; check for collinear or constant covariates");
        const double l = std::sqrt(d);
        m[j * p + j] = l;
        for (std::size_t i = j + 1; i < p; ++i) {
            double v = m[i * p + j];
            for (std::size_t k = 0; k < j; ++k) v -= m[i * p + k] * m[j * p + k];
            m[i * p + j] = v / l;
        }
    }
    for (std::size_t i = 0; i < p; ++i) {
        double v = rhs[i];
        for (std::size_t k = 0; k < i; ++k) v -= m[i * p + k] * rhs[k];
        rhs[i] = v / m[i * p + i];
    }
    for (std::size_t ii = p; ii > 0; --ii) {
        const std::size_t i = ii - 1;
        double v = rhs[i];
        for (std::size_t k = i + 1; k < p; ++k) v -= m[k * p + i] * rhs[k];
        rhs[i] = v / m[i * p + i];
    }
    return rhs;
}

double inf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

Matrix covariate_matrix(const Cohort& cohort) {
    const std::size_t p = cohort.covariate_dim();
    Matrix x(cohort.size(), p);
    for (std::size_t i = 0; i < cohort.size(); ++i)
        for (std::size_t k = 0; k < p; ++k) x(i, k) = cohort.records[i].covariates[k];
    return x;
}

std::vector<double> CoxModel::raw_beta() const {
    std::vector<double> out(beta.size());
    for (std::size_t k = 0; k < beta.size(); ++k) out[k] = beta[k] / scale[k];
    return out;
}

CoxModel fit_cox(const Cohort& cohort, const CoxFitOptions& options) {
    cohort.validate();
    const std::size_t p = cohort.covariate_dim();
    if (p == 0) throw std::invalid_argument("fit_cox: cohort has no covariates");
    if (cohort.n_events() == 0) throw std::invalid_argument("fit_cox: cohort has no events");

    const auto order = canonical_order(cohort);
    const std::size_t n = cohort.size();

    CoxModel model;
    model.center.assign(p, 0.0);
    model.scale.assign(p, 1.0);
    for (std::size_t k = 0; k < p; ++k) {
        double mean = 0.0;
        for (std::size_t i : order) mean += cohort.records[i].covariates[k];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i : order) {
            const double d = cohort.records[i].covariates[k] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        model.center[k] = mean;
        model.scale[k] = var > 1e-24 ? std::sqrt(var) : 1.0;  // constant column stays zero
    }

    // Standardized covariates in canonical row order.
    Matrix x(n, p);
    std::vector<double> times(n);
    std::vector<int> events(n);
    for (std::size_t row = 0; row < n; ++row) {
        const auto& rec = cohort.records[order[row]];
        times[row] = rec.time;
        events[row] = rec.event;
        for (std::size_t k = 0; k < p; ++k)
            x(row, k) = (rec.covariates[k] - model.center[k]) / model.scale[k];
    }
    model.beta.assign(p, 0.0);
    LikelihoodState st = breslow_sweep(x, times, events, model.beta, true);
    model.log_likelihood = st.loglik;
    model.ll_trace.push_back(st.loglik);

    for (int iter = 0; iter < options.max_iter; ++iter) {
        if (inf_norm(st.gradient) < 1e-14) {
            model.converged = true;
            break;
        }
        const std::vector<double> step = solve_spd(st.neg_hessian, st.gradient, p);

        double scale_factor = 1.0;
        bool accepted = false;
        std::vector<double> candidate(p);
        LikelihoodState cand_state;
        for (int h = 0; h <= options.max_halvings; ++h) {
            for (std::size_t k = 0; k < p; ++k)
                candidate[k] = model.beta[k] + scale_factor * step[k];
            cand_state = breslow_sweep(x, times, events, candidate, true);
            if (std::isfinite(cand_state.loglik) && cand_state.loglik >= model.log_likelihood) {
                accepted = true;
                break;
            }
            scale_factor *= 0.5;
        }
        if (!accepted) break;  // no ascent direction left at this scale

        const double improvement = cand_state.loglik - model.log_likelihood;
        model.beta = candidate;
        model.log_likelihood = cand_state.loglik;
        model.ll_trace.push_back(cand_state.loglik);
        st = std::move(cand_state);
        ++model.n_iterations;
        if (improvement < options.tol) {
            model.converged = true;
            break;
        }
    }
    return model;
}

std::vector<double> predict_risk(const CoxModel& model, const Matrix& covariates) {
    const std::size_t p = model.beta.size();
    if (covariates.cols != p)
        throw std::invalid_argument("predict_risk: covariate width does not match model");
    std::vector<double> out(covariates.rows, 0.0);
    for (std::size_t i = 0; i < covariates.rows; ++i) {
        double v = 0.0;
        for (std::size_t k = 0; k < p; ++k)
            v += model.beta[k] * (covariates(i, k) - model.center[k]) / model.scale[k];
        out[i] = v;
    }
    return out;
}

RiskScores predict_risk(const CoxModel& model, const Cohort& cohort) {
    return RiskScores::aligned(cohort, predict_risk(model, covariate_matrix(cohort)));
}

BaselineHazard breslow_baseline(const CoxModel& model, const Cohort& cohort) {
    cohort.validate();
    const std::size_t p = model.beta.size();
    if (cohort.covariate_dim() != p)
        throw std::invalid_argument("breslow_baseline: covariate width does not match model");

    const auto order = canonical_order(cohort);
    const std::size_t n = cohort.size();
    std::vector<double> risk(n);
    for (std::size_t row = 0; row < n; ++row) {
        const auto& rec = cohort.records[order[row]];
        double eta = 0.0;
        for (std::size_t k = 0; k < p; ++k)
            eta += model.beta[k] * (rec.covariates[k] - model.center[k]) / model.scale[k];
        risk[row] = std::exp(eta);
    }

    // Suffix sums give the risk-set denominator at each time block.
    std::vector<double> suffix(n + 1, 0.0);
    for (std::size_t row = n; row > 0; --row) suffix[row - 1] = suffix[row] + risk[row - 1];

    BaselineHazard hazard;
    double cumulative = 0.0;
    std::size_t row = 0;
    while (row < n) {
        const double t = cohort.records[order[row]].time;
        std::size_t deaths = 0;
        const double denom = suffix[row];
        while (row < n && cohort.records[order[row]].time == t) {
            deaths += (cohort.records[order[row]].event == 1);
            ++row;
        }
        if (deaths > 0) {
            cumulative += static_cast<double>(deaths) / denom;
            hazard.points.push_back({t, cumulative});
        }
    }
    return hazard;
}

double cox_partial_loglik(const Matrix& covariates, std::span<const double> times,
                          std::span<const int> events, std::span<const double> beta) {
    if (covariates.rows != times.size() || times.size() != events.size())
        throw std::invalid_argument("cox_partial_loglik: input lengths differ");
    if (covariates.cols != beta.size())
        throw std::invalid_argument("cox_partial_loglik: beta length mismatch");
    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
    Matrix x(covariates.rows, covariates.cols);
    std::vector<double> t(times.size());
    std::vector<int> e(times.size());
    for (std::size_t row = 0; row < order.size(); ++row) {
        t[row] = times[order[row]];
        e[row] = events[order[row]];
        for (std::size_t k = 0; k < covariates.cols; ++k) x(row, k) = covariates(order[row], k);
    }
    return breslow_sweep(x, t, e, beta, false).loglik;
}

std::vector<double> cox_partial_loglik_gradient(const Matrix& covariates,
                                                std::span<const double> times,
                                                std::span<const int> events,
                                                std::span<const double> beta) {
    if (covariates.rows != times.size() || times.size() != events.size())
        throw std::invalid_argument("cox_partial_loglik_gradient: input lengths differ");
    if (covariates.cols != beta.size())
        throw std::invalid_argument("cox_partial_loglik_gradient: beta length mismatch");
    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
    Matrix x(covariates.rows, covariates.cols);
    std::vector<double> t(times.size());
    std::vector<int> e(times.size());
    for (std::size_t row = 0; row < order.size(); ++row) {
        t[row] = times[order[row]];
        e[row] = events[order[row]];
        for (std::size_t k = 0; k < covariates.cols; ++k) x(row, k) = covariates(order[row], k);
    }
    return breslow_sweep(x, t, e, beta, true).gradient;
}

}  // namespace survmil

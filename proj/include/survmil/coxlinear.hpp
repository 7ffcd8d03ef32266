#pragma once

#include "survmil/ndgrad.hpp"
#include "survmil/survcore.hpp"

#include <span>
#include <vector>

namespace survmil {

/// Linear Cox proportional hazards model, Breslow tie handling. Covariates
/// are standardized internally before fitting; `beta` lives in standardized
/// space with the centering/scaling stored alongside.
struct CoxModel {
    std::vector<double> beta;
    std::vector<double> center;
    std::vector<double> scale;
    double log_likelihood = 0.0;
    int n_iterations = 0;
    bool converged = false;
    std::vector<double> ll_trace;  // log-likelihood at start plus each accepted step

    /// Coefficients mapped back to the raw covariate scale.
    std::vector<double> raw_beta() const;
};

struct CoxFitOptions {
    double tol = 1e-9;
    int max_iter = 100;
    int max_halvings = 10;
};

struct BaselineHazardPoint {
    double time;
    double cumulative_hazard;
};

/// Breslow estimate of the cumulative baseline hazard at the event times.
struct BaselineHazard {
    std::vector<BaselineHazardPoint> points;
};

/// Newton-Raphson fit of the Breslow partial likelihood, with step-halving
/// on likelihood decrease. Requires covariates and at least one event.
/// Throws std::runtime_error on a singular Hessian (collinear covariates).
CoxModel fit_cox(const Cohort& cohort, const CoxFitOptions& options = {});

/// Log-risk beta^T x_std per row of raw covariates.
std::vector<double> predict_risk(const CoxModel& model, const Matrix& covariates);
RiskScores predict_risk(const CoxModel& model, const Cohort& cohort);

BaselineHazard breslow_baseline(const CoxModel& model, const Cohort& cohort);

/// Covariate rows of a cohort as a matrix (n x p).
Matrix covariate_matrix(const Cohort& cohort);

// Breslow partial log-likelihood and its gradient for arbitrary beta, exposed
// for verification against independent computations. X rows align with
// times/events; no standardization is applied.
double cox_partial_loglik(const Matrix& covariates, std::span<const double> times,
                          std::span<const int> events, std::span<const double> beta);
std::vector<double> cox_partial_loglik_gradient(const Matrix& covariates,
                                                std::span<const double> times,
                                                std::span<const int> events,
                                                std::span<const double> beta);

}  // namespace survmil

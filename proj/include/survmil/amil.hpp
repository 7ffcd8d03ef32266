#pragma once

#include "survmil/ndgrad.hpp"
#include "survmil/survcore.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace survmil {

enum class ModelKind { amil, amil_per_core, maxpool, deepsurv, cox, rsf };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);  // accepts "amil-per-core" and "amil_per_core"

/// One patient's bag: M patch embeddings of width C, unordered by convention.
/// `attention_cache` holds the attention weights from the last forward pass.
struct FeatureBag {
    std::string patient_id;
    Matrix features;
    std::vector<double> attention_cache;
};

struct AmilConfig {
    std::size_t feature_dim = 1024;
    std::size_t proj_dim = 512;
    std::size_t attn_dim = 256;
    bool relu_proj = false;  // projection is linear by default
};

/// All weights of the attention-MIL network: projection, the gated attention
/// stack (tanh branch V, sigmoid branch U, scorer Z) and the scalar risk head.
/// The max-pooling variant uses only `proj` and `pred`.
struct AmilParams {
    AmilConfig config;
    LinearLayer proj;    // proj_dim x C
    LinearLayer attn_u;  // attn_dim x proj_dim, sigmoid gate branch
    LinearLayer attn_v;  // attn_dim x proj_dim, tanh branch
    LinearLayer attn_z;  // 1 x attn_dim, linear score
    LinearLayer pred;    // 1 x proj_dim

    AmilParams() = default;
    AmilParams(const AmilConfig& cfg, std::uint64_t seed);

    /// Parameter/grad pairs live for the given kind, in checkpoint order.
    std::vector<TensorRef> tensors(ModelKind kind);
    std::vector<const Matrix*> weight_matrices(ModelKind kind) const;
    double l1_norm(ModelKind kind) const;
    void zero_grad(ModelKind kind);
};

struct AmilOutput {
    double log_risk = 0.0;
    std::vector<double> attention;
};

/// Gated-attention forward pass: project patches, score each patch through
/// tanh/sigmoid branches, softmax over the bag, pool, predict. Attention is
/// returned and cached on the bag.
AmilOutput amil_forward(const AmilParams& params, FeatureBag& bag);

/// Max-pooling variant: elementwise max over projected patch embeddings
/// replaces attention pooling; the prediction layer is unchanged.
double maxpool_forward(const AmilParams& params, const FeatureBag& bag);

// Backward passes accumulate parameter gradients for a single bag given
// d(loss)/d(log_risk). They recompute the forward pass internally.
void amil_backward(AmilParams& params, const FeatureBag& bag, double d_log_risk);
void maxpool_backward(AmilParams& params, const FeatureBag& bag, double d_log_risk);

/// Eq.-style Cox loss: minus the average over events of
/// (score_i - log sum_{j in risk set} exp score_j), plus l1_lambda times the
/// caller-supplied parameter l1 norm. Throws when the cohort has no events.
double cox_loss(const RiskScores& scores, const Cohort& cohort, double l1_lambda = 0.0,
                double params_l1_norm = 0.0);

/// d(cox_loss)/d(score_k) per patient, aligned to the cohort. The l1 term
/// does not depend on the scores and is handled on the parameters directly.
std::vector<double> cox_loss_backward(const RiskScores& scores, const Cohort& cohort);

struct MlpConfig {
    std::size_t in_dim = 5;
    std::vector<std::size_t> hidden = {32, 32};
    bool identity_activation = false;  // test hook: collapses the net to a linear map
};

/// DeepSurv-style tabular risk net: hidden tanh layers and a linear scalar
/// head, trained with the same Cox loss. Inputs are standardized with the
/// stored center/scale (identity until trained).
struct MlpParams {
    MlpConfig config;
    std::vector<LinearLayer> layers;
    std::vector<double> center;
    std::vector<double> scale;

    MlpParams() = default;
    MlpParams(const MlpConfig& cfg, std::uint64_t seed);

    std::vector<TensorRef> tensors();
    std::vector<const Matrix*> weight_matrices() const;
    double l1_norm() const;
    void zero_grad();
};

std::vector<double> mlp_forward(const MlpParams& params, const Matrix& covariates);
void mlp_backward(MlpParams& params, const Matrix& covariates, std::span<const double> d_risks);

struct TrainConfig {
    ModelKind model_kind = ModelKind::amil;
    int epochs = 200;
    double learning_rate = 1e-4;
    double l1_lambda = 1e-5;
    std::uint64_t seed = 0;
};

struct TrainResult {
    std::vector<double> loss_trace;  // full-cohort loss at the start of each epoch
};

/// Full-cohort training: every epoch scores all patients, evaluates the Cox
/// loss over the whole cohort, backpropagates through every bag and applies
/// one Adam step with the l1 subgradient added. Deterministic given the seed.
TrainResult train_amil(AmilParams& params, std::vector<FeatureBag>& bags, const Cohort& cohort,
                       const TrainConfig& config);

/// Same loop for the tabular net; standardization is fitted here and stored.
TrainResult train_mlp(MlpParams& params, const Cohort& cohort, const TrainConfig& config);

/// Per-core training mode: each core becomes its own bag carrying the
/// patient's time and event, with ids suffixed "#<core>".
struct PerCoreExpansion {
    std::vector<FeatureBag> bags;
    Cohort cohort;
    std::vector<std::size_t> patient_of_bag;  // index into the original cohort
};

PerCoreExpansion expand_per_core(const std::vector<std::vector<FeatureBag>>& cores_per_patient,
                                 const Cohort& cohort);

/// Collapses per-core risks to one risk per patient by averaging.
RiskScores aggregate_per_core(const PerCoreExpansion& expansion,
                              std::span<const double> core_risks, const Cohort& original);

}  // namespace survmil

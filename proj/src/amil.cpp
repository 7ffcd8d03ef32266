#include "survmil/amil.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace survmil {

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::amil: return "amil";
        case ModelKind::amil_per_core: return "amil-per-core";
        case ModelKind::maxpool: return "maxpool";
        case ModelKind::deepsurv: return "deepsurv";
        case ModelKind::cox: return "cox";
        case ModelKind::rsf: return "rsf";
    }
    throw std::logic_error("unknown model kind");
}

ModelKind parse_model_kind(const std::string& name) {
    if (name == "amil") return ModelKind::amil;
    if (name == "amil-per-core" || name == "amil_per_core") return ModelKind::amil_per_core;
    if (name == "maxpool") return ModelKind::maxpool;
    if (name == "deepsurv") return ModelKind::deepsurv;
    if (name == "cox") return ModelKind::cox;
    if (name == "rsf") return ModelKind::rsf;
    throw std::invalid_argument("unknown model kind: " + name);
}

AmilParams::AmilParams(const AmilConfig& cfg, std::uint64_t seed)
    : config(cfg),
      proj(cfg.proj_dim, cfg.feature_dim),
      attn_u(cfg.attn_dim, cfg.proj_dim),
      attn_v(cfg.attn_dim, cfg.proj_dim),
      attn_z(1, cfg.attn_dim),
      pred(1, cfg.proj_dim) {
    std::mt19937_64 rng(derive_seed(seed, 0x11));
    proj.init_glorot(rng);
    attn_u.init_glorot(rng);
    attn_v.init_glorot(rng);
    attn_z.init_glorot(rng);
    pred.init_glorot(rng);
}

namespace {

bool uses_attention(ModelKind kind) {
    return kind == ModelKind::amil || kind == ModelKind::amil_per_core;
}

}  // namespace

std::vector<TensorRef> AmilParams::tensors(ModelKind kind) {
    std::vector<TensorRef> out{{&proj.weight, &proj.grad_weight}, {&proj.bias, &proj.grad_bias}};
    if (uses_attention(kind)) {
        out.push_back({&attn_u.weight, &attn_u.grad_weight});
        out.push_back({&attn_u.bias, &attn_u.grad_bias});
        out.push_back({&attn_v.weight, &attn_v.grad_weight});
        out.push_back({&attn_v.bias, &attn_v.grad_bias});
        out.push_back({&attn_z.weight, &attn_z.grad_weight});
        out.push_back({&attn_z.bias, &attn_z.grad_bias});
    }
    out.push_back({&pred.weight, &pred.grad_weight});
    out.push_back({&pred.bias, &pred.grad_bias});
    return out;
}

std::vector<const Matrix*> AmilParams::weight_matrices(ModelKind kind) const {
    std::vector<const Matrix*> out{&proj.weight, &proj.bias};
    if (uses_attention(kind)) {
        out.push_back(&attn_u.weight);
        out.push_back(&attn_u.bias);
        out.push_back(&attn_v.weight);
        out.push_back(&attn_v.bias);
        out.push_back(&attn_z.weight);
        out.push_back(&attn_z.bias);
    }
    out.push_back(&pred.weight);
    out.push_back(&pred.bias);
    return out;
}

double AmilParams::l1_norm(ModelKind kind) const {
    double norm = 0.0;
    for (const Matrix* m : weight_matrices(kind))
        for (double v : m->data) norm += std::abs(v);
    return norm;
}

void AmilParams::zero_grad(ModelKind kind) {
    proj.zero_grad();
    if (uses_attention(kind)) {
        attn_u.zero_grad();
        attn_v.zero_grad();
        attn_z.zero_grad();
    }
    pred.zero_grad();
}

namespace {

struct AmilTrace {
    Matrix projected;   // M x P, after optional relu
    Matrix pre_relu;    // only kept when relu is on
    Matrix tanh_out;    // M x A
    Matrix sigm_out;    // M x A
    Matrix gated;       // M x A
    Matrix attention;   // M x 1
    Matrix bag;         // 1 x P
};

void check_bag(const AmilParams& params, const FeatureBag& bag) {
    if (bag.features.rows < 1)
        throw std::invalid_argument("bag " + bag.patient_id + " is empty");
    if (bag.features.cols != params.config.feature_dim)
        throw std::invalid_argument("bag " + bag.patient_id + " feature dim " +
                                    std::to_string(bag.features.cols) + " != model dim " +
                                    std::to_string(params.config.feature_dim));
}

double run_amil_forward(const AmilParams& params, const Matrix& features, AmilTrace* trace) {
    AmilTrace local;
    AmilTrace& t = trace ? *trace : local;

    t.projected = params.proj.forward(features);
    if (params.config.relu_proj) {
        t.pre_relu = t.projected;
        for (double& v : t.projected.data) v = std::max(v, 0.0);
    }
    t.tanh_out = tanh_fw(params.attn_v.forward(t.projected));
    t.sigm_out = sigmoid_fw(params.attn_u.forward(t.projected));
    t.gated = hadamard(t.tanh_out, t.sigm_out);
    t.attention = softmax_column(params.attn_z.forward(t.gated));

    const std::size_t m = features.rows;
    const std::size_t p = params.config.proj_dim;
    t.bag = Matrix(1, p);
    for (std::size_t i = 0; i < m; ++i) {
        const double a = t.attention.data[i];
        for (std::size_t c = 0; c < p; ++c) t.bag(0, c) += a * t.projected(i, c);
    }
    return params.pred.forward(t.bag)(0, 0);
}

double run_maxpool_forward(const AmilParams& params, const Matrix& features, Matrix* projected_out,
                           std::vector<std::size_t>* argmax_out) {
    Matrix projected = params.proj.forward(features);
    if (params.config.relu_proj)
        for (double& v : projected.data) v = std::max(v, 0.0);

    const std::size_t m = projected.rows;
    const std::size_t p = projected.cols;
    Matrix bag(1, p);
    std::vector<std::size_t> argmax(p, 0);
    for (std::size_t c = 0; c < p; ++c) {
        double best = projected(0, c);
        std::size_t best_i = 0;
        for (std::size_t i = 1; i < m; ++i) {
            if (projected(i, c) > best) {
                best = projected(i, c);
                best_i = i;
            }
        }
        bag(0, c) = best;
        argmax[c] = best_i;
    }
    if (projected_out) *projected_out = std::move(projected);
    if (argmax_out) *argmax_out = std::move(argmax);
    return params.pred.forward(bag)(0, 0);
}

}  // namespace

AmilOutput amil_forward(const AmilParams& params, FeatureBag& bag) {
    check_bag(params, bag);
    AmilTrace trace;
    AmilOutput out;
    out.log_risk = run_amil_forward(params, bag.features, &trace);
    if (!std::isfinite(out.log_risk))
        throw std::runtime_error("non-finite risk score for bag " + bag.patient_id);
    out.attention = trace.attention.data;
    bag.attention_cache = out.attention;
    return out;
}

double maxpool_forward(const AmilParams& params, const FeatureBag& bag) {
    check_bag(params, bag);
    const double risk = run_maxpool_forward(params, bag.features, nullptr, nullptr);
    if (!std::isfinite(risk))
        throw std::runtime_error("non-finite risk score for bag " + bag.patient_id);
    return risk;
}

void amil_backward(AmilParams& params, const FeatureBag& bag, double d_log_risk) {
    check_bag(params, bag);
    AmilTrace t;
    run_amil_forward(params, bag.features, &t);

    const std::size_t m = bag.features.rows;
    const std::size_t p = params.config.proj_dim;

    Matrix d_risk(1, 1);
    d_risk(0, 0) = d_log_risk;
    Matrix d_bag = params.pred.backward(t.bag, d_risk);  // 1 x P

    // Pooling: bag_c = sum_i a_i * h_ic.
    Matrix d_attention(m, 1);
    Matrix d_projected(m, p);
    for (std::size_t i = 0; i < m; ++i) {
        const double a = t.attention.data[i];
        double da = 0.0;
        for (std::size_t c = 0; c < p; ++c) {
            da += d_bag(0, c) * t.projected(i, c);
            d_projected(i, c) = a * d_bag(0, c);
        }
        d_attention(i, 0) = da;
    }

    Matrix d_logits = softmax_column_bw(t.attention, d_attention);
    Matrix d_gated = params.attn_z.backward(t.gated, d_logits);
    Matrix d_tanh = tanh_bw(t.tanh_out, hadamard(d_gated, t.sigm_out));
    Matrix d_sigm = sigmoid_bw(t.sigm_out, hadamard(d_gated, t.tanh_out));
    d_projected += params.attn_v.backward(t.projected, d_tanh);
    d_projected += params.attn_u.backward(t.projected, d_sigm);

    if (params.config.relu_proj)
        for (std::size_t i = 0; i < d_projected.data.size(); ++i)
            if (t.pre_relu.data[i] <= 0.0) d_projected.data[i] = 0.0;
    params.proj.backward(bag.features, d_projected);
}

void maxpool_backward(AmilParams& params, const FeatureBag& bag, double d_log_risk) {
    check_bag(params, bag);
    Matrix projected;
    std::vector<std::size_t> argmax;
    run_maxpool_forward(params, bag.features, &projected, &argmax);

    const std::size_t p = params.config.proj_dim;
    Matrix bag_repr(1, p);
    for (std::size_t c = 0; c < p; ++c) bag_repr(0, c) = projected(argmax[c], c);

    Matrix d_risk(1, 1);
    d_risk(0, 0) = d_log_risk;
    Matrix d_bag = params.pred.backward(bag_repr, d_risk);

    Matrix d_projected(projected.rows, p);
    for (std::size_t c = 0; c < p; ++c) d_projected(argmax[c], c) = d_bag(0, c);
    if (params.config.relu_proj) {
        // projected already went through relu; zero entries carry no gradient
        for (std::size_t i = 0; i < d_projected.data.size(); ++i)
            if (projected.data[i] <= 0.0) d_projected.data[i] = 0.0;
    }
    params.proj.backward(bag.features, d_projected);
}

namespace {

// Canonical (time, id) order shared with the loss gradient so both sides sum
// in the same sequence.
std::vector<std::size_t> loss_order(const Cohort& cohort) {
    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (cohort.records[a].time != cohort.records[b].time)
            return cohort.records[a].time < cohort.records[b].time;
        return cohort.records[a].patient_id < cohort.records[b].patient_id;
    });
    return order;
}

struct EventBlock {
    double time;
    std::size_t deaths;
    double log_sum_exp;  // over the risk set at this time
};

// Log-sum-exp over each risk set, computed streaming in descending time.
std::vector<EventBlock> risk_set_lse(const Cohort& cohort, std::span<const double> scores,
                                     std::span<const std::size_t> order) {
    std::vector<EventBlock> blocks;
    double running_max = -std::numeric_limits<double>::infinity();
    double running_sum = 0.0;
    std::size_t k = order.size();
    while (k > 0) {
        const double t = cohort.records[order[k - 1]].time;
        std::size_t deaths = 0;
        while (k > 0 && cohort.records[order[k - 1]].time == t) {
            const double h = scores[order[k - 1]];
            if (h > running_max) {
                running_sum = running_sum * std::exp(running_max - h) + 1.0;
                running_max = h;
            } else {
                running_sum += std::exp(h - running_max);
            }
            deaths += (cohort.records[order[k - 1]].event == 1);
            --k;
        }
        if (deaths > 0)
            blocks.push_back({t, deaths, running_max + std::log(running_sum)});
    }
    std::reverse(blocks.begin(), blocks.end());  // ascending time
    return blocks;
}

}  // namespace

double cox_loss(const RiskScores& scores, const Cohort& cohort, double l1_lambda,
                double params_l1_norm) {
    scores.check_alignment(cohort);
    const std::size_t n_events = cohort.n_events();
    if (n_events == 0)
        throw std::invalid_argument("cox loss undefined: cohort has no events");

    const auto order = loss_order(cohort);
    const auto values = scores.values();
    const auto blocks = risk_set_lse(cohort, values, order);

    double sum = 0.0;
    std::size_t block_idx = 0;
    for (std::size_t i : order) {
        if (cohort.records[i].event != 1) continue;
        while (blocks[block_idx].time != cohort.records[i].time) ++block_idx;
        sum += values[i] - blocks[block_idx].log_sum_exp;
    }
    return -sum / static_cast<double>(n_events) + l1_lambda * params_l1_norm;
}

std::vector<double> cox_loss_backward(const RiskScores& scores, const Cohort& cohort) {
    scores.check_alignment(cohort);
    const std::size_t n_events = cohort.n_events();
    if (n_events == 0)
        throw std::invalid_argument("cox loss undefined: cohort has no events");

    const auto order = loss_order(cohort);
    const auto values = scores.values();
    const auto blocks = risk_set_lse(cohort, values, order);
    const double inv_n = 1.0 / static_cast<double>(n_events);

    std::vector<double> grad(cohort.size(), 0.0);
    for (std::size_t k = 0; k < cohort.size(); ++k) {
        const double t_k = cohort.records[k].time;
        const double h_k = values[k];
        // k is in the risk set of every event block with time <= t_k; each
        // term exp(h_k - lse) is at most 1, so the sum is overflow-safe.
        double softmax_mass = 0.0;
        for (const auto& b : blocks) {
            if (b.time > t_k) break;
            softmax_mass += static_cast<double>(b.deaths) * std::exp(h_k - b.log_sum_exp);
        }
        grad[k] = -inv_n * (static_cast<double>(cohort.records[k].event) - softmax_mass);
    }
    return grad;
}

MlpParams::MlpParams(const MlpConfig& cfg, std::uint64_t seed) : config(cfg) {
    std::mt19937_64 rng(derive_seed(seed, 0x22));
    std::size_t in = cfg.in_dim;
    for (std::size_t h : cfg.hidden) {
        layers.emplace_back(h, in);
        layers.back().init_glorot(rng);
        in = h;
    }
    layers.emplace_back(1, in);
    layers.back().init_glorot(rng);
    center.assign(cfg.in_dim, 0.0);
    scale.assign(cfg.in_dim, 1.0);
}

std::vector<TensorRef> MlpParams::tensors() {
    std::vector<TensorRef> out;
    for (LinearLayer& l : layers) {
        out.push_back({&l.weight, &l.grad_weight});
        out.push_back({&l.bias, &l.grad_bias});
    }
    return out;
}

std::vector<const Matrix*> MlpParams::weight_matrices() const {
    std::vector<const Matrix*> out;
    for (const LinearLayer& l : layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

double MlpParams::l1_norm() const {
    double norm = 0.0;
    for (const Matrix* m : weight_matrices())
        for (double v : m->data) norm += std::abs(v);
    return norm;
}

void MlpParams::zero_grad() {
    for (LinearLayer& l : layers) l.zero_grad();
}

namespace {

Matrix standardize(const MlpParams& params, const Matrix& covariates) {
    if (covariates.cols != params.config.in_dim)
        throw std::invalid_argument("mlp: covariate width does not match input layer");
    Matrix x = covariates;
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t k = 0; k < x.cols; ++k)
            x(i, k) = (x(i, k) - params.center[k]) / params.scale[k];
    return x;
}

std::vector<Matrix> mlp_activations(const MlpParams& params, const Matrix& x_std) {
    std::vector<Matrix> acts;  // acts[0] = input, acts[i] = output of layer i-1 after activation
    acts.push_back(x_std);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        Matrix z = params.layers[l].forward(acts.back());
        const bool is_hidden = l + 1 < params.layers.size();
        if (is_hidden && !params.config.identity_activation) z = tanh_fw(z);
        acts.push_back(std::move(z));
    }
    return acts;
}

}  // namespace

std::vector<double> mlp_forward(const MlpParams& params, const Matrix& covariates) {
    const auto acts = mlp_activations(params, standardize(params, covariates));
    const Matrix& out = acts.back();
    std::vector<double> risks(out.rows);
    for (std::size_t i = 0; i < out.rows; ++i) risks[i] = out(i, 0);
    return risks;
}

void mlp_backward(MlpParams& params, const Matrix& covariates, std::span<const double> d_risks) {
    const Matrix x = standardize(params, covariates);
    if (d_risks.size() != x.rows)
        throw std::invalid_argument("mlp backward: gradient length does not match rows");
    const auto acts = mlp_activations(params, x);

    Matrix grad(x.rows, 1);
    for (std::size_t i = 0; i < x.rows; ++i) grad(i, 0) = d_risks[i];

    for (std::size_t l = params.layers.size(); l > 0; --l) {
        const std::size_t layer = l - 1;
        const bool is_hidden = l < params.layers.size();
        if (is_hidden && !params.config.identity_activation)
            grad = tanh_bw(acts[l], grad);
        grad = params.layers[layer].backward(acts[layer], grad);
    }
}

namespace {

void apply_l1_subgradient(std::span<TensorRef> refs, double l1_lambda) {
    if (l1_lambda <= 0.0) return;
    for (TensorRef& ref : refs) {
        for (std::size_t i = 0; i < ref.value->data.size(); ++i) {
            const double v = ref.value->data[i];
            if (v > 0.0)
                ref.grad->data[i] += l1_lambda;
            else if (v < 0.0)
                ref.grad->data[i] -= l1_lambda;
            // sign(0) = 0
        }
    }
}

void check_train_inputs(std::size_t n_bags, const Cohort& cohort, const TrainConfig& config) {
    cohort.validate();
    if (n_bags != cohort.size())
        throw std::invalid_argument("train: bag count does not match cohort size");
    if (config.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (config.l1_lambda < 0.0) throw std::invalid_argument("train: l1_lambda must be >= 0");
    if (cohort.n_events() == 0)
        throw std::invalid_argument("train: cohort has no events, Cox loss undefined");
}

}  // namespace

TrainResult train_amil(AmilParams& params, std::vector<FeatureBag>& bags, const Cohort& cohort,
                       const TrainConfig& config) {
    check_train_inputs(bags.size(), cohort, config);
    const ModelKind kind = config.model_kind;
    if (!(kind == ModelKind::amil || kind == ModelKind::amil_per_core ||
          kind == ModelKind::maxpool))
        throw std::invalid_argument("train_amil: unsupported model kind " + to_string(kind));
    for (std::size_t i = 0; i < bags.size(); ++i)
        if (bags[i].patient_id != cohort.records[i].patient_id)
            throw std::invalid_argument("train_amil: bag order does not match cohort");

    auto refs = params.tensors(kind);
    AdamConfig adam_cfg;
    adam_cfg.learning_rate = config.learning_rate;
    AdamOptimizer adam(refs, adam_cfg);

    TrainResult result;
    std::vector<double> risks(bags.size());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = 0; i < bags.size(); ++i) {
            const double r = uses_attention(kind) ? amil_forward(params, bags[i]).log_risk
                                                  : maxpool_forward(params, bags[i]);
            if (!std::isfinite(r))
                throw std::runtime_error("non-finite risk at epoch " + std::to_string(epoch) +
                                         " for patient " + bags[i].patient_id);
            risks[i] = r;
        }
        const RiskScores scores = RiskScores::aligned(cohort, risks);
        const double loss =
            cox_loss(scores, cohort, config.l1_lambda, params.l1_norm(kind));
        if (!std::isfinite(loss))
            throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch));
        result.loss_trace.push_back(loss);

        const auto d_scores = cox_loss_backward(scores, cohort);
        params.zero_grad(kind);
        for (std::size_t i = 0; i < bags.size(); ++i) {
            if (uses_attention(kind))
                amil_backward(params, bags[i], d_scores[i]);
            else
                maxpool_backward(params, bags[i], d_scores[i]);
        }
        apply_l1_subgradient(refs, config.l1_lambda);
        adam.step();
    }
    return result;
}

TrainResult train_mlp(MlpParams& params, const Cohort& cohort, const TrainConfig& config) {
    check_train_inputs(cohort.size(), cohort, config);
    if (config.model_kind != ModelKind::deepsurv)
        throw std::invalid_argument("train_mlp: expected model kind deepsurv");
    const std::size_t p = cohort.covariate_dim();
    if (p != params.config.in_dim)
        throw std::invalid_argument("train_mlp: covariate width does not match input layer");

    Matrix x(cohort.size(), p);
    for (std::size_t i = 0; i < cohort.size(); ++i)
        for (std::size_t k = 0; k < p; ++k) x(i, k) = cohort.records[i].covariates[k];

    // Fit the standardization on this cohort.
    for (std::size_t k = 0; k < p; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) mean += x(i, k);
        mean /= static_cast<double>(x.rows);
        double var = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) {
            const double d = x(i, k) - mean;
            var += d * d;
        }
        var /= static_cast<double>(x.rows);
        params.center[k] = mean;
        params.scale[k] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }

    auto refs = params.tensors();
    AdamConfig adam_cfg;
    adam_cfg.learning_rate = config.learning_rate;
    AdamOptimizer adam(refs, adam_cfg);

    TrainResult result;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const std::vector<double> risks = mlp_forward(params, x);
        for (std::size_t i = 0; i < risks.size(); ++i)
            if (!std::isfinite(risks[i]))
                throw std::runtime_error("non-finite risk at epoch " + std::to_string(epoch) +
                                         " for patient " + cohort.records[i].patient_id);
        const RiskScores scores = RiskScores::aligned(cohort, risks);
        const double loss = cox_loss(scores, cohort, config.l1_lambda, params.l1_norm());
        if (!std::isfinite(loss))
            throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch));
        result.loss_trace.push_back(loss);

        const auto d_scores = cox_loss_backward(scores, cohort);
        params.zero_grad();
        mlp_backward(params, x, d_scores);
        apply_l1_subgradient(refs, config.l1_lambda);
        adam.step();
    }
    return result;
}

PerCoreExpansion expand_per_core(const std::vector<std::vector<FeatureBag>>& cores_per_patient,
                                 const Cohort& cohort) {
    if (cores_per_patient.size() != cohort.size())
        throw std::invalid_argument("expand_per_core: core list does not match cohort size");
    PerCoreExpansion out;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& rec = cohort.records[i];
        if (cores_per_patient[i].empty())
            throw std::invalid_argument("expand_per_core: patient " + rec.patient_id +
                                        " has no cores");
        for (std::size_t c = 0; c < cores_per_patient[i].size(); ++c) {
            FeatureBag bag = cores_per_patient[i][c];
            bag.patient_id = rec.patient_id + "#" + std::to_string(c);
            out.bags.push_back(std::move(bag));
            SurvivalRecord expanded = rec;
            expanded.patient_id = out.bags.back().patient_id;
            expanded.covariates.clear();
            out.cohort.records.push_back(std::move(expanded));
            out.patient_of_bag.push_back(i);
        }
    }
    return out;
}

RiskScores aggregate_per_core(const PerCoreExpansion& expansion,
                              std::span<const double> core_risks, const Cohort& original) {
    if (core_risks.size() != expansion.bags.size())
        throw std::invalid_argument("aggregate_per_core: risk count does not match bags");
    std::vector<double> sums(original.size(), 0.0);
    std::vector<std::size_t> counts(original.size(), 0);
    for (std::size_t b = 0; b < core_risks.size(); ++b) {
        sums[expansion.patient_of_bag[b]] += core_risks[b];
        counts[expansion.patient_of_bag[b]] += 1;
    }
    std::vector<double> means(original.size(), 0.0);
    for (std::size_t i = 0; i < original.size(); ++i) {
        if (counts[i] == 0)
            throw std::invalid_argument("aggregate_per_core: patient " +
                                        original.records[i].patient_id + " has no cores");
        means[i] = sums[i] / static_cast<double>(counts[i]);
    }
    return RiskScores::aligned(original, means);
}

}  // namespace survmil

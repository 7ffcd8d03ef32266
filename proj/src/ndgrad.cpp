#include "survmil/ndgrad.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

namespace survmil {

namespace {

using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

ConstEigenMap map(const Matrix& m) {
    return ConstEigenMap(m.data.data(), static_cast<Eigen::Index>(m.rows),
                         static_cast<Eigen::Index>(m.cols));
}

EigenMap map(Matrix& m) {
    return EigenMap(m.data.data(), static_cast<Eigen::Index>(m.rows),
                    static_cast<Eigen::Index>(m.cols));
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

bool Matrix::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Matrix& Matrix::operator+=(const Matrix& o) {
    require(same_shape(o), "matrix += shape mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data) v *= s;
    return *this;
}

void ensure_finite(const Matrix& m, const std::string& what) {
    if (!m.all_finite())
        throw std::runtime_error("non-finite values in " + what);
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    require(a.cols == b.cols, "matmul_nt: inner dimension mismatch");
    Matrix out(a.rows, b.rows);
    map(out).noalias() = map(a) * map(b).transpose();
    return out;
}

Matrix matmul_nn(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, "matmul_nn: inner dimension mismatch");
    Matrix out(a.rows, b.cols);
    map(out).noalias() = map(a) * map(b);
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    require(a.rows == b.rows, "matmul_tn: inner dimension mismatch");
    Matrix out(a.cols, b.cols);
    map(out).noalias() = map(a).transpose() * map(b);
    return out;
}

Matrix tanh_fw(const Matrix& x) {
    Matrix y(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = std::tanh(x.data[i]);
    return y;
}

Matrix tanh_bw(const Matrix& y, const Matrix& grad_y) {
    require(y.same_shape(grad_y), "tanh_bw: shape mismatch");
    Matrix gx(y.rows, y.cols);
    for (std::size_t i = 0; i < y.data.size(); ++i)
        gx.data[i] = grad_y.data[i] * (1.0 - y.data[i] * y.data[i]);
    return gx;
}

Matrix sigmoid_fw(const Matrix& x) {
    Matrix y(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        y.data[i] = 1.0 / (1.0 + std::exp(-x.data[i]));
    return y;
}

Matrix sigmoid_bw(const Matrix& y, const Matrix& grad_y) {
    require(y.same_shape(grad_y), "sigmoid_bw: shape mismatch");
    Matrix gx(y.rows, y.cols);
    for (std::size_t i = 0; i < y.data.size(); ++i)
        gx.data[i] = grad_y.data[i] * y.data[i] * (1.0 - y.data[i]);
    return gx;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "hadamard: shape mismatch");
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

Matrix softmax_column(const Matrix& logits) {
    require(logits.cols == 1 && logits.rows >= 1, "softmax_column: expected Mx1, M >= 1");
    Matrix w(logits.rows, 1);
    double mx = logits.data[0];
    for (double v : logits.data) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.rows; ++i) {
        w.data[i] = std::exp(logits.data[i] - mx);
        sum += w.data[i];
    }
    for (std::size_t i = 0; i < logits.rows; ++i) w.data[i] /= sum;
    return w;
}

Matrix softmax_column_bw(const Matrix& weights, const Matrix& grad_weights) {
    require(weights.same_shape(grad_weights), "softmax_column_bw: shape mismatch");
    double dot = 0.0;
    for (std::size_t i = 0; i < weights.rows; ++i)
        dot += grad_weights.data[i] * weights.data[i];
    Matrix gx(weights.rows, 1);
    for (std::size_t i = 0; i < weights.rows; ++i)
        gx.data[i] = weights.data[i] * (grad_weights.data[i] - dot);
    return gx;
}

void LinearLayer::init_glorot(std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_dim() + out_dim()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& v : weight.data) v = dist(rng);
    for (double& v : bias.data) v = 0.0;
}

void LinearLayer::zero_grad() {
    std::fill(grad_weight.data.begin(), grad_weight.data.end(), 0.0);
    std::fill(grad_bias.data.begin(), grad_bias.data.end(), 0.0);
}

Matrix LinearLayer::forward(const Matrix& input) const {
    require(input.cols == in_dim(), "linear forward: input width != layer in-dim");
    Matrix out = matmul_nt(input, weight);
    for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bias.data[c];
    return out;
}

Matrix LinearLayer::backward(const Matrix& input, const Matrix& grad_output) {
    require(input.cols == in_dim(), "linear backward: input width != layer in-dim");
    require(grad_output.cols == out_dim() && grad_output.rows == input.rows,
            "linear backward: grad_output shape mismatch");
    grad_weight += matmul_tn(grad_output, input);
    for (std::size_t r = 0; r < grad_output.rows; ++r)
        for (std::size_t c = 0; c < grad_output.cols; ++c)
            grad_bias.data[c] += grad_output(r, c);
    return matmul_nn(grad_output, weight);
}

AdamOptimizer::AdamOptimizer(std::vector<TensorRef> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    first_moment_.reserve(params_.size());
    second_moment_.reserve(params_.size());
    for (const TensorRef& p : params_) {
        first_moment_.emplace_back(p.value->rows, p.value->cols);
        second_moment_.emplace_back(p.value->rows, p.value->cols);
    }
}

void AdamOptimizer::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t t = 0; t < params_.size(); ++t) {
        Matrix& value = *params_[t].value;
        const Matrix& grad = *params_[t].grad;
        Matrix& m = first_moment_[t];
        Matrix& v = second_moment_[t];
        for (std::size_t i = 0; i < value.data.size(); ++i) {
            const double g = grad.data[i];
            m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g;
            v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            value.data[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
    }
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("weight blob: truncated header field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("weight blob: truncated payload");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

constexpr char kWeightMagic[4] = {'A', 'M', 'W', '1'};

}  // namespace

void save_weights(std::ostream& os, std::span<const Matrix* const> tensors) {
    os.write(kWeightMagic, 4);
    for (const Matrix* t : tensors) {
        put_u32(os, static_cast<std::uint32_t>(t->rows));
        put_u32(os, static_cast<std::uint32_t>(t->cols));
        for (double v : t->data) put_f64(os, v);
    }
    if (!os) throw std::runtime_error("weight blob: write failed");
}

void load_weights(std::istream& is, std::span<Matrix* const> tensors) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kWeightMagic, 4) != 0)
        throw std::runtime_error("weight blob: bad magic, expected AMW1");
    for (Matrix* t : tensors) {
        const std::uint32_t r = get_u32(is);
        const std::uint32_t c = get_u32(is);
        if (r != t->rows || c != t->cols)
            throw std::runtime_error("weight blob: tensor shape mismatch (" + std::to_string(r) +
                                     "x" + std::to_string(c) + " vs expected " +
                                     std::to_string(t->rows) + "x" + std::to_string(t->cols) + ")");
        for (double& v : t->data) v = get_f64(is);
    }
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace survmil

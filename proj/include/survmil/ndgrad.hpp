#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace survmil {

/// Dense row-major matrix of doubles. The only tensor type in the toolkit;
/// a row vector is a 1xN matrix, a column vector Nx1.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    bool all_finite() const;

    Matrix& operator+=(const Matrix& o);
    Matrix& operator*=(double s);
};

/// Throws std::runtime_error naming `what` if m contains NaN or Inf.
void ensure_finite(const Matrix& m, const std::string& what);

// Dense products. a_nt(A, B) = A * B^T, a_nn(A, B) = A * B, a_tn(A, B) = A^T * B.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_nn(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Elementwise forward/backward pairs. Backward passes take the forward
// *output* (cheaper than recomputing the activation).
Matrix tanh_fw(const Matrix& x);
Matrix tanh_bw(const Matrix& y, const Matrix& grad_y);
Matrix sigmoid_fw(const Matrix& x);
Matrix sigmoid_bw(const Matrix& y, const Matrix& grad_y);
Matrix hadamard(const Matrix& a, const Matrix& b);
// d(a.b) wrt a is grad.b, wrt b is grad.a; both are plain hadamard() calls.

/// Softmax over the rows of an Mx1 column of logits, max-subtracted for
/// stability. Output entries are positive and sum to 1.
Matrix softmax_column(const Matrix& logits);
Matrix softmax_column_bw(const Matrix& weights, const Matrix& grad_weights);

/// Fully-connected layer y = x * W^T + b, weight stored out x in, bias 1 x out.
/// backward() accumulates into grad_weight/grad_bias and returns grad wrt input.
struct LinearLayer {
    Matrix weight;
    Matrix bias;
    Matrix grad_weight;
    Matrix grad_bias;

    LinearLayer() = default;
    LinearLayer(std::size_t out_dim, std::size_t in_dim)
        : weight(out_dim, in_dim), bias(1, out_dim),
          grad_weight(out_dim, in_dim), grad_bias(1, out_dim) {}

    std::size_t in_dim() const { return weight.cols; }
    std::size_t out_dim() const { return weight.rows; }

    void init_glorot(std::mt19937_64& rng);
    void zero_grad();

    Matrix forward(const Matrix& input) const;
    Matrix backward(const Matrix& input, const Matrix& grad_output);
};

/// A parameter tensor paired with its gradient buffer, as seen by the optimizer.
struct TensorRef {
    Matrix* value = nullptr;
    Matrix* grad = nullptr;
};

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Standard bias-corrected Adam over a fixed list of tensors.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<TensorRef> params, AdamConfig cfg = {});

    /// One update from the gradients currently stored in the tensors.
    void step();
    std::int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<TensorRef> params_;
    std::vector<Matrix> first_moment_;
    std::vector<Matrix> second_moment_;
    AdamConfig cfg_;
    std::int64_t step_count_ = 0;
};

// Weight blob: magic "AMW1", then per tensor u32 rows, u32 cols and the
// row-major f64 payload, all little-endian, in the order given by the caller.
void save_weights(std::ostream& os, std::span<const Matrix* const> tensors);
void load_weights(std::istream& is, std::span<Matrix* const> tensors);

/// splitmix64 step; used to derive independent seed streams from one root seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace survmil

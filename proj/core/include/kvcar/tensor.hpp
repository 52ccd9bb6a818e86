#pragma once
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace kvcar {

using Shape = std::vector<int64_t>;

enum class Mode { train, eval };

namespace detail {
struct TensorNode;
struct TensorAccess;
}

// Dense row-major float32 tensor with an optional gradient buffer.
//
// A Tensor is a cheap handle: copying shares the underlying buffer, clone()
// deep-copies. Forward ops never mutate their inputs; every op validates that
// its output is finite and throws NumericsError otherwise. When gradient
// recording is enabled (see NoGradGuard) and an input requires grad, ops
// record a backward rule; backward() replays the recorded graph in reverse
// topological order, visiting each recorded op exactly once and accumulating
// gradients additively across uses.
//
// Tensors may be handed between threads, but a given tensor must not be
// mutated concurrently. Recording and backward are single-threaded per
// training context.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor from_data(Shape shape, std::vector<float> data);
    static Tensor scalar(float value);
    static Tensor randn(Shape shape, std::mt19937& gen, float stddev);
    static Tensor rand_uniform(Shape shape, std::mt19937& gen, float lo, float hi);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    size_t ndim() const;
    int64_t dim(size_t i) const;
    int64_t numel() const;
    // 2-d conveniences (throw on other ranks)
    int64_t rows() const;
    int64_t cols() const;

    std::span<const float> data() const;
    std::span<float> mutable_data(); // for init and optimizer updates only
    float item() const;              // single-element tensors
    float at(int64_t r, int64_t c) const;

    Tensor clone() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const float> grad() const;
    std::span<float> mutable_grad();
    void zero_grad();

    detail::TensorNode* node() const { return node_.get(); }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
    friend struct detail::TensorAccess;
};

// Suppresses gradient recording for the current thread while alive (nestable).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// ---------------------------------------------------------------------------
// Forward ops. All are pure with respect to their tensor inputs.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b); // [m×k]·[k×n] → [m×n]
Tensor transpose(const Tensor& a);               // 2-d

Tensor add(const Tensor& a, const Tensor& b);    // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);    // elementwise
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor add_rows(const Tensor& x, const Tensor& bias); // x[n×f] + bias[f] on every row

Tensor leaky_relu(const Tensor& x, float slope);
Tensor gelu(const Tensor& x); // exact erf form

// Row softmax with per-row max subtraction; rows sum to 1 within 1e-6.
Tensor softmax_rows(const Tensor& x);

// Per-row zero mean / unit variance over the last extent, then gamma/beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

struct BatchNormState {
    Tensor running_mean; // [features], never requires grad
    Tensor running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;
    int64_t batches_seen = 0;

    static BatchNormState make(int64_t features);
    BatchNormState clone() const;
};

// x is [batch × features]. Train mode normalizes by batch statistics
// (population variance) and folds them into the running stats with
// `momentum`; it requires batch ≥ 2. Eval mode uses the running stats only.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, Mode mode);

Tensor sum_all(const Tensor& x); // scalar sum over every element

// Mean negative log softmax probability of the target class.
// logits is [n × vocab], targets holds n class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets);
// Mean absolute difference over all elements.
Tensor l1_loss(const Tensor& a, const Tensor& b);

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1); // [r0, r1)
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& table, std::span<const int32_t> ids);

// Reverse-mode sweep from a scalar loss recorded on the graph.
void backward(const Tensor& loss);

// Plain gradient descent: p ← p − lr·grad, then grads are zeroed.
// Every parameter must have a populated gradient buffer.
void sgd_step(std::span<Tensor> params, double lr);

// FNV-1a over the raw float bytes; used to assert bitwise immutability.
uint64_t data_hash(const Tensor& t);

} // namespace kvcar

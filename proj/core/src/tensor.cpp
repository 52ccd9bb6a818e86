#include "kvcar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <unordered_set>

#include "kvcar/error.hpp"

namespace kvcar {

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

struct TensorAccess {
    static Tensor wrap(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }
    static std::shared_ptr<TensorNode> share(const Tensor& t) { return t.node_; }
};

} // namespace detail

using detail::TensorNode;

namespace {

thread_local int g_no_grad_depth = 0;

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive");
        n *= e;
    }
    return n;
}

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<float> data) {
    auto node = std::make_shared<TensorNode>();
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(data.size()))
        throw ShapeError("data length does not match shape product");
    node->shape = std::move(shape);
    node->data = std::move(data);
    return node;
}

void check_finite(const char* op, std::span<const float> values) {
    for (float v : values) {
        if (!std::isfinite(v))
            throw NumericsError(std::string(op) + ": non-finite value produced");
    }
}

void require_2d(const char* op, const Tensor& t) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected a 2-d tensor");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shape mismatch");
}

// Builds the result node and, when recording applies, attaches parents and
// the backward rule.
Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<std::shared_ptr<TensorNode>> parents,
                   std::function<void(TensorNode&)> backward_fn) {
    auto node = make_node(std::move(shape), std::move(data));
    node->op = op;
    check_finite(op, node->data);
    bool record = grad_enabled();
    if (record) {
        bool any = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) any = true;
        record = any;
    }
    if (record) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return detail::TensorAccess::wrap(std::move(node));
}

// Keeps the parent alive through the graph (shared ownership).
std::shared_ptr<TensorNode> share(const Tensor& t) {
    if (!t.defined()) throw ShapeError("undefined tensor");
    return detail::TensorAccess::share(t);
}

void accumulate(TensorNode& into, std::span<const float> delta) {
    into.ensure_grad();
    for (size_t i = 0; i < delta.size(); ++i) into.grad[i] += delta[i];
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
    int64_t n = shape_numel(shape);
    return detail::TensorAccess::wrap(make_node(std::move(shape), std::vector<float>(n, 0.0f)));
}

Tensor Tensor::full(Shape shape, float value) {
    int64_t n = shape_numel(shape);
    if (!std::isfinite(value)) throw NumericsError("full: non-finite fill value");
    return detail::TensorAccess::wrap(make_node(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
    auto node = make_node(std::move(shape), std::move(data));
    check_finite("from_data", node->data);
    return detail::TensorAccess::wrap(std::move(node));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

Tensor Tensor::randn(Shape shape, std::mt19937& gen, float stddev) {
    int64_t n = shape_numel(shape);
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> data(n);
    for (auto& v : data) v = dist(gen);
    return from_data(std::move(shape), std::move(data));
}

Tensor Tensor::rand_uniform(Shape shape, std::mt19937& gen, float lo, float hi) {
    int64_t n = shape_numel(shape);
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> data(n);
    for (auto& v : data) v = dist(gen);
    return from_data(std::move(shape), std::move(data));
}

const Shape& Tensor::shape() const {
    if (!node_) throw ShapeError("undefined tensor");
    return node_->shape;
}

size_t Tensor::ndim() const { return shape().size(); }

int64_t Tensor::dim(size_t i) const {
    const auto& s = shape();
    if (i >= s.size()) throw ShapeError("dim index out of range");
    return s[i];
}

int64_t Tensor::numel() const {
    if (!node_) return 0;
    return node_->numel();
}

int64_t Tensor::rows() const {
    require_2d("rows", *this);
    return node_->shape[0];
}

int64_t Tensor::cols() const {
    require_2d("cols", *this);
    return node_->shape[1];
}

std::span<const float> Tensor::data() const {
    if (!node_) throw ShapeError("undefined tensor");
    return node_->data;
}

std::span<float> Tensor::mutable_data() {
    if (!node_) throw ShapeError("undefined tensor");
    return node_->data;
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
    return node_->data[0];
}

float Tensor::at(int64_t r, int64_t c) const {
    require_2d("at", *this);
    if (r < 0 || r >= node_->shape[0] || c < 0 || c >= node_->shape[1])
        throw ShapeError("at: index out of range");
    return node_->data[static_cast<size_t>(r * node_->shape[1] + c)];
}

Tensor Tensor::clone() const {
    if (!node_) return Tensor();
    Tensor t = from_data(node_->shape, node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    if (!node_) throw ShapeError("undefined tensor");
    node_->requires_grad = value;
    return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
    if (!has_grad()) throw ConfigError("tensor has no gradient buffer");
    return node_->grad;
}

std::span<float> Tensor::mutable_grad() {
    if (!node_) throw ShapeError("undefined tensor");
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw ShapeError("matmul: inner extents do not match");

    std::vector<float> out(static_cast<size_t>(m * n));
    {
        const float* ad = a.data().data();
        const float* bd = b.data().data();
        std::vector<double> acc(static_cast<size_t>(n));
        for (int64_t i = 0; i < m; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int64_t p = 0; p < k; ++p) {
                const double av = ad[i * k + p];
                const float* brow = bd + p * n;
                for (int64_t j = 0; j < n; ++j) acc[j] += av * brow[j];
            }
            for (int64_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(acc[j]);
        }
    }

    auto pa = share(a), pb = share(b);
    return make_result(
        "matmul", {m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](TensorNode& node) {
            const float* g = node.grad.data();
            if (pa->requires_grad) {
                pa->ensure_grad();
                const float* bd = pb->data.data();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        double s = 0;
                        const float* grow = g + i * n;
                        const float* brow = bd + p * n;
                        for (int64_t j = 0; j < n; ++j) s += double(grow[j]) * brow[j];
                        pa->grad[i * k + p] += static_cast<float>(s);
                    }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                const float* ad = pa->data.data();
                for (int64_t p = 0; p < k; ++p)
                    for (int64_t j = 0; j < n; ++j) {
                        double s = 0;
                        for (int64_t i = 0; i < m; ++i) s += double(ad[i * k + p]) * g[i * n + j];
                        pb->grad[p * n + j] += static_cast<float>(s);
                    }
            }
        });
}

Tensor transpose(const Tensor& a) {
    require_2d("transpose", a);
    const int64_t m = a.dim(0), n = a.dim(1);
    std::vector<float> out(static_cast<size_t>(m * n));
    const float* ad = a.data().data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
    auto pa = share(a);
    return make_result("transpose", {n, m}, std::move(out), {pa}, [pa, m, n](TensorNode& node) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t j = 0; j < n; ++j)
            for (int64_t i = 0; i < m; ++i) pa->grad[i * n + j] += node.grad[j * m + i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<float> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    auto pa = share(a), pb = share(b);
    return make_result("add", a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode& node) {
        if (pa->requires_grad) accumulate(*pa, node.grad);
        if (pb->requires_grad) accumulate(*pb, node.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<float> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    auto pa = share(a), pb = share(b);
    return make_result("sub", a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode& node) {
        if (pa->requires_grad) accumulate(*pa, node.grad);
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) pb->grad[i] -= node.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<float> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    auto pa = share(a), pb = share(b);
    return make_result("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode& node) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) pa->grad[i] += node.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) pb->grad[i] += node.grad[i] * pa->data[i];
        }
    });
}

Tensor add_scalar(const Tensor& a, float s) {
    if (!std::isfinite(s)) throw NumericsError("add_scalar: non-finite scalar");
    std::vector<float> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += s;
    auto pa = share(a);
    return make_result("add_scalar", a.shape(), std::move(out), {pa}, [pa](TensorNode& node) {
        if (pa->requires_grad) accumulate(*pa, node.grad);
    });
}

Tensor mul_scalar(const Tensor& a, float s) {
    if (!std::isfinite(s)) throw NumericsError("mul_scalar: non-finite scalar");
    std::vector<float> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= s;
    auto pa = share(a);
    return make_result("mul_scalar", a.shape(), std::move(out), {pa}, [pa, s](TensorNode& node) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) pa->grad[i] += node.grad[i] * s;
    });
}

Tensor add_rows(const Tensor& x, const Tensor& bias) {
    require_2d("add_rows", x);
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("add_rows: bias length must equal the column count");
    const int64_t n = x.dim(0), f = x.dim(1);
    std::vector<float> out(x.data().begin(), x.data().end());
    const auto bd = bias.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < f; ++j) out[i * f + j] += bd[j];
    auto px = share(x), pb = share(bias);
    return make_result("add_rows", x.shape(), std::move(out), {px, pb}, [px, pb, n, f](TensorNode& node) {
        if (px->requires_grad) accumulate(*px, node.grad);
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t j = 0; j < f; ++j) {
                double s = 0;
                for (int64_t i = 0; i < n; ++i) s += node.grad[i * f + j];
                pb->grad[j] += static_cast<float>(s);
            }
        }
    });
}

Tensor leaky_relu(const Tensor& x, float slope) {
    std::vector<float> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v >= 0.0f ? v : slope * v;
    auto px = share(x);
    return make_result("leaky_relu", x.shape(), std::move(out), {px}, [px, slope](TensorNode& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i)
            px->grad[i] += node.grad[i] * (px->data[i] >= 0.0f ? 1.0f : slope);
    });
}

namespace {
inline float gelu_value(float x) {
    return 0.5f * x * (1.0f + std::erf(x * float(M_SQRT1_2)));
}
inline float gelu_derivative(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * float(M_SQRT1_2)));
    const float pdf = std::exp(-0.5f * x * x) * 0.3989422804014327f; // 1/sqrt(2*pi)
    return cdf + x * pdf;
}
} // namespace

Tensor gelu(const Tensor& x) {
    std::vector<float> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = gelu_value(v);
    auto px = share(x);
    return make_result("gelu", x.shape(), std::move(out), {px}, [px](TensorNode& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i)
            px->grad[i] += node.grad[i] * gelu_derivative(px->data[i]);
    });
}

Tensor softmax_rows(const Tensor& x) {
    require_2d("softmax_rows", x);
    const int64_t n = x.dim(0), f = x.dim(1);
    std::vector<float> out(static_cast<size_t>(n * f));
    const float* xd = x.data().data();
    for (int64_t i = 0; i < n; ++i) {
        const float* row = xd + i * f;
        float mx = row[0];
        for (int64_t j = 1; j < f; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int64_t j = 0; j < f; ++j) {
            const double e = std::exp(double(row[j]) - mx);
            out[i * f + j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j < f; ++j) out[i * f + j] = static_cast<float>(out[i * f + j] * inv);
    }
    auto px = share(x);
    return make_result("softmax_rows", x.shape(), std::move(out), {px}, [px, n, f](TensorNode& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const float* s = node.data.data() + i * f;
            const float* g = node.grad.data() + i * f;
            double dot = 0;
            for (int64_t j = 0; j < f; ++j) dot += double(g[j]) * s[j];
            for (int64_t j = 0; j < f; ++j)
                px->grad[i * f + j] += static_cast<float>(s[j] * (double(g[j]) - dot));
        }
    });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    require_2d("layernorm", x);
    const int64_t n = x.dim(0), f = x.dim(1);
    if (gamma.ndim() != 1 || gamma.dim(0) != f || beta.ndim() != 1 || beta.dim(0) != f)
        throw ShapeError("layernorm: gamma/beta length must equal the last extent");

    std::vector<float> out(static_cast<size_t>(n * f));
    std::vector<float> xhat(static_cast<size_t>(n * f));
    std::vector<float> inv_std(static_cast<size_t>(n));
    const float* xd = x.data().data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    for (int64_t i = 0; i < n; ++i) {
        const float* row = xd + i * f;
        double mean = 0;
        for (int64_t j = 0; j < f; ++j) mean += row[j];
        mean /= f;
        double var = 0;
        for (int64_t j = 0; j < f; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= f;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = static_cast<float>(istd);
        for (int64_t j = 0; j < f; ++j) {
            const float h = static_cast<float>((row[j] - mean) * istd);
            xhat[i * f + j] = h;
            out[i * f + j] = h * gd[j] + bd[j];
        }
    }

    auto px = share(x), pg = share(gamma), pb = share(beta);
    auto xh = std::make_shared<std::vector<float>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<float>>(std::move(inv_std));
    return make_result("layernorm", x.shape(), std::move(out), {px, pg, pb},
                       [px, pg, pb, xh, istd, n, f](TensorNode& node) {
                           const float* g = node.grad.data();
                           if (pg->requires_grad) {
                               pg->ensure_grad();
                               for (int64_t j = 0; j < f; ++j) {
                                   double s = 0;
                                   for (int64_t i = 0; i < n; ++i) s += double(g[i * f + j]) * (*xh)[i * f + j];
                                   pg->grad[j] += static_cast<float>(s);
                               }
                           }
                           if (pb->requires_grad) {
                               pb->ensure_grad();
                               for (int64_t j = 0; j < f; ++j) {
                                   double s = 0;
                                   for (int64_t i = 0; i < n; ++i) s += g[i * f + j];
                                   pb->grad[j] += static_cast<float>(s);
                               }
                           }
                           if (px->requires_grad) {
                               px->ensure_grad();
                               for (int64_t i = 0; i < n; ++i) {
                                   double mean_gy = 0, mean_gyh = 0;
                                   for (int64_t j = 0; j < f; ++j) {
                                       const double gy = double(g[i * f + j]) * pg->data[j];
                                       mean_gy += gy;
                                       mean_gyh += gy * (*xh)[i * f + j];
                                   }
                                   mean_gy /= f;
                                   mean_gyh /= f;
                                   for (int64_t j = 0; j < f; ++j) {
                                       const double gy = double(g[i * f + j]) * pg->data[j];
                                       const double h = (*xh)[i * f + j];
                                       px->grad[i * f + j] +=
                                           static_cast<float>((gy - mean_gy - h * mean_gyh) * (*istd)[i]);
                                   }
                               }
                           }
                       });
}

BatchNormState BatchNormState::make(int64_t features) {
    BatchNormState s;
    s.running_mean = Tensor::zeros({features});
    s.running_var = Tensor::full({features}, 1.0f);
    return s;
}

BatchNormState BatchNormState::clone() const {
    BatchNormState s;
    s.running_mean = running_mean.clone();
    s.running_var = running_var.clone();
    s.momentum = momentum;
    s.eps = eps;
    s.batches_seen = batches_seen;
    return s;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, Mode mode) {
    require_2d("batchnorm", x);
    const int64_t n = x.dim(0), f = x.dim(1);
    if (gamma.ndim() != 1 || gamma.dim(0) != f || beta.ndim() != 1 || beta.dim(0) != f)
        throw ShapeError("batchnorm: gamma/beta length must equal the feature count");
    if (state.running_mean.numel() != f || state.running_var.numel() != f)
        throw ShapeError("batchnorm: running stats length must equal the feature count");
    if (mode == Mode::train && n < 2)
        throw ShapeError("batchnorm: train mode requires a batch of at least 2");

    const float* xd = x.data().data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<float> out(static_cast<size_t>(n * f));

    if (mode == Mode::eval) {
        const auto rm = state.running_mean.data();
        const auto rv = state.running_var.data();
        std::vector<float> scale(static_cast<size_t>(f));
        for (int64_t j = 0; j < f; ++j)
            scale[j] = 1.0f / std::sqrt(rv[j] + state.eps);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < f; ++j)
                out[i * f + j] = (xd[i * f + j] - rm[j]) * scale[j] * gd[j] + bd[j];

        auto px = share(x), pg = share(gamma), pb = share(beta);
        auto sc = std::make_shared<std::vector<float>>(std::move(scale));
        std::vector<float> rm_copy(rm.begin(), rm.end());
        auto rm_saved = std::make_shared<std::vector<float>>(std::move(rm_copy));
        return make_result("batchnorm_eval", x.shape(), std::move(out), {px, pg, pb},
                           [px, pg, pb, sc, rm_saved, n, f](TensorNode& node) {
                               const float* g = node.grad.data();
                               if (pg->requires_grad) {
                                   pg->ensure_grad();
                                   for (int64_t j = 0; j < f; ++j) {
                                       double s = 0;
                                       for (int64_t i = 0; i < n; ++i)
                                           s += double(g[i * f + j]) *
                                                (px->data[i * f + j] - (*rm_saved)[j]) * (*sc)[j];
                                       pg->grad[j] += static_cast<float>(s);
                                   }
                               }
                               if (pb->requires_grad) {
                                   pb->ensure_grad();
                                   for (int64_t j = 0; j < f; ++j) {
                                       double s = 0;
                                       for (int64_t i = 0; i < n; ++i) s += g[i * f + j];
                                       pb->grad[j] += static_cast<float>(s);
                                   }
                               }
                               if (px->requires_grad) {
                                   px->ensure_grad();
                                   for (int64_t i = 0; i < n; ++i)
                                       for (int64_t j = 0; j < f; ++j)
                                           px->grad[i * f + j] += g[i * f + j] * (*sc)[j] * pg->data[j];
                               }
                           });
    }

    // Train mode: batch statistics (population variance) plus running update.
    std::vector<float> xhat(static_cast<size_t>(n * f));
    std::vector<float> inv_std(static_cast<size_t>(f));
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (int64_t j = 0; j < f; ++j) {
        double mean = 0;
        for (int64_t i = 0; i < n; ++i) mean += xd[i * f + j];
        mean /= n;
        double var = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = xd[i * f + j] - mean;
            var += d * d;
        }
        var /= n;
        const double istd = 1.0 / std::sqrt(var + state.eps);
        inv_std[j] = static_cast<float>(istd);
        for (int64_t i = 0; i < n; ++i) {
            const float h = static_cast<float>((xd[i * f + j] - mean) * istd);
            xhat[i * f + j] = h;
            out[i * f + j] = h * gd[j] + bd[j];
        }
        rm[j] = (1.0f - state.momentum) * rm[j] + state.momentum * static_cast<float>(mean);
        rv[j] = (1.0f - state.momentum) * rv[j] + state.momentum * static_cast<float>(var);
    }
    state.batches_seen++;

    auto px = share(x), pg = share(gamma), pb = share(beta);
    auto xh = std::make_shared<std::vector<float>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<float>>(std::move(inv_std));
    return make_result("batchnorm", x.shape(), std::move(out), {px, pg, pb},
                       [px, pg, pb, xh, istd, n, f](TensorNode& node) {
                           const float* g = node.grad.data();
                           if (pg->requires_grad) {
                               pg->ensure_grad();
                               for (int64_t j = 0; j < f; ++j) {
                                   double s = 0;
                                   for (int64_t i = 0; i < n; ++i) s += double(g[i * f + j]) * (*xh)[i * f + j];
                                   pg->grad[j] += static_cast<float>(s);
                               }
                           }
                           if (pb->requires_grad) {
                               pb->ensure_grad();
                               for (int64_t j = 0; j < f; ++j) {
                                   double s = 0;
                                   for (int64_t i = 0; i < n; ++i) s += g[i * f + j];
                                   pb->grad[j] += static_cast<float>(s);
                               }
                           }
                           if (px->requires_grad) {
                               px->ensure_grad();
                               for (int64_t j = 0; j < f; ++j) {
                                   double mean_gy = 0, mean_gyh = 0;
                                   for (int64_t i = 0; i < n; ++i) {
                                       const double gy = double(g[i * f + j]) * pg->data[j];
                                       mean_gy += gy;
                                       mean_gyh += gy * (*xh)[i * f + j];
                                   }
                                   mean_gy /= n;
                                   mean_gyh /= n;
                                   for (int64_t i = 0; i < n; ++i) {
                                       const double gy = double(g[i * f + j]) * pg->data[j];
                                       const double h = (*xh)[i * f + j];
                                       px->grad[i * f + j] +=
                                           static_cast<float>((gy - mean_gy - h * mean_gyh) * (*istd)[j]);
                                   }
                               }
                           }
                       });
}

Tensor sum_all(const Tensor& x) {
    double total = 0;
    for (float v : x.data()) total += v;
    std::vector<float> out{static_cast<float>(total)};
    auto px = share(x);
    return make_result("sum_all", {1}, std::move(out), {px}, [px](TensorNode& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (auto& g : px->grad) g += node.grad[0];
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets) {
    require_2d("cross_entropy", logits);
    const int64_t n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != n)
        throw ShapeError("cross_entropy: one target per logits row required");
    for (int32_t t : targets)
        if (t < 0 || t >= v) throw ShapeError("cross_entropy: class index out of range");

    const float* ld = logits.data().data();
    double total = 0;
    std::vector<float> lse(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const float* row = ld + i * v;
        float mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int64_t j = 0; j < v; ++j) sum += std::exp(double(row[j]) - mx);
        const double l = mx + std::log(sum);
        lse[i] = static_cast<float>(l);
        total += l - row[targets[i]];
    }
    std::vector<float> out{static_cast<float>(total / n)};

    auto pl = share(logits);
    std::vector<int32_t> tgt(targets.begin(), targets.end());
    auto ls = std::make_shared<std::vector<float>>(std::move(lse));
    auto tg = std::make_shared<std::vector<int32_t>>(std::move(tgt));
    return make_result("cross_entropy", {1}, std::move(out), {pl}, [pl, ls, tg, n, v](TensorNode& node) {
        if (!pl->requires_grad) return;
        pl->ensure_grad();
        const float g = node.grad[0] / static_cast<float>(n);
        for (int64_t i = 0; i < n; ++i) {
            const float* row = pl->data.data() + i * v;
            float* grow = pl->grad.data() + i * v;
            for (int64_t j = 0; j < v; ++j) {
                const float p = std::exp(row[j] - (*ls)[i]);
                grow[j] += g * (p - (j == (*tg)[i] ? 1.0f : 0.0f));
            }
        }
    });
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    require_same_shape("l1_loss", a, b);
    const auto ad = a.data();
    const auto bd = b.data();
    double total = 0;
    for (size_t i = 0; i < ad.size(); ++i) total += std::abs(double(ad[i]) - bd[i]);
    const int64_t n = a.numel();
    std::vector<float> out{static_cast<float>(total / n)};
    auto pa = share(a), pb = share(b);
    return make_result("l1_loss", {1}, std::move(out), {pa, pb}, [pa, pb, n](TensorNode& node) {
        const float g = node.grad[0] / static_cast<float>(n);
        for (size_t i = 0; i < pa->data.size(); ++i) {
            const float d = pa->data[i] - pb->data[i];
            const float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
            if (pa->requires_grad) {
                pa->ensure_grad();
                pa->grad[i] += g * s;
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                pb->grad[i] -= g * s;
            }
        }
    });
}

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
    require_2d("slice_rows", x);
    const int64_t n = x.dim(0), f = x.dim(1);
    if (r0 < 0 || r1 > n || r0 >= r1) throw ShapeError("slice_rows: invalid row range");
    std::vector<float> out(x.data().begin() + r0 * f, x.data().begin() + r1 * f);
    auto px = share(x);
    return make_result("slice_rows", {r1 - r0, f}, std::move(out), {px}, [px, r0, f](TensorNode& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        const int64_t rows = node.shape[0];
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < f; ++j) px->grad[(r0 + i) * f + j] += node.grad[i * f + j];
    });
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
    require_2d("slice_cols", x);
    const int64_t n = x.dim(0), f = x.dim(1);
    if (c0 < 0 || c1 > f || c0 >= c1) throw ShapeError("slice_cols: invalid column range");
    const int64_t w = c1 - c0;
    std::vector<float> out(static_cast<size_t>(n * w));
    const float* xd = x.data().data();
    for (int64_t i = 0; i < n; ++i)
        std::copy(xd + i * f + c0, xd + i * f + c1, out.begin() + i * w);
    auto px = share(x);
    return make_result("slice_cols", {n, w}, std::move(out), {px}, [px, c0, f, w, n](TensorNode& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < w; ++j) px->grad[i * f + c0 + j] += node.grad[i * w + j];
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int64_t f = parts[0].cols();
    int64_t n = 0;
    for (const auto& p : parts) {
        require_2d("concat_rows", p);
        if (p.dim(1) != f) throw ShapeError("concat_rows: column counts differ");
        n += p.dim(0);
    }
    std::vector<float> out;
    out.reserve(static_cast<size_t>(n * f));
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<int64_t> row_counts;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(share(p));
        row_counts.push_back(p.dim(0));
    }
    auto rc = std::make_shared<std::vector<int64_t>>(std::move(row_counts));
    auto ps = std::make_shared<std::vector<std::shared_ptr<TensorNode>>>(parents);
    return make_result("concat_rows", {n, f}, std::move(out), std::move(parents),
                       [ps, rc, f](TensorNode& node) {
                           int64_t r = 0;
                           for (size_t k = 0; k < ps->size(); ++k) {
                               auto& p = (*ps)[k];
                               const int64_t pr = (*rc)[k];
                               if (p->requires_grad) {
                                   p->ensure_grad();
                                   for (int64_t i = 0; i < pr * f; ++i) p->grad[i] += node.grad[r * f + i];
                               }
                               r += pr;
                           }
                       });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int64_t n = parts[0].rows();
    int64_t f = 0;
    for (const auto& p : parts) {
        require_2d("concat_cols", p);
        if (p.dim(0) != n) throw ShapeError("concat_cols: row counts differ");
        f += p.dim(1);
    }
    std::vector<float> out(static_cast<size_t>(n * f));
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<int64_t> col_counts;
    int64_t c = 0;
    for (const auto& p : parts) {
        const int64_t w = p.dim(1);
        const float* pd = p.data().data();
        for (int64_t i = 0; i < n; ++i)
            std::copy(pd + i * w, pd + (i + 1) * w, out.begin() + i * f + c);
        parents.push_back(share(p));
        col_counts.push_back(w);
        c += w;
    }
    auto cc = std::make_shared<std::vector<int64_t>>(std::move(col_counts));
    auto ps = std::make_shared<std::vector<std::shared_ptr<TensorNode>>>(parents);
    return make_result("concat_cols", {n, f}, std::move(out), std::move(parents),
                       [ps, cc, n, f](TensorNode& node) {
                           int64_t c0 = 0;
                           for (size_t k = 0; k < ps->size(); ++k) {
                               auto& p = (*ps)[k];
                               const int64_t w = (*cc)[k];
                               if (p->requires_grad) {
                                   p->ensure_grad();
                                   for (int64_t i = 0; i < n; ++i)
                                       for (int64_t j = 0; j < w; ++j)
                                           p->grad[i * w + j] += node.grad[i * f + c0 + j];
                               }
                               c0 += w;
                           }
                       });
}

Tensor gather_rows(const Tensor& table, std::span<const int32_t> ids) {
    require_2d("gather_rows", table);
    const int64_t v = table.dim(0), f = table.dim(1);
    const int64_t n = static_cast<int64_t>(ids.size());
    if (n == 0) throw ShapeError("gather_rows: empty id list");
    for (int32_t id : ids)
        if (id < 0 || id >= v) throw ShapeError("gather_rows: row id out of range");
    std::vector<float> out(static_cast<size_t>(n * f));
    const float* td = table.data().data();
    for (int64_t i = 0; i < n; ++i)
        std::copy(td + ids[i] * f, td + (ids[i] + 1) * f, out.begin() + i * f);
    auto pt = share(table);
    auto idv = std::make_shared<std::vector<int32_t>>(ids.begin(), ids.end());
    return make_result("gather_rows", {n, f}, std::move(out), {pt}, [pt, idv, f](TensorNode& node) {
        if (!pt->requires_grad) return;
        pt->ensure_grad();
        const int64_t n2 = node.shape[0];
        for (int64_t i = 0; i < n2; ++i)
            for (int64_t j = 0; j < f; ++j) pt->grad[(*idv)[i] * f + j] += node.grad[i * f + j];
    });
}

// ---------------------------------------------------------------------------
// Backward and optimizer
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward: loss must be a scalar tensor");
    TensorNode* root = loss.node();
    if (!root->requires_grad)
        throw ConfigError("backward: loss is not attached to a recorded graph");

    // Iterative post-order DFS; the resulting list is topologically sorted
    // (inputs precede consumers), so the reverse visits each op once after
    // all of its consumers have contributed gradient.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        Frame& fr = stack.back();
        if (fr.next_parent < fr.node->parents.size()) {
            TensorNode* p = fr.node->parents[fr.next_parent++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(fr.node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0f;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

void sgd_step(std::span<Tensor> params, double lr) {
    for (auto& p : params) {
        if (!p.defined()) throw ConfigError("sgd_step: undefined parameter");
        if (!p.has_grad()) throw ConfigError("sgd_step: parameter is missing its gradient");
    }
    for (auto& p : params) {
        auto d = p.mutable_data();
        auto g = p.grad();
        for (size_t i = 0; i < d.size(); ++i)
            d[i] = static_cast<float>(d[i] - lr * g[i]);
        p.zero_grad();
    }
}

uint64_t data_hash(const Tensor& t) {
    uint64_t h = 1469598103934665603ull;
    for (float v : t.data()) {
        uint32_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        for (int s = 0; s < 32; s += 8) {
            h ^= (bits >> s) & 0xff;
            h *= 1099511628211ull;
        }
    }
    return h;
}

} // namespace kvcar

#pragma once

// Dense f32 tensor with reverse-mode autodiff. The op surface is exactly what
// the language model and prompt networks need: matmul, add (same-shape or
// bias over the last axis), elementwise mul, tanh, row softmax, layernorm,
// embedding lookup, 2-D slice/concat/transpose, scalar scale, and a fused
// cross-entropy-from-logits. Values are stored in f32; every reduction
// (dot products, softmax sums, layernorm moments, log-sum-exp) accumulates
// in f64. Results with a single element additionally keep the f64 value of
// their final reduction, which `item_f64()` exposes; the finite-difference
// oracle depends on that extra precision.
//
// Graph recording is implicit: an op records a node iff any input requires
// grad, so inference on frozen weights builds no graph at all.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "msp/rng.hpp"

namespace msp {

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

enum class OpKind : uint8_t {
    matmul,
    add,
    mul,
    tanh,
    softmax_lastdim,
    layernorm,
    embedding_lookup,
    slice,
    concat_axis,
    transpose,
    scale,
    cross_entropy_logits,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::tanh: return "tanh";
        case OpKind::softmax_lastdim: return "softmax_lastdim";
        case OpKind::layernorm: return "layernorm";
        case OpKind::embedding_lookup: return "embedding_lookup";
        case OpKind::slice: return "slice";
        case OpKind::concat_axis: return "concat_axis";
        case OpKind::transpose: return "transpose";
        case OpKind::scale: return "scale";
        case OpKind::cross_entropy_logits: return "cross_entropy_logits";
    }
    return "?";
}

// Per-op parameters that are not tensors.
struct OpAttrs {
    int axis = 0;                 // concat_axis
    int row0 = 0, row1 = 0;       // slice
    int col0 = 0, col1 = 0;       // slice
    float factor = 1.0f;          // scale; layernorm eps
    std::vector<int> indices;     // embedding ids / cross-entropy targets
    std::vector<float> weights;   // cross-entropy: per-row weights (fused scalar mode)
};

namespace detail {

struct TensorImpl;

struct OpNode {
    OpKind kind;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    TensorImpl* out = nullptr;
    OpAttrs attrs;
    std::vector<float> saved;     // softmax/CE probabilities
    std::vector<double> saved64;  // layernorm per-row mean and rstd
};

struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> value;
    bool requires_grad = false;
    std::vector<float> grad;               // allocated lazily, same size as value
    std::unique_ptr<OpNode> node;          // null for leaves
    double scalar64 = std::numeric_limits<double>::quiet_NaN();
    bool backward_done = false;

    size_t numel() const { return value.size(); }

    // Every tensor is viewed as rows x cols; rank-1 is one row.
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 1 : shape[0]); }

    double f64() const {
        return std::isnan(scalar64) ? static_cast<double>(value.empty() ? 0.0f : value[0])
                                    : scalar64;
    }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

inline size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto impl = std::make_shared<detail::TensorImpl>();
        size_t n = detail::shape_numel(shape);
        impl->shape = std::move(shape);
        impl->value.assign(n, 0.0f);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor full(std::vector<int> shape, float v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw ShapeError("from_data: shape does not match data length");
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = std::move(shape);
        impl->value = std::move(data);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (float& v : t.impl_->value) v = static_cast<float>(rng.normal(0.0, stddev));
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rows() const { return impl_->rows(); }
    int cols() const { return impl_->cols(); }
    size_t numel() const { return impl_->numel(); }
    bool requires_grad() const { return impl_->requires_grad; }

    std::vector<float>& data() { return impl_->value; }
    const std::vector<float>& data() const { return impl_->value; }

    float at(int r, int c) const { return impl_->value[static_cast<size_t>(r) * cols() + c]; }

    float item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
        return impl_->value[0];
    }

    // f64 value of a scalar produced by a reduction; falls back to the f32 value.
    double item_f64() const {
        if (numel() != 1) throw ShapeError("item_f64: tensor is not a scalar");
        return impl_->f64();
    }

    std::vector<float>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<float>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    }

    // Copy of the values as a fresh leaf with no graph history.
    Tensor detached(bool requires_grad = false) const {
        return from_data(impl_->shape, impl_->value, requires_grad);
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor apply(OpKind, const std::vector<Tensor>&, OpAttrs);
};

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

namespace detail {

inline void check_finite(const TensorImpl& t, OpKind kind) {
    for (float v : t.value) {
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value in output of ") + op_name(kind));
    }
}

inline void require(bool cond, const char* what) {
    if (!cond) throw ShapeError(what);
}

inline bool is_bias_shape(const TensorImpl& a, const TensorImpl& b) {
    // b broadcast over the last axis of a: b is a single row of matching width
    return b.rows() == 1 && a.cols() == b.cols() && a.rows() > 1;
}

inline void forward_matmul(const TensorImpl& a, const TensorImpl& b, TensorImpl& out) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    require(b.rows() == k, "matmul: inner dimensions differ");
    std::vector<double> acc(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a.value.data() + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            const float* brow = b.value.data() + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) acc[j] += av * brow[j];
        }
        float* orow = out.value.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
        if (m == 1 && n == 1) out.scalar64 = acc[0];
    }
}

inline void forward_add(const TensorImpl& a, const TensorImpl& b, TensorImpl& out) {
    if (a.shape == b.shape || (a.numel() == b.numel() && a.rows() == b.rows())) {
        for (size_t i = 0; i < a.numel(); ++i) out.value[i] = a.value[i] + b.value[i];
        if (out.numel() == 1) out.scalar64 = a.f64() + b.f64();
    } else if (is_bias_shape(a, b)) {
        const int m = a.rows(), n = a.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out.value[static_cast<size_t>(i) * n + j] =
                    a.value[static_cast<size_t>(i) * n + j] + b.value[j];
    } else {
        throw ShapeError("add: shapes incompatible (same shape or row bias only)");
    }
}

inline void forward_mul(const TensorImpl& a, const TensorImpl& b, TensorImpl& out) {
    require(a.numel() == b.numel() && a.rows() == b.rows(), "mul: shapes differ");
    for (size_t i = 0; i < a.numel(); ++i) out.value[i] = a.value[i] * b.value[i];
    if (out.numel() == 1) out.scalar64 = a.f64() * b.f64();
}

inline void forward_tanh(const TensorImpl& a, TensorImpl& out) {
    for (size_t i = 0; i < a.numel(); ++i) out.value[i] = std::tanh(a.value[i]);
}

inline void forward_softmax(const TensorImpl& a, TensorImpl& out) {
    const int m = a.rows(), n = a.cols();
    require(n >= 1, "softmax: empty rows");
    for (int i = 0; i < m; ++i) {
        const float* row = a.value.data() + static_cast<size_t>(i) * n;
        float* orow = out.value.data() + static_cast<size_t>(i) * n;
        float mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            const double e = std::exp(static_cast<double>(row[j]) - mx);
            orow[j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < n; ++j) orow[j] = static_cast<float>(orow[j] * inv);
    }
}

inline void forward_layernorm(const TensorImpl& x, const TensorImpl& g, const TensorImpl& b,
                              TensorImpl& out, OpNode& node) {
    const int m = x.rows(), n = x.cols();
    require(g.numel() == static_cast<size_t>(n) && b.numel() == static_cast<size_t>(n),
            "layernorm: gamma/beta width mismatch");
    const double eps = node.attrs.factor;
    node.saved64.resize(static_cast<size_t>(m) * 2);
    for (int i = 0; i < m; ++i) {
        const float* row = x.value.data() + static_cast<size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= n;
        const double rstd = 1.0 / std::sqrt(var + eps);
        node.saved64[static_cast<size_t>(i) * 2] = mean;
        node.saved64[static_cast<size_t>(i) * 2 + 1] = rstd;
        float* orow = out.value.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double xhat = (row[j] - mean) * rstd;
            orow[j] = static_cast<float>(xhat * g.value[j] + b.value[j]);
        }
    }
}

inline void forward_embedding(const TensorImpl& table, const std::vector<int>& ids,
                              TensorImpl& out) {
    const int v = table.rows(), d = table.cols();
    for (size_t r = 0; r < ids.size(); ++r) {
        const int id = ids[r];
        require(id >= 0 && id < v, "embedding_lookup: id out of range");
        std::copy_n(table.value.data() + static_cast<size_t>(id) * d, d,
                    out.value.data() + r * static_cast<size_t>(d));
    }
}

inline void forward_slice(const TensorImpl& x, const OpAttrs& a, TensorImpl& out) {
    const int n = x.cols();
    require(0 <= a.row0 && a.row0 <= a.row1 && a.row1 <= x.rows(), "slice: row range invalid");
    require(0 <= a.col0 && a.col0 <= a.col1 && a.col1 <= n, "slice: col range invalid");
    const int oc = a.col1 - a.col0;
    for (int i = a.row0; i < a.row1; ++i)
        std::copy_n(x.value.data() + static_cast<size_t>(i) * n + a.col0, oc,
                    out.value.data() + static_cast<size_t>(i - a.row0) * oc);
}

inline void forward_concat(const std::vector<std::shared_ptr<TensorImpl>>& ins, int axis,
                           TensorImpl& out) {
    const int n = out.cols();
    if (axis == 0) {
        size_t off = 0;
        for (const auto& in : ins) {
            std::copy(in->value.begin(), in->value.end(), out.value.begin() + off);
            off += in->numel();
        }
    } else {
        int coff = 0;
        for (const auto& in : ins) {
            const int ic = in->cols();
            for (int i = 0; i < in->rows(); ++i)
                std::copy_n(in->value.data() + static_cast<size_t>(i) * ic, ic,
                            out.value.data() + static_cast<size_t>(i) * n + coff);
            coff += ic;
        }
    }
}

inline void forward_transpose(const TensorImpl& x, TensorImpl& out) {
    const int m = x.rows(), n = x.cols();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.value[static_cast<size_t>(j) * m + i] = x.value[static_cast<size_t>(i) * n + j];
}

inline void forward_scale(const TensorImpl& x, float c, TensorImpl& out) {
    if (!std::isfinite(c)) throw NumericError("scale: non-finite factor");
    for (size_t i = 0; i < x.numel(); ++i) out.value[i] = x.value[i] * c;
    if (out.numel() == 1) out.scalar64 = x.f64() * c;
}

// Two modes: per-row NLL vector (weights empty) or a weighted-sum scalar
// whose f64 value never round-trips through f32 storage.
inline void forward_cross_entropy(const TensorImpl& logits, const OpAttrs& attrs, TensorImpl& out,
                                  OpNode& node) {
    const int m = logits.rows(), v = logits.cols();
    const std::vector<int>& targets = attrs.indices;
    const bool fused = !attrs.weights.empty();
    require(static_cast<int>(targets.size()) == m, "cross_entropy: target count mismatch");
    if (fused)
        require(static_cast<int>(attrs.weights.size()) == m,
                "cross_entropy: weight count mismatch");
    node.saved.resize(logits.numel());
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
        const int t = targets[i];
        require(t >= 0 && t < v, "cross_entropy: target id out of range");
        const float* row = logits.value.data() + static_cast<size_t>(i) * v;
        float mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        float* prow = node.saved.data() + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(static_cast<double>(row[j]) - mx);
            prow[j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < v; ++j) prow[j] = static_cast<float>(prow[j] * inv);
        const double nll = std::log(sum) + mx - row[t];
        if (fused) {
            total += attrs.weights[static_cast<size_t>(i)] * nll;
        } else {
            out.value[static_cast<size_t>(i)] = static_cast<float>(nll);
            total += nll;
        }
    }
    if (fused) {
        out.value[0] = static_cast<float>(total);
        out.scalar64 = total;
    } else if (m == 1) {
        out.scalar64 = total;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op construction
// ---------------------------------------------------------------------------

inline Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, OpAttrs attrs = {}) {
    using detail::require;
    for (const auto& t : inputs) require(t.defined(), "apply: undefined input tensor");

    std::vector<int> out_shape;
    switch (kind) {
        case OpKind::matmul:
            require(inputs.size() == 2, "matmul: two inputs");
            out_shape = {inputs[0].rows(), inputs[1].cols()};
            break;
        case OpKind::add:
        case OpKind::mul:
            require(inputs.size() == 2, "binary op: two inputs");
            out_shape = inputs[0].shape();
            break;
        case OpKind::tanh:
        case OpKind::softmax_lastdim:
            require(inputs.size() == 1, "unary op: one input");
            out_shape = inputs[0].shape();
            break;
        case OpKind::layernorm:
            require(inputs.size() == 3, "layernorm: x, gamma, beta");
            out_shape = inputs[0].shape();
            break;
        case OpKind::embedding_lookup:
            require(inputs.size() == 1, "embedding_lookup: table input");
            out_shape = {static_cast<int>(attrs.indices.size()), inputs[0].cols()};
            break;
        case OpKind::slice:
            require(inputs.size() == 1, "slice: one input");
            out_shape = {attrs.row1 - attrs.row0, attrs.col1 - attrs.col0};
            break;
        case OpKind::concat_axis: {
            require(!inputs.empty(), "concat_axis: at least one input");
            require(attrs.axis == 0 || attrs.axis == 1, "concat_axis: axis must be 0 or 1");
            int r = inputs[0].rows(), c = inputs[0].cols();
            for (size_t i = 1; i < inputs.size(); ++i) {
                if (attrs.axis == 0) {
                    require(inputs[i].cols() == c, "concat_axis 0: widths differ");
                    r += inputs[i].rows();
                } else {
                    require(inputs[i].rows() == r, "concat_axis 1: heights differ");
                    c += inputs[i].cols();
                }
            }
            if (attrs.axis == 0) out_shape = {r, c};
            else out_shape = {inputs[0].rows(), c};
            break;
        }
        case OpKind::transpose:
            require(inputs.size() == 1, "transpose: one input");
            out_shape = {inputs[0].cols(), inputs[0].rows()};
            break;
        case OpKind::scale:
            require(inputs.size() == 1, "scale: one input");
            out_shape = inputs[0].shape();
            break;
        case OpKind::cross_entropy_logits:
            require(inputs.size() == 1, "cross_entropy_logits: logits input");
            out_shape = attrs.weights.empty() ? std::vector<int>{1, inputs[0].rows()}
                                              : std::vector<int>{1, 1};
            break;
    }

    Tensor out = Tensor::zeros(out_shape);
    auto node = std::make_unique<detail::OpNode>();
    node->kind = kind;
    node->attrs = std::move(attrs);
    node->out = out.impl().get();
    for (const auto& t : inputs) node->inputs.push_back(t.impl());

    auto& o = *out.impl();
    switch (kind) {
        case OpKind::matmul: detail::forward_matmul(*node->inputs[0], *node->inputs[1], o); break;
        case OpKind::add: detail::forward_add(*node->inputs[0], *node->inputs[1], o); break;
        case OpKind::mul: detail::forward_mul(*node->inputs[0], *node->inputs[1], o); break;
        case OpKind::tanh: detail::forward_tanh(*node->inputs[0], o); break;
        case OpKind::softmax_lastdim: detail::forward_softmax(*node->inputs[0], o); break;
        case OpKind::layernorm:
            detail::forward_layernorm(*node->inputs[0], *node->inputs[1], *node->inputs[2], o,
                                      *node);
            break;
        case OpKind::embedding_lookup:
            detail::forward_embedding(*node->inputs[0], node->attrs.indices, o);
            break;
        case OpKind::slice: detail::forward_slice(*node->inputs[0], node->attrs, o); break;
        case OpKind::concat_axis: detail::forward_concat(node->inputs, node->attrs.axis, o); break;
        case OpKind::transpose: detail::forward_transpose(*node->inputs[0], o); break;
        case OpKind::scale: detail::forward_scale(*node->inputs[0], node->attrs.factor, o); break;
        case OpKind::cross_entropy_logits:
            detail::forward_cross_entropy(*node->inputs[0], node->attrs, o, *node);
            break;
    }
    detail::check_finite(o, kind);

    bool needs_grad = false;
    for (const auto& in : node->inputs) needs_grad |= in->requires_grad;
    if (needs_grad) {
        o.requires_grad = true;
        o.node = std::move(node);
    }
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) { return apply(OpKind::matmul, {a, b}); }
inline Tensor add(const Tensor& a, const Tensor& b) { return apply(OpKind::add, {a, b}); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return apply(OpKind::mul, {a, b}); }
inline Tensor tanh(const Tensor& a) { return apply(OpKind::tanh, {a}); }
inline Tensor softmax_lastdim(const Tensor& a) { return apply(OpKind::softmax_lastdim, {a}); }

inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        float eps = 1e-5f) {
    OpAttrs attrs;
    attrs.factor = eps;
    return apply(OpKind::layernorm, {x, gamma, beta}, std::move(attrs));
}

inline Tensor embedding_lookup(const Tensor& table, std::vector<int> ids) {
    OpAttrs attrs;
    attrs.indices = std::move(ids);
    return apply(OpKind::embedding_lookup, {table}, std::move(attrs));
}

inline Tensor slice(const Tensor& x, int row0, int row1, int col0, int col1) {
    OpAttrs attrs;
    attrs.row0 = row0;
    attrs.row1 = row1;
    attrs.col0 = col0;
    attrs.col1 = col1;
    return apply(OpKind::slice, {x}, std::move(attrs));
}

inline Tensor slice_rows(const Tensor& x, int row0, int row1) {
    return slice(x, row0, row1, 0, x.cols());
}

inline Tensor slice_cols(const Tensor& x, int col0, int col1) {
    return slice(x, 0, x.rows(), col0, col1);
}

inline Tensor concat_axis(const std::vector<Tensor>& inputs, int axis) {
    OpAttrs attrs;
    attrs.axis = axis;
    return apply(OpKind::concat_axis, inputs, std::move(attrs));
}

inline Tensor transpose(const Tensor& x) { return apply(OpKind::transpose, {x}); }

inline Tensor scale(const Tensor& x, float c) {
    OpAttrs attrs;
    attrs.factor = c;
    return apply(OpKind::scale, {x}, std::move(attrs));
}

// Row vector of per-position negative log-likelihoods, shape {1, rows(logits)}.
inline Tensor cross_entropy_logits(const Tensor& logits, std::vector<int> targets) {
    OpAttrs attrs;
    attrs.indices = std::move(targets);
    return apply(OpKind::cross_entropy_logits, {logits}, std::move(attrs));
}

// Fused variant: weighted sum of per-position NLLs as a {1,1} scalar, with
// the weighted reduction carried in f64 end to end.
inline Tensor cross_entropy_logits_sum(const Tensor& logits, std::vector<int> targets,
                                       std::vector<float> weights) {
    OpAttrs attrs;
    attrs.indices = std::move(targets);
    attrs.weights = std::move(weights);
    if (attrs.weights.empty()) attrs.weights.assign(attrs.indices.size(), 1.0f);
    return apply(OpKind::cross_entropy_logits, {logits}, std::move(attrs));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace detail {

inline void backward_step(OpNode& node) {
    TensorImpl& out = *node.out;
    const std::vector<float>& dy = out.grad;
    auto wants = [](const std::shared_ptr<TensorImpl>& t) { return t->requires_grad; };

    switch (node.kind) {
        case OpKind::matmul: {
            TensorImpl& a = *node.inputs[0];
            TensorImpl& b = *node.inputs[1];
            const int m = a.rows(), k = a.cols(), n = b.cols();
            if (wants(node.inputs[0])) {
                a.ensure_grad();
                // dA[i,l] = dot(dY[i,:], B[l,:])
                for (int i = 0; i < m; ++i) {
                    const float* dyrow = dy.data() + static_cast<size_t>(i) * n;
                    float* darow = a.grad.data() + static_cast<size_t>(i) * k;
                    for (int l = 0; l < k; ++l) {
                        const float* brow = b.value.data() + static_cast<size_t>(l) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += static_cast<double>(dyrow[j]) * brow[j];
                        darow[l] += static_cast<float>(acc);
                    }
                }
            }
            if (wants(node.inputs[1])) {
                b.ensure_grad();
                // dB[l,:] += sum_i A[i,l] * dY[i,:], accumulated per row in f64
                std::vector<double> acc(static_cast<size_t>(n));
                for (int l = 0; l < k; ++l) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (int i = 0; i < m; ++i) {
                        const double av = a.value[static_cast<size_t>(i) * k + l];
                        if (av == 0.0) continue;
                        const float* dyrow = dy.data() + static_cast<size_t>(i) * n;
                        for (int j = 0; j < n; ++j) acc[j] += av * dyrow[j];
                    }
                    float* dbrow = b.grad.data() + static_cast<size_t>(l) * n;
                    for (int j = 0; j < n; ++j) dbrow[j] += static_cast<float>(acc[j]);
                }
            }
            break;
        }
        case OpKind::add: {
            TensorImpl& a = *node.inputs[0];
            TensorImpl& b = *node.inputs[1];
            if (wants(node.inputs[0])) {
                a.ensure_grad();
                for (size_t i = 0; i < dy.size(); ++i) a.grad[i] += dy[i];
            }
            if (wants(node.inputs[1])) {
                b.ensure_grad();
                if (b.numel() == out.numel()) {
                    for (size_t i = 0; i < dy.size(); ++i) b.grad[i] += dy[i];
                } else {
                    const int m = out.rows(), n = out.cols();
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i) acc += dy[static_cast<size_t>(i) * n + j];
                        b.grad[static_cast<size_t>(j)] += static_cast<float>(acc);
                    }
                }
            }
            break;
        }
        case OpKind::mul: {
            TensorImpl& a = *node.inputs[0];
            TensorImpl& b = *node.inputs[1];
            if (wants(node.inputs[0])) {
                a.ensure_grad();
                for (size_t i = 0; i < dy.size(); ++i) a.grad[i] += dy[i] * b.value[i];
            }
            if (wants(node.inputs[1])) {
                b.ensure_grad();
                for (size_t i = 0; i < dy.size(); ++i) b.grad[i] += dy[i] * a.value[i];
            }
            break;
        }
        case OpKind::tanh: {
            TensorImpl& a = *node.inputs[0];
            if (wants(node.inputs[0])) {
                a.ensure_grad();
                for (size_t i = 0; i < dy.size(); ++i) {
                    const float y = out.value[i];
                    a.grad[i] += dy[i] * (1.0f - y * y);
                }
            }
            break;
        }
        case OpKind::softmax_lastdim: {
            TensorImpl& a = *node.inputs[0];
            if (wants(node.inputs[0])) {
                a.ensure_grad();
                const int m = out.rows(), n = out.cols();
                for (int i = 0; i < m; ++i) {
                    const float* yrow = out.value.data() + static_cast<size_t>(i) * n;
                    const float* drow = dy.data() + static_cast<size_t>(i) * n;
                    double dot = 0.0;
                    for (int j = 0; j < n; ++j) dot += static_cast<double>(drow[j]) * yrow[j];
                    float* garow = a.grad.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j)
                        garow[j] += static_cast<float>(yrow[j] * (drow[j] - dot));
                }
            }
            break;
        }
        case OpKind::layernorm: {
            TensorImpl& x = *node.inputs[0];
            TensorImpl& g = *node.inputs[1];
            TensorImpl& b = *node.inputs[2];
            const int m = x.rows(), n = x.cols();
            if (wants(node.inputs[0])) x.ensure_grad();
            if (wants(node.inputs[1])) g.ensure_grad();
            if (wants(node.inputs[2])) b.ensure_grad();
            for (int i = 0; i < m; ++i) {
                const double mean = node.saved64[static_cast<size_t>(i) * 2];
                const double rstd = node.saved64[static_cast<size_t>(i) * 2 + 1];
                const float* xrow = x.value.data() + static_cast<size_t>(i) * n;
                const float* drow = dy.data() + static_cast<size_t>(i) * n;
                if (wants(node.inputs[1]) || wants(node.inputs[2])) {
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (xrow[j] - mean) * rstd;
                        if (wants(node.inputs[1]))
                            g.grad[static_cast<size_t>(j)] += static_cast<float>(drow[j] * xhat);
                        if (wants(node.inputs[2])) b.grad[static_cast<size_t>(j)] += drow[j];
                    }
                }
                if (wants(node.inputs[0])) {
                    double mean_dg = 0.0, mean_dgx = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (xrow[j] - mean) * rstd;
                        const double dg = static_cast<double>(drow[j]) * g.value[j];
                        mean_dg += dg;
                        mean_dgx += dg * xhat;
                    }
                    mean_dg /= n;
                    mean_dgx /= n;
                    float* gxrow = x.grad.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (xrow[j] - mean) * rstd;
                        const double dg = static_cast<double>(drow[j]) * g.value[j];
                        gxrow[j] += static_cast<float>(rstd * (dg - mean_dg - xhat * mean_dgx));
                    }
                }
            }
            break;
        }
        case OpKind::embedding_lookup: {
            TensorImpl& table = *node.inputs[0];
            if (wants(node.inputs[0])) {
                table.ensure_grad();
                const int d = table.cols();
                for (size_t r = 0; r < node.attrs.indices.size(); ++r) {
                    float* trow =
                        table.grad.data() + static_cast<size_t>(node.attrs.indices[r]) * d;
                    const float* drow = dy.data() + r * static_cast<size_t>(d);
                    for (int j = 0; j < d; ++j) trow[j] += drow[j];
                }
            }
            break;
        }
        case OpKind::slice: {
            TensorImpl& x = *node.inputs[0];
            if (wants(node.inputs[0])) {
                x.ensure_grad();
                const int n = x.cols();
                const int oc = node.attrs.col1 - node.attrs.col0;
                for (int i = node.attrs.row0; i < node.attrs.row1; ++i) {
                    const float* drow = dy.data() + static_cast<size_t>(i - node.attrs.row0) * oc;
                    float* xrow = x.grad.data() + static_cast<size_t>(i) * n + node.attrs.col0;
                    for (int j = 0; j < oc; ++j) xrow[j] += drow[j];
                }
            }
            break;
        }
        case OpKind::concat_axis: {
            if (node.attrs.axis == 0) {
                size_t off = 0;
                for (auto& in : node.inputs) {
                    if (wants(in)) {
                        in->ensure_grad();
                        for (size_t i = 0; i < in->numel(); ++i) in->grad[i] += dy[off + i];
                    }
                    off += in->numel();
                }
            } else {
                const int n = out.cols();
                int coff = 0;
                for (auto& in : node.inputs) {
                    const int ic = in->cols();
                    if (wants(in)) {
                        in->ensure_grad();
                        for (int i = 0; i < in->rows(); ++i) {
                            const float* drow = dy.data() + static_cast<size_t>(i) * n + coff;
                            float* grow = in->grad.data() + static_cast<size_t>(i) * ic;
                            for (int j = 0; j < ic; ++j) grow[j] += drow[j];
                        }
                    }
                    coff += ic;
                }
            }
            break;
        }
        case OpKind::transpose: {
            TensorImpl& x = *node.inputs[0];
            if (wants(node.inputs[0])) {
                x.ensure_grad();
                const int m = x.rows(), n = x.cols();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        x.grad[static_cast<size_t>(i) * n + j] +=
                            dy[static_cast<size_t>(j) * m + i];
            }
            break;
        }
        case OpKind::scale: {
            TensorImpl& x = *node.inputs[0];
            if (wants(node.inputs[0])) {
                x.ensure_grad();
                const float c = node.attrs.factor;
                for (size_t i = 0; i < dy.size(); ++i) x.grad[i] += dy[i] * c;
            }
            break;
        }
        case OpKind::cross_entropy_logits: {
            TensorImpl& logits = *node.inputs[0];
            if (wants(node.inputs[0])) {
                logits.ensure_grad();
                const int m = logits.rows(), v = logits.cols();
                const bool fused = !node.attrs.weights.empty();
                for (int i = 0; i < m; ++i) {
                    const float gout = fused ? dy[0] * node.attrs.weights[static_cast<size_t>(i)]
                                             : dy[static_cast<size_t>(i)];
                    const float* prow = node.saved.data() + static_cast<size_t>(i) * v;
                    float* grow = logits.grad.data() + static_cast<size_t>(i) * v;
                    const int t = node.attrs.indices[static_cast<size_t>(i)];
                    for (int j = 0; j < v; ++j) {
                        float p = prow[j];
                        if (j == t) p -= 1.0f;
                        grow[j] += gout * p;
                    }
                }
            }
            break;
        }
    }
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate additively,
// so separate losses sharing leaves add their contributions. Calling backward
// twice on the same loss tensor is an error.
inline void backward(const Tensor& loss) {
    auto root = loss.impl();
    if (root->numel() != 1) throw ShapeError("backward: loss must be a scalar");
    if (root->backward_done) throw std::logic_error("backward: already ran for this loss");
    root->backward_done = true;

    // reverse topological order via iterative post-order DFS
    std::vector<detail::TensorImpl*> order;
    std::vector<std::pair<detail::TensorImpl*, size_t>> stack;
    std::unordered_set<detail::TensorImpl*> visited;

    stack.emplace_back(root.get(), 0);
    if (root->node) visited.insert(root.get());
    while (!stack.empty()) {
        auto& [t, idx] = stack.back();
        if (!t->node || idx >= t->node->inputs.size()) {
            if (t->node) order.push_back(t);
            stack.pop_back();
            continue;
        }
        detail::TensorImpl* child = t->node->inputs[idx++].get();
        if (child->node && visited.insert(child).second) stack.emplace_back(child, 0);
    }

    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) detail::backward_step(*(*it)->node);
}

// Max over coordinates of relative error between the analytic gradient of f
// at x and a central finite difference. f must be a deterministic scalar
// function of x. The analytic side comes from one backward pass; the numeric
// side re-evaluates f with one coordinate nudged by +/- eps.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                      double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_difference_check: eps must be positive");
    Tensor y = f(x);
    if (y.numel() != 1) throw ShapeError("finite_difference_check: f must return a scalar");
    if (!std::isfinite(y.item_f64()))
        throw NumericError("finite_difference_check: non-finite f output");
    x.zero_grad();
    backward(y);
    std::vector<float> analytic = x.grad();

    double max_err = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) {
        const float orig = x.data()[i];
        x.data()[i] = static_cast<float>(orig + eps);
        const double fp = f(x).item_f64();
        x.data()[i] = static_cast<float>(orig - eps);
        const double fm = f(x).item_f64();
        x.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_difference_check: non-finite f output");
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[i];
        const double err = std::abs(a - numeric) / (std::abs(a) + 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// ---------------------------------------------------------------------------
// small conveniences used throughout the model code
// ---------------------------------------------------------------------------

// tanh-form gaussian error linear unit, composed from the primitive ops so
// the backward pass needs no dedicated kernel
inline Tensor gelu(const Tensor& x) {
    const Tensor x3 = mul(mul(x, x), x);
    const Tensor inner = scale(add(x, scale(x3, 0.044715f)), 0.7978845608f);
    const Tensor t = tanh(inner);
    const Tensor one = Tensor::full(x.shape(), 1.0f);
    return scale(mul(x, add(t, one)), 0.5f);
}

// Sum of all elements as a scalar tensor (via matmul with ones, keeping the
// f64 accumulation of the reduction).
inline Tensor sum_all(const Tensor& x) {
    const Tensor ones_row = Tensor::full({1, x.rows()}, 1.0f);
    const Tensor ones_col = Tensor::full({x.cols(), 1}, 1.0f);
    return matmul(matmul(ones_row, x), ones_col);
}

inline double grad_l2_norm(const std::vector<Tensor>& params) {
    double sq = 0.0;
    for (const auto& p : params)
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
    return std::sqrt(sq);
}

}  // namespace msp

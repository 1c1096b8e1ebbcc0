#pragma once

// Dense row-major float64 tensors with tape-free reverse-mode autodiff.
//
// A Tensor is a shared handle: copying it aliases the same storage, the way
// parameters are shared between a model and its optimizer. Every op returns a
// fresh tensor; when any input requires grad the result records its parents
// and a closure that pushes the output gradient back into them. backward()
// walks that DAG in reverse topological order and accumulates (+=).
//
// Broadcasting is limited to scalar-tensor pairs in add/sub/mul. Anything
// else (row bias, per-channel scaling) has a dedicated op.

#include "bigmoe/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace bigmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

using GradFn = std::function<void(const std::vector<double>& grad_out)>;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    GradFn backward_fn;

    std::vector<double>& ensure_grad()
    {
        if (grad.empty())
            grad.assign(data.size(), 0.0);
        return grad;
    }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>())
    {
        for (std::size_t e : shape)
            if (e == 0)
                throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        if (shape.empty())
            shape = {1};
        if (shape_numel(shape) != data.size())
            throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                                 " elements");
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false)
    {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor scalar(double value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }
    static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
    {
        return Tensor(std::move(shape), std::vector<double>(values), requires_grad);
    }

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// Direct write access. Only valid on leaves; mutating a tensor that an
    /// existing graph captured invalidates that graph's gradients.
    std::span<double> mutable_data() { return impl_->data; }
    const std::vector<double>& values() const& { return impl_->data; }
    // Copy out of temporaries so `for (double v : f(x).values())` stays valid.
    std::vector<double> values() && { return impl_->data; }

    double item() const
    {
        if (numel() != 1)
            throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::initializer_list<std::size_t> index) const { return impl_->data[offset(index)]; }
    double& at(std::initializer_list<std::size_t> index) { return impl_->data[offset(index)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on)
    {
        impl_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return !impl_->backward_fn; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->ensure_grad(); }
    /// Allocates (if needed) and zero-fills the gradient buffer.
    void zero_grad()
    {
        auto& g = impl_->ensure_grad();
        std::fill(g.begin(), g.end(), 0.0);
    }
    void clear_grad() { impl_->grad.clear(); }

    /// Copy of the values with no graph history.
    Tensor detach() const { return Tensor(shape(), impl_->data, false); }

    const detail::ImplPtr& impl() const { return impl_; }
    explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const
    {
        if (index.size() != rank())
            throw UsageError("index rank mismatch for tensor " + shape_str(shape()));
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : index) {
            if (i >= impl_->shape[axis])
                throw UsageError("index out of range for tensor " + shape_str(shape()));
            off = off * impl_->shape[axis] + i;
            ++axis;
        }
        return off;
    }

    detail::ImplPtr impl_;
};

namespace detail {

/// Builds an op result. The backward closure is attached only when some input
/// requires grad, so inference graphs carry no history.
inline Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                          GradFn backward)
{
    Tensor out(std::move(shape), std::move(data), false);
    bool needs = false;
    for (const Tensor* t : inputs)
        needs = needs || (t->defined() && t->requires_grad());
    if (needs) {
        auto& impl = *out.impl();
        impl.requires_grad = true;
        for (const Tensor* t : inputs)
            if (t->defined() && t->requires_grad())
                impl.parents.push_back(t->impl());
        impl.backward_fn = std::move(backward);
    }
    return out;
}

inline Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, GradFn backward)
{
    Tensor out(std::move(shape), std::move(data), false);
    bool needs = false;
    for (const Tensor& t : inputs)
        needs = needs || t.requires_grad();
    if (needs) {
        auto& impl = *out.impl();
        impl.requires_grad = true;
        for (const Tensor& t : inputs)
            if (t.requires_grad())
                impl.parents.push_back(t.impl());
        impl.backward_fn = std::move(backward);
    }
    return out;
}

/// Gradient sink for an input: nullptr when the input does not take grads.
inline std::vector<double>* grad_sink(const ImplPtr& p)
{
    return (p && p->requires_grad) ? &p->ensure_grad() : nullptr;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op)
{
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x)
{
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double sigmoid_value(double x)
{
    if (x >= 0) {
        const double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis)
{
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i)
        s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i)
        s.inner *= shape[i];
    return s;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind)
{
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (a.shape() != b.shape() && !a_scalar && !b_scalar)
        throw DimensionError("elementwise op on " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const Shape shape = (a_scalar && !b_scalar) ? b.shape() : a.shape();
    const std::size_t n = shape_numel(shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        out[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
    }
    ImplPtr ai = a.impl(), bi = b.impl();
    return make_result(shape, std::move(out), {&a, &b}, [ai, bi, kind, a_scalar, b_scalar](const std::vector<double>& g) {
        auto* ga = grad_sink(ai);
        auto* gb = grad_sink(bi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t ia = a_scalar ? 0 : i;
            const std::size_t ib = b_scalar ? 0 : i;
            switch (kind) {
                case BinaryKind::Add:
                    if (ga) (*ga)[ia] += g[i];
                    if (gb) (*gb)[ib] += g[i];
                    break;
                case BinaryKind::Sub:
                    if (ga) (*ga)[ia] += g[i];
                    if (gb) (*gb)[ib] -= g[i];
                    break;
                case BinaryKind::Mul:
                    if (ga) (*ga)[ia] += g[i] * bi->data[ib];
                    if (gb) (*gb)[ib] += g[i] * ai->data[ia];
                    break;
            }
        }
    });
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df)
{
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = f(xv[i]);
    ImplPtr xi = x.impl();
    return make_result(x.shape(), out, {&x}, [xi, out, df](const std::vector<double>& g) {
        auto* gx = grad_sink(xi);
        for (std::size_t i = 0; i < g.size(); ++i)
            (*gx)[i] += g[i] * df(xi->data[i], out[i]);
    });
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Mul); }

inline Tensor scale(const Tensor& x, double c)
{
    return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& x, double c)
{
    return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Tensor exp(const Tensor& x)
{
    return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor tanh(const Tensor& x)
{
    return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor sigmoid(const Tensor& x)
{
    return detail::unary(x, detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}
/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x)
{
    return detail::unary(x, detail::gelu_value, [](double v, double) { return detail::gelu_derivative(v); });
}
inline Tensor square(const Tensor& x)
{
    return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape)
{
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    detail::ImplPtr xi = x.impl();
    return detail::make_result(std::move(shape), x.values(), {&x}, [xi](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i];
    });
}

inline Tensor transpose(const Tensor& x)
{
    detail::require_rank(x, 2, "transpose");
    const std::size_t m = x.dim(0), n = x.dim(1);
    const auto& xv = x.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[j * m + i] = xv[i * n + j];
    detail::ImplPtr xi = x.impl();
    return detail::make_result({n, m}, std::move(out), {&x}, [xi, m, n](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                gx[i * n + j] += g[j * m + i];
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis)
{
    if (parts.empty())
        throw UsageError("concat of zero tensors");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size())
        throw DimensionError("concat axis out of range for " + shape_str(ref));
    Shape shape = ref;
    shape[axis] = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != ref.size())
            throw DimensionError("concat rank mismatch");
        for (std::size_t i = 0; i < ref.size(); ++i)
            if (i != axis && p.dim(i) != ref[i])
                throw DimensionError("concat extent mismatch: " + shape_str(p.shape()) + " vs " + shape_str(ref));
        shape[axis] += p.dim(axis);
    }
    const auto split = detail::split_axis(shape, axis);
    std::vector<double> out(shape_numel(shape));
    std::vector<std::size_t> chunk;
    for (const Tensor& p : parts)
        chunk.push_back(p.dim(axis) * split.inner);
    const std::size_t row = split.extent * split.inner;
    std::size_t base = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].values();
        for (std::size_t o = 0; o < split.outer; ++o)
            std::copy_n(pv.begin() + o * chunk[k], chunk[k], out.begin() + o * row + base);
        base += chunk[k];
    }
    std::vector<detail::ImplPtr> impls;
    for (const Tensor& p : parts)
        impls.push_back(p.impl());
    return detail::make_result(shape, std::move(out), parts, [impls, chunk, split, row](const std::vector<double>& g) {
        std::size_t base = 0;
        for (std::size_t k = 0; k < impls.size(); ++k) {
            if (auto* gp = detail::grad_sink(impls[k]))
                for (std::size_t o = 0; o < split.outer; ++o)
                    for (std::size_t i = 0; i < chunk[k]; ++i)
                        (*gp)[o * chunk[k] + i] += g[o * row + base + i];
            base += chunk[k];
        }
    });
}

/// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end)
{
    if (axis >= x.rank() || begin >= end || end > x.dim(axis))
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " of " + shape_str(x.shape()));
    Shape shape = x.shape();
    shape[axis] = end - begin;
    const auto split = detail::split_axis(x.shape(), axis);
    const std::size_t len = (end - begin) * split.inner;
    const auto& xv = x.values();
    std::vector<double> out(split.outer * len);
    for (std::size_t o = 0; o < split.outer; ++o)
        std::copy_n(xv.begin() + o * split.extent * split.inner + begin * split.inner, len, out.begin() + o * len);
    detail::ImplPtr xi = x.impl();
    return detail::make_result(std::move(shape), std::move(out), {&x}, [xi, split, len, begin](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t i = 0; i < len; ++i)
                gx[o * split.extent * split.inner + begin * split.inner + i] += g[o * len + i];
    });
}

/// Gathers rows (first-axis entries) by index; repeated indices accumulate grads.
inline Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows)
{
    if (rows.empty())
        throw UsageError("select_rows with no indices");
    const std::size_t n = x.dim(0);
    const std::size_t width = x.numel() / n;
    Shape shape = x.shape();
    shape[0] = rows.size();
    const auto& xv = x.values();
    std::vector<double> out(rows.size() * width);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n)
            throw UsageError("select_rows index " + std::to_string(rows[r]) + " out of range " + std::to_string(n));
        std::copy_n(xv.begin() + rows[r] * width, width, out.begin() + r * width);
    }
    detail::ImplPtr xi = x.impl();
    return detail::make_result(std::move(shape), std::move(out), {&x}, [xi, rows, width](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t i = 0; i < width; ++i)
                gx[rows[r] * width + i] += g[r * width + i];
    });
}

/// Flat-index gather into a 1-D tensor.
inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& flat_index)
{
    if (flat_index.empty())
        throw UsageError("gather with no indices");
    const auto& xv = x.values();
    std::vector<double> out(flat_index.size());
    for (std::size_t i = 0; i < flat_index.size(); ++i) {
        if (flat_index[i] >= xv.size())
            throw UsageError("gather index out of range");
        out[i] = xv[flat_index[i]];
    }
    detail::ImplPtr xi = x.impl();
    return detail::make_result({flat_index.size()}, std::move(out), {&x}, [xi, flat_index](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[flat_index[i]] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x)
{
    const auto& xv = x.values();
    const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
    detail::ImplPtr xi = x.impl();
    return detail::make_result({1}, {s}, {&x}, [xi](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (double& v : gx)
            v += g[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sum over one axis; the axis is removed from the shape.
inline Tensor sum_axis(const Tensor& x, std::size_t axis)
{
    if (axis >= x.rank())
        throw DimensionError("sum_axis out of range for " + shape_str(x.shape()));
    const auto split = detail::split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty())
        shape = {1};
    const auto& xv = x.values();
    std::vector<double> out(split.outer * split.inner, 0.0);
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t a = 0; a < split.extent; ++a)
            for (std::size_t i = 0; i < split.inner; ++i)
                out[o * split.inner + i] += xv[(o * split.extent + a) * split.inner + i];
    detail::ImplPtr xi = x.impl();
    return detail::make_result(std::move(shape), std::move(out), {&x}, [xi, split](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t a = 0; a < split.extent; ++a)
                for (std::size_t i = 0; i < split.inner; ++i)
                    gx[(o * split.extent + a) * split.inner + i] += g[o * split.inner + i];
    });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis)
{
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b)
{
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j)
                row[j] += s * brow[j];
        }
    }
    detail::ImplPtr ai = a.impl(), bi = b.impl();
    return detail::make_result({m, n}, std::move(out), {&a, &b}, [ai, bi, m, k, n](const std::vector<double>& g) {
        if (auto* ga = detail::grad_sink(ai))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = bi->data.data() + p * n;
                    const double* grow = g.data() + i * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        s += grow[j] * brow[j];
                    (*ga)[i * k + p] += s;
                }
        if (auto* gb = detail::grad_sink(bi))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double s = ai->data[i * k + p];
                    double* gbrow = gb->data() + p * n;
                    const double* grow = g.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j)
                        gbrow[j] += s * grow[j];
                }
    });
}

/// x[m x k] * w[k x n] + bias[n] (bias optional).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor())
{
    Tensor y = matmul(x, w);
    if (!bias.defined())
        return y;
    const std::size_t m = y.dim(0), n = y.dim(1);
    if (bias.numel() != n)
        throw DimensionError("linear bias " + shape_str(bias.shape()) + " for output " + shape_str(y.shape()));
    std::vector<double> out = y.values();
    const auto& bv = bias.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[i * n + j] += bv[j];
    detail::ImplPtr yi = y.impl(), bi = bias.impl();
    return detail::make_result({m, n}, std::move(out), {&y, &bias}, [yi, bi, m, n](const std::vector<double>& g) {
        if (auto* gy = detail::grad_sink(yi))
            for (std::size_t i = 0; i < g.size(); ++i)
                (*gy)[i] += g[i];
        if (auto* gb = detail::grad_sink(bi))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    (*gb)[j] += g[i * n + j];
    });
}

/// x[n x d] with column c multiplied by s[c].
inline Tensor scale_columns(const Tensor& x, const Tensor& s)
{
    detail::require_rank(x, 2, "scale_columns");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (s.numel() != d)
        throw DimensionError("scale_columns: " + shape_str(s.shape()) + " for " + shape_str(x.shape()));
    const auto& xv = x.values();
    const auto& sv = s.values();
    std::vector<double> out(n * d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c)
            out[r * d + c] = xv[r * d + c] * sv[c];
    detail::ImplPtr xi = x.impl(), si = s.impl();
    return detail::make_result({n, d}, std::move(out), {&x, &s}, [xi, si, n, d](const std::vector<double>& g) {
        auto* gx = detail::grad_sink(xi);
        auto* gs = detail::grad_sink(si);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                if (gx) (*gx)[r * d + c] += g[r * d + c] * si->data[c];
                if (gs) (*gs)[c] += g[r * d + c] * xi->data[r * d + c];
            }
    });
}

// ---------------------------------------------------------------------------
// Normalization and losses

/// Numerically stable softmax along `axis` (max-subtracted).
inline Tensor softmax(const Tensor& x, std::size_t axis)
{
    if (axis >= x.rank())
        throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    const auto split = detail::split_axis(x.shape(), axis);
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.inner; ++i) {
            const std::size_t base = o * split.extent * split.inner + i;
            double mx = xv[base];
            for (std::size_t a = 1; a < split.extent; ++a)
                mx = std::max(mx, xv[base + a * split.inner]);
            double z = 0.0;
            for (std::size_t a = 0; a < split.extent; ++a) {
                const double e = std::exp(xv[base + a * split.inner] - mx);
                out[base + a * split.inner] = e;
                z += e;
            }
            for (std::size_t a = 0; a < split.extent; ++a)
                out[base + a * split.inner] /= z;
        }
    detail::ImplPtr xi = x.impl();
    return detail::make_result(x.shape(), out, {&x}, [xi, out, split](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t i = 0; i < split.inner; ++i) {
                const std::size_t base = o * split.extent * split.inner + i;
                double dot = 0.0;
                for (std::size_t a = 0; a < split.extent; ++a)
                    dot += g[base + a * split.inner] * out[base + a * split.inner];
                for (std::size_t a = 0; a < split.extent; ++a) {
                    const std::size_t idx = base + a * split.inner;
                    gx[idx] += out[idx] * (g[idx] - dot);
                }
            }
    });
}

/// Normalizes over the last axis, then applies gamma/beta when given.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma = Tensor(), const Tensor& beta = Tensor(),
                         double eps = 1e-6)
{
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    if ((gamma.defined() && gamma.numel() != n) || (beta.defined() && beta.numel() != n))
        throw DimensionError("layer_norm affine extent mismatch for " + shape_str(x.shape()));
    const auto& xv = x.values();
    std::vector<double> xhat(xv.size()), inv_std(rows), out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            mu += row[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < n; ++i) {
            const double h = (row[i] - mu) * inv_std[r];
            xhat[r * n + i] = h;
            double y = h;
            if (gamma.defined()) y *= gamma[i];
            if (beta.defined()) y += beta[i];
            out[r * n + i] = y;
        }
    }
    detail::ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    return detail::make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                               [xi, gi, bi, xhat, inv_std, rows, n](const std::vector<double>& g) {
                                   auto* gx = detail::grad_sink(xi);
                                   auto* gg = detail::grad_sink(gi);
                                   auto* gb = detail::grad_sink(bi);
                                   std::vector<double> dh(n);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       double mean_dh = 0.0, mean_dh_h = 0.0;
                                       for (std::size_t i = 0; i < n; ++i) {
                                           const std::size_t idx = r * n + i;
                                           if (gg) (*gg)[i] += g[idx] * xhat[idx];
                                           if (gb) (*gb)[i] += g[idx];
                                           dh[i] = g[idx] * (gi ? gi->data[i] : 1.0);
                                           mean_dh += dh[i];
                                           mean_dh_h += dh[i] * xhat[idx];
                                       }
                                       if (!gx)
                                           continue;
                                       mean_dh /= static_cast<double>(n);
                                       mean_dh_h /= static_cast<double>(n);
                                       for (std::size_t i = 0; i < n; ++i)
                                           (*gx)[r * n + i] +=
                                               inv_std[r] * (dh[i] - mean_dh - xhat[r * n + i] * mean_dh_h);
                                   }
                               });
}

/// Mean cross-entropy of logits[B x C] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels)
{
    detail::require_rank(logits, 2, "cross_entropy");
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                             " rows");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= c)
            throw InputError("cross_entropy label " + std::to_string(l) + " outside [0," + std::to_string(c) + ")");
    const auto& xv = logits.values();
    std::vector<double> prob(b * c);
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        const double* row = xv.data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j)
            z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j)
            prob[r * c + j] = std::exp(row[j] - lse);
        loss += lse - row[labels[r]];
    }
    loss /= static_cast<double>(b);
    std::vector<int> lab(labels.begin(), labels.end());
    detail::ImplPtr xi = logits.impl();
    return detail::make_result({1}, {loss}, {&logits}, [xi, prob, lab, b, c](const std::vector<double>& g) {
        auto& gx = *detail::grad_sink(xi);
        const double s = g[0] / static_cast<double>(b);
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t j = 0; j < c; ++j)
                gx[r * c + j] += s * (prob[r * c + j] - (static_cast<int>(j) == lab[r] ? 1.0 : 0.0));
    });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

/// Cross-correlation with explicit output extents; `pad` may be negative,
/// which shifts the sampling window inward. Out-of-image taps read zero.
inline Tensor conv2d_window(const Tensor& x, const Tensor& w, std::size_t stride, long pad, std::size_t out_h,
                            std::size_t out_w)
{
    const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const auto& xv = x.values();
    const auto& wv = w.values();
    std::vector<double> out(co * out_h * out_w, 0.0);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t a = 0; a < kh; ++a)
                for (std::size_t b = 0; b < kw; ++b) {
                    const double wt = wv[((o * ci + c) * kh + a) * kw + b];
                    for (std::size_t y = 0; y < out_h; ++y) {
                        const long iy = static_cast<long>(y * stride + a) - pad;
                        if (iy < 0 || iy >= static_cast<long>(h))
                            continue;
                        const double* xrow = xv.data() + (c * h + static_cast<std::size_t>(iy)) * wd;
                        double* orow = out.data() + (o * out_h + y) * out_w;
                        for (std::size_t xo = 0; xo < out_w; ++xo) {
                            const long ix = static_cast<long>(xo * stride + b) - pad;
                            if (ix < 0 || ix >= static_cast<long>(wd))
                                continue;
                            orow[xo] += wt * xrow[ix];
                        }
                    }
                }
    ImplPtr xi = x.impl(), wi = w.impl();
    return make_result({co, out_h, out_w}, std::move(out), {&x, &w},
                       [xi, wi, ci, h, wd, co, kh, kw, stride, pad, out_h, out_w](const std::vector<double>& g) {
                           auto* gx = grad_sink(xi);
                           auto* gw = grad_sink(wi);
                           for (std::size_t o = 0; o < co; ++o)
                               for (std::size_t c = 0; c < ci; ++c)
                                   for (std::size_t a = 0; a < kh; ++a)
                                       for (std::size_t b = 0; b < kw; ++b) {
                                           const std::size_t widx = ((o * ci + c) * kh + a) * kw + b;
                                           const double wt = wi->data[widx];
                                           double acc = 0.0;
                                           for (std::size_t y = 0; y < out_h; ++y) {
                                               const long iy = static_cast<long>(y * stride + a) - pad;
                                               if (iy < 0 || iy >= static_cast<long>(h))
                                                   continue;
                                               const std::size_t xoff = (c * h + static_cast<std::size_t>(iy)) * wd;
                                               const double* grow = g.data() + (o * out_h + y) * out_w;
                                               for (std::size_t xo = 0; xo < out_w; ++xo) {
                                                   const long ix = static_cast<long>(xo * stride + b) - pad;
                                                   if (ix < 0 || ix >= static_cast<long>(wd))
                                                       continue;
                                                   acc += grow[xo] * xi->data[xoff + static_cast<std::size_t>(ix)];
                                                   if (gx)
                                                       (*gx)[xoff + static_cast<std::size_t>(ix)] += grow[xo] * wt;
                                               }
                                           }
                                           if (gw)
                                               (*gw)[widx] += acc;
                                       }
                       });
}

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad)
{
    if (in + 2 * pad < k)
        throw DimensionError("kernel extent " + std::to_string(k) + " exceeds padded input " +
                             std::to_string(in + 2 * pad));
    return (in + 2 * pad - k) / stride + 1;
}

} // namespace detail

/// 2-D cross-correlation (no kernel flip): x[C_in x H x W], w[C_out x C_in x kh x kw].
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t padding = 0)
{
    detail::require_rank(x, 3, "conv2d input");
    detail::require_rank(w, 4, "conv2d kernel");
    if (w.dim(1) != x.dim(0))
        throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                             shape_str(w.shape()));
    if (stride == 0)
        throw DimensionError("conv2d stride must be positive");
    const std::size_t oh = detail::conv_extent(x.dim(1), w.dim(2), stride, padding);
    const std::size_t ow = detail::conv_extent(x.dim(2), w.dim(3), stride, padding);
    return detail::conv2d_window(x, w, stride, static_cast<long>(padding), oh, ow);
}

/// 1-D zero-padded cross-correlation of v[n] with an odd-length kernel w[k].
inline Tensor conv1d_same(const Tensor& v, const Tensor& w)
{
    const std::size_t n = v.numel(), k = w.numel();
    if (k % 2 == 0)
        throw ConfigError("conv1d_same kernel size must be odd, got " + std::to_string(k));
    const long half = static_cast<long>(k / 2);
    const auto& vv = v.values();
    const auto& wv = w.values();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const long src = static_cast<long>(i + j) - half;
            if (src >= 0 && src < static_cast<long>(n))
                out[i] += wv[j] * vv[static_cast<std::size_t>(src)];
        }
    detail::ImplPtr vi = v.impl(), wi = w.impl();
    return detail::make_result({n}, std::move(out), {&v, &w}, [vi, wi, n, k, half](const std::vector<double>& g) {
        auto* gv = detail::grad_sink(vi);
        auto* gw = detail::grad_sink(wi);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                const long src = static_cast<long>(i + j) - half;
                if (src < 0 || src >= static_cast<long>(n))
                    continue;
                if (gv) (*gv)[static_cast<std::size_t>(src)] += g[i] * wi->data[j];
                if (gw) (*gw)[j] += g[i] * vi->data[static_cast<std::size_t>(src)];
            }
    });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates d(loss)/d(t) into every reachable tensor that requires grad.
inline void backward(const Tensor& loss)
{
    if (!loss.defined() || loss.numel() != 1)
        throw UsageError("backward() needs a scalar loss");
    if (!loss.requires_grad())
        throw UsageError("backward() on a tensor that does not require grad");

    // Iterative post-order DFS -> topological order.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
    seen.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::TensorImpl* p = node->parents[next++].get();
            if (seen.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.impl()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty())
            node->backward_fn(node->grad);
    }
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam moments for a fixed parameter list (moments are sized on first use).
struct AdamState {
    AdamOptions options;
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    explicit AdamState(AdamOptions opts = {}) : options(opts) {}
};

/// One Adam update with decoupled weight decay; zero-fills grads afterward.
inline void adam_step(std::span<Tensor> params, AdamState& state)
{
    for (const Tensor& p : params)
        if (!p.has_grad())
            throw UsageError("adam_step: parameter " + shape_str(p.shape()) + " has no gradient");
    if (state.m.empty()) {
        for (const Tensor& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw UsageError("adam_step: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (state.m[i].size() != params[i].numel())
            throw UsageError("adam_step: parameter " + std::to_string(i) + " changed size");

    ++state.step;
    const auto& o = state.options;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(o.beta1, t);
    const double c2 = 1.0 - std::pow(o.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].mutable_data();
        auto g = params[i].mutable_grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
            v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] -= o.lr * (mhat / (std::sqrt(vhat) + o.eps) + o.weight_decay * w[j]);
        }
        std::fill(g.begin(), g.end(), 0.0);
    }
}

} // namespace bigmoe

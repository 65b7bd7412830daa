#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "prue/errors.hpp"

namespace prue {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_to_string(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

// ---------------------------------------------------------------------------
// Gradient recording mode
// ---------------------------------------------------------------------------

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII scope that disables tape recording; operations performed inside
// produce constants and contribute no gradient.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// ---------------------------------------------------------------------------
// Graph node
// ---------------------------------------------------------------------------

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    bool requires_grad = false;
    bool is_leaf = true;
    bool consumed = false;
    const char* op = "leaf";
    std::vector<T> grad;  // allocated lazily; empty means all-zero
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(const std::vector<T>&)> pullback;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
    for (const T& x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw NumericError(std::string("non-finite output of ") + op);
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor: shared handle to a graph node
// ---------------------------------------------------------------------------

template <class T>
class Tensor {
  public:
    Tensor() : node_(std::make_shared<Node<T>>()) {
        node_->shape = Shape{};
        node_->value = {T(0)};
    }

    static Tensor from_vector(Shape shape, std::vector<T> values) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_to_string(shape) + " does not match buffer length " +
                             std::to_string(values.size()));
        }
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(values);
        return t;
    }

    static Tensor zeros(Shape shape) {
        std::vector<T> v(numel(shape), T(0));
        return from_vector(std::move(shape), std::move(v));
    }

    static Tensor full(Shape shape, T x) {
        std::vector<T> v(numel(shape), x);
        return from_vector(std::move(shape), std::move(v));
    }

    static Tensor scalar(T x) { return from_vector(Shape{}, {x}); }

    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    const std::vector<T>& values() const { return node_->value; }

    // Mutable access to a leaf's buffer (optimizer updates, finite
    // differences). Mutating between a forward pass and its backward pass
    // invalidates the recorded pullbacks.
    std::vector<T>& values_mut() {
        if (!node_->is_leaf) throw Error("tensor: values_mut on a non-leaf node");
        return node_->value;
    }

    T item() const {
        if (size() != 1) {
            throw ShapeError("tensor: item() on non-scalar of shape " + shape_to_string(shape()));
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool flag) {
        if (!node_->is_leaf) throw Error("tensor: set_requires_grad on a non-leaf node");
        node_->requires_grad = flag;
    }

    // Accumulated gradient; zeros when backward never reached this leaf.
    std::vector<T> grad() const {
        if (node_->grad.empty()) return std::vector<T>(size(), T(0));
        return node_->grad;
    }

    const std::vector<T>& grad_ref() const {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    // New leaf holding a copy of the values, detached from any graph.
    Tensor detach() const {
        Tensor t;
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

  private:
    std::shared_ptr<Node<T>> node_;
};

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                             shape_to_string(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides of `s` right-aligned into the space of `out`, with
// stride 0 on broadcast (size-1 or missing) dimensions.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    std::size_t off = out.size() - s.size();
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

// Elementwise binary over broadcast operands, visiting the output in
// row-major order with incrementally maintained input offsets.
template <class T, class F>
void ew_broadcast(const Shape& out, const Shape& sa, const T* a, const Shape& sb, const T* b, T* o, F f) {
    std::size_t n = numel(out);
    if (n == 0) return;
    if (out.empty()) {
        o[0] = f(a[0], b[0]);
        return;
    }
    auto sta = broadcast_strides(sa, out);
    auto stb = broadcast_strides(sb, out);
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t la = 0, lb = 0;
    for (std::size_t lin = 0;;) {
        o[lin++] = f(a[la], b[lb]);
        if (lin == n) break;
        std::size_t d = out.size();
        while (d-- > 0) {
            ++idx[d];
            la += sta[d];
            lb += stb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            la -= sta[d] * out[d];
            lb -= stb[d] * out[d];
        }
    }
}

// Sum `g` (shaped `from`) down to shape `to` (broadcast inverse).
template <class T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& from, const Shape& to) {
    if (from == to) return g;
    std::vector<T> r(numel(to), T(0));
    if (g.empty()) return r;
    if (from.empty()) {
        r[0] += g[0];
        return r;
    }
    auto st = broadcast_strides(to, from);
    std::vector<std::size_t> idx(from.size(), 0);
    std::size_t lr = 0;
    std::size_t n = g.size();
    for (std::size_t lin = 0;;) {
        r[lr] += g[lin++];
        if (lin == n) break;
        std::size_t d = from.size();
        while (d-- > 0) {
            ++idx[d];
            lr += st[d];
            if (idx[d] < from[d]) break;
            idx[d] = 0;
            lr -= st[d] * from[d];
        }
    }
    return r;
}

template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(const std::vector<T>&)> pullback) {
    check_finite(op, value);
    bool record = grad_enabled();
    bool any_rg = false;
    if (record) {
        for (const auto& p : parents) any_rg = any_rg || p->requires_grad;
    }
    Tensor<T> t = Tensor<T>::from_vector(std::move(shape), std::move(value));
    if (record && any_rg) {
        auto n = t.node();
        n->requires_grad = true;
        n->is_leaf = false;
        n->op = op;
        n->parents = std::move(parents);
        n->pullback = std::move(pullback);
    }
    return t;
}

template <class T>
void accumulate(const std::shared_ptr<Node<T>>& p, const std::vector<T>& contrib) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < contrib.size(); ++i) p->grad[i] += contrib[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class F, class DF>
Tensor<T> binary_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DF dfa_dfb) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    Shape so = broadcast_shape(op, sa, sb);
    std::vector<T> out(numel(so));
    if (sa == sb) {
        const auto& va = a.values();
        const auto& vb = b.values();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(va[i], vb[i]);
    } else {
        ew_broadcast(so, sa, a.values().data(), sb, b.values().data(), out.data(), f);
    }
    auto an = a.node();
    auto bn = b.node();
    Shape so_copy = so;
    auto pb = [an, bn, sa, sb, so_copy, dfa_dfb](const std::vector<T>& g) {
        dfa_dfb(an, bn, sa, sb, so_copy, g);
    };
    return make_result<T>(op, std::move(so), std::move(out), {an, bn}, std::move(pb));
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](const std::shared_ptr<Node<T>>& an, const std::shared_ptr<Node<T>>& bn, const Shape& sa,
           const Shape& sb, const Shape& so, const std::vector<T>& g) {
            detail::accumulate(an, detail::reduce_to_shape(g, so, sa));
            detail::accumulate(bn, detail::reduce_to_shape(g, so, sb));
        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](const std::shared_ptr<Node<T>>& an, const std::shared_ptr<Node<T>>& bn, const Shape& sa,
           const Shape& sb, const Shape& so, const std::vector<T>& g) {
            detail::accumulate(an, detail::reduce_to_shape(g, so, sa));
            std::vector<T> ng(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
            detail::accumulate(bn, detail::reduce_to_shape(ng, so, sb));
        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    auto an = a.node();
    auto bn = b.node();
    return detail::binary_broadcast<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [an, bn](const std::shared_ptr<Node<T>>&, const std::shared_ptr<Node<T>>&, const Shape& sa_,
                 const Shape& sb_, const Shape& so, const std::vector<T>& g) {
            if (an->requires_grad) {
                std::vector<T> ga(g.size());
                if (sa_ == sb_) {
                    const auto& vb = bn->value;
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * vb[i];
                } else {
                    detail::ew_broadcast(so, so, g.data(), sb_, bn->value.data(), ga.data(),
                                         [](T x, T y) { return x * y; });
                }
                detail::accumulate(an, detail::reduce_to_shape(ga, so, sa_));
            }
            if (bn->requires_grad) {
                std::vector<T> gb(g.size());
                if (sa_ == sb_) {
                    const auto& va = an->value;
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * va[i];
                } else {
                    detail::ew_broadcast(so, so, g.data(), sa_, an->value.data(), gb.data(),
                                         [](T x, T y) { return x * y; });
                }
                detail::accumulate(bn, detail::reduce_to_shape(gb, so, sb_));
            }
        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.size());
    const auto& va = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * va[i];
    auto an = a.node();
    return detail::make_result<T>(
        "scale", a.shape(), std::move(out), {an},
        [an, c](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += c * g[i];
        });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto& va = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] > T(0) ? va[i] : T(0);
    auto an = a.node();
    return detail::make_result<T>(
        "relu", a.shape(), std::move(out), {an},
        [an](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const auto& va = an->value;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (va[i] > T(0)) an->grad[i] += g[i];
            }
        });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto& va = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(va[i]);
    auto an = a.node();
    std::vector<T> saved = out;
    return detail::make_result<T>(
        "exp", a.shape(), std::move(out), {an},
        [an, saved = std::move(saved)](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * saved[i];
        });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto& va = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(va[i]);
    auto an = a.node();
    return detail::make_result<T>(
        "log", a.shape(), std::move(out), {an},
        [an](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const auto& va = an->value;
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] / va[i];
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (T x : a.values()) s += x;
    auto an = a.node();
    return detail::make_result<T>(
        "sum", Shape{}, {s}, {an},
        [an](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g[0];
        });
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) {
        throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(s));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::size_t n = s[axis];
    Shape so;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != axis) so.push_back(s[i]);
    }
    std::vector<T> out(outer * inner, T(0));
    const auto& va = a.values();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
            const T* src = &va[(o * n + k) * inner];
            T* dst = &out[o * inner];
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    auto an = a.node();
    return detail::make_result<T>(
        "sum_axis", std::move(so), std::move(out), {an},
        [an, outer, n, inner](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t k = 0; k < n; ++k) {
                    T* dst = &an->grad[(o * n + k) * inner];
                    const T* src = &g[o * inner];
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            }
        });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) {
        throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(s));
    }
    return scale(sum_axis(a, axis), T(1) / static_cast<T>(s[axis]));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(shape));
    }
    auto an = a.node();
    std::vector<T> out = a.values();
    return detail::make_result<T>(
        "reshape", std::move(shape), std::move(out), {an},
        [an](const std::vector<T>& g) { detail::accumulate(an, g); });
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& a, Shape shape) {
    Shape so = detail::broadcast_shape("broadcast", a.shape(), shape);
    if (so != shape) {
        throw ShapeError("broadcast: cannot broadcast " + shape_to_string(a.shape()) + " to " +
                         shape_to_string(shape));
    }
    std::vector<T> out(numel(so));
    // Reuse the binary iterator with the source as both operands.
    detail::ew_broadcast(so, a.shape(), a.values().data(), a.shape(), a.values().data(), out.data(),
                         [](T x, T) { return x; });
    auto an = a.node();
    Shape sa = a.shape();
    return detail::make_result<T>(
        "broadcast", std::move(so), std::move(out), {an},
        [an, sa, shape](const std::vector<T>& g) {
            detail::accumulate(an, detail::reduce_to_shape(g, shape, sa));
        });
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_to_string(sa) + " and " +
                         shape_to_string(sb));
    }
    std::size_t M = sa[0], K = sa[1], N = sb[1];
    std::vector<T> out(M * N, T(0));
    const T* A = a.values().data();
    const T* B = b.values().data();
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            T av = A[i * K + k];
            if (av == T(0)) continue;
            const T* brow = &B[k * N];
            T* orow = &out[i * N];
            for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(
        "matmul", Shape{M, N}, std::move(out), {an, bn},
        [an, bn, M, K, N](const std::vector<T>& g) {
            if (an->requires_grad) {
                an->ensure_grad();
                const T* B = bn->value.data();
                for (std::size_t i = 0; i < M; ++i) {
                    for (std::size_t k = 0; k < K; ++k) {
                        const T* brow = &B[k * N];
                        const T* grow = &g[i * N];
                        T acc = T(0);
                        for (std::size_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
                        an->grad[i * K + k] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                const T* A = an->value.data();
                for (std::size_t i = 0; i < M; ++i) {
                    for (std::size_t k = 0; k < K; ++k) {
                        T av = A[i * K + k];
                        if (av == T(0)) continue;
                        const T* grow = &g[i * N];
                        T* brow = &bn->grad[k * N];
                        for (std::size_t j = 0; j < N; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis, max-subtraction stabilized)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void softmax_rows(const T* in, T* out, std::size_t rows, std::size_t k) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = &in[r * k];
        T* y = &out[r * k];
        T mx = x[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        T s = T(0);
        for (std::size_t j = 0; j < k; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        for (std::size_t j = 0; j < k; ++j) y[j] /= s;
    }
}

}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
    const Shape& s = a.shape();
    if (s.empty()) throw ShapeError("softmax: requires at least 1 dimension, got " + shape_to_string(s));
    std::size_t k = s.back();
    std::size_t rows = a.size() / k;
    std::vector<T> out(a.size());
    detail::softmax_rows(a.values().data(), out.data(), rows, k);
    auto an = a.node();
    std::vector<T> y = out;
    return detail::make_result<T>(
        "softmax", s, std::move(out), {an},
        [an, y = std::move(y), rows, k](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yr = &y[r * k];
                const T* gr = &g[r * k];
                T dot = T(0);
                for (std::size_t j = 0; j < k; ++j) dot += gr[j] * yr[j];
                T* dst = &an->grad[r * k];
                for (std::size_t j = 0; j < k; ++j) dst[j] += yr[j] * (gr[j] - dot);
            }
        });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    const Shape& s = a.shape();
    if (s.empty()) {
        throw ShapeError("log_softmax: requires at least 1 dimension, got " + shape_to_string(s));
    }
    std::size_t k = s.back();
    std::size_t rows = a.size() / k;
    std::vector<T> out(a.size());
    const auto& va = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = &va[r * k];
        T* y = &out[r * k];
        T mx = x[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        T sum_exp = T(0);
        for (std::size_t j = 0; j < k; ++j) sum_exp += std::exp(x[j] - mx);
        T lse = mx + std::log(sum_exp);
        for (std::size_t j = 0; j < k; ++j) y[j] = x[j] - lse;
    }
    auto an = a.node();
    std::vector<T> saved = out;
    return detail::make_result<T>(
        "log_softmax", s, std::move(out), {an},
        [an, saved = std::move(saved), rows, k](const std::vector<T>& g) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* lr = &saved[r * k];
                const T* gr = &g[r * k];
                T gsum = T(0);
                for (std::size_t j = 0; j < k; ++j) gsum += gr[j];
                T* dst = &an->grad[r * k];
                for (std::size_t j = 0; j < k; ++j) dst[j] += gr[j] - std::exp(lr[j]) * gsum;
            }
        });
}

// ---------------------------------------------------------------------------
// Column selection: out[b] = x[b, col]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> select_column(const Tensor<T>& x, std::size_t col) {
    const Shape& s = x.shape();
    if (s.size() != 2 || col >= s[1]) {
        throw ShapeError("select_column: column " + std::to_string(col) + " invalid for shape " +
                         shape_to_string(s));
    }
    std::size_t rows = s[0], k = s[1];
    std::vector<T> out(rows);
    const auto& v = x.values();
    for (std::size_t r = 0; r < rows; ++r) out[r] = v[r * k + col];
    auto xn = x.node();
    return detail::make_result<T>(
        "select_column", Shape{rows}, std::move(out), {xn},
        [xn, rows, k, col](const std::vector<T>& g) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) xn->grad[r * k + col] += g[r];
        });
}

// ---------------------------------------------------------------------------
// 2-D convolution, stride 1, zero padding  (x: [B,C,H,W], w: [O,C,kh,kw])
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t pad) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) {
        throw ShapeError("conv2d: incompatible shapes " + shape_to_string(sx) + " and " +
                         shape_to_string(sw));
    }
    std::size_t B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    std::size_t O = sw[0], kh = sw[2], kw = sw[3];
    std::ptrdiff_t ho = static_cast<std::ptrdiff_t>(H + 2 * pad) - static_cast<std::ptrdiff_t>(kh) + 1;
    std::ptrdiff_t wo = static_cast<std::ptrdiff_t>(W + 2 * pad) - static_cast<std::ptrdiff_t>(kw) + 1;
    if (ho < 1 || wo < 1) {
        throw ShapeError("conv2d: kernel " + shape_to_string(sw) + " larger than padded input " +
                         shape_to_string(sx));
    }
    std::size_t Ho = static_cast<std::size_t>(ho), Wo = static_cast<std::size_t>(wo);
    const std::ptrdiff_t P = static_cast<std::ptrdiff_t>(pad);

    auto clamp_lo = [P](std::size_t t) {
        std::ptrdiff_t v = P - static_cast<std::ptrdiff_t>(t);
        return v > 0 ? static_cast<std::size_t>(v) : std::size_t(0);
    };
    auto clamp_hi = [P](std::size_t limit, std::size_t extent, std::size_t t) {
        std::ptrdiff_t v = static_cast<std::ptrdiff_t>(extent) + P - static_cast<std::ptrdiff_t>(t);
        if (v < 0) v = 0;
        return std::min<std::size_t>(limit, static_cast<std::size_t>(v));
    };

    std::vector<T> out(B * O * Ho * Wo, T(0));
    const T* X = x.values().data();
    const T* Wt = w.values().data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t o = 0; o < O; ++o) {
            T* obase = &out[(b * O + o) * Ho * Wo];
            for (std::size_t c = 0; c < C; ++c) {
                const T* xbase = &X[(b * C + c) * H * W];
                const T* wbase = &Wt[(o * C + c) * kh * kw];
                for (std::size_t r = 0; r < kh; ++r) {
                    std::size_t oh_lo = clamp_lo(r), oh_hi = clamp_hi(Ho, H, r);
                    for (std::size_t s = 0; s < kw; ++s) {
                        T wv = wbase[r * kw + s];
                        if (wv == T(0)) continue;
                        std::size_t ow_lo = clamp_lo(s), ow_hi = clamp_hi(Wo, W, s);
                        if (ow_hi <= ow_lo) continue;
                        std::size_t n = ow_hi - ow_lo;
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const T* xrow = xbase + (oh + r - pad) * W + (ow_lo + s - pad);
                            T* orow = obase + oh * Wo + ow_lo;
                            for (std::size_t i = 0; i < n; ++i) orow[i] += wv * xrow[i];
                        }
                    }
                }
            }
        }
    }

    auto xn = x.node();
    auto wn = w.node();
    return detail::make_result<T>(
        "conv2d", Shape{B, O, Ho, Wo}, std::move(out), {xn, wn},
        [xn, wn, B, C, H, W, O, kh, kw, Ho, Wo, pad, clamp_lo, clamp_hi](const std::vector<T>& g) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                const T* Wt = wn->value.data();
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t o = 0; o < O; ++o) {
                        const T* gbase = &g[(b * O + o) * Ho * Wo];
                        for (std::size_t c = 0; c < C; ++c) {
                            T* gxbase = &xn->grad[(b * C + c) * H * W];
                            const T* wbase = &Wt[(o * C + c) * kh * kw];
                            for (std::size_t r = 0; r < kh; ++r) {
                                std::size_t oh_lo = clamp_lo(r), oh_hi = clamp_hi(Ho, H, r);
                                for (std::size_t s = 0; s < kw; ++s) {
                                    T wv = wbase[r * kw + s];
                                    if (wv == T(0)) continue;
                                    std::size_t ow_lo = clamp_lo(s), ow_hi = clamp_hi(Wo, W, s);
                                    if (ow_hi <= ow_lo) continue;
                                    std::size_t n = ow_hi - ow_lo;
                                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        T* gxrow = gxbase + (oh + r - pad) * W + (ow_lo + s - pad);
                                        const T* grow = gbase + oh * Wo + ow_lo;
                                        for (std::size_t i = 0; i < n; ++i) gxrow[i] += wv * grow[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                const T* X = xn->value.data();
                for (std::size_t o = 0; o < O; ++o) {
                    for (std::size_t c = 0; c < C; ++c) {
                        T* gwbase = &wn->grad[(o * C + c) * kh * kw];
                        for (std::size_t r = 0; r < kh; ++r) {
                            std::size_t oh_lo = clamp_lo(r), oh_hi = clamp_hi(Ho, H, r);
                            for (std::size_t s = 0; s < kw; ++s) {
                                std::size_t ow_lo = clamp_lo(s), ow_hi = clamp_hi(Wo, W, s);
                                if (ow_hi <= ow_lo || oh_hi <= oh_lo) continue;
                                std::size_t n = ow_hi - ow_lo;
                                T acc = T(0);
                                for (std::size_t b = 0; b < B; ++b) {
                                    const T* xbase = &X[(b * C + c) * H * W];
                                    const T* gbase = &g[(b * O + o) * Ho * Wo];
                                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const T* xrow = xbase + (oh + r - pad) * W + (ow_lo + s - pad);
                                        const T* grow = gbase + oh * Wo + ow_lo;
                                        for (std::size_t i = 0; i < n; ++i) acc += xrow[i] * grow[i];
                                    }
                                }
                                gwbase[r * kw + s] += acc;
                            }
                        }
                    }
                }
            }
        });
}

// out[b,c,h,w] = x[b,c,h,w] + bias[c]
template <class T>
Tensor<T> add_bias_nchw(const Tensor<T>& x, const Tensor<T>& bias) {
    const Shape& sx = x.shape();
    const Shape& sb = bias.shape();
    if (sx.size() != 4 || sb.size() != 1 || sb[0] != sx[1]) {
        throw ShapeError("add_bias_nchw: incompatible shapes " + shape_to_string(sx) + " and " +
                         shape_to_string(sb));
    }
    std::size_t B = sx[0], C = sx[1], hw = sx[2] * sx[3];
    std::vector<T> out(x.size());
    const auto& vx = x.values();
    const auto& vb = bias.values();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = &vx[(b * C + c) * hw];
            T* dst = &out[(b * C + c) * hw];
            T bv = vb[c];
            for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
        }
    }
    auto xn = x.node();
    auto bn = bias.node();
    return detail::make_result<T>(
        "add_bias_nchw", sx, std::move(out), {xn, bn},
        [xn, bn, B, C, hw](const std::vector<T>& g) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* src = &g[(b * C + c) * hw];
                        T acc = T(0);
                        for (std::size_t i = 0; i < hw; ++i) acc += src[i];
                        bn->grad[c] += acc;
                    }
                }
            }
        });
}

// 2x2 average pooling, stride 2, floor on odd extents.
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    const Shape& sx = x.shape();
    if (sx.size() != 4 || sx[2] < 2 || sx[3] < 2) {
        throw ShapeError("avg_pool2: needs [B,C,H,W] with H,W >= 2, got " + shape_to_string(sx));
    }
    std::size_t B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(B * C * Ho * Wo);
    const auto& vx = x.values();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        const T* src = &vx[bc * H * W];
        T* dst = &out[bc * Ho * Wo];
        for (std::size_t h = 0; h < Ho; ++h) {
            for (std::size_t w = 0; w < Wo; ++w) {
                const T* p = src + (2 * h) * W + 2 * w;
                dst[h * Wo + w] = (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
            }
        }
    }
    auto xn = x.node();
    return detail::make_result<T>(
        "avg_pool2", Shape{B, C, Ho, Wo}, std::move(out), {xn},
        [xn, B, C, H, W, Ho, Wo](const std::vector<T>& g) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t bc = 0; bc < B * C; ++bc) {
                T* dst = &xn->grad[bc * H * W];
                const T* src = &g[bc * Ho * Wo];
                for (std::size_t h = 0; h < Ho; ++h) {
                    for (std::size_t w = 0; w < Wo; ++w) {
                        T gv = src[h * Wo + w] * T(0.25);
                        T* p = dst + (2 * h) * W + 2 * w;
                        p[0] += gv;
                        p[1] += gv;
                        p[W] += gv;
                        p[W + 1] += gv;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Runs reverse-mode differentiation from a scalar loss. Gradients are
// accumulated into every reachable requires_grad leaf (call zero_grad to
// reset between accumulations). The traversed graph is consumed: a second
// backward through any part of it raises an error.
template <class T>
void backward(const Tensor<T>& loss) {
    auto root = loss.node();
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_to_string(loss.shape()));
    }
    if (!root->requires_grad) {
        throw Error("backward: loss does not depend on any requires_grad leaf");
    }
    if (root->consumed) throw Error("backward: tape already consumed by a previous backward");

    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
    visited.insert(root.get());
    stack.push_back({root, 0});
    while (!stack.empty()) {
        auto n = stack.back().first;
        std::size_t i = stack.back().second;
        if (i < n->parents.size()) {
            ++stack.back().second;
            const auto& p = n->parents[i];
            if (!p->requires_grad) continue;
            if (!p->is_leaf && p->consumed) {
                throw Error("backward: tape already consumed by a previous backward");
            }
            if (visited.insert(p.get()).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& n = *it;
        if (n->pullback) {
            n->ensure_grad();
            n->pullback(n->grad);
        }
        if (!n->is_leaf) {
            n->consumed = true;
            n->pullback = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences (the gradient oracle)
// ---------------------------------------------------------------------------

// Central difference of fn at one coordinate of `point`.
template <class T>
T finite_difference_coordinate(const std::function<T(const Tensor<T>&)>& fn, const Tensor<T>& point,
                               std::size_t j, T eps) {
    if (!(eps > T(0))) throw ConfigError("finite_difference_gradient: eps must be > 0");
    Tensor<T> x = point.detach();
    auto& v = x.values_mut();
    if (j >= v.size()) {
        throw ShapeError("finite_difference_gradient: coordinate " + std::to_string(j) +
                         " out of range for shape " + shape_to_string(point.shape()));
    }
    check_finite("finite_difference_gradient input", v);
    T orig = v[j];
    NoGradGuard ng;
    v[j] = orig + eps;
    T fp = fn(x);
    v[j] = orig - eps;
    T fm = fn(x);
    v[j] = orig;
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm))) {
        throw NumericError("finite_difference_gradient: fn returned a non-finite value");
    }
    return (fp - fm) / (T(2) * eps);
}

// Full central-difference gradient of fn at `point`.
template <class T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& fn, const Tensor<T>& point,
                                     T eps) {
    std::vector<T> g(point.size());
    for (std::size_t j = 0; j < g.size(); ++j) {
        g[j] = finite_difference_coordinate(fn, point, j, eps);
    }
    return Tensor<T>::from_vector(point.shape(), std::move(g));
}

}  // namespace prue

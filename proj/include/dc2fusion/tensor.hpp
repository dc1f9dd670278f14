#pragma once

// Dense tensors plus a reverse-mode tape. Ops execute eagerly; when a Tape is
// active (TapeScope) and an input requires gradients, the op records a backward
// closure. Backward closures are hand-written loops over raw buffers; gradients
// accumulate (+=) into zero-initialized buffers, so fan-out is handled by
// construction. Everything is single-output, creation order == topological
// order, and backward visits nodes in strict reverse creation order once.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dc2fusion/common.hpp"
#include "dc2fusion/rng.hpp"

namespace dc2f {

// Debug toggles. check_finite scans every op output when enabled.
// backward_fault is a self-test fixture: it deliberately corrupts one backward
// rule (mul) so the gradient checker can prove it catches broken gradients.
struct DebugFlags {
    static inline bool check_finite = false;
    static inline bool backward_fault = false;
};

template <class T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.st_ = std::make_shared<TensorStorage<T>>();
        t.st_->shape = std::move(shape);
        t.st_->values.assign(numel_of(t.st_->shape), T(0));
        t.st_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.st_->values.begin(), t.st_->values.end(), value);
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return full(Shape{}, value, requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel_of(shape) != values.size())
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.st_ = std::make_shared<TensorStorage<T>>();
        t.st_->shape = std::move(shape);
        t.st_->values = std::move(values);
        t.st_->requires_grad = requires_grad;
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (T& v : t.st_->values) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return static_cast<bool>(st_); }
    const Shape& shape() const { return st_->shape; }
    std::size_t dim() const { return st_->shape.size(); }
    std::size_t numel() const { return st_->values.size(); }
    std::size_t extent(std::size_t axis) const { return st_->shape[axis]; }

    T* data() { return st_->values.data(); }
    const T* data() const { return st_->values.data(); }
    std::span<const T> values() const { return {st_->values.data(), st_->values.size()}; }

    bool requires_grad() const { return st_->requires_grad; }
    void set_requires_grad(bool rg) { st_->requires_grad = rg; }

    // grad buffer, allocated zero-filled on first touch
    std::vector<T>& grad_buffer() const {
        if (st_->grad.empty()) st_->grad.assign(st_->values.size(), T(0));
        return st_->grad;
    }
    // nullptr when no gradient has been accumulated yet
    const T* grad_data() const { return st_->grad.empty() ? nullptr : st_->grad.data(); }
    T* grad_data_mut() { return st_->grad.empty() ? nullptr : st_->grad.data(); }
    bool has_grad() const { return !st_->grad.empty(); }
    void zero_grad() { st_->grad.clear(); }

    Tensor grad_tensor() const {
        Tensor g = zeros(st_->shape);
        if (!st_->grad.empty()) g.st_->values = st_->grad;
        return g;
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
        return st_->values[0];
    }

    Tensor clone() const {
        Tensor t = zeros(st_->shape, st_->requires_grad);
        t.st_->values = st_->values;
        return t;
    }

    bool same_storage(const Tensor& other) const { return st_ == other.st_; }

private:
    std::shared_ptr<TensorStorage<T>> st_;
};

// ---------------------------------------------------------------------------
// Tape

template <class T>
class Tape {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    void record(const char* op, std::function<void()> fn) {
        nodes_.push_back(Node{op, std::move(fn)});
    }

    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and runs every node once, newest first.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) throw NumericError("backward requires a scalar loss");
        if (consumed_) throw NumericError("tape already consumed by a backward pass");
        consumed_ = true;
        loss.grad_buffer()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    }

    void clear() {
        nodes_.clear();
        consumed_ = false;
    }

private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

template <class T>
inline Tape<T>*& current_tape() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}

// RAII activation of a tape on this thread; pass nullptr to suspend recording.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>* tape) : prev_(current_tape<T>()) { current_tape<T>() = tape; }
    explicit TapeScope(Tape<T>& tape) : TapeScope(&tape) {}
    ~TapeScope() { current_tape<T>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

namespace detail {

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    if (!DebugFlags::check_finite) return;
    for (T v : t.values())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

template <class T, class F>
inline void record_if_needed(const char* op, Tensor<T>& out, std::initializer_list<Tensor<T>> inputs,
                             F&& make_backward) {
    check_finite(out, op);
    Tape<T>* tape = current_tape<T>();
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        tape->record(op, make_backward());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly, or one operand may be a
// scalar (numel == 1) which broadcasts; the scalar side's gradient is the sum.

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

template <class T>
inline Tensor<T> binary_op(const char* name, BinKind kind, const Tensor<T>& a, const Tensor<T>& b) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw ShapeError(std::string(name) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

    const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const std::size_t n = out.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t sa = a_scalar ? 0 : 1;
    const std::size_t sb = b_scalar ? 0 : 1;
    switch (kind) {
        case BinKind::Add:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] + pb[i * sb];
            break;
        case BinKind::Sub:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] - pb[i * sb];
            break;
        case BinKind::Mul:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] * pb[i * sb];
            break;
        case BinKind::Div:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] / pb[i * sb];
            break;
    }

    record_if_needed(name, out, {a, b}, [&] {
        return [kind, a, b, out, n, sa, sb]() mutable {
            const T* go = out.grad_data();
            if (!go) return;
            const T* pa = a.data();
            const T* pb = b.data();
            if (a.requires_grad()) {
                T* ga = a.grad_buffer().data();
                for (std::size_t i = 0; i < n; ++i) {
                    T g;
                    switch (kind) {
                        case BinKind::Add:
                        case BinKind::Sub: g = go[i]; break;
                        case BinKind::Mul:
                            g = go[i] * pb[i * sb];
                            if (DebugFlags::backward_fault) g *= T(1.5);  // self-test fixture
                            break;
                        case BinKind::Div: g = go[i] / pb[i * sb]; break;
                        default: g = T(0);
                    }
                    ga[i * sa] += g;
                }
            }
            if (b.requires_grad()) {
                T* gb = b.grad_buffer().data();
                for (std::size_t i = 0; i < n; ++i) {
                    T g;
                    switch (kind) {
                        case BinKind::Add: g = go[i]; break;
                        case BinKind::Sub: g = -go[i]; break;
                        case BinKind::Mul: g = go[i] * pa[i * sa]; break;
                        case BinKind::Div: {
                            const T bv = pb[i * sb];
                            g = -go[i] * pa[i * sa] / (bv * bv);
                            break;
                        }
                        default: g = T(0);
                    }
                    gb[i * sb] += g;
                }
            }
        };
    });
    return out;
}

}  // namespace detail

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary_op("add", detail::BinKind::Add, a, b); }
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary_op("sub", detail::BinKind::Sub, a, b); }
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary_op("mul", detail::BinKind::Mul, a, b); }
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary_op("div", detail::BinKind::Div, a, b); }

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// y = alpha*x + beta, plain constants
template <class T>
Tensor<T> affine(const Tensor<T>& x, T alpha, T beta) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = alpha * px[i] + beta;
    detail::record_if_needed("affine", out, {x}, [&] {
        return [x, out, alpha, n]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            T* gx = x.grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += alpha * go[i];
        };
    });
    return out;
}

template <class T> Tensor<T> scale(const Tensor<T>& x, T alpha) { return affine(x, alpha, T(0)); }
template <class T> Tensor<T> add_const(const Tensor<T>& x, T beta) { return affine(x, T(1), beta); }
template <class T> Tensor<T> neg(const Tensor<T>& x) { return affine(x, T(-1), T(0)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

// generic unary: f(x) and f'(x) as callables evaluated in the closure
template <class T, class Fwd, class Bwd>
inline Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Bwd dfn) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    record_if_needed(name, out, {x}, [&] {
        return [x, out, dfn, n]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            const T* px = x.data();
            T* gx = x.grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * dfn(px[i]);
        };
    });
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary_op(
        "sqrt", x, [](T v) { return std::sqrt(v); },
        [](T v) { return T(0.5) / std::sqrt(v); });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary_op(
        "abs", x, [](T v) { return std::abs(v); },
        [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary_op(
        "exp", x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

// exact (erf-based) GELU
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        "gelu", x,
        [=](T v) {
            double d = static_cast<double>(v);
            return static_cast<T>(0.5 * d * (1.0 + std::erf(d * inv_sqrt2)));
        },
        [=](T v) {
            double d = static_cast<double>(v);
            double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
            return static_cast<T>(cdf + d * pdf);
        });
}

// gradient passes through strictly inside (lo,hi), zero where saturated
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return detail::unary_op(
        "clamp", x, [=](T v) { return std::min(std::max(v, lo), hi); },
        [=](T v) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// matmul: [m,k]x[k,n], [B,m,k]x[B,k,n], or [B,m,k]x[k,n] (shared rhs).
// Backward: dA = dC.B^T, dB = A^T.dC (summed over batch for a shared rhs).

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const bool a_batched = a.dim() == 3;
    const bool b_batched = b.dim() == 3;
    if (!((a.dim() == 2 && b.dim() == 2) || (a_batched && b.dim() == 2) || (a_batched && b_batched)))
        throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

    const std::size_t batch = a_batched ? a.extent(0) : 1;
    const std::size_t m = a.extent(a_batched ? 1 : 0);
    const std::size_t k = a.extent(a_batched ? 2 : 1);
    const std::size_t kb = b.extent(b_batched ? 1 : 0);
    const std::size_t n = b.extent(b_batched ? 2 : 1);
    if (k != kb) throw ShapeError("matmul: inner extents " + std::to_string(k) + " vs " + std::to_string(kb));
    if (b_batched && b.extent(0) != batch)
        throw ShapeError("matmul: batch extents " + std::to_string(batch) + " vs " + std::to_string(b.extent(0)));

    Shape out_shape = a_batched ? Shape{batch, m, n} : Shape{m, n};
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t b_stride = b_batched ? k * n : 0;

#pragma omp parallel for schedule(static)
    for (long long bi = 0; bi < static_cast<long long>(batch); ++bi) {
        const T* ab = pa + static_cast<std::size_t>(bi) * m * k;
        const T* bb = pb + static_cast<std::size_t>(bi) * b_stride;
        T* ob = po + static_cast<std::size_t>(bi) * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            T* orow = ob + i * n;
            for (std::size_t l = 0; l < k; ++l) {
                const T av = ab[i * k + l];
                const T* brow = bb + l * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }

    detail::record_if_needed("matmul", out, {a, b}, [&] {
        return [a, b, out, batch, m, k, n, b_stride]() mutable {
            const T* go = out.grad_data();
            if (!go) return;
            const T* pa = a.data();
            const T* pb = b.data();
            if (a.requires_grad()) {
                T* ga = a.grad_buffer().data();
                for (std::size_t bi = 0; bi < batch; ++bi) {
                    const T* gob = go + bi * m * n;
                    const T* bb = pb + bi * b_stride;
                    T* gab = ga + bi * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t l = 0; l < k; ++l) {
                            T acc = T(0);
                            const T* grow = gob + i * n;
                            const T* brow = bb + l * n;
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            gab[i * k + l] += acc;
                        }
                }
            }
            if (b.requires_grad()) {
                T* gb = b.grad_buffer().data();
                for (std::size_t bi = 0; bi < batch; ++bi) {
                    const T* gob = go + bi * m * n;
                    const T* ab = pa + bi * m * k;
                    T* gbb = gb + bi * b_stride;
                    for (std::size_t l = 0; l < k; ++l)
                        for (std::size_t i = 0; i < m; ++i) {
                            const T av = ab[i * k + l];
                            const T* grow = gob + i * n;
                            T* gbrow = gbb + l * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                }
            }
        };
    });
    return out;
}

// swap the last two axes (rank >= 2)
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    if (x.dim() < 2) throw ShapeError("transpose_last2 requires rank >= 2");
    Shape s = x.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    const std::size_t r = x.shape()[x.dim() - 2];
    const std::size_t c = x.shape()[x.dim() - 1];
    const std::size_t batch = x.numel() / (r * c);
    Tensor<T> out = Tensor<T>::zeros(std::move(s));
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) po[b * r * c + j * r + i] = px[b * r * c + i * c + j];
    detail::record_if_needed("transpose_last2", out, {x}, [&] {
        return [x, out, batch, r, c]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            T* gx = x.grad_buffer().data();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += go[b * r * c + j * r + i];
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax along one axis, max-stabilized

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.dim()) throw ShapeError("softmax: axis out of range");
    const std::size_t n = x.extent(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.extent(i);

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = px[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
            T sum = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                const T e = std::exp(px[base + j * inner] - mx);
                po[base + j * inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < n; ++j) po[base + j * inner] /= sum;
        }

    detail::record_if_needed("softmax", out, {x}, [&] {
        return [x, out, outer, inner, n]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            const T* py = out.data();
            T* gx = x.grad_buffer().data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    T dot = T(0);
                    for (std::size_t j = 0; j < n; ++j) dot += go[base + j * inner] * py[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = base + j * inner;
                        gx[idx] += py[idx] * (go[idx] - dot);
                    }
                }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions. Population statistics (divide by N). Output drops reduced axes;
// reducing every axis yields a rank-0 scalar. Accumulation order is a single
// fixed linear sweep, independent of any internal parallelism elsewhere.

namespace detail {

struct ReducePlan {
    Shape out_shape;
    std::vector<std::size_t> out_index_of_in;  // per input element, flat output index
    std::size_t reduced_count = 1;
};

inline ReducePlan make_reduce_plan(const Shape& shape, std::vector<std::size_t> axes) {
    if (axes.empty()) throw ShapeError("reduce: empty axis set");
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (std::size_t a : axes)
        if (a >= shape.size()) throw ShapeError("reduce: axis out of range");

    ReducePlan plan;
    std::vector<bool> reduced(shape.size(), false);
    for (std::size_t a : axes) {
        reduced[a] = true;
        plan.reduced_count *= shape[a];
    }
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (!reduced[i]) plan.out_shape.push_back(shape[i]);

    // output strides aligned to kept axes
    std::vector<std::size_t> out_stride(shape.size(), 0);
    std::size_t acc = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        if (!reduced[i]) {
            out_stride[i] = acc;
            acc *= shape[i];
        }
    }
    const std::size_t n = numel_of(shape);
    plan.out_index_of_in.resize(n);
    std::vector<std::size_t> idx(shape.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t oi = 0;
        for (std::size_t d = 0; d < shape.size(); ++d) oi += idx[d] * out_stride[d];
        plan.out_index_of_in[flat] = oi;
        for (std::size_t d = shape.size(); d-- > 0;) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
        }
    }
    return plan;
}

}  // namespace detail

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    auto plan = detail::make_reduce_plan(x.shape(), axes);
    Tensor<T> out = Tensor<T>::zeros(plan.out_shape);
    const T* px = x.data();
    T* po = out.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) po[plan.out_index_of_in[i]] += px[i];
    detail::record_if_needed("reduce_sum", out, {x}, [&] {
        auto map = std::make_shared<std::vector<std::size_t>>(std::move(plan.out_index_of_in));
        return [x, out, map, n]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            T* gx = x.grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[(*map)[i]];
        };
    });
    return out;
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    auto plan = detail::make_reduce_plan(x.shape(), axes);
    const T inv = T(1) / static_cast<T>(plan.reduced_count);
    Tensor<T> out = Tensor<T>::zeros(plan.out_shape);
    const T* px = x.data();
    T* po = out.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) po[plan.out_index_of_in[i]] += px[i];
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] *= inv;
    detail::record_if_needed("reduce_mean", out, {x}, [&] {
        auto map = std::make_shared<std::vector<std::size_t>>(std::move(plan.out_index_of_in));
        return [x, out, map, n, inv]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            T* gx = x.grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[(*map)[i]] * inv;
        };
    });
    return out;
}

// population variance (divide by N, not N-1), two-pass
template <class T>
Tensor<T> reduce_var(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    auto plan = detail::make_reduce_plan(x.shape(), axes);
    const std::size_t n = x.numel();
    const std::size_t m = numel_of(plan.out_shape);
    const T inv = T(1) / static_cast<T>(plan.reduced_count);
    std::vector<T> mean(m, T(0));
    const T* px = x.data();
    for (std::size_t i = 0; i < n; ++i) mean[plan.out_index_of_in[i]] += px[i];
    for (std::size_t i = 0; i < m; ++i) mean[i] *= inv;
    Tensor<T> out = Tensor<T>::zeros(plan.out_shape);
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T d = px[i] - mean[plan.out_index_of_in[i]];
        po[plan.out_index_of_in[i]] += d * d;
    }
    for (std::size_t i = 0; i < m; ++i) po[i] *= inv;

    detail::record_if_needed("reduce_var", out, {x}, [&] {
        auto map = std::make_shared<std::vector<std::size_t>>(std::move(plan.out_index_of_in));
        auto mu = std::make_shared<std::vector<T>>(std::move(mean));
        return [x, out, map, mu, n, inv]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            const T* px = x.data();
            T* gx = x.grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t oi = (*map)[i];
                gx[i] += go[oi] * T(2) * (px[i] - (*mu)[oi]) * inv;
            }
        };
    });
    return out;
}

template <class T>
std::vector<std::size_t> all_axes(const Tensor<T>& x) {
    std::vector<std::size_t> axes(x.dim());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    if (axes.empty()) axes.push_back(0);  // rank-0: treated as already reduced
    return axes;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.dim() == 0) return affine(x, T(1), T(0));
    return reduce_mean(x, all_axes(x));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    if (x.dim() == 0) return affine(x, T(1), T(0));
    return reduce_sum(x, all_axes(x));
}

// ---------------------------------------------------------------------------
// concat / slice / split

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = xs[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& x : xs) {
        if (x.dim() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d)
            if (d != axis && x.extent(d) != ref[d])
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(d));
        total += x.extent(axis);
    }
    Shape out_shape = ref;
    out_shape[axis] = total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    T* po = out.data();
    std::size_t offset = 0;
    for (const auto& x : xs) {
        const std::size_t ext = x.extent(axis);
        const T* px = x.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(po + (o * total + offset) * inner, px + o * ext * inner, ext * inner * sizeof(T));
        offset += ext;
    }

    bool any = false;
    for (const auto& x : xs) any = any || x.requires_grad();
    Tape<T>* tape = current_tape<T>();
    detail::check_finite(out, "concat");
    if (tape && any) {
        out.set_requires_grad(true);
        auto inputs = xs;  // keep alive
        tape->record("concat", [inputs, out, outer, inner, total]() mutable {
            const T* go = out.grad_data();
            if (!go) return;
            std::size_t offset = 0;
            for (auto& x : inputs) {
                const std::size_t ext = x.numel() / (outer * inner);
                if (x.requires_grad()) {
                    T* gx = x.grad_buffer().data();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* src = go + (o * total + offset) * inner;
                        T* dst = gx + o * ext * inner;
                        for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += ext;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.dim()) throw ShapeError("slice: axis out of range");
    if (start + len > x.extent(axis)) throw ShapeError("slice: range out of bounds");
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.extent(i);
    const std::size_t ext = x.extent(axis);

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, px + (o * ext + start) * inner, len * inner * sizeof(T));

    detail::record_if_needed("slice", out, {x}, [&] {
        return [x, out, outer, inner, ext, start, len]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            T* gx = x.grad_buffer().data();
            for (std::size_t o = 0; o < outer; ++o) {
                T* dst = gx + (o * ext + start) * inner;
                const T* src = go + o * len * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    });
    return out;
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
    std::size_t sum = 0;
    for (std::size_t s : sizes) sum += s;
    if (axis >= x.dim() || sum != x.extent(axis)) throw ShapeError("split: sizes do not cover axis");
    std::vector<Tensor<T>> parts;
    std::size_t off = 0;
    for (std::size_t s : sizes) {
        parts.push_back(slice(x, axis, off, s));
        off += s;
    }
    return parts;
}

// ---------------------------------------------------------------------------
// reshape / permute

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    Tensor<T> out = Tensor<T>::zeros(std::move(new_shape));
    std::memcpy(out.data(), x.data(), x.numel() * sizeof(T));
    detail::record_if_needed("reshape", out, {x}, [&] {
        return [x, out]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            T* gx = x.grad_buffer().data();
            const std::size_t n = x.numel();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
        };
    });
    return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.dim()) throw ShapeError("permute: rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= perm.size() || seen[perm[i]]) throw ShapeError("permute: invalid permutation");
        seen[perm[i]] = true;
        out_shape[i] = x.extent(perm[i]);
    }
    const std::size_t rank = perm.size();
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.extent(i);
    // stride in the input for each output axis
    std::vector<std::size_t> gather_stride(rank);
    for (std::size_t i = 0; i < rank; ++i) gather_stride[i] = in_stride[perm[i]];

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const std::size_t n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        po[flat] = px[src];
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += gather_stride[d];
            if (idx[d] < out_shape[d]) break;
            src -= gather_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }

    detail::record_if_needed("permute", out, {x}, [&] {
        auto strides = std::make_shared<std::vector<std::size_t>>(gather_stride);
        auto oshape = std::make_shared<Shape>(out_shape);
        return [x, out, strides, oshape]() mutable {
            const T* go = out.grad_data();
            if (!go || !x.requires_grad()) return;
            T* gx = x.grad_buffer().data();
            const std::size_t rank = oshape->size();
            const std::size_t n = x.numel();
            std::vector<std::size_t> idx(rank, 0);
            std::size_t src = 0;
            for (std::size_t flat = 0; flat < n; ++flat) {
                gx[src] += go[flat];
                for (std::size_t d = rank; d-- > 0;) {
                    ++idx[d];
                    src += (*strides)[d];
                    if (idx[d] < (*oshape)[d]) break;
                    src -= (*strides)[d] * (*oshape)[d];
                    idx[d] = 0;
                }
            }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear: y[..., out] = x[..., in] . W[in, out] + b[out]; b may be undefined

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
    if (w.dim() != 2) throw ShapeError("linear: weight must be rank 2");
    const std::size_t in = w.extent(0);
    const std::size_t out_f = w.extent(1);
    if (x.dim() < 1 || x.extent(x.dim() - 1) != in)
        throw ShapeError("linear: input feature extent mismatch");
    if (b.defined() && (b.dim() != 1 || b.extent(0) != out_f))
        throw ShapeError("linear: bias extent mismatch");
    const std::size_t rows = x.numel() / in;

    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = b.defined() ? b.data() : nullptr;
    T* po = out.data();

#pragma omp parallel for schedule(static)
    for (long long ri = 0; ri < static_cast<long long>(rows); ++ri) {
        const std::size_t r = static_cast<std::size_t>(ri);
        const T* xrow = px + r * in;
        T* orow = po + r * out_f;
        if (pb)
            std::memcpy(orow, pb, out_f * sizeof(T));
        for (std::size_t l = 0; l < in; ++l) {
            const T xv = xrow[l];
            const T* wrow = pw + l * out_f;
            for (std::size_t j = 0; j < out_f; ++j) orow[j] += xv * wrow[j];
        }
    }

    detail::record_if_needed("linear", out, {x, w, b.defined() ? b : x}, [&] {
        return [x, w, b, out, rows, in, out_f]() mutable {
            const T* go = out.grad_data();
            if (!go) return;
            const T* px = x.data();
            const T* pw = w.data();
            if (x.requires_grad()) {
                T* gx = x.grad_buffer().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = go + r * out_f;
                    T* gxrow = gx + r * in;
                    for (std::size_t l = 0; l < in; ++l) {
                        T acc = T(0);
                        const T* wrow = pw + l * out_f;
                        for (std::size_t j = 0; j < out_f; ++j) acc += grow[j] * wrow[j];
                        gxrow[l] += acc;
                    }
                }
            }
            if (w.requires_grad()) {
                T* gw = w.grad_buffer().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = go + r * out_f;
                    const T* xrow = px + r * in;
                    for (std::size_t l = 0; l < in; ++l) {
                        const T xv = xrow[l];
                        T* gwrow = gw + l * out_f;
                        for (std::size_t j = 0; j < out_f; ++j) gwrow[j] += xv * grow[j];
                    }
                }
            }
            if (b.defined() && b.requires_grad()) {
                T* gb = b.grad_buffer().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = go + r * out_f;
                    for (std::size_t j = 0; j < out_f; ++j) gb[j] += grow[j];
                }
            }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// layer_norm over a single axis: y = (x - mu)/sqrt(var + eps) * gamma + beta

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t axis, T eps = T(1e-5)) {
    if (axis >= x.dim()) throw ShapeError("layer_norm: axis out of range");
    const std::size_t n = x.extent(axis);
    if (gamma.numel() != n || beta.numel() != n) throw ShapeError("layer_norm: gamma/beta extent mismatch");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.extent(i);

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto inv_std = std::make_shared<std::vector<T>>(outer * inner);
    auto means = std::make_shared<std::vector<T>>(outer * inner);
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pbta = beta.data();
    T* po = out.data();
    const T invn = T(1) / static_cast<T>(n);
    // sweeps run contiguously over the inner stride (the whole spatial volume
    // when normalizing channel axis 0 of [C,X,Y,Z])
    for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t base = o * n * inner;
        T* mu = means->data() + o * inner;
        T* r = inv_std->data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) mu[i] = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T* row = px + base + j * inner;
            for (std::size_t i = 0; i < inner; ++i) mu[i] += row[i];
        }
        for (std::size_t i = 0; i < inner; ++i) mu[i] *= invn;
        for (std::size_t i = 0; i < inner; ++i) r[i] = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T* row = px + base + j * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const T d = row[i] - mu[i];
                r[i] += d * d;
            }
        }
        for (std::size_t i = 0; i < inner; ++i) r[i] = T(1) / std::sqrt(r[i] * invn + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const T* row = px + base + j * inner;
            T* orow = po + base + j * inner;
            const T g = pg[j], b = pbta[j];
            for (std::size_t i = 0; i < inner; ++i) orow[i] = (row[i] - mu[i]) * r[i] * g + b;
        }
    }

    detail::record_if_needed("layer_norm", out, {x, gamma, beta}, [&] {
        return [x, gamma, beta, out, means, inv_std, outer, inner, n, invn]() mutable {
            const T* go = out.grad_data();
            if (!go) return;
            const T* px = x.data();
            const T* pg = gamma.data();
            T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
            T* gg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
            T* gb = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
            std::vector<T> mean_g(inner), mean_gx(inner);
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t base = o * n * inner;
                const T* mu = means->data() + o * inner;
                const T* r = inv_std->data() + o * inner;
                std::fill(mean_g.begin(), mean_g.end(), T(0));
                std::fill(mean_gx.begin(), mean_gx.end(), T(0));
                for (std::size_t j = 0; j < n; ++j) {
                    const T* grow = go + base + j * inner;
                    const T* row = px + base + j * inner;
                    const T gj = pg[j];
                    T acc_g = T(0), acc_b = T(0);
                    for (std::size_t i = 0; i < inner; ++i) {
                        const T xh = (row[i] - mu[i]) * r[i];
                        const T g = grow[i] * gj;
                        mean_g[i] += g;
                        mean_gx[i] += g * xh;
                        acc_g += grow[i] * xh;
                        acc_b += grow[i];
                    }
                    if (gg) gg[j] += acc_g;
                    if (gb) gb[j] += acc_b;
                }
                for (std::size_t i = 0; i < inner; ++i) {
                    mean_g[i] *= invn;
                    mean_gx[i] *= invn;
                }
                if (gx)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T* grow = go + base + j * inner;
                        const T* row = px + base + j * inner;
                        T* gxrow = gx + base + j * inner;
                        const T gj = pg[j];
                        for (std::size_t i = 0; i < inner; ++i) {
                            const T xh = (row[i] - mu[i]) * r[i];
                            gxrow[i] += r[i] * (grow[i] * gj - mean_g[i] - xh * mean_gx[i]);
                        }
                    }
            }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// grad_check: compares tape gradients against central finite differences.
// The finite-difference side evaluates f forward-only with recording suspended,
// so it is independent of every backward rule it is checking.

template <class T>
struct GradCheckResult {
    T max_rel_err = T(0);
    std::size_t checked = 0;
};

template <class T>
GradCheckResult<T> grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                              T eps, std::size_t max_coords = 0, std::uint64_t seed = 0x5eed) {
    Tensor<T> xc = x.clone();
    xc.set_requires_grad(true);
    Tape<T> tape;
    {
        TapeScope<T> scope(tape);
        Tensor<T> y = f(xc);
        if (y.numel() != 1) throw NumericError("grad_check: f must be scalar-valued");
        tape.backward(y);
    }
    Tensor<T> analytic = xc.grad_tensor();

    std::vector<std::size_t> coords(x.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords > 0 && max_coords < coords.size()) {
        Rng rng(seed);
        rng.shuffle(coords);
        coords.resize(max_coords);
    }

    GradCheckResult<T> result;
    TapeScope<T> suspend(static_cast<Tape<T>*>(nullptr));
    for (std::size_t c : coords) {
        Tensor<T> xp = x.clone();
        Tensor<T> xm = x.clone();
        xp.data()[c] += eps;
        xm.data()[c] -= eps;
        const T fp = f(xp).item();
        const T fm = f(xm).item();
        const T fd = (fp - fm) / (T(2) * eps);
        const T ad = analytic.data()[c];
        const T denom = std::max(T(1), std::abs(ad) + std::abs(fd));
        result.max_rel_err = std::max(result.max_rel_err, std::abs(ad - fd) / denom);
        ++result.checked;
    }
    return result;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.values())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

}  // namespace dc2f

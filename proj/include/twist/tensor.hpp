#pragma once

// Dense f32 tensors (rank <= 3) with reverse-mode autodiff on a define-by-run
// tape. Storage is f32; every reduction (matmul inner products, layer-norm
// statistics, softmax sums, losses) accumulates in f64 so finite-difference
// gradient checks stay tight. A Graph is built per forward pass, consumed by
// backward(), and confined to one thread.
//
// Gradient checking needs one extra mechanism: an f64 "shadow" value per
// tensor. When an input carries a shadow (grad_check seeds them on the probed
// parameters), ops propagate an f64 evaluation alongside the f32 one, so the
// central difference reads a value free of intermediate f32 store rounding.
// Tensors without shadows (weights at rest, constants) contribute exactly the
// same rounded values on both sides of the difference, so only perturbed
// paths need the shadow. Normal execution never allocates one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "twist/errors.hpp"

namespace twist {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;    // allocated lazily, same length as data
    std::vector<double> shadow; // f64 evaluation, grad-check probing only
    bool requires_grad = false;
    // Reductions that produce a scalar stash their f64 value here so losses
    // can be read at full precision.
    double scalar64 = std::numeric_limits<double>::quiet_NaN();
};
} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.p_ = std::make_shared<detail::TensorData>();
        t.p_->shape = std::move(shape);
        t.p_->data.assign(static_cast<std::size_t>(shape_numel(t.p_->shape)), 0.0f);
        t.p_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.p_->data.begin(), t.p_->data.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw DimError("Tensor::from: " + std::to_string(values.size()) +
                           " values for shape " + shape_str(shape));
        Tensor t;
        t.p_ = std::make_shared<detail::TensorData>();
        t.p_->shape = std::move(shape);
        t.p_->data = std::move(values);
        t.p_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        Tensor t = from({1}, {v}, requires_grad);
        t.p_->scalar64 = static_cast<double>(v);
        return t;
    }

    static Tensor identity(int n) {
        Tensor t = zeros({n, n});
        for (int i = 0; i < n; ++i) t.p_->data[static_cast<std::size_t>(i) * n + i] = 1.0f;
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return p_->shape; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    int dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(p_->data.size()); }

    float* data() { return p_->data.data(); }
    const float* data() const { return p_->data.data(); }
    std::vector<float>& vec() { return p_->data; }
    const std::vector<float>& vec() const { return p_->data; }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool rg) { p_->requires_grad = rg; }

    bool has_grad() const { return !p_->grad.empty(); }
    void ensure_grad() {
        if (p_->grad.empty()) p_->grad.assign(p_->data.size(), 0.0f);
    }
    void zero_grad() { std::fill(p_->grad.begin(), p_->grad.end(), 0.0f); }
    float* grad() {
        ensure_grad();
        return p_->grad.data();
    }
    const std::vector<float>& grad_vec() const { return p_->grad; }

    bool has_shadow() const { return !p_->shadow.empty(); }
    std::vector<double>& shadow() { return p_->shadow; }
    const std::vector<double>& shadow() const { return p_->shadow; }
    void seed_shadow() {
        p_->shadow.assign(p_->data.begin(), p_->data.end());
    }
    void clear_shadow() { p_->shadow.clear(); }

    float item() const {
        if (numel() != 1) throw ArgError("item: tensor is not scalar, shape " + shape_str(shape()));
        return p_->data[0];
    }
    // Full-precision readout: shadow first, then a stashed reduction value.
    double item64() const {
        if (numel() != 1) throw ArgError("item64: tensor is not scalar");
        if (!p_->shadow.empty()) return p_->shadow[0];
        return std::isnan(p_->scalar64) ? static_cast<double>(p_->data[0]) : p_->scalar64;
    }
    void set_scalar64(double v) { p_->scalar64 = v; }

    Tensor clone() const {
        Tensor t = Tensor::from(shape(), vec(), requires_grad());
        return t;
    }

    // Identity of the underlying buffer (for freeze bookkeeping).
    const void* id() const { return p_.get(); }
    bool same_storage(const Tensor& o) const { return p_ == o.p_; }

private:
    std::shared_ptr<detail::TensorData> p_;
};

inline bool all_finite(const Tensor& t) {
    for (float v : t.vec())
        if (!std::isfinite(v)) return false;
    return true;
}

inline void check_finite(const Tensor& t, const char* where) {
    if (!all_finite(t)) throw NumericError(std::string(where) + ": non-finite value");
}

// Execution-ordered tape. Recording order is a topological order of the op
// DAG, so running the closures in reverse visits each node exactly once.
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    void record(std::function<void()> backward_fn) {
        if (recording_) nodes_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
};

// Populates grad fields of every requires_grad tensor reachable from loss.
// Grads accumulate across calls until explicitly zeroed. The tape is freed
// afterwards.
inline void backward(Graph& g, Tensor loss) {
    if (loss.numel() != 1) throw ArgError("backward: loss must be scalar");
    if (loss.requires_grad()) loss.grad()[0] += 1.0f;
    g.run_backward();
    g.clear();
}

namespace detail {

inline bool track(const Graph& g, const Tensor& t) { return g.recording() && t.requires_grad(); }

// Shadow plumbing. sh(t) returns the f64 view of a tensor: its shadow when
// present, else a widened copy of the f32 data.
inline std::vector<double> widen(const Tensor& t) {
    return std::vector<double>(t.vec().begin(), t.vec().end());
}

inline std::vector<double> sh(const Tensor& t) {
    if (t.has_shadow()) return t.shadow();
    return widen(t);
}

inline bool any_shadow(const Tensor& a) { return a.has_shadow(); }
inline bool any_shadow(const Tensor& a, const Tensor& b) { return a.has_shadow() || b.has_shadow(); }
inline bool any_shadow(const Tensor& a, const Tensor& b, const Tensor& c) {
    return a.has_shadow() || b.has_shadow() || c.has_shadow();
}

inline thread_local std::vector<double> mm_scratch;

// C[m x n] (+)= A[m x k] * B[k x n], f64 accumulation.
template <typename TA, typename TB, typename TC>
inline void kernel_nn(const TA* a, const TB* b, TC* c, int m, int k, int n, bool accumulate) {
    auto& acc = mm_scratch;
    acc.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const TA* arow = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            double av = static_cast<double>(arow[p]);
            if (av == 0.0) continue;
            const TB* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) acc[static_cast<std::size_t>(j)] += av * static_cast<double>(brow[j]);
        }
        TC* crow = c + static_cast<std::size_t>(i) * n;
        if (accumulate)
            for (int j = 0; j < n; ++j) crow[j] += static_cast<TC>(acc[static_cast<std::size_t>(j)]);
        else
            for (int j = 0; j < n; ++j) crow[j] = static_cast<TC>(acc[static_cast<std::size_t>(j)]);
    }
}

// C[m x k] (+)= A[m x n] * B^T where B is [k x n]. B is transposed into
// scratch so the row-major kernel does the work; the copy is negligible next
// to the 2*m*n*k multiply-adds.
template <typename TA, typename TB, typename TC>
inline void kernel_nt(const TA* a, const TB* b, TC* c, int m, int n, int k, bool accumulate) {
    thread_local std::vector<TB> bt;
    bt.resize(static_cast<std::size_t>(n) * k);
    for (int p = 0; p < k; ++p)
        for (int j = 0; j < n; ++j)
            bt[static_cast<std::size_t>(j) * k + p] = b[static_cast<std::size_t>(p) * n + j];
    kernel_nn(a, bt.data(), c, m, n, k, accumulate);
}

// C[k x n] (+)= A^T * B where A is [m x k], B is [m x n].
template <typename TA, typename TB, typename TC>
inline void kernel_tn(const TA* a, const TB* b, TC* c, int m, int k, int n, bool accumulate) {
    thread_local std::vector<TA> at;
    at.resize(static_cast<std::size_t>(k) * m);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p)
            at[static_cast<std::size_t>(p) * m + i] = a[static_cast<std::size_t>(i) * k + p];
    kernel_nn(at.data(), b, c, k, m, n, accumulate);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Ops. Every op is pure with respect to its inputs and deterministic.

// C = A * B for 2-D tensors; gradient rule recorded when either input
// requires grad.
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimError("matmul: expected 2-D tensors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw DimError("matmul: inner dims disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c = Tensor::zeros({m, n}, detail::track(g, a) || detail::track(g, b));
    detail::kernel_nn(a.data(), b.data(), c.data(), m, k, n, false);
    if (detail::any_shadow(a, b)) {
        auto sa = detail::sh(a), sb = detail::sh(b);
        c.shadow().resize(static_cast<std::size_t>(c.numel()));
        detail::kernel_nn(sa.data(), sb.data(), c.shadow().data(), m, k, n, false);
    }
    if (c.requires_grad()) {
        g.record([a = a, b = b, c = c, m, k, n]() mutable {
            const float* dc = c.grad();
            if (a.requires_grad()) detail::kernel_nt(dc, b.data(), a.grad(), m, n, k, true);
            if (b.requires_grad()) detail::kernel_tn(a.data(), dc, b.grad(), m, k, n, true);
        });
    }
    return c;
}

// y = x*W + b (b optional, added per row).
inline Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
        throw DimError("linear: shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    int m = x.dim(0), k = x.dim(1), n = w.dim(1);
    bool has_bias = b.defined();
    if (has_bias && (b.rank() != 1 || b.dim(0) != n)) throw DimError("linear: bias shape");
    bool rg = detail::track(g, x) || detail::track(g, w) || (has_bias && detail::track(g, b));
    Tensor y = Tensor::zeros({m, n}, rg);
    detail::kernel_nn(x.data(), w.data(), y.data(), m, k, n, false);
    if (has_bias) {
        float* yd = y.data();
        const float* bd = b.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) yd[static_cast<std::size_t>(i) * n + j] += bd[j];
    }
    if (detail::any_shadow(x, w) || (has_bias && b.has_shadow())) {
        auto sx = detail::sh(x), sw = detail::sh(w);
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        detail::kernel_nn(sx.data(), sw.data(), y.shadow().data(), m, k, n, false);
        if (has_bias) {
            auto sb = detail::sh(b);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) y.shadow()[static_cast<std::size_t>(i) * n + j] += sb[static_cast<std::size_t>(j)];
        }
    }
    if (rg) {
        g.record([x = x, w = w, b = b, y = y, m, k, n, has_bias]() mutable {
            const float* dy = y.grad();
            if (x.requires_grad()) detail::kernel_nt(dy, w.data(), x.grad(), m, n, k, true);
            if (w.requires_grad()) detail::kernel_tn(x.data(), dy, w.grad(), m, k, n, true);
            if (has_bias && b.requires_grad()) {
                float* db = b.grad();
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < m; ++i) s += static_cast<double>(dy[static_cast<std::size_t>(i) * n + j]);
                    db[j] += static_cast<float>(s);
                }
            }
        });
    }
    return y;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bool rg = detail::track(g, a) || detail::track(g, b);
    Tensor y = Tensor::zeros(a.shape(), rg);
    const float* ad = a.data();
    const float* bd = b.data();
    float* yd = y.data();
    std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) yd[i] = ad[i] + bd[i];
    if (n == 1) y.set_scalar64(a.item64() + b.item64());
    if (detail::any_shadow(a, b)) {
        auto sa = detail::sh(a), sb = detail::sh(b);
        y.shadow().resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) y.shadow()[static_cast<std::size_t>(i)] = sa[static_cast<std::size_t>(i)] + sb[static_cast<std::size_t>(i)];
    }
    if (rg) {
        g.record([a = a, b = b, y = y, n]() mutable {
            const float* dy = y.grad();
            if (a.requires_grad()) {
                float* da = a.grad();
                for (std::int64_t i = 0; i < n; ++i) da[i] += dy[i];
            }
            if (b.requires_grad()) {
                float* db = b.grad();
                for (std::int64_t i = 0; i < n; ++i) db[i] += dy[i];
            }
        });
    }
    return y;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimError("mul: shape mismatch");
    bool rg = detail::track(g, a) || detail::track(g, b);
    Tensor y = Tensor::zeros(a.shape(), rg);
    std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * b.data()[i];
    if (detail::any_shadow(a, b)) {
        auto sa = detail::sh(a), sb = detail::sh(b);
        y.shadow().resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) y.shadow()[static_cast<std::size_t>(i)] = sa[static_cast<std::size_t>(i)] * sb[static_cast<std::size_t>(i)];
    }
    if (rg) {
        g.record([a = a, b = b, y = y, n]() mutable {
            const float* dy = y.grad();
            if (a.requires_grad())
                for (std::int64_t i = 0; i < n; ++i) a.grad()[i] += dy[i] * b.data()[i];
            if (b.requires_grad())
                for (std::int64_t i = 0; i < n; ++i) b.grad()[i] += dy[i] * a.data()[i];
        });
    }
    return y;
}

inline Tensor scale(Graph& g, const Tensor& a, float c) {
    bool rg = detail::track(g, a);
    Tensor y = Tensor::zeros(a.shape(), rg);
    std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * c;
    if (n == 1) y.set_scalar64(a.item64() * static_cast<double>(c));
    if (a.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) y.shadow()[static_cast<std::size_t>(i)] = a.shadow()[static_cast<std::size_t>(i)] * static_cast<double>(c);
    }
    if (rg) {
        g.record([a = a, y = y, c, n]() mutable {
            const float* dy = y.grad();
            float* da = a.grad();
            for (std::int64_t i = 0; i < n; ++i) da[i] += dy[i] * c;
        });
    }
    return y;
}

// Sum of all elements -> scalar (f64 accumulation).
inline Tensor sum(Graph& g, const Tensor& a) {
    bool rg = detail::track(g, a);
    double s = 0.0;
    std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) s += static_cast<double>(a.data()[i]);
    Tensor y = Tensor::scalar(static_cast<float>(s), rg);
    y.set_scalar64(s);
    if (a.has_shadow()) {
        double ss = 0.0;
        for (double v : a.shadow()) ss += v;
        y.shadow().assign(1, ss);
    }
    if (rg) {
        g.record([a = a, y = y, n]() mutable {
            float dy = y.grad()[0];
            float* da = a.grad();
            for (std::int64_t i = 0; i < n; ++i) da[i] += dy;
        });
    }
    return y;
}

namespace detail {

// Softmax core over strided lines, generic in scalar type.
template <typename T>
inline void softmax_lines(const T* xd, T* yd, int axis_n, std::int64_t inner, std::int64_t outer) {
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            std::int64_t base = o * axis_n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < axis_n; ++j) mx = std::max(mx, static_cast<double>(xd[base + j * inner]));
            if (!(mx > -std::numeric_limits<double>::infinity()))
                throw NumericError("softmax: all entries are -inf along axis");
            double denom = 0.0;
            for (int j = 0; j < axis_n; ++j) denom += std::exp(static_cast<double>(xd[base + j * inner]) - mx);
            for (int j = 0; j < axis_n; ++j)
                yd[base + j * inner] =
                    static_cast<T>(std::exp(static_cast<double>(xd[base + j * inner]) - mx) / denom);
        }
    }
}

} // namespace detail

// Softmax along `axis`; max-subtracted, sums accumulated in f64. Outputs are
// nonnegative and sum to 1 along the axis. -inf inputs (top-k sentinels) map
// to exact zeros.
inline Tensor softmax(Graph& g, const Tensor& x, int axis) {
    int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimError("softmax: axis out of range");
    if (x.dim(axis) == 0) throw DimError("softmax: empty axis");
    int axis_n = x.dim(axis);
    std::int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros(x.shape(), rg);
    detail::softmax_lines(x.data(), y.data(), axis_n, inner, outer);
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        detail::softmax_lines(x.shadow().data(), y.shadow().data(), axis_n, inner, outer);
    }
    if (rg) {
        g.record([x = x, y = y, axis_n, inner, outer]() mutable {
            const float* yv = y.data();
            const float* dy = y.grad();
            float* dx = x.grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    std::int64_t base = o * axis_n * inner + in;
                    double dot = 0.0;
                    for (int j = 0; j < axis_n; ++j)
                        dot += static_cast<double>(dy[base + j * inner]) * static_cast<double>(yv[base + j * inner]);
                    for (int j = 0; j < axis_n; ++j) {
                        std::int64_t idx = base + j * inner;
                        dx[idx] += static_cast<float>((static_cast<double>(dy[idx]) - dot) *
                                                      static_cast<double>(yv[idx]));
                    }
                }
            }
        });
    }
    return y;
}

namespace detail {

template <typename T>
inline void layer_norm_rows(const T* xd, const T* gamma, const T* beta, T* yd, float* xhat,
                            float* inv_std, std::int64_t rows, int d, double eps, bool record_cache) {
    for (std::int64_t rix = 0; rix < rows; ++rix) {
        const T* row = xd + rix * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = static_cast<double>(row[j]) - mean;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        if (record_cache) inv_std[rix] = static_cast<float>(is);
        for (int j = 0; j < d; ++j) {
            double xh = (static_cast<double>(row[j]) - mean) * is;
            if (record_cache) xhat[rix * d + j] = static_cast<float>(xh);
            yd[rix * d + j] = static_cast<T>(static_cast<double>(gamma[j]) * xh + static_cast<double>(beta[j]));
        }
    }
}

} // namespace detail

// Per-row zero mean / unit variance over the last axis, then gamma*xhat+beta.
// A zero-variance row yields gamma*0+beta (eps keeps the division finite).
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (!(eps > 0.0f)) throw ArgError("layer_norm: eps must be > 0");
    int d = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d)
        throw DimError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
    std::int64_t rows = x.numel() / d;
    bool rg = detail::track(g, x) || detail::track(g, gamma) || detail::track(g, beta);
    Tensor y = Tensor::zeros(x.shape(), rg);
    auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
    detail::layer_norm_rows(x.data(), gamma.data(), beta.data(), y.data(), xhat->data(),
                            inv_std->data(), rows, d, static_cast<double>(eps), true);
    if (detail::any_shadow(x, gamma, beta)) {
        auto sx = detail::sh(x);
        auto sgamma = detail::sh(gamma);
        auto sbeta = detail::sh(beta);
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        detail::layer_norm_rows(sx.data(), sgamma.data(), sbeta.data(), y.shadow().data(), nullptr,
                                nullptr, rows, d, static_cast<double>(eps), false);
    }
    if (rg) {
        g.record([x = x, gamma = gamma, beta = beta, y = y, xhat, inv_std, rows, d]() mutable {
            const float* dy = y.grad();
            for (std::int64_t rix = 0; rix < rows; ++rix) {
                const float* dyr = dy + rix * d;
                const float* xh = xhat->data() + rix * d;
                if (gamma.requires_grad()) {
                    float* dg = gamma.grad();
                    for (int j = 0; j < d; ++j) dg[j] += dyr[j] * xh[j];
                }
                if (beta.requires_grad()) {
                    float* db = beta.grad();
                    for (int j = 0; j < d; ++j) db[j] += dyr[j];
                }
                if (x.requires_grad()) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double dxh = static_cast<double>(dyr[j]) * static_cast<double>(gamma.data()[j]);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * static_cast<double>(xh[j]);
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    double is = static_cast<double>((*inv_std)[static_cast<std::size_t>(rix)]);
                    float* dx = x.grad() + rix * d;
                    for (int j = 0; j < d; ++j) {
                        double dxh = static_cast<double>(dyr[j]) * static_cast<double>(gamma.data()[j]);
                        dx[j] += static_cast<float>(is * (dxh - mean_dxhat -
                                                          static_cast<double>(xh[j]) * mean_dxhat_xhat));
                    }
                }
            }
        });
    }
    return y;
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu_val(double v) {
    double u = kGeluC * (v + kGeluA * v * v * v);
    return 0.5 * v * (1.0 + std::tanh(u));
}
} // namespace detail

// Tanh-approximation GELU, elementwise.
inline Tensor gelu(Graph& g, const Tensor& x) {
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros(x.shape(), rg);
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i)
        y.data()[i] = static_cast<float>(detail::gelu_val(static_cast<double>(x.data()[i])));
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) y.shadow()[static_cast<std::size_t>(i)] = detail::gelu_val(x.shadow()[static_cast<std::size_t>(i)]);
    }
    if (rg) {
        g.record([x = x, y = y, n]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            for (std::int64_t i = 0; i < n; ++i) {
                double v = static_cast<double>(x.data()[i]);
                double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
                double t = std::tanh(u);
                double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
                double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                dx[i] += static_cast<float>(static_cast<double>(dy[i]) * d);
            }
        });
    }
    return y;
}

inline Tensor sigmoid(Graph& g, const Tensor& x) {
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros(x.shape(), rg);
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i)
        y.data()[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(x.data()[i]))));
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) y.shadow()[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-x.shadow()[static_cast<std::size_t>(i)]));
    }
    if (rg) {
        g.record([x = x, y = y, n]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            for (std::int64_t i = 0; i < n; ++i) {
                float v = y.data()[i];
                dx[i] += dy[i] * v * (1.0f - v);
            }
        });
    }
    return y;
}

// Keeps the k largest entries along the last axis, sets the rest to -inf.
// Ties break toward the lowest index. The -inf sentinel is the one sanctioned
// non-finite value in the pipeline; softmax turns it into an exact zero.
inline Tensor top_k_mask(Graph& g, const Tensor& x, int k) {
    int e = x.dim(x.rank() - 1);
    if (k < 1 || k > e) throw ArgError("top_k_mask: k=" + std::to_string(k) + " out of range [1," + std::to_string(e) + "]");
    std::int64_t rows = x.numel() / e;
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros(x.shape(), rg);
    auto kept = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(x.numel()), 0);
    std::vector<int> order(static_cast<std::size_t>(e));
    for (std::int64_t rix = 0; rix < rows; ++rix) {
        const float* row = x.data() + rix * e;
        float* yrow = y.data() + rix * e;
        for (int j = 0; j < e; ++j) order[static_cast<std::size_t>(j)] = j;
        std::stable_sort(order.begin(), order.end(), [row](int a, int b) { return row[a] > row[b]; });
        for (int j = 0; j < e; ++j) yrow[j] = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < k; ++j) {
            int idx = order[static_cast<std::size_t>(j)];
            yrow[idx] = row[idx];
            (*kept)[static_cast<std::size_t>(rix * e + idx)] = 1;
        }
    }
    if (x.has_shadow()) {
        // Selection follows the f32 values so both evaluations mask the same
        // entries.
        y.shadow().assign(static_cast<std::size_t>(x.numel()), -std::numeric_limits<double>::infinity());
        for (std::int64_t i = 0; i < x.numel(); ++i)
            if ((*kept)[static_cast<std::size_t>(i)]) y.shadow()[static_cast<std::size_t>(i)] = x.shadow()[static_cast<std::size_t>(i)];
    }
    if (rg) {
        g.record([x = x, y = y, kept]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            std::int64_t n = x.numel();
            for (std::int64_t i = 0; i < n; ++i)
                if ((*kept)[static_cast<std::size_t>(i)]) dx[i] += dy[i];
        });
    }
    return y;
}

// y = alpha*a + (1-alpha)*b with a scalar alpha tensor.
inline Tensor convex_mix(Graph& g, const Tensor& alpha, const Tensor& a, const Tensor& b) {
    if (alpha.numel() != 1) throw ArgError("convex_mix: alpha must be scalar");
    if (a.shape() != b.shape()) throw DimError("convex_mix: branch shape mismatch");
    bool rg = detail::track(g, alpha) || detail::track(g, a) || detail::track(g, b);
    Tensor y = Tensor::zeros(a.shape(), rg);
    float al = alpha.item();
    std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y.data()[i] = al * a.data()[i] + (1.0f - al) * b.data()[i];
    if (detail::any_shadow(alpha, a, b)) {
        auto sa = detail::sh(a), sb = detail::sh(b);
        double sal = alpha.has_shadow() ? alpha.shadow()[0] : static_cast<double>(al);
        y.shadow().resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i)
            y.shadow()[static_cast<std::size_t>(i)] = sal * sa[static_cast<std::size_t>(i)] + (1.0 - sal) * sb[static_cast<std::size_t>(i)];
    }
    if (rg) {
        g.record([alpha = alpha, a = a, b = b, y = y, al, n]() mutable {
            const float* dy = y.grad();
            if (a.requires_grad()) {
                float* da = a.grad();
                for (std::int64_t i = 0; i < n; ++i) da[i] += dy[i] * al;
            }
            if (b.requires_grad()) {
                float* db = b.grad();
                for (std::int64_t i = 0; i < n; ++i) db[i] += dy[i] * (1.0f - al);
            }
            if (alpha.requires_grad()) {
                double s = 0.0;
                for (std::int64_t i = 0; i < n; ++i)
                    s += static_cast<double>(dy[i]) *
                         (static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]));
                alpha.grad()[0] += static_cast<float>(s);
            }
        });
    }
    return y;
}

// Embedding lookup plus learned absolute positions: y[t] = table[ids[t]] + pos[t].
inline Tensor embed(Graph& g, const Tensor& table, const Tensor& pos, const std::vector<int>& ids) {
    int v = table.dim(0), d = table.dim(1);
    int t_len = static_cast<int>(ids.size());
    if (pos.defined() && (pos.dim(1) != d || pos.dim(0) < t_len))
        throw DimError("embed: position table too small");
    for (int id : ids)
        if (id < 0 || id >= v) throw VocabError("embed: token id " + std::to_string(id) + " out of range");
    bool rg = detail::track(g, table) || (pos.defined() && detail::track(g, pos));
    Tensor y = Tensor::zeros({t_len, d}, rg);
    for (int t = 0; t < t_len; ++t) {
        const float* src = table.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(t)]) * d;
        float* dst = y.data() + static_cast<std::size_t>(t) * d;
        if (pos.defined()) {
            const float* ps = pos.data() + static_cast<std::size_t>(t) * d;
            for (int j = 0; j < d; ++j) dst[j] = src[j] + ps[j];
        } else {
            for (int j = 0; j < d; ++j) dst[j] = src[j];
        }
    }
    if (table.has_shadow() || (pos.defined() && pos.has_shadow())) {
        auto st = detail::sh(table);
        auto sp = pos.defined() ? detail::sh(pos) : std::vector<double>();
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        for (int t = 0; t < t_len; ++t)
            for (int j = 0; j < d; ++j)
                y.shadow()[static_cast<std::size_t>(t) * d + j] =
                    st[static_cast<std::size_t>(ids[static_cast<std::size_t>(t)]) * d + j] +
                    (pos.defined() ? sp[static_cast<std::size_t>(t) * d + j] : 0.0);
    }
    if (rg) {
        auto ids_copy = std::make_shared<std::vector<int>>(ids);
        g.record([table = table, pos = pos, y = y, ids_copy, t_len, d]() mutable {
            const float* dy = y.grad();
            for (int t = 0; t < t_len; ++t) {
                const float* dr = dy + static_cast<std::size_t>(t) * d;
                if (table.requires_grad()) {
                    float* dt = table.grad() +
                                static_cast<std::size_t>((*ids_copy)[static_cast<std::size_t>(t)]) * d;
                    for (int j = 0; j < d; ++j) dt[j] += dr[j];
                }
                if (pos.defined() && pos.requires_grad()) {
                    float* dp = pos.grad() + static_cast<std::size_t>(t) * d;
                    for (int j = 0; j < d; ++j) dp[j] += dr[j];
                }
            }
        });
    }
    return y;
}

namespace detail {

// Permutation copy helper shared by split/merge heads.
template <typename T>
inline void heads_copy(const T* src, T* dst, int heads, int t_len, int hd, int d, bool splitting) {
    for (int h = 0; h < heads; ++h)
        for (int t = 0; t < t_len; ++t)
            for (int j = 0; j < hd; ++j) {
                std::size_t flat = static_cast<std::size_t>(t) * d + h * hd + j;
                std::size_t heads_ix = (static_cast<std::size_t>(h) * t_len + t) * hd + j;
                if (splitting)
                    dst[heads_ix] = src[flat];
                else
                    dst[flat] = src[heads_ix];
            }
}

} // namespace detail

// [T, d] -> [H, T, d/H]
inline Tensor split_heads(Graph& g, const Tensor& x, int heads) {
    int t_len = x.dim(0), d = x.dim(1);
    if (d % heads != 0) throw DimError("split_heads: d not divisible by heads");
    int hd = d / heads;
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros({heads, t_len, hd}, rg);
    detail::heads_copy(x.data(), y.data(), heads, t_len, hd, d, true);
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        detail::heads_copy(x.shadow().data(), y.shadow().data(), heads, t_len, hd, d, true);
    }
    if (rg) {
        g.record([x = x, y = y, heads, t_len, hd, d]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int h = 0; h < heads; ++h)
                for (int t = 0; t < t_len; ++t)
                    for (int j = 0; j < hd; ++j)
                        dx[static_cast<std::size_t>(t) * d + h * hd + j] +=
                            dy[(static_cast<std::size_t>(h) * t_len + t) * hd + j];
        });
    }
    return y;
}

// [H, T, d/H] -> [T, d]
inline Tensor merge_heads(Graph& g, const Tensor& x) {
    int heads = x.dim(0), t_len = x.dim(1), hd = x.dim(2);
    int d = heads * hd;
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros({t_len, d}, rg);
    detail::heads_copy(x.data(), y.data(), heads, t_len, hd, d, false);
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        detail::heads_copy(x.shadow().data(), y.shadow().data(), heads, t_len, hd, d, false);
    }
    if (rg) {
        g.record([x = x, y = y, heads, t_len, hd, d]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int h = 0; h < heads; ++h)
                for (int t = 0; t < t_len; ++t)
                    for (int j = 0; j < hd; ++j)
                        dx[(static_cast<std::size_t>(h) * t_len + t) * hd + j] +=
                            dy[static_cast<std::size_t>(t) * d + h * hd + j];
        });
    }
    return y;
}

// Batched C[h] = A[h] * B[h].
inline Tensor bmm(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimError("bmm: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int hn = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    bool rg = detail::track(g, a) || detail::track(g, b);
    Tensor c = Tensor::zeros({hn, m, n}, rg);
    for (int h = 0; h < hn; ++h)
        detail::kernel_nn(a.data() + static_cast<std::size_t>(h) * m * k,
                          b.data() + static_cast<std::size_t>(h) * k * n,
                          c.data() + static_cast<std::size_t>(h) * m * n, m, k, n, false);
    if (detail::any_shadow(a, b)) {
        auto sa = detail::sh(a), sb = detail::sh(b);
        c.shadow().resize(static_cast<std::size_t>(c.numel()));
        for (int h = 0; h < hn; ++h)
            detail::kernel_nn(sa.data() + static_cast<std::size_t>(h) * m * k,
                              sb.data() + static_cast<std::size_t>(h) * k * n,
                              c.shadow().data() + static_cast<std::size_t>(h) * m * n, m, k, n, false);
    }
    if (rg) {
        g.record([a = a, b = b, c = c, hn, m, k, n]() mutable {
            for (int h = 0; h < hn; ++h) {
                const float* dc = c.grad() + static_cast<std::size_t>(h) * m * n;
                if (a.requires_grad())
                    detail::kernel_nt(dc, b.data() + static_cast<std::size_t>(h) * k * n,
                                      a.grad() + static_cast<std::size_t>(h) * m * k, m, n, k, true);
                if (b.requires_grad())
                    detail::kernel_tn(a.data() + static_cast<std::size_t>(h) * m * k, dc,
                                      b.grad() + static_cast<std::size_t>(h) * k * n, m, k, n, true);
            }
        });
    }
    return c;
}

// Batched C[h] = A[h] * B[h]^T with B stored [H, N, K].
inline Tensor bmm_nt(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw DimError("bmm_nt: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int hn = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    bool rg = detail::track(g, a) || detail::track(g, b);
    Tensor c = Tensor::zeros({hn, m, n}, rg);
    for (int h = 0; h < hn; ++h)
        detail::kernel_nt(a.data() + static_cast<std::size_t>(h) * m * k,
                          b.data() + static_cast<std::size_t>(h) * n * k,
                          c.data() + static_cast<std::size_t>(h) * m * n, m, k, n, false);
    if (detail::any_shadow(a, b)) {
        auto sa = detail::sh(a), sb = detail::sh(b);
        c.shadow().resize(static_cast<std::size_t>(c.numel()));
        for (int h = 0; h < hn; ++h)
            detail::kernel_nt(sa.data() + static_cast<std::size_t>(h) * m * k,
                              sb.data() + static_cast<std::size_t>(h) * n * k,
                              c.shadow().data() + static_cast<std::size_t>(h) * m * n, m, k, n, false);
    }
    if (rg) {
        g.record([a = a, b = b, c = c, hn, m, k, n]() mutable {
            for (int h = 0; h < hn; ++h) {
                const float* dc = c.grad() + static_cast<std::size_t>(h) * m * n;
                if (a.requires_grad())
                    detail::kernel_nn(dc, b.data() + static_cast<std::size_t>(h) * n * k,
                                      a.grad() + static_cast<std::size_t>(h) * m * k, m, n, k, true);
                if (b.requires_grad())
                    detail::kernel_tn(dc, a.data() + static_cast<std::size_t>(h) * m * k,
                                      b.grad() + static_cast<std::size_t>(h) * n * k, m, n, k, true);
            }
        });
    }
    return c;
}

namespace detail {

template <typename T>
inline void causal_softmax_rows(const T* xd, T* yd, int hn, int t_len) {
    for (int h = 0; h < hn; ++h) {
        for (int r = 0; r < t_len; ++r) {
            const T* row = xd + (static_cast<std::size_t>(h) * t_len + r) * t_len;
            T* yrow = yd + (static_cast<std::size_t>(h) * t_len + r) * t_len;
            double mx = static_cast<double>(row[0]);
            for (int c = 1; c <= r; ++c) mx = std::max(mx, static_cast<double>(row[c]));
            double denom = 0.0;
            for (int c = 0; c <= r; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
            for (int c = 0; c <= r; ++c)
                yrow[c] = static_cast<T>(std::exp(static_cast<double>(row[c]) - mx) / denom);
        }
    }
}

} // namespace detail

// Row-wise softmax over [H, T, T] scores where row r sees columns 0..r only.
// Masked columns come out as exact zeros.
inline Tensor causal_softmax(Graph& g, const Tensor& scores) {
    if (scores.rank() != 3 || scores.dim(1) != scores.dim(2))
        throw DimError("causal_softmax: expected [H,T,T]");
    int hn = scores.dim(0), t_len = scores.dim(1);
    bool rg = detail::track(g, scores);
    Tensor y = Tensor::zeros(scores.shape(), rg);
    detail::causal_softmax_rows(scores.data(), y.data(), hn, t_len);
    if (scores.has_shadow()) {
        y.shadow().assign(static_cast<std::size_t>(y.numel()), 0.0);
        detail::causal_softmax_rows(scores.shadow().data(), y.shadow().data(), hn, t_len);
    }
    if (rg) {
        g.record([scores = scores, y = y, hn, t_len]() mutable {
            for (int h = 0; h < hn; ++h) {
                for (int r = 0; r < t_len; ++r) {
                    std::size_t base = (static_cast<std::size_t>(h) * t_len + r) * t_len;
                    const float* yv = y.data() + base;
                    const float* dy = y.grad() + base;
                    float* dx = scores.grad() + base;
                    double dot = 0.0;
                    for (int c = 0; c <= r; ++c)
                        dot += static_cast<double>(dy[c]) * static_cast<double>(yv[c]);
                    for (int c = 0; c <= r; ++c)
                        dx[c] += static_cast<float>((static_cast<double>(dy[c]) - dot) *
                                                    static_cast<double>(yv[c]));
                }
            }
        });
    }
    return y;
}

// Row gather / scatter pair used by MoE token dispatch.
inline Tensor gather_rows(Graph& g, const Tensor& x, const std::vector<int>& idx) {
    int d = x.dim(1);
    int n = static_cast<int>(idx.size());
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros({n, d}, rg);
    for (int i = 0; i < n; ++i)
        std::copy_n(x.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * d, d,
                    y.data() + static_cast<std::size_t>(i) * d);
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        for (int i = 0; i < n; ++i)
            std::copy_n(x.shadow().data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * d, d,
                        y.shadow().data() + static_cast<std::size_t>(i) * d);
    }
    if (rg) {
        auto idx_copy = std::make_shared<std::vector<int>>(idx);
        g.record([x = x, y = y, idx_copy, n, d]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int i = 0; i < n; ++i) {
                float* dst = dx + static_cast<std::size_t>((*idx_copy)[static_cast<std::size_t>(i)]) * d;
                const float* src = dy + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return y;
}

inline Tensor scatter_add_rows(Graph& g, const Tensor& src, const std::vector<int>& idx, int rows) {
    int d = src.dim(1);
    int n = static_cast<int>(idx.size());
    bool rg = detail::track(g, src);
    Tensor y = Tensor::zeros({rows, d}, rg);
    for (int i = 0; i < n; ++i) {
        float* dst = y.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * d;
        const float* s = src.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += s[j];
    }
    if (src.has_shadow()) {
        y.shadow().assign(static_cast<std::size_t>(y.numel()), 0.0);
        for (int i = 0; i < n; ++i) {
            double* dst = y.shadow().data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * d;
            const double* s = src.shadow().data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) dst[j] += s[j];
        }
    }
    if (rg) {
        auto idx_copy = std::make_shared<std::vector<int>>(idx);
        g.record([src = src, y = y, idx_copy, n, d]() mutable {
            const float* dy = y.grad();
            float* ds = src.grad();
            for (int i = 0; i < n; ++i) {
                const float* dr = dy + static_cast<std::size_t>((*idx_copy)[static_cast<std::size_t>(i)]) * d;
                float* dst = ds + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += dr[j];
            }
        });
    }
    return y;
}

// Picks x[idx[i], col] into a vector.
inline Tensor gather_col(Graph& g, const Tensor& x, const std::vector<int>& idx, int col) {
    int e = x.dim(1);
    int n = static_cast<int>(idx.size());
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros({n}, rg);
    for (int i = 0; i < n; ++i)
        y.data()[i] = x.data()[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * e + col];
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            y.shadow()[static_cast<std::size_t>(i)] = x.shadow()[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * e + col];
    }
    if (rg) {
        auto idx_copy = std::make_shared<std::vector<int>>(idx);
        g.record([x = x, y = y, idx_copy, n, e, col]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int i = 0; i < n; ++i)
                dx[static_cast<std::size_t>((*idx_copy)[static_cast<std::size_t>(i)]) * e + col] += dy[i];
        });
    }
    return y;
}

// y[i,:] = x[i,:] * s[i]
inline Tensor mul_rows(Graph& g, const Tensor& x, const Tensor& s) {
    int n = x.dim(0), d = x.dim(1);
    if (s.rank() != 1 || s.dim(0) != n) throw DimError("mul_rows: scale shape");
    bool rg = detail::track(g, x) || detail::track(g, s);
    Tensor y = Tensor::zeros({n, d}, rg);
    for (int i = 0; i < n; ++i) {
        float sv = s.data()[i];
        const float* xr = x.data() + static_cast<std::size_t>(i) * d;
        float* yr = y.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) yr[j] = xr[j] * sv;
    }
    if (detail::any_shadow(x, s)) {
        auto sx = detail::sh(x), ss = detail::sh(s);
        y.shadow().resize(static_cast<std::size_t>(y.numel()));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                y.shadow()[static_cast<std::size_t>(i) * d + j] = sx[static_cast<std::size_t>(i) * d + j] * ss[static_cast<std::size_t>(i)];
    }
    if (rg) {
        g.record([x = x, s = s, y = y, n, d]() mutable {
            const float* dy = y.grad();
            for (int i = 0; i < n; ++i) {
                const float* dyr = dy + static_cast<std::size_t>(i) * d;
                if (x.requires_grad()) {
                    float sv = s.data()[i];
                    float* dx = x.grad() + static_cast<std::size_t>(i) * d;
                    for (int j = 0; j < d; ++j) dx[j] += dyr[j] * sv;
                }
                if (s.requires_grad()) {
                    const float* xr = x.data() + static_cast<std::size_t>(i) * d;
                    double acc = 0.0;
                    for (int j = 0; j < d; ++j) acc += static_cast<double>(dyr[j]) * static_cast<double>(xr[j]);
                    s.grad()[i] += static_cast<float>(acc);
                }
            }
        });
    }
    return y;
}

// Column means of [T, E] -> [E].
inline Tensor mean_rows(Graph& g, const Tensor& x) {
    int t_len = x.dim(0), e = x.dim(1);
    bool rg = detail::track(g, x);
    Tensor y = Tensor::zeros({e}, rg);
    for (int j = 0; j < e; ++j) {
        double s = 0.0;
        for (int i = 0; i < t_len; ++i) s += static_cast<double>(x.data()[static_cast<std::size_t>(i) * e + j]);
        y.data()[j] = static_cast<float>(s / t_len);
    }
    if (x.has_shadow()) {
        y.shadow().resize(static_cast<std::size_t>(e));
        for (int j = 0; j < e; ++j) {
            double s = 0.0;
            for (int i = 0; i < t_len; ++i) s += x.shadow()[static_cast<std::size_t>(i) * e + j];
            y.shadow()[static_cast<std::size_t>(j)] = s / t_len;
        }
    }
    if (rg) {
        g.record([x = x, y = y, t_len, e]() mutable {
            const float* dy = y.grad();
            float* dx = x.grad();
            for (int i = 0; i < t_len; ++i)
                for (int j = 0; j < e; ++j) dx[static_cast<std::size_t>(i) * e + j] += dy[j] / t_len;
        });
    }
    return y;
}

// Scalar dot product with a constant weight vector (f64 accumulation).
inline Tensor inner_const(Graph& g, const Tensor& x, const std::vector<float>& w) {
    if (x.numel() != static_cast<std::int64_t>(w.size())) throw DimError("inner_const: length mismatch");
    bool rg = detail::track(g, x);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
        s += static_cast<double>(x.data()[i]) * static_cast<double>(w[i]);
    Tensor y = Tensor::scalar(static_cast<float>(s), rg);
    y.set_scalar64(s);
    if (x.has_shadow()) {
        double ss = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) ss += x.shadow()[i] * static_cast<double>(w[i]);
        y.shadow().assign(1, ss);
    }
    if (rg) {
        auto w_copy = std::make_shared<std::vector<float>>(w);
        g.record([x = x, y = y, w_copy]() mutable {
            float dy = y.grad()[0];
            float* dx = x.grad();
            for (std::size_t i = 0; i < w_copy->size(); ++i) dx[i] += dy * (*w_copy)[i];
        });
    }
    return y;
}

namespace detail {

template <typename T>
inline double ce_weighted_value(const T* logits, int t_len, int v, const std::vector<int>& targets,
                                const std::vector<float>& w, std::vector<float>* ce_out, float* probs) {
    double total = 0.0;
    for (int p = 0; p < t_len; ++p) {
        float wp = w[static_cast<std::size_t>(p)];
        int tgt = targets[static_cast<std::size_t>(p)];
        if (wp == 0.0f || tgt < 0) continue;
        const T* row = logits + static_cast<std::size_t>(p) * v;
        double mx = static_cast<double>(row[0]);
        for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        double lse = mx + std::log(denom);
        double ce = lse - static_cast<double>(row[tgt]);
        if (!std::isfinite(ce)) throw NumericError("cross_entropy: non-finite loss");
        if (ce_out) (*ce_out)[static_cast<std::size_t>(p)] = static_cast<float>(ce);
        total += static_cast<double>(wp) * ce;
        if (probs) {
            float* pr = probs + static_cast<std::size_t>(p) * v;
            for (int j = 0; j < v; ++j)
                pr[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / denom);
        }
    }
    return total;
}

} // namespace detail

// Weighted next-token cross entropy: sum_p w[p] * CE(logits[p], targets[p]),
// computed with a log-sum-exp stable form in f64. Positions with w[p] == 0 or
// targets[p] < 0 are unsupervised. Per-position CE values (unweighted) are
// written to ce_out when given.
inline Tensor cross_entropy_weighted(Graph& g, const Tensor& logits, const std::vector<int>& targets,
                                     const std::vector<float>& w, std::vector<float>* ce_out = nullptr) {
    int t_len = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t_len || static_cast<int>(w.size()) != t_len)
        throw DimError("cross_entropy: targets/weights must match T");
    bool any = false;
    for (int p = 0; p < t_len; ++p) {
        int tgt = targets[static_cast<std::size_t>(p)];
        if (w[static_cast<std::size_t>(p)] != 0.0f && tgt >= 0) {
            if (tgt >= v) throw VocabError("cross_entropy: target id out of range");
            any = true;
        }
    }
    if (!any) throw ArgError("cross_entropy: all positions masked");
    if (ce_out) ce_out->assign(static_cast<std::size_t>(t_len), 0.0f);

    bool rg = detail::track(g, logits);
    auto probs = std::make_shared<std::vector<float>>();
    if (rg) probs->assign(static_cast<std::size_t>(t_len) * v, 0.0f);
    double total = detail::ce_weighted_value(logits.data(), t_len, v, targets, w, ce_out,
                                             rg ? probs->data() : nullptr);
    Tensor y = Tensor::scalar(static_cast<float>(total), rg);
    y.set_scalar64(total);
    if (logits.has_shadow()) {
        double ss = detail::ce_weighted_value(logits.shadow().data(), t_len, v, targets, w, nullptr, nullptr);
        y.shadow().assign(1, ss);
    }
    if (rg) {
        auto targets_copy = std::make_shared<std::vector<int>>(targets);
        auto w_copy = std::make_shared<std::vector<float>>(w);
        g.record([logits = logits, y = y, probs, targets_copy, w_copy, t_len, v]() mutable {
            float dy = y.grad()[0];
            float* dl = logits.grad();
            for (int p = 0; p < t_len; ++p) {
                float wp = (*w_copy)[static_cast<std::size_t>(p)];
                int tgt = (*targets_copy)[static_cast<std::size_t>(p)];
                if (wp == 0.0f || tgt < 0) continue;
                const float* pr = probs->data() + static_cast<std::size_t>(p) * v;
                float* dr = dl + static_cast<std::size_t>(p) * v;
                float c = dy * wp;
                for (int j = 0; j < v; ++j) dr[j] += c * pr[j];
                dr[tgt] -= c;
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Central-difference gradient check.
//
// fn must rebuild the computation from the current parameter values on every
// call. The probing evaluations run with f64 shadows seeded on the params, so
// the difference quotient is free of f32 store rounding. Each parameter's
// central-difference gradient is compared to its autodiff gradient as a
// vector: rel = |fd - ad| / max(|fd|, |ad|, 1e-8) with |.| the Euclidean
// magnitude; the worst parameter's value is returned. (A per-element ratio
// would measure nothing but noise on a model's dead directions, where both
// gradients agree near zero.)
inline float grad_check(const std::function<Tensor(Graph&)>& fn, const std::vector<Tensor>& params,
                        float eps) {
    if (!(eps >= 1e-6f && eps <= 1e-2f)) throw ArgError("grad_check: eps must be in [1e-6, 1e-2]");
    for (const Tensor& p : params)
        if (!p.requires_grad()) throw ArgError("grad_check: all params must require grad");

    // Autodiff gradients at the current point.
    std::vector<Tensor> ps = params;
    for (Tensor& p : ps) {
        p.ensure_grad();
        p.zero_grad();
    }
    Graph g;
    Tensor loss = fn(g);
    if (loss.numel() != 1) throw ArgError("grad_check: fn must return a scalar");
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    backward(g, loss);
    std::vector<std::vector<float>> auto_grads;
    auto_grads.reserve(ps.size());
    for (Tensor& p : ps) auto_grads.push_back(p.grad_vec());

    auto eval = [&fn, &ps]() {
        for (Tensor& p : ps) p.seed_shadow();
        Graph ng(false);
        Tensor l = fn(ng);
        double v = l.item64();
        for (Tensor& p : ps) p.clear_shadow();
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss during probing");
        return v;
    };

    float worst = 0.0f;
    for (std::size_t pi = 0; pi < ps.size(); ++pi) {
        Tensor& p = ps[pi];
        double diff_sq = 0.0, fd_sq = 0.0, ad_sq = 0.0;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            float orig = p.data()[i];
            float hi = orig + eps;
            float lo = orig - eps;
            p.data()[i] = hi;
            double fp = eval();
            p.data()[i] = lo;
            double fm = eval();
            p.data()[i] = orig;
            // Measured step removes the f32 representation error of orig +- eps.
            double h2 = static_cast<double>(hi) - static_cast<double>(lo);
            double fd = (fp - fm) / h2;
            double ad = static_cast<double>(auto_grads[pi][static_cast<std::size_t>(i)]);
            diff_sq += (fd - ad) * (fd - ad);
            fd_sq += fd * fd;
            ad_sq += ad * ad;
        }
        double denom = std::max({std::sqrt(fd_sq), std::sqrt(ad_sq), 1e-8});
        worst = std::max(worst, static_cast<float>(std::sqrt(diff_sq) / denom));
    }
    return worst;
}

} // namespace twist

#pragma once

// Dense rank-1/rank-2 tensors with reverse-mode gradient accumulation.
// The scalar type is a template parameter: training runs in float, the
// gradient-check harness re-runs the same graph in double.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "abft/common.hpp"

namespace abft {

template <class S>
struct TensorT;

template <class S>
using TensorPtrT = std::shared_ptr<TensorT<S>>;

// Gradient recording is on by default; NoGradGuard suspends it for the
// current thread (pure evaluation on a frozen model).
inline thread_local int g_no_grad_depth = 0;

inline bool grad_enabled() { return g_no_grad_depth == 0; }

struct NoGradGuard {
    NoGradGuard() { ++g_no_grad_depth; }
    ~NoGradGuard() { --g_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

template <class S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until a backward pass (or zero_grad) allocates it
    bool trainable = false;
    bool requires_grad = false;

    // graph linkage; empty for leaves
    std::vector<TensorPtrT<S>> parents;
    std::function<void(TensorT<S>&)> backward_fn;

    int64_t size() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.empty() ? 1 : shape.back(); }
    bool is_scalar() const { return size() == 1; }

    S value() const {
        if (!is_scalar()) throw ContractError("value(): tensor is not scalar " + shape_str(shape));
        return data[0];
    }

    void set_trainable(bool t) {
        trainable = t;
        requires_grad = t;
    }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), S(0));
    }

    void zero_grad() { grad.assign(data.size(), S(0)); }
};

template <class S>
void check_shape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 2)
        throw ShapeError("tensor rank must be 1 or 2, got " + shape_str(shape));
    for (int e : shape)
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

template <class S>
TensorPtrT<S> make_tensor(std::vector<int> shape) {
    check_shape<S>(shape);
    auto t = std::make_shared<TensorT<S>>();
    int64_t n = 1;
    for (int e : shape) n *= e;
    t->shape = std::move(shape);
    t->data.assign(n, S(0));
    return t;
}

template <class S>
TensorPtrT<S> make_tensor(std::vector<int> shape, std::vector<S> data) {
    check_shape<S>(shape);
    int64_t n = 1;
    for (int e : shape) n *= e;
    if (static_cast<int64_t>(data.size()) != n)
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto t = std::make_shared<TensorT<S>>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    return t;
}

template <class S>
TensorPtrT<S> make_scalar(S v) {
    return make_tensor<S>({1}, {v});
}

template <class S>
TensorPtrT<S> make_param(std::vector<int> shape, Rng& rng, double stddev) {
    auto t = make_tensor<S>(std::move(shape));
    for (auto& x : t->data) x = static_cast<S>(rng.normal() * stddev);
    t->set_trainable(true);
    return t;
}

template <class S>
bool all_finite(const TensorT<S>& t) {
    for (S v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Raw kernels. All accumulate into C (C += ...); fresh result buffers are
// zero-initialized. Each output element is produced by exactly one thread
// with a fixed in-source accumulation order, so results are bit-identical
// regardless of thread count.
// ---------------------------------------------------------------------------

namespace kernels {

// C (m x n) += A (m x k) * B (k x n); inner dimension blocked by 4 to cut
// store traffic, accumulation order fixed in source.
template <class S>
void gemm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 65536)
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<size_t>(i) * k;
        S* crow = c + static_cast<size_t>(i) * n;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const S a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
            const S* b0 = b + static_cast<size_t>(p) * n;
            const S* b1 = b0 + n;
            const S* b2 = b1 + n;
            const S* b3 = b2 + n;
            for (int j = 0; j < n; ++j)
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
        }
        for (; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m x n) += A (m x k) * B (n x k)^T   (dot products of contiguous rows).
// The 16-lane accumulator array has a fixed combining order, so results are
// deterministic while the lane loop vectorizes.
template <class S>
void gemm_nt(const S* a, const S* b, S* c, int m, int k, int n) {
    constexpr int kLanes = 16;
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 65536)
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<size_t>(i) * k;
        S* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<size_t>(j) * k;
            S acc[kLanes] = {};
            int p = 0;
            for (; p + kLanes <= k; p += kLanes)
                for (int l = 0; l < kLanes; ++l) acc[l] += arow[p + l] * brow[p + l];
            S tail = 0;
            for (; p < k; ++p) tail += arow[p] * brow[p];
            for (int l = 1; l < kLanes; ++l) acc[0] += acc[l];
            crow[j] += acc[0] + tail;
        }
    }
}

// C (k x n) += A (m x k)^T * B (m x n); same 4-way blocking over m.
template <class S>
void gemm_tn(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n > 65536)
    for (int p = 0; p < k; ++p) {
        S* crow = c + static_cast<size_t>(p) * n;
        int i = 0;
        for (; i + 4 <= m; i += 4) {
            const S a0 = a[static_cast<size_t>(i) * k + p];
            const S a1 = a[static_cast<size_t>(i + 1) * k + p];
            const S a2 = a[static_cast<size_t>(i + 2) * k + p];
            const S a3 = a[static_cast<size_t>(i + 3) * k + p];
            const S* b0 = b + static_cast<size_t>(i) * n;
            const S* b1 = b0 + n;
            const S* b2 = b1 + n;
            const S* b3 = b2 + n;
            for (int j = 0; j < n; ++j)
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
        }
        for (; i < m; ++i) {
            const S av = a[static_cast<size_t>(i) * k + p];
            const S* brow = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

template <class S>
TensorPtrT<S> make_op(std::vector<int> shape, std::vector<TensorPtrT<S>> parents,
                      std::function<void(TensorT<S>&)> backward_fn) {
    auto out = make_tensor<S>(std::move(shape));
    if (grad_enabled()) {
        bool needs = false;
        for (const auto& p : parents)
            if (p->requires_grad) needs = true;
        if (needs) {
            out->requires_grad = true;
            out->parents = std::move(parents);
            out->backward_fn = std::move(backward_fn);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

template <class S>
TensorPtrT<S> matmul(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_op<S>({m, n}, {a, b}, [a, b, m, k, n](TensorT<S>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            kernels::gemm_nt(self.grad.data(), b->data.data(), a->grad.data(), m, n, k);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            kernels::gemm_tn(a->data.data(), self.grad.data(), b->grad.data(), m, k, n);
        }
    });
    kernels::gemm_nn(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    return out;
}

// a * b^T; b is (n x k), result (m x n)
template <class S>
TensorPtrT<S> matmul_nt(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
    const int m = a->shape[0], k = a->shape[1], n = b->shape[0];
    auto out = make_op<S>({m, n}, {a, b}, [a, b, m, k, n](TensorT<S>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            kernels::gemm_nn(self.grad.data(), b->data.data(), a->grad.data(), m, n, k);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            kernels::gemm_tn(self.grad.data(), a->data.data(), b->grad.data(), m, n, k);
        }
    });
    kernels::gemm_nt(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    return out;
}

template <class S>
TensorPtrT<S> add(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    if (a->shape != b->shape)
        throw ShapeError("add: shape mismatch " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    auto out = make_op<S>(a->shape, {a, b}, [a, b](TensorT<S>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    return out;
}

// s * x + c, elementwise with scalar coefficients
template <class S>
TensorPtrT<S> affine(const TensorPtrT<S>& x, S s, S c) {
    auto out = make_op<S>(x->shape, {x}, [x, s](TensorT<S>& self) {
        x->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += s * self.grad[i];
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = s * x->data[i] + c;
    return out;
}

template <class S>
TensorPtrT<S> scale(const TensorPtrT<S>& x, S s) {
    return affine(x, s, S(0));
}

// rows [r0, r1) as a new (r1-r0 x n) tensor
template <class S>
TensorPtrT<S> slice_rows(const TensorPtrT<S>& x, int r0, int r1) {
    if (x->shape.size() != 2 || r0 < 0 || r1 > x->shape[0] || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for " + shape_str(x->shape));
    const int n = x->shape[1];
    auto out = make_op<S>({r1 - r0, n}, {x}, [x, r0, n](TensorT<S>& self) {
        x->ensure_grad();
        const int m = self.shape[0];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                x->grad[static_cast<size_t>(r0 + i) * n + j] +=
                    self.grad[static_cast<size_t>(i) * n + j];
    });
    std::copy(x->data.begin() + static_cast<size_t>(r0) * n,
              x->data.begin() + static_cast<size_t>(r1) * n, out->data.begin());
    return out;
}

// columns [c0, c1) as a new (m x c1-c0) tensor
template <class S>
TensorPtrT<S> slice_cols(const TensorPtrT<S>& x, int c0, int c1) {
    if (x->shape.size() != 2 || c0 < 0 || c1 > x->shape[1] || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(x->shape));
    const int m = x->shape[0], n = x->shape[1], w = c1 - c0;
    auto out = make_op<S>({m, w}, {x}, [x, c0, n, w](TensorT<S>& self) {
        x->ensure_grad();
        const int m2 = self.shape[0];
        for (int i = 0; i < m2; ++i)
            for (int j = 0; j < w; ++j)
                x->grad[static_cast<size_t>(i) * n + c0 + j] +=
                    self.grad[static_cast<size_t>(i) * w + j];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            out->data[static_cast<size_t>(i) * w + j] = x->data[static_cast<size_t>(i) * n + c0 + j];
    return out;
}

template <class S>
TensorPtrT<S> concat_cols(const std::vector<TensorPtrT<S>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty part list");
    const int m = parts[0]->shape[0];
    int n = 0;
    for (const auto& p : parts) {
        if (p->shape.size() != 2 || p->shape[0] != m)
            throw ShapeError("concat_cols: row mismatch " + shape_str(p->shape));
        n += p->shape[1];
    }
    auto out = make_op<S>({m, n}, parts, [parts, m, n](TensorT<S>& self) {
        int off = 0;
        for (const auto& p : parts) {
            const int w = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        p->grad[static_cast<size_t>(i) * w + j] +=
                            self.grad[static_cast<size_t>(i) * n + off + j];
            }
            off += w;
        }
    });
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->shape[1];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                out->data[static_cast<size_t>(i) * n + off + j] =
                    p->data[static_cast<size_t>(i) * w + j];
        off += w;
    }
    return out;
}

// row i as a rank-1 tensor of length n
template <class S>
TensorPtrT<S> take_row(const TensorPtrT<S>& x, int i) {
    if (x->shape.size() != 2 || i < 0 || i >= x->shape[0])
        throw ShapeError("take_row: row " + std::to_string(i) + " out of " + shape_str(x->shape));
    const int n = x->shape[1];
    auto out = make_op<S>({n}, {x}, [x, i, n](TensorT<S>& self) {
        x->ensure_grad();
        for (int j = 0; j < n; ++j) x->grad[static_cast<size_t>(i) * n + j] += self.grad[j];
    });
    std::copy(x->data.begin() + static_cast<size_t>(i) * n,
              x->data.begin() + static_cast<size_t>(i + 1) * n, out->data.begin());
    return out;
}

// Row-wise softmax with optional strict causal mask. Masked entries (column
// j > row i) are exactly zero; rows are stabilized by max subtraction.
template <class S>
TensorPtrT<S> row_softmax_masked(const TensorPtrT<S>& x, bool causal) {
    if (x->shape.size() != 2)
        throw ShapeError("row_softmax_masked: rank-2 input required, got " + shape_str(x->shape));
    const int m = x->shape[0], n = x->shape[1];
    if (causal && m != n)
        throw ShapeError("row_softmax_masked: causal mask requires square input, got " +
                         shape_str(x->shape));
    auto out = make_op<S>({m, n}, {x}, [x, m, n, causal](TensorT<S>& self) {
        x->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const int limit = causal ? i + 1 : n;
            const S* y = self.data.data() + static_cast<size_t>(i) * n;
            const S* dy = self.grad.data() + static_cast<size_t>(i) * n;
            S* dx = x->grad.data() + static_cast<size_t>(i) * n;
            S dot = 0;
            for (int j = 0; j < limit; ++j) dot += dy[j] * y[j];
            for (int j = 0; j < limit; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
    for (int i = 0; i < m; ++i) {
        const int limit = causal ? i + 1 : n;
        const S* xi = x->data.data() + static_cast<size_t>(i) * n;
        S* yi = out->data.data() + static_cast<size_t>(i) * n;
        S mx = xi[0];
        for (int j = 1; j < limit; ++j) mx = std::max(mx, xi[j]);
        S denom = 0;
        for (int j = 0; j < limit; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            denom += yi[j];
        }
        for (int j = 0; j < limit; ++j) yi[j] /= denom;
        // masked entries stay exactly 0 from zero-initialization
    }
    return out;
}

// Per-row layer normalization over the last dimension followed by the
// gain/bias affine transform. Epsilon 1e-5 inside the square root.
template <class S>
TensorPtrT<S> layer_norm(const TensorPtrT<S>& x, const TensorPtrT<S>& gain,
                         const TensorPtrT<S>& bias) {
    const int m = x->rows(), n = x->cols();
    if (gain->shape != std::vector<int>{n} || bias->shape != std::vector<int>{n})
        throw ShapeError("layer_norm: affine shapes " + shape_str(gain->shape) + "/" +
                         shape_str(bias->shape) + " do not match last dim of " +
                         shape_str(x->shape));
    constexpr double kEps = 1e-5;

    auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(m) * n);
    auto inv_std = std::make_shared<std::vector<S>>(m);

    auto out = make_op<S>(x->shape, {x, gain, bias},
                          [x, gain, bias, xhat, inv_std, m, n](TensorT<S>& self) {
        if (gain->requires_grad) gain->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const S* dy = self.grad.data() + static_cast<size_t>(i) * n;
            const S* xh = xhat->data() + static_cast<size_t>(i) * n;
            if (gain->requires_grad)
                for (int j = 0; j < n; ++j) gain->grad[j] += dy[j] * xh[j];
            if (bias->requires_grad)
                for (int j = 0; j < n; ++j) bias->grad[j] += dy[j];
            if (x->requires_grad) {
                S* dx = x->grad.data() + static_cast<size_t>(i) * n;
                S mean_g = 0, mean_gx = 0;
                for (int j = 0; j < n; ++j) {
                    const S g = gain->data[j] * dy[j];
                    mean_g += g;
                    mean_gx += g * xh[j];
                }
                mean_g /= S(n);
                mean_gx /= S(n);
                const S is = (*inv_std)[i];
                for (int j = 0; j < n; ++j) {
                    const S g = gain->data[j] * dy[j];
                    dx[j] += is * (g - mean_g - xh[j] * mean_gx);
                }
            }
        }
    });

    for (int i = 0; i < m; ++i) {
        const S* xi = x->data.data() + static_cast<size_t>(i) * n;
        S* yi = out->data.data() + static_cast<size_t>(i) * n;
        S* xh = xhat->data() + static_cast<size_t>(i) * n;
        S mean = 0;
        for (int j = 0; j < n; ++j) mean += xi[j];
        mean /= S(n);
        S var = 0;
        for (int j = 0; j < n; ++j) {
            const S d = xi[j] - mean;
            var += d * d;
        }
        var /= S(n);
        const S is = S(1) / std::sqrt(var + S(kEps));
        (*inv_std)[i] = is;
        for (int j = 0; j < n; ++j) {
            xh[j] = (xi[j] - mean) * is;
            yi[j] = xh[j] * gain->data[j] + bias->data[j];
        }
    }
    return out;
}

// GELU using the exact erf form
template <class S>
TensorPtrT<S> gelu(const TensorPtrT<S>& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto out = make_op<S>(x->shape, {x}, [x](TensorT<S>& self) {
        x->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double v = static_cast<double>(x->data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            x->grad[i] += self.grad[i] * static_cast<S>(cdf + v * pdf);
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) {
        const double v = static_cast<double>(x->data[i]);
        out->data[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
    }
    return out;
}

// Gather rows of an embedding table by token id.
template <class S>
TensorPtrT<S> embedding_rows(const TensorPtrT<S>& table, std::span<const int> ids) {
    if (table->shape.size() != 2) throw ShapeError("embedding_rows: table must be rank 2");
    const int v = table->shape[0], d = table->shape[1];
    const int n = static_cast<int>(ids.size());
    if (n == 0) throw ContractError("embedding_rows: empty id sequence");
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ContractError("embedding_rows: token id " + std::to_string(id) +
                                " outside vocabulary of " + std::to_string(v));
    std::vector<int> idv(ids.begin(), ids.end());
    auto out = make_op<S>({n, d}, {table}, [table, idv, d](TensorT<S>& self) {
        table->ensure_grad();
        for (size_t t = 0; t < idv.size(); ++t) {
            S* dst = table->grad.data() + static_cast<size_t>(idv[t]) * d;
            const S* src = self.grad.data() + t * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    for (int t = 0; t < n; ++t)
        std::copy(table->data.begin() + static_cast<size_t>(idv[t]) * d,
                  table->data.begin() + static_cast<size_t>(idv[t] + 1) * d,
                  out->data.begin() + static_cast<size_t>(t) * d);
    return out;
}

// Sum of entries at the given positions of a rank-1 tensor -> scalar.
template <class S>
TensorPtrT<S> sum_positions(const TensorPtrT<S>& x, std::span<const int> positions) {
    if (x->shape.size() != 1) throw ShapeError("sum_positions: rank-1 input required");
    const int n = x->shape[0];
    for (int p : positions)
        if (p < 0 || p >= n)
            throw ContractError("sum_positions: index " + std::to_string(p) +
                                " out of range for length " + std::to_string(n));
    std::vector<int> pos(positions.begin(), positions.end());
    auto out = make_op<S>({1}, {x}, [x, pos](TensorT<S>& self) {
        x->ensure_grad();
        for (int p : pos) x->grad[p] += self.grad[0];
    });
    S s = 0;
    for (int p : pos) s += x->data[p];
    out->data[0] = s;
    return out;
}

template <class S>
TensorPtrT<S> sum_scalars(const std::vector<TensorPtrT<S>>& xs) {
    if (xs.empty()) throw ContractError("sum_scalars: empty list");
    for (const auto& x : xs)
        if (!x->is_scalar()) throw ContractError("sum_scalars: non-scalar term");
    auto out = make_op<S>({1}, xs, [xs](TensorT<S>& self) {
        for (const auto& x : xs) {
            if (!x->requires_grad) continue;
            x->ensure_grad();
            x->grad[0] += self.grad[0];
        }
    });
    S s = 0;
    for (const auto& x : xs) s += x->data[0];
    out->data[0] = s;
    return out;
}

// -log softmax(logits)[target] for a rank-1 logit vector.
template <class S>
TensorPtrT<S> cross_entropy(const TensorPtrT<S>& logits, int target) {
    if (logits->shape.size() != 1)
        throw ShapeError("cross_entropy: rank-1 logits required, got " + shape_str(logits->shape));
    const int v = logits->shape[0];
    if (target < 0 || target >= v)
        throw ContractError("cross_entropy: target " + std::to_string(target) +
                            " out of range for vocabulary " + std::to_string(v));
    auto out = make_op<S>({1}, {logits}, [logits, target, v](TensorT<S>& self) {
        logits->ensure_grad();
        const S* x = logits->data.data();
        S mx = x[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        S denom = 0;
        for (int j = 0; j < v; ++j) denom += std::exp(x[j] - mx);
        const S g = self.grad[0];
        for (int j = 0; j < v; ++j) {
            const S p = std::exp(x[j] - mx) / denom;
            logits->grad[j] += g * (p - (j == target ? S(1) : S(0)));
        }
    });
    const S* x = logits->data.data();
    S mx = x[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    S denom = 0;
    for (int j = 0; j < v; ++j) denom += std::exp(x[j] - mx);
    out->data[0] = std::log(denom) + mx - x[target];
    return out;
}

// Mean next-token cross-entropy over a sequence: row t of logits predicts
// tokens[t + 1]; rows 0 .. n-2 contribute.
template <class S>
TensorPtrT<S> lm_cross_entropy(const TensorPtrT<S>& logits, std::span<const int> tokens) {
    if (logits->shape.size() != 2) throw ShapeError("lm_cross_entropy: rank-2 logits required");
    const int n = logits->shape[0], v = logits->shape[1];
    if (static_cast<int>(tokens.size()) != n)
        throw ContractError("lm_cross_entropy: token count " + std::to_string(tokens.size()) +
                            " does not match logit rows " + std::to_string(n));
    if (n < 2) throw ContractError("lm_cross_entropy: need at least 2 tokens");
    for (int t : tokens)
        if (t < 0 || t >= v) throw ContractError("lm_cross_entropy: token id out of range");
    std::vector<int> tok(tokens.begin(), tokens.end());
    const int cnt = n - 1;
    auto out = make_op<S>({1}, {logits}, [logits, tok, n, v, cnt](TensorT<S>& self) {
        logits->ensure_grad();
        const S g = self.grad[0] / S(cnt);
#pragma omp parallel for schedule(static) if (static_cast<long>(cnt) * v > 65536)
        for (int i = 0; i < cnt; ++i) {
            const S* x = logits->data.data() + static_cast<size_t>(i) * v;
            S* dx = logits->grad.data() + static_cast<size_t>(i) * v;
            const int target = tok[i + 1];
            S mx = x[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
            S denom = 0;
            for (int j = 0; j < v; ++j) denom += std::exp(x[j] - mx);
            for (int j = 0; j < v; ++j) {
                const S p = std::exp(x[j] - mx) / denom;
                dx[j] += g * (p - (j == target ? S(1) : S(0)));
            }
        }
    });
    double total = 0;
    for (int i = 0; i < cnt; ++i) {
        const S* x = logits->data.data() + static_cast<size_t>(i) * v;
        S mx = x[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        S denom = 0;
        for (int j = 0; j < v; ++j) denom += std::exp(x[j] - mx);
        total += static_cast<double>(std::log(denom) + mx - x[tok[i + 1]]);
    }
    out->data[0] = static_cast<S>(total / cnt);
    return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode accumulation from a scalar loss. Gradients sum across multiple
// uses of a tensor and across successive backward calls; zero_grad() resets.
// Frozen leaves (requires_grad false) never receive a gradient buffer.
template <class S>
void backward(const TensorPtrT<S>& loss) {
    if (!loss->is_scalar())
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss->shape));
    if (!loss->requires_grad || !loss->backward_fn)
        throw ContractError("backward: loss was not produced by recorded operations");

    // iterative post-order DFS for reverse topological order
    std::vector<TensorT<S>*> order;
    std::unordered_set<TensorT<S>*> visited;
    std::vector<std::pair<TensorT<S>*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorT<S>* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && p->backward_fn && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        (*it)->ensure_grad();
        (*it)->backward_fn(**it);
    }
}

template <class S>
void zero_grad(const std::vector<TensorPtrT<S>>& params) {
    for (const auto& p : params)
        if (p->trainable) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class S>
struct AdamStateT {
    S lr;
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    long step_count = 0;

    std::vector<TensorPtrT<S>> params;  // trainable tensors, fixed order
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;

    AdamStateT(std::vector<TensorPtrT<S>> trainable, S learning_rate)
        : lr(learning_rate), params(std::move(trainable)) {
        for (const auto& p : params) {
            if (!p->trainable)
                throw ContractError("AdamState: non-trainable tensor in parameter list");
            m.emplace_back(p->data.size(), S(0));
            v.emplace_back(p->data.size(), S(0));
        }
    }

    // One bias-corrected update; gradients are zeroed afterwards.
    void step() {
        for (const auto& p : params)
            if (p->grad.empty())
                throw ContractError("adam_step: trainable tensor has no gradient buffer");
        ++step_count;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1), step_count));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2), step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            auto& mi = m[i];
            auto& vi = v[i];
            for (size_t j = 0; j < p.data.size(); ++j) {
                const S g = p.grad[j];
                mi[j] = beta1 * mi[j] + (S(1) - beta1) * g;
                vi[j] = beta2 * vi[j] + (S(1) - beta2) * g * g;
                const S mhat = mi[j] / bc1;
                const S vhat = vi[j] / bc2;
                p.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            p.zero_grad();
        }
    }
};

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;
using AdamState = AdamStateT<float>;

}  // namespace abft

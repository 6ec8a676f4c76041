#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "textgan/tensor.hpp"

namespace textgan {

// ---------------------------------------------------------------------------
// Raw GEMM kernels, accumulate form. Row-major, contiguous.
// ---------------------------------------------------------------------------

// C += A(m x k) * B(k x n)
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            if (aip == T(0)) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// C += A(m x k) * B(n x k)^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C += A(k x m)^T * B(k x n)
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T api = arow[i];
            if (api == T(0)) continue;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

namespace detail {

template <typename T, typename F>
void maybe_record(Tensor<T>& out, bool input_tracked, F&& backward_fn) {
    if (auto* tape = Tape<T>::active(); tape != nullptr && input_tracked) {
        out.mark_tracked();
        tape->record(std::forward<F>(backward_fn));
    }
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
    if (t.ndim() != 2) throw DimensionError(std::string(op) + ": expected 2-d tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    gemm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
    check_finite(out, "matmul");
    detail::maybe_record(out, a.tracked() || b.tracked(), [a, b, out, m, k, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        if (a.tracked()) gemm_nt_acc(g, b.data(), a.grad().data(), m, n, k);  // dA += dC * B^T
        if (b.tracked()) gemm_tn_acc(a.data(), g, b.grad().data(), n, m, k);  // dB += A^T * dC
    });
    return out;
}

// a (m x k) times b (n x k) transposed -> (m x n)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    gemm_nt_acc(a.data(), b.data(), out.data(), m, k, n);
    check_finite(out, "matmul_nt");
    detail::maybe_record(out, a.tracked() || b.tracked(), [a, b, out, m, k, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        if (a.tracked()) gemm_nn_acc(g, b.data(), a.grad().data(), m, n, k);  // dA += dC * B
        if (b.tracked()) gemm_tn_acc(g, a.data(), b.grad().data(), k, m, n);  // dB += dC^T * A
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    check_finite(out, "add");
    detail::maybe_record(out, a.tracked() || b.tracked(), [a, b, out, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        if (a.tracked()) {
            T* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b.tracked()) {
            T* gb = b.grad().data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    check_finite(out, "mul");
    detail::maybe_record(out, a.tracked() || b.tracked(), [a, b, out, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        if (a.tracked()) {
            T* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.tracked()) {
            T* gb = b.grad().data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    check_finite(out, "scale");
    detail::maybe_record(out, a.tracked(), [a, out, s, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        T* ga = a.grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
    return out;
}

// x (r x c) plus a length-c vector broadcast over rows.
template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& x, const Tensor<T>& bias) {
    detail::require_2d(x, "add_row_broadcast");
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(1))
        throw DimensionError("add_row_broadcast: bias " + shape_str(bias.shape()) + " does not match columns of " +
                             shape_str(x.shape()));
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] + bias.data()[j];
    check_finite(out, "add_row_broadcast");
    detail::maybe_record(out, x.tracked() || bias.tracked(), [x, bias, out, r, c]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        if (x.tracked()) {
            T* gx = x.grad().data();
            for (std::size_t i = 0; i < r * c; ++i) gx[i] += g[i];
        }
        if (bias.tracked()) {
            T* gb = bias.grad().data();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor<T> out = Tensor<T>::from(std::vector<T>(x.values().begin(), x.values().end()), std::move(shape));
    detail::maybe_record(out, x.tracked(), [x, out]() mutable {
        if (!out.has_grad()) return;
        x.accum_grad(out.grad_view());
    });
    return out;
}

// Copy of the submatrix, rows [r0,r1) x cols [c0,c1).
template <typename T>
Tensor<T> block(const Tensor<T>& x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    detail::require_2d(x, "block");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (r1 > rows || c1 > cols || r0 >= r1 || c0 >= c1)
        throw DimensionError("block: range out of bounds for " + shape_str(x.shape()));
    const std::size_t br = r1 - r0, bc = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({br, bc});
    for (std::size_t i = 0; i < br; ++i)
        for (std::size_t j = 0; j < bc; ++j) out.data()[i * bc + j] = x.data()[(r0 + i) * cols + c0 + j];
    detail::maybe_record(out, x.tracked(), [x, out, r0, c0, br, bc, cols]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        T* gx = x.grad().data();
        for (std::size_t i = 0; i < br; ++i)
            for (std::size_t j = 0; j < bc; ++j) gx[(r0 + i) * cols + c0 + j] += g[i * bc + j];
    });
    return out;
}

// Inverse of per-(batch, head) slicing: parts[b*H + h] is (T x dh); result is
// (B*T x H*dh) with part (b,h) at rows [b*T,(b+1)*T) x cols [h*dh,(h+1)*dh).
template <typename T>
Tensor<T> assemble_grid(const std::vector<Tensor<T>>& parts, std::size_t B, std::size_t H) {
    if (parts.size() != B * H) throw DimensionError("assemble_grid: expected B*H parts");
    const std::size_t Tlen = parts[0].dim(0), dh = parts[0].dim(1);
    for (const auto& p : parts)
        if (p.ndim() != 2 || p.dim(0) != Tlen || p.dim(1) != dh)
            throw DimensionError("assemble_grid: parts must share one shape");
    const std::size_t cols = H * dh;
    Tensor<T> out = Tensor<T>::zeros({B * Tlen, cols});
    bool tracked = false;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h) {
            const Tensor<T>& p = parts[b * H + h];
            tracked = tracked || p.tracked();
            for (std::size_t i = 0; i < Tlen; ++i)
                for (std::size_t j = 0; j < dh; ++j)
                    out.data()[(b * Tlen + i) * cols + h * dh + j] = p.data()[i * dh + j];
        }
    detail::maybe_record(out, tracked, [parts, out, B, H, Tlen, dh, cols]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h) {
                Tensor<T> p = parts[b * H + h];
                if (!p.tracked()) continue;
                T* gp = p.grad().data();
                for (std::size_t i = 0; i < Tlen; ++i)
                    for (std::size_t j = 0; j < dh; ++j) gp[i * dh + j] += g[(b * Tlen + i) * cols + h * dh + j];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// Softmax over the last axis. Only the last axis is supported.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    if (axis != -1 && axis != static_cast<int>(x.ndim()) - 1)
        throw ContractError("softmax: only last-axis softmax is implemented");
    const std::size_t rows = x.rows(), c = x.last_dim();
    if (c == 0) throw DimensionError("softmax: empty last axis");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xr = x.data() + i * c;
        T* yr = out.data() + i * c;
        T mx = xr[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < c; ++j) yr[j] /= sum;
    }
    check_finite(out, "softmax");
    detail::maybe_record(out, x.tracked(), [x, out, rows, c]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        const T* y = out.data();
        T* gx = x.grad().data();
        for (std::size_t i = 0; i < rows; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
        }
    });
    return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis = -1) {
    if (axis != -1 && axis != static_cast<int>(x.ndim()) - 1)
        throw ContractError("log_softmax: only last-axis is implemented");
    const std::size_t rows = x.rows(), c = x.last_dim();
    if (c == 0) throw DimensionError("log_softmax: empty last axis");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xr = x.data() + i * c;
        T* yr = out.data() + i * c;
        T mx = xr[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(xr[j] - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] - lse;
    }
    check_finite(out, "log_softmax");
    detail::maybe_record(out, x.tracked(), [x, out, rows, c]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        const T* y = out.data();
        T* gx = x.grad().data();
        for (std::size_t i = 0; i < rows; ++i) {
            T gsum = T(0);
            for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
        }
    });
    return out;
}

// Row-wise normalization over the last axis, then affine transform.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    const std::size_t rows = x.rows(), c = x.last_dim();
    if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
    if (gain.numel() != c || bias.numel() != c)
        throw DimensionError("layer_norm: gain/bias must have " + std::to_string(c) + " entries");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(rows * c);
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xr = x.data() + i * c;
        T mean = T(0);
        for (std::size_t j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            const T d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const T h = (xr[j] - mean) * is;
            (*xhat)[i * c + j] = h;
            out.data()[i * c + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    check_finite(out, "layer_norm");
    detail::maybe_record(out, x.tracked() || gain.tracked() || bias.tracked(),
                         [x, gain, bias, out, xhat, inv_std, rows, c]() mutable {
                             if (!out.has_grad()) return;
                             const T* g = out.grad_view().data();
                             for (std::size_t i = 0; i < rows; ++i) {
                                 const T* h = xhat->data() + i * c;
                                 const T* gr = g + i * c;
                                 if (gain.tracked()) {
                                     T* gg = gain.grad().data();
                                     for (std::size_t j = 0; j < c; ++j) gg[j] += gr[j] * h[j];
                                 }
                                 if (bias.tracked()) {
                                     T* gb = bias.grad().data();
                                     for (std::size_t j = 0; j < c; ++j) gb[j] += gr[j];
                                 }
                                 if (x.tracked()) {
                                     T* gx = x.grad().data() + i * c;
                                     T sum_gy = T(0), sum_gyh = T(0);
                                     for (std::size_t j = 0; j < c; ++j) {
                                         const T gy = gr[j] * gain.data()[j];
                                         sum_gy += gy;
                                         sum_gyh += gy * h[j];
                                     }
                                     const T inv_c = T(1) / static_cast<T>(c);
                                     for (std::size_t j = 0; j < c; ++j) {
                                         const T gy = gr[j] * gain.data()[j];
                                         gx[j] += (gy - sum_gy * inv_c - h[j] * sum_gyh * inv_c) * (*inv_std)[i];
                                     }
                                 }
                             }
                         });
    return out;
}

namespace detail {
template <typename T>
struct GeluConst {
    static constexpr T alpha = T(0.7978845608028654);  // sqrt(2/pi)
    static constexpr T beta = T(0.044715);
};
}  // namespace detail

// tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    using C = detail::GeluConst<T>;
    const std::size_t n = x.numel();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const T v = x.data()[i];
        const T u = C::alpha * (v + C::beta * v * v * v);
        out.data()[i] = T(0.5) * v * (T(1) + std::tanh(u));
    }
    check_finite(out, "gelu");
    detail::maybe_record(out, x.tracked(), [x, out, n]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        T* gx = x.grad().data();
        for (std::size_t i = 0; i < n; ++i) {
            const T v = x.data()[i];
            const T u = C::alpha * (v + C::beta * v * v * v);
            const T th = std::tanh(u);
            const T du = C::alpha * (T(1) + T(3) * C::beta * v * v);
            const T dydx = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
            gx[i] += g[i] * dydx;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Indexed ops
// ---------------------------------------------------------------------------

// Gather rows of table (V x d) by token id; result is (ids.size() x d).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
    detail::require_2d(table, "embedding");
    const std::size_t v = table.dim(0), d = table.dim(1), n = ids.size();
    for (const int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw IndexError("embedding: token id " + std::to_string(id) + " out of range for vocab " + std::to_string(v));
    Tensor<T> out = Tensor<T>::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = table.data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(row, row + d, out.data() + i * d);
    }
    detail::maybe_record(out, table.tracked(),
                         [table, out, ids = std::vector<int>(ids.begin(), ids.end()), d]() mutable {
                             if (!out.has_grad()) return;
                             const T* g = out.grad_view().data();
                             T* gt = table.grad().data();
                             for (std::size_t i = 0; i < ids.size(); ++i) {
                                 T* grow = gt + static_cast<std::size_t>(ids[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) grow[j] += g[i * d + j];
                             }
                         });
    return out;
}

// out[i] = x[i, ids[i]] for a 2-d x; result is a length-r vector.
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const int> ids) {
    detail::require_2d(x, "pick");
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (ids.size() != r) throw DimensionError("pick: need one column index per row");
    for (const int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= c) throw IndexError("pick: column index out of range");
    Tensor<T> out = Tensor<T>::zeros({r});
    for (std::size_t i = 0; i < r; ++i) out.data()[i] = x.data()[i * c + static_cast<std::size_t>(ids[i])];
    detail::maybe_record(out, x.tracked(), [x, out, ids = std::vector<int>(ids.begin(), ids.end()), c]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad_view().data();
        T* gx = x.grad().data();
        for (std::size_t i = 0; i < ids.size(); ++i) gx[i * c + static_cast<std::size_t>(ids[i])] += g[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (const T v : x.values()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    check_finite(out, "sum");
    detail::maybe_record(out, x.tracked(), [x, out]() mutable {
        if (!out.has_grad()) return;
        const T g = out.grad_view()[0];
        T* gx = x.grad().data();
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ContractError("mean: empty tensor");
    T acc = T(0);
    for (const T v : x.values()) acc += v;
    const T inv_n = T(1) / static_cast<T>(x.numel());
    Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
    check_finite(out, "mean");
    detail::maybe_record(out, x.tracked(), [x, out, inv_n]() mutable {
        if (!out.has_grad()) return;
        const T g = out.grad_view()[0] * inv_n;
        T* gx = x.grad().data();
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

// Mean absolute error against a constant target (no gradient to target).
template <typename T>
Tensor<T> mean_absolute_error(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape()) throw DimensionError("mean_absolute_error: shape mismatch");
    if (pred.numel() == 0) throw ContractError("mean_absolute_error: empty tensor");
    T acc = T(0);
    for (std::size_t i = 0; i < pred.numel(); ++i) acc += std::abs(pred.data()[i] - target.data()[i]);
    const T inv_n = T(1) / static_cast<T>(pred.numel());
    Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
    check_finite(out, "mean_absolute_error");
    detail::maybe_record(out, pred.tracked(), [pred, target, out, inv_n]() mutable {
        if (!out.has_grad()) return;
        const T g = out.grad_view()[0] * inv_n;
        T* gp = pred.grad().data();
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            const T d = pred.data()[i] - target.data()[i];
            gp[i] += g * (d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0));
        }
    });
    return out;
}

inline constexpr int kNoIgnore = -1;

// Mean over rows of -log softmax(logits)[target]. Rows whose target equals
// ignore_id are excluded from the mean (used for PAD positions in batches).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_id = kNoIgnore) {
    detail::require_2d(logits, "cross_entropy");
    const std::size_t r = logits.dim(0), c = logits.dim(1);
    if (targets.size() != r) throw DimensionError("cross_entropy: need one target per row");
    std::size_t counted = 0;
    for (const int t : targets) {
        if (t == ignore_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= c)
            throw IndexError("cross_entropy: target id " + std::to_string(t) + " out of range for " + std::to_string(c));
        ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: all rows ignored");
    auto probs = std::make_shared<std::vector<T>>(r * c);
    T acc = T(0);
    for (std::size_t i = 0; i < r; ++i) {
        const T* xr = logits.data() + i * c;
        T* pr = probs->data() + i * c;
        T mx = xr[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            sum += pr[j];
        }
        for (std::size_t j = 0; j < c; ++j) pr[j] /= sum;
        if (targets[i] != ignore_id) acc += -(xr[static_cast<std::size_t>(targets[i])] - mx - std::log(sum));
    }
    const T inv_n = T(1) / static_cast<T>(counted);
    Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
    check_finite(out, "cross_entropy");
    detail::maybe_record(out, logits.tracked(),
                         [logits, out, probs, targets = std::vector<int>(targets.begin(), targets.end()), ignore_id,
                          inv_n, r, c]() mutable {
                             if (!out.has_grad()) return;
                             const T g = out.grad_view()[0] * inv_n;
                             T* gx = logits.grad().data();
                             for (std::size_t i = 0; i < r; ++i) {
                                 if (targets[i] == ignore_id) continue;
                                 const T* pr = probs->data() + i * c;
                                 for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g * pr[j];
                                 gx[i * c + static_cast<std::size_t>(targets[i])] -= g;
                             }
                         });
    return out;
}

}  // namespace textgan

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "kvprompt/tensor.hpp"

// Forward ops with recorded backward closures. Every op creates a fresh
// output tensor; an output requires grad iff the tape is recording and any
// input requires grad. Backward closures accumulate (+=) into input grads,
// which makes gradient accumulation additive across backward calls.

namespace kvp::ops {

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void gemm_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m x k] += a[m x n] * b[k x n]^T
template <class T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * n;
        T* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* bp = b + p * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            T* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

template <class T>
bool want_grad(const Tape<T>& tape, std::initializer_list<const TensorPtr<T>*> inputs) {
    if (!tape.recording()) return false;
    for (const TensorPtr<T>* p : inputs) {
        if (*p && (*p)->requires_grad) return true;
    }
    return false;
}

template <class T>
TensorPtr<T> make_out(Shape s, bool rg) {
    return make_tensor<T>(std::move(s), rg);
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

}  // namespace detail

template <class T>
TensorPtr<T> matmul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require(a->rank() == 2 && b->rank() == 2 && a->shape[1] == b->shape[0],
                    "matmul shape mismatch: " + shape_str(a->shape) + " x " + shape_str(b->shape));
    const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    const bool rg = detail::want_grad(tape, {&a, &b});
    auto out = detail::make_out<T>({m, n}, rg);
    detail::gemm_nn_acc(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    if (rg) {
        tape.record([a, b, out, m, k, n] {
            if (a->requires_grad)
                detail::gemm_nt_acc(out->grad.data(), b->data.data(), a->grad.data(), m, n, k);
            if (b->requires_grad)
                detail::gemm_tn_acc(a->data.data(), out->grad.data(), b->grad.data(), m, k, n);
        });
    }
    return out;
}

template <class T>
TensorPtr<T> transpose(Tape<T>& tape, const TensorPtr<T>& x) {
    detail::require(x->rank() == 2, "transpose expects a matrix, got " + shape_str(x->shape));
    const std::size_t m = x->shape[0], n = x->shape[1];
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>({n, m}, rg);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->data[j * m + i] = x->data[i * n + j];
    if (rg) {
        tape.record([x, out, m, n] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) x->grad[i * n + j] += out->grad[j * m + i];
        });
    }
    return out;
}

template <class T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require(a->shape == b->shape,
                    "add shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    const bool rg = detail::want_grad(tape, {&a, &b});
    auto out = detail::make_out<T>(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (rg) {
        tape.record([a, b, out] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <class T>
TensorPtr<T> sub(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require(a->shape == b->shape,
                    "sub shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    const bool rg = detail::want_grad(tape, {&a, &b});
    auto out = detail::make_out<T>(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (rg) {
        tape.record([a, b, out] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] -= out->grad[i];
        });
    }
    return out;
}

template <class T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require(a->shape == b->shape,
                    "mul shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    const bool rg = detail::want_grad(tape, {&a, &b});
    auto out = detail::make_out<T>(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (rg) {
        tape.record([a, b, out] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i)
                    a->grad[i] += b->data[i] * out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i)
                    b->grad[i] += a->data[i] * out->grad[i];
        });
    }
    return out;
}

// Elementwise multiply where mask entries that are exactly 0 force an exact
// +0 output regardless of the other operand's sign. Masked values are thereby
// bit-inert downstream, which the mask-nullity contract relies on.
template <class T>
TensorPtr<T> mask_mul(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& mask) {
    detail::require(x->shape == mask->shape, "mask_mul shape mismatch: " + shape_str(x->shape) +
                                                 " vs " + shape_str(mask->shape));
    const bool rg = detail::want_grad(tape, {&x, &mask});
    auto out = detail::make_out<T>(x->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->data[i] = mask->data[i] == T(0) ? T(0) : x->data[i] * mask->data[i];
    if (rg) {
        tape.record([x, mask, out] {
            if (x->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i)
                    x->grad[i] += mask->data[i] * out->grad[i];
            if (mask->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i)
                    mask->grad[i] += x->data[i] * out->grad[i];
        });
    }
    return out;
}

template <class T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& x, T c) {
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>(x->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = c * x->data[i];
    if (rg) {
        tape.record([x, out, c] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < out->numel(); ++i) x->grad[i] += c * out->grad[i];
        });
    }
    return out;
}

// x[m x n] + v[n] broadcast over rows (bias add).
template <class T>
TensorPtr<T> add_rowvec(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& v) {
    detail::require(x->rank() == 2 && v->numel() == x->shape[1],
                    "add_rowvec shape mismatch: " + shape_str(x->shape) + " + " +
                        shape_str(v->shape));
    const std::size_t m = x->shape[0], n = x->shape[1];
    const bool rg = detail::want_grad(tape, {&x, &v});
    auto out = detail::make_out<T>(x->shape, rg);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->data[i * n + j] = x->data[i * n + j] + v->data[j];
    if (rg) {
        tape.record([x, v, out, m, n] {
            if (x->requires_grad)
                for (std::size_t i = 0; i < m * n; ++i) x->grad[i] += out->grad[i];
            if (v->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) v->grad[j] += out->grad[i * n + j];
        });
    }
    return out;
}

// Row i of x scaled by scalar s[i]; s == 0 yields an exact +0 row (see
// mask_mul). The gradient to s[i] is the row dot product, which is what the
// prompt-importance probe differentiates.
template <class T>
TensorPtr<T> row_scale(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& s) {
    detail::require(x->rank() == 2 && s->numel() == x->shape[0],
                    "row_scale shape mismatch: " + shape_str(x->shape) + " * " +
                        shape_str(s->shape));
    const std::size_t m = x->shape[0], n = x->shape[1];
    const bool rg = detail::want_grad(tape, {&x, &s});
    auto out = detail::make_out<T>(x->shape, rg);
    for (std::size_t i = 0; i < m; ++i) {
        const T si = s->data[i];
        for (std::size_t j = 0; j < n; ++j)
            out->data[i * n + j] = si == T(0) ? T(0) : si * x->data[i * n + j];
    }
    if (rg) {
        tape.record([x, s, out, m, n] {
            if (x->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        x->grad[i * n + j] += s->data[i] * out->grad[i * n + j];
            if (s->requires_grad)
                for (std::size_t i = 0; i < m; ++i) {
                    T acc = T(0);
                    for (std::size_t j = 0; j < n; ++j)
                        acc += x->data[i * n + j] * out->grad[i * n + j];
                    s->grad[i] += acc;
                }
        });
    }
    return out;
}

// x[m x r] -> [m x r*k], each entry repeated k times along columns
// (segment-mask expansion to embedding width).
template <class T>
TensorPtr<T> repeat_cols(Tape<T>& tape, const TensorPtr<T>& x, std::size_t k) {
    detail::require(x->rank() == 2 && k >= 1, "repeat_cols expects a matrix and k >= 1");
    const std::size_t m = x->shape[0], r = x->shape[1];
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>({m, r * k}, rg);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t q = 0; q < r; ++q) {
            const T v = x->data[i * r + q];
            T* dst = out->data.data() + i * r * k + q * k;
            for (std::size_t t = 0; t < k; ++t) dst[t] = v;
        }
    if (rg) {
        tape.record([x, out, m, r, k] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t q = 0; q < r; ++q) {
                    const T* src = out->grad.data() + i * r * k + q * k;
                    T acc = T(0);
                    for (std::size_t t = 0; t < k; ++t) acc += src[t];
                    x->grad[i * r + q] += acc;
                }
        });
    }
    return out;
}

// Gathers the given rows of x[m x n] in order; backward scatter-adds into the
// source rows. Used to drop zero-mask prompt rows from the token sequence.
template <class T>
TensorPtr<T> take_rows(Tape<T>& tape, const TensorPtr<T>& x, std::vector<std::size_t> rows) {
    detail::require(x->rank() == 2, "take_rows expects a matrix, got " + shape_str(x->shape));
    detail::require(!rows.empty(), "take_rows with empty row list");
    for (std::size_t r : rows)
        detail::require(r < x->shape[0], "take_rows index " + std::to_string(r) +
                                             " out of range for " + shape_str(x->shape));
    const std::size_t n = x->shape[1];
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>({rows.size(), n}, rg);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const T* src = x->data.data() + rows[i] * n;
        std::copy(src, src + n, out->data.data() + i * n);
    }
    if (rg) {
        tape.record([x, out, rows = std::move(rows), n] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const T* src = out->grad.data() + i * n;
                T* dst = x->grad.data() + rows[i] * n;
                for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

namespace detail {

struct AxisSplit {
    std::size_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_axes(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.axis = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace detail

template <class T>
TensorPtr<T> concat(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts, std::size_t axis) {
    detail::require(!parts.empty(), "concat of zero tensors");
    const Shape& ref = parts[0]->shape;
    detail::require(axis < ref.size(), "concat axis " + std::to_string(axis) +
                                           " out of range for " + shape_str(ref));
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        detail::require(p->rank() == ref.size(), "concat rank mismatch: " + shape_str(ref) +
                                                     " vs " + shape_str(p->shape));
        for (std::size_t i = 0; i < ref.size(); ++i) {
            detail::require(i == axis || p->shape[i] == ref[i],
                            "concat shape mismatch on axis " + std::to_string(i) + ": " +
                                shape_str(ref) + " vs " + shape_str(p->shape));
        }
        axis_total += p->shape[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = axis_total;

    bool rg = false;
    if (tape.recording())
        for (const auto& p : parts) rg = rg || p->requires_grad;
    auto out = detail::make_out<T>(out_shape, rg);

    const auto dims = detail::split_axes(out_shape, axis);
    std::size_t axis_off = 0;
    for (const auto& p : parts) {
        const std::size_t pa = p->shape[axis];
        for (std::size_t o = 0; o < dims.outer; ++o) {
            const T* src = p->data.data() + o * pa * dims.inner;
            T* dst = out->data.data() + (o * dims.axis + axis_off) * dims.inner;
            std::copy(src, src + pa * dims.inner, dst);
        }
        axis_off += pa;
    }
    if (rg) {
        auto parts_copy = parts;
        tape.record([parts_copy, out, dims, axis] {
            std::size_t off = 0;
            for (const auto& p : parts_copy) {
                const std::size_t pa = p->shape[axis];
                if (p->requires_grad) {
                    for (std::size_t o = 0; o < dims.outer; ++o) {
                        const T* src = out->grad.data() + (o * dims.axis + off) * dims.inner;
                        T* dst = p->grad.data() + o * pa * dims.inner;
                        for (std::size_t i = 0; i < pa * dims.inner; ++i) dst[i] += src[i];
                    }
                }
                off += pa;
            }
        });
    }
    return out;
}

template <class T>
TensorPtr<T> slice(Tape<T>& tape, const TensorPtr<T>& x, std::size_t axis, std::size_t start,
                   std::size_t len) {
    detail::require(axis < x->rank(), "slice axis out of range for " + shape_str(x->shape));
    detail::require(start + len <= x->shape[axis],
                    "slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") out of range for " + shape_str(x->shape) + " axis " +
                        std::to_string(axis));
    Shape out_shape = x->shape;
    out_shape[axis] = len;
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>(out_shape, rg);
    const auto dims = detail::split_axes(x->shape, axis);
    for (std::size_t o = 0; o < dims.outer; ++o) {
        const T* src = x->data.data() + (o * dims.axis + start) * dims.inner;
        T* dst = out->data.data() + o * len * dims.inner;
        std::copy(src, src + len * dims.inner, dst);
    }
    if (rg) {
        tape.record([x, out, dims, start, len] {
            if (!x->requires_grad) return;
            for (std::size_t o = 0; o < dims.outer; ++o) {
                const T* src = out->grad.data() + o * len * dims.inner;
                T* dst = x->grad.data() + (o * dims.axis + start) * dims.inner;
                for (std::size_t i = 0; i < len * dims.inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <class T>
TensorPtr<T> reshape(Tape<T>& tape, const TensorPtr<T>& x, Shape new_shape) {
    detail::require(shape_numel(new_shape) == x->numel(),
                    "reshape " + shape_str(x->shape) + " -> " + shape_str(new_shape) +
                        " changes element count");
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>(std::move(new_shape), rg);
    out->data = x->data;
    if (rg) {
        tape.record([x, out] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < out->numel(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

// Row-wise softmax with per-row max subtraction. Rejects non-finite input.
template <class T>
TensorPtr<T> softmax_rows(Tape<T>& tape, const TensorPtr<T>& x) {
    detail::require(x->rank() == 2, "softmax_rows expects a matrix, got " + shape_str(x->shape));
    x->check_finite("softmax_rows input");
    const std::size_t m = x->shape[0], n = x->shape[1];
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>(x->shape, rg);
    for (std::size_t i = 0; i < m; ++i) {
        const T* xi = x->data.data() + i * n;
        T* yi = out->data.data() + i * n;
        T mx = xi[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < n; ++j) yi[j] *= inv;
    }
    if (rg) {
        tape.record([x, out, m, n] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < m; ++i) {
                const T* yi = out->data.data() + i * n;
                const T* gi = out->grad.data() + i * n;
                T dot = T(0);
                for (std::size_t j = 0; j < n; ++j) dot += yi[j] * gi[j];
                T* xi = x->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) xi[j] += yi[j] * (gi[j] - dot);
            }
        });
    }
    return out;
}

// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
template <class T>
TensorPtr<T> gelu(Tape<T>& tape, const TensorPtr<T>& x) {
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>(x->shape, rg);
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    for (std::size_t i = 0; i < x->numel(); ++i) {
        const T v = x->data[i];
        out->data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    if (rg) {
        tape.record([x, out, inv_sqrt2] {
            if (!x->requires_grad) return;
            const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
            for (std::size_t i = 0; i < x->numel(); ++i) {
                const T v = x->data[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt2pi;
                x->grad[i] += (cdf + v * pdf) * out->grad[i];
            }
        });
    }
    return out;
}

// Row-wise layer normalization with learned gain/bias: per row i,
// y_ij = (x_ij - mean_i) / sqrt(var_i + eps) * g_j + b_j.
template <class T>
TensorPtr<T> layer_norm(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& g,
                        const TensorPtr<T>& b, T eps) {
    detail::require(x->rank() == 2 && g->numel() == x->shape[1] && b->numel() == x->shape[1],
                    "layer_norm shape mismatch: x " + shape_str(x->shape) + ", gain " +
                        shape_str(g->shape) + ", bias " + shape_str(b->shape));
    const std::size_t m = x->shape[0], n = x->shape[1];
    const bool rg = detail::want_grad(tape, {&x, &g, &b});
    auto out = detail::make_out<T>(x->shape, rg);
    // Normalized values are stashed for the backward pass.
    auto xhat = std::make_shared<std::vector<T>>(m * n);
    auto inv_std = std::make_shared<std::vector<T>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* xi = x->data.data() + i * n;
        T mean = T(0);
        for (std::size_t j = 0; j < n; ++j) mean += xi[j];
        mean /= T(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T d = xi[j] - mean;
            var += d * d;
        }
        var /= T(n);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        T* hi = xhat->data() + i * n;
        T* yi = out->data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            hi[j] = (xi[j] - mean) * is;
            yi[j] = hi[j] * g->data[j] + b->data[j];
        }
    }
    if (rg) {
        tape.record([x, g, b, out, xhat, inv_std, m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                const T* hi = xhat->data() + i * n;
                const T* gi = out->grad.data() + i * n;
                if (g->requires_grad)
                    for (std::size_t j = 0; j < n; ++j) g->grad[j] += gi[j] * hi[j];
                if (b->requires_grad)
                    for (std::size_t j = 0; j < n; ++j) b->grad[j] += gi[j];
                if (x->requires_grad) {
                    // dxhat = dout * g; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) / std
                    T sum_dh = T(0), sum_dh_h = T(0);
                    for (std::size_t j = 0; j < n; ++j) {
                        const T dh = gi[j] * g->data[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hi[j];
                    }
                    const T mean_dh = sum_dh / T(n);
                    const T mean_dh_h = sum_dh_h / T(n);
                    T* xi = x->grad.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const T dh = gi[j] * g->data[j];
                        xi[j] += (dh - mean_dh - hi[j] * mean_dh_h) * (*inv_std)[i];
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x) {
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>({1}, rg);
    T acc = T(0);
    for (T v : x->data) acc += v;
    out->data[0] = acc;
    if (rg) {
        tape.record([x, out] {
            if (!x->requires_grad) return;
            const T go = out->grad[0];
            for (std::size_t i = 0; i < x->numel(); ++i) x->grad[i] += go;
        });
    }
    return out;
}

template <class T>
TensorPtr<T> mean_all(Tape<T>& tape, const TensorPtr<T>& x) {
    const bool rg = detail::want_grad(tape, {&x});
    auto out = detail::make_out<T>({1}, rg);
    T acc = T(0);
    for (T v : x->data) acc += v;
    const T inv = T(1) / T(x->numel());
    out->data[0] = acc * inv;
    if (rg) {
        tape.record([x, out, inv] {
            if (!x->requires_grad) return;
            const T go = out->grad[0] * inv;
            for (std::size_t i = 0; i < x->numel(); ++i) x->grad[i] += go;
        });
    }
    return out;
}

// Mean negative log-likelihood of softmax(logits) at the given labels.
// logits: [batch x classes].
template <class T>
TensorPtr<T> cross_entropy(Tape<T>& tape, const TensorPtr<T>& logits,
                           const std::vector<int>& labels) {
    detail::require(logits->rank() == 2 && logits->shape[0] == labels.size(),
                    "cross_entropy: logits " + shape_str(logits->shape) + " vs " +
                        std::to_string(labels.size()) + " labels");
    logits->check_finite("cross_entropy logits");
    const std::size_t b = logits->shape[0], c = logits->shape[1];
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            throw ShapeError("cross_entropy label " + std::to_string(y) + " out of range for " +
                             std::to_string(c) + " classes");
        }
    }
    const bool rg = detail::want_grad(tape, {&logits});
    auto out = detail::make_out<T>({1}, rg);
    auto probs = std::make_shared<std::vector<T>>(b * c);
    T total = T(0);
    for (std::size_t i = 0; i < b; ++i) {
        const T* li = logits->data.data() + i * c;
        T* pi = probs->data() + i * c;
        T mx = li[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, li[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            pi[j] = std::exp(li[j] - mx);
            sum += pi[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < c; ++j) pi[j] *= inv;
        total += -(li[static_cast<std::size_t>(labels[i])] - mx - std::log(sum));
    }
    out->data[0] = total / T(b);
    if (rg) {
        auto labels_copy = labels;
        tape.record([logits, out, probs, labels_copy, b, c] {
            if (!logits->requires_grad) return;
            const T go = out->grad[0] / T(b);
            for (std::size_t i = 0; i < b; ++i) {
                const T* pi = probs->data() + i * c;
                T* gi = logits->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) {
                    const T onehot = j == static_cast<std::size_t>(labels_copy[i]) ? T(1) : T(0);
                    gi[j] += (pi[j] - onehot) * go;
                }
            }
        });
    }
    return out;
}

}  // namespace kvp::ops

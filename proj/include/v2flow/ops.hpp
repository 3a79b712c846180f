#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "v2flow/tensor.hpp"

namespace v2flow {

namespace kernel {

// out[m x p] = a[m x k] * b[k x p]; ikj order so the inner loop streams rows.
template <typename T>
void matmul(const T* a, const T* b, T* out, int m, int k, int p) {
    for (int i = 0; i < m; ++i) {
        T* orow = out + static_cast<int64_t>(i) * p;
        for (int j = 0; j < p; ++j) orow[j] = T(0);
        const T* arow = a + static_cast<int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + static_cast<int64_t>(kk) * p;
            for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul_acc(const T* a, const T* b, T* out, int m, int k, int p) {
    for (int i = 0; i < m; ++i) {
        T* orow = out + static_cast<int64_t>(i) * p;
        const T* arow = a + static_cast<int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + static_cast<int64_t>(kk) * p;
            for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[k x p] += a^T * g where a is [m x k], g is [m x p].
template <typename T>
void matmul_tn_acc(const T* a, const T* g, T* out, int m, int k, int p) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * k;
        const T* grow = g + static_cast<int64_t>(i) * p;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            T* orow = out + static_cast<int64_t>(kk) * p;
            for (int j = 0; j < p; ++j) orow[j] += av * grow[j];
        }
    }
}

template <typename T>
void transpose(const T* a, T* out, int m, int p) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < p; ++j) out[static_cast<int64_t>(j) * m + i] = a[static_cast<int64_t>(i) * p + j];
    }
}

}  // namespace kernel

namespace detail {

template <typename T>
bool wants_grad(const Tensor<T>& t) {
    return grad_enabled() && t.requires_grad;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.dims != b.dims) throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out(a.dims, detail::wants_grad(a) || detail::wants_grad(b));
    const int64_t n = out.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    check_finite(out, "add");
    if (out.requires_grad) {
        out.node = make_node<T>({a, b}, [n](const Tensor<T>& o) {
            const auto& pa2 = o.node->parents[0];
            const auto& pb2 = o.node->parents[1];
            const T* g = o.gptr();
            if (pa2.requires_grad) {
                T* ga = pa2.grad->data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (pb2.requires_grad) {
                T* gb = pb2.grad->data();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out(a.dims, detail::wants_grad(a) || detail::wants_grad(b));
    const int64_t n = out.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    check_finite(out, "sub");
    if (out.requires_grad) {
        out.node = make_node<T>({a, b}, [n](const Tensor<T>& o) {
            const auto& pa2 = o.node->parents[0];
            const auto& pb2 = o.node->parents[1];
            const T* g = o.gptr();
            if (pa2.requires_grad) {
                T* ga = pa2.grad->data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (pb2.requires_grad) {
                T* gb = pb2.grad->data();
                for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out(a.dims, detail::wants_grad(a) || detail::wants_grad(b));
    const int64_t n = out.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    check_finite(out, "mul");
    if (out.requires_grad) {
        out.node = make_node<T>({a, b}, [n](const Tensor<T>& o) {
            const auto& pa2 = o.node->parents[0];
            const auto& pb2 = o.node->parents[1];
            const T* g = o.gptr();
            if (pa2.requires_grad) {
                T* ga = pa2.grad->data();
                const T* vb = pb2.ptr();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
            }
            if (pb2.requires_grad) {
                T* gb = pb2.grad->data();
                const T* va = pa2.ptr();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.dims, detail::wants_grad(a));
    const int64_t n = out.numel();
    const T* pa = a.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    check_finite(out, "scale");
    if (out.requires_grad) {
        out.node = make_node<T>({a}, [n, c](const Tensor<T>& o) {
            const auto& pa2 = o.node->parents[0];
            const T* g = o.gptr();
            T* ga = pa2.grad->data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

// Detached copy: same values, no gradient path.
template <typename T>
Tensor<T> stopgrad(const Tensor<T>& a) {
    Tensor<T> out;
    out.dims = a.dims;
    out.data = a.data;
    return out;
}

// ---------------------------------------------------------------------------
// matmul and layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be 2-D");
    const int m = a.dims[0], k = a.dims[1], p = b.dims[1];
    if (b.dims[0] != k) throw ShapeError("matmul: inner dimensions do not match");
    Tensor<T> out({m, p}, detail::wants_grad(a) || detail::wants_grad(b));
    kernel::matmul(a.ptr(), b.ptr(), out.ptr(), m, k, p);
    check_finite(out, "matmul");
    if (out.requires_grad) {
        out.node = make_node<T>({a, b}, [m, k, p](const Tensor<T>& o) {
            const auto& pa = o.node->parents[0];
            const auto& pb = o.node->parents[1];
            const T* g = o.gptr();
            if (pa.requires_grad) {
                // grad_a += g * b^T (b transposed into scratch so the product streams rows)
                std::vector<T> bt(static_cast<size_t>(k) * p);
                kernel::transpose(pb.ptr(), bt.data(), k, p);
                kernel::matmul_acc(g, bt.data(), pa.grad->data(), m, p, k);
            }
            if (pb.requires_grad) {
                kernel::matmul_tn_acc(pa.ptr(), g, pb.grad->data(), m, k, p);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: operand must be 2-D");
    const int m = a.dims[0], p = a.dims[1];
    Tensor<T> out({p, m}, detail::wants_grad(a));
    kernel::transpose(a.ptr(), out.ptr(), m, p);
    if (out.requires_grad) {
        out.node = make_node<T>({a}, [m, p](const Tensor<T>& o) {
            const auto& pa = o.node->parents[0];
            const T* g = o.gptr();
            T* ga = pa.grad->data();
            for (int j = 0; j < p; ++j) {
                for (int i = 0; i < m; ++i) ga[static_cast<int64_t>(i) * p + j] += g[static_cast<int64_t>(j) * m + i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int start, int len) {
    if (a.rank() != 2) throw ShapeError("slice_rows: operand must be 2-D");
    const int m = a.dims[0], p = a.dims[1];
    if (start < 0 || len <= 0 || start + len > m) throw ShapeError("slice_rows: range out of bounds");
    Tensor<T> out({len, p}, detail::wants_grad(a));
    std::copy(a.ptr() + static_cast<int64_t>(start) * p, a.ptr() + static_cast<int64_t>(start + len) * p, out.ptr());
    if (out.requires_grad) {
        out.node = make_node<T>({a}, [start, len, p](const Tensor<T>& o) {
            const auto& pa = o.node->parents[0];
            const T* g = o.gptr();
            T* ga = pa.grad->data() + static_cast<int64_t>(start) * p;
            for (int64_t i = 0; i < static_cast<int64_t>(len) * p; ++i) ga[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int start, int len) {
    if (a.rank() != 2) throw ShapeError("slice_cols: operand must be 2-D");
    const int m = a.dims[0], p = a.dims[1];
    if (start < 0 || len <= 0 || start + len > p) throw ShapeError("slice_cols: range out of bounds");
    Tensor<T> out({m, len}, detail::wants_grad(a));
    for (int i = 0; i < m; ++i) {
        std::copy(a.ptr() + static_cast<int64_t>(i) * p + start, a.ptr() + static_cast<int64_t>(i) * p + start + len,
                  out.ptr() + static_cast<int64_t>(i) * len);
    }
    if (out.requires_grad) {
        out.node = make_node<T>({a}, [m, p, start, len](const Tensor<T>& o) {
            const auto& pa = o.node->parents[0];
            const T* g = o.gptr();
            T* ga = pa.grad->data();
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < len; ++j) ga[static_cast<int64_t>(i) * p + start + j] += g[static_cast<int64_t>(i) * len + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    const int p = parts[0].dims.back();
    int m = 0;
    bool rg = false;
    for (const auto& t : parts) {
        if (t.rank() != 2 || t.dims[1] != p) throw ShapeError("concat_rows: column counts differ");
        m += t.dims[0];
        rg = rg || detail::wants_grad(t);
    }
    Tensor<T> out({m, p}, rg);
    T* po = out.ptr();
    for (const auto& t : parts) {
        std::copy(t.ptr(), t.ptr() + t.numel(), po);
        po += t.numel();
    }
    if (out.requires_grad) {
        out.node = make_node<T>(parts, [p](const Tensor<T>& o) {
            const T* g = o.gptr();
            int64_t off = 0;
            for (const auto& t : o.node->parents) {
                const int64_t n = t.numel();
                if (t.requires_grad) {
                    T* gt = t.grad->data();
                    for (int64_t i = 0; i < n; ++i) gt[i] += g[off + i];
                }
                off += n;
            }
            (void)p;
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    const int m = parts[0].dims[0];
    int p = 0;
    bool rg = false;
    for (const auto& t : parts) {
        if (t.rank() != 2 || t.dims[0] != m) throw ShapeError("concat_cols: row counts differ");
        p += t.dims[1];
        rg = rg || detail::wants_grad(t);
    }
    Tensor<T> out({m, p}, rg);
    int off = 0;
    for (const auto& t : parts) {
        const int w = t.dims[1];
        for (int i = 0; i < m; ++i) {
            std::copy(t.ptr() + static_cast<int64_t>(i) * w, t.ptr() + static_cast<int64_t>(i) * w + w,
                      out.ptr() + static_cast<int64_t>(i) * p + off);
        }
        off += w;
    }
    if (out.requires_grad) {
        out.node = make_node<T>(parts, [m, p](const Tensor<T>& o) {
            const T* g = o.gptr();
            int off2 = 0;
            for (const auto& t : o.node->parents) {
                const int w = t.dims[1];
                if (t.requires_grad) {
                    T* gt = t.grad->data();
                    for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < w; ++j) gt[static_cast<int64_t>(i) * w + j] += g[static_cast<int64_t>(i) * p + off2 + j];
                    }
                }
                off2 += w;
            }
        });
    }
    return out;
}

// Embedding lookup; backward scatter-adds row gradients in ascending row order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& idx) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D");
    const int n = table.dims[0], d = table.dims[1];
    for (int i : idx) {
        if (i < 0 || i >= n) throw ShapeError("gather_rows: index out of range");
    }
    Tensor<T> out({static_cast<int>(idx.size()), d}, detail::wants_grad(table));
    for (size_t r = 0; r < idx.size(); ++r) {
        std::copy(table.ptr() + static_cast<int64_t>(idx[r]) * d, table.ptr() + static_cast<int64_t>(idx[r]) * d + d,
                  out.ptr() + static_cast<int64_t>(r) * d);
    }
    if (out.requires_grad) {
        out.node = make_node<T>({table}, [idx, d](const Tensor<T>& o) {
            const auto& pt = o.node->parents[0];
            const T* g = o.gptr();
            T* gt = pt.grad->data();
            for (size_t r = 0; r < idx.size(); ++r) {
                T* row = gt + static_cast<int64_t>(idx[r]) * d;
                const T* grow = g + static_cast<int64_t>(r) * d;
                for (int j = 0; j < d; ++j) row[j] += grow[j];
            }
        });
    }
    return out;
}

// x[m x p] + b[p] broadcast over rows.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dims[0] != x.dims[1]) {
        throw ShapeError("add_rowvec: bias length must match columns");
    }
    const int m = x.dims[0], p = x.dims[1];
    Tensor<T> out({m, p}, detail::wants_grad(x) || detail::wants_grad(b));
    const T* px = x.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < p; ++j) po[static_cast<int64_t>(i) * p + j] = px[static_cast<int64_t>(i) * p + j] + pb[j];
    }
    check_finite(out, "add_rowvec");
    if (out.requires_grad) {
        out.node = make_node<T>({x, b}, [m, p](const Tensor<T>& o) {
            const auto& px2 = o.node->parents[0];
            const auto& pb2 = o.node->parents[1];
            const T* g = o.gptr();
            if (px2.requires_grad) {
                T* gx = px2.grad->data();
                for (int64_t i = 0; i < static_cast<int64_t>(m) * p; ++i) gx[i] += g[i];
            }
            if (pb2.requires_grad) {
                T* gb = pb2.grad->data();
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < p; ++j) gb[j] += g[static_cast<int64_t>(i) * p + j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// nonlinearities and reductions
// ---------------------------------------------------------------------------

// Row-wise softmax over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const int d = x.last_dim();
    const int64_t rows = x.n_rows();
    Tensor<T> out(x.dims, detail::wants_grad(x));
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T* yr = po + r * d;
        T mx = xr[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int j = 0; j < d; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < d; ++j) yr[j] *= inv;
    }
    check_finite(out, "softmax");
    if (out.requires_grad) {
        out.node = make_node<T>({x}, [rows, d](const Tensor<T>& o) {
            const auto& px2 = o.node->parents[0];
            const T* g = o.gptr();
            const T* y = o.ptr();
            T* gx = px2.grad->data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* yr = y + r * d;
                T dot = T(0);
                for (int j = 0; j < d; ++j) dot += gr[j] * yr[j];
                T* gxr = gx + r * d;
                for (int j = 0; j < d; ++j) gxr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// Row-wise normalization over the last axis followed by the affine map
// xhat * gain + bias. Population variance with eps regularization.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const int d = x.last_dim();
    if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias length must match last axis");
    const int64_t rows = x.n_rows();
    Tensor<T> out(x.dims, detail::wants_grad(x) || detail::wants_grad(gain) || detail::wants_grad(bias));
    const T* px = x.ptr();
    const T* pg = gain.ptr();
    const T* pb = bias.ptr();
    T* po = out.ptr();
    std::vector<T> means(static_cast<size_t>(rows)), invstds(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T mean = T(0);
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= T(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        means[static_cast<size_t>(r)] = mean;
        invstds[static_cast<size_t>(r)] = inv;
        T* yr = po + r * d;
        for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * inv * pg[j] + pb[j];
    }
    check_finite(out, "layer_norm");
    if (out.requires_grad) {
        out.node = make_node<T>({x, gain, bias}, [rows, d, means, invstds](const Tensor<T>& o) {
            const auto& px2 = o.node->parents[0];
            const auto& pg2 = o.node->parents[1];
            const auto& pb2 = o.node->parents[2];
            const T* g = o.gptr();
            const T* xv = px2.ptr();
            const T* gv = pg2.ptr();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* xr = xv + r * d;
                const T mean = means[static_cast<size_t>(r)];
                const T inv = invstds[static_cast<size_t>(r)];
                if (pg2.requires_grad) {
                    T* gg = pg2.grad->data();
                    for (int j = 0; j < d; ++j) gg[j] += gr[j] * (xr[j] - mean) * inv;
                }
                if (pb2.requires_grad) {
                    T* gb = pb2.grad->data();
                    for (int j = 0; j < d; ++j) gb[j] += gr[j];
                }
                if (px2.requires_grad) {
                    // dxhat = g*gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (int j = 0; j < d; ++j) {
                        const T xhat = (xr[j] - mean) * inv;
                        const T dxhat = gr[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const T m1 = sum_dxhat / T(d);
                    const T m2 = sum_dxhat_xhat / T(d);
                    T* gx = px2.grad->data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        const T xhat = (xr[j] - mean) * inv;
                        const T dxhat = gr[j] * gv[j];
                        gx[j] += inv * (dxhat - m1 - xhat * m2);
                    }
                }
            }
        });
    }
    return out;
}

// Exact GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out(x.dims, detail::wants_grad(x));
    const int64_t n = out.numel();
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(px[i] * T(0.7071067811865475)));
        po[i] = px[i] * cdf;
    }
    check_finite(out, "gelu");
    if (out.requires_grad) {
        out.node = make_node<T>({x}, [n](const Tensor<T>& o) {
            const auto& px2 = o.node->parents[0];
            const T* g = o.gptr();
            const T* xv = px2.ptr();
            T* gx = px2.grad->data();
            for (int64_t i = 0; i < n; ++i) {
                const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * T(0.7071067811865475)));
                const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * xv[i] * xv[i]);
                gx[i] += g[i] * (cdf + xv[i] * pdf);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    Tensor<T> out({1}, detail::wants_grad(x));
    const int64_t n = x.numel();
    const T* px = x.ptr();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    (*out.data)[0] = acc;
    check_finite(out, "sum");
    if (out.requires_grad) {
        out.node = make_node<T>({x}, [n](const Tensor<T>& o) {
            const auto& px2 = o.node->parents[0];
            const T g = (*o.grad)[0];
            T* gx = px2.grad->data();
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Mean of squared elementwise differences.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require_same_shape(pred, target, "mse");
    Tensor<T> out({1}, detail::wants_grad(pred) || detail::wants_grad(target));
    const int64_t n = pred.numel();
    const T* pa = pred.ptr();
    const T* pb = target.ptr();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T d = pa[i] - pb[i];
        acc += d * d;
    }
    (*out.data)[0] = acc / static_cast<T>(n);
    check_finite(out, "mse");
    if (out.requires_grad) {
        out.node = make_node<T>({pred, target}, [n](const Tensor<T>& o) {
            const auto& pa2 = o.node->parents[0];
            const auto& pb2 = o.node->parents[1];
            const T g = (*o.grad)[0] * T(2) / static_cast<T>(n);
            const T* va = pa2.ptr();
            const T* vb = pb2.ptr();
            if (pa2.requires_grad) {
                T* ga = pa2.grad->data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g * (va[i] - vb[i]);
            }
            if (pb2.requires_grad) {
                T* gb = pb2.grad->data();
                for (int64_t i = 0; i < n; ++i) gb[i] -= g * (va[i] - vb[i]);
            }
        });
    }
    return out;
}

// Cross-entropy over rows of logits vs integer targets; rows with weight 0 are
// excluded. Loss is the mean over included rows. Fused log-softmax for stability.
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                               const std::vector<T>& row_weights) {
    if (logits.rank() != 2) throw ShapeError("masked_cross_entropy: logits must be 2-D");
    const int rows = logits.dims[0], v = logits.dims[1];
    if (static_cast<int>(targets.size()) != rows || static_cast<int>(row_weights.size()) != rows) {
        throw ShapeError("masked_cross_entropy: targets/weights length mismatch");
    }
    T wsum = T(0);
    for (T w : row_weights) wsum += w;
    if (wsum <= T(0)) throw ContractError("masked_cross_entropy: no rows selected");

    Tensor<T> out({1}, detail::wants_grad(logits));
    const T* pl = logits.ptr();
    // cache row log-sum-exp and max for backward
    std::vector<T> lse(static_cast<size_t>(rows));
    T acc = T(0);
    for (int r = 0; r < rows; ++r) {
        if (row_weights[static_cast<size_t>(r)] == T(0)) continue;
        const int tgt = targets[static_cast<size_t>(r)];
        if (tgt < 0 || tgt >= v) throw ShapeError("masked_cross_entropy: target out of range");
        const T* lr = pl + static_cast<int64_t>(r) * v;
        T mx = lr[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
        T s = T(0);
        for (int j = 0; j < v; ++j) s += std::exp(lr[j] - mx);
        const T l = mx + std::log(s);
        lse[static_cast<size_t>(r)] = l;
        acc += row_weights[static_cast<size_t>(r)] * (l - lr[tgt]);
    }
    (*out.data)[0] = acc / wsum;
    check_finite(out, "masked_cross_entropy");
    if (out.requires_grad) {
        out.node = make_node<T>({logits}, [rows, v, targets, row_weights, lse, wsum](const Tensor<T>& o) {
            const auto& pl2 = o.node->parents[0];
            const T g = (*o.grad)[0] / wsum;
            const T* lv = pl2.ptr();
            T* gl = pl2.grad->data();
            for (int r = 0; r < rows; ++r) {
                const T w = row_weights[static_cast<size_t>(r)];
                if (w == T(0)) continue;
                const T* lr = lv + static_cast<int64_t>(r) * v;
                T* gr = gl + static_cast<int64_t>(r) * v;
                const T l = lse[static_cast<size_t>(r)];
                for (int j = 0; j < v; ++j) {
                    const T p = std::exp(lr[j] - l);
                    gr[j] += g * w * (p - (j == targets[static_cast<size_t>(r)] ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// 3x3 convolution, stride 2, zero padding 1. x is {h, w, c_in}, w4 is
// {c_out, c_in, 3, 3}, bias is {c_out}; output {h/2, w/2, c_out}.
template <typename T>
Tensor<T> conv3x3_s2(const Tensor<T>& x, const Tensor<T>& w4, const Tensor<T>& b) {
    if (x.rank() != 3) throw ShapeError("conv3x3_s2: input must be {h,w,c}");
    if (w4.rank() != 4 || w4.dims[2] != 3 || w4.dims[3] != 3) throw ShapeError("conv3x3_s2: kernel must be {co,ci,3,3}");
    const int h = x.dims[0], w = x.dims[1], ci = x.dims[2];
    const int co = w4.dims[0];
    if (w4.dims[1] != ci) throw ShapeError("conv3x3_s2: channel mismatch");
    if (b.numel() != co) throw ShapeError("conv3x3_s2: bias length mismatch");
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("conv3x3_s2: spatial dims must be even");
    const int oh = h / 2, ow = w / 2;

    Tensor<T> out({oh, ow, co}, detail::wants_grad(x) || detail::wants_grad(w4) || detail::wants_grad(b));
    const T* px = x.ptr();
    const T* pw = w4.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            T* orow = po + (static_cast<int64_t>(oy) * ow + ox) * co;
            for (int c = 0; c < co; ++c) orow[c] = pb[c];
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = 2 * oy + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = 2 * ox + kx - 1;
                    if (ix < 0 || ix >= w) continue;
                    const T* xrow = px + (static_cast<int64_t>(iy) * w + ix) * ci;
                    for (int c = 0; c < co; ++c) {
                        const T* kr = pw + ((static_cast<int64_t>(c) * ci) * 9) + (ky * 3 + kx);
                        T acc = T(0);
                        for (int d = 0; d < ci; ++d) acc += xrow[d] * kr[static_cast<int64_t>(d) * 9];
                        orow[c] += acc;
                    }
                }
            }
        }
    }
    check_finite(out, "conv3x3_s2");
    if (out.requires_grad) {
        out.node = make_node<T>({x, w4, b}, [h, w, ci, co, oh, ow](const Tensor<T>& o) {
            const auto& px2 = o.node->parents[0];
            const auto& pw2 = o.node->parents[1];
            const auto& pb2 = o.node->parents[2];
            const T* g = o.gptr();
            const T* xv = px2.ptr();
            const T* wv = pw2.ptr();
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const T* grow = g + (static_cast<int64_t>(oy) * ow + ox) * co;
                    if (pb2.requires_grad) {
                        T* gb = pb2.grad->data();
                        for (int c = 0; c < co; ++c) gb[c] += grow[c];
                    }
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = 2 * oy + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = 2 * ox + kx - 1;
                            if (ix < 0 || ix >= w) continue;
                            const int64_t xoff = (static_cast<int64_t>(iy) * w + ix) * ci;
                            for (int c = 0; c < co; ++c) {
                                const T gc = grow[c];
                                const int64_t woff = (static_cast<int64_t>(c) * ci) * 9 + (ky * 3 + kx);
                                if (pw2.requires_grad) {
                                    T* gw = pw2.grad->data();
                                    for (int d = 0; d < ci; ++d) gw[woff + static_cast<int64_t>(d) * 9] += gc * xv[xoff + d];
                                }
                                if (px2.requires_grad) {
                                    T* gx = px2.grad->data();
                                    for (int d = 0; d < ci; ++d) gx[xoff + d] += gc * wv[woff + static_cast<int64_t>(d) * 9];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Tile a single row k times; backward sums the row gradients.
template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& x, int k) {
    if (x.rank() != 2 || x.dims[0] != 1) throw ShapeError("repeat_rows: operand must be a single row");
    if (k < 1) throw ShapeError("repeat_rows: count must be positive");
    const int d = x.dims[1];
    Tensor<T> out({k, d}, detail::wants_grad(x));
    for (int r = 0; r < k; ++r) std::copy(x.ptr(), x.ptr() + d, out.ptr() + static_cast<int64_t>(r) * d);
    if (out.requires_grad) {
        out.node = make_node<T>({x}, [k, d](const Tensor<T>& o) {
            const auto& px = o.node->parents[0];
            const T* g = o.gptr();
            T* gx = px.grad->data();
            for (int r = 0; r < k; ++r) {
                for (int j = 0; j < d; ++j) gx[j] += g[static_cast<int64_t>(r) * d + j];
            }
        });
    }
    return out;
}

// Forward takes `values` verbatim; backward passes gradients to `v` unchanged.
// This is the gradient contract for hard quantization.
template <typename T>
Tensor<T> straight_through(const Tensor<T>& v, const Tensor<T>& values) {
    detail::require_same_shape(v, values, "straight_through");
    Tensor<T> out(v.dims, detail::wants_grad(v));
    std::copy(values.ptr(), values.ptr() + values.numel(), out.ptr());
    if (out.requires_grad) {
        out.node = make_node<T>({v}, [](const Tensor<T>& o) {
            const auto& pv = o.node->parents[0];
            const T* g = o.gptr();
            T* gv = pv.grad->data();
            const int64_t n = o.numel();
            for (int64_t i = 0; i < n; ++i) gv[i] += g[i];
        });
    }
    return out;
}

// Reshape (same storage size, fresh tensor sharing data; gradient passes through).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> d) {
    int64_t n = 1;
    for (int v : d) n *= v;
    if (n != x.numel()) throw ShapeError("reshape: element count mismatch");
    Tensor<T> out;
    out.dims = std::move(d);
    out.data = x.data;
    out.requires_grad = detail::wants_grad(x);
    if (out.requires_grad) {
        out.grad = std::make_shared<std::vector<T>>(x.data->size(), T(0));
        out.node = make_node<T>({x}, [](const Tensor<T>& o) {
            const auto& px = o.node->parents[0];
            const T* g = o.gptr();
            T* gx = px.grad->data();
            const int64_t n2 = px.numel();
            for (int64_t i = 0; i < n2; ++i) gx[i] += g[i];
        });
    }
    return out;
}

}  // namespace v2flow

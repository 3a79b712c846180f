#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "v2flow/ops.hpp"
#include "v2flow/rng.hpp"
#include "v2flow/tensor.hpp"

namespace v2flow {

// Named references to every trainable tensor of a model, in a fixed order.
// The optimizer and the checkpoint writer both iterate this list.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev) {
    for (auto& v : *t.data) v = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
Tensor<T> param_normal(std::vector<int> dims, Rng& rng, double stddev) {
    Tensor<T> t(std::move(dims), true);
    fill_normal(t, rng, stddev);
    return t;
}

template <typename T>
Tensor<T> param_zeros(std::vector<int> dims) {
    return Tensor<T>(std::move(dims), true);
}

template <typename T>
Tensor<T> param_ones(std::vector<int> dims) {
    return Tensor<T>::full(std::move(dims), T(1), true);
}

// Multi-head scaled dot-product attention. q_src provides queries, kv_src keys
// and values. Optional additive logit mask (e.g. causal), optional sink for the
// per-head attention weights (diagnostics/tests).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_src, const Tensor<T>& kv_src, const Tensor<T>& wq,
                               const Tensor<T>& wk, const Tensor<T>& wv, const Tensor<T>& wo, int heads,
                               const Tensor<T>* logit_mask = nullptr,
                               std::vector<Tensor<T>>* attn_weights_out = nullptr) {
    const int d = q_src.dims[1];
    if (d % heads != 0) throw ConfigError("attention: model width not divisible by head count");
    const int dh = d / heads;
    const Tensor<T> q = matmul(q_src, wq);
    const Tensor<T> k = matmul(kv_src, wk);
    const Tensor<T> v = matmul(kv_src, wv);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const Tensor<T> qh = slice_cols(q, h * dh, dh);
        const Tensor<T> kh = slice_cols(k, h * dh, dh);
        const Tensor<T> vh = slice_cols(v, h * dh, dh);
        Tensor<T> logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (logit_mask) logits = add(logits, *logit_mask);
        const Tensor<T> weights = softmax_lastdim(logits);
        if (attn_weights_out) attn_weights_out->push_back(weights);
        head_outs.push_back(matmul(weights, vh));
    }
    const Tensor<T> merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return matmul(merged, wo);
}

// Pre-norm transformer block: x + MHA(LN(x)), then y + FF(LN(y)).
template <typename T>
struct AttnBlock {
    int dim = 0;
    int heads = 1;
    Tensor<T> ln1_g, ln1_b, wq, wk, wv, wo;
    Tensor<T> ln2_g, ln2_b, ff_w1, ff_b1, ff_w2, ff_b2;

    AttnBlock() = default;

    AttnBlock(int d, int n_heads, int ff_mult, Rng& rng) : dim(d), heads(n_heads) {
        if (d % n_heads != 0) throw ConfigError("attention block: width not divisible by heads");
        const double ws = 0.02;
        ln1_g = param_ones<T>({d});
        ln1_b = param_zeros<T>({d});
        wq = param_normal<T>({d, d}, rng, ws);
        wk = param_normal<T>({d, d}, rng, ws);
        wv = param_normal<T>({d, d}, rng, ws);
        wo = param_normal<T>({d, d}, rng, ws);
        ln2_g = param_ones<T>({d});
        ln2_b = param_zeros<T>({d});
        ff_w1 = param_normal<T>({d, d * ff_mult}, rng, ws);
        ff_b1 = param_zeros<T>({d * ff_mult});
        ff_w2 = param_normal<T>({d * ff_mult, d}, rng, ws);
        ff_b2 = param_zeros<T>({d});
    }

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>* logit_mask = nullptr) const {
        const Tensor<T> normed = layer_norm(x, ln1_g, ln1_b);
        const Tensor<T> attn = multi_head_attention(normed, normed, wq, wk, wv, wo, heads, logit_mask);
        const Tensor<T> mid = add(x, attn);
        const Tensor<T> normed2 = layer_norm(mid, ln2_g, ln2_b);
        const Tensor<T> ff = linear(gelu(linear(normed2, ff_w1, ff_b1)), ff_w2, ff_b2);
        return add(mid, ff);
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".ln1_g", &ln1_g);
        out.emplace_back(prefix + ".ln1_b", &ln1_b);
        out.emplace_back(prefix + ".wq", &wq);
        out.emplace_back(prefix + ".wk", &wk);
        out.emplace_back(prefix + ".wv", &wv);
        out.emplace_back(prefix + ".wo", &wo);
        out.emplace_back(prefix + ".ln2_g", &ln2_g);
        out.emplace_back(prefix + ".ln2_b", &ln2_b);
        out.emplace_back(prefix + ".ff_w1", &ff_w1);
        out.emplace_back(prefix + ".ff_b1", &ff_b1);
        out.emplace_back(prefix + ".ff_w2", &ff_w2);
        out.emplace_back(prefix + ".ff_b2", &ff_b2);
    }
};

// Sinusoidal features of a scalar position over `dim` channels (sin/cos ladder).
template <typename T>
void sinusoidal_features(double pos, int dim, T* out) {
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
        out[2 * i] = static_cast<T>(std::sin(pos * freq));
        out[2 * i + 1] = static_cast<T>(std::cos(pos * freq));
    }
    if (dim % 2 == 1) out[dim - 1] = T(0);
}

// Fixed 2-D sinusoidal positional table for a grid of rows x cols positions,
// row-major. First half of the channels encodes the column, second the row.
template <typename T>
Tensor<T> sinusoidal_grid_positions(int rows, int cols, int dim) {
    Tensor<T> pe({rows * cols, dim});
    const int half = dim / 2;
    std::vector<T> buf(static_cast<size_t>(std::max(half, dim - half)));
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            T* row = pe.ptr() + static_cast<int64_t>(r * cols + c) * dim;
            sinusoidal_features(static_cast<double>(c), half, buf.data());
            std::copy(buf.begin(), buf.begin() + half, row);
            sinusoidal_features(static_cast<double>(r), dim - half, buf.data());
            std::copy(buf.begin(), buf.begin() + (dim - half), row + half);
        }
    }
    return pe;
}

// Embedding of a continuous time value in [0,1]; scaled so the ladder spans
// useful frequencies over the unit interval.
template <typename T>
Tensor<T> time_embedding(const std::vector<double>& ts, int dim) {
    Tensor<T> out({static_cast<int>(ts.size()), dim});
    for (size_t i = 0; i < ts.size(); ++i) {
        sinusoidal_features(ts[i] * 1000.0, dim, out.ptr() + static_cast<int64_t>(i) * dim);
    }
    return out;
}

}  // namespace v2flow

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "v2flow/image.hpp"
#include "v2flow/nn.hpp"
#include "v2flow/ops.hpp"

namespace v2flow {

// Spatial compressor: log2(q) stages of stride-2 3x3 convolution, per-position
// channel normalization, GELU. Channel width doubles per stage up to the target
// latent width.
template <typename T>
struct ConvEncoder {
    int in_channels = 3;
    int factor = 8;      // total spatial downsampling
    int latent_dim = 0;  // output channels
    struct Stage {
        Tensor<T> w, b, ln_g, ln_b;
        int out_ch = 0;
    };
    std::vector<Stage> stages;

    ConvEncoder() = default;

    ConvEncoder(int channels, int downsample_factor, int latent, Rng& rng)
        : in_channels(channels), factor(downsample_factor), latent_dim(latent) {
        int n_stages = 0;
        for (int f = downsample_factor; f > 1; f /= 2) {
            if (f % 2 != 0) throw ConfigError("conv encoder: downsample factor must be a power of two");
            ++n_stages;
        }
        if (n_stages == 0) throw ConfigError("conv encoder: downsample factor must be at least 2");
        if (latent % (1 << (n_stages - 1)) != 0) {
            throw ConfigError("conv encoder: latent width must divide evenly across stages");
        }
        int ci = channels;
        for (int s = 0; s < n_stages; ++s) {
            Stage st;
            st.out_ch = latent >> (n_stages - 1 - s);
            st.w = param_normal<T>({st.out_ch, ci, 3, 3}, rng, 0.1);
            st.b = param_zeros<T>({st.out_ch});
            st.ln_g = param_ones<T>({st.out_ch});
            st.ln_b = param_zeros<T>({st.out_ch});
            ci = st.out_ch;
            stages.push_back(std::move(st));
        }
    }

    // img in [0,1] -> latent grid {h/q, w/q, latent_dim}.
    Tensor<T> forward(const Image& img) const {
        if (img.channels != in_channels) throw ShapeError("conv encoder: channel count mismatch");
        if (img.height % factor != 0 || img.width % factor != 0) {
            throw ShapeError("conv encoder: image dims must be divisible by the downsample factor");
        }
        Tensor<T> x({img.height, img.width, img.channels});
        for (size_t i = 0; i < img.pixels.size(); ++i) (*x.data)[i] = static_cast<T>(img.pixels[i]);
        for (const Stage& st : stages) {
            x = conv3x3_s2(x, st.w, st.b);
            const int h = x.dims[0], w = x.dims[1], c = x.dims[2];
            x = reshape(gelu(layer_norm(reshape(x, {h * w, c}), st.ln_g, st.ln_b)), {h, w, c});
        }
        return x;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        for (size_t s = 0; s < stages.size(); ++s) {
            const std::string p = prefix + ".stage" + std::to_string(s);
            out.emplace_back(p + ".w", &stages[s].w);
            out.emplace_back(p + ".b", &stages[s].b);
            out.emplace_back(p + ".ln_g", &stages[s].ln_g);
            out.emplace_back(p + ".ln_b", &stages[s].ln_b);
        }
    }
};

// Learned-query cross-attention readout: n queries attend over the flattened
// grid, followed by a residual feed-forward. The attention output projection
// and the second feed-forward layer start at zero, so at initialization the
// module passes its base rows through unchanged; with n == h*w the base is the
// row-major flattened grid itself (identity fallback), otherwise the queries.
template <typename T>
struct Resampler {
    int n_out = 0;
    int dim = 0;
    int heads = 1;
    Tensor<T> queries;          // n x dim
    Tensor<T> wq, wk, wv, wo;   // dim x dim
    Tensor<T> ff_w1, ff_b1, ff_w2, ff_b2;

    Resampler() = default;

    Resampler(int n, int d, int n_heads, Rng& rng) : n_out(n), dim(d), heads(n_heads) {
        if (d % n_heads != 0) throw ConfigError("resampler: latent width not divisible by heads");
        queries = param_normal<T>({n, d}, rng, 0.5);
        wq = param_normal<T>({d, d}, rng, 0.02);
        wk = param_normal<T>({d, d}, rng, 0.02);
        wv = param_normal<T>({d, d}, rng, 0.02);
        wo = param_zeros<T>({d, d});
        ff_w1 = param_normal<T>({d, 4 * d}, rng, 0.02);
        ff_b1 = param_zeros<T>({4 * d});
        ff_w2 = param_zeros<T>({4 * d, d});
        ff_b2 = param_zeros<T>({d});
    }

    // grid {h, w, dim} -> sequence {n, dim}; n must not exceed h*w.
    Tensor<T> forward(const Tensor<T>& grid) const {
        if (grid.rank() != 3 || grid.dims[2] != dim) throw ShapeError("resampler: grid must be {h,w,dim}");
        const int hw = grid.dims[0] * grid.dims[1];
        if (n_out > hw) throw ConfigError("resampler: output length exceeds grid size");
        const Tensor<T> seq = reshape(grid, {hw, dim});
        const Tensor<T> base = (n_out == hw) ? seq : queries;
        const Tensor<T> attn = multi_head_attention(base, seq, wq, wk, wv, wo, heads);
        const Tensor<T> mid = add(base, attn);
        const Tensor<T> ff = linear(gelu(linear(mid, ff_w1, ff_b1)), ff_w2, ff_b2);
        return add(mid, ff);
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".queries", &queries);
        out.emplace_back(prefix + ".wq", &wq);
        out.emplace_back(prefix + ".wk", &wk);
        out.emplace_back(prefix + ".wv", &wv);
        out.emplace_back(prefix + ".wo", &wo);
        out.emplace_back(prefix + ".ff_w1", &ff_w1);
        out.emplace_back(prefix + ".ff_b1", &ff_b1);
        out.emplace_back(prefix + ".ff_w2", &ff_w2);
        out.emplace_back(prefix + ".ff_b2", &ff_b2);
    }
};

}  // namespace v2flow
